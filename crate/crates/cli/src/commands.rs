//! The seven subcommand implementations. Every command is a pure
//! function of (config, seed): outputs land under the output directory
//! and carry no timestamps, so reruns are verifiable by hash.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use drgrade_core::dataset::{
    load_csv_index, merge_classes, oversample, stratified_split, synthesize_fundus, DatasetIndex,
    OversampleTarget, Split,
};
use drgrade_core::error::{Error, Result};
use drgrade_core::eval::{class_report, render_report, report_csv, roc_auc_ovr, ConfusionMatrix};
use drgrade_core::explain::{grad_cam, membership_report, render_membership, TargetLayer, upsample_overlay};
use drgrade_core::image::{decode, encode, format_for_path, Format, FundusImage};
use drgrade_core::model::{load_checkpoint, Model, CHECKPOINT_VERSION};
use drgrade_core::rng::{stream, Domain};
use drgrade_core::tensor::Tensor;
use drgrade_core::train::{train_with_progress, verify_batch_gradients, TrainSet};
use drgrade_core::verify::full_suite;
use drgrade_core::ARTIFACT_VERSION;

use crate::config::RunConfig;
use crate::svg::line_plot;

pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = ov.epochs {
        cfg.epochs = epochs;
    }
    if let Some(out) = &ov.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Index construction shared by train and evaluate: source, split,
/// merge, optional train oversampling.
fn build_index(cfg: &RunConfig) -> Result<DatasetIndex> {
    let index = match cfg.dataset.source.as_str() {
        "synthetic" => synthesize_fundus(&cfg.synthetic_spec())?,
        _ => load_csv_index(
            cfg.dataset.csv.as_ref().expect("validated"),
            cfg.dataset.images.as_ref().expect("validated"),
        )?,
    };
    let s = cfg.dataset.split;
    let index = stratified_split(index, (s[0], s[1], s[2]), cfg.seed)?;
    let index = merge_classes(index, cfg.merge_map()?);
    if cfg.dataset.oversample {
        return oversample(&index, Split::Train, &OversampleTarget::Balanced, cfg.seed);
    }
    Ok(index)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn manifest_text(cfg: &RunConfig, index: &DatasetIndex) -> Result<String> {
    Ok(format!(
        "artifact_version={ARTIFACT_VERSION}\n\
         checkpoint_format={CHECKPOINT_VERSION}\n\
         config_sha256={}\n\
         seed={}\n\
         dataset_fingerprint={}\n",
        sha256_hex(cfg.to_toml()?.as_bytes()),
        cfg.seed,
        sha256_hex(index.split_manifest_csv().as_bytes())
    ))
}

pub fn cmd_train(cfg: &RunConfig, verify_grads: bool, emit_svg: bool) -> Result<()> {
    let index = build_index(cfg)?;
    let pre = cfg.preprocess_fn()?;
    let set = TrainSet::load(&index, &pre)?;
    let labels: Vec<usize> = set.train.iter().map(|&(_, l)| l).collect();
    let k = set.num_classes;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out)?;

    let model = Model::<f32>::init(cfg.backbone(), k, cfg.seed)?;
    println!(
        "{} train / {} val samples, {k} classes, {} parameters",
        set.train.len(),
        set.val.len(),
        model.num_scalar_params()
    );

    if verify_grads {
        let loss_cfg = cfg.loss_config(&labels, k)?;
        let count = set.train.len().min(2);
        let worst = verify_batch_gradients(
            &model,
            &set.train[..count],
            &loss_cfg,
            &["head.centroids", "head.sigma_raw", "stage1.conv.bias"],
            1e-5,
        )?;
        println!("gradient check: worst relative error {worst:.3e}");
        if worst >= 1e-4 {
            return Err(Error::numeric(format!(
                "gradient check failed: worst relative error {worst:.3e} >= 1e-4"
            )));
        }
    }

    let train_cfg = cfg.train_config(&labels, k, Some(out.clone()))?;
    let total = train_cfg.epochs;
    let outcome = train_with_progress(model, &set, &train_cfg, &mut |r| {
        println!(
            "epoch {:>3}/{total} train_loss {:.4} val_loss {:.4} train_acc {:.3} val_acc {:.3} lr {:.2e}",
            r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc, r.lr
        );
    })?;

    write_text(&out.join("history.csv"), &outcome.history.to_csv())?;
    write_text(&out.join("manifest.txt"), &manifest_text(cfg, &index)?)?;
    if emit_svg {
        let h = &outcome.history.records;
        let train_loss: Vec<f64> = h.iter().map(|r| r.train_loss).collect();
        let val_loss: Vec<f64> = h.iter().map(|r| r.val_loss).collect();
        let train_acc: Vec<f64> = h.iter().map(|r| r.train_acc).collect();
        let val_acc: Vec<f64> = h.iter().map(|r| r.val_acc).collect();
        write_text(
            &out.join("history_loss.svg"),
            &line_plot("loss per epoch", "loss", &[("train", &train_loss), ("val", &val_loss)]),
        )?;
        write_text(
            &out.join("history_accuracy.svg"),
            &line_plot(
                "accuracy per epoch",
                "accuracy",
                &[("train", &train_acc), ("val", &val_acc)],
            ),
        )?;
    }
    if outcome.best_epoch > 0 {
        println!("best epoch {} (checkpoints under {})", outcome.best_epoch, out.display());
    }
    Ok(())
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::config(format!(
            "split: unknown split {other:?} (expected train, val, or test)"
        ))),
    }
}

/// Batched inference; returns predictions and the flat `n x k` score
/// matrix.
fn predict(
    model: &Model<f32>,
    images: &[FundusImage],
    batch_size: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (h, w) = (model.cfg.input_h, model.cfg.input_w);
    let k = model.num_classes;
    let mut preds = Vec::with_capacity(images.len());
    let mut scores = Vec::with_capacity(images.len() * k);
    for chunk in images.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * h * w);
        for img in chunk {
            if (img.height, img.width) != (h, w) {
                return Err(Error::shape(format!(
                    "inference: image {} is {}x{}, model expects {h}x{w}",
                    img.source_id, img.height, img.width
                )));
            }
            data.extend(img.to_chw());
        }
        let x = Tensor::new(data, &[chunk.len(), 3, h, w])?;
        let probs = model.forward(&x)?.probs.to_vec();
        for row in probs.chunks(k) {
            let mut best = 0usize;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            preds.push(best);
            scores.extend(row.iter().map(|&p| p as f64));
        }
    }
    Ok((preds, scores))
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<()> {
    let split = parse_split(split)?;
    let (model, meta) = load_checkpoint(checkpoint)?;
    let index = build_index(cfg)?;
    let merge = cfg.merge_map()?;
    let k = merge.num_classes();
    if model.num_classes != k {
        return Err(Error::config(format!(
            "checkpoint has {} classes but the dataset merges to {k}",
            model.num_classes
        )));
    }
    if (model.cfg.input_h, model.cfg.input_w) != (cfg.preprocess.size, cfg.preprocess.size) {
        return Err(Error::config(format!(
            "checkpoint expects {}x{} input but preprocess.size is {}",
            model.cfg.input_h, model.cfg.input_w, cfg.preprocess.size
        )));
    }

    let pre = cfg.preprocess_fn()?;
    let mut truth = Vec::new();
    let mut images = Vec::new();
    for &i in &index.split_indices(split) {
        truth.push(index.merged_label(i));
        images.push(pre(index.samples[i].load_image()?)?);
    }
    if images.is_empty() {
        return Err(Error::data(format!("evaluate: empty {} split", split.as_str())));
    }
    println!(
        "evaluating {} {} samples against {} (epoch {})",
        images.len(),
        split.as_str(),
        checkpoint.display(),
        meta.epoch
    );

    let (preds, scores) = predict(&model, &images, cfg.optimizer.batch_size)?;
    let names: Vec<String> = (0..k).map(|i| merge.class_name(i).to_string()).collect();
    let cm = ConfusionMatrix::from_pairs(&truth, &preds, k)?.with_names(names)?;
    let report = class_report(&cm)?;
    let rendered = render_report(&report);
    print!("{rendered}");

    let out = cfg.out_dir.join(format!("eval-{}", split.as_str()));
    write_text(&out.join("report.txt"), &rendered)?;
    write_text(&out.join("report.csv"), &report_csv(&report))?;
    write_text(&out.join("confusion.csv"), &cm.to_csv())?;

    let mut roc_csv = String::from("class,auc\n");
    let mut curves_csv = String::from("class,fpr,tpr\n");
    match roc_auc_ovr(&truth, &scores, k) {
        Ok(roc) => {
            for c in 0..k {
                match roc.per_class[c] {
                    Some(auc) => roc_csv.push_str(&format!("{},{auc}\n", cm.names()[c])),
                    None => roc_csv.push_str(&format!("{},undefined\n", cm.names()[c])),
                }
                for &(fpr, tpr) in &roc.curves[c] {
                    curves_csv.push_str(&format!("{},{fpr},{tpr}\n", cm.names()[c]));
                }
            }
            roc_csv.push_str(&format!("macro,{}\n", roc.macro_auc));
            println!("macro ROC-AUC {:.4}", roc.macro_auc);
        }
        Err(e) => {
            // A single-class split has no one-vs-rest curves to report.
            roc_csv.push_str(&format!("macro,undefined\n# {e}\n"));
        }
    }
    write_text(&out.join("roc.csv"), &roc_csv)?;
    write_text(&out.join("roc_curves.csv"), &curves_csv)?;
    println!("wrote report.txt, report.csv, confusion.csv, roc.csv, roc_curves.csv under {}", out.display());
    Ok(())
}

fn decode_image_file(path: &Path) -> Result<FundusImage> {
    let format = format_for_path(path).ok_or_else(|| {
        Error::data(format!("{}: unsupported image format (expected .ppm or .png)", path.display()))
    })?;
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("image {}: {e}", path.display())))?;
    decode(&bytes, format)
}

pub struct ExplainArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub config: Option<PathBuf>,
    pub class: Option<usize>,
    pub layer: String,
    pub out: PathBuf,
}

pub fn cmd_explain(args: &ExplainArgs, seed_override: Option<u64>) -> Result<()> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let layer = TargetLayer::parse(&args.layer)?;
    let raw = decode_image_file(&args.image)?;

    let ov = Overrides { seed: seed_override, epochs: None, out: None };
    let (img, names) = match &args.config {
        Some(path) => {
            let cfg = load_config(path, &ov)?;
            let merge = cfg.merge_map()?;
            let names: Vec<String> =
                (0..merge.num_classes()).map(|i| merge.class_name(i).to_string()).collect();
            (cfg.preprocess_fn()?(raw)?, Some(names))
        }
        None => (raw.resize(model.cfg.input_h, model.cfg.input_w)?, None),
    };
    if let Some(names) = &names {
        if names.len() != model.num_classes {
            return Err(Error::config(format!(
                "checkpoint has {} classes but the config merges to {}",
                model.num_classes,
                names.len()
            )));
        }
    }

    let x = Tensor::new(img.to_chw(), &[1, 3, img.height, img.width])?;
    let report = membership_report(&model, &x)?;
    let target = match args.class {
        Some(c) if c >= model.num_classes => {
            return Err(Error::config(format!(
                "--class {c} out of range for {} classes",
                model.num_classes
            )))
        }
        Some(c) => c,
        None => report.predicted,
    };
    let heatmap = grad_cam(&model, &x, target, layer)?;
    let overlay = upsample_overlay(&heatmap, &img, 0.5);

    let membership = render_membership(&report, names.as_deref());
    print!("{membership}");
    println!("target class {target}, layer {}", args.layer);
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("overlay.ppm"), encode(&overlay, Format::Ppm)?)?;
    write_text(&args.out.join("heatmap.csv"), &heatmap.to_csv())?;
    write_text(&args.out.join("membership.txt"), &membership)?;
    println!("wrote overlay.ppm, heatmap.csv, membership.txt under {}", args.out.display());
    Ok(())
}

pub fn cmd_preview(cfg: &RunConfig, image: &Path, out: &Path) -> Result<()> {
    let raw = decode_image_file(image)?;
    std::fs::create_dir_all(out)?;
    let save = |name: &str, img: &FundusImage| -> Result<()> {
        std::fs::write(out.join(name), encode(img, Format::Ppm)?)?;
        Ok(())
    };

    let cropped = raw.circular_crop(cfg.preprocess.crop_threshold);
    save("stage1_crop.ppm", &cropped)?;
    let resized = cropped.resize(cfg.preprocess.size, cfg.preprocess.size)?;
    save("stage2_resize.ppm", &resized)?;

    let tiles = (cfg.preprocess.clahe_tiles[0], cfg.preprocess.clahe_tiles[1]);
    let gamma = cfg.gamma_mode()?;
    let enhanced = if cfg.preprocess.clahe_before_gamma {
        let c = resized.clahe(tiles, cfg.preprocess.clahe_clip)?;
        save("stage3_clahe.ppm", &c)?;
        let g = c.gamma_correct(gamma)?;
        save("stage4_gamma.ppm", &g)?;
        g
    } else {
        let g = resized.gamma_correct(gamma)?;
        save("stage3_gamma.ppm", &g)?;
        let c = g.clahe(tiles, cfg.preprocess.clahe_clip)?;
        save("stage4_clahe.ppm", &c)?;
        c
    };

    let mut rng = stream(cfg.seed, Domain::Augment, 0, 0);
    let augmented = enhanced.augment(&cfg.augment_config(), &mut rng)?;
    save("stage5_augment.ppm", &augmented)?;
    println!("wrote 5 stage images under {}", out.display());
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.dataset.source != "synthetic" {
        return Err(Error::config(
            "synth requires dataset.source = \"synthetic\"".to_string(),
        ));
    }
    let index = synthesize_fundus(&cfg.synthetic_spec())?;
    let images_dir = out.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut csv = String::from("id_code,diagnosis\n");
    for sample in &index.samples {
        let img = sample.load_image()?;
        std::fs::write(images_dir.join(format!("{}.ppm", sample.id)), encode(&img, Format::Ppm)?)?;
        csv.push_str(&format!("{},{}\n", sample.id, sample.grade));
    }
    write_text(&out.join("labels.csv"), &csv)?;
    println!(
        "wrote {} images under {} and labels.csv",
        index.samples.len(),
        images_dir.display()
    );
    Ok(())
}

pub fn cmd_init_config(out: &Path) -> Result<()> {
    let text = format!(
        "# Full default run configuration; every key is optional and\n\
         # shown with its default value.\n\n{}",
        RunConfig::default().to_toml()?
    );
    write_text(out, &text)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_verify(seed: u64) -> Result<()> {
    let report = full_suite(seed)?;
    print!("{}", report.render_text());
    if !report.all_passed() {
        return Err(Error::numeric("self-check failed".to_string()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_hex_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn split_names_parse() {
        assert_eq!(parse_split("test").unwrap(), Split::Test);
        assert!(parse_split("holdout").is_err());
    }

    #[test]
    fn manifest_is_deterministic_and_timestamp_free() {
        let cfg = RunConfig::default();
        let index = synthesize_fundus(&cfg.synthetic_spec()).unwrap();
        let a = manifest_text(&cfg, &index).unwrap();
        let b = manifest_text(&cfg, &index).unwrap();
        assert_eq!(a, b);
        for line in a.lines() {
            assert!(line.contains('='), "{line}");
        }
        assert!(a.contains("config_sha256=") && a.contains("dataset_fingerprint="));
    }
}
