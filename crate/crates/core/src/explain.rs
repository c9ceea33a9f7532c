//! Gradient-based localization over the attention-refined feature map,
//! overlay rendering, and fuzzy-membership reports.

use crate::error::{Error, Result};
use crate::image::FundusImage;
use crate::model::{ForwardPass, Model};
use crate::tensor::Tensor;

/// Which cached activation map the localization pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TargetLayer {
    /// Post-attention map F' (the default).
    #[default]
    Refined,
    /// Backbone output before the attention gates.
    Backbone,
}

impl TargetLayer {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "refined" => Ok(TargetLayer::Refined),
            "backbone" => Ok(TargetLayer::Backbone),
            other => Err(Error::config(format!(
                "unknown target layer {other:?}; expected refined or backbone"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TargetLayer::Refined => "refined",
            TargetLayer::Backbone => "backbone",
        }
    }
}

/// Non-negative class-evidence map at feature-map resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    /// True once max-normalized; a zero map normalizes to itself.
    pub normalized: bool,
    pub target_class: usize,
    pub layer: TargetLayer,
}

impl Heatmap {
    /// Scale so the maximum is 1 (no-op on an all-zero map). Idempotent.
    pub fn normalize(mut self) -> Heatmap {
        let max = self.values.iter().cloned().fold(0.0f32, f32::max);
        if max > 0.0 {
            for v in &mut self.values {
                *v /= max;
            }
        }
        self.normalized = true;
        self
    }

    /// `h` rows of `w` comma-separated reals.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Fraction of total heatmap mass whose cell center falls inside any
    /// of the inclusive image-coordinate boxes `[y0, x0, y1, x1]` after
    /// dilating each by `dilate_frac` of the image width on every side.
    pub fn mass_fraction_in_boxes(
        &self,
        boxes: &[[usize; 4]],
        img_h: usize,
        img_w: usize,
        dilate_frac: f64,
    ) -> f64 {
        let total: f64 = self.values.iter().map(|&v| v as f64).sum();
        if total == 0.0 || boxes.is_empty() {
            return 0.0;
        }
        let d = dilate_frac * img_w as f64;
        let mut inside = 0.0f64;
        for y in 0..self.height {
            let iy = (y as f64 + 0.5) * img_h as f64 / self.height as f64;
            for x in 0..self.width {
                let ix = (x as f64 + 0.5) * img_w as f64 / self.width as f64;
                let hit = boxes.iter().any(|b| {
                    iy >= b[0] as f64 - d
                        && iy <= b[2] as f64 + d
                        && ix >= b[1] as f64 - d
                        && ix <= b[3] as f64 + d
                });
                if hit {
                    inside += self.values[y * self.width + x] as f64;
                }
            }
        }
        inside / total
    }
}

fn layer_tensor<'a>(pass: &'a ForwardPass<f32>, layer: TargetLayer) -> &'a Tensor<f32> {
    match layer {
        TargetLayer::Refined => &pass.refined,
        TargetLayer::Backbone => &pass.backbone,
    }
}

/// Class-evidence heatmap for one image.
///
/// Backward target is the pre-softmax class score (the log-membership),
/// not the post-softmax probability, so confident predictions do not
/// saturate the gradient. Channel weights are the spatial averages of
/// the score gradient at the chosen layer; the map is
/// `relu(sum_k alpha_k A^k)`, max-normalized.
pub fn grad_cam(
    model: &Model<f32>,
    input: &Tensor<f32>,
    target_class: usize,
    layer: TargetLayer,
) -> Result<Heatmap> {
    if input.shape().first() != Some(&1) {
        return Err(Error::shape(format!(
            "grad_cam expects a single image [1, 3, h, w], got {:?}",
            input.shape()
        )));
    }
    if target_class >= model.num_classes {
        return Err(Error::config(format!(
            "grad_cam: class {target_class} outside 0..{}",
            model.num_classes
        )));
    }
    let pass = model.forward(input)?;
    let k = model.num_classes;
    let mut onehot = vec![0.0f32; k];
    onehot[target_class] = 1.0;
    let score = pass.logits.mul(&Tensor::new(onehot, &[1, k])?)?.sum_all();
    score.backward()?;
    model.clear_grads();

    let maps = layer_tensor(&pass, layer);
    let shape = maps.shape();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    if h == 0 || w == 0 {
        return Err(Error::shape("grad_cam: empty activation map".to_string()));
    }
    let grad = maps.grad().ok_or_else(|| {
        Error::numeric("grad_cam: no gradient reached the target layer".to_string())
    })?;
    let plane = h * w;
    let data = maps.data();
    let mut values = vec![0.0f32; plane];
    for ch in 0..c {
        let base = ch * plane;
        let alpha: f32 = grad[base..base + plane].iter().sum::<f32>() / plane as f32;
        for p in 0..plane {
            values[p] += alpha * data[base + p];
        }
    }
    for v in &mut values {
        *v = v.max(0.0);
    }
    let hm = Heatmap {
        height: h,
        width: w,
        values,
        normalized: false,
        target_class,
        layer,
    };
    Ok(hm.normalize())
}

/// 256-entry monotone red-to-yellow ramp; fixed so overlays reproduce
/// bit-for-bit.
fn colormap_entry(level: u8) -> [f32; 3] {
    let t = level as f32 / 255.0;
    [0.35 + 0.65 * t, 0.85 * t, 0.06 * (1.0 - t)]
}

/// Blend a heatmap over an image:
/// `out = (1 - a v) img + a v colormap(v)` with `v` the bilinearly
/// upsampled (normalized) heatmap and `a` the clamped alpha.
pub fn upsample_overlay(hm: &Heatmap, img: &FundusImage, alpha: f64) -> FundusImage {
    let hm = if hm.normalized { hm.clone() } else { hm.clone().normalize() };
    let a = alpha.clamp(0.0, 1.0) as f32;
    let (ih, iw) = (img.height, img.width);
    let sy = hm.height as f32 / ih as f32;
    let sx = hm.width as f32 / iw as f32;
    let mut data = img.data.clone();
    for y in 0..ih {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (hm.height - 1) as f32);
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(hm.height - 1);
        for x in 0..iw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (hm.width - 1) as f32);
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(hm.width - 1);
            let top = hm.values[y0 * hm.width + x0] * (1.0 - tx)
                + hm.values[y0 * hm.width + x1] * tx;
            let bottom = hm.values[y1 * hm.width + x0] * (1.0 - tx)
                + hm.values[y1 * hm.width + x1] * tx;
            let v = (top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0);
            let color = colormap_entry((v * 255.0).round() as u8);
            let base = (y * iw + x) * 3;
            for ch in 0..3 {
                let orig = data[base + ch];
                data[base + ch] = ((1.0 - a * v) * orig + a * v * color[ch]).clamp(0.0, 1.0);
            }
        }
    }
    FundusImage { height: ih, width: iw, data, source_id: img.source_id.clone() }
}

/// Raw memberships, normalized probabilities, and the uncertainty of one
/// prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipReport {
    pub memberships: Vec<f32>,
    pub probs: Vec<f32>,
    pub predicted: usize,
    /// Shannon entropy of the probabilities, in nats.
    pub entropy: f64,
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(probs: &[f32]) -> f64 {
    -probs
        .iter()
        .map(|&p| p as f64)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Forward one image and package the fuzzy head outputs.
pub fn membership_report(model: &Model<f32>, input: &Tensor<f32>) -> Result<MembershipReport> {
    if input.shape().first() != Some(&1) {
        return Err(Error::shape(format!(
            "membership report expects a single image [1, 3, h, w], got {:?}",
            input.shape()
        )));
    }
    let pass = model.forward(input)?;
    let probs = pass.probs.to_vec();
    let predicted = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
        .expect("at least two classes")
        .0;
    Ok(MembershipReport {
        memberships: pass.memberships.to_vec(),
        entropy: entropy(&probs),
        probs,
        predicted,
    })
}

/// Structured text: two-decimal display values with full precision in
/// parentheses.
pub fn render_membership(report: &MembershipReport, names: Option<&[String]>) -> String {
    let name = |i: usize| {
        names
            .and_then(|n| n.get(i).cloned())
            .unwrap_or_else(|| format!("class {i}"))
    };
    let mut out = format!("predicted: {} ({})\n", report.predicted, name(report.predicted));
    out.push_str(&format!("entropy: {:.2} ({})\n", report.entropy, report.entropy));
    for (i, (&mu, &p)) in report.memberships.iter().zip(&report.probs).enumerate() {
        out.push_str(&format!("{}: mu {mu:.2} ({mu}), p {p:.2} ({p})\n", name(i)));
    }
    let display: Vec<String> = report.probs.iter().map(|p| format!("{p:.2}")).collect();
    out.push_str(&format!("probs: [{}]\n", display.join(", ")));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneConfig, Model, StageConfig};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            input_h: 8,
            input_w: 8,
            stages: vec![StageConfig { channels: 2, stride: 2, se: false, se_reduction: 1 }],
            head_dim: 2,
        }
    }

    fn rand_input(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..3 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(data, &[1, 3, 8, 8]).unwrap()
    }

    /// Model whose feature map mirrors green-channel brightness: center-tap
    /// convs, zeroed attention, all-positive head projection, and a far
    /// positive centroid for class 0 so the score gradient stays positive.
    fn brightness_model() -> Model<f32> {
        let mut model = Model::init(small_cfg(), 2, 1).unwrap();
        let mut conv = vec![0.0f32; 2 * 3 * 9];
        for out_c in 0..2 {
            conv[out_c * 27 + 9 + 4] = 1.0; // green channel, center tap
        }
        let sets: Vec<(&str, Vec<f32>, Vec<usize>)> = vec![
            ("stage0.conv.weight", conv, vec![2, 3, 3, 3]),
            ("stage0.conv.bias", vec![0.0; 2], vec![2]),
            ("attn.channel.wm", vec![0.0; 4], vec![2, 2]),
            ("attn.channel.wn", vec![0.0; 4], vec![2, 2]),
            ("attn.spatial.kernel", vec![0.0; 2 * 49], vec![1, 2, 7, 7]),
            ("head.proj.weight", vec![0.3; 4], vec![2, 2]),
            ("head.proj.bias", vec![0.0; 2], vec![2]),
            ("head.centroids", vec![10.0, 10.0, -10.0, -10.0], vec![2, 2]),
        ];
        for (name, data, shape) in sets {
            model.set_param(name, Tensor::param(data, &shape).unwrap()).unwrap();
        }
        model
    }

    #[test]
    fn constant_head_gives_zero_heatmap() {
        let mut model = Model::init(small_cfg(), 2, 2).unwrap();
        model
            .set_param("head.proj.weight", Tensor::param(vec![0.0; 4], &[2, 2]).unwrap())
            .unwrap();
        let hm = grad_cam(&model, &rand_input(1), 0, TargetLayer::Refined).unwrap();
        assert!(hm.values.iter().all(|&v| v == 0.0));
        assert!(hm.normalized);
    }

    #[test]
    fn heatmaps_are_non_negative_and_normalization_is_idempotent() {
        let model = Model::init(small_cfg(), 3, 3).unwrap();
        let hm = grad_cam(&model, &rand_input(2), 1, TargetLayer::Refined).unwrap();
        assert_eq!((hm.height, hm.width), (4, 4));
        assert!(hm.values.iter().all(|&v| v >= 0.0));
        let max = hm.values.iter().cloned().fold(0.0f32, f32::max);
        if max > 0.0 {
            assert_eq!(max, 1.0);
        }
        let again = hm.clone().normalize();
        assert_eq!(again.values, hm.values);
    }

    #[test]
    fn heatmap_mass_concentrates_on_a_bright_blob() {
        let model = brightness_model();
        let mut data = vec![0.0f32; 3 * 64];
        for p in 0..64 {
            data[64 + p] = 0.05; // dim green background
        }
        for y in 2..4 {
            for x in 4..6 {
                data[64 + y * 8 + x] = 1.0;
            }
        }
        let input = Tensor::new(data, &[1, 3, 8, 8]).unwrap();
        let hm = grad_cam(&model, &input, 0, TargetLayer::Refined).unwrap();
        let frac = hm.mass_fraction_in_boxes(&[[2, 4, 3, 5]], 8, 8, 0.25);
        assert!(frac >= 0.6, "mass fraction {frac}");
    }

    #[test]
    fn other_class_parameters_do_not_touch_the_heatmap() {
        let model = brightness_model();
        let input = rand_input(5);
        let before = grad_cam(&model, &input, 0, TargetLayer::Refined).unwrap();
        let mut moved = model.clone();
        moved
            .set_param(
                "head.centroids",
                Tensor::param(vec![10.0, 10.0, 3.0, -7.0], &[2, 2]).unwrap(),
            )
            .unwrap();
        let after = grad_cam(&moved, &input, 0, TargetLayer::Refined).unwrap();
        let a: Vec<u32> = before.values.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = after.values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn layer_and_class_arguments_are_validated() {
        let model = Model::init(small_cfg(), 2, 4).unwrap();
        assert!(grad_cam(&model, &rand_input(3), 5, TargetLayer::Refined).is_err());
        assert!(TargetLayer::parse("nonsense").is_err());
        assert_eq!(TargetLayer::parse("backbone").unwrap(), TargetLayer::Backbone);
        let hm = grad_cam(&model, &rand_input(3), 0, TargetLayer::Backbone).unwrap();
        assert_eq!(hm.layer, TargetLayer::Backbone);
    }

    #[test]
    fn overlay_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bytes: Vec<u8> = (0..8 * 8 * 3).map(|_| rng.random()).collect();
        let img = FundusImage::from_rgb8(8, 8, &bytes, "img").unwrap();
        let hm = Heatmap {
            height: 4,
            width: 4,
            values: vec![0.5; 16],
            normalized: true,
            target_class: 0,
            layer: TargetLayer::Refined,
        };
        let same = upsample_overlay(&hm, &img, 0.0);
        assert_eq!(same.data, img.data);

        let zero = Heatmap { values: vec![0.0; 16], ..hm.clone() };
        let same = upsample_overlay(&zero, &img, 0.9);
        assert_eq!(same.data, img.data);

        let full = Heatmap { values: vec![1.0; 16], ..hm };
        let colored = upsample_overlay(&full, &img, 1.0);
        let expected = colormap_entry(255);
        for px in colored.data.chunks_exact(3) {
            assert_eq!(px, expected);
        }
    }

    #[test]
    fn overlay_stays_in_range_and_colormap_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bytes: Vec<u8> = (0..16 * 16 * 3).map(|_| rng.random()).collect();
        let img = FundusImage::from_rgb8(16, 16, &bytes, "img").unwrap();
        let values: Vec<f32> = (0..16).map(|i| i as f32 / 15.0).collect();
        let hm = Heatmap {
            height: 4,
            width: 4,
            values,
            normalized: true,
            target_class: 0,
            layer: TargetLayer::Refined,
        };
        let out = upsample_overlay(&hm, &img, 0.7);
        assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut prev = -1.0f32;
        for level in 0..=255u8 {
            let c = colormap_entry(level);
            let luma = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
            assert!(luma > prev, "colormap not monotone at {level}");
            prev = luma;
        }
    }

    #[test]
    fn membership_report_matches_forward_bitwise() {
        let model = Model::init(small_cfg(), 3, 6).unwrap();
        let input = rand_input(7);
        let report = membership_report(&model, &input).unwrap();
        let pass = model.forward(&input).unwrap();
        let a: Vec<u32> = report.probs.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = pass.probs.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(
            report.predicted,
            report
                .probs
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0
        );
        let sum: f32 = report.probs.iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn centroid_hit_gives_a_near_one_hot_report() {
        let mut model = brightness_model();
        let input = rand_input(8);
        let feature = model.forward(&input).unwrap().features.to_vec();
        let centroids = vec![feature[0], feature[1], feature[0] + 50.0, feature[1] + 50.0];
        model
            .set_param("head.centroids", Tensor::param(centroids, &[2, 2]).unwrap())
            .unwrap();
        let report = membership_report(&model, &input).unwrap();
        assert_eq!(report.predicted, 0);
        assert!(report.probs[0] > 0.999, "{:?}", report.probs);
        assert_relative_eq!(report.memberships[0], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn entropy_of_uniform_is_ln_k() {
        let u = vec![1.0f32 / 3.0; 3];
        assert_relative_eq!(entropy(&u), 3f64.ln(), epsilon = 1e-6);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn rendered_report_carries_a_rounded_probability_vector() {
        let report = MembershipReport {
            memberships: vec![0.2, 0.9, 0.3],
            probs: vec![0.15, 0.62, 0.23],
            predicted: 1,
            entropy: entropy(&[0.15, 0.62, 0.23]),
        };
        let names = vec!["No DR".to_string(), "Mild".to_string(), "Severe".to_string()];
        let text = render_membership(&report, Some(&names));
        assert!(text.contains("predicted: 1 (Mild)"), "{text}");
        assert!(text.contains("probs: [0.15, 0.62, 0.23]"), "{text}");
        let bracket = text.lines().last().unwrap();
        let inner = bracket.trim_start_matches("probs: [").trim_end_matches(']');
        let sum: f64 = inner.split(", ").map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 0.02, "rounded sum {sum}");
        assert!(text.contains(&format!("({})", report.entropy)), "{text}");
    }

    #[test]
    fn heatmap_csv_has_h_rows_of_w_values() {
        let hm = Heatmap {
            height: 2,
            width: 3,
            values: vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125],
            normalized: true,
            target_class: 0,
            layer: TargetLayer::Refined,
        };
        let csv = hm.to_csv();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].split(',').count(), 3);
        assert_eq!(rows[0], "0,0.25,0.5");
    }
}
