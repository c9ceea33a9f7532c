//! Self-check suites: every differentiable operation against central
//! finite differences in 64-bit, and the evaluation metrics against
//! brute-force oracles. The CLI `verify` command runs both; the
//! integration suite reuses them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{class_report, roc_auc_ovr, ConfusionMatrix};
use crate::model::{BackboneConfig, Model, StageConfig};
use crate::tensor::{finite_diff_check, Padding, Tensor};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst observed error (relative for gradients, absolute for metrics).
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed() { "ok  " } else { "FAIL" };
            out.push_str(&format!(
                "{status} {:<32} worst {:>12.3e} tolerance {:>8.0e}\n",
                c.name, c.worst, c.tolerance
            ));
        }
        let failed = self.checks.iter().filter(|c| !c.passed()).count();
        out.push_str(&format!(
            "{} checks, {} failed\n",
            self.checks.len(),
            failed
        ));
        out
    }
}

const OP_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::param(data, shape).expect("valid shape")
}

/// Signed values bounded away from zero, for ops with a kink or pole at 0.
fn rand_param_offzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|_| {
            let v: f64 = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::param(data, shape).expect("valid shape")
}

/// Finite-difference every differentiable operation on randomized small
/// shapes, plus the fully composed model. Deterministic in `seed`.
pub fn gradient_oracle_suite(seed: u64) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerifyReport::default();
    let mut dim = {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        move || r.random_range(2..5usize)
    };

    let run = |report: &mut VerifyReport,
                   name: &str,
                   tol: f64,
                   inputs: Vec<Tensor<f64>>,
                   f: Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>|
     -> Result<()> {
        let worst = finite_diff_check(|ts| f(ts), &inputs, FD_EPS)?;
        report.checks.push(CheckResult { name: name.to_string(), worst, tolerance: tol });
        Ok(())
    };

    let (n, m) = (dim(), dim());
    run(
        &mut report,
        "add_sub_mul_neg",
        OP_TOL,
        vec![rand_param(&mut rng, &[n, m], -2.0, 2.0), rand_param(&mut rng, &[n, m], -2.0, 2.0)],
        Box::new(|ts| {
            let s = ts[0].add(&ts[1])?.mul(&ts[0].sub(&ts[1])?)?;
            Ok(s.neg().sum_all())
        }),
    )?;

    let k = dim();
    run(
        &mut report,
        "scalar_ops",
        OP_TOL,
        vec![rand_param(&mut rng, &[k, k], -2.0, 2.0)],
        Box::new(|ts| {
            Ok(ts[0].add_scalar(0.7).mul_scalar(-1.3).rsub_scalar(0.25).one_minus().sum_all())
        }),
    )?;

    run(
        &mut report,
        "relu",
        OP_TOL,
        vec![rand_param_offzero(&mut rng, &[dim(), dim()])],
        Box::new(|ts| Ok(ts[0].relu().mul(&ts[0].relu())?.sum_all())),
    )?;

    run(
        &mut report,
        "sigmoid_exp_softplus",
        OP_TOL,
        vec![rand_param(&mut rng, &[dim() * dim()], -3.0, 3.0)],
        Box::new(|ts| Ok(ts[0].sigmoid().add(&ts[0].exp())?.add(&ts[0].softplus())?.sum_all())),
    )?;

    run(
        &mut report,
        "ln_recip_pow",
        OP_TOL,
        vec![rand_param(&mut rng, &[dim(), dim()], 0.4, 2.5)],
        Box::new(|ts| {
            let a = ts[0].ln_clamped(1e-12);
            let b = ts[0].recip();
            let c = ts[0].pow_const(1.7);
            Ok(a.add(&b)?.add(&c)?.sum_all())
        }),
    )?;

    run(
        &mut report,
        "sum_mean",
        OP_TOL,
        vec![rand_param(&mut rng, &[dim(), dim()], -1.0, 1.0)],
        Box::new(|ts| Ok(ts[0].mean_all().add(&ts[0].sum_all())?.sum_all())),
    )?;

    let (a, b, c) = (dim(), dim(), dim());
    run(
        &mut report,
        "matmul_dense_bias",
        OP_TOL,
        vec![
            rand_param(&mut rng, &[a, b], -1.0, 1.0),
            rand_param(&mut rng, &[b, c], -1.0, 1.0),
            rand_param(&mut rng, &[c], -1.0, 1.0),
        ],
        Box::new(|ts| {
            let d = ts[0].dense(&ts[1], &ts[2])?;
            Ok(d.mul(&d)?.sum_all())
        }),
    )?;

    let (r, cc) = (dim(), dim());
    let weight = rand_param(&mut rng, &[r, cc], -1.0, 1.0);
    let weight_data = weight.to_vec();
    run(
        &mut report,
        "softmax_rows",
        OP_TOL,
        vec![rand_param(&mut rng, &[r, cc], -2.0, 2.0)],
        Box::new(move |ts| {
            let w = Tensor::new(weight_data.clone(), &[r, cc])?;
            Ok(ts[0].softmax_rows()?.mul(&w)?.sum_all())
        }),
    )?;

    let (p, q, d) = (dim(), dim(), dim());
    run(
        &mut report,
        "pairwise_sqdist_scale_cols",
        OP_TOL,
        vec![
            rand_param(&mut rng, &[p, d], -1.0, 1.0),
            rand_param(&mut rng, &[q, d], -1.0, 1.0),
            rand_param(&mut rng, &[q], 0.5, 1.5),
        ],
        Box::new(|ts| Ok(ts[0].pairwise_sqdist(&ts[1])?.scale_cols(&ts[2])?.sum_all())),
    )?;

    run(
        &mut report,
        "col_sum",
        OP_TOL,
        vec![rand_param(&mut rng, &[dim(), dim()], -1.0, 1.0)],
        Box::new(|ts| {
            let s = ts[0].col_sum(0)?;
            Ok(s.mul(&s)?.sum_all())
        }),
    )?;

    for (name, stride, padding) in [
        ("conv2d_same_s1", 1usize, Padding::Same),
        ("conv2d_same_s2", 2, Padding::Same),
        ("conv2d_valid", 1, Padding::Valid),
    ] {
        run(
            &mut report,
            name,
            OP_TOL,
            vec![
                rand_param(&mut rng, &[2, 2, 5, 5], -1.0, 1.0),
                rand_param(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
                rand_param(&mut rng, &[3], -0.5, 0.5),
            ],
            Box::new(move |ts| {
                let y = ts[0].conv2d(&ts[1], stride, padding)?.add_channel_bias(&ts[2])?;
                Ok(y.mul(&y)?.sum_all())
            }),
        )?;
    }

    run(
        &mut report,
        "pools_and_gates",
        OP_TOL,
        vec![
            rand_param_offzero(&mut rng, &[2, 3, 4, 4]),
            rand_param(&mut rng, &[2, 3], 0.2, 0.9),
            rand_param(&mut rng, &[2, 1, 4, 4], 0.2, 0.9),
        ],
        Box::new(|ts| {
            let gated = ts[0].scale_channels(&ts[1])?.scale_spatial(&ts[2])?;
            let pooled = gated.global_avg_pool()?.add(&gated.global_max_pool()?)?;
            let cp = gated.channel_pool()?;
            Ok(pooled.sum_all().add(&cp.mul(&cp)?.sum_all())?.sum_all())
        }),
    )?;

    let cfg = BackboneConfig {
        input_h: 8,
        input_w: 8,
        stages: vec![
            StageConfig { channels: 4, stride: 2, se: true, se_reduction: 2 },
            StageConfig { channels: 8, stride: 2, se: false, se_reduction: 1 },
        ],
        head_dim: 6,
    };
    let model = Model::<f64>::init(cfg, 3, seed)?;
    let input = rand_param(&mut rng, &[2, 3, 8, 8], 0.0, 1.0).detach();
    let readout = rand_param(&mut rng, &[2, 3], -1.0, 1.0).to_vec();
    let params: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    let worst = finite_diff_check(
        |ts| {
            let m = model.with_params(ts)?;
            let out = m.forward(&input)?;
            let w = Tensor::new(readout.clone(), &[2, 3])?;
            Ok(out.probs.mul(&w)?.sum_all())
        },
        &params,
        1e-4,
    )?;
    report.checks.push(CheckResult {
        name: "full_model".to_string(),
        worst,
        tolerance: MODEL_TOL,
    });

    Ok(report)
}

/// Randomized confusion / report / AUC instances against brute-force
/// counting and pairwise oracles.
pub fn metric_oracle_suite(seed: u64, instances: usize) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_count = 0.0f64;
    let mut worst_metric = 0.0f64;
    let mut worst_auc = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(20..=200usize);
        let k = rng.random_range(2..=5usize);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let cm = ConfusionMatrix::from_pairs(&truth, &pred, k)?;
        for i in 0..k {
            for j in 0..k {
                let brute =
                    truth.iter().zip(&pred).filter(|&(&t, &p)| t == i && p == j).count() as u64;
                worst_count = worst_count.max((cm.at(i, j) as f64 - brute as f64).abs());
            }
        }
        let report = class_report(&cm)?;
        for c in 0..k {
            let tp = truth.iter().zip(&pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
            let fp = truth.iter().zip(&pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
            let fn_ = truth.iter().zip(&pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            worst_metric = worst_metric.max((report.classes[c].precision - precision).abs());
            worst_metric = worst_metric.max((report.classes[c].recall - recall).abs());
            worst_metric = worst_metric.max((report.classes[c].f1 - f1).abs());
        }

        // Quantized scores force tie handling through the rank path.
        let scores: Vec<f64> =
            (0..n * k).map(|_| rng.random_range(0..12) as f64 / 11.0).collect();
        if let Ok(roc) = roc_auc_ovr(&truth, &scores, k) {
            for c in 0..k {
                let Some(auc) = roc.per_class[c] else { continue };
                let mut credit = 0.0f64;
                let mut pairs = 0u64;
                for i in 0..n {
                    if truth[i] != c {
                        continue;
                    }
                    for j in 0..n {
                        if truth[j] == c {
                            continue;
                        }
                        pairs += 1;
                        let (sp, sn) = (scores[i * k + c], scores[j * k + c]);
                        if sp > sn {
                            credit += 1.0;
                        } else if sp == sn {
                            credit += 0.5;
                        }
                    }
                }
                worst_auc = worst_auc.max((auc - credit / pairs as f64).abs());
            }
        }
    }
    Ok(VerifyReport {
        checks: vec![
            CheckResult {
                name: "confusion_vs_counting".to_string(),
                worst: worst_count,
                tolerance: 0.5,
            },
            CheckResult {
                name: "report_vs_counting".to_string(),
                worst: worst_metric,
                tolerance: 1e-15,
            },
            CheckResult { name: "auc_vs_pairwise".to_string(), worst: worst_auc, tolerance: 1e-9 },
        ],
    })
}

/// Both suites back to back.
pub fn full_suite(seed: u64) -> Result<VerifyReport> {
    let mut report = gradient_oracle_suite(seed)?;
    report.checks.extend(metric_oracle_suite(seed.wrapping_add(1), 100)?.checks);
    Ok(report)
}
