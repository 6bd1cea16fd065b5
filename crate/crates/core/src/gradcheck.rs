//! Finite-difference verification of every backward rule, both detector
//! losses and two miniature end-to-end networks, in 64-bit floats.
//!
//! Each check compares analytic gradients with central differences
//! (`h = 1e-3`) and reports the norm-wise relative error
//! `|a - n| / max(|a|, |n|, 1e-6)`, taken as a maximum over the checked
//! tensors.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{generate, AnnotatedImage, SceneSpec};
use crate::error::Result;
use crate::geom::{level_anchors, BBox, LevelConfig, LevelId};
use crate::match_loss::{loss_ssd_stage, loss_uesegnet1, match_anchors, LossWeights, MatchResult, Predictions};
use crate::net::{Model, ModelKind, NetConfig};
use crate::tensor::{Graph, OpKind, Tensor, Var};
use crate::train::{loss_and_grads, loss_only};

pub const STEP: f64 = 1e-3;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of gradient entries compared.
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checks: Vec<CheckResult>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<22} {:>12} {:>10} {:>8}  result\n", "check", "max_rel_err", "tolerance", "entries");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<22} {:>12.3e} {:>10.0e} {:>8}  {}",
                c.name,
                c.max_rel_err,
                c.tolerance,
                c.checked,
                if c.passed() { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "{} of {} checks passed",
            self.checks.iter().filter(|c| c.passed()).count(),
            self.checks.len()
        );
        s
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-6)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Values bounded away from zero so ReLU kinks are never crossed.
fn off_zero_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = random_tensor(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

/// Distinct values spaced 0.05 apart so max-pool winners never change.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).expect("shape matches data")
}

/// Checks `build` with the scalar objective `sum(r * y)` for fixed random `r`.
fn check_op(
    name: &str,
    fault: Option<OpKind>,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let run = |ins: &[Tensor<f64>], with_fault: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        if with_fault {
            if let Some(k) = fault {
                g.inject_fault(k);
            }
        }
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let y = build(&mut g, &vars)?;
        Ok((g, vars, y))
    };
    let (mut g, vars, y) = run(&inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.value(y).len() as u64);
    let r: Vec<f64> = (0..g.value(y).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.backward(&[(y, &r)])?;
    let objective = |ins: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, y) = run(ins, false)?;
        Ok(g.value(y).data().iter().zip(&r).map(|(a, b)| a * b).sum())
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; analytic.len()];
        let mut ins = inputs.clone();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = ins[k].data()[i];
            ins[k].data_mut()[i] = orig + STEP;
            let up = objective(&ins)?;
            ins[k].data_mut()[i] = orig - STEP;
            let down = objective(&ins)?;
            ins[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
        checked += analytic.len();
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: worst,
        tolerance: LAYER_TOLERANCE,
        checked,
    })
}

fn layer_checks(fault: Option<OpKind>, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let conv = |rng: &mut ChaCha8Rng, k: usize, stride: usize, name: &str| {
        let pad = k / 2;
        let ins = vec![
            random_tensor(rng, &[2, 3, 6, 5]),
            random_tensor(rng, &[4, 3, k, k]),
            random_tensor(rng, &[4]),
        ];
        check_op(name, fault, ins, move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad))
    };
    out.push(conv(&mut rng, 1, 1, "conv1x1")?);
    out.push(conv(&mut rng, 3, 1, "conv3x3")?);
    out.push(conv(&mut rng, 3, 2, "conv3x3_stride2")?);
    out.push(check_op("maxpool2", fault, vec![distinct_tensor(&mut rng, &[2, 2, 4, 6])], |g, v| g.maxpool2(v[0]))?);
    out.push(check_op("relu", fault, vec![off_zero_tensor(&mut rng, &[2, 3, 4, 4])], |g, v| Ok(g.relu(v[0])))?);
    out.push(check_op(
        "add",
        fault,
        vec![random_tensor(&mut rng, &[2, 3, 3, 3]), random_tensor(&mut rng, &[2, 3, 3, 3])],
        |g, v| g.add(v[0], v[1]),
    )?);
    out.push(check_op(
        "concat",
        fault,
        vec![
            random_tensor(&mut rng, &[2, 1, 3, 4]),
            random_tensor(&mut rng, &[2, 3, 3, 4]),
            random_tensor(&mut rng, &[2, 2, 3, 4]),
        ],
        |g, v| g.concat_channels(v),
    )?);
    out.push(check_op("upsample2x", fault, vec![random_tensor(&mut rng, &[2, 2, 3, 4])], |g, v| g.upsample2x(v[0]))?);
    out.push(check_op("softmax", fault, vec![random_tensor(&mut rng, &[4, 5])], |g, v| Ok(g.softmax(v[0])))?);
    out.push(check_op("sigmoid", fault, vec![random_tensor(&mut rng, &[3, 4])], |g, v| Ok(g.sigmoid(v[0])))?);
    out.push(check_op(
        "linear",
        fault,
        vec![
            random_tensor(&mut rng, &[3, 6]),
            random_tensor(&mut rng, &[4, 6]),
            random_tensor(&mut rng, &[4]),
        ],
        |g, v| g.linear(v[0], v[1], v[2]),
    )?);
    Ok(())
}

/// Predictions for `m` with well-separated negative losses and regression
/// residuals away from the smooth-L1 knee, so small perturbations never flip
/// a mining decision or cross a kink.
fn separated_predictions(rng: &mut ChaCha8Rng, m: &MatchResult) -> Predictions {
    let n = m.labels.len();
    let mut margins: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / n as f64).collect();
    margins.shuffle(rng);
    let logits = margins
        .iter()
        .map(|&d| {
            let base = rng.random_range(-0.5..0.5);
            [base, base + d]
        })
        .collect();
    let offsets = m
        .targets
        .iter()
        .map(|t| {
            let mut o = [0.0; 4];
            for (oi, ti) in o.iter_mut().zip(t) {
                let mag = if rng.random_bool(0.5) { rng.random_range(0.1..0.9) } else { rng.random_range(1.1..2.0) };
                *oi = ti + if rng.random_bool(0.5) { mag } else { -mag };
            }
            o
        })
        .collect();
    Predictions { logits, offsets }
}

/// Flattens predictions as `[logits..., offsets...]` for perturbation.
fn flatten(p: &[Predictions]) -> Vec<f64> {
    let mut v = Vec::new();
    for q in p {
        v.extend(q.logits.iter().flatten());
        v.extend(q.offsets.iter().flatten());
    }
    v
}

fn unflatten(template: &[Predictions], v: &[f64]) -> Vec<Predictions> {
    let mut it = v.iter().copied();
    template
        .iter()
        .map(|q| Predictions {
            logits: q.logits.iter().map(|_| [it.next().unwrap_or(0.0), it.next().unwrap_or(0.0)]).collect(),
            offsets: q
                .offsets
                .iter()
                .map(|_| {
                    let mut o = [0.0; 4];
                    o.iter_mut().for_each(|x| *x = it.next().unwrap_or(0.0));
                    o
                })
                .collect(),
        })
        .collect()
}

fn check_flat(name: &str, x0: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> Result<f64>) -> Result<CheckResult> {
    let mut x = x0.to_vec();
    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + STEP;
        let up = f(&x)?;
        x[i] = orig - STEP;
        let down = f(&x)?;
        x[i] = orig;
        numeric[i] = (up - down) / (2.0 * STEP);
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err: rel_err(analytic, &numeric),
        tolerance: LAYER_TOLERANCE,
        checked: x.len(),
    })
}

fn loss_checks(out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let levels = [
        LevelConfig {
            level: LevelId::M1,
            stride: 8,
            scales: vec![8.0, 12.0],
            ratios: vec![1.0],
        },
        LevelConfig {
            level: LevelId::M2,
            stride: 16,
            scales: vec![16.0, 24.0],
            ratios: vec![1.0, 0.5],
        },
    ];
    let anchors: Vec<_> = levels.iter().map(|l| level_anchors(32, 32, l)).collect::<Result<_>>()?;
    let gts = [BBox::new(4.0, 6.0, 17.0, 21.0)?, BBox::new(12.0, 9.0, 30.0, 31.0)?];
    let w = LossWeights::default();

    // two-level loss over a batch of two images
    let matches: Vec<Vec<MatchResult>> = gts
        .iter()
        .map(|g| anchors.iter().map(|a| match_anchors(a, &[*g])).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let preds: Vec<Vec<Predictions>> = matches
        .iter()
        .map(|ms| ms.iter().map(|m| separated_predictions(&mut rng, m)).collect())
        .collect();
    let (_, grads) = loss_uesegnet1(&preds, &matches, &w)?;
    let template: Vec<Predictions> = preds.iter().flatten().cloned().collect();
    let analytic = flatten(&grads.iter().flatten().cloned().collect::<Vec<_>>());
    let per_image = preds[0].len();
    out.push(check_flat("loss_two_level", &flatten(&template), &analytic, |x| {
        let flat = unflatten(&template, x);
        let p: Vec<Vec<Predictions>> = flat.chunks(per_image).map(<[Predictions]>::to_vec).collect();
        Ok(loss_uesegnet1(&p, &matches, &w)?.0.total)
    })?);

    // single-stage loss over all anchors of both levels
    let all: Vec<BBox> = anchors.iter().flatten().map(|a| a.bbox).collect();
    let matches: Vec<MatchResult> = gts.iter().map(|g| match_anchors(&all, &[*g])).collect::<Result<_>>()?;
    let preds: Vec<Predictions> = matches.iter().map(|m| separated_predictions(&mut rng, m)).collect();
    let w = LossWeights { alpha: 0.7, ..w };
    let (_, grads) = loss_ssd_stage(&preds, &matches, &w)?;
    out.push(check_flat("loss_single_stage", &flatten(&preds), &flatten(&grads), |x| {
        Ok(loss_ssd_stage(&unflatten(&preds, x), &matches, &w)?.0.total)
    })?);
    Ok(())
}

/// Parameter entries sampled per tensor in the end-to-end checks.
const SAMPLES_PER_TENSOR: usize = 3;
/// Parameters tried per tensor before giving up on finding smooth ones.
const MAX_ATTEMPTS: usize = 12;

fn micro_config(kind: ModelKind) -> NetConfig {
    let mut c = match kind {
        ModelKind::UesegNet1 => NetConfig::uesegnet1_default(),
        ModelKind::SsdStage => NetConfig::ssd_stage_default(),
    };
    c.widths = [3, 3, 4, 4, 4];
    c.reduce_width = 3;
    c.context_width = 2;
    c.ssd_widths = [4, 4, 4, 4, 4];
    match kind {
        ModelKind::UesegNet1 => {
            c.input_size = 32;
            c.m1_scales = vec![8.0, 14.0];
            c.m2_scales = vec![16.0, 24.0];
        }
        // the smallest input whose five SSD grids strictly decrease
        ModelKind::SsdStage => c.input_size = 144,
    }
    c
}

fn micro_batch(size: u32) -> Result<Vec<AnnotatedImage>> {
    let spec = SceneSpec {
        width: size,
        height: size,
        scale_range: (0.3, 0.5),
        distractor_range: (0, 1),
        seed: 5,
        ..Default::default()
    };
    (0..2).map(|i| generate(&spec, i)).collect()
}

/// Whether losses sampled at `-h, -h/2, 0, h/2, h` show a ReLU kink or a
/// pooling switch inside the interval. On a smooth loss the central
/// differences at `h` and `h/2` agree and the second differences scale by
/// four; a kink breaks one or the other.
fn straddles_kink(f: [f64; 5]) -> bool {
    let [m2, m1, z, p1, p2] = f;
    let (c2, c1) = ((p2 - m2) / 2.0, p1 - m1);
    let (b2, b1) = (p2 - 2.0 * z + m2, p1 - 2.0 * z + m1);
    let noise = 1e-12 * z.abs().max(1.0);
    (c2 - c1).abs() > 1e-6 * c2.abs() + noise || (b2 - 4.0 * b1).abs() > 0.5 * b2.abs() + noise
}

fn network_check(kind: ModelKind, fault: Option<OpKind>) -> Result<CheckResult> {
    let cfg = micro_config(kind);
    let mut model = Model::<f64>::new(cfg.clone(), 21)?;
    // positive biases keep most ReLUs well inside their linear piece
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        if i % 2 == 1 {
            p.data_mut().iter_mut().for_each(|b| *b = rng.random_range(0.2..0.6));
        }
    }
    let batch = micro_batch(cfg.input_size as u32)?;
    let w = LossWeights::default();
    let analytic = match fault {
        None => loss_and_grads(&model, &batch, &w)?.1,
        Some(k) => faulty_grads(&model, &batch, &w, k)?,
    };
    let base = loss_only(&model, &batch, &w)?.total;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for t in 0..model.params().len() {
        let len = model.params()[t].len();
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(&mut rng);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &i in idx.iter().take(MAX_ATTEMPTS) {
            if a.len() == SAMPLES_PER_TENSOR {
                break;
            }
            let orig = model.params()[t].data()[i];
            model.params_mut()[t].data_mut()[i] = orig + STEP;
            let up = loss_only(&model, &batch, &w)?.total;
            model.params_mut()[t].data_mut()[i] = orig - STEP;
            let down = loss_only(&model, &batch, &w)?.total;
            model.params_mut()[t].data_mut()[i] = orig + STEP / 2.0;
            let up_half = loss_only(&model, &batch, &w)?.total;
            model.params_mut()[t].data_mut()[i] = orig - STEP / 2.0;
            let down_half = loss_only(&model, &batch, &w)?.total;
            model.params_mut()[t].data_mut()[i] = orig;
            let central = (up - down) / (2.0 * STEP);
            if straddles_kink([down, down_half, base, up_half, up]) {
                continue;
            }
            a.push(analytic[t][i]);
            n.push(central);
        }
        worst = worst.max(rel_err(&a, &n));
        checked += a.len();
    }
    Ok(CheckResult {
        name: match kind {
            ModelKind::UesegNet1 => "net_two_level".into(),
            ModelKind::SsdStage => "net_single_stage".into(),
        },
        max_rel_err: worst,
        tolerance: NETWORK_TOLERANCE,
        checked,
    })
}

/// Gradients with one backward rule corrupted, computed the same way as
/// `loss_and_grads`.
fn faulty_grads(model: &Model<f64>, batch: &[AnnotatedImage], w: &LossWeights, fault: OpKind) -> Result<Vec<Vec<f64>>> {
    use crate::net::{flat_anchor_boxes, images_to_tensor};
    let refs: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let mut g = Graph::new();
    g.inject_fault(fault);
    let x = g.input(images_to_tensor::<f64>(&refs)?);
    let fwd = model.forward(&mut g, x)?;
    let preds = fwd.predictions(&g);
    let grads = match model.config().kind {
        ModelKind::UesegNet1 => {
            let matches: Vec<Vec<MatchResult>> = batch
                .iter()
                .map(|s| model.anchors().iter().map(|a| match_anchors(a, &[s.gt])).collect::<Result<_>>())
                .collect::<Result<_>>()?;
            loss_uesegnet1(&preds, &matches, w)?.1
        }
        ModelKind::SsdStage => {
            let anchors = flat_anchor_boxes(model.anchors());
            let matches: Vec<MatchResult> = batch.iter().map(|s| match_anchors(&anchors, &[s.gt])).collect::<Result<_>>()?;
            let flat: Vec<Predictions> = preds.iter().map(|p| Predictions::concat(p)).collect();
            let lens: Vec<usize> = preds[0].iter().map(Predictions::len).collect();
            loss_ssd_stage(&flat, &matches, w)?.1.iter().map(|g| g.split(&lens)).collect()
        }
    };
    fwd.backward(&mut g, &grads)?;
    Ok(fwd
        .params
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect())
}

/// Runs the whole suite. `fault` corrupts one backward rule in the analytic
/// passes, which the suite must then flag.
pub fn run_suite(fault: Option<OpKind>) -> Result<GradReport> {
    let mut checks = Vec::new();
    layer_checks(fault, &mut checks)?;
    loss_checks(&mut checks)?;
    checks.push(network_check(ModelKind::UesegNet1, fault)?);
    checks.push(network_check(ModelKind::SsdStage, fault)?);
    Ok(GradReport { checks })
}
