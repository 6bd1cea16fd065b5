//! Run configuration and the SGD training loop for both detector kinds.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cascade::resize_sample;
use crate::config::KvMap;
use crate::data::{augment, AnnotatedImage, AugmentPolicy};
use crate::error::{Error, Result};
use crate::match_loss::{loss_ssd_stage, loss_uesegnet1, match_anchors, LossBreakdown, LossWeights, MatchResult, NegativeMining, Predictions};
use crate::net::{flat_anchor_boxes, images_to_tensor, Model, ModelKind, NetConfig};
use crate::tensor::{Graph, Real, Sgd};

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the first epoch; interpolated linearly to `lr_final`
    /// at the last epoch.
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub loss: LossWeights,
    pub nms_iou: f64,
    pub score_threshold: f64,
    /// Parameter initialisation seed.
    pub init_seed: u64,
    /// Seed for epoch shuffling and augmentation draws.
    pub shuffle_seed: u64,
    pub augment: AugmentPolicy,
}

impl RunConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        let (net, momentum) = match kind {
            ModelKind::UesegNet1 => (NetConfig::uesegnet1_default(), 0.9),
            ModelKind::SsdStage => (NetConfig::ssd_stage_default(), 0.8),
        };
        RunConfig {
            net,
            epochs: 30,
            batch_size: 8,
            lr_initial: 0.003,
            lr_final: 0.004,
            momentum,
            weight_decay: 0.0004,
            grad_clip: 0.0,
            loss: LossWeights::default(),
            nms_iou: 0.7,
            score_threshold: 0.5,
            init_seed: 42,
            shuffle_seed: 42,
            augment: AugmentPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be non-negative");
        }
        if !((0.0..=1.0).contains(&self.nms_iou) && (0.0..=1.0).contains(&self.score_threshold)) {
            return bad("nms_iou and score_threshold must lie in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate of 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_initial;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.lr_initial + (self.lr_final - self.lr_initial) * t
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = self.net.to_kv();
        m.set("epochs", self.epochs);
        m.set("batch_size", self.batch_size);
        m.set("lr_initial", self.lr_initial);
        m.set("lr_final", self.lr_final);
        m.set("momentum", self.momentum);
        m.set("weight_decay", self.weight_decay);
        m.set("grad_clip", self.grad_clip);
        m.set("lambda", self.loss.lambda);
        m.set("alpha", self.loss.alpha);
        match self.loss.mining {
            NegativeMining::Ratio(r) => m.set("neg_ratio", r),
            NegativeMining::All => m.set("neg_ratio", "all"),
        }
        m.set("nms_iou", self.nms_iou);
        m.set("score_threshold", self.score_threshold);
        m.set("init_seed", self.init_seed);
        m.set("shuffle_seed", self.shuffle_seed);
        m.set("flip_prob", self.augment.flip_prob);
        m.set("rotate_prob", self.augment.rotate_prob);
        m.set("max_rotation_deg", self.augment.max_rotation_deg);
        m.set("blur_prob", self.augment.blur_prob);
        m.set("max_blur_sigma", self.augment.max_blur_sigma);
        m
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    /// Reads a config; missing keys take the defaults of the model kind.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        const KNOWN: &[&str] = &[
            "model", "input_size", "widths", "reduce_width", "context_width", "m1_scales", "m2_scales", "ratios",
            "ssd_widths", "ssd_min_scale", "ssd_max_scale", "ssd_ratios", "epochs", "batch_size", "lr_initial",
            "lr_final", "momentum", "weight_decay", "grad_clip", "lambda", "alpha", "neg_ratio", "nms_iou", "score_threshold",
            "init_seed", "shuffle_seed", "flip_prob", "rotate_prob", "max_rotation_deg", "blur_prob",
            "max_blur_sigma",
        ];
        if let Some(k) = m.keys().find(|k| !KNOWN.contains(k)) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let net = NetConfig::from_kv(m)?;
        let d = RunConfig::for_kind(net.kind);
        let mining = match m.get("neg_ratio") {
            Some("all") => NegativeMining::All,
            _ => NegativeMining::Ratio(m.parse_or(
                "neg_ratio",
                match d.loss.mining {
                    NegativeMining::Ratio(r) => r,
                    NegativeMining::All => 3.0,
                },
            )?),
        };
        let cfg = RunConfig {
            net,
            epochs: m.parse_or("epochs", d.epochs)?,
            batch_size: m.parse_or("batch_size", d.batch_size)?,
            lr_initial: m.parse_or("lr_initial", d.lr_initial)?,
            lr_final: m.parse_or("lr_final", d.lr_final)?,
            momentum: m.parse_or("momentum", d.momentum)?,
            weight_decay: m.parse_or("weight_decay", d.weight_decay)?,
            grad_clip: m.parse_or("grad_clip", d.grad_clip)?,
            loss: LossWeights {
                lambda: m.parse_or("lambda", d.loss.lambda)?,
                alpha: m.parse_or("alpha", d.loss.alpha)?,
                mining,
            },
            nms_iou: m.parse_or("nms_iou", d.nms_iou)?,
            score_threshold: m.parse_or("score_threshold", d.score_threshold)?,
            init_seed: m.parse_or("init_seed", d.init_seed)?,
            shuffle_seed: m.parse_or("shuffle_seed", d.shuffle_seed)?,
            augment: AugmentPolicy {
                flip_prob: m.parse_or("flip_prob", d.augment.flip_prob)?,
                rotate_prob: m.parse_or("rotate_prob", d.augment.rotate_prob)?,
                max_rotation_deg: m.parse_or("max_rotation_deg", d.augment.max_rotation_deg)?,
                blur_prob: m.parse_or("blur_prob", d.augment.blur_prob)?,
                max_blur_sigma: m.parse_or("max_blur_sigma", d.augment.max_blur_sigma)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

/// Losses of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    /// 1-based, counted across epochs.
    pub step: usize,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    pub steps: Vec<StepLoss>,
    /// Parameters after the epoch with the lowest mean total loss.
    pub best: Model<f32>,
    pub best_epoch: usize,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,cls,reg,total";
pub const STEP_CSV_HEADER: &str = "step,cls,reg,total";

pub fn epoch_csv(rows: &[EpochLoss]) -> String {
    let mut s = format!("{EPOCH_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.cls, r.reg, r.total);
    }
    s
}

pub fn step_csv(rows: &[StepLoss]) -> String {
    let mut s = format!("{STEP_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.cls, r.reg, r.total);
    }
    s
}

/// Anchor assignment of one sample in the layout its loss expects.
fn match_sample<T: Real>(model: &Model<T>, gt: &crate::geom::BBox) -> Result<Vec<MatchResult>> {
    match model.config().kind {
        ModelKind::UesegNet1 => model.anchors().iter().map(|a| match_anchors(a, &[*gt])).collect(),
        ModelKind::SsdStage => Ok(vec![match_anchors(&flat_anchor_boxes(model.anchors()), &[*gt])?]),
    }
}

/// Loss of a batch without the backward pass through the network.
pub fn loss_only<T: Real>(model: &Model<T>, batch: &[AnnotatedImage], w: &LossWeights) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let fwd = forward_batch(model, &mut g, batch)?;
    Ok(batch_loss(model, &fwd.predictions(&g), batch, w)?.0)
}

fn forward_batch<T: Real>(model: &Model<T>, g: &mut Graph<T>, batch: &[AnnotatedImage]) -> Result<crate::net::Forward> {
    let refs: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let x = g.input(images_to_tensor::<T>(&refs)?);
    model.forward(g, x)
}

#[allow(clippy::type_complexity)]
fn batch_loss<T: Real>(
    model: &Model<T>,
    preds: &[Vec<Predictions>],
    batch: &[AnnotatedImage],
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<Predictions>>)> {
    let matches: Vec<Vec<MatchResult>> = batch.iter().map(|s| match_sample(model, &s.gt)).collect::<Result<_>>()?;
    Ok(match model.config().kind {
        ModelKind::UesegNet1 => loss_uesegnet1(preds, &matches, w)?,
        ModelKind::SsdStage => {
            let flat: Vec<Predictions> = preds.iter().map(|p| Predictions::concat(p)).collect();
            let single: Vec<MatchResult> = matches.into_iter().map(|mut m| m.remove(0)).collect();
            let (loss, flat_grads) = loss_ssd_stage(&flat, &single, w)?;
            let lens: Vec<usize> = preds[0].iter().map(Predictions::len).collect();
            (loss, flat_grads.iter().map(|g| g.split(&lens)).collect())
        }
    })
}

/// One forward/backward pass. Returns the losses and the parameter gradients.
pub fn loss_and_grads<T: Real>(model: &Model<T>, batch: &[AnnotatedImage], w: &LossWeights) -> Result<(LossBreakdown, Vec<Vec<T>>)> {
    let mut g = Graph::new();
    let fwd = forward_batch(model, &mut g, batch)?;
    let (loss, grads) = batch_loss(model, &fwd.predictions(&g), batch, w)?;
    if !loss.total.is_finite() {
        return Ok((loss, Vec::new()));
    }
    fwd.backward(&mut g, &grads)?;
    let param_grads = fwd
        .params
        .iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => vec![T::zero(); g.value(v).len()],
        })
        .collect();
    Ok((loss, param_grads))
}

/// Resizes samples to the model input when their size differs.
pub fn prepare(samples: &[AnnotatedImage], input_size: usize) -> Result<Vec<AnnotatedImage>> {
    samples.iter().map(|s| resize_sample(s, input_size as u32)).collect()
}

/// Trains `model` in place. `on_epoch` runs after each epoch, for example to
/// write checkpoints; an error from it stops training.
pub fn train(
    cfg: &RunConfig,
    model: &mut Model<f32>,
    samples: &[AnnotatedImage],
    mut on_epoch: impl FnMut(&EpochLoss, &Model<f32>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.config() != &cfg.net {
        return Err(Error::Config("model architecture differs from the run config".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let data = prepare(samples, cfg.net.input_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut sgd = Sgd::<f32>::new(cfg.lr_initial, cfg.momentum, cfg.weight_decay);
    sgd.clip_norm = (cfg.grad_clip > 0.0).then_some(cfg.grad_clip);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    for epoch in 0..cfg.epochs {
        sgd.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut cls, mut reg, mut total, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<AnnotatedImage> = chunk
                .iter()
                .map(|&i| augment(&data[i], &cfg.augment.sample(&mut rng)).or_else(|_| Ok::<_, Error>(data[i].clone())))
                .collect::<Result<_>>()?;
            let step = steps.len() + 1;
            let (loss, grads) = loss_and_grads(model, &batch, &cfg.loss)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "step {step} (epoch {}): loss is {} (cls {}, reg {})",
                    epoch + 1,
                    loss.total,
                    loss.cls,
                    loss.reg
                )));
            }
            sgd.step(model.params_mut(), &grads)
                .map_err(|e| Error::NonFinite(format!("step {step} (epoch {}): {e}", epoch + 1)))?;
            steps.push(StepLoss {
                step,
                cls: loss.cls,
                reg: loss.reg,
                total: loss.total,
            });
            let k = batch.len() as f64;
            cls += loss.cls * k;
            reg += loss.reg * k;
            total += loss.total * k;
            n += batch.len();
        }
        let e = EpochLoss {
            epoch: epoch + 1,
            lr: sgd.lr,
            cls: cls / n as f64,
            reg: reg / n as f64,
            total: total / n as f64,
        };
        info!(
            "epoch {}/{}: lr {:.5} cls {:.4} reg {:.4} total {:.4}",
            e.epoch, cfg.epochs, e.lr, e.cls, e.reg, e.total
        );
        if best.as_ref().is_none_or(|b| e.total < b.0) {
            best = Some((e.total, e.epoch, model.clone()));
        }
        on_epoch(&e, model)?;
        epochs.push(e);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainReport {
        epochs,
        steps,
        best,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SceneSpec};

    fn tiny(kind: ModelKind) -> RunConfig {
        let mut c = RunConfig::for_kind(kind);
        c.net.input_size = 64;
        c.net.widths = [4, 4, 8, 8, 8];
        c.net.reduce_width = 4;
        c.net.context_width = 4;
        c.net.ssd_widths = [8, 8, 8, 8, 8];
        c.net.m1_scales = vec![12.0, 20.0];
        c.net.m2_scales = vec![24.0, 36.0];
        c.batch_size = 2;
        if kind == ModelKind::SsdStage {
            c.net.input_size = 144;
        }
        c
    }

    fn scenes(n: u64) -> Vec<AnnotatedImage> {
        let spec = SceneSpec {
            width: 64,
            height: 64,
            scale_range: (0.3, 0.5),
            ..Default::default()
        };
        (0..n).map(|i| generate(&spec, i).unwrap()).collect()
    }

    #[test]
    fn config_round_trip_and_defaults() {
        for kind in [ModelKind::UesegNet1, ModelKind::SsdStage] {
            let mut c = RunConfig::for_kind(kind);
            c.lr_final = 0.0015;
            c.loss.mining = NegativeMining::All;
            let back = RunConfig::parse(&c.to_text()).unwrap();
            assert_eq!(back, c);
        }
        let c = RunConfig::parse("model = ssd_stage\n").unwrap();
        assert_eq!(c.momentum, 0.8);
        assert_eq!(c.net.input_size, 160);
        let c = RunConfig::parse("").unwrap();
        assert_eq!((c.momentum, c.lr_initial, c.lr_final, c.weight_decay), (0.9, 0.003, 0.004, 0.0004));
        assert!(RunConfig::parse("epochs = 0").is_err());
        assert!(RunConfig::parse("lr_initial = -1").is_err());
        assert!(RunConfig::parse("bogus = 1").is_err());
    }

    #[test]
    fn lr_is_linear_between_endpoints() {
        let mut c = RunConfig::for_kind(ModelKind::UesegNet1);
        c.epochs = 11;
        assert_eq!(c.lr_at(0), 0.003);
        assert!((c.lr_at(10) - 0.004).abs() < 1e-15);
        assert!((c.lr_at(5) - 0.0035).abs() < 1e-15);
        c.epochs = 1;
        assert_eq!(c.lr_at(0), 0.003);
    }

    #[test]
    fn loss_traces_repeat_exactly() {
        for kind in [ModelKind::UesegNet1, ModelKind::SsdStage] {
            let mut cfg = tiny(kind);
            cfg.epochs = 2;
            let data = scenes(6);
            let run = || {
                let mut m = Model::new(cfg.net.clone(), 3).unwrap();
                train(&cfg, &mut m, &data, |_, _| Ok(())).unwrap()
            };
            let (a, b) = (run(), run());
            assert_eq!(a.steps.len(), 6);
            let bits = |r: &TrainReport| r.steps.iter().map(|s| s.total.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn single_image_overfits() {
        // momentum makes the two-level net overshoot once the loss is tiny
        let runs = [(ModelKind::UesegNet1, 400, 0.0, 0.05), (ModelKind::SsdStage, 300, 0.9, 0.002)];
        for (kind, epochs, momentum, lr) in runs {
            let mut cfg = tiny(kind);
            cfg.net.widths = [8, 8, 16, 16, 16];
            cfg.net.ssd_min_scale = 0.15;
            cfg.epochs = epochs;
            cfg.momentum = momentum;
            cfg.lr_initial = lr;
            cfg.lr_final = lr;
            cfg.batch_size = 1;
            cfg.augment = AugmentPolicy::none();
            let data = scenes(1);
            let mut m = Model::new(cfg.net.clone(), 5).unwrap();
            let r = train(&cfg, &mut m, &data, |_, _| Ok(())).unwrap();
            let totals: Vec<f64> = r.epochs.iter().map(|e| e.total).collect();
            let last = *totals.last().unwrap();
            assert!(last < 0.05, "{kind:?}: final loss {last}");
            assert!(last < totals[0] / 20.0);
        }
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let mut cfg = tiny(ModelKind::UesegNet1);
        cfg.epochs = 1;
        let data = scenes(4);
        let mut m = Model::new(cfg.net.clone(), 1).unwrap();
        m.params_mut()[0].data_mut()[0] = f32::NAN;
        match train(&cfg, &mut m, &data, |_, _| Ok(())) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("step 1"), "{msg}"),
            other => panic!("{:?}", other.map(|r| r.steps)),
        }
    }

    #[test]
    fn epoch_csv_format() {
        let rows = [EpochLoss {
            epoch: 1,
            lr: 0.003,
            cls: 0.5,
            reg: 0.25,
            total: 0.75,
        }];
        assert_eq!(epoch_csv(&rows), "epoch,cls,reg,total\n1,0.5,0.25,0.75\n");
    }
}
