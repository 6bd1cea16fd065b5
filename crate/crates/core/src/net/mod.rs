//! Network topologies: the pruned-VGG base, the two-level context-fusion
//! detector (M1/M2 heads) and the five-set SSD stage used by the cascade.

mod serialize;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::geom::{self, Anchor, BBox, Detection, LevelConfig, LevelId};
use crate::match_loss::Predictions;
use crate::tensor::{Graph, Real, Tensor, Var};

pub use serialize::{load_model, read_model, save_model, write_model, FORMAT_VERSION, MAGIC};

/// Classes predicted per anchor: background (0) and ear (1).
pub const NUM_CLASSES: usize = 2;
/// VGG-16 conv counts per block.
pub const BLOCK_CONVS: [usize; 5] = [2, 2, 3, 3, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    UesegNet1,
    SsdStage,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::UesegNet1 => "uesegnet1",
            ModelKind::SsdStage => "ssd_stage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uesegnet1" => Ok(ModelKind::UesegNet1),
            "ssd_stage" => Ok(ModelKind::SsdStage),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Architecture hyper-parameters. Everything needed to rebuild a model.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub kind: ModelKind,
    /// Square input side in pixels; must be a multiple of 16.
    pub input_size: usize,
    /// Channel width of each of the five VGG blocks.
    pub widths: [usize; 5],
    /// Shared width the M1 fusion reduces conv4_3 and conv5_3 to.
    pub reduce_width: usize,
    /// Channels of each of the three context-module branches.
    pub context_width: usize,
    pub m1_scales: Vec<f64>,
    pub m2_scales: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Output width of each of the five SSD extra sets.
    pub ssd_widths: [usize; 5],
    pub ssd_min_scale: f64,
    pub ssd_max_scale: f64,
    pub ssd_ratios: Vec<f64>,
}

impl NetConfig {
    pub fn uesegnet1_default() -> Self {
        NetConfig {
            kind: ModelKind::UesegNet1,
            input_size: 320,
            widths: [8, 16, 32, 64, 64],
            reduce_width: 16,
            context_width: 16,
            m1_scales: vec![32.0, 48.0],
            m2_scales: vec![64.0, 96.0],
            ratios: vec![1.0],
            ssd_widths: [64, 32, 32, 32, 32],
            ssd_min_scale: 0.1,
            ssd_max_scale: 0.9,
            ssd_ratios: vec![1.0, 0.6],
        }
    }

    pub fn ssd_stage_default() -> Self {
        NetConfig {
            kind: ModelKind::SsdStage,
            input_size: 160,
            ..Self::uesegnet1_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return bad(format!("input_size {} must be a positive multiple of 16", self.input_size));
        }
        if self.widths.iter().chain(&self.ssd_widths).any(|&w| w == 0)
            || self.reduce_width == 0
            || self.context_width == 0
        {
            return bad("channel widths must be positive".into());
        }
        if self.kind == ModelKind::SsdStage {
            let grids = self.ssd_grids();
            if grids.windows(2).any(|w| w[1] >= w[0]) || grids[4] == 0 {
                return bad(format!(
                    "input {} too small: SSD set grids {grids:?} must strictly decrease",
                    self.input_size
                ));
            }
            if !(self.ssd_min_scale > 0.0 && self.ssd_max_scale > self.ssd_min_scale) {
                return bad("ssd scales must satisfy 0 < min < max".into());
            }
        }
        for lvl in self.levels() {
            if lvl.scales.is_empty() || lvl.ratios.is_empty() {
                return bad(format!("level {:?} has no anchors", lvl.level));
            }
        }
        Ok(())
    }

    /// Grid side of each SSD set: `input/16`, then stride-2 same-padded halvings.
    pub fn ssd_grids(&self) -> [usize; 5] {
        let mut g = [self.input_size / 16; 5];
        for i in 1..5 {
            g[i] = g[i - 1].div_ceil(2);
        }
        g
    }

    /// Anchor configuration of every prediction level, in head order.
    pub fn levels(&self) -> Vec<LevelConfig> {
        match self.kind {
            ModelKind::UesegNet1 => vec![
                LevelConfig {
                    level: LevelId::M1,
                    stride: 8,
                    scales: self.m1_scales.clone(),
                    ratios: self.ratios.clone(),
                },
                LevelConfig {
                    level: LevelId::M2,
                    stride: 16,
                    scales: self.m2_scales.clone(),
                    ratios: self.ratios.clone(),
                },
            ],
            ModelKind::SsdStage => {
                // sizes grow geometrically from min to max scale across the sets
                let size = |i: usize| {
                    let t = i as f64 / 4.0;
                    self.input_size as f64
                        * self.ssd_min_scale
                        * (self.ssd_max_scale / self.ssd_min_scale).powf(t)
                };
                (0..5)
                    .map(|i| {
                        let s = size(i);
                        let next = if i < 4 { size(i + 1) } else { self.input_size as f64 };
                        LevelConfig {
                            level: LevelId::ssd_set(i),
                            stride: 16 << i,
                            scales: vec![s, (s * next).sqrt()],
                            ratios: self.ssd_ratios.clone(),
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        m.set("model", self.kind.name());
        m.set("input_size", self.input_size);
        m.set_list("widths", &self.widths);
        m.set("reduce_width", self.reduce_width);
        m.set("context_width", self.context_width);
        m.set_list("m1_scales", &self.m1_scales);
        m.set_list("m2_scales", &self.m2_scales);
        m.set_list("ratios", &self.ratios);
        m.set_list("ssd_widths", &self.ssd_widths);
        m.set("ssd_min_scale", self.ssd_min_scale);
        m.set("ssd_max_scale", self.ssd_max_scale);
        m.set_list("ssd_ratios", &self.ssd_ratios);
        m
    }

    /// Reads architecture keys from `m`; missing keys take the defaults of
    /// the model kind.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let kind = ModelKind::parse(m.get("model").unwrap_or("uesegnet1"))?;
        let d = match kind {
            ModelKind::UesegNet1 => Self::uesegnet1_default(),
            ModelKind::SsdStage => Self::ssd_stage_default(),
        };
        let five = |key: &str, dflt: [usize; 5]| -> Result<[usize; 5]> {
            m.list_or(key, &dflt)?
                .try_into()
                .map_err(|_| Error::Config(format!("`{key}` needs exactly 5 values")))
        };
        let cfg = NetConfig {
            kind,
            input_size: m.parse_or("input_size", d.input_size)?,
            widths: five("widths", d.widths)?,
            reduce_width: m.parse_or("reduce_width", d.reduce_width)?,
            context_width: m.parse_or("context_width", d.context_width)?,
            m1_scales: m.list_or("m1_scales", &d.m1_scales)?,
            m2_scales: m.list_or("m2_scales", &d.m2_scales)?,
            ratios: m.list_or("ratios", &d.ratios)?,
            ssd_widths: five("ssd_widths", d.ssd_widths)?,
            ssd_min_scale: m.parse_or("ssd_min_scale", d.ssd_min_scale)?,
            ssd_max_scale: m.parse_or("ssd_max_scale", d.ssd_max_scale)?,
            ssd_ratios: m.list_or("ssd_ratios", &d.ssd_ratios)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRole {
    Body,
    Head,
}

/// One convolution layer of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub role: LayerRole,
}

impl ConvSpec {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn param_count(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel + self.out_c
    }
}

struct SpecBuilder(Vec<ConvSpec>);

impl SpecBuilder {
    fn conv(&mut self, name: String, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> usize {
        self.0.push(ConvSpec {
            name,
            in_c,
            out_c,
            kernel,
            stride,
            role: LayerRole::Body,
        });
        out_c
    }

    fn head(&mut self, name: String, in_c: usize, out_c: usize, kernel: usize) {
        self.0.push(ConvSpec {
            name,
            in_c,
            out_c,
            kernel,
            stride: 1,
            role: LayerRole::Head,
        });
    }

    fn context(&mut self, prefix: &str, in_c: usize, width: usize) -> usize {
        self.conv(format!("{prefix}.ctx3"), in_c, width, 3, 1);
        self.conv(format!("{prefix}.ctx5a"), in_c, width, 3, 1);
        self.conv(format!("{prefix}.ctx5b"), width, width, 3, 1);
        self.conv(format!("{prefix}.ctx7a"), in_c, width, 3, 1);
        self.conv(format!("{prefix}.ctx7b"), width, width, 3, 1);
        self.conv(format!("{prefix}.ctx7c"), width, width, 3, 1);
        3 * width
    }
}

/// Ordered conv layers of the architecture. The forward pass consumes them in
/// exactly this order.
pub fn layer_specs(cfg: &NetConfig) -> Vec<ConvSpec> {
    let mut b = SpecBuilder(Vec::new());
    let mut c = 3;
    for (blk, (&n, &w)) in BLOCK_CONVS.iter().zip(&cfg.widths).enumerate() {
        for i in 0..n {
            c = b.conv(format!("conv{}_{}", blk + 1, i + 1), c, w, 3, 1);
        }
    }
    let levels = cfg.levels();
    match cfg.kind {
        ModelKind::UesegNet1 => {
            let r = cfg.reduce_width;
            b.conv("m1.reduce4".into(), cfg.widths[3], r, 1, 1);
            b.conv("m1.reduce5".into(), cfg.widths[4], r, 1, 1);
            b.conv("m1.fuse".into(), r, r, 3, 1);
            let ctx = b.context("m1", r, cfg.context_width);
            let k = levels[0].anchors_per_cell();
            b.head("m1.cls".into(), ctx, 2 * k, 1);
            b.head("m1.reg".into(), ctx, 4 * k, 1);
            let ctx = b.context("m2", cfg.widths[4], cfg.context_width);
            let k = levels[1].anchors_per_cell();
            b.head("m2.cls".into(), ctx, 2 * k, 1);
            b.head("m2.reg".into(), ctx, 4 * k, 1);
        }
        ModelKind::SsdStage => {
            let w = cfg.ssd_widths;
            for i in 0..4 {
                c = b.conv(format!("set1.conv{}", i + 1), c, w[0], 3, 1);
            }
            c = b.conv("set1.conv5".into(), c, w[0], 1, 1);
            b.head("set1.head".into(), c, levels[0].anchors_per_cell() * (NUM_CLASSES + 4), 3);
            for s in 1..5 {
                let mid = (w[s] / 2).max(1);
                b.conv(format!("set{}.conv1", s + 1), c, mid, 1, 1);
                c = b.conv(format!("set{}.conv2", s + 1), mid, w[s], 3, 2);
                b.head(
                    format!("set{}.head", s + 1),
                    c,
                    levels[s].anchors_per_cell() * (NUM_CLASSES + 4),
                    3,
                );
            }
        }
    }
    b.0
}

/// Output of one prediction level on the graph.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub level: LevelId,
    /// Anchors per cell.
    pub k: usize,
    pub grid: (usize, usize),
    /// `[N, 2K, H, W]` logits, or the fused `[N, K(c+4), H, W]` tensor.
    pub cls: Var,
    /// `[N, 4K, H, W]` offsets; equal to `cls` when `fused`.
    pub reg: Var,
    pub fused: bool,
}

impl HeadOutput {
    /// Flat index of a class logit of anchor `slot` at `(row, col)` of image `n`.
    fn cls_index(&self, n: usize, slot: usize, class: usize, row: usize, col: usize) -> usize {
        let (h, w) = self.grid;
        let (channels, ch) = if self.fused {
            (self.k * (NUM_CLASSES + 4), slot * (NUM_CLASSES + 4) + class)
        } else {
            (NUM_CLASSES * self.k, NUM_CLASSES * slot + class)
        };
        ((n * channels + ch) * h + row) * w + col
    }

    fn reg_index(&self, n: usize, slot: usize, m: usize, row: usize, col: usize) -> usize {
        let (h, w) = self.grid;
        let (channels, ch) = if self.fused {
            (self.k * (NUM_CLASSES + 4), slot * (NUM_CLASSES + 4) + NUM_CLASSES + m)
        } else {
            (4 * self.k, 4 * slot + m)
        };
        ((n * channels + ch) * h + row) * w + col
    }

    pub fn num_anchors(&self) -> usize {
        self.grid.0 * self.grid.1 * self.k
    }

    /// Per-anchor logits and offsets of image `n`, in anchor order.
    pub fn gather<T: Real>(&self, g: &Graph<T>, n: usize) -> Predictions {
        let cls = g.value(self.cls).data();
        let reg = g.value(self.reg).data();
        let mut p = Predictions::with_capacity(self.num_anchors());
        for row in 0..self.grid.0 {
            for col in 0..self.grid.1 {
                for s in 0..self.k {
                    let mut l = [0.0; NUM_CLASSES];
                    for (j, v) in l.iter_mut().enumerate() {
                        *v = cls[self.cls_index(n, s, j, row, col)].to_f64().unwrap_or(f64::NAN);
                    }
                    let mut o = [0.0; 4];
                    for (m, v) in o.iter_mut().enumerate() {
                        *v = reg[self.reg_index(n, s, m, row, col)].to_f64().unwrap_or(f64::NAN);
                    }
                    p.logits.push(l);
                    p.offsets.push(o);
                }
            }
        }
        p
    }

    /// Adds per-anchor gradients of image `n` into seed buffers for the head
    /// tensors. For fused heads `reg_seed` is `None` and everything lands in
    /// `cls_seed`.
    pub fn scatter<T: Real>(&self, grads: &Predictions, n: usize, cls_seed: &mut [T], mut reg_seed: Option<&mut [T]>) {
        let mut a = 0;
        for row in 0..self.grid.0 {
            for col in 0..self.grid.1 {
                for s in 0..self.k {
                    for j in 0..NUM_CLASSES {
                        cls_seed[self.cls_index(n, s, j, row, col)] += T::lit(grads.logits[a][j]);
                    }
                    for m in 0..4 {
                        let idx = self.reg_index(n, s, m, row, col);
                        let v = T::lit(grads.offsets[a][m]);
                        match reg_seed.as_deref_mut() {
                            Some(r) => r[idx] += v,
                            None => cls_seed[idx] += v,
                        }
                    }
                    a += 1;
                }
            }
        }
    }
}

/// Variables produced by one forward pass.
pub struct Forward {
    pub params: Vec<Var>,
    pub heads: Vec<HeadOutput>,
}

impl Forward {
    /// Per-image, per-level predictions read from the graph.
    pub fn predictions<T: Real>(&self, g: &Graph<T>) -> Vec<Vec<Predictions>> {
        let n = g.value(self.heads[0].cls).shape()[0];
        (0..n)
            .map(|i| self.heads.iter().map(|h| h.gather(g, i)).collect())
            .collect()
    }

    /// Backpropagates per-image, per-level prediction gradients.
    pub fn backward<T: Real>(&self, g: &mut Graph<T>, grads: &[Vec<Predictions>]) -> Result<()> {
        let mut seeds: Vec<(Var, Vec<T>)> = Vec::new();
        for (lvl, h) in self.heads.iter().enumerate() {
            let mut cls_seed = vec![T::zero(); g.value(h.cls).len()];
            let mut reg_seed = (!h.fused).then(|| vec![T::zero(); g.value(h.reg).len()]);
            for (n, per_image) in grads.iter().enumerate() {
                h.scatter(&per_image[lvl], n, &mut cls_seed, reg_seed.as_deref_mut());
            }
            seeds.push((h.cls, cls_seed));
            if let Some(r) = reg_seed {
                seeds.push((h.reg, r));
            }
        }
        let refs: Vec<(Var, &[T])> = seeds.iter().map(|(v, s)| (*v, s.as_slice())).collect();
        g.backward(&refs)
    }
}

/// A network: architecture plus parameters (weight, bias per conv layer).
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: NetConfig,
    specs: Vec<ConvSpec>,
    params: Vec<Tensor<T>>,
    anchors: Vec<Vec<Anchor>>,
}

impl<T: Real> Model<T> {
    /// Builds the architecture with seeded He-uniform initialization.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, spec) in m.specs.iter().enumerate() {
            let fan_in = (spec.in_c * spec.kernel * spec.kernel) as f64;
            let bound = match spec.role {
                LayerRole::Body => (6.0 / fan_in).sqrt(),
                LayerRole::Head => 0.1 * (3.0 / fan_in).sqrt(),
            };
            for v in m.params[2 * i].data_mut() {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(m)
    }

    /// Architecture with every weight and bias set to zero.
    pub fn zeroed(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let specs = layer_specs(&config);
        let mut params = Vec::with_capacity(2 * specs.len());
        for s in &specs {
            params.push(Tensor::zeros(&[s.out_c, s.in_c, s.kernel, s.kernel]));
            params.push(Tensor::zeros(&[s.out_c]));
        }
        let anchors = config
            .levels()
            .iter()
            .map(|l| geom::level_anchors(config.input_size, config.input_size, l))
            .collect::<Result<_>>()?;
        Ok(Model {
            config,
            specs,
            params,
            anchors,
        })
    }

    pub(crate) fn from_parts(config: NetConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let mut m = Self::zeroed(config)?;
        if params.len() != m.params.len() {
            return Err(Error::ModelFormat(format!(
                "architecture has {} parameter tensors, file has {}",
                m.params.len(),
                params.len()
            )));
        }
        for (i, (dst, src)) in m.params.iter_mut().zip(params).enumerate() {
            if dst.shape() != src.shape() {
                return Err(Error::ModelFormat(format!(
                    "parameter {i}: shape {:?} does not match architecture {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
        Ok(m)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ConvSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    /// Anchors of each level, in head order.
    pub fn anchors(&self) -> &[Vec<Anchor>] {
        &self.anchors
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            anchors: self.anchors.clone(),
        }
    }

    /// Records the forward pass of `input` (`[N, 3, S, S]`) on `g`.
    pub fn forward(&self, g: &mut Graph<T>, input: Var) -> Result<Forward> {
        let shape = g.value(input).dims4()?;
        let s = self.config.input_size;
        if shape.1 != 3 || shape.2 != s || shape.3 != s {
            return Err(Error::Shape(format!(
                "model expects [N, 3, {s}, {s}], got {:?}",
                g.value(input).shape()
            )));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let mut cur = Cursor {
            specs: &self.specs,
            params: &params,
            next: 0,
        };
        let mut x = input;
        let mut taps = Vec::new();
        for (blk, &n) in BLOCK_CONVS.iter().enumerate() {
            for _ in 0..n {
                x = cur.conv(g, x, true)?;
            }
            taps.push(x);
            if blk < 4 {
                x = g.maxpool2(x)?;
            }
        }
        let (conv4_3, conv5_3) = (taps[3], taps[4]);
        let levels = self.config.levels();
        let mut heads = Vec::new();
        match self.config.kind {
            ModelKind::UesegNet1 => {
                let r4 = cur.conv(g, conv4_3, false)?;
                let r5 = cur.conv(g, conv5_3, false)?;
                let up = g.upsample2x(r5)?;
                if g.value(up).shape() != g.value(r4).shape() {
                    return Err(Error::Shape(format!(
                        "M1 fusion: upsampled conv5_3 {:?} vs conv4_3 {:?}",
                        g.value(up).shape(),
                        g.value(r4).shape()
                    )));
                }
                let fused = g.add(r4, up)?;
                let fused = cur.conv(g, fused, true)?;
                let ctx = cur.context(g, fused)?;
                heads.push(cur.split_head(g, ctx, &levels[0])?);
                let ctx = cur.context(g, conv5_3)?;
                heads.push(cur.split_head(g, ctx, &levels[1])?);
            }
            ModelKind::SsdStage => {
                for _ in 0..4 {
                    x = cur.conv(g, x, true)?;
                }
                x = cur.conv(g, x, true)?;
                heads.push(cur.fused_head(g, x, &levels[0])?);
                for lvl in &levels[1..] {
                    x = cur.conv(g, x, true)?;
                    x = cur.conv(g, x, true)?;
                    heads.push(cur.fused_head(g, x, lvl)?);
                }
            }
        }
        debug_assert_eq!(cur.next, self.specs.len());
        Ok(Forward { params, heads })
    }

    /// Runs the network on a batch and returns detections per image, sorted
    /// by descending score. Boxes are in input-tensor pixels, clamped to the
    /// input bounds.
    pub fn infer(&self, input: &Tensor<T>, score_threshold: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
        if !(0.0..=1.0).contains(&score_threshold) || !(0.0..=1.0).contains(&nms_iou) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must lie in [0, 1] (score {score_threshold}, nms {nms_iou})"
            )));
        }
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let fwd = self.forward(&mut g, x)?;
        let preds = fwd.predictions(&g);
        Ok(preds
            .iter()
            .map(|levels| self.decode_detections(levels, score_threshold, nms_iou))
            .collect())
    }

    /// Softmax, decode, threshold and NMS over the per-level predictions of one image.
    pub fn decode_detections(&self, levels: &[Predictions], score_threshold: f64, nms_iou: f64) -> Vec<Detection> {
        let side = self.config.input_size as f64;
        let mut dets = Vec::new();
        for (pred, anchors) in levels.iter().zip(&self.anchors) {
            for (i, a) in anchors.iter().enumerate() {
                let score = ear_probability(&pred.logits[i]);
                if score < score_threshold {
                    continue;
                }
                let mut o = pred.offsets[i];
                o[2] = o[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
                o[3] = o[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
                let Ok(b) = geom::decode(&o, &a.bbox) else { continue };
                let Some(b) = b.clamp(side, side) else { continue };
                dets.push(Detection {
                    bbox: b,
                    score,
                    source_level: a.level,
                });
            }
        }
        geom::nms(&dets, nms_iou)
    }
}

/// Bound on predicted log-scale offsets at decode time.
const MAX_LOG_SCALE: f64 = 6.0;

/// Softmax probability of the ear class from `(background, ear)` logits.
pub fn ear_probability(logits: &[f64; NUM_CLASSES]) -> f64 {
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

struct Cursor<'a> {
    specs: &'a [ConvSpec],
    params: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn conv<T: Real>(&mut self, g: &mut Graph<T>, x: Var, relu: bool) -> Result<Var> {
        let spec = &self.specs[self.next];
        let (w, b) = (self.params[2 * self.next], self.params[2 * self.next + 1]);
        self.next += 1;
        let y = g.conv2d(x, w, b, spec.stride, spec.pad())?;
        Ok(if relu { g.relu(y) } else { y })
    }

    fn context<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let b3 = self.conv(g, x, true)?;
        let b5 = self.conv(g, x, true)?;
        let b5 = self.conv(g, b5, true)?;
        let b7 = self.conv(g, x, true)?;
        let b7 = self.conv(g, b7, true)?;
        let b7 = self.conv(g, b7, true)?;
        g.concat_channels(&[b3, b5, b7])
    }

    fn grid<T: Real>(g: &Graph<T>, v: Var) -> Result<(usize, usize)> {
        let (_, _, h, w) = g.value(v).dims4()?;
        Ok((h, w))
    }

    fn split_head<T: Real>(&mut self, g: &mut Graph<T>, x: Var, lvl: &LevelConfig) -> Result<HeadOutput> {
        let cls = self.conv(g, x, false)?;
        let reg = self.conv(g, x, false)?;
        Ok(HeadOutput {
            level: lvl.level,
            k: lvl.anchors_per_cell(),
            grid: Self::grid(g, cls)?,
            cls,
            reg,
            fused: false,
        })
    }

    fn fused_head<T: Real>(&mut self, g: &mut Graph<T>, x: Var, lvl: &LevelConfig) -> Result<HeadOutput> {
        let out = self.conv(g, x, false)?;
        Ok(HeadOutput {
            level: lvl.level,
            k: lvl.anchors_per_cell(),
            grid: Self::grid(g, out)?,
            cls: out,
            reg: out,
            fused: true,
        })
    }
}

/// Converts grayscale images to a `[N, 3, H, W]` tensor scaled to `[-1, 1]`,
/// replicating the gray plane into three channels.
pub fn images_to_tensor<T: Real>(images: &[&GrayImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape(format!(
                "batch mixes image sizes {:?} and {:?}",
                (w, h),
                img.dimensions()
            )));
        }
        let gray: Vec<T> = img.as_raw().iter().map(|&p| T::lit(p as f64 / 127.5 - 1.0)).collect();
        for _ in 0..3 {
            data.extend_from_slice(&gray);
        }
    }
    Tensor::new(vec![images.len(), 3, h as usize, w as usize], data)
}

/// Anchors of a model flattened across levels.
pub fn flat_anchor_boxes(anchors: &[Vec<Anchor>]) -> Vec<BBox> {
    anchors.iter().flatten().map(|a| a.bbox).collect()
}

#[cfg(test)]
mod tests;
