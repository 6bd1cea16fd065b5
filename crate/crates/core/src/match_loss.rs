//! Anchor/ground-truth matching and the detector losses.
//!
//! Both losses work on plain per-anchor arrays ([`Predictions`]) and return
//! analytic gradients in the same layout, so they can be checked in
//! isolation and then scattered back onto the network heads.

use crate::error::{Error, Result};
use crate::geom::{self, Anchor, BBox};
use crate::net::NUM_CLASSES;

/// IOU above which an anchor is labelled positive.
pub const POSITIVE_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
}

/// Per-anchor assignment. `matched_gt[i] = Some(j)` is the `x_ij = 1` entry.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    pub matched_gt: Vec<Option<usize>>,
    /// Encoded regression target of each positive (zeros for negatives).
    pub targets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.labels[i] == AnchorLabel::Positive
    }
}

impl AsRef<BBox> for Anchor {
    fn as_ref(&self) -> &BBox {
        &self.bbox
    }
}

impl AsRef<BBox> for BBox {
    fn as_ref(&self) -> &BBox {
        self
    }
}

/// Labels an anchor positive when its best IOU with any GT exceeds 0.5, and
/// additionally forces each GT's highest-IOU anchor positive (lowest anchor
/// index on ties) so that every GT has at least one positive.
pub fn match_anchors<A: AsRef<BBox>>(anchors: &[A], gts: &[BBox]) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("match: empty anchor list".into()));
    }
    if gts.is_empty() {
        return Err(Error::InvalidArgument("match: at least one ground-truth box is required".into()));
    }
    for g in gts {
        g.validate()?;
    }
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut matched = vec![None; n];
    let mut best_anchor = vec![(0usize, f64::NEG_INFINITY); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        let a = a.as_ref();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (j, g) in gts.iter().enumerate() {
            let v = a.iou(g);
            if v > best.1 {
                best = (j, v);
            }
            if v > best_anchor[j].1 {
                best_anchor[j] = (i, v);
            }
        }
        if best.1 > POSITIVE_IOU {
            labels[i] = AnchorLabel::Positive;
            matched[i] = Some(best.0);
        }
    }
    for (j, &(i, _)) in best_anchor.iter().enumerate() {
        labels[i] = AnchorLabel::Positive;
        matched[i] = Some(j);
    }
    let mut targets = vec![[0.0; 4]; n];
    for i in 0..n {
        if let Some(j) = matched[i] {
            targets[i] = geom::encode(&gts[j], anchors[i].as_ref())?;
        }
    }
    Ok(MatchResult {
        labels,
        matched_gt: matched,
        targets,
    })
}

/// Per-anchor raw outputs of one level (or of all sets) for one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    /// `(background, ear)` logits.
    pub logits: Vec<[f64; NUM_CLASSES]>,
    pub offsets: Vec<[f64; 4]>,
}

impl Predictions {
    pub fn with_capacity(n: usize) -> Self {
        Predictions {
            logits: Vec::with_capacity(n),
            offsets: Vec::with_capacity(n),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Predictions {
            logits: vec![[0.0; NUM_CLASSES]; n],
            offsets: vec![[0.0; 4]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn concat(parts: &[Predictions]) -> Predictions {
        let mut out = Predictions::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            out.logits.extend_from_slice(&p.logits);
            out.offsets.extend_from_slice(&p.offsets);
        }
        out
    }

    /// Splits into consecutive chunks of the given lengths.
    pub fn split(&self, lens: &[usize]) -> Vec<Predictions> {
        let mut start = 0;
        lens.iter()
            .map(|&n| {
                let p = Predictions {
                    logits: self.logits[start..start + n].to_vec(),
                    offsets: self.offsets[start..start + n].to_vec(),
                };
                start += n;
                p
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NegativeMining {
    /// Keep the `ratio x #positives` highest-loss negatives.
    Ratio(f64),
    /// Every negative anchor contributes.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Regression weight of the two-level loss.
    pub lambda: f64,
    /// Regression weight of the SSD-stage loss.
    pub alpha: f64,
    pub mining: NegativeMining,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            alpha: 1.0,
            mining: NegativeMining::Ratio(3.0),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok_ratio = match self.mining {
            NegativeMining::Ratio(r) => r >= 1.0,
            NegativeMining::All => true,
        };
        if self.lambda > 0.0 && self.alpha > 0.0 && ok_ratio {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "loss weights need lambda > 0, alpha > 0, mining ratio >= 1: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Normalized classification term.
    pub cls: f64,
    /// Normalized regression term, already multiplied by lambda or alpha.
    pub reg: f64,
    /// Anchors used for classification, per level (one entry for the SSD loss).
    pub cls_counts: Vec<usize>,
    /// Positive anchors per level (one entry, `N`, for the SSD loss).
    pub positives: Vec<usize>,
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Two-class softmax cross-entropy `-ln softmax(z)[class]` and its gradient.
fn cross_entropy(z: &[f64; 2], class: usize) -> (f64, [f64; 2]) {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    let p = [(z[0] - lse).exp(), (z[1] - lse).exp()];
    let mut g = p;
    g[class] -= 1.0;
    (lse - z[class], g)
}

/// Indices of the anchors scored by the classification term: all positives
/// plus the mined negatives, chosen by descending background loss (lower
/// index first on ties).
pub fn select_for_classification(pred: &Predictions, m: &MatchResult, mining: NegativeMining) -> Vec<usize> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..m.labels.len() {
        if m.is_positive(i) {
            pos.push(i);
        } else {
            neg.push((i, cross_entropy(&pred.logits[i], 0).0));
        }
    }
    let keep = match mining {
        NegativeMining::All => neg.len(),
        NegativeMining::Ratio(r) => ((r * pos.len() as f64).floor() as usize).min(neg.len()),
    };
    neg.sort_by(|a, b| b.1.total_cmp(&a.1));
    pos.extend(neg.iter().take(keep).map(|&(i, _)| i));
    pos
}

fn check_shapes(pred: &Predictions, m: &MatchResult) -> Result<()> {
    if pred.logits.len() != m.labels.len() || pred.offsets.len() != m.labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} matched anchors",
            pred.len(),
            m.labels.len()
        )));
    }
    Ok(())
}

/// Regression loss of the positives: smooth-L1 summed over the four offsets.
/// Adds `scale * d/d(offsets)` into `grad`.
fn regression(pred: &Predictions, m: &MatchResult, scale: f64, grad: &mut Predictions) -> f64 {
    let mut sum = 0.0;
    for i in 0..m.labels.len() {
        if !m.is_positive(i) {
            continue;
        }
        for k in 0..4 {
            let d = pred.offsets[i][k] - m.targets[i][k];
            sum += smooth_l1(d);
            grad.offsets[i][k] += scale * smooth_l1_grad(d);
        }
    }
    sum
}

/// Two-level detector loss over a batch:
/// `sum_k (1/N_k^c) sum_i l_c + lambda sum_k (1/N_k^r) sum_i [positive] l_r`,
/// where level `k` sums over every image of the batch.
///
/// `preds[image][level]` and `matches[image][level]` must line up.
pub fn loss_uesegnet1(
    preds: &[Vec<Predictions>],
    matches: &[Vec<MatchResult>],
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<Predictions>>)> {
    w.validate()?;
    if preds.len() != matches.len() {
        return Err(Error::Shape("prediction and match batch sizes differ".into()));
    }
    let levels = preds.first().map_or(0, |p| p.len());
    for (p, m) in preds.iter().zip(matches) {
        if p.len() != levels || m.len() != levels {
            return Err(Error::Shape(format!(
                "mismatched level counts: {} predictions, {} matches, expected {levels}",
                p.len(),
                m.len()
            )));
        }
        for (pl, ml) in p.iter().zip(m) {
            check_shapes(pl, ml)?;
        }
    }
    let mut grads: Vec<Vec<Predictions>> = preds
        .iter()
        .map(|p| p.iter().map(|l| Predictions::zeros(l.len())).collect())
        .collect();
    let mut out = LossBreakdown::default();
    for k in 0..levels {
        let selected: Vec<Vec<usize>> = preds
            .iter()
            .zip(matches)
            .map(|(p, m)| select_for_classification(&p[k], &m[k], w.mining))
            .collect();
        let n_cls: usize = selected.iter().map(Vec::len).sum();
        let n_reg: usize = matches.iter().map(|m| m[k].num_positive()).sum();
        if n_cls > 0 {
            let inv = 1.0 / n_cls as f64;
            let mut sum = 0.0;
            for (img, sel) in selected.iter().enumerate() {
                let (p, m) = (&preds[img][k], &matches[img][k]);
                for &i in sel {
                    let class = usize::from(m.is_positive(i));
                    let (l, g) = cross_entropy(&p.logits[i], class);
                    sum += l;
                    let dst = &mut grads[img][k].logits[i];
                    dst[0] += inv * g[0];
                    dst[1] += inv * g[1];
                }
            }
            out.cls += inv * sum;
        }
        if n_reg > 0 {
            let scale = w.lambda / n_reg as f64;
            let mut sum = 0.0;
            for img in 0..preds.len() {
                sum += regression(&preds[img][k], &matches[img][k], scale, &mut grads[img][k]);
            }
            out.reg += scale * sum;
        }
        out.cls_counts.push(n_cls);
        out.positives.push(n_reg);
    }
    out.total = out.cls + out.reg;
    Ok((out, grads))
}

/// SSD-stage loss over a batch: `(1/N) (L_conf + alpha L_reg)` with `N` the
/// number of positives. `preds[image]` holds all sets concatenated in anchor
/// order. With `N = 0` the loss and all gradients are zero.
pub fn loss_ssd_stage(
    preds: &[Predictions],
    matches: &[MatchResult],
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<Predictions>)> {
    w.validate()?;
    if preds.len() != matches.len() {
        return Err(Error::Shape("prediction and match batch sizes differ".into()));
    }
    for (p, m) in preds.iter().zip(matches) {
        check_shapes(p, m)?;
    }
    let mut grads: Vec<Predictions> = preds.iter().map(|p| Predictions::zeros(p.len())).collect();
    let n: usize = matches.iter().map(MatchResult::num_positive).sum();
    let mut out = LossBreakdown {
        positives: vec![n],
        ..Default::default()
    };
    if n == 0 {
        out.cls_counts.push(0);
        return Ok((out, grads));
    }
    let inv = 1.0 / n as f64;
    let (mut conf, mut reg, mut n_cls) = (0.0, 0.0, 0);
    for (img, (p, m)) in preds.iter().zip(matches).enumerate() {
        let sel = select_for_classification(p, m, w.mining);
        n_cls += sel.len();
        for i in sel {
            let class = usize::from(m.is_positive(i));
            let (l, g) = cross_entropy(&p.logits[i], class);
            conf += l;
            grads[img].logits[i][0] += inv * g[0];
            grads[img].logits[i][1] += inv * g[1];
        }
        reg += regression(p, m, w.alpha * inv, &mut grads[img]);
    }
    out.cls = inv * conf;
    out.reg = w.alpha * inv * reg;
    out.total = out.cls + out.reg;
    out.cls_counts.push(n_cls);
    Ok((out, grads))
}
