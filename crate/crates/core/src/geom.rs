//! Box algebra: IOU, anchor grids, anchor-offset encoding and greedy NMS.
//!
//! Coordinates are continuous pixels with the origin at the top-left corner.
//! Pixel `(row, col)` covers `[col, col + 1) x [row, row + 1)`.

use crate::error::{Error, Result};

/// Axis-aligned rectangle `(x_min, y_min, x_max, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Center/size form of a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and empty area.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if finite && self.x_max > self.x_min && self.y_max > self.y_min {
            Ok(())
        } else {
            Err(Error::InvalidBox(
                self.x_min, self.y_min, self.x_max, self.y_max,
            ))
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: 0.5 * (self.x_min + self.x_max),
            cy: 0.5 * (self.y_min + self.y_max),
            w: self.width(),
            h: self.height(),
        }
    }

    /// Overlap rectangle, if the interiors intersect.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x_min.max(other.x_min);
        let y0 = self.y_min.max(other.y_min);
        let x1 = self.x_max.min(other.x_max);
        let y1 = self.y_max.min(other.y_max);
        (x1 > x0 && y1 > y0).then_some(BBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        })
    }

    /// IOU without validation. Callers guarantee both boxes are valid.
    pub fn iou(&self, other: &BBox) -> f64 {
        match self.intersection(other) {
            Some(i) => {
                let inter = i.area();
                inter / (self.area() + other.area() - inter)
            }
            None => 0.0,
        }
    }

    /// Clips the box to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clamp(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        };
        (b.x_max > b.x_min && b.y_max > b.y_min).then_some(b)
    }

    /// Grows the box by `margin` on all four sides.
    pub fn expand(&self, margin: f64) -> BBox {
        BBox {
            x_min: self.x_min - margin,
            y_min: self.y_min - margin,
            x_max: self.x_max + margin,
            y_max: self.y_max + margin,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn scale(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x_min: self.x_min * sx,
            y_min: self.y_min * sy,
            x_max: self.x_max * sx,
            y_max: self.y_max * sy,
        }
    }
}

impl CenterBox {
    pub fn to_box(&self) -> BBox {
        BBox {
            x_min: self.cx - 0.5 * self.w,
            y_min: self.cy - 0.5 * self.h,
            x_max: self.cx + 0.5 * self.w,
            y_max: self.cy + 0.5 * self.h,
        }
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

/// Identifies the head that emitted an anchor or detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LevelId(pub u8);

impl LevelId {
    pub const M1: LevelId = LevelId(1);
    pub const M2: LevelId = LevelId(2);

    /// SSD prediction set `index` (0-based).
    pub fn ssd_set(index: usize) -> LevelId {
        LevelId(10 + index as u8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub level: LevelId,
    /// `(row, col)` on the level's feature grid.
    pub cell: (usize, usize),
    /// Index in `0..K`, scale-major then ratio.
    pub slot: usize,
}

/// Anchor layout of one prediction level.
///
/// The grid is `ceil(image / stride)` cells per axis and cells are spread
/// evenly over the image, so centers land at `(cell + 0.5) * image / grid`.
/// When the stride divides the image size this is `(cell + 0.5) * stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelConfig {
    pub level: LevelId,
    pub stride: usize,
    /// Anchor side lengths in pixels (square-equivalent).
    pub scales: Vec<f64>,
    /// Width:height ratios; area is preserved (`w = s*sqrt(r)`, `h = s/sqrt(r)`).
    pub ratios: Vec<f64>,
}

impl LevelConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn grid(&self, image_w: usize, image_h: usize) -> (usize, usize) {
        (image_h.div_ceil(self.stride), image_w.div_ceil(self.stride))
    }
}

/// Tiles anchors over every level. Order is level, then row, col, slot, which
/// matches the channel layout of the heads.
pub fn generate_anchors(
    image_w: usize,
    image_h: usize,
    levels: &[LevelConfig],
) -> Result<Vec<Anchor>> {
    let mut out = Vec::new();
    for cfg in levels {
        out.extend(level_anchors(image_w, image_h, cfg)?);
    }
    Ok(out)
}

pub fn level_anchors(image_w: usize, image_h: usize, cfg: &LevelConfig) -> Result<Vec<Anchor>> {
    if cfg.scales.is_empty() || cfg.ratios.is_empty() {
        return Err(Error::AnchorConfig(format!(
            "level {:?}: scale and ratio lists must be non-empty",
            cfg.level
        )));
    }
    if cfg.stride == 0 || image_w == 0 || image_h == 0 {
        return Err(Error::AnchorConfig("stride and image size must be positive".into()));
    }
    if cfg.scales.iter().chain(&cfg.ratios).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::AnchorConfig(format!(
            "level {:?}: scales and ratios must be positive",
            cfg.level
        )));
    }
    let (rows, cols) = cfg.grid(image_w, image_h);
    let step_x = image_w as f64 / cols as f64;
    let step_y = image_h as f64 / rows as f64;
    let mut shapes = Vec::with_capacity(cfg.anchors_per_cell());
    for &s in &cfg.scales {
        for &r in &cfg.ratios {
            shapes.push((s * r.sqrt(), s / r.sqrt()));
        }
    }
    let mut out = Vec::with_capacity(rows * cols * shapes.len());
    for row in 0..rows {
        let cy = (row as f64 + 0.5) * step_y;
        for col in 0..cols {
            let cx = (col as f64 + 0.5) * step_x;
            for (slot, &(w, h)) in shapes.iter().enumerate() {
                out.push(Anchor {
                    bbox: CenterBox { cx, cy, w, h }.to_box(),
                    level: cfg.level,
                    cell: (row, col),
                    slot,
                });
            }
        }
    }
    Ok(out)
}

/// Log-space anchor offsets `(t_x, t_y, t_w, t_h)` of `gt` relative to `anchor`.
pub fn encode(gt: &BBox, anchor: &BBox) -> Result<[f64; 4]> {
    gt.validate()?;
    anchor.validate()?;
    let g = gt.to_center();
    let a = anchor.to_center();
    Ok([
        (g.cx - a.cx) / a.w,
        (g.cy - a.cy) / a.h,
        (g.w / a.w).ln(),
        (g.h / a.h).ln(),
    ])
}

/// Inverse of [`encode`].
pub fn decode(offsets: &[f64; 4], anchor: &BBox) -> Result<BBox> {
    if offsets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("offsets {offsets:?}")));
    }
    let a = anchor.to_center();
    let b = CenterBox {
        cx: a.cx + offsets[0] * a.w,
        cy: a.cy + offsets[1] * a.h,
        w: a.w * offsets[2].exp(),
        h: a.h * offsets[3].exp(),
    }
    .to_box();
    b.validate()?;
    Ok(b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Objectness in `[0, 1]`.
    pub score: f64,
    pub source_level: LevelId,
}

/// Greedy non-maximum suppression.
///
/// Sorts by descending score (equal scores keep input order), then keeps the
/// best remaining box and drops every other box whose IOU with it exceeds
/// `iou_threshold`, until nothing is left.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut suppressed = vec![false; order.len()];
    let mut keep = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        let top = &detections[order[i]];
        keep.push(*top);
        for j in (i + 1)..order.len() {
            if !suppressed[j] && top.bbox.iou(&detections[order[j]].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection {
            bbox: b,
            score,
            source_level: LevelId::M1,
        }
    }

    /// Counts unit cells covered by an integer box pair.
    fn cell_count_iou(a: &BBox, b: &BBox) -> f64 {
        let (mut inter, mut uni) = (0u64, 0u64);
        let lo_x = a.x_min.min(b.x_min) as i64;
        let hi_x = a.x_max.max(b.x_max) as i64;
        let lo_y = a.y_min.min(b.y_min) as i64;
        let hi_y = a.y_max.max(b.y_max) as i64;
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let ia = a.contains_point(px, py);
                let ib = b.contains_point(px, py);
                inter += (ia && ib) as u64;
                uni += (ia || ib) as u64;
            }
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        assert_eq!(cell_count_iou(&a, &b), 50.0 / 150.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // touching edges do not overlap
        assert_eq!(iou(&a, &bx(10.0, 0.0, 20.0, 10.0)).unwrap(), 0.0);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let flat = BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 10.0,
            y_max: 0.0,
        };
        assert!(matches!(iou(&a, &flat), Err(Error::InvalidBox(..))));
        assert!(BBox::new(3.0, 0.0, 2.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn anchor_counts_and_centers() {
        let cfg = LevelConfig {
            level: LevelId::M1,
            stride: 8,
            scales: vec![16.0, 32.0],
            ratios: vec![1.0],
        };
        let anchors = generate_anchors(320, 320, std::slice::from_ref(&cfg)).unwrap();
        let mut enumerated = 0;
        for _row in 0..40 {
            for _col in 0..40 {
                enumerated += cfg.scales.len() * cfg.ratios.len();
            }
        }
        assert_eq!(anchors.len(), 3200);
        assert_eq!(anchors.len(), enumerated);
        let first = anchors[0];
        assert_eq!((first.cell, first.slot), ((0, 0), 0));
        let c = first.bbox.to_center();
        assert_eq!((c.cx, c.cy, c.w, c.h), (4.0, 4.0, 16.0, 16.0));
        for a in &anchors {
            let c = a.bbox.to_center();
            assert!(c.cx > 0.0 && c.cx < 320.0 && c.cy > 0.0 && c.cy < 320.0);
        }
        assert_eq!(anchors, generate_anchors(320, 320, &[cfg]).unwrap());
    }

    #[test]
    fn ratio_preserves_area() {
        let cfg = LevelConfig {
            level: LevelId::M2,
            stride: 16,
            scales: vec![10.0],
            ratios: vec![2.0],
        };
        let a = level_anchors(64, 64, &cfg).unwrap()[0].bbox;
        assert!((a.width() - 10.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((a.height() - 10.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((a.area() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn anchor_config_errors() {
        let mut cfg = LevelConfig {
            level: LevelId::M1,
            stride: 8,
            scales: vec![],
            ratios: vec![1.0],
        };
        assert!(generate_anchors(64, 64, std::slice::from_ref(&cfg)).is_err());
        cfg.scales = vec![8.0];
        cfg.ratios.clear();
        assert!(generate_anchors(64, 64, &[cfg]).is_err());
    }

    #[test]
    fn uneven_grid_keeps_centers_inside() {
        let cfg = LevelConfig {
            level: LevelId::ssd_set(3),
            stride: 128,
            scales: vec![80.0],
            ratios: vec![1.0],
        };
        let anchors = level_anchors(160, 160, &cfg).unwrap();
        assert_eq!(anchors.len(), 4);
        for a in anchors {
            let c = a.bbox.to_center();
            assert!(c.cx < 160.0 && c.cy < 160.0);
        }
    }

    #[test]
    fn encode_examples() {
        let a = CenterBox {
            cx: 10.0,
            cy: 10.0,
            w: 10.0,
            h: 10.0,
        }
        .to_box();
        assert_eq!(encode(&a, &a).unwrap(), [0.0; 4]);
        let g = CenterBox {
            cx: 15.0,
            cy: 10.0,
            w: 20.0,
            h: 10.0,
        }
        .to_box();
        let t = encode(&g, &a).unwrap();
        assert!((t[0] - 0.5).abs() < 1e-15);
        assert_eq!(t[1], 0.0);
        assert!((t[2] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(t[3], 0.0);
        let back = decode(&t, &a).unwrap();
        assert!((back.x_min - g.x_min).abs() < 1e-12 && (back.x_max - g.x_max).abs() < 1e-12);
    }

    #[test]
    fn decode_examples() {
        let a = CenterBox {
            cx: 10.0,
            cy: 10.0,
            w: 8.0,
            h: 8.0,
        }
        .to_box();
        assert_eq!(decode(&[0.0; 4], &a).unwrap(), a);
        let ln2 = 2f64.ln();
        let c = decode(&[0.0, 0.0, ln2, ln2], &a).unwrap().to_center();
        assert!((c.cx - 10.0).abs() < 1e-12 && (c.cy - 10.0).abs() < 1e-12);
        assert!((c.w - 16.0).abs() < 1e-12 && (c.h - 16.0).abs() < 1e-12);
        assert!(decode(&[f64::NAN, 0.0, 0.0, 0.0], &a).is_err());
        assert!(decode(&[0.0, 0.0, f64::INFINITY, 0.0], &a).is_err());
        assert!(encode(&a, &a).is_ok());
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.7).is_empty());
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[det(b, 0.3)], 0.7), vec![det(b, 0.3)]);
        let kept = nms(&[det(b, 0.8), det(b, 0.9)], 0.7);
        assert_eq!(kept, vec![det(b, 0.9)]);
    }

    #[test]
    fn nms_ties_follow_input_order() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(1.0, 0.0, 11.0, 10.0);
        let kept = nms(&[det(a, 0.5), det(b, 0.5)], 0.7);
        assert_eq!(kept, vec![det(a, 0.5)]);
        let kept = nms(&[det(b, 0.5), det(a, 0.5)], 0.7);
        assert_eq!(kept, vec![det(b, 0.5)]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    fn arb_int_box() -> impl Strategy<Value = BBox> {
        (0i32..40, 0i32..40, 1i32..25, 1i32..25).prop_map(|(x, y, w, h)| {
            BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn iou_matches_cell_count(a in arb_int_box(), b in arb_int_box()) {
            prop_assert!((iou(&a, &b).unwrap() - cell_count_iou(&a, &b)).abs() <= 1e-12);
        }

        #[test]
        fn encode_decode_round_trip(g in arb_box(), a in arb_box()) {
            let back = decode(&encode(&g, &a).unwrap(), &a).unwrap();
            for (u, v) in [(back.x_min, g.x_min), (back.y_min, g.y_min), (back.x_max, g.x_max), (back.y_max, g.y_max)] {
                prop_assert!((u - v).abs() <= 1e-6 * v.abs().max(1.0));
            }
        }

        #[test]
        fn nms_keeps_subset_without_overlaps(
            boxes in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..40),
            thr in 0.1..0.9f64,
        ) {
            let dets: Vec<Detection> = boxes.iter().map(|(b, s)| det(*b, *s)).collect();
            let kept = nms(&dets, thr);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.bbox.iou(&b.bbox) <= thr);
                    prop_assert!(a.score >= b.score);
                }
            }
            if let Some(best) = dets.iter().map(|d| d.score).reduce(f64::max) {
                prop_assert_eq!(kept[0].score, best);
            }
        }
    }
}
