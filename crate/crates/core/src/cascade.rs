//! Two-stage detection: a first detector proposes a box, the box is grown by
//! a context margin and cropped, and a second detector re-detects inside the
//! resized crop. Also builds the crop dataset the second stage trains on.

use image::{GrayImage, Luma};
use log::debug;

use crate::data::AnnotatedImage;
use crate::error::{Error, Result};
use crate::geom::{nms, BBox, Detection};
use crate::net::{images_to_tensor, Model};

/// Affine map between original-image pixels and crop pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    /// Cropped rectangle in original-image coordinates.
    pub source: BBox,
    pub target_w: u32,
    pub target_h: u32,
    pub sx: f64,
    pub sy: f64,
}

impl CropTransform {
    pub fn new(source: BBox, target_w: u32, target_h: u32) -> Result<Self> {
        source.validate()?;
        if target_w == 0 || target_h == 0 {
            return Err(Error::InvalidArgument("crop target size must be positive".into()));
        }
        Ok(CropTransform {
            source,
            target_w,
            target_h,
            sx: target_w as f64 / source.width(),
            sy: target_h as f64 / source.height(),
        })
    }

    /// Original-image box to crop coordinates.
    pub fn map_forward(&self, b: &BBox) -> BBox {
        BBox {
            x_min: (b.x_min - self.source.x_min) * self.sx,
            y_min: (b.y_min - self.source.y_min) * self.sy,
            x_max: (b.x_max - self.source.x_min) * self.sx,
            y_max: (b.y_max - self.source.y_min) * self.sy,
        }
    }

    /// Crop box to original-image coordinates.
    pub fn map_back(&self, b: &BBox) -> BBox {
        BBox {
            x_min: b.x_min / self.sx + self.source.x_min,
            y_min: b.y_min / self.sy + self.source.y_min,
            x_max: b.x_max / self.sx + self.source.x_min,
            y_max: b.y_max / self.sy + self.source.y_min,
        }
    }
}

/// Bilinear resampling of the `t.source` rectangle of `img` onto a
/// `target_w x target_h` grid, sampling at pixel centers with edge
/// replication.
pub fn resample(img: &GrayImage, t: &CropTransform) -> GrayImage {
    let (w, h) = img.dimensions();
    let at = |x: u32, y: u32| img.get_pixel(x, y)[0] as f64;
    GrayImage::from_fn(t.target_w, t.target_h, |ox, oy| {
        let x = (t.source.x_min + (ox as f64 + 0.5) / t.sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y = (t.source.y_min + (oy as f64 + 0.5) / t.sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as u32, y.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
        let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
        Luma([(top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8])
    })
}

/// Nearest-neighbour counterpart of [`resample`] for binary masks.
fn resample_nearest(img: &GrayImage, t: &CropTransform) -> GrayImage {
    let (w, h) = img.dimensions();
    GrayImage::from_fn(t.target_w, t.target_h, |ox, oy| {
        let x = (t.source.x_min + (ox as f64 + 0.5) / t.sx).floor().clamp(0.0, (w - 1) as f64);
        let y = (t.source.y_min + (oy as f64 + 0.5) / t.sy).floor().clamp(0.0, (h - 1) as f64);
        *img.get_pixel(x as u32, y as u32)
    })
}

/// Rescales a whole sample (image, box and mask) to `size x size`.
pub fn resize_sample(s: &AnnotatedImage, size: u32) -> Result<AnnotatedImage> {
    let (w, h) = s.image.dimensions();
    if (w, h) == (size, size) {
        return Ok(s.clone());
    }
    let t = CropTransform::new(BBox::new(0.0, 0.0, w as f64, h as f64)?, size, size)?;
    Ok(AnnotatedImage {
        image: resample(&s.image, &t),
        gt: t.map_forward(&s.gt),
        mask: s.mask.as_ref().map(|m| resample_nearest(m, &t)),
        source_id: s.source_id.clone(),
    })
}

/// Grows `b` by `expansion` pixels on every side, clamps it to the image and
/// resamples the region to `size x size`.
pub fn expand_and_crop(img: &GrayImage, b: &BBox, expansion: f64, size: u32) -> Result<(GrayImage, CropTransform)> {
    if !(expansion >= 0.0 && expansion.is_finite()) {
        return Err(Error::InvalidArgument(format!("expansion {expansion} must be >= 0")));
    }
    let (w, h) = img.dimensions();
    let rect = b
        .expand(expansion)
        .clamp(w as f64, h as f64)
        .ok_or_else(|| Error::InvalidArgument(format!("box {b:?} does not intersect the {w}x{h} image")))?;
    let t = CropTransform::new(rect, size, size)?;
    Ok((resample(img, &t), t))
}

/// Anything that turns a grayscale image into scored boxes in that image's
/// pixel coordinates, best first.
pub trait Detector {
    /// Side length of the square input the detector works at.
    fn input_size(&self) -> u32;

    fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>>;

    fn detect_batch(&self, images: &[&GrayImage]) -> Result<Vec<Vec<Detection>>> {
        images.iter().map(|i| self.detect(i)).collect()
    }
}

/// A trained network with its decoding thresholds. Images of another size
/// are resized to the network input and boxes are mapped back.
#[derive(Clone, Debug)]
pub struct ModelDetector {
    pub model: Model<f32>,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

/// Images per forward pass during batched inference.
const INFER_BATCH: usize = 8;

impl ModelDetector {
    pub fn new(model: Model<f32>, score_threshold: f64, nms_iou: f64) -> Self {
        ModelDetector {
            model,
            score_threshold,
            nms_iou,
        }
    }
}

impl Detector for ModelDetector {
    fn input_size(&self) -> u32 {
        self.model.input_size() as u32
    }

    fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>> {
        Ok(self.detect_batch(&[image])?.pop().unwrap_or_default())
    }

    fn detect_batch(&self, images: &[&GrayImage]) -> Result<Vec<Vec<Detection>>> {
        let s = self.input_size();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let mut resized = Vec::with_capacity(chunk.len());
            let mut maps = Vec::with_capacity(chunk.len());
            for img in chunk {
                let (w, h) = img.dimensions();
                if (w, h) == (s, s) {
                    resized.push((*img).clone());
                    maps.push(None);
                } else {
                    let t = CropTransform::new(BBox::new(0.0, 0.0, w as f64, h as f64)?, s, s)?;
                    resized.push(resample(img, &t));
                    maps.push(Some(t));
                }
            }
            let refs: Vec<&GrayImage> = resized.iter().collect();
            let x = images_to_tensor::<f32>(&refs)?;
            let dets = self.model.infer(&x, self.score_threshold, self.nms_iou)?;
            for (mut d, t) in dets.into_iter().zip(maps) {
                if let Some(t) = t {
                    for det in &mut d {
                        det.bbox = t.map_back(&det.bbox);
                    }
                }
                out.push(d);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeConfig {
    /// Context margin added on every side of a stage-1 box, in original pixels.
    pub expansion: f64,
    /// Stage-1 detections refined per image.
    pub top_n: usize,
    /// NMS threshold for pooling the refined boxes.
    pub nms_iou: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            expansion: 25.0,
            top_n: 1,
            nms_iou: 0.7,
        }
    }
}

pub struct Cascade<A, B> {
    pub stage1: A,
    pub stage2: B,
    pub config: CascadeConfig,
}

impl<A: Detector, B: Detector> Cascade<A, B> {
    pub fn new(stage1: A, stage2: B, config: CascadeConfig) -> Result<Self> {
        if !(config.expansion >= 0.0) || config.top_n == 0 {
            return Err(Error::InvalidArgument(
                "cascade needs expansion >= 0 and top_n >= 1".into(),
            ));
        }
        Ok(Cascade { stage1, stage2, config })
    }

    pub fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>> {
        let first = self.stage1.detect(image)?;
        self.refine(image, &first)
    }

    pub fn detect_batch(&self, images: &[&GrayImage]) -> Result<Vec<Vec<Detection>>> {
        let first = self.stage1.detect_batch(images)?;
        images.iter().zip(&first).map(|(img, d)| self.refine(img, d)).collect()
    }

    /// Re-detects inside the expanded crops of the top stage-1 boxes.
    fn refine(&self, image: &GrayImage, first: &[Detection]) -> Result<Vec<Detection>> {
        let size = self.stage2.input_size();
        let mut pool = Vec::new();
        for d in first.iter().take(self.config.top_n) {
            let (crop, t) = expand_and_crop(image, &d.bbox, self.config.expansion, size)?;
            for mut d2 in self.stage2.detect(&crop)? {
                d2.bbox = t.map_back(&d2.bbox);
                pool.push(d2);
            }
        }
        Ok(nms(&pool, self.config.nms_iou))
    }
}

impl<A: Detector, B: Detector> Detector for Cascade<A, B> {
    fn input_size(&self) -> u32 {
        self.stage1.input_size()
    }

    fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>> {
        Cascade::detect(self, image)
    }

    fn detect_batch(&self, images: &[&GrayImage]) -> Result<Vec<Vec<Detection>>> {
        Cascade::detect_batch(self, images)
    }
}

/// Convenience wrapper matching the free-function form of the cascade.
pub fn detect_cascade<A: Detector, B: Detector>(cascade: &Cascade<A, B>, image: &GrayImage) -> Result<Vec<Detection>> {
    cascade.detect(image)
}

/// Minimum share of the ground-truth area a crop must keep to become a
/// stage-2 training sample.
pub const MIN_GT_RETENTION: f64 = 0.25;

#[derive(Clone, Debug, Default)]
pub struct Stage2Data {
    pub samples: Vec<AnnotatedImage>,
    /// Indices of source samples that produced no usable crop.
    pub dropped: Vec<usize>,
}

/// Runs `stage1` over `samples` and turns each top detection into a
/// `size x size` training crop with the ground truth moved into crop
/// coordinates. Samples without a detection, or whose crop keeps less than
/// [`MIN_GT_RETENTION`] of the ground-truth area, are dropped.
pub fn build_stage2_dataset(
    stage1: &impl Detector,
    samples: &[AnnotatedImage],
    expansion: f64,
    size: u32,
) -> Result<Stage2Data> {
    let mut out = Stage2Data::default();
    let images: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
    let dets = stage1.detect_batch(&images)?;
    for (i, (s, d)) in samples.iter().zip(&dets).enumerate() {
        match stage2_sample(s, d.first(), expansion, size)? {
            Some(sample) => out.samples.push(sample),
            None => {
                debug!("stage-2 data: dropping sample {i} ({})", s.source_id);
                out.dropped.push(i);
            }
        }
    }
    Ok(out)
}

/// Crop sample for one image given its top stage-1 detection.
pub fn stage2_sample(s: &AnnotatedImage, top: Option<&Detection>, expansion: f64, size: u32) -> Result<Option<AnnotatedImage>> {
    let Some(top) = top else { return Ok(None) };
    let (crop, t) = expand_and_crop(&s.image, &top.bbox, expansion, size)?;
    let kept = match s.gt.intersection(&t.source) {
        Some(inter) if inter.area() / s.gt.area() >= MIN_GT_RETENTION => inter,
        _ => return Ok(None),
    };
    let gt = t.map_forward(&kept).clamp(size as f64, size as f64);
    let Some(gt) = gt.filter(|g| g.validate().is_ok()) else { return Ok(None) };
    Ok(Some(AnnotatedImage {
        image: crop,
        gt,
        mask: s.mask.as_ref().map(|m| resample_nearest(m, &t)),
        source_id: s.source_id.clone(),
    }))
}
