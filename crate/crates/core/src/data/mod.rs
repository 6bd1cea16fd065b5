//! Synthetic ear scenes, annotation manifests and box-aware augmentation.

mod augment;
mod manifest;
mod synth;

use image::GrayImage;

use crate::geom::BBox;

pub use augment::{augment, hflip, rotate, AugmentOp, AugmentPolicy, MAX_BLUR_SIGMA, MAX_ROTATION_DEG};
pub use manifest::{image_name, load_dataset, split, write_dataset, write_manifest, write_sample, MANIFEST_HEADER};
pub use synth::{generate, SceneSpec};

/// One annotated image (a single ear per image).
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: GrayImage,
    pub gt: BBox,
    /// Binary target mask (255 = target) when known.
    pub mask: Option<GrayImage>,
    pub source_id: String,
}

/// Tight pixel bounds `(x_min, y_min, x_max + 1, y_max + 1)` of the non-zero
/// pixels of `mask`.
pub fn mask_bounds(mask: &GrayImage) -> Option<BBox> {
    let (w, h) = mask.dimensions();
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask.get_pixel(x, y)[0] > 0 {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    any.then(|| BBox {
        x_min: x0 as f64,
        y_min: y0 as f64,
        x_max: x1 as f64,
        y_max: y1 as f64,
    })
}

/// Mask covering the pixels whose centers lie inside `b`.
pub fn box_mask(width: u32, height: u32, b: &BBox) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| {
        let inside = b.contains_point(x as f64 + 0.5, y as f64 + 0.5);
        image::Luma([if inside { 255 } else { 0 }])
    })
}

/// Whether `b` lies within a `width x height` image.
pub fn in_bounds(b: &BBox, width: u32, height: u32) -> bool {
    b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= width as f64 && b.y_max <= height as f64
}
