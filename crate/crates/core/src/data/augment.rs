//! Box-aware augmentation: horizontal flip, small rotations and Gaussian blur.

use image::{GrayImage, Luma};
use rand::Rng;

use super::{box_mask, mask_bounds, AnnotatedImage};
use crate::error::{Error, Result};
use crate::geom::BBox;

pub const MAX_ROTATION_DEG: f64 = 30.0;
pub const MAX_BLUR_SIGMA: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    HFlip,
    /// Counter-clockwise rotation about the image center, in degrees.
    Rotate(f64),
    Blur(f64),
}

/// Random augmentation policy. Each op is drawn independently.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub rotate_prob: f64,
    pub max_rotation_deg: f64,
    pub blur_prob: f64,
    pub max_blur_sigma: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_prob: 0.5,
            rotate_prob: 0.3,
            max_rotation_deg: 15.0,
            blur_prob: 0.2,
            max_blur_sigma: 1.5,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            flip_prob: 0.0,
            rotate_prob: 0.0,
            max_rotation_deg: 0.0,
            blur_prob: 0.0,
            max_blur_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !(p(self.flip_prob) && p(self.rotate_prob) && p(self.blur_prob)) {
            return Err(Error::InvalidArgument("augment probabilities must lie in [0, 1]".into()));
        }
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.max_rotation_deg) {
            return Err(Error::InvalidArgument(format!(
                "max rotation must lie in [0, {MAX_ROTATION_DEG}] degrees"
            )));
        }
        if !(0.0..=MAX_BLUR_SIGMA).contains(&self.max_blur_sigma) {
            return Err(Error::InvalidArgument(format!("max blur sigma must lie in [0, {MAX_BLUR_SIGMA}]")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<AugmentOp> {
        let mut ops = Vec::new();
        if rng.random_bool(self.flip_prob) {
            ops.push(AugmentOp::HFlip);
        }
        if rng.random_bool(self.rotate_prob) && self.max_rotation_deg > 0.0 {
            let m = self.max_rotation_deg;
            ops.push(AugmentOp::Rotate(rng.random_range(-m..=m)));
        }
        if rng.random_bool(self.blur_prob) && self.max_blur_sigma > 0.0 {
            ops.push(AugmentOp::Blur(rng.random_range(0.0..self.max_blur_sigma) + 1e-3));
        }
        ops
    }
}

/// Applies `ops` in order.
pub fn augment(sample: &AnnotatedImage, ops: &[AugmentOp]) -> Result<AnnotatedImage> {
    let mut out = sample.clone();
    for op in ops {
        out = match *op {
            AugmentOp::HFlip => hflip(&out),
            AugmentOp::Rotate(deg) => rotate(&out, deg)?,
            AugmentOp::Blur(sigma) => AnnotatedImage {
                image: blur(&out.image, sigma)?,
                ..out
            },
        };
    }
    Ok(out)
}

/// Mirrors image, mask and box about the vertical center line.
pub fn hflip(sample: &AnnotatedImage) -> AnnotatedImage {
    let w = sample.image.width() as f64;
    let g = &sample.gt;
    AnnotatedImage {
        image: image::imageops::flip_horizontal(&sample.image),
        gt: BBox {
            x_min: w - g.x_max,
            y_min: g.y_min,
            x_max: w - g.x_min,
            y_max: g.y_max,
        },
        mask: sample.mask.as_ref().map(image::imageops::flip_horizontal),
        source_id: sample.source_id.clone(),
    }
}

/// Rotates about the image center with replicated borders.
///
/// The new box is the tight bound of the rotated target mask. Samples without
/// a mask use the mask of their box region instead.
pub fn rotate(sample: &AnnotatedImage, degrees: f64) -> Result<AnnotatedImage> {
    if !(degrees.is_finite() && degrees.abs() <= MAX_ROTATION_DEG) {
        return Err(Error::InvalidArgument(format!(
            "rotation {degrees} outside [-{MAX_ROTATION_DEG}, {MAX_ROTATION_DEG}]"
        )));
    }
    let (w, h) = sample.image.dimensions();
    let src_mask = match &sample.mask {
        Some(m) => m.clone(),
        None => box_mask(w, h, &sample.gt),
    };
    let t = degrees.to_radians();
    let (cos, sin) = (t.cos(), t.sin());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    // inverse map: output pixel center -> source coordinates
    let source = |x: u32, y: u32| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        (cx + dx * cos - dy * sin, cy + dx * sin + dy * cos)
    };
    let image = GrayImage::from_fn(w, h, |x, y| {
        let (sx, sy) = source(x, y);
        Luma([bilinear_replicate(&sample.image, sx - 0.5, sy - 0.5).round().clamp(0.0, 255.0) as u8])
    });
    let mask = GrayImage::from_fn(w, h, |x, y| {
        let (sx, sy) = source(x, y);
        let (ix, iy) = (sx.floor(), sy.floor());
        let inside = ix >= 0.0 && iy >= 0.0 && ix < w as f64 && iy < h as f64;
        Luma([if inside { src_mask.get_pixel(ix as u32, iy as u32)[0] } else { 0 }])
    });
    let gt = match mask_bounds(&mask) {
        Some(b) => b,
        None => return Err(Error::InvalidArgument("rotation moved the target out of frame".into())),
    };
    Ok(AnnotatedImage {
        image,
        gt,
        mask: Some(mask),
        source_id: sample.source_id.clone(),
    })
}

/// Bilinear sample at pixel-index coordinates with edge replication.
fn bilinear_replicate(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (w, h) = img.dimensions();
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (xc.floor() as u32, yc.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
    let p = |x, y| img.get_pixel(x, y)[0] as f64;
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Separable Gaussian blur, `sigma` in `(0, MAX_BLUR_SIGMA]`.
pub fn blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    if !(sigma > 0.0 && sigma <= MAX_BLUR_SIGMA) {
        return Err(Error::InvalidArgument(format!("blur sigma {sigma} outside (0, {MAX_BLUR_SIGMA}]")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let at = |v: i64, n: i64| v.clamp(0, n - 1) as usize;
    let src: Vec<f64> = img.pixels().map(|p| p[0] as f64).collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[(y * w) as usize + at(x + k as i64 - radius, w)])
                .sum();
            tmp[(y * w + x) as usize] = s / norm;
        }
    }
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as i64, y as i64);
        let s: f64 = kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| kv * tmp[at(y + k as i64 - radius, h) * w as usize + x as usize])
            .sum();
        Luma([(s / norm).round().clamp(0.0, 255.0) as u8])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SceneSpec};
    use rand::SeedableRng;

    fn small() -> AnnotatedImage {
        let spec = SceneSpec {
            width: 64,
            height: 64,
            ..Default::default()
        };
        generate(&spec, 7).unwrap()
    }

    #[test]
    fn hflip_box_example() {
        let s = AnnotatedImage {
            image: GrayImage::new(100, 50),
            gt: BBox::new(10.0, 5.0, 30.0, 20.0).unwrap(),
            mask: None,
            source_id: "x".into(),
        };
        let f = hflip(&s);
        assert_eq!(f.gt, BBox::new(70.0, 5.0, 90.0, 20.0).unwrap());
    }

    #[test]
    fn hflip_twice_is_identity() {
        let s = small();
        assert_eq!(hflip(&hflip(&s)), s);
    }

    #[test]
    fn zero_rotation_keeps_everything() {
        let s = small();
        let r = rotate(&s, 0.0).unwrap();
        assert_eq!(r.image, s.image);
        assert_eq!(r.gt, s.gt);
    }

    #[test]
    fn rotation_limits() {
        let s = small();
        assert!(rotate(&s, 30.0).is_ok());
        assert!(rotate(&s, -30.5).is_err());
        assert!(rotate(&s, f64::NAN).is_err());
    }

    #[test]
    fn rotated_box_contains_rotated_mask() {
        let s = small();
        let r = rotate(&s, 17.0).unwrap();
        let m = r.mask.as_ref().unwrap();
        for (x, y, p) in m.enumerate_pixels() {
            if p[0] > 0 {
                assert!(r.gt.contains_point(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
    }

    #[test]
    fn rotation_without_mask_uses_box_region() {
        let s = AnnotatedImage {
            image: GrayImage::new(64, 64),
            gt: BBox::new(24.0, 24.0, 40.0, 40.0).unwrap(),
            mask: None,
            source_id: "x".into(),
        };
        let r = rotate(&s, 30.0).unwrap();
        // a 16 px square turned 30 degrees spans about 16 (cos + sin) = 21.9 px
        assert!((r.gt.width() - 21.9).abs() <= 2.0, "{:?}", r.gt);
    }

    #[test]
    fn blur_keeps_constant_images() {
        let img = GrayImage::from_pixel(20, 10, Luma([77]));
        assert_eq!(blur(&img, 2.0).unwrap(), img);
        assert!(blur(&img, 0.0).is_err());
        assert!(blur(&img, 3.5).is_err());
    }

    #[test]
    fn blur_spreads_an_impulse() {
        let mut img = GrayImage::new(15, 15);
        img.put_pixel(7, 7, Luma([255]));
        let b = blur(&img, 1.0).unwrap();
        assert!(b.get_pixel(7, 7)[0] < 255);
        assert!(b.get_pixel(8, 7)[0] > 0);
        assert_eq!(b.get_pixel(8, 7), b.get_pixel(6, 7));
    }

    #[test]
    fn policy_sampling_stays_in_range() {
        let p = AugmentPolicy {
            flip_prob: 1.0,
            rotate_prob: 1.0,
            max_rotation_deg: 30.0,
            blur_prob: 1.0,
            max_blur_sigma: 3.0,
        };
        p.validate().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            for op in p.sample(&mut rng) {
                match op {
                    AugmentOp::HFlip => {}
                    AugmentOp::Rotate(d) => assert!(d.abs() <= 30.0),
                    AugmentOp::Blur(s) => assert!(s > 0.0 && s <= 3.0),
                }
            }
        }
        assert!(AugmentPolicy { max_rotation_deg: 31.0, ..p }.validate().is_err());
    }
}
