//! Seeded synthetic "ear in clutter" scenes.
//!
//! The target is an ellipse with an inner crescent ridge. Distractors are
//! plain ellipses and rectangles without the ridge. Every image is a pure
//! function of `(spec, index)`.

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{mask_bounds, AnnotatedImage};
use crate::error::{Error, Result};

/// Subsamples per pixel axis for anti-aliased coverage.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    /// Target height as a fraction of the image height.
    pub scale_range: (f64, f64),
    /// Target width/height ratio before rotation.
    pub aspect_range: (f64, f64),
    /// Target rotation in degrees.
    pub rotation_range: (f64, f64),
    pub occlusion_prob: f64,
    /// Largest fraction of the target mask an occluding bar may cover.
    pub max_occlusion: f64,
    pub distractor_range: (u32, u32),
    /// Peak-to-peak illumination gradient as a fraction of full scale.
    pub illumination: f64,
    /// Standard deviation of additive Gaussian noise, in gray levels.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 320,
            height: 320,
            scale_range: (0.16, 0.32),
            aspect_range: (0.55, 0.75),
            rotation_range: (-20.0, 20.0),
            occlusion_prob: 0.25,
            max_occlusion: 0.4,
            distractor_range: (2, 5),
            illumination: 0.3,
            noise_sigma: 6.0,
            seed: 42,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        let problems = [
            (self.width < 16 || self.height < 16, "image must be at least 16x16"),
            (!range_ok(self.scale_range) || self.scale_range.0 <= 0.0, "scale_range must be a positive, ordered range"),
            (self.scale_range.1 > 0.8, "scale_range upper bound must be <= 0.8"),
            (!range_ok(self.aspect_range) || self.aspect_range.0 <= 0.0, "aspect_range must be a positive, ordered range"),
            (!range_ok(self.rotation_range), "rotation_range must be ordered"),
            (self.distractor_range.0 > self.distractor_range.1, "distractor_range must be ordered"),
            (!(0.0..=1.0).contains(&self.occlusion_prob), "occlusion_prob must lie in [0, 1]"),
            (!(0.0..=1.0).contains(&self.max_occlusion), "max_occlusion must lie in [0, 1]"),
            (!(self.illumination >= 0.0 && self.noise_sigma >= 0.0), "illumination and noise must be non-negative"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::InvalidArgument(format!("scene spec: {msg}"))),
            None => Ok(()),
        }
    }
}

/// Oriented ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Self {
        Ellipse {
            cx,
            cy,
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Same orientation, center shifted by `(du, dv)` in the local frame.
    fn offset(&self, du: f64, dv: f64, a: f64, b: f64) -> Self {
        Ellipse {
            cx: self.cx + du * self.cos - dv * self.sin,
            cy: self.cy + du * self.sin + dv * self.cos,
            a,
            b,
            ..*self
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn radius(&self) -> f64 {
        self.a.max(self.b)
    }
}

/// Oriented rectangle (half extents `hw`, `hh`).
#[derive(Clone, Copy, Debug)]
struct Rect {
    cx: f64,
    cy: f64,
    hw: f64,
    hh: f64,
    cos: f64,
    sin: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        u.abs() <= self.hw && v.abs() <= self.hh
    }

    fn radius(&self) -> f64 {
        self.hw.hypot(self.hh)
    }
}

/// Float canvas with coverage-weighted painting.
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Fraction of the pixel's subsamples for which `inside` holds.
    fn coverage(x: usize, y: usize, inside: &impl Fn(f64, f64) -> bool) -> f64 {
        let step = 1.0 / SUPERSAMPLE as f64;
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 + (sx as f64 + 0.5) * step;
                let py = y as f64 + (sy as f64 + 0.5) * step;
                hits += inside(px, py) as usize;
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }

    /// Pixel window that can intersect a shape of radius `r` around `(cx, cy)`.
    fn window(&self, cx: f64, cy: f64, r: f64) -> (usize, usize, usize, usize) {
        let clampi = |v: f64, hi: usize| v.floor().clamp(0.0, hi as f64) as usize;
        (
            clampi(cx - r - 1.0, self.w),
            clampi(cy - r - 1.0, self.h),
            clampi(cx + r + 2.0, self.w),
            clampi(cy + r + 2.0, self.h),
        )
    }

    fn paint(&mut self, cx: f64, cy: f64, r: f64, value: f64, inside: impl Fn(f64, f64) -> bool) {
        let (x0, y0, x1, y1) = self.window(cx, cy, r);
        for y in y0..y1 {
            for x in x0..x1 {
                let c = Self::coverage(x, y, &inside);
                if c > 0.0 {
                    let p = &mut self.px[y * self.w + x];
                    *p = *p * (1.0 - c) + value * c;
                }
            }
        }
    }

    /// Binary mask of pixels with at least half coverage.
    fn mask(&self, cx: f64, cy: f64, r: f64, inside: impl Fn(f64, f64) -> bool) -> GrayImage {
        let mut m = GrayImage::new(self.w as u32, self.h as u32);
        let (x0, y0, x1, y1) = self.window(cx, cy, r);
        for y in y0..y1 {
            for x in x0..x1 {
                if Self::coverage(x, y, &inside) >= 0.5 {
                    m.put_pixel(x as u32, y as u32, Luma([255]));
                }
            }
        }
        m
    }
}

fn sample(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

/// Picks a gray level at least `min_gap` away from `bg`.
fn contrasting(rng: &mut ChaCha8Rng, bg: f64, min_gap: f64, max_gap: f64) -> f64 {
    let gap = rng.random_range(min_gap..max_gap);
    let up = if bg + gap > 245.0 {
        false
    } else if bg - gap < 10.0 {
        true
    } else {
        rng.random_bool(0.5)
    };
    if up {
        bg + gap
    } else {
        bg - gap
    }
}

/// Renders scene `index` of `spec`.
pub fn generate(spec: &SceneSpec, index: u64) -> Result<AnnotatedImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (w, h) = (spec.width as usize, spec.height as usize);

    // background with a linear illumination gradient
    let base = rng.random_range(80.0..170.0);
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = spec.illumination * 255.0 / 2.0;
    let (gx, gy) = (dir.cos(), dir.sin());
    let diag = (w as f64).hypot(h as f64) / 2.0;
    let mut canvas = Canvas { w, h, px: vec![0.0; w * h] };
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 - w as f64 / 2.0) * gx + (y as f64 - h as f64 / 2.0) * gy) / diag;
            canvas.px[y * w + x] = base + amp * t;
        }
    }

    let target_h = sample(&mut rng, spec.scale_range) * h as f64;
    let aspect = sample(&mut rng, spec.aspect_range);
    let (a, b) = (0.5 * target_h * aspect, 0.5 * target_h);
    let angle = sample(&mut rng, spec.rotation_range).to_radians();
    let r = a.max(b) + 2.0;
    let cx = rng.random_range(r..(w as f64 - r).max(r + 1e-9));
    let cy = rng.random_range(r..(h as f64 - r).max(r + 1e-9));

    let n_distract = rng.random_range(spec.distractor_range.0..=spec.distractor_range.1);
    for _ in 0..n_distract {
        let size = sample(&mut rng, spec.scale_range) * h as f64 * rng.random_range(0.6..1.3);
        let dx = rng.random_range(0.0..w as f64);
        let dy = rng.random_range(0.0..h as f64);
        let rot = rng.random_range(0.0..std::f64::consts::PI);
        let value = contrasting(&mut rng, base, 30.0, 90.0);
        if rng.random_bool(0.5) {
            let e = Ellipse::new(dx, dy, 0.5 * size * rng.random_range(0.4..1.0), 0.5 * size, rot);
            canvas.paint(e.cx, e.cy, e.radius(), value, |x, y| e.contains(x, y));
        } else {
            let rc = Rect {
                cx: dx,
                cy: dy,
                hw: 0.5 * size * rng.random_range(0.3..1.0),
                hh: 0.5 * size * rng.random_range(0.3..1.0),
                cos: rot.cos(),
                sin: rot.sin(),
            };
            canvas.paint(rc.cx, rc.cy, rc.radius(), value, |x, y| rc.contains(x, y));
        }
    }

    // target: outer ellipse, crescent ridge, inner cavity
    let outer = Ellipse::new(cx, cy, a, b, angle);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let skin = contrasting(&mut rng, base, 45.0, 90.0);
    let ridge_tone = if skin > 128.0 { skin - 70.0 } else { skin + 70.0 };
    let ridge_outer = outer.offset(side * 0.08 * a, 0.0, 0.78 * a, 0.82 * b);
    let ridge_inner = outer.offset(side * 0.22 * a, 0.04 * b, 0.6 * a, 0.66 * b);
    let cavity = outer.offset(side * 0.2 * a, 0.1 * b, 0.28 * a, 0.3 * b);
    let mask = canvas.mask(cx, cy, r, |x, y| outer.contains(x, y));
    canvas.paint(cx, cy, r, skin, |x, y| outer.contains(x, y));
    canvas.paint(cx, cy, r, ridge_tone, |x, y| {
        ridge_outer.contains(x, y) && !ridge_inner.contains(x, y)
    });
    canvas.paint(cx, cy, r, 0.5 * (skin + ridge_tone), |x, y| cavity.contains(x, y));

    if rng.random_bool(spec.occlusion_prob) {
        occlude(&mut canvas, &mut rng, &mask, &outer, base, spec.max_occlusion);
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
        for p in canvas.px.iter_mut() {
            *p += normal.sample(&mut rng);
        }
    }

    let image = GrayImage::from_fn(spec.width, spec.height, |x, y| {
        Luma([canvas.px[y as usize * w + x as usize].round().clamp(0.0, 255.0) as u8])
    });
    let gt = mask_bounds(&mask).ok_or_else(|| Error::InvalidArgument("target mask is empty".into()))?;
    Ok(AnnotatedImage {
        image,
        gt,
        mask: Some(mask),
        source_id: format!("synth-{}-{index:05}", spec.seed),
    })
}

/// Paints a hair-like bar across the target covering at most `max_frac` of its mask.
fn occlude(canvas: &mut Canvas, rng: &mut ChaCha8Rng, mask: &GrayImage, target: &Ellipse, base: f64, max_frac: f64) {
    let total = mask.pixels().filter(|p| p[0] > 0).count() as f64;
    if total == 0.0 || max_frac <= 0.0 {
        return;
    }
    let rot = rng.random_range(0.0..std::f64::consts::PI);
    let offset = rng.random_range(-0.5..0.5) * target.radius();
    let mut half = rng.random_range(0.1..0.35) * target.radius();
    let value = contrasting(rng, base, 20.0, 80.0);
    let (cos, sin) = (rot.cos(), rot.sin());
    let bar = |half: f64| Rect {
        cx: target.cx - offset * sin,
        cy: target.cy + offset * cos,
        hw: 3.0 * target.radius(),
        hh: half,
        cos,
        sin,
    };
    loop {
        let rc = bar(half);
        let covered = mask
            .enumerate_pixels()
            .filter(|(x, y, p)| p[0] > 0 && rc.contains(*x as f64 + 0.5, *y as f64 + 0.5))
            .count() as f64;
        if covered / total <= max_frac || half < 0.5 {
            break;
        }
        half *= 0.8;
    }
    let rc = bar(half);
    canvas.paint(rc.cx, rc.cy, rc.radius(), value, |x, y| rc.contains(x, y));
}
