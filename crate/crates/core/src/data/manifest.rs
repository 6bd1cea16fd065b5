//! CSV annotation manifests and dataset splitting.
//!
//! A manifest lists one image per row as
//! `relative_path,x_min,y_min,x_max,y_max`, paths relative to the manifest's
//! directory. A grayscale `<stem>_mask.png` next to an image, when present, is
//! loaded as its target mask.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{in_bounds, AnnotatedImage};
use crate::error::{Error, Result};
use crate::geom::BBox;

pub const MANIFEST_HEADER: [&str; 5] = ["relative_path", "x_min", "y_min", "x_max", "y_max"];

fn mask_path(image_path: &Path) -> PathBuf {
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    image_path.with_file_name(format!("{stem}_mask.png"))
}

fn manifest_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Writes `images/NNNNN.png` (plus masks) under `dir` and a manifest at
/// `dir/<manifest_name>`. Returns the manifest path.
pub fn write_dataset(dir: &Path, manifest_name: &str, samples: &[AnnotatedImage]) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = image_name(i);
        write_sample(dir, &rel, s)?;
        rows.push((rel, s.gt));
    }
    let manifest = dir.join(manifest_name);
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

/// Relative path of the `index`-th image written by [`write_dataset`].
pub fn image_name(index: usize) -> String {
    format!("images/{index:05}.png")
}

/// Saves one sample's image (and mask, if any) at `dir/rel`.
pub fn write_sample(dir: &Path, rel: &str, s: &AnnotatedImage) -> Result<()> {
    let path = dir.join(rel);
    s.image.save(&path)?;
    if let Some(m) = &s.mask {
        m.save(mask_path(&path))?;
    }
    Ok(())
}

/// Writes a manifest for images that already exist; paths are taken as
/// relative to the manifest's directory.
pub fn write_manifest(path: &Path, rows: &[(String, BBox)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_err(path, 0, e))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_err(path, 1, e))?;
    for (i, (rel, g)) in rows.iter().enumerate() {
        w.write_record([
            rel.clone(),
            g.x_min.to_string(),
            g.y_min.to_string(),
            g.x_max.to_string(),
            g.y_max.to_string(),
        ])
        .map_err(|e| csv_err(path, i + 2, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, line: usize, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        kind => manifest_err(path, line, format!("{kind:?}")),
    }
}

/// Reads a manifest and every image it references.
///
/// Line numbers in errors are 1-based file lines (the header is line 1).
pub fn load_dataset(manifest: &Path) -> Result<Vec<AnnotatedImage>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = rdr.records();
    match rows.next() {
        None => return Err(manifest_err(manifest, 1, "missing header line")),
        Some(rec) => {
            let rec = rec.map_err(|e| manifest_err(manifest, 1, e.to_string()))?;
            if rec.iter().ne(MANIFEST_HEADER.iter().copied()) {
                return Err(manifest_err(
                    manifest,
                    1,
                    format!("header must be `{}`", MANIFEST_HEADER.join(",")),
                ));
            }
        }
    }
    let mut out = Vec::new();
    for rec in rows {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            manifest_err(manifest, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 5 {
            return Err(manifest_err(manifest, line, format!("expected 5 fields, found {}", rec.len())));
        }
        let mut v = [0.0; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            let field = &rec[k + 1];
            *slot = field
                .parse()
                .map_err(|_| manifest_err(manifest, line, format!("`{}` is not a number: {field:?}", MANIFEST_HEADER[k + 1])))?;
        }
        let gt = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| manifest_err(manifest, line, e.to_string()))?;
        let path = base.join(&rec[0]);
        let image = image::open(&path)
            .map_err(|e| manifest_err(manifest, line, format!("{}: {e}", path.display())))?
            .into_luma8();
        if !in_bounds(&gt, image.width(), image.height()) {
            return Err(manifest_err(
                manifest,
                line,
                format!("box {gt:?} outside the {}x{} image", image.width(), image.height()),
            ));
        }
        let mpath = mask_path(&path);
        let mask = if mpath.exists() {
            let m = image::open(&mpath)?.into_luma8();
            if m.dimensions() != image.dimensions() {
                return Err(manifest_err(manifest, line, "mask size differs from image size"));
            }
            Some(m)
        } else {
            None
        };
        out.push(AnnotatedImage {
            image,
            gt,
            mask,
            source_id: rec[0].to_string(),
        });
    }
    Ok(out)
}

/// Seeded shuffle followed by a prefix split: the first
/// `round(fraction * n)` items go to the training half.
pub fn split<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (fraction * items.len() as f64).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}
