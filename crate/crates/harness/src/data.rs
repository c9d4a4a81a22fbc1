//! Procedural image datasets and the `DSET` container.
//!
//! Layout, little-endian: magic `DSET`, u32 version (1), u32 count,
//! u32 channels, u32 width, u32 height, `count` u8 labels, then every
//! image's f32 pixels in order.

use std::path::Path;

use rand::Rng;
use shadowcert_core::binio::{put_f32s, put_u32, Reader};
use shadowcert_core::{rng, Error, Section, Tensor};

use crate::error::{HarnessError, Result};

const MAGIC: &[u8; 4] = b"DSET";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(HarnessError::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(HarnessError::invalid(
                "a dataset needs at least two classes",
            ));
        }
        if let Some(y) = labels.iter().find(|y| **y >= classes) {
            return Err(HarnessError::invalid(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        if let Some(first) = images.first() {
            for x in &images {
                x.check_image()?;
                if x.shape() != first.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: first.shape().to_vec(),
                        actual: x.shape().to_vec(),
                    }
                    .into());
                }
            }
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(Tensor::shape)
    }

    /// The first example of every class, in class order.
    pub fn one_per_class(&self) -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for c in 0..self.classes {
            if let Some(i) = self.labels.iter().position(|y| *y == c) {
                images.push(self.images[i].clone());
                labels.push(c);
            }
        }
        Dataset {
            images,
            labels,
            classes: self.classes,
        }
    }
}

const TINTS: [[f32; 3]; 10] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.2, 1.0],
    [1.0, 1.0, 0.2],
    [0.2, 1.0, 1.0],
    [1.0, 0.2, 1.0],
    [1.0, 0.6, 0.2],
    [0.6, 0.2, 1.0],
    [1.0, 1.0, 1.0],
    [0.2, 0.6, 0.6],
];

/// Value in `[0, 1]` of spatial pattern `kind` at row `i`, column `j`.
fn pattern(kind: usize, i: usize, j: usize, w: usize, h: usize, phase: usize) -> f32 {
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    let (ci, cj) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    match kind % 10 {
        0 => on((i + phase) % 2 == 0),
        1 => on((j + phase) % 2 == 0),
        2 => on((i + j + phase) % 2 == 0),
        3 => on((i + j + phase) % 4 < 2),
        4 => on((i + h - j + phase) % 4 < 2),
        5 => {
            let d = ((i as f32 - ci).powi(2) + (j as f32 - cj).powi(2)).sqrt();
            on(d < w.min(h) as f32 / 4.0 + phase as f32 * 0.5)
        }
        6 => on(i == 0 || j == 0 || i + 1 == w || j + 1 == h),
        7 => on(j < h / 2),
        8 => on(i < w / 2),
        _ => on((i as f32 - ci).abs() < 1.0 || (j as f32 - cj).abs() < 1.0),
    }
}

/// Appearance of generated images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    /// Background level range.
    pub base: (f32, f32),
    /// Pattern amplitude range.
    pub amp: (f32, f32),
    /// Standard deviation of the per-pixel noise.
    pub noise: f64,
}

impl Default for Style {
    fn default() -> Self {
        Style {
            base: (0.2, 0.4),
            amp: (0.2, 0.4),
            noise: 0.08,
        }
    }
}

/// `classes * per_class` three-channel images; example `i` has label
/// `i % classes` and is drawn from the stream `derive_seed(seed, i)`.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Dataset> {
    gen_styled(classes, per_class, width, height, seed, &Style::default())
}

/// [`gen_synthetic`] with an explicit [`Style`].
pub fn gen_styled(
    classes: usize,
    per_class: usize,
    width: usize,
    height: usize,
    seed: u64,
    style: &Style,
) -> Result<Dataset> {
    if !(style.base.0 < style.base.1 && style.amp.0 < style.amp.1 && style.noise >= 0.0) {
        return Err(HarnessError::invalid(format!("degenerate style {style:?}")));
    }
    if classes < 2 || classes > 256 {
        return Err(HarnessError::invalid(format!(
            "class count must lie in [2, 256], got {classes}"
        )));
    }
    if per_class == 0 || width < 2 || height < 2 {
        return Err(HarnessError::invalid(format!(
            "degenerate dataset dimensions: per_class {per_class}, {width}x{height}"
        )));
    }
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    let mut noise = vec![0.0f64; 3 * width * height];
    for idx in 0..classes * per_class {
        let label = idx % classes;
        let mut stream = rng::stream(rng::derive_seed(seed, idx as u64));
        let phase = stream.random_range(0..2usize);
        let base: f32 = stream.random_range(style.base.0..style.base.1);
        let amp: f32 = stream.random_range(style.amp.0..style.amp.1);
        rng::fill_box_muller(&mut stream, style.noise, &mut noise);
        let tint = TINTS[(label + label / 10) % 10];
        let plane = width * height;
        let img = Tensor::from_fn(vec![3, width, height], |k| {
            let (c, rest) = (k / plane, k % plane);
            let (i, j) = (rest / height, rest % height);
            let p = pattern(label, i, j, width, height, phase);
            (base + amp * p * tint[c] + noise[k] as f32).clamp(0.0, 1.0)
        });
        images.push(img);
        labels.push(label);
    }
    Dataset::new(images, labels, classes)
}

pub fn encode(data: &Dataset) -> Result<Vec<u8>> {
    let shape = data.image_shape().unwrap_or(&[3, 0, 0]);
    let &[c, w, h] = shape else {
        return Err(HarnessError::invalid(format!(
            "images must be (C, W, H), got {shape:?}"
        )));
    };
    if data.classes > 256 {
        return Err(HarnessError::invalid(
            "labels are stored as u8; at most 256 classes",
        ));
    }
    let mut out = Vec::with_capacity(24 + data.len() * (1 + 4 * c * w * h));
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for v in [data.len(), c, w, h] {
        put_u32(&mut out, v as u32);
    }
    out.extend(data.labels.iter().map(|y| *y as u8));
    for x in &data.images {
        put_f32s(&mut out, x.data());
    }
    Ok(out)
}

/// Decodes a `DSET` buffer. The class count is not stored; it is taken as
/// one more than the largest label, and at least 2.
pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(4, Section::Magic)? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            section: Section::Magic,
            message: "expected DSET".into(),
        }
        .into());
    }
    let version = r.u32(Section::Version)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version).into());
    }
    let count = r.u32(Section::Header)? as usize;
    let c = r.u32(Section::Header)? as usize;
    let w = r.u32(Section::Header)? as usize;
    let h = r.u32(Section::Header)? as usize;
    if !(c == 1 || c == 3) {
        return Err(r
            .error(
                Section::Header,
                format!("channel count must be 1 or 3, got {c}"),
            )
            .into());
    }
    let labels: Vec<usize> = r
        .take(count, Section::Labels)?
        .iter()
        .map(|b| *b as usize)
        .collect();
    let len = c
        .checked_mul(w)
        .and_then(|v| v.checked_mul(h))
        .ok_or_else(|| r.error(Section::Header, "image extents overflow"))?;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let px = r.f32s(len, Section::Pixels)?;
        images.push(Tensor::new(vec![c, w, h], px)?);
    }
    r.finish()?;
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(images, labels, classes)
}

pub fn save(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode(data)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    decode(&std::fs::read(path)?)
}
