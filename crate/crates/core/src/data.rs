//! Procedural desk-scale image data.
//!
//! Ten parametric grayscale shape classes rendered onto small grids. Two
//! appearance presets create a controllable domain gap: the *teacher domain*
//! renders with a narrow, high-contrast appearance, while the *generic
//! corpus* used to pre-train the denoiser randomizes contrast, jitter and
//! polarity across a much wider range. Images are `f64` in `[0,1]`,
//! stored on disk as 16-bit PNG plus a labels file.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of shape classes in the roster.
pub const ROSTER_SIZE: usize = 10;

pub const ROSTER_NAMES: [&str; ROSTER_SIZE] = [
    "disk",
    "cross",
    "hstripes",
    "vstripes",
    "square",
    "diagonal",
    "checker",
    "triangle",
    "ring",
    "xcross",
];

/// A labeled image set in memory.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    /// `[N, C, H, W]`, values in `[0,1]`.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn batch(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        let (c, h, w) = (
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        );
        let mut out = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.images.index_axis(ndarray::Axis(0), i));
            labels.push(self.labels[i]);
        }
        (out, labels)
    }

    pub fn per_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Sampling ranges for the rendering parameters of one appearance domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AppearanceRange {
    pub fg: (f64, f64),
    pub bg: (f64, f64),
    pub noise_sigma: (f64, f64),
    /// Max absolute center offset in pixels.
    pub jitter: f64,
    /// Relative shape size range (1.0 = nominal).
    pub size: (f64, f64),
    /// Probability of polarity inversion (`img -> 1 - img`).
    pub invert_prob: f64,
}

/// Narrow high-contrast appearance: what the teacher is trained on.
pub fn teacher_domain() -> AppearanceRange {
    AppearanceRange {
        fg: (0.85, 0.95),
        bg: (0.05, 0.15),
        noise_sigma: (0.03, 0.06),
        jitter: 1.0,
        size: (0.9, 1.1),
        invert_prob: 0.0,
    }
}

/// Wide appearance used to pre-train the denoiser: varied but consistently
/// lower contrast than the teacher domain, larger jitter and frequent
/// polarity inversion. The gap is what guided editing has to close.
pub fn generic_domain() -> AppearanceRange {
    AppearanceRange {
        fg: (0.35, 0.8),
        bg: (0.0, 0.45),
        noise_sigma: (0.02, 0.14),
        jitter: 3.0,
        size: (0.6, 1.3),
        invert_prob: 0.4,
    }
}

/// Binary mask for one shape class on an `res x res` grid.
///
/// Coordinates are pixel centers; `cx, cy` is the (jittered) shape center and
/// `scale` the relative size.
fn shape_mask(class: usize, res: usize, cx: f64, cy: f64, scale: f64) -> Array2<f64> {
    let r = res as f64;
    let radius = 0.32 * r * scale;
    let thick = (0.09 * r * scale).max(1.0);
    let mut mask = Array2::zeros((res, res));
    for y in 0..res {
        for x in 0..res {
            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            let dist = (px * px + py * py).sqrt();
            let inside = match class {
                0 => dist <= radius,
                1 => px.abs() <= thick / 2.0 || py.abs() <= thick / 2.0,
                2 => {
                    let band = (0.22 * r * scale).max(2.0);
                    ((y as f64 + 0.5 + cy) / band).floor() as i64 % 2 == 0
                }
                3 => {
                    let band = (0.22 * r * scale).max(2.0);
                    ((x as f64 + 0.5 + cx) / band).floor() as i64 % 2 == 0
                }
                4 => {
                    let d = px.abs().max(py.abs());
                    (d - radius).abs() <= thick / 2.0
                }
                5 => (px - py).abs() <= thick,
                6 => {
                    let cell = (0.25 * r * scale).max(2.0);
                    let ix = ((x as f64 + 0.5 + cx) / cell).floor() as i64;
                    let iy = ((y as f64 + 0.5 + cy) / cell).floor() as i64;
                    (ix + iy) % 2 == 0
                }
                7 => py >= -radius && py <= radius && px.abs() <= (py + radius) * 0.6,
                8 => (dist - radius).abs() <= thick / 2.0,
                9 => (px - py).abs() <= thick || (px + py).abs() <= thick,
                _ => panic!("shape class {class} outside roster"),
            };
            if inside {
                mask[[y, x]] = 1.0;
            }
        }
    }
    mask
}

/// Render one image of `class` with parameters drawn from `domain`.
pub fn render_image(
    class: usize,
    res: usize,
    domain: &AppearanceRange,
    rng: &mut ChaCha12Rng,
) -> Array2<f64> {
    let fg = rng.gen_range(domain.fg.0..=domain.fg.1);
    let bg = rng.gen_range(domain.bg.0..=domain.bg.1);
    let sigma = rng.gen_range(domain.noise_sigma.0..=domain.noise_sigma.1);
    let cx = res as f64 / 2.0 + rng.gen_range(-domain.jitter..=domain.jitter);
    let cy = res as f64 / 2.0 + rng.gen_range(-domain.jitter..=domain.jitter);
    let scale = rng.gen_range(domain.size.0..=domain.size.1);
    let invert = rng.gen_bool(domain.invert_prob);
    let mask = shape_mask(class, res, cx, cy, scale);
    let mut img = mask.mapv(|m| bg + (fg - bg) * m);
    img.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    if invert {
        img.mapv_inplace(|v| 1.0 - v);
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// Balanced dataset over `classes` (labels are positions in `classes`).
pub fn generate_dataset(
    classes: &[usize],
    per_class: usize,
    res: usize,
    domain: &AppearanceRange,
    seed: u64,
) -> Result<ImageDataset> {
    for &c in classes {
        if c >= ROSTER_SIZE {
            return Err(Error::Config(format!(
                "class {c} outside the {ROSTER_SIZE}-class roster"
            )));
        }
    }
    let n = classes.len() * per_class;
    let mut rng = crate::rng::seeded(seed);
    let mut images = Array4::zeros((n, 1, res, res));
    let mut labels = Vec::with_capacity(n);
    let mut i = 0;
    for _rep in 0..per_class {
        for (label, &class) in classes.iter().enumerate() {
            let img = render_image(class, res, domain, &mut rng);
            images
                .index_axis_mut(ndarray::Axis(0), i)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(&img);
            labels.push(label);
            i += 1;
        }
    }
    Ok(ImageDataset {
        images,
        labels,
        num_classes: classes.len(),
    })
}

/// Balanced dataset over the full roster (labels are roster ids), used to
/// pre-train the denoiser.
pub fn generate_roster_corpus(
    per_class: usize,
    res: usize,
    domain: &AppearanceRange,
    seed: u64,
) -> Result<ImageDataset> {
    let classes: Vec<usize> = (0..ROSTER_SIZE).collect();
    generate_dataset(&classes, per_class, res, domain, seed)
}

// ---- disk layout -----------------------------------------------------------

/// Write one `[C,H,W]` image (clamped to `[0,1]`) as 16-bit PNG.
pub fn save_image(path: &Path, img: ArrayView3<f64>) -> Result<()> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    match c {
        1 => {
            let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    buf.put_pixel(x as u32, y as u32, image::Luma([quant(img[[0, y, x]])]));
                }
            }
            buf.save(path)
                .map_err(|e| Error::Manifest(format!("write {}: {e}", path.display())))
        }
        3 => {
            let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    buf.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgb([
                            quant(img[[0, y, x]]),
                            quant(img[[1, y, x]]),
                            quant(img[[2, y, x]]),
                        ]),
                    );
                }
            }
            buf.save(path)
                .map_err(|e| Error::Manifest(format!("write {}: {e}", path.display())))
        }
        _ => Err(Error::Config(format!(
            "unsupported channel count {c} for image files"
        ))),
    }
}

/// Read a PNG written by [`save_image`] back to `[C,H,W]` in `[0,1]`.
pub fn load_image(path: &Path) -> Result<ndarray::Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Manifest(format!("read {}: {e}", path.display())))?;
    match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut out = ndarray::Array3::zeros((1, h, w));
            for y in 0..h {
                for x in 0..w {
                    out[[0, y, x]] = buf.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0;
                }
            }
            Ok(out)
        }
        image::DynamicImage::ImageRgb16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut out = ndarray::Array3::zeros((3, h, w));
            for y in 0..h {
                for x in 0..w {
                    let p = buf.get_pixel(x as u32, y as u32).0;
                    for c in 0..3 {
                        out[[c, y, x]] = p[c] as f64 / 65535.0;
                    }
                }
            }
            Ok(out)
        }
        other => {
            let gray = other.into_luma16();
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let mut out = ndarray::Array3::zeros((1, h, w));
            for y in 0..h {
                for x in 0..w {
                    out[[0, y, x]] = gray.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0;
                }
            }
            Ok(out)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    num_classes: usize,
    resolution: usize,
    channels: usize,
    count: usize,
}

/// Materialize a dataset as `images/*.png` + `labels.csv` + `meta.json`.
pub fn save_dataset(dir: &Path, ds: &ImageDataset) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let mut labels = String::from("index,path,label\n");
    for i in 0..ds.len() {
        let rel = format!("images/{i:05}.png");
        save_image(&dir.join(&rel), ds.images.index_axis(ndarray::Axis(0), i))?;
        labels.push_str(&format!("{i},{rel},{}\n", ds.labels[i]));
    }
    fs::write(dir.join("labels.csv"), labels)?;
    let meta = DatasetMeta {
        num_classes: ds.num_classes,
        resolution: ds.resolution(),
        channels: ds.channels(),
        count: ds.len(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Load a dataset previously written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<ImageDataset> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let text = fs::read_to_string(dir.join("labels.csv"))?;
    let mut images = Array4::zeros((meta.count, meta.channels, meta.resolution, meta.resolution));
    let mut labels = Vec::with_capacity(meta.count);
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let index: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Manifest(format!("bad labels line: {line}")))?;
        let rel = parts
            .next()
            .ok_or_else(|| Error::Manifest(format!("bad labels line: {line}")))?;
        let label: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Manifest(format!("bad labels line: {line}")))?;
        let img = load_image(&dir.join(rel))?;
        images.index_axis_mut(ndarray::Axis(0), index).assign(&img);
        labels.push(label);
    }
    if labels.len() != meta.count {
        return Err(Error::Manifest(format!(
            "dataset at {} lists {} labels, meta says {}",
            dir.display(),
            labels.len(),
            meta.count
        )));
    }
    Ok(ImageDataset {
        images,
        labels,
        num_classes: meta.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datasets_are_balanced_and_deterministic() {
        let a = generate_dataset(&[0, 1], 10, 16, &teacher_domain(), 42).unwrap();
        let b = generate_dataset(&[0, 1], 10, 16, &teacher_domain(), 42).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.per_class_counts(), vec![10, 10]);
        let c = generate_dataset(&[0, 1], 10, 16, &teacher_domain(), 43).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn all_roster_classes_render_distinct_masks() {
        let res = 16;
        let mut masks = Vec::new();
        for class in 0..ROSTER_SIZE {
            let m = shape_mask(class, res, 8.0, 8.0, 1.0);
            let on = m.sum();
            assert!(
                on > 4.0 && on < (res * res) as f64 - 4.0,
                "class {class} mask degenerate: {on}"
            );
            masks.push(m);
        }
        for i in 0..ROSTER_SIZE {
            for j in (i + 1)..ROSTER_SIZE {
                let diff = (&masks[i] - &masks[j]).mapv(f64::abs).sum();
                assert!(diff > 2.0, "classes {i} and {j} render nearly identically");
            }
        }
    }

    #[test]
    fn save_load_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&[2, 5], 3, 16, &teacher_domain(), 7).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.labels, ds.labels);
        let max_err = (&loaded.images - &ds.images)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 0.5 / 65535.0 + 1e-9, "max err {max_err}");
    }

    #[test]
    fn teacher_domain_is_higher_contrast_than_generic_average() {
        let t = generate_dataset(&[0], 32, 16, &teacher_domain(), 1).unwrap();
        let g = generate_dataset(&[0], 32, 16, &generic_domain(), 1).unwrap();
        let spread = |ds: &ImageDataset| {
            let mean = ds.images.mean().unwrap();
            ds.images.mapv(|v| (v - mean).powi(2)).mean().unwrap()
        };
        assert!(spread(&t) > 0.5 * spread(&g));
    }
}
