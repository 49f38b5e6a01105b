//! Segmentation samples, the synthetic shapes dataset, augmentation and
//! on-disk dataset directories.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{ResizePlan, IGNORE_INDEX};
use crate::netpbm::Image8;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `H·W` row-major class ids; [`IGNORE_INDEX`] marks unlabelled pixels.
    pub labels: Vec<u8>,
}

impl SegSample {
    pub fn new(image: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("sample image must be [3, H, W], got {s:?}")));
        }
        if labels.len() != s[1] * s[2] {
            return Err(Error::Shape(format!("{} labels for a {}x{} image", labels.len(), s[1], s[2])));
        }
        Ok(Self { image, labels })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Per-class pixel counts, ignoring [`IGNORE_INDEX`].
    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0; 256];
        for &l in &self.labels {
            if l != IGNORE_INDEX {
                h[l as usize] += 1;
            }
        }
        h
    }

    pub fn to_images(&self) -> (Image8, Image8) {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let px = self.image.data();
        let rgb = (0..plane)
            .flat_map(|p| (0..3).map(move |c| (c, p)))
            .map(|(c, p)| (px[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        (Image8::rgb(w, h, rgb), Image8::gray(w, h, self.labels.clone()))
    }

    pub fn from_images(rgb: &Image8, labels: &Image8) -> Result<Self> {
        if rgb.channels != 3 || labels.channels != 1 {
            return Err(Error::Data("expected an RGB image and a grayscale label map".into()));
        }
        if (rgb.width, rgb.height) != (labels.width, labels.height) {
            return Err(Error::Data(format!(
                "image is {}x{} but label map is {}x{}",
                rgb.width, rgb.height, labels.width, labels.height
            )));
        }
        Self::new(image_tensor(rgb)?, labels.data.clone())
    }
}

/// RGB bytes → `[3, H, W]` in `[0, 1]`.
pub fn image_tensor(rgb: &Image8) -> Result<Tensor<f32>> {
    if rgb.channels != 3 {
        return Err(Error::Data("expected an RGB image".into()));
    }
    let plane = rgb.width * rgb.height;
    Ok(Tensor::from_fn(&[3, rgb.height, rgb.width], |i| {
        rgb.data[(i % plane) * 3 + i / plane] as f32 / 255.0
    }))
}

/// Class colours of the synthetic dataset; class 0 is the background.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.10, 0.10, 0.12],
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.90],
    [0.95, 0.55, 0.10],
];

/// Images of coloured rectangles and disks on a dark background, where the
/// colour of each region fixes its class.
pub fn make_toy_dataset(n_images: usize, size: usize, n_classes: usize, seed: u64) -> Result<Vec<SegSample>> {
    if !(2..=PALETTE.len()).contains(&n_classes) {
        return Err(Error::Config(format!("toy dataset supports 2..={} classes, got {n_classes}", PALETTE.len())));
    }
    if size < 16 {
        return Err(Error::Config(format!("toy images must be at least 16 pixels, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        let mut labels = vec![0u8; size * size];
        let shapes = rng.gen_range(2..=3);
        for k in 0..shapes {
            // cycle through foreground classes so each image shows several
            let class = (1 + (k + rng.gen_range(0..n_classes - 1)) % (n_classes - 1)) as u8;
            let (lo, hi) = (size / 4, size / 2);
            if rng.gen_bool(0.5) {
                let (h, w) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
                let (y0, x0) = (rng.gen_range(0..=size - h), rng.gen_range(0..=size - w));
                for y in y0..y0 + h {
                    labels[y * size + x0..y * size + x0 + w].fill(class);
                }
            } else {
                let r = rng.gen_range(lo as f32 / 2.0..=hi as f32 / 2.0);
                let cy = rng.gen_range(r..size as f32 - r);
                let cx = rng.gen_range(r..size as f32 - r);
                for y in 0..size {
                    for x in 0..size {
                        if (y as f32 + 0.5 - cy).powi(2) + (x as f32 + 0.5 - cx).powi(2) <= r * r {
                            labels[y * size + x] = class;
                        }
                    }
                }
            }
        }
        let plane = size * size;
        let image = Tensor::from_fn(&[3, size, size], |i| {
            let noise: f32 = rng.gen_range(-0.04..0.04);
            (PALETTE[labels[i % plane] as usize][i / plane] + noise).clamp(0.0, 1.0)
        });
        out.push(SegSample::new(image, labels)?);
    }
    Ok(out)
}

/// One concrete draw of the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub flip: bool,
    /// Crop origin within the scaled (and possibly padded) image.
    pub offset: (usize, usize),
}

fn nearest_index(o: usize, in_len: usize, out_len: usize) -> usize {
    (((o as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1)
}

/// Resize, flip, then crop (padding with 0 / ignore when short) per `draw`.
pub fn augment_with(sample: &SegSample, crop: (usize, usize), draw: AugmentDraw) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let sh = ((h as f64 * draw.scale).round() as usize).max(1);
    let sw = ((w as f64 * draw.scale).round() as usize).max(1);

    let img = if (sh, sw) == (h, w) {
        sample.image.data().to_vec()
    } else {
        ResizePlan::new(3, h, w, sh, sw, false).forward(sample.image.data())
    };
    let labels: Vec<u8> = if (sh, sw) == (h, w) {
        sample.labels.clone()
    } else {
        (0..sh * sw)
            .map(|i| sample.labels[nearest_index(i / sw, h, sh) * w + nearest_index(i % sw, w, sw)])
            .collect()
    };

    let (ch, cw) = crop;
    let mut out_img = vec![0.0f32; 3 * ch * cw];
    let mut out_lab = vec![IGNORE_INDEX; ch * cw];
    for y in 0..ch {
        let sy = y + draw.offset.0;
        if sy >= sh {
            break;
        }
        for x in 0..cw {
            let sx = x + draw.offset.1;
            if sx >= sw {
                break;
            }
            let src_x = if draw.flip { sw - 1 - sx } else { sx };
            out_lab[y * cw + x] = labels[sy * sw + src_x];
            for c in 0..3 {
                out_img[(c * ch + y) * cw + x] = img[(c * sh + sy) * sw + src_x];
            }
        }
    }
    SegSample {
        image: Tensor::new(vec![3, ch, cw], out_img).expect("sized above"),
        labels: out_lab,
    }
}

/// Scale uniform in `[0.5, 2]`, horizontal flip with probability ½, random crop.
pub fn augment(sample: &SegSample, crop: (usize, usize), rng: &mut impl Rng) -> SegSample {
    let scale = rng.gen_range(0.5..=2.0);
    let flip = rng.gen_bool(0.5);
    let sh = ((sample.height() as f64 * scale).round() as usize).max(1);
    let sw = ((sample.width() as f64 * scale).round() as usize).max(1);
    let oy = if sh > crop.0 { rng.gen_range(0..=sh - crop.0) } else { 0 };
    let ox = if sw > crop.1 { rng.gen_range(0..=sw - crop.1) } else { 0 };
    augment_with(sample, crop, AugmentDraw { scale, flip, offset: (oy, ox) })
}

/// Write samples as `<id>.ppm` / `<id>.pgm` with zero-padded ids.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[SegSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let (rgb, lab) = s.to_images();
        rgb.write(dir.join(format!("{i:04}.ppm")))?;
        lab.write(dir.join(format!("{i:04}.pgm")))?;
    }
    Ok(())
}

/// Read every `<id>.ppm` with a matching `<id>.pgm`, sorted by id.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SegSample>> {
    let dir = dir.as_ref();
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "ppm").then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!("{}: no .ppm images found", dir.display())));
    }
    ids.iter()
        .map(|id| {
            let lab = dir.join(format!("{id}.pgm"));
            if !lab.exists() {
                return Err(Error::Data(format!("{}: image `{id}` has no label map", dir.display())));
            }
            SegSample::from_images(&Image8::read(dir.join(format!("{id}.ppm")))?, &Image8::read(lab)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SegSample {
        make_toy_dataset(1, 32, 4, 9).unwrap().remove(0)
    }

    #[test]
    fn toy_dataset_is_deterministic_and_colour_coded() {
        let a = make_toy_dataset(3, 32, 4, 1).unwrap();
        assert_eq!(a, make_toy_dataset(3, 32, 4, 1).unwrap());
        assert_ne!(a, make_toy_dataset(3, 32, 4, 2).unwrap());
        for s in &a {
            assert!(s.labels.iter().all(|&l| l < 4));
            assert!(s.labels.iter().any(|&l| l != 0));
            for p in 0..32 * 32 {
                let want = PALETTE[s.labels[p] as usize];
                for c in 0..3 {
                    assert!((s.image.data()[c * 1024 + p] - want[c]).abs() <= 0.04 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn neutral_draw_is_identity() {
        let s = sample();
        let out = augment_with(&s, (32, 32), AugmentDraw { scale: 1.0, flip: false, offset: (0, 0) });
        assert_eq!(out, s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let flip = AugmentDraw { scale: 1.0, flip: true, offset: (0, 0) };
        let once = augment_with(&s, (32, 32), flip);
        assert_ne!(once, s);
        assert_eq!(once.histogram(), s.histogram());
        assert_eq!(augment_with(&once, (32, 32), flip), s);
    }

    #[test]
    fn short_crops_are_padded_with_ignore() {
        let s = sample();
        let out = augment_with(&s, (64, 64), AugmentDraw { scale: 0.5, flip: false, offset: (0, 0) });
        assert_eq!(out.image.shape(), &[3, 64, 64]);
        assert_eq!(out.labels[63 * 64 + 63], IGNORE_INDEX);
        assert_eq!(out.image.data()[63 * 64 + 63], 0.0);
        assert_ne!(out.labels[0], IGNORE_INDEX);
        assert!(out.labels[..16].iter().all(|&l| l < 4));
    }

    #[test]
    fn nearest_label_resize_keeps_ids() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let out = augment(&s, (32, 32), &mut rng);
            assert!(out.labels.iter().all(|&l| l < 4 || l == IGNORE_INDEX));
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = make_toy_dataset(2, 32, 3, 4).unwrap();
        save_dataset(dir.path(), &set).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in set.iter().zip(&back) {
            assert_eq!(a.labels, b.labels);
            assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-6);
        }
        fs::remove_file(dir.path().join("0001.pgm")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }
}
