//! Effective receptive fields.
//!
//! A unit gradient is placed on every channel of the central feature vector of
//! a chosen map, backpropagated to the input, reduced to `Σ_c |∂/∂x|` per
//! pixel, averaged across images and max-normalized.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::{Tape, Var};
use crate::model::SegFormer;
use crate::netpbm::Image8;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErfTarget {
    /// Encoder stage output, 1-based.
    Stage(usize),
    /// Fused decoder feature before classification.
    Head,
}

impl fmt::Display for ErfTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Stage(i) => write!(f, "stage{i}"),
            Self::Head => f.write_str("head"),
        }
    }
}

impl FromStr for ErfTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let t = match s.as_str() {
            "head" | "decoder" | "decoder_head" => Self::Head,
            _ => Self::Stage(s.strip_prefix("stage").unwrap_or(&s).parse().map_err(|_| Error::Usage(format!("unknown ERF target `{s}`")))?),
        };
        t.validate()?;
        Ok(t)
    }
}

impl ErfTarget {
    pub fn validate(self) -> Result<()> {
        match self {
            Self::Stage(i) if !(1..=4).contains(&i) => Err(Error::Usage(format!("stage {i} out of range 1..=4"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ErfMap {
    /// `[H, W]`, values in `[0, 1]`.
    pub map: Tensor<f64>,
    pub target: ErfTarget,
    pub images: usize,
}

impl ErfMap {
    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn to_pgm(&self) -> Image8 {
        let data = self.map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Image8::gray(self.width(), self.height(), data)
    }

    /// `key: value` summary written next to the PGM.
    pub fn sidecar(&self) -> String {
        format!(
            "target: {}\nimages: {}\nheight: {}\nwidth: {}\nr50: {:.4}\nr90: {:.4}\n",
            self.target,
            self.images,
            self.height(),
            self.width(),
            erf_radius(self, 0.5),
            erf_radius(self, 0.9)
        )
    }
}

/// Smallest radius of a disk centred on `(⌊H/2⌋, ⌊W/2⌋)` holding at least `mass` of the total.
pub fn erf_radius(map: &ErfMap, mass: f64) -> f64 {
    radius_of(&map.map, mass)
}

pub fn radius_of(map: &Tensor<f64>, mass: f64) -> f64 {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let total: f64 = map.data().iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut px: Vec<(f64, f64)> = map
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| ((((i / w) as f64 - cy).powi(2) + ((i % w) as f64 - cx).powi(2)).sqrt(), v))
        .collect();
    px.sort_by(|a, b| a.0.total_cmp(&b.0));
    let goal = mass.clamp(0.0, 1.0) * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    let mut i = 0;
    while i < px.len() {
        // pixels at equal distance enter the disk together
        let r = px[i].0;
        while i < px.len() && px[i].0 == r {
            acc += px[i].1;
            i += 1;
        }
        if acc >= goal {
            return r;
        }
    }
    px.last().map_or(0.0, |p| p.0)
}

/// Per-pixel input-gradient magnitude for each image in a `[B, 3, H, W]` batch.
///
/// `feature` maps the input to a `[B, C, h, w]` map whose central vector is seeded.
pub fn input_saliency<T: Float>(
    images: &Tensor<T>,
    feature: impl Fn(&mut Tape<T>, &Var<T>) -> Result<Var<T>>,
) -> Result<Vec<Tensor<f64>>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [B, C, H, W] images, got {s:?}")));
    }
    let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let mut tape = Tape::new();
    let x = tape.leaf(images.clone(), true);
    let f = feature(&mut tape, &x)?;
    let fs = f.shape().to_vec();
    if fs.len() != 4 || fs[0] != b {
        return Err(Error::Shape(format!("feature map {fs:?} does not match batch {b}")));
    }
    let (c, fh, fw) = (fs[1], fs[2], fs[3]);
    let centre = (fh / 2) * fw + fw / 2;
    let mut seed = Tensor::zeros(&fs);
    for bi in 0..b {
        for ci in 0..c {
            seed.data_mut()[(bi * c + ci) * fh * fw + centre] = T::one();
        }
    }
    tape.backward_with_seed(&f, &seed)?;
    let g = tape.grad(&x).unwrap_or_else(|| Tensor::zeros(s));
    Ok((0..b)
        .map(|bi| {
            Tensor::from_fn(&[h, w], |p| {
                (0..cin).map(|ci| g.data()[(bi * cin + ci) * h * w + p].as_f64().abs()).sum()
            })
        })
        .collect())
}

fn finish(maps: Vec<Tensor<f64>>, target: ErfTarget) -> Result<ErfMap> {
    let n = maps.len();
    let mut acc = maps.into_iter().reduce(|mut a, m| {
        a.data_mut().iter_mut().zip(m.data()).for_each(|(x, y)| *x += y);
        a
    }).ok_or_else(|| Error::Usage("ERF needs at least one image".into()))?;
    let peak = acc.data().iter().copied().fold(0.0, f64::max);
    if !peak.is_finite() {
        return Err(Error::Numerical("non-finite ERF gradient".into()));
    }
    if peak > 0.0 {
        acc.data_mut().iter_mut().for_each(|v| *v /= peak);
    }
    Ok(ErfMap { map: acc, target, images: n })
}

fn stack<T: Float>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Usage("ERF needs at least one image".into()))?;
    let s = first.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W] images, got {s:?}")));
    }
    if let Some(bad) = images.iter().find(|i| i.shape() != s) {
        return Err(Error::Shape(format!("images differ in shape: {s:?} vs {:?}", bad.shape())));
    }
    let mut data = Vec::with_capacity(images.len() * first.len());
    for i in images {
        data.extend_from_slice(i.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(s);
    Tensor::new(shape, data)
}

fn model_feature<T: Float>(model: &SegFormer<T>, target: ErfTarget) -> impl Fn(&mut Tape<T>, &Var<T>) -> Result<Var<T>> + '_ {
    move |tape, x| {
        let out = model.forward(tape, x, false)?;
        Ok(match target {
            ErfTarget::Stage(i) => out.pyramid.levels[i - 1].clone(),
            ErfTarget::Head => out.fused,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ErfOptions {
    /// Pack all images into one forward pass instead of one pass per image.
    pub batched: bool,
    pub threads: usize,
}

impl Default for ErfOptions {
    fn default() -> Self {
        Self { batched: false, threads: 1 }
    }
}

/// ERF of `target` averaged over `images` (each `[3, H, W]`).
pub fn compute_erf<T: Float>(model: &SegFormer<T>, target: ErfTarget, images: &[Tensor<T>]) -> Result<ErfMap> {
    compute_erf_with(model, target, images, ErfOptions::default())
}

pub fn compute_erf_with<T: Float>(model: &SegFormer<T>, target: ErfTarget, images: &[Tensor<T>], opts: ErfOptions) -> Result<ErfMap> {
    target.validate()?;
    let batch = stack(images)?;
    if opts.batched {
        return finish(input_saliency(&batch, model_feature(model, target))?, target);
    }
    let single = |img: &Tensor<T>| -> Result<Tensor<f64>> {
        let x = img.clone().reshaped(&[1, 3, img.shape()[1], img.shape()[2]])?;
        Ok(input_saliency(&x, model_feature(model, target))?.remove(0))
    };
    let threads = opts.threads.max(1).min(images.len());
    let maps: Vec<Tensor<f64>> = if threads <= 1 {
        images.iter().map(single).collect::<Result<_>>()?
    } else {
        let chunk = images.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = images
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(single).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(images.len());
            for h in handles {
                out.extend(h.join().map_err(|_| Error::Numerical("ERF worker panicked".into()))??);
            }
            Ok::<_, Error>(out)
        })?
    };
    finish(maps, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MitConfig;
    use crate::gradcheck::random_tensor;

    fn delta(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w], |i| if i == (h / 2) * w + w / 2 { 1.0 } else { 0.0 })
    }

    #[test]
    fn pointwise_model_has_point_erf() {
        let w = random_tensor(&[4, 3, 1, 1], 1, 1.0);
        let x = random_tensor(&[1, 3, 8, 8], 2, 1.0);
        let maps = input_saliency(&x, |tape, x| {
            let w = tape.constant(w.clone());
            tape.conv2d(x, &w, None, 1, 0, 1)
        })
        .unwrap();
        let m = &maps[0];
        let nz: Vec<usize> = (0..64).filter(|&i| m.data()[i] != 0.0).collect();
        assert_eq!(nz, vec![4 * 8 + 4]);
    }

    /// Which input pixels change the central output when perturbed.
    fn brute_force_support(w: &Tensor<f64>, x: &Tensor<f64>) -> Vec<bool> {
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
            let y = tape.conv2d(&xv, &wv, None, 1, 1, 1).unwrap();
            let y = y.value();
            (0..2).map(|c| y.data()[c * 49 + 3 * 7 + 3]).collect::<Vec<_>>()
        };
        let base = run(x);
        (0..49)
            .map(|p| {
                (0..3).any(|c| {
                    let mut xp = x.clone();
                    xp.data_mut()[c * 49 + p] += 0.5;
                    run(&xp) != base
                })
            })
            .collect()
    }

    #[test]
    fn conv3x3_support_is_the_centre_block() {
        let w = random_tensor(&[2, 3, 3, 3], 5, 1.0);
        let x = random_tensor(&[1, 3, 7, 7], 6, 1.0);
        let support = brute_force_support(&w, &x);
        let map = finish(
            input_saliency(&x, |tape, x| {
                let w = tape.constant(w.clone());
                tape.conv2d(x, &w, None, 1, 1, 1)
            })
            .unwrap(),
            ErfTarget::Stage(1),
        )
        .unwrap();
        for p in 0..49 {
            assert_eq!(map.map.data()[p] > 0.0, support[p], "pixel {p}");
            let (r, c) = (p / 7, p % 7);
            assert_eq!(support[p], r.abs_diff(3) <= 1 && c.abs_diff(3) <= 1);
        }
        assert!(erf_radius(&map, 0.99) <= 2.0);
    }

    #[test]
    fn radius_examples() {
        let d = ErfMap { map: delta(9, 9), target: ErfTarget::Head, images: 1 };
        assert_eq!(erf_radius(&d, 0.5), 0.0);
        assert_eq!(erf_radius(&d, 1.0), 0.0);
        let u = ErfMap { map: Tensor::ones(&[8, 8]), target: ErfTarget::Head, images: 1 };
        assert!((erf_radius(&u, 1.0) - (32f64).sqrt()).abs() < 1e-12);
        assert_eq!(erf_radius(&u, 1.0 / 64.0), 0.0);
    }

    #[test]
    fn radius_is_monotone_in_mass() {
        let m = ErfMap { map: random_tensor(&[10, 12], 3, 1.0).map(f64::abs), target: ErfTarget::Head, images: 1 };
        let mut prev = 0.0;
        for k in 0..=20 {
            let r = erf_radius(&m, k as f64 / 20.0);
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn target_parsing() {
        assert_eq!("4".parse::<ErfTarget>().unwrap(), ErfTarget::Stage(4));
        assert_eq!("stage2".parse::<ErfTarget>().unwrap(), ErfTarget::Stage(2));
        assert_eq!("head".parse::<ErfTarget>().unwrap(), ErfTarget::Head);
        assert!("5".parse::<ErfTarget>().is_err());
        assert!("0".parse::<ErfTarget>().is_err());
    }

    fn images(n: usize, size: usize) -> Vec<Tensor<f32>> {
        (0..n).map(|i| random_tensor(&[3, size, size], 50 + i as u64, 1.0).cast()).collect()
    }

    #[test]
    fn batching_and_threads_do_not_change_the_map() {
        let model = SegFormer::build(MitConfig::b0_micro(2), 3).unwrap();
        let imgs = images(3, 64);
        for target in [ErfTarget::Stage(2), ErfTarget::Head] {
            let a = compute_erf(&model, target, &imgs).unwrap();
            let b = compute_erf_with(&model, target, &imgs, ErfOptions { batched: true, threads: 1 }).unwrap();
            let c = compute_erf_with(&model, target, &imgs, ErfOptions { batched: false, threads: 3 }).unwrap();
            assert!(a.map.max_abs_diff(&b.map) < 1e-6);
            assert_eq!(a.map.data(), c.map.data());
            assert_eq!(a.images, 3);
        }
    }

    #[test]
    fn deeper_stage_sees_further_at_random_init() {
        let model = SegFormer::build(MitConfig::b0_micro(2), 0).unwrap();
        let imgs = images(2, 64);
        let r1 = erf_radius(&compute_erf(&model, ErfTarget::Stage(1), &imgs).unwrap(), 0.5);
        let r4 = erf_radius(&compute_erf(&model, ErfTarget::Stage(4), &imgs).unwrap(), 0.5);
        assert!(r4 > r1, "r50 stage1 {r1}, stage4 {r4}");
    }

    #[test]
    fn rejects_mixed_sizes_and_empty_input() {
        let model = SegFormer::build(MitConfig::b0_micro(2), 0).unwrap();
        let mut imgs = images(1, 64);
        imgs.extend(images(1, 96));
        assert!(matches!(compute_erf(&model, ErfTarget::Stage(1), &imgs), Err(Error::Shape(_))));
        assert!(compute_erf(&model, ErfTarget::Stage(1), &[]).is_err());
        assert!(compute_erf(&model, ErfTarget::Stage(7), &images(1, 64)).is_err());
    }

    #[test]
    fn pgm_export_is_max_normalized() {
        let m = ErfMap { map: Tensor::from_fn(&[2, 2], |i| i as f64 / 3.0), target: ErfTarget::Stage(1), images: 1 };
        assert_eq!(m.to_pgm().data, vec![0, 85, 170, 255]);
        assert!(m.sidecar().contains("r50: "));
    }
}
