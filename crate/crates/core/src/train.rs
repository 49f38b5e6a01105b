//! Optimization, loss, metrics, inference and the training loop.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, SegSample};
use crate::error::{Error, Result};
use crate::kernels::{ResizePlan, Tape, Var, IGNORE_INDEX};
use crate::model::SegFormer;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

/// `base · (1 − iter/max_iter)^power`, clamped at zero past the end.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 || iter >= max_iter {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled decay: `p ← p·(1 − lr·λ)` before the Adam step.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update every parameter; parameters without a gradient are treated as zero-gradient.
    pub fn step<T: Float>(&mut self, params: &mut ParamStore<T>, grads: &HashMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamWConfig { betas: (b1, b2), eps, weight_decay } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(String::from).collect();
        for name in names {
            let p = params.get_mut(&name).expect("listed above");
            let g = grads.get(&name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
                }
            }
            let (m, v) = self.moments.entry(name).or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
                let mut wv = w.as_f64() * (1.0 - lr * weight_decay);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                wv -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                *w = T::of(wv);
            }
        }
        Ok(())
    }
}

/// Cross-entropy after bilinearly upsampling `logits: [B, N, h, w]` to the
/// `H × W` label grid (`labels` is `B·H·W` long).
pub fn ce_loss<T: Float>(tape: &mut Tape<T>, logits: &Var<T>, labels: &[u8], size: (usize, usize)) -> Result<Var<T>> {
    let up = tape.bilinear_resize(logits, size.0, size.1, false)?;
    tape.cross_entropy(&up, labels)
}

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate a prediction; ignore-labelled pixels are skipped.
    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_INDEX {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(Error::Data(format!("class id {} out of range for {} classes", p.max(t), self.classes)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        diag as f64 / self.total().max(1) as f64
    }
}

/// Per-class IoU (`None` where the class never appears in truth or prediction) and their mean.
pub fn miou(cm: &ConfusionMatrix) -> (Vec<Option<f64>>, f64) {
    let n = cm.classes;
    let ious: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.get(c, c);
            let fp: u64 = (0..n).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
            let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (ious, mean)
}

/// Per-pixel argmax over the class axis of `[N, H, W]` logits.
pub fn argmax_classes<T: Float>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (n, plane) = (s[0], s[1] * s[2]);
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..n {
                if logits.data()[c * plane + p] > logits.data()[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Full-resolution logits `[N, H, W]` of a single `[3, H, W]` image.
pub fn infer_full<T: Float>(model: &SegFormer<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let low = model.predict_logits(&image.clone().reshaped(&[1, 3, h, w])?)?;
    let n = low.shape()[1];
    let up = ResizePlan::new(n, low.shape()[2], low.shape()[3], h, w, false).forward(low.data());
    Tensor::new(vec![n, h, w], up)
}

/// Window origins along one axis: every `stride`, with the last shifted inward to end flush.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if window >= len {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + window < len).collect();
    starts.push(len - window);
    starts.dedup();
    starts
}

/// Average of window logits (each upsampled to window size) over a `[N, H, W]` canvas.
pub fn sliding_window_infer<T: Float>(
    model: &SegFormer<T>,
    image: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected a [3, H, W] image, got {s:?}")));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Usage("window stride must be positive".into()));
    }
    let (h, w) = (s[1], s[2]);
    let (wh, ww) = (window.0.min(h), window.1.min(w));
    let n = model.config.num_classes;
    let mut canvas = vec![0.0f64; n * h * w];
    let mut cover = vec![0u32; h * w];
    for &y0 in &window_starts(h, wh, stride.0) {
        for &x0 in &window_starts(w, ww, stride.1) {
            let crop = Tensor::from_fn(&[3, wh, ww], |i| {
                let (c, r) = (i / (wh * ww), i % (wh * ww));
                image.data()[(c * h + y0 + r / ww) * w + x0 + r % ww]
            });
            let logits = infer_full(model, &crop)?;
            for c in 0..n {
                for y in 0..wh {
                    for x in 0..ww {
                        canvas[(c * h + y0 + y) * w + x0 + x] += logits.data()[(c * wh + y) * ww + x].as_f64();
                    }
                }
            }
            for y in 0..wh {
                for x in 0..ww {
                    cover[(y0 + y) * w + x0 + x] += 1;
                }
            }
        }
    }
    Tensor::new(vec![n, h, w], canvas.iter().enumerate().map(|(i, v)| T::of(v / cover[i % (h * w)] as f64)).collect())
}

/// Confusion matrix of full-image predictions over `samples`.
pub fn evaluate<T: Float>(model: &SegFormer<T>, samples: &[SegSample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for s in samples {
        let pred = argmax_classes(&infer_full(model, &s.image.cast::<T>())?);
        cm.add(&pred, &s.labels)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub base_lr: f64,
    pub power: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub crop: (usize, usize),
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub seed: u64,
    /// Random resize / flip / crop; off trains on the samples as given.
    pub augment: bool,
    /// Evaluate train mIoU every this many iterations (0 = only at the end).
    pub eval_every: usize,
    /// Stop once an evaluation reaches this mIoU.
    pub stop_at_miou: Option<f64>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            base_lr: 6e-5,
            power: 1.0,
            total_iters: 1000,
            batch_size: 2,
            crop: (64, 64),
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            seed: 0,
            augment: true,
            eval_every: 100,
            stop_at_miou: None,
        }
    }
}

impl TrainSpec {
    /// Set one field from its text key (`base_lr`, `crop_h`, `augment`, ...).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: std::str::FromStr>(k: &str, v: &str) -> Result<N> {
            v.parse().map_err(|_| Error::Config(format!("`{k}` expects a number, got `{v}`")))
        }
        match key {
            "base_lr" => self.base_lr = num(key, value)?,
            "power" => self.power = num(key, value)?,
            "iters" => self.total_iters = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "crop_h" => self.crop.0 = num(key, value)?,
            "crop_w" => self.crop.1 = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.betas.0 = num(key, value)?,
            "beta2" => self.betas.1 = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "augment" => {
                self.augment = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(Error::Config(format!("`augment` expects true or false, got `{value}`"))),
                }
            }
            "stop_at_miou" => self.stop_at_miou = if value == "none" { None } else { Some(num(key, value)?) },
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)`, in a fixed order accepted by [`TrainSpec::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("base_lr", self.base_lr.to_string()),
            ("power", self.power.to_string()),
            ("iters", self.total_iters.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("crop_h", self.crop.0.to_string()),
            ("crop_w", self.crop.1.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.betas.0.to_string()),
            ("beta2", self.betas.1.to_string()),
            ("seed", self.seed.to_string()),
            ("augment", self.augment.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("stop_at_miou", self.stop_at_miou.map_or("none".into(), |m| m.to_string())),
        ]
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0) || !(self.power > 0.0) || self.total_iters == 0 || self.batch_size == 0 {
            return bad("base_lr, power, total_iters and batch_size must be positive".into());
        }
        if self.crop.0 == 0 || self.crop.1 == 0 || !self.crop.0.is_multiple_of(32) || !self.crop.1.is_multiple_of(32) {
            return bad(format!("crop {}x{} must be a positive multiple of 32", self.crop.0, self.crop.1));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("weight_decay must be non-negative and betas in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lr,loss,miou\n");
        for r in &self.rows {
            let m = r.miou.map(|m| format!("{m:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.6e},{:.6},{m}", r.iter, r.lr, r.loss);
        }
        out
    }

    pub fn final_miou(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.miou)
    }

    pub fn best_miou(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.miou).reduce(f64::max)
    }

    /// Mean loss over the `window` rows ending at `iter` (inclusive).
    pub fn moving_average(&self, iter: usize, window: usize) -> Option<f64> {
        let end = self.rows.iter().position(|r| r.iter == iter)?;
        let start = (end + 1).saturating_sub(window);
        let slice = &self.rows[start..=end];
        Some(slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64)
    }
}

fn batch_tensors(batch: &[SegSample]) -> Result<(Tensor<f32>, Vec<u8>, (usize, usize))> {
    let (h, w) = (batch[0].height(), batch[0].width());
    let mut data = Vec::with_capacity(batch.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(batch.len() * h * w);
    for s in batch {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Shape(format!("batch mixes {h}x{w} and {}x{} samples", s.height(), s.width())));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::new(vec![batch.len(), 3, h, w], data)?, labels, (h, w)))
}

/// Train in place. Deterministic given `spec.seed`.
pub fn train_toy(model: &mut SegFormer<f32>, dataset: &[SegSample], spec: &TrainSpec) -> Result<TrainLog> {
    spec.check()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = AdamW::new(AdamWConfig {
        betas: spec.betas,
        weight_decay: spec.weight_decay,
        ..AdamWConfig::default()
    });
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainLog::default();

    for iter in 0..spec.total_iters {
        let mut batch = Vec::with_capacity(spec.batch_size);
        for _ in 0..spec.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &dataset[order[cursor]];
            cursor += 1;
            batch.push(if spec.augment { augment(s, spec.crop, &mut rng) } else { s.clone() });
        }
        let (x, labels, size) = batch_tensors(&batch)?;

        let lr = poly_lr(spec.base_lr, iter, spec.total_iters, spec.power);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &xv, true)?;
        let loss = ce_loss(&mut tape, &out.logits, &labels, size)?;
        let loss_value = loss.value().item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!("loss became {loss_value} at iteration {iter}")));
        }
        tape.backward(&loss)?;
        let grads = out.bound.grads(&tape);
        drop(out);
        drop(tape);
        opt.step(&mut model.params, &grads, lr)?;

        let done = iter + 1;
        let eval_now = done == spec.total_iters || (spec.eval_every > 0 && done % spec.eval_every == 0);
        let miou = if eval_now { Some(miou(&evaluate(model, dataset)?).1) } else { None };
        log.rows.push(LogRow { iter: done, lr, loss: loss_value, miou });
        if let (Some(m), Some(target)) = (miou, spec.stop_at_miou) {
            if m >= target {
                break;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MitConfig;
    use crate::data::make_toy_dataset;
    use crate::gradcheck::{self, random_tensor};
    use crate::params::ParamStore;

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(6e-5, 0, 100, 1.0), 6e-5);
        assert_eq!(poly_lr(6e-5, 100, 100, 1.0), 0.0);
        assert!((poly_lr(6e-5, 50, 100, 1.0) - 3e-5).abs() < 1e-18);
        assert!((poly_lr(1.0, 75, 100, 2.0) - 0.0625).abs() < 1e-15);
    }

    fn scalar_store(w: f32) -> ParamStore<f32> {
        let mut s = ParamStore::default();
        s.insert("w", Tensor::new(vec![1], vec![w]).unwrap()).unwrap();
        s
    }

    fn grads(g: f32) -> HashMap<String, Tensor<f32>> {
        HashMap::from([("w".to_string(), Tensor::new(vec![1], vec![g]).unwrap())])
    }

    #[test]
    fn adamw_hand_step_on_square() {
        // f(w) = w², w = 1 → g = 2; lr 0.1, λ 0.01:
        // decay 1 → 0.999; m̂ = 2, v̂ = 4; step 0.1·2/(2 + 1e-8) → 0.8990000005
        let mut p = ParamStore::<f64>::default();
        p.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let g = HashMap::from([("w".to_string(), Tensor::new(vec![1], vec![2.0]).unwrap())]);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.8990000005).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_gradient_cases() {
        let mut p = scalar_store(1.5);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut p, &grads(0.0), 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 1.5);

        let mut p = ParamStore::<f64>::default();
        p.insert("w", Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() });
        opt.step(&mut p, &HashMap::new(), 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_mismatched_gradient() {
        let mut p = scalar_store(1.0);
        let g = HashMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        assert!(AdamW::default().step(&mut p, &g, 0.1).is_err());
    }

    #[test]
    fn ce_examples() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let loss = ce_loss(&mut tape, &logits, &[0, 1, 1, 0, 0, 0, 1, 255, 1, 0, 0, 1, 1, 1, 0, 0], (4, 4)).unwrap();
        assert!((loss.value().item() - std::f64::consts::LN_2).abs() < 1e-12);

        let confident = tape.constant(Tensor::from_fn(&[1, 2, 1, 1], |c| if c == 0 { 40.0 } else { -40.0 }));
        let loss = ce_loss(&mut tape, &confident, &[0; 16], (4, 4)).unwrap();
        assert!(loss.value().item() < 1e-12);
        assert!(matches!(ce_loss(&mut tape, &confident, &[255; 16], (4, 4)), Err(Error::Data(_))));
    }

    #[test]
    fn ce_gradient_through_upsampling() {
        let labels: Vec<u8> = (0..16).map(|i| if i % 5 == 0 { 255 } else { (i % 3 == 0) as u8 }).collect();
        for (seed, shape) in [(1, [1, 2, 2, 2]), (2, [1, 2, 4, 4]), (3, [2, 2, 1, 1])] {
            let labels: Vec<u8> = labels.iter().cycle().take(shape[0] * 16).copied().collect();
            let report = gradcheck::check(&[random_tensor(&shape, seed, 2.0)], gradcheck::DEFAULT_STEP, seed, |tape, v| {
                ce_loss(tape, &v[0], &labels, (4, 4))
            })
            .unwrap();
            assert!(report.worst() < 1e-4, "{shape:?}: {:?}", report.rel_err);
        }
    }

    #[test]
    fn miou_examples() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        let (ious, mean) = miou(&cm);
        assert_eq!(ious, vec![Some(0.5), Some(0.0)]);
        assert_eq!(mean, 0.25);

        let mut cm = ConfusionMatrix::new(3);
        cm.add(&[0, 1, 1, 0], &[0, 1, 1, 255]).unwrap();
        assert_eq!(cm.total(), 3);
        let (ious, mean) = miou(&cm);
        assert_eq!(ious, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(mean, 1.0);
        assert!(cm.add(&[3], &[0]).is_err());
    }

    #[test]
    fn window_placements_cover_everything() {
        assert_eq!(window_starts(96, 64, 32), vec![0, 32]);
        assert_eq!(window_starts(100, 64, 32), vec![0, 32, 36]);
        assert_eq!(window_starts(64, 64, 32), vec![0]);
        assert_eq!(window_starts(32, 64, 16), vec![0]);
        for len in [64usize, 96, 128, 160] {
            let starts = window_starts(len, 64, 32);
            assert!((0..len).all(|p| starts.iter().any(|&s| (s..s + 64).contains(&p))));
        }
    }

    #[test]
    fn full_window_matches_plain_inference() {
        let model = SegFormer::build(MitConfig::b0_micro(3), 1).unwrap();
        let img = random_tensor(&[3, 64, 64], 2, 1.0).cast::<f32>();
        let a = sliding_window_infer(&model, &img, (64, 64), (32, 32)).unwrap();
        let b = infer_full(&model, &img).unwrap();
        assert_eq!(a, b);
        let c = sliding_window_infer(&model, &random_tensor(&[3, 96, 96], 3, 1.0).cast::<f32>(), (64, 64), (32, 32)).unwrap();
        assert_eq!(c.shape(), &[3, 96, 96]);
        assert!(c.all_finite());
    }

    #[test]
    fn constant_model_gives_constant_canvas() {
        let mut model = SegFormer::build(MitConfig::b0_micro(2), 1).unwrap();
        {
            let n = "dec.cls.w";
            model.params.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        model.params.get_mut("dec.cls.b").unwrap().data_mut().copy_from_slice(&[0.5, -2.0]);
        let img = random_tensor(&[3, 96, 128], 4, 1.0).cast::<f32>();
        for stride in [(16, 16), (32, 48), (64, 64)] {
            let out = sliding_window_infer(&model, &img, (64, 64), stride).unwrap();
            assert!(out.data()[..96 * 128].iter().all(|&v| (v - 0.5).abs() < 1e-6));
            assert!(out.data()[96 * 128..].iter().all(|&v| (v + 2.0).abs() < 1e-6));
        }
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let data = make_toy_dataset(2, 64, 3, 0).unwrap();
        let spec = TrainSpec {
            base_lr: 1e-3,
            total_iters: 4,
            batch_size: 2,
            eval_every: 2,
            ..TrainSpec::default()
        };
        let run = || {
            let mut m = SegFormer::build(MitConfig::b0_micro(3), 0).unwrap();
            let log = train_toy(&mut m, &data, &spec).unwrap();
            (log, m.params.checksum())
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(a.rows.len(), 4);
        assert!(a.rows[1].miou.is_some() && a.rows[0].miou.is_none());
        let csv = a.to_csv();
        assert!(csv.starts_with("iter,lr,loss,miou\n1,1.000000e-3,"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn train_spec_text_round_trip() {
        let spec = TrainSpec { base_lr: 1e-3, crop: (32, 96), augment: false, stop_at_miou: Some(0.9), ..Default::default() };
        let mut back = TrainSpec::default();
        for (k, v) in spec.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, spec);
        assert!(back.set("lr", "1").is_err());
        assert!(back.set("augment", "maybe").is_err());
    }

    #[test]
    fn train_spec_validation() {
        assert!(TrainSpec::default().check().is_ok());
        assert!(TrainSpec { crop: (48, 64), ..Default::default() }.check().is_err());
        assert!(TrainSpec { base_lr: 0.0, ..Default::default() }.check().is_err());
    }
}
