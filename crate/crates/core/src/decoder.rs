//! All-MLP decoder: per-level channel unification, upsampling to the 1/4
//! grid, concatenation, a fusing linear and a per-pixel classifier.

use crate::config::MitConfig;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::kernels::{Tape, Var};
use crate::params::{Bound, Init, ParamSpec};
use crate::tensor::Float;

const LINEAR_STD: f64 = 0.02;

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    out.push(ParamSpec::new(format!("{prefix}.w"), &[cin, cout], Init::TruncNormal(LINEAR_STD)));
    out.push(ParamSpec::new(format!("{prefix}.b"), &[cout], Init::Zeros));
}

pub fn decoder_param_specs(cfg: &MitConfig) -> Vec<ParamSpec> {
    let d = cfg.decoder_width;
    let mut out = Vec::new();
    for (i, s) in cfg.stages.iter().enumerate() {
        linear(&mut out, &format!("dec.unify{}", i + 1), s.channels, d);
    }
    linear(&mut out, "dec.fuse", 4 * d, d);
    linear(&mut out, "dec.cls", d, cfg.num_classes);
    out
}

/// Learnable scalar count of the decoder alone.
pub fn decoder_param_count(cfg: &MitConfig) -> usize {
    decoder_param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

pub struct AllMlpDecoder<T: Float> {
    pub unify: [(Var<T>, Var<T>); 4],
    pub fuse: (Var<T>, Var<T>),
    pub cls: (Var<T>, Var<T>),
}

pub struct DecoderOutput<T: Float> {
    /// `[B, N_cls, H/4, W/4]`.
    pub logits: Var<T>,
    /// Fused feature `[B, C, H/4, W/4]` before classification.
    pub fused: Var<T>,
}

fn pair<T: Float>(p: &Bound<T>, prefix: &str) -> Result<(Var<T>, Var<T>)> {
    Ok((p.get(&format!("{prefix}.w"))?.clone(), p.get(&format!("{prefix}.b"))?.clone()))
}

/// Per-pixel linear map over the channel axis of an NCHW tensor, keeping NHWC layout.
fn pixel_linear<T: Float>(tape: &mut Tape<T>, nhwc: &Var<T>, wb: &(Var<T>, Var<T>)) -> Result<Var<T>> {
    tape.linear(nhwc, &wb.0, Some(&wb.1))
}

impl<T: Float> AllMlpDecoder<T> {
    pub fn from_bound(p: &Bound<T>) -> Result<Self> {
        Ok(Self {
            unify: [
                pair(p, "dec.unify1")?,
                pair(p, "dec.unify2")?,
                pair(p, "dec.unify3")?,
                pair(p, "dec.unify4")?,
            ],
            fuse: pair(p, "dec.fuse")?,
            cls: pair(p, "dec.cls")?,
        })
    }

    pub fn decode(&self, tape: &mut Tape<T>, pyr: &FeaturePyramid<T>) -> Result<Var<T>> {
        Ok(self.decode_full(tape, pyr)?.logits)
    }

    pub fn decode_full(&self, tape: &mut Tape<T>, pyr: &FeaturePyramid<T>) -> Result<DecoderOutput<T>> {
        let f1 = pyr.levels[0].shape().to_vec();
        if f1.len() != 4 {
            return Err(Error::Shape(format!("pyramid level 1 has shape {f1:?}")));
        }
        let (b, h, w) = (f1[0], f1[2], f1[3]);
        let mut unified = Vec::with_capacity(4);
        for (i, (level, wb)) in pyr.levels.iter().zip(&self.unify).enumerate() {
            let s = level.shape();
            if s.len() != 4 || s[0] != b || s[1] != wb.0.shape()[0] {
                return Err(Error::Shape(format!(
                    "pyramid level {} has shape {s:?}, expected [{b}, {}, _, _]",
                    i + 1,
                    wb.0.shape()[0]
                )));
            }
            if i > 0 {
                let prev = pyr.levels[i - 1].shape();
                if s[2] * 2 != prev[2] || s[3] * 2 != prev[3] {
                    return Err(Error::Shape(format!("pyramid level {} grid {:?} is not half of level {}", i + 1, &s[2..], i)));
                }
            }
            let nhwc = tape.permute(level, &[0, 2, 3, 1])?;
            let u = pixel_linear(tape, &nhwc, wb)?;
            let u = tape.permute(&u, &[0, 3, 1, 2])?;
            unified.push(tape.bilinear_resize(&u, h, w, false)?);
        }
        let refs: Vec<&Var<T>> = unified.iter().collect();
        let cat = tape.concat(&refs, 1)?;
        let cat = tape.permute(&cat, &[0, 2, 3, 1])?;
        let fused = pixel_linear(tape, &cat, &self.fuse)?;
        let logits = pixel_linear(tape, &fused, &self.cls)?;
        Ok(DecoderOutput {
            logits: tape.permute(&logits, &[0, 3, 1, 2])?,
            fused: tape.permute(&fused, &[0, 3, 1, 2])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{StageConfig, Variant};
    use crate::gradcheck::random_tensor;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    /// B0 layout with tiny channels, for decoder-only tests.
    fn tiny_cfg() -> MitConfig {
        let mut cfg = MitConfig::builtin(Variant::B0);
        let chans = [2, 3, 4, 5];
        for (s, c) in cfg.stages.iter_mut().zip(chans) {
            *s = StageConfig { channels: c, heads: 1, ..*s };
        }
        cfg.decoder_width = 3;
        cfg.num_classes = 2;
        cfg
    }

    fn pyramid_shapes(b: usize) -> Vec<Vec<usize>> {
        [(2, 8), (3, 4), (4, 2), (5, 1)].iter().map(|&(c, g)| vec![b, c, g, g]).collect()
    }

    fn run(store: &ParamStore<f64>, levels: &[Tensor<f64>]) -> DecoderOutput<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let vars: Vec<_> = levels.iter().map(|l| tape.constant(l.clone())).collect();
        let pyr = FeaturePyramid {
            levels: std::array::from_fn(|i| vars[i].clone()),
            pe_resampled: false,
        };
        AllMlpDecoder::from_bound(&bound).unwrap().decode_full(&mut tape, &pyr).unwrap()
    }

    fn random_store(cfg: &MitConfig, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::default();
        for (i, s) in decoder_param_specs(cfg).iter().enumerate() {
            store.insert(s.name.clone(), random_tensor(&s.shape, seed + i as u64, 0.5)).unwrap();
        }
        store
    }

    #[test]
    fn param_count_closed_form() {
        for v in Variant::ALL {
            let cfg = MitConfig::builtin(v);
            let d = cfg.decoder_width;
            let c: usize = cfg.stages.iter().map(|s| s.channels).sum();
            let n = cfg.num_classes;
            assert_eq!(decoder_param_count(&cfg), (c * d + 4 * d) + (4 * d * d + d) + (d * n + n));
        }
    }

    #[test]
    fn zero_weights_give_class_bias() {
        let cfg = tiny_cfg();
        let mut store = random_store(&cfg, 1);
        let names: Vec<String> = store.names().filter(|n| *n != "dec.cls.b").map(String::from).collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        store.get_mut("dec.cls.b").unwrap().data_mut().copy_from_slice(&[0.25, -1.5]);
        let levels: Vec<_> = pyramid_shapes(2).iter().enumerate().map(|(i, s)| random_tensor(s, i as u64, 1.0)).collect();
        let out = run(&store, &levels);
        assert_eq!(out.logits.shape(), &[2, 2, 8, 8]);
        for (i, v) in out.logits.value().data().iter().enumerate() {
            assert_eq!(*v, if (i / 64) % 2 == 0 { 0.25 } else { -1.5 });
        }
    }

    #[test]
    fn coarsest_level_is_broadcast_uniformly() {
        // only F4 (a single 1×1 cell) reaches the classifier
        let cfg = tiny_cfg();
        let mut store = random_store(&cfg, 3);
        for n in ["dec.unify1.b", "dec.unify2.b", "dec.unify3.b", "dec.unify1.w", "dec.unify2.w", "dec.unify3.w"] {
            store.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let levels: Vec<_> = pyramid_shapes(1).iter().enumerate().map(|(i, s)| random_tensor(s, 10 + i as u64, 1.0)).collect();
        let out = run(&store, &levels);
        for plane in out.logits.value().data().chunks(64) {
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn concat_follows_level_order() {
        // fuse only reads the second slot, so F1/F3/F4 must not matter
        let cfg = tiny_cfg();
        let mut store = random_store(&cfg, 5);
        let d = cfg.decoder_width;
        let fuse = store.get_mut("dec.fuse.w").unwrap();
        for (i, v) in fuse.data_mut().iter_mut().enumerate() {
            if !(d..2 * d).contains(&(i / d)) {
                *v = 0.0;
            }
        }
        let base: Vec<_> = pyramid_shapes(1).iter().enumerate().map(|(i, s)| random_tensor(s, 20 + i as u64, 1.0)).collect();
        let mut other = base.clone();
        for i in [0, 2, 3] {
            other[i] = random_tensor(other[i].shape(), 99 + i as u64, 1.0);
        }
        let (a, b) = (run(&store, &base), run(&store, &other));
        assert!(a.logits.value().max_abs_diff(b.logits.value()) < 1e-12);
        other[1] = random_tensor(other[1].shape(), 7, 1.0);
        assert!(a.logits.value().max_abs_diff(run(&store, &other).logits.value()) > 1e-6);
    }

    #[test]
    fn rejects_inconsistent_pyramid() {
        let cfg = tiny_cfg();
        let store = random_store(&cfg, 0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let mut shapes = pyramid_shapes(1);
        shapes[2] = vec![1, 4, 3, 3];
        let vars: Vec<_> = shapes.iter().map(|s| tape.constant(Tensor::zeros(s))).collect();
        let pyr = FeaturePyramid {
            levels: std::array::from_fn(|i| vars[i].clone()),
            pe_resampled: false,
        };
        let dec = AllMlpDecoder::from_bound(&bound).unwrap();
        assert!(matches!(dec.decode(&mut tape, &pyr), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients() {
        let worst = crate::selftest::decoder_grad_check(1, 8).unwrap();
        assert!(worst < 1e-4, "{worst}");
    }
}
