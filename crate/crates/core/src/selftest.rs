//! Built-in verification suites exposed through the command line.

use std::fmt;
use std::str::FromStr;

use crate::checkpoint;
use crate::config::{MitConfig, StageConfig, Variant};
use crate::cost::count_params;
use crate::data::make_toy_dataset;
use crate::decoder::{decoder_param_specs, AllMlpDecoder};
use crate::encoder::{reference_attention, stage_param_specs, EfficientAttention, EncoderBlock, FeaturePyramid, MixFfn};
use crate::error::{Error, Result};
use crate::gradcheck::{self, random_tensor};
use crate::kernels::{Tape, Var, IGNORE_INDEX};
use crate::model::SegFormer;
use crate::params::{Bound, ParamSpec, ParamStore};
use crate::tensor::Tensor;
use crate::train::{ce_loss, train_toy, TrainSpec};

pub const KERNEL_TOL: f64 = 1e-5;
pub const LAYER_TOL: f64 = 1e-4;
pub const ATTENTION_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quick" => Ok(Self::Quick),
            "full" => Ok(Self::Full),
            _ => Err(Error::Usage(format!("unknown selftest level `{s}` (quick|full)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "pass" } else { "FAIL" };
        write!(f, "{}: {verdict} ({})", self.name, self.detail)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn grad_check(name: String, inputs: &[Tensor<f64>], tol: f64, f: impl Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>) -> Check {
    match gradcheck::check(inputs, gradcheck::DEFAULT_STEP, 17, f) {
        Ok(r) => check(name, r.worst() < tol, format!("rel_err={:.2e} tol={tol:.0e}", r.worst())),
        Err(e) => check(name, false, e.to_string()),
    }
}

/// Kernel name, input shape sets (one per repeat) and the op under test.
type KernelCase = (&'static str, Vec<Vec<Vec<usize>>>, fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>);

fn kernel_cases() -> Vec<KernelCase> {
    vec![
        (
            "conv2d",
            vec![
                vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
                vec![vec![2, 3, 6, 4], vec![2, 3, 3, 3], vec![2]],
                vec![vec![1, 1, 7, 7], vec![4, 1, 3, 3], vec![4]],
            ],
            |t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), 2, 1, 1),
        ),
        (
            "conv2d_depthwise",
            vec![
                vec![vec![2, 3, 4, 4], vec![3, 1, 3, 3], vec![3]],
                vec![vec![1, 3, 5, 3], vec![3, 1, 3, 3], vec![3]],
                vec![vec![3, 3, 2, 2], vec![3, 1, 3, 3], vec![3]],
            ],
            |t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1, 3),
        ),
        (
            "linear",
            vec![
                vec![vec![2, 3, 4], vec![4, 5], vec![5]],
                vec![vec![1, 6, 2], vec![2, 3], vec![3]],
                vec![vec![3, 1, 7], vec![7, 1], vec![1]],
            ],
            |t, v| t.linear(&v[0], &v[1], Some(&v[2])),
        ),
        (
            "layer_norm",
            vec![vec![vec![3, 6], vec![6], vec![6]], vec![vec![2, 2, 4], vec![4], vec![4]], vec![vec![5, 9], vec![9], vec![9]]],
            |t, v| t.layer_norm(&v[0], &v[1], &v[2], 1e-6),
        ),
        ("gelu", vec![vec![vec![4, 5]], vec![vec![2, 3, 3]], vec![vec![17]]], |t, v| Ok(t.gelu(&v[0]))),
        ("softmax", vec![vec![vec![3, 7]], vec![vec![2, 2, 5]], vec![vec![1, 12]]], |t, v| t.softmax(&v[0])),
        (
            "matmul",
            vec![
                vec![vec![2, 3, 4], vec![2, 4, 5]],
                vec![vec![3, 2, 2], vec![3, 2, 6]],
                vec![vec![1, 5, 3], vec![1, 3, 1]],
            ],
            |t, v| t.matmul(&v[0], &v[1]),
        ),
        (
            "bilinear_resize",
            vec![vec![vec![1, 2, 3, 5]], vec![vec![2, 1, 4, 4]], vec![vec![1, 3, 7, 4]]],
            |t, v| t.bilinear_resize(&v[0], 7, 4, false),
        ),
    ]
}

fn kernel_checks(level: Level, out: &mut Vec<Check>) {
    let repeats = if level == Level::Quick { 1 } else { 3 };
    for (name, shape_sets, f) in kernel_cases() {
        for (rep, shapes) in shape_sets.iter().take(repeats).enumerate() {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| random_tensor(s, 7 * rep as u64 + i as u64, 1.0))
                .collect();
            let shape = inputs[0].shape().to_vec();
            out.push(grad_check(format!("grad.{name}{shape:?}"), &inputs, KERNEL_TOL, f));
        }
    }
    let ce_shapes: &[[usize; 4]] = if level == Level::Quick { &[[1, 2, 2, 2]] } else { &[[1, 2, 2, 2], [2, 3, 2, 3], [1, 5, 3, 1]] };
    for (k, shape) in ce_shapes.iter().enumerate() {
        // logits at a quarter of the label grid, as the decoder emits them
        let size = (shape[2] * 4, shape[3] * 4);
        let labels: Vec<u8> = (0..shape[0] * size.0 * size.1)
            .map(|i| if i % 7 == 3 { IGNORE_INDEX } else { ((i * 5 + k) % shape[1]) as u8 })
            .collect();
        let logits = random_tensor(shape, 3 + k as u64, 2.0);
        out.push(grad_check(format!("grad.ce_loss{shape:?}"), &[logits], LAYER_TOL, |t, v| ce_loss(t, &v[0], &labels, size)));
    }
}

fn stage(c: usize, heads: usize, r: usize) -> StageConfig {
    StageConfig {
        patch_kernel: 3,
        patch_stride: 2,
        patch_pad: 1,
        channels: c,
        depth: 1,
        reduction: r,
        heads,
        ffn_expand: 2,
    }
}

fn random_store(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::default();
    for (i, s) in specs.iter().enumerate() {
        store
            .insert(s.name.clone(), random_tensor(&s.shape, seed * 1000 + i as u64, 0.5))
            .expect("unique names");
    }
    store
}

/// Max abs difference between the attention layer at R=1 and the naive reference.
pub fn attention_oracle_diff(seed: u64) -> Result<f64> {
    let st = stage(8, 2, 1);
    let store = random_store(&stage_param_specs(0, &st, 3), seed);
    let x = random_tensor(&[1, 16, 8], 100 + seed, 1.0);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let attn = EfficientAttention::from_bound(&bound, 0, 0, &st)?;
    let xv = tape.constant(x.clone());
    let got = attn.forward(&mut tape, &xv, (4, 4))?;
    Ok(got.value().max_abs_diff(&reference_attention(&store, "enc.s1.blk0.attn", &x, 2)?))
}

/// Key/value length for a 16×16 grid at reduction ratio `r`.
pub fn reduced_kv_len(r: usize) -> Result<usize> {
    let st = stage(8, 2, r);
    let store = random_store(&stage_param_specs(0, &st, 3), r as u64);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let attn = EfficientAttention::from_bound(&bound, 0, 0, &st)?;
    let x = tape.constant(random_tensor(&[1, 256, 8], 1, 1.0));
    Ok(attn.forward_traced(&mut tape, &x, (16, 16))?.kv_len)
}

fn attention_checks(level: Level, out: &mut Vec<Check>) {
    let seeds = if level == Level::Quick { 1 } else { 5 };
    for seed in 0..seeds {
        let c = match attention_oracle_diff(seed) {
            Ok(d) => check(format!("attention.oracle.seed{seed}"), d < ATTENTION_TOL, format!("max_abs_diff={d:.2e}")),
            Err(e) => check(format!("attention.oracle.seed{seed}"), false, e.to_string()),
        };
        out.push(c);
    }
    for r in [2, 4, 8] {
        let c = match reduced_kv_len(r) {
            Ok(m) => check(format!("attention.kv_len.r{r}"), m == 256 / (r * r), format!("kv_len={m} expected={}", 256 / (r * r))),
            Err(e) => check(format!("attention.kv_len.r{r}"), false, e.to_string()),
        };
        out.push(c);
    }
}

/// Gradient check of one Mix-FFN (`block = false`) or a whole encoder block.
pub fn layer_grad_check(st: StageConfig, grid: (usize, usize), block: bool) -> Result<f64> {
    let specs: Vec<ParamSpec> = stage_param_specs(0, &st, 3)
        .into_iter()
        .filter(|s| s.name.contains(".blk0.") && (block || s.name.contains(".ffn.")))
        .collect();
    let mut inputs = vec![random_tensor(&[1, grid.0 * grid.1, st.channels], 77, 1.0)];
    inputs.extend(specs.iter().enumerate().map(|(i, s)| {
        let t = random_tensor(&s.shape, 200 + i as u64, 0.5);
        if s.name.ends_with(".g") {
            t.map(|v| v + 1.0)
        } else {
            t
        }
    }));
    let report = gradcheck::check(&inputs, gradcheck::DEFAULT_STEP, 11, |tape, vars| {
        let bound = Bound::from_vars(specs.iter().map(|s| s.name.clone()).zip(vars[1..].iter().cloned()));
        if block {
            EncoderBlock::from_bound(&bound, 0, 0, &st)?.forward(tape, &vars[0], grid)
        } else {
            MixFfn::from_bound(&bound, 0, 0)?.forward(tape, &vars[0], grid)
        }
    })?;
    Ok(report.worst())
}

/// Gradient check of the decoder on a tiny `batch`-image pyramid with grids `f1`, `f1/2`, `f1/4`, `f1/8`.
pub fn decoder_grad_check(batch: usize, f1: usize) -> Result<f64> {
    let mut cfg = MitConfig::builtin(Variant::B0);
    for (s, c) in cfg.stages.iter_mut().zip([2, 3, 4, 5]) {
        s.channels = c;
        s.heads = 1;
    }
    cfg.decoder_width = 3;
    cfg.num_classes = 2;
    let specs = decoder_param_specs(&cfg);
    if f1 < 8 || !f1.is_multiple_of(8) {
        return Err(Error::Shape(format!("decoder check needs a multiple of 8 for F1, got {f1}")));
    }
    let mut inputs: Vec<_> = (0..4)
        .map(|i| random_tensor(&[batch, 2 + i, f1 >> i, f1 >> i], 30 + i as u64, 1.0))
        .collect();
    inputs.extend(specs.iter().enumerate().map(|(i, s)| random_tensor(&s.shape, 40 + i as u64, 0.5)));
    let report = gradcheck::check(&inputs, gradcheck::DEFAULT_STEP, 2, |tape, vars| {
        let bound = Bound::from_vars(specs.iter().map(|s| s.name.clone()).zip(vars[4..].iter().cloned()));
        let pyr = FeaturePyramid {
            levels: std::array::from_fn(|i| vars[i].clone()),
            pe_resampled: false,
        };
        AllMlpDecoder::from_bound(&bound)?.decode(tape, &pyr)
    })?;
    Ok(report.worst())
}

fn layer_verdict(name: String, r: Result<f64>) -> Check {
    match r {
        Ok(e) => check(name, e < LAYER_TOL, format!("rel_err={e:.2e} tol={LAYER_TOL:.0e}")),
        Err(e) => check(name, false, e.to_string()),
    }
}

fn layer_checks(out: &mut Vec<Check>) {
    let cases = [
        ("mix_ffn", stage(4, 1, 1), (3, 4), false),
        ("mix_ffn", stage(6, 1, 1), (2, 2), false),
        ("mix_ffn", stage(2, 1, 1), (5, 3), false),
        ("block.r1", stage(4, 2, 1), (2, 3), true),
        ("block.r2", stage(4, 2, 2), (4, 4), true),
        ("block.r4", stage(6, 3, 4), (4, 8), true),
    ];
    for (name, st, grid, block) in cases {
        let label = format!("grad.{name}[c={} grid={}x{}]", st.channels, grid.0, grid.1);
        out.push(layer_verdict(label, layer_grad_check(st, grid, block)));
    }
    for (batch, f1) in [(1, 8), (2, 8), (1, 16)] {
        out.push(layer_verdict(format!("grad.decoder[b={batch} f1={f1}]"), decoder_grad_check(batch, f1)));
    }
}

/// Pyramid shapes of `variant` at `size²` against `[B, C_i, size/2^(i+1), size/2^(i+1)]`.
pub fn pyramid_matches(variant: Variant, size: usize) -> Result<bool> {
    let model = SegFormer::build(MitConfig::builtin(variant), 0)?;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, size, size]));
    let out = model.forward(&mut tape, &x, false)?;
    Ok((0..4).all(|i| {
        let g = size >> (i + 2);
        out.pyramid.levels[i].shape() == [1, model.config.stages[i].channels, g, g]
    }) && out.logits.shape() == [1, model.config.num_classes, size / 4, size / 4])
}

fn model_checks(level: Level, out: &mut Vec<Check>) {
    let variants: &[Variant] = if level == Level::Quick { &[Variant::B0] } else { &Variant::ALL };
    let sizes: &[usize] = if level == Level::Quick { &[64] } else { &[64, 128] };
    for &v in variants {
        for &s in sizes {
            let name = format!("shape.{v}.{s}");
            out.push(match pyramid_matches(v, s) {
                Ok(ok) => check(name, ok, "pyramid and logits"),
                Err(e) => check(name, false, e.to_string()),
            });
        }
    }

    let b0 = SegFormer::build(MitConfig::builtin(Variant::B0), 0);
    out.push(match b0 {
        Ok(m) => {
            let p = count_params(&m).encoder_params as f64 / 1e6;
            check("params.B0.encoder", (p / 3.4 - 1.0).abs() <= 0.03, format!("{p:.3}M target=3.4M"))
        }
        Err(e) => check("params.B0.encoder", false, e.to_string()),
    });

    let micro = SegFormer::build(MitConfig::b0_micro(3), 1).expect("micro config is valid");
    let bytes = checkpoint::to_bytes(&micro);
    out.push(match checkpoint::from_bytes(&bytes) {
        Ok(back) => check("checkpoint.round_trip", checkpoint::to_bytes(&back) == bytes, format!("{} bytes", bytes.len())),
        Err(e) => check("checkpoint.round_trip", false, e.to_string()),
    });
}

fn training_check(out: &mut Vec<Check>) {
    let run = || -> Result<(f64, f64)> {
        let data = make_toy_dataset(4, 64, 3, 0)?;
        let mut model = SegFormer::build(MitConfig::b0_micro(3), 0)?;
        let spec = TrainSpec {
            base_lr: 1e-3,
            total_iters: 40,
            batch_size: 4,
            augment: false,
            eval_every: 0,
            ..TrainSpec::default()
        };
        let log = train_toy(&mut model, &data, &spec)?;
        let first = log.rows[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        let last = log.rows[35..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        Ok((first, last))
    };
    out.push(match run() {
        Ok((a, b)) => check("train.loss_decreases", b < a, format!("first5={a:.4} last5={b:.4}")),
        Err(e) => check("train.loss_decreases", false, e.to_string()),
    });
}

pub fn run(level: Level) -> Vec<Check> {
    let mut out = Vec::new();
    kernel_checks(level, &mut out);
    attention_checks(level, &mut out);
    if level == Level::Full {
        layer_checks(&mut out);
    }
    model_checks(level, &mut out);
    if level == Level::Full {
        training_check(&mut out);
    }
    out
}
