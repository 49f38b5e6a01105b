//! Hierarchical Mix Transformer encoder.
//!
//! Each of the four stages is an overlapping patch embedding (strided conv
//! with kernel larger than stride) followed by `depth` pre-norm blocks of
//! efficient self-attention and Mix-FFN, and a closing layer norm. Stage `i`
//! emits a feature map at `1/2^(i+1)` of the input resolution.

use crate::config::{MitConfig, PositionalMode, StageConfig};
use crate::error::{Error, Result};
use crate::kernels::{Tape, Var};
use crate::params::{Bound, Init, ParamSpec, ParamStore};
use crate::tensor::{Float, Tensor};

pub const LN_EPS: f64 = 1e-6;
const LINEAR_STD: f64 = 0.02;

pub fn stage_prefix(stage: usize) -> String {
    format!("enc.s{}", stage + 1)
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("enc.s{}.blk{block}", stage + 1)
}

pub const PE_NAME: &str = "enc.s1.pe";

fn linear_specs(out: &mut Vec<ParamSpec>, w: String, b: String, cin: usize, cout: usize) {
    out.push(ParamSpec::new(w, &[cin, cout], Init::TruncNormal(LINEAR_STD)));
    out.push(ParamSpec::new(b, &[cout], Init::Zeros));
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec::new(format!("{prefix}.g"), &[c], Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.b"), &[c], Init::Zeros));
}

/// Every encoder parameter in definition order.
pub fn encoder_param_specs(cfg: &MitConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut cin = 3;
    for (i, s) in cfg.stages.iter().enumerate() {
        out.extend(stage_param_specs(i, s, cin));
        if i == 0 {
            if let PositionalMode::LearnedPe { train_h, train_w } = cfg.positional_mode {
                let (gh, gw) = (train_h / s.patch_stride, train_w / s.patch_stride);
                out.push(ParamSpec::new(PE_NAME, &[1, s.channels, gh, gw], Init::TruncNormal(LINEAR_STD)));
            }
        }
        cin = s.channels;
    }
    out
}

/// Parameters of one stage whose patch embedding reads `in_ch` channels.
pub fn stage_param_specs(stage: usize, s: &StageConfig, in_ch: usize) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let sp = stage_prefix(stage);
    let c = s.channels;
    let k = s.patch_kernel;
    out.push(ParamSpec::new(format!("{sp}.patch.w"), &[c, in_ch, k, k], Init::FanOut(k * k * c)));
    out.push(ParamSpec::new(format!("{sp}.patch.b"), &[c], Init::Zeros));
    norm_specs(&mut out, &format!("{sp}.patch.ln"), c);
    for j in 0..s.depth {
        let bp = block_prefix(stage, j);
        norm_specs(&mut out, &format!("{bp}.ln1"), c);
        for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
            linear_specs(&mut out, format!("{bp}.attn.{w}"), format!("{bp}.attn.{b}"), c, c);
        }
        if s.reduction > 1 {
            let r2 = s.reduction * s.reduction;
            linear_specs(&mut out, format!("{bp}.attn.wr"), format!("{bp}.attn.br"), c * r2, c);
            norm_specs(&mut out, &format!("{bp}.attn.ln_r"), c);
        }
        norm_specs(&mut out, &format!("{bp}.ln2"), c);
        let hidden = s.hidden();
        linear_specs(&mut out, format!("{bp}.ffn.fc1.w"), format!("{bp}.ffn.fc1.b"), c, hidden);
        out.push(ParamSpec::new(format!("{bp}.ffn.dw.w"), &[hidden, 1, 3, 3], Init::FanOut(9)));
        out.push(ParamSpec::new(format!("{bp}.ffn.dw.b"), &[hidden], Init::Zeros));
        linear_specs(&mut out, format!("{bp}.ffn.fc2.w"), format!("{bp}.ffn.fc2.b"), hidden, c);
    }
    norm_specs(&mut out, &format!("{sp}.ln"), c);
    out
}

fn ln<T: Float>(tape: &mut Tape<T>, x: &Var<T>, norm: &(Var<T>, Var<T>)) -> Result<Var<T>> {
    tape.layer_norm(x, &norm.0, &norm.1, LN_EPS)
}

fn norm_params<T: Float>(p: &Bound<T>, prefix: &str) -> Result<(Var<T>, Var<T>)> {
    Ok((p.get(&format!("{prefix}.g"))?.clone(), p.get(&format!("{prefix}.b"))?.clone()))
}

/// `[B, C, H, W]` → `[B, H·W, C]`.
pub fn to_sequence<T: Float>(tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    let nhwc = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(&nhwc, &[s[0], s[2] * s[3], s[1]])
}

/// `[B, H·W, C]` → `[B, C, H, W]`.
pub fn to_grid<T: Float>(tape: &mut Tape<T>, x: &Var<T>, grid: (usize, usize)) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return Err(Error::Shape(format!("sequence {s:?} does not match grid {}x{}", grid.0, grid.1)));
    }
    let nhwc = tape.reshape(x, &[s[0], grid.0, grid.1, s[2]])?;
    tape.permute(&nhwc, &[0, 3, 1, 2])
}

pub struct PatchEmbed<T: Float> {
    pub w: Var<T>,
    pub b: Var<T>,
    pub norm: (Var<T>, Var<T>),
    pub stride: usize,
    pub pad: usize,
}

impl<T: Float> PatchEmbed<T> {
    pub fn from_bound(p: &Bound<T>, stage: usize, s: &StageConfig) -> Result<Self> {
        let sp = stage_prefix(stage);
        Ok(Self {
            w: p.get(&format!("{sp}.patch.w"))?.clone(),
            b: p.get(&format!("{sp}.patch.b"))?.clone(),
            norm: norm_params(p, &format!("{sp}.patch.ln"))?,
            stride: s.patch_stride,
            pad: s.patch_pad,
        })
    }

    /// Returns the normalized token sequence `[B, H'·W', C]` and its grid `(H', W')`.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<(Var<T>, (usize, usize))> {
        let y = tape.conv2d(x, &self.w, Some(&self.b), self.stride, self.pad, 1)?;
        let grid = (y.shape()[2], y.shape()[3]);
        let seq = to_sequence(tape, &y)?;
        Ok((ln(tape, &seq, &self.norm)?, grid))
    }
}

/// Key/value sequence reduction: `R×R` spatial tiles flattened to `C·R²` then mapped back to `C`.
pub struct Reduction<T: Float> {
    pub w: Var<T>,
    pub b: Var<T>,
    pub norm: (Var<T>, Var<T>),
    pub ratio: usize,
}

pub struct EfficientAttention<T: Float> {
    pub wq: Var<T>,
    pub bq: Var<T>,
    pub wk: Var<T>,
    pub bk: Var<T>,
    pub wv: Var<T>,
    pub bv: Var<T>,
    pub wo: Var<T>,
    pub bo: Var<T>,
    pub heads: usize,
    /// `None` when the stage's reduction ratio is 1.
    pub reduce: Option<Reduction<T>>,
}

/// Intermediate values of one attention call.
pub struct AttentionTrace<T: Float> {
    pub output: Var<T>,
    /// Softmax weights `[B, heads, N, N_kv]`.
    pub weights: Var<T>,
    pub kv_len: usize,
}

/// Partition the `(h, w)` token grid into `r×r` tiles: `[B, h·w, C]` → `[B, h·w/r², r²·C]`.
pub fn tile_sequence<T: Float>(tape: &mut Tape<T>, x: &Var<T>, grid: (usize, usize), r: usize) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    let (b, c) = (s[0], s[2]);
    let (h, w) = grid;
    if h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("reduction ratio {r} does not divide grid {h}x{w}")));
    }
    let t = tape.reshape(x, &[b, h / r, r, w / r, r, c])?;
    let t = tape.permute(&t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(&t, &[b, (h / r) * (w / r), r * r * c])
}

impl<T: Float> EfficientAttention<T> {
    pub fn from_bound(p: &Bound<T>, stage: usize, block: usize, s: &StageConfig) -> Result<Self> {
        let bp = block_prefix(stage, block);
        let g = |n: &str| -> Result<Var<T>> { Ok(p.get(&format!("{bp}.attn.{n}"))?.clone()) };
        let reduce = if s.reduction > 1 {
            Some(Reduction {
                w: g("wr")?,
                b: g("br")?,
                norm: norm_params(p, &format!("{bp}.attn.ln_r"))?,
                ratio: s.reduction,
            })
        } else {
            None
        };
        Ok(Self {
            wq: g("wq")?,
            bq: g("bq")?,
            wk: g("wk")?,
            bk: g("bk")?,
            wv: g("wv")?,
            bv: g("bv")?,
            wo: g("wo")?,
            bo: g("bo")?,
            heads: s.heads,
            reduce,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, grid: (usize, usize)) -> Result<Var<T>> {
        Ok(self.forward_traced(tape, x, grid)?.output)
    }

    pub fn forward_traced(&self, tape: &mut Tape<T>, x: &Var<T>, grid: (usize, usize)) -> Result<AttentionTrace<T>> {
        let s = x.shape().to_vec();
        if s.len() != 3 || s[1] != grid.0 * grid.1 {
            return Err(Error::Shape(format!("attention input {s:?} does not match grid {}x{}", grid.0, grid.1)));
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        if c % self.heads != 0 {
            return Err(Error::Shape(format!("{c} channels not divisible by {} heads", self.heads)));
        }
        let d = c / self.heads;

        let kv_src = match &self.reduce {
            Some(r) => {
                let tiles = tile_sequence(tape, x, grid, r.ratio)?;
                let mapped = tape.linear(&tiles, &r.w, Some(&r.b))?;
                ln(tape, &mapped, &r.norm)?
            }
            None => x.clone(),
        };
        let m = kv_src.shape()[1];

        let q = tape.linear(x, &self.wq, Some(&self.bq))?;
        let q = tape.reshape(&q, &[b, n, self.heads, d])?;
        let q = tape.permute(&q, &[0, 2, 1, 3])?;
        let k = tape.linear(&kv_src, &self.wk, Some(&self.bk))?;
        let k = tape.reshape(&k, &[b, m, self.heads, d])?;
        let kt = tape.permute(&k, &[0, 2, 3, 1])?;
        let v = tape.linear(&kv_src, &self.wv, Some(&self.bv))?;
        let v = tape.reshape(&v, &[b, m, self.heads, d])?;
        let v = tape.permute(&v, &[0, 2, 1, 3])?;

        let scores = tape.matmul(&q, &kt)?;
        let scores = tape.scale(&scores, 1.0 / (d as f64).sqrt());
        let weights = tape.softmax(&scores)?;
        let ctx = tape.matmul(&weights, &v)?;
        let ctx = tape.permute(&ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(&ctx, &[b, n, c])?;
        let output = tape.linear(&ctx, &self.wo, Some(&self.bo))?;
        Ok(AttentionTrace {
            output,
            weights,
            kv_len: m,
        })
    }
}

/// Feed-forward with a depthwise 3×3 conv between the two linears.
pub struct MixFfn<T: Float> {
    pub fc1_w: Var<T>,
    pub fc1_b: Var<T>,
    pub dw_w: Var<T>,
    pub dw_b: Var<T>,
    pub fc2_w: Var<T>,
    pub fc2_b: Var<T>,
}

impl<T: Float> MixFfn<T> {
    pub fn from_bound(p: &Bound<T>, stage: usize, block: usize) -> Result<Self> {
        let bp = block_prefix(stage, block);
        let g = |n: &str| -> Result<Var<T>> { Ok(p.get(&format!("{bp}.ffn.{n}"))?.clone()) };
        Ok(Self {
            fc1_w: g("fc1.w")?,
            fc1_b: g("fc1.b")?,
            dw_w: g("dw.w")?,
            dw_b: g("dw.b")?,
            fc2_w: g("fc2.w")?,
            fc2_b: g("fc2.b")?,
        })
    }

    /// `fc2(gelu(dwconv(fc1(x))))`, without the residual.
    pub fn branch(&self, tape: &mut Tape<T>, x: &Var<T>, grid: (usize, usize)) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != grid.0 * grid.1 {
            return Err(Error::Shape(format!("mix-ffn input {s:?} does not match grid {}x{}", grid.0, grid.1)));
        }
        let h = tape.linear(x, &self.fc1_w, Some(&self.fc1_b))?;
        let hidden = h.shape()[2];
        let g = to_grid(tape, &h, grid)?;
        let g = tape.conv2d(&g, &self.dw_w, Some(&self.dw_b), 1, 1, hidden)?;
        let h = to_sequence(tape, &g)?;
        let h = tape.gelu(&h);
        tape.linear(&h, &self.fc2_w, Some(&self.fc2_b))
    }

    /// `x + branch(x)`.
    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, grid: (usize, usize)) -> Result<Var<T>> {
        let y = self.branch(tape, x, grid)?;
        tape.add(&y, x)
    }
}

pub struct EncoderBlock<T: Float> {
    pub ln1: (Var<T>, Var<T>),
    pub attn: EfficientAttention<T>,
    pub ln2: (Var<T>, Var<T>),
    pub ffn: MixFfn<T>,
}

impl<T: Float> EncoderBlock<T> {
    pub fn from_bound(p: &Bound<T>, stage: usize, block: usize, s: &StageConfig) -> Result<Self> {
        let bp = block_prefix(stage, block);
        Ok(Self {
            ln1: norm_params(p, &format!("{bp}.ln1"))?,
            attn: EfficientAttention::from_bound(p, stage, block, s)?,
            ln2: norm_params(p, &format!("{bp}.ln2"))?,
            ffn: MixFfn::from_bound(p, stage, block)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Var<T>, grid: (usize, usize)) -> Result<Var<T>> {
        let h = ln(tape, x, &self.ln1)?;
        let a = self.attn.forward(tape, &h, grid)?;
        let x = tape.add(x, &a)?;
        let h = ln(tape, &x, &self.ln2)?;
        let f = self.ffn.branch(tape, &h, grid)?;
        tape.add(&x, &f)
    }
}

/// Encoder outputs `F1..F4`, each `[B, C_i, H/2^(i+1), W/2^(i+1)]`.
pub struct FeaturePyramid<T: Float> {
    pub levels: [Var<T>; 4],
    /// True when a learned positional embedding had to be resampled to this input size.
    pub pe_resampled: bool,
}

impl<T: Float> FeaturePyramid<T> {
    pub fn shapes(&self) -> [Vec<usize>; 4] {
        std::array::from_fn(|i| self.levels[i].shape().to_vec())
    }
}

/// Add the learned positional embedding, resampling it if the grid differs from training.
fn add_positional<T: Float>(tape: &mut Tape<T>, p: &Bound<T>, seq: &Var<T>, grid: (usize, usize)) -> Result<(Var<T>, bool)> {
    let pe = p.get(PE_NAME)?.clone();
    let (ph, pw) = (pe.shape()[2], pe.shape()[3]);
    let resampled = (ph, pw) != grid;
    let pe = if resampled {
        tape.bilinear_resize(&pe, grid.0, grid.1, false)?
    } else {
        pe
    };
    let pe_seq = to_sequence(tape, &pe)?;
    Ok((tape.add(seq, &pe_seq)?, resampled))
}

pub fn encoder_forward<T: Float>(cfg: &MitConfig, p: &Bound<T>, tape: &mut Tape<T>, x: &Var<T>) -> Result<FeaturePyramid<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!("encoder expects [B, 3, H, W] input, got {s:?}")));
    }
    let plan = cfg.plan(s[2], s[3])?;
    let mut pe_resampled = false;
    let mut input = x.clone();
    let mut levels = Vec::with_capacity(4);
    for (i, st) in cfg.stages.iter().enumerate() {
        let embed = PatchEmbed::from_bound(p, i, st)?;
        let (mut seq, grid) = embed.forward(tape, &input)?;
        debug_assert_eq!(grid, (plan.stages[i].h, plan.stages[i].w));
        if i == 0 && matches!(cfg.positional_mode, PositionalMode::LearnedPe { .. }) {
            let (with_pe, resampled) = add_positional(tape, p, &seq, grid)?;
            seq = with_pe;
            pe_resampled = resampled;
        }
        for j in 0..st.depth {
            let block = EncoderBlock::from_bound(p, i, j, st)?;
            seq = block
                .forward(tape, &seq, grid)
                .map_err(|e| Error::Shape(format!("stage {} block {j}: {e}", i + 1)))?;
        }
        let norm = norm_params(p, &format!("{}.ln", stage_prefix(i)))?;
        let seq = ln(tape, &seq, &norm)?;
        let fmap = to_grid(tape, &seq, grid)?;
        levels.push(fmap.clone());
        input = fmap;
    }
    let levels: [Var<T>; 4] = levels.try_into().map_err(|_| Error::Shape("encoder produced wrong level count".into()))?;
    Ok(FeaturePyramid { levels, pe_resampled })
}

fn naive_linear(x: &[f64], n: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; n * cout];
    for t in 0..n {
        for o in 0..cout {
            y[t * cout + o] = b.data()[o] + (0..cin).map(|i| x[t * cin + i] * w.data()[i * cout + o]).sum::<f64>();
        }
    }
    y
}

/// Unreduced multi-head attention written as explicit loops, for verification.
///
/// Reads `{prefix}.{wq,bq,wk,bk,wv,bv,wo,bo}` from `store`; `x` is `[1, N, C]`.
pub fn reference_attention(store: &ParamStore<f64>, prefix: &str, x: &Tensor<f64>, heads: usize) -> Result<Tensor<f64>> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 1 || !s[2].is_multiple_of(heads) {
        return Err(Error::Shape(format!("reference attention expects [1, N, C] with C divisible by heads, got {s:?}")));
    }
    let (n, c) = (s[1], s[2]);
    let p = |k: &str| {
        store
            .get(&format!("{prefix}.{k}"))
            .ok_or_else(|| Error::Config(format!("parameter `{prefix}.{k}` is not in the store")))
    };
    let q = naive_linear(x.data(), n, p("wq")?, p("bq")?);
    let k = naive_linear(x.data(), n, p("wk")?, p("bk")?);
    let v = naive_linear(x.data(), n, p("wv")?, p("bv")?);
    let d = c / heads;
    let mut ctx = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|e| q[i * c + h * d + e] * k[j * c + h * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for j in 0..n {
                for e in 0..d {
                    ctx[i * c + h * d + e] += ex[j] / z * v[j * c + h * d + e];
                }
            }
        }
    }
    Tensor::new(vec![1, n, c], naive_linear(&ctx, n, p("wo")?, p("bo")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::gradcheck::random_tensor;

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
            store.insert(s.name.clone(), random_tensor(&s.shape, seed * 1000 + i as u64, 0.5)).unwrap();
        }
        store
    }

    #[test]
    fn unreduced_attention_matches_reference() {
        for seed in 0..5 {
            let st = stage(6, 2, 1);
            let store = random_store(&stage_param_specs(0, &st, 3), seed);
            let x = random_tensor(&[1, 12, 6], 100 + seed, 1.0);
            let mut tape = Tape::<f64>::new();
            let bound = store.bind(&mut tape, false);
            let attn = EfficientAttention::from_bound(&bound, 0, 0, &st).unwrap();
            assert!(attn.reduce.is_none());
            let xv = tape.constant(x.clone());
            let trace = attn.forward_traced(&mut tape, &xv, (3, 4)).unwrap();
            assert_eq!(trace.kv_len, 12);
            let want = reference_attention(&store, "enc.s1.blk0.attn", &x, 2).unwrap();
            let want = want.data();
            let diff = trace.output.value().data().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "seed {seed}: {diff}");
            for row in trace.weights.value().data().chunks(12) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reduced_key_length() {
        for r in [2usize, 4, 8] {
            let st = stage(8, 2, r);
            let store = random_store(&stage_param_specs(0, &st, 3), r as u64);
            let mut tape = Tape::<f64>::new();
            let bound = store.bind(&mut tape, false);
            let attn = EfficientAttention::from_bound(&bound, 0, 0, &st).unwrap();
            let x = tape.constant(random_tensor(&[2, 256, 8], 3, 1.0));
            let trace = attn.forward_traced(&mut tape, &x, (16, 16)).unwrap();
            assert_eq!(trace.kv_len, 256 / (r * r));
            assert_eq!(trace.weights.shape(), &[2, 2, 256, 256 / (r * r)]);
            assert_eq!(trace.output.shape(), &[2, 256, 8]);
        }
    }

    #[test]
    fn reduction_rejects_indivisible_grid() {
        let st = stage(8, 2, 4);
        let store = random_store(&stage_param_specs(0, &st, 3), 0);
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape, false);
        let attn = EfficientAttention::from_bound(&bound, 0, 0, &st).unwrap();
        let x = tape.constant(random_tensor(&[1, 36, 8], 3, 1.0));
        assert!(matches!(attn.forward(&mut tape, &x, (6, 6)), Err(Error::Shape(_))));
    }

    #[test]
    fn tiles_gather_spatial_blocks() {
        // token (y, x) carries value 10y + x in its single channel
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 16, 1], |i| (10 * (i / 4) + i % 4) as f64));
        let t = tile_sequence(&mut tape, &x, (4, 4), 2).unwrap();
        assert_eq!(t.shape(), &[1, 4, 4]);
        assert_eq!(t.value().data(), &[0., 1., 10., 11., 2., 3., 12., 13., 20., 21., 30., 31., 22., 23., 32., 33.]);
    }

    #[test]
    fn unreduced_attention_is_permutation_equivariant() {
        let st = stage(4, 2, 1);
        let store = random_store(&stage_param_specs(0, &st, 3), 9);
        let x = random_tensor(&[1, 8, 4], 1, 1.0);
        let perm = [5usize, 2, 7, 0, 1, 6, 3, 4];
        let xp = Tensor::from_fn(&[1, 8, 4], |i| x.data()[perm[i / 4] * 4 + i % 4]);
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let bound = store.bind(&mut tape, false);
            let attn = EfficientAttention::from_bound(&bound, 0, 0, &st).unwrap();
            let v = tape.constant(input.clone());
            attn.forward(&mut tape, &v, (2, 4)).unwrap().value().clone()
        };
        let (y, yp) = (run(&x), run(&xp));
        for t in 0..8 {
            for c in 0..4 {
                assert!((yp.data()[t * 4 + c] - y.data()[perm[t] * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mix_ffn_with_zero_output_layer_is_identity() {
        let st = stage(4, 1, 1);
        let mut store = random_store(&stage_param_specs(0, &st, 3), 2);
        for n in ["enc.s1.blk0.ffn.fc2.w", "enc.s1.blk0.ffn.fc2.b"] {
            store.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape, false);
        let ffn = MixFfn::from_bound(&bound, 0, 0).unwrap();
        let x = random_tensor(&[2, 12, 4], 5, 1.0);
        let xv = tape.constant(x.clone());
        let y = ffn.forward(&mut tape, &xv, (3, 4)).unwrap();
        assert_eq!(y.value().max_abs_diff(&x), 0.0);
    }

    #[test]
    fn mix_ffn_mixes_only_neighbouring_tokens() {
        let st = stage(4, 1, 1);
        let store = random_store(&stage_param_specs(0, &st, 3), 4);
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape, false);
        let ffn = MixFfn::from_bound(&bound, 0, 0).unwrap();
        let x = tape.leaf(random_tensor(&[1, 36, 4], 6, 1.0), true);
        let y = ffn.branch(&mut tape, &x, (6, 6)).unwrap();
        // gradient of output token (2, 3) with respect to every input token
        let seed = Tensor::from_fn(&[1, 36, 4], |i| if i / 4 == 2 * 6 + 3 { 1.0 } else { 0.0 });
        tape.backward_with_seed(&y, &seed).unwrap();
        let g = tape.grad(&x).unwrap();
        for t in 0..36 {
            let (r, c) = (t / 6, t % 6);
            let reach = g.data()[t * 4..t * 4 + 4].iter().any(|v| *v != 0.0);
            let near = (r as isize - 2).abs() <= 1 && (c as isize - 3).abs() <= 1;
            assert_eq!(reach, near, "token ({r}, {c})");
        }
    }

    fn grad_check_stage(st: StageConfig, grid: (usize, usize), block: bool) {
        let worst = crate::selftest::layer_grad_check(st, grid, block).unwrap();
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn mix_ffn_gradients() {
        grad_check_stage(stage(4, 1, 1), (3, 4), false);
    }

    #[test]
    fn block_gradients_unreduced() {
        grad_check_stage(stage(4, 2, 1), (2, 3), true);
    }

    #[test]
    fn block_gradients_reduced() {
        grad_check_stage(stage(4, 2, 2), (4, 4), true);
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = MitConfig::builtin(Variant::B0);
        let store = ParamStore::initialize(&encoder_param_specs(&cfg), 0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 96]));
        let pyr = encoder_forward(&cfg, &bound, &mut tape, &x).unwrap();
        assert_eq!(
            pyr.shapes(),
            [vec![1, 32, 16, 24], vec![1, 64, 8, 12], vec![1, 160, 4, 6], vec![1, 256, 2, 3]]
        );
        assert!(!pyr.pe_resampled);
    }

    #[test]
    fn learned_pe_is_resampled_off_size() {
        let cfg = MitConfig::b0_micro(2).with_positional_mode(PositionalMode::LearnedPe { train_h: 64, train_w: 64 });
        let store = ParamStore::initialize(&encoder_param_specs(&cfg), 0);
        assert_eq!(store.get(PE_NAME).unwrap().shape(), &[1, 8, 16, 16]);
        for (size, resampled) in [(64, false), (96, true)] {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let x = tape.constant(Tensor::zeros(&[1, 3, size, size]));
            let pyr = encoder_forward(&cfg, &bound, &mut tape, &x).unwrap();
            assert_eq!(pyr.pe_resampled, resampled);
        }
    }

    #[test]
    fn rejects_non_rgb_input() {
        let cfg = MitConfig::b0_micro(2);
        let store = ParamStore::initialize(&encoder_param_specs(&cfg), 0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 64, 64]));
        assert!(matches!(encoder_forward(&cfg, &bound, &mut tape, &x), Err(Error::Shape(_))));
    }
}
