//! MiT B0–B5 hyperparameter tables and resolution planning.
//!
//! `reduction` is stored per spatial axis: a stage with `reduction = 8`
//! shortens its key/value sequence by a factor of 64.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::conv_out_len;

/// Total downsampling between the input image and the deepest stage.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::B0, Variant::B1, Variant::B2, Variant::B3, Variant::B4, Variant::B5];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "B0" => Variant::B0,
            "B1" => Variant::B1,
            "B2" => Variant::B2,
            "B3" => Variant::B3,
            "B4" => Variant::B4,
            "B5" => Variant::B5,
            other => return Err(Error::Config(format!("unknown variant `{other}` (expected B0..B5)"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub patch_pad: usize,
    pub channels: usize,
    pub depth: usize,
    pub reduction: usize,
    pub heads: usize,
    pub ffn_expand: usize,
}

impl StageConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.ffn_expand
    }

    const FIELDS: [&'static str; 8] = [
        "patch_kernel",
        "patch_stride",
        "patch_pad",
        "channels",
        "depth",
        "reduction",
        "heads",
        "ffn_expand",
    ];

    fn field(&self, name: &str) -> usize {
        match name {
            "patch_kernel" => self.patch_kernel,
            "patch_stride" => self.patch_stride,
            "patch_pad" => self.patch_pad,
            "channels" => self.channels,
            "depth" => self.depth,
            "reduction" => self.reduction,
            "heads" => self.heads,
            "ffn_expand" => self.ffn_expand,
            _ => unreachable!("unknown stage field {name}"),
        }
    }

    fn field_mut(&mut self, name: &str) -> Option<&mut usize> {
        Some(match name {
            "patch_kernel" => &mut self.patch_kernel,
            "patch_stride" => &mut self.patch_stride,
            "patch_pad" => &mut self.patch_pad,
            "channels" => &mut self.channels,
            "depth" => &mut self.depth,
            "reduction" => &mut self.reduction,
            "heads" => &mut self.heads,
            "ffn_expand" => &mut self.ffn_expand,
            _ => return None,
        })
    }
}

/// Where positional information comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositionalMode {
    /// Zero-padded 3×3 depthwise conv inside every FFN; no explicit encoding.
    #[default]
    MixFfn,
    /// Learned per-position embedding added after the stage-1 patch embedding,
    /// sized for `train_h × train_w` inputs and resampled for other sizes.
    LearnedPe { train_h: usize, train_w: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MitConfig {
    pub variant: Variant,
    pub stages: [StageConfig; 4],
    pub decoder_width: usize,
    pub num_classes: usize,
    pub positional_mode: PositionalMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub h: usize,
    pub w: usize,
    pub seq_len: usize,
    /// Key/value sequence length after spatial reduction.
    pub kv_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolutionPlan {
    pub input_h: usize,
    pub input_w: usize,
    pub stages: [StagePlan; 4],
}

const fn stage(patch: (usize, usize, usize), channels: usize, depth: usize, reduction: usize, heads: usize, ffn_expand: usize) -> StageConfig {
    StageConfig {
        patch_kernel: patch.0,
        patch_stride: patch.1,
        patch_pad: patch.2,
        channels,
        depth,
        reduction,
        heads,
        ffn_expand,
    }
}

const FIRST_PATCH: (usize, usize, usize) = (7, 4, 3);
const INNER_PATCH: (usize, usize, usize) = (3, 2, 1);
const REDUCTION: [usize; 4] = [8, 4, 2, 1];
const HEADS: [usize; 4] = [1, 2, 5, 8];

/// Number of classes used when none is given (ADE20K's label set size).
pub const DEFAULT_NUM_CLASSES: usize = 150;

fn table(variant: Variant) -> ([usize; 4], [usize; 4], [usize; 4], usize) {
    // (channels, depths, ffn expansion, decoder width)
    match variant {
        Variant::B0 => ([32, 64, 160, 256], [2, 2, 2, 2], [8, 8, 4, 4], 256),
        Variant::B1 => ([64, 128, 320, 512], [2, 2, 2, 2], [8, 8, 4, 4], 256),
        Variant::B2 => ([64, 128, 320, 512], [3, 3, 6, 3], [8, 8, 4, 4], 768),
        Variant::B3 => ([64, 128, 320, 512], [3, 3, 18, 3], [8, 8, 4, 4], 768),
        Variant::B4 => ([64, 128, 320, 512], [3, 8, 27, 3], [8, 8, 4, 4], 768),
        Variant::B5 => ([64, 128, 320, 512], [3, 6, 40, 3], [4, 4, 4, 4], 768),
    }
}

impl MitConfig {
    pub fn builtin(variant: Variant) -> Self {
        let (c, l, e, decoder_width) = table(variant);
        let stages = std::array::from_fn(|i| {
            let patch = if i == 0 { FIRST_PATCH } else { INNER_PATCH };
            stage(patch, c[i], l[i], REDUCTION[i], HEADS[i], e[i])
        });
        Self {
            variant,
            stages,
            decoder_width,
            num_classes: DEFAULT_NUM_CLASSES,
            positional_mode: PositionalMode::MixFfn,
        }
    }

    /// Look up a built-in variant by name (`"B0"`..`"B5"`).
    pub fn builtin_named(name: &str) -> Result<Self> {
        Ok(Self::builtin(name.parse()?))
    }

    /// B0 shrunk for desk-scale training: channels `[8, 16, 24, 32]`, one block
    /// per stage, heads `[1, 2, 3, 4]` and decoder width 32.
    pub fn b0_micro(num_classes: usize) -> Self {
        let mut cfg = Self::builtin(Variant::B0);
        for (i, s) in cfg.stages.iter_mut().enumerate() {
            s.channels = 8 * (i + 1);
            s.depth = 1;
            s.heads = i + 1;
        }
        cfg.decoder_width = 32;
        cfg.num_classes = num_classes;
        cfg
    }

    pub fn with_num_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn with_positional_mode(mut self, mode: PositionalMode) -> Self {
        self.positional_mode = mode;
        self
    }

    /// Check the structural invariants that do not depend on input size.
    pub fn check(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if s.patch_kernel == 0 || s.patch_stride == 0 || s.channels == 0 || s.depth == 0 || s.reduction == 0 || s.heads == 0 || s.ffn_expand == 0 {
                return err(format!("stage {n}: all fields except patch_pad must be positive"));
            }
            if s.channels % s.heads != 0 {
                return err(format!("stage {n}: channels {} not divisible by heads {}", s.channels, s.heads));
            }
            let expected = if i == 0 { FIRST_PATCH } else { INNER_PATCH };
            if (s.patch_kernel, s.patch_stride, s.patch_pad) != expected {
                return err(format!(
                    "stage {n}: patch (K,S,P) = ({},{},{}), expected {expected:?}",
                    s.patch_kernel, s.patch_stride, s.patch_pad
                ));
            }
            if i > 0 && s.channels <= self.stages[i - 1].channels {
                return err(format!("stage {n}: channels must increase stage to stage"));
            }
        }
        if self.decoder_width == 0 || self.num_classes == 0 {
            return err("decoder_width and num_classes must be positive".into());
        }
        if self.num_classes > 255 {
            return err(format!("num_classes {} exceeds the 8-bit label range", self.num_classes));
        }
        if let PositionalMode::LearnedPe { train_h, train_w } = self.positional_mode {
            if train_h % INPUT_MULTIPLE != 0 || train_w % INPUT_MULTIPLE != 0 || train_h == 0 || train_w == 0 {
                return err(format!("learned_pe training size {train_h}x{train_w} must be a positive multiple of 32"));
            }
        }
        Ok(())
    }

    /// Per-stage grid sizes for an `input_h × input_w` image.
    pub fn plan(&self, input_h: usize, input_w: usize) -> Result<ResolutionPlan> {
        self.check()?;
        if input_h < INPUT_MULTIPLE || input_w < INPUT_MULTIPLE || !input_h.is_multiple_of(INPUT_MULTIPLE) || !input_w.is_multiple_of(INPUT_MULTIPLE) {
            // name the first stage whose grid would stop being integral
            let bad = |n: usize| (1..=4).find(|i| !n.is_multiple_of(1 << (i + 1))).unwrap_or(4);
            let st = bad(input_h).min(bad(input_w));
            return Err(Error::Shape(format!(
                "input {input_h}x{input_w} must be at least 32 and divisible by 32 (stage {st} grid is not integral)"
            )));
        }
        let (mut h, mut w) = (input_h, input_w);
        let mut stages = [StagePlan {
            h: 0,
            w: 0,
            seq_len: 0,
            kv_len: 0,
        }; 4];
        for (i, s) in self.stages.iter().enumerate() {
            let (Some(nh), Some(nw)) = (
                conv_out_len(h, s.patch_kernel, s.patch_stride, s.patch_pad),
                conv_out_len(w, s.patch_kernel, s.patch_stride, s.patch_pad),
            ) else {
                return Err(Error::Shape(format!("stage {}: patch embedding does not fit {h}x{w}", i + 1)));
            };
            (h, w) = (nh, nw);
            if h % s.reduction != 0 || w % s.reduction != 0 {
                return Err(Error::Shape(format!(
                    "stage {}: reduction {} does not divide grid {h}x{w}",
                    i + 1,
                    s.reduction
                )));
            }
            stages[i] = StagePlan {
                h,
                w,
                seq_len: h * w,
                kv_len: (h / s.reduction) * (w / s.reduction),
            };
        }
        Ok(ResolutionPlan { input_h, input_w, stages })
    }

    /// Human-readable `key = value` rendering; [`MitConfig::from_text`] inverts it.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("variant = {}\n", self.variant));
        out.push_str(&format!("decoder_width = {}\n", self.decoder_width));
        out.push_str(&format!("num_classes = {}\n", self.num_classes));
        match self.positional_mode {
            PositionalMode::MixFfn => out.push_str("positional_mode = mix_ffn\n"),
            PositionalMode::LearnedPe { train_h, train_w } => {
                out.push_str("positional_mode = learned_pe\n");
                out.push_str(&format!("pe_train_h = {train_h}\npe_train_w = {train_w}\n"));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            for f in StageConfig::FIELDS {
                out.push_str(&format!("stage{}.{f} = {}\n", i + 1, s.field(f)));
            }
        }
        out
    }

    /// Parse the text format. `variant` selects the base table; every other key overrides it.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        let variant = pairs
            .iter()
            .find(|(k, _)| k == "variant")
            .ok_or_else(|| Error::Config("config text has no `variant` line".into()))?
            .1
            .parse()?;
        let mut cfg = Self::builtin(variant);
        cfg.apply_pairs(&pairs)?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Apply `key = value` overrides on top of this config.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let pairs = parse_key_values(text)?;
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "variant") {
            let base = Self::builtin(v.parse()?);
            *self = Self {
                num_classes: self.num_classes,
                ..base
            };
        }
        self.apply_pairs(&pairs)?;
        self.check()
    }

    fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let int = |k: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{k}` expects a non-negative integer, got `{v}`")))
        };
        let mut pe = (None, None);
        let mut mode = None;
        for (k, v) in pairs {
            match k.as_str() {
                "variant" => {}
                "decoder_width" => self.decoder_width = int(k, v)?,
                "num_classes" => self.num_classes = int(k, v)?,
                "positional_mode" => {
                    mode = Some(match v.as_str() {
                        "mix_ffn" => false,
                        "learned_pe" => true,
                        _ => return Err(Error::Config(format!("unknown positional_mode `{v}`"))),
                    })
                }
                "pe_train_h" => pe.0 = Some(int(k, v)?),
                "pe_train_w" => pe.1 = Some(int(k, v)?),
                _ => {
                    let slot = k
                        .strip_prefix("stage")
                        .and_then(|rest| rest.split_once('.'))
                        .and_then(|(idx, field)| {
                            let i: usize = idx.parse().ok()?;
                            (1..=4).contains(&i).then_some((i - 1, field))
                        })
                        .and_then(|(i, field)| self.stages[i].field_mut(field));
                    match slot {
                        Some(slot) => *slot = int(k, v)?,
                        None => return Err(Error::Config(format!("unknown config key `{k}`"))),
                    }
                }
            }
        }
        match mode {
            Some(false) => self.positional_mode = PositionalMode::MixFfn,
            Some(true) => {
                let (Some(train_h), Some(train_w)) = pe else {
                    return Err(Error::Config("learned_pe needs pe_train_h and pe_train_w".into()));
                };
                self.positional_mode = PositionalMode::LearnedPe { train_h, train_w };
            }
            None if pe.0.is_some() || pe.1.is_some() => {
                return Err(Error::Config("pe_train_h/pe_train_w given without positional_mode = learned_pe".into()))
            }
            None => {}
        }
        Ok(())
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
