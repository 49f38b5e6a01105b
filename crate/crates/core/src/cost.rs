//! Parameter and multiply-accumulate accounting.
//!
//! One MAC is one multiply-accumulate. Only convolutions, linear maps and the
//! two attention matmuls are counted; norms, activations, softmax and resizing
//! are not.

use std::fmt::Write as _;

use crate::config::{MitConfig, ResolutionPlan};
use crate::encoder::stage_prefix;
use crate::error::Result;
use crate::model::{param_specs, SegFormer};
use crate::params::ParamSpec;
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageCost {
    pub params: usize,
    pub h: usize,
    pub w: usize,
    pub seq_len: usize,
    pub kv_len: usize,
    /// Everything counted in this stage.
    pub macs: u64,
    /// Patch embedding plus depthwise convolutions.
    pub conv_macs: u64,
    /// `Q·Kᵀ` products over all blocks.
    pub score_macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub variant: String,
    pub num_classes: usize,
    pub total_params: usize,
    pub encoder_params: usize,
    pub decoder_params: usize,
    /// `(h, w)` the MAC figures refer to; `None` for a params-only report.
    pub input: Option<(usize, usize)>,
    pub macs: u64,
    pub decoder_macs: u64,
    pub stages: [StageCost; 4],
}

impl CostReport {
    pub fn encoder_macs(&self) -> u64 {
        self.stages.iter().map(|s| s.macs).sum()
    }

    /// `key: value` lines in a fixed order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let m = |n: usize| n as f64 / 1e6;
        let _ = writeln!(out, "variant: {}", self.variant);
        let _ = writeln!(out, "num_classes: {}", self.num_classes);
        let _ = writeln!(out, "params_total: {}", self.total_params);
        let _ = writeln!(out, "params_encoder: {}", self.encoder_params);
        let _ = writeln!(out, "params_decoder: {}", self.decoder_params);
        let _ = writeln!(out, "params_total_m: {:.3}", m(self.total_params));
        let _ = writeln!(out, "params_encoder_m: {:.3}", m(self.encoder_params));
        let _ = writeln!(out, "params_decoder_m: {:.3}", m(self.decoder_params));
        if let Some((h, w)) = self.input {
            let _ = writeln!(out, "input: {h}x{w}");
            let _ = writeln!(out, "macs_total: {}", self.macs);
            let _ = writeln!(out, "macs_total_g: {:.3}", self.macs as f64 / 1e9);
            let _ = writeln!(out, "macs_encoder: {}", self.encoder_macs());
            let _ = writeln!(out, "macs_decoder: {}", self.decoder_macs);
        }
        for (i, s) in self.stages.iter().enumerate() {
            let _ = write!(out, "stage{}: params={}", i + 1, s.params);
            if self.input.is_some() {
                let _ = write!(out, " grid={}x{} seq={} kv={} macs={}", s.h, s.w, s.seq_len, s.kv_len, s.macs);
            }
            out.push('\n');
        }
        out
    }
}

fn report_from(cfg: &MitConfig, count: impl Fn(&str) -> usize) -> CostReport {
    let stages = std::array::from_fn(|i| StageCost {
        params: count(&format!("{}.", stage_prefix(i))),
        ..StageCost::default()
    });
    let (enc, dec) = (count("enc."), count("dec."));
    CostReport {
        variant: cfg.variant.to_string(),
        num_classes: cfg.num_classes,
        total_params: enc + dec,
        encoder_params: enc,
        decoder_params: dec,
        input: None,
        macs: 0,
        decoder_macs: 0,
        stages,
    }
}

/// Parameter counts read off the model's store.
pub fn count_params<T: Float>(model: &SegFormer<T>) -> CostReport {
    report_from(&model.config, |prefix| model.params.count_prefix(prefix))
}

/// Parameter counts from the config alone, without materializing weights.
pub fn count_params_for(cfg: &MitConfig) -> CostReport {
    let specs = param_specs(cfg);
    report_from(cfg, |prefix| specs.iter().filter(|s| s.name.starts_with(prefix)).map(ParamSpec::numel).sum())
}

/// Analytic MACs for one stage at the planned grid.
pub fn stage_macs(cfg: &MitConfig, plan: &ResolutionPlan, stage: usize) -> StageCost {
    let s = &cfg.stages[stage];
    let p = &plan.stages[stage];
    let cin = if stage == 0 { 3 } else { cfg.stages[stage - 1].channels } as u64;
    let (n, m) = (p.seq_len as u64, p.kv_len as u64);
    let c = s.channels as u64;
    let hidden = s.hidden() as u64;
    let k = s.patch_kernel as u64;

    let patch = c * cin * k * k * n;
    let dw = n * hidden * 9;
    let reduce = if s.reduction > 1 { n * c * c } else { 0 };
    let score = n * m * c;
    let block = n * c * c // q
        + reduce
        + 2 * m * c * c // k, v
        + score
        + n * m * c // weights · v
        + n * c * c // output projection
        + n * c * hidden
        + dw
        + n * hidden * c;
    let depth = s.depth as u64;
    StageCost {
        params: 0,
        h: p.h,
        w: p.w,
        seq_len: p.seq_len,
        kv_len: p.kv_len,
        macs: patch + depth * block,
        conv_macs: patch + depth * dw,
        score_macs: depth * score,
    }
}

/// Analytic MACs of the decoder at the planned grids.
pub fn decoder_macs(cfg: &MitConfig, plan: &ResolutionPlan) -> u64 {
    let d = cfg.decoder_width as u64;
    let n1 = plan.stages[0].seq_len as u64;
    let unify: u64 = cfg
        .stages
        .iter()
        .zip(&plan.stages)
        .map(|(s, p)| p.seq_len as u64 * s.channels as u64 * d)
        .sum();
    unify + n1 * 4 * d * d + n1 * d * cfg.num_classes as u64
}

fn add_macs(mut report: CostReport, cfg: &MitConfig, input_h: usize, input_w: usize) -> Result<CostReport> {
    let plan = cfg.plan(input_h, input_w)?;
    for (i, st) in report.stages.iter_mut().enumerate() {
        *st = StageCost {
            params: st.params,
            ..stage_macs(cfg, &plan, i)
        };
    }
    report.decoder_macs = decoder_macs(cfg, &plan);
    report.macs = report.encoder_macs() + report.decoder_macs;
    report.input = Some((input_h, input_w));
    Ok(report)
}

/// Parameters plus analytic MACs for one `input_h × input_w` image.
pub fn count_macs<T: Float>(model: &SegFormer<T>, input_h: usize, input_w: usize) -> Result<CostReport> {
    add_macs(count_params(model), &model.config, input_h, input_w)
}

/// [`count_macs`] from the config alone.
pub fn count_macs_for(cfg: &MitConfig, input_h: usize, input_w: usize) -> Result<CostReport> {
    add_macs(count_params_for(cfg), cfg, input_h, input_w)
}
