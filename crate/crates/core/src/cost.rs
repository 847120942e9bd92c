//! Per-step FLOPs model for long-context decoding.
//!
//! One step produces `γ` tokens. With target size `T`, drafter size `D`,
//! long context `L` and retrieval length `Lᴿ`:
//!
//! | method        | FLOPs per step                                  |
//! |---------------|-------------------------------------------------|
//! | long context  | `2γTL + γ²T`                                    |
//! | RAG drafter   | `2γDLᴿ + γ²D`                                   |
//! | SD            | `(2γDLᴿ + γ²D + 2T(L + γ)) / βˢᴰ`               |
//! | RAPID         | `(2γDLᴿ + γ²D + 2T(L + γ)) / βᴿᴬᴾᴵᴰ`            |
//!
//! `β` is read as the expected accepted fraction of a `γ`-token block.
//! Speedups are ratios of these FLOP counts. They are a compute proxy and
//! ignore the memory-bandwidth effects that dominate real long-context
//! decoding latency.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    /// Target model parameters.
    pub target_params: f64,
    /// Drafter parameters.
    pub drafter_params: f64,
    /// Long-context length in tokens.
    pub context_len: f64,
    /// Retrieval length in tokens.
    pub retrieval_len: f64,
    pub gamma: f64,
    pub beta_sd: f64,
    pub beta_rapid: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("target_params", self.target_params),
            ("drafter_params", self.drafter_params),
            ("context_len", self.context_len),
            ("retrieval_len", self.retrieval_len),
            ("gamma", self.gamma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta_sd", self.beta_sd), ("beta_rapid", self.beta_rapid)] {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1], got {b}")));
            }
        }
        Ok(())
    }

    pub fn with_context_len(self, context_len: f64) -> Self {
        Self { context_len, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub flops_lc: f64,
    pub flops_drafter: f64,
    pub flops_sd: f64,
    pub flops_rapid: f64,
}

impl CostReport {
    /// Long-context FLOPs over RAPID FLOPs.
    pub fn rapid_speedup(&self) -> f64 {
        self.flops_lc / self.flops_rapid
    }

    pub fn sd_speedup(&self) -> f64 {
        self.flops_lc / self.flops_sd
    }
}

pub fn flops_per_step(params: &CostParams) -> Result<CostReport> {
    params.validate()?;
    let CostParams {
        target_params: t,
        drafter_params: d,
        context_len: l,
        retrieval_len: lr,
        gamma: g,
        beta_sd,
        beta_rapid,
    } = *params;
    let flops_lc = 2.0 * g * t * l + g * g * t;
    let flops_drafter = 2.0 * g * d * lr + g * g * d;
    let shared = flops_drafter + 2.0 * t * (l + g);
    Ok(CostReport { flops_lc, flops_drafter, flops_sd: shared / beta_sd, flops_rapid: shared / beta_rapid })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupPoint {
    pub context_len: f64,
    pub report: CostReport,
    pub rapid_speedup: f64,
    pub sd_speedup: f64,
}

/// Evaluates the model at each context length in `lengths` (ascending).
pub fn speedup_curve(params: &CostParams, lengths: &[f64]) -> Result<Vec<SpeedupPoint>> {
    if lengths.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("context lengths must be strictly ascending".into()));
    }
    lengths
        .iter()
        .map(|&l| {
            let report = flops_per_step(&params.with_context_len(l))?;
            Ok(SpeedupPoint {
                context_len: l,
                report,
                rapid_speedup: report.rapid_speedup(),
                sd_speedup: report.sd_speedup(),
            })
        })
        .collect()
}

/// Smallest length in `lengths` where the RAPID speedup reaches `threshold`.
pub fn crossover_length(params: &CostParams, lengths: &[f64], threshold: f64) -> Result<Option<f64>> {
    Ok(speedup_curve(params, lengths)?.into_iter().find(|p| p.rapid_speedup >= threshold).map(|p| p.context_len))
}

/// Powers of two from `lo` to `hi` inclusive.
pub fn doubling_grid(lo: f64, hi: f64) -> Vec<f64> {
    std::iter::successors(Some(lo), |&l| Some(l * 2.0)).take_while(|&l| l <= hi).collect()
}

/// CSV with columns `L,flops_lc,flops_sd,flops_rapid,rapid_speedup,sd_speedup`.
pub fn curve_csv(points: &[SpeedupPoint]) -> String {
    let mut out = String::from("L,flops_lc,flops_sd,flops_rapid,rapid_speedup,sd_speedup\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            p.context_len, p.report.flops_lc, p.report.flops_sd, p.report.flops_rapid, p.rapid_speedup, p.sd_speedup
        );
    }
    out
}

/// Equal-size target and drafter (8B), 4K retrieval, `γ = 10`, `βˢᴰ = 0.6`, `βᴿᴬᴾᴵᴰ = 0.8`.
pub fn default_params() -> CostParams {
    CostParams {
        target_params: 8.0e9,
        drafter_params: 8.0e9,
        context_len: 131_072.0,
        retrieval_len: 4096.0,
        gamma: 10.0,
        beta_sd: 0.6,
        beta_rapid: 0.8,
    }
}

/// 1K to 128K context lengths.
pub fn default_lengths() -> Vec<f64> {
    doubling_grid(1024.0, 131_072.0)
}
