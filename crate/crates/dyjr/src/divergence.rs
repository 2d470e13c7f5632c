//! Generative f-divergence regularizers over stored log-probabilities.
//!
//! The replay regularizer never touches the old policy's weights: each buffer
//! entry carries the log-probabilities it was generated with, so the per-token
//! ratio `u = exp(logpi_current - logpi_old)` is enough to evaluate a
//! divergence estimator and its gradient. The Jensen-Shannon estimator
//! `f(u) = u ln u - (u+1) ln((u+1)/2)` is the primary choice; a forward-KL
//! variant is kept for ablations. Closed-form divergences over explicit
//! categorical distributions serve as exact test oracles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{self, ContextLayout, PolicyParams};
use crate::replay::ReplayEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    Js,
    ForwardKl,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    #[serde(default = "default_kind")]
    pub kind: RegKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Ratios are clamped into [1/ratio_clamp, ratio_clamp]; with a small max
    /// age this rarely binds, and every hit is counted in the step record.
    #[serde(default = "default_ratio_clamp")]
    pub ratio_clamp: f64,
}

fn default_kind() -> RegKind {
    RegKind::Js
}
fn default_alpha() -> f64 {
    0.05
}
fn default_ratio_clamp() -> f64 {
    1e4
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            kind: default_kind(),
            alpha: default_alpha(),
            ratio_clamp: default_ratio_clamp(),
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.ratio_clamp > 1.0) {
            return Err(Error::Config(format!(
                "ratio_clamp must exceed 1, got {}",
                self.ratio_clamp
            )));
        }
        Ok(())
    }
}

/// `u = exp(logprob_current - logprob_old)`, clamped into [1/clamp, clamp].
pub fn ratio_u(logprob_current: f64, logprob_old: f64, clamp: f64) -> Result<f64> {
    Ok(ratio_u_tracked(logprob_current, logprob_old, clamp)?.0)
}

/// Same as `ratio_u`, also reporting whether the clamp bound was hit.
pub fn ratio_u_tracked(
    logprob_current: f64,
    logprob_old: f64,
    clamp: f64,
) -> Result<(f64, bool)> {
    if !logprob_current.is_finite() || !logprob_old.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite log-probability in ratio: current {logprob_current}, old {logprob_old}"
        )));
    }
    let raw = (logprob_current - logprob_old).exp();
    let clamped = raw.clamp(1.0 / clamp, clamp);
    Ok((clamped, clamped != raw))
}

fn require_positive(u: f64, what: &str) -> Result<()> {
    if !(u > 0.0) {
        return Err(Error::Input(format!("{what} requires u > 0, got {u}")));
    }
    Ok(())
}

/// Jensen-Shannon estimator term `u ln u - (u+1) ln((u+1)/2)`, written with
/// log1p so it is exactly 0 at u = 1.
pub fn f_js(u: f64) -> Result<f64> {
    require_positive(u, "f_js")?;
    let d = u - 1.0;
    Ok(u * d.ln_1p() - (u + 1.0) * (d / 2.0).ln_1p())
}

/// d f_js / d logpi_current = u * f_js'(u) = u ln(2u / (u+1)).
pub fn f_js_grad_wrt_logprob(u: f64) -> Result<f64> {
    require_positive(u, "f_js_grad")?;
    let d = u - 1.0;
    Ok(u * (d.ln_1p() - (d / 2.0).ln_1p()))
}

/// Forward-KL estimator term `(u - 1) - ln u`: pointwise nonnegative, zero at
/// u = 1, and its expectation under the old policy equals KL(old || current)
/// exactly (the u - 1 part is a zero-expectation control variate).
pub fn f_fkl(u: f64) -> Result<f64> {
    require_positive(u, "f_fkl")?;
    let d = u - 1.0;
    Ok(d - d.ln_1p())
}

/// d f_fkl / d logpi_current = u - 1.
pub fn f_fkl_grad_wrt_logprob(u: f64) -> Result<f64> {
    require_positive(u, "f_fkl_grad")?;
    Ok(u - 1.0)
}

/// Replay regularizer value and gradient for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayRegOutcome {
    /// Mean over the batch of per-trajectory means of f(u) (unscaled by alpha).
    pub loss: f64,
    pub clamp_hits: u64,
}

/// Re-score each replayed trajectory under the current policy and accumulate
/// the regularizer gradient: per-token weight `alpha * f'(u) / (L_s * |B|)`
/// through the shared kernel. The loss is length-mean then batch-mean. An
/// empty batch contributes loss 0 and no gradient.
pub fn replay_loss_and_grad(
    params: &PolicyParams,
    layout: &ContextLayout,
    batch: &[ReplayEntry],
    cfg: &RegularizerConfig,
    temperature: f64,
    grad_out: &mut [f64],
) -> Result<ReplayRegOutcome> {
    if batch.is_empty() || cfg.kind == RegKind::None {
        return Ok(ReplayRegOutcome {
            loss: 0.0,
            clamp_hits: 0,
        });
    }
    let batch_size = batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut clamp_hits = 0u64;
    for entry in batch {
        let traj = &entry.trajectory;
        let seq_len = traj.tokens.len() as f64;
        let current =
            policy::sequence_logprobs(params, layout, &traj.query, &traj.tokens, temperature)?;
        let mut f_sum = 0.0;
        let mut weights = vec![0.0; traj.tokens.len()];
        for (j, (&lp_cur, &lp_old)) in current.iter().zip(&traj.logprobs_old).enumerate() {
            let (u, hit) = ratio_u_tracked(lp_cur, lp_old, cfg.ratio_clamp)?;
            clamp_hits += u64::from(hit);
            let (f, f_grad) = match cfg.kind {
                RegKind::Js => (f_js(u)?, f_js_grad_wrt_logprob(u)?),
                RegKind::ForwardKl => (f_fkl(u)?, f_fkl_grad_wrt_logprob(u)?),
                RegKind::None => unreachable!(),
            };
            f_sum += f;
            weights[j] = cfg.alpha * f_grad / (seq_len * batch_size);
        }
        loss_sum += f_sum / seq_len;
        policy::accumulate_weighted_grad(
            params,
            layout,
            &traj.query,
            &traj.tokens,
            &weights,
            temperature,
            grad_out,
        )?;
    }
    Ok(ReplayRegOutcome {
        loss: loss_sum / batch_size,
        clamp_hits,
    })
}

fn check_simplex(v: &[f64], name: &str) -> Result<()> {
    if v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Input(format!("{name} has negative or non-finite mass")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Exact Jensen-Shannon divergence between two categorical distributions:
/// `0.5 KL(p || m) + 0.5 KL(q || m)` with `m = (p+q)/2`, natural log,
/// `0 ln 0 = 0`. Test oracle for the generative estimator.
pub fn closed_form_js(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / m).ln();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / m).ln();
        }
    }
    Ok(acc)
}

/// Exact KL(p || q) for categorical distributions, `0 ln 0 = 0`. Infinite when
/// q lacks support where p has mass; test oracle for the forward-KL estimator.
pub fn closed_form_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi / qi).ln();
        }
    }
    Ok(acc)
}
