//! Forget and retain objectives with analytic gradients.
//!
//! With `lp(x) = log p(x; theta)` and batch means written `E[.]`:
//!
//! * `GD     = E[-lp(x)]`
//! * `GA     = E[lp(x)]` (minimised, which lowers forget-set likelihood)
//! * `NPO    = -(2/beta) E[log sigmoid(-beta (lp(x) - lp_ref(x)))]`
//! * `SimNPO = -(2/beta) E[log sigmoid(-(beta/|x|) lp(x) - margin)]`
//!
//! Each is a function of the per-sequence `lp(x)` only, so every gradient is
//! `sum_b w_b grad lp(x_b)` for a per-sequence weight `w_b = dL/d lp(x_b)`,
//! and the model's weighted backprop does the rest.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::ModuleGradients;
use crate::model::{TinyLM, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ga,
    Gd,
    Npo,
    SimNpo,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Ga, LossKind::Gd, LossKind::Npo, LossKind::SimNpo];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ga => "ga",
            LossKind::Gd => "gd",
            LossKind::Npo => "npo",
            LossKind::SimNpo => "simnpo",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::input(format!("unknown loss kind {s:?}; valid values: {{ga, gd, npo, simnpo}}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveParams {
    /// Sharpness of the bounded transform.
    pub beta: f64,
    /// SimNPO margin (not the forget weight of the combiner).
    pub gamma_margin: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        ObjectiveParams {
            beta: 1.0,
            gamma_margin: 0.0,
        }
    }
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::input(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.gamma_margin >= 0.0 && self.gamma_margin.is_finite()) {
            return Err(Error::input(format!(
                "gamma_margin must be non-negative, got {}",
                self.gamma_margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub grads: ModuleGradients,
    /// Batch mean of `log p(x)`.
    pub mean_log_prob: f64,
}

/// `softplus(x) = log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(1 / (1 + e^{-z}))`, stable for large `|z|`.
pub fn log_sigmoid_stable(z: f64) -> f64 {
    -softplus(-z)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Which quantities a loss evaluation needs besides the batch.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub kind: LossKind,
    pub params: ObjectiveParams,
    /// Frozen pre-unlearning model; required for NPO only.
    pub reference: Option<&'a TinyLM>,
}

impl<'a> LossContext<'a> {
    pub fn new(kind: LossKind) -> Self {
        LossContext {
            kind,
            params: ObjectiveParams::default(),
            reference: None,
        }
    }

    pub fn with_params(mut self, params: ObjectiveParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_reference(mut self, reference: &'a TinyLM) -> Self {
        self.reference = Some(reference);
        self
    }
}

fn check_batch(batch: &[TokenSequence]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    Ok(())
}

fn reference_log_probs(
    model: &TinyLM,
    reference: Option<&TinyLM>,
    batch: &[TokenSequence],
) -> Result<Vec<f64>> {
    let reference = reference.ok_or_else(|| Error::input("NPO requires a reference model"))?;
    if reference.schema() != model.schema() {
        return Err(Error::input(
            "reference model schema differs from the model being unlearned",
        ));
    }
    batch.iter().map(|x| reference.log_prob(x)).collect()
}

/// Per-sequence loss terms and their derivatives `d term / d lp`, from `lp` values.
fn terms_and_slopes(
    ctx: &LossContext<'_>,
    batch: &[TokenSequence],
    log_probs: &[f64],
    ref_log_probs: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let beta = ctx.params.beta;
    let mut terms = Vec::with_capacity(batch.len());
    let mut slopes = Vec::with_capacity(batch.len());
    for (b, (x, &lp)) in batch.iter().zip(log_probs).enumerate() {
        match ctx.kind {
            LossKind::Gd => {
                terms.push(-lp);
                slopes.push(-1.0);
            }
            LossKind::Ga => {
                terms.push(lp);
                slopes.push(1.0);
            }
            LossKind::Npo => {
                let delta = lp - ref_log_probs.expect("reference log-probs")[b];
                // -(2/beta) log sigmoid(-beta delta) = (2/beta) softplus(beta delta)
                terms.push(-(2.0 / beta) * log_sigmoid_stable(-beta * delta));
                slopes.push(2.0 * sigmoid(beta * delta));
            }
            LossKind::SimNpo => {
                let n = x.prediction_positions() as f64;
                let z = -(beta / n) * lp - ctx.params.gamma_margin;
                terms.push(-(2.0 / beta) * log_sigmoid_stable(z));
                slopes.push((2.0 / n) * sigmoid(-z));
            }
        }
    }
    (terms, slopes)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Value and analytic gradient of the objective on `batch`.
pub fn compute_loss(
    ctx: &LossContext<'_>,
    model: &TinyLM,
    batch: &[TokenSequence],
) -> Result<LossReport> {
    ctx.params.validate()?;
    check_batch(batch)?;
    let refs = match ctx.kind {
        LossKind::Npo => Some(reference_log_probs(model, ctx.reference, batch)?),
        _ => None,
    };
    let n = batch.len() as f64;
    let (grads, log_probs, terms) = match ctx.kind {
        // constant slopes: one fused forward/backward pass
        LossKind::Ga | LossKind::Gd => {
            let w = if ctx.kind == LossKind::Ga { 1.0 / n } else { -1.0 / n };
            let (grads, log_probs) = model.weighted_log_prob_grad(batch, &vec![w; batch.len()])?;
            (grads, log_probs, Vec::new())
        }
        _ => {
            let log_probs = batch
                .iter()
                .map(|x| model.log_prob(x))
                .collect::<Result<Vec<_>>>()?;
            let (terms, slopes) = terms_and_slopes(ctx, batch, &log_probs, refs.as_deref());
            let weights: Vec<f64> = slopes.iter().map(|s| s / n).collect();
            let (grads, _) = model.weighted_log_prob_grad(batch, &weights)?;
            (grads, log_probs, terms)
        }
    };
    let loss = match ctx.kind {
        // exact negation of each other
        LossKind::Ga => mean(&log_probs),
        LossKind::Gd => -mean(&log_probs),
        _ => mean(&terms),
    };
    if !loss.is_finite() {
        return Err(Error::Invariant(format!("{} loss is not finite", ctx.kind)));
    }
    Ok(LossReport {
        loss,
        grads,
        mean_log_prob: mean(&log_probs),
    })
}

/// Loss value only (no backprop); the finite-difference oracle calls this.
pub fn loss_value(ctx: &LossContext<'_>, model: &TinyLM, batch: &[TokenSequence]) -> Result<f64> {
    ctx.params.validate()?;
    check_batch(batch)?;
    let refs = match ctx.kind {
        LossKind::Npo => Some(reference_log_probs(model, ctx.reference, batch)?),
        _ => None,
    };
    let log_probs = batch
        .iter()
        .map(|x| model.log_prob(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(match ctx.kind {
        LossKind::Ga => mean(&log_probs),
        LossKind::Gd => -mean(&log_probs),
        _ => mean(&terms_and_slopes(ctx, batch, &log_probs, refs.as_deref()).0),
    })
}

pub fn loss_ga(model: &TinyLM, batch: &[TokenSequence]) -> Result<LossReport> {
    compute_loss(&LossContext::new(LossKind::Ga), model, batch)
}

pub fn loss_gd(model: &TinyLM, batch: &[TokenSequence]) -> Result<LossReport> {
    compute_loss(&LossContext::new(LossKind::Gd), model, batch)
}

pub fn loss_npo(
    model: &TinyLM,
    reference: &TinyLM,
    batch: &[TokenSequence],
    params: ObjectiveParams,
) -> Result<LossReport> {
    compute_loss(
        &LossContext::new(LossKind::Npo)
            .with_params(params)
            .with_reference(reference),
        model,
        batch,
    )
}

pub fn loss_simnpo(
    model: &TinyLM,
    batch: &[TokenSequence],
    params: ObjectiveParams,
) -> Result<LossReport> {
    compute_loss(
        &LossContext::new(LossKind::SimNpo).with_params(params),
        model,
        batch,
    )
}

/// Analytic gradient of the requested objective.
pub fn backward(
    ctx: &LossContext<'_>,
    model: &TinyLM,
    batch: &[TokenSequence],
) -> Result<ModuleGradients> {
    Ok(compute_loss(ctx, model, batch)?.grads)
}

/// Central-difference gradient of the requested objective (test oracle).
pub fn finite_diff_objective_grad(
    ctx: &LossContext<'_>,
    model: &TinyLM,
    batch: &[TokenSequence],
    h: f64,
) -> Result<ModuleGradients> {
    crate::model::finite_diff_grad(model, h, |m| loss_value(ctx, m, batch))
}
