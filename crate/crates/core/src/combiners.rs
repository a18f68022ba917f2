//! Gradient synthesis: turn a retain gradient `g_r` and a forget gradient
//! `g_f` into the single update direction `g_final`.
//!
//! Four strategies are provided:
//!
//! * **naive** (gradient difference): `alpha * g_r + gamma * g_f`.
//! * **PCGrad, global**: when the flattened `g_f` and `g_r` conflict
//!   (negative inner product), `g_f` is replaced by its projection onto the
//!   orthogonal complement of `g_r`; then the weighted sum is taken.
//! * **PCGrad, module-wise**: the same conditional projection, applied
//!   independently to each parameter module.
//! * **SAGO**: coordinate-wise sign gating. Where `g_f` and `g_r` agree in sign
//!   the forget gradient passes; where they disagree the retain gradient is
//!   kept instead. The two gated vectors have disjoint support and every
//!   coordinate of the result points the same way as `g_r` (or is zero).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{
    dot_slice, flatten, unflatten, weighted_sum, GradVector, ModuleGradients, EPS_ZERO,
};

/// Tolerance (relative to `|g_f| |g_r|`) for the post-projection orthogonality check.
pub const ORTHOGONALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionScope {
    Global,
    #[default]
    ModuleWise,
}

/// How SAGO routes coordinates where `g_f[i] * g_r[i] == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroProductPolicy {
    /// `g_f * 1[g_f * g_r >= 0]`, `g_r * 1[g_f * g_r < 0]`: a zero product goes to the
    /// forget gate, so retain signal at coordinates with `g_f[i] == 0` is dropped.
    #[default]
    PaperLiteral,
    /// Coordinates with `g_f[i] == 0` go to the retain gate instead.
    RetainWins,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombinerConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub scope: ProjectionScope,
    pub zero_product_policy: ZeroProductPolicy,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        CombinerConfig {
            alpha: 1.0,
            gamma: 1.0,
            scope: ProjectionScope::ModuleWise,
            zero_product_policy: ZeroProductPolicy::PaperLiteral,
        }
    }
}

impl CombinerConfig {
    pub fn with_weights(alpha: f64, gamma: f64) -> Self {
        CombinerConfig {
            alpha,
            gamma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::input(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombinerKind {
    Naive,
    PcgradGlobal,
    #[serde(rename = "pcgrad-module")]
    PcgradModuleWise,
    Sago,
}

impl CombinerKind {
    pub const ALL: [CombinerKind; 4] = [
        CombinerKind::Naive,
        CombinerKind::PcgradGlobal,
        CombinerKind::PcgradModuleWise,
        CombinerKind::Sago,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CombinerKind::Naive => "naive",
            CombinerKind::PcgradGlobal => "pcgrad-global",
            CombinerKind::PcgradModuleWise => "pcgrad-module",
            CombinerKind::Sago => "sago",
        }
    }
}

impl fmt::Display for CombinerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CombinerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CombinerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = CombinerKind::ALL.iter().map(|k| k.name()).collect();
                Error::input(format!(
                    "unknown combiner {s:?}; valid values: {{{}}}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombineOutcome {
    pub g_final: ModuleGradients,
    pub g_f_tilde: ModuleGradients,
    /// `g_r` itself for naive and PCGrad; the gated retain gradient for SAGO.
    pub g_r_tilde: ModuleGradients,
    /// Fraction of conflicting modules (naive, module-wise PCGrad), 0 or 1 (global
    /// PCGrad), or fraction of conflicting coordinates (SAGO).
    pub conflict_fraction: f64,
}

fn prepare(g_r: &ModuleGradients, g_f: &ModuleGradients, cfg: &CombinerConfig) -> Result<()> {
    cfg.validate()?;
    g_r.check_aligned(g_f)?;
    if g_r.is_empty() {
        return Err(Error::input("no parameter modules"));
    }
    Ok(())
}

fn module_conflict_fraction(g_r: &ModuleGradients, g_f: &ModuleGradients) -> f64 {
    let conflicts = g_r
        .iter()
        .zip(g_f.iter())
        .filter(|((_, r), (_, f))| dot_slice(f.as_slice(), r.as_slice()) < 0.0)
        .count();
    conflicts as f64 / g_r.len() as f64
}

/// Gradient difference: `alpha * g_r + gamma * g_f` with no conflict handling.
pub fn combine_naive(
    g_r: &ModuleGradients,
    g_f: &ModuleGradients,
    cfg: &CombinerConfig,
) -> Result<CombineOutcome> {
    prepare(g_r, g_f, cfg)?;
    Ok(CombineOutcome {
        g_final: weighted_sum(cfg.alpha, g_r, cfg.gamma, g_f)?,
        g_f_tilde: g_f.clone(),
        g_r_tilde: g_r.clone(),
        conflict_fraction: module_conflict_fraction(g_r, g_f),
    })
}

/// True when the pair conflicts and `g_r` is large enough to project onto.
fn projection_fires(g_f: &[f64], g_r: &[f64]) -> bool {
    let d = dot_slice(g_f, g_r);
    d < 0.0 && dot_slice(g_r, g_r).sqrt() >= EPS_ZERO
}

/// Removes the component of `g_f` along `g_r` when `g_f . g_r < 0`; otherwise
/// returns `g_f` unchanged (including the boundary `g_f . g_r == 0`).
pub fn project_if_conflict(g_f: &GradVector, g_r: &GradVector) -> Result<GradVector> {
    if g_f.len() != g_r.len() {
        return Err(Error::alignment(format!(
            "vector lengths differ ({} vs {})",
            g_f.len(),
            g_r.len()
        )));
    }
    let (f, r) = (g_f.as_slice(), g_r.as_slice());
    if !projection_fires(f, r) {
        return Ok(g_f.clone());
    }
    let coef = dot_slice(f, r) / dot_slice(r, r);
    GradVector::from_computed(
        f.iter().zip(r).map(|(fi, ri)| fi - coef * ri).collect(),
        "projection",
    )
}

/// PCGrad with the scope taken from `cfg.scope`.
pub fn combine_pcgrad(
    g_r: &ModuleGradients,
    g_f: &ModuleGradients,
    cfg: &CombinerConfig,
) -> Result<CombineOutcome> {
    prepare(g_r, g_f, cfg)?;
    let (g_f_tilde, conflict_fraction) = match cfg.scope {
        ProjectionScope::ModuleWise => {
            let tilde = g_f.zip_map(g_r, project_if_conflict)?;
            (tilde, module_conflict_fraction(g_r, g_f))
        }
        ProjectionScope::Global => {
            let (flat_f, flat_r) = (flatten(g_f)?, flatten(g_r)?);
            let conflict = dot_slice(flat_f.as_slice(), flat_r.as_slice()) < 0.0;
            let projected = project_if_conflict(&flat_f, &flat_r)?;
            (
                unflatten(&projected, &g_f.schema())?,
                if conflict { 1.0 } else { 0.0 },
            )
        }
    };
    Ok(CombineOutcome {
        g_final: weighted_sum(cfg.alpha, g_r, cfg.gamma, &g_f_tilde)?,
        g_f_tilde,
        g_r_tilde: g_r.clone(),
        conflict_fraction,
    })
}

/// Strictly opposite signs. Compared by sign rather than by product so that
/// underflowing products of tiny opposite-signed values still count as conflict.
#[inline]
fn opposite_signs(f: f64, r: f64) -> bool {
    (f > 0.0 && r < 0.0) || (f < 0.0 && r > 0.0)
}

#[inline]
fn routes_to_retain(f: f64, r: f64, policy: ZeroProductPolicy) -> bool {
    opposite_signs(f, r) || (policy == ZeroProductPolicy::RetainWins && f == 0.0)
}

/// Element-wise sign gate. Returns `(g_f_tilde, g_r_tilde)` with disjoint support.
pub fn sign_gate(
    g_f: &GradVector,
    g_r: &GradVector,
    policy: ZeroProductPolicy,
) -> Result<(GradVector, GradVector)> {
    if g_f.len() != g_r.len() {
        return Err(Error::alignment(format!(
            "vector lengths differ ({} vs {})",
            g_f.len(),
            g_r.len()
        )));
    }
    let mut gf = Vec::with_capacity(g_f.len());
    let mut gr = Vec::with_capacity(g_f.len());
    for (&f, &r) in g_f.as_slice().iter().zip(g_r.as_slice()) {
        if routes_to_retain(f, r, policy) {
            gf.push(0.0);
            gr.push(r);
        } else {
            gf.push(f);
            gr.push(0.0);
        }
    }
    Ok((GradVector::new(gf)?, GradVector::new(gr)?))
}

/// SAGO: sign-gate every coordinate, then `alpha * g_r_tilde + gamma * g_f_tilde`.
pub fn combine_sago(
    g_r: &ModuleGradients,
    g_f: &ModuleGradients,
    cfg: &CombinerConfig,
) -> Result<CombineOutcome> {
    prepare(g_r, g_f, cfg)?;
    let mut conflicts = 0usize;
    let mut g_f_tilde = ModuleGradients::new();
    let mut g_r_tilde = ModuleGradients::new();
    for ((name, f), (_, r)) in g_f.iter().zip(g_r.iter()) {
        conflicts += f
            .as_slice()
            .iter()
            .zip(r.as_slice())
            .filter(|(&a, &b)| opposite_signs(a, b))
            .count();
        let (tf, tr) = sign_gate(f, r, cfg.zero_product_policy)?;
        g_f_tilde.insert(name, tf)?;
        g_r_tilde.insert(name, tr)?;
    }
    Ok(CombineOutcome {
        g_final: weighted_sum(cfg.alpha, &g_r_tilde, cfg.gamma, &g_f_tilde)?,
        conflict_fraction: conflicts as f64 / g_r.num_coordinates() as f64,
        g_f_tilde,
        g_r_tilde,
    })
}

/// Dispatches on `kind`; the PCGrad kinds override `cfg.scope`.
pub fn combine(
    kind: CombinerKind,
    g_r: &ModuleGradients,
    g_f: &ModuleGradients,
    cfg: &CombinerConfig,
) -> Result<CombineOutcome> {
    match kind {
        CombinerKind::Naive => combine_naive(g_r, g_f, cfg),
        CombinerKind::PcgradGlobal => combine_pcgrad(
            g_r,
            g_f,
            &CombinerConfig {
                scope: ProjectionScope::Global,
                ..*cfg
            },
        ),
        CombinerKind::PcgradModuleWise => combine_pcgrad(
            g_r,
            g_f,
            &CombinerConfig {
                scope: ProjectionScope::ModuleWise,
                ..*cfg
            },
        ),
        CombinerKind::Sago => combine_sago(g_r, g_f, cfg),
    }
}

/// Re-derives the structural guarantees of `kind` from an outcome and fails with
/// [`Error::Invariant`] if any is broken:
///
/// * PCGrad: wherever the projection fired, `|g_f_tilde . g_r| <= 1e-9 |g_f| |g_r|`
///   (per module or jointly, matching the scope).
/// * SAGO: `g_final[i] * g_r[i] >= -1e-15` for every coordinate, and disjoint support.
pub fn verify_outcome(
    kind: CombinerKind,
    g_r: &ModuleGradients,
    g_f: &ModuleGradients,
    outcome: &CombineOutcome,
) -> Result<()> {
    let check_orthogonal = |name: &str, f: &[f64], tilde: &[f64], r: &[f64]| -> Result<()> {
        if !projection_fires(f, r) {
            return Ok(());
        }
        let residual = dot_slice(tilde, r).abs();
        let bound = ORTHOGONALITY_TOL * dot_slice(f, f).sqrt() * dot_slice(r, r).sqrt();
        if residual > bound {
            return Err(Error::Invariant(format!(
                "PCGrad projection in {name} left |g_f~ . g_r| = {residual:e} > {bound:e}"
            )));
        }
        Ok(())
    };
    match kind {
        CombinerKind::Naive => Ok(()),
        CombinerKind::PcgradModuleWise => {
            for (((name, f), (_, r)), (_, t)) in
                g_f.iter().zip(g_r.iter()).zip(outcome.g_f_tilde.iter())
            {
                check_orthogonal(name, f.as_slice(), t.as_slice(), r.as_slice())?;
            }
            Ok(())
        }
        CombinerKind::PcgradGlobal => check_orthogonal(
            "joint vector",
            flatten(g_f)?.as_slice(),
            flatten(&outcome.g_f_tilde)?.as_slice(),
            flatten(g_r)?.as_slice(),
        ),
        CombinerKind::Sago => {
            for (((name, fin), (_, r)), ((_, tf), (_, tr))) in outcome
                .g_final
                .iter()
                .zip(g_r.iter())
                .zip(outcome.g_f_tilde.iter().zip(outcome.g_r_tilde.iter()))
            {
                for (i, (&x, &y)) in fin.as_slice().iter().zip(r.as_slice()).enumerate() {
                    if x * y < -1e-15 {
                        return Err(Error::Invariant(format!(
                            "SAGO update opposes retain gradient at {name}[{i}]: {x:e} * {y:e}"
                        )));
                    }
                }
                if tf.as_slice().iter().zip(tr.as_slice()).any(|(a, b)| a * b != 0.0) {
                    return Err(Error::Invariant(format!(
                        "SAGO gated gradients overlap in module {name}"
                    )));
                }
            }
            Ok(())
        }
    }
}
