//! Flat and module-partitioned gradient arithmetic.
//!
//! Everything is `f64`. A [`GradVector`] is never empty and never holds a
//! non-finite coordinate; constructors reject both, and the arithmetic here
//! re-checks its outputs so overflow cannot leak NaN/Inf into a run.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero (cosine returns 0, projections are skipped).
pub const EPS_ZERO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::input("empty module vector"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite coordinate {} at index {i}",
                values[i]
            )));
        }
        Ok(GradVector(values))
    }

    pub fn zeros(len: usize) -> Result<Self> {
        GradVector::new(vec![0.0; len])
    }

    /// Wraps arithmetic output; non-finite results mean the computation overflowed.
    pub(crate) fn from_computed(values: Vec<f64>, what: &str) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("{what} produced a non-finite value")));
        }
        debug_assert!(!values.is_empty());
        Ok(GradVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm_sq(self).sqrt()
    }

    pub fn scale(&self, c: f64) -> Result<GradVector> {
        GradVector::from_computed(self.0.iter().map(|v| c * v).collect(), "scale")
    }
}

impl TryFrom<Vec<f64>> for GradVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        GradVector::new(values)
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::alignment(format!(
            "vector lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub(crate) fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot(a: &GradVector, b: &GradVector) -> Result<f64> {
    check_len(&a.0, &b.0)?;
    Ok(dot_slice(&a.0, &b.0))
}

pub fn norm_sq(a: &GradVector) -> f64 {
    dot_slice(&a.0, &a.0)
}

/// Cosine similarity, clamped to `[-1, 1]`; 0 when either vector is (numerically) zero.
pub fn cosine(a: &GradVector, b: &GradVector) -> Result<f64> {
    check_len(&a.0, &b.0)?;
    Ok(cosine_slice(&a.0, &b.0))
}

pub(crate) fn cosine_slice(a: &[f64], b: &[f64]) -> f64 {
    let na = dot_slice(a, a).sqrt();
    let nb = dot_slice(b, b).sqrt();
    if na < EPS_ZERO || nb < EPS_ZERO {
        return 0.0;
    }
    (dot_slice(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Module names and lengths, in registry order. Needed to undo [`flatten`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema(pub Vec<(String, usize)>);

impl Schema {
    pub fn total_len(&self) -> usize {
        self.0.iter().map(|(_, n)| n).sum()
    }
}

/// Gradients keyed by parameter module, kept in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModuleGradients {
    entries: IndexMap<String, GradVector>,
}

impl ModuleGradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: GradVector) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::input(format!("duplicate module name {name:?}")));
        }
        self.entries.insert(name, grad);
        Ok(())
    }

    /// Builds from `(name, values)` pairs; every vector must be non-empty and finite.
    pub fn from_pairs<S, I>(pairs: I) -> Result<Self>
    where
        S: Into<String>,
        I: IntoIterator<Item = (S, Vec<f64>)>,
    {
        let mut m = ModuleGradients::new();
        for (name, values) in pairs {
            m.insert(name, GradVector::new(values)?)?;
        }
        Ok(m)
    }

    pub fn get(&self, name: &str) -> Option<&GradVector> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &GradVector)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_coordinates(&self) -> usize {
        self.entries.values().map(GradVector::len).sum()
    }

    pub fn schema(&self) -> Schema {
        Schema(
            self.entries
                .iter()
                .map(|(k, v)| (k.clone(), v.len()))
                .collect(),
        )
    }

    /// Same module names, same order, same per-module lengths.
    pub fn is_aligned(&self, other: &ModuleGradients) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.len() == vb.len())
    }

    pub fn check_aligned(&self, other: &ModuleGradients) -> Result<()> {
        if self.is_aligned(other) {
            Ok(())
        } else {
            Err(Error::alignment(format!(
                "module schemas differ: {:?} vs {:?}",
                self.schema().0,
                other.schema().0
            )))
        }
    }

    /// Applies `f` to every aligned module pair, producing a new container.
    pub(crate) fn zip_map<F>(&self, other: &ModuleGradients, mut f: F) -> Result<ModuleGradients>
    where
        F: FnMut(&GradVector, &GradVector) -> Result<GradVector>,
    {
        self.check_aligned(other)?;
        let mut out = ModuleGradients::new();
        for ((name, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            out.entries.insert(name.clone(), f(a, b)?);
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Result<ModuleGradients> {
        let mut out = ModuleGradients::new();
        for (name, v) in &self.entries {
            out.entries.insert(name.clone(), v.scale(c)?);
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &ModuleGradients) -> Result<f64> {
        self.check_aligned(other)?;
        Ok(self
            .entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }
}

/// `alpha * a + gamma * b`, coordinate-wise.
pub fn weighted_sum(
    alpha: f64,
    a: &ModuleGradients,
    gamma: f64,
    b: &ModuleGradients,
) -> Result<ModuleGradients> {
    a.zip_map(b, |x, y| weighted_sum_vec(alpha, x, gamma, y))
}

pub fn weighted_sum_vec(alpha: f64, a: &GradVector, gamma: f64, b: &GradVector) -> Result<GradVector> {
    check_len(&a.0, &b.0)?;
    GradVector::from_computed(
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| alpha * x + gamma * y)
            .collect(),
        "weighted_sum",
    )
}

/// Concatenates modules in insertion order.
pub fn flatten(m: &ModuleGradients) -> Result<GradVector> {
    if m.is_empty() {
        return Err(Error::input("cannot flatten an empty module set"));
    }
    let mut out = Vec::with_capacity(m.num_coordinates());
    for (_, v) in m.iter() {
        out.extend_from_slice(v.as_slice());
    }
    GradVector::new(out)
}

pub fn unflatten(v: &GradVector, schema: &Schema) -> Result<ModuleGradients> {
    if schema.total_len() != v.len() {
        return Err(Error::alignment(format!(
            "vector of length {} does not match schema of total length {}",
            v.len(),
            schema.total_len()
        )));
    }
    let mut out = ModuleGradients::new();
    let mut offset = 0;
    for (name, len) in &schema.0 {
        out.insert(name.clone(), GradVector::new(v.0[offset..offset + len].to_vec())?)?;
        offset += len;
    }
    Ok(out)
}

/// Cosine of the flattened joint vectors.
pub fn joint_cosine(a: &ModuleGradients, b: &ModuleGradients) -> Result<f64> {
    a.check_aligned(b)?;
    cosine(&flatten(a)?, &flatten(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gv(v: &[f64]) -> GradVector {
        GradVector::new(v.to_vec()).unwrap()
    }

    fn single(v: &[f64]) -> ModuleGradients {
        ModuleGradients::from_pairs([("w", v.to_vec())]).unwrap()
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&gv(&[1.0, 1.0]), &gv(&[1.0, 1.0])).unwrap(), 2.0);
        assert_eq!(dot(&gv(&[-3.0, 1.0]), &gv(&[1.0, 1.0])).unwrap(), -2.0);
        assert_eq!(dot(&gv(&[0.0, 0.0]), &gv(&[5.0, 7.0])).unwrap(), 0.0);
        assert!(matches!(
            dot(&gv(&[1.0]), &gv(&[1.0, 2.0])),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn norm_sq_examples() {
        assert_eq!(norm_sq(&gv(&[1.0, 1.0])), 2.0);
        assert_eq!(norm_sq(&gv(&[0.0, 0.0])), 0.0);
        assert_eq!(norm_sq(&gv(&[-2.0, 2.0])), 8.0);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&gv(&[1.0, 0.0]), &gv(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine(&gv(&[2.0, 2.0]), &gv(&[1.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        let c = cosine(&gv(&[-1.0, 3.0]), &gv(&[1.0, 1.0])).unwrap();
        assert!((c - 2.0 / 20f64.sqrt()).abs() < 1e-15);
        // zero-norm convention
        assert_eq!(cosine(&gv(&[0.0, 0.0]), &gv(&[1.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine(&gv(&[1e-13, 0.0]), &gv(&[1.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(GradVector::new(vec![]).is_err());
        assert!(GradVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(GradVector::new(vec![f64::INFINITY]).is_err());
        let err = ModuleGradients::from_pairs([("a", vec![])]).unwrap_err();
        assert!(err.to_string().contains("empty module vector"));
    }

    #[test]
    fn weighted_sum_examples() {
        let r = weighted_sum(1.0, &single(&[1.0, 0.0]), 1.0, &single(&[0.0, 1.0])).unwrap();
        assert_eq!(r, single(&[1.0, 1.0]));
        let r = weighted_sum(0.0, &single(&[5.0, 5.0]), 1.0, &single(&[2.0, 3.0])).unwrap();
        assert_eq!(r, single(&[2.0, 3.0]));
        let r = weighted_sum(0.5, &single(&[2.0, 0.0]), 0.1, &single(&[0.0, 10.0])).unwrap();
        assert_eq!(r, single(&[1.0, 1.0]));
    }

    #[test]
    fn weighted_sum_rejects_misalignment() {
        let a = ModuleGradients::from_pairs([("a", vec![1.0]), ("b", vec![2.0])]).unwrap();
        let b = ModuleGradients::from_pairs([("b", vec![1.0]), ("a", vec![2.0])]).unwrap();
        assert!(matches!(weighted_sum(1.0, &a, 1.0, &b), Err(Error::Alignment(_))));
        let c = ModuleGradients::from_pairs([("a", vec![1.0]), ("b", vec![2.0, 3.0])]).unwrap();
        assert!(matches!(weighted_sum(1.0, &a, 1.0, &c), Err(Error::Alignment(_))));
    }

    #[test]
    fn weighted_sum_overflow_is_reported() {
        let a = single(&[f64::MAX]);
        assert!(weighted_sum(2.0, &a, 0.0, &a).is_err());
    }

    #[test]
    fn flatten_examples() {
        let m = ModuleGradients::from_pairs([("a", vec![1.0, 2.0]), ("b", vec![3.0])]).unwrap();
        let flat = flatten(&m).unwrap();
        assert_eq!(flat.as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(unflatten(&flat, &m.schema()).unwrap(), m);
        assert!(unflatten(&gv(&[1.0, 2.0]), &m.schema()).is_err());
    }

    #[test]
    fn duplicate_module_names_rejected() {
        assert!(ModuleGradients::from_pairs([("a", vec![1.0]), ("a", vec![2.0])]).is_err());
    }

    fn modules_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<f64>)> {
        prop::collection::vec(1usize..6, 1..5).prop_flat_map(|lens| {
            let n: usize = lens.iter().sum();
            (
                Just(lens),
                prop::collection::vec(-1e3..1e3f64, n),
                prop::collection::vec(-1e3..1e3f64, n),
            )
        })
    }

    fn build(lens: &[usize], values: &[f64]) -> ModuleGradients {
        let schema = Schema(
            lens.iter()
                .enumerate()
                .map(|(i, &n)| (format!("m{i}"), n))
                .collect(),
        );
        unflatten(&gv(values), &schema).unwrap()
    }

    proptest! {
        #[test]
        fn dot_symmetric_and_cosine_bounded((_, a, b) in modules_strategy()) {
            let (a, b) = (gv(&a), gv(&b));
            prop_assert_eq!(dot(&a, &b).unwrap(), dot(&b, &a).unwrap());
            prop_assert!(cosine(&a, &b).unwrap().abs() <= 1.0);
        }

        #[test]
        fn flatten_unflatten_roundtrip((lens, a, _) in modules_strategy()) {
            let m = build(&lens, &a);
            let flat = flatten(&m).unwrap();
            prop_assert_eq!(flat.as_slice(), &a[..]);
            prop_assert_eq!(unflatten(&flat, &m.schema()).unwrap(), m);
        }

        #[test]
        fn weighted_sum_bilinear(
            (lens, a, b) in modules_strategy(),
            w in prop::array::uniform4(0.0..2.0f64),
        ) {
            let (ma, mb) = (build(&lens, &a), build(&lens, &b));
            let lhs1 = weighted_sum(w[0], &ma, w[1], &mb).unwrap();
            let lhs2 = weighted_sum(w[2], &ma, w[3], &mb).unwrap();
            let lhs = weighted_sum(1.0, &lhs1, 1.0, &lhs2).unwrap();
            let rhs = weighted_sum(w[0] + w[2], &ma, w[1] + w[3], &mb).unwrap();
            let (l, r) = (flatten(&lhs).unwrap(), flatten(&rhs).unwrap());
            let (fa, fb) = (flatten(&ma).unwrap(), flatten(&mb).unwrap());
            for i in 0..l.len() {
                // relative to the magnitude of the terms being summed
                let scale = (w[0] + w[2]) * fa.as_slice()[i].abs()
                    + (w[1] + w[3]) * fb.as_slice()[i].abs();
                prop_assert!((l.as_slice()[i] - r.as_slice()[i]).abs() <= 1e-12 * scale.max(1e-300));
            }
        }
    }
}
