//! Unit-norm embedding arithmetic and temperature-scaled similarity logits.
//!
//! Every loss and metric in the crate compares embeddings through
//! `logit(u, v) = u·v / tau`. Because embeddings live on the unit sphere the
//! dot product is the cosine similarity, so `tau * logit` is always in
//! `[-1, 1]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms within this distance of 1 are accepted as unit.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Vectors shorter than this cannot be normalized.
pub const ZERO_NORM: f64 = 1e-12;

/// Default logit temperature.
pub const DEFAULT_TAU: f64 = 0.07;

/// A point on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Wraps `values`, renormalizing if the norm is off by more than
    /// [`NORM_TOLERANCE`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("embedding"));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        let norm = norm(&values);
        if (norm - 1.0).abs() <= NORM_TOLERANCE {
            Ok(Self(values))
        } else {
            l2_normalize(&values)
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Cosine similarity to `other` (plain dot product on the sphere).
    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Logit temperature; strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidTemperature(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(DEFAULT_TAU)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(tau: f64) -> Result<Self> {
        Self::new(tau)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<EmbeddingVector> {
    if v.is_empty() {
        return Err(Error::EmptyInput("vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("vector"));
    }
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(Error::ZeroVector(n));
    }
    Ok(EmbeddingVector(v.iter().map(|x| x / n).collect()))
}

/// `u·v / tau`.
pub fn logit(u: &EmbeddingVector, v: &EmbeddingVector, tau: Temperature) -> Result<f64> {
    check_dims(u.dim(), v.dim())?;
    Ok(dot(&u.0, &v.0) / tau.0)
}

/// Matrix of [`logit`] values, entry `(i, j)` comparing `a[i]` with `b[j]`.
pub fn pairwise_logits(a: &[EmbeddingVector], b: &[EmbeddingVector], tau: Temperature) -> Result<Array2<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("pairwise_logits"));
    }
    let d = a[0].dim();
    for v in a.iter().chain(b) {
        check_dims(d, v.dim())?;
    }
    Ok(Array2::from_shape_fn((a.len(), b.len()), |(i, j)| dot(&a[i].0, &b[j].0) / tau.0))
}

/// Numerically stable `log(sum(exp(x)))`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of `xs` computed with the max-shift.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> EmbeddingVector {
        l2_normalize(v).unwrap()
    }

    #[test]
    fn three_four_five() {
        let z = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(z.as_slice()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(z.as_slice()[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn unit_vector_unchanged() {
        let mut v = vec![0.0; 7];
        v[6] = 1.0;
        assert_eq!(l2_normalize(&v).unwrap().as_slice(), v.as_slice());
    }

    #[test]
    fn random_vector_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = l2_normalize(&v).unwrap();
        // Recompute the norm independently with an explicit loop.
        let mut acc = 0.0;
        for x in z.as_slice() {
            acc += x * x;
        }
        assert!((acc.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_rejected() {
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector(_))));
        assert!(matches!(l2_normalize(&[1e-13, 0.0]), Err(Error::ZeroVector(_))));
        assert!(matches!(l2_normalize(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn new_renormalizes_off_unit_input() {
        let z = EmbeddingVector::new(vec![0.0, 2.0]).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 1.0]);
        assert!(EmbeddingVector::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn logit_examples() {
        let tau = Temperature::new(0.07).unwrap();
        let u = unit(&[1.0, 0.0]);
        let w = unit(&[0.0, 1.0]);
        let neg = unit(&[-1.0, 0.0]);
        assert_abs_diff_eq!(logit(&u, &u, tau).unwrap(), 14.285714285714286, epsilon = 1e-12);
        assert_abs_diff_eq!(logit(&u, &w, tau).unwrap(), 0.0);
        assert_abs_diff_eq!(logit(&u, &neg, tau).unwrap(), -14.285714285714286, epsilon = 1e-12);
        let three = unit(&[1.0, 0.0, 0.0]);
        assert!(matches!(logit(&u, &three, tau), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::INFINITY).is_err());
    }

    #[test]
    fn pairwise_logits_examples() {
        let tau = Temperature::new(1.0).unwrap();
        let basis = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let m = pairwise_logits(&basis, &basis, tau).unwrap();
        assert_eq!(m, ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]));

        let a = vec![unit(&[0.3, -0.2])];
        let b = vec![unit(&[0.5, 0.9])];
        let m = pairwise_logits(&a, &b, tau).unwrap();
        assert_eq!(m.dim(), (1, 1));
        assert_eq!(m[[0, 0]], logit(&a[0], &b[0], tau).unwrap());

        assert!(pairwise_logits(&[], &b, tau).is_err());
    }

    #[test]
    fn pairwise_logits_matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tau = Temperature::new(0.07).unwrap();
        let mut draw = || -> EmbeddingVector { unit(&(0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()) };
        let a: Vec<_> = (0..4).map(|_| draw()).collect();
        let b: Vec<_> = (0..3).map(|_| draw()).collect();
        let m = pairwise_logits(&a, &b, tau).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for c in 0..5 {
                    acc += a[i].as_slice()[c] * b[j].as_slice()[c];
                }
                assert_abs_diff_eq!(m[[i, j]], acc / 0.07, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn stable_primitives() {
        assert_abs_diff_eq!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(softplus(800.0), 800.0);
        assert_abs_diff_eq!(sigmoid(-800.0), 0.0);
        let s = softmax(&[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(s.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    fn raw_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 6).prop_filter("non-zero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn logit_is_symmetric(a in raw_vec(), b in raw_vec(), tau in 0.01f64..2.0) {
            let tau = Temperature::new(tau).unwrap();
            let (u, v) = (unit(&a), unit(&b));
            prop_assert_eq!(logit(&u, &v, tau).unwrap(), logit(&v, &u, tau).unwrap());
            let scaled = tau.value() * logit(&u, &v, tau).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&scaled));
        }

        #[test]
        fn normalization_ignores_positive_scale(a in raw_vec(), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            let (u, v) = (unit(&a), unit(&scaled));
            for (x, y) in u.as_slice().iter().zip(v.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
