//! Correlation statistics: Pearson, Fisher-z averaging and grouped alignment.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Largest |r| passed to `atanh`.
pub const R_CLAMP: f64 = 1.0 - 1e-12;

/// Product-moment correlation of two equally long series.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("correlation needs two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // a series whose spread is pure round-off counts as constant
    let tiny = |s: f64, m: f64| s <= (f64::EPSILON * m.abs().max(f64::MIN_POSITIVE)).powi(2) * n;
    if tiny(sxx, mx) || tiny(syy, my) {
        return Err(Error::ConstantSeries);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Fisher-z mean and the number of inputs clamped to `±R_CLAMP`.
pub fn fisher_mean_counted(rs: &[f64]) -> Result<(f64, usize)> {
    if rs.is_empty() {
        return Err(Error::EmptyInput("correlations"));
    }
    let mut clamped = 0;
    let mut sum = 0.0;
    for &r in rs {
        if !r.is_finite() {
            return Err(Error::NonFinite("correlation"));
        }
        let c = r.clamp(-R_CLAMP, R_CLAMP);
        clamped += (c != r) as usize;
        sum += c.atanh();
    }
    Ok(((sum / rs.len() as f64).tanh(), clamped))
}

/// `tanh(mean(atanh r))`.
pub fn fisher_mean(rs: &[f64]) -> Result<f64> {
    fisher_mean_counted(rs).map(|(r, _)| r)
}

/// `1 − part / object`.
pub fn oracle_score(part_area: f64, object_area: f64) -> Result<f64> {
    if !(object_area > 0.0 && part_area >= 0.0 && part_area <= object_area) {
        return Err(Error::BadAreas { part: part_area, object: object_area });
    }
    Ok(1.0 - part_area / object_area)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alignment {
    pub value: f64,
    pub groups_used: usize,
    /// Groups with fewer than two points or a constant series.
    pub groups_skipped: usize,
    pub clamped: usize,
}

/// Per-group Pearson between `similarities` and `scores`, combined by
/// Fisher-z averaging. `groups[i]` names the group of comparison `i`.
pub fn alignment(similarities: &[f64], scores: &[f64], groups: &[u32]) -> Result<Alignment> {
    if similarities.len() != scores.len() || scores.len() != groups.len() {
        return Err(Error::DimensionMismatch { expected: similarities.len(), got: scores.len().min(groups.len()) });
    }
    let mut by_group: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((&s, &o), &g) in similarities.iter().zip(scores).zip(groups) {
        let e = by_group.entry(g).or_default();
        e.0.push(s);
        e.1.push(o);
    }
    let mut rs = Vec::new();
    let mut skipped = 0;
    for (x, y) in by_group.values() {
        match pearson(x, y) {
            Ok(r) => rs.push(r),
            Err(_) => skipped += 1,
        }
    }
    if rs.is_empty() {
        return Err(Error::NoValidGroups);
    }
    let (value, clamped) = fisher_mean_counted(&rs)?;
    Ok(Alignment { value, groups_used: rs.len(), groups_skipped: skipped, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // textbook two-pass formula, written independently
    fn two_pass(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx: f64 = x.iter().sum::<f64>() / n;
        let my: f64 = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[2.0; 4]), Err(Error::ConstantSeries)));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        assert!((pearson(&a, &b).unwrap() - two_pass(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn fisher_examples() {
        assert!((fisher_mean(&[0.3]).unwrap() - 0.3).abs() < 1e-15);
        assert!((fisher_mean(&[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!((fisher_mean(&[0.0, 0.8]).unwrap() - 0.5).abs() < 1e-9);
        let (r, clamped) = fisher_mean_counted(&[1.0, 0.2]).unwrap();
        assert_eq!(clamped, 1);
        assert!(r.is_finite() && r < 1.0);
        assert!(fisher_mean(&[]).is_err());
    }

    #[test]
    fn oracle_score_examples() {
        assert_eq!(oracle_score(0.0, 10.0).unwrap(), 1.0);
        assert_eq!(oracle_score(10.0, 10.0).unwrap(), 0.0);
        assert!((oracle_score(53.0, 100.0).unwrap() - 0.47).abs() < 1e-12);
        assert!(matches!(oracle_score(11.0, 10.0), Err(Error::BadAreas { .. })));
        assert!(oracle_score(1.0, 0.0).is_err());
    }

    #[test]
    fn alignment_examples() {
        let s = [0.1, 0.5, 0.9, 0.2, 0.4, 0.3];
        let g = [0, 0, 0, 1, 1, 1];
        assert!((alignment(&s, &s, &g).unwrap().value - 1.0).abs() < 1e-9);
        let o = [0.3, 0.2, 0.8];
        let single = alignment(&s[..3], &o, &[5, 5, 5]).unwrap();
        assert!((single.value - pearson(&s[..3], &o).unwrap()).abs() < 1e-12);
        let r = alignment(&[0.1, 0.2, 0.3, 0.4], &[1.0, 1.0, 0.1, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!((r.groups_used, r.groups_skipped), (1, 1));
        assert!(matches!(alignment(&[0.1, 0.2], &[1.0, 1.0], &[0, 0]), Err(Error::NoValidGroups)));
    }

    #[test]
    fn shuffled_scores_give_near_zero_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut s, mut o, mut g) = (Vec::new(), Vec::new(), Vec::new());
        for grp in 0..100u32 {
            let mut scores: Vec<f64> = (0..8).map(|_| rng.random()).collect();
            let sims: Vec<f64> = scores.clone();
            scores.shuffle(&mut rng);
            s.extend(sims);
            o.extend(scores);
            g.extend([grp; 8]);
        }
        assert!(alignment(&s, &o, &g).unwrap().value.abs() < 0.15);
    }

    proptest! {
        #[test]
        fn fisher_within_extremes_and_order_free(rs in prop::collection::vec(-0.999f64..0.999, 1..20)) {
            let m = fisher_mean(&rs).unwrap();
            let lo = rs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = rs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
            let mut rev = rs.clone();
            rev.reverse();
            prop_assert!((fisher_mean(&rev).unwrap() - m).abs() < 1e-12);
        }

        #[test]
        fn pearson_affine_invariant(
            xy in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..30),
            a in 0.1f64..10.0, b in -10.0f64..10.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
            if let Ok(r) = pearson(&x, &y) {
                let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((pearson(&xs, &y).unwrap() - r).abs() < 1e-12);
            }
        }
    }
}
