//! Directed discriminability margins and their SSR / PA summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    IToJ,
    JToI,
}

/// One directed margin trial `δ = s(p_i, p_j) − s(p_b, n_b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub identity_id: u32,
    pub pair: (u8, u8),
    pub direction: Direction,
    pub delta: f64,
    pub source_id: Option<u8>,
}

impl MarginRecord {
    pub fn success(&self) -> bool {
        self.delta > 0.0
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Margins for one identity. `positives[b]` is view `b`; `distractors[b]` is
/// its matched-background distractor, if any. Each unordered view pair gives
/// up to two records, one anchored at each end that has a distractor. Fewer
/// than two views yield no records.
pub fn directed_margins<V: AsRef<[f64]>>(
    identity_id: u32,
    positives: &[V],
    distractors: &[Option<V>],
    source_id: Option<u8>,
) -> Vec<MarginRecord> {
    let mut out = Vec::new();
    let n = positives.len();
    if n < 2 {
        return out;
    }
    for i in 0..n {
        for j in i + 1..n {
            let s_pos = cosine(positives[i].as_ref(), positives[j].as_ref());
            for (b, direction) in [(i, Direction::IToJ), (j, Direction::JToI)] {
                if let Some(Some(d)) = distractors.get(b) {
                    out.push(MarginRecord {
                        identity_id,
                        pair: (i as u8, j as u8),
                        direction,
                        delta: s_pos - cosine(positives[b].as_ref(), d.as_ref()),
                        source_id,
                    });
                }
            }
        }
    }
    out
}

/// `(SSR, PA)`: the fraction of identities whose margins are all strictly
/// positive, and the fraction of all margins that are.
pub fn ssr_pa(records: &[MarginRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut per_identity: BTreeMap<u32, bool> = BTreeMap::new();
    let mut wins = 0usize;
    for r in records {
        let ok = r.success();
        wins += ok as usize;
        *per_identity.entry(r.identity_id).or_insert(true) &= ok;
    }
    let ssr = per_identity.values().filter(|&&ok| ok).count() as f64 / per_identity.len() as f64;
    Ok((ssr, wins as f64 / records.len() as f64))
}

/// Support-weighted means of per-source `(ssr, pa, n)`.
pub fn pool_sources(per_source: &[(f64, f64, usize)]) -> Result<(f64, f64)> {
    let total: usize = per_source.iter().map(|s| s.2).sum();
    if per_source.is_empty() || total == 0 {
        return Err(Error::EmptyInput("per-source results"));
    }
    let w = |f: fn(&(f64, f64, usize)) -> f64| per_source.iter().map(|s| f(s) * s.2 as f64).sum::<f64>() / total as f64;
    Ok((w(|s| s.0), w(|s| s.1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: u32, delta: f64) -> MarginRecord {
        MarginRecord { identity_id: id, pair: (0, 1), direction: Direction::IToJ, delta, source_id: None }
    }

    #[test]
    fn margin_arithmetic() {
        // p0·p1 = 0.9 and p0·n0 = 0.5 with unit vectors
        let p0 = vec![1.0, 0.0, 0.0];
        let p1 = vec![0.9, (1.0f64 - 0.81).sqrt(), 0.0];
        let n0 = vec![0.5, 0.0, (0.75f64).sqrt()];
        let r = directed_margins(7, &[p0, p1], &[Some(n0), None], None);
        assert_eq!(r.len(), 1);
        assert!((r[0].delta - 0.4).abs() < 1e-12);
        assert_eq!(r[0].direction, Direction::IToJ);
    }

    #[test]
    fn distractor_equal_to_positive_fails() {
        let p = [vec![1.0, 0.0], vec![0.6, 0.8]];
        let r = directed_margins(0, &p, &[Some(p[0].clone()), Some(p[1].clone())], None);
        assert!(r.iter().all(|m| !m.success()));
        assert!((r[0].delta - (0.6 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn three_views_give_six_records() {
        let p = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let d: Vec<Option<Vec<f64>>> = p.iter().map(|v| Some(v.iter().map(|x| x + 0.1).collect())).collect();
        assert_eq!(directed_margins(1, &p, &d, Some(2)).len(), 6);
        assert!(directed_margins(1, &p[..1], &d[..1], None).is_empty());
    }

    #[test]
    fn zero_delta_is_failure() {
        assert_eq!(ssr_pa(&[rec(0, 0.0)]).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn ssr_pa_examples() {
        assert_eq!(ssr_pa(&[rec(0, 0.1), rec(1, 0.2)]).unwrap(), (1.0, 1.0));
        let r = [rec(0, 0.1), rec(0, 0.2), rec(1, 0.3), rec(1, -0.1)];
        assert_eq!(ssr_pa(&r).unwrap(), (0.5, 0.75));
        assert!(matches!(ssr_pa(&[]), Err(Error::EmptyRecords)));
    }

    #[test]
    fn pooling() {
        assert_eq!(pool_sources(&[(0.7, 0.8, 5)]).unwrap(), (0.7, 0.8));
        let (s, _) = pool_sources(&[(0.9, 1.0, 100), (0.5, 1.0, 300)]).unwrap();
        assert!((s - 0.6).abs() < 1e-12);
        let (s, p) = pool_sources(&[(0.2, 0.4, 3), (0.6, 0.8, 3)]).unwrap();
        assert!((s - 0.4).abs() < 1e-12 && (p - 0.6).abs() < 1e-12);
        assert!(pool_sources(&[]).is_err());
    }

    #[test]
    fn rescaling_raw_embeddings_leaves_margins_unchanged() {
        let p = [vec![0.3, -1.2, 0.5], vec![1.0, 0.1, -0.4]];
        let d = [Some(vec![0.2, 0.9, 0.1]), Some(vec![-0.3, 0.3, 0.7])];
        let a = directed_margins(0, &p, &d, None);
        let ps: Vec<Vec<f64>> = p.iter().map(|v| v.iter().map(|x| x * 4.5).collect()).collect();
        let ds: Vec<Option<Vec<f64>>> =
            d.iter().map(|v| v.as_ref().map(|v| v.iter().map(|x| x * 0.2).collect())).collect();
        let b = directed_margins(0, &ps, &ds, None);
        for (x, y) in a.iter().zip(&b) {
            assert!((x.delta - y.delta).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ssr_never_exceeds_pa_with_equal_counts(
            deltas in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..30)
        ) {
            let recs: Vec<MarginRecord> = deltas
                .iter()
                .enumerate()
                .flat_map(|(i, ds)| ds.iter().map(move |&d| rec(i as u32, d)))
                .collect();
            let (ssr, pa) = ssr_pa(&recs).unwrap();
            prop_assert!(ssr <= pa + 1e-15);
        }
    }
}
