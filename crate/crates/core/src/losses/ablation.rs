//! Baseline objectives used to isolate what each ingredient contributes.

use crate::error::{Error, Result};
use crate::geometry::{log_sum_exp, sigmoid, softmax, softplus};

use super::nearid::rank_loss;
use super::{LossConfig, LossOutput, LossVariant, OracleLabels, Slot, TupleBatch};

/// Pairs closer than this in severity are treated as ties.
const SEVERITY_TIE: f64 = 1e-9;

pub(super) fn ablation_loss(
    variant: LossVariant,
    batch: &TupleBatch,
    cfg: &LossConfig,
    oracle: Option<&OracleLabels>,
) -> Result<LossOutput> {
    cfg.validate()?;
    if variant.needs_oracle() && oracle.is_none() {
        return Err(Error::MissingOracle);
    }
    let mut out = match variant {
        LossVariant::InfonceSym | LossVariant::InfonceOracle => infonce_loss(batch, cfg, false)?,
        LossVariant::InfonceRneg | LossVariant::InfonceRnegOracle => infonce_loss(batch, cfg, true)?,
        LossVariant::SiglipRank => return siglip_rank_loss(batch, cfg),
        LossVariant::CircleRank => return circle_rank_loss(batch, cfg),
        LossVariant::Nearid => unreachable!("handled by nearid_loss"),
    };
    if let Some(oracle) = oracle.filter(|_| variant.needs_oracle()) {
        let rank = ranknet_loss(batch, cfg, oracle)?;
        out.value += cfg.alpha * rank.value;
        out.grads.add_scaled(cfg.alpha, &rank.grads);
        out.components.rank = rank.value;
        out.diagnostics.skipped_rank_rows += rank.diagnostics.skipped_rank_rows;
    }
    Ok(out)
}

/// Symmetric InfoNCE over the first valid positive of each row. Anchor-to-pool
/// and pool-to-anchor cross-entropies are averaged. With
/// `append_distractors`, each anchor's distractors join its softmax
/// denominator.
pub fn infonce_loss(batch: &TupleBatch, cfg: &LossConfig, append_distractors: bool) -> Result<LossOutput> {
    let tau = cfg.tau;
    let n = batch.n();
    let chosen: Vec<Slot> = (0..n)
        .map(|i| batch.own_positives(i).first().copied().ok_or(Error::NoValidPositive { row: i }))
        .collect::<Result<_>>()?;
    let mut out = LossOutput::zero(batch);
    let half = 0.5 / n as f64;

    // Anchor -> pool.
    for i in 0..n {
        let anchor = Slot::Anchor(i);
        let mut candidates = chosen.clone();
        if append_distractors {
            candidates.extend(batch.own_distractors(i));
        }
        let logits: Vec<f64> = candidates.iter().map(|&c| batch.logit(anchor, c, tau)).collect();
        out.value += half * (log_sum_exp(&logits) - logits[i]);
        for (j, p) in softmax(&logits).into_iter().enumerate() {
            let g = half * (p - if j == i { 1.0 } else { 0.0 });
            out.grads.push_logit(batch, anchor, candidates[j], g, tau);
        }
    }
    // Pool -> anchor.
    for (i, &g_i) in chosen.iter().enumerate() {
        let logits: Vec<f64> = (0..n).map(|j| batch.logit(g_i, Slot::Anchor(j), tau)).collect();
        out.value += half * (log_sum_exp(&logits) - logits[i]);
        for (j, p) in softmax(&logits).into_iter().enumerate() {
            let g = half * (p - if j == i { 1.0 } else { 0.0 });
            out.grads.push_logit(batch, g_i, Slot::Anchor(j), g, tau);
        }
    }
    out.components.disc = out.value;
    Ok(out)
}

/// RankNet on oracle-ordered distractor pairs of the same anchor: for every
/// pair with `severity_hi > severity_lo`, `-log sigmoid(l_hi - l_lo - m)`.
/// Averaged within each row, then over rows that have at least one pair.
pub fn ranknet_loss(batch: &TupleBatch, cfg: &LossConfig, oracle: &OracleLabels) -> Result<LossOutput> {
    if oracle.severity.dim() != batch.dis_valid.dim() {
        return Err(Error::DimensionMismatch { expected: batch.dis_valid.len(), got: oracle.severity.len() });
    }
    let tau = cfg.tau;
    let mut out = LossOutput::zero(batch);
    let mut rows = Vec::new();
    for i in 0..batch.n() {
        let dis = batch.own_distractors(i);
        let sev = |s: Slot| match s {
            Slot::Distractor(r, k) => oracle.severity[[r, k]],
            _ => unreachable!(),
        };
        let pairs: Vec<(Slot, Slot)> = dis
            .iter()
            .flat_map(|&hi| dis.iter().map(move |&lo| (hi, lo)))
            .filter(|&(hi, lo)| sev(hi) > sev(lo) + SEVERITY_TIE)
            .collect();
        if pairs.is_empty() {
            out.diagnostics.skipped_rank_rows += 1;
        } else {
            rows.push((i, pairs));
        }
    }
    if rows.is_empty() {
        return Ok(out);
    }
    let row_weight = 1.0 / rows.len() as f64;
    for (i, pairs) in rows {
        let anchor = Slot::Anchor(i);
        let w = row_weight / pairs.len() as f64;
        for (hi, lo) in pairs {
            let x = batch.logit(anchor, hi, tau) - batch.logit(anchor, lo, tau) - cfg.margin_m;
            out.value += w * softplus(-x);
            let g = -w * sigmoid(-x);
            out.grads.push_logit(batch, anchor, hi, g, tau);
            out.grads.push_logit(batch, anchor, lo, -g, tau);
        }
    }
    out.components.rank = out.value;
    Ok(out)
}

/// Pairwise sigmoid BCE over the global pool (own positives labelled 1, other
/// pool entries and the anchor's distractors labelled 0), summed per anchor
/// and averaged over anchors; plus `alpha` times the log-sigmoid ranking of
/// distractors against the batch-negative LSE.
pub fn siglip_rank_loss(batch: &TupleBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let tau = cfg.tau;
    let pool = batch.pool();
    let mut out = LossOutput::zero(batch);
    let inv_n = 1.0 / batch.n() as f64;
    for i in 0..batch.n() {
        let anchor = Slot::Anchor(i);
        let labelled = pool
            .iter()
            .map(|&g| (g, matches!(g, Slot::Positive(r, _) if r == i)))
            .chain(batch.own_distractors(i).into_iter().map(|r| (r, false)));
        for (c, positive) in labelled {
            let z = batch.logit(anchor, c, tau) + cfg.siglip_bias;
            let y = if positive { 1.0 } else { 0.0 };
            out.value += inv_n * (softplus(z) - y * z);
            out.grads.push_logit(batch, anchor, c, inv_n * (sigmoid(z) - y), tau);
        }
    }
    out.components.disc = out.value;
    // -log sigmoid(l_r - LSE) == softplus(LSE - l_r): the same ranking term.
    let rank = rank_loss(batch, cfg)?;
    out.value += cfg.alpha * rank.value;
    out.grads.add_scaled(cfg.alpha, &rank.grads);
    out.components.rank = rank.value;
    out.diagnostics = rank.diagnostics;
    Ok(out)
}

/// Circle loss on cosine similarities with scale `1/tau`, distractors pooled
/// with batch negatives, plus `alpha` times the hinge
/// `mean_k [max_b l_b - l_r_k + m]_+`. The adaptive weights are differentiated
/// through, so the returned gradient is the exact gradient of the value.
pub fn circle_rank_loss(batch: &TupleBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let tau = cfg.tau;
    let gamma = 1.0 / tau.value();
    let m = cfg.circle_relaxation;
    let mut out = LossOutput::zero(batch);

    let rows: Vec<(usize, Vec<Slot>, Vec<Slot>)> = (0..batch.n())
        .filter_map(|i| {
            let pos = batch.own_positives(i);
            let mut neg = batch.negative_pool(i);
            neg.extend(batch.own_distractors(i));
            (!pos.is_empty() && !neg.is_empty()).then_some((i, pos, neg))
        })
        .collect();
    if !rows.is_empty() {
        let w = 1.0 / rows.len() as f64;
        for (i, pos, neg) in &rows {
            let anchor = Slot::Anchor(*i);
            let sp: Vec<f64> = pos.iter().map(|&g| batch.sim(anchor, g)).collect();
            let sn: Vec<f64> = neg.iter().map(|&g| batch.sim(anchor, g)).collect();
            let lp: Vec<f64> = sp.iter().map(|&s| -gamma * (1.0 + m - s).max(0.0) * (s - (1.0 - m))).collect();
            let ln: Vec<f64> = sn.iter().map(|&s| gamma * (s + m).max(0.0) * (s - m)).collect();
            let x = log_sum_exp(&lp) + log_sum_exp(&ln);
            out.value += w * softplus(x);
            let dx = w * sigmoid(x);
            for ((&g, &s), p) in pos.iter().zip(&sp).zip(softmax(&lp)) {
                let dl_ds = if 1.0 + m - s > 0.0 { -2.0 * gamma * (1.0 - s) } else { 0.0 };
                out.grads.push_sim(batch, anchor, g, dx * p * dl_ds);
            }
            for ((&g, &s), p) in neg.iter().zip(&sn).zip(softmax(&ln)) {
                let dl_ds = if s + m > 0.0 { 2.0 * gamma * s } else { 0.0 };
                out.grads.push_sim(batch, anchor, g, dx * p * dl_ds);
            }
        }
    }
    out.components.disc = out.value;

    // Hinge ranking against the hardest batch negative.
    let mut hinge_rows = Vec::new();
    for i in 0..batch.n() {
        let negatives = batch.negative_pool(i);
        let dis = batch.own_distractors(i);
        if negatives.is_empty() || dis.is_empty() {
            out.diagnostics.skipped_rank_rows += 1;
            continue;
        }
        let anchor = Slot::Anchor(i);
        let (hardest, l_max) = negatives
            .iter()
            .map(|&g| (g, batch.logit(anchor, g, tau)))
            .fold((negatives[0], f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        hinge_rows.push((anchor, hardest, l_max, dis));
    }
    let mut hinge = 0.0;
    if !hinge_rows.is_empty() {
        let row_w = 1.0 / hinge_rows.len() as f64;
        for (anchor, hardest, l_max, dis) in hinge_rows {
            let w = row_w / dis.len() as f64;
            for r in dis {
                let h = l_max - batch.logit(anchor, r, tau) + cfg.margin_m;
                if h > 0.0 {
                    hinge += w * h;
                    let g = cfg.alpha * w;
                    out.grads.push_logit(batch, anchor, hardest, g, tau);
                    out.grads.push_logit(batch, anchor, r, -g, tau);
                }
            }
        }
    }
    out.value += cfg.alpha * hinge;
    out.components.rank = hinge;
    Ok(out)
}

/// Single hinge term `[l_b_max - l_r + m]_+`.
#[cfg(test)]
fn hinge_term(l_b_max: f64, l_r: f64, m: f64) -> f64 {
    (l_b_max - l_r + m).max(0.0)
}
