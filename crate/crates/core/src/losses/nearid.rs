use crate::error::{Error, Result};
use crate::geometry::{log_sum_exp, sigmoid, softmax, softplus, Temperature};

use super::{LossConfig, LossDiagnostics, LossOutput, OracleLabels, Slot, TupleBatch};

/// Weight of each `(row, column)` entry when a loss averages over anchors per
/// column index and then over the column indices that have any entry.
fn column_weights(mask: &[Vec<bool>], width: usize) -> Vec<Vec<f64>> {
    let counts: Vec<usize> = (0..width).map(|c| mask.iter().filter(|r| r[c]).count()).collect();
    let active = counts.iter().filter(|&&c| c > 0).count();
    mask.iter()
        .map(|row| (0..width).map(|c| if row[c] { 1.0 / (active as f64 * counts[c] as f64) } else { 0.0 }).collect())
        .collect()
}

/// Discrimination term: per positive index, softmax cross-entropy of the
/// anchor against the global positive pool plus its own distractors, averaged
/// over anchors and then over positive indices. The anchor's other positives
/// stay in the denominator.
pub fn disc_loss(batch: &TupleBatch, cfg: &LossConfig) -> Result<LossOutput> {
    let tau = cfg.tau;
    let pool = batch.pool();
    let mask: Vec<Vec<bool>> =
        (0..batch.n()).map(|i| (0..batch.p()).map(|p| batch.pos_valid[[i, p]]).collect()).collect();
    if let Some(row) = mask.iter().position(|r| !r.iter().any(|&v| v)) {
        return Err(Error::NoValidPositive { row });
    }
    let weights = column_weights(&mask, batch.p());

    let mut out = LossOutput::zero(batch);
    #[allow(clippy::needless_range_loop)]
    for i in 0..batch.n() {
        let anchor = Slot::Anchor(i);
        let candidates: Vec<Slot> = pool.iter().copied().chain(batch.own_distractors(i)).collect();
        let logits: Vec<f64> = candidates.iter().map(|&c| batch.logit(anchor, c, tau)).collect();
        let lse = log_sum_exp(&logits);
        let probs = softmax(&logits);
        let row_weight: f64 = weights[i].iter().sum();

        let mut coeff: Vec<f64> = probs.iter().map(|p| row_weight * p).collect();
        for (p, &w) in weights[i].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let target = Slot::Positive(i, p);
            let idx = candidates.iter().position(|&c| c == target).expect("own positive in pool");
            out.value += w * (lse - logits[idx]);
            coeff[idx] -= w;
        }
        for (&c, &g) in candidates.iter().zip(&coeff) {
            out.grads.push_logit(batch, anchor, c, g, tau);
        }
    }
    out.components.disc = out.value;
    Ok(out)
}

/// `log sum exp` of the anchor's logits against its batch-negative pool: a
/// smooth maximum over other identities' positives.
pub fn batch_negative_lse(batch: &TupleBatch, anchor_index: usize, cfg: &LossConfig) -> Result<f64> {
    let negatives = batch.negative_pool(anchor_index);
    if negatives.is_empty() {
        return Err(Error::EmptyNegativePool { row: anchor_index });
    }
    let logits: Vec<f64> = negatives.iter().map(|&g| batch.logit(Slot::Anchor(anchor_index), g, cfg.tau)).collect();
    Ok(log_sum_exp(&logits))
}

/// Softplus form of one ranking term: `log(1 + exp(lse - distractor_logit))`.
pub fn rank_term_softplus(negative_logits: &[f64], distractor_logit: f64) -> f64 {
    softplus(log_sum_exp(negative_logits) - distractor_logit)
}

/// Cross-entropy form of one ranking term: minus the log-probability of the
/// distractor in a softmax over itself and the batch negatives.
pub fn rank_term_cross_entropy(negative_logits: &[f64], distractor_logit: f64) -> f64 {
    let mut all = Vec::with_capacity(negative_logits.len() + 1);
    all.push(distractor_logit);
    all.extend_from_slice(negative_logits);
    log_sum_exp(&all) - distractor_logit
}

struct RankRow {
    negatives: Vec<Slot>,
    negative_logits: Vec<f64>,
}

/// Per-row negative pools; `None` for rows the ranking term skips.
fn rank_rows(batch: &TupleBatch, tau: Temperature) -> Vec<Option<RankRow>> {
    (0..batch.n())
        .map(|i| {
            let negatives = batch.negative_pool(i);
            if negatives.is_empty() || batch.own_distractors(i).is_empty() {
                return None;
            }
            let negative_logits = negatives.iter().map(|&g| batch.logit(Slot::Anchor(i), g, tau)).collect();
            Some(RankRow { negatives, negative_logits })
        })
        .collect()
}

fn rank_weights(batch: &TupleBatch, rows: &[Option<RankRow>]) -> Vec<Vec<f64>> {
    let mask: Vec<Vec<bool>> = (0..batch.n())
        .map(|i| (0..batch.k()).map(|k| rows[i].is_some() && batch.dis_valid[[i, k]]).collect())
        .collect();
    column_weights(&mask, batch.k())
}

/// Ranking regulariser: for each valid distractor, a softplus penalty on the
/// batch-negative LSE exceeding the distractor logit; averaged over anchors
/// per distractor index, then over distractor indices. Rows without
/// distractors or without batch negatives contribute nothing and are counted
/// in `diagnostics.skipped_rank_rows`.
pub fn rank_loss(batch: &TupleBatch, cfg: &LossConfig) -> Result<LossOutput> {
    let tau = cfg.tau;
    let rows = rank_rows(batch, tau);
    let weights = rank_weights(batch, &rows);
    let mut out = LossOutput::zero(batch);
    out.diagnostics.skipped_rank_rows = rows.iter().filter(|r| r.is_none()).count();

    for (i, row) in rows.iter().enumerate() {
        let Some(row) = row else { continue };
        let anchor = Slot::Anchor(i);
        let lse = log_sum_exp(&row.negative_logits);
        let mut d_lse = 0.0;
        for (k, &w) in weights[i].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let r = Slot::Distractor(i, k);
            let x = lse - batch.logit(anchor, r, tau);
            out.value += w * softplus(x);
            let g = w * sigmoid(x);
            d_lse += g;
            out.grads.push_logit(batch, anchor, r, -g, tau);
        }
        for (&g, p) in row.negatives.iter().zip(softmax(&row.negative_logits)) {
            out.grads.push_logit(batch, anchor, g, d_lse * p, tau);
        }
    }
    out.components.rank = out.value;
    Ok(out)
}

/// Value of [`rank_loss`] computed through the cross-entropy form, with the
/// same masking and averaging.
pub fn rank_loss_cross_entropy(batch: &TupleBatch, cfg: &LossConfig) -> Result<f64> {
    let rows = rank_rows(batch, cfg.tau);
    let weights = rank_weights(batch, &rows);
    let mut value = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let Some(row) = row else { continue };
        for (k, &w) in weights[i].iter().enumerate() {
            if w > 0.0 {
                let lr = batch.logit(Slot::Anchor(i), Slot::Distractor(i, k), cfg.tau);
                value += w * rank_term_cross_entropy(&row.negative_logits, lr);
            }
        }
    }
    Ok(value)
}

/// Positive cohesion: mean cosine distance of each valid positive to the
/// normalized sum of its row's positives, averaged over rows. Rows with fewer
/// than two valid positives contribute zero.
pub fn cohesion_loss(batch: &TupleBatch) -> Result<LossOutput> {
    let mut out = LossOutput::zero(batch);
    let n = batch.n() as f64;
    for i in 0..batch.n() {
        let slots = batch.own_positives(i);
        if slots.len() < 2 {
            out.diagnostics.skipped_cohesion_rows += 1;
            continue;
        }
        let count = slots.len() as f64;
        let mut sum = ndarray::Array1::<f64>::zeros(batch.dim());
        for &s in &slots {
            sum += &batch.vector(s);
        }
        let sum_norm = sum.dot(&sum).sqrt();
        if sum_norm < crate::geometry::ZERO_NORM {
            return Err(Error::DegeneratePrototype { row: i });
        }
        let proto = &sum / sum_norm;

        // L_row = (1/P) sum_p (1 - cos(g_p, proto)); the batch value divides by N.
        let scale = 1.0 / (count * n);
        let mut d_proto = ndarray::Array1::<f64>::zeros(batch.dim());
        for &s in &slots {
            let g = batch.vector(s);
            let g_norm = g.dot(&g).sqrt();
            let gp = g.dot(&proto);
            let cos = gp / g_norm;
            out.value += scale * (1.0 - cos);
            // d cos / d g (proto held fixed)
            let mut direct = &proto / g_norm;
            direct.scaled_add(-gp / g_norm.powi(3), &g);
            out.grads.get_mut(s).scaled_add(-scale, &direct);
            d_proto.scaled_add(-scale / g_norm, &g);
        }
        // Through proto = sum / |sum|: d/dsum = (I - proto proto^T) d_proto / |sum|.
        let radial = proto.dot(&d_proto);
        let mut d_sum = d_proto;
        d_sum.scaled_add(-radial, &proto);
        d_sum /= sum_norm;
        for &s in &slots {
            out.grads.get_mut(s).scaled_add(1.0, &d_sum);
        }
    }
    out.components.cohesion = out.value;
    Ok(out)
}

/// `disc + alpha * rank + beta * cohesion`; zero-weight terms are skipped
/// and logged as 0. Oracle labels are accepted for
/// interface symmetry with the ablations and ignored.
pub fn nearid_loss(batch: &TupleBatch, cfg: &LossConfig, _oracle: Option<&OracleLabels>) -> Result<LossOutput> {
    cfg.validate()?;
    let mut out = disc_loss(batch, cfg)?;
    if cfg.alpha > 0.0 {
        let rank = rank_loss(batch, cfg)?;
        out.value += cfg.alpha * rank.value;
        out.grads.add_scaled(cfg.alpha, &rank.grads);
        out.components.rank = rank.value;
        merge_diag(&mut out.diagnostics, rank.diagnostics);
    }
    if cfg.beta > 0.0 {
        let coh = cohesion_loss(batch)?;
        out.value += cfg.beta * coh.value;
        out.grads.add_scaled(cfg.beta, &coh.grads);
        out.components.cohesion = coh.value;
        merge_diag(&mut out.diagnostics, coh.diagnostics);
    }
    Ok(out)
}

fn merge_diag(into: &mut LossDiagnostics, from: LossDiagnostics) {
    into.merge(from);
}
