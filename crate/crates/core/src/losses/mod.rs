//! Contrastive objectives over anchor / positive / distractor tuples.
//!
//! A [`TupleBatch`] holds `N` anchors, up to `P` positive views per anchor and
//! up to `K` near-identity distractors per anchor, with validity masks for
//! the padded slots. The global positive pool is every valid positive in the
//! batch; an anchor's batch-negative pool is that pool minus its own
//! positives. Distractors never enter the pool.
//!
//! Each loss returns its value together with the analytic gradient with
//! respect to every embedding slot. Invalid slots are excluded from all sums,
//! so their gradient is exactly zero.

mod ablation;
mod gradcheck;
mod nearid;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView1, ArrayViewMut1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, Temperature};

pub use ablation::{circle_rank_loss, infonce_loss, ranknet_loss, siglip_rank_loss};
pub use gradcheck::{grad_check, max_relative_error, relative_error, GradCheckReport, FD_STEP, RELATIVE_FLOOR};
pub use nearid::{
    batch_negative_lse, cohesion_loss, disc_loss, nearid_loss, rank_loss, rank_loss_cross_entropy,
    rank_term_cross_entropy, rank_term_softplus,
};

/// Address of one embedding in a [`TupleBatch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Anchor(usize),
    Positive(usize, usize),
    Distractor(usize, usize),
}

/// Embeddings of one tuple, used to assemble a batch.
#[derive(Debug, Clone, Default)]
pub struct TupleRow {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub distractors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TupleBatch {
    /// `N x d`
    pub anchors: Array2<f64>,
    /// `N x P x d`
    pub positives: Array3<f64>,
    /// `N x P`
    pub pos_valid: Array2<bool>,
    /// `N x K x d`
    pub distractors: Array3<f64>,
    /// `N x K`
    pub dis_valid: Array2<bool>,
}

impl TupleBatch {
    pub fn new(
        anchors: Array2<f64>,
        positives: Array3<f64>,
        pos_valid: Array2<bool>,
        distractors: Array3<f64>,
        dis_valid: Array2<bool>,
    ) -> Result<Self> {
        let (n, d) = anchors.dim();
        if n == 0 {
            return Err(Error::EmptyInput("tuple batch"));
        }
        let (pn, p, pd) = positives.dim();
        let (dn, k, dd) = distractors.dim();
        for (expected, got) in [(n, pn), (n, dn), (d, pd), (d, dd)] {
            if expected != got {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        if pos_valid.dim() != (n, p) {
            return Err(Error::DimensionMismatch { expected: n * p, got: pos_valid.len() });
        }
        if dis_valid.dim() != (n, k) {
            return Err(Error::DimensionMismatch { expected: n * k, got: dis_valid.len() });
        }
        Ok(Self { anchors, positives, pos_valid, distractors, dis_valid })
    }

    /// Pads ragged rows into a masked batch.
    pub fn from_rows(rows: &[TupleRow]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyInput("tuple batch"))?;
        let d = first.anchor.len();
        let n = rows.len();
        let p = rows.iter().map(|r| r.positives.len()).max().unwrap_or(0);
        let k = rows.iter().map(|r| r.distractors.len()).max().unwrap_or(0);
        let mut anchors = Array2::zeros((n, d));
        let mut positives = Array3::zeros((n, p, d));
        let mut pos_valid = Array2::from_elem((n, p), false);
        let mut distractors = Array3::zeros((n, k, d));
        let mut dis_valid = Array2::from_elem((n, k), false);
        let check = |v: &[f64]| {
            if v.len() == d {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected: d, got: v.len() })
            }
        };
        for (i, row) in rows.iter().enumerate() {
            check(&row.anchor)?;
            anchors.row_mut(i).assign(&ArrayView1::from(&row.anchor[..]));
            for (q, g) in row.positives.iter().enumerate() {
                check(g)?;
                positives.slice_mut(s![i, q, ..]).assign(&ArrayView1::from(&g[..]));
                pos_valid[[i, q]] = true;
            }
            for (q, r) in row.distractors.iter().enumerate() {
                check(r)?;
                distractors.slice_mut(s![i, q, ..]).assign(&ArrayView1::from(&r[..]));
                dis_valid[[i, q]] = true;
            }
        }
        Self::new(anchors, positives, pos_valid, distractors, dis_valid)
    }

    pub fn n(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn p(&self) -> usize {
        self.pos_valid.ncols()
    }

    pub fn k(&self) -> usize {
        self.dis_valid.ncols()
    }

    pub fn dim(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn vector(&self, slot: Slot) -> ArrayView1<'_, f64> {
        match slot {
            Slot::Anchor(i) => self.anchors.row(i),
            Slot::Positive(i, p) => self.positives.slice(s![i, p, ..]),
            Slot::Distractor(i, k) => self.distractors.slice(s![i, k, ..]),
        }
    }

    pub fn vector_mut(&mut self, slot: Slot) -> ArrayViewMut1<'_, f64> {
        match slot {
            Slot::Anchor(i) => self.anchors.row_mut(i),
            Slot::Positive(i, p) => self.positives.slice_mut(s![i, p, ..]),
            Slot::Distractor(i, k) => self.distractors.slice_mut(s![i, k, ..]),
        }
    }

    pub fn is_valid(&self, slot: Slot) -> bool {
        match slot {
            Slot::Anchor(_) => true,
            Slot::Positive(i, p) => self.pos_valid[[i, p]],
            Slot::Distractor(i, k) => self.dis_valid[[i, k]],
        }
    }

    /// Every slot of the batch, valid or not, in a fixed order.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::with_capacity(self.n() * (1 + self.p() + self.k()));
        for i in 0..self.n() {
            out.push(Slot::Anchor(i));
            out.extend((0..self.p()).map(|p| Slot::Positive(i, p)));
            out.extend((0..self.k()).map(|k| Slot::Distractor(i, k)));
        }
        out
    }

    /// Valid positives of `row`.
    pub fn own_positives(&self, row: usize) -> Vec<Slot> {
        (0..self.p()).filter(|&p| self.pos_valid[[row, p]]).map(|p| Slot::Positive(row, p)).collect()
    }

    /// Valid distractors of `row`.
    pub fn own_distractors(&self, row: usize) -> Vec<Slot> {
        (0..self.k()).filter(|&k| self.dis_valid[[row, k]]).map(|k| Slot::Distractor(row, k)).collect()
    }

    /// The global positive pool: every valid positive, row-major.
    pub fn pool(&self) -> Vec<Slot> {
        (0..self.n()).flat_map(|i| self.own_positives(i)).collect()
    }

    /// Pool entries that do not belong to `row`.
    pub fn negative_pool(&self, row: usize) -> Vec<Slot> {
        self.pool().into_iter().filter(|s| !matches!(s, Slot::Positive(i, _) if *i == row)).collect()
    }

    /// `u·v / tau` between two slots.
    pub fn logit(&self, u: Slot, v: Slot, tau: Temperature) -> f64 {
        self.sim(u, v) / tau.value()
    }

    /// Raw dot product between two slots.
    pub fn sim(&self, u: Slot, v: Slot) -> f64 {
        let (a, b) = (self.vector(u), self.vector(v));
        match (a.as_slice(), b.as_slice()) {
            (Some(a), Some(b)) => dot(a, b),
            _ => a.dot(&b),
        }
    }
}

/// Gradient with respect to each embedding slot; same layout as the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub anchors: Array2<f64>,
    pub positives: Array3<f64>,
    pub distractors: Array3<f64>,
}

impl BatchGrads {
    pub fn zeros_like(batch: &TupleBatch) -> Self {
        Self {
            anchors: Array2::zeros(batch.anchors.raw_dim()),
            positives: Array3::zeros(batch.positives.raw_dim()),
            distractors: Array3::zeros(batch.distractors.raw_dim()),
        }
    }

    pub fn get(&self, slot: Slot) -> ArrayView1<'_, f64> {
        match slot {
            Slot::Anchor(i) => self.anchors.row(i),
            Slot::Positive(i, p) => self.positives.slice(s![i, p, ..]),
            Slot::Distractor(i, k) => self.distractors.slice(s![i, k, ..]),
        }
    }

    pub fn get_mut(&mut self, slot: Slot) -> ArrayViewMut1<'_, f64> {
        match slot {
            Slot::Anchor(i) => self.anchors.row_mut(i),
            Slot::Positive(i, p) => self.positives.slice_mut(s![i, p, ..]),
            Slot::Distractor(i, k) => self.distractors.slice_mut(s![i, k, ..]),
        }
    }

    /// Back-propagates `coeff = dL/d(u·v)` onto both slots.
    pub(crate) fn push_sim(&mut self, batch: &TupleBatch, u: Slot, v: Slot, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        self.get_mut(u).scaled_add(coeff, &batch.vector(v));
        self.get_mut(v).scaled_add(coeff, &batch.vector(u));
    }

    /// Back-propagates `coeff = dL/d logit(u, v)`.
    pub(crate) fn push_logit(&mut self, batch: &TupleBatch, u: Slot, v: Slot, coeff: f64, tau: Temperature) {
        self.push_sim(batch, u, v, coeff / tau.value());
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &BatchGrads) {
        if alpha == 0.0 {
            return;
        }
        self.anchors.scaled_add(alpha, &other.anchors);
        self.positives.scaled_add(alpha, &other.positives);
        self.distractors.scaled_add(alpha, &other.distractors);
    }

    pub fn is_finite(&self) -> bool {
        let finite = |x: &f64| x.is_finite();
        self.anchors.iter().all(finite) && self.positives.iter().all(finite) && self.distractors.iter().all(finite)
    }

    /// True when every masked slot carries an all-zero gradient.
    pub fn masked_slots_are_zero(&self, batch: &TupleBatch) -> bool {
        let mut ok = true;
        Zip::from(&batch.pos_valid)
            .and(self.positives.lanes(ndarray::Axis(2)))
            .for_each(|&valid, g| ok &= valid || g.iter().all(|&x| x == 0.0));
        Zip::from(&batch.dis_valid)
            .and(self.distractors.lanes(ndarray::Axis(2)))
            .for_each(|&valid, g| ok &= valid || g.iter().all(|&x| x == 0.0));
        ok
    }
}

/// Per-term values, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub disc: f64,
    pub rank: f64,
    pub cohesion: f64,
}

/// Rows that a term skipped because they lacked the slots it needs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub skipped_rank_rows: usize,
    pub skipped_cohesion_rows: usize,
}

impl LossDiagnostics {
    fn merge(&mut self, other: LossDiagnostics) {
        self.skipped_rank_rows += other.skipped_rank_rows;
        self.skipped_cohesion_rows += other.skipped_cohesion_rows;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: BatchGrads,
    pub components: LossComponents,
    pub diagnostics: LossDiagnostics,
}

impl LossOutput {
    pub(crate) fn zero(batch: &TupleBatch) -> Self {
        Self {
            value: 0.0,
            grads: BatchGrads::zeros_like(batch),
            components: LossComponents::default(),
            diagnostics: LossDiagnostics::default(),
        }
    }
}

/// Ground-truth edit severity per distractor slot (`N x K`, values in `[0, 1]`;
/// 1 means unedited).
#[derive(Debug, Clone, PartialEq)]
pub struct OracleLabels {
    pub severity: Array2<f64>,
}

impl OracleLabels {
    pub fn new(severity: Array2<f64>) -> Result<Self> {
        if severity.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config("oracle severity outside [0, 1]".into()));
        }
        Ok(Self { severity })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the ranking term.
    pub alpha: f64,
    /// Weight of positive cohesion.
    pub beta: f64,
    /// Margin of the hinge and RankNet ablation terms, in logit units.
    pub margin_m: f64,
    pub tau: Temperature,
    /// Circle loss relaxation.
    pub circle_relaxation: f64,
    /// Fixed bias added to logits in the pairwise sigmoid objective.
    pub siglip_bias: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.0,
            margin_m: 0.1,
            tau: Temperature::default(),
            circle_relaxation: 0.25,
            siglip_bias: -10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("margin_m", self.margin_m),
            ("circle_relaxation", self.circle_relaxation),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.siglip_bias.is_finite() {
            return Err(Error::Config("siglip_bias must be finite".into()));
        }
        Ok(())
    }
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Discrimination over pool + distractors, plus softplus ranking.
    Nearid,
    /// Symmetric InfoNCE, one positive per anchor; distractors ignored.
    InfonceSym,
    /// As above, distractors appended to the anchor-side softmax.
    InfonceRneg,
    /// Symmetric InfoNCE plus RankNet on oracle-ordered distractor pairs.
    InfonceOracle,
    /// Distractor-augmented InfoNCE plus oracle RankNet.
    InfonceRnegOracle,
    /// Pairwise sigmoid BCE plus log-sigmoid ranking.
    SiglipRank,
    /// Circle loss plus hinge ranking.
    CircleRank,
}

impl LossVariant {
    pub const ALL: [LossVariant; 7] = [
        LossVariant::Nearid,
        LossVariant::InfonceSym,
        LossVariant::InfonceRneg,
        LossVariant::InfonceOracle,
        LossVariant::InfonceRnegOracle,
        LossVariant::SiglipRank,
        LossVariant::CircleRank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Nearid => "nearid",
            LossVariant::InfonceSym => "infonce_sym",
            LossVariant::InfonceRneg => "infonce_rneg",
            LossVariant::InfonceOracle => "infonce_oracle",
            LossVariant::InfonceRnegOracle => "infonce_rneg_oracle",
            LossVariant::SiglipRank => "siglip_rank",
            LossVariant::CircleRank => "circle_rank",
        }
    }

    pub fn needs_oracle(self) -> bool {
        matches!(self, LossVariant::InfonceOracle | LossVariant::InfonceRnegOracle)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss variant `{s}`")))
    }
}

/// Evaluates `variant` on `batch`.
pub fn compute_loss(
    variant: LossVariant,
    batch: &TupleBatch,
    cfg: &LossConfig,
    oracle: Option<&OracleLabels>,
) -> Result<LossOutput> {
    match variant {
        LossVariant::Nearid => nearid_loss(batch, cfg, oracle),
        _ => ablation::ablation_loss(variant, batch, cfg, oracle),
    }
}
