//! Training loop for the attention-pooling head.
//!
//! Each epoch visits every training identity once in an object-level tuple
//! (random anchor view, the other views as positives, training-source
//! distractors on the anchor's background) and a fixed subset of identities
//! several times in part-edit tuples (view 0 as anchor, its part edits as
//! graded matched-context distractors). Object and part-edit batches are
//! interleaved in a seeded order. One step is one batch; the positive pool
//! spans the whole batch.

pub mod augment;
pub mod optim;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{apply_jitter, apply_role_masking, mask_background, MaskProbs, TupleGrids};
pub use optim::{adamw_step, lr_at, AdamWConfig, OptimizerState};

use crate::error::{Error, Result};
use crate::head::{backward_batch, forward_batch, HeadConfig, HeadParams};
use crate::losses::{compute_loss, LossConfig, LossVariant, OracleLabels, Slot, TupleBatch};
use crate::rng::{substream, Purpose};
use crate::synthworld::{IdentityEntry, Split, SynthWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub batch_identities: usize,
    pub seed: u64,
    pub variant: LossVariant,
    pub loss: LossConfig,
    pub mask: MaskProbs,
    pub jitter_sigma: f64,
    /// Share of training identities that also appear in part-edit tuples.
    pub part_edit_fraction: f64,
    /// Repetitions of each part-edit tuple per epoch.
    pub part_edit_upsample: usize,
    pub heads: usize,
    pub out_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup_steps: 100,
            epochs: 30,
            batch_identities: 32,
            seed: 0,
            variant: LossVariant::Nearid,
            loss: LossConfig::default(),
            mask: MaskProbs::default(),
            jitter_sigma: 0.05,
            part_edit_fraction: 0.5,
            part_edit_upsample: 2,
            heads: 4,
            out_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.jitter_sigma >= 0.0) {
            return bad("weight_decay and jitter_sigma must be non-negative".into());
        }
        for p in [self.mask.anchor, self.mask.positive, self.mask.distractor, self.part_edit_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        if self.batch_identities < 2 {
            return bad("batch_identities must be at least 2".into());
        }
        if self.part_edit_upsample > 64 {
            return bad("part_edit_upsample must be at most 64".into());
        }
        self.loss.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleKind {
    Object,
    PartEdit,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub kind: TupleKind,
    pub lr: f64,
    pub loss: f64,
    pub disc: f64,
    pub rank: f64,
    pub cohesion: f64,
    pub skipped_rank_rows: usize,
    pub skipped_cohesion_rows: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub log: Vec<StepRecord>,
}

/// A batch plan: which identities, in which tuple form.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedBatch {
    pub kind: TupleKind,
    pub identities: Vec<u32>,
}

fn chunk(ids: &[u32], size: usize) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = ids.chunks(size).map(|c| c.to_vec()).collect();
    // a lone trailing tuple has no batch negatives; fold it into its neighbour
    if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Training identities that also get part-edit tuples.
pub fn part_edit_subset(world: &SynthWorld, cfg: &TrainConfig) -> Vec<u32> {
    let mut ids: Vec<u32> =
        world.split(Split::Train).iter().filter(|e| !e.part_edits.is_empty()).map(|e| e.identity_id).collect();
    ids.shuffle(&mut substream(cfg.seed, Purpose::Splits, 1));
    let n = (ids.len() as f64 * cfg.part_edit_fraction).ceil() as usize;
    ids.truncate(n.min(ids.len()));
    ids.sort_unstable();
    ids
}

/// Seeded batch plan for one epoch.
pub fn plan_epoch(train_ids: &[u32], edit_ids: &[u32], epoch: usize, cfg: &TrainConfig) -> Vec<PlannedBatch> {
    let stream = |k: u64| substream(cfg.seed, Purpose::Shuffle, ((epoch as u64) << 8) | k);
    let mut ids = train_ids.to_vec();
    ids.shuffle(&mut stream(0));
    let mut plan: Vec<PlannedBatch> = chunk(&ids, cfg.batch_identities)
        .into_iter()
        .map(|identities| PlannedBatch { kind: TupleKind::Object, identities })
        .collect();
    if edit_ids.len() >= 2 {
        for rep in 0..cfg.part_edit_upsample {
            let mut ids = edit_ids.to_vec();
            ids.shuffle(&mut stream(1 + rep as u64));
            plan.extend(
                chunk(&ids, cfg.batch_identities)
                    .into_iter()
                    .map(|identities| PlannedBatch { kind: TupleKind::PartEdit, identities }),
            );
        }
    }
    plan.shuffle(&mut stream(255));
    plan
}

/// Grids and oracle severities of one tuple.
fn build_tuple<R: Rng>(world: &SynthWorld, e: &IdentityEntry, kind: TupleKind, rng: &mut R) -> (TupleGrids, Vec<f64>) {
    let (anchor, distractors, severities): (usize, Vec<u64>, Vec<f64>) = match kind {
        TupleKind::Object => {
            let a = rng.random_range(0..e.views.len());
            let ds: Vec<u64> = e.distractors_from(a, |s| world.config.is_train_source(s)).collect();
            let sev = vec![0.0; ds.len()];
            (a, ds, sev)
        }
        TupleKind::PartEdit => {
            let sev = e.part_edits.iter().map(|&p| world.sample(p).oracle_severity).collect();
            (0, e.part_edits.clone(), sev)
        }
    };
    let grids = TupleGrids {
        anchor: world.grid(e.views[anchor]),
        positives: e.views.iter().enumerate().filter(|&(v, _)| v != anchor).map(|(_, &id)| world.grid(id)).collect(),
        distractors: distractors.iter().map(|&id| world.grid(id)).collect(),
    };
    (grids, severities)
}

/// Loss, gradients and parameter gradients for one assembled batch.
pub struct StepResult {
    pub loss: crate::losses::LossOutput,
    pub grads: HeadParams,
}

/// Forward, loss and backward over a batch of tuples.
pub fn batch_gradients(
    params: &HeadParams,
    tuples: &[TupleGrids],
    severities: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<StepResult> {
    let n = tuples.len();
    let p = tuples.iter().map(|t| t.positives.len()).max().unwrap_or(0);
    let k = tuples.iter().map(|t| t.distractors.len()).max().unwrap_or(0);
    let (t_len, d) = tuples[0].anchor.tokens.dim();

    let mut slots = Vec::new();
    for (i, t) in tuples.iter().enumerate() {
        slots.push((Slot::Anchor(i), &t.anchor.tokens));
        slots.extend(t.positives.iter().enumerate().map(|(q, g)| (Slot::Positive(i, q), &g.tokens)));
        slots.extend(t.distractors.iter().enumerate().map(|(q, g)| (Slot::Distractor(i, q), &g.tokens)));
    }
    let mut stacked = Array3::zeros((slots.len(), t_len, d));
    for (r, (_, g)) in slots.iter().enumerate() {
        stacked.index_axis_mut(Axis(0), r).assign(*g);
    }
    let (z, cache) = forward_batch(params, stacked.view())?;
    let out_dim = z.ncols();

    let mut batch = TupleBatch::new(
        Array2::zeros((n, out_dim)),
        Array3::zeros((n, p, out_dim)),
        Array2::from_elem((n, p), false),
        Array3::zeros((n, k, out_dim)),
        Array2::from_elem((n, k), false),
    )?;
    for (r, (slot, _)) in slots.iter().enumerate() {
        batch.vector_mut(*slot).assign(&z.row(r));
        match *slot {
            Slot::Positive(i, q) => batch.pos_valid[[i, q]] = true,
            Slot::Distractor(i, q) => batch.dis_valid[[i, q]] = true,
            Slot::Anchor(_) => {}
        }
    }
    let oracle = if cfg.variant.needs_oracle() {
        let mut sev = Array2::zeros((n, k));
        for (i, s) in severities.iter().enumerate() {
            for (q, &v) in s.iter().enumerate() {
                sev[[i, q]] = v;
            }
        }
        Some(OracleLabels::new(sev)?)
    } else {
        None
    };
    let loss = compute_loss(cfg.variant, &batch, &cfg.loss, oracle.as_ref())?;
    let mut dz = Array2::zeros(z.raw_dim());
    for (r, (slot, _)) in slots.iter().enumerate() {
        dz.row_mut(r).assign(&loss.grads.get(*slot));
    }
    let (grads, _) = backward_batch(params, cache, dz.view(), false)?;
    Ok(StepResult { loss, grads })
}

/// Steps per epoch under `cfg` for `world`.
pub fn steps_per_epoch(world: &SynthWorld, cfg: &TrainConfig) -> usize {
    let train: Vec<u32> = world.split(Split::Train).iter().map(|e| e.identity_id).collect();
    plan_epoch(&train, &part_edit_subset(world, cfg), 0, cfg).len()
}

/// Trains a freshly initialised head on the world's training split.
/// `on_step` sees each log record as it is produced.
pub fn train(world: &SynthWorld, cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let head = HeadConfig {
        dim: world.config.token_dim,
        heads: cfg.heads,
        out_dim: cfg.out_dim,
        tokens: world.config.tokens(),
    };
    let mut params = HeadParams::init(head, cfg.seed)?;
    let train_entries = world.split(Split::Train);
    if train_entries.is_empty() {
        return Err(Error::MissingSplit("train".into()));
    }
    let train_ids: Vec<u32> = train_entries.iter().map(|e| e.identity_id).collect();
    let edit_ids = part_edit_subset(world, cfg);
    let per_epoch = plan_epoch(&train_ids, &edit_ids, 0, cfg).len();
    let total = per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(total);
    if total == 0 {
        return Ok(TrainOutcome { params, log });
    }
    if total <= cfg.warmup_steps {
        return Err(Error::InvalidSchedule { total, warmup: cfg.warmup_steps });
    }
    let mut state = OptimizerState::new(&params);
    let adamw = cfg.adamw();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let plan = plan_epoch(&train_ids, &edit_ids, epoch, cfg);
        let mut choice = substream(cfg.seed, Purpose::Identity, u64::MAX >> 16 ^ epoch as u64);
        let mut masking = substream(cfg.seed, Purpose::Masking, epoch as u64);
        let mut jitter = substream(cfg.seed, Purpose::Jitter, epoch as u64);
        for batch in plan {
            let mut tuples = Vec::with_capacity(batch.identities.len());
            let mut severities = Vec::with_capacity(batch.identities.len());
            for id in &batch.identities {
                let e = world.identity(*id).expect("planned identity exists");
                let (mut t, s) = build_tuple(world, e, batch.kind, &mut choice);
                apply_role_masking(&mut t, &mut masking, &cfg.mask);
                apply_jitter(&mut t, &mut jitter, cfg.jitter_sigma);
                tuples.push(t);
                severities.push(s);
            }
            let diverged = |e: Error| match e {
                Error::NonFinite(_) | Error::NonFiniteGradient { .. } | Error::ZeroVector(_) => {
                    Error::Diverged { step, cause: e.to_string() }
                }
                other => other,
            };
            let StepResult { loss, grads } = batch_gradients(&params, &tuples, &severities, cfg).map_err(diverged)?;
            if !loss.value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let lr = lr_at(step, cfg.lr, cfg.warmup_steps, total)?;
            adamw_step(&mut params, &grads, &mut state, lr, &adamw).map_err(diverged)?;
            let record = StepRecord {
                step,
                epoch,
                kind: batch.kind,
                lr,
                loss: loss.value,
                disc: loss.components.disc,
                rank: loss.components.rank,
                cohesion: loss.components.cohesion,
                skipped_rank_rows: loss.diagnostics.skipped_rank_rows,
                skipped_cohesion_rows: loss.diagnostics.skipped_cohesion_rows,
            };
            on_step(&record);
            log.push(record);
            step += 1;
        }
    }
    Ok(TrainOutcome { params, log })
}
