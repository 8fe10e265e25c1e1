//! Role-aware background masking and token jitter.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::head::TokenGrid;

/// Probability of blacking out the background, per tuple role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskProbs {
    pub anchor: f64,
    pub positive: f64,
    pub distractor: f64,
}

impl Default for MaskProbs {
    fn default() -> Self {
        Self { anchor: 0.5, positive: 0.2, distractor: 0.6 }
    }
}

/// Rendered grids of one training tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleGrids {
    pub anchor: TokenGrid,
    pub positives: Vec<TokenGrid>,
    pub distractors: Vec<TokenGrid>,
}

impl TupleGrids {
    fn slots_mut(&mut self) -> impl Iterator<Item = (&mut TokenGrid, Slot)> {
        std::iter::once((&mut self.anchor, Slot::Anchor))
            .chain(self.positives.iter_mut().map(|g| (g, Slot::Positive)))
            .chain(self.distractors.iter_mut().map(|g| (g, Slot::Distractor)))
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Anchor,
    Positive,
    Distractor,
}

/// Zeroes every background token of `grid`.
pub fn mask_background(grid: &mut TokenGrid) {
    for (mut row, &fg) in grid.tokens.rows_mut().into_iter().zip(&grid.fg_mask) {
        if !fg {
            row.fill(0.0);
        }
    }
}

/// For each slot in order (anchor, positives, distractors) draws one
/// Bernoulli decision with its role's probability and masks the background
/// on success.
pub fn apply_role_masking<R: Rng>(tuple: &mut TupleGrids, rng: &mut R, probs: &MaskProbs) {
    for (grid, slot) in tuple.slots_mut() {
        let p = match slot {
            Slot::Anchor => probs.anchor,
            Slot::Positive => probs.positive,
            Slot::Distractor => probs.distractor,
        };
        if rng.random::<f64>() < p {
            mask_background(grid);
        }
    }
}

/// Adds `N(0, sigma²)` to every token entry of every slot.
pub fn apply_jitter<R: Rng>(tuple: &mut TupleGrids, rng: &mut R, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    for (grid, _) in tuple.slots_mut() {
        grid.tokens.mapv_inplace(|x| x + sigma * rng.sample::<f64, _>(StandardNormal));
    }
}
