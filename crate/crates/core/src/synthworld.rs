//! Seeded matched-context world.
//!
//! Every identity owns a unit latent and two or three views, each on its own
//! background. A view's grid holds `tokens_fg` foreground tokens rendered from
//! the identity latent and `tokens_bg` background tokens rendered from the
//! background latent through fixed per-world linear maps. Near-identity
//! distractors reuse a view's background with a perturbed identity latent, and
//! part edits swap some of the anchor's foreground tokens for tokens of a
//! donor latent.
//!
//! The manifest is authoritative: grids are rebuilt on demand from the world
//! seed and a sample's record, never stored.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::TokenGrid;
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_identities: usize,
    pub d_latent: usize,
    pub tokens_fg: usize,
    pub tokens_bg: usize,
    pub token_dim: usize,
    pub sigma_near: f64,
    pub sigma_noise: f64,
    /// Standard deviation of each render-map entry, times `sqrt(d_latent)`.
    pub token_scale: f64,
    /// Fraction of identities with three views instead of two.
    pub view_split: f64,
    pub n_distractor_sources: usize,
    /// Sources `0..train_sources` appear in training; the rest are held out.
    pub train_sources: usize,
    pub k_per_source: usize,
    pub part_edits: usize,
    pub human_noise: f64,
    /// Norm of the constant offset separating foreground from background tokens.
    pub objectness: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_identities: 600,
            d_latent: 16,
            tokens_fg: 8,
            tokens_bg: 24,
            token_dim: 64,
            sigma_near: 0.3,
            sigma_noise: 0.05,
            token_scale: 4.0,
            view_split: 0.33,
            n_distractor_sources: 4,
            train_sources: 2,
            k_per_source: 2,
            part_edits: 4,
            human_noise: 0.1,
            objectness: 3.0,
            val_fraction: 0.1,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_identities == 0
            || self.d_latent == 0
            || self.tokens_fg == 0
            || self.tokens_bg == 0
            || self.token_dim == 0
            || self.n_distractor_sources == 0
            || self.k_per_source == 0
        {
            return bad("world counts must be at least 1");
        }
        if !(self.sigma_near > 0.0 && self.sigma_near.is_finite()) {
            return bad("sigma_near must be positive");
        }
        if !(self.token_scale > 0.0 && self.token_scale.is_finite()) {
            return bad("token_scale must be positive");
        }
        if !(self.sigma_noise >= 0.0 && self.human_noise >= 0.0 && self.objectness >= 0.0) {
            return bad("noise levels and objectness must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.view_split) {
            return bad("view_split must lie in [0, 1]");
        }
        if self.train_sources == 0 || self.train_sources > self.n_distractor_sources {
            return bad("train_sources must be in 1..=n_distractor_sources");
        }
        if self.part_edits > self.tokens_fg.saturating_sub(1) {
            return bad("part_edits cannot exceed tokens_fg - 1");
        }
        if !(self.val_fraction >= 0.0 && self.test_fraction > 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return bad("split fractions must leave a non-empty train split");
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.tokens_fg + self.tokens_bg
    }

    pub fn is_train_source(&self, source: u8) -> bool {
        (source as usize) < self.train_sources
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Anchor,
    Positive,
    Distractor,
    PartEdit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::MissingSplit(other.to_string())),
        }
    }
}

/// Distractor perturbation styles, by source id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceStyle {
    Isotropic,
    Sparse,
    LowRank,
    HeavyTailed,
}

impl SourceStyle {
    pub fn of(source: u8) -> Self {
        match source % 4 {
            0 => Self::Isotropic,
            1 => Self::Sparse,
            2 => Self::LowRank,
            _ => Self::HeavyTailed,
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSample {
    pub sample_id: u64,
    pub identity_id: u32,
    pub role: Role,
    pub background_id: u32,
    pub source_id: Option<u8>,
    pub view_index: u8,
    pub oracle_severity: f64,
    pub human_proxy: f64,
    pub split: Split,
}

/// Sample ids belonging to one identity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdentityEntry {
    pub identity_id: u32,
    /// One sample per view; index 0 is the anchor.
    pub views: Vec<u64>,
    /// `distractors[view]` lists `(source, sample_id)` in manifest order.
    pub distractors: Vec<Vec<(u8, u64)>>,
    pub part_edits: Vec<u64>,
}

impl IdentityEntry {
    pub fn distractors_from<'a>(
        &'a self,
        view: usize,
        keep: impl Fn(u8) -> bool + 'a,
    ) -> impl Iterator<Item = u64> + 'a {
        self.distractors[view].iter().filter(move |(s, _)| keep(*s)).map(|&(_, id)| id)
    }
}

/// Fixed per-world render maps.
#[derive(Debug, Clone)]
struct Maps {
    fg: Vec<Array2<f64>>,
    bg: Vec<Array2<f64>>,
    fg_offset: Array1<f64>,
    bg_offset: Array1<f64>,
    low_rank: Array2<f64>,
}

impl Maps {
    fn new(cfg: &WorldConfig) -> Self {
        let mut rng = substream(cfg.seed, Purpose::WorldMaps, 0);
        let scale = cfg.token_scale / (cfg.d_latent as f64).sqrt();
        let map = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((cfg.token_dim, cfg.d_latent), |_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let fg = (0..cfg.tokens_fg).map(|_| map(&mut rng)).collect();
        let bg = (0..cfg.tokens_bg).map(|_| map(&mut rng)).collect();
        let offset = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..cfg.token_dim).map(|_| rng.sample(StandardNormal)).collect();
            Array1::from(unit(v)) * cfg.objectness
        };
        let fg_offset = offset(&mut rng);
        let bg_offset = offset(&mut rng);
        let low_rank = Array2::from_shape_fn((cfg.d_latent, 3), |_| rng.sample(StandardNormal));
        Self { fg, bg, fg_offset, bg_offset, low_rank }
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn gaussian_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    unit((0..d).map(|_| rng.sample(StandardNormal)).collect())
}

/// `clamp(severity + N(0, sd²), 0, 1)`.
pub fn human_proxy<R: Rng>(severity: f64, sd: f64, rng: &mut R) -> f64 {
    let e: f64 = rng.sample(StandardNormal);
    (severity + sd * e).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub samples: Vec<WorldSample>,
    maps: Maps,
    identities: BTreeMap<u32, IdentityEntry>,
}

impl SynthWorld {
    pub fn generate(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_identities;
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut substream(cfg.seed, Purpose::Splits, 0));
        let n_test = ((n as f64 * cfg.test_fraction).round() as usize).max(1);
        let n_val = (n as f64 * cfg.val_fraction).round() as usize;
        if n_test + n_val >= n {
            return Err(Error::Config("too few identities for the requested splits".into()));
        }
        let mut split_of = vec![Split::Train; n];
        for (rank, &id) in order.iter().enumerate() {
            split_of[id as usize] = if rank < n_test {
                Split::Test
            } else if rank < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }

        let mut samples = Vec::new();
        let mut push = |s: WorldSample| samples.push(s);
        let mut next_id = 0u64;
        for id in 0..n as u32 {
            let split = split_of[id as usize];
            let mut rng = substream(cfg.seed, Purpose::Identity, id as u64);
            let n_views = if rng.random::<f64>() < cfg.view_split { 3 } else { 2 };
            for v in 0..n_views as u8 {
                let background_id = id * 3 + v as u32;
                push(WorldSample {
                    sample_id: next_id,
                    identity_id: id,
                    role: if v == 0 { Role::Anchor } else { Role::Positive },
                    background_id,
                    source_id: None,
                    view_index: v,
                    oracle_severity: 1.0,
                    human_proxy: 1.0,
                    split,
                });
                next_id += 1;
                for s in 0..cfg.n_distractor_sources as u8 {
                    for _ in 0..cfg.k_per_source {
                        push(WorldSample {
                            sample_id: next_id,
                            identity_id: id,
                            role: Role::Distractor,
                            background_id,
                            source_id: Some(s),
                            view_index: v,
                            oracle_severity: 0.0,
                            human_proxy: 0.0,
                            split,
                        });
                        next_id += 1;
                    }
                }
            }
            // distinct edit sizes drawn from 1..tokens_fg
            let mut sizes: Vec<usize> = (1..cfg.tokens_fg).collect();
            sizes.shuffle(&mut rng);
            let mut hp = substream(cfg.seed, Purpose::HumanProxy, id as u64);
            for &c in sizes.iter().take(cfg.part_edits) {
                let severity = 1.0 - c as f64 / cfg.tokens_fg as f64;
                push(WorldSample {
                    sample_id: next_id,
                    identity_id: id,
                    role: Role::PartEdit,
                    background_id: id * 3,
                    source_id: None,
                    view_index: 0,
                    oracle_severity: severity,
                    human_proxy: human_proxy(severity, cfg.human_noise, &mut hp),
                    split,
                });
                next_id += 1;
            }
        }
        Self::from_manifest(cfg, samples)
    }

    /// Rebuilds a world from its configuration and manifest records.
    pub fn from_manifest(cfg: WorldConfig, samples: Vec<WorldSample>) -> Result<Self> {
        cfg.validate()?;
        let mut identities: BTreeMap<u32, IdentityEntry> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.sample_id != i as u64 {
                return Err(Error::Format(format!("manifest line {i} has sample_id {}", s.sample_id)));
            }
            if !(0.0..=1.0).contains(&s.oracle_severity) {
                return Err(Error::Format(format!("sample {i}: severity outside [0, 1]")));
            }
            let e = identities
                .entry(s.identity_id)
                .or_insert_with(|| IdentityEntry { identity_id: s.identity_id, ..Default::default() });
            let v = s.view_index as usize;
            match s.role {
                Role::Anchor | Role::Positive => {
                    if e.views.len() != v {
                        return Err(Error::Format(format!("sample {i}: views out of order")));
                    }
                    e.views.push(s.sample_id);
                    e.distractors.push(Vec::new());
                }
                Role::Distractor => {
                    let source =
                        s.source_id.ok_or_else(|| Error::Format(format!("sample {i}: distractor without source")))?;
                    let slot = e
                        .distractors
                        .get_mut(v)
                        .ok_or_else(|| Error::Format(format!("sample {i}: distractor before its view")))?;
                    slot.push((source, s.sample_id));
                }
                Role::PartEdit => e.part_edits.push(s.sample_id),
            }
        }
        Ok(Self { maps: Maps::new(&cfg), config: cfg, samples, identities })
    }

    pub fn write_manifest<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<WorldSample>> {
        let mut out = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    pub fn sample(&self, id: u64) -> &WorldSample {
        &self.samples[id as usize]
    }

    pub fn identity(&self, id: u32) -> Option<&IdentityEntry> {
        self.identities.get(&id)
    }

    /// Identities of one split in ascending id order.
    pub fn split(&self, split: Split) -> Vec<&IdentityEntry> {
        self.identities.values().filter(|e| e.views.first().is_some_and(|&v| self.sample(v).split == split)).collect()
    }

    pub fn identity_latent(&self, id: u32) -> Vec<f64> {
        let mut rng = substream(self.config.seed, Purpose::IdentityLatent, id as u64);
        gaussian_unit(&mut rng, self.config.d_latent)
    }

    pub fn background_latent(&self, background_id: u32) -> Vec<f64> {
        let mut rng = substream(self.config.seed, Purpose::Background, background_id as u64);
        gaussian_unit(&mut rng, self.config.d_latent)
    }

    /// Unit perturbation direction of a source style.
    fn perturbation(&self, style: SourceStyle, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.config.d_latent;
        match style {
            SourceStyle::Isotropic => gaussian_unit(rng, d),
            SourceStyle::Sparse => {
                let mut v = vec![0.0; d];
                for i in rand::seq::index::sample(rng, d, 2.min(d)) {
                    v[i] = rng.sample(StandardNormal);
                }
                unit(v)
            }
            SourceStyle::LowRank => {
                let c: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                unit(self.maps.low_rank.dot(&Array1::from(c)).to_vec())
            }
            SourceStyle::HeavyTailed => {
                let t = StudentT::new(3.0).expect("valid dof");
                unit((0..d).map(|_| t.sample(rng)).collect())
            }
        }
    }

    /// Identity latent of a sample: the owner's latent, or its perturbation
    /// for a distractor.
    pub fn sample_latent(&self, s: &WorldSample) -> Vec<f64> {
        let z = self.identity_latent(s.identity_id);
        match (s.role, s.source_id) {
            (Role::Distractor, Some(source)) => {
                let mut rng = substream(self.config.seed, Purpose::Perturbation, s.sample_id);
                let eps = self.perturbation(SourceStyle::of(source), &mut rng);
                let sigma = self.config.sigma_near;
                unit(z.iter().zip(&eps).map(|(a, b)| a + sigma * b).collect())
            }
            _ => z,
        }
    }

    /// Regenerates the token grid of `sample_id`.
    pub fn grid(&self, sample_id: u64) -> TokenGrid {
        let s = self.sample(sample_id);
        let z_id = self.sample_latent(s);
        let z_bg = self.background_latent(s.background_id);
        let mut noise = substream(self.config.seed, Purpose::SampleNoise, sample_id);
        let mut grid = render(&z_id, &z_bg, &self.maps, &self.config, &mut noise);
        if s.role == Role::PartEdit {
            let cfg = &self.config;
            let c = ((1.0 - s.oracle_severity) * cfg.tokens_fg as f64).round() as usize;
            let mut rng = substream(cfg.seed, Purpose::PartEdit, sample_id);
            let donor = gaussian_unit(&mut rng, cfg.d_latent);
            let donor = Array1::from(donor);
            for t in rand::seq::index::sample(&mut rng, cfg.tokens_fg, c) {
                let tok = self.maps.fg[t].dot(&donor) + &self.maps.fg_offset;
                let mut row = grid.tokens.row_mut(t);
                for (x, y) in row.iter_mut().zip(tok.iter()) {
                    *x = y + cfg.sigma_noise * noise.sample::<f64, _>(StandardNormal);
                }
            }
        }
        grid
    }

    pub fn grids(&self, ids: &[u64]) -> Vec<Array2<f64>> {
        ids.iter().map(|&i| self.grid(i).tokens).collect()
    }
}

/// Renders a grid: foreground tokens first, then background tokens.
fn render(z_id: &[f64], z_bg: &[f64], maps: &Maps, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> TokenGrid {
    let zi = Array1::from(z_id.to_vec());
    let zb = Array1::from(z_bg.to_vec());
    let t = cfg.tokens();
    let mut tokens = Array2::zeros((t, cfg.token_dim));
    for (r, a) in maps.fg.iter().enumerate() {
        tokens.row_mut(r).assign(&(a.dot(&zi) + &maps.fg_offset));
    }
    for (r, a) in maps.bg.iter().enumerate() {
        tokens.row_mut(cfg.tokens_fg + r).assign(&(a.dot(&zb) + &maps.bg_offset));
    }
    if cfg.sigma_noise > 0.0 {
        tokens.mapv_inplace(|x| x + cfg.sigma_noise * rng.sample::<f64, _>(StandardNormal));
    }
    let fg_mask = (0..t).map(|r| r < cfg.tokens_fg).collect();
    TokenGrid { tokens, fg_mask }
}
