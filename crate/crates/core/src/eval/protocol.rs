//! The evaluation protocol over a synthetic world split.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::kpca::{kpca_project, Kernel};
use super::margins::{directed_margins, pool_sources, ssr_pa, MarginRecord};
use super::stats::alignment;
use crate::error::{Error, Result};
use crate::geometry::dot;
use crate::head::{embed_grids, HeadParams, TokenGrid};
use crate::synthworld::{IdentityEntry, Role, Split, SynthWorld};

/// Maps token grids to unit embeddings, one row per grid.
pub trait Encoder {
    fn embed(&self, grids: &[Array2<f64>]) -> Result<Array2<f64>>;
}

/// The untrained stand-in: mean-pooled tokens, normalized. Holds no
/// parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct Frozen;

impl Encoder for Frozen {
    fn embed(&self, grids: &[Array2<f64>]) -> Result<Array2<f64>> {
        let d = grids.first().map(|g| g.ncols()).ok_or(Error::EmptyInput("grids"))?;
        let mut out = Array2::zeros((grids.len(), d));
        for (i, g) in grids.iter().enumerate() {
            let m = g.mean_axis(Axis(0)).ok_or(Error::EmptyInput("token grid"))?;
            let n = m.dot(&m).sqrt();
            if n < crate::geometry::ZERO_NORM {
                return Err(Error::ZeroVector(n));
            }
            out.row_mut(i).assign(&(m / n));
        }
        Ok(out)
    }
}

impl Encoder for HeadParams {
    fn embed(&self, grids: &[Array2<f64>]) -> Result<Array2<f64>> {
        let parts: Vec<Array2<f64>> = grids.chunks(256).map(|c| embed_grids(self, c)).collect::<Result<_>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFilter {
    #[default]
    All,
    Train,
    HeldOut,
}

impl FromStr for SourceFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "train" => Ok(Self::Train),
            "held_out" => Ok(Self::HeldOut),
            other => Err(Error::Config(format!("unknown source filter `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: Split,
    pub sources: SourceFilter,
    /// Zero background tokens before embedding.
    pub fg_only: bool,
    pub kpca: Option<Kernel>,
    pub kpca_identities: usize,
    pub histogram_bins: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            sources: SourceFilter::All,
            fg_only: false,
            kpca: None,
            kpca_identities: 40,
            histogram_bins: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub ssr: f64,
    pub pa: f64,
    /// Identities contributing margins.
    pub n: usize,
    pub margins: usize,
}

/// Mean cosine similarity per tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub positive: f64,
    pub distractor: f64,
    pub batch_negative: f64,
}

impl Hierarchy {
    pub fn holds(&self) -> bool {
        self.positive > self.distractor && self.distractor > self.batch_negative
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let w = (hi - lo) / counts.len() as f64;
        for v in values {
            let b = (((v - lo) / w).floor().max(0.0) as usize).min(counts.len() - 1);
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditScore {
    pub identity_id: u32,
    pub sample_id: u64,
    pub oracle_severity: f64,
    pub human_proxy: f64,
    /// Cosine to the identity's second view (different background).
    pub similarity: f64,
    /// Cosine to the anchor view (same background).
    pub similarity_pair: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub identity_id: u32,
    pub role: Role,
    pub view_index: u8,
    pub source_id: Option<u8>,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub kernel: Kernel,
    pub degenerate: bool,
    /// Mean 2-D distance between each view and its matched distractors.
    pub mean_positive_distractor_distance: f64,
    pub points: Vec<ProjectedPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub sources: SourceFilter,
    pub fg_only: bool,
    pub ssr: f64,
    pub pa: f64,
    pub n_identities: usize,
    pub excluded_identities: usize,
    pub n_margins: usize,
    pub per_source: BTreeMap<u8, SourceStats>,
    pub m_o: Option<f64>,
    pub m_o_pair: Option<f64>,
    pub m_h: Option<f64>,
    pub alignment_groups_skipped: usize,
    pub hierarchy: Hierarchy,
    pub margin_histogram: Histogram,
    pub edits: Vec<EditScore>,
    pub projection: Option<ProjectionReport>,
}

fn keep_source(world: &SynthWorld, filter: SourceFilter, s: u8) -> bool {
    match filter {
        SourceFilter::All => true,
        SourceFilter::Train => world.config.is_train_source(s),
        SourceFilter::HeldOut => !world.config.is_train_source(s),
    }
}

/// First distractor of `source` on each view of `e`.
fn matched(e: &IdentityEntry, source: u8) -> Vec<Option<u64>> {
    e.distractors.iter().map(|ds| ds.iter().find(|(s, _)| *s == source).map(|&(_, id)| id)).collect()
}

/// Embeds every sample the protocol touches.
fn embed_samples(
    world: &SynthWorld,
    ids: &[u64],
    encoder: &dyn Encoder,
    fg_only: bool,
) -> Result<HashMap<u64, Vec<f64>>> {
    let grids: Vec<Array2<f64>> = ids
        .iter()
        .map(|&id| {
            let TokenGrid { mut tokens, fg_mask } = world.grid(id);
            if fg_only {
                for (mut row, fg) in tokens.rows_mut().into_iter().zip(fg_mask) {
                    if !fg {
                        row.fill(0.0);
                    }
                }
            }
            tokens
        })
        .collect();
    let z = encoder.embed(&grids)?;
    Ok(ids.iter().zip(z.rows()).map(|(&id, r)| (id, r.to_vec())).collect())
}

/// Runs the full protocol on one split.
pub fn evaluate(world: &SynthWorld, encoder: &dyn Encoder, opts: &EvalOptions) -> Result<EvalReport> {
    let identities = world.split(opts.split);
    if identities.is_empty() {
        return Err(Error::MissingSplit(format!("{:?}", opts.split).to_lowercase()));
    }
    let sources: Vec<u8> =
        (0..world.config.n_distractor_sources as u8).filter(|&s| keep_source(world, opts.sources, s)).collect();
    if sources.is_empty() {
        return Err(Error::Config("source filter selects no distractor source".into()));
    }

    let mut ids = Vec::new();
    for e in &identities {
        ids.extend(&e.views);
        for &s in &sources {
            ids.extend(matched(e, s).into_iter().flatten());
        }
        ids.extend(&e.part_edits);
    }
    let emb = embed_samples(world, &ids, encoder, opts.fg_only)?;
    let z = |id: u64| emb[&id].as_slice();

    let mut all_records: Vec<MarginRecord> = Vec::new();
    let mut per_source = BTreeMap::new();
    let mut excluded = 0;
    for &s in &sources {
        let mut recs = Vec::new();
        for e in &identities {
            let views: Vec<&[f64]> = e.views.iter().map(|&v| z(v)).collect();
            let dis: Vec<Option<&[f64]>> = matched(e, s).into_iter().map(|d| d.map(z)).collect();
            let r = directed_margins(e.identity_id, &views, &dis, Some(s));
            if r.is_empty() && s == sources[0] {
                excluded += 1;
            }
            recs.extend(r);
        }
        if recs.is_empty() {
            continue;
        }
        let (ssr, pa) = ssr_pa(&recs)?;
        let n = recs.iter().map(|r| r.identity_id).collect::<std::collections::BTreeSet<_>>().len();
        per_source.insert(s, SourceStats { ssr, pa, n, margins: recs.len() });
        all_records.extend(recs);
    }
    let pooled: Vec<(f64, f64, usize)> = per_source.values().map(|s| (s.ssr, s.pa, s.n)).collect();
    let (ssr, pa) = pool_sources(&pooled).map_err(|_| Error::EmptyRecords)?;

    let mut edits = Vec::new();
    for e in &identities {
        if e.views.len() < 2 {
            continue;
        }
        for &p in &e.part_edits {
            let s = world.sample(p);
            edits.push(EditScore {
                identity_id: e.identity_id,
                sample_id: p,
                oracle_severity: s.oracle_severity,
                human_proxy: s.human_proxy,
                similarity: dot(z(e.views[1]), z(p)),
                similarity_pair: dot(z(e.views[0]), z(p)),
            });
        }
    }
    let groups: Vec<u32> = edits.iter().map(|e| e.identity_id).collect();
    let sims: Vec<f64> = edits.iter().map(|e| e.similarity).collect();
    let sims_pair: Vec<f64> = edits.iter().map(|e| e.similarity_pair).collect();
    let oracle: Vec<f64> = edits.iter().map(|e| e.oracle_severity).collect();
    let human: Vec<f64> = edits.iter().map(|e| e.human_proxy).collect();
    let m_o = alignment(&sims, &oracle, &groups).ok();
    let m_o_pair = alignment(&sims_pair, &oracle, &groups).ok();
    let m_h = alignment(&sims, &human, &groups).ok();

    let hierarchy = hierarchy(&identities, &sources, &z);
    let margin_histogram = Histogram::new(all_records.iter().map(|r| r.delta), -1.0, 1.0, opts.histogram_bins);

    let projection = match opts.kpca {
        Some(kernel) => {
            Some(project(world, &identities[..identities.len().min(opts.kpca_identities)], &sources, &z, kernel)?)
        }
        None => None,
    };

    Ok(EvalReport {
        split: opts.split,
        sources: opts.sources,
        fg_only: opts.fg_only,
        ssr,
        pa,
        n_identities: identities.len() - excluded,
        excluded_identities: excluded,
        n_margins: all_records.len(),
        per_source,
        m_o: m_o.as_ref().map(|a| a.value),
        m_o_pair: m_o_pair.as_ref().map(|a| a.value),
        m_h: m_h.as_ref().map(|a| a.value),
        alignment_groups_skipped: m_o.map_or(0, |a| a.groups_skipped),
        hierarchy,
        margin_histogram,
        edits,
        projection,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn hierarchy<'a>(identities: &[&IdentityEntry], sources: &[u8], z: &impl Fn(u64) -> &'a [f64]) -> Hierarchy {
    let (mut pos, mut dis, mut neg) = (Vec::new(), Vec::new(), Vec::new());
    for e in identities {
        for i in 0..e.views.len() {
            for j in i + 1..e.views.len() {
                pos.push(dot(z(e.views[i]), z(e.views[j])));
            }
        }
        for &s in sources {
            for (v, d) in matched(e, s).into_iter().enumerate() {
                if let Some(d) = d {
                    dis.push(dot(z(e.views[v]), z(d)));
                }
            }
        }
    }
    for (i, a) in identities.iter().enumerate() {
        for b in &identities[i + 1..] {
            neg.push(dot(z(a.views[0]), z(b.views[0])));
        }
    }
    Hierarchy { positive: mean(&pos), distractor: mean(&dis), batch_negative: mean(&neg) }
}

fn project<'a>(
    world: &SynthWorld,
    identities: &[&IdentityEntry],
    sources: &[u8],
    z: &impl Fn(u64) -> &'a [f64],
    kernel: Kernel,
) -> Result<ProjectionReport> {
    let mut ids = Vec::new();
    let mut pairs = Vec::new();
    for e in identities {
        for (v, &view) in e.views.iter().enumerate() {
            let vi = ids.len();
            ids.push(view);
            for &s in sources {
                if let Some(d) = matched(e, s)[v] {
                    pairs.push((vi, ids.len()));
                    ids.push(d);
                }
            }
        }
    }
    let pts: Vec<&[f64]> = ids.iter().map(|&i| z(i)).collect();
    let proj = kpca_project(&pts, kernel)?;
    let c = &proj.coords;
    let dists: Vec<f64> =
        pairs.iter().map(|&(a, b)| ((c[a][0] - c[b][0]).powi(2) + (c[a][1] - c[b][1]).powi(2)).sqrt()).collect();
    let points = ids
        .iter()
        .zip(c)
        .map(|(&id, xy)| {
            let s = world.sample(id);
            ProjectedPoint {
                identity_id: s.identity_id,
                role: s.role,
                view_index: s.view_index,
                source_id: s.source_id,
                x: xy[0],
                y: xy[1],
            }
        })
        .collect();
    Ok(ProjectionReport {
        kernel,
        degenerate: proj.degenerate,
        mean_positive_distractor_distance: mean(&dists),
        points,
    })
}
