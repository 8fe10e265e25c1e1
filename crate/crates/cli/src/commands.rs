use std::collections::{BTreeSet, HashMap};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use nearid::eval::{evaluate, Encoder, EvalReport, Frozen};
use nearid::format::EmbeddingFile;
use nearid::head::HeadParams;
use nearid::synthworld::SynthWorld;
use nearid::train::{train, StepRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{read_table, set_key, ConfigLoader, Provenance, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{ensure_dir, read, sidecar, write_atomic};

pub const MANIFEST: &str = "manifest.jsonl";
pub const CONFIG: &str = "config.toml";
pub const GRIDS: &str = "grids.nide";

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn to_json_line<T: Serialize>(out: &mut Vec<u8>, v: &T) {
    serde_json::to_writer(&mut *out, v).expect("plain data serializes");
    out.push(b'\n');
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub samples: usize,
    pub identities: usize,
}

/// Writes `manifest.jsonl` and `config.toml` (plus `grids.nide` when asked)
/// into `out`.
pub fn gen(cfg: &RunConfig, out: &Path, grids: bool) -> CliResult<GenSummary> {
    let world = SynthWorld::generate(cfg.world())?;
    let mut manifest = Vec::new();
    world.write_manifest(&mut manifest)?;
    ensure_dir(out)?;
    write_atomic(&out.join(MANIFEST), &manifest)?;
    write_atomic(&out.join(CONFIG), cfg.echo().as_bytes())?;
    if grids {
        let ids: Vec<u64> = world.samples.iter().map(|s| s.sample_id).collect();
        let file = EmbeddingFile::from_grids(&world.grids(&ids))?;
        write_atomic(&out.join(GRIDS), &file.to_bytes())?;
    }
    Ok(GenSummary { samples: world.samples.len(), identities: world.config.n_identities })
}

/// Rebuilds the world stored in `dir`. `loader` supplies any further
/// config layers; they may change training and evaluation keys but not the
/// world itself.
pub fn load_world(dir: &Path, mut loader: ConfigLoader<'_>) -> CliResult<(RunConfig, SynthWorld)> {
    let inherited = read_table(&dir.join(CONFIG))?;
    let stored = RunConfig::from_table(inherited.clone())?;
    loader.inherited = Some(inherited);
    let cfg = loader.load()?;
    if cfg.world() != stored.world() {
        let a = stored.to_table();
        let b = cfg.to_table();
        let key = RunConfig::KEYS.iter().find(|k| a.get(**k) != b.get(**k)).copied().unwrap_or("?");
        return Err(CliError::Config(format!(
            "`{key}` differs from the world stored in {}; regenerate the world instead",
            dir.display()
        )));
    }
    let path = dir.join(MANIFEST);
    let file = std::fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let samples = SynthWorld::read_manifest(BufReader::new(file)).map_err(|e| CliError::bad_input(&path, e))?;
    let world = SynthWorld::from_manifest(cfg.world(), samples).map_err(|e| CliError::bad_input(&path, e))?;
    Ok((cfg, world))
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: HeadParams,
    pub checkpoint: Vec<u8>,
    /// JSON lines: a provenance header, then one record per step.
    pub log: Vec<u8>,
    pub last: Option<StepRecord>,
}

pub fn train_head(cfg: &RunConfig, world: &SynthWorld) -> CliResult<Trained> {
    let outcome = train(world, &cfg.train()?, |_| {})?;
    let mut log = Vec::new();
    to_json_line(&mut log, &serde_json::json!({ "provenance": cfg.provenance() }));
    for r in &outcome.log {
        to_json_line(&mut log, r);
    }
    Ok(Trained {
        checkpoint: outcome.params.to_checkpoint_bytes(),
        params: outcome.params,
        last: outcome.log.last().cloned(),
        log,
    })
}

/// Writes the checkpoint at `out`, with `.log.jsonl` and `.config.toml`
/// beside it.
pub fn write_trained(cfg: &RunConfig, t: &Trained, out: &Path) -> CliResult<()> {
    write_atomic(out, &t.checkpoint)?;
    write_atomic(&sidecar(out, ".log.jsonl"), &t.log)?;
    write_atomic(&sidecar(out, ".config.toml"), cfg.echo().as_bytes())
}

pub fn summary_line(cfg: &RunConfig, t: &Trained) -> String {
    match &t.last {
        None => format!("{}: 0 steps, checkpoint is the initialisation", cfg.loss),
        Some(r) => format!(
            "{}: {} steps, final loss {:.6} (disc {:.6}, rank {:.6}, cohesion {:.6})",
            cfg.loss,
            r.step + 1,
            r.loss,
            r.disc,
            r.rank,
            r.cohesion
        ),
    }
}

// ---------------------------------------------------------------- eval

pub enum Model {
    Frozen,
    Head { params: Box<HeadParams>, sha256: String },
}

impl Model {
    /// `"frozen"` or a checkpoint path.
    pub fn load(spec: &str) -> CliResult<Self> {
        if spec == "frozen" {
            return Ok(Model::Frozen);
        }
        let path = Path::new(spec);
        let bytes = read(path)?;
        Self::from_checkpoint(&bytes).map_err(|e| match e {
            CliError::Core(e) => CliError::bad_input(path, e),
            other => other,
        })
    }

    pub fn from_checkpoint(bytes: &[u8]) -> CliResult<Self> {
        let params = HeadParams::from_checkpoint_bytes(bytes)?;
        Ok(Model::Head { params: Box::new(params), sha256: sha256_hex(bytes) })
    }

    fn encoder(&self) -> &dyn Encoder {
        match self {
            Model::Frozen => &Frozen,
            Model::Head { params, .. } => params.as_ref(),
        }
    }

    fn info(&self) -> ModelInfo {
        match self {
            Model::Frozen => ModelInfo { kind: "frozen".into(), checkpoint_sha256: None },
            Model::Head { sha256, .. } => ModelInfo { kind: "head".into(), checkpoint_sha256: Some(sha256.clone()) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub kind: String,
    pub checkpoint_sha256: Option<String>,
}

/// The JSON document written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub provenance: Provenance,
    pub model: ModelInfo,
    pub config: RunConfig,
    pub report: EvalReport,
}

impl ReportDocument {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = serde_json::to_vec_pretty(self).expect("report serializes");
        b.push(b'\n');
        b
    }
}

pub fn evaluate_model(cfg: &RunConfig, world: &SynthWorld, model: &Model) -> CliResult<ReportDocument> {
    if let Model::Head { params, .. } = model {
        if params.config.dim != world.config.token_dim {
            return Err(CliError::Config(format!(
                "checkpoint expects {}-dim tokens, world has {}",
                params.config.dim, world.config.token_dim
            )));
        }
    }
    let report = evaluate(world, model.encoder(), &cfg.eval())?;
    Ok(ReportDocument { provenance: cfg.provenance(), model: model.info(), config: cfg.clone(), report })
}

/// Embeddings of every sample in the evaluated split, in sample-id order.
pub fn export_embeddings(cfg: &RunConfig, world: &SynthWorld, model: &Model) -> CliResult<EmbeddingFile> {
    let grids: Vec<_> = world
        .samples
        .iter()
        .filter(|s| s.split == cfg.split)
        .map(|s| {
            let g = world.grid(s.sample_id);
            let mut t = g.tokens;
            if cfg.fg_only {
                for (mut row, fg) in t.rows_mut().into_iter().zip(g.fg_mask) {
                    if !fg {
                        row.fill(0.0);
                    }
                }
            }
            t
        })
        .collect();
    if grids.is_empty() {
        return Err(nearid::Error::MissingSplit(format!("{:?}", cfg.split).to_lowercase()).into());
    }
    let z = model.encoder().embed(&grids)?;
    let rows: Vec<Vec<f64>> = z.rows().into_iter().map(|r| r.to_vec()).collect();
    Ok(EmbeddingFile::from_embeddings(&rows)?)
}

// ---------------------------------------------------------------- ablate

/// `key=v1,v2;key=v1,...`, separated by `;` or newlines. Cells are the
/// cartesian product, first key outermost.
pub fn parse_sweep(spec: &str) -> CliResult<Vec<(String, Vec<String>)>> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for part in spec.split([';', '\n']).map(str::trim).filter(|p| !p.is_empty() && !p.starts_with('#')) {
        let (key, values) =
            part.split_once('=').ok_or_else(|| CliError::Config(format!("sweep entry `{part}` lacks `=`")))?;
        let key = key.trim();
        if !RunConfig::KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown sweep key `{key}`")));
        }
        if axes.iter().any(|(k, _)| k == key) {
            return Err(CliError::Config(format!("sweep key `{key}` given twice")));
        }
        let values: Vec<String> =
            values.split(',').map(|v| v.trim().trim_matches('"').to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(CliError::Config(format!("sweep key `{key}` has no values")));
        }
        axes.push((key.to_string(), values));
    }
    Ok(axes)
}

/// Cell configs in sweep order, duplicates (by config hash) removed.
pub fn sweep_cells(base: &RunConfig, axes: &[(String, Vec<String>)]) -> CliResult<Vec<RunConfig>> {
    let mut tables = vec![base.to_table()];
    for (key, values) in axes {
        let mut next = Vec::with_capacity(tables.len() * values.len());
        for t in &tables {
            for v in values {
                let mut t = t.clone();
                set_key(&mut t, key, v)?;
                next.push(t);
            }
        }
        tables = next;
    }
    let mut seen = BTreeSet::new();
    let mut cells = Vec::new();
    for t in tables {
        let cfg = RunConfig::from_table(t)?;
        if seen.insert(cfg.hash()) {
            cells.push(cfg);
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: usize,
    pub loss: String,
    pub alpha: f64,
    pub beta: f64,
    pub config_hash: String,
    pub ssr: Option<f64>,
    pub pa: Option<f64>,
    pub m_o: Option<f64>,
    pub m_o_pair: Option<f64>,
    pub m_h: Option<f64>,
    pub status: String,
}

fn run_cell(cfg: &RunConfig, worlds: &mut HashMap<String, SynthWorld>, dir: &Path) -> CliResult<ReportDocument> {
    cfg.validate()?;
    let key = serde_json::to_string(&cfg.world()).expect("world config serializes");
    if !worlds.contains_key(&key) {
        worlds.insert(key.clone(), SynthWorld::generate(cfg.world())?);
    }
    let world = &worlds[&key];
    let trained = train_head(cfg, world)?;
    let model = Model::from_checkpoint(&trained.checkpoint)?;
    let doc = evaluate_model(cfg, world, &model)?;
    ensure_dir(dir)?;
    write_trained(cfg, &trained, &dir.join("head.bin"))?;
    write_atomic(&dir.join("report.json"), &doc.to_bytes())?;
    Ok(doc)
}

/// Trains and evaluates every cell. Failing cells are recorded in their row
/// and the sweep continues.
pub fn ablate(base: &RunConfig, axes: &[(String, Vec<String>)], out: &Path) -> CliResult<Vec<AblationRow>> {
    let cells = sweep_cells(base, axes)?;
    ensure_dir(out)?;
    write_atomic(&out.join(CONFIG), base.echo().as_bytes())?;
    let mut worlds = HashMap::new();
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cfg) in cells.iter().enumerate() {
        let hash = cfg.hash();
        let dir = out.join("cells").join(&hash[..12]);
        let mut row = AblationRow {
            cell: i,
            loss: cfg.loss.to_string(),
            alpha: cfg.alpha,
            beta: cfg.beta,
            config_hash: hash,
            ssr: None,
            pa: None,
            m_o: None,
            m_o_pair: None,
            m_h: None,
            status: "ok".into(),
        };
        match run_cell(cfg, &mut worlds, &dir) {
            Ok(doc) => {
                let r = &doc.report;
                (row.ssr, row.pa, row.m_o, row.m_o_pair, row.m_h) = (Some(r.ssr), Some(r.pa), r.m_o, r.m_o_pair, r.m_h);
            }
            Err(e) => row.status = format!("failed (exit {}): {e}", e.exit_code()),
        }
        rows.push(row);
    }
    write_atomic(&out.join("ablation.csv"), &csv_bytes(&rows)?)?;
    Ok(rows)
}

// ---------------------------------------------------------------- report

fn csv_bytes<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Config(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Serialize)]
struct SummaryRow {
    metric: &'static str,
    value: Option<f64>,
}

#[derive(Serialize)]
struct SourceRow {
    source: u8,
    held_out: bool,
    ssr: f64,
    pa: f64,
    identities: usize,
    margins: usize,
}

#[derive(Serialize)]
struct EcdfRow {
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
    ecdf: f64,
}

#[derive(Serialize)]
struct ProjectionRow {
    identity_id: u32,
    role: String,
    view_index: u8,
    source_id: Option<u8>,
    x: f64,
    y: f64,
}

/// Reads an `eval` report and writes `summary.csv`, `per_source.csv`,
/// `margin_ecdf.csv`, `edits.csv` and, when present, `projection.csv`.
/// Returns the paths written.
pub fn report(input: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let doc: ReportDocument = serde_json::from_slice(&read(input)?).map_err(|e| CliError::bad_input(input, e))?;
    let r = &doc.report;
    ensure_dir(out)?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> CliResult<()> {
        let p = out.join(name);
        write_atomic(&p, &bytes)?;
        written.push(p);
        Ok(())
    };

    let n = |x: usize| Some(x as f64);
    let summary = vec![
        SummaryRow { metric: "ssr", value: Some(r.ssr) },
        SummaryRow { metric: "pa", value: Some(r.pa) },
        SummaryRow { metric: "m_o", value: r.m_o },
        SummaryRow { metric: "m_o_pair", value: r.m_o_pair },
        SummaryRow { metric: "m_h", value: r.m_h },
        SummaryRow { metric: "identities", value: n(r.n_identities) },
        SummaryRow { metric: "excluded_identities", value: n(r.excluded_identities) },
        SummaryRow { metric: "margins", value: n(r.n_margins) },
        SummaryRow { metric: "hierarchy_positive", value: Some(r.hierarchy.positive) },
        SummaryRow { metric: "hierarchy_distractor", value: Some(r.hierarchy.distractor) },
        SummaryRow { metric: "hierarchy_batch_negative", value: Some(r.hierarchy.batch_negative) },
        SummaryRow {
            metric: "projection_positive_distractor_distance",
            value: r.projection.as_ref().map(|p| p.mean_positive_distractor_distance),
        },
    ];
    put("summary.csv", csv_bytes(&summary)?)?;

    let world = doc.config.world();
    let sources: Vec<SourceRow> = r
        .per_source
        .iter()
        .map(|(&s, st)| SourceRow {
            source: s,
            held_out: !world.is_train_source(s),
            ssr: st.ssr,
            pa: st.pa,
            identities: st.n,
            margins: st.margins,
        })
        .collect();
    put("per_source.csv", csv_bytes(&sources)?)?;

    let h = &r.margin_histogram;
    let total: usize = h.counts.iter().sum::<usize>().max(1);
    let width = (h.hi - h.lo) / h.counts.len().max(1) as f64;
    let mut acc = 0;
    let ecdf: Vec<EcdfRow> = h
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            acc += c;
            EcdfRow {
                bin_lo: h.lo + i as f64 * width,
                bin_hi: h.lo + (i + 1) as f64 * width,
                count: c,
                ecdf: acc as f64 / total as f64,
            }
        })
        .collect();
    put("margin_ecdf.csv", csv_bytes(&ecdf)?)?;
    put("edits.csv", csv_bytes(&r.edits)?)?;

    if let Some(p) = &r.projection {
        let rows: Vec<ProjectionRow> = p
            .points
            .iter()
            .map(|q| ProjectionRow {
                identity_id: q.identity_id,
                role: serde_json::to_value(q.role).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                view_index: q.view_index,
                source_id: q.source_id,
                x: q.x,
                y: q.y,
            })
            .collect();
        put("projection.csv", csv_bytes(&rows)?)?;
    }
    Ok(written)
}
