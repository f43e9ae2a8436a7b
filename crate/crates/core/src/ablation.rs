//! Seeded experiment grids over sensor configurations and their
//! interquartile aggregation.
//!
//! A run directory has a fixed layout:
//!
//! ```text
//! <out>/grid.toml                  resolved grid definition
//! <out>/records/<cell>__s<k>.json  one record per (cell, seed), written once
//! <out>/summaries/iqr.csv          cell,iteration,q25,mean,q75
//! <out>/manifest.json              grid, hashes of every record
//! ```

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::sensors::{Geometry, Reduction, SensorNetConfig, SignalFn, DEFAULT_RANGES};

/// One sensor configuration of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub geometry: Geometry,
    pub signal: SignalFn,
    #[serde(default)]
    pub reduction: Reduction,
    pub range: f64,
}

impl Cell {
    pub fn new(geometry: Geometry, signal: SignalFn, reduction: Reduction, range: f64) -> Self {
        Cell { geometry, signal, reduction, range }
    }

    /// Stable identifier usable as a file-name stem.
    pub fn id(&self) -> String {
        format!("{}-{}-{}-r{}", self.geometry, self.signal, self.reduction, self.range)
    }

    pub fn sensor_config(&self, base: &SensorNetConfig) -> SensorNetConfig {
        SensorNetConfig {
            geometry: self.geometry,
            signal: self.signal,
            reduction: self.reduction,
            range: self.range,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_num_envs")]
    pub num_envs: usize,
    /// Everything besides the sensor cell; `ppo.iterations` and
    /// `ppo.num_envs` are overridden by the grid-level fields.
    #[serde(default)]
    pub base: RunConfig,
    pub cells: Vec<Cell>,
}

fn default_seeds() -> usize {
    10
}

fn default_iterations() -> usize {
    300
}

fn default_num_envs() -> usize {
    256
}

impl ExperimentGrid {
    /// All geometry × signal × range permutations with full readouts, plus
    /// the min-depth and any-hit reductions of the ray grid.
    pub fn full_default() -> Self {
        let mut cells = Vec::new();
        for geometry in [Geometry::RayGrid, Geometry::Field] {
            for signal in [SignalFn::Localization, SignalFn::Proximity, SignalFn::Binary] {
                for range in DEFAULT_RANGES {
                    cells.push(Cell::new(geometry, signal, Reduction::Full, range));
                }
            }
        }
        for (signal, reduction) in [(SignalFn::Proximity, Reduction::MinBeam), (SignalFn::Binary, Reduction::AnyBeam)] {
            for range in DEFAULT_RANGES {
                cells.push(Cell::new(Geometry::RayGrid, signal, reduction, range));
            }
        }
        ExperimentGrid {
            seeds: default_seeds(),
            iterations: default_iterations(),
            num_envs: default_num_envs(),
            base: RunConfig::default(),
            cells,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::config("experiment grid has no cells"));
        }
        if self.seeds < 2 {
            return Err(Error::config("experiment grid needs at least 2 seeds per cell"));
        }
        let mut seen = HashSet::new();
        for c in &self.cells {
            if !seen.insert(c.id()) {
                return Err(Error::config(format!("duplicate grid cell {}", c.id())));
            }
            self.run_config(c).validate()?;
        }
        Ok(())
    }

    /// Full run configuration of one cell.
    pub fn run_config(&self, cell: &Cell) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.sensors = cell.sensor_config(&self.base.sensors);
        cfg.ppo.iterations = self.iterations;
        cfg.ppo.num_envs = self.num_envs;
        cfg
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse { path: origin.to_path_buf(), message: e.to_string() })
    }

    /// Load a grid file; a relative `base.robot` path is resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut grid = Self::from_toml_str(&text, path)?;
        if let (Some(robot), Some(dir)) = (&grid.base.robot, path.parent()) {
            if robot.is_relative() {
                grid.base.robot = Some(dir.join(robot));
            }
        }
        Ok(grid)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grid serializes")
    }

    /// SHA-256 over the canonical JSON form; changes iff any field changes.
    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("grid serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Per-iteration values kept from a learning curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mean_ep_len: f64,
    pub mean_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: Cell,
    pub seed: u64,
    pub curve: Vec<CurvePoint>,
    pub wall_time_s: f64,
    /// Present when the run aborted; such runs are excluded from aggregation.
    #[serde(default)]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn file_name(cell: &Cell, seed: u64) -> String {
        format!("{}__s{}.json", cell.id(), seed)
    }

    /// Mean episode length over the last 10% of iterations (at least one).
    pub fn final_window_metric(&self) -> f64 {
        final_window_mean(&self.curve.iter().map(|p| p.mean_ep_len).collect::<Vec<_>>())
    }

    /// Mean episode length over the whole curve (normalized area under it).
    pub fn area_metric(&self) -> f64 {
        let n = self.curve.len().max(1) as f64;
        self.curve.iter().map(|p| p.mean_ep_len).sum::<f64>() / n
    }
}

pub fn final_window_mean(curve: &[f64]) -> f64 {
    if curve.is_empty() {
        return f64::NAN;
    }
    let w = curve.len().div_ceil(10).max(1);
    curve[curve.len() - w..].iter().sum::<f64>() / w as f64
}

/// Progress callback for [`run_grid`]: (record, was it loaded from disk).
pub type Progress<'a> = dyn Fn(&RunRecord, bool) + Sync + 'a;

/// Train every (cell, seed) pair, persisting each record as soon as it
/// finishes. With `resume`, records already on disk are loaded instead of
/// recomputed.
pub fn run_grid(grid: &ExperimentGrid, out: &Path, resume: bool, progress: &Progress<'_>) -> Result<Vec<RunRecord>> {
    grid.validate()?;
    let records_dir = out.join("records");
    std::fs::create_dir_all(&records_dir).map_err(|e| Error::io(&records_dir, e))?;
    let grid_path = out.join("grid.toml");
    std::fs::write(&grid_path, grid.to_toml()).map_err(|e| Error::io(&grid_path, e))?;

    let jobs: Vec<(Cell, u64)> =
        grid.cells.iter().flat_map(|c| (0..grid.seeds as u64).map(move |s| (c.clone(), s))).collect();
    jobs.par_iter()
        .map(|(cell, seed)| {
            let path = records_dir.join(RunRecord::file_name(cell, *seed));
            if resume && path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                if let Ok(rec) = serde_json::from_str::<RunRecord>(&text) {
                    if rec.cell == *cell && rec.seed == *seed && (!rec.ok() || rec.curve.len() == grid.iterations) {
                        progress(&rec, true);
                        return Ok(rec);
                    }
                }
                log::warn!("ignoring unreadable or stale record {}", path.display());
            }
            let rec = run_one(grid, cell, *seed);
            write_atomic(&path, serde_json::to_string_pretty(&rec).expect("record serializes").as_bytes())?;
            progress(&rec, false);
            Ok(rec)
        })
        .collect()
}

fn run_one(grid: &ExperimentGrid, cell: &Cell, seed: u64) -> RunRecord {
    let start = Instant::now();
    let cfg = grid.run_config(cell);
    let result = cfg.train(seed, |_, _| {});
    let wall_time_s = start.elapsed().as_secs_f64();
    match result {
        Ok(outcome) => RunRecord {
            cell: cell.clone(),
            seed,
            curve: outcome
                .curve
                .iter()
                .map(|r| CurvePoint { mean_ep_len: r.mean_ep_len, mean_reward: r.mean_reward })
                .collect(),
            wall_time_s,
            error: None,
        },
        Err(e) => RunRecord { cell: cell.clone(), seed, curve: Vec::new(), wall_time_s, error: Some(e.to_string()) },
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Successful runs sorted ascending by `metric`, ties broken by seed.
pub fn rank_runs(records: &[RunRecord], metric: impl Fn(&RunRecord) -> f64) -> Vec<&RunRecord> {
    let mut ok: Vec<(f64, &RunRecord)> = records.iter().filter(|r| r.ok()).map(|r| (metric(r), r)).collect();
    ok.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.seed.cmp(&b.1.seed)));
    ok.into_iter().map(|(_, r)| r).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqrPoint {
    pub q25: f64,
    pub mean: f64,
    pub q75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqrSummary {
    pub points: Vec<IqrPoint>,
    /// Seeds of the retained runs, in rank order.
    pub retained: Vec<u64>,
    /// Mean final-window metric of the retained runs.
    pub retained_metric: f64,
}

/// Drop `floor(n/4)` runs from each end by final-window episode length;
/// per iteration, the retained runs give the mean and the min/max band.
pub fn iqr_aggregate(records: &[RunRecord]) -> Result<IqrSummary> {
    let failed = records.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        log::warn!("excluding {failed} failed run(s) from aggregation");
    }
    let ranked = rank_runs(records, RunRecord::final_window_metric);
    if ranked.is_empty() {
        return Err(Error::Aggregation("no successful runs to aggregate".into()));
    }
    if ranked.len() < 2 {
        return Err(Error::Aggregation("at least two successful runs are needed".into()));
    }
    let drop = ranked.len() / 4;
    let kept = &ranked[drop..ranked.len() - drop];
    let len = kept[0].curve.len();
    if kept.iter().any(|r| r.curve.len() != len) {
        return Err(Error::Aggregation("runs have learning curves of different lengths".into()));
    }
    let points = (0..len)
        .map(|i| {
            let vals = kept.iter().map(|r| r.curve[i].mean_ep_len);
            let mean = vals.clone().sum::<f64>() / kept.len() as f64;
            let q25 = vals.clone().fold(f64::INFINITY, f64::min);
            let q75 = vals.fold(f64::NEG_INFINITY, f64::max);
            IqrPoint { q25, mean, q75 }
        })
        .collect();
    let retained_metric = kept.iter().map(|r| r.final_window_metric()).sum::<f64>() / kept.len() as f64;
    Ok(IqrSummary { points, retained: kept.iter().map(|r| r.seed).collect(), retained_metric })
}

pub const IQR_HEADER: &str = "cell,iteration,q25,mean,q75";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: ExperimentGrid,
    pub grid_hash: String,
    pub records: Vec<ManifestEntry>,
    pub failed: Vec<String>,
}

/// Write `summaries/iqr.csv` and `manifest.json`; returns the summaries by cell.
pub fn export(grid: &ExperimentGrid, records: &[RunRecord], out: &Path) -> Result<Vec<(Cell, IqrSummary)>> {
    let sum_dir = out.join("summaries");
    std::fs::create_dir_all(&sum_dir).map_err(|e| Error::io(&sum_dir, e))?;
    let mut summaries = Vec::new();
    let mut csv = Vec::new();
    writeln!(csv, "{IQR_HEADER}").unwrap();
    for cell in &grid.cells {
        let cell_records: Vec<RunRecord> = records.iter().filter(|r| r.cell == *cell).cloned().collect();
        let summary = match iqr_aggregate(&cell_records) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("cell {}: {e}", cell.id());
                continue;
            }
        };
        for (i, p) in summary.points.iter().enumerate() {
            writeln!(csv, "{},{},{},{},{}", cell.id(), i, p.q25, p.mean, p.q75).unwrap();
        }
        summaries.push((cell.clone(), summary));
    }
    let csv_path = sum_dir.join("iqr.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let mut entries = Vec::new();
    let mut failed = Vec::new();
    for r in records {
        let name = RunRecord::file_name(&r.cell, r.seed);
        let path = out.join("records").join(&name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry { file: format!("records/{name}"), sha256: sha256_hex(&bytes) });
        if !r.ok() {
            failed.push(name);
        }
    }
    let manifest = Manifest { grid: grid.clone(), grid_hash: grid.config_hash(), records: entries, failed };
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(summaries)
}

/// Directory holding the record of `(cell, seed)` under a run directory.
pub fn record_path(out: &Path, cell: &Cell, seed: u64) -> PathBuf {
    out.join("records").join(RunRecord::file_name(cell, seed))
}
