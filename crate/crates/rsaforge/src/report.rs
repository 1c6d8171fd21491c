//! Score reports, leaderboard rows, the results ledger and CSV/JSON reports.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use rsaforge_core::rsa::{
    best_layer, sample_std, score_model_with_ceiling, subject_pcts, NoiseCeiling, Rdm, Region,
    SubjectRdmSet,
};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ceiling {
    pub lower: f64,
    pub upper: f64,
}

impl From<NoiseCeiling> for Ceiling {
    fn from(nc: NoiseCeiling) -> Self {
        Ceiling {
            lower: nc.lower,
            upper: nc.upper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: String,
    pub mean_r: f64,
    pub mean_r2: f64,
    pub normalized_pct: f64,
    pub std_pct: f64,
    pub per_subject_r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub region: String,
    pub subjects: usize,
    pub noise_ceiling: Ceiling,
    pub layers: Vec<LayerScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub name: String,
    pub n_stimuli: usize,
    pub regions: Vec<RegionReport>,
}

impl SetReport {
    fn region(&self, region: &str) -> Option<&RegionReport> {
        self.regions.iter().find(|r| r.region == region)
    }

    /// Mean over regions of a layer's normalised percentage.
    pub fn layer_pct(&self, layer: &str) -> Option<f64> {
        let pcts: Option<Vec<f64>> = self
            .regions
            .iter()
            .map(|r| r.layers.iter().find(|l| l.layer == layer).map(|l| l.normalized_pct))
            .collect();
        let pcts = pcts?;
        (!pcts.is_empty()).then(|| pcts.iter().sum::<f64>() / pcts.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMean {
    pub layer: String,
    /// Region-averaged percentage on each set, in report order.
    pub per_set: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub sets: Vec<SetReport>,
    pub layers: Vec<LayerMean>,
    pub best_layer: String,
}

/// Scores every layer RDM against every region of one stimulus set.
pub fn score_set(name: &str, rdms: &[(String, Rdm)], brain: &[SubjectRdmSet]) -> Result<SetReport> {
    let n = brain
        .first()
        .map(SubjectRdmSet::n_stimuli)
        .ok_or_else(|| Error::Invalid(format!("set {name}: no brain regions")))?;
    let regions = brain
        .iter()
        .map(|subjects| {
            let ceiling = rsaforge_core::rsa::noise_ceiling(subjects).map_err(|e| {
                Error::Invalid(format!("set {name}, {}: {e}", subjects.region()))
            })?;
            let layers = rdms
                .iter()
                .map(|(layer, rdm)| {
                    let s = score_model_with_ceiling(rdm, subjects, ceiling).map_err(|e| {
                        Error::Invalid(format!(
                            "set {name}, {}, layer {layer}: {e}",
                            subjects.region()
                        ))
                    })?;
                    Ok(LayerScore {
                        layer: layer.clone(),
                        mean_r: s.mean_r,
                        mean_r2: s.mean_r2,
                        normalized_pct: s.normalized_pct,
                        std_pct: s.std_pct,
                        per_subject_r: s.per_subject_r,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RegionReport {
                region: subjects.region().as_str().to_string(),
                subjects: subjects.subjects().len(),
                noise_ceiling: ceiling.into(),
                layers,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SetReport {
        name: name.to_string(),
        n_stimuli: n,
        regions,
    })
}

/// Combines per-set reports and picks the best layer: highest mean over
/// sets of the region-averaged percentage, ties to the earlier layer.
pub fn combine(sets: Vec<SetReport>, layer_order: &[String]) -> Result<ScoreReport> {
    let layers = layer_order
        .iter()
        .map(|layer| {
            let per_set = sets
                .iter()
                .map(|s| s.layer_pct(layer).unwrap_or(f64::NAN))
                .collect::<Vec<_>>();
            let mean = per_set.iter().sum::<f64>() / per_set.len().max(1) as f64;
            LayerMean {
                layer: layer.clone(),
                per_set,
                mean,
            }
        })
        .collect::<Vec<_>>();
    let table: Vec<(String, Vec<f64>)> = layers
        .iter()
        .map(|l| (l.layer.clone(), l.per_set.clone()))
        .collect();
    let best_layer = best_layer(&table, sets.len())?;
    Ok(ScoreReport {
        sets,
        layers,
        best_layer,
    })
}

/// Per-subject correlations kept in a ledger row so its summary numbers
/// can be recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowCell {
    pub set: String,
    pub region: String,
    pub noise_ceiling_lower: f64,
    pub per_subject_r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub model: String,
    pub epoch: usize,
    pub evc_pct: f64,
    pub it_pct: f64,
    pub mean_pct: f64,
    pub stddev: f64,
    pub best_layer: String,
    pub cells: Vec<RowCell>,
}

impl LeaderboardRow {
    /// Summarises the best layer of `report`. Region percentages are
    /// averaged over sets; `stddev` is the mean, over (set, region) cells,
    /// of the across-subject sample standard deviation of `100 r_s^2 / nc`.
    pub fn from_report(model: &str, epoch: usize, report: &ScoreReport) -> Result<Self> {
        let best = &report.best_layer;
        let mut cells = Vec::new();
        let mut region_pct = |region: Region| -> Result<f64> {
            let mut total = 0.0;
            for set in &report.sets {
                let r = set.region(region.as_str()).ok_or_else(|| {
                    Error::Invalid(format!("set {} has no {region} scores", set.name))
                })?;
                let layer = r.layers.iter().find(|l| &l.layer == best).ok_or_else(|| {
                    Error::Invalid(format!("set {} has no score for {best}", set.name))
                })?;
                total += layer.normalized_pct;
                cells.push(RowCell {
                    set: set.name.clone(),
                    region: r.region.clone(),
                    noise_ceiling_lower: r.noise_ceiling.lower,
                    per_subject_r: layer.per_subject_r.clone(),
                });
            }
            Ok(total / report.sets.len() as f64)
        };
        let evc_pct = region_pct(Region::Evc)?;
        let it_pct = region_pct(Region::It)?;
        let stddev = cells
            .iter()
            .map(|c| sample_std(&subject_pcts(&c.per_subject_r, c.noise_ceiling_lower)))
            .sum::<f64>()
            / cells.len() as f64;
        Ok(LeaderboardRow {
            model: model.to_string(),
            epoch,
            evc_pct,
            it_pct,
            mean_pct: (evc_pct + it_pct) / 2.0,
            stddev,
            best_layer: best.clone(),
            cells,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub rows: Vec<LeaderboardRow>,
}

fn parse_ledger(path: &Path, text: &str) -> Result<Ledger> {
    if text.trim().is_empty() {
        return Ok(Ledger::default());
    }
    serde_json::from_str(text).map_err(Error::json(path))
}

pub fn read_ledger(path: &Path) -> Result<Ledger> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_ledger(path, &text)
}

/// Appends one row under an exclusive advisory lock. Existing rows are
/// never rewritten in content or order.
pub fn append_to_ledger(path: &Path, row: &LeaderboardRow) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(false)
        .open(path)
        .map_err(Error::io(path))?;
    file.lock().map_err(Error::io(path))?;
    let result = append_locked(path, &mut file, row);
    let unlocked = file.unlock().map_err(Error::io(path));
    result.and(unlocked)
}

fn append_locked(path: &Path, file: &mut File, row: &LeaderboardRow) -> Result<()> {
    let mut text = String::new();
    file.read_to_string(&mut text).map_err(Error::io(path))?;
    let mut ledger = parse_ledger(path, &text)?;
    ledger.rows.push(row.clone());
    let mut bytes = serde_json::to_vec_pretty(&ledger).map_err(Error::json(path))?;
    bytes.push(b'\n');
    file.seek(SeekFrom::Start(0)).map_err(Error::io(path))?;
    file.set_len(0).map_err(Error::io(path))?;
    file.write_all(&bytes).map_err(Error::io(path))?;
    file.sync_all().map_err(Error::io(path))
}

/// One line of a leaderboard report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub epoch: usize,
    pub evc_pct: f64,
    pub it_pct: f64,
    pub mean_pct: f64,
    pub stddev: f64,
    pub best_layer: String,
}

pub const REPORT_HEADER: [&str; 7] = [
    "model",
    "epoch",
    "evc_pct",
    "it_pct",
    "mean_pct",
    "stddev",
    "best_layer",
];

/// Ledger rows sorted by descending mean score (stable for ties).
pub fn report_rows(ledger: &Ledger) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = ledger
        .rows
        .iter()
        .map(|r| ReportRow {
            model: r.model.clone(),
            epoch: r.epoch,
            evc_pct: r.evc_pct,
            it_pct: r.it_pct,
            mean_pct: r.mean_pct,
            stddev: r.stddev,
            best_layer: r.best_layer.clone(),
        })
        .collect();
    rows.sort_by(|a, b| b.mean_pct.total_cmp(&a.mean_pct));
    rows
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(REPORT_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != REPORT_HEADER {
        return Err(Error::Invalid(format!("unexpected report header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn report_json(rows: &[ReportRow]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::Invalid(format!("json: {e}")))?;
    s.push('\n');
    Ok(s)
}
