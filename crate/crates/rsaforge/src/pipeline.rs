//! The evaluation pipeline: activations → RDMs → scores.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rsaforge_core::image::{preprocess_batch, IMAGENET_MEAN, IMAGENET_STD};
use rsaforge_core::rsa::{compute_rdm, Rdm, SubjectRdmSet};
use rsaforge_core::{Model, Tensor, TAPS};

use crate::checkpoint::load_checkpoint_inferred;
use crate::data::{
    load_brain, load_images, read_archive, read_bytes, read_tensor, write_archive, write_bytes,
    write_tensor,
};
use crate::report::{append_to_ledger, combine, score_set, LeaderboardRow, ScoreReport, SetReport};
use crate::{Error, Result};

pub const THREADS_ENV: &str = "RSAFORGE_THREADS";

/// Images per forward pass during extraction. Fixed, so results do not
/// depend on the worker count.
pub const EXTRACT_BATCH: usize = 16;

/// Worker count from `RSAFORGE_THREADS`, or the available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Per-channel normalisation applied after resizing to the model input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

/// Taps in network order; an unknown name is a usage error that lists the
/// valid ones.
pub fn parse_taps<S: AsRef<str>>(names: &[S]) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for name in names {
        let name = name.as_ref().trim();
        if !TAPS.contains(&name) {
            return Err(Error::Usage(format!(
                "unknown tap {name:?}; valid taps: {}",
                TAPS.join(", ")
            )));
        }
        if !out.iter().any(|t| t == name) {
            out.push(name.to_string());
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("no taps requested".into()));
    }
    out.sort_by_key(|t| TAPS.iter().position(|k| k == t));
    Ok(out)
}

/// Eval-mode activations `[N, D]` for each tap, in tap order.
///
/// Images are resized to the model input and normalised, then run in
/// fixed-size batches spread over `workers` threads. Batches are
/// reassembled in order, so the output is identical for any worker count.
pub fn extract(
    model: &Model,
    images: &Tensor,
    taps: &[String],
    norm: &Normalization,
    workers: usize,
) -> Result<Vec<(String, Tensor)>> {
    let inputs = preprocess_batch(images, model.config().input_size, norm.mean, norm.std)?;
    let n = inputs.shape()[0];
    let tap_refs: Vec<&str> = taps.iter().map(String::as_str).collect();
    let starts: Vec<usize> = (0..n).step_by(EXTRACT_BATCH).collect();
    let run = |start: usize| -> Result<BTreeMap<String, Tensor>> {
        let batch = inputs.slice_outer(start, EXTRACT_BATCH.min(n - start))?;
        Ok(model.forward_with_taps(&batch, &tap_refs)?)
    };
    let workers = workers.clamp(1, starts.len().max(1));
    let mut results: Vec<Option<Result<BTreeMap<String, Tensor>>>> =
        (0..starts.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, &s) in results.iter_mut().zip(&starts) {
            *slot = Some(run(s));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run = &run;
                    let starts = &starts;
                    scope.spawn(move || {
                        (w..starts.len())
                            .step_by(workers)
                            .map(|i| (i, run(starts[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("extraction worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    let batches = results
        .into_iter()
        .map(|r| r.expect("every batch assigned"))
        .collect::<Result<Vec<_>>>()?;
    taps.iter()
        .map(|tap| {
            let parts: Vec<Tensor> = batches.iter().map(|b| b[tap].clone()).collect();
            Ok((tap.clone(), Tensor::concat_outer(&parts)?))
        })
        .collect()
}

/// One RDM per activation tensor. Errors name the layer and, for a
/// constant row, the stimulus.
pub fn compute_rdms(activations: &[(String, Tensor)]) -> Result<Vec<(String, Rdm)>> {
    activations
        .iter()
        .map(|(layer, acts)| {
            compute_rdm(acts)
                .map(|r| (layer.clone(), r))
                .map_err(|e| Error::Invalid(format!("layer {layer}: {e}")))
        })
        .collect()
}

/// Orders layer names as the network does; names outside the tap set
/// follow in lexical order.
pub fn network_order(names: &mut [String]) {
    names.sort_by(|a, b| {
        let rank = |n: &str| TAPS.iter().position(|t| *t == n).unwrap_or(TAPS.len());
        rank(a).cmp(&rank(b)).then_with(|| a.cmp(b))
    });
}

pub fn rdm_path(dir: &Path, layer: &str) -> PathBuf {
    dir.join(format!("{layer}.rdmt"))
}

pub fn write_rdms(dir: &Path, rdms: &[(String, Rdm)]) -> Result<Vec<PathBuf>> {
    rdms.iter()
        .map(|(layer, rdm)| {
            let path = rdm_path(dir, layer);
            write_tensor(&path, layer, rdm.matrix())?;
            Ok(path)
        })
        .collect()
}

/// Reads every `*.rdmt` file in `dir`, in network order.
pub fn read_rdms(dir: &Path) -> Result<Vec<(String, Rdm)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(Error::io(dir)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "rdmt"));
    if paths.is_empty() {
        return Err(Error::Invalid(format!("{}: no .rdmt files", dir.display())));
    }
    let mut rdms = paths
        .iter()
        .map(|p| {
            let (name, t) = read_tensor(p)?;
            let rdm = Rdm::new(t).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
            Ok((name, rdm))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut names: Vec<String> = rdms.iter().map(|(n, _)| n.clone()).collect();
    network_order(&mut names);
    rdms.sort_by_key(|(n, _)| names.iter().position(|m| m == n));
    Ok(rdms)
}

pub fn write_report(path: &Path, report: &ScoreReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report).map_err(Error::json(path))?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_report(path: &Path) -> Result<ScoreReport> {
    serde_json::from_slice(&read_bytes(path)?).map_err(Error::json(path))
}

/// Scores precomputed layer RDMs against one stimulus set's brain data.
pub fn score(rdms: &[(String, Rdm)], brain: &[SubjectRdmSet], set: &str) -> Result<ScoreReport> {
    let report = score_set(set, rdms, brain)?;
    let order: Vec<String> = rdms.iter().map(|(n, _)| n.clone()).collect();
    combine(vec![report], &order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusSet {
    pub name: String,
    /// PPM directory or RDMA image archive.
    pub images: PathBuf,
    /// RDMA archive with `EVC` and `IT` subject RDM stacks.
    pub brain: PathBuf,
}

/// Everything `evaluate` needs. Relative paths are resolved against the
/// manifest's own directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    /// Model label for the leaderboard; see [`EvalManifest::label`].
    #[serde(default)]
    pub label: Option<String>,
    pub checkpoint: PathBuf,
    pub sets: Vec<StimulusSet>,
    #[serde(default = "all_taps")]
    pub taps: Vec<String>,
    #[serde(default = "default_input")]
    pub input_size: [usize; 2],
    #[serde(default)]
    pub normalization: Normalization,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ledger: Option<PathBuf>,
}

fn all_taps() -> Vec<String> {
    TAPS.iter().map(|t| t.to_string()).collect()
}

fn default_input() -> [usize; 2] {
    [64, 64]
}

impl EvalManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut m: EvalManifest =
            serde_json::from_slice(&read_bytes(path)?).map_err(Error::json(path))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut m.checkpoint);
        resolve(&mut m.output_dir);
        if let Some(l) = m.ledger.as_mut() {
            resolve(l);
        }
        for s in &mut m.sets {
            resolve(&mut s.images);
            resolve(&mut s.brain);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sets.is_empty() {
            return Err(Error::Invalid("manifest lists no stimulus sets".into()));
        }
        parse_taps(&self.taps)?;
        for (i, s) in self.sets.iter().enumerate() {
            if self.sets[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Invalid(format!("stimulus set {:?} listed twice", s.name)));
            }
            let valid = !s.name.is_empty()
                && s.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
                && s.name != "."
                && s.name != "..";
            if !valid {
                return Err(Error::Invalid(format!("stimulus set name {:?} is not a plain file name", s.name)));
            }
        }
        let mut missing = vec![&self.checkpoint];
        for s in &self.sets {
            missing.extend([&s.images, &s.brain]);
        }
        if let Some(p) = missing.into_iter().find(|p| !p.exists()) {
            return Err(Error::Invalid(format!("{} does not exist", p.display())));
        }
        Ok(())
    }

    /// The explicit label, else the name of the directory holding the
    /// checkpoint (one training run), else the checkpoint's file stem.
    pub fn label(&self) -> String {
        let name = |p: Option<&std::ffi::OsStr>| p.map(|s| s.to_string_lossy().into_owned());
        self.label
            .clone()
            .or_else(|| name(self.checkpoint.parent().and_then(Path::file_name)))
            .or_else(|| name(self.checkpoint.file_stem()))
            .unwrap_or_else(|| "model".into())
    }
}

/// Output locations under a manifest's `output_dir`.
pub fn activations_path(out: &Path, set: &str) -> PathBuf {
    out.join(set).join("activations.rdma")
}

pub fn rdm_dir(out: &Path, set: &str) -> PathBuf {
    out.join(set).join("rdm")
}

pub fn report_path(out: &Path) -> PathBuf {
    out.join("scores.json")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: ScoreReport,
    pub row: LeaderboardRow,
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Removes whatever this run created if it fails part-way.
struct Created {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    keep: bool,
}

impl Created {
    fn dir(&mut self, dir: &Path) -> Result<()> {
        let mut fresh = Vec::new();
        let mut d = Some(dir);
        while let Some(p) = d.filter(|p| !p.as_os_str().is_empty() && !p.exists()) {
            fresh.push(p.to_path_buf());
            d = p.parent();
        }
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        self.dirs.extend(fresh.into_iter().rev());
        Ok(())
    }
}

impl Drop for Created {
    fn drop(&mut self) {
        if self.keep {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
}

/// Runs extract → rdm → score for every stimulus set of `manifest`,
/// writes the activations, RDMs and score report under `output_dir`, and
/// appends one leaderboard row to `ledger` when given (the manifest's own
/// ledger otherwise). On failure, files written by this run are removed.
pub fn evaluate(manifest: &EvalManifest, ledger: Option<&Path>, workers: usize) -> Result<EvalOutcome> {
    manifest.validate()?;
    let taps = parse_taps(&manifest.taps)?;
    let [h, w] = manifest.input_size;
    let checkpoint = load_checkpoint_inferred(&read_bytes(&manifest.checkpoint)?, (h, w))
        .map_err(Error::in_stage("load checkpoint"))?;
    let out = &manifest.output_dir;
    let mut created = Created {
        files: Vec::new(),
        dirs: Vec::new(),
        keep: false,
    };
    let mut warnings = Vec::new();
    let mut set_reports: Vec<SetReport> = Vec::new();
    for set in &manifest.sets {
        let images = load_images(&set.images).map_err(Error::in_stage("extract"))?;
        let acts = extract(&checkpoint.model, &images, &taps, &manifest.normalization, workers)
            .map_err(Error::in_stage("extract"))?;
        let acts_path = activations_path(out, &set.name);
        created.dir(acts_path.parent().expect("set directory"))?;
        created.files.push(acts_path.clone());
        write_archive(&acts_path, &acts).map_err(Error::in_stage("extract"))?;

        let rdms = compute_rdms(&acts).map_err(Error::in_stage("rdm"))?;
        let dir = rdm_dir(out, &set.name);
        created.dir(&dir)?;
        created.files.extend(rdms.iter().map(|(l, _)| rdm_path(&dir, l)));
        write_rdms(&dir, &rdms).map_err(Error::in_stage("rdm"))?;

        let brain = load_brain(&set.brain).map_err(Error::in_stage("score"))?;
        set_reports.push(score_set(&set.name, &rdms, &brain).map_err(Error::in_stage("score"))?);
    }
    if manifest.sets.len() == 1 {
        warnings.push(format!(
            "only one stimulus set ({}); best layer chosen from it alone",
            manifest.sets[0].name
        ));
    }
    let report = combine(set_reports, &taps).map_err(Error::in_stage("score"))?;
    let row = LeaderboardRow::from_report(&manifest.label(), checkpoint.epoch, &report)
        .map_err(Error::in_stage("score"))?;
    let rpath = report_path(out);
    created.dir(out)?;
    created.files.push(rpath.clone());
    write_report(&rpath, &report).map_err(Error::in_stage("score"))?;
    if let Some(ledger) = ledger.or(manifest.ledger.as_deref()) {
        append_to_ledger(ledger, &row).map_err(Error::in_stage("ledger"))?;
    }
    created.keep = true;
    Ok(EvalOutcome {
        report,
        row,
        files: created.files.clone(),
        warnings,
    })
}

/// Reads an activation archive written by [`extract`].
pub fn read_activations(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_archive(path)
}
