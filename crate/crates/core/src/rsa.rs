//! Representational similarity analysis.
//!
//! A representational dissimilarity matrix (RDM) holds `1 - pearson` between
//! the response patterns of every stimulus pair. Model and brain RDMs are
//! compared through the Spearman correlation of their strict upper
//! triangles (row-major), and model scores are expressed as a percentage of
//! the leave-one-subject-out noise ceiling.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::{Error, Result, Tensor};

/// Fractional ranks `1..=n`; tied values share the mean of the positions
/// they cover.
pub fn rank_transform(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ranking needs at least 2 values, got {}",
            x.len()
        )));
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end, averaged
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    Ok(ranks)
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Product-moment correlation with two-pass centring in `f64`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            expected: vec![x.len()],
            actual: vec![y.len()],
        });
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 3 values, got {}",
            x.len()
        )));
    }
    if is_constant(x) {
        return Err(Error::ConstantVector("first"));
    }
    if is_constant(y) {
        return Err(Error::ConstantVector("second"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of the fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "spearman",
            expected: vec![x.len()],
            actual: vec![y.len()],
        });
    }
    pearson(&rank_transform(x)?, &rank_transform(y)?)
}

const SYMMETRY_TOL: f32 = 1e-6;

/// Square, symmetric dissimilarity matrix with a zero diagonal and entries
/// in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rdm {
    matrix: Tensor,
}

impl Rdm {
    pub fn new(matrix: Tensor) -> Result<Self> {
        let [n, m] = matrix.dims2()?;
        if n != m {
            return Err(Error::InvalidRdm(format!("matrix is {n}x{m}, not square")));
        }
        if n < 3 {
            return Err(Error::InvalidRdm(format!("need at least 3 stimuli, got {n}")));
        }
        let d = matrix.data();
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::InvalidRdm(format!("diagonal entry {i} is non-zero")));
            }
            for j in 0..n {
                let v = d[i * n + j];
                if !(0.0..=2.0).contains(&v) {
                    return Err(Error::InvalidRdm(format!(
                        "entry ({i}, {j}) = {v} outside [0, 2]"
                    )));
                }
                if (v - d[j * n + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidRdm(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Rdm { matrix })
    }

    pub fn n_stimuli(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor {
        self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.matrix.data()[i * self.n_stimuli() + j]
    }

    /// Strict upper triangle, row-major: `(0,1), (0,2), ..., (n-2,n-1)`.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.n_stimuli();
        let d = self.matrix.data();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            out.extend(d[i * n + i + 1..(i + 1) * n].iter().map(|&v| v as f64));
        }
        out
    }

    /// Rebuilds a symmetric RDM from a strict upper triangle.
    pub fn from_upper_triangle(n: usize, triangle: &[f64]) -> Result<Self> {
        if triangle.len() != n * n.saturating_sub(1) / 2 {
            return Err(Error::InvalidRdm(format!(
                "{} triangle entries do not fit {n} stimuli",
                triangle.len()
            )));
        }
        let mut data = vec![0.0f32; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                let v = triangle[k] as f32;
                data[i * n + j] = v;
                data[j * n + i] = v;
                k += 1;
            }
        }
        Rdm::new(Tensor::new(&[n, n], data)?)
    }
}

/// Correlation-distance RDM of `[N, D]` activations (one row per stimulus).
pub fn compute_rdm(activations: &Tensor) -> Result<Rdm> {
    let [n, d] = activations.dims2()?;
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 stimuli, got {n}")));
    }
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 features per stimulus, got {d}"
        )));
    }
    // centre and scale each row to unit norm so pearson is a dot product
    let mut rows: Vec<f64> = Vec::with_capacity(n * d);
    for (index, row) in activations.data().chunks_exact(d).enumerate() {
        if row.iter().all(|&v| v == row[0]) {
            return Err(Error::ConstantRow { index });
        }
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let start = rows.len();
        rows.extend(row.iter().map(|&v| v as f64 - mean));
        let norm = libm::sqrt(rows[start..].iter().map(|v| v * v).sum::<f64>());
        rows[start..].iter_mut().for_each(|v| *v /= norm);
    }
    let mut data = vec![0.0f32; n * n];
    for i in 0..n {
        let a = &rows[i * d..(i + 1) * d];
        for j in i + 1..n {
            let b = &rows[j * d..(j + 1) * d];
            let r: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let v = (1.0 - r.clamp(-1.0, 1.0)) as f32;
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    Ok(Rdm {
        matrix: Tensor::from_parts(vec![n, n], data),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    Evc,
    It,
}

impl Region {
    pub const ALL: [Region; 2] = [Region::Evc, Region::It];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Evc => "EVC",
            Region::It => "IT",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "EVC" => Ok(Region::Evc),
            "IT" => Ok(Region::It),
            other => Err(Error::InvalidArgument(format!(
                "unknown region {other:?}, expected EVC or IT"
            ))),
        }
    }
}

/// Per-subject RDMs of one brain region over a shared stimulus set.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRdmSet {
    region: Region,
    subjects: Vec<Rdm>,
}

impl SubjectRdmSet {
    pub fn new(region: Region, subjects: Vec<Rdm>) -> Result<Self> {
        if subjects.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{region}: need at least 2 subjects, got {}",
                subjects.len()
            )));
        }
        let n = subjects[0].n_stimuli();
        if let Some(s) = subjects.iter().position(|r| r.n_stimuli() != n) {
            return Err(Error::InvalidRdm(format!(
                "{region}: subject {s} has {} stimuli, subject 0 has {n}",
                subjects[s].n_stimuli()
            )));
        }
        Ok(SubjectRdmSet { region, subjects })
    }

    /// Splits a `[S, n, n]` stack into subject RDMs.
    pub fn from_stack(region: Region, stack: &Tensor) -> Result<Self> {
        let (s, n) = match *stack.shape() {
            [s, n, m] if n == m => (s, n),
            _ => {
                return Err(Error::InvalidShape {
                    shape: stack.shape().to_vec(),
                    reason: "subject RDMs must be stacked as [S, n, n]",
                })
            }
        };
        let subjects = (0..s)
            .map(|i| Rdm::new(stack.slice_outer(i, 1)?.reshape(&[n, n])?))
            .collect::<Result<Vec<_>>>()?;
        SubjectRdmSet::new(region, subjects)
    }

    pub fn to_stack(&self) -> Tensor {
        let mats: Vec<Tensor> = self.subjects.iter().map(|r| r.matrix().clone()).collect();
        Tensor::stack(&mats).expect("subjects share a shape")
    }

    pub fn region(&self) -> Region {
        self.region
    }

    pub fn subjects(&self) -> &[Rdm] {
        &self.subjects
    }

    pub fn n_stimuli(&self) -> usize {
        self.subjects[0].n_stimuli()
    }
}

/// Mean squared Spearman correlation of each subject with the group:
/// `lower` against the mean of the other subjects, `upper` against the
/// mean including the subject itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseCeiling {
    pub lower: f64,
    pub upper: f64,
}

fn mean_triangle<'a>(triangles: impl Iterator<Item = &'a Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    let mut count = 0usize;
    for t in triangles {
        for (a, v) in acc.iter_mut().zip(t) {
            *a += v;
        }
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    acc
}

fn degenerate(context: String) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::ConstantVector(_) => Error::DegenerateTriangle { context },
        other => other,
    }
}

pub fn noise_ceiling(set: &SubjectRdmSet) -> Result<NoiseCeiling> {
    let triangles: Vec<Vec<f64>> = set.subjects.iter().map(Rdm::upper_triangle).collect();
    let len = triangles[0].len();
    let everyone = mean_triangle(triangles.iter(), len);
    let s_count = triangles.len() as f64;
    let (mut lower, mut upper) = (0.0, 0.0);
    for (s, tri) in triangles.iter().enumerate() {
        let context = || format!("{} subject {s}", set.region);
        let others = mean_triangle(
            triangles.iter().enumerate().filter(|(i, _)| *i != s).map(|(_, t)| t),
            len,
        );
        let lo = spearman(tri, &others).map_err(degenerate(context()))?;
        let up = spearman(tri, &everyone).map_err(degenerate(context()))?;
        lower += lo * lo;
        upper += up * up;
    }
    Ok(NoiseCeiling {
        lower: lower / s_count,
        upper: upper / s_count,
    })
}

/// Agreement between one model RDM and one region's subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelScore {
    /// Spearman correlation with each subject's RDM.
    pub per_subject_r: Vec<f64>,
    /// Signed mean of `per_subject_r`.
    pub mean_r: f64,
    /// Mean of the squared per-subject correlations.
    pub mean_r2: f64,
    pub noise_ceiling: NoiseCeiling,
    /// `100 * mean_r2 / noise_ceiling.lower`.
    pub normalized_pct: f64,
    /// Sample standard deviation of the per-subject normalised percentages.
    pub std_pct: f64,
}

/// `100 * r_s^2 / lower` for each subject.
pub fn subject_pcts(per_subject_r: &[f64], ceiling_lower: f64) -> Vec<f64> {
    per_subject_r
        .iter()
        .map(|r| 100.0 * r * r / ceiling_lower)
        .collect()
}

/// Standard deviation with `n - 1` in the denominator; 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
}

pub fn score_model(model_rdm: &Rdm, subjects: &SubjectRdmSet) -> Result<ModelScore> {
    let ceiling = noise_ceiling(subjects)?;
    score_model_with_ceiling(model_rdm, subjects, ceiling)
}

/// [`score_model`] with a precomputed noise ceiling, for scoring many
/// layers against the same subjects.
pub fn score_model_with_ceiling(
    model_rdm: &Rdm,
    subjects: &SubjectRdmSet,
    ceiling: NoiseCeiling,
) -> Result<ModelScore> {
    if model_rdm.n_stimuli() != subjects.n_stimuli() {
        return Err(Error::ShapeMismatch {
            op: "score_model stimuli",
            expected: vec![subjects.n_stimuli()],
            actual: vec![model_rdm.n_stimuli()],
        });
    }
    if !(ceiling.lower > 0.0) {
        return Err(Error::DegenerateTriangle {
            context: format!("{} noise ceiling is zero", subjects.region),
        });
    }
    let model_tri = model_rdm.upper_triangle();
    let per_subject_r = subjects
        .subjects
        .iter()
        .enumerate()
        .map(|(s, rdm)| {
            spearman(&model_tri, &rdm.upper_triangle()).map_err(|e| match e {
                Error::ConstantVector("first") => Error::DegenerateTriangle {
                    context: "model RDM".to_string(),
                },
                Error::ConstantVector(_) => Error::DegenerateTriangle {
                    context: format!("{} subject {s}", subjects.region),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let count = per_subject_r.len() as f64;
    let mean_r = per_subject_r.iter().sum::<f64>() / count;
    let mean_r2 = per_subject_r.iter().map(|r| r * r).sum::<f64>() / count;
    let std_pct = sample_std(&subject_pcts(&per_subject_r, ceiling.lower));
    Ok(ModelScore {
        normalized_pct: 100.0 * mean_r2 / ceiling.lower,
        per_subject_r,
        mean_r,
        mean_r2,
        noise_ceiling: ceiling,
        std_pct,
    })
}

/// Picks the layer with the highest unweighted mean score over stimulus
/// sets. `scores` lists `(layer, per_set_scores)` in network order; ties go
/// to the earlier layer.
pub fn best_layer(scores: &[(String, Vec<f64>)], set_count: usize) -> Result<String> {
    if set_count == 0 {
        return Err(Error::InvalidArgument("no stimulus sets scored".into()));
    }
    let mut best: Option<(&str, f64)> = None;
    for (layer, per_set) in scores {
        if per_set.len() != set_count || per_set.iter().any(|v| !v.is_finite()) {
            return Err(Error::MissingScore {
                layer: layer.clone(),
            });
        }
        let mean = per_set.iter().sum::<f64>() / set_count as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((layer, mean));
        }
    }
    best.map(|(l, _)| l.to_string())
        .ok_or_else(|| Error::InvalidArgument("no layers scored".into()))
}
