//! Reading and writing the pipeline's files: raw bytes, image sets,
//! labelled datasets, brain RDM archives and activation archives.

use std::fs;
use std::path::{Path, PathBuf};

use rsaforge_core::rsa::{Region, SubjectRdmSet};
use rsaforge_core::train::LabeledDataset;
use rsaforge_core::Tensor;

use crate::format::{decode_archive, decode_tensor, encode_archive, encode_tensor};
use crate::ppm::load_ppm;
use crate::{Error, Result};

pub const IMAGES: &str = "images";
pub const LABELS: &str = "labels";

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a half-written file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_archive(&read_bytes(path)?).map_err(Error::format(path))
}

pub fn write_archive(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_archive(entries.iter().map(|(n, t)| (n.as_str(), t)))
        .map_err(Error::format(path))?;
    write_bytes(path, &bytes)
}

pub fn read_tensor(path: &Path) -> Result<(String, Tensor)> {
    decode_tensor(&read_bytes(path)?).map_err(Error::format(path))
}

pub fn write_tensor(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    let bytes = encode_tensor(name, t).map_err(Error::format(path))?;
    write_bytes(path, &bytes)
}

/// Loads stimulus images as `[N, 3, H, W]` in `[0, 1]`.
///
/// `path` is either a directory of `.ppm` files, taken in file-name order,
/// or an RDMA archive holding an `images` tensor `[N, 3, H, W]` (as in a
/// dataset archive), a single `[N, 3, H, W]` tensor, or several `[3, H, W]`
/// tensors in archive order.
pub fn load_images(path: &Path) -> Result<Tensor> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(Error::io(path))?
            .map(|e| e.map(|e| e.path()).map_err(Error::io(path)))
            .collect::<Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")));
        files.sort();
        if files.is_empty() {
            return Err(Error::Invalid(format!("{}: no .ppm files", path.display())));
        }
        let images = files
            .iter()
            .map(|f| load_ppm(&read_bytes(f)?).map_err(|source| Error::Ppm { path: f.clone(), source }))
            .collect::<Result<Vec<_>>>()?;
        return Tensor::stack(&images)
            .map_err(|e| Error::Invalid(format!("{}: images differ in size ({e})", path.display())));
    }
    let entries = read_archive(path)?;
    if let Some((_, t)) = entries.iter().find(|(n, _)| n == IMAGES) {
        return check_images(path, t.clone());
    }
    match entries.as_slice() {
        [(_, t)] if t.rank() == 4 => check_images(path, t.clone()),
        [] => Err(Error::Invalid(format!("{}: empty image archive", path.display()))),
        _ => {
            let images: Vec<Tensor> = entries.into_iter().map(|(_, t)| t).collect();
            let stacked = Tensor::stack(&images).map_err(|e| {
                Error::Invalid(format!("{}: images differ in size ({e})", path.display()))
            })?;
            check_images(path, stacked)
        }
    }
}

fn check_images(path: &Path, t: Tensor) -> Result<Tensor> {
    match t.shape() {
        [_, 3, _, _] => Ok(t),
        s => Err(Error::Invalid(format!(
            "{}: images must be [N, 3, H, W], got {s:?}",
            path.display()
        ))),
    }
}

pub fn save_images(path: &Path, images: &Tensor) -> Result<()> {
    write_archive(path, &[(IMAGES.to_string(), images.clone())])
}

/// A labelled training set: `images` `[M, 3, H, W]` and `labels` `[M]`
/// holding class indices.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let entries = read_archive(path)?;
    let get = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Invalid(format!("{}: missing tensor {name:?}", path.display())))
    };
    let images = check_images(path, get(IMAGES)?)?;
    let labels = get(LABELS)?
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Invalid(format!("{}: label {v} is not a class index", path.display())))
            }
        })
        .collect::<Result<Vec<usize>>>()?;
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Ok(LabeledDataset::new(images, labels, classes)?)
}

pub fn save_dataset(path: &Path, data: &LabeledDataset) -> Result<()> {
    let labels: Vec<f32> = data.labels().iter().map(|&l| l as f32).collect();
    let labels = Tensor::new(&[labels.len()], labels)?;
    write_archive(
        path,
        &[
            (IMAGES.to_string(), data.images().clone()),
            (LABELS.to_string(), labels),
        ],
    )
}

/// Brain archive: one `[S, n, n]` tensor per region, named `EVC` and `IT`.
pub fn load_brain(path: &Path) -> Result<Vec<SubjectRdmSet>> {
    let entries = read_archive(path)?;
    Region::ALL
        .iter()
        .map(|&region| {
            let (_, stack) = entries
                .iter()
                .find(|(n, _)| n == region.as_str())
                .ok_or_else(|| {
                    Error::Invalid(format!("{}: missing region {region}", path.display()))
                })?;
            SubjectRdmSet::from_stack(region, stack).map_err(|e| {
                Error::Invalid(format!("{}: region {region}: {e}", path.display()))
            })
        })
        .collect()
}

pub fn save_brain(path: &Path, sets: &[SubjectRdmSet]) -> Result<()> {
    let entries: Vec<(String, Tensor)> = sets
        .iter()
        .map(|s| (s.region().as_str().to_string(), s.to_stack()))
        .collect();
    write_archive(path, &entries)
}
