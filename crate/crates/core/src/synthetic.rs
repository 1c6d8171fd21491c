//! Seeded synthetic stand-ins for the image dataset and the brain recordings.

use alloc::vec::Vec;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rsa::{compute_rdm, Rdm, Region, SubjectRdmSet};
use crate::train::LabeledDataset;
use crate::{rng, Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Ring,
}

const SHAPES: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Ring];

const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.20, 0.15],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.90, 0.80, 0.15],
    [0.80, 0.25, 0.80],
    [0.15, 0.80, 0.85],
];

fn class_style(class: usize) -> (Shape, [f32; 3]) {
    let shape = SHAPES[class % SHAPES.len()];
    let color = PALETTE[(class + class / SHAPES.len()) % PALETTE.len()];
    (shape, color)
}

fn inside(shape: Shape, dx: f32, dy: f32, radius: f32) -> bool {
    match shape {
        Shape::Disc => dx * dx + dy * dy <= radius * radius,
        Shape::Square => dx.abs() <= radius * 0.85 && dy.abs() <= radius * 0.85,
        Shape::Triangle => {
            // apex up, base at dy = radius
            dy <= radius && dy >= -radius && dx.abs() <= (dy + radius) * 0.6
        }
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= radius * radius && d2 >= (0.55 * radius) * (0.55 * radius)
        }
    }
}

/// Renders one `[3, H, W]` image in `[0, 1]` of the given class.
fn render<R: Rng>(class: usize, (h, w): (usize, usize), r: &mut R) -> Vec<f32> {
    let (shape, base) = class_style(class);
    let color: [f32; 3] = core::array::from_fn(|c| (base[c] + r.random_range(-0.08..0.08)).clamp(0.0, 1.0));
    let background = r.random_range(0.15f32..0.55);
    let side = h.min(w) as f32;
    let radius = side * r.random_range(0.18f32..0.32);
    let cy = h as f32 / 2.0 + side * r.random_range(-0.15f32..0.15);
    let cx = w as f32 / 2.0 + side * r.random_range(-0.15f32..0.15);
    let mut img = alloc::vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let hit = inside(shape, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, radius);
            let noise = r.random_range(-0.05f32..0.05);
            for c in 0..3 {
                let v = if hit { color[c] } else { background };
                img[(c * h + y) * w + x] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// `count` images whose labels cycle through `0..classes`.
pub fn gen_stimuli(
    count: usize,
    classes: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(alloc::format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if count == 0 || size.0 == 0 || size.1 == 0 {
        return Err(Error::InvalidArgument("empty synthetic dataset".into()));
    }
    let mut r = rng::seeded(seed);
    let mut data = Vec::with_capacity(count * 3 * size.0 * size.1);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        data.extend(render(class, size, &mut r));
        labels.push(class);
    }
    let images = Tensor::from_parts(alloc::vec![count, 3, size.0, size.1], data);
    LabeledDataset::new(images, labels, classes)
}

/// Balanced labelled dataset: each class is a shape type in a colour
/// family, with seeded jitter in position, scale, colour and background.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<LabeledDataset> {
    gen_stimuli(classes * per_class, classes, size, seed)
}

/// Settings for [`synthetic_brain`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrainFixture {
    pub subjects: usize,
    /// Standard deviation of the per-subject Gaussian noise added to each
    /// dissimilarity.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BrainFixture {
    fn default() -> Self {
        BrainFixture {
            subjects: 15,
            noise: 0.25,
            seed: 0,
        }
    }
}

/// Low-level latent: correlation distance between 8x8 block-averaged pixels.
fn pixel_rdm(images: &Tensor) -> Result<Rdm> {
    let [n, c, h, w] = images.dims4()?;
    let grid = 8usize.min(h).min(w);
    let mut feats = Vec::with_capacity(n * c * grid * grid);
    for img in images.data().chunks_exact(c * h * w) {
        for plane in img.chunks_exact(h * w) {
            for gy in 0..grid {
                for gx in 0..grid {
                    let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
                    let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
                    let mut sum = 0.0f64;
                    for y in y0..y1 {
                        sum += plane[y * w + x0..y * w + x1].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    feats.push((sum / ((y1 - y0) * (x1 - x0)) as f64) as f32);
                }
            }
        }
    }
    compute_rdm(&Tensor::from_parts(alloc::vec![n, c * grid * grid], feats))
}

fn noisy_subjects(
    latent: &[f64],
    n: usize,
    region: Region,
    fixture: &BrainFixture,
    stream: u64,
) -> Result<SubjectRdmSet> {
    let mut r = rng::derive(fixture.seed, stream);
    let normal = Normal::new(0.0, fixture.noise)
        .map_err(|_| Error::InvalidArgument("noise must be non-negative".into()))?;
    let subjects = (0..fixture.subjects)
        .map(|_| {
            let tri: Vec<f64> = latent
                .iter()
                .map(|&v| (v + normal.sample(&mut r)).clamp(0.0, 2.0))
                .collect();
            Rdm::from_upper_triangle(n, &tri)
        })
        .collect::<Result<Vec<_>>>()?;
    SubjectRdmSet::new(region, subjects)
}

/// Synthetic subject RDMs for the stimuli in `stimuli`.
///
/// The EVC latent RDM is the pixel-space correlation distance of
/// block-averaged images. The IT latent mixes category membership
/// (0 within a class, 1 across) with the EVC latent at 7:3. Each subject
/// adds independent Gaussian noise to the latent triangle, clipped to
/// `[0, 2]`; the RDM stays symmetric with a zero diagonal.
pub fn synthetic_brain(
    stimuli: &LabeledDataset,
    fixture: &BrainFixture,
) -> Result<[SubjectRdmSet; 2]> {
    let n = stimuli.len();
    let evc = pixel_rdm(stimuli.images())?.upper_triangle();
    let labels = stimuli.labels();
    let mut it = Vec::with_capacity(evc.len());
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let category = if labels[i] == labels[j] { 0.0 } else { 1.0 };
            it.push(0.7 * category + 0.3 * evc[k]);
            k += 1;
        }
    }
    Ok([
        noisy_subjects(&evc, n, Region::Evc, fixture, 1)?,
        noisy_subjects(&it, n, Region::It, fixture, 2)?,
    ])
}
