use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Normalization, RawDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed seed for blob centers, so train and test draws share classes.
const BLOB_CENTER_SEED: u64 = 0x5eed_b10b;

pub const ATTR_SIDE: usize = 16;

/// Gaussian blobs on `1 x side x side` images: each class has a fixed
/// random center, samples add unit-variance noise.
pub fn synth_blobs(n_per_class: usize, classes: usize, side: usize, seed: u64) -> Result<RawDataset> {
    if n_per_class == 0 || classes < 2 {
        return Err(Error::Config("synth-blobs needs n >= 1 and at least 2 classes".into()));
    }
    let dim = side * side;
    let mut center_rng = ChaCha8Rng::seed_from_u64(BLOB_CENTER_SEED);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut center_rng)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..classes * n_per_class).map(|i| i % classes).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(order.len() * dim);
    for &c in &order {
        data.extend(centers[c].iter().map(|&m| {
            let e: f64 = StandardNormal.sample(&mut rng);
            m + e
        }));
    }
    let inputs = Tensor::new(vec![order.len(), 1, side, side], data)?;
    RawDataset::new(inputs, order, classes, Normalization::identity(1))
}

/// Two-attribute images: label is the primary attribute (square = 0,
/// circle = 1); the secondary attribute (horizontal = 0, vertical = 1
/// stripes) is carried alongside.
#[derive(Clone, Debug)]
pub struct SynthAttr {
    pub data: RawDataset,
    pub secondary: Vec<usize>,
}

impl SynthAttr {
    /// Rows whose secondary attribute equals `texture`.
    pub fn with_texture(&self, texture: usize) -> Result<RawDataset> {
        let rows: Vec<usize> = (0..self.secondary.len())
            .filter(|&i| self.secondary[i] == texture)
            .collect();
        self.data.select(&rows)
    }

    /// The same images labelled by texture.
    pub fn by_texture(&self) -> Result<RawDataset> {
        self.data.relabel(self.secondary.clone(), 2)
    }
}

fn draw_attr_image(primary: usize, texture: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let noise = Normal::new(0.0, 0.1).expect("valid sigma");
    let center = |rng: &mut ChaCha8Rng| 7.5 + f64::from(rng.random_range(-1i32..=1));
    let (cy, cx) = (center(rng), center(rng));
    let radius: f64 = rng.random_range(4.0..6.0);
    let phase = rng.random_range(0..4usize);
    for y in 0..ATTR_SIDE {
        for x in 0..ATTR_SIDE {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let inside = if primary == 0 {
                // equal-area square
                let half = radius * 0.886;
                dy.abs() <= half && dx.abs() <= half
            } else {
                dy * dy + dx * dx <= radius * radius
            };
            let line = if texture == 0 { y } else { x };
            let stripe = ((line + phase) / 2) % 2 == 0;
            let base = match (inside, stripe) {
                (false, _) => 0.0,
                (true, true) => 1.0,
                (true, false) => 0.4,
            };
            out.push(base + noise.sample(rng));
        }
    }
}

/// `n_per_cell` images for each `(primary, secondary)` cell, shuffled.
pub fn synth_attr(n_per_cell: usize, seed: u64) -> Result<SynthAttr> {
    if n_per_cell == 0 {
        return Err(Error::Config("synth-attr needs at least one sample per cell".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(usize, usize)> = (0..4 * n_per_cell).map(|i| (i % 4 / 2, i % 2)).collect();
    cells.shuffle(&mut rng);
    let mut data = Vec::with_capacity(cells.len() * ATTR_SIDE * ATTR_SIDE);
    for &(p, s) in &cells {
        draw_attr_image(p, s, &mut rng, &mut data);
    }
    let inputs = Tensor::new(vec![cells.len(), 1, ATTR_SIDE, ATTR_SIDE], data)?;
    let labels = cells.iter().map(|c| c.0).collect();
    Ok(SynthAttr {
        data: RawDataset::new(inputs, labels, 2, Normalization::identity(1))?,
        secondary: cells.iter().map(|c| c.1).collect(),
    })
}
