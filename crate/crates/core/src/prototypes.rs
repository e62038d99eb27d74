//! Per-class mean images used as CAM targets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::ops::resize_bilinear;
use crate::pgm;
use crate::tensor::Tensor;

/// Fixed-point scale for exact, order-independent pixel sums.
const FIXED_SCALE: f64 = (1u128 << 96) as f64;

/// One min-max normalized H×W map per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    maps: Vec<Vec<f32>>,
    source_split: String,
    side: usize,
}

fn minmax(map: &mut [f32]) {
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    for v in map.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

/// Pixelwise mean of the raw intensities per class, before any scaling.
///
/// Sums are accumulated in 128-bit fixed point, so the result does not depend
/// on the order of the examples.
pub fn class_means(ds: &LabeledDataset) -> Result<Vec<Vec<f32>>> {
    let (h, w) = (ds.images.dim(2), ds.images.dim(3));
    let per = h * w;
    let mut sums = vec![vec![0i128; per]; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for (img, &label) in ds.images.data().chunks(per).zip(&ds.labels) {
        counts[label] += 1;
        for (acc, &v) in sums[label].iter_mut().zip(img) {
            *acc += (f64::from(v) * FIXED_SCALE) as i128;
        }
    }
    sums.iter()
        .zip(&counts)
        .enumerate()
        .map(|(class, (sum, &count))| {
            if count == 0 {
                return Err(Error::EmptyClass(class));
            }
            Ok(sum.iter().map(|&s| (s as f64 / FIXED_SCALE / count as f64) as f32).collect())
        })
        .collect()
}

/// Class means scaled per class to [0, 1].
pub fn build_prototypes(ds: &LabeledDataset) -> Result<PrototypeSet> {
    let (h, w) = (ds.images.dim(2), ds.images.dim(3));
    if h != w {
        return Err(Error::shape("build_prototypes", format!("images must be square, got {h}×{w}")));
    }
    let mut maps = class_means(ds)?;
    for m in &mut maps {
        minmax(m);
    }
    Ok(PrototypeSet {
        maps,
        source_split: ds.split.to_string(),
        side: h,
    })
}

impl PrototypeSet {
    /// Build directly from maps (each `side × side`, already in [0, 1]).
    pub fn from_maps(maps: Vec<Vec<f32>>, source: Split, side: usize) -> Result<Self> {
        if maps.len() != NUM_CLASSES || maps.iter().any(|m| m.len() != side * side) {
            return Err(Error::shape("prototypes", format!("need {NUM_CLASSES} maps of {side}×{side}")));
        }
        Ok(PrototypeSet {
            maps,
            source_split: source.to_string(),
            side,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn source_split(&self) -> &str {
        &self.source_split
    }

    pub fn prototype_for(&self, class: usize) -> Result<&[f32]> {
        self.maps
            .get(class)
            .map(Vec::as_slice)
            .ok_or(Error::MissingPrototype(class))
    }

    /// Stack the prototypes of `classes` into an N×1×side×side tensor.
    pub fn stack(&self, classes: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(classes.len() * self.side * self.side);
        for &c in classes {
            data.extend_from_slice(self.prototype_for(c)?);
        }
        Tensor::new(vec![classes.len(), 1, self.side, self.side], data)
    }

    /// The same prototypes at another side: bilinear resampling followed by
    /// a fresh min-max scaling. Resampling is linear, so this equals building
    /// from a resampled dataset.
    pub fn resized(&self, side: usize) -> Result<Self> {
        if side == self.side {
            return Ok(self.clone());
        }
        let stacked = self.stack(&(0..NUM_CLASSES).collect::<Vec<_>>())?;
        let big = resize_bilinear(&stacked, side, side)?;
        let maps = big
            .data()
            .chunks(side * side)
            .map(|m| {
                let mut m = m.to_vec();
                minmax(&mut m);
                m
            })
            .collect();
        Ok(PrototypeSet {
            maps,
            source_split: self.source_split.clone(),
            side,
        })
    }

    /// One PGM per class plus a 5×2 grid.
    pub fn export_pgm(&self, dir: &Path) -> Result<()> {
        for (c, map) in self.maps.iter().enumerate() {
            pgm::write(&dir.join(format!("prototype_{}_{c}.pgm", self.source_split)), map, self.side, self.side)?;
        }
        let (h, w, g) = pgm::grid(&self.maps, self.side, self.side, 5);
        pgm::write(&dir.join(format!("prototypes_{}_grid.pgm", self.source_split)), &g, h, w)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: PrototypeSet = serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        if set.maps.len() != NUM_CLASSES || set.maps.iter().any(|m| m.len() != set.side * set.side) {
            return Err(Error::Invalid(format!("{}: malformed prototype set", path.display())));
        }
        Ok(set)
    }
}
