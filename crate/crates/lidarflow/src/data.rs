//! Dataset access and tensor conversion for training and inference.

use crate::formats;
use crate::geometry::{RangeImage, SensorModel};
use crate::nn::Real;
use crate::synthworld::DatasetManifest;
use crate::vae::{depth_denormalize, depth_normalize};
use ndarray::{ArrayD, IxDyn};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Format(#[from] formats::FormatError),
    #[error(transparent)]
    World(#[from] crate::synthworld::WorldError),
    #[error("dataset is empty")]
    Empty,
    #[error("scene {0} does not match the manifest sensor")]
    SensorMismatch(usize),
}

/// Normalized model input for one scene plus its alignment target.
pub struct SceneRecord<T: Real> {
    /// `[1, H, W]` depth in the `[-1, 1]` scale.
    pub x: ArrayD<T>,
    /// `[1, H, W]` validity as 0/1.
    pub mask: ArrayD<T>,
    /// `[N, D]` teacher features on the token grid, zero where unoccupied.
    pub target: ArrayD<T>,
    /// `[N]` occupancy of the token grid.
    pub occupied: Vec<bool>,
}

pub struct Dataset<T: Real> {
    pub sensor: SensorModel,
    pub grid_h: usize,
    pub grid_w: usize,
    pub feature_d: usize,
    pub records: Vec<SceneRecord<T>>,
}

/// Convert a range image to the model's normalized input tensor (plus the
/// validity mask as floats).
pub fn range_image_to_tensor<T: Real>(ri: &RangeImage) -> (ArrayD<T>, ArrayD<T>) {
    let (h, w) = (ri.sensor.height, ri.sensor.width);
    let mut x = ArrayD::zeros(IxDyn(&[1, h, w]));
    let mut m = ArrayD::zeros(IxDyn(&[1, h, w]));
    for i in 0..h {
        for j in 0..w {
            let d = ri.depth[(i, j)] as f64;
            x[[0, i, j]] = T::from_f64(depth_normalize(d, ri.sensor.r_max));
            m[[0, i, j]] = if ri.valid[(i, j)] { T::one() } else { T::zero() };
        }
    }
    (x, m)
}

/// Decode a normalized tensor back into a range image. Pixels whose depth
/// falls outside `[r_min, 0.999 r_max]` become invalid no-returns.
pub fn tensor_to_range_image<T: Real>(x: &ArrayD<T>, sensor: &SensorModel) -> RangeImage {
    let (h, w) = (sensor.height, sensor.width);
    let mut ri = RangeImage::empty(*sensor);
    for i in 0..h {
        for j in 0..w {
            let v = x[[0, 0, i, j]].as_f64().clamp(-1.0, 1.0);
            let d = depth_denormalize(v, sensor.r_max);
            if d >= sensor.r_min && d <= 0.999 * sensor.r_max {
                ri.depth[(i, j)] = d as f32;
                ri.valid[(i, j)] = true;
            }
        }
    }
    ri
}

impl<T: Real> Dataset<T> {
    /// Load every scene listed in a dataset directory's manifest.
    pub fn load(root: &Path) -> Result<Self, DataError> {
        let manifest = DatasetManifest::read(&root.join("manifest.toml"))?;
        Self::load_slice(root, &manifest, 0, manifest.count)
    }

    /// Load a contiguous range of scenes `[start, end)`.
    pub fn load_slice(
        root: &Path,
        manifest: &DatasetManifest,
        start: usize,
        end: usize,
    ) -> Result<Self, DataError> {
        let mut records = Vec::new();
        let mut grid_dims = (0usize, 0usize, 0usize);
        for idx in start..end.min(manifest.count) {
            let (ri_path, _, fg_path) = crate::synthworld::scene_paths(root, idx);
            let ri = formats::read_rangeimage(&ri_path)?;
            if ri.sensor.height != manifest.sensor.height || ri.sensor.width != manifest.sensor.width
            {
                return Err(DataError::SensorMismatch(idx));
            }
            let grid = formats::read_featuregrid(&fg_path)?;
            let (gh, gw, d) = grid.dims();
            grid_dims = (gh, gw, d);
            let (x, mask) = range_image_to_tensor::<T>(&ri);
            let n = gh * gw;
            let mut target = ArrayD::zeros(IxDyn(&[n, d]));
            let mut occupied = vec![false; n];
            for gy in 0..gh {
                for gx in 0..gw {
                    let tok = gy * gw + gx;
                    occupied[tok] = grid.occupied[(gy, gx)];
                    for c in 0..d {
                        target[[tok, c]] = T::from_f64(grid.values[(gy, gx, c)] as f64);
                    }
                }
            }
            records.push(SceneRecord {
                x,
                mask,
                target,
                occupied,
            });
        }
        if records.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Dataset {
            sensor: manifest.sensor,
            grid_h: grid_dims.0,
            grid_w: grid_dims.1,
            feature_d: grid_dims.2,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stack scenes into `(x, mask, target, occupied)` batch tensors.
    pub fn batch(&self, indices: &[usize]) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>, Vec<bool>) {
        let b = indices.len();
        let (h, w) = (self.sensor.height, self.sensor.width);
        let n = self.grid_h * self.grid_w;
        let d = self.feature_d;
        let mut x = ArrayD::zeros(IxDyn(&[b, 1, h, w]));
        let mut m = ArrayD::zeros(IxDyn(&[b, 1, h, w]));
        let mut target = ArrayD::zeros(IxDyn(&[b, n, d]));
        let mut occ = vec![false; b * n];
        for (bi, &si) in indices.iter().enumerate() {
            let rec = &self.records[si];
            for i in 0..h {
                for j in 0..w {
                    x[[bi, 0, i, j]] = rec.x[[0, i, j]];
                    m[[bi, 0, i, j]] = rec.mask[[0, i, j]];
                }
            }
            for tok in 0..n {
                occ[bi * n + tok] = rec.occupied[tok];
                for c in 0..d {
                    target[[bi, tok, c]] = rec.target[[tok, c]];
                }
            }
        }
        (x, m, target, occ)
    }
}
