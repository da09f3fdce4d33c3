//! Test-time conditioning: steer the velocity field with the gradient of
//! the masked alignment loss, and build object inpainting and scene mixing
//! on top of ODE inversion.

use crate::data::{range_image_to_tensor, tensor_to_range_image};
use crate::flow::{alignment_loss_g, FlowError, Sit};
use crate::geometry::{
    project_features, range_to_pointcloud, FeatureGrid, PointCloud, RangeImage, SensorModel,
};
use crate::nn::{Binder, Graph, Real};
use crate::rng::rng_for;
use crate::sampler::invert_ode;
use crate::teacher::{extract_features, TeacherConfig};
use crate::trainer::{Pipeline, TrainError};
use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Teacher(#[from] crate::teacher::TeacherError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("mask region invalid: {0}")]
    BadRegion(String),
}

/// Target features on the token grid plus the supervision mask and scale.
#[derive(Clone, Debug)]
pub struct GuidanceSpec<T: Real> {
    /// `[1, N, D]` unit-norm rows (zero where unsupervised).
    pub target: ArrayD<T>,
    /// Token-level supervision: true cells enter the loss.
    pub select: Vec<bool>,
    pub gamma: f64,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl<T: Real> GuidanceSpec<T> {
    /// Build from a feature grid at token resolution and a token mask;
    /// supervised cells are those masked in AND occupied.
    pub fn from_grid(
        grid: &FeatureGrid,
        mask: &[bool],
        gamma: f64,
        t_lo: f64,
        t_hi: f64,
    ) -> Result<Self, GuidanceError> {
        let (gh, gw, d) = grid.dims();
        let n = gh * gw;
        if mask.len() != n {
            return Err(GuidanceError::Flow(FlowError::ShapeError(
                "mask does not match the token grid".into(),
            )));
        }
        let mut target = ArrayD::zeros(IxDyn(&[1, n, d]));
        let mut select = vec![false; n];
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = gy * gw + gx;
                select[tok] = mask[tok] && grid.occupied[(gy, gx)];
                for c in 0..d {
                    target[[0, tok, c]] = T::from_f64(grid.values[(gy, gx, c)] as f64);
                }
            }
        }
        Ok(GuidanceSpec {
            target,
            select,
            gamma,
            t_lo,
            t_hi,
        })
    }

    /// Broadcast one class feature over a token mask.
    pub fn from_class_vector(
        class_vec: &[f32],
        mask: &[bool],
        gamma: f64,
        t_lo: f64,
        t_hi: f64,
    ) -> Self {
        let n = mask.len();
        let d = class_vec.len();
        let mut target = ArrayD::zeros(IxDyn(&[1, n, d]));
        for (tok, m) in mask.iter().enumerate() {
            if *m {
                for c in 0..d {
                    target[[0, tok, c]] = T::from_f64(class_vec[c] as f64);
                }
            }
        }
        GuidanceSpec {
            target,
            select: mask.to_vec(),
            gamma,
            t_lo,
            t_hi,
        }
    }

    pub fn active_at(&self, t: f64) -> bool {
        self.gamma != 0.0
            && self.select.iter().any(|s| *s)
            && t >= self.t_lo
            && t <= self.t_hi
    }
}

/// `v' = v - gamma * grad_z L_align_masked(z_t)`. Outside the active
/// interval (or with nothing selected) the raw velocity comes back exactly.
/// Returns `(v_adjusted, v_raw)`.
pub fn guided_velocity<T: Real>(
    fm: &Sit<T>,
    z_t: &ArrayD<T>,
    t: T,
    spec: &GuidanceSpec<T>,
) -> Result<(ArrayD<T>, ArrayD<T>), GuidanceError> {
    if z_t.shape()[0] != 1 {
        return Err(GuidanceError::Flow(FlowError::ShapeError(
            "guidance operates on single chains".into(),
        )));
    }
    if !spec.active_at(t.as_f64()) {
        let (v, _) = fm.forward(z_t, &[t])?;
        return Ok((v.clone(), v));
    }
    let mut g = Graph::<T>::new();
    let mut bind = Binder::frozen_all();
    let z = g.leaf(z_t.clone());
    let (v, mid) = fm.forward_g(&mut g, &mut bind, z, &[t]);
    let normed = fm.head_g(&mut g, &mut bind, mid);
    let loss = alignment_loss_g(&mut g, normed, &spec.target, &spec.select)?;
    let mut grads = g.backward(loss);
    let dz = grads.take(z).expect("z_t gradient exists when guidance is active");
    let v_raw = g.value(v).clone();
    let gamma = T::from_f64(spec.gamma);
    let mut v_adj = v_raw.clone();
    ndarray::Zip::from(&mut v_adj).and(&dz).for_each(|vi, &gi| {
        *vi = *vi - gamma * gi;
    });
    Ok((v_adj, v_raw))
}

/// Euler ODE sampling from `t = 1` to `t = 0` with the guided velocity.
pub fn guided_sample_ode<T: Real>(
    fm: &Sit<T>,
    z1: &ArrayD<T>,
    steps: usize,
    spec: &GuidanceSpec<T>,
) -> Result<ArrayD<T>, GuidanceError> {
    let dt = T::from_f64(1.0 / steps as f64);
    let mut z = z1.clone();
    for k in 0..steps {
        let t = T::from_f64(1.0 - k as f64 / steps as f64);
        let (v, _) = guided_velocity(fm, &z, t, spec)?;
        ndarray::Zip::from(&mut z).and(&v).for_each(|zi, &vi| {
            *zi = *zi - dt * vi;
        });
    }
    Ok(z)
}

/// Pixel-space rectangles `[i0, j0, i1, j1)` defining an edit region.
#[derive(Clone, Debug)]
pub struct MaskRegion {
    pub rects: Vec<[usize; 4]>,
}

impl MaskRegion {
    pub fn validate(&self, sensor: &SensorModel) -> Result<(), GuidanceError> {
        if self.rects.is_empty() {
            return Err(GuidanceError::BadRegion("no rectangles given".into()));
        }
        for r in &self.rects {
            if r[0] > r[2] || r[1] > r[3] || r[2] > sensor.height || r[3] > sensor.width {
                return Err(GuidanceError::BadRegion(format!(
                    "rect {r:?} outside {}x{}",
                    sensor.height, sensor.width
                )));
            }
        }
        Ok(())
    }

    /// Token-level footprint of the pixel rectangles.
    pub fn token_mask(
        &self,
        sensor: &SensorModel,
        down_v: usize,
        down_h: usize,
        patch: usize,
    ) -> Vec<bool> {
        let gh = sensor.height / down_v / patch;
        let gw = sensor.width / down_h / patch;
        let mut mask = vec![false; gh * gw];
        for r in &self.rects {
            for i in r[0]..r[2] {
                for j in r[1]..r[3] {
                    let ty = (i / down_v / patch).min(gh.saturating_sub(1));
                    let tx = (j / down_h / patch).min(gw.saturating_sub(1));
                    mask[ty * gw + tx] = true;
                }
            }
        }
        mask
    }

    /// Pixel mask at image resolution (for paired-region comparisons).
    pub fn pixel_mask(&self, sensor: &SensorModel) -> ndarray::Array2<bool> {
        let mut m = ndarray::Array2::from_elem((sensor.height, sensor.width), false);
        for r in &self.rects {
            for i in r[0]..r[2] {
                for j in r[1]..r[3] {
                    m[(i, j)] = true;
                }
            }
        }
        m
    }
}

pub struct EditResult {
    pub range: RangeImage,
    pub cloud: PointCloud,
    /// Normalized latent that seeded the reverse pass (pre-decode), kept
    /// for diagnostics.
    pub z0: ArrayD<f32>,
}

/// Replace masked token patches of an inverted latent with fresh noise and
/// denoise under class-feature guidance. The unmasked scene content rides
/// through the inversion round trip.
#[allow(clippy::too_many_arguments)]
pub fn inpaint<T: Real>(
    pipe: &Pipeline<T>,
    sensor: &SensorModel,
    scene: &RangeImage,
    region: &MaskRegion,
    class_vec: &[f32],
    gamma: f64,
    steps: usize,
    seed: u64,
) -> Result<EditResult, GuidanceError> {
    region.validate(sensor)?;
    let (x3, _m) = range_image_to_tensor::<T>(scene);
    let (h, w) = (sensor.height, sensor.width);
    let x = x3.into_shape_with_order(IxDyn(&[1, 1, h, w])).unwrap();
    let post = pipe.vae.encode(&x).map_err(|e| {
        GuidanceError::Flow(FlowError::ShapeError(e.to_string()))
    })?;
    let z_norm = pipe.stats.normalize(&post.mu)?;
    let mut z1 = invert_ode(&pipe.fm, &z_norm, steps);

    // renoise the masked token patches in latent space
    let patch = pipe.fm.cfg.patch;
    let (gh, gw) = pipe.fm.cfg.token_grid();
    let mask = region.token_mask(sensor, pipe.vae.cfg.down_v, pipe.vae.cfg.down_h, patch);
    let mut rng = rng_for(seed, "inpaint-renoise", 0);
    for ty in 0..gh {
        for tx in 0..gw {
            if !mask[ty * gw + tx] {
                continue;
            }
            for c in 0..pipe.fm.cfg.latent_ch {
                for dy in 0..patch {
                    for dx in 0..patch {
                        z1[[0, c, ty * patch + dy, tx * patch + dx]] = T::standard_normal(&mut rng);
                    }
                }
            }
        }
    }

    let spec = GuidanceSpec::from_class_vector(class_vec, &mask, gamma, 0.1, 1.0);
    let z0 = guided_sample_ode(&pipe.fm, &z1, steps, &spec)?;
    finish_edit(pipe, sensor, &z0)
}

pub struct MixSimilarity {
    pub left_cos_a: f64,
    pub left_cos_b: f64,
    pub right_cos_a: f64,
    pub right_cos_b: f64,
}

pub struct MixResult {
    pub edit: EditResult,
    pub similarity: MixSimilarity,
}

/// Teacher feature grid of a scene at the model's token resolution.
pub fn scene_token_grid(
    scene: &RangeImage,
    sensor: &SensorModel,
    teacher: &TeacherConfig,
    (gh, gw): (usize, usize),
) -> Result<FeatureGrid, GuidanceError> {
    let cloud = range_to_pointcloud(scene);
    let with_features = extract_features(&cloud, teacher)?;
    Ok(project_features(&with_features, gh, gw, sensor)?)
}

/// Generate a scene whose feature layout stitches the left columns of `a`
/// with the right columns of `b` at `split_col` (token columns).
#[allow(clippy::too_many_arguments)]
pub fn mix_scenes<T: Real>(
    pipe: &Pipeline<T>,
    sensor: &SensorModel,
    teacher: &TeacherConfig,
    scene_a: &RangeImage,
    scene_b: &RangeImage,
    split_col: usize,
    gamma: f64,
    steps: usize,
    seed: u64,
) -> Result<MixResult, GuidanceError> {
    let (gh, gw) = pipe.fm.cfg.token_grid();
    if split_col > gw {
        return Err(GuidanceError::Flow(FlowError::ShapeError(format!(
            "split {split_col} beyond {gw} token columns"
        ))));
    }
    let grid_a = scene_token_grid(scene_a, sensor, teacher, (gh, gw))?;
    let grid_b = scene_token_grid(scene_b, sensor, teacher, (gh, gw))?;
    let stitched = stitch_grids(&grid_a, &grid_b, split_col);
    let mask = vec![true; gh * gw];
    let spec = GuidanceSpec::<T>::from_grid(&stitched, &mask, gamma, 0.1, 1.0)?;
    let z1 = crate::sampler::draw_start_noise(&pipe.fm, 1, 0, seed);
    let z0 = guided_sample_ode(&pipe.fm, &z1, steps, &spec)?;
    let edit = finish_edit(pipe, sensor, &z0)?;

    // half-wise similarity of the generated layout to each source
    let grid_g = scene_token_grid(&edit.range, sensor, teacher, (gh, gw))?;
    let half = gw / 2;
    let similarity = MixSimilarity {
        left_cos_a: grid_cosine(&grid_g, &grid_a, 0, half),
        left_cos_b: grid_cosine(&grid_g, &grid_b, 0, half),
        right_cos_a: grid_cosine(&grid_g, &grid_a, half, gw),
        right_cos_b: grid_cosine(&grid_g, &grid_b, half, gw),
    };
    Ok(MixResult { edit, similarity })
}

/// Columns `< split` from `a`, the rest from `b`.
pub fn stitch_grids(a: &FeatureGrid, b: &FeatureGrid, split: usize) -> FeatureGrid {
    let (gh, gw, d) = a.dims();
    let mut values = a.values.clone();
    let mut occupied = a.occupied.clone();
    for gy in 0..gh {
        for gx in split..gw {
            occupied[(gy, gx)] = b.occupied[(gy, gx)];
            for c in 0..d {
                values[(gy, gx, c)] = b.values[(gy, gx, c)];
            }
        }
    }
    FeatureGrid { values, occupied }
}

/// Mean cosine between grids over a column range, counting cells occupied
/// in both.
pub fn grid_cosine(a: &FeatureGrid, b: &FeatureGrid, col_lo: usize, col_hi: usize) -> f64 {
    let (gh, _, d) = a.dims();
    let mut total = 0.0;
    let mut count = 0usize;
    for gy in 0..gh {
        for gx in col_lo..col_hi {
            if !a.occupied[(gy, gx)] || !b.occupied[(gy, gx)] {
                continue;
            }
            let mut dot = 0.0;
            for c in 0..d {
                dot += a.values[(gy, gx, c)] as f64 * b.values[(gy, gx, c)] as f64;
            }
            total += dot;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn finish_edit<T: Real>(
    pipe: &Pipeline<T>,
    sensor: &SensorModel,
    z0_norm: &ArrayD<T>,
) -> Result<EditResult, GuidanceError> {
    let z = pipe.stats.denormalize(z0_norm)?;
    let x = pipe
        .vae
        .decode(&z)
        .map_err(|e| GuidanceError::Flow(FlowError::ShapeError(e.to_string())))?;
    let range = tensor_to_range_image(&x, sensor);
    let cloud = range_to_pointcloud(&range);
    let z0 = z0_norm.mapv(|v| v.as_f64() as f32);
    Ok(EditResult { range, cloud, z0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;

    fn tiny_cfg() -> FlowConfig {
        FlowConfig {
            patch: 2,
            depth: 2,
            width: 16,
            heads: 2,
            temb_dim: 8,
            mlp_ratio: 2,
            teacher_d: 4,
            latent_ch: 2,
            latent_h: 4,
            latent_w: 8,
        }
    }

    fn unit_grid(gh: usize, gw: usize, d: usize) -> FeatureGrid {
        let mut values = ndarray::Array3::<f32>::zeros((gh, gw, d));
        let occupied = ndarray::Array2::from_elem((gh, gw), true);
        for gy in 0..gh {
            for gx in 0..gw {
                values[(gy, gx, (gy + gx) % d)] = 1.0;
            }
        }
        FeatureGrid { values, occupied }
    }

    #[test]
    fn zero_gamma_and_empty_mask_are_exact_noops() {
        let fm = Sit::<f64>::new(tiny_cfg(), 2);
        let z = crate::sampler::draw_start_noise(&fm, 1, 0, 4);
        let (gh, gw) = fm.cfg.token_grid();
        let grid = unit_grid(gh, gw, fm.cfg.teacher_d);
        let all = vec![true; gh * gw];
        let spec0 = GuidanceSpec::<f64>::from_grid(&grid, &all, 0.0, 0.0, 1.0).unwrap();
        let (va, vr) = guided_velocity(&fm, &z, 0.5, &spec0).unwrap();
        assert_eq!(va, vr);
        let none = vec![false; gh * gw];
        let spec_empty = GuidanceSpec::<f64>::from_grid(&grid, &none, 2.0, 0.0, 1.0).unwrap();
        let (va, vr) = guided_velocity(&fm, &z, 0.5, &spec_empty).unwrap();
        assert_eq!(va, vr);
        // outside the active interval the raw velocity comes back too
        let spec = GuidanceSpec::<f64>::from_grid(&grid, &all, 2.0, 0.4, 0.9).unwrap();
        let (va, vr) = guided_velocity(&fm, &z, 0.2, &spec).unwrap();
        assert_eq!(va, vr);
    }

    #[test]
    fn guidance_update_magnitude_scales_with_gamma() {
        let fm = Sit::<f64>::new(tiny_cfg(), 2);
        let z = crate::sampler::draw_start_noise(&fm, 1, 0, 4);
        let (gh, gw) = fm.cfg.token_grid();
        let grid = unit_grid(gh, gw, fm.cfg.teacher_d);
        let all = vec![true; gh * gw];
        let spec1 = GuidanceSpec::<f64>::from_grid(&grid, &all, 1.0, 0.0, 1.0).unwrap();
        let spec3 = GuidanceSpec::<f64>::from_grid(&grid, &all, 3.0, 0.0, 1.0).unwrap();
        let (v1, vr) = guided_velocity(&fm, &z, 0.6, &spec1).unwrap();
        let (v3, _) = guided_velocity(&fm, &z, 0.6, &spec3).unwrap();
        let d1: f64 = v1
            .iter()
            .zip(vr.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let d3: f64 = v3
            .iter()
            .zip(vr.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(d1 > 0.0);
        assert!((d3 / d1 - 3.0).abs() < 1e-6, "update magnitude is linear in gamma");
    }

    #[test]
    fn guidance_leaves_parameters_untouched() {
        let fm = Sit::<f64>::new(tiny_cfg(), 2);
        let before = fm.store.content_hash(|_| true);
        let z = crate::sampler::draw_start_noise(&fm, 1, 0, 4);
        let (gh, gw) = fm.cfg.token_grid();
        let grid = unit_grid(gh, gw, fm.cfg.teacher_d);
        let all = vec![true; gh * gw];
        let spec = GuidanceSpec::<f64>::from_grid(&grid, &all, 1.5, 0.0, 1.0).unwrap();
        let _ = guided_sample_ode(&fm, &z, 6, &spec).unwrap();
        assert_eq!(before, fm.store.content_hash(|_| true));
    }

    #[test]
    fn token_mask_footprint_and_stitching() {
        let sensor = SensorModel {
            f_up: 0.05,
            f_down: 0.44,
            height: 16,
            width: 64,
            r_min: 1.0,
            r_max: 56.0,
        };
        let region = MaskRegion {
            rects: vec![[0, 0, 8, 16]],
        };
        region.validate(&sensor).unwrap();
        // down 4x4, patch 2: tokens 2x8; pixels 0..8 x 0..16 hit token rows 0, cols 0..2
        let mask = region.token_mask(&sensor, 4, 4, 2);
        let gw = 8;
        for (tok, m) in mask.iter().enumerate() {
            let (ty, tx) = (tok / gw, tok % gw);
            assert_eq!(*m, ty == 0 && tx < 2, "token {ty},{tx}");
        }
        let bad = MaskRegion {
            rects: vec![[0, 0, 99, 2]],
        };
        assert!(bad.validate(&sensor).is_err());

        let a = unit_grid(2, 8, 4);
        let mut b = unit_grid(2, 8, 4);
        b.values.fill(0.0);
        for gy in 0..2 {
            for gx in 0..8 {
                b.values[(gy, gx, 3)] = 1.0;
            }
        }
        let s = stitch_grids(&a, &b, 3);
        for gy in 0..2 {
            for gx in 0..8 {
                let want = if gx < 3 { &a } else { &b };
                for c in 0..4 {
                    assert_eq!(s.values[(gy, gx, c)], want.values[(gy, gx, c)]);
                }
            }
        }
        // identical inputs leave no stitching seam
        let same = stitch_grids(&a, &a, 4);
        assert_eq!(same.values, a.values);
        assert_eq!(same.occupied, a.occupied);
    }
}
