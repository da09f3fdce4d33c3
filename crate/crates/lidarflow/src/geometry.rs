//! Equirectangular projection between point clouds, range images and
//! feature grids.
//!
//! Rows discretize elevation from `f_up` (row 0) down to `-f_down`
//! (row H-1); columns discretize azimuth with circular wrap-around.
//! Projection bins with `floor`; unprojection emits rays at bin centers,
//! which makes project(unproject(ri)) reproduce `ri` bit-exactly.

use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("depth {0} outside [r_min, r_max]")]
    RangeOutOfBounds(f64),
    #[error("elevation {0} outside [-f_down, f_up]")]
    ElevationOutOfFov(f64),
    #[error("point cloud carries no features")]
    FeaturesRequired,
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("invalid sensor model: {0}")]
    InvalidSensor(String),
}

/// LiDAR intrinsics. Angles are radians; `f_up` and `f_down` are positive
/// magnitudes above/below the horizon, so the vertical FOV is their sum.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SensorModel {
    pub f_up: f64,
    pub f_down: f64,
    pub height: usize,
    pub width: usize,
    pub r_min: f64,
    pub r_max: f64,
}

impl SensorModel {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.f_up + self.f_down > 0.0) {
            return Err(GeometryError::InvalidSensor("f_up + f_down must be > 0".into()));
        }
        if self.height < 2 || self.width < 2 {
            return Err(GeometryError::InvalidSensor("grid must be at least 2x2".into()));
        }
        if !(0.0 < self.r_min && self.r_min < self.r_max) {
            return Err(GeometryError::InvalidSensor("need 0 < r_min < r_max".into()));
        }
        Ok(())
    }

    /// Vertical field of view.
    pub fn f_v(&self) -> f64 {
        self.f_up + self.f_down
    }

    /// Elevation of the ray through the center of row `i`.
    pub fn elevation_of_row(&self, i: usize) -> f64 {
        self.f_v() * (1.0 - (i as f64 + 0.5) / self.height as f64) - self.f_down
    }

    /// Azimuth of the ray through the center of column `j`.
    pub fn azimuth_of_col(&self, j: usize) -> f64 {
        std::f64::consts::PI * (1.0 - 2.0 * (j as f64 + 0.5) / self.width as f64)
    }

    /// Unit direction of the bin-center ray for pixel `(i, j)`.
    pub fn ray_direction(&self, i: usize, j: usize) -> [f64; 3] {
        let el = self.elevation_of_row(i);
        let az = self.azimuth_of_col(j);
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    }
}

/// Unordered 3-D points with optional per-point class labels and unit-norm
/// feature rows.
#[derive(Clone, Debug, Default)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub labels: Option<Vec<u16>>,
    pub features: Option<Array2<f32>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        for p in &self.positions {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(GeometryError::ShapeError("non-finite coordinate".into()));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.positions.len() {
                return Err(GeometryError::ShapeError("label count != point count".into()));
            }
        }
        if let Some(f) = &self.features {
            if f.nrows() != self.positions.len() {
                return Err(GeometryError::ShapeError("feature rows != point count".into()));
            }
            for row in f.rows() {
                let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
                if (n - 1.0).abs() > 1e-5 {
                    return Err(GeometryError::ShapeError(format!(
                        "feature row norm {n} not unit"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// H x W depth grid in meters. Invalid pixels carry the `r_max` sentinel.
#[derive(Clone, Debug)]
pub struct RangeImage {
    pub depth: Array2<f32>,
    pub valid: Array2<bool>,
    pub labels: Option<Array2<u16>>,
    pub sensor: SensorModel,
}

impl RangeImage {
    /// All-invalid image filled with the sentinel depth.
    pub fn empty(sensor: SensorModel) -> Self {
        let shape = (sensor.height, sensor.width);
        RangeImage {
            depth: Array2::from_elem(shape, sensor.r_max as f32),
            valid: Array2::from_elem(shape, false),
            labels: None,
            sensor,
        }
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let shape = (self.sensor.height, self.sensor.width);
        if self.depth.dim() != shape || self.valid.dim() != shape {
            return Err(GeometryError::ShapeError("grid does not match sensor".into()));
        }
        if let Some(l) = &self.labels {
            if l.dim() != shape {
                return Err(GeometryError::ShapeError("labels do not match sensor".into()));
            }
        }
        for ((depth, &valid), _) in self.depth.iter().zip(self.valid.iter()).zip(0..) {
            let d = *depth as f64;
            if valid {
                if !(self.sensor.r_min <= d && d <= self.sensor.r_max) {
                    return Err(GeometryError::RangeOutOfBounds(d));
                }
            } else if (d - self.sensor.r_max).abs() > 0.0 {
                return Err(GeometryError::ShapeError("invalid pixel without sentinel".into()));
            }
        }
        Ok(())
    }
}

/// H' x W' x D grid of unit-norm feature rows with an occupancy mask.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    pub values: Array3<f32>,
    pub occupied: Array2<bool>,
}

impl FeatureGrid {
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.values.dim();
        (d.0, d.1, d.2)
    }
}

/// Project a single point. Returns `(row, col, range)`.
pub fn project_point(p: [f64; 3], sensor: &SensorModel) -> Result<(usize, usize, f64), GeometryError> {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if !(sensor.r_min <= r && r <= sensor.r_max) {
        return Err(GeometryError::RangeOutOfBounds(r));
    }
    let elevation = (p[2] / r).clamp(-1.0, 1.0).asin();
    if elevation < -sensor.f_down || elevation > sensor.f_up {
        return Err(GeometryError::ElevationOutOfFov(elevation));
    }
    let azimuth = p[1].atan2(p[0]);
    let (i, j) = bin_angles(elevation, azimuth, sensor.height, sensor.width, sensor);
    Ok((i, j, r))
}

/// Shared binning of (elevation, azimuth) onto an `gh x gw` grid: `floor`
/// with the row clamped at the boundaries and the column wrapped modulo W.
fn bin_angles(elevation: f64, azimuth: f64, gh: usize, gw: usize, sensor: &SensorModel) -> (usize, usize) {
    let i_f = (1.0 - (elevation + sensor.f_down) / sensor.f_v()) * gh as f64;
    let i = (i_f.floor() as isize).clamp(0, gh as isize - 1) as usize;
    let j_f = 0.5 * (1.0 - azimuth / std::f64::consts::PI) * gw as f64;
    let j = (j_f.floor() as isize).rem_euclid(gw as isize) as usize;
    (i, j)
}

/// Rasterize a point cloud, keeping only the closest point per pixel.
/// Points outside the FOV or range limits are dropped; the second return
/// value counts them.
pub fn pointcloud_to_range(pc: &PointCloud, sensor: &SensorModel) -> (RangeImage, usize) {
    let mut ri = RangeImage::empty(*sensor);
    let mut labels = pc
        .labels
        .as_ref()
        .map(|_| Array2::<u16>::zeros((sensor.height, sensor.width)));
    let mut dropped = 0usize;
    for (idx, p) in pc.positions.iter().enumerate() {
        match project_point(*p, sensor) {
            Ok((i, j, r)) => {
                let r32 = r as f32;
                if !ri.valid[(i, j)] || r32 < ri.depth[(i, j)] {
                    ri.depth[(i, j)] = r32;
                    ri.valid[(i, j)] = true;
                    if let (Some(out), Some(src)) = (labels.as_mut(), pc.labels.as_ref()) {
                        out[(i, j)] = src[idx];
                    }
                }
            }
            Err(_) => dropped += 1,
        }
    }
    ri.labels = labels;
    (ri, dropped)
}

/// One point per valid pixel, placed on the bin-center ray at the stored
/// depth. Labels follow the pixels when present.
pub fn range_to_pointcloud(ri: &RangeImage) -> PointCloud {
    let s = &ri.sensor;
    let mut positions = Vec::with_capacity(ri.num_valid());
    let mut labels = ri.labels.as_ref().map(|_| Vec::with_capacity(ri.num_valid()));
    for i in 0..s.height {
        for j in 0..s.width {
            if !ri.valid[(i, j)] {
                continue;
            }
            let dir = s.ray_direction(i, j);
            let d = ri.depth[(i, j)] as f64;
            positions.push([d * dir[0], d * dir[1], d * dir[2]]);
            if let (Some(out), Some(src)) = (labels.as_mut(), ri.labels.as_ref()) {
                out.push(src[(i, j)]);
            }
        }
    }
    PointCloud {
        positions,
        labels,
        features: None,
    }
}

/// Average per-point features into a coarse grid: per cell, the mean of
/// member feature rows renormalized to unit length. Cells whose mean norm
/// falls below 1e-6 are unoccupied and zero.
pub fn project_features(
    pc: &PointCloud,
    grid_h: usize,
    grid_w: usize,
    sensor: &SensorModel,
) -> Result<FeatureGrid, GeometryError> {
    let feats = pc.features.as_ref().ok_or(GeometryError::FeaturesRequired)?;
    if grid_h > sensor.height || grid_w > sensor.width {
        return Err(GeometryError::ShapeError(
            "feature grid coarser than sensor grid required".into(),
        ));
    }
    let d = feats.ncols();
    let mut sums = Array3::<f64>::zeros((grid_h, grid_w, d));
    let mut counts = Array2::<usize>::zeros((grid_h, grid_w));
    for (idx, p) in pc.positions.iter().enumerate() {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if !(sensor.r_min <= r && r <= sensor.r_max) {
            continue;
        }
        let elevation = (p[2] / r).clamp(-1.0, 1.0).asin();
        if elevation < -sensor.f_down || elevation > sensor.f_up {
            continue;
        }
        let azimuth = p[1].atan2(p[0]);
        let (gy, gx) = bin_angles(elevation, azimuth, grid_h, grid_w, sensor);
        for k in 0..d {
            sums[(gy, gx, k)] += feats[(idx, k)] as f64;
        }
        counts[(gy, gx)] += 1;
    }
    let mut values = Array3::<f32>::zeros((grid_h, grid_w, d));
    let mut occupied = Array2::<bool>::from_elem((grid_h, grid_w), false);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let n = counts[(gy, gx)];
            if n == 0 {
                continue;
            }
            let mut norm2 = 0.0f64;
            for k in 0..d {
                let m = sums[(gy, gx, k)] / n as f64;
                sums[(gy, gx, k)] = m;
                norm2 += m * m;
            }
            let norm = norm2.sqrt();
            if norm < 1e-6 {
                continue; // cancelled features: leave unoccupied and zero
            }
            occupied[(gy, gx)] = true;
            for k in 0..d {
                values[(gy, gx, k)] = (sums[(gy, gx, k)] / norm) as f32;
            }
        }
    }
    Ok(FeatureGrid { values, occupied })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;

    fn test_sensor() -> SensorModel {
        SensorModel {
            f_up: 0.4,
            f_down: 0.4,
            height: 32,
            width: 256,
            r_min: 1.0,
            r_max: 56.0,
        }
    }

    #[test]
    fn forward_axis_maps_to_grid_center() {
        let s = test_sensor();
        let (i, j, r) = project_point([10.0, 0.0, 0.0], &s).unwrap();
        assert_eq!((i, j), (16, 128));
        assert!((r - 10.0).abs() < 1e-12);
    }

    #[test]
    fn elevation_at_f_up_hits_top_row() {
        let s = test_sensor();
        let el = s.f_up;
        let d = 10.0;
        let p = [d * el.cos(), 0.0, d * el.sin()];
        let (i, _, _) = project_point(p, &s).unwrap();
        assert_eq!(i, 0);
    }

    #[test]
    fn positive_y_axis_maps_to_quarter_width() {
        let s = test_sensor();
        let (_, j, _) = project_point([0.0, 10.0, 0.0], &s).unwrap();
        // brute-force scalar evaluation of the projection formula
        let az = 10.0f64.atan2(0.0);
        let jf = 0.5 * (1.0 - az / std::f64::consts::PI) * 256.0;
        assert_eq!(j, jf.floor() as usize);
        assert_eq!(j, 64);
    }

    #[test]
    fn out_of_range_and_out_of_fov_errors() {
        let s = test_sensor();
        assert!(matches!(
            project_point([100.0, 0.0, 0.0], &s),
            Err(GeometryError::RangeOutOfBounds(_))
        ));
        assert!(matches!(
            project_point([5.0, 0.0, 5.0], &s),
            Err(GeometryError::ElevationOutOfFov(_))
        ));
    }

    #[test]
    fn closest_point_wins() {
        let s = test_sensor();
        let dir = s.ray_direction(16, 128);
        let mk = |d: f64| [d * dir[0], d * dir[1], d * dir[2]];
        let pc = PointCloud {
            positions: vec![mk(9.0), mk(5.0)],
            labels: Some(vec![7, 3]),
            features: None,
        };
        let (ri, dropped) = pointcloud_to_range(&pc, &s);
        assert_eq!(dropped, 0);
        assert!((ri.depth[(16, 128)] - 5.0).abs() < 1e-5);
        assert_eq!(ri.labels.unwrap()[(16, 128)], 3);
    }

    #[test]
    fn empty_pixels_carry_sentinel() {
        let s = test_sensor();
        let pc = PointCloud {
            positions: vec![[10.0, 0.0, 0.0]],
            labels: None,
            features: None,
        };
        let (ri, _) = pointcloud_to_range(&pc, &s);
        assert_eq!(ri.num_valid(), 1);
        assert!(!ri.valid[(0, 0)]);
        assert_eq!(ri.depth[(0, 0)], s.r_max as f32);
    }

    #[test]
    fn single_point_matches_bruteforce_minimum() {
        let s = test_sensor();
        let pc = PointCloud {
            positions: vec![[7.0, 3.0, -1.0]],
            labels: None,
            features: None,
        };
        let (ri, _) = pointcloud_to_range(&pc, &s);
        let (i, j, r) = project_point([7.0, 3.0, -1.0], &s).unwrap();
        assert_eq!(ri.num_valid(), 1);
        assert!((ri.depth[(i, j)] as f64 - r).abs() < 1e-6);
    }

    #[test]
    fn all_invalid_yields_empty_cloud() {
        let ri = RangeImage::empty(test_sensor());
        assert!(range_to_pointcloud(&ri).is_empty());
    }

    #[test]
    fn center_pixel_unprojects_near_forward_axis() {
        let s = test_sensor();
        let mut ri = RangeImage::empty(s);
        ri.depth[(16, 128)] = 10.0;
        ri.valid[(16, 128)] = true;
        let pc = range_to_pointcloud(&ri);
        assert_eq!(pc.len(), 1);
        let p = pc.positions[0];
        // bin-center ray sits within half a bin of the +x axis
        let half_el = s.f_v() / (2.0 * s.height as f64);
        let half_az = std::f64::consts::PI / s.width as f64;
        let tol = 10.0 * (half_el + half_az);
        assert!((p[0] - 10.0).abs() < tol);
        assert!(p[1].abs() < tol && p[2].abs() < tol);
    }

    #[test]
    fn projection_roundtrip_is_bit_exact() {
        let s = test_sensor();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut ri = RangeImage::empty(s);
        let mut labels = Array2::<u16>::zeros((s.height, s.width));
        for i in 0..s.height {
            for j in 0..s.width {
                if rng.random::<f64>() < 0.6 {
                    ri.valid[(i, j)] = true;
                    ri.depth[(i, j)] =
                        (s.r_min + rng.random::<f64>() * (s.r_max - s.r_min)) as f32;
                    labels[(i, j)] = rng.random::<u16>() % 5;
                }
            }
        }
        ri.labels = Some(labels);
        let pc = range_to_pointcloud(&ri);
        let (ri2, dropped) = pointcloud_to_range(&pc, &s);
        assert_eq!(dropped, 0);
        assert_eq!(ri.valid, ri2.valid);
        assert_eq!(ri.depth, ri2.depth);
        assert_eq!(ri.labels, ri2.labels);
        // idempotence: a second trip reproduces the same image again
        let pc3 = range_to_pointcloud(&ri2);
        let (ri3, _) = pointcloud_to_range(&pc3, &s);
        assert_eq!(ri2.depth, ri3.depth);
        assert_eq!(ri2.valid, ri3.valid);
    }

    #[test]
    fn depth_preserved_through_unprojection() {
        let s = test_sensor();
        let mut ri = RangeImage::empty(s);
        ri.valid.fill(true);
        ri.depth.fill(23.75);
        let pc = range_to_pointcloud(&ri);
        for p in &pc.positions {
            let r = p[0].hypot(p[1]).hypot(p[2]);
            assert!((r - 23.75).abs() / 23.75 < 1e-6);
        }
    }

    #[test]
    fn azimuth_periodicity_shifts_one_column() {
        let s = test_sensor();
        let step = 2.0 * std::f64::consts::PI / s.width as f64;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let el = -s.f_down + (s.f_up + s.f_down) * 0.98 * rng.random::<f64>() + 0.005;
            let az = std::f64::consts::PI * (2.0 * rng.random::<f64>() - 1.0);
            let d = 5.0 + 40.0 * rng.random::<f64>();
            let p = [d * el.cos() * az.cos(), d * el.cos() * az.sin(), d * el.sin()];
            let q = [
                d * el.cos() * (az + step).cos(),
                d * el.cos() * (az + step).sin(),
                d * el.sin(),
            ];
            let (_, j0, _) = project_point(p, &s).unwrap();
            let (_, j1, _) = project_point(q, &s).unwrap();
            assert_eq!((j0 + s.width - 1) % s.width, j1 % s.width);
        }
    }

    #[test]
    fn elevation_monotonicity() {
        let s = test_sensor();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let az = std::f64::consts::PI * (2.0 * rng.random::<f64>() - 1.0);
            let e0 = -s.f_down + (s.f_up + s.f_down) * rng.random::<f64>();
            let e1 = (e0 + 0.01).min(s.f_up);
            let d = 10.0;
            let p = |el: f64| [d * el.cos() * az.cos(), d * el.cos() * az.sin(), d * el.sin()];
            let (i0, _, _) = project_point(p(e0), &s).unwrap();
            let (i1, _, _) = project_point(p(e1), &s).unwrap();
            assert!(i1 <= i0, "row index must not increase with elevation");
        }
    }

    #[test]
    fn feature_cell_of_single_point_is_the_feature() {
        let s = test_sensor();
        let mut f = Array2::<f32>::zeros((1, 4));
        f[(0, 0)] = 0.6;
        f[(0, 1)] = 0.8;
        let pc = PointCloud {
            positions: vec![[10.0, 0.0, 0.0]],
            labels: None,
            features: Some(f),
        };
        let grid = project_features(&pc, 8, 64, &s).unwrap();
        let (i, j, _) = project_point([10.0, 0.0, 0.0], &s).unwrap();
        let (gy, gx) = (i / 4, j / 4);
        assert!(grid.occupied[(gy, gx)]);
        assert!((grid.values[(gy, gx, 0)] - 0.6).abs() < 1e-6);
        assert!((grid.values[(gy, gx, 1)] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn opposite_features_cancel_to_unoccupied() {
        let s = test_sensor();
        let mut f = Array2::<f32>::zeros((2, 4));
        f[(0, 2)] = 1.0;
        f[(1, 2)] = -1.0;
        let pc = PointCloud {
            positions: vec![[10.0, 0.0, 0.0], [10.1, 0.0, 0.0]],
            labels: None,
            features: Some(f),
        };
        let grid = project_features(&pc, 8, 64, &s).unwrap();
        let (i, j, _) = project_point([10.0, 0.0, 0.0], &s).unwrap();
        assert!(!grid.occupied[(i / 4, j / 4)]);
        assert_eq!(grid.values[(i / 4, j / 4, 2)], 0.0);
    }

    #[test]
    fn feature_grid_footprint_matches_bruteforce_assignment() {
        let s = test_sensor();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 500;
        let mut positions = Vec::new();
        let mut feats = Array2::<f32>::zeros((n, 3));
        for k in 0..n {
            let el = -s.f_down + (s.f_up + s.f_down) * rng.random::<f64>() * 0.999;
            let az = std::f64::consts::PI * (2.0 * rng.random::<f64>() - 1.0);
            let d = 2.0 + 50.0 * rng.random::<f64>();
            positions.push([d * el.cos() * az.cos(), d * el.cos() * az.sin(), d * el.sin()]);
            let v = [rng.random::<f32>() - 0.5, rng.random::<f32>() - 0.5, rng.random::<f32>() - 0.5];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            for c in 0..3 {
                feats[(k, c)] = v[c] / norm;
            }
        }
        let pc = PointCloud {
            positions: positions.clone(),
            labels: None,
            features: Some(feats.clone()),
        };
        let grid = project_features(&pc, 8, 64, &s).unwrap();
        // brute force: cell = sensor pixel / footprint
        let mut sums = Array3::<f64>::zeros((8, 64, 3));
        let mut counts = Array2::<usize>::zeros((8, 64));
        for (k, p) in positions.iter().enumerate() {
            let (i, j, _) = project_point(*p, &s).unwrap();
            let (gy, gx) = (i / 4, j / 4);
            counts[(gy, gx)] += 1;
            for c in 0..3 {
                sums[(gy, gx, c)] += feats[(k, c)] as f64;
            }
        }
        for gy in 0..8 {
            for gx in 0..64 {
                if counts[(gy, gx)] == 0 {
                    assert!(!grid.occupied[(gy, gx)]);
                    continue;
                }
                let mean: Vec<f64> =
                    (0..3).map(|c| sums[(gy, gx, c)] / counts[(gy, gx)] as f64).collect();
                let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-6 {
                    assert!(!grid.occupied[(gy, gx)]);
                    continue;
                }
                assert!(grid.occupied[(gy, gx)]);
                for c in 0..3 {
                    assert!((grid.values[(gy, gx, c)] as f64 - mean[c] / norm).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn feature_rows_unit_norm_or_zero() {
        let s = test_sensor();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let n = 300;
        let mut positions = Vec::new();
        let mut feats = Array2::<f32>::zeros((n, 5));
        for k in 0..n {
            positions.push([
                5.0 + 20.0 * rng.random::<f64>(),
                10.0 * (rng.random::<f64>() - 0.5),
                2.0 * (rng.random::<f64>() - 0.5),
            ]);
            let mut norm = 0.0f32;
            let mut row = [0.0f32; 5];
            for item in &mut row {
                *item = rng.random::<f32>() - 0.5;
                norm += *item * *item;
            }
            let norm = norm.sqrt();
            for (c, item) in row.iter().enumerate() {
                feats[(k, c)] = item / norm;
            }
        }
        let pc = PointCloud {
            positions,
            labels: None,
            features: Some(feats),
        };
        let grid = project_features(&pc, 8, 64, &s).unwrap();
        for gy in 0..8 {
            for gx in 0..64 {
                let n2: f32 = (0..5).map(|c| grid.values[(gy, gx, c)].powi(2)).sum();
                if grid.occupied[(gy, gx)] {
                    assert!((n2.sqrt() - 1.0).abs() < 1e-5);
                } else {
                    assert_eq!(n2, 0.0);
                }
            }
        }
    }

    #[test]
    fn missing_features_is_an_error() {
        let s = test_sensor();
        let pc = PointCloud {
            positions: vec![[10.0, 0.0, 0.0]],
            labels: None,
            features: None,
        };
        assert!(matches!(
            project_features(&pc, 8, 64, &s),
            Err(GeometryError::FeaturesRequired)
        ));
    }
}
