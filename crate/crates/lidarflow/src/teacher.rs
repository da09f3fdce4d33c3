//! Deterministic per-point geometric descriptor providing the alignment
//! targets: height, range, estimated surface normal, local density and an
//! optional class embedding, concatenated and unit-normalized.

use crate::geometry::PointCloud;
use crate::knn::KdTree;
use nalgebra::Matrix3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("need at least k={0} points, got {1}")]
    NeighborhoodTooSmall(usize, usize),
    #[error("class {0} not present in the cloud")]
    ClassNotFound(u16),
    #[error("invalid teacher config: {0}")]
    BadConfig(String),
    #[error("point cloud carries no features")]
    FeaturesRequired,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TeacherConfig {
    /// Output feature dimension.
    pub d: usize,
    /// Neighborhood size for normal/density estimation (self included).
    pub k: usize,
    pub w_height: f64,
    pub w_range: f64,
    pub w_normal: f64,
    pub w_density: f64,
    pub w_label: f64,
    /// Range used to normalize the range component.
    pub r_max: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            d: 16,
            k: 12,
            w_height: 1.0,
            w_range: 1.0,
            w_normal: 1.0,
            w_density: 1.0,
            w_label: 1.0,
            r_max: 56.0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<(), TeacherError> {
        if self.d < 4 {
            return Err(TeacherError::BadConfig("d must be at least 4".into()));
        }
        if self.k < 3 {
            return Err(TeacherError::BadConfig("k must be at least 3".into()));
        }
        let ws = [self.w_height, self.w_range, self.w_normal, self.w_density, self.w_label];
        if ws.iter().any(|w| *w < 0.0) {
            return Err(TeacherError::BadConfig("weights must be nonnegative".into()));
        }
        if ws.iter().sum::<f64>() <= 0.0 {
            return Err(TeacherError::BadConfig("weights must not all be zero".into()));
        }
        Ok(())
    }

    /// Dimensions reserved for the class embedding.
    pub fn label_dim(&self) -> usize {
        self.d.saturating_sub(6)
    }
}

/// Compute per-point features. The returned cloud shares positions/labels
/// with the input and carries a unit-norm feature row per point.
pub fn extract_features(pc: &PointCloud, cfg: &TeacherConfig) -> Result<PointCloud, TeacherError> {
    cfg.validate()?;
    let n = pc.len();
    if n < cfg.k {
        return Err(TeacherError::NeighborhoodTooSmall(cfg.k, n));
    }
    let pts: Vec<[f64; 3]> = pc.positions.clone();
    let tree = KdTree::build(pts.clone());
    let mut rows = Array2::<f32>::zeros((n, cfg.d));
    let mut raw = vec![0.0f64; 6 + cfg.label_dim()];
    for i in 0..n {
        let p = pts[i];
        // neighborhood includes the point itself
        let neigh = tree.k_nearest(&p, cfg.k);
        let r_k = neigh.last().map(|(_, d2)| d2.sqrt()).unwrap_or(0.0).max(1e-6);

        // centroid + covariance
        let mut mean = [0.0f64; 3];
        for (idx, _) in &neigh {
            for a in 0..3 {
                mean[a] += pts[*idx][a];
            }
        }
        for m in &mut mean {
            *m /= neigh.len() as f64;
        }
        let mut cov = Matrix3::<f64>::zeros();
        for (idx, _) in &neigh {
            let q = pts[*idx];
            let d = [q[0] - mean[0], q[1] - mean[1], q[2] - mean[2]];
            for a in 0..3 {
                for b in 0..3 {
                    cov[(a, b)] += d[a] * d[b];
                }
            }
        }
        cov /= neigh.len() as f64;
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut min_idx = 0;
        for a in 1..3 {
            if eig.eigenvalues[a] < eig.eigenvalues[min_idx] {
                min_idx = a;
            }
        }
        let ev = eig.eigenvectors.column(min_idx);
        let mut normal = [ev[0], ev[1], ev[2]];
        // canonical orientation: visible surfaces face the sensor
        let toward = normal[0] * p[0] + normal[1] * p[1] + normal[2] * p[2];
        if toward > 0.0 {
            for c in &mut normal {
                *c = -*c;
            }
        } else if toward == 0.0 {
            let lead = normal.iter().find(|v| **v != 0.0).copied().unwrap_or(0.0);
            if lead < 0.0 {
                for c in &mut normal {
                    *c = -*c;
                }
            }
        }

        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let density = cfg.k as f64 / (4.0 / 3.0 * std::f64::consts::PI * r_k.powi(3));

        raw.iter_mut().for_each(|v| *v = 0.0);
        raw[0] = cfg.w_height * (p[2] / 3.0).tanh();
        raw[1] = cfg.w_range * (2.0 * (range / cfg.r_max).clamp(0.0, 1.0) - 1.0);
        raw[2] = cfg.w_normal * normal[0];
        raw[3] = cfg.w_normal * normal[1];
        raw[4] = cfg.w_normal * normal[2];
        raw[5] = cfg.w_density * (density.ln() / 8.0).tanh();
        if cfg.label_dim() > 0 {
            if let Some(labels) = &pc.labels {
                let slot = (labels[i] as usize) % cfg.label_dim();
                raw[6 + slot] = cfg.w_label;
            }
        }
        let mut norm2 = 0.0;
        for v in raw.iter().take(cfg.d) {
            norm2 += v * v;
        }
        let norm = norm2.sqrt().max(1e-12);
        for c in 0..cfg.d {
            rows[(i, c)] = (raw.get(c).copied().unwrap_or(0.0) / norm) as f32;
        }
    }
    Ok(PointCloud {
        positions: pc.positions.clone(),
        labels: pc.labels.clone(),
        features: Some(rows),
    })
}

/// Unit-normalized mean feature of all points carrying `class`.
pub fn class_mean_feature(pc: &PointCloud, class: u16) -> Result<Vec<f32>, TeacherError> {
    let feats = pc.features.as_ref().ok_or(TeacherError::FeaturesRequired)?;
    let labels = pc.labels.as_ref().ok_or(TeacherError::ClassNotFound(class))?;
    let d = feats.ncols();
    let mut sum = vec![0.0f64; d];
    let mut count = 0usize;
    for (i, l) in labels.iter().enumerate() {
        if *l == class {
            for c in 0..d {
                sum[c] += feats[(i, c)] as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(TeacherError::ClassNotFound(class));
    }
    let mut norm2 = 0.0;
    for v in &mut sum {
        *v /= count as f64;
        norm2 += *v * *v;
    }
    let norm = norm2.sqrt().max(1e-12);
    Ok(sum.into_iter().map(|v| (v / norm) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn plane_cloud(n_side: usize) -> PointCloud {
        let mut positions = Vec::new();
        for x in 0..n_side {
            for y in 0..n_side {
                positions.push([2.0 + x as f64 * 0.2, -2.0 + y as f64 * 0.2, 0.0]);
            }
        }
        PointCloud {
            positions,
            labels: None,
            features: None,
        }
    }

    #[test]
    fn planar_neighborhoods_get_vertical_normals() {
        let cfg = TeacherConfig::default();
        let pc = plane_cloud(10);
        let out = extract_features(&pc, &cfg).unwrap();
        let feats = out.features.unwrap();
        // interior point: normal component must align with +-z
        let idx = 45;
        let nx = feats[(idx, 2)];
        let ny = feats[(idx, 3)];
        let nz = feats[(idx, 4)];
        let norm = (nx * nx + ny * ny + nz * nz).sqrt();
        assert!(norm > 1e-3);
        assert!((nx / norm).abs() < 1e-4 && (ny / norm).abs() < 1e-4);
        assert!((nz / norm).abs() > 0.999);
        // plane at z=0 seen from origin at z=0: sign fixed by the canonical rule
    }

    #[test]
    fn rows_are_unit_norm_and_deterministic() {
        let cfg = TeacherConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let positions: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                [
                    4.0 + 20.0 * rng.random::<f64>(),
                    10.0 * (rng.random::<f64>() - 0.5),
                    -1.5 + 2.0 * rng.random::<f64>(),
                ]
            })
            .collect();
        let pc = PointCloud {
            positions,
            labels: Some((0..200).map(|i| (i % 5) as u16).collect()),
            features: None,
        };
        let a = extract_features(&pc, &cfg).unwrap();
        let b = extract_features(&pc, &cfg).unwrap();
        assert_eq!(a.features, b.features);
        for row in a.features.unwrap().rows() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn permuting_points_permutes_features() {
        let cfg = TeacherConfig::default();
        let pc = plane_cloud(8);
        let out = extract_features(&pc, &cfg).unwrap();
        let feats = out.features.unwrap();
        let n = pc.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let permuted = PointCloud {
            positions: perm.iter().map(|&i| pc.positions[i]).collect(),
            labels: None,
            features: None,
        };
        let out_p = extract_features(&permuted, &cfg).unwrap();
        let feats_p = out_p.features.unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for c in 0..cfg.d {
                assert_eq!(feats_p[(new_i, c)], feats[(old_i, c)]);
            }
        }
    }

    #[test]
    fn z_rotation_preserves_scalar_components_and_rotates_normals() {
        let cfg = TeacherConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        // vertical wall face: normals horizontal, well conditioned
        let mut positions = Vec::new();
        for i in 0..15 {
            for j in 0..15 {
                positions.push([
                    8.0,
                    -1.4 + 0.2 * i as f64 + 0.001 * rng.random::<f64>(),
                    -1.4 + 0.2 * j as f64,
                ]);
            }
        }
        let pc = PointCloud {
            positions: positions.clone(),
            labels: None,
            features: None,
        };
        let angle = 1.1f64;
        let (s, c) = angle.sin_cos();
        let rotated = PointCloud {
            positions: positions
                .iter()
                .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
                .collect(),
            labels: None,
            features: None,
        };
        let fa = extract_features(&pc, &cfg).unwrap().features.unwrap();
        let fb = extract_features(&rotated, &cfg).unwrap().features.unwrap();
        for i in 0..pc.len() {
            // scalar components unchanged
            for comp in [0usize, 1, 5] {
                assert!((fa[(i, comp)] - fb[(i, comp)]).abs() < 1e-4);
            }
            // normal rotates with the cloud
            let (nxa, nya, nza) = (fa[(i, 2)] as f64, fa[(i, 3)] as f64, fa[(i, 4)] as f64);
            let (nxb, nyb, nzb) = (fb[(i, 2)] as f64, fb[(i, 3)] as f64, fb[(i, 4)] as f64);
            let rx = c * nxa - s * nya;
            let ry = s * nxa + c * nya;
            assert!((rx - nxb).abs() < 1e-4, "nx {rx} vs {nxb}");
            assert!((ry - nyb).abs() < 1e-4);
            assert!((nza - nzb).abs() < 1e-4);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let cfg = TeacherConfig::default();
        let pc = PointCloud {
            positions: vec![[1.0, 0.0, 0.0]; 5],
            labels: None,
            features: None,
        };
        assert!(matches!(
            extract_features(&pc, &cfg),
            Err(TeacherError::NeighborhoodTooSmall(12, 5))
        ));
    }

    #[test]
    fn class_mean_feature_cases() {
        let mut feats = Array2::<f32>::zeros((3, 4));
        feats[(0, 0)] = 1.0;
        feats[(1, 1)] = 1.0;
        feats[(2, 0)] = 1.0;
        let pc = PointCloud {
            positions: vec![[1.0, 0.0, 0.0]; 3],
            labels: Some(vec![2, 1, 1]),
            features: Some(feats),
        };
        // single point of class 2: exactly its feature
        let m2 = class_mean_feature(&pc, 2).unwrap();
        assert_eq!(m2, vec![1.0, 0.0, 0.0, 0.0]);
        // two distinct features: normalized mean
        let m1 = class_mean_feature(&pc, 1).unwrap();
        let e = (0.5f64 / (0.5f64.powi(2) * 2.0).sqrt()) as f32;
        assert!((m1[0] - e).abs() < 1e-6 && (m1[1] - e).abs() < 1e-6);
        assert!(matches!(
            class_mean_feature(&pc, 4),
            Err(TeacherError::ClassNotFound(4))
        ));
        // identical features: the same feature back
        let pc_same = PointCloud {
            labels: Some(vec![1, 1, 2]),
            ..pc.clone()
        };
        let mut f2 = pc_same.features.clone().unwrap();
        f2[(1, 0)] = 1.0;
        f2[(1, 1)] = 0.0;
        let pc_same = PointCloud {
            features: Some(f2),
            ..pc_same
        };
        let m = class_mean_feature(&pc_same, 1).unwrap();
        assert_eq!(m, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mixed_set_matches_bruteforce_mean() {
        let cfg = TeacherConfig::default();
        let pc = plane_cloud(8);
        let pc = PointCloud {
            labels: Some((0..pc.len()).map(|i| (i % 3) as u16).collect()),
            ..pc
        };
        let out = extract_features(&pc, &cfg).unwrap();
        let feats = out.features.as_ref().unwrap();
        let labels = out.labels.as_ref().unwrap();
        let got = class_mean_feature(&out, 1).unwrap();
        let mut sum = vec![0.0f64; cfg.d];
        let mut count = 0;
        for i in 0..out.len() {
            if labels[i] == 1 {
                for c in 0..cfg.d {
                    sum[c] += feats[(i, c)] as f64;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..cfg.d {
            assert!((got[c] as f64 - mean[c] / norm).abs() < 1e-6);
        }
    }
}
