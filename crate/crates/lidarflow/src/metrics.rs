//! Distributional evaluation: Fréchet distances over pooled teacher
//! features, BEV histogram JSD, Chamfer distance and minimum matching
//! distance over BEV-voxelized scenes.

use crate::geometry::{range_to_pointcloud, PointCloud, RangeImage};
use crate::knn::KdTree;
use crate::teacher::{extract_features, TeacherConfig};
use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("no points inside the histogram extent")]
    EmptyHistogram,
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("numerical failure: {0}")]
    NumericalError(String),
    #[error(transparent)]
    Teacher(#[from] crate::teacher::TeacherError),
}

/// Gaussian summary of pooled per-scene features.
#[derive(Clone, Debug)]
pub struct FeatureGaussian {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

/// Which pooled teacher variant produced a feature set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extractor {
    /// Teacher features of the scene unprojected from its range image.
    RangeLevel,
    /// Teacher features pooled over the raw stored points.
    PointLevel,
}

impl Extractor {
    pub fn id(&self) -> &'static str {
        match self {
            Extractor::RangeLevel => "frd-range",
            Extractor::PointLevel => "frd-point",
        }
    }
}

/// Pool one scene into a single feature vector: mean teacher feature over
/// points. Labels are stripped so real and generated scenes are described
/// identically.
pub fn pool_scene(cloud: &PointCloud, teacher: &TeacherConfig) -> Result<Vec<f64>, MetricsError> {
    let unlabeled = PointCloud {
        positions: cloud.positions.clone(),
        labels: None,
        features: None,
    };
    let with_features = extract_features(&unlabeled, teacher)?;
    let feats = with_features.features.unwrap();
    let d = feats.ncols();
    let n = feats.nrows();
    let mut mean = vec![0.0f64; d];
    for row in feats.rows() {
        for (c, v) in row.iter().enumerate() {
            mean[c] += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    Ok(mean)
}

/// Pooled per-scene features for a set of scenes under an extractor.
pub fn pooled_features(
    ranges: &[RangeImage],
    clouds: &[PointCloud],
    extractor: Extractor,
    teacher: &TeacherConfig,
) -> Result<FeatureGaussian, MetricsError> {
    let rows: Vec<Vec<f64>> = match extractor {
        Extractor::RangeLevel => ranges
            .iter()
            .map(|ri| pool_scene(&range_to_pointcloud(ri), teacher))
            .collect::<Result<_, _>>()?,
        Extractor::PointLevel => clouds
            .iter()
            .map(|pc| pool_scene(pc, teacher))
            .collect::<Result<_, _>>()?,
    };
    feature_gaussian(&rows)
}

/// Sample mean and covariance of feature rows. With fewer than D+1 rows
/// the covariance is ridge-regularized to stay PSD.
pub fn feature_gaussian(rows: &[Vec<f64>]) -> Result<FeatureGaussian, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptySampleSet);
    }
    let n = rows.len();
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(MetricsError::ShapeError("ragged feature rows".into()));
    }
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for c in 0..d {
            mean[c] += r[c];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v; // symmetrize exactly
        }
    }
    if n <= d {
        for a in 0..d {
            cov[(a, a)] += 1e-6;
        }
    }
    Ok(FeatureGaussian {
        mean,
        cov,
        count: n,
    })
}

/// Squared Fréchet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})`, matrix square root
/// via the symmetric eigen route with negative eigenvalues clipped at 0.
pub fn frechet_distance(a: &FeatureGaussian, b: &FeatureGaussian) -> Result<f64, MetricsError> {
    let d = a.mean.len();
    if b.mean.len() != d {
        return Err(MetricsError::ShapeError("dimension mismatch".into()));
    }
    let scale = 1.0f64.max(a.cov.trace().abs()).max(b.cov.trace().abs());
    let sqrt_a = psd_sqrt(&a.cov, scale)?;
    let m = &sqrt_a * &b.cov * &sqrt_a;
    let m = symmetrize(&m);
    let eig = m.symmetric_eigenvalues();
    let mut tr_sqrt = 0.0;
    for v in eig.iter() {
        if *v < -1e-8 * scale * scale {
            return Err(MetricsError::NumericalError(format!(
                "product eigenvalue {v} below tolerance"
            )));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let mut dist = 0.0;
    for c in 0..d {
        let dm = a.mean[c] - b.mean[c];
        dist += dm * dm;
    }
    dist += a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(dist.max(0.0))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

fn psd_sqrt(m: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>, MetricsError> {
    let sym = symmetrize(m);
    let eig = nalgebra::SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter() {
        if *v < -1e-8 * scale {
            return Err(MetricsError::NumericalError(format!(
                "covariance eigenvalue {v} below tolerance"
            )));
        }
    }
    let d = m.nrows();
    let mut lam = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        lam[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * lam * eig.eigenvectors.transpose())
}

/// Normalized 2-D histogram of (x, y) positions within `±extent`.
#[derive(Clone, Debug)]
pub struct BevHistogram {
    pub bins: Array2<f64>,
    pub extent: f64,
}

/// Histogram a cloud in bird's-eye view. Out-of-extent points are dropped;
/// boundary points land in the edge bins.
pub fn bev_histogram(
    pc: &PointCloud,
    extent: f64,
    bins: (usize, usize),
) -> Result<BevHistogram, MetricsError> {
    bev_histogram_of_points(pc.positions.iter().copied(), extent, bins)
}

/// Histogram an arbitrary point stream (used to pool whole scene sets).
pub fn bev_histogram_of_points(
    points: impl Iterator<Item = [f64; 3]>,
    extent: f64,
    bins: (usize, usize),
) -> Result<BevHistogram, MetricsError> {
    if extent <= 0.0 {
        return Err(MetricsError::ShapeError("extent must be positive".into()));
    }
    let mut h = Array2::<f64>::zeros(bins);
    let mut total = 0usize;
    for p in points {
        if p[0].abs() > extent || p[1].abs() > extent {
            continue;
        }
        let bx = (((p[0] + extent) / (2.0 * extent)) * bins.0 as f64) as usize;
        let by = (((p[1] + extent) / (2.0 * extent)) * bins.1 as f64) as usize;
        h[(bx.min(bins.0 - 1), by.min(bins.1 - 1))] += 1.0;
        total += 1;
    }
    if total == 0 {
        return Err(MetricsError::EmptyHistogram);
    }
    h.mapv_inplace(|v| v / total as f64);
    Ok(BevHistogram { bins: h, extent })
}

/// Jensen–Shannon divergence (natural log), bounded by ln 2.
pub fn jsd(h1: &BevHistogram, h2: &BevHistogram) -> Result<f64, MetricsError> {
    if h1.bins.dim() != h2.bins.dim() {
        return Err(MetricsError::ShapeError("histogram binning mismatch".into()));
    }
    let mut acc = 0.0;
    for (&p, &q) in h1.bins.iter().zip(h2.bins.iter()) {
        let m = 0.5 * (p + q);
        if p > 0.0 {
            acc += 0.5 * p * (p / m).ln();
        }
        if q > 0.0 {
            acc += 0.5 * q * (q / m).ln();
        }
    }
    Ok(acc.clamp(0.0, std::f64::consts::LN_2))
}

/// Symmetric Chamfer distance with squared point-to-nearest distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricsError> {
    chamfer_points(&a.positions, &b.positions)
}

pub fn chamfer_points(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySampleSet);
    }
    let ta = KdTree::build(a.to_vec());
    let tb = KdTree::build(b.to_vec());
    let mut d_ab = 0.0;
    for p in a {
        d_ab += tb.nearest(p).1;
    }
    let mut d_ba = 0.0;
    for p in b {
        d_ba += ta.nearest(p).1;
    }
    Ok(d_ab / a.len() as f64 + d_ba / b.len() as f64)
}

/// Centers of occupied BEV voxels of size `voxel`, as z=0 points.
pub fn bev_voxel_centers(pc: &PointCloud, voxel: f64) -> Vec<[f64; 3]> {
    let mut cells: Vec<(i64, i64)> = pc
        .positions
        .iter()
        .map(|p| ((p[0] / voxel).floor() as i64, (p[1] / voxel).floor() as i64))
        .collect();
    cells.sort_unstable();
    cells.dedup();
    cells
        .into_iter()
        .map(|(ix, iy)| [(ix as f64 + 0.5) * voxel, (iy as f64 + 0.5) * voxel, 0.0])
        .collect()
}

/// Minimum matching distance: for every validation scene, the Chamfer
/// distance to its closest generated scene (both BEV-voxelized), averaged.
pub fn mmd(
    generated: &[PointCloud],
    validation: &[PointCloud],
    voxel: f64,
) -> Result<f64, MetricsError> {
    if generated.is_empty() || validation.is_empty() {
        return Err(MetricsError::EmptySampleSet);
    }
    let gen_vox: Vec<Vec<[f64; 3]>> = generated.iter().map(|pc| bev_voxel_centers(pc, voxel)).collect();
    let val_vox: Vec<Vec<[f64; 3]>> = validation.iter().map(|pc| bev_voxel_centers(pc, voxel)).collect();
    let mut total = 0.0;
    for v in &val_vox {
        let mut best = f64::INFINITY;
        for g in &gen_vox {
            let d = chamfer_points(v, g)?;
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    Ok(total / val_vox.len() as f64)
}

/// Flat report of metric values plus bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
    pub generated_count: usize,
    pub reference_count: usize,
    pub extractors: Vec<String>,
    pub config_hash: String,
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        self.values.values().all(|v| v.is_finite())
    }

    pub fn write(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, toml::to_string_pretty(self).expect("report serializes"))
    }

    pub fn read(path: &std::path::Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
