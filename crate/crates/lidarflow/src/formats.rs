//! Binary file formats, little-endian throughout.
//!
//! - `R3PC`: point cloud with optional labels and features
//! - `R3RI`: range image with sensor header, validity and optional labels
//! - `R3FG`: feature grid with occupancy

use crate::geometry::{FeatureGrid, PointCloud, RangeImage, SensorModel};
use ndarray::{Array2, Array3};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("truncated or malformed file {0}")]
    Malformed(String),
}

const PC_VERSION: u32 = 1;
const FLAG_LABELS: u8 = 1;
const FLAG_FEATURES: u8 = 2;

fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Malformed(self.path.clone()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_all(path: &Path, magic: &[u8; 4]) -> Result<Vec<u8>, FormatError> {
    let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| io_err(path, e))?;
    if buf.len() < 4 || &buf[..4] != magic {
        return Err(FormatError::BadMagic(path.display().to_string()));
    }
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))
}

pub fn write_pointcloud(path: &Path, pc: &PointCloud) -> Result<(), FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(b"R3PC");
    out.extend_from_slice(&PC_VERSION.to_le_bytes());
    out.extend_from_slice(&(pc.len() as u32).to_le_bytes());
    let mut flags = 0u8;
    if pc.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if pc.features.is_some() {
        flags |= FLAG_FEATURES;
    }
    out.push(flags);
    for p in &pc.positions {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    if let Some(labels) = &pc.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    if let Some(features) = &pc.features {
        out.extend_from_slice(&(features.ncols() as u32).to_le_bytes());
        for v in features.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn read_pointcloud(path: &Path) -> Result<PointCloud, FormatError> {
    let buf = read_all(path, b"R3PC")?;
    let mut c = Cursor {
        buf: &buf,
        pos: 4,
        path: path.display().to_string(),
    };
    let _version = c.u32()?;
    let n = c.u32()? as usize;
    let flags = c.u8()?;
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push([c.f32()? as f64, c.f32()? as f64, c.f32()? as f64]);
    }
    let labels = if flags & FLAG_LABELS != 0 {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(c.u16()?);
        }
        Some(l)
    } else {
        None
    };
    let features = if flags & FLAG_FEATURES != 0 {
        let d = c.u32()? as usize;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(c.f32()?);
        }
        Some(
            Array2::from_shape_vec((n, d), data)
                .map_err(|_| FormatError::Malformed(c.path.clone()))?,
        )
    } else {
        None
    };
    Ok(PointCloud {
        positions,
        labels,
        features,
    })
}

pub fn write_rangeimage(path: &Path, ri: &RangeImage) -> Result<(), FormatError> {
    let s = &ri.sensor;
    let mut out = Vec::new();
    out.extend_from_slice(b"R3RI");
    out.extend_from_slice(&(s.height as u32).to_le_bytes());
    out.extend_from_slice(&(s.width as u32).to_le_bytes());
    for v in [s.f_up, s.f_down, s.r_min, s.r_max] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for v in ri.depth.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in ri.valid.iter() {
        out.push(*v as u8);
    }
    if let Some(labels) = &ri.labels {
        for l in labels.iter() {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn read_rangeimage(path: &Path) -> Result<RangeImage, FormatError> {
    let buf = read_all(path, b"R3RI")?;
    let mut c = Cursor {
        buf: &buf,
        pos: 4,
        path: path.display().to_string(),
    };
    let h = c.u32()? as usize;
    let w = c.u32()? as usize;
    let f_up = c.f32()? as f64;
    let f_down = c.f32()? as f64;
    let r_min = c.f32()? as f64;
    let r_max = c.f32()? as f64;
    let sensor = SensorModel {
        f_up,
        f_down,
        height: h,
        width: w,
        r_min,
        r_max,
    };
    let mut depth = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        depth.push(c.f32()?);
    }
    let mut valid = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        valid.push(c.u8()? != 0);
    }
    let labels = if c.remaining() >= 2 * h * w {
        let mut l = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            l.push(c.u16()?);
        }
        Some(Array2::from_shape_vec((h, w), l).map_err(|_| FormatError::Malformed(c.path.clone()))?)
    } else {
        None
    };
    Ok(RangeImage {
        depth: Array2::from_shape_vec((h, w), depth)
            .map_err(|_| FormatError::Malformed(path.display().to_string()))?,
        valid: Array2::from_shape_vec((h, w), valid)
            .map_err(|_| FormatError::Malformed(path.display().to_string()))?,
        labels,
        sensor,
    })
}

pub fn write_featuregrid(path: &Path, fg: &FeatureGrid) -> Result<(), FormatError> {
    let (h, w, d) = fg.dims();
    let mut out = Vec::new();
    out.extend_from_slice(b"R3FG");
    for v in [h as u32, w as u32, d as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in fg.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in fg.occupied.iter() {
        out.push(*v as u8);
    }
    write_file(path, &out)
}

pub fn read_featuregrid(path: &Path) -> Result<FeatureGrid, FormatError> {
    let buf = read_all(path, b"R3FG")?;
    let mut c = Cursor {
        buf: &buf,
        pos: 4,
        path: path.display().to_string(),
    };
    let h = c.u32()? as usize;
    let w = c.u32()? as usize;
    let d = c.u32()? as usize;
    let mut values = Vec::with_capacity(h * w * d);
    for _ in 0..h * w * d {
        values.push(c.f32()?);
    }
    let mut occ = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        occ.push(c.u8()? != 0);
    }
    Ok(FeatureGrid {
        values: Array3::from_shape_vec((h, w, d), values)
            .map_err(|_| FormatError::Malformed(path.display().to_string()))?,
        occupied: Array2::from_shape_vec((h, w), occ)
            .map_err(|_| FormatError::Malformed(path.display().to_string()))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sensor() -> SensorModel {
        SensorModel {
            f_up: 0.05,
            f_down: 0.44,
            height: 8,
            width: 16,
            r_min: 1.0,
            r_max: 56.0,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pointcloud_roundtrip(
            n in 0usize..20,
            with_labels in any::<bool>(),
            with_features in any::<bool>(),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let positions: Vec<[f64;3]> = (0..n)
                .map(|_| [(rng.random::<f32>() * 10.0) as f64, rng.random::<f32>() as f64, rng.random::<f32>() as f64])
                .collect();
            let labels = with_labels.then(|| (0..n).map(|_| rng.random::<u16>()).collect());
            let features = with_features.then(|| {
                Array2::from_shape_fn((n, 4), |_| rng.random::<f32>())
            });
            let pc = PointCloud { positions, labels, features };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.r3pc");
            write_pointcloud(&path, &pc).unwrap();
            let rt = read_pointcloud(&path).unwrap();
            prop_assert_eq!(&pc.positions, &rt.positions);
            prop_assert_eq!(&pc.labels, &rt.labels);
            prop_assert_eq!(&pc.features, &rt.features);
        }
    }

    #[test]
    fn rangeimage_roundtrip_with_and_without_labels() {
        let s = sensor();
        let mut ri = RangeImage::empty(s);
        ri.depth[(2, 3)] = 12.5;
        ri.valid[(2, 3)] = true;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.r3ri");
        write_rangeimage(&p, &ri).unwrap();
        let rt = read_rangeimage(&p).unwrap();
        assert_eq!(ri.depth, rt.depth);
        assert_eq!(ri.valid, rt.valid);
        assert!(rt.labels.is_none());

        ri.labels = Some(Array2::from_elem((s.height, s.width), 3u16));
        write_rangeimage(&p, &ri).unwrap();
        let rt = read_rangeimage(&p).unwrap();
        assert_eq!(ri.labels, rt.labels);
    }

    #[test]
    fn featuregrid_roundtrip() {
        let values = Array3::from_shape_fn((2, 3, 4), |(a, b, c)| (a + 2 * b + 3 * c) as f32);
        let occupied = Array2::from_shape_fn((2, 3), |(a, b)| (a + b) % 2 == 0);
        let fg = FeatureGrid { values, occupied };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.r3fg");
        write_featuregrid(&p, &fg).unwrap();
        let rt = read_featuregrid(&p).unwrap();
        assert_eq!(fg.values, rt.values);
        assert_eq!(fg.occupied, rt.occupied);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.r3pc");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(matches!(read_pointcloud(&p), Err(FormatError::BadMagic(_))));
    }
}

/// Grayscale PNG preview of a range image (normalized depth; invalid black).
pub fn write_depth_png(path: &Path, ri: &crate::geometry::RangeImage) -> Result<(), FormatError> {
    let (h, w) = (ri.sensor.height, ri.sensor.width);
    let scale = 4u32;
    let mut img = image::GrayImage::new(w as u32 * scale, h as u32 * scale);
    for i in 0..h {
        for j in 0..w {
            let v = if ri.valid[(i, j)] {
                let x = crate::vae::depth_normalize(ri.depth[(i, j)] as f64, ri.sensor.r_max);
                (255.0 - (x + 1.0) * 0.5 * 235.0) as u8
            } else {
                0
            };
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(j as u32 * scale + dx, i as u32 * scale + dy, image::Luma([v]));
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    img.save(path)
        .map_err(|e| FormatError::Malformed(format!("{}: {e}", path.display())))
}
