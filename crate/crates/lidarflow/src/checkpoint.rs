//! Binary checkpoint container with bit-exact round-tripping.

use crate::nn::{Adam, ParamStore, Real};
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad checkpoint file {0}")]
    Malformed(String),
    #[error("checkpoint dtype does not match the requested element type")]
    DtypeMismatch,
    #[error("required checkpoint missing: {0}")]
    CheckpointRequired(String),
}

/// Named tensors plus bookkeeping. Tensor keys use `/`-separated prefixes:
/// `vae/...`, `disc/...`, `fm/...`, `gvae/...`, `adam/<which>/{m,v}/...`,
/// `stats/...`.
pub struct Checkpoint<T: Real> {
    pub stage: String,
    pub step: u64,
    pub config_hash: String,
    pub config_toml: String,
    pub tensors: BTreeMap<String, ArrayD<T>>,
    pub scalars: BTreeMap<String, f64>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(stage: &str, step: u64, config_hash: &str, config_toml: &str) -> Self {
        Checkpoint {
            stage: stage.to_string(),
            step,
            config_hash: config_hash.to_string(),
            config_toml: config_toml.to_string(),
            tensors: BTreeMap::new(),
            scalars: BTreeMap::new(),
        }
    }

    pub fn put_store(&mut self, prefix: &str, store: &ParamStore<T>) {
        for id in store.ids() {
            self.tensors
                .insert(format!("{prefix}/{}", store.name(id)), store.get(id).clone());
        }
    }

    /// Copy matching tensors into a store. Returns how many parameters were
    /// filled; missing names are left at their current values.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<T>) -> usize {
        let ids: Vec<crate::nn::ParamId> = store.ids().collect();
        let mut n = 0;
        for id in ids {
            let key = format!("{prefix}/{}", store.name(id));
            if let Some(t) = self.tensors.get(&key) {
                assert_eq!(
                    t.shape(),
                    store.get(id).shape(),
                    "checkpoint tensor {key} has wrong shape"
                );
                *store.get_mut(id) = t.clone();
                n += 1;
            }
        }
        n
    }

    pub fn put_adam(&mut self, which: &str, store: &ParamStore<T>, opt: &Adam<T>) {
        let (t, m, v) = opt.state();
        self.scalars.insert(format!("adam_t/{which}"), t as f64);
        for (idx, arr) in m {
            self.tensors
                .insert(format!("adam/{which}/m/{}", store.name(crate::nn::ParamId(*idx))), arr.clone());
        }
        for (idx, arr) in v {
            self.tensors
                .insert(format!("adam/{which}/v/{}", store.name(crate::nn::ParamId(*idx))), arr.clone());
        }
    }

    pub fn load_adam(&self, which: &str, store: &ParamStore<T>, opt: &mut Adam<T>) {
        let t = self
            .scalars
            .get(&format!("adam_t/{which}"))
            .copied()
            .unwrap_or(0.0) as u64;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for id in store.ids() {
            let name = store.name(id);
            if let Some(arr) = self.tensors.get(&format!("adam/{which}/m/{name}")) {
                m.insert(id.0, arr.clone());
            }
            if let Some(arr) = self.tensors.get(&format!("adam/{which}/v/{name}")) {
                v.insert(id.0, arr.clone());
            }
        }
        opt.restore(t, m, v);
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut out = Vec::new();
        out.extend_from_slice(b"R3CK");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.push(T::DTYPE_TAG);
        write_str(&mut out, &self.stage);
        out.extend_from_slice(&self.step.to_le_bytes());
        write_str(&mut out, &self.config_hash);
        write_str(&mut out, &self.config_toml);
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (k, v) in &self.scalars {
            write_str(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (k, arr) in &self.tensors {
            write_str(&mut out, k);
            out.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
            for d in arr.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in arr.iter() {
                v.write_le(&mut out);
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(io)?;
            f.write_all(&out).map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let io = |e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(io)?
            .read_to_end(&mut buf)
            .map_err(io)?;
        let bad = || CheckpointError::Malformed(path.display().to_string());
        if buf.len() < 9 || &buf[..4] != b"R3CK" {
            return Err(bad());
        }
        let mut pos = 8usize; // magic + version
        if buf[pos] != T::DTYPE_TAG {
            return Err(CheckpointError::DtypeMismatch);
        }
        pos += 1;
        let stage = read_str(&buf, &mut pos).ok_or_else(bad)?;
        let step = u64::from_le_bytes(buf.get(pos..pos + 8).ok_or_else(bad)?.try_into().unwrap());
        pos += 8;
        let config_hash = read_str(&buf, &mut pos).ok_or_else(bad)?;
        let config_toml = read_str(&buf, &mut pos).ok_or_else(bad)?;
        let nsc = u32::from_le_bytes(buf.get(pos..pos + 4).ok_or_else(bad)?.try_into().unwrap());
        pos += 4;
        let mut scalars = BTreeMap::new();
        for _ in 0..nsc {
            let k = read_str(&buf, &mut pos).ok_or_else(bad)?;
            let v =
                f64::from_le_bytes(buf.get(pos..pos + 8).ok_or_else(bad)?.try_into().unwrap());
            pos += 8;
            scalars.insert(k, v);
        }
        let nt = u32::from_le_bytes(buf.get(pos..pos + 4).ok_or_else(bad)?.try_into().unwrap());
        pos += 4;
        let mut tensors = BTreeMap::new();
        for _ in 0..nt {
            let k = read_str(&buf, &mut pos).ok_or_else(bad)?;
            let nd =
                u32::from_le_bytes(buf.get(pos..pos + 4).ok_or_else(bad)?.try_into().unwrap());
            pos += 4;
            let mut shape = Vec::with_capacity(nd as usize);
            for _ in 0..nd {
                let d = u64::from_le_bytes(
                    buf.get(pos..pos + 8).ok_or_else(bad)?.try_into().unwrap(),
                );
                pos += 8;
                shape.push(d as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let bytes = buf.get(pos..pos + T::BYTE_WIDTH).ok_or_else(bad)?;
                data.push(T::read_le(bytes));
                pos += T::BYTE_WIDTH;
            }
            tensors.insert(k, ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| bad())?);
        }
        Ok(Checkpoint {
            stage,
            step,
            config_hash,
            config_toml,
            tensors,
            scalars,
        })
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_str(buf: &[u8], pos: &mut usize) -> Option<String> {
    let n = u32::from_le_bytes(buf.get(*pos..*pos + 4)?.try_into().unwrap()) as usize;
    *pos += 4;
    let s = std::str::from_utf8(buf.get(*pos..*pos + n)?).ok()?.to_string();
    *pos += n;
    Some(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::<f32>::new();
        store.add("a.w", ArrayD::from_shape_fn(IxDyn(&[3, 2]), |ix| (ix[0] * 2 + ix[1]) as f32 * 0.37 - 1.0));
        store.add("a.b", ArrayD::from_elem(IxDyn(&[2]), std::f32::consts::PI));
        let mut opt = Adam::<f32>::new(Some(1.0));
        let mut grads = BTreeMap::new();
        grads.insert(crate::nn::ParamId(0), ArrayD::from_elem(IxDyn(&[3, 2]), 0.11f32));
        opt.step(&mut store, &grads, 1e-3);

        let mut ck = Checkpoint::<f32>::new("stage-x", 42, "deadbeef", "[x]\ny = 1\n");
        ck.put_store("vae", &store);
        ck.put_adam("vae", &store, &opt);
        ck.scalars.insert("stats/count".into(), 7.0);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.r3ck");
        ck.save(&p).unwrap();
        let rt = Checkpoint::<f32>::load(&p).unwrap();
        assert_eq!(rt.stage, "stage-x");
        assert_eq!(rt.step, 42);
        assert_eq!(rt.config_hash, "deadbeef");
        assert_eq!(rt.config_toml, "[x]\ny = 1\n");
        assert_eq!(rt.scalars["stats/count"], 7.0);
        for (k, v) in &ck.tensors {
            let r = &rt.tensors[k];
            assert_eq!(v.shape(), r.shape());
            for (a, b) in v.iter().zip(r.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "tensor {k} not bit-exact");
            }
        }
        assert!(matches!(
            Checkpoint::<f64>::load(&p),
            Err(CheckpointError::DtypeMismatch)
        ));
    }

    #[test]
    fn loading_into_store_restores_values() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", ArrayD::from_elem(IxDyn(&[2]), 5.0));
        let mut ck = Checkpoint::<f64>::new("s", 0, "h", "");
        ck.put_store("fm", &store);
        *store.get_mut(crate::nn::ParamId(0)) = ArrayD::zeros(IxDyn(&[2]));
        let n = ck.load_store("fm", &mut store);
        assert_eq!(n, 1);
        assert_eq!(store.get(crate::nn::ParamId(0))[[0]], 5.0);
    }
}
