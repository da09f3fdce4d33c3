//! Adam with global-norm gradient clipping.

use super::{ParamId, ParamStore, Real};
use ndarray::ArrayD;
use std::collections::BTreeMap;

pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    m: BTreeMap<usize, ArrayD<T>>,
    v: BTreeMap<usize, ArrayD<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(clip: Option<f64>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// Apply one update. Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<ParamId, ArrayD<T>>,
        lr: f64,
    ) -> f64 {
        let mut sq = 0.0f64;
        for g in grads.values() {
            for &x in g.iter() {
                let xf = x.as_f64();
                sq += xf * xf;
            }
        }
        let norm = sq.sqrt();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for (&pid, grad) in grads {
            let m = self
                .m
                .entry(pid.0)
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(pid.0)
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let p = store.get_mut(pid);
            let pf = p.as_slice_mut().unwrap();
            let mf = m.as_slice_mut().unwrap();
            let vf = v.as_slice_mut().unwrap();
            let gf = grad.as_slice().unwrap();
            for i in 0..pf.len() {
                let gi = gf[i].as_f64() * scale;
                let mi = b1 * mf[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * vf[i].as_f64() + (1.0 - b2) * gi * gi;
                mf[i] = T::from_f64(mi);
                vf[i] = T::from_f64(vi);
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                pf[i] = T::from_f64(pf[i].as_f64() - lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        norm
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Checkpoint access: (t, first/second moments by parameter index).
    pub fn state(&self) -> (u64, &BTreeMap<usize, ArrayD<T>>, &BTreeMap<usize, ArrayD<T>>) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(
        &mut self,
        t: u64,
        m: BTreeMap<usize, ArrayD<T>>,
        v: BTreeMap<usize, ArrayD<T>>,
    ) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = Adam::new(Some(1.0));
        for _ in 0..400 {
            let x = store.get(ParamId(0)).clone();
            let mut grads = BTreeMap::new();
            grads.insert(ParamId(0), x.mapv(|v| 2.0 * v));
            opt.step(&mut store, &grads, 0.05);
            let _ = id;
        }
        assert!(store.get(ParamId(0))[[0]].abs() < 0.05);
    }

    #[test]
    fn clip_bounds_update_magnitude() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", ArrayD::from_elem(IxDyn(&[2]), 0.0));
        let mut opt = Adam::new(Some(1.0));
        let mut grads = BTreeMap::new();
        grads.insert(ParamId(0), ArrayD::from_elem(IxDyn(&[2]), 1e6));
        let norm = opt.step(&mut store, &grads, 0.1);
        assert!(norm > 1e6);
        // post-clip step is bounded by lr regardless of raw magnitude
        assert!(store.get(ParamId(0))[[0]].abs() <= 0.11);
    }
}
