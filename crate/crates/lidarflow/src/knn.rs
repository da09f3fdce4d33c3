//! Exact nearest-neighbor search over 3-D points (static kd-tree).
//! Ties are broken by point index for determinism.

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    // nodes laid out as a balanced implicit structure over `order`
    order: Vec<u32>,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl KdTree {
    pub fn build(points: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let n = order.len();
        if n > 0 {
            Self::build_rec(&points, &mut order, 0, n, 0);
        }
        KdTree { points, order }
    }

    fn build_rec(points: &[[f64; 3]], order: &mut [u32], lo: usize, hi: usize, axis: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mid = (lo + hi) / 2;
        order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a as usize][axis]
                .partial_cmp(&points[b as usize][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        Self::build_rec(points, order, lo, mid, (axis + 1) % 3);
        Self::build_rec(points, order, mid + 1, hi, (axis + 1) % 3);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and squared distance of the nearest point to `q`.
    pub fn nearest(&self, q: &[f64; 3]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(q, 0, self.order.len(), 0, &mut best);
        best
    }

    fn nearest_rec(&self, q: &[f64; 3], lo: usize, hi: usize, axis: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid] as usize;
        let d = dist2(q, &self.points[idx]);
        if d < best.1 || (d == best.1 && idx < best.0) {
            *best = (idx, d);
        }
        let delta = q[axis] - self.points[idx][axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(q, near.0, near.1, (axis + 1) % 3, best);
        if delta * delta <= best.1 {
            self.nearest_rec(q, far.0, far.1, (axis + 1) % 3, best);
        }
    }

    /// The `k` nearest points to `q`, sorted by (distance, index).
    pub fn k_nearest(&self, q: &[f64; 3], k: usize) -> Vec<(usize, f64)> {
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_rec(q, 0, self.order.len(), 0, k, &mut heap);
        let mut out: Vec<(usize, f64)> = heap.into_iter().map(|(d, i)| (i, d)).collect();
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        out
    }

    fn knn_rec(
        &self,
        q: &[f64; 3],
        lo: usize,
        hi: usize,
        axis: usize,
        k: usize,
        heap: &mut Vec<(f64, usize)>,
    ) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid] as usize;
        let d = dist2(q, &self.points[idx]);
        let worst = |h: &Vec<(f64, usize)>| h.iter().cloned().fold((f64::NEG_INFINITY, 0), f64_max_pair);
        if heap.len() < k {
            heap.push((d, idx));
        } else {
            let w = worst(heap);
            if (d, idx_key(idx)) < (w.0, idx_key(w.1)) {
                let pos = heap
                    .iter()
                    .position(|&(hd, hi_)| (hd, idx_key(hi_)) == (w.0, idx_key(w.1)))
                    .unwrap();
                heap[pos] = (d, idx);
            }
        }
        let delta = q[axis] - self.points[idx][axis];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(q, near.0, near.1, (axis + 1) % 3, k, heap);
        let w = if heap.len() < k {
            f64::INFINITY
        } else {
            worst(heap).0
        };
        if delta * delta <= w {
            self.knn_rec(q, far.0, far.1, (axis + 1) % 3, k, heap);
        }
    }
}

fn f64_max_pair(acc: (f64, usize), x: (f64, usize)) -> (f64, usize) {
    // larger distance wins; on ties the larger index is "worse"
    if (x.0, idx_key(x.1)) > (acc.0, idx_key(acc.1)) {
        x
    } else {
        acc
    }
}

fn idx_key(i: usize) -> usize {
    i
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn nearest_matches_bruteforce() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 3]> = (0..300)
            .map(|_| [rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0, rng.random::<f64>()])
            .collect();
        let tree = KdTree::build(pts.clone());
        for _ in 0..100 {
            let q = [rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0, rng.random::<f64>()];
            let (bi, bd) = tree.nearest(&q);
            let (oi, od) = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, dist2(&q, p)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .unwrap();
            assert_eq!(bi, oi);
            assert!((bd - od).abs() < 1e-12);
        }
    }

    #[test]
    fn k_nearest_matches_bruteforce_with_ties() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        // grid with duplicates to force distance ties
        let mut pts: Vec<[f64; 3]> = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                pts.push([x as f64, y as f64, 0.0]);
                pts.push([x as f64, y as f64, 0.0]);
            }
        }
        let tree = KdTree::build(pts.clone());
        for _ in 0..50 {
            let q = [rng.random::<f64>() * 5.0, rng.random::<f64>() * 5.0, 0.0];
            let k = 7;
            let got = tree.k_nearest(&q, k);
            let mut all: Vec<(usize, f64)> =
                pts.iter().enumerate().map(|(i, p)| (i, dist2(&q, p))).collect();
            all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<(usize, f64)> = all.into_iter().take(k).collect();
            assert_eq!(got, want);
        }
    }
}
