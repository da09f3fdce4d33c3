//! Range-image VAE: convolutional encoder/decoder with circular horizontal
//! padding, a diagonal Gaussian posterior, and a small patch discriminator
//! for the adversarial term.

use crate::nn::{Binder, ConvLayer, Graph, GroupNormLayer, ParamStore, Real, Var};
use crate::rng::rng_for;
use ndarray::ArrayD;
#[cfg(test)]
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("invalid vae config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VaeConfig {
    pub in_ch: usize,
    pub base: usize,
    /// Total downsampling factors (powers of two).
    pub down_v: usize,
    pub down_h: usize,
    pub latent_ch: usize,
    /// Extra stride-1 conv blocks per stage.
    pub extra_convs: usize,
    pub groups: usize,
    pub kl_weight: f64,
    pub gan_weight: f64,
    pub gan_warmup: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            in_ch: 1,
            base: 16,
            down_v: 4,
            down_h: 4,
            latent_ch: 4,
            extra_convs: 1,
            groups: 4,
            kl_weight: 1e-6,
            gan_weight: 0.1,
            gan_warmup: 10_000,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self, h: usize, w: usize) -> Result<(), VaeError> {
        if self.latent_ch == 0 {
            return Err(VaeError::BadConfig("latent_ch must be >= 1".into()));
        }
        if !self.down_v.is_power_of_two() || !self.down_h.is_power_of_two() {
            return Err(VaeError::BadConfig("downsampling factors must be powers of two".into()));
        }
        if h % self.down_v != 0 || w % self.down_h != 0 {
            return Err(VaeError::BadConfig(format!(
                "input {h}x{w} not divisible by factors {}x{}",
                self.down_v, self.down_h
            )));
        }
        if self.kl_weight < 0.0 || self.gan_weight < 0.0 {
            return Err(VaeError::BadConfig("loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        (self.down_v.trailing_zeros().max(self.down_h.trailing_zeros())) as usize
    }

    fn stage_stride(&self, s: usize) -> (usize, usize) {
        let sv = if s < self.down_v.trailing_zeros() as usize { 2 } else { 1 };
        let sh = if s < self.down_h.trailing_zeros() as usize { 2 } else { 1 };
        (sv, sh)
    }

    fn width_at(&self, s: usize) -> usize {
        self.base * (1 << s.min(2))
    }
}

/// Diagonal Gaussian over the latent grid.
#[derive(Clone, Debug)]
pub struct Posterior<T: Real> {
    pub mu: ArrayD<T>,
    pub logvar: ArrayD<T>,
}

impl<T: Real> Posterior<T> {
    /// Reparameterized draw `mu + exp(0.5 logvar) * noise`.
    pub fn sample(&self, noise: &ArrayD<T>) -> ArrayD<T> {
        let mut out = self.mu.clone();
        ndarray::Zip::from(&mut out)
            .and(&self.logvar)
            .and(noise)
            .for_each(|o, &lv, &n| {
                *o = *o + (lv * T::from_f64(0.5)).exp() * n;
            });
        out
    }
}

struct Block {
    conv: ConvLayer,
    norm: Option<GroupNormLayer>,
    act: bool,
}

/// Encoder/decoder pair. Parameters live in one store under `enc.*` / `dec.*`.
pub struct Vae<T: Real> {
    pub cfg: VaeConfig,
    pub store: ParamStore<T>,
    enc: Vec<Block>,
    dec: Vec<(Option<(usize, usize)>, Block)>, // (upsample factors, block)
}

fn norm_groups(cfg_groups: usize, ch: usize) -> usize {
    let mut g = cfg_groups.min(ch);
    while ch % g != 0 {
        g -= 1;
    }
    g.max(1)
}

impl<T: Real> Vae<T> {
    pub fn new(cfg: VaeConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "vae-init", 0);
        let mut enc = Vec::new();
        let push = |store: &mut ParamStore<T>,
                    rng: &mut rand_chacha::ChaCha8Rng,
                    list: &mut Vec<Block>,
                    name: String,
                    ci: usize,
                    co: usize,
                    stride: (usize, usize),
                    cfg: &VaeConfig,
                    norm_act: bool| {
            let conv = ConvLayer::new(store, &name, ci, co, 3, stride, rng);
            let norm = norm_act
                .then(|| GroupNormLayer::new(store, &format!("{name}.gn"), co, norm_groups(cfg.groups, co)));
            list.push(Block {
                conv,
                norm,
                act: norm_act,
            });
        };

        // encoder
        push(&mut store, &mut rng, &mut enc, "enc.stem".into(), cfg.in_ch, cfg.base, (1, 1), &cfg, true);
        let mut ch = cfg.base;
        for s in 0..cfg.stages() {
            for e in 0..cfg.extra_convs {
                push(&mut store, &mut rng, &mut enc, format!("enc.s{s}.c{e}"), ch, ch, (1, 1), &cfg, true);
            }
            let co = cfg.width_at(s + 1);
            push(&mut store, &mut rng, &mut enc, format!("enc.s{s}.down"), ch, co, cfg.stage_stride(s), &cfg, true);
            ch = co;
        }
        push(&mut store, &mut rng, &mut enc, "enc.head".into(), ch, 2 * cfg.latent_ch, (1, 1), &cfg, false);

        // decoder mirrors the encoder
        let mut dec: Vec<(Option<(usize, usize)>, Block)> = Vec::new();
        let mut blocks: Vec<Block> = Vec::new();
        push(&mut store, &mut rng, &mut blocks, "dec.stem".into(), cfg.latent_ch, ch, (1, 1), &cfg, true);
        dec.push((None, blocks.pop().unwrap()));
        for s in (0..cfg.stages()).rev() {
            for e in 0..cfg.extra_convs {
                push(&mut store, &mut rng, &mut blocks, format!("dec.s{s}.c{e}"), ch, ch, (1, 1), &cfg, true);
                dec.push((None, blocks.pop().unwrap()));
            }
            let co = cfg.width_at(s);
            push(&mut store, &mut rng, &mut blocks, format!("dec.s{s}.up"), ch, co, (1, 1), &cfg, true);
            dec.push((Some(cfg.stage_stride(s)), blocks.pop().unwrap()));
            ch = co;
        }
        push(&mut store, &mut rng, &mut blocks, "dec.head".into(), ch, cfg.in_ch, (1, 1), &cfg, false);
        dec.push((None, blocks.pop().unwrap()));

        Vae { cfg, store, enc, dec }
    }

    fn run_block(&self, g: &mut Graph<T>, bind: &mut Binder, b: &Block, x: Var) -> Var {
        let mut y = b.conv.forward(g, bind, &self.store, x);
        if let Some(n) = &b.norm {
            y = n.forward(g, bind, &self.store, y);
        }
        if b.act {
            y = g.leaky_relu(y, T::from_f64(0.2));
        }
        y
    }

    /// Encoder graph: `x[B, in_ch, H, W]` to `(mu, logvar)`, both
    /// `[B, C, H/down_v, W/down_h]`. Logvar is clamped to `[-30, 20]`.
    pub fn encode_g(&self, g: &mut Graph<T>, bind: &mut Binder, x: Var) -> (Var, Var) {
        let mut y = x;
        for b in &self.enc {
            y = self.run_block(g, bind, b, y);
        }
        let c = self.cfg.latent_ch;
        let mu = g.narrow(y, 1, 0, c);
        let logvar_raw = g.narrow(y, 1, c, c);
        let logvar = g.clamp(logvar_raw, T::from_f64(-30.0), T::from_f64(20.0));
        (mu, logvar)
    }

    /// Decoder graph: latent to `[-1, 1]` reconstruction via tanh.
    pub fn decode_g(&self, g: &mut Graph<T>, bind: &mut Binder, z: Var) -> Var {
        let mut y = z;
        for (up, b) in &self.dec {
            if let Some((fy, fx)) = up {
                y = g.upsample_nearest(y, *fy, *fx);
            }
            y = self.run_block(g, bind, b, y);
        }
        g.tanh(y)
    }

    /// Value-level encode for inference paths.
    pub fn encode(&self, x: &ArrayD<T>) -> Result<Posterior<T>, VaeError> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let mut bind = Binder::frozen_all();
        let xv = g.constant(x.clone());
        let (mu, logvar) = self.encode_g(&mut g, &mut bind, xv);
        Ok(Posterior {
            mu: g.value(mu).clone(),
            logvar: g.value(logvar).clone(),
        })
    }

    /// Value-level decode for inference paths.
    pub fn decode(&self, z: &ArrayD<T>) -> Result<ArrayD<T>, VaeError> {
        if z.ndim() != 4 || z.shape()[1] != self.cfg.latent_ch {
            return Err(VaeError::ShapeError(format!(
                "latent shape {:?} does not match config",
                z.shape()
            )));
        }
        let mut g = Graph::new();
        let mut bind = Binder::frozen_all();
        let zv = g.constant(z.clone());
        let out = self.decode_g(&mut g, &mut bind, zv);
        Ok(g.value(out).clone())
    }

    fn check_input(&self, x: &ArrayD<T>) -> Result<(), VaeError> {
        if x.ndim() != 4 || x.shape()[1] != self.cfg.in_ch {
            return Err(VaeError::ShapeError(format!("bad input shape {:?}", x.shape())));
        }
        self.cfg
            .validate(x.shape()[2], x.shape()[3])
            .map_err(|e| VaeError::ShapeError(e.to_string()))
    }
}

/// Patch discriminator: strided convs to a logit map.
pub struct Discriminator<T: Real> {
    pub store: ParamStore<T>,
    layers: Vec<Block>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(in_ch: usize, base: usize, groups: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "disc-init", 0);
        let mut layers = Vec::new();
        let c0 = ConvLayer::new(&mut store, "disc.c0", in_ch, base, 3, (2, 2), &mut rng);
        layers.push(Block { conv: c0, norm: None, act: false });
        let c1 = ConvLayer::new(&mut store, "disc.c1", base, 2 * base, 3, (2, 2), &mut rng);
        let n1 = GroupNormLayer::new(&mut store, "disc.c1.gn", 2 * base, norm_groups(groups, 2 * base));
        layers.push(Block { conv: c1, norm: Some(n1), act: false });
        let c2 = ConvLayer::new(&mut store, "disc.head", 2 * base, 1, 3, (1, 1), &mut rng);
        layers.push(Block { conv: c2, norm: None, act: false });
        Discriminator { store, layers }
    }

    /// Patch logits `[B, 1, H/4, W/4]`.
    pub fn forward_g(&self, g: &mut Graph<T>, bind: &mut Binder, x: Var) -> Var {
        let slope = T::from_f64(0.2);
        let mut y = x;
        for (i, b) in self.layers.iter().enumerate() {
            y = b.conv.forward(g, bind, &self.store, y);
            if let Some(n) = &b.norm {
                y = n.forward(g, bind, &self.store, y);
            }
            if i + 1 < self.layers.len() {
                y = g.leaky_relu(y, slope);
            }
        }
        y
    }
}

/// The separated VAE objective terms on the tape.
pub struct VaeLossParts {
    pub mse: Var,
    pub kl: Var,
    pub gan: Var,
    pub total: Var,
}

/// `L_MSE` over valid pixels + `w_kl * L_KL` + `w_gan * L_GAN` (generator
/// side, active only when `gan_active`).
pub fn vae_loss_g<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    xhat: Var,
    mu: Var,
    logvar: Var,
    valid_mask: Var,
    disc_logits_fake: Option<Var>,
    cfg: &VaeConfig,
    gan_active: bool,
) -> VaeLossParts {
    // masked reconstruction error
    let diff = g.sub(xhat, x);
    let sq = g.mul(diff, diff);
    let masked = g.mul(sq, valid_mask);
    let sum = g.sum_all(masked);
    let count: T = g.value(valid_mask).iter().copied().sum();
    let count = count.max(T::one());
    let mse = g.scale(sum, T::one() / count);

    // KL to the standard normal, elementwise mean
    let mu2 = g.mul(mu, mu);
    let ev = g.exp(logvar);
    let a = g.add(mu2, ev);
    let b = g.add_scalar(a, -T::one());
    let c = g.sub(b, logvar);
    let half = g.scale(c, T::from_f64(0.5));
    let kl = g.mean_all(half);

    // non-saturating hinge generator term: -mean D(x_hat)
    let gan = match (disc_logits_fake, gan_active) {
        (Some(logits), true) => {
            let m = g.mean_all(logits);
            g.neg(m)
        }
        _ => g.scalar_constant(T::zero()),
    };

    let klw = g.scale(kl, T::from_f64(cfg.kl_weight));
    let ganw = g.scale(gan, T::from_f64(cfg.gan_weight));
    let t0 = g.add(mse, klw);
    let total = g.add(t0, ganw);
    VaeLossParts { mse, kl, gan, total }
}

/// Hinge discriminator loss `mean relu(1 - D(x)) + mean relu(1 + D(x_hat))`.
pub fn disc_loss_g<T: Real>(g: &mut Graph<T>, logits_real: Var, logits_fake: Var) -> Var {
    let one = T::one();
    let nr = g.neg(logits_real);
    let a = g.add_scalar(nr, one);
    let ra = g.relu(a);
    let la = g.mean_all(ra);
    let b = g.add_scalar(logits_fake, one);
    let rb = g.relu(b);
    let lb = g.mean_all(rb);
    g.add(la, lb)
}

/// Map depths to the model's `[-1, 1]` input scale: log compression of the
/// far field. Sentinel (invalid) pixels map to exactly +1.
pub fn depth_normalize(d: f64, r_max: f64) -> f64 {
    2.0 * (1.0 + d.max(0.0)).ln() / (1.0 + r_max).ln() - 1.0
}

pub fn depth_denormalize(x: f64, r_max: f64) -> f64 {
    ((x + 1.0) * 0.5 * (1.0 + r_max).ln()).exp() - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn small_cfg() -> VaeConfig {
        VaeConfig {
            base: 4,
            extra_convs: 0,
            groups: 2,
            ..Default::default()
        }
    }

    fn rand_input(b: usize, h: usize, w: usize, seed: u64) -> ArrayD<f64> {
        use rand::Rng;
        let mut rng = rng_for(seed, "vae-test", 0);
        ArrayD::from_shape_fn(IxDyn(&[b, 1, h, w]), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn encode_produces_quarter_resolution_posterior() {
        let vae = Vae::<f64>::new(small_cfg(), 1);
        let x = rand_input(1, 32, 256, 2);
        let p = vae.encode(&x).unwrap();
        assert_eq!(p.mu.shape(), &[1, 4, 8, 64]);
        assert_eq!(p.logvar.shape(), &[1, 4, 8, 64]);
    }

    #[test]
    fn decode_round_trips_shape_and_bounds() {
        let vae = Vae::<f64>::new(small_cfg(), 1);
        let x = rand_input(1, 32, 256, 3);
        let p = vae.encode(&x).unwrap();
        let xhat = vae.decode(&p.mu).unwrap();
        assert_eq!(xhat.shape(), x.shape());
        assert!(xhat.iter().all(|v| *v >= -1.0 && *v <= 1.0));
    }

    #[test]
    fn constant_input_gives_spatially_constant_mu() {
        let vae = Vae::<f64>::new(small_cfg(), 1);
        let x = ArrayD::from_elem(IxDyn(&[1, 1, 16, 32]), 0.37);
        let p = vae.encode(&x).unwrap();
        for c in 0..4 {
            let ch = p.mu.index_axis(ndarray::Axis(1), c);
            let first = ch.iter().next().copied().unwrap();
            for v in ch.iter() {
                assert!((v - first).abs() < 1e-5);
            }
        }
    }

    fn circular_shift_cols(x: &ArrayD<f64>, s: usize) -> ArrayD<f64> {
        let mut out = x.clone();
        let w = x.shape()[3];
        for b in 0..x.shape()[0] {
            for c in 0..x.shape()[1] {
                for y in 0..x.shape()[2] {
                    for col in 0..w {
                        out[[b, c, y, (col + s) % w]] = x[[b, c, y, col]];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn encoder_and_decoder_are_shift_equivariant() {
        let vae = Vae::<f64>::new(small_cfg(), 5);
        let x = rand_input(1, 16, 64, 7);
        let shift_in = 8; // multiple of total horizontal stride 4
        let xs = circular_shift_cols(&x, shift_in);
        let p0 = vae.encode(&x).unwrap();
        let p1 = vae.encode(&xs).unwrap();
        let mu_shifted = circular_shift_cols(&p0.mu, shift_in / 4);
        for (a, b) in mu_shifted.iter().zip(p1.mu.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        let d0 = vae.decode(&p0.mu).unwrap();
        let d1 = vae.decode(&mu_shifted).unwrap();
        let d0s = circular_shift_cols(&d0, shift_in);
        for (a, b) in d0s.iter().zip(d1.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn posterior_sampling_matches_its_statistics() {
        use rand::Rng;
        let mu = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 0.7);
        let logvar = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), -0.5);
        let p = Posterior { mu, logvar };
        let zero = ArrayD::zeros(IxDyn(&[1, 1, 1, 1]));
        assert_eq!(p.sample(&zero)[[0, 0, 0, 0]], 0.7);

        let mut rng = rng_for(1, "post", 0);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let noise = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), rng.random::<f64>() * 0.0 + {
                let u: f64 = rng.sample(rand_distr::StandardNormal);
                u
            });
            let z = p.sample(&noise)[[0, 0, 0, 0]];
            sum += z;
            sum2 += z * z;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let want = (-0.5f64).exp();
        assert!((mean - 0.7).abs() < 0.02);
        assert!((var - want).abs() / want < 0.05);
    }

    #[test]
    fn loss_closed_form_values() {
        let cfg = small_cfg();
        let mut g = Graph::<f64>::new();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.3));
        let xhat = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.3));
        let mu = g.constant(ArrayD::zeros(IxDyn(&[1, 2, 1, 1])));
        let logvar = g.constant(ArrayD::zeros(IxDyn(&[1, 2, 1, 1])));
        let mask = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0));
        let parts = vae_loss_g(&mut g, x, xhat, mu, logvar, mask, None, &cfg, false);
        assert_eq!(g.scalar(parts.mse), 0.0);
        assert_eq!(g.scalar(parts.kl), 0.0);
        assert_eq!(g.scalar(parts.gan), 0.0);

        // scalar posterior mu=1, logvar=0: KL = 0.5
        let mut g = Graph::<f64>::new();
        let x = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 1, 1])));
        let xhat = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 1, 1])));
        let mu = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0));
        let logvar = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 1, 1])));
        let mask = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0));
        let parts = vae_loss_g(&mut g, x, xhat, mu, logvar, mask, None, &cfg, false);
        assert!((g.scalar(parts.kl) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_for_random_posteriors() {
        use rand::Rng;
        let cfg = small_cfg();
        let mut rng = rng_for(3, "klprop", 0);
        for _ in 0..50 {
            let mut g = Graph::<f64>::new();
            let shape = IxDyn(&[1, 2, 2, 2]);
            let x = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 2, 2])));
            let xhat = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 2, 2])));
            let mu = g.constant(ArrayD::from_shape_fn(shape.clone(), |_| {
                rng.random::<f64>() * 4.0 - 2.0
            }));
            let logvar = g.constant(ArrayD::from_shape_fn(shape.clone(), |_| {
                rng.random::<f64>() * 6.0 - 3.0
            }));
            let mask = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0));
            let parts = vae_loss_g(&mut g, x, xhat, mu, logvar, mask, None, &cfg, false);
            assert!(g.scalar(parts.kl) >= -1e-7);
        }
    }

    #[test]
    fn mse_ignores_invalid_pixels() {
        let cfg = small_cfg();
        let mut mask_arr = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0);
        mask_arr[[0, 0, 1, 1]] = 0.0;
        let base = ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.2);
        let mut perturbed = base.clone();
        perturbed[[0, 0, 1, 1]] = -0.9;
        let eval = |xh: &ArrayD<f64>| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(base.clone());
            let xhat = g.constant(xh.clone());
            let mu = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 1, 1])));
            let logvar = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 1, 1])));
            let mask = g.constant(mask_arr.clone());
            let parts = vae_loss_g(&mut g, x, xhat, mu, logvar, mask, None, &cfg, false);
            g.scalar(parts.mse)
        };
        assert_eq!(eval(&base), eval(&perturbed));
    }

    #[test]
    fn hinge_discriminator_loss_values() {
        // identical real/fake with small logits: chance level 2
        let mut g = Graph::<f64>::new();
        let l = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 2, 2])));
        let loss = disc_loss_g(&mut g, l, l);
        assert!((g.scalar(loss) - 2.0).abs() < 1e-12);
        // perfectly separated logits: loss 0
        let mut g = Graph::<f64>::new();
        let real = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 3.0));
        let fake = g.constant(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), -2.5));
        let loss = disc_loss_g(&mut g, real, fake);
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn depth_scale_round_trip_and_sentinel() {
        let r_max = 56.0;
        assert!((depth_normalize(r_max, r_max) - 1.0).abs() < 1e-12);
        for d in [1.0, 5.0, 20.0, 55.9] {
            let x = depth_normalize(d, r_max);
            assert!((-1.0..=1.0).contains(&x));
            assert!((depth_denormalize(x, r_max) - d).abs() < 1e-9);
        }
    }
}
