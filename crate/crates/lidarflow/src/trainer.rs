//! Staged training: generative prior pretraining on proxy images, VAE
//! alignment against the frozen prior, and end-to-end joint training with
//! sequential VAE-then-flow updates per step.
//!
//! Determinism: all per-step randomness is drawn up front from a stream
//! keyed by (seed, stage, step), so interrupted runs resume exactly and
//! disabling a loss term never shifts the draws of another.

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::Dataset;
use crate::flow::{alignment_loss_g, denoising_loss_g, Sit};
use crate::nn::{Adam, Binder, Graph, Real, Var};
use crate::rng::rng_for;
use crate::synthworld::{proxy_image, ProxyConfig};
use crate::vae::{disc_loss_g, vae_loss_g, Discriminator, Vae, VaeConfig};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("latent statistics not initialized")]
    StatsRequired,
    #[error("prerequisite checkpoint missing: {0}")]
    CheckpointRequired(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid stage config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    PriorPretrain,
    VaeAlign,
    E2e,
}

impl StageKind {
    pub fn tag(&self) -> &'static str {
        match self {
            StageKind::PriorPretrain => "prior_pretrain",
            StageKind::VaeAlign => "vae_align",
            StageKind::E2e => "e2e",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_vae: f64,
    pub lr_fm: f64,
    pub lr_disc: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub ema_decay: f64,
    /// Keep the VAE (and discriminator) fixed during e2e; used by the
    /// two-stage baselines.
    pub freeze_vae: bool,
    /// Steps spent training the generic VAE inside the prior stage.
    pub prior_vae_steps: usize,
    pub ckpt_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            steps: 20_000,
            batch: 16,
            lr_vae: 1e-4,
            lr_fm: 1e-4,
            lr_disc: 2e-4,
            lambda1: 1.5,
            lambda2: 0.5,
            ema_decay: 0.999,
            freeze_vae: false,
            prior_vae_steps: 2_000,
            ckpt_every: 1_000,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::BadConfig("steps must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(TrainError::BadConfig("lambdas must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(TrainError::BadConfig("ema decay must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-channel running normalization statistics for the transformer input.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl LatentStats {
    pub fn new(channels: usize) -> Self {
        LatentStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            count: 0,
        }
    }

    pub fn initialized(&self) -> bool {
        self.count > 0
    }

    /// Fold one batch of latents `[B, C, h, w]` into the running stats.
    /// The first update adopts the batch statistics outright; later updates
    /// blend with factor `decay`.
    pub fn update<T: Real>(&mut self, z: &ArrayD<T>, decay: f64) {
        let c = self.mean.len();
        assert_eq!(z.shape()[1], c);
        let per = z.len() / c;
        let mut bm = vec![0.0f64; c];
        let mut bv = vec![0.0f64; c];
        for ci in 0..c {
            let ch = z.index_axis(ndarray::Axis(1), ci);
            let mut s = 0.0;
            for v in ch.iter() {
                s += v.as_f64();
            }
            let m = s / per as f64;
            let mut s2 = 0.0;
            for v in ch.iter() {
                let d = v.as_f64() - m;
                s2 += d * d;
            }
            bm[ci] = m;
            bv[ci] = s2 / per as f64;
        }
        if self.count == 0 {
            self.mean = bm;
            self.var = bv;
        } else {
            for ci in 0..c {
                self.mean[ci] = decay * self.mean[ci] + (1.0 - decay) * bm[ci];
                self.var[ci] = decay * self.var[ci] + (1.0 - decay) * bv[ci];
            }
        }
        self.count += 1;
    }

    pub fn normalize<T: Real>(&self, z: &ArrayD<T>) -> Result<ArrayD<T>, TrainError> {
        if !self.initialized() {
            return Err(TrainError::StatsRequired);
        }
        let mut out = z.clone();
        self.apply(&mut out, false);
        Ok(out)
    }

    pub fn denormalize<T: Real>(&self, z: &ArrayD<T>) -> Result<ArrayD<T>, TrainError> {
        if !self.initialized() {
            return Err(TrainError::StatsRequired);
        }
        let mut out = z.clone();
        self.apply(&mut out, true);
        Ok(out)
    }

    fn apply<T: Real>(&self, z: &mut ArrayD<T>, inverse: bool) {
        let c = self.mean.len();
        for ci in 0..c {
            let m = self.mean[ci];
            let s = (self.var[ci] + 1e-5).sqrt();
            let mut ch = z.index_axis_mut(ndarray::Axis(1), ci);
            for v in ch.iter_mut() {
                let x = v.as_f64();
                *v = T::from_f64(if inverse { x * s + m } else { (x - m) / s });
            }
        }
    }

    /// Full-shape (mean, 1/std) constant tensors for in-graph normalization.
    fn broadcast<T: Real>(&self, shape: &[usize]) -> (ArrayD<T>, ArrayD<T>) {
        let mut mean = ArrayD::zeros(IxDyn(shape));
        let mut istd = ArrayD::zeros(IxDyn(shape));
        for ci in 0..self.mean.len() {
            let m = T::from_f64(self.mean[ci]);
            let s = T::from_f64(1.0 / (self.var[ci] + 1e-5).sqrt());
            mean.index_axis_mut(ndarray::Axis(1), ci).fill(m);
            istd.index_axis_mut(ndarray::Axis(1), ci).fill(s);
        }
        (mean, istd)
    }
}

/// Models and statistics trained together.
pub struct Pipeline<T: Real> {
    pub vae: Vae<T>,
    pub disc: Discriminator<T>,
    pub fm: Sit<T>,
    pub stats: LatentStats,
}

impl<T: Real> Pipeline<T> {
    pub fn new(vae_cfg: VaeConfig, flow_cfg: crate::flow::FlowConfig, seed: u64) -> Self {
        let latent_ch = vae_cfg.latent_ch;
        let disc = Discriminator::new(vae_cfg.in_ch, vae_cfg.base, vae_cfg.groups, crate::rng::derive_seed(seed, "disc", 0));
        Pipeline {
            vae: Vae::new(vae_cfg, crate::rng::derive_seed(seed, "vae", 0)),
            disc,
            fm: Sit::new(flow_cfg, crate::rng::derive_seed(seed, "fm", 0)),
            stats: LatentStats::new(latent_ch),
        }
    }

    pub fn save_into(&self, ck: &mut Checkpoint<T>) {
        ck.put_store("vae", &self.vae.store);
        ck.put_store("disc", &self.disc.store);
        ck.put_store("fm", &self.fm.store);
        ck.tensors.insert(
            "stats/mean".into(),
            ArrayD::from_shape_vec(IxDyn(&[self.stats.mean.len()]), self.stats.mean.iter().map(|v| T::from_f64(*v)).collect()).unwrap(),
        );
        ck.tensors.insert(
            "stats/var".into(),
            ArrayD::from_shape_vec(IxDyn(&[self.stats.var.len()]), self.stats.var.iter().map(|v| T::from_f64(*v)).collect()).unwrap(),
        );
        ck.scalars.insert("stats/count".into(), self.stats.count as f64);
    }

    pub fn load_from(&mut self, ck: &Checkpoint<T>) {
        ck.load_store("vae", &mut self.vae.store);
        ck.load_store("disc", &mut self.disc.store);
        ck.load_store("fm", &mut self.fm.store);
        if let Some(m) = ck.tensors.get("stats/mean") {
            self.stats.mean = m.iter().map(|v| v.as_f64()).collect();
        }
        if let Some(v) = ck.tensors.get("stats/var") {
            self.stats.var = v.iter().map(|x| x.as_f64()).collect();
        }
        self.stats.count = ck.scalars.get("stats/count").copied().unwrap_or(0.0) as u64;
    }
}

/// All randomness one training step consumes, drawn up front in a fixed
/// order so loss toggles cannot shift later draws.
pub struct StepDraws<T: Real> {
    pub indices: Vec<usize>,
    pub posterior_noise: ArrayD<T>,
    pub t1: Vec<T>,
    pub eps1: ArrayD<T>,
    pub t2: Vec<T>,
    pub eps2: ArrayD<T>,
}

pub fn step_draws<T: Real>(
    seed: u64,
    stage: &str,
    step: usize,
    batch: usize,
    n_scenes: usize,
    latent_shape: &[usize],
) -> StepDraws<T> {
    let mut rng = rng_for(seed, stage, step as u64);
    let indices: Vec<usize> = (0..batch)
        .map(|_| (rand::Rng::random::<u64>(&mut rng) as usize) % n_scenes)
        .collect();
    let mut shape = vec![batch];
    shape.extend_from_slice(&latent_shape[1..]);
    let posterior_noise = ArrayD::from_shape_fn(IxDyn(&shape), |_| T::standard_normal(&mut rng));
    let t1: Vec<T> = (0..batch).map(|_| T::uniform01(&mut rng)).collect();
    let eps1 = ArrayD::from_shape_fn(IxDyn(&shape), |_| T::standard_normal(&mut rng));
    let t2: Vec<T> = (0..batch).map(|_| T::uniform01(&mut rng)).collect();
    let eps2 = ArrayD::from_shape_fn(IxDyn(&shape), |_| T::standard_normal(&mut rng));
    StepDraws {
        indices,
        posterior_noise,
        t1,
        eps1,
        t2,
        eps2,
    }
}

/// Losses recorded for one step.
#[derive(Clone, Debug, Default)]
pub struct StepLosses {
    pub mse: f64,
    pub kl: f64,
    pub gan: f64,
    pub align_vae: f64,
    pub denoise: f64,
    pub align_fm: f64,
    pub disc: f64,
    pub gnorm_vae: f64,
    pub gnorm_fm: f64,
    pub gnorm_disc: f64,
}

impl StepLosses {
    pub fn finite(&self) -> bool {
        [
            self.mse,
            self.kl,
            self.gan,
            self.align_vae,
            self.denoise,
            self.align_fm,
            self.disc,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub struct StageOutcome {
    pub checkpoint_path: PathBuf,
    pub final_step: u64,
    /// Set when a NaN guard aborted the stage early.
    pub aborted_at: Option<u64>,
}

struct StageLogger {
    file: std::io::BufWriter<std::fs::File>,
}

impl StageLogger {
    fn new(out_dir: &Path, stage: &str, resume: bool) -> Result<Self, TrainError> {
        std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io {
            path: out_dir.display().to_string(),
            source: e,
        })?;
        let path = out_dir.join(format!("train_{stage}.log"));
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(resume)
            .write(true)
            .truncate(!resume)
            .open(&path)
            .map_err(|e| TrainError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        Ok(StageLogger {
            file: std::io::BufWriter::new(file),
        })
    }

    fn record(&mut self, step: usize, losses: &StepLosses, stats: &LatentStats) {
        let _ = writeln!(
            self.file,
            "step={} mse={:.6e} kl={:.6e} gan={:.6e} align_vae={:.6e} denoise={:.6e} align_fm={:.6e} disc={:.6e} gnorm_vae={:.4e} gnorm_fm={:.4e} gnorm_disc={:.4e} stat_mean0={:.4e} stat_var0={:.4e} stat_count={}",
            step,
            losses.mse,
            losses.kl,
            losses.gan,
            losses.align_vae,
            losses.denoise,
            losses.align_fm,
            losses.disc,
            losses.gnorm_vae,
            losses.gnorm_fm,
            losses.gnorm_disc,
            stats.mean.first().copied().unwrap_or(0.0),
            stats.var.first().copied().unwrap_or(0.0),
            stats.count,
        );
    }

    fn flush(&mut self) {
        let _ = self.file.flush();
    }
}

/// Optimizer bundle for a stage.
pub struct Optimizers<T: Real> {
    pub vae: Adam<T>,
    pub fm: Adam<T>,
    pub disc: Adam<T>,
}

impl<T: Real> Optimizers<T> {
    pub fn new() -> Self {
        Optimizers {
            vae: Adam::new(Some(1.0)),
            fm: Adam::new(Some(1.0)),
            disc: Adam::new(Some(1.0)),
        }
    }
}

impl<T: Real> Default for Optimizers<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Interpolate with per-sample times on the tape: `(1 - t_b) z + t_b eps`.
fn interpolate_batch_g<T: Real>(
    g: &mut Graph<T>,
    z: Var,
    eps: &ArrayD<T>,
    t: &[T],
) -> Var {
    let shape: Vec<usize> = g.value(z).shape().to_vec();
    let mut tfull = ArrayD::zeros(IxDyn(&shape));
    for (bi, tv) in t.iter().enumerate() {
        tfull.index_axis_mut(ndarray::Axis(0), bi).fill(*tv);
    }
    let one_minus = tfull.mapv(|v| T::one() - v);
    let a = g.constant(one_minus);
    let zc = g.mul(z, a);
    let b = g.constant(tfull * eps);
    g.add(zc, b)
}

/// One combined VAE update: `L_AE + lambda1 * L_Align` with the alignment
/// term passing through the (frozen) flow model. Returns the losses.
/// `fm_trainable` selects which flow parameters may receive gradients
/// (patch embedding + head during VAE alignment, none during e2e).
#[allow(clippy::too_many_arguments)]
pub fn vae_update_step<T: Real>(
    pipe: &mut Pipeline<T>,
    opts: &mut Optimizers<T>,
    cfg: &StageConfig,
    draws: &StepDraws<T>,
    x: &ArrayD<T>,
    mask: &ArrayD<T>,
    target: &ArrayD<T>,
    occupied: &[bool],
    fm_trainable: &'static (dyn Fn(&str) -> bool + Sync),
    gan_active: bool,
    losses: &mut StepLosses,
) {
    let mut g = Graph::<T>::new();
    let mut bind_vae = Binder::trainable_all();
    let mut bind_fm = Binder::with_policy(fm_trainable);
    let mut bind_disc = Binder::frozen_all();

    let xv = g.constant(x.clone());
    let maskv = g.constant(mask.clone());
    let (mu, logvar) = pipe.vae.encode_g(&mut g, &mut bind_vae, xv);
    // reparameterized sample
    let half_lv = g.scale(logvar, T::from_f64(0.5));
    let std = g.exp(half_lv);
    let noise = g.constant(draws.posterior_noise.clone());
    let scaled = g.mul(std, noise);
    let z = g.add(mu, scaled);
    let xhat = pipe.vae.decode_g(&mut g, &mut bind_vae, z);
    let disc_logits = gan_active.then(|| pipe.disc.forward_g(&mut g, &mut bind_disc, xhat));
    let parts = vae_loss_g(
        &mut g, xv, xhat, mu, logvar, maskv, disc_logits, &pipe.vae.cfg, gan_active,
    );
    losses.mse = g.scalar(parts.mse).as_f64();
    losses.kl = g.scalar(parts.kl).as_f64();
    losses.gan = g.scalar(parts.gan).as_f64();

    // update running stats from this batch before normalizing
    pipe.stats.update(g.value(z), cfg.ema_decay);

    let total = if cfg.lambda1 > 0.0 {
        let (mean_b, istd_b) = pipe.stats.broadcast::<T>(g.value(z).shape());
        let mean_c = g.constant(mean_b);
        let istd_c = g.constant(istd_b);
        let centered = g.sub(z, mean_c);
        let z_norm = g.mul(centered, istd_c);
        let z_t = interpolate_batch_g(&mut g, z_norm, &draws.eps1, &draws.t1);
        let (_v, mid) = pipe.fm.forward_g(&mut g, &mut bind_fm, z_t, &draws.t1);
        let normed = pipe.fm.head_g(&mut g, &mut bind_fm, mid);
        let align = alignment_loss_g(&mut g, normed, target, occupied).expect("grid shapes agree");
        losses.align_vae = g.scalar(align).as_f64();
        let weighted = g.scale(align, T::from_f64(cfg.lambda1));
        g.add(parts.total, weighted)
    } else {
        parts.total
    };

    let mut grads = g.backward(total);
    let vae_grads = bind_vae.grads(&mut grads);
    let fm_grads = bind_fm.grads(&mut grads);
    losses.gnorm_vae = opts.vae.step(&mut pipe.vae.store, &vae_grads, cfg.lr_vae);
    if !fm_grads.is_empty() {
        losses.gnorm_fm = opts.fm.step(&mut pipe.fm.store, &fm_grads, cfg.lr_fm);
    }
}

/// Discriminator update on detached reconstructions.
pub fn disc_update_step<T: Real>(
    pipe: &mut Pipeline<T>,
    opts: &mut Optimizers<T>,
    cfg: &StageConfig,
    x: &ArrayD<T>,
    xhat_detached: &ArrayD<T>,
    losses: &mut StepLosses,
) {
    let mut g = Graph::<T>::new();
    let mut bind = Binder::trainable_all();
    let real = g.constant(x.clone());
    let fake = g.constant(xhat_detached.clone());
    let lr = pipe.disc.forward_g(&mut g, &mut bind, real);
    let lf = pipe.disc.forward_g(&mut g, &mut bind, fake);
    let loss = disc_loss_g(&mut g, lr, lf);
    losses.disc = g.scalar(loss).as_f64();
    let mut grads = g.backward(loss);
    let dg = bind.grads(&mut grads);
    losses.gnorm_disc = opts.disc.step(&mut pipe.disc.store, &dg, cfg.lr_disc);
}

/// Reconstruction of the current batch with gradients off (for the
/// discriminator's detached fakes).
pub fn reconstruct_detached<T: Real>(
    pipe: &Pipeline<T>,
    x: &ArrayD<T>,
    noise: &ArrayD<T>,
) -> ArrayD<T> {
    let mut g = Graph::<T>::new();
    let mut bind = Binder::frozen_all();
    let xv = g.constant(x.clone());
    let (mu, logvar) = pipe.vae.encode_g(&mut g, &mut bind, xv);
    let half = g.scale(logvar, T::from_f64(0.5));
    let std = g.exp(half);
    let nv = g.constant(noise.clone());
    let sn = g.mul(std, nv);
    let z = g.add(mu, sn);
    let xhat = pipe.vae.decode_g(&mut g, &mut bind, z);
    g.value(xhat).clone()
}

/// Flow update: `L_Denoising + lambda2 * L_Align` on a detached latent.
/// When `update_stats` is set (frozen-VAE variants skip the VAE update)
/// the running stats fold in this batch first.
#[allow(clippy::too_many_arguments)]
pub fn fm_update_step<T: Real>(
    pipe: &mut Pipeline<T>,
    opts: &mut Optimizers<T>,
    cfg: &StageConfig,
    draws: &StepDraws<T>,
    x: &ArrayD<T>,
    target: &ArrayD<T>,
    occupied: &[bool],
    update_stats: bool,
    losses: &mut StepLosses,
) -> Result<(), TrainError> {
    // encode with the current (possibly just-updated) encoder, no gradients
    let z = {
        let mut g = Graph::<T>::new();
        let mut bind = Binder::frozen_all();
        let xv = g.constant(x.clone());
        let (mu, logvar) = pipe.vae.encode_g(&mut g, &mut bind, xv);
        let half = g.scale(logvar, T::from_f64(0.5));
        let std = g.exp(half);
        let nv = g.constant(draws.posterior_noise.clone());
        let sn = g.mul(std, nv);
        let zv = g.add(mu, sn);
        g.value(zv).clone()
    };
    if update_stats {
        pipe.stats.update(&z, cfg.ema_decay);
    }
    let z_norm = pipe.stats.normalize(&z)?;

    let mut g = Graph::<T>::new();
    let mut bind_fm = Binder::trainable_all();
    let z_t_arr = {
        let mut out = z_norm.clone();
        for bi in 0..out.shape()[0] {
            let t = draws.t2[bi];
            let mut slab = out.index_axis_mut(ndarray::Axis(0), bi);
            let eps = draws.eps2.index_axis(ndarray::Axis(0), bi);
            ndarray::Zip::from(&mut slab).and(&eps).for_each(|o, &e| {
                *o = (T::one() - t) * *o + t * e;
            });
        }
        out
    };
    let z_t = g.constant(z_t_arr);
    let (v, mid) = pipe.fm.forward_g(&mut g, &mut bind_fm, z_t, &draws.t2);
    let epsv = g.constant(draws.eps2.clone());
    let zsv = g.constant(z_norm);
    let den = denoising_loss_g(&mut g, v, epsv, zsv);
    losses.denoise = g.scalar(den).as_f64();
    let total = if cfg.lambda2 > 0.0 {
        let normed = pipe.fm.head_g(&mut g, &mut bind_fm, mid);
        let align = alignment_loss_g(&mut g, normed, target, occupied).expect("grid shapes agree");
        losses.align_fm = g.scalar(align).as_f64();
        let weighted = g.scale(align, T::from_f64(cfg.lambda2));
        g.add(den, weighted)
    } else {
        den
    };
    let mut grads = g.backward(total);
    let fm_grads = bind_fm.grads(&mut grads);
    losses.gnorm_fm = opts.fm.step(&mut pipe.fm.store, &fm_grads, cfg.lr_fm);
    Ok(())
}

fn trainable_none(_: &str) -> bool {
    false
}

fn trainable_patch_and_head(name: &str) -> bool {
    !Sit::<f64>::is_transferable(name)
}

/// One VAE-alignment training step (shared by `vae_align` and the VAE half
/// of `e2e`).
#[allow(clippy::too_many_arguments)]
pub fn run_vae_align_step<T: Real>(
    pipe: &mut Pipeline<T>,
    opts: &mut Optimizers<T>,
    cfg: &StageConfig,
    dataset: &Dataset<T>,
    seed: u64,
    stage_tag: &str,
    step: usize,
    patch_head_trainable: bool,
) -> StepLosses {
    let latent_shape = [
        cfg.batch,
        pipe.vae.cfg.latent_ch,
        dataset.sensor.height / pipe.vae.cfg.down_v,
        dataset.sensor.width / pipe.vae.cfg.down_h,
    ];
    let draws = step_draws::<T>(seed, stage_tag, step, cfg.batch, dataset.len(), &latent_shape);
    let (x, mask, target, occ) = dataset.batch(&draws.indices);
    let mut losses = StepLosses::default();
    let gan_active = cfg.lambda_gan_active(step, &pipe.vae.cfg);
    let policy: &'static (dyn Fn(&str) -> bool + Sync) = if patch_head_trainable {
        &trainable_patch_and_head
    } else {
        &trainable_none
    };
    vae_update_step(
        pipe, opts, cfg, &draws, &x, &mask, &target, &occ, policy, gan_active, &mut losses,
    );
    if gan_active {
        let fake = reconstruct_detached(pipe, &x, &draws.posterior_noise);
        disc_update_step(pipe, opts, cfg, &x, &fake, &mut losses);
    }
    losses
}

impl StageConfig {
    fn lambda_gan_active(&self, step: usize, vae_cfg: &VaeConfig) -> bool {
        vae_cfg.gan_weight > 0.0 && step >= vae_cfg.gan_warmup
    }
}

/// Stage: train the flow prior on proxy images (denoising only) in the
/// latent space of a generic VAE trained first with MSE + KL.
pub fn prior_pretrain<T: Real>(
    pipe: &mut Pipeline<T>,
    opts: &mut Optimizers<T>,
    cfg: &StageConfig,
    proxy_cfg: &ProxyConfig,
    sensor_hw: (usize, usize),
    seed: u64,
    out_dir: &Path,
    meta: (&str, &str),
    resume_step: u64,
) -> Result<StageOutcome, TrainError> {
    cfg.validate()?;
    let (h, w) = sensor_hw;
    let mut logger = StageLogger::new(out_dir, "prior_pretrain", resume_step > 0)?;
    let latent_shape = [
        cfg.batch,
        pipe.vae.cfg.latent_ch,
        h / pipe.vae.cfg.down_v,
        w / pipe.vae.cfg.down_h,
    ];
    let proxy_batch = |step: usize, which: &str| -> (ArrayD<T>, ArrayD<T>) {
        let mut rng = rng_for(seed, which, step as u64);
        let mut x = ArrayD::zeros(IxDyn(&[cfg.batch, 1, h, w]));
        for bi in 0..cfg.batch {
            let idx = rand::Rng::random::<u64>(&mut rng);
            let img = proxy_image(seed, idx % 1_000_000, h, w, proxy_cfg);
            for i in 0..h {
                for j in 0..w {
                    x[[bi, 0, i, j]] = T::from_f64(img[(i, j)] as f64);
                }
            }
        }
        let mask = ArrayD::from_elem(IxDyn(&[cfg.batch, 1, h, w]), T::one());
        (x, mask)
    };

    let ckpt_path = out_dir.join("ckpt_prior_pretrain.r3ck");
    let save = |pipe: &Pipeline<T>, opts: &Optimizers<T>, step: u64| -> Result<(), TrainError> {
        let mut ck = Checkpoint::new("prior_pretrain", step, meta.0, meta.1);
        pipe.save_into(&mut ck);
        ck.put_adam("vae", &pipe.vae.store, &opts.vae);
        ck.put_adam("fm", &pipe.fm.store, &opts.fm);
        ck.save(&ckpt_path)?;
        Ok(())
    };

    // phase 1: generic VAE, reconstruction + KL only
    let vae_steps = cfg.prior_vae_steps;
    for step in (resume_step as usize).min(vae_steps)..vae_steps {
        let draws = step_draws::<T>(seed, "prior-vae", step, cfg.batch, usize::MAX, &latent_shape);
        let (x, mask) = proxy_batch(step, "prior-vae-data");
        let mut losses = StepLosses::default();
        let mut g = Graph::<T>::new();
        let mut bind = Binder::trainable_all();
        let xv = g.constant(x.clone());
        let maskv = g.constant(mask);
        let (mu, logvar) = pipe.vae.encode_g(&mut g, &mut bind, xv);
        let half = g.scale(logvar, T::from_f64(0.5));
        let std = g.exp(half);
        let nv = g.constant(draws.posterior_noise.clone());
        let sn = g.mul(std, nv);
        let z = g.add(mu, sn);
        let xhat = pipe.vae.decode_g(&mut g, &mut bind, z);
        let parts = vae_loss_g(&mut g, xv, xhat, mu, logvar, maskv, None, &pipe.vae.cfg, false);
        losses.mse = g.scalar(parts.mse).as_f64();
        losses.kl = g.scalar(parts.kl).as_f64();
        let mut grads = g.backward(parts.total);
        let vg = bind.grads(&mut grads);
        losses.gnorm_vae = opts.vae.step(&mut pipe.vae.store, &vg, cfg.lr_vae);
        logger.record(step, &losses, &pipe.stats);
        if !losses.finite() {
            logger.flush();
            return Ok(StageOutcome {
                checkpoint_path: ckpt_path,
                final_step: step as u64,
                aborted_at: Some(step as u64),
            });
        }
        if (step + 1) % cfg.ckpt_every == 0 {
            save(pipe, opts, step as u64 + 1)?;
        }
    }

    // phase 2: flow prior with the denoising loss only
    let start = (resume_step as usize).saturating_sub(vae_steps);
    for step in start..cfg.steps {
        let draws = step_draws::<T>(seed, "prior-fm", step, cfg.batch, usize::MAX, &latent_shape);
        let (x, _mask) = proxy_batch(step, "prior-fm-data");
        let mut losses = StepLosses::default();
        let denoise_only = StageConfig {
            lambda2: 0.0,
            ..cfg.clone()
        };
        fm_update_step(
            pipe,
            opts,
            &denoise_only,
            &draws,
            &x,
            &ArrayD::zeros(IxDyn(&[1, 1, 1])),
            &[],
            true,
            &mut losses,
        )?;
        logger.record(vae_steps + step, &losses, &pipe.stats);
        if !losses.finite() {
            logger.flush();
            return Ok(StageOutcome {
                checkpoint_path: ckpt_path,
                final_step: (vae_steps + step) as u64,
                aborted_at: Some((vae_steps + step) as u64),
            });
        }
        if (step + 1) % cfg.ckpt_every == 0 || step + 1 == cfg.steps {
            save(pipe, opts, (vae_steps + step) as u64 + 1)?;
        }
    }
    logger.flush();
    save(pipe, opts, (vae_steps + cfg.steps) as u64)?;
    Ok(StageOutcome {
        checkpoint_path: ckpt_path,
        final_step: (vae_steps + cfg.steps) as u64,
        aborted_at: None,
    })
}

/// Stage: train the range VAE from scratch against the frozen prior flow
/// model; only the patch embedding and alignment head of the flow train.
#[allow(clippy::too_many_arguments)]
pub fn vae_align_stage<T: Real>(
    pipe: &mut Pipeline<T>,
    opts: &mut Optimizers<T>,
    cfg: &StageConfig,
    dataset: &Dataset<T>,
    seed: u64,
    out_dir: &Path,
    meta: (&str, &str),
    resume_step: u64,
) -> Result<StageOutcome, TrainError> {
    cfg.validate()?;
    let mut logger = StageLogger::new(out_dir, "vae_align", resume_step > 0)?;
    let ckpt_path = out_dir.join("ckpt_vae_align.r3ck");
    let frozen_before = pipe.fm.store.content_hash(Sit::<T>::is_transferable);
    for step in resume_step as usize..cfg.steps {
        let losses = run_vae_align_step(pipe, opts, cfg, dataset, seed, "vae_align", step, true);
        logger.record(step, &losses, &pipe.stats);
        if !losses.finite() {
            logger.flush();
            return Ok(StageOutcome {
                checkpoint_path: ckpt_path,
                final_step: step as u64,
                aborted_at: Some(step as u64),
            });
        }
        if (step + 1) % cfg.ckpt_every == 0 || step + 1 == cfg.steps {
            let mut ck = Checkpoint::new("vae_align", step as u64 + 1, meta.0, meta.1);
            pipe.save_into(&mut ck);
            ck.put_adam("vae", &pipe.vae.store, &opts.vae);
            ck.put_adam("fm", &pipe.fm.store, &opts.fm);
            ck.put_adam("disc", &pipe.disc.store, &opts.disc);
            ck.save(&ckpt_path)?;
        }
    }
    logger.flush();
    assert_eq!(
        frozen_before,
        pipe.fm.store.content_hash(Sit::<T>::is_transferable),
        "frozen flow parameters drifted during vae_align"
    );
    Ok(StageOutcome {
        checkpoint_path: ckpt_path,
        final_step: cfg.steps as u64,
        aborted_at: None,
    })
}

/// Stage: end-to-end joint training. Each step updates the VAE on
/// `L_AE + lambda1 L_Align` (alignment gradients reach the encoder only),
/// then the flow model on `L_Denoising + lambda2 L_Align`.
#[allow(clippy::too_many_arguments)]
pub fn e2e_stage<T: Real>(
    pipe: &mut Pipeline<T>,
    opts: &mut Optimizers<T>,
    cfg: &StageConfig,
    dataset: &Dataset<T>,
    seed: u64,
    out_dir: &Path,
    meta: (&str, &str),
    resume_step: u64,
) -> Result<StageOutcome, TrainError> {
    cfg.validate()?;
    let mut logger = StageLogger::new(out_dir, "e2e", resume_step > 0)?;
    let ckpt_path = out_dir.join("ckpt_e2e.r3ck");
    let latent_shape = [
        cfg.batch,
        pipe.vae.cfg.latent_ch,
        dataset.sensor.height / pipe.vae.cfg.down_v,
        dataset.sensor.width / pipe.vae.cfg.down_h,
    ];
    for step in resume_step as usize..cfg.steps {
        let draws = step_draws::<T>(seed, "e2e", step, cfg.batch, dataset.len(), &latent_shape);
        let (x, mask, target, occ) = dataset.batch(&draws.indices);
        let mut losses = StepLosses::default();
        if !cfg.freeze_vae {
            let gan_active = cfg.lambda_gan_active(step, &pipe.vae.cfg);
            vae_update_step(
                pipe,
                opts,
                cfg,
                &draws,
                &x,
                &mask,
                &target,
                &occ,
                &trainable_none,
                gan_active,
                &mut losses,
            );
            if gan_active {
                let fake = reconstruct_detached(pipe, &x, &draws.posterior_noise);
                disc_update_step(pipe, opts, cfg, &x, &fake, &mut losses);
            }
        }
        fm_update_step(
            pipe,
            opts,
            cfg,
            &draws,
            &x,
            &target,
            &occ,
            cfg.freeze_vae,
            &mut losses,
        )?;
        logger.record(step, &losses, &pipe.stats);
        if !losses.finite() {
            logger.flush();
            return Ok(StageOutcome {
                checkpoint_path: ckpt_path,
                final_step: step as u64,
                aborted_at: Some(step as u64),
            });
        }
        if (step + 1) % cfg.ckpt_every == 0 || step + 1 == cfg.steps {
            let mut ck = Checkpoint::new("e2e", step as u64 + 1, meta.0, meta.1);
            pipe.save_into(&mut ck);
            ck.put_adam("vae", &pipe.vae.store, &opts.vae);
            ck.put_adam("fm", &pipe.fm.store, &opts.fm);
            ck.put_adam("disc", &pipe.disc.store, &opts.disc);
            ck.save(&ckpt_path)?;
        }
    }
    logger.flush();
    Ok(StageOutcome {
        checkpoint_path: ckpt_path,
        final_step: cfg.steps as u64,
        aborted_at: None,
    })
}
