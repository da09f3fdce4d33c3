//! Transformer velocity-field estimator over latents: linear interpolant,
//! denoising objective, middle-layer feature projection for the alignment
//! loss, and the velocity-to-score identity used by the SDE sampler.

use crate::nn::{Binder, Graph, Linear, ParamStore, Real, Var};
use crate::rng::rng_for;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("score is singular at t = 0")]
    SingularTime,
    #[error("invalid flow config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FlowConfig {
    pub patch: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub temb_dim: usize,
    pub mlp_ratio: usize,
    /// Teacher feature dimension the alignment head projects onto.
    pub teacher_d: usize,
    pub latent_ch: usize,
    pub latent_h: usize,
    pub latent_w: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            patch: 2,
            depth: 8,
            width: 128,
            heads: 4,
            temb_dim: 64,
            mlp_ratio: 4,
            teacher_d: 16,
            latent_ch: 4,
            latent_h: 8,
            latent_w: 64,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(FlowError::BadConfig("depth must be even and positive".into()));
        }
        if self.latent_h % self.patch != 0 || self.latent_w % self.patch != 0 {
            return Err(FlowError::BadConfig("patch must divide latent dims".into()));
        }
        if self.width % self.heads != 0 {
            return Err(FlowError::BadConfig("heads must divide width".into()));
        }
        if self.temb_dim % 2 != 0 {
            return Err(FlowError::BadConfig("temb_dim must be even".into()));
        }
        Ok(())
    }

    /// Index of the block whose output feeds the alignment head (1-based).
    pub fn align_layer(&self) -> usize {
        self.depth / 2
    }

    /// Token grid dimensions.
    pub fn token_grid(&self) -> (usize, usize) {
        (self.latent_h / self.patch, self.latent_w / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.token_grid();
        gh * gw
    }
}

struct SitBlock {
    adaln: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Velocity-field transformer with adaptive layer norm conditioning and an
/// alignment projection head.
pub struct Sit<T: Real> {
    pub cfg: FlowConfig,
    pub store: ParamStore<T>,
    patch_embed: Linear,
    temb1: Linear,
    temb2: Linear,
    blocks: Vec<SitBlock>,
    final_adaln: Linear,
    final_out: Linear,
    head1: Linear,
    head2: Linear,
    pos: ArrayD<T>,
}

impl<T: Real> Sit<T> {
    pub fn new(cfg: FlowConfig, seed: u64) -> Self {
        cfg.validate().expect("valid flow config");
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "sit-init", 0);
        let w = cfg.width;
        let pd = cfg.patch * cfg.patch * cfg.latent_ch;
        let patch_embed = Linear::new(&mut store, "patch_embed", pd, w, &mut rng);
        let temb1 = Linear::new(&mut store, "temb.fc1", cfg.temb_dim, w, &mut rng);
        let temb2 = Linear::new(&mut store, "temb.fc2", w, w, &mut rng);
        let mut blocks = Vec::new();
        for b in 0..cfg.depth {
            blocks.push(SitBlock {
                adaln: Linear::new_zeros(&mut store, &format!("blocks.{b}.adaln"), w, 6 * w),
                qkv: Linear::new(&mut store, &format!("blocks.{b}.attn.qkv"), w, 3 * w, &mut rng),
                proj: Linear::new(&mut store, &format!("blocks.{b}.attn.proj"), w, w, &mut rng),
                fc1: Linear::new(&mut store, &format!("blocks.{b}.mlp.fc1"), w, cfg.mlp_ratio * w, &mut rng),
                fc2: Linear::new(&mut store, &format!("blocks.{b}.mlp.fc2"), cfg.mlp_ratio * w, w, &mut rng),
            });
        }
        let final_adaln = Linear::new_zeros(&mut store, "final.adaln", w, 2 * w);
        let final_out = Linear::new_zeros(&mut store, "final.out", w, pd);
        let head1 = Linear::new(&mut store, "head.fc1", w, w, &mut rng);
        let head2 = Linear::new(&mut store, "head.fc2", w, cfg.teacher_d, &mut rng);
        let pos = sincos_pos_embed::<T>(cfg.token_grid(), w);
        Sit {
            cfg,
            store,
            patch_embed,
            temb1,
            temb2,
            blocks,
            final_adaln,
            final_out,
            head1,
            head2,
            pos,
        }
    }

    /// Parameter names that survive a prior transfer unchanged. The patch
    /// embedding and the alignment head are reinitialized instead.
    pub fn is_transferable(name: &str) -> bool {
        !name.starts_with("patch_embed") && !name.starts_with("head.")
    }

    /// Reinitialize the patch embedding and alignment head in place.
    pub fn reinit_untransferred(&mut self, seed: u64) {
        let mut rng = rng_for(seed, "sit-reinit", 0);
        let w = self.cfg.width;
        let pd = self.cfg.patch * self.cfg.patch * self.cfg.latent_ch;
        *self.store.get_mut(self.patch_embed.w) = crate::nn::layers_init_uniform::<T>(&[pd, w], pd, &mut rng);
        *self.store.get_mut(self.patch_embed.b) = ArrayD::zeros(IxDyn(&[w]));
        *self.store.get_mut(self.head1.w) = crate::nn::layers_init_uniform::<T>(&[w, w], w, &mut rng);
        *self.store.get_mut(self.head1.b) = ArrayD::zeros(IxDyn(&[w]));
        *self.store.get_mut(self.head2.w) =
            crate::nn::layers_init_uniform::<T>(&[w, self.cfg.teacher_d], w, &mut rng);
        *self.store.get_mut(self.head2.b) = ArrayD::zeros(IxDyn(&[self.cfg.teacher_d]));
    }

    fn modulate(
        &self,
        g: &mut Graph<T>,
        x: Var,
        shift: Var,
        scale: Var,
    ) -> Var {
        let one_plus = g.add_scalar(scale, T::one());
        let scaled = g.mul_bcast_mid(x, one_plus);
        g.add_bcast_mid(scaled, shift)
    }

    fn attention(&self, g: &mut Graph<T>, bind: &mut Binder, blk: &SitBlock, x: Var) -> Var {
        let (b, n, c) = {
            let s = g.value(x).shape();
            (s[0], s[1], s[2])
        };
        let h = self.cfg.heads;
        let dh = c / h;
        let qkv = blk.qkv.forward(g, bind, &self.store, x);
        let q = g.narrow(qkv, 2, 0, c);
        let k = g.narrow(qkv, 2, c, c);
        let v = g.narrow(qkv, 2, 2 * c, c);
        let split = |g: &mut Graph<T>, t: Var| {
            let r = g.reshape(t, &[b, n, h, dh]);
            let p = g.permute(r, &[0, 2, 1, 3]);
            g.reshape(p, &[b * h, n, dh])
        };
        let qh = split(g, q);
        let kh = split(g, k);
        let vh = split(g, v);
        let scores = g.bmm(qh, kh, false, true);
        let scaled = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax_lastdim(scaled);
        let out = g.bmm(attn, vh, false, false);
        let merged = {
            let r = g.reshape(out, &[b, h, n, dh]);
            let p = g.permute(r, &[0, 2, 1, 3]);
            g.reshape(p, &[b, n, c])
        };
        blk.proj.forward(g, bind, &self.store, merged)
    }

    /// Forward pass on the tape. `t` holds one time value per batch item.
    /// Returns the velocity `[B, C, h, w]` and the mid-layer token grid
    /// `[B, N, width]`.
    pub fn forward_g(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder,
        z_t: Var,
        t: &[T],
    ) -> (Var, Var) {
        let shape: Vec<usize> = g.value(z_t).shape().to_vec();
        assert_eq!(shape[0], t.len(), "one t per batch item");
        let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.cfg.latent_ch);
        assert_eq!((h, w), (self.cfg.latent_h, self.cfg.latent_w));
        let n = self.cfg.tokens();
        let width = self.cfg.width;

        let patches = g.patchify(z_t, self.cfg.patch);
        let mut x = self.patch_embed.forward(g, bind, &self.store, patches);
        // fixed positional encoding over the token grid
        let mut pos_b = ArrayD::zeros(IxDyn(&[bsz, n, width]));
        for bi in 0..bsz {
            for ni in 0..n {
                for ci in 0..width {
                    pos_b[[bi, ni, ci]] = self.pos[[ni, ci]];
                }
            }
        }
        let pos = g.constant(pos_b);
        x = g.add(x, pos);

        // timestep embedding -> conditioning vector [B, width]
        let emb = timestep_embedding::<T>(t, self.cfg.temb_dim);
        let emb = g.constant(emb);
        let e1 = self.temb1.forward(g, bind, &self.store, emb);
        let e1a = g.silu(e1);
        let cond = self.temb2.forward(g, bind, &self.store, e1a);
        let cond_act = g.silu(cond);

        let mut mid: Option<Var> = None;
        for (bi, blk) in self.blocks.iter().enumerate() {
            let params6 = blk.adaln.forward(g, bind, &self.store, cond_act);
            let shift_a = g.narrow(params6, 1, 0, width);
            let scale_a = g.narrow(params6, 1, width, width);
            let gate_a = g.narrow(params6, 1, 2 * width, width);
            let shift_m = g.narrow(params6, 1, 3 * width, width);
            let scale_m = g.narrow(params6, 1, 4 * width, width);
            let gate_m = g.narrow(params6, 1, 5 * width, width);

            let n1 = g.layer_norm(x, T::from_f64(1e-6));
            let mod1 = self.modulate(g, n1, shift_a, scale_a);
            let att = self.attention(g, bind, blk, mod1);
            let gated = g.mul_bcast_mid(att, gate_a);
            x = g.add(x, gated);

            let n2 = g.layer_norm(x, T::from_f64(1e-6));
            let mod2 = self.modulate(g, n2, shift_m, scale_m);
            let h1 = blk.fc1.forward(g, bind, &self.store, mod2);
            let h1a = g.silu(h1);
            let h2 = blk.fc2.forward(g, bind, &self.store, h1a);
            let gated2 = g.mul_bcast_mid(h2, gate_m);
            x = g.add(x, gated2);

            if bi + 1 == self.cfg.align_layer() {
                mid = Some(x);
            }
        }

        let params2 = self.final_adaln.forward(g, bind, &self.store, cond_act);
        let shift = g.narrow(params2, 1, 0, width);
        let scale = g.narrow(params2, 1, width, width);
        let nf = g.layer_norm(x, T::from_f64(1e-6));
        let modf = self.modulate(g, nf, shift, scale);
        let out_tokens = self.final_out.forward(g, bind, &self.store, modf);
        let v = g.unpatchify(out_tokens, self.cfg.patch, c, h, w);
        (v, mid.expect("align layer within depth"))
    }

    /// Project mid-layer tokens through the alignment head and L2-normalize
    /// per token.
    pub fn head_g(&self, g: &mut Graph<T>, bind: &mut Binder, mid: Var) -> Var {
        let h1 = self.head1.forward(g, bind, &self.store, mid);
        let h1a = g.silu(h1);
        let proj = self.head2.forward(g, bind, &self.store, h1a);
        let sq = g.mul(proj, proj);
        let n2 = g.sum_lastdim(sq);
        let n2e = g.add_scalar(n2, T::from_f64(1e-12));
        let norm = g.sqrt(n2e);
        g.div_last(proj, norm)
    }

    /// Value-level forward (inference).
    pub fn forward(&self, z_t: &ArrayD<T>, t: &[T]) -> Result<(ArrayD<T>, ArrayD<T>), FlowError> {
        if z_t.ndim() != 4
            || z_t.shape()[1] != self.cfg.latent_ch
            || z_t.shape()[2] != self.cfg.latent_h
            || z_t.shape()[3] != self.cfg.latent_w
        {
            return Err(FlowError::ShapeError(format!("bad latent shape {:?}", z_t.shape())));
        }
        let mut g = Graph::new();
        let mut bind = Binder::frozen_all();
        let z = g.constant(z_t.clone());
        let (v, mid) = self.forward_g(&mut g, &mut bind, z, t);
        Ok((g.value(v).clone(), g.value(mid).clone()))
    }
}

/// Sinusoidal embedding of per-sample times, `[B, dim]`.
pub fn timestep_embedding<T: Real>(t: &[T], dim: usize) -> ArrayD<T> {
    let half = dim / 2;
    let mut out = ArrayD::zeros(IxDyn(&[t.len(), dim]));
    for (bi, tv) in t.iter().enumerate() {
        // times in [0,1] are spread across the frequency bank
        let tv = tv.as_f64() * 1000.0;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let angle = tv * freq;
            out[[bi, i]] = T::from_f64(angle.cos());
            out[[bi, half + i]] = T::from_f64(angle.sin());
        }
    }
    out
}

/// Fixed 2-D sin-cos positional table over the token grid, `[N, width]`.
fn sincos_pos_embed<T: Real>((gh, gw): (usize, usize), width: usize) -> ArrayD<T> {
    let quarter = width / 4;
    let mut out = ArrayD::zeros(IxDyn(&[gh * gw, width]));
    for y in 0..gh {
        for x in 0..gw {
            let n = y * gw + x;
            for i in 0..quarter {
                let freq = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                out[[n, i]] = T::from_f64((y as f64 * freq).sin());
                out[[n, quarter + i]] = T::from_f64((y as f64 * freq).cos());
                out[[n, 2 * quarter + i]] = T::from_f64((x as f64 * freq).sin());
                out[[n, 3 * quarter + i]] = T::from_f64((x as f64 * freq).cos());
            }
        }
    }
    out
}

/// Linear interpolant `z_t = (1 - t) z_star + t eps`.
pub fn interpolate<T: Real>(z_star: &ArrayD<T>, eps: &ArrayD<T>, t: T) -> ArrayD<T> {
    let mut out = z_star.clone();
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| {
        *o = (T::one() - t) * *o + t * e;
    });
    out
}

/// Graph version of the interpolant for differentiable paths.
pub fn interpolate_g<T: Real>(g: &mut Graph<T>, z_star: Var, eps: Var, t: T) -> Var {
    let a = g.scale(z_star, T::one() - t);
    let b = g.scale(eps, t);
    g.add(a, b)
}

/// `L_Denoising = mean |v_pred - (eps - z_star)|^2` on the tape.
pub fn denoising_loss_g<T: Real>(g: &mut Graph<T>, v_pred: Var, eps: Var, z_star: Var) -> Var {
    let target = g.sub(eps, z_star);
    let diff = g.sub(v_pred, target);
    let sq = g.mul(diff, diff);
    g.mean_all(sq)
}

/// Masked alignment loss on the tape: negative mean cosine between
/// normalized projected tokens and the target grid over cells that are
/// both occupied and mask-selected. Empty selection gives 0.
pub fn alignment_loss_g<T: Real>(
    g: &mut Graph<T>,
    tokens_normed: Var,
    target: &ArrayD<T>,
    select: &[bool],
) -> Result<Var, FlowError> {
    let shape: Vec<usize> = g.value(tokens_normed).shape().to_vec();
    if target.shape() != shape.as_slice() {
        return Err(FlowError::ShapeError(format!(
            "target {:?} vs tokens {:?}",
            target.shape(),
            shape
        )));
    }
    let (b, n) = (shape[0], shape[1]);
    if select.len() != b * n {
        return Err(FlowError::ShapeError("mask/token grid mismatch".into()));
    }
    let count = select.iter().filter(|s| **s).count();
    if count == 0 {
        return Ok(g.scalar_constant(T::zero()));
    }
    let tgt = g.constant(target.clone());
    let prod = g.mul(tokens_normed, tgt);
    let dots = g.sum_lastdim(prod); // [B, N, 1]
    let mut w = ArrayD::zeros(IxDyn(&[b, n, 1]));
    for (i, s) in select.iter().enumerate() {
        if *s {
            w[[i / n, i % n, 0]] = T::one();
        }
    }
    let wv = g.constant(w);
    let weighted = g.mul(dots, wv);
    let sum = g.sum_all(weighted);
    let mean = g.scale(sum, T::one() / T::from_f64(count as f64));
    Ok(g.neg(mean))
}

/// Score implied by the velocity under the linear interpolant:
/// `-(z + (1 - t) v) / t`.
pub fn velocity_to_score<T: Real>(
    v: &ArrayD<T>,
    z: &ArrayD<T>,
    t: T,
) -> Result<ArrayD<T>, FlowError> {
    if t <= T::zero() {
        return Err(FlowError::SingularTime);
    }
    let mut out = z.clone();
    ndarray::Zip::from(&mut out).and(v).for_each(|o, &vi| {
        *o = -(*o + (T::one() - t) * vi) / t;
    });
    Ok(out)
}
