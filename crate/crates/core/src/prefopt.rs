//! Preference decisions over paired TCAV scores and the Diffusion-DPO
//! adapter update.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlpoError};
use crate::gen::{q_sample, to_data_space, GeneratorState};
use crate::image::{Image, ImageBatch};
use crate::nn::lora::{adapters_set_flat, adapters_to_flat};
use crate::nn::{optimizer_step, Matrix, OptimizerConfig};
use crate::rng::{derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub winner: ImageBatch,
    pub loser: ImageBatch,
    pub keyword: String,
    pub ts_winner: f64,
    pub ts_loser: f64,
    pub step: usize,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.winner.is_empty() || self.loser.is_empty() {
            return Err(RlpoError::invalid("pair", "winner and loser batches must be non-empty"));
        }
        if self.ts_winner < self.ts_loser {
            return Err(RlpoError::invalid("ts_winner", "winner scored below loser"));
        }
        let dim = self.winner[0].len();
        if let Some(im) = self.winner.iter().chain(&self.loser).find(|im| im.len() != dim) {
            return Err(RlpoError::shape("pair image", dim, im.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    /// The collapsed β·T·ω coefficient.
    pub kappa: f64,
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub noise_draws_per_image: usize,
    pub grad_clip: Option<f64>,
    /// Per-draw weight `min(λ_t, c)/λ_t`; `None` keeps the weight constant.
    #[serde(default = "default_snr_clip")]
    pub snr_clip: Option<f64>,
}

fn default_snr_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            kappa: 50.0,
            inner_steps: 1,
            learning_rate: 3e-3,
            noise_draws_per_image: 16,
            grad_clip: Some(10.0),
            snr_clip: default_snr_clip(),
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(RlpoError::invalid("kappa", "must be > 0"));
        }
        if self.inner_steps == 0 {
            return Err(RlpoError::invalid("inner_steps", "must be >= 1"));
        }
        if self.noise_draws_per_image == 0 {
            return Err(RlpoError::invalid("noise_draws_per_image", "must be >= 1"));
        }
        if self.snr_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(RlpoError::invalid("snr_clip", "must be > 0"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RlpoError::invalid("learning_rate", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Index halves of a uniformly random partition of `n` items.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 || n % 2 != 0 {
        return Err(RlpoError::invalid("batch", format!("{n} is not an even size >= 2")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, &[0x5911]));
    let g2 = idx.split_off(n / 2);
    Ok((idx, g2))
}

pub fn split_groups(batch: &[Image], seed: u64) -> Result<(ImageBatch, ImageBatch)> {
    let (a, b) = split_indices(batch.len(), seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| batch[i].clone()).collect();
    Ok((pick(&a), pick(&b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    /// Groups are numbered 1 and 2.
    ApplyDpo { winner: u8, loser: u8 },
    ReachedExplainable,
    NoSignal,
}

impl Decision {
    pub fn winner(&self) -> Option<u8> {
        match self {
            Decision::ApplyDpo { winner, .. } => Some(*winner),
            _ => None,
        }
    }
}

/// Threshold rule with a strict boundary: `max > eta` is explainable.
pub fn decide_preference(ts1: f64, ts2: f64, eta: f64) -> Decision {
    decide_preference_with(ts1, ts2, eta, false)
}

/// As [`decide_preference`]; `inclusive` makes `max == eta` explainable too.
pub fn decide_preference_with(ts1: f64, ts2: f64, eta: f64, inclusive: bool) -> Decision {
    let m = ts1.max(ts2);
    if m > eta || (inclusive && m == eta) {
        Decision::ReachedExplainable
    } else if ts1 == ts2 {
        Decision::NoSignal
    } else if ts1 > ts2 {
        Decision::ApplyDpo { winner: 1, loser: 2 }
    } else {
        Decision::ApplyDpo { winner: 2, loser: 1 }
    }
}

/// Per-draw loss `−log σ(−κ[(e_wθ − e_wref) − (e_lθ − e_lref)])`.
pub fn dpo_draw_loss(e_w_theta: f64, e_w_ref: f64, e_l_theta: f64, e_l_ref: f64, kappa: f64) -> f64 {
    softplus(kappa * ((e_w_theta - e_w_ref) - (e_l_theta - e_l_ref)))
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoEval {
    pub loss: f64,
    /// Flattened in adapter order.
    pub grads: Vec<f64>,
    pub draws: usize,
}

/// Mean Diffusion-DPO loss over all (pair, noise draw) samples and its
/// gradient with respect to the adapters. Errors are per-pixel means.
pub fn dpo_loss(state: &GeneratorState, pair: &PreferencePair, config: &DpoConfig, seed: u64) -> Result<DpoEval> {
    pair.validate()?;
    config.validate()?;
    if state.adapters.is_empty() {
        return Err(RlpoError::invalid("adapters", "generator has no adapters"));
    }
    let d = state.image_dim();
    if pair.winner[0].len() != d {
        return Err(RlpoError::shape("pair image", d, pair.winner[0].len()));
    }
    // Pair winner[i] with loser[i] after shuffling both index lists.
    let mut prng = rng_for(seed, &[0xd90a]);
    let mut wi: Vec<usize> = (0..pair.winner.len()).collect();
    let mut li: Vec<usize> = (0..pair.loser.len()).collect();
    wi.shuffle(&mut prng);
    li.shuffle(&mut prng);
    let pairs = wi.len().min(li.len());
    let n = pairs * config.noise_draws_per_image;
    let t_max = state.schedule.t_diff();
    let mut xw = Matrix::zeros(n, d);
    let mut xl = Matrix::zeros(n, d);
    let mut eps = Matrix::zeros(n, d);
    let mut ts = Vec::with_capacity(n);
    for p in 0..pairs {
        let w0 = to_data_space(&pair.winner[wi[p]].data);
        let l0 = to_data_space(&pair.loser[li[p]].data);
        for k in 0..config.noise_draws_per_image {
            let j = p * config.noise_draws_per_image + k;
            let mut r = rng_for(seed, &[0xd91b, j as u64]);
            let t = r.random_range(1..=t_max);
            let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            xw.row_mut(j).copy_from_slice(&q_sample(&w0, t, &e, &state.schedule)?);
            xl.row_mut(j).copy_from_slice(&q_sample(&l0, t, &e, &state.schedule)?);
            eps.row_mut(j).copy_from_slice(&e);
            ts.push(t);
        }
    }
    let kw = pair.keyword.as_str();
    let (tw, ew_theta) = state.eps_batch(&xw, &ts, kw, true)?;
    let (_, ew_ref) = state.eps_batch(&xw, &ts, kw, false)?;
    let (tl, el_theta) = state.eps_batch(&xl, &ts, kw, true)?;
    let (_, el_ref) = state.eps_batch(&xl, &ts, kw, false)?;
    let err = |pred: &Matrix, j: usize| -> f64 {
        pred.row(j).iter().zip(eps.row(j)).map(|(a, b)| (b - a).powi(2)).sum::<f64>() / d as f64
    };
    let mut up_w = Matrix::zeros(n, d);
    let mut up_l = Matrix::zeros(n, d);
    let mut total = 0.0;
    for j in 0..n {
        let snr = state.schedule.snr(ts[j]);
        let omega = config.snr_clip.map_or(1.0, |c| snr.min(c) / snr);
        let inner = omega * ((err(&ew_theta, j) - err(&ew_ref, j)) - (err(&el_theta, j) - err(&el_ref, j)));
        let z = config.kappa * inner;
        let loss = softplus(z);
        if !loss.is_finite() {
            return Err(RlpoError::NonFinite(format!("DPO draw {j} (t = {})", ts[j])));
        }
        total += loss;
        // dL/d(inner) = κ ω σ(z); d e/dε̂ = −2(ε − ε̂)/D.
        let c = config.kappa * omega * sigmoid(z) / n as f64;
        for i in 0..d {
            up_w.row_mut(j)[i] = c * -2.0 * (eps.get(j, i) - ew_theta.get(j, i)) / d as f64;
            up_l.row_mut(j)[i] = c * 2.0 * (eps.get(j, i) - el_theta.get(j, i)) / d as f64;
        }
    }
    let gw = state.adapter_grads_flat(&tw, &up_w, &ts)?;
    let gl = state.adapter_grads_flat(&tl, &up_l, &ts)?;
    let grads: Vec<f64> = gw.iter().zip(&gl).map(|(a, b)| a + b).collect();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(RlpoError::NonFinite(format!("DPO adapter gradient entry {i}")));
    }
    Ok(DpoEval {
        loss: total / n as f64,
        grads,
        draws: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm: f64,
}

/// `inner_steps` Adam steps on the adapters only. Both reported losses use
/// the draws of the first inner step, so they are directly comparable.
pub fn apply_dpo_update(
    state: &mut GeneratorState,
    pair: &PreferencePair,
    config: &DpoConfig,
    seed: u64,
) -> Result<DpoRecord> {
    let mut opt = OptimizerConfig::adam(config.learning_rate);
    opt.clip_norm = config.grad_clip;
    let first_seed = derive_seed(seed, &[0]);
    let mut loss_before = f64::NAN;
    let mut grad_norm = 0.0;
    for k in 0..config.inner_steps {
        let eval = dpo_loss(state, pair, config, derive_seed(seed, &[k as u64]))?;
        if k == 0 {
            loss_before = eval.loss;
        }
        let mut flat = adapters_to_flat(&state.adapters);
        let info = optimizer_step(&mut flat, &eval.grads, &mut state.adapter_optimizer, &opt)?;
        adapters_set_flat(&mut state.adapters, &flat)?;
        if k == 0 {
            grad_norm = info.grad_norm;
        }
    }
    let loss_after = dpo_loss(state, pair, config, first_seed)?.loss;
    Ok(DpoRecord {
        loss_before,
        loss_after,
        grad_norm,
    })
}
