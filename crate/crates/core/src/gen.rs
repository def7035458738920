//! Tiny prompt-conditioned denoising diffusion generator.
//!
//! The ε-net is an MLP over `concat(x_t, time embedding, prompt embedding)`.
//! Pixels live in data space `2p − 1` inside the generator; [`sample`]
//! returns images in [0, 1].

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlpoError};
use crate::image::{Image, ImageBatch};
use crate::nn::checkpoint::{activations_of, Checkpoint, Dtype};
use crate::nn::lora::{adapter_grads_to_flat, AdapterGrad};
use crate::nn::{
    optimizer_step, Activation, Adapters, GradTarget, LoraAdapter, Matrix, MlpParams, OptimizerConfig,
    OptimizerState, Trace,
};
use crate::rng::{rng_for, tag_str};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    /// `alpha_bar[t - 1]` is ᾱ_t.
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(RlpoError::invalid("t_diff", "need at least one step"));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(RlpoError::invalid("betas", "every beta must lie in (0, 1)"));
        }
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(DiffusionSchedule { betas, alpha_bar })
    }

    pub fn t_diff(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_diff() {
            return Err(RlpoError::invalid("t", format!("{t} outside 1..={}", self.t_diff())));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Signal scale α_t = √ᾱ_t.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    /// Noise scale σ_t = √(1 − ᾱ_t).
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Signal-to-noise ratio α_t² / σ_t².
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar(t) / (1.0 - self.alpha_bar(t))
    }
}

/// Linear-β schedule with `t_diff` steps.
pub fn make_schedule(t_diff: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t_diff < 2 {
        return Err(RlpoError::invalid("t_diff", "must be >= 2"));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(RlpoError::invalid("beta_start", "need 0 < beta_start < beta_end < 1"));
    }
    let betas = (0..t_diff)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_diff - 1) as f64)
        .collect();
    DiffusionSchedule::from_betas(betas)
}

/// `x_t = α_t x0 + σ_t ε`, elementwise.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(RlpoError::shape("noise", x0.len(), eps.len()));
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out.resize(dim, 0.0);
    out
}

pub fn to_data_space(pixels: &[f64]) -> Vec<f64> {
    pixels.iter().map(|p| 2.0 * p - 1.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub image_size: (usize, usize),
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub prompt_dim: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub t_diff: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub output: OutputMode,
}

/// What the MLP output means. With `Sample` the net predicts x0 and the
/// noise estimate is `(x_t − α_t · out) / σ_t`, which keeps the identity
/// component out of the hidden bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Noise,
    #[default]
    Sample,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: (16, 16),
            hidden: vec![128, 128],
            time_dim: 16,
            prompt_dim: 8,
            adapter_rank: 8,
            adapter_scale: 8.0 / 8.0,
            t_diff: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            output: OutputMode::Sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState {
    pub config: GeneratorConfig,
    /// Frozen ε-net.
    pub base: MlpParams,
    pub adapters: Adapters,
    pub adapter_optimizer: OptimizerState,
    pub prompt_table: BTreeMap<String, Vec<f64>>,
    pub schedule: DiffusionSchedule,
}

impl GeneratorState {
    /// Random base, fresh (no-op) adapters on every hidden layer.
    pub fn init(config: &GeneratorConfig, keywords: &[String], seed: u64) -> Result<Self> {
        let d = config.image_size.0 * config.image_size.1;
        let mut dims = vec![d + config.time_dim + config.prompt_dim];
        dims.extend(&config.hidden);
        dims.push(d);
        let base = MlpParams::init(&dims, Activation::Relu, &mut rng_for(seed, &[0xe9e7]))?;
        let mut arng = rng_for(seed, &[0xada9]);
        let mut adapters = Adapters::new();
        for i in 0..config.hidden.len() {
            let l = &base.layers[i];
            adapters.insert(
                i,
                LoraAdapter::new(l.d_out(), l.d_in(), config.adapter_rank, config.adapter_scale, &mut arng)?,
            );
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let prompt_table = keywords
            .iter()
            .map(|k| {
                let mut r = rng_for(seed, &[0x9a0e, tag_str(k)]);
                (k.clone(), (0..config.prompt_dim).map(|_| normal.sample(&mut r)).collect())
            })
            .collect();
        let schedule = if config.t_diff == 1 {
            DiffusionSchedule::from_betas(vec![config.beta_end])?
        } else {
            make_schedule(config.t_diff, config.beta_start, config.beta_end)?
        };
        Ok(GeneratorState {
            config: config.clone(),
            base,
            adapters,
            adapter_optimizer: OptimizerState::default(),
            prompt_table,
            schedule,
        })
    }

    pub fn image_dim(&self) -> usize {
        self.config.image_size.0 * self.config.image_size.1
    }

    pub fn keywords(&self) -> Vec<String> {
        self.prompt_table.keys().cloned().collect()
    }

    fn prompt(&self, keyword: &str) -> Result<&Vec<f64>> {
        self.prompt_table
            .get(keyword)
            .ok_or_else(|| RlpoError::UnknownKeyword(keyword.into()))
    }

    /// Build the ε-net input rows for a batch of noisy images.
    pub fn net_input(&self, x_t: &Matrix, ts: &[usize], keyword: &str) -> Result<Matrix> {
        let d = self.image_dim();
        if x_t.cols != d {
            return Err(RlpoError::shape("x_t", d, x_t.cols));
        }
        if ts.len() != x_t.rows {
            return Err(RlpoError::shape("timesteps", x_t.rows, ts.len()));
        }
        let prompt = self.prompt(keyword)?;
        let width = d + self.config.time_dim + self.config.prompt_dim;
        let mut data = Vec::with_capacity(x_t.rows * width);
        for (r, &t) in ts.iter().enumerate() {
            self.schedule.check_t(t)?;
            data.extend_from_slice(x_t.row(r));
            data.extend(time_embedding(t, self.config.time_dim));
            data.extend_from_slice(prompt);
        }
        Matrix::from_vec(x_t.rows, width, data)
    }

    pub fn forward(&self, x_t: &Matrix, ts: &[usize], keyword: &str, use_adapters: bool) -> Result<Trace> {
        let input = self.net_input(x_t, ts, keyword)?;
        self.base.forward(&input, use_adapters.then_some(&self.adapters))
    }

    /// ε̂ rows for a batch, with the trace of the underlying net.
    pub fn eps_batch(&self, x_t: &Matrix, ts: &[usize], keyword: &str, use_adapters: bool) -> Result<(Trace, Matrix)> {
        let trace = self.forward(x_t, ts, keyword, use_adapters)?;
        let eps = self.eps_from_output(trace.output(), x_t, ts);
        Ok((trace, eps))
    }

    fn eps_from_output(&self, out: &Matrix, x_t: &Matrix, ts: &[usize]) -> Matrix {
        let mut eps = out.clone();
        if self.config.output == OutputMode::Sample {
            for (r, &t) in ts.iter().enumerate() {
                let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
                for (e, x) in eps.row_mut(r).iter_mut().zip(x_t.row(r)) {
                    *e = (x - a * *e) / s;
                }
            }
        }
        eps
    }

    /// Map a gradient on ε̂ to a gradient on the net output.
    pub fn output_grad(&self, upstream: &Matrix, ts: &[usize]) -> Matrix {
        let mut g = upstream.clone();
        if self.config.output == OutputMode::Sample {
            for (r, &t) in ts.iter().enumerate() {
                let k = -self.schedule.alpha(t) / self.schedule.sigma(t);
                g.row_mut(r).iter_mut().for_each(|v| *v *= k);
            }
        }
        g
    }

    /// Adapter gradients for an upstream gradient on ε̂ of a batch run with
    /// timesteps `ts`.
    pub fn adapter_grads(&self, trace: &Trace, upstream: &Matrix, ts: &[usize]) -> Result<BTreeMap<usize, AdapterGrad>> {
        let g = self.output_grad(upstream, ts);
        Ok(self.base.backward(Some(&self.adapters), trace, &g, GradTarget::AdaptersOnly)?.adapters)
    }

    pub fn adapter_grads_flat(&self, trace: &Trace, upstream: &Matrix, ts: &[usize]) -> Result<Vec<f64>> {
        Ok(adapter_grads_to_flat(&self.adapters, &self.adapter_grads(trace, upstream, ts)?))
    }

    pub fn base_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in self.base.to_flat() {
            for b in v.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        for (k, e) in &self.prompt_table {
            h ^= tag_str(k);
            for v in e {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut ck = Checkpoint::default();
        ck.push_mlp("eps", &self.base);
        for (k, e) in &self.prompt_table {
            ck.push(format!("prompt.{k}"), vec![e.len()], e.clone());
        }
        ck.push_adapters("adapter", &self.adapters);
        ck.meta = serde_json::json!({
            "config": self.config,
            "betas": self.schedule.betas,
            "keywords": self.keywords(),
            "activations": activations_of(&self.base),
            "adapter_scales": self.adapters.iter().map(|(k, a)| (k.to_string(), a.scale)).collect::<BTreeMap<_, _>>(),
        });
        ck.write(stem, Dtype::F32)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let ck = Checkpoint::read(stem)?;
        let config: GeneratorConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let betas: Vec<f64> = serde_json::from_value(ck.meta["betas"].clone())?;
        let keywords: Vec<String> = serde_json::from_value(ck.meta["keywords"].clone())?;
        let acts: Vec<Activation> = serde_json::from_value(ck.meta["activations"].clone())?;
        let scales: BTreeMap<String, f64> = serde_json::from_value(ck.meta["adapter_scales"].clone())?;
        let scales = scales
            .into_iter()
            .map(|(k, v)| k.parse::<usize>().map(|k| (k, v)))
            .collect::<std::result::Result<BTreeMap<_, _>, _>>()
            .map_err(|e| RlpoError::Checkpoint {
                path: stem.to_path_buf(),
                reason: e.to_string(),
            })?;
        let mut prompt_table = BTreeMap::new();
        for k in keywords {
            let t = ck.require(&format!("prompt.{k}"))?;
            prompt_table.insert(k, t.data.clone());
        }
        Ok(GeneratorState {
            config,
            base: ck.mlp("eps", &acts)?,
            adapters: ck.adapters("adapter", &scales)?,
            adapter_optimizer: OptimizerState::default(),
            prompt_table,
            schedule: DiffusionSchedule::from_betas(betas)?,
        })
    }
}

/// ε̂ for a single noisy image.
pub fn eps_predict(state: &GeneratorState, x_t: &Image, t: usize, keyword: &str, use_adapters: bool) -> Result<Image> {
    let x = Matrix::from_vec(1, x_t.len(), x_t.data.clone())?;
    let (_, eps) = state.eps_batch(&x, &[t], keyword, use_adapters)?;
    Image::new(x_t.height, x_t.width, eps.data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Per-sample gradient weight `min(snr, c) / snr`; `None` trains on the
    /// plain ε-MSE. The logged loss is always the plain ε-MSE.
    pub snr_clip: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 8000,
            batch: 32,
            learning_rate: 1e-3,
            seed: 0,
            snr_clip: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_smoothed_loss: f64,
}

/// Mean of the last `min(n, 200)` losses, or the initial loss for zero steps.
fn smoothed_tail(losses: &[f64], initial: f64) -> f64 {
    if losses.is_empty() {
        return initial;
    }
    let k = losses.len().min(200);
    losses[losses.len() - k..].iter().sum::<f64>() / k as f64
}

/// ε-prediction MSE on a fixed probe batch, for reporting the initial loss.
fn probe_loss(state: &GeneratorState, data: &[(Image, String)], seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, &[0x1a17]);
    let n = data.len().min(64);
    let mut total = 0.0;
    for i in 0..n {
        let (im, kw) = &data[(i * 7919) % data.len()];
        let t = rng.random_range(1..=state.schedule.t_diff());
        let eps: Vec<f64> = (0..im.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let xt = q_sample(&to_data_space(&im.data), t, &eps, &state.schedule)?;
        let x = Matrix::from_vec(1, xt.len(), xt)?;
        let (_, out) = state.eps_batch(&x, &[t], kw, false)?;
        total += out.data.iter().zip(&eps).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / eps.len() as f64;
    }
    Ok(total / n.max(1) as f64)
}

/// Train base ε-net and prompt embeddings on keyword-tagged images with the
/// standard ε-prediction MSE. Adapters are not touched.
pub fn pretrain(state: &mut GeneratorState, data: &[(Image, String)], config: &PretrainConfig) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(RlpoError::invalid("data", "no training images"));
    }
    for (im, kw) in data {
        state.prompt(kw)?;
        if im.len() != state.image_dim() {
            return Err(RlpoError::shape("training image", state.image_dim(), im.len()));
        }
    }
    let initial_loss = probe_loss(state, data, config.seed)?;
    let d = state.image_dim();
    let keywords = state.keywords();
    let kw_index: BTreeMap<&str, usize> = keywords.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let opt = OptimizerConfig::adam(config.learning_rate).with_clip(10.0);
    let mut opt_state = OptimizerState::default();
    let n_base = state.base.param_count();
    let pdim = state.config.prompt_dim;
    let mut losses = Vec::with_capacity(config.steps);
    let mut rng = rng_for(config.seed, &[0x9e7a]);
    for step in 0..config.steps {
        let b = config.batch.max(1);
        let mut x = Matrix::zeros(b, d);
        let mut eps = Matrix::zeros(b, d);
        let mut input = Vec::with_capacity(b);
        for r in 0..b {
            let (im, kw) = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=state.schedule.t_diff());
            let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let xt = q_sample(&to_data_space(&im.data), t, &e, &state.schedule)?;
            x.row_mut(r).copy_from_slice(&xt);
            eps.row_mut(r).copy_from_slice(&e);
            input.push((t, kw.as_str()));
        }
        // Rows carry different keywords, so assemble the input by hand.
        let width = d + state.config.time_dim + pdim;
        let mut rows = Vec::with_capacity(b * width);
        for (r, (t, kw)) in input.iter().enumerate() {
            rows.extend_from_slice(x.row(r));
            rows.extend(time_embedding(*t, state.config.time_dim));
            rows.extend_from_slice(&state.prompt_table[*kw]);
        }
        let net_in = Matrix::from_vec(b, width, rows)?;
        let trace = state.base.forward(&net_in, None)?;
        let ts: Vec<usize> = input.iter().map(|(t, _)| *t).collect();
        let out = state.eps_from_output(trace.output(), &x, &ts);
        let scale = 1.0 / (b * d) as f64;
        let mut up = Matrix::zeros(b, d);
        let mut loss = 0.0;
        for i in 0..out.data.len() {
            let diff = out.data[i] - eps.data[i];
            loss += diff * diff * scale;
            up.data[i] = 2.0 * diff * scale;
        }
        if !loss.is_finite() {
            return Err(RlpoError::Divergence {
                epoch: step,
                last_finite_loss: losses.last().copied(),
            });
        }
        losses.push(loss);
        if let Some(c) = config.snr_clip {
            for (r, &t) in ts.iter().enumerate() {
                let snr = state.schedule.snr(t);
                let w = snr.min(c) / snr;
                up.row_mut(r).iter_mut().for_each(|v| *v *= w);
            }
        }
        let g = state.base.backward(None, &trace, &state.output_grad(&up, &ts), GradTarget::AllParams)?;
        let gin = g.input.as_ref().expect("all-params pass returns input gradient");
        let mut grads = g.layers_flat();
        let mut prompt_grads = vec![0.0; keywords.len() * pdim];
        for (r, (_, kw)) in input.iter().enumerate() {
            let k = kw_index[kw];
            let src = &gin.row(r)[d + state.config.time_dim..];
            for (dst, s) in prompt_grads[k * pdim..(k + 1) * pdim].iter_mut().zip(src) {
                *dst += s;
            }
        }
        grads.extend_from_slice(&prompt_grads);
        let mut flat = state.base.to_flat();
        for k in &keywords {
            flat.extend_from_slice(&state.prompt_table[k]);
        }
        optimizer_step(&mut flat, &grads, &mut opt_state, &opt).map_err(|_| RlpoError::Divergence {
            epoch: step,
            last_finite_loss: losses.last().copied(),
        })?;
        state.base.set_flat(&flat[..n_base])?;
        for (i, k) in keywords.iter().enumerate() {
            let e = state.prompt_table.get_mut(k).expect("keyword present");
            e.copy_from_slice(&flat[n_base + i * pdim..n_base + (i + 1) * pdim]);
        }
    }
    let final_smoothed_loss = if config.steps == 0 {
        initial_loss
    } else {
        smoothed_tail(&losses, initial_loss)
    };
    Ok(PretrainReport {
        losses,
        initial_loss,
        final_smoothed_loss,
    })
}

/// Ancestral DDPM sampling of `n` images from pure noise.
pub fn sample(state: &GeneratorState, keyword: &str, n: usize, seed: u64, use_adapters: bool) -> Result<ImageBatch> {
    if n < 2 || n % 2 != 0 {
        return Err(RlpoError::invalid("n", format!("{n} is not an even count >= 2")));
    }
    state.prompt(keyword)?;
    let d = state.image_dim();
    let sch = &state.schedule;
    let mut rng = rng_for(seed, &[0x5a3b, tag_str(keyword)]);
    let mut x = Matrix::from_vec(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect())?;
    for t in (1..=sch.t_diff()).rev() {
        let (_, eps) = state.eps_batch(&x, &vec![t; n], keyword, use_adapters)?;
        let beta = sch.beta(t);
        let ab = sch.alpha_bar(t);
        let coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let sigma = if t > 1 {
            (beta * (1.0 - sch.alpha_bar(t - 1)) / (1.0 - ab)).sqrt()
        } else {
            0.0
        };
        for i in 0..x.data.len() {
            let mean = inv_sqrt_alpha * (x.data[i] - coef * eps.data[i]);
            let z: f64 = if t > 1 { StandardNormal.sample(&mut rng) } else { 0.0 };
            x.data[i] = mean + sigma * z;
        }
        if !x.is_finite() {
            return Err(RlpoError::NonFinite(format!("sample at step {t}")));
        }
    }
    let (h, w) = state.config.image_size;
    (0..n)
        .map(|r| Image::new(h, w, x.row(r).iter().map(|v| (0.5 * (v + 1.0)).clamp(0.0, 1.0)).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            image_size: (3, 3),
            hidden: vec![6, 5],
            time_dim: 4,
            prompt_dim: 2,
            adapter_rank: 2,
            adapter_scale: 1.0,
            t_diff: 5,
            beta_start: 0.05,
            beta_end: 0.3,
            output: OutputMode::Sample,
        }
    }

    #[test]
    fn two_step_schedule() {
        let s = DiffusionSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
    }

    #[test]
    fn q_sample_quarter_signal() {
        let s = DiffusionSchedule::from_betas(vec![0.75]).unwrap();
        assert_eq!(q_sample(&[1.0], 1, &[0.0], &s).unwrap(), vec![0.5]);
        assert!(q_sample(&[1.0], 2, &[0.0], &s).is_err());
        let near_one = DiffusionSchedule::from_betas(vec![1e-12]).unwrap();
        let x = q_sample(&[0.3, -0.8], 1, &[1.0, -1.0], &near_one).unwrap();
        assert!((x[0] - 0.3).abs() < 1e-5 && (x[1] + 0.8).abs() < 1e-5);
    }

    #[test]
    fn eps_shape_and_zero_adapter_agreement() {
        let st = GeneratorState::init(&tiny_config(), &["a".into()], 1).unwrap();
        let x = Image::filled(3, 3, 0.2);
        for t in 1..=5 {
            let e1 = eps_predict(&st, &x, t, "a", true).unwrap();
            let e0 = eps_predict(&st, &x, t, "a", false).unwrap();
            assert_eq!((e1.height, e1.width), (3, 3));
            assert_eq!(e1, e0);
        }
        assert!(matches!(eps_predict(&st, &x, 1, "zz", false), Err(RlpoError::UnknownKeyword(_))));
    }

    #[test]
    fn sampling_contract() {
        let st = GeneratorState::init(&tiny_config(), &["a".into()], 2).unwrap();
        let b = sample(&st, "a", 4, 9, true).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|im| im.min() >= 0.0 && im.max() <= 1.0));
        assert_eq!(b, sample(&st, "a", 4, 9, true).unwrap());
        assert!(sample(&st, "a", 3, 9, true).is_err());
        let mut one = tiny_config();
        one.t_diff = 1;
        let st1 = GeneratorState::init(&one, &["a".into()], 2).unwrap();
        assert!(sample(&st1, "a", 2, 0, false).unwrap().iter().all(|im| im.data.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn zero_step_pretrain_is_noop() {
        let mut st = GeneratorState::init(&tiny_config(), &["a".into()], 3).unwrap();
        let before = st.clone();
        let data = vec![(Image::filled(3, 3, 0.5), "a".to_string())];
        let rep = pretrain(&mut st, &data, &PretrainConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(st, before);
        assert_eq!(rep.final_smoothed_loss, rep.initial_loss);
    }
}
