//! Low-rank adapters: a layer with adapter `(a, b, λ)` uses `W + λ·a·b`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Result, RlpoError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `d_out × r`.
    pub a: Matrix,
    /// `r × d_in`.
    pub b: Matrix,
    pub scale: f64,
}

/// Adapters keyed by layer index.
pub type Adapters = BTreeMap<usize, LoraAdapter>;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Matrix,
    pub b: Matrix,
}

pub const ADAPTER_INIT_STD: f64 = 0.02;

impl LoraAdapter {
    /// `a ~ N(0, 0.02²)`, `b = 0`, so a fresh adapter leaves the layer unchanged.
    pub fn new<R: Rng>(d_out: usize, d_in: usize, rank: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(RlpoError::invalid(
                "rank",
                format!("must be in 1..={} for a {d_out}x{d_in} layer", d_out.min(d_in)),
            ));
        }
        let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("valid std");
        let a = (0..d_out * rank).map(|_| normal.sample(rng)).collect();
        Ok(LoraAdapter {
            a: Matrix::from_vec(d_out, rank, a)?,
            b: Matrix::zeros(rank, d_in),
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.cols
    }

    pub fn effective_weight(&self, w: &Matrix, layer: usize) -> Result<Matrix> {
        if self.a.rows != w.rows || self.b.cols != w.cols || self.a.cols != self.b.rows {
            return Err(RlpoError::shape(
                format!("adapter for layer {layer}"),
                w.rows * w.cols,
                self.a.rows * self.b.cols,
            ));
        }
        let mut eff = w.clone();
        eff.add_scaled(&self.a.matmul(&self.b), self.scale);
        Ok(eff)
    }

    /// Gradients given `delta` (`n × d_out`, loss gradient at the layer's
    /// pre-activation) and the layer input (`n × d_in`).
    pub fn grad(&self, delta: &Matrix, input: &Matrix) -> AdapterGrad {
        // dL/dW = δᵀx; dL/da = λ·(δᵀx)·bᵀ = λ·δᵀ(x·bᵀ); dL/db = λ·aᵀ·δᵀx = λ·(δ·a)ᵀx
        let mut ga = delta.t_matmul(&input.matmul_t(&self.b));
        ga.scale(self.scale);
        let mut gb = delta.matmul(&self.a).t_matmul(input);
        gb.scale(self.scale);
        AdapterGrad { a: ga, b: gb }
    }
}

pub fn adapters_to_flat(adapters: &Adapters) -> Vec<f64> {
    let mut out = Vec::new();
    for ad in adapters.values() {
        out.extend_from_slice(&ad.a.data);
        out.extend_from_slice(&ad.b.data);
    }
    out
}

pub fn adapters_set_flat(adapters: &mut Adapters, flat: &[f64]) -> Result<()> {
    let total: usize = adapters.values().map(|a| a.a.data.len() + a.b.data.len()).sum();
    if total != flat.len() {
        return Err(RlpoError::shape("flat adapters", total, flat.len()));
    }
    let mut off = 0;
    for ad in adapters.values_mut() {
        let n = ad.a.data.len();
        ad.a.data.copy_from_slice(&flat[off..off + n]);
        off += n;
        let n = ad.b.data.len();
        ad.b.data.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

/// Flatten gradients in the same order as [`adapters_to_flat`]; layers
/// without a gradient contribute zeros.
pub fn adapter_grads_to_flat(adapters: &Adapters, grads: &BTreeMap<usize, AdapterGrad>) -> Vec<f64> {
    let mut out = Vec::new();
    for (k, ad) in adapters {
        match grads.get(k) {
            Some(g) => {
                out.extend_from_slice(&g.a.data);
                out.extend_from_slice(&g.b.data);
            }
            None => out.extend(std::iter::repeat_n(0.0, ad.a.data.len() + ad.b.data.len())),
        }
    }
    out
}
