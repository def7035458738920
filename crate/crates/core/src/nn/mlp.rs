//! Multilayer perceptrons with hand-derived forward and backward passes.
//!
//! All passes run on row-batches: an input is an `n × d_in` matrix, one
//! sample per row. Single vectors are batches of one.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::lora::{AdapterGrad, Adapters};
use super::matrix::Matrix;
use crate::error::{Result, RlpoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `d_out × d_in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn d_in(&self) -> usize {
        self.weight.cols
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Everything a forward pass computed, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: Matrix,
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
    effective: Vec<Option<Matrix>>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.post.last().unwrap_or(&self.input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    AllParams,
    AdaptersOnly,
    InputOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// Present for [`GradTarget::AllParams`].
    pub layers: Vec<LayerGrad>,
    /// Present for [`GradTarget::AdaptersOnly`].
    pub adapters: BTreeMap<usize, AdapterGrad>,
    /// `n × d_in` vector-Jacobian product; present for
    /// [`GradTarget::AllParams`] and [`GradTarget::InputOnly`].
    pub input: Option<Matrix>,
}

impl Gradients {
    pub fn layers_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(&g.weight.data);
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

impl MlpParams {
    /// Random initialization; `dims` lists layer widths from input to output.
    /// Hidden layers use `hidden`, the last layer `Identity`.
    pub fn init<R: Rng>(dims: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(RlpoError::invalid("dims", "need at least two positive widths"));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, w) in dims.windows(2).enumerate() {
            let (d_in, d_out) = (w[0], w[1]);
            let last = i + 2 == dims.len();
            let activation = if last { Activation::Identity } else { hidden };
            let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / d_in as f64).sqrt()).expect("valid std");
            let data = (0..d_in * d_out).map(|_| normal.sample(rng)).collect();
            layers.push(Layer {
                weight: Matrix::from_vec(d_out, d_in, data)?,
                bias: vec![0.0; d_out],
                activation,
            });
        }
        Ok(MlpParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::d_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::d_out)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.d_out() {
                return Err(RlpoError::shape(format!("layer {i} bias"), l.d_out(), l.bias.len()));
            }
            if i > 0 && self.layers[i - 1].d_out() != l.d_in() {
                return Err(RlpoError::shape(
                    format!("layer {i} input"),
                    self.layers[i - 1].d_out(),
                    l.d_in(),
                ));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|v| !v.is_finite()) {
                return Err(RlpoError::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data.len() + l.bias.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(RlpoError::shape("flat parameters", self.param_count(), flat.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.data.len();
            l.weight.data.copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix, adapters: Option<&Adapters>) -> Result<Trace> {
        forward_layers(&self.layers, 0, x, adapters)
    }

    /// Output rows only.
    pub fn predict(&self, x: &Matrix, adapters: Option<&Adapters>) -> Result<Matrix> {
        let mut t = self.forward(x, adapters)?;
        Ok(t.post.pop().unwrap_or_else(|| x.clone()))
    }

    pub fn forward_vec(&self, x: &[f64], adapters: Option<&Adapters>) -> Result<Trace> {
        self.forward(&Matrix::from_vec(1, x.len(), x.to_vec())?, adapters)
    }

    pub fn backward(
        &self,
        adapters: Option<&Adapters>,
        trace: &Trace,
        upstream: &Matrix,
        wrt: GradTarget,
    ) -> Result<Gradients> {
        backward_layers(&self.layers, 0, adapters, trace, upstream, wrt)
    }
}

/// Forward through `layers`, where `layers[0]` is layer `offset` of the full
/// network (adapter keys use full-network indices).
pub fn forward_layers(
    layers: &[Layer],
    offset: usize,
    x: &Matrix,
    adapters: Option<&Adapters>,
) -> Result<Trace> {
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(layers.len());
    let mut effective = Vec::with_capacity(layers.len());
    for (j, layer) in layers.iter().enumerate() {
        let idx = offset + j;
        let input = if j == 0 { x } else { &post[j - 1] };
        if input.cols != layer.d_in() {
            return Err(RlpoError::shape(format!("layer {idx} input"), layer.d_in(), input.cols));
        }
        let eff = match adapters.and_then(|a| a.get(&idx)) {
            Some(ad) => Some(ad.effective_weight(&layer.weight, idx)?),
            None => None,
        };
        let w = eff.as_ref().unwrap_or(&layer.weight);
        let mut z = input.matmul_t(w);
        for r in 0..z.rows {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let mut a = z.clone();
        for v in &mut a.data {
            *v = layer.activation.apply(*v);
        }
        pre.push(z);
        post.push(a);
        effective.push(eff);
    }
    Ok(Trace {
        input: x.clone(),
        pre,
        post,
        effective,
    })
}

pub fn backward_layers(
    layers: &[Layer],
    offset: usize,
    adapters: Option<&Adapters>,
    trace: &Trace,
    upstream: &Matrix,
    wrt: GradTarget,
) -> Result<Gradients> {
    if trace.pre.len() != layers.len() {
        return Err(RlpoError::shape("forward trace layers", layers.len(), trace.pre.len()));
    }
    let out = trace.output();
    if upstream.rows != out.rows || upstream.cols != out.cols {
        return Err(RlpoError::shape("upstream gradient", out.data.len(), upstream.data.len()));
    }
    let mut grads = Gradients::default();
    let mut layer_grads: Vec<Option<LayerGrad>> = vec![None; layers.len()];
    let mut g = upstream.clone();
    for j in (0..layers.len()).rev() {
        let idx = offset + j;
        let layer = &layers[j];
        let mut delta = g;
        for (d, z) in delta.data.iter_mut().zip(&trace.pre[j].data) {
            *d *= layer.activation.derivative(*z);
        }
        let input = if j == 0 { &trace.input } else { &trace.post[j - 1] };
        if wrt == GradTarget::AllParams {
            let mut bias = vec![0.0; layer.d_out()];
            for r in 0..delta.rows {
                for (b, d) in bias.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            layer_grads[j] = Some(LayerGrad {
                weight: delta.t_matmul(input),
                bias,
            });
        }
        if wrt == GradTarget::AdaptersOnly {
            if let Some(ad) = adapters.and_then(|a| a.get(&idx)) {
                grads.adapters.insert(idx, ad.grad(&delta, input));
            }
        }
        let continue_down = match wrt {
            GradTarget::AdaptersOnly => adapters_below(adapters, offset, j),
            _ => true,
        };
        if !continue_down {
            break;
        }
        let w = trace.effective[j].as_ref().unwrap_or(&layer.weight);
        g = delta.matmul(w);
        if j == 0 {
            grads.input = Some(g);
            break;
        }
    }
    if wrt == GradTarget::AllParams {
        grads.layers = layer_grads.into_iter().map(|g| g.expect("every layer visited")).collect();
    }
    Ok(grads)
}

fn adapters_below(adapters: Option<&Adapters>, offset: usize, j: usize) -> bool {
    adapters.is_some_and(|a| a.keys().any(|&k| k >= offset && k < offset + j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::lora::LoraAdapter;
    use crate::rng::rng_for;

    fn net(dims: &[usize], seed: u64) -> MlpParams {
        MlpParams::init(dims, Activation::Relu, &mut rng_for(seed, &[])).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = MlpParams {
            layers: vec![Layer {
                weight: Matrix::identity(2),
                bias: vec![0.0; 2],
                activation: Activation::Identity,
            }],
        };
        let t = p.forward_vec(&[1.0, 2.0], None).unwrap();
        assert_eq!(t.output().data, vec![1.0, 2.0]);
    }

    #[test]
    fn two_layer_relu_matches_straight_line() {
        let p = MlpParams {
            layers: vec![
                Layer {
                    weight: Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap(),
                    bias: vec![0.1, -3.0],
                    activation: Activation::Relu,
                },
                Layer {
                    weight: Matrix::from_rows(&[vec![2.0, 1.0]]).unwrap(),
                    bias: vec![0.5],
                    activation: Activation::Identity,
                },
            ],
        };
        // h = relu([1*3 - 1*1 + 0.1, 0.5*3 + 2*1 - 3]) = [2.1, 0.5]; y = 4.2 + 0.5 + 0.5
        let y = p.forward_vec(&[3.0, 1.0], None).unwrap();
        assert!((y.output().data[0] - 5.2).abs() < 1e-12);
    }

    #[test]
    fn zero_adapter_is_exact_noop() {
        let p = net(&[5, 4, 3], 1);
        let mut ad = Adapters::new();
        let mut r = rng_for(2, &[]);
        ad.insert(0, LoraAdapter::new(4, 5, 2, 1.0, &mut r).unwrap());
        for v in &mut ad.get_mut(&0).unwrap().a.data {
            *v = 0.0;
        }
        let x = Matrix::from_vec(1, 5, vec![0.3, -0.2, 0.9, 1.1, -0.4]).unwrap();
        let a = p.forward(&x, None).unwrap();
        let b = p.forward(&x, Some(&ad)).unwrap();
        assert_eq!(a.output(), b.output());
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let p = MlpParams {
            layers: vec![Layer {
                weight: Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap(),
                bias: vec![0.0; 2],
                activation: Activation::Identity,
            }],
        };
        let x = [0.5, -1.0, 2.0];
        let t = p.forward_vec(&x, None).unwrap();
        let g = Matrix::from_vec(1, 2, vec![3.0, -2.0]).unwrap();
        let grads = p.backward(None, &t, &g, GradTarget::AllParams).unwrap();
        assert_eq!(grads.layers[0].weight.data, vec![1.5, -3.0, 6.0, -1.0, 2.0, -4.0]);
        assert_eq!(grads.layers[0].bias, vec![3.0, -2.0]);
    }

    #[test]
    fn dead_relu_blocks_input_gradient() {
        let p = MlpParams {
            layers: vec![
                Layer {
                    weight: Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(),
                    bias: vec![-10.0, -10.0],
                    activation: Activation::Relu,
                },
                Layer {
                    weight: Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
                    bias: vec![0.0],
                    activation: Activation::Identity,
                },
            ],
        };
        let t = p.forward_vec(&[1.0, 2.0], None).unwrap();
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let grads = p.backward(None, &t, &g, GradTarget::InputOnly).unwrap();
        assert_eq!(grads.input.unwrap().data, vec![0.0, 0.0]);
    }

    #[test]
    fn mismatched_input_names_the_layer() {
        let p = net(&[3, 2], 0);
        let err = p.forward_vec(&[1.0, 2.0], None).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn flat_round_trip() {
        let mut p = net(&[3, 4, 2], 5);
        let flat = p.to_flat();
        let mut q = p.clone();
        q.set_flat(&vec![0.0; flat.len()]).unwrap();
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(p.set_flat(&[1.0]).is_err());
    }
}
