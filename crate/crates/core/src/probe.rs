//! The classifier under test, split at layer `l` into `f = f2 ∘ f1`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlpoError};
use crate::image::Image;
use crate::nn::checkpoint::{activations_of, Checkpoint, Dtype};
use crate::nn::mlp::{backward_layers, forward_layers};
use crate::nn::{optimizer_step, Activation, GradTarget, Matrix, MlpParams, OptimizerConfig, OptimizerState};
use crate::rng::rng_for;
use crate::synthworld::{LabeledDataset, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub net: MlpParams,
    /// `f1` is the first `layer` layers of `net`.
    pub layer: usize,
    pub class_count: usize,
    pub input_dim: usize,
    pub class_names: Vec<String>,
    /// When set, each image is standardized to `(x − mean) / √(var + c)`
    /// before the first layer.
    #[serde(default)]
    pub input_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Defaults to the penultimate hidden layer.
    #[serde(default)]
    pub layer: Option<usize>,
    /// Loss weight of the neutral (off-distribution) images passed to
    /// [`train_classifier_with_neutral`].
    #[serde(default = "default_neutral_weight")]
    pub neutral_weight: f64,
    /// Blended class/neutral images generated per training image.
    #[serde(default)]
    pub mixes_per_image: usize,
    /// Per-image standardization constant; `None` feeds raw pixels.
    #[serde(default)]
    pub input_norm: Option<f64>,
}

fn default_neutral_weight() -> f64 {
    1.0
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_dims: vec![64, 32],
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            layer: None,
            neutral_weight: 1.0,
            mixes_per_image: 2,
            input_norm: Some(0.01),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn images_to_matrix(images: &[&Image]) -> Result<Matrix> {
    let d = images.first().map_or(0, |im| im.len());
    let mut data = Vec::with_capacity(images.len() * d);
    for im in images {
        if im.len() != d {
            return Err(RlpoError::shape("image batch", d, im.len()));
        }
        data.extend_from_slice(&im.data);
    }
    Matrix::from_vec(images.len(), d, data)
}

/// Standardize every row in place: `(x − mean) / √(var + c)`.
pub fn standardize_rows(m: &mut Matrix, c: f64) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let s = 1.0 / (var + c).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
    }
}

fn prepare(images: &[&Image], input_norm: Option<f64>) -> Result<Matrix> {
    let mut x = images_to_matrix(images)?;
    if let Some(c) = input_norm {
        standardize_rows(&mut x, c);
    }
    Ok(x)
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl ProbeModel {
    pub fn new(net: MlpParams, layer: usize, class_names: Vec<String>) -> Result<Self> {
        net.validate()?;
        if layer == 0 || layer >= net.layers.len() {
            return Err(RlpoError::invalid(
                "layer",
                format!("must be in 1..{} for a {}-layer net", net.layers.len(), net.layers.len()),
            ));
        }
        if net.output_dim() != class_names.len() {
            return Err(RlpoError::shape("probe output", class_names.len(), net.output_dim()));
        }
        Ok(ProbeModel {
            input_dim: net.input_dim(),
            class_count: class_names.len(),
            net,
            layer,
            class_names,
            input_norm: None,
        })
    }

    pub fn activation_dim(&self) -> usize {
        self.net.layers[self.layer - 1].d_out()
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(RlpoError::shape("probe input", self.input_dim, x.len()));
        }
        Ok(())
    }

    fn check_class(&self, m: usize) -> Result<()> {
        if m >= self.class_count {
            return Err(RlpoError::invalid("class", format!("{m} >= class_count {}", self.class_count)));
        }
        Ok(())
    }

    /// `f1(x)` for a batch, one row per image.
    pub fn activations(&self, images: &[Image]) -> Result<Matrix> {
        images.iter().try_for_each(|im| self.check_input(im))?;
        let x = prepare(&images.iter().collect::<Vec<_>>(), self.input_norm)?;
        let mut t = forward_layers(&self.net.layers[..self.layer], 0, &x, None)?;
        Ok(t.post.pop().expect("layer >= 1"))
    }

    pub fn activation_at_l(&self, x: &Image) -> Result<Vec<f64>> {
        Ok(self.activations(std::slice::from_ref(x))?.data)
    }

    /// `f2` applied to layer-`l` activations.
    pub fn head(&self, acts: &Matrix) -> Result<Matrix> {
        let mut t = forward_layers(&self.net.layers[self.layer..], self.layer, acts, None)?;
        Ok(t.post.pop().expect("head has layers"))
    }

    pub fn logits(&self, images: &[Image]) -> Result<Matrix> {
        images.iter().try_for_each(|im| self.check_input(im))?;
        let x = prepare(&images.iter().collect::<Vec<_>>(), self.input_norm)?;
        self.net.predict(&x, None)
    }

    pub fn probabilities(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let z = self.logits(images)?;
        Ok((0..z.rows).map(|r| softmax_row(z.row(r))).collect())
    }

    pub fn predict(&self, images: &[Image]) -> Result<Vec<usize>> {
        let z = self.logits(images)?;
        Ok((0..z.rows)
            .map(|r| {
                let row = z.row(r);
                (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
            })
            .collect())
    }

    /// `∂ logit_m / ∂ f1(x)` for each image, one row per image.
    pub fn logit_grads(&self, images: &[Image], m: usize) -> Result<Matrix> {
        self.check_class(m)?;
        let acts = self.activations(images)?;
        let head = &self.net.layers[self.layer..];
        let trace = forward_layers(head, self.layer, &acts, None)?;
        let mut up = Matrix::zeros(acts.rows, self.class_count);
        for r in 0..acts.rows {
            up.row_mut(r)[m] = 1.0;
        }
        let g = backward_layers(head, self.layer, None, &trace, &up, GradTarget::InputOnly)?;
        Ok(g.input.expect("input gradient requested"))
    }

    pub fn logit_grad_wrt_activation(&self, x: &Image, m: usize) -> Result<Vec<f64>> {
        Ok(self.logit_grads(std::slice::from_ref(x), m)?.data)
    }

    pub fn accuracy(&self, data: &LabeledDataset, split: Split) -> Result<f64> {
        let (imgs, labels): (Vec<Image>, Vec<usize>) =
            data.split_iter(split).map(|(im, l)| (im.clone(), l)).unzip();
        if imgs.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(&imgs)?;
        Ok(pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<()> {
        let mut ck = Checkpoint::default();
        ck.push_mlp("probe", &self.net);
        ck.meta = serde_json::json!({
            "layer": self.layer,
            "input_norm": self.input_norm,
            "class_names": self.class_names,
            "activations": activations_of(&self.net),
        });
        ck.write(stem, Dtype::F32)
    }

    pub fn load(stem: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::read(stem)?;
        let acts: Vec<Activation> = serde_json::from_value(ck.meta["activations"].clone())?;
        let layer: usize = serde_json::from_value(ck.meta["layer"].clone())?;
        let names: Vec<String> = serde_json::from_value(ck.meta["class_names"].clone())?;
        let input_norm: Option<f64> = serde_json::from_value(ck.meta["input_norm"].clone())?;
        let mut model = ProbeModel::new(ck.mlp("probe", &acts)?, layer, names)?;
        model.input_norm = input_norm;
        Ok(model)
    }
}

/// Training target of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    /// Off-distribution image whose logits are pulled towards zero.
    Neutral,
    /// Blend of a class image (weight `lambda`) with a neutral image; the
    /// soft target is `lambda · onehot + (1 − lambda) · uniform`.
    Mix { class: usize, lambda: f64 },
}

/// Mean loss over a batch and its gradient w.r.t. logits. Class rows use
/// cross-entropy; neutral rows use `w · ‖z‖² / (2C)`.
pub(crate) fn batch_loss(logits: &Matrix, targets: &[Target], neutral_weight: f64) -> (f64, Matrix) {
    let n = logits.rows as f64;
    let c = logits.cols as f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let z = logits.row(r);
        let g = grad.row_mut(r);
        match *t {
            Target::Class(y) => {
                let p = softmax_row(z);
                loss -= p[y].max(1e-300).ln();
                for (i, pi) in p.iter().enumerate() {
                    g[i] = (pi - if i == y { 1.0 } else { 0.0 }) / n;
                }
            }
            Target::Mix { class, lambda } => {
                let p = softmax_row(z);
                for (i, pi) in p.iter().enumerate() {
                    let q = (1.0 - lambda) / c + if i == class { lambda } else { 0.0 };
                    loss -= q * pi.max(1e-300).ln();
                    g[i] = (pi - q) / n;
                }
            }
            Target::Neutral => {
                loss += neutral_weight * z.iter().map(|v| v * v).sum::<f64>() / (2.0 * c);
                for (gi, zi) in g.iter_mut().zip(z) {
                    *gi = neutral_weight * zi / (c * n);
                }
            }
        }
    }
    (loss / n, grad)
}

/// Minibatch Adam over `(image, target)` pairs; returns per-epoch mean loss.
pub(crate) fn fit_classifier(
    net: &mut MlpParams,
    samples: &[(&Image, Target)],
    neutral_weight: f64,
    input_norm: Option<f64>,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = OptimizerConfig::adam(learning_rate);
    let mut state = OptimizerState::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    let mut last_finite = None;
    for epoch in 0..epochs {
        order.shuffle(&mut rng_for(seed, &[0x5bf1, epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(batch_size.max(1)) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| samples[i].0).collect();
            let targets: Vec<Target> = chunk.iter().map(|&i| samples[i].1).collect();
            let x = prepare(&imgs, input_norm)?;
            let trace = net.forward(&x, None)?;
            let (loss, up) = batch_loss(trace.output(), &targets, neutral_weight);
            if !loss.is_finite() {
                return Err(RlpoError::Divergence {
                    epoch,
                    last_finite_loss: last_finite,
                });
            }
            total += loss * chunk.len() as f64;
            let g = net.backward(None, &trace, &up, GradTarget::AllParams)?;
            let mut flat = net.to_flat();
            optimizer_step(&mut flat, &g.layers_flat(), &mut state, &cfg).map_err(|_| {
                RlpoError::Divergence {
                    epoch,
                    last_finite_loss: last_finite,
                }
            })?;
            net.set_flat(&flat)?;
        }
        let mean = total / samples.len().max(1) as f64;
        last_finite = Some(mean);
        losses.push(mean);
    }
    Ok(losses)
}

pub fn train_classifier(data: &LabeledDataset, config: &ProbeConfig) -> Result<(ProbeModel, TrainingReport)> {
    train_classifier_with_neutral(data, &[], config)
}

/// Like [`train_classifier`], with extra images whose logits are trained
/// towards zero so that off-distribution inputs stay neutral for every class.
pub fn train_classifier_with_neutral(
    data: &LabeledDataset,
    neutral: &[Image],
    config: &ProbeConfig,
) -> Result<(ProbeModel, TrainingReport)> {
    data.validate()?;
    if config.hidden_dims.is_empty() {
        return Err(RlpoError::invalid("hidden_dims", "at least one hidden layer is required"));
    }
    let mut dims = vec![data.input_dim()];
    dims.extend(&config.hidden_dims);
    dims.push(data.class_names.len());
    let mut net = MlpParams::init(&dims, Activation::Relu, &mut rng_for(config.seed, &[0x9b0e]))?;
    let layer = config.layer.unwrap_or(config.hidden_dims.len().saturating_sub(1).max(1));
    let mut train: Vec<(&Image, Target)> = data
        .split_iter(Split::Train)
        .map(|(im, l)| (im, Target::Class(l)))
        .collect();
    for im in neutral {
        if im.len() != data.input_dim() {
            return Err(RlpoError::shape("neutral image", data.input_dim(), im.len()));
        }
        train.push((im, Target::Neutral));
    }
    let mut blends = Vec::new();
    if !neutral.is_empty() {
        let mut rng = rng_for(config.seed, &[0x3b1e]);
        for (im, l) in data.split_iter(Split::Train) {
            for _ in 0..config.mixes_per_image {
                let other = &neutral[rng.random_range(0..neutral.len())];
                let lambda: f64 = rng.random();
                let px = im.data.iter().zip(&other.data).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
                blends.push((Image::new(im.height, im.width, px)?, Target::Mix { class: l, lambda }));
            }
        }
    }
    train.extend(blends.iter().map(|(im, t)| (im, *t)));
    let epoch_losses = fit_classifier(
        &mut net,
        &train,
        config.neutral_weight,
        config.input_norm,
        config.epochs,
        config.learning_rate,
        config.batch_size,
        config.seed,
    )?;
    let mut model = ProbeModel::new(net, layer, data.class_names.clone())?;
    model.input_norm = config.input_norm;
    let report = TrainingReport {
        epoch_losses,
        train_accuracy: model.accuracy(data, Split::Train)?,
        test_accuracy: model.accuracy(data, Split::Test)?,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    fn identity_probe() -> ProbeModel {
        let net = MlpParams {
            layers: vec![
                Layer {
                    weight: Matrix::identity(4),
                    bias: vec![0.0; 4],
                    activation: Activation::Identity,
                },
                Layer {
                    weight: Matrix::from_rows(&[
                        vec![1.0, 0.0, -1.0, 2.0],
                        vec![0.5, 0.5, 0.5, 0.5],
                    ])
                    .unwrap(),
                    bias: vec![0.3, -0.3],
                    activation: Activation::Identity,
                },
            ],
        };
        ProbeModel::new(net, 1, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn identity_f1_returns_flattened_input() {
        let p = identity_probe();
        let x = Image::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(p.activation_at_l(&x).unwrap(), x.data);
    }

    #[test]
    fn linear_head_gradient_is_weight_row() {
        let p = identity_probe();
        let x = Image::new(2, 2, vec![0.9, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(p.logit_grad_wrt_activation(&x, 0).unwrap(), vec![1.0, 0.0, -1.0, 2.0]);
        assert_eq!(p.logit_grad_wrt_activation(&x, 1).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn dead_relu_layer_gives_zero_activation() {
        let mut p = identity_probe();
        p.net.layers[0].activation = Activation::Relu;
        p.net.layers[0].bias = vec![-5.0; 4];
        let x = Image::new(2, 2, vec![0.9, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(p.activation_at_l(&x).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn uniform_final_bias_shift_leaves_gradient_unchanged() {
        let p = identity_probe();
        let mut q = p.clone();
        for b in &mut q.net.layers[1].bias {
            *b += 7.5;
        }
        let x = Image::new(2, 2, vec![0.9, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(
            p.logit_grad_wrt_activation(&x, 0).unwrap(),
            q.logit_grad_wrt_activation(&x, 0).unwrap()
        );
    }

    #[test]
    fn chain_consistency_is_exact() {
        let net = MlpParams::init(&[9, 6, 5, 3], Activation::Relu, &mut rng_for(4, &[])).unwrap();
        let p = ProbeModel::new(net, 1, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let imgs: Vec<Image> = (0..4)
            .map(|k| Image::new(3, 3, (0..9).map(|i| ((i * 7 + k * 3) % 10) as f64 / 10.0).collect()).unwrap())
            .collect();
        let acts = p.activations(&imgs).unwrap();
        assert_eq!(p.head(&acts).unwrap(), p.logits(&imgs).unwrap());
    }

    #[test]
    fn invalid_class_and_shape_are_rejected() {
        let p = identity_probe();
        let x = Image::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(p.logit_grad_wrt_activation(&x, 2).is_err());
        assert!(p.activation_at_l(&Image::filled(3, 3, 0.0)).is_err());
        assert!(ProbeModel::new(p.net.clone(), 2, p.class_names.clone()).is_err());
    }

    #[test]
    fn batch_loss_gradient_matches_finite_differences() {
        let z = Matrix::from_rows(&[vec![0.2, -1.0, 0.7], vec![1.5, 0.1, -0.3], vec![-0.4, 0.9, 0.3]]).unwrap();
        let targets = [Target::Class(2), Target::Mix { class: 0, lambda: 0.3 }, Target::Neutral];
        let (_, g) = batch_loss(&z, &targets, 0.5);
        for i in 0..z.data.len() {
            let h = 1e-6;
            let mut zp = z.clone();
            zp.data[i] += h;
            let mut zm = z.clone();
            zm.data[i] -= h;
            let fd = (batch_loss(&zp, &targets, 0.5).0 - batch_loss(&zm, &targets, 0.5).0) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-8);
        }
    }
}
