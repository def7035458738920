//! Concept activation vectors and TCAV scores.
//!
//! A CAV is the unit normal of a logistic-regression boundary separating
//! layer-`l` activations of concept images from those of random images. The
//! TCAV score of a class is the fraction of its test images whose class-logit
//! gradient at layer `l` has a strictly positive dot product with the CAV.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlpoError};
use crate::image::Image;
use crate::nn::matrix::{dot, norm};
use crate::nn::Matrix;
use crate::probe::ProbeModel;
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub v: Vec<f64>,
    pub fit_accuracy: f64,
    pub concept_id: String,
    pub random_set_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub value: f64,
    pub n_test: usize,
    pub positive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CavConfig {
    pub max_iterations: usize,
    /// Multiplier on the inverse smoothness bound of the objective.
    pub learning_rate: f64,
    /// L2 penalty on the weights (mean-loss scale).
    pub l2: f64,
    /// Weight both sides equally regardless of their sizes.
    #[serde(default)]
    pub balanced: bool,
    pub seed: u64,
}

impl Default for CavConfig {
    fn default() -> Self {
        CavConfig {
            max_iterations: 1000,
            learning_rate: 1.0,
            l2: 0.01,
            balanced: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcavConfig {
    pub cav: CavConfig,
    pub random_set_size: usize,
}

impl Default for TcavConfig {
    fn default() -> Self {
        TcavConfig {
            cav: CavConfig::default(),
            random_set_size: 50,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on the L2-regularized mean logistic loss,
/// labels 1 for `positive` rows and 0 for `negative` rows. Returns `(w, b)`.
pub fn logistic_regression(positive: &[Vec<f64>], negative: &[Vec<f64>], config: &CavConfig) -> (Vec<f64>, f64) {
    let d = positive[0].len();
    let n = (positive.len() + negative.len()) as f64;
    let (wp, wn) = if config.balanced {
        (n / (2.0 * positive.len() as f64), n / (2.0 * negative.len() as f64))
    } else {
        (1.0, 1.0)
    };
    let rows: Vec<(&Vec<f64>, f64, f64)> = positive
        .iter()
        .map(|x| (x, 1.0, wp))
        .chain(negative.iter().map(|x| (x, 0.0, wn)))
        .collect();
    let mean_sq = rows.iter().map(|(x, _, c)| c * (dot(x, x) + 1.0)).sum::<f64>() / n;
    let step = config.learning_rate / (0.25 * mean_sq + config.l2);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    for _ in 0..config.max_iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (x, y, c) in &rows {
            let r = c * (sigmoid(dot(&w, x) + b) - y);
            for (g, xi) in gw.iter_mut().zip(x.iter()) {
                *g += r * xi;
            }
            gb += r;
        }
        let mut gnorm = gb * gb / (n * n);
        for (g, wi) in gw.iter_mut().zip(&w) {
            *g = *g / n + config.l2 * wi;
            gnorm += *g * *g;
        }
        if gnorm < 1e-20 {
            break;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= step * g;
        }
        b -= step * gb / n;
    }
    (w, b)
}

pub fn fit_cav(concept_acts: &[Vec<f64>], random_acts: &[Vec<f64>], config: &CavConfig) -> Result<Cav> {
    fit_cav_named(concept_acts, random_acts, config, "concept", "random")
}

pub fn fit_cav_named(
    concept_acts: &[Vec<f64>],
    random_acts: &[Vec<f64>],
    config: &CavConfig,
    concept_id: &str,
    random_set_id: &str,
) -> Result<Cav> {
    if concept_acts.len() < 2 || random_acts.len() < 2 {
        return Err(RlpoError::invalid("concept_acts", "need at least two vectors per side"));
    }
    let d = concept_acts[0].len();
    if let Some(bad) = concept_acts.iter().chain(random_acts).find(|v| v.len() != d) {
        return Err(RlpoError::shape("CAV input", d, bad.len()));
    }
    let first = &concept_acts[0];
    if concept_acts.iter().chain(random_acts).all(|v| v == first) {
        return Err(RlpoError::Degenerate("all activation vectors are identical".into()));
    }
    let (mut w, b) = logistic_regression(concept_acts, random_acts, config);
    let wn = norm(&w);
    if !(wn > 0.0 && wn.is_finite()) {
        return Err(RlpoError::Degenerate("separating direction has zero norm".into()));
    }
    w.iter_mut().for_each(|x| *x /= wn);
    let mean_margin = |set: &[Vec<f64>]| set.iter().map(|x| dot(&w, x)).sum::<f64>() / set.len() as f64;
    if mean_margin(concept_acts) < mean_margin(random_acts) {
        w.iter_mut().for_each(|x| *x = -*x);
    }
    let correct = concept_acts.iter().filter(|x| dot(x, &w) * wn + b > 0.0).count()
        + random_acts.iter().filter(|x| dot(x, &w) * wn + b <= 0.0).count();
    Ok(Cav {
        v: w,
        fit_accuracy: correct as f64 / (concept_acts.len() + random_acts.len()) as f64,
        concept_id: concept_id.into(),
        random_set_id: random_set_id.into(),
    })
}

/// Score from precomputed per-image logit gradients (one row per image).
pub fn tcav_from_grads(grads: &Matrix, cav: &Cav) -> Result<ConceptScore> {
    if grads.rows == 0 {
        return Err(RlpoError::invalid("X_m", "test image set is empty"));
    }
    if grads.cols != cav.v.len() {
        return Err(RlpoError::shape("CAV dimension", grads.cols, cav.v.len()));
    }
    let positive = (0..grads.rows).filter(|&r| dot(grads.row(r), &cav.v) > 0.0).count();
    Ok(ConceptScore {
        value: positive as f64 / grads.rows as f64,
        n_test: grads.rows,
        positive,
    })
}

pub fn tcav_score(probe: &ProbeModel, cav: &Cav, test_images: &[Image], class: usize) -> Result<ConceptScore> {
    if test_images.is_empty() {
        return Err(RlpoError::invalid("X_m", "test image set is empty"));
    }
    if cav.v.len() != probe.activation_dim() {
        return Err(RlpoError::shape("CAV dimension", probe.activation_dim(), cav.v.len()));
    }
    tcav_from_grads(&probe.logit_grads(test_images, class)?, cav)
}

pub fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

/// Draw the shared random counterexample set for one step.
pub fn sample_random_set(pool: &[Image], size: usize, seed: u64) -> Result<Vec<Image>> {
    if pool.len() < 2 {
        return Err(RlpoError::invalid("random_pool", "need at least two random images"));
    }
    let k = size.clamp(2, pool.len());
    let idx = sample(&mut rng_for(seed, &[0x7a5d]), pool.len(), k);
    let mut idx = idx.into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

/// Class test-set state reused across steps: the per-image logit gradients.
#[derive(Debug, Clone)]
pub struct ClassTarget {
    pub class: usize,
    pub grads: Matrix,
}

impl ClassTarget {
    pub fn new(probe: &ProbeModel, test_images: &[Image], class: usize) -> Result<Self> {
        if test_images.is_empty() {
            return Err(RlpoError::invalid("X_m", "test image set is empty"));
        }
        Ok(ClassTarget {
            class,
            grads: probe.logit_grads(test_images, class)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub ts1: f64,
    pub ts2: f64,
    pub cav1: Cav,
    pub cav2: Cav,
}

/// Score one concept batch against a fixed random activation set.
pub fn score_concept(
    probe: &ProbeModel,
    target: &ClassTarget,
    concept: &[Image],
    random_acts: &[Vec<f64>],
    config: &TcavConfig,
    concept_id: &str,
) -> Result<(ConceptScore, Cav)> {
    if concept.is_empty() {
        return Err(RlpoError::invalid("group", "concept group is empty"));
    }
    let acts = matrix_rows(&probe.activations(concept)?);
    let cav = fit_cav_named(&acts, random_acts, &config.cav, concept_id, "random")?;
    Ok((tcav_from_grads(&target.grads, &cav)?, cav))
}

/// TCAV scores of two image groups against one shared random sample drawn
/// from `random_pool` with `seed`.
pub fn score_groups(
    probe: &ProbeModel,
    target: &ClassTarget,
    g1: &[Image],
    g2: &[Image],
    random_pool: &[Image],
    config: &TcavConfig,
    seed: u64,
) -> Result<GroupScores> {
    let randoms = sample_random_set(random_pool, config.random_set_size, seed)?;
    let random_acts = matrix_rows(&probe.activations(&randoms)?);
    let (s1, cav1) = score_concept(probe, target, g1, &random_acts, config, "G1")?;
    let (s2, cav2) = score_concept(probe, target, g2, &random_acts, config, "G2")?;
    Ok(GroupScores {
        ts1: s1.value,
        ts2: s2.value,
        cav1,
        cav2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cluster(center: (f64, f64), n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng_for(seed, &[]);
        (0..n)
            .map(|_| {
                vec![
                    center.0 + (r.random::<f64>() - 0.5) * 0.02,
                    center.1 + (r.random::<f64>() - 0.5) * 0.02,
                ]
            })
            .collect()
    }

    #[test]
    fn separable_axis_clusters() {
        let c = cluster((1.0, 0.0), 20, 1);
        let r = cluster((-1.0, 0.0), 20, 2);
        let cav = fit_cav(&c, &r, &CavConfig::default()).unwrap();
        assert!(cav.v[0] >= 0.99, "{:?}", cav.v);
        assert_eq!(cav.fit_accuracy, 1.0);
        assert!((norm(&cav.v) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn swapping_sets_negates_direction() {
        let c = cluster((0.5, 1.0), 10, 3);
        let r = cluster((-0.2, -0.4), 12, 4);
        let a = fit_cav(&c, &r, &CavConfig::default()).unwrap();
        let b = fit_cav(&r, &c, &CavConfig::default()).unwrap();
        assert!(dot(&a.v, &b.v) <= -0.99);
    }

    #[test]
    fn too_few_or_identical_inputs_are_errors() {
        let one = vec![vec![1.0, 2.0]];
        let two = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        assert!(fit_cav(&one, &two, &CavConfig::default()).is_err());
        assert!(matches!(fit_cav(&two, &two, &CavConfig::default()), Err(RlpoError::Degenerate(_))));
    }

    #[test]
    fn score_counts_strictly_positive_dots() {
        let grads = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mut cav = Cav {
            v: vec![1.0, 0.0],
            fit_accuracy: 1.0,
            concept_id: "c".into(),
            random_set_id: "r".into(),
        };
        assert_eq!(tcav_from_grads(&grads, &cav).unwrap().value, 1.0);
        cav.v = vec![-1.0, 0.0];
        assert_eq!(tcav_from_grads(&grads, &cav).unwrap().value, 0.0);
        cav.v = vec![0.0, 1.0];
        assert_eq!(tcav_from_grads(&grads, &cav).unwrap().value, 0.0, "zero dot is not positive");
    }

    #[test]
    fn five_fixture_gradients() {
        // Dots with v = (0.6, 0.8): 1.4, -0.2, 0.8, 0.0, 0.04 -> 3 positive.
        let grads = Matrix::from_rows(&[
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![0.0, 1.0],
            vec![4.0, -3.0],
            vec![-0.6, 0.5],
        ])
        .unwrap();
        let cav = Cav {
            v: vec![0.6, 0.8],
            fit_accuracy: 1.0,
            concept_id: "c".into(),
            random_set_id: "r".into(),
        };
        let s = tcav_from_grads(&grads, &cav).unwrap();
        assert_eq!((s.positive, s.value), (3, 0.6));
    }

    #[test]
    fn empty_test_set_is_error() {
        let cav = Cav {
            v: vec![1.0],
            fit_accuracy: 1.0,
            concept_id: "c".into(),
            random_set_id: "r".into(),
        };
        assert!(tcav_from_grads(&Matrix::zeros(0, 1), &cav).is_err());
    }
}
