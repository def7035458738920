//! Evaluation: correlation localizer, c-deletion, action and survey metrics,
//! concept-set statistics and concept fine-tuning.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlpoError};
use crate::image::Image;
use crate::nn::matrix::{dot, norm};
use crate::probe::{fit_classifier, ProbeModel, Target};
use crate::rng::rng_for;
use crate::synthworld::{LabeledDataset, Split};
use crate::tcav::{matrix_rows, sample_random_set, score_concept, ClassTarget, TcavConfig};

/// `H × W` map aligned to a test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    /// Side of the concept tiles matched against the test image.
    pub patch: usize,
    /// Per-pixel variance added to both windows in the correlation
    /// denominator, so that near-flat windows cannot correlate strongly.
    /// 0 gives plain normalized cross-correlation.
    pub variance_floor: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            patch: 4,
            variance_floor: 0.01,
        }
    }
}

/// Pearson correlation of two equal-length slices; 0 when either is flat.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    stabilized_ncc(a, b, 0.0)
}

/// Cross-correlation with `floor · n` added to each sum of squares.
pub fn stabilized_ncc(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 1e-12 || sbb <= 1e-12 {
        return 0.0;
    }
    let f = floor * n;
    sab / ((saa + f) * (sbb + f)).sqrt()
}

/// Heat at `(y, x)` is the best stabilized cross-correlation between the
/// test window centered there and any `patch`-sized tile of a concept image,
/// averaged over concept images, then rectified and max-normalized. Windows
/// that overlap the border are compared on their in-bounds part only.
pub fn localize(concept_images: &[Image], test_image: &Image, config: &LocalizeConfig) -> Result<Heatmap> {
    if concept_images.is_empty() {
        return Err(RlpoError::invalid("concept_images", "empty concept batch"));
    }
    let p = config.patch;
    if p == 0 || p > test_image.height || p > test_image.width {
        return Err(RlpoError::invalid(
            "patch",
            format!("{p} does not fit a {}x{} test image", test_image.height, test_image.width),
        ));
    }
    let (h, w) = (test_image.height, test_image.width);
    let tiles: Vec<Vec<Image>> = concept_images.iter().map(|c| c.tiles(p)).collect();
    if tiles.iter().any(|t| t.is_empty()) {
        return Err(RlpoError::invalid("patch", "larger than a concept image"));
    }
    let half = p as isize / 2;
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let y0 = y as isize - half;
            let x0 = x as isize - half;
            // In-bounds offsets of the window.
            let oy = (-y0).max(0) as usize..(h as isize - y0).min(p as isize) as usize;
            let ox = (-x0).max(0) as usize..(w as isize - x0).min(p as isize) as usize;
            let mut win = Vec::with_capacity(p * p);
            for dy in oy.clone() {
                for dx in ox.clone() {
                    win.push(test_image.get((y0 + dy as isize) as usize, (x0 + dx as isize) as usize));
                }
            }
            let mut total = 0.0;
            for concept in &tiles {
                let mut best = f64::NEG_INFINITY;
                for t in concept {
                    let mut tv = Vec::with_capacity(win.len());
                    for dy in oy.clone() {
                        for dx in ox.clone() {
                            tv.push(t.get(dy, dx));
                        }
                    }
                    best = best.max(stabilized_ncc(&win, &tv, config.variance_floor));
                }
                total += best;
            }
            data[y * w + x] = (total / tiles.len() as f64).max(0.0);
        }
    }
    let max = data.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        data.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap { height: h, width: w, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Mean(f64),
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeletionCurve {
    pub fractions: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub auc: f64,
}

/// Trapezoidal integral of `ys` over `xs`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

/// Replace the `round(q·HW)` hottest pixels with `fill`; ties broken by
/// pixel index.
pub fn delete_hottest(image: &Image, heatmap: &Heatmap, q: f64, fill: Fill) -> Image {
    let n = image.len();
    let k = ((q * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| heatmap.data[b].total_cmp(&heatmap.data[a]).then(a.cmp(&b)));
    let v = match fill {
        Fill::Mean(m) => m,
        Fill::Zero => 0.0,
    };
    let mut out = image.clone();
    for &i in &order[..k] {
        out.data[i] = v;
    }
    out
}

/// Mean class-`m` probability over `test_images` as the hottest pixels are
/// deleted in `steps` equal increments from 0 to 1. Concepts are compared
/// by AUC, the largest area marking the most important one.
pub fn c_deletion_curve(
    probe: &ProbeModel,
    test_images: &[Image],
    class: usize,
    heatmaps: &[Heatmap],
    steps: usize,
    fill: Fill,
) -> Result<DeletionCurve> {
    if test_images.len() != heatmaps.len() {
        return Err(RlpoError::shape("heatmaps", test_images.len(), heatmaps.len()));
    }
    if test_images.is_empty() {
        return Err(RlpoError::invalid("test_images", "empty"));
    }
    if steps < 2 {
        return Err(RlpoError::invalid("steps", "need at least 2"));
    }
    if class >= probe.class_count {
        return Err(RlpoError::invalid("class", format!("{class} out of range")));
    }
    for (im, hm) in test_images.iter().zip(heatmaps) {
        if im.height != hm.height || im.width != hm.width {
            return Err(RlpoError::shape("heatmap size", im.len(), hm.data.len()));
        }
    }
    let fractions: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let mut probabilities = Vec::with_capacity(fractions.len());
    for &q in &fractions {
        let deleted: Vec<Image> = test_images
            .iter()
            .zip(heatmaps)
            .map(|(im, hm)| delete_hottest(im, hm, q, fill))
            .collect();
        let p = probe.probabilities(&deleted)?;
        probabilities.push(p.iter().map(|row| row[class]).sum::<f64>() / p.len() as f64);
    }
    let auc = trapezoid(&fractions, &probabilities);
    Ok(DeletionCurve {
        fractions,
        probabilities,
        auc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionMetrics {
    /// Nats.
    pub entropy: f64,
    pub anc: f64,
    /// `None` when the counts have zero variance.
    pub icv: Option<f64>,
}

pub fn action_metrics(counts: &[u64]) -> Result<ActionMetrics> {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(RlpoError::invalid("action_counts", "no positive count"));
    }
    let n = counts.len() as f64;
    let entropy = -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            p * p.ln()
        })
        .sum::<f64>();
    let max = *counts.iter().max().expect("non-empty") as f64;
    let anc = total as f64 / (n * max);
    let mean = total as f64 / n;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    let icv = (var > 0.0).then(|| mean / var.sqrt());
    Ok(ActionMetrics { entropy, anc, icv })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurveyMetrics {
    pub accuracy: f64,
    pub eg: f64,
    pub odds: f64,
}

pub fn survey_metrics(correct: u64, total: u64) -> Result<SurveyMetrics> {
    if total == 0 || correct > total {
        return Err(RlpoError::invalid("survey", format!("{correct} correct of {total}")));
    }
    survey_metrics_from_accuracy(correct as f64 / total as f64)
}

pub fn survey_metrics_from_accuracy(accuracy: f64) -> Result<SurveyMetrics> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(RlpoError::invalid("accuracy", "must lie in [0, 1]"));
    }
    if accuracy == 1.0 {
        return Err(RlpoError::Undefined("odds at accuracy 1".into()));
    }
    Ok(SurveyMetrics {
        accuracy,
        eg: 1.0 - accuracy,
        odds: accuracy / (1.0 - accuracy),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SetStatsConfig {
    pub n_projections: usize,
    pub seed: u64,
    pub ridge: f64,
}

impl Default for SetStatsConfig {
    fn default() -> Self {
        SetStatsConfig {
            n_projections: 64,
            seed: 0,
            ridge: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetStatistics {
    pub mean_cosine: f64,
    pub sliced_wasserstein: f64,
    pub hotelling_t2: f64,
    pub chi2_critical: f64,
    pub same_distribution: bool,
}

/// Wasserstein-1 distance between two 1-D empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    // Walk the merged quantile breakpoints i/na and j/nb.
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// 99th percentile of χ²(k) by the Wilson–Hilferty approximation.
pub fn chi2_99(k: usize) -> f64 {
    const Z99: f64 = 2.326_347_874_040_841;
    let k = k as f64;
    let c = 2.0 / (9.0 * k);
    k * (1.0 - c + Z99 * c.sqrt()).powi(3)
}

/// Cholesky solve of `a x = b` for symmetric positive definite `a`.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

fn mean_vec(set: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; set[0].len()];
    for v in set {
        for (a, b) in m.iter_mut().zip(v) {
            *a += b / set.len() as f64;
        }
    }
    m
}

/// Two-sample Hotelling T² with pooled covariance plus `ridge·I`.
pub fn hotelling_t2(a: &[Vec<f64>], b: &[Vec<f64>], ridge: f64) -> Result<f64> {
    let (na, nb) = (a.len(), b.len());
    if na < 2 || nb < 2 {
        return Err(RlpoError::invalid("sets", "need at least 2 vectors per set"));
    }
    let d = a[0].len();
    let (ma, mb) = (mean_vec(a), mean_vec(b));
    let mut s = vec![vec![0.0; d]; d];
    for (set, m) in [(a, &ma), (b, &mb)] {
        for v in set {
            for i in 0..d {
                for j in 0..d {
                    s[i][j] += (v[i] - m[i]) * (v[j] - m[j]);
                }
            }
        }
    }
    let dof = (na + nb - 2) as f64;
    for (i, row) in s.iter_mut().enumerate() {
        row.iter_mut().for_each(|v| *v /= dof);
        row[i] += ridge;
    }
    let diff: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| x - y).collect();
    let x = cholesky_solve(&s, &diff)
        .ok_or_else(|| RlpoError::Degenerate("pooled covariance is singular even with the ridge".into()))?;
    Ok((na * nb) as f64 / (na + nb) as f64 * dot(&diff, &x))
}

pub fn set_statistics(a: &[Vec<f64>], b: &[Vec<f64>], config: &SetStatsConfig) -> Result<SetStatistics> {
    if a.len() < 2 || b.len() < 2 {
        return Err(RlpoError::invalid("sets", "need at least 2 vectors per set"));
    }
    let d = a[0].len();
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != d) {
        return Err(RlpoError::shape("set vector", d, v.len()));
    }
    let mut cos = 0.0;
    for x in a {
        for y in b {
            let (nx, ny) = (norm(x), norm(y));
            if nx > 0.0 && ny > 0.0 {
                cos += dot(x, y) / (nx * ny);
            }
        }
    }
    let mean_cosine = cos / (a.len() * b.len()) as f64;
    let mut rng = rng_for(config.seed, &[0x5e1d]);
    let mut sw = 0.0;
    for _ in 0..config.n_projections {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = norm(&dir);
        dir.iter_mut().for_each(|v| *v /= n);
        let pa: Vec<f64> = a.iter().map(|v| dot(v, &dir)).collect();
        let pb: Vec<f64> = b.iter().map(|v| dot(v, &dir)).collect();
        sw += wasserstein_1d(&pa, &pb);
    }
    let sliced_wasserstein = sw / config.n_projections.max(1) as f64;
    let hotelling = hotelling_t2(a, b, config.ridge)?;
    let chi2_critical = chi2_99(d);
    Ok(SetStatistics {
        mean_cosine,
        sliced_wasserstein,
        hotelling_t2: hotelling,
        chi2_critical,
        same_distribution: hotelling < chi2_critical,
    })
}

/// Mean pairwise cosine within one set (distinct pairs only).
pub fn intra_mean_cosine(set: &[Vec<f64>]) -> Result<f64> {
    if set.len() < 2 {
        return Err(RlpoError::invalid("set", "need at least 2 vectors"));
    }
    let mut total = 0.0;
    let mut n = 0.0;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            let (ni, nj) = (norm(&set[i]), norm(&set[j]));
            if ni > 0.0 && nj > 0.0 {
                total += dot(&set[i], &set[j]) / (ni * nj);
            }
            n += 1.0;
        }
    }
    Ok(total / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub tcav: TcavConfig,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 5,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            tcav: TcavConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptShift {
    pub concept: String,
    pub class: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub tcav: Vec<ConceptShift>,
    pub epoch_losses: Vec<f64>,
}

/// A concept to score before and after fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredConcept {
    pub name: String,
    pub images: Vec<Image>,
    pub class: usize,
}

fn concept_tcav(
    probe: &ProbeModel,
    data: &LabeledDataset,
    random_pool: &[Image],
    c: &ScoredConcept,
    config: &FineTuneConfig,
) -> Result<f64> {
    let test = data.class_images(c.class, Split::Test);
    let target = ClassTarget::new(probe, &test, c.class)?;
    let randoms = sample_random_set(random_pool, config.tcav.random_set_size, config.seed)?;
    let random_acts = matrix_rows(&probe.activations(&randoms)?);
    Ok(score_concept(probe, &target, &c.images, &random_acts, &config.tcav, &c.name)?.0.value)
}

/// Continue training on concept images labeled with their target class,
/// mixed 1:1 with original training images, and report accuracy and TCAV
/// before and after.
pub fn fine_tune_on_concepts(
    probe: &ProbeModel,
    concept_batches: &[(Vec<Image>, usize)],
    data: &LabeledDataset,
    random_pool: &[Image],
    scored: &[ScoredConcept],
    config: &FineTuneConfig,
) -> Result<(ProbeModel, FineTuneReport)> {
    for (batch, class) in concept_batches {
        if *class >= probe.class_count {
            return Err(RlpoError::invalid("class", format!("{class} out of range")));
        }
        if let Some(im) = batch.iter().find(|im| im.len() != probe.input_dim) {
            return Err(RlpoError::shape("concept image", probe.input_dim, im.len()));
        }
    }
    let mut samples: Vec<(&Image, Target)> = concept_batches
        .iter()
        .flat_map(|(batch, class)| batch.iter().map(move |im| (im, Target::Class(*class))))
        .collect();
    let train: Vec<(&Image, usize)> = data.split_iter(Split::Train).collect();
    let take = samples.len().min(train.len());
    let picked = sample(&mut rng_for(config.seed, &[0xf17e]), train.len(), take);
    samples.extend(picked.iter().map(|i| (train[i].0, Target::Class(train[i].1))));

    let before: Vec<f64> = scored
        .iter()
        .map(|c| concept_tcav(probe, data, random_pool, c, config))
        .collect::<Result<_>>()?;
    let mut tuned = probe.clone();
    let epoch_losses = if config.epochs == 0 || samples.is_empty() {
        Vec::new()
    } else {
        fit_classifier(
            &mut tuned.net,
            &samples,
            0.0,
            tuned.input_norm,
            config.epochs,
            config.learning_rate,
            config.batch_size,
            config.seed,
        )?
    };
    let after: Vec<f64> = scored
        .iter()
        .map(|c| concept_tcav(&tuned, data, random_pool, c, config))
        .collect::<Result<_>>()?;
    let report = FineTuneReport {
        accuracy_before: probe.accuracy(data, Split::Test)?,
        accuracy_after: tuned.accuracy(data, Split::Test)?,
        tcav: scored
            .iter()
            .zip(before.iter().zip(&after))
            .map(|(c, (b, a))| ConceptShift {
                concept: c.name.clone(),
                class: c.class,
                before: *b,
                after: *a,
            })
            .collect(),
        epoch_losses,
    };
    Ok((tuned, report))
}
