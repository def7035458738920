//! Seed-keyword action space: describe class patches, deduplicate by
//! embedding, rank by relevance.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RlpoError};
use crate::image::Image;
use crate::nn::matrix::{dot, norm};

/// Question battery posed to the describer for every patch.
pub const QUESTIONS: [&str; 7] = [
    "What is the pattern in the image?",
    "What are the colors in the image?",
    "What is the background color of the image?",
    "What is in the background of the image?",
    "What is the primary texture in the image?",
    "What is the secondary texture in the image?",
    "What is the shape of the image?",
];

pub const DESCRIPTOR_DIM: usize = 16;
const ORIENT_BINS: usize = 8;
const FREQ_BINS: usize = 4;
/// Section weights so intensity does not swamp structure.
const ORIENT_WEIGHT: f64 = 4.0;
const FREQ_WEIGHT: f64 = 2.0;
const LEVEL_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordCandidate {
    pub text: String,
    pub embedding: Vec<f64>,
    /// One score per class image, in `[0, 1]`.
    pub relevance: Vec<f64>,
}

impl KeywordCandidate {
    pub fn mean_relevance(&self) -> f64 {
        if self.relevance.is_empty() {
            return 0.0;
        }
        self.relevance.iter().sum::<f64>() / self.relevance.len() as f64
    }
}

/// The question-answering role. Implementations must be deterministic.
pub trait Describer {
    fn answer(&self, patch: &Image, question: &str) -> Result<Vec<String>>;
    fn embed(&self, keyword: &str) -> Result<Vec<f64>>;
    /// Score in `[0, 1]` of how well `keyword` describes `image`.
    fn relevance(&self, image: &Image, keyword: &str) -> Result<f64>;
}

/// 16 non-negative texture features: 8 orientation bins of gradient energy
/// sorted in decreasing order,
/// 4 mean absolute differences at lags 1, 2, 4, 8, and a 4-bin intensity
/// histogram, each section scaled by a fixed weight.
pub fn texture_descriptor(image: &Image) -> Vec<f64> {
    let (h, w) = (image.height, image.width);
    let mut d = vec![0.0; DESCRIPTOR_DIM];
    let mut cells = 0.0;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let gx = image.get(y, x + 1) - image.get(y, x);
            let gy = image.get(y + 1, x) - image.get(y, x);
            let mag = (gx * gx + gy * gy).sqrt();
            // Gradient direction modulo π.
            let theta = gy.atan2(gx).rem_euclid(PI);
            let bin = ((theta / PI * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
            d[bin] += mag;
            cells += 1.0;
        }
    }
    if cells > 0.0 {
        d[..ORIENT_BINS].iter_mut().for_each(|v| *v *= ORIENT_WEIGHT / cells);
    }
    // Dominant direction first, so the bins describe anisotropy rather than
    // absolute angle.
    d[..ORIENT_BINS].sort_by(|a, b| b.total_cmp(a));
    for (k, lag) in [1usize, 2, 4, 8].into_iter().enumerate() {
        let mut s = 0.0;
        let mut n = 0.0;
        for y in 0..h {
            for x in 0..w {
                if x + lag < w {
                    s += (image.get(y, x + lag) - image.get(y, x)).abs();
                    n += 1.0;
                }
                if y + lag < h {
                    s += (image.get(y + lag, x) - image.get(y, x)).abs();
                    n += 1.0;
                }
            }
        }
        d[ORIENT_BINS + k] = if n > 0.0 { FREQ_WEIGHT * s / n } else { 0.0 };
    }
    let px = image.len().max(1) as f64;
    for v in &image.data {
        let bin = ((v.clamp(0.0, 1.0) * 4.0) as usize).min(3);
        d[ORIENT_BINS + FREQ_BINS + bin] += LEVEL_WEIGHT / px;
    }
    d
}

/// Cosine similarity; `None` if either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Which descriptor features a question looks at, and which rank of the
/// similarity ordering it reports.
fn question_view(question: &str) -> (std::ops::Range<usize>, usize) {
    let orient = 0..ORIENT_BINS;
    let freq = ORIENT_BINS..ORIENT_BINS + FREQ_BINS;
    let level = ORIENT_BINS + FREQ_BINS..DESCRIPTOR_DIM;
    match QUESTIONS.iter().position(|q| *q == question) {
        Some(1) => (level, 0),
        Some(2) => (level, 1),
        Some(3) => (freq, 0),
        Some(5) => (0..DESCRIPTOR_DIM, 1),
        Some(6) => (orient, 0),
        _ => (0..DESCRIPTOR_DIM, 0),
    }
}

/// Default describer: answers with the bank keyword whose mean template
/// descriptor best matches the patch on the features a question asks about.
/// Descriptors are centered on the mean over keywords before comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateDescriber {
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub center: Vec<f64>,
}

impl TemplateDescriber {
    pub fn from_bank(bank: &BTreeMap<String, Vec<Image>>) -> Result<Self> {
        let mut embeddings = BTreeMap::new();
        for (k, images) in bank {
            if images.is_empty() {
                return Err(RlpoError::invalid("keyword bank", format!("no templates for `{k}`")));
            }
            let mut mean = vec![0.0; DESCRIPTOR_DIM];
            for im in images {
                for (m, v) in mean.iter_mut().zip(texture_descriptor(im)) {
                    *m += v / images.len() as f64;
                }
            }
            embeddings.insert(k.clone(), mean);
        }
        let mut center = vec![0.0; DESCRIPTOR_DIM];
        for e in embeddings.values() {
            for (c, v) in center.iter_mut().zip(e) {
                *c += v / embeddings.len() as f64;
            }
        }
        for e in embeddings.values_mut() {
            e.iter_mut().zip(&center).for_each(|(v, c)| *v -= c);
        }
        Ok(TemplateDescriber { embeddings, center })
    }

    fn centered(&self, image: &Image) -> Vec<f64> {
        let mut d = texture_descriptor(image);
        d.iter_mut().zip(&self.center).for_each(|(v, c)| *v -= c);
        d
    }
}

impl Describer for TemplateDescriber {
    fn answer(&self, patch: &Image, question: &str) -> Result<Vec<String>> {
        let (view, rank) = question_view(question);
        let d = self.centered(patch);
        let mut scored: Vec<(f64, &String)> = self
            .embeddings
            .iter()
            .filter_map(|(k, e)| cosine(&d[view.clone()], &e[view.clone()]).map(|c| (c, k)))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        Ok(scored.get(rank).map(|(_, k)| vec![(*k).clone()]).unwrap_or_default())
    }

    fn embed(&self, keyword: &str) -> Result<Vec<f64>> {
        self.embeddings
            .get(keyword)
            .cloned()
            .ok_or_else(|| RlpoError::UnknownKeyword(keyword.into()))
    }

    fn relevance(&self, image: &Image, keyword: &str) -> Result<f64> {
        let e = self.embed(keyword)?;
        Ok(cosine(&self.centered(image), &e).unwrap_or(0.0).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriberFailure {
    /// Image index, or `None` for a keyword-level failure.
    pub image: Option<usize>,
    pub question: Option<String>,
    pub keyword: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DescribeReport {
    pub candidates: Vec<KeywordCandidate>,
    pub failures: Vec<DescriberFailure>,
}

/// Ask every question about the four quadrants of every image, merge answers
/// by lowercased text, and score each candidate against every image.
/// Candidates come out sorted by text.
pub fn describe_images(class_images: &[Image], describer: &dyn Describer) -> DescribeReport {
    let mut report = DescribeReport::default();
    let mut texts = std::collections::BTreeSet::new();
    for (i, image) in class_images.iter().enumerate() {
        let patch = (image.height / 2).max(1).min(image.width / 2).max(1);
        for p in image.tiles(patch) {
            for q in QUESTIONS {
                match describer.answer(&p, q) {
                    Ok(answers) => {
                        texts.extend(answers.into_iter().map(|a| a.trim().to_lowercase()).filter(|a| !a.is_empty()))
                    }
                    Err(e) => report.failures.push(DescriberFailure {
                        image: Some(i),
                        question: Some(q.to_string()),
                        keyword: None,
                        reason: e.to_string(),
                    }),
                }
            }
        }
    }
    'outer: for text in texts {
        let fail = |reason: String| DescriberFailure {
            image: None,
            question: None,
            keyword: Some(text.clone()),
            reason,
        };
        let embedding = match describer.embed(&text) {
            Ok(e) => e,
            Err(e) => {
                report.failures.push(fail(e.to_string()));
                continue;
            }
        };
        let mut relevance = Vec::with_capacity(class_images.len());
        for (i, im) in class_images.iter().enumerate() {
            match describer.relevance(im, &text) {
                Ok(r) => relevance.push(r.clamp(0.0, 1.0)),
                Err(e) => {
                    report.failures.push(DescriberFailure {
                        image: Some(i),
                        ..fail(e.to_string())
                    });
                    continue 'outer;
                }
            }
        }
        report.candidates.push(KeywordCandidate {
            text,
            embedding,
            relevance,
        });
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub kept: Vec<KeywordCandidate>,
    /// Text and reason of every dropped candidate.
    pub dropped: Vec<(String, String)>,
}

/// Greedy scan in input order: a candidate is dropped if its cosine with any
/// kept candidate exceeds `threshold`, or if its embedding has zero norm.
pub fn dedup_keywords(candidates: &[KeywordCandidate], threshold: f64) -> Result<DedupReport> {
    let mut kept: Vec<KeywordCandidate> = Vec::new();
    let mut dropped = Vec::new();
    let dim = candidates.first().map(|c| c.embedding.len());
    for c in candidates {
        if Some(c.embedding.len()) != dim {
            return Err(RlpoError::shape(
                format!("embedding of `{}`", c.text),
                dim.unwrap_or(0),
                c.embedding.len(),
            ));
        }
        if norm(&c.embedding) == 0.0 {
            dropped.push((c.text.clone(), "zero-norm embedding".to_string()));
            continue;
        }
        let twin = kept
            .iter()
            .find(|k| cosine(&k.embedding, &c.embedding).is_some_and(|s| s > threshold));
        match twin {
            Some(k) => dropped.push((c.text.clone(), format!("similar to `{}`", k.text))),
            None => kept.push(c.clone()),
        }
    }
    Ok(DedupReport { kept, dropped })
}

/// Sort by mean relevance descending, ties by text, and keep the first `k`.
pub fn rank_and_select(candidates: &[KeywordCandidate], k: usize) -> Result<Vec<KeywordCandidate>> {
    if candidates.is_empty() {
        return Err(RlpoError::invalid("candidates", "nothing to rank"));
    }
    let mut out = candidates.to_vec();
    out.sort_by(|a, b| {
        b.mean_relevance()
            .total_cmp(&a.mean_relevance())
            .then_with(|| a.text.cmp(&b.text))
    });
    out.truncate(k);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEntry {
    pub keyword: String,
    pub relevance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub entries: Vec<ActionEntry>,
}

impl ActionSpace {
    pub fn from_candidates(selected: &[KeywordCandidate]) -> Self {
        ActionSpace {
            entries: selected
                .iter()
                .map(|c| ActionEntry {
                    keyword: c.text.clone(),
                    relevance: c.mean_relevance(),
                })
                .collect(),
        }
    }

    pub fn keywords(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.keyword.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: ActionSpace = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if s.is_empty() {
            return Err(RlpoError::invalid("action space", "no keywords"));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub action_space: ActionSpace,
    pub candidates: usize,
    pub dropped: Vec<(String, String)>,
    pub failures: Vec<DescriberFailure>,
}

/// describe → dedup → rank over the union of all class images.
pub fn build_action_space(
    class_images: &[Image],
    describer: &dyn Describer,
    similarity_threshold: f64,
    k: usize,
) -> Result<SeedReport> {
    let described = describe_images(class_images, describer);
    let dedup = dedup_keywords(&described.candidates, similarity_threshold)?;
    let selected = rank_and_select(&dedup.kept, k)?;
    Ok(SeedReport {
        action_space: ActionSpace::from_candidates(&selected),
        candidates: described.candidates.len(),
        dropped: dedup.dropped,
        failures: described.failures,
    })
}
