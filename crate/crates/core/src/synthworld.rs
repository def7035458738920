//! Procedural texture world: labeled class images, a structured-noise random
//! pool and per-keyword template banks.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlpoError};
use crate::image::{self, Image, ImageBatch};
use crate::rng::{rng_for, tag_str, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Stripes,
    Dots,
    Plain,
    Noise,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub kind: TextureKind,
    /// Cycles per image width (stripes) or lattice cells per width (noise).
    #[serde(default = "one")]
    pub frequency: f64,
    /// Radians; stripes run perpendicular to this direction, gradients along it.
    #[serde(default)]
    pub angle: f64,
    #[serde(default = "one")]
    pub dot_radius: f64,
    #[serde(default = "four")]
    pub dot_spacing: f64,
    pub foreground_level: f64,
    pub background_level: f64,
    /// Per-instance randomization amplitude; 0 renders the texture exactly.
    #[serde(default)]
    pub jitter: f64,
    /// Width of a uniform per-instance orientation range centred on `angle`.
    #[serde(default)]
    pub angle_spread: f64,
    pub size: (usize, usize),
}

fn one() -> f64 {
    1.0
}
fn four() -> f64 {
    4.0
}

impl TextureSpec {
    pub fn new(kind: TextureKind, size: usize) -> Self {
        TextureSpec {
            kind,
            frequency: 1.0,
            angle: 0.0,
            dot_radius: 1.0,
            dot_spacing: 4.0,
            foreground_level: 1.0,
            background_level: 0.0,
            jitter: 0.0,
            angle_spread: 0.0,
            size: (size, size),
        }
    }

    pub fn stripes(frequency: f64, angle: f64, fg: f64, bg: f64, size: usize) -> Self {
        TextureSpec {
            frequency,
            angle,
            foreground_level: fg,
            background_level: bg,
            ..Self::new(TextureKind::Stripes, size)
        }
    }

    pub fn dots(radius: f64, spacing: f64, fg: f64, bg: f64, size: usize) -> Self {
        TextureSpec {
            dot_radius: radius,
            dot_spacing: spacing,
            foreground_level: fg,
            background_level: bg,
            ..Self::new(TextureKind::Dots, size)
        }
    }

    pub fn plain(level: f64, size: usize) -> Self {
        TextureSpec {
            foreground_level: level,
            background_level: level,
            ..Self::new(TextureKind::Plain, size)
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !unit(self.foreground_level) {
            return Err(RlpoError::invalid("foreground_level", "must lie in [0, 1]"));
        }
        if !unit(self.background_level) {
            return Err(RlpoError::invalid("background_level", "must lie in [0, 1]"));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(RlpoError::invalid("jitter", "must be finite and >= 0"));
        }
        if self.size.0 == 0 || self.size.1 == 0 {
            return Err(RlpoError::invalid("size", "both dimensions must be positive"));
        }
        if !(self.angle_spread.is_finite() && self.angle_spread >= 0.0) {
            return Err(RlpoError::invalid("angle_spread", "must be finite and >= 0"));
        }
        if !self.angle.is_finite() {
            return Err(RlpoError::invalid("angle", "must be finite"));
        }
        match self.kind {
            TextureKind::Stripes | TextureKind::Noise
                if !(self.frequency.is_finite() && self.frequency > 0.0) =>
            {
                Err(RlpoError::invalid("frequency", "must be > 0 for stripes and noise"))
            }
            TextureKind::Dots if !(self.dot_spacing.is_finite() && self.dot_spacing > 0.0) => {
                Err(RlpoError::invalid("dot_spacing", "must be > 0 for dots"))
            }
            TextureKind::Dots
                if !(self.dot_radius > 0.0 && self.dot_radius < self.dot_spacing / 2.0) =>
            {
                Err(RlpoError::invalid("dot_radius", "must be in (0, dot_spacing/2)"))
            }
            _ => Ok(()),
        }
    }
}

/// Render one instance. Pure in `(spec, seed)`; with `jitter == 0` the seed
/// only matters for the noise kind.
pub fn render_texture(spec: &TextureSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let mut rng = rng_for(seed, &[0x7e47]);
    let j = spec.jitter;
    let (h, w) = spec.size;
    let mut u = |scale: f64| -> f64 {
        if j == 0.0 {
            0.0
        } else {
            (rng.random::<f64>() * 2.0 - 1.0) * scale * j
        }
    };
    let fg = (spec.foreground_level + u(0.15)).clamp(0.0, 1.0);
    let bg = (spec.background_level + u(0.15)).clamp(0.0, 1.0);
    let mut angle = spec.angle + u(0.3);
    let phase = u(PI);
    let shift = (u(0.5), u(0.5));
    if spec.angle_spread > 0.0 {
        angle += (rng_for(seed, &[0xa7a1]).random::<f64>() - 0.5) * spec.angle_spread;
    }
    let mut img = Image::filled(h, w, bg);
    match spec.kind {
        TextureKind::Stripes => {
            let freq = spec.frequency * (1.0 + u(0.15));
            let (c, s) = (angle.cos(), angle.sin());
            for y in 0..h {
                for x in 0..w {
                    let t = (x as f64 * c + y as f64 * s) / w as f64;
                    let wave = 0.5 + 0.5 * (2.0 * PI * freq * t + phase).cos();
                    img.set(y, x, bg + (fg - bg) * wave);
                }
            }
        }
        TextureKind::Dots => {
            let sp = spec.dot_spacing;
            let r = spec.dot_radius * (1.0 + u(0.15));
            let (oy, ox) = ((shift.0 + 0.5) * sp, (shift.1 + 0.5) * sp);
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 - oy).rem_euclid(sp);
                    let dx = (x as f64 - ox).rem_euclid(sp);
                    let dy = dy.min(sp - dy);
                    let dx = dx.min(sp - dx);
                    let d = (dy * dy + dx * dx).sqrt();
                    let cover = (r + 0.5 - d).clamp(0.0, 1.0);
                    img.set(y, x, bg + (fg - bg) * cover);
                }
            }
        }
        TextureKind::Plain => {}
        TextureKind::Noise => {
            // Value noise on a lattice of `frequency` cells per width,
            // bilinearly upsampled.
            let cell = (w as f64 / spec.frequency.max(1e-9)).max(1.0);
            let gh = (h as f64 / cell) as usize + 2;
            let gw = (w as f64 / cell) as usize + 2;
            let mut nrng = rng_for(seed, &[0x401e]);
            let lattice: Vec<f64> = (0..gh * gw).map(|_| nrng.random::<f64>()).collect();
            for y in 0..h {
                for x in 0..w {
                    let fy = y as f64 / cell;
                    let fx = x as f64 / cell;
                    let (iy, ix) = (fy as usize, fx as usize);
                    let (ty, tx) = (fy - iy as f64, fx - ix as f64);
                    let at = |a: usize, b: usize| lattice[a * gw + b];
                    let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                    let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                    let v = top * (1.0 - ty) + bot * ty;
                    img.set(y, x, bg + (fg - bg) * v);
                }
            }
        }
        TextureKind::Gradient => {
            let (c, s) = (angle.cos(), angle.sin());
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let half = (cx * c.abs() + cy * s.abs()).max(1e-9);
            for y in 0..h {
                for x in 0..w {
                    let t = ((x as f64 - cx) * c + (y as f64 - cy) * s) / half;
                    img.set(y, x, bg + (fg - bg) * (0.5 + 0.5 * t));
                }
            }
        }
    }
    if j > 0.0 {
        let mut prng = rng_for(seed, &[0x9e1]);
        for v in &mut img.data {
            let n: f64 = StandardNormal.sample(&mut prng);
            *v += 0.04 * j * n;
        }
    }
    Ok(img.clamp01())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.images.len() || self.split.len() != self.images.len() {
            return Err(RlpoError::shape("dataset labels", self.images.len(), self.labels.len()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(RlpoError::invalid("labels", format!("label {l} has no class name")));
        }
        if self.images.iter().any(|im| im.min() < 0.0 || im.max() > 1.0) {
            return Err(RlpoError::invalid("images", "pixel outside [0, 1]"));
        }
        for s in [Split::Train, Split::Test] {
            if !self.split.contains(&s) {
                return Err(RlpoError::invalid("split", format!("{s:?} split is empty")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.images.first().map_or(0, Image::len)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// `(image, label)` pairs of one split.
    pub fn split_iter(&self, split: Split) -> impl Iterator<Item = (&Image, usize)> {
        self.images
            .iter()
            .zip(&self.labels)
            .zip(&self.split)
            .filter(move |(_, s)| **s == split)
            .map(|((im, l), _)| (im, *l))
    }

    pub fn class_images(&self, class: usize, split: Split) -> ImageBatch {
        self.split_iter(split)
            .filter(|(_, l)| *l == class)
            .map(|(im, _)| im.clone())
            .collect()
    }

    pub fn mean_pixel(&self) -> f64 {
        let (s, n) = self
            .split_iter(Split::Train)
            .fold((0.0, 0usize), |(s, n), (im, _)| (s + im.data.iter().sum::<f64>(), n + im.len()));
        s / n.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConfig {
    pub name: String,
    pub texture: TextureSpec,
    /// Ground-truth keyword. Only acceptance checks read this.
    pub keyword: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordConfig {
    pub keyword: String,
    pub texture: TextureSpec,
}

/// Class images as a square patch of the class texture on a background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLayout {
    pub min_side: usize,
    pub max_side: usize,
    pub background: TextureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub size: usize,
    pub classes: Vec<ClassConfig>,
    pub keywords: Vec<KeywordConfig>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub random_pool_size: usize,
    pub templates_per_keyword: usize,
    /// `None` fills the whole frame with the class texture.
    pub object: Option<ObjectLayout>,
    pub seed: u64,
}

pub const MIN_TEMPLATES: usize = 8;

impl Default for WorldConfig {
    fn default() -> Self {
        let s = 16;
        let kw = |k: &str, t: TextureSpec| KeywordConfig {
            keyword: k.into(),
            texture: t,
        };
        let noise = |freq: f64, fg: f64, bg: f64, jitter: f64| {
            let mut t = TextureSpec::new(TextureKind::Noise, s);
            t.frequency = freq;
            t.foreground_level = fg;
            t.background_level = bg;
            t.with_jitter(jitter)
        };
        WorldConfig {
            size: s,
            classes: vec![
                ClassConfig {
                    name: "zeb".into(),
                    texture: TextureSpec::stripes(4.0, 0.0, 0.9, 0.1, s).with_jitter(0.4),
                    keyword: "stripes".into(),
                },
                ClassConfig {
                    name: "jag".into(),
                    texture: TextureSpec::dots(1.5, 5.0, 0.1, 0.8, s).with_jitter(0.4),
                    keyword: "dots".into(),
                },
                ClassConfig {
                    name: "ele".into(),
                    texture: noise(2.0, 0.8, 0.2, 0.4),
                    keyword: "blotches".into(),
                },
            ],
            keywords: vec![
                kw("stripes", TextureSpec {
                    angle_spread: PI,
                    ..TextureSpec::stripes(4.0, 0.0, 0.85, 0.15, s).with_jitter(1.0)
                }),
                kw("dots", TextureSpec::dots(1.5, 5.0, 0.15, 0.8, s).with_jitter(1.0)),
                kw("plain", TextureSpec::plain(0.5, s).with_jitter(1.0)),
                kw("large dots", TextureSpec::dots(3.0, 8.0, 0.2, 0.85, s).with_jitter(0.6)),
                kw("blotches", noise(2.0, 0.9, 0.1, 0.6)),
                kw("grain", noise(16.0, 0.8, 0.2, 0.6)),
                kw("ramp", {
                    let mut t = TextureSpec::new(TextureKind::Gradient, s);
                    t.angle = PI / 2.0;
                    t.foreground_level = 0.9;
                    t.background_level = 0.1;
                    t.with_jitter(0.6)
                }),
                kw("dark", TextureSpec::plain(0.15, s).with_jitter(0.4)),
            ],
            train_per_class: 200,
            test_per_class: 50,
            random_pool_size: 200,
            templates_per_keyword: 16,
            object: Some(ObjectLayout {
                min_side: 9,
                max_side: 13,
                background: TextureSpec::plain(0.5, s).with_jitter(0.6),
            }),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(RlpoError::invalid("classes", "at least two classes are required"));
        }
        if self.keywords.is_empty() {
            return Err(RlpoError::invalid("keywords", "keyword list is empty"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(RlpoError::invalid("train_per_class", "both splits need images"));
        }
        if self.templates_per_keyword < MIN_TEMPLATES {
            return Err(RlpoError::invalid(
                "templates_per_keyword",
                format!("must be >= {MIN_TEMPLATES}"),
            ));
        }
        for c in &self.classes {
            if c.texture.size != (self.size, self.size) {
                return Err(RlpoError::invalid("size", format!("class {} size differs", c.name)));
            }
            c.texture.validate()?;
            if !self.keywords.iter().any(|k| k.keyword == c.keyword) {
                return Err(RlpoError::invalid(
                    "keywords",
                    format!("class {} keyword {:?} has no template family", c.name, c.keyword),
                ));
            }
        }
        if let Some(o) = &self.object {
            if o.min_side == 0 || o.min_side > o.max_side || o.max_side > self.size {
                return Err(RlpoError::invalid(
                    "object",
                    format!("need 1 <= min_side <= max_side <= {}", self.size),
                ));
            }
            if o.background.size != (self.size, self.size) {
                return Err(RlpoError::invalid("size", "object background size differs"));
            }
            o.background.validate()?;
        }
        for k in &self.keywords {
            if k.texture.size != (self.size, self.size) {
                return Err(RlpoError::invalid("size", format!("keyword {} size differs", k.keyword)));
            }
            k.texture.validate()?;
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> BTreeMap<String, String> {
        self.classes
            .iter()
            .map(|c| (c.name.clone(), c.keyword.clone()))
            .collect()
    }

    pub fn keyword_spec(&self, keyword: &str) -> Option<&TextureSpec> {
        self.keywords.iter().find(|k| k.keyword == keyword).map(|k| &k.texture)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub dataset: LabeledDataset,
    pub random_pool: ImageBatch,
    pub keyword_templates: BTreeMap<String, ImageBatch>,
}

const TAG_CLASS: u64 = 1;
const TAG_POOL: u64 = 2;
const TAG_TEMPLATE: u64 = 3;
const TAG_NEUTRAL: u64 = 4;
const TAG_BACKGROUND: u64 = 5;
const TAG_OBJECT: u64 = 6;

/// Render `n` jittered instances of a keyword's template family.
pub fn render_keyword_bank(spec: &TextureSpec, keyword: &str, n: usize, seed: u64, offset: u64) -> Result<ImageBatch> {
    (0..n as u64)
        .map(|i| render_texture(spec, crate::rng::derive_seed(seed, &[TAG_TEMPLATE, tag_str(keyword), offset + i])))
        .collect()
}

/// Random pool instance: noise or gradient with randomized levels/angle.
fn random_pool_image(size: usize, seed: u64) -> Result<Image> {
    let mut rng: Rng = rng_for(seed, &[TAG_POOL]);
    let gradient = rng.random::<f64>() < 0.3;
    let mut spec = TextureSpec::new(
        if gradient { TextureKind::Gradient } else { TextureKind::Noise },
        size,
    );
    let a = rng.random::<f64>();
    let b = rng.random::<f64>();
    spec.foreground_level = a.max(b);
    spec.background_level = a.min(b);
    spec.angle = rng.random::<f64>() * 2.0 * PI;
    spec.frequency = [2.0, 4.0, 8.0, 16.0][rng.random_range(0..4)];
    spec.jitter = 0.5;
    render_texture(&spec, rng.random())
}

/// One class instance: the texture alone, or a randomly sized and placed
/// square of it over the layout's background.
pub fn render_class_image(texture: &TextureSpec, layout: Option<&ObjectLayout>, seed: u64) -> Result<Image> {
    let tex = render_texture(texture, seed)?;
    let Some(o) = layout else {
        return Ok(tex);
    };
    let mut out = render_texture(&o.background, crate::rng::derive_seed(seed, &[TAG_BACKGROUND]))?;
    let mut rng: Rng = rng_for(seed, &[TAG_OBJECT]);
    let side = rng.random_range(o.min_side..=o.max_side);
    let y0 = rng.random_range(0..=out.height - side);
    let x0 = rng.random_range(0..=out.width - side);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            out.set(y, x, tex.get(y, x));
        }
    }
    Ok(out)
}

pub fn build_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let seed = config.seed;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut split = Vec::new();
    for (ci, class) in config.classes.iter().enumerate() {
        let n = config.train_per_class + config.test_per_class;
        for i in 0..n {
            let s = crate::rng::derive_seed(seed, &[TAG_CLASS, ci as u64, i as u64]);
            images.push(render_class_image(&class.texture, config.object.as_ref(), s)?);
            labels.push(ci);
            split.push(if i < config.train_per_class { Split::Train } else { Split::Test });
        }
    }
    let dataset = LabeledDataset {
        images,
        labels,
        split,
        class_names: config.classes.iter().map(|c| c.name.clone()).collect(),
    };
    let random_pool = (0..config.random_pool_size as u64)
        .map(|i| random_pool_image(config.size, crate::rng::derive_seed(seed, &[TAG_POOL, i])))
        .collect::<Result<Vec<_>>>()?;
    let mut keyword_templates = BTreeMap::new();
    for k in &config.keywords {
        keyword_templates.insert(
            k.keyword.clone(),
            render_keyword_bank(&k.texture, &k.keyword, config.templates_per_keyword, seed, 0)?,
        );
    }
    dataset.validate()?;
    Ok(World {
        config: config.clone(),
        dataset,
        random_pool,
        keyword_templates,
    })
}

impl World {
    /// Fresh images from the random-pool family, disjoint from the pool
    /// itself, plus off-orientation variants of every striped class
    /// texture. Used to keep the probe neutral off-distribution.
    pub fn neutral_images(&self, n: usize) -> Result<ImageBatch> {
        let striped: Vec<&TextureSpec> = self
            .config
            .classes
            .iter()
            .map(|c| &c.texture)
            .filter(|t| t.kind == TextureKind::Stripes)
            .collect();
        (0..n as u64)
            .map(|i| {
                let seed = crate::rng::derive_seed(self.config.seed, &[TAG_NEUTRAL, i]);
                if striped.is_empty() || i % 3 != 2 {
                    return random_pool_image(self.config.size, seed);
                }
                let mut rng: Rng = rng_for(seed, &[TAG_NEUTRAL]);
                let mut spec = striped[(i / 3) as usize % striped.len()].clone();
                let turn = rng.random_range(PI / 6.0..=PI / 2.0);
                spec.angle += if rng.random::<bool>() { turn } else { -turn };
                spec.frequency *= rng.random_range(0.6..1.6);
                render_class_image(&spec, self.config.object.as_ref(), rng.random())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WorldManifest {
    config: WorldConfig,
    ground_truth: BTreeMap<String, String>,
    labels: Vec<usize>,
    split: Vec<Split>,
    class_names: Vec<String>,
    keywords: Vec<String>,
}

impl World {
    /// Persist as `world.json` plus raw f32 tensors and PNGs under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("png"))?;
        let manifest = WorldManifest {
            config: self.config.clone(),
            ground_truth: self.config.ground_truth(),
            labels: self.dataset.labels.clone(),
            split: self.dataset.split.clone(),
            class_names: self.dataset.class_names.clone(),
            keywords: self.keyword_templates.keys().cloned().collect(),
        };
        fs::write(dir.join("world.json"), serde_json::to_string_pretty(&manifest)?)?;
        image::write_batch_raw(&self.dataset.images, &dir.join("dataset.f32"))?;
        image::write_batch_raw(&self.random_pool, &dir.join("random_pool.f32"))?;
        for (i, k) in manifest.keywords.iter().enumerate() {
            image::write_batch_raw(&self.keyword_templates[k], &dir.join(format!("templates_{i}.f32")))?;
        }
        for (i, im) in self.dataset.images.iter().enumerate() {
            im.write_png(&dir.join("png").join(format!("{i}.png")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<World> {
        let manifest: WorldManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("world.json"))?)?;
        let dataset = LabeledDataset {
            images: image::read_batch_raw(&dir.join("dataset.f32"))?,
            labels: manifest.labels,
            split: manifest.split,
            class_names: manifest.class_names,
        };
        dataset.validate()?;
        let random_pool = image::read_batch_raw(&dir.join("random_pool.f32"))?;
        let mut keyword_templates = BTreeMap::new();
        for (i, k) in manifest.keywords.iter().enumerate() {
            keyword_templates.insert(k.clone(), image::read_batch_raw(&dir.join(format!("templates_{i}.f32")))?);
        }
        Ok(World {
            config: manifest.config,
            dataset,
            random_pool,
            keyword_templates,
        })
    }
}
