use std::collections::BTreeMap;

use rlpo_core::image::Image;
use rlpo_core::seeds::{build_action_space, Describer, TemplateDescriber};
use rlpo_core::synthworld::{build_world, render_class_image, Split, TextureKind, World, WorldConfig};
use rlpo_core::RlpoError;

fn small() -> WorldConfig {
    WorldConfig {
        train_per_class: 6,
        test_per_class: 4,
        random_pool_size: 5,
        templates_per_keyword: 8,
        seed: 11,
        ..WorldConfig::default()
    }
}

#[test]
fn worlds_are_reproducible_from_their_seed() {
    let a = build_world(&small()).unwrap();
    let b = build_world(&small()).unwrap();
    assert_eq!(a, b);
    let c = build_world(&WorldConfig { seed: 12, ..small() }).unwrap();
    assert_ne!(a.dataset.images, c.dataset.images);
    assert_eq!(a.dataset.images.len(), 3 * 10);
    assert_eq!(a.dataset.split.iter().filter(|s| **s == Split::Test).count(), 12);
    assert_eq!(a.random_pool.len(), 5);
    assert!(a.keyword_templates.values().all(|t| t.len() == 8));
}

#[test]
fn class_objects_sit_on_the_background() {
    let cfg = small();
    let layout = cfg.object.as_ref().unwrap();
    let im = render_class_image(&cfg.classes[0].texture, Some(layout), 3).unwrap();
    assert_eq!(im, render_class_image(&cfg.classes[0].texture, Some(layout), 3).unwrap());
    assert_eq!((im.height, im.width), (cfg.size, cfg.size));
    let bg_level = layout.background.background_level;
    let off_object = im.data.iter().filter(|v| (**v - bg_level).abs() < 0.2).count();
    assert!(off_object >= cfg.size * cfg.size - layout.max_side * layout.max_side);
    assert!(im.data.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn neutral_images_are_fresh_and_deterministic() {
    let w = build_world(&small()).unwrap();
    let n = w.neutral_images(9).unwrap();
    assert_eq!(n, w.neutral_images(9).unwrap());
    assert!(n.iter().all(|im| !w.random_pool.contains(im) && !w.dataset.images.contains(im)));
}

#[test]
fn saved_worlds_load_back() {
    let w = build_world(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    w.save(dir.path()).unwrap();
    let back = World::load(dir.path()).unwrap();
    assert_eq!(back.config, w.config);
    assert_eq!(back.dataset.labels, w.dataset.labels);
    assert_eq!(back.dataset.split, w.dataset.split);
    assert_eq!(back.keyword_templates.keys().collect::<Vec<_>>(), w.keyword_templates.keys().collect::<Vec<_>>());
    for (a, b) in w.dataset.images.iter().zip(&back.dataset.images) {
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| (*x as f32) as f64 == *y));
    }
    assert!(dir.path().join("png").join("0.png").exists());
}

#[test]
fn seeded_action_space_covers_every_class_concept() {
    let w = build_world(&small()).unwrap();
    let describer = TemplateDescriber::from_bank(&w.keyword_templates).unwrap();
    let images: Vec<Image> = (0..3).flat_map(|c| w.dataset.class_images(c, Split::Test)).collect();
    let report = build_action_space(&images, &describer, 0.95, 20).unwrap();
    let kws = report.action_space.keywords();
    for truth in w.config.ground_truth().values() {
        assert!(kws.contains(truth), "{truth} missing from {kws:?}");
    }
    assert!(report.failures.is_empty());
    assert_eq!(report.candidates, kws.len() + report.dropped.len());
}

#[test]
fn describer_picks_the_matching_template() {
    let w = build_world(&small()).unwrap();
    let describer = TemplateDescriber::from_bank(&w.keyword_templates).unwrap();
    let stripes = w.config.classes.iter().find(|c| c.texture.kind == TextureKind::Stripes).unwrap();
    let im = rlpo_core::synthworld::render_texture(&stripes.texture, 99).unwrap();
    let best = w
        .keyword_templates
        .keys()
        .max_by(|a, b| describer.relevance(&im, a).unwrap().total_cmp(&describer.relevance(&im, b).unwrap()))
        .unwrap();
    assert_eq!(best, "stripes");
    assert!(matches!(describer.embed("nope"), Err(RlpoError::UnknownKeyword(_))));
}

struct Flaky;

impl Describer for Flaky {
    fn answer(&self, patch: &Image, _question: &str) -> rlpo_core::Result<Vec<String>> {
        if patch.data[0] > 0.5 {
            return Err(RlpoError::invalid("describer", "offline"));
        }
        Ok(vec![" Dark ".into()])
    }
    fn embed(&self, _keyword: &str) -> rlpo_core::Result<Vec<f64>> {
        Ok(vec![1.0])
    }
    fn relevance(&self, _image: &Image, _keyword: &str) -> rlpo_core::Result<f64> {
        Ok(0.5)
    }
}

#[test]
fn describer_failures_are_reported_not_fatal() {
    let bright = Image::new(4, 4, vec![0.9; 16]).unwrap();
    let dim = Image::new(4, 4, vec![0.1; 16]).unwrap();
    let report = build_action_space(&[bright, dim], &Flaky, 0.95, 5).unwrap();
    assert_eq!(report.action_space.keywords(), vec!["dark".to_string()]);
    assert!(!report.failures.is_empty());
    assert!(report.failures.iter().all(|f| f.image == Some(0)));
    let empty: BTreeMap<String, Vec<Image>> = [("x".to_string(), vec![])].into();
    assert!(TemplateDescriber::from_bank(&empty).is_err());
}
