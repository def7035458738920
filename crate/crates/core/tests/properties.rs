use proptest::collection::vec;
use proptest::prelude::*;
use rlpo_core::agent::{ReplayBuffer, Transition, XiRule, XiTracker};
use rlpo_core::evalx::{action_metrics, delete_hottest, ncc, stabilized_ncc, wasserstein_1d, Fill, Heatmap};
use rlpo_core::gen::{make_schedule, q_sample, time_embedding};
use rlpo_core::image::Image;
use rlpo_core::nn::{optimizer_step, Checkpoint, Dtype, Matrix, OptimizerConfig, OptimizerState};
use rlpo_core::prefopt::{decide_preference_with, split_indices, Decision};
use rlpo_core::rng::derive_seed;
use rlpo_core::seeds::{cosine, dedup_keywords, rank_and_select, texture_descriptor, KeywordCandidate, DESCRIPTOR_DIM};
use rlpo_core::tcav::{tcav_from_grads, Cav};

fn unit() -> impl Strategy<Value = f64> {
    0.0..=1.0f64
}

fn image(side: usize) -> impl Strategy<Value = Image> {
    vec(unit(), side * side).prop_map(move |d| Image::new(side, side, d).unwrap())
}

proptest! {
    #[test]
    fn tcav_is_the_positive_fraction(rows in 1usize..12, grads in vec(-1.0..1.0f64, 36), v in vec(-1.0..1.0f64, 3)) {
        let g = Matrix::from_vec(rows, 3, grads[..rows * 3].to_vec()).unwrap();
        let cav = Cav { v: v.clone(), fit_accuracy: 1.0, concept_id: "c".into(), random_set_id: "r".into() };
        let s = tcav_from_grads(&g, &cav).unwrap();
        let dots: Vec<f64> = (0..rows).map(|r| g.row(r).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        prop_assert_eq!(s.positive, dots.iter().filter(|d| **d > 0.0).count());
        prop_assert_eq!(s.value, s.positive as f64 / rows as f64);
        let neg = Cav { v: v.iter().map(|x| -x).collect(), ..cav };
        let zeros = dots.iter().filter(|d| **d == 0.0).count();
        prop_assert_eq!(tcav_from_grads(&g, &neg).unwrap().positive, rows - s.positive - zeros);
    }

    #[test]
    fn dpo_exactly_when_below_threshold_and_unequal(ts1 in unit(), ts2 in unit(), eta in 0.01..=1.0f64, inclusive: bool) {
        let d = decide_preference_with(ts1, ts2, eta, inclusive);
        let m = ts1.max(ts2);
        let explainable = m > eta || (inclusive && m == eta);
        match d {
            Decision::ReachedExplainable => prop_assert!(explainable),
            Decision::NoSignal => prop_assert!(!explainable && ts1 == ts2),
            Decision::ApplyDpo { winner, loser } => {
                prop_assert!(!explainable && ts1 != ts2);
                prop_assert_eq!(winner + loser, 3);
                let (tw, tl) = if winner == 1 { (ts1, ts2) } else { (ts2, ts1) };
                prop_assert!(tw > tl);
            }
        }
    }

    #[test]
    fn split_is_a_balanced_partition(half in 1usize..20, seed: u64) {
        let n = 2 * half;
        let (a, b) = split_indices(n, seed).unwrap();
        prop_assert_eq!(a.len(), half);
        prop_assert_eq!(b.len(), half);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, seed).unwrap(), (a, b));
        prop_assert!(split_indices(n + 1, seed).is_err());
    }

    #[test]
    fn action_metric_bounds(counts in vec(0u64..50, 1..10)) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let m = action_metrics(&counts).unwrap();
        let n = counts.len() as f64;
        prop_assert!(m.entropy >= 0.0 && m.entropy <= n.ln() + 1e-12);
        prop_assert!(m.anc > 0.0 && m.anc <= 1.0);
        let uniform = counts.iter().all(|&c| c == counts[0]);
        prop_assert_eq!(m.anc == 1.0, uniform);
        prop_assert_eq!(m.icv.is_none(), uniform);
    }

    #[test]
    fn wasserstein_is_a_metric_on_samples(a in vec(-5.0..5.0f64, 1..20), b in vec(-5.0..5.0f64, 1..20), c in -3.0..3.0f64) {
        prop_assert!((wasserstein_1d(&a, &b) - wasserstein_1d(&b, &a)).abs() < 1e-12);
        prop_assert_eq!(wasserstein_1d(&a, &a), 0.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + c).collect();
        prop_assert!((wasserstein_1d(&a, &shifted) - c.abs()).abs() < 1e-9);
    }

    #[test]
    fn additive_xi_rises_to_one(init in unit(), horizon in 1usize..50, flags in vec(any::<bool>(), 1..80)) {
        let kw = vec!["k".to_string()];
        let mut t = XiTracker::new(&kw, init, horizon, XiRule::Additive).unwrap();
        let mut prev = init;
        for (i, f) in flags.iter().enumerate() {
            let xi = t.update("k", *f).unwrap();
            prop_assert!(xi >= prev && xi <= 1.0);
            if i + 1 >= horizon {
                prop_assert!(xi > 1.0 - 1e-9);
            }
            prev = xi;
        }
    }

    #[test]
    fn replay_buffer_keeps_the_newest(cap in 1usize..10, pushes in 0usize..30) {
        let mut b = ReplayBuffer::new(cap);
        for i in 0..pushes {
            b.push(Transition { s: vec![i as f64], a: 0, r: 0.0, s_next: vec![] });
        }
        prop_assert_eq!(b.len(), pushes.min(cap));
        let first = pushes.saturating_sub(cap);
        let kept: Vec<f64> = b.items.iter().map(|t| t.s[0]).collect();
        prop_assert_eq!(kept, (first..pushes).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn deletion_grows_with_the_fraction(im in image(4), heat in vec(unit(), 16), q1 in unit(), q2 in unit()) {
        let hm = Heatmap { height: 4, width: 4, data: heat };
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let a = delete_hottest(&im, &hm, lo, Fill::Mean(-1.0));
        let b = delete_hottest(&im, &hm, hi, Fill::Mean(-1.0));
        let da: Vec<bool> = a.data.iter().map(|v| *v == -1.0).collect();
        let db: Vec<bool> = b.data.iter().map(|v| *v == -1.0).collect();
        prop_assert_eq!(da.iter().filter(|x| **x).count(), (lo * 16.0).round() as usize);
        prop_assert!(da.iter().zip(&db).all(|(x, y)| !*x || *y));
    }

    #[test]
    fn ncc_is_bounded_and_affine_invariant(a in vec(-2.0..2.0f64, 9), b in vec(-2.0..2.0f64, 9), s in 0.1..5.0f64, o in -3.0..3.0f64, floor in 0.0..1.0f64) {
        let r = ncc(&a, &b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let a2: Vec<f64> = a.iter().map(|x| s * x + o).collect();
        prop_assert!((ncc(&a2, &b) - r).abs() < 1e-9);
        prop_assert!(stabilized_ncc(&a, &b, floor).abs() <= r.abs() + 1e-12);
    }

    #[test]
    fn png_round_trip_is_8_bit_exact(im in image(5)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        im.write_png(&p).unwrap();
        let back = Image::read_png(&p).unwrap();
        prop_assert_eq!((back.height, back.width), (5, 5));
        for (a, b) in im.data.iter().zip(&back.data) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn checkpoints_round_trip(data in vec(-1e6..1e6f64, 1..40)) {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let mut ck = Checkpoint::default();
        ck.push("t", vec![data.len()], data.clone());
        ck.write(&stem, Dtype::F64).unwrap();
        let exact = Checkpoint::read(&stem).unwrap();
        prop_assert_eq!(&exact.require("t").unwrap().data, &data);
        ck.write(&stem, Dtype::F32).unwrap();
        let back = Checkpoint::read(&stem).unwrap();
        for (a, b) in data.iter().zip(&back.require("t").unwrap().data) {
            prop_assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn noiseless_forward_process_scales_signal(x in vec(-1.0..1.0f64, 1..10), t in 1usize..=20) {
        let s = make_schedule(20, 1e-3, 0.2).unwrap();
        let y = q_sample(&x, t, &vec![0.0; x.len()], &s).unwrap();
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a * s.alpha(t) - b).abs() < 1e-15);
        }
        prop_assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn time_embedding_is_bounded(t in 0usize..1000, dim in 1usize..20) {
        let e = time_embedding(t, dim);
        prop_assert_eq!(e.len(), dim);
        prop_assert!(e.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn descriptors_are_nonnegative(im in image(6)) {
        let d = texture_descriptor(&im);
        prop_assert_eq!(d.len(), DESCRIPTOR_DIM);
        prop_assert!(d.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn dedup_leaves_no_near_twins(embs in vec(vec(-1.0..1.0f64, 3), 1..12), threshold in 0.5..0.99f64) {
        let cands: Vec<KeywordCandidate> = embs
            .iter()
            .enumerate()
            .map(|(i, e)| KeywordCandidate { text: format!("k{i}"), embedding: e.clone(), relevance: vec![0.5] })
            .collect();
        let r = dedup_keywords(&cands, threshold).unwrap();
        prop_assert_eq!(r.kept.len() + r.dropped.len(), cands.len());
        for (i, a) in r.kept.iter().enumerate() {
            for b in &r.kept[i + 1..] {
                prop_assert!(cosine(&a.embedding, &b.embedding).unwrap() <= threshold);
            }
        }
    }

    #[test]
    fn ranking_is_sorted_and_truncated(rel in vec(unit(), 1..15), k in 1usize..20) {
        let cands: Vec<KeywordCandidate> = rel
            .iter()
            .enumerate()
            .map(|(i, r)| KeywordCandidate { text: format!("k{i:02}"), embedding: vec![1.0], relevance: vec![*r] })
            .collect();
        let out = rank_and_select(&cands, k).unwrap();
        prop_assert_eq!(out.len(), k.min(cands.len()));
        for w in out.windows(2) {
            let (a, b) = (w[0].mean_relevance(), w[1].mean_relevance());
            prop_assert!(a > b || (a == b && w[0].text < w[1].text));
        }
    }

    #[test]
    fn clipped_steps_apply_at_most_the_clip(g in vec(-100.0..100.0f64, 1..10), clip in 0.1..10.0f64) {
        let mut p = vec![0.0; g.len()];
        let cfg = OptimizerConfig::sgd(1.0).with_clip(clip);
        let info = optimizer_step(&mut p, &g, &mut OptimizerState::default(), &cfg).unwrap();
        let moved = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(info.applied_norm <= clip + 1e-9);
        prop_assert!((moved - info.applied_norm).abs() < 1e-9);
    }

    #[test]
    fn seed_derivation_is_pure(seed: u64, tags in vec(any::<u64>(), 0..5)) {
        prop_assert_eq!(derive_seed(seed, &tags), derive_seed(seed, &tags));
        let mut longer = tags.clone();
        longer.push(0);
        prop_assert_ne!(derive_seed(seed, &tags), derive_seed(seed, &longer));
    }
}
