use std::sync::OnceLock;

use disentangle::autodiff::Graph;
use disentangle::evalsuite::{accuracy_at, best_threshold, cosine, verify_scores};
use disentangle::losses::{
    jsd_estimate, margin_softmax_loss, network_gradient_penalty, wasserstein_loss,
};
use disentangle::nets::{critic_spec, init_mlp, Checkpoint, Architecture, ModelParams};
use disentangle::synthdata::{
    batch_iter, build_folds, derangement, generate_split, shuffle_pairs, Dataset, PairFolds,
    NEGATIVE_MAX_GAP,
};
use disentangle::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn scored_pairs(max: usize) -> impl Strategy<Value = Vec<(f64, bool)>> {
    // Coarse similarities so ties are common.
    prop::collection::vec(((-8i32..=8).prop_map(|k| k as f64 / 8.0), any::<bool>()), 1..max)
}

fn small_set() -> &'static (Dataset, PairFolds) {
    static S: OnceLock<(Dataset, PairFolds)> = OnceLock::new();
    S.get_or_init(|| {
        let d = generate_split(21, 0, 40, 16).unwrap();
        let f = build_folds(&d, 30.0, 12, 4).unwrap();
        (d, f)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn derangement_has_no_fixed_points(n in 2usize..300, seed in any::<u64>()) {
        let p = derangement(n, seed).unwrap();
        let mut seen = vec![false; n];
        for (i, &j) in p.iter().enumerate() {
            prop_assert_ne!(i, j);
            prop_assert!(!seen[j]);
            seen[j] = true;
        }
        prop_assert_eq!(p, derangement(n, seed).unwrap());
    }

    #[test]
    fn shuffled_pairs_keep_rows(n in 2usize..40, seed in any::<u64>(), id in matrix(40, 3), age in matrix(40, 2)) {
        let rows: Vec<usize> = (0..n).collect();
        let id = id.select_rows(&rows).unwrap();
        let age = age.select_rows(&rows).unwrap();
        let (product, perm) = shuffle_pairs(&id, &age, seed).unwrap();
        let key = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let mut before: Vec<_> = (0..n).map(|i| key(age.row(i))).collect();
        let mut after: Vec<_> = (0..n).map(|i| key(&product.row(i)[3..])).collect();
        for i in 0..n {
            prop_assert_eq!(&product.row(i)[..3], id.row(i));
            prop_assert_ne!(perm[i], i);
        }
        before.sort();
        after.sort();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn batches_cover_an_epoch(size in 1usize..100, seed in any::<u64>()) {
        let (d, _) = small_set();
        let mut seen = vec![false; d.len()];
        let mut count = 0;
        for b in batch_iter(d, size, seed).unwrap() {
            let b = b.unwrap();
            prop_assert_eq!(b.indices.len(), size);
            for &i in &b.indices {
                prop_assert!(!seen[i]);
                seen[i] = true;
                count += 1;
            }
        }
        prop_assert!(d.len() - count < size);
    }

    #[test]
    fn folds_honour_their_contract(seed in any::<u64>()) {
        let (d, _) = small_set();
        let folds = build_folds(d, 30.0, 12, seed).unwrap();
        prop_assert_eq!(folds.folds.len(), 10);
        let mut owner = std::collections::HashMap::new();
        for (f, fold) in folds.folds.iter().enumerate() {
            prop_assert_eq!(fold.iter().filter(|p| p.label).count(), 12);
            prop_assert_eq!(fold.iter().filter(|p| !p.label).count(), 12);
            for p in fold {
                let (a, b) = (&d.samples[p.idx_a], &d.samples[p.idx_b]);
                let gap = (a.age - b.age).abs();
                if p.label {
                    prop_assert_eq!(a.identity, b.identity);
                    prop_assert!(gap >= 30.0);
                } else {
                    prop_assert_ne!(a.identity, b.identity);
                    prop_assert!(gap <= NEGATIVE_MAX_GAP as f64);
                }
                for id in [a.identity, b.identity] {
                    prop_assert_eq!(*owner.entry(id).or_insert(f), f);
                }
            }
        }
    }

    #[test]
    fn cosine_ignores_positive_scale(a in prop::collection::vec(-3.0f64..3.0, 4), b in prop::collection::vec(-3.0f64..3.0, 4), k in 0.01f64..100.0) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
        prop_assert!((cosine(&a, &b) - cosine(&scaled, &b)).abs() < 1e-12);
    }

    #[test]
    fn threshold_is_optimal(pairs in scored_pairs(30)) {
        let (t, acc) = best_threshold(&pairs).unwrap();
        prop_assert_eq!(acc, accuracy_at(&pairs, t));
        let mut cands: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        cands.push(f64::INFINITY);
        for c in cands {
            prop_assert!(accuracy_at(&pairs, c) <= acc);
        }
    }

    #[test]
    fn test_fold_never_moves_its_threshold(
        folds in prop::collection::vec(scored_pairs(12), 3..6),
        replacement in scored_pairs(12),
        k in 0usize..3,
    ) {
        let base = verify_scores(&folds).unwrap();
        let mut altered = folds.clone();
        altered[k] = replacement;
        let r = verify_scores(&altered).unwrap();
        prop_assert_eq!(base.thresholds[k], r.thresholds[k]);
        let mut reversed = folds.clone();
        reversed[k].reverse();
        prop_assert_eq!(base.thresholds[k], verify_scores(&reversed).unwrap().thresholds[k]);
    }

    #[test]
    fn mean_accuracy_is_fold_mean(folds in prop::collection::vec(scored_pairs(12), 2..6)) {
        let r = verify_scores(&folds).unwrap();
        let mean = r.fold_accuracy.iter().sum::<f64>() / r.fold_accuracy.len() as f64;
        prop_assert!((r.mean_accuracy - mean).abs() < 1e-15);
        prop_assert!(r.thresholds.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn wasserstein_loss_is_antisymmetric(a in matrix(5, 1), b in matrix(5, 1)) {
        let g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let ab = wasserstein_loss(va, vb).unwrap().item();
        let ba = wasserstein_loss(vb, va).unwrap().item();
        prop_assert_eq!(ab, -ba);
    }

    #[test]
    fn gradient_penalty_is_nonnegative(j in matrix(6, 3), p in matrix(6, 3), seed in any::<u64>()) {
        let spec = critic_spec(3);
        let params = init_mlp(&spec, "critic", seed).unwrap();
        let g = Graph::new();
        let bound = params.bind(&g, &[], &[disentangle::nets::Group::Critic]);
        let (pen, _) = network_gradient_penalty(&spec, "critic", &bound, &j, &p, seed).unwrap();
        prop_assert!(pen.item() >= 0.0);
    }

    #[test]
    fn margin_loss_grows_with_margin(e in matrix(4, 3), c in matrix(5, 3), m1 in 0.0f64..0.5, m2 in 0.0f64..0.5) {
        let g = Graph::new();
        let e = g.constant(e).l2_normalize().unwrap();
        let c = g.constant(c).l2_normalize().unwrap();
        let labels = [0, 1, 2, 3];
        let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        let a = margin_softmax_loss(e, c, &labels, 16.0, lo).unwrap().item();
        let b = margin_softmax_loss(e, c, &labels, 16.0, hi).unwrap().item();
        prop_assert!(a <= b + 1e-12);
    }

    #[test]
    fn jsd_estimate_stays_in_range(dj in prop::collection::vec(0.0f64..=1.0, 1..20), dp in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let v = jsd_estimate(&dj, &dp).unwrap();
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&v));
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>()) {
        let arch = Architecture::desk(6, 4, 3, 5, 4);
        let mut params = disentangle::nets::init_params(&arch, seed).unwrap();
        // Awkward values: subnormals, large exponents, negative zero.
        params.insert("g_a.b", Tensor::matrix(1, 4, vec![5e-324, -0.0, 1.0e300, 0.1 + 0.2]).unwrap());
        let ck = Checkpoint::new(arch, params.clone(), "h".into());
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        prop_assert!(back.params.bit_eq(&params));
    }
}

#[test]
fn datasets_round_trip() {
    let (d, folds) = small_set();
    let back = Dataset::from_bytes(&d.to_bytes()).unwrap();
    assert_eq!(&back, d);
    let text = folds.to_jsonl().unwrap();
    assert_eq!(&PairFolds::from_jsonl(text.as_bytes()).unwrap(), folds);
}

#[test]
fn model_params_names_are_sorted() {
    let arch = Architecture::desk(6, 4, 3, 5, 4);
    let p: ModelParams = disentangle::nets::init_params(&arch, 1).unwrap();
    let names: Vec<&str> = p.names().collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}
