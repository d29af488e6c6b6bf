use hdro::ambiguity::{
    ball_supremum, binary_robust_loss, inner_maximize, project_ball, radius, w_infty_exact, AmbiguityConfig, Atom,
    DiscreteDist,
};
use hdro::datagen::{apply_shift, make_spurious, ShiftSpec, ShiftTarget, SpuriousRecipe, CORE_AXIS};
use hdro::eval::summarize;
use hdro::linalg::{distance, norm};
use hdro::model::{Architecture, ModelParams};
use hdro::solver::{objective_value, update_beta};
use hdro::tuning::{order_1d, quantile_splits};
use proptest::prelude::*;

fn vec_of(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn simplex(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, m).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn small_dataset() -> hdro::datagen::GroupedDataset {
    make_spurious(
        &SpuriousRecipe {
            n_per_group: vec![12, 7, 5, 9],
            spurious_strength: 0.8,
            noise_sd: 0.5,
            label_flip_p: 0.1,
        },
        5,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_lands_in_ball_and_is_idempotent(z in vec_of(4, -5.0, 5.0), c in vec_of(4, -5.0, 5.0), eps in 0.0f64..3.0) {
        let p = project_ball(&z, &c, eps).unwrap();
        prop_assert!(distance(&p, &c) <= eps * (1.0 + 1e-12) + 1e-15);
        let again = project_ball(&p, &c, eps).unwrap();
        prop_assert!(distance(&again, &p) <= 1e-12);
        if distance(&z, &c) <= eps {
            prop_assert_eq!(p, z);
        }
    }

    #[test]
    fn beta_stays_on_simplex(beta in simplex(4), g in 0usize..4, loss in 0.0f64..50.0, eta in 0.0001f64..5.0, c in 0.0f64..5.0, n in 1usize..5000) {
        let b = update_beta(&beta, g, loss, eta, c, n).unwrap();
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(b.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn updated_share_grows_iff_adjusted_loss_positive(beta in simplex(3), g in 0usize..3, loss in 0.0f64..3.0, c in 0.0f64..2.0) {
        prop_assume!(beta[g] < 0.999);
        let b = update_beta(&beta, g, loss, 0.5, c, 9).unwrap();
        if loss + c / 3.0 > 0.0 {
            prop_assert!(b[g] > beta[g]);
        } else {
            prop_assert_eq!(b[g], beta[g]);
        }
    }

    #[test]
    fn ascent_never_lowers_the_loss(seed in 0u64..10_000, eps in 0.01f64..2.0, steps in 1usize..6, y in 0usize..3) {
        let theta = ModelParams::init(Architecture::Mlp1, 3, 4, 3, seed);
        let z = theta.latent(&[0.3, -0.7, 1.1]).unwrap();
        let zp = inner_maximize(&theta, &z, y, eps, steps, 10.0 * eps).unwrap();
        prop_assert!(distance(&zp, &z) <= eps * (1.0 + 1e-12));
        prop_assert!(theta.loss_at_latent(&zp, y).unwrap() >= theta.loss_at_latent(&z, y).unwrap() - 1e-12);
    }

    #[test]
    fn closed_form_binary_loss_is_the_ball_supremum(seed in 0u64..10_000, eps in 0.0f64..2.0, y in 0usize..2) {
        let theta = ModelParams::init(Architecture::Linear, 3, 0, 2, seed);
        let z = [0.4, -1.2, 0.9];
        let closed = binary_robust_loss(&theta, &z, y, eps).unwrap();
        let numeric = ball_supremum(&theta, &z, y, eps).unwrap();
        prop_assert!((closed.value - numeric.value).abs() <= 1e-9);
        prop_assert!(distance(&closed.argmax, &z) <= eps * (1.0 + 1e-12));
    }

    #[test]
    fn radius_is_eps_over_root_n(eps in 0.0f64..100.0, n in 1usize..100_000) {
        prop_assert_eq!(radius(eps, n).unwrap(), eps / (n as f64).sqrt());
    }

    #[test]
    fn rotation_preserves_norms_and_other_groups(angle in -3.1f64..3.1, g in 0usize..4) {
        let ds = small_dataset();
        let out = apply_shift(&ds, &ShiftSpec::rotation(g, angle, ShiftTarget::Test)).unwrap();
        prop_assert_eq!(out.rows_shifted, ds.group_sizes()[g]);
        for i in 0..ds.len() {
            if ds.group_of()[i] == g {
                prop_assert!((norm(out.dataset.row(i)) - norm(ds.row(i))).abs() <= 1e-12);
            } else {
                prop_assert_eq!(out.dataset.row(i), ds.row(i));
            }
        }
    }

    #[test]
    fn offset_moves_the_group_mean(mag in 0.0f64..5.0, g in 0usize..4) {
        let ds = small_dataset();
        let out = apply_shift(&ds, &ShiftSpec::offset(g, mag, ShiftTarget::Test)).unwrap();
        let before = ds.group_mean(g).unwrap();
        let after = out.dataset.group_mean(g).unwrap();
        prop_assert!((after[CORE_AXIS] - before[CORE_AXIS] - mag).abs() <= 1e-12);
        prop_assert!((distance(&before, &after) - mag).abs() <= 1e-12);
    }

    #[test]
    fn w_infty_is_a_metric(pts in prop::collection::vec((vec_of(2, -3.0, 3.0), 0usize..2), 9)) {
        let make = |chunk: &[(Vec<f64>, usize)], labels: &[usize]| {
            DiscreteDist::uniform(chunk.iter().zip(labels).map(|((z, _), &l)| (z.clone(), l)).collect()).unwrap()
        };
        let labels: Vec<usize> = pts[..3].iter().map(|p| p.1).collect();
        let p = make(&pts[0..3], &labels);
        let q = make(&pts[3..6], &labels);
        let r = make(&pts[6..9], &labels);
        let pq = w_infty_exact(&p, &q).unwrap();
        prop_assert_eq!(pq, w_infty_exact(&q, &p).unwrap());
        prop_assert_eq!(w_infty_exact(&p, &p).unwrap(), 0.0);
        let pr = w_infty_exact(&p, &r).unwrap();
        let qr = w_infty_exact(&q, &r).unwrap();
        prop_assert!(pr <= pq + qr + 1e-12);
    }

    #[test]
    fn label_mismatch_is_infinitely_far(z in vec_of(2, -3.0, 3.0)) {
        let p = DiscreteDist::new(vec![Atom { z: z.clone(), label: 0, mass: 1.0 }]).unwrap();
        let q = DiscreteDist::new(vec![Atom { z, label: 1, mass: 1.0 }]).unwrap();
        prop_assert_eq!(w_infty_exact(&p, &q).unwrap(), f64::INFINITY);
    }

    #[test]
    fn larger_radius_dominates(seed in 0u64..1000, eps in 0.01f64..3.0) {
        let ds = small_dataset();
        let theta = ModelParams::init(Architecture::Linear, ds.dim(), 0, 2, seed);
        let plain = objective_value(&theta, &ds, &AmbiguityConfig::new(0.0, ds.group_sizes()).unwrap()).unwrap();
        let robust = objective_value(&theta, &ds, &AmbiguityConfig::new(eps, ds.group_sizes()).unwrap()).unwrap();
        for (r, p) in robust.per_group.iter().zip(&plain.per_group) {
            prop_assert!(r >= p);
        }
        prop_assert!(robust.worst >= plain.worst);
    }

    #[test]
    fn worst_below_average_below_best(accs in vec_of(4, 0.0, 1.0), w in simplex(4)) {
        let r = summarize(&accs.iter().map(|&a| Some(a)).collect::<Vec<_>>(), &w).unwrap();
        let best = accs.iter().copied().fold(0.0, f64::max);
        prop_assert!(r.worst_group_acc <= r.avg_acc_weighted + 1e-12);
        prop_assert!(r.avg_acc_weighted <= best + 1e-12);
    }

    #[test]
    fn ordering_is_permutation_equivariant(x in vec_of(24, -2.0, 2.0), shift in 1usize..8) {
        let n = 8;
        let d = 3;
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let mut px = Vec::new();
        for &i in &perm {
            px.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let base = order_1d(&x, n, d).unwrap();
        let moved = order_1d(&px, n, d).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            prop_assert_eq!(moved.ranks[new_i], base.ranks[old_i]);
        }
    }

    #[test]
    fn quantile_splits_partition_every_group(seed in 0u64..500) {
        let ds = make_spurious(
            &SpuriousRecipe { n_per_group: vec![5, 7, 11, 23], spurious_strength: 0.5, noise_sd: 1.0, label_flip_p: 0.0 },
            seed,
        ).unwrap();
        let ranks = order_1d(ds.features(), ds.len(), ds.dim()).unwrap().ranks;
        let [top, bottom] = quantile_splits(&ds, &ranks).unwrap();
        for s in [&top, &bottom] {
            let mut all: Vec<usize> = s.train_rows.iter().chain(&s.holdout_rows).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        }
        let middle_a: Vec<usize> = top.train_rows.iter().copied().filter(|i| !bottom.holdout_rows.contains(i)).collect();
        let middle_b: Vec<usize> = bottom.train_rows.iter().copied().filter(|i| !top.holdout_rows.contains(i)).collect();
        prop_assert_eq!(&middle_a, &middle_b);
        // Holdout quantiles sit at opposite rank extremes within each group.
        for g in 0..4 {
            let max_bottom = bottom.holdout_rows.iter().filter(|&&i| ds.group_of()[i] == g).map(|&i| ranks[i]).max().unwrap();
            let min_top = top.holdout_rows.iter().filter(|&&i| ds.group_of()[i] == g).map(|&i| ranks[i]).min().unwrap();
            prop_assert!(max_bottom < min_top);
        }
    }
}

#[test]
fn two_blobs_get_contiguous_ranks() {
    let mut x = Vec::new();
    for i in 0..10 {
        let base = if i % 2 == 0 { -5.0 } else { 5.0 };
        x.extend_from_slice(&[base + 0.01 * i as f64, 0.02 * i as f64]);
    }
    let ranks = order_1d(&x, 10, 2).unwrap().ranks;
    for (i, &r) in ranks.iter().enumerate() {
        assert_eq!(r < 5, i % 2 == 0, "row {i} rank {r}");
    }
}

#[test]
fn zero_weight_model_robust_loss_is_ln2() {
    let ds = small_dataset();
    let theta = ModelParams::linear_zeros(ds.dim(), 2);
    let obj = objective_value(&theta, &ds, &AmbiguityConfig::new(7.0, ds.group_sizes()).unwrap()).unwrap();
    assert!(obj.per_group.iter().all(|v| (v - 2f64.ln()).abs() < 1e-15));
}

#[test]
fn single_point_closed_form() {
    // margin mu = w.z + b for y = 1, ||w_1 - w_0|| = ||w||
    let mut theta = ModelParams::linear_zeros(2, 2);
    theta.output.weights = vec![0.0, 0.0, 3.0, 4.0];
    theta.output.bias = vec![0.0, 0.5];
    let z = [0.2, 0.1];
    let mu: f64 = 3.0 * 0.2 + 4.0 * 0.1 + 0.5;
    let eps = 0.3;
    let expected = (1.0 + (-mu + eps * 5.0).exp()).ln();
    let got = binary_robust_loss(&theta, &z, 1, eps).unwrap().value;
    assert!((got - expected).abs() < 1e-15);
}
