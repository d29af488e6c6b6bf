use hdro::ambiguity::{
    ball_max_brute_force_2d, inner_maximize, robust_risk_check, taylor_gap, w_infty_exact, Atom, DiscreteDist,
};
use hdro::model::{Architecture, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_linear(rng: &mut ChaCha8Rng, k: usize) -> ModelParams {
    let mut theta = ModelParams::linear_zeros(2, k);
    for w in theta.output.weights.iter_mut().chain(theta.output.bias.iter_mut()) {
        *w = rng.random_range(-2.0..2.0);
    }
    theta
}

#[test]
fn one_large_step_reaches_the_brute_force_maximizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..20 {
        let theta = random_linear(&mut rng, 2);
        let z = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let y = rng.random_range(0..2);
        let eps = rng.random_range(0.05..1.5);
        let zp = inner_maximize(&theta, &z, y, eps, 1, 1e9).unwrap();
        let got = theta.loss_at_latent(&zp, y).unwrap();
        let brute = ball_max_brute_force_2d(&theta, &z, y, eps).unwrap().value;
        assert!((got - brute).abs() <= 1e-9, "{got} vs {brute}");
    }
}

#[test]
fn pointwise_and_distributional_risks_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let theta = random_linear(&mut rng, 2);
        let atoms: Vec<(Vec<f64>, usize)> = (0..4)
            .map(|_| {
                (
                    vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    rng.random_range(0..2),
                )
            })
            .collect();
        let p = DiscreteDist::uniform(atoms).unwrap();
        let check = robust_risk_check(&p, &theta, 0.5).unwrap();
        assert!(check.discrepancy() <= 1e-3, "{check:?}");
        assert!(check.maximizer_distance <= 0.5 + 1e-12);
    }
}

#[test]
fn taylor_remainder_is_second_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut good = 0;
    for _ in 0..20 {
        let theta = ModelParams::init(Architecture::Mlp1, 3, 5, 3, rng.random());
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = theta.latent(&x).unwrap();
        let y = rng.random_range(0..3);
        let eps = [0.4, 0.2, 0.1, 0.05];
        let gaps: Vec<f64> = eps.iter().map(|&e| taylor_gap(&theta, &z, y, e).unwrap()).collect();
        let slope = (gaps[0].ln() - gaps[3].ln()) / (eps[0].ln() - eps[3].ln());
        if slope >= 1.5 {
            good += 1;
        }
    }
    assert!(good >= 18, "{good}/20");
}

#[test]
fn w_infty_small_examples() {
    let pt = |x: f64, label| Atom {
        z: vec![x],
        label,
        mass: 0.5,
    };
    let p = DiscreteDist::new(vec![pt(0.0, 0), pt(3.0, 0)]).unwrap();
    let q = DiscreteDist::new(vec![pt(2.0, 0), pt(1.0, 0)]).unwrap();
    assert_eq!(w_infty_exact(&p, &q).unwrap(), 1.0);
    let shifted = DiscreteDist::new(vec![pt(1.0, 0), pt(4.0, 0)]).unwrap();
    assert_eq!(w_infty_exact(&p, &shifted).unwrap(), 1.0);
    let nine = DiscreteDist::uniform((0..9).map(|i| (vec![i as f64], 0)).collect()).unwrap();
    assert!(w_infty_exact(&nine, &nine).is_err());
}
