//! Acceptance suite. Runs every criterion in order, prints one line each and
//! exits nonzero if any fails. Built without the libtest harness so the lines
//! always reach the terminal.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hdro::ambiguity::radius;
use hdro::convergence::StudyConfig;
use hdro::datagen::{make_spurious, SpuriousRecipe};
use hdro::model::ModelSpec;
use hdro::solver::{Mode, SolverConfig};
use hdro::tuning::{
    default_grid, default_grid_scale, select_candidate, tune_epsilon, TuneConfig, DEFAULT_GRID_NUMERATORS,
};
use hdro_cli::checks::{
    convergence_check, degeneracy_check, gradient_check, inner_max_check, model_latent_grad, risk_equivalence_check,
    taylor_check, w_infty_check, CheckOutcome,
};
use hdro_cli::commands::{cmd_run, cmd_tune};
use hdro_cli::config::ExperimentConfig;

struct Criterion {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn within(limit_secs: u64, c: CheckOutcome) -> (bool, String) {
    let fast = c.seconds < limit_secs as f64;
    let mut detail = c.detail;
    if !fast {
        detail.push_str(&format!("; over the {limit_secs}s budget"));
    }
    (c.passed && fast, detail)
}

fn benchmark() -> (bool, String) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/shifted_benchmark.json");
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut config = match ExperimentConfig::load(&path, &[]) {
        Ok(c) => c,
        Err(e) => return (false, format!("config: {e}")),
    };
    config.output_dir = tmp.path().join("benchmark");
    let tuned = match cmd_tune(&config) {
        Ok(t) => t,
        Err(e) => return (false, format!("tune: {e}")),
    };
    let report = match cmd_run(&config) {
        Ok(r) => r,
        Err(e) => return (false, format!("run: {e}")),
    };
    let worst = |m: Mode| report.summary_for(m).map_or(f64::NAN, |s| s.worst_acc_shift.0);
    let (erm, dro, hier) = (worst(Mode::Erm), worst(Mode::GroupDro), worst(Mode::Hierarchical));
    let runs_ok = report.summary.iter().all(|s| s.runs == report.seeds.len()) && report.seeds.len() == 5;
    let passed = runs_ok
        && report.tuned
        && report.epsilon == tuned.chosen_epsilon
        && tuned.chosen_epsilon > 0.0
        && hier >= dro + 0.03
        && dro >= erm + 0.10;
    (
        passed,
        format!(
            "tuned eps {:.4}; mean shifted worst-group acc: hierarchical {hier:.4}, group DRO {dro:.4}, ERM {erm:.4} (margins {:+.4}, {:+.4})",
            tuned.chosen_epsilon,
            hier - dro,
            dro - erm
        ),
    )
}

fn schedule_and_tuning() -> (bool, String) {
    let mut notes = Vec::new();
    let mut ok = true;

    let exact = [1usize, 2, 3, 7, 20, 200, 1000, 4800]
        .iter()
        .flat_map(|&n| [0.0, 0.3, 1.0, 5.324, 96.0 / 255.0].map(move |e| (n, e)))
        .all(|(n, e)| radius(e, n).is_ok_and(|r| r.to_bits() == (e / (n as f64).sqrt()).to_bits()));
    ok &= exact;
    notes.push(format!("radius exact: {exact}"));

    let grid_ok = DEFAULT_GRID_NUMERATORS == [12.0, 24.0, 36.0, 48.0, 60.0, 72.0, 84.0, 96.0]
        && default_grid_scale()
            .iter()
            .zip(DEFAULT_GRID_NUMERATORS)
            .all(|(s, k)| *s == k / 255.0)
        && default_grid(400)
            .iter()
            .zip(DEFAULT_GRID_NUMERATORS)
            .all(|(g, k)| (g - k / 255.0 * 20.0).abs() < 1e-12);
    ok &= grid_ok;
    notes.push(format!("default grid {{12,...,96}}/255: {grid_ok}"));

    let ties = select_candidate(&[0.3, 0.1, 0.2], &[0.8, 0.8, 0.8]) == 1
        && select_candidate(&[0.1, 0.2, 0.3], &[0.5, 0.9, 0.9]) == 1
        && select_candidate(&[0.1, 0.2], &[0.7, 0.6]) == 0;
    ok &= ties;
    notes.push(format!("ties to smaller eps: {ties}"));

    let det = (|| -> hdro::Result<bool> {
        let ds = make_spurious(
            &SpuriousRecipe {
                n_per_group: vec![120, 40, 30, 120],
                spurious_strength: 0.5,
                noise_sd: 0.7,
                label_flip_p: 0.1,
            },
            5,
        )?;
        let mut solver = SolverConfig::new(Mode::Hierarchical);
        solver.iterations = 300;
        solver.batch_size = 8;
        let cfg = TuneConfig::new(ModelSpec::mlp1(8), solver);
        let grid = default_grid(ds.min_group_size());
        let a = tune_epsilon(&ds, &grid, &cfg)?;
        let b = tune_epsilon(&ds, &grid, &cfg)?;
        Ok(a == b && a.grid == grid && grid[select_candidate(&a.grid, &a.aggregate)] == a.chosen_epsilon)
    })()
    .unwrap_or(false);
    ok &= det;
    notes.push(format!("tuning deterministic: {det}"));
    (ok, notes.join("; "))
}

fn main() -> ExitCode {
    let gate = Instant::now();
    let mut results = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &dyn Fn() -> (bool, String)| {
        let start = Instant::now();
        let (passed, detail) = f();
        let elapsed = start.elapsed();
        println!(
            "criterion {id} {:<32} {} ({:.1}s) {detail}",
            name,
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        results.push(Criterion {
            id,
            name,
            passed,
            detail,
            elapsed,
        });
    };

    run(1, "gradient correctness", &|| {
        within(10, gradient_check(100, 101, model_latent_grad))
    });
    run(2, "exact inner maximization", &|| within(10, inner_max_check(50, 102)));
    run(3, "pointwise vs distributional risk", &|| {
        within(120, risk_equivalence_check(20, 103))
    });
    run(4, "taylor remainder order", &|| {
        let c = taylor_check(50, 104);
        (c.passed, c.detail)
    });
    run(5, "simplex and degeneracy", &|| {
        let c = degeneracy_check(10_000, 105);
        (c.passed, c.detail)
    });
    run(6, "convergence rate", &|| {
        let (c, _) = convergence_check(&StudyConfig::default());
        within(600, c)
    });
    run(7, "shifted benchmark ordering", &|| {
        let start = Instant::now();
        let (passed, mut detail) = benchmark();
        let fast = start.elapsed() < Duration::from_secs(900);
        if !fast {
            detail.push_str("; over the 900s budget");
        }
        (passed && fast, detail)
    });
    run(8, "radius schedule and tuning", &schedule_and_tuning);
    run(9, "w-infinity metric axioms", &|| {
        let c = w_infty_check(100, 109);
        (c.passed, c.detail)
    });

    let failed: Vec<&Criterion> = results.iter().filter(|c| !c.passed).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        gate.elapsed().as_secs_f64()
    );
    for c in &failed {
        println!(
            "  failed: criterion {} {} after {:.1}s: {}",
            c.id,
            c.name,
            c.elapsed.as_secs_f64(),
            c.detail
        );
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
