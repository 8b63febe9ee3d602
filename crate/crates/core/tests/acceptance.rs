//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use approx::abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use dyensemble::baselines::{KalmanFilter, KalmanState};
use dyensemble::candidate_gen::{fit_observation, perturb_weights};
use dyensemble::data_gen::{
    candidate_set_for_simulation, simulate_series, simulation_transition, synth_cortex_with_truth,
    SimulationSpec, SynthCortexSpec,
};
use dyensemble::ensemble_engine::{
    forgetting_predict, update_model_posterior, EnsembleConfig, EnsembleFilter, ModelPosterior,
};
use dyensemble::evaluation::{mean_std, rank_channels};
use dyensemble::numeric::rng_from_seed;
use dyensemble::particle_core::{systematic_indices, BootstrapFilter, ParticleSet, ResamplePolicy};
use dyensemble::scenario::{
    run_decode, run_simulation_once, ExperimentConfig, Scenario, SimulationSettings, Variant,
    KALMAN, RESOLVED_CONFIG_FILE,
};
use dyensemble::state_space::{
    Dataset, LinearObservationModel, LinearStateTransition, MeasurementVector, StateTransition,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| abs_diff_eq!(x, y, epsilon = tol))
}

fn forgetting_arithmetic() -> Outcome {
    let p = |v: &[f64]| ModelPosterior::from_probs(v).unwrap();
    let main = forgetting_predict(&p(&[0.9, 0.1]), 0.5).unwrap().probs();
    let uniform = forgetting_predict(&p(&[0.25; 4]), 0.3).unwrap().probs();
    let degenerate = forgetting_predict(&p(&[1.0, 0.0]), 0.5).unwrap().probs();
    check(
        close(&main, &[0.75, 0.25], 1e-12)
            && close(&uniform, &[0.25; 4], 1e-12)
            && close(&degenerate, &[1.0, 0.0], 1e-12),
        format!("[0.9,0.1]^0.5 -> {main:?}; uniform -> {uniform:?}; [1,0] -> {degenerate:?}"),
    )
}

fn bayes_update() -> Outcome {
    let prior = ModelPosterior::from_probs(&[0.75, 0.25]).unwrap();
    let post = update_model_posterior(&prior, &[1.0f64.ln(), 3.0f64.ln()])
        .unwrap()
        .probs();
    check(close(&post, &[0.5, 0.5], 1e-12), format!("posterior {post:?}"))
}

fn single_model_reduction() -> Outcome {
    let spec = SimulationSpec::default();
    let data = simulate_series(&spec, &mut rng_from_seed(11)).unwrap();
    let transition: Arc<dyn StateTransition> = Arc::new(simulation_transition(&spec).unwrap());
    let model = candidate_set_for_simulation().remove(0);
    let n = 500;
    let initial = ParticleSet::from_point(&[0.0], n).unwrap();
    let cfg = EnsembleConfig::new(
        0.5,
        n,
        ResamplePolicy::default(),
        vec![model.clone()],
        transition.clone(),
    )
    .unwrap();
    let mut ens = EnsembleFilter::new(cfg, initial.clone()).unwrap();
    let mut pf =
        BootstrapFilter::new(initial, transition.as_ref(), &model, ResamplePolicy::default())
            .unwrap();
    let (mut r1, mut r2) = (rng_from_seed(5), rng_from_seed(5));
    for r in 0..200 {
        let y = data.measurement(r);
        let a = ens.step(&y, &mut r1).unwrap();
        let b = pf.step(&y, &mut r2).unwrap();
        if a.estimate[0].to_bits() != b.estimate[0].to_bits()
            || a.ess.to_bits() != b.ess.to_bits()
            || a.resampled != b.resampled
        {
            return Err(format!("diverged at step {}", r + 1));
        }
    }
    check(
        ens.state().particles == *pf.particles(),
        "200 steps bit-identical (estimates, ESS, resampling, final particles)".into(),
    )
}

fn kalman_equivalence() -> Outcome {
    let (a, q, r): (f64, f64, f64) = (0.9, 1.0, 1.0);
    let steps = 200;
    let n = 10_000;
    let mut rng = rng_from_seed(2024);
    let mut x = 0.0;
    let mut truth = Vec::new();
    let mut meas = Vec::new();
    for _ in 0..steps {
        let w: f64 = StandardNormal.sample(&mut rng);
        let v: f64 = StandardNormal.sample(&mut rng);
        x = a * x + q.sqrt() * w;
        truth.push(x);
        meas.push(x + r.sqrt() * v);
    }
    let trans = LinearStateTransition::new(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, q),
    )
    .unwrap();
    let obs = LinearObservationModel::full(
        DMatrix::from_element(1, 1, 1.0),
        DVector::from_element(1, 0.0),
        DVector::from_element(1, r),
    )
    .unwrap();
    let prior = KalmanState::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0))
        .unwrap();
    let mut kf = KalmanFilter::new(prior.clone(), trans.clone(), obs.clone()).unwrap();
    let mut prng = rng_from_seed(7);
    let initial = ParticleSet::from_gaussian(&prior.mean, &prior.cov, n, &mut prng).unwrap();
    let cfg = EnsembleConfig::new(0.5, n, ResamplePolicy::default(), vec![obs], Arc::new(trans))
        .unwrap();
    let mut pf = EnsembleFilter::new(cfg, initial).unwrap();

    let (mut se_k, mut se_p, mut worst) = (0.0, 0.0, 0.0f64);
    for k in 0..steps {
        let y = MeasurementVector::from_slice(&[meas[k]]).unwrap();
        let km = kf.step(&y).unwrap()[0];
        let sd = kf.state().cov[(0, 0)].sqrt();
        let pm = pf.step(&y, &mut prng).unwrap().estimate[0];
        worst = worst.max((pm - km).abs() / sd);
        se_k += (km - truth[k]).powi(2);
        se_p += (pm - truth[k]).powi(2);
    }
    let (rk, rp) = ((se_k / steps as f64).sqrt(), (se_p / steps as f64).sqrt());
    let rel = (rp - rk).abs() / rk;
    check(
        worst <= 3.0 && rel < 0.05,
        format!("max |pf-kf|/sd = {worst:.4}; RMSE kf {rk:.4} pf {rp:.4} (rel diff {rel:.4})"),
    )
}

fn simulation_switching() -> Outcome {
    let settings = SimulationSettings::default();
    let mut good = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let run = run_simulation_once(&settings, 0.5, seed, 0.5).unwrap();
        if run.dominance.iter().all(|f| *f >= 0.8) {
            good += 1;
        }
        lines.push(format!(
            "seed {seed}: {:?}",
            run.dominance.iter().map(|f| (f * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ));
    }
    check(good >= 4, format!("{good}/5 seeds >= 0.8 in every segment; {}", lines.join(", ")))
}

fn smoothness_monotonic() -> Outcome {
    let settings = SimulationSettings::default();
    let changes: Vec<f64> = [0.1, 0.5, 0.9]
        .iter()
        .map(|a| run_simulation_once(&settings, 0.5, 0, *a).unwrap().mean_l1_change)
        .collect();
    check(
        changes[0] > changes[1] && changes[1] > changes[2],
        format!("mean L1 change for alpha 0.1/0.5/0.9: {changes:?}"),
    )
}

fn noise_robustness() -> Outcome {
    let mut cfg = ExperimentConfig::new(Scenario::SynthDecode);
    cfg.seeds = vec![0, 1, 2];
    cfg.corruption.noisy_counts = vec![4];
    cfg.variants = vec![Variant {
        name: "DyEnsemble-5".into(),
        dropped: 5,
        perturbation: 0.1,
    }];
    cfg.validate().unwrap();
    let report = run_decode(&cfg).unwrap();
    let drop = |name: &str| {
        let m = report.method(name).unwrap();
        let clean = mean_std(m.cc(0).unwrap()).0;
        let noisy = mean_std(m.cc(4).unwrap()).0;
        (clean, noisy, clean - noisy)
    };
    let (kc, kn, kd) = drop(KALMAN);
    let (dc, dn, dd) = drop("DyEnsemble-5");
    let advantage = kd - dd;
    check(
        dd < kd && advantage > 0.0,
        format!(
            "Kalman {kc:.3}->{kn:.3} (drop {kd:.3}); DyEnsemble-5 {dc:.3}->{dn:.3} (drop {dd:.3}); advantage {advantage:.3}"
        ),
    )
}

fn perturbation_statistics() -> Outcome {
    let h = DMatrix::from_fn(5, 3, |r, c| (r as f64 - 2.0) * 0.7 + c as f64);
    let model = LinearObservationModel::full(
        h.clone(),
        DVector::from_fn(5, |r, _| r as f64),
        DVector::from_element(5, 1.0),
    )
    .unwrap();
    let p = 0.1;
    let mut rng = rng_from_seed(8);
    let mut deltas = Vec::new();
    while deltas.len() < 10_000 {
        let m = perturb_weights(&model, p, &mut rng).unwrap();
        deltas.extend((m.h() - model.h()).iter().copied());
        deltas.extend((m.b() - model.b()).iter().copied());
    }
    deltas.truncate(10_000);
    let (mean, sd) = mean_std(&deltas);
    let se = sd / (deltas.len() as f64).sqrt();
    check(
        mean.abs() < 3.0 * se && (sd / p - 1.0).abs() < 0.05,
        format!("mean {mean:.2e} (3 SE = {:.2e}); std {sd:.5} vs p = {p}", 3.0 * se),
    )
}

/// All compositions of `total` into `parts` non-negative integers.
fn compositions(total: usize, parts: usize, f: &mut dyn FnMut(&[usize])) {
    fn go(rem: usize, parts: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if parts == 1 {
            cur.push(rem);
            f(cur);
            cur.pop();
            return;
        }
        for v in 0..=rem {
            cur.push(v);
            go(rem - v, parts - 1, cur, f);
            cur.pop();
        }
    }
    go(total, parts, &mut Vec::new(), f);
}

fn resampling_guarantee() -> Outcome {
    let mut cases = 0usize;
    let mut worst = 0.0f64;
    for n in 1..=16usize {
        // Grid resolution chosen so each N enumerates a few thousand vectors.
        let grid = match n {
            1..=3 => 30,
            4..=5 => 16,
            6..=8 => 8,
            9..=12 => 5,
            _ => 4,
        };
        let offsets: Vec<f64> = (0..7).map(|i| i as f64 / (7.0 * n as f64)).collect();
        compositions(grid, n, &mut |c| {
            let w: Vec<f64> = c.iter().map(|v| *v as f64 / grid as f64).collect();
            for &u in &offsets {
                let idx = systematic_indices(&w, u);
                let mut counts = vec![0usize; n];
                for i in idx {
                    counts[i] += 1;
                }
                for i in 0..n {
                    worst = worst.max((counts[i] as f64 - n as f64 * w[i]).abs());
                }
                cases += 1;
            }
        });
    }
    check(
        worst < 1.0 + 1e-9,
        format!("{cases} (weights, offset) cases for N = 1..=16; max |count - N w| = {worst:.6}"),
    )
}

fn least_squares_recovery() -> Outcome {
    let mut rng = rng_from_seed(31);
    let (t, d, c) = (80, 3, 6);
    let h = DMatrix::from_fn(c, d, |_, _| rng.random_range(-3.0..3.0));
    let b = DVector::from_fn(c, |_, _| rng.random_range(-5.0..5.0));
    let states = DMatrix::from_fn(t, d, |_, _| rng.random_range(-2.0..2.0));
    let meas = DMatrix::from_fn(t, c, |r, ch| {
        (0..d).map(|j| h[(ch, j)] * states[(r, j)]).sum::<f64>() + b[ch]
    });
    let data = Dataset::with_defaults(states, meas, 100.0).unwrap();
    let all: Vec<usize> = (0..c).collect();
    let fit = fit_observation(&data, &all, 0.0).unwrap();
    let err_h = (fit.h() - &h).abs().max();
    let err_b = (fit.b() - &b).abs().max();
    check(
        err_h < 1e-8 && err_b < 1e-8,
        format!("max |dH| = {err_h:.2e}, max |db| = {err_b:.2e}"),
    )
}

fn mi_ranking() -> Outcome {
    let mut good = 0;
    let mut misses = Vec::new();
    for seed in 0..20u64 {
        let truth = synth_cortex_with_truth(&SynthCortexSpec {
            informative_fraction: 0.5,
            seed,
            ..Default::default()
        })
        .unwrap();
        let ds = &truth.dataset;
        let ranking = rank_channels(ds, 0, ds.channel_count()).unwrap();
        let mut top: Vec<usize> = ranking[..truth.informative.len()].to_vec();
        top.sort_unstable();
        if top == truth.informative {
            good += 1;
        } else {
            misses.push(seed);
        }
    }
    check(
        good >= 19,
        format!("{good}/20 seeds rank every informative channel first; misses {misses:?}"),
    )
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_dyensemble");
    let tmp = tempfile::tempdir().unwrap();
    let configs = [
        ("simulate", r#"{"scenario":"simulation","seeds":[3,4],"simulation":{"alphas":[0.1,0.5]}}"#),
        (
            "decode",
            r#"{"scenario":"synth-decode","seeds":[1,2],"decoder":{"n_particles":100,"model_count":5},
                "cortex":{"duration_bins":1600}}"#,
        ),
        (
            "sweep",
            r#"{"scenario":"sweep","seeds":[5],"decoder":{"n_particles":100,"model_count":5},
                "cortex":{"duration_bins":1600},
                "sweeps":[{"parameter":"model_count","values":[2,4]},{"parameter":"alpha","values":[0.2,0.8]}]}"#,
        ),
    ];
    let mut report = Vec::new();
    for (cmd, cfg) in configs {
        let cfg_path = tmp.path().join(format!("{cmd}.json"));
        fs::write(&cfg_path, cfg).unwrap();
        let first = tmp.path().join(format!("{cmd}_a"));
        let second = tmp.path().join(format!("{cmd}_b"));
        let run = |config: &Path, out: &Path| {
            Command::new(bin)
                .args([cmd, "--config"])
                .arg(config)
                .arg("--out")
                .arg(out)
                .status()
                .unwrap()
                .success()
        };
        if !run(&cfg_path, &first) {
            return Err(format!("{cmd} failed"));
        }
        if !run(&first.join(RESOLVED_CONFIG_FILE), &second) {
            return Err(format!("{cmd} rerun failed"));
        }
        let (a, b) = (read_dir_bytes(&first), read_dir_bytes(&second));
        if a != b {
            return Err(format!("{cmd}: rerun output differs"));
        }
        report.push(format!("{cmd}: {} files identical", a.len()));
    }
    Ok(report.join("; "))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("forgetting arithmetic", forgetting_arithmetic),
        ("bayes update", bayes_update),
        ("single-model reduction", single_model_reduction),
        ("kalman equivalence", kalman_equivalence),
        ("simulation model switching", simulation_switching),
        ("smoothness monotonicity", smoothness_monotonic),
        ("noise robustness direction", noise_robustness),
        ("perturbation statistics", perturbation_statistics),
        ("resampling guarantee", resampling_guarantee),
        ("least-squares recovery", least_squares_recovery),
        ("mi ranking", mi_ranking),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
