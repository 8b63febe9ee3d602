use std::sync::Arc;

use dyensemble::candidate_gen::{
    fit_state_transition, generate_candidates, CandidateSet, GenerationConfig, DEFAULT_RIDGE,
};
use dyensemble::data_gen::{inject_noise, synth_cortex, SynthCortexSpec};
use dyensemble::ensemble_engine::{write_trace_file, EnsembleConfig, EnsembleFilter, TraceRecord};
use dyensemble::evaluation::correlation_coefficient;
use dyensemble::numeric::{mean_and_covariance, rng_from_seed};
use dyensemble::particle_core::{ParticleSet, ResamplePolicy};
use dyensemble::state_space::Dataset;

fn recording() -> Dataset {
    synth_cortex(&SynthCortexSpec {
        duration_bins: 1600,
        seed: 12,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn corrupted_dataset_round_trips_through_csv() {
    let data = recording();
    let mut noisy = inject_noise(&data, &[3, 7], 0, 10, &mut rng_from_seed(1)).unwrap();
    noisy.meta_mut().corruption[0].seed = Some(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noisy.csv");
    noisy.write_csv(&path).unwrap();
    assert!(Dataset::sidecar_path(&path).exists());
    let back = Dataset::read_csv(&path).unwrap();
    assert_eq!(back, noisy);
}

#[test]
fn saved_candidates_decode_like_fresh_ones() {
    let data = recording();
    let train = data.slice_rows(0..1200).unwrap();
    let test = data.slice_rows(1200..1600).unwrap();
    let gen = GenerationConfig {
        model_count: 6,
        model_size: 15,
        perturbation_factor: 0.1,
        seed: 4,
        ridge: DEFAULT_RIDGE,
    };
    let models = generate_candidates(&train, &gen).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("candidates.json");
    CandidateSet::new(gen.clone(), &models).write_json(&path).unwrap();
    let loaded = CandidateSet::read_json(&path).unwrap();
    assert_eq!(loaded.config, gen);
    assert_eq!(loaded.to_models().unwrap(), models);

    let transition = Arc::new(fit_state_transition(&train, DEFAULT_RIDGE).unwrap());
    let (mean, cov) = mean_and_covariance(train.states());
    let decode = |models| {
        let cfg =
            EnsembleConfig::new(0.1, 300, ResamplePolicy::default(), models, transition.clone())
                .unwrap();
        let mut rng = rng_from_seed(9);
        let init = ParticleSet::from_gaussian(&mean, &cov, 300, &mut rng).unwrap();
        let mut f = EnsembleFilter::new(cfg, init).unwrap();
        (0..test.len())
            .map(|r| {
                let out = f.step(&test.measurement(r), &mut rng).unwrap();
                TraceRecord::from_step(&out, Some(test.state(r).as_slice()))
            })
            .collect::<Vec<_>>()
    };
    let fresh = decode(models);
    let reloaded = decode(loaded.to_models().unwrap());
    assert_eq!(fresh, reloaded);

    let est: Vec<f64> = fresh.iter().map(|r| r.estimate[0]).collect();
    let cc = correlation_coefficient(&est, &test.state_component(0)).unwrap();
    assert!(cc > 0.5, "cc {cc}");

    let trace = dir.path().join("trace.csv");
    write_trace_file(&fresh, &trace).unwrap();
    let text = std::fs::read_to_string(&trace).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("k,estimate_0,estimate_1,estimate_2,true_0,true_1,true_2,posterior_1"));
    assert!(header.ends_with("posterior_6,ess"));
    assert_eq!(text.lines().count(), test.len() + 1);
}
