//! Acceptance suite: every criterion below prints one PASS line when it
//! holds, at the stated tolerances, on shipped and seeded-random fixtures.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

mod oracle;

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use saferad_core::bounds::{Engine, EvalConfig};
use saferad_core::io::{load_dataset, load_model, Dataset};
use saferad_core::sensitivity::{input_sensitivity, GridConfig, SubspaceMode};
use saferad_core::tensor::SparsePerturbation;
use saferad_core::{apps, worst_case_queries, AnytimeReport, Model, TensorND};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_saferad")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("saferad-acceptance")
        .join(format!("{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn dataset(rows: Vec<Vec<f64>>) -> Dataset {
    Dataset {
        ids: (0..rows.len()).map(|i| i.to_string()).collect(),
        labels: None,
        inputs: rows.into_iter().map(TensorND::from_vec).collect(),
    }
}

fn evaluate(
    model: &Model,
    rows: Vec<Vec<f64>>,
    epsilon: f64,
    t_max: usize,
) -> (Vec<AnytimeReport>, saferad_core::BoundsState) {
    let engine = Engine::new(
        model,
        EvalConfig {
            epsilon,
            t_max,
            ..EvalConfig::default()
        },
    )
    .unwrap();
    engine.evaluate(&dataset(rows), |_| Ok(())).unwrap()
}

#[test]
fn criterion_01_sensitivity_matches_naive_oracle() {
    let started = Instant::now();
    for seed in 0..20u64 {
        let n = 4 + (seed as usize % 5); // up to 8 pixels
        let model = oracle::random_model(seed, n, &[6, 5], 2 + (seed as usize % 2));
        let x0 = oracle::random_input(seed ^ 0xa11ce, n);
        let base = model.forward_one(&x0).unwrap();
        for t in [1usize, 2] {
            for epsilon in [1.0, 0.5] {
                let grid = GridConfig::new(epsilon).unwrap();
                let sens = input_sensitivity(
                    &model,
                    &x0,
                    &base,
                    t,
                    &grid,
                    SubspaceMode::Exhaustive,
                    1_000_000,
                    4096,
                )
                .unwrap();
                let (expected, expected_order) = oracle::naive_sensitivity(&model, &x0, t, &grid);
                assert_eq!(sens.subspaces.len(), expected.len());
                for (got, want) in sens.subspaces.iter().zip(&expected) {
                    assert_eq!(got.subspace.dims(), want.dims.as_slice());
                    assert!(
                        (got.sensitivity - want.sensitivity).abs() <= 1e-9,
                        "seed {seed} t {t} eps {epsilon} dims {:?}: {} vs {}",
                        want.dims,
                        got.sensitivity,
                        want.sensitivity
                    );
                    assert_eq!(
                        got.best_perturbation, want.best_perturbation,
                        "seed {seed} t {t} eps {epsilon} dims {:?}",
                        want.dims
                    );
                }
                assert_eq!(
                    sens.order, expected_order,
                    "seed {seed} t {t} eps {epsilon}"
                );
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(5),
        "took {elapsed:?}, budget is 5 s"
    );
    println!("acceptance criterion 1 (sensitivity oracle equivalence): PASS ({elapsed:?})");
}

/// The ten models and inputs used by criteria 2 and 6.
fn safety_runs() -> Vec<(Model, Vec<f64>)> {
    (0..10u64)
        .map(|i| {
            let n = 4 + (i as usize % 3); // 4..=6 pixels
            let model = oracle::random_model(100 + i, n, &[5], 2);
            let x0 = oracle::random_input(7_000 + i, n);
            (model, x0)
        })
        .collect()
}

#[test]
fn criterion_02_certified_lower_bounds_are_grid_safe() {
    let started = Instant::now();
    let grid = GridConfig::new(0.5).unwrap();
    for (model, x0) in safety_runs() {
        let (_, state) = evaluate(&model, vec![x0.clone()], 0.5, 2);
        let lower = state.per_input[0].lower;
        if lower > 0 {
            assert!(
                !oracle::exists_flip_up_to(&model, &x0, &grid, lower),
                "{}: grid adversarial inside certified radius {lower}",
                model.name
            );
        }
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "took {elapsed:?}, budget is 60 s"
    );
    println!("acceptance criterion 2 (lower-bound grid safety): PASS ({elapsed:?})");
}

/// Fixture models with a dataset row each, used by criteria 3 and 6.
fn fixture_runs() -> Vec<(Model, Vec<Vec<f64>>)> {
    let f = fixtures();
    let mut runs = Vec::new();
    for (model_file, data_file) in [
        ("constant.json", "constant_data.csv"),
        ("threshold2.json", "threshold2_data.csv"),
        ("majority3.json", "majority3_data.csv"),
        ("fourpixel.json", "fourpixel_data.csv"),
    ] {
        let model = load_model(f.join(model_file)).unwrap();
        let ds = load_dataset(f.join(data_file), model.input_len()).unwrap();
        let rows = ds.inputs.iter().map(|t| t.data().to_vec()).collect();
        runs.push((model, rows));
    }
    for seed in 0..4u64 {
        let n = 5;
        let model = oracle::random_model(400 + seed, n, &[6], 3);
        let rows = vec![oracle::random_input(8_000 + seed, n)];
        runs.push((model, rows));
    }
    runs
}

#[test]
fn criterion_03_bound_sequences_are_monotone() {
    let mut violations = 0;
    for (model, rows) in fixture_runs() {
        let inputs = rows.len();
        let (reports, _) = evaluate(&model, rows, 0.5, 4);
        for input_idx in 0..inputs {
            let mut prev_lower = 0usize;
            let mut prev_upper = usize::MAX;
            for r in &reports {
                let ir = &r.inputs[input_idx];
                if ir.lower < prev_lower {
                    violations += 1;
                }
                let u = ir.upper.unwrap_or(usize::MAX);
                if u > prev_upper {
                    violations += 1;
                }
                prev_lower = ir.lower;
                prev_upper = u;
            }
        }
    }
    assert_eq!(violations, 0);
    println!("acceptance criterion 3 (monotone bound sequences): PASS");
}

/// Full-convergence runs at t_max = n, used by criteria 4 and 6.
fn convergence_runs() -> Vec<(Model, Vec<f64>)> {
    let f = fixtures();
    let mut runs = Vec::new();
    for (model_file, data_file) in [
        ("threshold2.json", "threshold2_data.csv"),
        ("majority3.json", "majority3_data.csv"),
        ("fourpixel.json", "fourpixel_data.csv"),
        ("constant.json", "constant_data.csv"),
    ] {
        let model = load_model(f.join(model_file)).unwrap();
        let ds = load_dataset(f.join(data_file), model.input_len()).unwrap();
        for t in &ds.inputs {
            runs.push((model.clone(), t.data().to_vec()));
        }
    }
    for seed in 0..4u64 {
        let model = oracle::random_model(500 + seed, 5, &[4], 2);
        runs.push((model, oracle::random_input(9_000 + seed, 5)));
    }
    runs
}

#[test]
fn criterion_04_full_convergence_matches_exhaustive_oracle() {
    let grid = GridConfig::new(0.5).unwrap();
    for (model, x0) in convergence_runs() {
        let n = model.pixel_count();
        let (_, state) = evaluate(&model, vec![x0.clone()], 0.5, n);
        let ib = &state.per_input[0];
        assert!(ib.converged, "{}: not converged at t_max = n", model.name);
        assert_eq!(ib.u_r(n), 0.0, "{}", model.name);
        let expected = oracle::min_grid_adversarial(&model, &x0, &grid)
            .map(|w| w - 1)
            .unwrap_or(n);
        assert_eq!(ib.d_m(n), Some(expected), "{}", model.name);
    }
    println!("acceptance criterion 4 (full convergence to exact radius): PASS");
}

#[test]
fn criterion_05_grid_search_slack_within_lipschitz_bound() {
    let mut violations = 0;
    for seed in 0..5u64 {
        let n = 3 + (seed as usize % 2);
        let model = oracle::random_model(300 + seed, n, &[6], 2);
        let x0 = oracle::random_input(6_000 + seed, n);
        let base = model.forward_one(&x0).unwrap();
        let k = model.lipschitz_upper_bound().unwrap();
        for epsilon in [1.0, 0.5, 0.25] {
            let grid = GridConfig::new(epsilon).unwrap();
            let sens = input_sensitivity(
                &model,
                &x0,
                &base,
                1,
                &grid,
                SubspaceMode::Exhaustive,
                1_000,
                4096,
            )
            .unwrap();
            for r in &sens.subspaces {
                let p = r.subspace.dims()[0];
                let grid_min = base.confidences[base.label] - r.sensitivity;
                let steps = (50.0 / epsilon).ceil() as usize;
                let mut dense_min = f64::INFINITY;
                let mut probe = x0.clone();
                for i in 0..=steps {
                    probe[p] = (i as f64 * epsilon / 50.0).min(1.0);
                    dense_min =
                        dense_min.min(model.forward_one(&probe).unwrap().confidences[base.label]);
                }
                probe[p] = x0[p];
                dense_min =
                    dense_min.min(model.forward_one(&probe).unwrap().confidences[base.label]);
                if (dense_min - grid_min).abs() > k * epsilon / 2.0 {
                    violations += 1;
                }
            }
        }
    }
    assert_eq!(violations, 0);
    println!("acceptance criterion 5 (grid-search slack within K*eps/2): PASS");
}

#[test]
fn criterion_06_stored_adversarials_are_one_minimal() {
    // every adversarial produced by the criterion 2-4 configurations
    let mut produced = 0;
    let mut check = |model: &Model, x0: &[f64], epsilon: f64, t_max: usize| {
        let (_, state) = evaluate(model, vec![x0.to_vec()], epsilon, t_max);
        let Some(adv) = state.per_input[0].best_adversarial.clone() else {
            return;
        };
        produced += 1;
        let channels = model.channels();
        let base = model.forward_one(x0).unwrap().label;
        let flipped = |p: &SparsePerturbation| {
            model.forward_one(&p.applied(x0, channels)).unwrap().label != base
        };
        assert!(
            flipped(&adv),
            "{}: stored adversarial does not flip",
            model.name
        );
        for pos in adv.positions() {
            assert!(
                !flipped(&adv.without(pos)),
                "{}: reverting position {pos} still flips",
                model.name
            );
        }
    };
    for (model, x0) in safety_runs() {
        check(&model, &x0, 0.5, 2);
    }
    for (model, rows) in fixture_runs() {
        for x0 in rows {
            check(&model, &x0, 0.5, 4);
        }
    }
    for (model, x0) in convergence_runs() {
        let n = model.pixel_count();
        check(&model, &x0, 0.5, n);
    }
    assert!(produced > 0, "no adversarials produced, nothing verified");
    println!("acceptance criterion 6 (tightened adversarials 1-minimal, {produced} checked): PASS");
}

#[test]
fn criterion_07_attack_reaches_minimal_grid_distance_on_fragile_fixtures() {
    let f = fixtures();
    let grid = GridConfig::new(1.0).unwrap();
    for (model_file, data_file) in [
        ("threshold2.json", "threshold2_data.csv"),
        ("majority3.json", "majority3_data.csv"),
        ("fourpixel.json", "fourpixel_data.csv"),
    ] {
        let model = load_model(f.join(model_file)).unwrap();
        let ds = load_dataset(f.join(data_file), model.input_len()).unwrap();
        for input in &ds.inputs {
            let x0 = input.data();
            let found = apps::attack(
                &model,
                x0,
                &grid,
                1_000,
                1_000,
                SubspaceMode::Exhaustive,
                4096,
            )
            .unwrap()
            .expect("fragile fixture input must be attackable");
            let minimal = oracle::min_grid_adversarial(&model, x0, &grid)
                .expect("fragile fixture must have a grid adversarial");
            assert_eq!(found.distance, minimal, "{model_file}");
            let pred = model.forward_one(&found.adversarial).unwrap();
            assert_ne!(pred.label, model.forward_one(x0).unwrap().label);
        }
    }
    // and on random models the attack can never beat the true minimum
    for seed in 0..4u64 {
        let model = oracle::random_model(600 + seed, 4, &[5], 2);
        let x0 = oracle::random_input(10_000 + seed, 4);
        let grid = GridConfig::new(0.5).unwrap();
        if let Some(found) = apps::attack(
            &model,
            &x0,
            &grid,
            1_000,
            1_000,
            SubspaceMode::Exhaustive,
            4096,
        )
        .unwrap()
        {
            let minimal = oracle::min_grid_adversarial(&model, &x0, &grid).unwrap();
            assert!(found.distance >= minimal, "seed {seed}");
        }
    }
    println!("acceptance criterion 7 (attack matches minimal grid distance): PASS");
}

#[test]
fn criterion_08_testgen_completes_coverage_on_12_neuron_model() {
    let f = fixtures();
    let model = load_model(f.join("coverage12.json")).unwrap();
    let ds = load_dataset(f.join("coverage12_data.csv"), model.input_len()).unwrap();
    let inputs: Vec<&[f64]> = ds.inputs.iter().map(|t| t.data()).collect();
    let (baseline, total) = apps::measure_coverage(&model, &inputs, 0.0).unwrap();
    assert_eq!(total, 12);
    assert!(
        (baseline.len() as f64 / total as f64) < 1.0,
        "baseline must be incomplete"
    );

    let grid = GridConfig::new(1.0).unwrap();
    let report = apps::testgen(&model, &ds, &grid, &apps::TestgenConfig::default()).unwrap();
    assert_eq!(report.fraction, 1.0);
    assert_eq!(report.covered.len(), 12);
    for test in &report.tests {
        let acts = model.record_activations(&test.input).unwrap();
        let (_, v) = acts.iter().find(|(id, _)| *id == test.neuron).unwrap();
        assert!(*v > 0.0, "generated test must activate its target neuron");
    }
    println!(
        "acceptance criterion 8 (coverage 1.0 from baseline {:.2}): PASS",
        baseline.len() as f64 / total as f64
    );
}

#[test]
fn criterion_09_query_count_closed_form_matches_summation() {
    for delta in 1usize..=4 {
        let epsilon = 1.0 / delta as f64;
        for n in 1usize..=30 {
            let closed = worst_case_queries(n, epsilon).unwrap();
            // independent binomial summation
            let mut sum = BigUint::from(0u32);
            let mut coeff = BigUint::from(1u32);
            let mut power = BigUint::from(1u32);
            for d in 1..=n {
                coeff = coeff * (n - d + 1) / d;
                power *= delta;
                sum += &coeff * &power;
            }
            assert_eq!(closed, sum, "n={n} delta={delta}");
        }
    }
    let out = Command::new(bin())
        .args(["query-bound", "2", "1.0"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "3\n");
    println!("acceptance criterion 9 (worst-case query count): PASS");
}

#[test]
fn criterion_10_byte_identical_reports_and_anytime_interruption() {
    let f = fixtures();

    // identical runs under different worker counts
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let dir = scratch(&format!("det-{threads}"));
        let out = Command::new(bin())
            .env("RAYON_NUM_THREADS", threads)
            .args([
                "evaluate",
                "--model",
                f.join("fourpixel.json").to_str().unwrap(),
                "--data",
                f.join("fourpixel_data.csv").to_str().unwrap(),
                "--epsilon",
                "1.0",
                "--t-max",
                "4",
                "--out",
                dir.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        let contents: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
        outputs.push((out.stdout, files.len(), contents));
    }
    assert_eq!(outputs[0].1, outputs[1].1, "report file counts differ");
    assert_eq!(
        outputs[0].2, outputs[1].2,
        "report bytes differ across worker counts"
    );
    assert_eq!(
        outputs[0].0, outputs[1].0,
        "stdout differs across worker counts"
    );

    // killing the process after iteration 1 leaves a valid t=1 report
    let dir = scratch("kill");
    let mut child = Command::new(bin())
        .args([
            "evaluate",
            "--model",
            f.join("slow100.json").to_str().unwrap(),
            "--data",
            f.join("slow100_data.csv").to_str().unwrap(),
            "--epsilon",
            "0.25",
            "--t-max",
            "3",
            "--out",
            dir.to_str().unwrap(),
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let t1 = dir.join("report-t001.json");
    let deadline = Instant::now() + Duration::from_secs(30);
    while !t1.exists() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    let _ = child.kill();
    let _ = child.wait();
    assert!(t1.exists(), "iteration-1 report never appeared");
    let text = std::fs::read_to_string(&t1).unwrap();
    let report: AnytimeReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.iteration, 1);
    assert_eq!(report.inputs.len(), 1);
    assert!(!report.inputs[0].skipped);
    assert!(report.aggregate.query_count.unwrap() > 0);
    println!("acceptance criterion 10 (deterministic reports, anytime interruption): PASS");
}
