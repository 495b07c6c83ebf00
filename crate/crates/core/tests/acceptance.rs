//! Acceptance suite: one test per release criterion, each printing a
//! PASS line on success (run with `cargo test --test acceptance -- --nocapture`
//! to see them).

use std::path::{Path, PathBuf};

use agbench::bench::{csv_header, emit_gamma_curves, run_experiment, read_results, RunConfig};
use agbench::guidance::{guided_step_count, GuidanceStrategy};
use agbench::metrics::{alignment_accuracy, fit_gaussian, w2_gaussian};
use agbench::mixture::{canonical_model, single_class_model, MixtureModel, ScoreKind};
use agbench::sampler::{parse_trace, sample, sample_batch, trace_to_string, StepRecord};
use agbench::schedule::{make_grid, NoiseSchedule};
use agbench::StepDecision;
use nalgebra::DVector;

/// Quality-gate tolerances for criterion 5, frozen from the 5-seed full-CFG
/// baseline on the canonical preset (see `derive_quality_tolerances` below
/// for the derivation path). Observed: alignment accuracy exactly 1.0 on
/// every baseline seed (max |Δacc| = 0), max cross-seed per-class W2 ratio
/// 1.014020.
const DELTA_ACC: f64 = 0.01; // 0.0 + 0.01
const DELTA_W2: f64 = 1.064020; // 1.014020 + 0.05

fn preset_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name)
}

fn canonical_schedule() -> NoiseSchedule {
    NoiseSchedule::vp_linear_default()
}

fn all_schedules() -> [NoiseSchedule; 3] {
    [
        NoiseSchedule::vp_linear_default(),
        NoiseSchedule::vp_cosine_default(),
        NoiseSchedule::rectified_flow(),
    ]
}

fn decisions(rows: &[StepRecord]) -> Vec<StepDecision> {
    rows.iter().map(|r| r.decision).collect()
}

#[test]
fn criterion_1_forward_pass_cost_law() {
    let model = canonical_model();
    let sched = canonical_schedule();
    for t_steps in [12usize, 19, 28, 50] {
        let grid = make_grid(&sched, t_steps).unwrap();
        let full = GuidanceStrategy::FullCfg { w: 7.0 };
        let (_, trace) = sample(&model, &sched, &grid, &full, "c0", 1, false).unwrap();
        assert_eq!(trace.total_evals, 2 * t_steps as u64);
        for p in [0.3f64, 0.5, 1.0] {
            let strat = GuidanceStrategy::StepAg { w: 7.0, p, late_score: ScoreKind::Conditional };
            let (_, trace) = sample(&model, &sched, &grid, &strat, "c0", 1, false).unwrap();
            assert_eq!(
                trace.total_evals,
                (t_steps + guided_step_count(p, t_steps)) as u64,
                "T={t_steps} p={p}"
            );
        }
    }

    // the forward-pass equality: step_ag(T=19, p=0.3) == full_cfg(T=12) == 24
    let grid19 = make_grid(&sched, 19).unwrap();
    let step = GuidanceStrategy::StepAg { w: 7.0, p: 0.3, late_score: ScoreKind::Conditional };
    let (_, tr_step) = sample(&model, &sched, &grid19, &step, "c0", 1, false).unwrap();
    let grid12 = make_grid(&sched, 12).unwrap();
    let (_, tr_full) =
        sample(&model, &sched, &grid12, &GuidanceStrategy::FullCfg { w: 7.0 }, "c0", 1, false)
            .unwrap();
    assert_eq!(tr_step.total_evals, 24);
    assert_eq!(tr_full.total_evals, 24);

    // exact saving ratio at (T=50, p=0.5)
    let grid50 = make_grid(&sched, 50).unwrap();
    let half = GuidanceStrategy::StepAg { w: 7.0, p: 0.5, late_score: ScoreKind::Conditional };
    let (_, tr) = sample(&model, &sched, &grid50, &half, "c0", 1, false).unwrap();
    let saved = 1.0 - tr.total_evals as f64 / 100.0;
    assert_eq!(saved, 0.25);

    println!("[PASS] criterion 1: forward-pass cost law exact (incl. 24-eval equality, 0.25 saving)");
}

#[test]
fn criterion_2_snr_monotonicity() {
    for sched in all_schedules() {
        let grid = make_grid(&sched, 1000).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for &t in grid.steps() {
            let lambda = sched.snr(t).unwrap();
            assert!(lambda > prev, "{}: lambda not strictly increasing at t={t}", sched.name());
            prev = lambda;
        }
    }
    println!("[PASS] criterion 2: SNR strictly increasing on T=1000 grids for all schedules");
}

#[test]
fn criterion_3_strategy_equivalences() {
    let model = canonical_model();
    let sched = canonical_schedule();

    // (a) step_ag(p=1.0) vs full_cfg over 50 seeds
    let grid = make_grid(&sched, 20).unwrap();
    let full = GuidanceStrategy::FullCfg { w: 7.0 };
    let p1 = GuidanceStrategy::StepAg { w: 7.0, p: 1.0, late_score: ScoreKind::Conditional };
    for seed in 0..50u64 {
        let (x_full, tr_full) = sample(&model, &sched, &grid, &full, "c1", seed, false).unwrap();
        let (x_p1, tr_p1) = sample(&model, &sched, &grid, &p1, "c1", seed, false).unwrap();
        assert_eq!(decisions(&tr_full.rows), decisions(&tr_p1.rows));
        assert!((x_full - x_p1).amax() <= 1e-12);
    }

    // (b) snr_ag with boundary-matched threshold vs step_ag
    for sched in all_schedules() {
        for t_steps in [19usize, 28, 50] {
            for p in [0.3f64, 0.5] {
                let grid = make_grid(&sched, t_steps).unwrap();
                let n_guided = guided_step_count(p, t_steps);
                let lambda_threshold = sched.snr(grid.steps()[n_guided]).unwrap();
                let step = GuidanceStrategy::StepAg { w: 7.0, p, late_score: ScoreKind::Conditional };
                let snr = GuidanceStrategy::SnrAg {
                    w: 7.0,
                    lambda_threshold,
                    late_score: ScoreKind::Conditional,
                };
                let (_, tr_step) = sample(&model, &sched, &grid, &step, "c0", 3, false).unwrap();
                let (_, tr_snr) = sample(&model, &sched, &grid, &snr, "c0", 3, false).unwrap();
                assert_eq!(
                    decisions(&tr_step.rows),
                    decisions(&tr_snr.rows),
                    "{} T={t_steps} p={p}",
                    sched.name()
                );
            }
        }
    }

    // (c) full_cfg(w=1) vs conditional_only
    let grid = make_grid(&sched, 30).unwrap();
    let (x_w1, tr_w1) =
        sample(&model, &sched, &grid, &GuidanceStrategy::FullCfg { w: 1.0 }, "c2", 7, false).unwrap();
    let (x_cond, tr_cond) =
        sample(&model, &sched, &grid, &GuidanceStrategy::ConditionalOnly, "c2", 7, false).unwrap();
    assert!((x_w1 - x_cond).amax() <= 1e-12);
    assert_eq!(tr_w1.total_evals, 60);
    assert_eq!(tr_cond.total_evals, 30);

    println!("[PASS] criterion 3: strategy equivalences (p=1 collapse, SNR/Step AG match, w=1 collapse)");
}

#[test]
fn criterion_4_score_oracle_correctness() {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let model = canonical_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    for sched in all_schedules() {
        let (lo, hi) = sched.domain();
        for _ in 0..100 {
            let t = rng.gen_range(lo.max(0.02)..hi.min(0.98));
            let x = DVector::from_vec(vec![rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0)]);
            let (_, sigma) = sched.alpha_sigma(t).unwrap();
            for label in [Some("c0"), Some("c1"), Some("c2"), None] {
                let eps = match label {
                    Some(l) => model.eps_conditional(&sched, &x, t, l).unwrap().eps,
                    None => model.eps_unconditional(&sched, &x, t).unwrap().eps,
                };
                // central finite differences of the log density
                let mut expected = DVector::zeros(2);
                for i in 0..2 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    expected[i] = -sigma
                        * (model.log_density(&sched, &xp, t, label).unwrap()
                            - model.log_density(&sched, &xm, t, label).unwrap())
                        / (2.0 * h);
                }
                let rel = (&eps - &expected).norm() / expected.norm().max(1e-8);
                assert!(rel <= 1e-5, "{} t={t} label={label:?} rel={rel}", sched.name());
            }
        }
    }
    println!("[PASS] criterion 4: analytic eps matches finite-difference oracle (rel err <= 1e-5)");
}

#[test]
fn criterion_5_quality_preservation() {
    let model = MixtureModel::load(&preset_path("canonical_mixture.json")).unwrap();
    let sched = canonical_schedule();
    let grid = make_grid(&sched, 50).unwrap();
    let n = 4000usize;

    let evaluate = |strat: &GuidanceStrategy| {
        let mut labeled = Vec::new();
        let mut w2s = Vec::new();
        for (ci, class) in model.classes().iter().enumerate() {
            // shared prior seeds: the cell seed depends only on the class slot
            let cell_seed = (ci * n) as u64;
            let (xs, _) =
                sample_batch(&model, &sched, &grid, strat, &class.label, n, cell_seed, false)
                    .unwrap();
            let (mean, cov) = fit_gaussian(&xs).unwrap();
            w2s.push(w2_gaussian(&mean, &cov, &class.mean, &class.cov).unwrap());
            labeled.extend(xs.into_iter().map(|x| (x, class.label.clone())));
        }
        (alignment_accuracy(&labeled, &model).unwrap(), w2s)
    };

    let (acc_full, w2_full) = evaluate(&GuidanceStrategy::FullCfg { w: 7.0 });
    let (acc_step, w2_step) =
        evaluate(&GuidanceStrategy::StepAg { w: 7.0, p: 0.5, late_score: ScoreKind::Conditional });

    assert!(
        (acc_step - acc_full).abs() <= DELTA_ACC,
        "alignment gap {} exceeds {DELTA_ACC}",
        (acc_step - acc_full).abs()
    );
    for (s, f) in w2_step.iter().zip(&w2_full) {
        let ratio = s / f;
        assert!(
            ratio <= DELTA_W2 && ratio >= 1.0 / DELTA_W2,
            "w2 ratio {ratio} outside [{:.6}, {DELTA_W2}]",
            1.0 / DELTA_W2
        );
    }
    println!(
        "[PASS] criterion 5: step_ag(p=0.5) quality within tolerances (|dacc|={:.2e} <= {DELTA_ACC}, max w2 ratio={:.6} <= {DELTA_W2})",
        (acc_step - acc_full).abs(),
        w2_step.iter().zip(&w2_full).map(|(s, f)| (s / f).max(f / s)).fold(0.0f64, f64::max)
    );
}

/// Derivation path for the criterion-5 tolerances: 5-seed full-CFG baseline
/// with metrics recomputed by a brute-force pipeline that shares no code
/// with the metrics module. Run manually:
/// `cargo test --release --test acceptance derive_quality_tolerances -- --ignored --nocapture`
///
/// Recorded output (the committed derivation log):
///   seed_base=0       acc=1.000000 w2=[6.657775, 6.619633, 6.622747]
///   seed_base=1000000 acc=1.000000 w2=[6.629607, 6.656686, 6.658688]
///   seed_base=2000000 acc=1.000000 w2=[6.630664, 6.672152, 6.596204]
///   seed_base=3000000 acc=1.000000 w2=[6.624175, 6.603810, 6.638007]
///   seed_base=4000000 acc=1.000000 w2=[6.678218, 6.579899, 6.588754]
///   max |delta acc| = 0.000000 -> DELTA_ACC = 0.01
///   max w2 ratio    = 1.014020 -> DELTA_W2  = 1.064020
#[test]
#[ignore]
fn derive_quality_tolerances() {
    fn naive_mean_cov(samples: &[DVector<f64>]) -> ([f64; 2], [[f64; 2]; 2]) {
        let n = samples.len() as f64;
        let mut mean = [0.0; 2];
        for s in samples {
            mean[0] += s[0] / n;
            mean[1] += s[1] / n;
        }
        let mut cov = [[0.0; 2]; 2];
        for s in samples {
            let d = [s[0] - mean[0], s[1] - mean[1]];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += d[i] * d[j] / (n - 1.0);
                }
            }
        }
        (mean, cov)
    }
    // sqrt of an SPD 2x2: (M + sqrt(det)·I) / sqrt(tr + 2·sqrt(det))
    fn sqrt2x2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let det = (m[0][0] * m[1][1] - m[0][1] * m[1][0]).max(0.0);
        let s = det.sqrt();
        let tau = (m[0][0] + m[1][1] + 2.0 * s).sqrt();
        [[(m[0][0] + s) / tau, m[0][1] / tau], [m[1][0] / tau, (m[1][1] + s) / tau]]
    }
    fn matmul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    let model = canonical_model();
    let sched = canonical_schedule();
    let grid = make_grid(&sched, 50).unwrap();
    let n = 4000usize;
    let mut accs = Vec::new();
    let mut w2s: Vec<Vec<f64>> = Vec::new();
    for run in 0..5u64 {
        let base_seed = run * 1_000_000;
        let (mut hits, mut total) = (0usize, 0usize);
        let mut run_w2 = Vec::new();
        for (ci, class) in model.classes().iter().enumerate() {
            let (xs, _) = sample_batch(
                &model,
                &sched,
                &grid,
                &GuidanceStrategy::FullCfg { w: 7.0 },
                &class.label,
                n,
                base_seed + (ci * n) as u64,
                false,
            )
            .unwrap();
            for x in &xs {
                // brute-force argmax over log densities (unit covariances)
                let best = model
                    .classes()
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let d = [x[0] - c.mean[0], x[1] - c.mean[1]];
                        (k, -(d[0] * d[0] + d[1] * d[1]) / 2.0 + c.weight.ln())
                    })
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap()
                    .0;
                hits += (best == ci) as usize;
                total += 1;
            }
            let (mean, cov) = naive_mean_cov(&xs);
            let eye = [[1.0, 0.0], [0.0, 1.0]];
            let inner = sqrt2x2(matmul(matmul(sqrt2x2(eye), cov), sqrt2x2(eye)));
            let bures = cov[0][0] + cov[1][1] + 2.0 - 2.0 * (inner[0][0] + inner[1][1]);
            let dm = [mean[0] - class.mean[0], mean[1] - class.mean[1]];
            run_w2.push(dm[0] * dm[0] + dm[1] * dm[1] + bures);
        }
        let acc = hits as f64 / total as f64;
        println!("seed_base={base_seed} acc={acc:.6} w2={run_w2:?}");
        accs.push(acc);
        w2s.push(run_w2);
    }
    let mut max_dacc: f64 = 0.0;
    let mut max_ratio: f64 = 1.0;
    for i in 0..5 {
        for j in 0..5 {
            max_dacc = max_dacc.max((accs[i] - accs[j]).abs());
            for c in 0..3 {
                max_ratio = max_ratio.max(w2s[i][c] / w2s[j][c]);
            }
        }
    }
    println!("max |delta acc| = {max_dacc:.6} -> DELTA_ACC = {:.6}", max_dacc + 0.01);
    println!("max w2 ratio    = {max_ratio:.6} -> DELTA_W2  = {:.6}", max_ratio + 0.05);
}

#[test]
fn criterion_6_similarity_ag_failure_mode() {
    let model = single_class_model();
    let sched = canonical_schedule();
    let grid = make_grid(&sched, 10).unwrap();

    let mut traces = Vec::new();
    for gamma_threshold in [0.9f64, 0.95, 0.99, 0.999] {
        let strat = GuidanceStrategy::SimilarityAg {
            w: 7.0,
            gamma_threshold,
            late_score: ScoreKind::Conditional,
        };
        let (_, trace) = sample(&model, &sched, &grid, &strat, "only", 17, false).unwrap();
        // gamma at step 1 verified high by the trace itself
        assert!(trace.rows[0].gamma.unwrap() >= 0.9);
        assert_eq!(trace.rows[0].decision, StepDecision::Guided);
        for r in &trace.rows[1..] {
            assert!(matches!(r.decision, StepDecision::Single(_)), "gamma={gamma_threshold}");
        }
        traces.push(trace);
    }
    for pair in traces.windows(2) {
        assert_eq!(decisions(&pair[0].rows), decisions(&pair[1].rows));
    }
    println!("[PASS] criterion 6: similarity AG switches off after step 1 at every threshold");
}

#[test]
fn criterion_7_determinism_and_format() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let cfg = RunConfig {
            model: preset_path("canonical_mixture.json"),
            schedule: "vp-linear".into(),
            beta_min: None,
            beta_max: None,
            offset: None,
            t_steps: 12,
            strategy: "step_ag".into(),
            w: 7.0,
            p: Some(0.5),
            gamma: None,
            lambda: None,
            late_score: ScoreKind::Conditional,
            condition: "all".into(),
            n: 6,
            seed: 0,
            diag: false,
            out: Some(dir.path().join(format!("results_{tag}.csv"))),
            trace_dir: Some(dir.path().join(format!("traces_{tag}"))),
        };
        run_experiment(&cfg).unwrap();
        cfg
    };
    let cfg_a = run("a");
    let cfg_b = run("b");

    // CSV rows byte-identical excluding the wall-time column
    let strip_wall = |path: &Path| {
        let text = std::fs::read_to_string(path).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        let wall = header.iter().position(|c| *c == "mean_wall_ms").unwrap();
        text.lines()
            .map(|line| {
                let mut cols: Vec<&str> = line.split(',').collect();
                cols.remove(wall);
                cols.join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        strip_wall(cfg_a.out.as_ref().unwrap()),
        strip_wall(cfg_b.out.as_ref().unwrap())
    );

    // trace files byte-identical
    let mut names: Vec<_> = std::fs::read_dir(cfg_a.trace_dir.as_ref().unwrap())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 18);
    for name in &names {
        let a = std::fs::read(cfg_a.trace_dir.as_ref().unwrap().join(name)).unwrap();
        let b = std::fs::read(cfg_b.trace_dir.as_ref().unwrap().join(name)).unwrap();
        assert_eq!(a, b, "trace {name:?} differs");
    }

    // both file formats round-trip through their parsers
    let rows = read_results(cfg_a.out.as_ref().unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].config_fields[0], "step_ag");
    let model = MixtureModel::load(&cfg_a.model).unwrap();
    let expected_header = csv_header(&model.labels().map(String::from).collect::<Vec<_>>());
    let text = std::fs::read_to_string(cfg_a.out.as_ref().unwrap()).unwrap();
    assert_eq!(text.lines().next().unwrap(), expected_header.join(","));

    let trace_text =
        std::fs::read_to_string(cfg_a.trace_dir.as_ref().unwrap().join(&names[0])).unwrap();
    let parsed = parse_trace(&trace_text).unwrap();
    assert_eq!(parsed.len(), 12);
    // re-serializing the parsed rows reproduces the file
    let sched = cfg_a.build_schedule().unwrap();
    let grid = make_grid(&sched, 12).unwrap();
    let strat = cfg_a.build_strategy().unwrap();
    let (_, tr) = sample(&model, &sched, &grid, &strat, "c0", 0, false).unwrap();
    assert_eq!(trace_to_string(&tr), trace_text);

    println!("[PASS] criterion 7: byte-identical reruns and round-tripping CSV/trace formats");
}

#[test]
fn criterion_8_gamma_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig {
        model: preset_path("canonical_mixture.json"),
        schedule: "vp-linear".into(),
        beta_min: None,
        beta_max: None,
        offset: None,
        t_steps: 50,
        strategy: "full_cfg".into(),
        w: 7.0,
        p: None,
        gamma: None,
        lambda: None,
        late_score: ScoreKind::Conditional,
        condition: "all".into(),
        n: 1,
        seed: 0,
        diag: true,
        out: None,
        trace_dir: None,
    };

    let canonical_out = dir.path().join("gamma_canonical.csv");
    emit_gamma_curves(&base, 20, &canonical_out).unwrap();
    let text = std::fs::read_to_string(&canonical_out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 50);
    for line in &lines[1..] {
        let gamma: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&gamma), "gamma {gamma} out of range");
    }

    let mut single = base.clone();
    single.model = preset_path("single_class.json");
    single.condition = "only".into();
    let single_out = dir.path().join("gamma_single.csv");
    emit_gamma_curves(&single, 20, &single_out).unwrap();
    let text = std::fs::read_to_string(&single_out).unwrap();
    for line in text.lines().skip(1) {
        let gamma: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((gamma - 1.0).abs() < 1e-9, "single-class gamma {gamma} != 1");
    }

    println!("[PASS] criterion 8: gamma curves well-formed; degenerate model gives gamma == 1");
}
