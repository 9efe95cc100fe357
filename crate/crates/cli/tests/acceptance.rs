//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Built with `harness = false` so the lines are
//! always visible.
//!
//! The oracles here are written independently of the library code they check.

use std::fs;
use std::process::Command;
use std::time::Instant;

use ps2_core::agents::AlgorithmTag;
use ps2_core::envgen::{generate_bandit, BanditInstance, ProblemSpec};
use ps2_core::harness::{
    run_experiment, seed_environment, summarize, ExperimentConfig, SummaryStats,
};
use ps2_core::hypermodel::{Beliefs, IndexDraw, QSampleSet};
use ps2_core::learner::{make_perturbations, rlsvi_gradient, rlsvi_loss, LossConfig, Transition};
use ps2_core::policy::{conditional_variances, expected_regrets, ids_distribution, IdsMode};
use ps2_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn final_of(summary: &SummaryStats, tag: AlgorithmTag) -> (f64, f64) {
    let a = summary
        .get(tag.name())
        .expect("algorithm present in summary");
    (a.final_mean(), a.final_half_width())
}

fn experiment(s: usize, a: usize, tasks: usize, algorithms: &[AlgorithmTag]) -> SummaryStats {
    let config = ExperimentConfig {
        num_states: s,
        num_actions: a,
        latent_rank: 5,
        num_tasks: tasks,
        algorithms: Some(algorithms.to_vec()),
        ..ExperimentConfig::default()
    };
    let traces = run_experiment(&config).expect("experiment runs");
    summarize(&traces).expect("summary")
}

fn fmt_final(summary: &SummaryStats) -> String {
    summary
        .algorithms
        .iter()
        .map(|a| {
            format!(
                "{} {:.1}±{:.1}",
                a.algorithm,
                a.final_mean(),
                a.final_half_width()
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

// 1. Single-task ordering on 30x30.
fn single_task_ordering(single30: &SummaryStats) -> Outcome {
    use AlgorithmTag::*;
    let (tsa, tsa_hw) = final_of(single30, TrueStateAbstraction);
    let (ids, _) = final_of(single30, Ps2Ids);
    let (nsa, _) = final_of(single30, NoStateAbstraction);
    let (rnd, rnd_hw) = final_of(single30, Random);
    let ordered = tsa < ids && ids < nsa && nsa < rnd;
    let separated = tsa + tsa_hw < rnd - rnd_hw;
    outcome(ordered && separated, fmt_final(single30))
}

// 2. PS2-IDS within 5% of PS2-TS on both sizes.
fn ids_vs_ts(single30: &SummaryStats, single10: &SummaryStats) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (label, s) in [("30x30", single30), ("10x10", single10)] {
        let (ids, _) = final_of(s, AlgorithmTag::Ps2Ids);
        let (ts, _) = final_of(s, AlgorithmTag::Ps2Ts);
        ok &= ids <= 1.05 * ts;
        parts.push(format!("{label}: IDS {ids:.1} vs TS {ts:.1}"));
    }
    outcome(ok, parts.join("; "))
}

// 3. Shared abstraction beats independent learners across tasks.
fn multitask_gain(multi30: &SummaryStats, multi10: &SummaryStats) -> Outcome {
    let (shared30, shw) = final_of(multi30, AlgorithmTag::Ps2Ids);
    let (indep30, ihw) = final_of(multi30, AlgorithmTag::Independent);
    let (shared10, _) = final_of(multi10, AlgorithmTag::Ps2Ids);
    let (indep10, _) = final_of(multi10, AlgorithmTag::Independent);
    let ok = shared30 < indep30 && shared30 + shw < indep30 - ihw && shared10 <= 1.05 * indep10;
    outcome(
        ok,
        format!(
            "30x30: shared {shared30:.1}±{shw:.1} vs independent {indep30:.1}±{ihw:.1}; \
             10x10: shared {shared10:.1} vs independent {indep10:.1}"
        ),
    )
}

fn randomize(beliefs: &mut Beliefs, rng: &mut ChaCha8Rng) {
    let flat: Vec<f64> = (0..beliefs.num_params())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    beliefs.assign_flat(&flat).unwrap();
}

// 4. Analytic gradient against central finite differences.
fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.random_range(1..=2);
        let s = rng.random_range(m..=4);
        let a = rng.random_range(m..=4);
        let tasks = rng.random_range(1..=2);
        let mut params = Beliefs::factored(s, a, m, tasks, 0.5).unwrap();
        let mut init = params.clone();
        randomize(&mut params, &mut rng);
        randomize(&mut init, &mut rng);
        let cfg = LossConfig {
            lambda: rng.random_range(0.0..0.5),
            ..LossConfig::default()
        };
        let batch: Vec<Transition> = (0..rng.random_range(1..=8))
            .map(|_| {
                let (eta_phi, eta_psi) = make_perturbations(&cfg, params.index_config(), &mut rng);
                let state = rng.random_range(0..s);
                Transition {
                    task_id: rng.random_range(0..tasks),
                    state,
                    action: rng.random_range(0..a),
                    reward: rng.random(),
                    next_state: state,
                    terminal: true,
                    eta_phi,
                    eta_psi,
                }
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let draws: Vec<IndexDraw> = (0..3).map(|_| params.sample_draw(&mut rng)).collect();
        let grad = rlsvi_gradient(&params, &init, &refs, &draws, &cfg).unwrap();
        let base = params.flatten();
        let mut probe = params.clone();
        for i in 0..base.len() {
            let mut x = base.clone();
            x[i] = base[i] + h;
            probe.assign_flat(&x).unwrap();
            let up = rlsvi_loss(&probe, &init, &refs, &draws, &cfg).unwrap();
            x[i] = base[i] - h;
            probe.assign_flat(&x).unwrap();
            let down = rlsvi_loss(&probe, &init, &refs, &draws, &cfg).unwrap();
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    outcome(
        worst < 1e-5,
        format!("max relative error {worst:.3e} over 20 configurations"),
    )
}

fn pair_ratio(num: f64, den: f64) -> f64 {
    let n2 = num * num;
    if n2 == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        n2 / den
    }
}

// 5. Information-ratio minimizer against a pairwise grid search.
fn ids_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut grid = f64::INFINITY;
        for i in 0..n {
            for j in i..n {
                for k in 0..=1000 {
                    let p = k as f64 / 1000.0;
                    grid = grid.min(pair_ratio(
                        p * delta[i] + (1.0 - p) * delta[j],
                        p * v[i] + (1.0 - p) * v[j],
                    ));
                }
            }
        }
        let policy = ids_distribution(&delta, &v, IdsMode::SquaredExpectation).unwrap();
        let num: f64 = policy
            .support
            .iter()
            .zip(&policy.probabilities)
            .map(|(&a, p)| p * delta[a])
            .sum();
        let den: f64 = policy
            .support
            .iter()
            .zip(&policy.probabilities)
            .map(|(&a, p)| p * v[a])
            .sum();
        let achieved = pair_ratio(num, den);
        ok &= policy.support.len() <= 2 && achieved <= grid + 1e-6;
        ok &= (achieved - policy.ratio).abs() <= 1e-9 * achieved.max(1.0);
        worst_gap = worst_gap.max(achieved - grid);
    }
    let examples: [(&[f64], &[f64], f64); 3] = [
        (&[0.0, 1.0], &[0.5, 0.5], 0.0),
        (&[1.0, 1.0], &[1.0, 4.0], 0.25),
        (&[1.0, 3.0], &[0.0, 4.0], 2.0),
    ];
    for (delta, v, expected) in examples {
        let p = ids_distribution(delta, v, IdsMode::SquaredExpectation).unwrap();
        ok &= (p.ratio - expected).abs() < 1e-9;
    }
    outcome(
        ok,
        format!(
            "100 instances, worst (achieved - grid) {worst_gap:.3e}; worked examples 0, 0.25, 2.0"
        ),
    )
}

// 6. Regret and variance estimators against direct recomputation.
fn estimator_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut counts_ok = true;
    for _ in 0..200 {
        let k = rng.random_range(1..=8);
        let a = rng.random_range(1..=4);
        let s = rng.random_range(1..=3);
        // Coarse values make exact ties, and so the tie rule, common.
        let samples: Vec<Matrix> = (0..k)
            .map(|_| {
                let data = (0..s * a)
                    .map(|_| rng.random_range(0..4) as f64 / 4.0)
                    .collect();
                Matrix::from_vec(s, a, data).unwrap()
            })
            .collect();
        let state = rng.random_range(0..s);
        let set = QSampleSet::new(samples.clone()).unwrap();
        let delta = expected_regrets(&set, state).unwrap();
        let (v, counts) = conditional_variances(&set, state).unwrap();

        let rows: Vec<Vec<f64>> = samples.iter().map(|q| q.row(state).to_vec()).collect();
        let greedy: Vec<usize> = rows
            .iter()
            .map(|r| {
                let mut best = 0;
                for j in 1..a {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        for act in 0..a {
            let want_delta = rows
                .iter()
                .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r[act])
                .sum::<f64>()
                / k as f64;
            let overall = rows.iter().map(|r| r[act]).sum::<f64>() / k as f64;
            let mut want_v = 0.0;
            for star in 0..a {
                let group: Vec<f64> = (0..k)
                    .filter(|&i| greedy[i] == star)
                    .map(|i| rows[i][act])
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let gm = group.iter().sum::<f64>() / group.len() as f64;
                want_v += group.len() as f64 / k as f64 * (gm - overall).powi(2);
            }
            worst = worst
                .max((delta[act] - want_delta).abs())
                .max((v[act] - want_v).abs());
            counts_ok &= counts[act] == greedy.iter().filter(|&&g| g == act).count();
        }
    }
    let worked = QSampleSet::new(vec![
        Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
    ])
    .unwrap();
    let d = expected_regrets(&worked, 0).unwrap();
    let (v, _) = conditional_variances(&worked, 0).unwrap();
    let worked_ok = d == vec![0.5, 0.5] && v == vec![0.25, 0.25];
    outcome(
        worst <= 1e-12 && counts_ok && worked_ok,
        format!(
            "200 sample sets, max abs error {worst:.3e}; worked K=2 example {}",
            if worked_ok { "exact" } else { "wrong" }
        ),
    )
}

fn generator_violation(inst: &BanditInstance) -> Option<String> {
    let (s, a, m) = (inst.num_states, inst.num_actions, inst.latent_rank);
    for i in 0..s {
        let row = inst.phi.row(i);
        if row.iter().filter(|&&x| x == 1.0).count() != 1
            || row.iter().any(|&x| x != 0.0 && x != 1.0)
        {
            return Some(format!("phi row {i} not one-hot"));
        }
    }
    if inst.psi.as_slice().iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Some("psi outside [0,1]".into());
    }
    for i in 0..s {
        for j in 0..a {
            let q: f64 = (0..m)
                .map(|k| inst.phi.get(i, k) * inst.psi.get(j, k))
                .sum();
            if q != inst.q_star.get(i, j) {
                return Some(format!("q_star({i},{j}) != phi psi^T"));
            }
        }
    }
    // Orthonormal basis of phi's column space; every q_star column must lie in it.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for k in 0..m {
        let mut col: Vec<f64> = (0..s).map(|i| inst.phi.get(i, k)).collect();
        for b in &basis {
            let d: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
            col.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            basis.push(col.iter().map(|x| x / norm).collect());
        }
    }
    for j in 0..a {
        let mut col: Vec<f64> = (0..s).map(|i| inst.q_star.get(i, j)).collect();
        for b in &basis {
            let d: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
            col.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let residual = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if residual >= 1e-12 {
            return Some(format!("rank residual {residual:e} in column {j}"));
        }
    }
    None
}

// 7. Generator invariants on 1000 random instances.
fn generator_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 0..1000 {
        let s = rng.random_range(1..=30);
        let a = rng.random_range(1..=30);
        let m = rng.random_range(1..=s.min(a).min(8));
        let inst = generate_bandit(&ProblemSpec::new(s, a, m), rng.random()).unwrap();
        if let Some(why) = generator_violation(&inst) {
            return outcome(false, format!("instance {n} ({s}x{a}, M={m}): {why}"));
        }
    }
    outcome(
        true,
        "1000 instances: one-hot, range, exact factorization, rank residual",
    )
}

// 8. Random agent's average regret against the enumerated expectation.
fn random_calibration() -> Outcome {
    let config = ExperimentConfig {
        num_states: 10,
        num_actions: 10,
        latent_rank: 5,
        algorithms: Some(vec![AlgorithmTag::Random]),
        num_seeds: 10,
        seed: 8,
        ..ExperimentConfig::default()
    };
    let traces = run_experiment(&config).unwrap();
    let mut ok = true;
    let mut worst_z: f64 = 0.0;
    for trace in &traces {
        let suite = seed_environment(&config, trace.seed).unwrap();
        let inst = suite.task(0);
        let gaps: Vec<f64> = (0..inst.num_states)
            .flat_map(|s| {
                let row = inst.q_star.row(s);
                let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter().map(move |q| best - q).collect::<Vec<_>>()
            })
            .collect();
        let mu = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let var = gaps.iter().map(|g| (g - mu).powi(2)).sum::<f64>() / gaps.len() as f64;
        let t = trace.instantaneous.len() as f64;
        let observed = trace.final_regret() / t;
        let z = (observed - mu).abs() / (var / t).sqrt();
        worst_z = worst_z.max(z);
        ok &= z <= 2.576;
    }
    outcome(
        ok,
        format!("10 instances, worst |z| = {worst_z:.2} (99% band is 2.576)"),
    )
}

// 9. Two CLI runs with the same config give byte-identical traces.
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(
        &config,
        "num_states = 8\nnum_actions = 6\nlatent_rank = 3\nnum_tasks = 2\nhorizon = 150\nnum_seeds = 2\nseed = 9\n",
    )
    .unwrap();
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_ps2"))
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(
                false,
                format!(
                    "run {run} failed: {}",
                    String::from_utf8_lossy(&status.stderr)
                ),
            );
        }
        csvs.push(fs::read(out.join("traces.csv")).unwrap());
    }
    let rows = csvs[0].iter().filter(|&&b| b == b'\n').count();
    outcome(
        csvs[0] == csvs[1],
        format!("{rows} lines, identical: {}", csvs[0] == csvs[1]),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "[{}] {id}. {name}: {} ({secs:.1}s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o, secs));
    };

    record(4, "gradient oracle", &mut gradient_oracle);
    record(5, "IDS oracle", &mut ids_oracle);
    record(6, "estimator oracle", &mut estimator_oracle);
    record(7, "generator invariants", &mut generator_invariants);
    record(8, "random-agent calibration", &mut random_calibration);
    record(9, "determinism", &mut determinism);

    // The regret experiments run once and feed several criteria, so their
    // time is reported separately.
    use AlgorithmTag::*;
    let timed = |s, a, tasks, algorithms: &[AlgorithmTag]| {
        let start = Instant::now();
        let summary = experiment(s, a, tasks, algorithms);
        println!(
            "  experiment {s}x{a}, {tasks} task(s): {:.1}s",
            start.elapsed().as_secs_f64()
        );
        summary
    };
    let single = [
        Ps2Ids,
        Ps2Ts,
        NoStateAbstraction,
        TrueStateAbstraction,
        Random,
    ];
    let single30 = timed(30, 30, 1, &single);
    let single10 = timed(10, 10, 1, &[Ps2Ids, Ps2Ts]);
    record(1, "single-task ordering (30x30)", &mut || {
        single_task_ordering(&single30)
    });
    record(2, "PS2-IDS <= 1.05 x PS2-TS", &mut || {
        ids_vs_ts(&single30, &single10)
    });
    let multi30 = timed(30, 30, 10, &[Ps2Ids, Independent]);
    let multi10 = timed(10, 10, 10, &[Ps2Ids, Independent]);
    record(3, "multi-task gain", &mut || {
        multitask_gain(&multi30, &multi10)
    });

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (id, name, o, _) in &results {
        println!(
            "  [{}] {id}. {name}",
            if o.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
