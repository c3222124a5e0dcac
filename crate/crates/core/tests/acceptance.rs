//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the summary is always printed; exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use fedrac::assignment::assign_participants;
use fedrac::clustering::{optimal_clusters, DunnPoint, KMeansOptions};
use fedrac::config::{ExperimentConfig, Method};
use fedrac::convergence::{
    beta, mar_parallel, mar_sequential, precision_bound, rounds_for_cluster, ConvergenceConstants,
    ConvergenceParams,
};
use fedrac::engine::{
    assignment_params, cluster_plans, cluster_population, fedavg_aggregate, measure_inconsistency,
    prepare, run_experiment, trr_at, ExperimentReport, InconsistencyRecord,
};
use fedrac::fixtures;
use fedrac::metrics::rounds_to_reach;
use fedrac::model::{
    build_model, ce_loss_and_grad, forward, kd_loss_and_grad, KdParams, LayerShape, LogitBatch,
    ModelSpec, WeightVector,
};
use fedrac::resources::{normalize_resources, ResourceWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn curve_text(curve: &[DunnPoint]) -> String {
    curve
        .iter()
        .map(|p| match p.dunn_index {
            Some(v) => format!("DI({})={v:.4}", p.k),
            None => format!("DI({})=inf", p.k),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn normalization() -> Outcome {
    let start = Instant::now();
    let vectors: Vec<_> = fixtures::example_10().iter().map(|r| r.resources).collect();
    let out = normalize_resources(&vectors).unwrap();
    let elapsed = start.elapsed();
    let printed: [[f64; 3]; 10] = [
        [0.5, 0.375, 0.5],
        [0.0, 1.0, 1.0],
        [0.25, 0.125, 0.75],
        [0.75, 0.375, 0.25], // recomputed from [125, 10, 15]
        [1.0, 0.0, 0.0],
        [0.6, 0.375, 0.75],
        [0.75, 1.0, 0.5],
        [0.30, 0.375, 0.0],
        [0.25, 1.0, 0.5],
        [0.0, 0.375, 1.0],
    ];
    let worst = out
        .iter()
        .zip(&printed)
        .flat_map(|(v, e)| {
            v.components()
                .into_iter()
                .zip(*e)
                .map(|(a, b)| (a - b).abs())
        })
        .fold(0.0, f64::max);
    outcome(
        worst <= 1e-12 && elapsed < Duration::from_millis(1),
        format!("max deviation {worst:.1e}, {:.3} ms", ms(elapsed)),
    )
}

fn dunn_selection() -> Outcome {
    let opts = KMeansOptions::default();
    let select = |records: Vec<fedrac::resources::ResourceRecord>, w: ResourceWeights| {
        let vectors: Vec<_> = records.iter().map(|r| r.resources).collect();
        optimal_clusters(&normalize_resources(&vectors).unwrap(), &w, 42, &opts).unwrap()
    };
    let start = Instant::now();
    let small = select(fixtures::example_10(), ResourceWeights::equal());
    let large = select(
        fixtures::smartphones_40(),
        ResourceWeights::new(0.4, 0.4, 0.2).unwrap(),
    );
    let elapsed = start.elapsed();
    let reference = [0.1517, 0.1965, 0.2165, 0.2317, 0.1750];
    let values: Vec<f64> = large
        .curve
        .iter()
        .map(|p| p.dunn_index.unwrap_or(f64::INFINITY))
        .collect();
    let within = values
        .iter()
        .zip(reference)
        .all(|(v, r)| (v - r).abs() <= 0.05);
    let di5_max = values.len() >= 4 && values.iter().all(|&v| v <= values[3]);
    let pass = small.k == 3 && large.k == 5 && di5_max && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "example k*={} (want 3) [{}]; smartphones k*={} (want 5) [{}], soft values within 0.05: {within}, {:.0} ms",
            small.k,
            curve_text(&small.curve),
            large.k,
            curve_text(&large.curve),
            ms(elapsed)
        ),
    )
}

fn convergence_math() -> Outcome {
    let constants = ConvergenceConstants {
        smoothness: 1.5,
        strong_convexity: 0.7,
        grad_variance: 1.0,
        grad_bound: 0.0,
        w_gap_sq: 0.08 * 0.08,
        ..Default::default()
    };
    let start = Instant::now();
    let p = ConvergenceParams::new(constants, vec![1.0], 1.0).unwrap();
    let b = beta(&p, 20);
    let q_o = precision_bound(&p, 20, 120);
    let rounds = rounds_for_cluster(&p, 20, q_o).unwrap();
    let elapsed = start.elapsed();
    let pass = b == 20.0
        && rounds == 6
        && (q_o - 0.0447).abs() <= 1e-3
        && elapsed < Duration::from_millis(1);
    outcome(
        pass,
        format!(
            "beta={b}, q_o={q_o:.6}, rounds={rounds}, {:.3} ms",
            ms(elapsed)
        ),
    )
}

fn inconsistency() -> Outcome {
    let example = InconsistencyRecord::from_objectives(0.027, 0.036);
    let mut cfg = ExperimentConfig::default();
    cfg.population.fixture = "example_10".into();
    cfg.population.weights = [1.0 / 3.0; 3];
    cfg.data.instances_min = 400;
    cfg.data.instances_max = 400;
    cfg.data.test_size = 300;
    cfg.model.hidden_widths = vec![16];
    cfg.planning.round_cap = 10;
    let homogeneous = measure_inconsistency(&cfg).unwrap();
    outcome(
        (example.err - 0.009).abs() <= 1e-15 && homogeneous.err <= 1e-9,
        format!(
            "example err={:.15}, homogeneous err={:.1e}",
            example.err, homogeneous.err
        ),
    )
}

fn mar_formulas() -> Outcome {
    let par = mar_parallel(0.5, 3, 8.0);
    let seq = mar_sequential(0.5, 3, 8.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..1000 {
        let kappa = rng.gen_range(0.001..0.999);
        let m = rng.gen_range(1..=20);
        let t = rng.gen_range(0.1..1000.0);
        if mar_sequential(kappa, m, t) < mar_parallel(kappa, m, t) * (1.0 - 1e-12) && m >= 2 {
            violations += 1;
        }
    }
    outcome(
        par == 10.0 && seq == 14.0 && violations == 0,
        format!("parallel={par}, sequential={seq}, ordering violations {violations}/1000"),
    )
}

fn random_net(rng: &mut ChaCha8Rng) -> (WeightVector, Vec<f64>, Vec<usize>, LogitBatch) {
    let spec = ModelSpec {
        input_dim: rng.gen_range(2..6),
        hidden_widths: (0..rng.gen_range(1..3))
            .map(|_| rng.gen_range(2..7))
            .collect(),
        class_count: rng.gen_range(2..5),
        compression_factor: 1.0,
    };
    let mut w = build_model(&spec, 1, rng.gen()).unwrap();
    for v in w.values_mut() {
        *v += rng.gen_range(-0.3..0.3);
    }
    let rows = rng.gen_range(1..8);
    let x: Vec<f64> = (0..rows * spec.input_dim)
        .map(|_| rng.gen_range(-2.0..2.0))
        .collect();
    let y: Vec<usize> = (0..rows)
        .map(|_| rng.gen_range(0..spec.class_count))
        .collect();
    let teacher_w = build_model(&spec, 1, rng.gen()).unwrap();
    let teacher = forward(&teacher_w, &x).unwrap();
    (w, x, y, teacher)
}

/// Relative L2 distance between analytic and central-difference gradients.
fn fd_error(w: &WeightVector, grad: &WeightVector, loss: impl Fn(&WeightVector) -> f64) -> f64 {
    let h = 1e-5;
    let mut diff = 0.0;
    let mut norm = 0.0;
    for i in 0..w.len() {
        let mut plus = w.clone();
        plus.values_mut()[i] += h;
        let mut minus = w.clone();
        minus.values_mut()[i] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        diff += (fd - grad.values()[i]).powi(2);
        norm += fd.abs().max(grad.values()[i].abs()).powi(2);
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kd = KdParams {
        temperature: 2.0,
        lambda: 0.5,
    };
    let mut worst_ce: f64 = 0.0;
    let mut worst_kd: f64 = 0.0;
    let nets = 25;
    for _ in 0..nets {
        let (w, x, y, teacher) = random_net(&mut rng);
        let (_, g) = ce_loss_and_grad(&w, &x, &y).unwrap();
        worst_ce = worst_ce.max(fd_error(&w, &g, |v| ce_loss_and_grad(v, &x, &y).unwrap().0));
        let (_, g) = kd_loss_and_grad(&w, &x, &y, &teacher, kd).unwrap();
        worst_kd = worst_kd.max(fd_error(&w, &g, |v| {
            kd_loss_and_grad(v, &x, &y, &teacher, kd).unwrap().0
        }));
    }
    outcome(
        worst_ce <= 1e-5 && worst_kd <= 1e-5,
        format!("{nets} nets, worst relative error CE {worst_ce:.1e}, KD {worst_kd:.1e}"),
    )
}

fn aggregation() -> Outcome {
    let shape = vec![LayerShape {
        inputs: 1,
        outputs: 1,
    }];
    let scalar = |v: f64| WeightVector::from_parts(vec![v, 0.0], shape.clone()).unwrap();
    let weighted = fedavg_aggregate(&[scalar(0.0), scalar(4.0)], &[1, 3])
        .unwrap()
        .values()[0];
    let spec = ModelSpec {
        input_dim: 5,
        hidden_widths: vec![7, 3],
        class_count: 4,
        compression_factor: 0.5,
    };
    let w = build_model(&spec, 1, 8).unwrap();
    let idempotent = fedavg_aggregate(&[w.clone(), w.clone(), w.clone()], &[3, 9, 1]).unwrap() == w;
    let identity = fedavg_aggregate(std::slice::from_ref(&w), &[17]).unwrap() == w;
    outcome(
        weighted == 3.0 && idempotent && identity,
        format!("weighted mean {weighted}, idempotent {idempotent}, single identity {identity}"),
    )
}

/// The 40-smartphone population, m = 4, R capped at 60. The response-time budget
/// is scaled by 60/108 from the default so the per-round budget matches
/// the uncapped plan, and the learning rate is raised so that the smaller
/// models train within the cap.
fn end_to_end_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    cfg.clustering.m = Some(4);
    cfg.planning.round_cap = 60;
    cfg.timing.mar_seconds = 8400.0;
    cfg.training.learning_rate = 0.2;
    cfg
}

fn slave_mean(r: &ExperimentReport) -> Option<f64> {
    let accs: Vec<f64> = r.clusters[1..]
        .iter()
        .filter_map(|c| c.final_accuracy)
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let seeds = [42u64, 43, 44, 45, 46];
    let (mut kd_wins, mut trr_wins, mut loo_wins) = (0, 0, 0);
    let (mut small_gain, mut large_gain) = (Vec::new(), Vec::new());
    let mut notes = Vec::new();
    for &seed in &seeds {
        let cfg = end_to_end_config(seed);
        let with_kd = run_experiment(&cfg).unwrap().report;
        let mut c = cfg.clone();
        c.kd.enabled = false;
        let without_kd = run_experiment(&c).unwrap().report;
        let mut c = cfg.clone();
        c.baseline = Method::Fedavg;
        let fedavg = run_experiment(&c).unwrap().report;
        let mut c = cfg.clone();
        c.data.leave_one_out = true;
        let loo = run_experiment(&c).unwrap().report;

        if let (Some(a), Some(b)) = (slave_mean(&with_kd), slave_mean(&without_kd)) {
            kd_wins += usize::from(a > b);
        }
        let gain = |f: usize| {
            Some(with_kd.clusters[f].final_accuracy? - without_kd.clusters[f].final_accuracy?)
        };
        if let Some(g) = gain(with_kd.clusters.len() - 1) {
            small_gain.push(g);
        }
        if let Some(g) = gain(1) {
            large_gain.push(g);
        }

        let x = match (with_kd.plateau_threshold, fedavg.plateau_threshold) {
            (Some(a), Some(b)) => a.min(b),
            _ => f64::INFINITY,
        };
        let rac = trr_at(&with_kd.clusters, x);
        let avg = rounds_to_reach(&fedavg.clusters[0].accuracy_series(), x);
        trr_wins += usize::from(match (rac, avg) {
            (Some(r), Some(a)) => r <= a,
            (Some(_), None) => true,
            _ => false,
        });
        loo_wins += usize::from(loo.global_accuracy < with_kd.global_accuracy);
        notes.push(format!(
            "seed {seed}: slaves {:.3}/{:.3}, TRR {rac:?} vs FedAvg {avg:?} at x={x:.3}, global {:.3} vs loo {:.3}",
            slave_mean(&with_kd).unwrap_or(f64::NAN),
            slave_mean(&without_kd).unwrap_or(f64::NAN),
            with_kd.global_accuracy,
            loo.global_accuracy
        ));
    }
    let elapsed = start.elapsed();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (small, large) = (mean(&small_gain), mean(&large_gain));
    let a = kd_wins >= 4 && small > large;
    let b = trr_wins >= 4;
    let c = loo_wins == 5;
    for n in &notes {
        println!("    {n}");
    }
    outcome(
        a && b && c && elapsed < Duration::from_secs(300),
        format!(
            "(a) {} KD wins {kd_wins}/5, mean gain smallest {small:.4} vs largest slave {large:.4}; (b) {} TRR wins {trr_wins}/5; (c) {} loo drops {loo_wins}/5; {:.1} s",
            if a { "PASS" } else { "FAIL" },
            if b { "PASS" } else { "FAIL" },
            if c { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = end_to_end_config(42);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut listings = Vec::new();
    for d in &dirs {
        let files = run_experiment(&cfg).unwrap().write_to(d.path()).unwrap();
        let mut contents: Vec<(String, Vec<u8>)> = files
            .iter()
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(p).unwrap(),
                )
            })
            .collect();
        contents.sort();
        listings.push(contents);
    }
    outcome(
        listings[0] == listings[1],
        format!("{} files compared", listings[0].len()),
    )
}

fn assignment_totality() -> Outcome {
    let cfg = ExperimentConfig::default();
    let env = prepare(&cfg).unwrap();
    let m = cluster_population(&cfg, &env.records).unwrap().m;
    let plans = cluster_plans(&cfg, m).unwrap();
    match assign_participants(
        &env.profiles,
        &plans,
        &assignment_params(&cfg).unwrap(),
        &cfg.timing,
    ) {
        Ok(a) => {
            let mut csv = Vec::new();
            a.write_csv(&mut csv).unwrap();
            let snapshot = include_str!("../fixtures/smartphones_40_assignment.csv");
            let assigned = a.cluster_of.len();
            let matches = String::from_utf8(csv).unwrap() == snapshot;
            let sizes: Vec<usize> = a.clusters.iter().map(|c| c.members.len()).collect();
            outcome(
                assigned == 40 && matches,
                format!("{assigned}/40 assigned, sizes {sizes:?}, snapshot match {matches}"),
            )
        }
        Err(e) => outcome(false, format!("assignment failed: {e}")),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("normalization fixture", normalization),
        ("cluster-count selection", dunn_selection),
        ("convergence math", convergence_math),
        ("inconsistency", inconsistency),
        ("response-time formulas", mar_formulas),
        ("gradient correctness", gradients),
        ("aggregation properties", aggregation),
        ("end-to-end directions", end_to_end),
        ("determinism", determinism),
        ("assignment totality", assignment_totality),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "ACCEPTANCE {:>2} {} {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
