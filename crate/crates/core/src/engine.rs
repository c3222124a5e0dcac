//! Simulated federated training: local SGD, weighted aggregation, per-cluster
//! synchronous rounds, master-to-slave distillation and the end-to-end
//! pipeline from resource clustering to evaluation reports.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    assign_participants, plan_clusters, Assignment, AssignmentLogEntry, AssignmentParams,
    ClusterPlan, ParticipantProfile, PlanInputs, TimingModel, TrainingMode,
};
use crate::clustering::{
    compact_clusters, optimal_clusters, order_by_capacity, DunnPoint, KMeansOptions, Partition,
};
use crate::config::{ExperimentConfig, Method};
use crate::convergence::{error_bound, rounds_for_cluster, AccumulationVector};
use crate::data::{load_dataset_csv, partition_iid, synth_blobs, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, macro_f1, rounds_to_reach, total_required_rounds};
use crate::model::{
    build_model, ce_loss_and_grad, forward, kd_loss_and_grad, predict, KdParams, LogitBatch,
    WeightVector,
};
use crate::resources::{normalize_resources, NormalizedResourceVector, ResourceRecord};
use crate::seed;

/// Server-side inference with a trained teacher model, used to supply soft
/// targets for a student's own local batches.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOracle {
    weights: WeightVector,
}

impl TeacherOracle {
    pub fn new(weights: WeightVector) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn logits(&self, x: &[f64]) -> Result<LogitBatch> {
        forward(&self.weights, x)
    }
}

/// A participant's local training data: the first `n` rows of `data`.
#[derive(Debug, Clone, Copy)]
pub struct LocalData<'a> {
    pub id: &'a str,
    pub data: &'a Dataset,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainOptions {
    pub epochs: u32,
    pub batch: usize,
    pub learning_rate: f64,
    /// Proximal coefficient; 0 disables the term.
    pub mu_prox: f64,
    pub kd: KdParams,
    /// Draw each epoch with near-equal counts per class.
    pub balanced: bool,
    /// Run this many steps instead of floor(E n / B).
    pub tau_override: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub weights: WeightVector,
    /// Mean minibatch loss over the executed steps.
    pub loss: f64,
    pub steps: usize,
}

/// One epoch's visiting order over rows `0..n`. Balanced epochs give every
/// present class `n / k` or `n / k + 1` slots, reusing rows of small classes.
fn epoch_order(data: &Dataset, n: usize, balanced: bool, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if balanced {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
        for i in 0..n {
            by_class[data.labels()[i]].push(i);
        }
        let mut present: Vec<usize> = (0..by_class.len())
            .filter(|&c| !by_class[c].is_empty())
            .collect();
        present.shuffle(rng);
        let (base, extra) = (n / present.len(), n % present.len());
        order.clear();
        for (slot, &c) in present.iter().enumerate() {
            let members = &mut by_class[c];
            members.shuffle(rng);
            let want = base + usize::from(slot < extra);
            order.extend(members.iter().cycle().take(want));
        }
    }
    order.shuffle(rng);
    order
}

/// Per-class counts of a balanced epoch, for checking the sampler.
pub fn balanced_epoch_counts(data: &Dataset, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed, &[seed::LOCAL_TRAIN]);
    let mut counts = vec![0; data.class_count()];
    for i in epoch_order(data, n, true, &mut rng) {
        counts[data.labels()[i]] += 1;
    }
    counts
}

/// Runs floor(E n / B) minibatch SGD steps from `w_init` over shuffled
/// epochs of the local data. With a teacher the distillation loss replaces
/// cross-entropy; a positive `mu_prox` adds (mu/2)||w - w_init||^2.
pub fn local_train(
    local: LocalData<'_>,
    w_init: &WeightVector,
    opts: &LocalTrainOptions,
    teacher: Option<&TeacherOracle>,
    seed: u64,
) -> Result<LocalUpdate> {
    let n = local.n.min(local.data.len());
    if n == 0 {
        return Err(Error::NoData(local.id.to_string()));
    }
    let batch = opts.batch.clamp(1, n);
    let steps = opts
        .tau_override
        .unwrap_or((opts.epochs as usize * n) / batch);
    let mut rng = seed::rng(seed, &[]);
    let mut w = w_init.clone();
    let mut stream: Vec<usize> = Vec::new();
    let mut pos = 0;
    let mut total_loss = 0.0;
    for _ in 0..steps {
        if pos + batch > stream.len() {
            stream.drain(..pos);
            pos = 0;
            while stream.len() < batch {
                stream.extend(epoch_order(local.data, n, opts.balanced, &mut rng));
            }
        }
        let (x, y) = local.data.batch(&stream[pos..pos + batch]);
        pos += batch;
        let (loss, mut grad) = match teacher {
            Some(t) => kd_loss_and_grad(&w, &x, &y, &t.logits(&x)?, opts.kd)?,
            None => ce_loss_and_grad(&w, &x, &y)?,
        };
        if opts.mu_prox > 0.0 {
            for ((g, wi), w0) in grad
                .values_mut()
                .iter_mut()
                .zip(w.values())
                .zip(w_init.values())
            {
                *g += opts.mu_prox * (wi - w0);
            }
        }
        w.axpy(-opts.learning_rate, &grad)?;
        total_loss += loss;
    }
    if !w.is_finite() {
        return Err(Error::Shape(format!(
            "participant {} diverged to non-finite weights",
            local.id
        )));
    }
    Ok(LocalUpdate {
        weights: w,
        loss: if steps == 0 {
            0.0
        } else {
            total_loss / steps as f64
        },
        steps,
    })
}

/// Instance-weighted mean of participant weights, computed as
/// w_1 + sum_i (n_i / N)(w_i - w_1) in participant order so that averaging
/// identical weights returns them unchanged.
pub fn fedavg_aggregate(wpms: &[WeightVector], counts: &[usize]) -> Result<WeightVector> {
    if wpms.is_empty() || wpms.len() != counts.len() {
        return Err(Error::Shape(format!(
            "{} weight vectors for {} counts",
            wpms.len(),
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(Error::Shape("instance counts must be positive".into()));
    }
    let total: usize = counts.iter().sum();
    let anchor = &wpms[0];
    let mut out = anchor.clone();
    for (w, &n) in wpms.iter().zip(counts) {
        anchor.check_same_shape(w)?;
        let share = n as f64 / total as f64;
        for ((o, &wi), &a) in out
            .values_mut()
            .iter_mut()
            .zip(w.values())
            .zip(anchor.values())
        {
            *o += share * (wi - a);
        }
    }
    Ok(out)
}

/// Metrics and timing of one communication round of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub cluster: usize,
    pub round: usize,
    pub participant_losses: Vec<f64>,
    /// Instance-weighted mean of the local losses.
    pub global_loss: f64,
    /// Slowest member's time this round.
    pub round_seconds: f64,
    pub cumulative_seconds: f64,
    /// Whether the cumulative time exceeds the cluster's budget.
    pub mar_violation: bool,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ClusterMember<'a> {
    /// Position in the population, used to derive the member's RNG stream.
    pub index: usize,
    pub profile: &'a ParticipantProfile,
    pub data: &'a Dataset,
}

#[derive(Debug, Clone)]
pub struct ClusterRunOptions<'a> {
    pub plan: &'a ClusterPlan,
    pub learning_rate: f64,
    pub mu_prox: f64,
    pub kd: KdParams,
    pub balanced: bool,
    pub timing: &'a TimingModel,
    pub test: &'a Dataset,
    pub seed: u64,
    pub tau_override: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub weights: WeightVector,
    pub history: Vec<RoundReport>,
}

/// Synchronous rounds of one cluster: broadcast, local training on every
/// member, aggregation and evaluation on the test set.
pub fn run_cluster_fl(
    members: &[ClusterMember<'_>],
    init: WeightVector,
    opts: &ClusterRunOptions<'_>,
    teacher: Option<&TeacherOracle>,
) -> Result<ClusterOutcome> {
    if members.is_empty() {
        return Err(Error::NoData(format!("cluster {}", opts.plan.rank)));
    }
    let plan = opts.plan;
    let params = init.len();
    let counts: Vec<usize> = members.iter().map(|m| m.profile.n).collect();
    let total: usize = counts.iter().sum();
    let round_seconds = members
        .iter()
        .map(|m| {
            opts.timing
                .round_seconds(&m.profile.with_epochs(plan.epochs), params)
        })
        .fold(0.0, f64::max);
    let mut global = init;
    let mut history = Vec::with_capacity(plan.rounds as usize);
    let mut cumulative = 0.0;
    for round in 1..=plan.rounds as usize {
        let updates = members
            .par_iter()
            .map(|m| {
                let local_opts = LocalTrainOptions {
                    epochs: plan.epochs,
                    batch: m.profile.batch,
                    learning_rate: opts.learning_rate,
                    mu_prox: opts.mu_prox,
                    kd: opts.kd,
                    balanced: opts.balanced,
                    tau_override: opts.tau_override,
                };
                let stream = seed::derive(
                    opts.seed,
                    &[
                        seed::LOCAL_TRAIN,
                        plan.rank as u64,
                        round as u64,
                        m.index as u64,
                    ],
                );
                local_train(
                    LocalData {
                        id: &m.profile.id,
                        data: m.data,
                        n: m.profile.n,
                    },
                    &global,
                    &local_opts,
                    teacher,
                    stream,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let losses: Vec<f64> = updates.iter().map(|u| u.loss).collect();
        let weights: Vec<WeightVector> = updates.into_iter().map(|u| u.weights).collect();
        global = fedavg_aggregate(&weights, &counts)?;
        let preds = predict(&global, opts.test.features())?;
        cumulative += round_seconds;
        history.push(RoundReport {
            cluster: plan.rank,
            round,
            global_loss: losses
                .iter()
                .zip(&counts)
                .map(|(l, &n)| l * n as f64)
                .sum::<f64>()
                / total as f64,
            participant_losses: losses,
            round_seconds,
            cumulative_seconds: cumulative,
            mar_violation: cumulative > plan.mar_share * (1.0 + 1e-12),
            accuracy: accuracy(&preds, opts.test.labels())?,
            macro_f1: macro_f1(&preds, opts.test.labels(), opts.test.class_count())?,
        });
    }
    Ok(ClusterOutcome {
        weights: global,
        history,
    })
}

/// Participants' data and profiles for one experiment.
#[derive(Debug, Clone)]
pub struct Environment {
    pub records: Vec<ResourceRecord>,
    pub shards: Vec<Dataset>,
    pub test: Dataset,
    pub profiles: Vec<ParticipantProfile>,
    pub left_out_class: Option<usize>,
}

/// Draws local instance counts, generates or loads the data, splits off a
/// stratified test set and shards the rest across participants.
pub fn prepare(config: &ExperimentConfig) -> Result<Environment> {
    let records = config.population()?;
    let d = &config.data;
    let mut rng = seed::rng(config.seed, &[seed::DATA, 1]);
    let counts: Vec<usize> = records
        .iter()
        .map(|_| rng.gen_range(d.instances_min..=d.instances_max))
        .collect();
    let needed = counts.iter().sum::<usize>() + d.test_size;
    let ds = match &d.path {
        Some(path) => {
            let ds = load_dataset_csv(path, Some(d.classes))?;
            if ds.dim() != d.dim {
                return Err(Error::Config(format!(
                    "data.dim is {} but {} has {} feature columns",
                    d.dim,
                    path.display(),
                    ds.dim()
                )));
            }
            ds
        }
        None => synth_blobs(d.classes, d.dim, needed, d.separation, config.seed)?,
    };
    let mut sizes = vec![d.test_size];
    sizes.extend(&counts);
    let mut parts = partition_iid(&ds, &sizes, config.seed)?;
    let test = parts.remove(0);
    let mut shards = parts;

    let mut left_out_class = None;
    if d.leave_one_out {
        let class = match d.left_out_class {
            Some(c) => c,
            None => {
                let mut totals = vec![0usize; ds.class_count()];
                for s in &shards {
                    for (t, c) in totals.iter_mut().zip(s.class_counts()) {
                        *t += c;
                    }
                }
                (0..totals.len())
                    .max_by(|&a, &b| totals[a].cmp(&totals[b]).then(b.cmp(&a)))
                    .unwrap_or(0)
            }
        };
        if !shards.iter().any(|s| s.labels().contains(&class)) {
            return Err(Error::InvalidClass(class));
        }
        shards = shards
            .iter()
            .map(|s| {
                let keep: Vec<usize> = (0..s.len()).filter(|&i| s.labels()[i] != class).collect();
                s.subset(&keep, &format!("without class {class}"))
            })
            .collect();
        left_out_class = Some(class);
    }

    let profiles = records
        .iter()
        .zip(&shards)
        .map(|(r, s)| {
            if s.len() < config.training.batch_size {
                return Err(Error::Config(format!(
                    "participant {} has {} training instances, fewer than the batch size {}",
                    r.id,
                    s.len(),
                    config.training.batch_size
                )));
            }
            ParticipantProfile::new(
                r.id.clone(),
                r.resources,
                s.len(),
                config.training.batch_size,
                config.training.local_epochs[0],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Environment {
        records,
        shards,
        test,
        profiles,
        left_out_class,
    })
}

/// Dunn-index selection, capacity ordering and optional compaction.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringOutcome {
    pub normalized: Vec<NormalizedResourceVector>,
    pub k_star: usize,
    pub curve: Vec<DunnPoint>,
    /// Dunn-optimal clusters, highest capacity first.
    pub ordered: Partition,
    /// Clusters actually trained, highest capacity first; `None` when a
    /// single cluster is requested.
    pub compacted: Option<Partition>,
    pub m: usize,
}

pub fn cluster_population(
    config: &ExperimentConfig,
    records: &[ResourceRecord],
) -> Result<ClusteringOutcome> {
    let w = config.weights()?;
    let vectors: Vec<_> = records.iter().map(|r| r.resources).collect();
    let normalized = normalize_resources(&vectors)?;
    let opts = KMeansOptions {
        restarts: config.clustering.restarts,
        max_iter: config.clustering.max_iter,
    };
    let selection = optimal_clusters(&normalized, &w, config.seed, &opts)?;
    let ordered = order_by_capacity(&selection.partition, &normalized, &w);
    let k = selection.k;
    let (m, compacted) = match config.clustering.m {
        None => (k, Some(ordered.clone())),
        Some(1) => (1, None),
        Some(m) if m == k => (m, Some(ordered.clone())),
        Some(m) if m < k => (m, Some(compact_clusters(&ordered, m, &normalized, &w)?)),
        Some(m) => {
            return Err(Error::Config(format!(
                "cannot train {m} clusters: the population only supports k* = {k}"
            )))
        }
    };
    Ok(ClusteringOutcome {
        normalized,
        k_star: k,
        curve: selection.curve,
        ordered,
        compacted,
        m,
    })
}

/// Empty cluster plans for `m` clusters under the config.
pub fn cluster_plans(config: &ExperimentConfig, m: usize) -> Result<Vec<ClusterPlan>> {
    let spec = config.model_spec();
    plan_clusters(
        &PlanInputs {
            base_model: &spec,
            m,
            epochs: &config.training.local_epochs,
            constants: &config.convergence,
            class_count: config.data.classes,
            target_precision: config.planning.target_precision,
            round_cap: config.planning.round_cap,
            delta_slack: config.planning.delta_slack,
            theta: config.planning.theta,
        },
        &config.timing,
    )
}

pub fn assignment_params(config: &ExperimentConfig) -> Result<AssignmentParams> {
    Ok(AssignmentParams {
        constants: config.convergence.clone(),
        class_count: config.data.classes,
        weights: config.weights()?,
        reduction_step: config.planning.reduction_step,
        max_reductions: config.planning.max_reductions,
    })
}

/// Results of one trained cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub rank: usize,
    pub members: Vec<String>,
    pub hidden_widths: Vec<usize>,
    pub param_count: usize,
    pub epochs: u32,
    pub rounds: u32,
    pub mar_share: f64,
    pub final_accuracy: Option<f64>,
    pub final_macro_f1: Option<f64>,
    pub rounds_to_threshold: Option<usize>,
    pub history: Vec<RoundReport>,
}

impl ClusterReport {
    pub fn accuracy_series(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.accuracy).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub seed: u64,
    pub kd_enabled: bool,
    pub mode: TrainingMode,
    pub k_star: Option<usize>,
    pub dunn_curve: Vec<DunnPoint>,
    pub m: usize,
    pub left_out_class: Option<usize>,
    pub clusters: Vec<ClusterReport>,
    /// Mean over trained clusters of their final test accuracy.
    pub global_accuracy: f64,
    pub global_macro_f1: f64,
    /// 90% of the global accuracy plateau; see [`global_plateau_threshold`].
    pub plateau_threshold: Option<f64>,
    pub total_required_rounds: Option<usize>,
    pub simulated_seconds: f64,
    pub assignment: Vec<AssignmentLogEntry>,
}

/// Everything a run produces: the report plus trained weights per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub models: Vec<(usize, WeightVector)>,
    pub assignment: Option<Assignment>,
}

/// 90% of the mean of the last five values (or all, if fewer).
pub fn plateau_threshold(series: &[f64]) -> Option<f64> {
    if series.is_empty() {
        return None;
    }
    let tail = &series[series.len().saturating_sub(5)..];
    Some(0.9 * tail.iter().sum::<f64>() / tail.len() as f64)
}

/// 90% of the mean, over trained clusters, of each cluster's accuracy
/// averaged over its last five rounds.
pub fn global_plateau_threshold(clusters: &[ClusterReport]) -> Option<f64> {
    let plateaus: Vec<f64> = clusters
        .iter()
        .filter_map(|c| plateau_threshold(&c.accuracy_series()))
        .collect();
    if plateaus.is_empty() {
        return None;
    }
    Some(plateaus.iter().sum::<f64>() / plateaus.len() as f64)
}

/// Rounds of the first cluster to reach `x` plus the slowest other
/// cluster's; `None` if any trained cluster never reaches it.
pub fn trr_at(clusters: &[ClusterReport], x: f64) -> Option<usize> {
    let trained: Vec<&ClusterReport> = clusters.iter().filter(|c| !c.history.is_empty()).collect();
    let (master, slaves) = trained.split_first()?;
    let master_rounds = rounds_to_reach(&master.accuracy_series(), x)?;
    let slave_rounds = slaves
        .iter()
        .map(|c| rounds_to_reach(&c.accuracy_series(), x))
        .collect::<Option<Vec<_>>>()?;
    Some(total_required_rounds(master_rounds, &slave_rounds))
}

fn summarize(
    config: &ExperimentConfig,
    env: &Environment,
    clustering: Option<&ClusteringOutcome>,
    plans: &[ClusterPlan],
    outcomes: Vec<Option<ClusterOutcome>>,
    assignment: Option<Assignment>,
) -> ExperimentOutcome {
    let mut clusters = Vec::with_capacity(plans.len());
    let mut models = Vec::new();
    for (plan, outcome) in plans.iter().zip(outcomes) {
        let (history, final_acc, final_f1) = match outcome {
            Some(o) => {
                let last = o.history.last().cloned();
                models.push((plan.rank, o.weights));
                (
                    o.history,
                    last.as_ref().map(|r| r.accuracy),
                    last.as_ref().map(|r| r.macro_f1),
                )
            }
            None => (Vec::new(), None, None),
        };
        clusters.push(ClusterReport {
            rank: plan.rank,
            members: plan.members.clone(),
            hidden_widths: plan.model_spec.hidden_widths.clone(),
            param_count: plan.param_count(),
            epochs: plan.epochs,
            rounds: plan.rounds,
            mar_share: plan.mar_share,
            final_accuracy: final_acc,
            final_macro_f1: final_f1,
            rounds_to_threshold: None,
            history,
        });
    }
    let trained: Vec<&ClusterReport> = clusters
        .iter()
        .filter(|c| c.final_accuracy.is_some())
        .collect();
    let mean = |f: fn(&ClusterReport) -> f64| {
        trained.iter().map(|c| f(c)).sum::<f64>() / trained.len().max(1) as f64
    };
    let global_accuracy = mean(|c| c.final_accuracy.unwrap_or(0.0));
    let global_macro_f1 = mean(|c| c.final_macro_f1.unwrap_or(0.0));
    let threshold = global_plateau_threshold(&clusters);
    if let Some(x) = threshold {
        for c in &mut clusters {
            c.rounds_to_threshold = rounds_to_reach(&c.accuracy_series(), x);
        }
    }
    let times: Vec<f64> = clusters
        .iter()
        .map(|c| c.history.last().map_or(0.0, |r| r.cumulative_seconds))
        .collect();
    let simulated_seconds = match config.timing.mode {
        TrainingMode::Parallel => times[0] + times[1..].iter().cloned().fold(0.0, f64::max),
        TrainingMode::Sequential => times.iter().sum(),
    };
    let report = ExperimentReport {
        method: config.baseline,
        seed: config.seed,
        kd_enabled: config.kd.enabled && config.baseline == Method::Fedrac,
        mode: config.timing.mode,
        k_star: clustering.map(|c| c.k_star),
        dunn_curve: clustering.map(|c| c.curve.clone()).unwrap_or_default(),
        m: plans.len(),
        left_out_class: env.left_out_class,
        total_required_rounds: threshold.and_then(|x| trr_at(&clusters, x)),
        clusters,
        global_accuracy,
        global_macro_f1,
        plateau_threshold: threshold,
        simulated_seconds,
        assignment: assignment
            .as_ref()
            .map(|a| a.log.clone())
            .unwrap_or_default(),
    };
    ExperimentOutcome {
        report,
        models,
        assignment,
    }
}

/// Runs the configured method end to end.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let env = prepare(config)?;
    match config.baseline {
        Method::Fedrac => run_fedrac(config, &env),
        Method::Fedavg | Method::Fedprox => run_baseline(config, &env),
    }
}

fn cluster_members<'a>(
    env: &'a Environment,
    assignment: &'a Assignment,
    cluster: usize,
) -> Vec<ClusterMember<'a>> {
    assignment
        .members(cluster)
        .into_iter()
        .map(|(index, profile)| ClusterMember {
            index,
            profile,
            data: &env.shards[index],
        })
        .collect()
}

/// Clusters participants by resources, assigns them, trains the master
/// cluster and then every slave cluster, distilling from the master (or,
/// in sequential mode, from the previous cluster).
pub fn run_fedrac(config: &ExperimentConfig, env: &Environment) -> Result<ExperimentOutcome> {
    let clustering = cluster_population(config, &env.records)?;
    let m = clustering.m;
    let plans = cluster_plans(config, m)?;
    let assignment = assign_participants(
        &env.profiles,
        &plans,
        &assignment_params(config)?,
        &config.timing,
    )?;
    let plans = assignment.clusters.clone();
    if plans[0].members.is_empty() {
        return Err(Error::Infeasible {
            id: "cluster 1".into(),
            reason: "no participant can train the full model within its budget".into(),
        });
    }
    let spec = config.model_spec();
    let kd = config.kd.params();
    let options = |plan: &'_ ClusterPlan, balanced: bool| -> ClusterRunOptions<'_> {
        ClusterRunOptions {
            plan: &plans[plan.id],
            learning_rate: config.training.learning_rate,
            mu_prox: 0.0,
            kd,
            balanced,
            timing: &config.timing,
            test: &env.test,
            seed: config.seed,
            tau_override: None,
        }
    };

    let balanced_master = config.training.balanced_master && m > 1;
    let master = run_cluster_fl(
        &cluster_members(env, &assignment, 0),
        build_model(&spec, 1, config.seed)?,
        &options(&plans[0], balanced_master),
        None,
    )?;

    let train_slave =
        |f: usize, teacher: Option<&TeacherOracle>| -> Result<Option<ClusterOutcome>> {
            let members = cluster_members(env, &assignment, f);
            if members.is_empty() {
                return Ok(None);
            }
            let teacher = if config.kd.enabled { teacher } else { None };
            run_cluster_fl(
                &members,
                build_model(&spec, plans[f].rank, config.seed)?,
                &options(&plans[f], false),
                teacher,
            )
            .map(Some)
        };

    let mut outcomes: Vec<Option<ClusterOutcome>> = Vec::with_capacity(m);
    match config.timing.mode {
        TrainingMode::Parallel => {
            let oracle = TeacherOracle::new(master.weights.clone());
            let slaves = (1..m)
                .into_par_iter()
                .map(|f| train_slave(f, Some(&oracle)))
                .collect::<Result<Vec<_>>>()?;
            outcomes.push(Some(master));
            outcomes.extend(slaves);
        }
        TrainingMode::Sequential => {
            let mut teacher = TeacherOracle::new(master.weights.clone());
            outcomes.push(Some(master));
            for f in 1..m {
                let out = train_slave(f, Some(&teacher))?;
                if let Some(o) = &out {
                    teacher = TeacherOracle::new(o.weights.clone());
                }
                outcomes.push(out);
            }
        }
    }
    Ok(summarize(
        config,
        env,
        Some(&clustering),
        &plans,
        outcomes,
        Some(assignment),
    ))
}

/// The single-cluster plan used by the baselines: every participant trains
/// the smallest Fed-RAC model with its original workload.
fn baseline_plan(config: &ExperimentConfig, m: usize, members: Vec<String>) -> Result<ClusterPlan> {
    let mut plan = cluster_plans(config, m)?.pop().expect("m >= 1 plans");
    plan.mar_share = config.timing.mar_seconds;
    plan.members = members;
    Ok(plan)
}

/// FedAvg (or FedProx) over the whole population on the smallest model.
pub fn run_baseline(config: &ExperimentConfig, env: &Environment) -> Result<ExperimentOutcome> {
    let clustering = match config.clustering.m {
        Some(_) => None,
        None => Some(cluster_population(config, &env.records)?),
    };
    let m = config
        .clustering
        .m
        .or(clustering.as_ref().map(|c| c.m))
        .unwrap_or(1);
    let mut plan = baseline_plan(
        config,
        m,
        env.profiles.iter().map(|p| p.id.clone()).collect(),
    )?;
    plan.id = 0;
    let profiles: Vec<ParticipantProfile> = env
        .profiles
        .iter()
        .map(|p| p.with_epochs(plan.epochs))
        .collect();
    let members: Vec<ClusterMember> = profiles
        .iter()
        .enumerate()
        .map(|(index, profile)| ClusterMember {
            index,
            profile,
            data: &env.shards[index],
        })
        .collect();
    let opts = ClusterRunOptions {
        plan: &plan,
        learning_rate: config.training.learning_rate,
        mu_prox: if config.baseline == Method::Fedprox {
            config.training.mu_prox
        } else {
            0.0
        },
        kd: config.kd.params(),
        balanced: false,
        timing: &config.timing,
        test: &env.test,
        seed: config.seed,
        tau_override: None,
    };
    let outcome = run_cluster_fl(
        &members,
        build_model(&config.model_spec(), plan.rank, config.seed)?,
        &opts,
        None,
    )?;
    let plans = [plan];
    Ok(summarize(
        config,
        env,
        clustering.as_ref(),
        &plans,
        vec![Some(outcome)],
        None,
    ))
}

/// Objectives of the same population trained with its own unequal local
/// step counts and with every participant limited to the smallest count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyRecord {
    /// Objective reached with equal local step counts.
    pub actual: f64,
    /// Objective reached with the participants' own step counts.
    pub inconsistent: f64,
    pub err: f64,
    /// Analytic bound for the same configuration.
    pub bound: Option<f64>,
}

impl InconsistencyRecord {
    pub fn from_objectives(actual: f64, inconsistent: f64) -> Self {
        Self {
            actual,
            inconsistent,
            err: (inconsistent - actual).abs(),
            bound: None,
        }
    }
}

/// Instance-weighted mean cross-entropy of `w` over every participant's
/// training data.
fn population_objective(w: &WeightVector, members: &[ClusterMember<'_>]) -> Result<f64> {
    let total: usize = members.iter().map(|m| m.profile.n).sum();
    let mut sum = 0.0;
    for m in members {
        let rows: Vec<usize> = (0..m.profile.n).collect();
        let (x, y) = m.data.batch(&rows);
        sum += ce_loss_and_grad(w, &x, &y)?.0 * m.profile.n as f64;
    }
    Ok(sum / total as f64)
}

/// Trains the whole population as one FedAvg cluster on the full model,
/// once with each participant's own local step count and once with all
/// counts forced to the minimum (same seeds), and compares the resulting
/// objectives.
pub fn measure_inconsistency(config: &ExperimentConfig) -> Result<InconsistencyRecord> {
    config.validate()?;
    let env = prepare(config)?;
    let plan = baseline_plan(
        config,
        1,
        env.profiles.iter().map(|p| p.id.clone()).collect(),
    )?;
    let profiles: Vec<ParticipantProfile> = env
        .profiles
        .iter()
        .map(|p| p.with_epochs(plan.epochs))
        .collect();
    let members: Vec<ClusterMember> = profiles
        .iter()
        .enumerate()
        .map(|(index, profile)| ClusterMember {
            index,
            profile,
            data: &env.shards[index],
        })
        .collect();
    let init = build_model(&config.model_spec(), 1, config.seed)?;
    let mut opts = ClusterRunOptions {
        plan: &plan,
        learning_rate: config.training.learning_rate,
        mu_prox: 0.0,
        kd: config.kd.params(),
        balanced: false,
        timing: &config.timing,
        test: &env.test,
        seed: config.seed,
        tau_override: None,
    };
    let heterogeneous = run_cluster_fl(&members, init.clone(), &opts, None)?;
    let min_tau = profiles.iter().map(|p| p.tau).min().unwrap_or(0);
    opts.tau_override = Some(min_tau);
    let equal = run_cluster_fl(&members, init, &opts, None)?;

    let mut record = InconsistencyRecord::from_objectives(
        population_objective(&equal.weights, &members)?,
        population_objective(&heterogeneous.weights, &members)?,
    );
    let counts: Vec<usize> = profiles.iter().map(|p| p.n).collect();
    let params = config
        .convergence
        .for_counts(&counts, config.data.classes)?;
    let o = profiles
        .iter()
        .map(|p| AccumulationVector::fedavg(p.tau.max(1)))
        .collect::<Result<Vec<_>>>()?;
    record.bound = Some(error_bound(&params, &o, plan.rounds, o.len())?);
    Ok(record)
}

/// Rounds the planner would give a lone participant at `epochs`, capped.
pub fn planned_rounds(config: &ExperimentConfig, epochs: u32) -> Result<u32> {
    let single = config
        .convergence
        .for_weights(vec![1.0], config.data.classes)?;
    Ok(
        rounds_for_cluster(&single, epochs, config.planning.target_precision)?
            .min(config.planning.round_cap),
    )
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::malformed(path, e.to_string()))
    }

    /// One row per cluster and round.
    pub fn write_rounds_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "cluster",
            "round",
            "global_loss",
            "round_seconds",
            "cumulative_seconds",
            "mar_violation",
            "accuracy",
            "macro_f1",
        ])?;
        for c in &self.clusters {
            for r in &c.history {
                w.write_record([
                    r.cluster.to_string(),
                    r.round.to_string(),
                    r.global_loss.to_string(),
                    r.round_seconds.to_string(),
                    r.cumulative_seconds.to_string(),
                    r.mar_violation.to_string(),
                    r.accuracy.to_string(),
                    r.macro_f1.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

impl ExperimentOutcome {
    /// Writes `report.json`, `rounds.csv`, `assignment.csv` (Fed-RAC runs)
    /// and one weight checkpoint per trained cluster into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let json_path = dir.join("report.json");
        let mut json = self.report.to_json()?;
        json.push('\n');
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        written.push(json_path);

        let csv_path = dir.join("rounds.csv");
        let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.report.write_rounds_csv(file)?;
        written.push(csv_path);

        if let Some(a) = &self.assignment {
            let path = dir.join("assignment.csv");
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            a.write_csv(file)?;
            written.push(path);
        }
        for (rank, w) in &self.models {
            let path = dir.join(format!("model_c{rank}.bin"));
            w.save(&path)?;
            written.push(path);
        }
        Ok(written)
    }
}
