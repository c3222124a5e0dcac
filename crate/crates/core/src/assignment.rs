//! Placement of participants into ranked clusters under a response-time
//! budget, with workload reduction and downgrading as fallbacks.

use serde::{Deserialize, Serialize};

use crate::convergence::{
    error_bound, homogeneous_error_bound, precision_bound, rounds_for_cluster, AccumulationVector,
    ConvergenceConstants,
};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::resources::{normalize_resources, ResourceVector, ResourceWeights};

/// A participant's resources and local workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantProfile {
    pub id: String,
    pub resources: ResourceVector,
    /// Local instances used for training.
    pub n: usize,
    /// Minibatch size.
    pub batch: usize,
    pub epochs: u32,
    /// Local SGD steps per round, floor(E n / B).
    pub tau: usize,
}

pub fn local_steps(epochs: u32, n: usize, batch: usize) -> usize {
    (epochs as usize * n) / batch
}

impl ParticipantProfile {
    pub fn new(
        id: impl Into<String>,
        resources: ResourceVector,
        n: usize,
        batch: usize,
        epochs: u32,
    ) -> Result<Self> {
        let id = id.into();
        if batch == 0 || n < batch || epochs == 0 {
            return Err(Error::Config(format!(
                "participant {id}: need n >= B >= 1 and E >= 1, got n={n}, B={batch}, E={epochs}"
            )));
        }
        Ok(Self {
            id,
            resources,
            n,
            batch,
            epochs,
            tau: local_steps(epochs, n, batch),
        })
    }

    pub fn with_epochs(&self, epochs: u32) -> Self {
        Self {
            epochs,
            tau: local_steps(epochs, self.n, self.batch),
            ..self.clone()
        }
    }
}

/// Halves (or otherwise scales) the local workload: n <- max(floor(n step), B)
/// and tau is recomputed.
pub fn reduce_workload(p: &ParticipantProfile, step: f64) -> Result<ParticipantProfile> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::Config(format!(
            "reduction step must be in (0, 1), got {step}"
        )));
    }
    if p.n <= p.batch {
        return Err(Error::AtFloor {
            id: p.id.clone(),
            batch: p.batch,
        });
    }
    let n = ((p.n as f64 * step).floor() as usize).max(p.batch);
    Ok(ParticipantProfile {
        n,
        tau: local_steps(p.epochs, n, p.batch),
        ..p.clone()
    })
}

/// How the response-time budget is spread over the clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// Master first, then every slave cluster at once.
    #[default]
    Parallel,
    /// Each cluster waits for the previous one.
    Sequential,
}

/// Simulated device and network cost of training.
///
/// The dense models used here stand in for much larger networks, so
/// parameter counts are multiplied by `param_scale` before converting them
/// to FLOPs and bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingModel {
    pub mar_seconds: f64,
    pub kappa: f64,
    pub mode: TrainingMode,
    pub param_scale: f64,
    pub bytes_per_param: f64,
    /// Training FLOPs per parameter per instance (forward plus backward).
    pub flops_per_param: f64,
    pub flops_per_cycle: f64,
    /// Peak memory as a multiple of the parameter footprint.
    pub memory_overhead: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            mar_seconds: 15000.0,
            kappa: 0.5,
            mode: TrainingMode::Parallel,
            param_scale: 1000.0,
            bytes_per_param: 4.0,
            flops_per_param: 6.0,
            flops_per_cycle: 0.02,
            memory_overhead: 4.0,
        }
    }
}

impl TimingModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mar_seconds", self.mar_seconds),
            ("param_scale", self.param_scale),
            ("bytes_per_param", self.bytes_per_param),
            ("flops_per_param", self.flops_per_param),
            ("flops_per_cycle", self.flops_per_cycle),
            ("memory_overhead", self.memory_overhead),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "timing.{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!(
                "timing.kappa must be in (0, 1), got {}",
                self.kappa
            )));
        }
        Ok(())
    }

    /// Seconds for one local epoch over `n` instances.
    pub fn compute_seconds(&self, r: &ResourceVector, params: usize, n: usize) -> f64 {
        let flops = self.flops_per_param * params as f64 * self.param_scale * n as f64;
        flops / (r.processing_speed * 1e9 * self.flops_per_cycle)
    }

    /// Seconds to upload one set of weights.
    pub fn upload_seconds(&self, r: &ResourceVector, params: usize) -> f64 {
        self.model_bytes(params) * 8.0 / (r.transmission_rate * 1e6)
    }

    pub fn model_bytes(&self, params: usize) -> f64 {
        params as f64 * self.param_scale * self.bytes_per_param
    }

    pub fn fits_memory(&self, r: &ResourceVector, params: usize) -> bool {
        self.model_bytes(params) * self.memory_overhead <= r.memory * 1e9
    }

    /// Per-round time T_a E + T_c.
    pub fn round_seconds(&self, p: &ParticipantProfile, params: usize) -> f64 {
        self.compute_seconds(&p.resources, params, p.n) * f64::from(p.epochs)
            + self.upload_seconds(&p.resources, params)
    }

    /// Base budget T_m: the response-time budget divided by
    /// kappa^(m-1) + 1 in parallel mode or by the geometric sum of the
    /// cluster factors in sequential mode.
    pub fn slowest_budget(&self, m: usize) -> f64 {
        if m <= 1 {
            return self.mar_seconds;
        }
        let k = self.kappa;
        match self.mode {
            TrainingMode::Parallel => self.mar_seconds / (k.powi(m as i32 - 1) + 1.0),
            TrainingMode::Sequential => self.mar_seconds * (1.0 - k) / (1.0 - k.powi(m as i32)),
        }
    }

    /// Budget of the cluster with 1-based `rank` out of `m`:
    /// kappa^(rank - 1) times the base budget, so the master gets the most.
    pub fn cluster_share(&self, rank: usize, m: usize) -> f64 {
        if m <= 1 {
            return self.mar_seconds;
        }
        self.kappa.powi(rank as i32 - 1) * self.slowest_budget(m)
    }
}

/// How the error threshold of a cluster is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorThreshold {
    /// Multiple of the bound the same number of members would have if they
    /// all ran the candidate membership's mean local step count.
    Relative(f64),
    Absolute(f64),
}

impl Default for ErrorThreshold {
    fn default() -> Self {
        ErrorThreshold::Relative(1.25)
    }
}

/// One cluster of the training plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlan {
    /// 0-based position, equal to `rank - 1`.
    pub id: usize,
    /// 1 = most resources.
    pub rank: usize,
    /// Model of this cluster, already compressed for its rank.
    pub model_spec: ModelSpec,
    pub epochs: u32,
    pub rounds: u32,
    pub delta: f64,
    pub theta: ErrorThreshold,
    pub mar_share: f64,
    pub members: Vec<String>,
}

impl ClusterPlan {
    pub fn param_count(&self) -> usize {
        self.model_spec.param_count(1)
    }
}

/// Inputs shared by every cluster plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanInputs<'a> {
    pub base_model: &'a ModelSpec,
    pub m: usize,
    /// Local epochs per cluster; the last entry repeats for deeper ranks.
    pub epochs: &'a [u32],
    pub constants: &'a ConvergenceConstants,
    pub class_count: usize,
    pub target_precision: f64,
    pub round_cap: u32,
    pub delta_slack: f64,
    pub theta: ErrorThreshold,
}

/// Builds `m` empty cluster plans. The round budget of each cluster is the
/// count needed to reach the target precision for a single participant,
/// capped; the precision threshold is that participant's bound at the
/// budget plus slack.
pub fn plan_clusters(inputs: &PlanInputs, timing: &TimingModel) -> Result<Vec<ClusterPlan>> {
    if inputs.m == 0 || inputs.epochs.is_empty() || inputs.round_cap == 0 {
        return Err(Error::Config(
            "plan needs m >= 1, epochs and a positive round cap".into(),
        ));
    }
    let single = inputs
        .constants
        .for_weights(vec![1.0], inputs.class_count)?;
    (1..=inputs.m)
        .map(|rank| {
            let epochs = inputs.epochs[(rank - 1).min(inputs.epochs.len() - 1)];
            if epochs == 0 {
                return Err(Error::Config("local epochs must be positive".into()));
            }
            let rounds =
                rounds_for_cluster(&single, epochs, inputs.target_precision)?.min(inputs.round_cap);
            let delta = inputs.delta_slack
                * precision_bound(&single, epochs, u64::from(epochs) * u64::from(rounds));
            Ok(ClusterPlan {
                id: rank - 1,
                rank,
                model_spec: ModelSpec {
                    hidden_widths: inputs.base_model.widths_for_rank(rank),
                    ..inputs.base_model.clone()
                },
                epochs,
                rounds,
                delta,
                theta: inputs.theta,
                mar_share: timing.cluster_share(rank, inputs.m),
                members: Vec::new(),
            })
        })
        .collect()
}

/// Whether `p` fits the cluster's model in memory and can run its round
/// budget within the cluster's share of the response time (inclusive).
pub fn can_accommodate(p: &ParticipantProfile, c: &ClusterPlan, t: &TimingModel) -> bool {
    let params = c.param_count();
    if !t.fits_memory(&p.resources, params) {
        return false;
    }
    let total = t.round_seconds(&p.with_epochs(c.epochs), params) * f64::from(c.rounds);
    total <= c.mar_share * (1.0 + 1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Memory,
    Time,
    Precision,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub rank: usize,
    pub reason: RejectReason,
    pub reductions: u32,
}

/// Outcome for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentLogEntry {
    pub participant: String,
    pub rank: usize,
    pub n: usize,
    pub tau: usize,
    pub reductions: u32,
    /// Every higher-ranked cluster that turned the participant away, in order.
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentParams {
    pub constants: ConvergenceConstants,
    pub class_count: usize,
    pub weights: ResourceWeights,
    pub reduction_step: f64,
    pub max_reductions: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub clusters: Vec<ClusterPlan>,
    /// Final profiles (after any reduction) in input order.
    pub profiles: Vec<ParticipantProfile>,
    /// Index into `clusters` for each participant, in input order.
    pub cluster_of: Vec<usize>,
    /// One entry per participant in processing order.
    pub log: Vec<AssignmentLogEntry>,
}

impl Assignment {
    /// Final profiles of a cluster's members, in input order.
    pub fn members(&self, cluster: usize) -> Vec<(usize, &ParticipantProfile)> {
        self.cluster_of
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| (i, &self.profiles[i]))
            .collect()
    }

    /// CSV with columns participant,cluster,n_i,tau_i,reductions in
    /// processing order.
    pub fn write_csv(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["participant", "cluster", "n_i", "tau_i", "reductions"])?;
        for e in &self.log {
            w.write_record([
                e.participant.clone(),
                e.rank.to_string(),
                e.n.to_string(),
                e.tau.to_string(),
                e.reductions.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Checks a candidate membership against the cluster's thresholds.
fn passes_thresholds(
    cluster: &ClusterPlan,
    members: &[&ParticipantProfile],
    candidate: &ParticipantProfile,
    params: &AssignmentParams,
) -> Result<Option<RejectReason>> {
    let mut counts: Vec<usize> = members.iter().map(|p| p.n).collect();
    counts.push(candidate.n);
    let conv = params.constants.for_counts(&counts, params.class_count)?;
    let steps = u64::from(cluster.epochs) * u64::from(cluster.rounds);
    if precision_bound(&conv, cluster.epochs, steps) > cluster.delta {
        return Ok(Some(RejectReason::Precision));
    }
    // A lone participant has no inconsistency to bound.
    if members.is_empty() {
        return Ok(None);
    }
    let taus: Vec<usize> = members
        .iter()
        .map(|p| p.tau)
        .chain(std::iter::once(candidate.tau))
        .collect();
    let o = taus
        .iter()
        .map(|&t| AccumulationVector::fedavg(t.max(1)))
        .collect::<Result<Vec<_>>>()?;
    let err = error_bound(&conv, &o, cluster.rounds, o.len())?;
    let theta = match cluster.theta {
        ErrorThreshold::Absolute(v) => v,
        ErrorThreshold::Relative(slack) => {
            let mean_tau = o.iter().map(|v| v.steps() as f64).sum::<f64>() / o.len() as f64;
            let equal = params
                .constants
                .for_weights(vec![1.0 / o.len() as f64; o.len()], params.class_count)?;
            slack * homogeneous_error_bound(&equal, mean_tau, cluster.rounds, o.len())?
        }
    };
    Ok((err > theta).then_some(RejectReason::Error))
}

/// Places every participant in the highest-ranked cluster that can take it.
///
/// Participants are processed in descending capacity order (ties by input
/// position). At each cluster a participant that does not fit in time gets
/// up to `max_reductions` workload reductions; a participant that fits
/// must then pass the precision check and, if the cluster already has
/// members, the error check. Moving to a lower cluster restarts from the
/// participant's original workload.
pub fn assign_participants(
    participants: &[ParticipantProfile],
    clusters: &[ClusterPlan],
    params: &AssignmentParams,
    timing: &TimingModel,
) -> Result<Assignment> {
    if clusters.is_empty() {
        return Err(Error::Config("no clusters to assign to".into()));
    }
    if participants.is_empty() {
        return Err(Error::InvalidPopulation("no participants".into()));
    }
    let mut order: Vec<usize> = (0..participants.len()).collect();
    if participants.len() > 1 {
        let resources: Vec<ResourceVector> = participants.iter().map(|p| p.resources).collect();
        let capacity: Vec<f64> = normalize_resources(&resources)?
            .iter()
            .map(|v| v.capacity_score(&params.weights))
            .collect();
        order.sort_by(|&a, &b| capacity[b].total_cmp(&capacity[a]).then(a.cmp(&b)));
    }

    let mut clusters: Vec<ClusterPlan> = clusters.to_vec();
    for c in &mut clusters {
        c.members.clear();
    }
    let mut placed: Vec<Option<(usize, ParticipantProfile)>> = vec![None; participants.len()];
    let mut log = Vec::with_capacity(participants.len());

    for &i in &order {
        let original = &participants[i];
        let mut rejections = Vec::new();
        let mut outcome = None;
        for (f, cluster) in clusters.iter().enumerate() {
            let mut current = original.with_epochs(cluster.epochs);
            let mut reductions = 0;
            let verdict = loop {
                if !timing.fits_memory(&current.resources, cluster.param_count()) {
                    break Err(RejectReason::Memory);
                }
                if can_accommodate(&current, cluster, timing) {
                    let members: Vec<&ParticipantProfile> = placed
                        .iter()
                        .filter_map(|p| p.as_ref().filter(|(c, _)| *c == f).map(|(_, prof)| prof))
                        .collect();
                    break match passes_thresholds(cluster, &members, &current, params)? {
                        None => Ok(()),
                        Some(reason) => Err(reason),
                    };
                }
                if reductions >= params.max_reductions {
                    break Err(RejectReason::Time);
                }
                match reduce_workload(&current, params.reduction_step) {
                    Ok(next) => {
                        current = next;
                        reductions += 1;
                    }
                    Err(Error::AtFloor { .. }) => break Err(RejectReason::Time),
                    Err(e) => return Err(e),
                }
            };
            let reason = match verdict {
                Ok(()) => {
                    outcome = Some((f, current, reductions));
                    break;
                }
                Err(reason) => reason,
            };
            rejections.push(Rejection {
                rank: cluster.rank,
                reason,
                reductions,
            });
        }
        let Some((f, profile, reductions)) = outcome else {
            let last = rejections.last().map(|r| r.reason);
            return Err(Error::Infeasible {
                id: original.id.clone(),
                reason: format!("rejected by every cluster; lowest cluster reason: {last:?}"),
            });
        };
        log.push(AssignmentLogEntry {
            participant: profile.id.clone(),
            rank: clusters[f].rank,
            n: profile.n,
            tau: profile.tau,
            reductions,
            rejections,
        });
        clusters[f].members.push(profile.id.clone());
        placed[i] = Some((f, profile));
    }

    let mut profiles = Vec::with_capacity(participants.len());
    let mut cluster_of = Vec::with_capacity(participants.len());
    for p in placed {
        let (f, prof) = p.expect("every participant placed or an error returned");
        profiles.push(prof);
        cluster_of.push(f);
    }
    Ok(Assignment {
        clusters,
        profiles,
        cluster_of,
        log,
    })
}
