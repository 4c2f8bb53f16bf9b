//! Rank-sweep evaluation, the dynamic-vs-static comparison, and the
//! update-frequency audit.
//!
//! A trained adapter is evaluated at each rank in a list (dropout off), the
//! best rank is picked by the metric's own direction, and the audit counts
//! how often each slice index was covered by the sampled ranks — lower
//! slices get updated in every step whose rank reaches them, so their
//! counts can only be larger.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, RankSampler};
use crate::error::{Error, Result};
use crate::model::{accuracy, mse, Head, ToyModel};
use crate::tensor::{Matrix, Rng};
use crate::train::{
    gen_low_rank_task, seed_streams, student_for_task, train, OptimizerState, StepRecord,
    TrainConfig,
};

/// Metric identity; fixes the "better" direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Lower is better.
    Mse,
    /// Higher is better.
    Accuracy,
}

impl MetricKind {
    pub fn lower_is_better(self) -> bool {
        matches!(self, MetricKind::Mse)
    }

    pub fn for_head(head: Head) -> Self {
        match head {
            Head::Identity => MetricKind::Mse,
            Head::Softmax => MetricKind::Accuracy,
        }
    }
}

/// Per-rank metrics from one model, with the winning rank marked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metric: MetricKind,
    pub ranks: Vec<usize>,
    pub metrics: Vec<f64>,
    pub best_rank: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl SweepReport {
    /// Assemble a report from already-computed metrics; ties pick the first
    /// (lowest) rank in the list.
    pub fn from_metrics(
        metric: MetricKind,
        ranks: Vec<usize>,
        metrics: Vec<f64>,
        seed: u64,
        config_hash: String,
    ) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptyInput {
                context: "sweep rank list",
            });
        }
        if ranks.len() != metrics.len() {
            return Err(Error::InvalidArgument {
                context: format!(
                    "rank list length {} does not match metric list length {}",
                    ranks.len(),
                    metrics.len()
                ),
            });
        }
        let better = |a: f64, b: f64| {
            if metric.lower_is_better() {
                a < b
            } else {
                a > b
            }
        };
        let mut best = 0;
        for i in 1..metrics.len() {
            if better(metrics[i], metrics[best]) {
                best = i;
            }
        }
        Ok(SweepReport {
            metric,
            ranks: ranks.clone(),
            metrics,
            best_rank: ranks[best],
            seed,
            config_hash,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column rendering for the terminal.
    pub fn render_table(&self) -> String {
        let direction = if self.metric.lower_is_better() {
            "lower is better"
        } else {
            "higher is better"
        };
        let mut out = format!("rank sweep ({:?}, {direction})\n", self.metric);
        out.push_str(&format!("{:>6}  {:>14}\n", "rank", "metric"));
        for (r, m) in self.ranks.iter().zip(&self.metrics) {
            let marker = if *r == self.best_rank { "  <- best" } else { "" };
            out.push_str(&format!("{r:>6}  {m:>14.6}{marker}\n"));
        }
        out
    }
}

/// Slice-update counts over a training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub r_max: usize,
    pub total_steps: u64,
    /// counts[j-1] = number of steps whose sampled rank was >= j.
    pub counts: Vec<u64>,
    /// counts[j-1] / total_steps.
    pub observed_fractions: Vec<f64>,
    /// Nonincreasing by construction; recorded so consumers can assert it.
    pub monotone_nonincreasing: bool,
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "update-frequency audit over {} steps (r_max {})\n{:>6}  {:>10}  {:>10}\n",
            self.total_steps, self.r_max, "slice", "updates", "fraction"
        );
        for j in 0..self.r_max {
            out.push_str(&format!(
                "{:>6}  {:>10}  {:>10.4}\n",
                j + 1,
                self.counts[j],
                self.observed_fractions[j]
            ));
        }
        out
    }
}

/// Both arms of a dynamic-vs-static run, plus per-rank deltas
/// (dynamic minus static).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub metric: MetricKind,
    pub ranks: Vec<usize>,
    pub dynamic: Vec<f64>,
    pub static_arm: Vec<f64>,
    pub delta: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "dynamic vs static at rank r_max ({:?})\n{:>6}  {:>14}  {:>14}  {:>14}\n",
            self.metric, "rank", "dynamic", "static", "delta"
        );
        for (((r, d), s), dl) in self
            .ranks
            .iter()
            .zip(&self.dynamic)
            .zip(&self.static_arm)
            .zip(&self.delta)
        {
            out.push_str(&format!("{r:>6}  {d:>14.6}  {s:>14.6}  {dl:>14.6}\n"));
        }
        out
    }
}

/// Deterministic metric at one rank, dropout off. MSE for identity heads,
/// accuracy for softmax heads.
pub fn eval_at_rank(
    model: &ToyModel,
    inputs: &Matrix,
    targets: &Matrix,
    rank: usize,
) -> Result<f64> {
    let prediction = model.forward_eval(inputs, rank)?;
    match model.head() {
        Head::Identity => mse(&prediction, targets),
        Head::Softmax => accuracy(&prediction, targets),
    }
}

/// One `eval_at_rank` per entry; every rank must lie in the adapter range.
pub fn rank_sweep(
    model: &ToyModel,
    inputs: &Matrix,
    targets: &Matrix,
    ranks: &[usize],
    seed: u64,
    config_hash: String,
) -> Result<SweepReport> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput {
            context: "sweep rank list",
        });
    }
    let mut metrics = Vec::with_capacity(ranks.len());
    for &b in ranks {
        metrics.push(eval_at_rank(model, inputs, targets, b)?);
    }
    SweepReport::from_metrics(
        MetricKind::for_head(model.head()),
        ranks.to_vec(),
        metrics,
        seed,
        config_hash,
    )
}

/// The default evaluation rank list clipped to the adapter range.
pub fn default_rank_list(r_max: usize) -> Vec<usize> {
    [1usize, 2, 4, 8, 16, 32, 64]
        .into_iter()
        .filter(|&r| r <= r_max)
        .collect()
}

/// c(j) = number of steps whose sampled rank covered slice j.
pub fn update_frequency_audit(history: &[StepRecord], r_max: usize) -> Result<AuditReport> {
    if history.is_empty() {
        return Err(Error::EmptyInput {
            context: "training history",
        });
    }
    let total = history.len() as u64;
    let mut counts = vec![0u64; r_max];
    for rec in history {
        let covered = rec.rank.min(r_max);
        for c in counts.iter_mut().take(covered) {
            *c += 1;
        }
    }
    let observed_fractions = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let monotone = counts.windows(2).all(|w| w[0] >= w[1]);
    Ok(AuditReport {
        r_max,
        total_steps: total,
        counts,
        observed_fractions,
        monotone_nonincreasing: monotone,
    })
}

/// Task dimensions and sampling parameters for a generated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub d: usize,
    pub m: usize,
    pub true_rank: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            d: 32,
            m: 32,
            true_rank: 4,
            n_train: 256,
            n_test: 512,
            noise_std: 0.1,
            seed: 42,
        }
    }
}

impl TaskSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.d == 0 || self.m == 0 {
            problems.push("task.d and task.m must be >= 1".to_string());
        }
        if self.true_rank > self.d.min(self.m) {
            problems.push(format!(
                "task.true_rank {} exceeds min(d, m) = {}",
                self.true_rank,
                self.d.min(self.m)
            ));
        }
        if self.n_train == 0 || self.n_test == 0 {
            problems.push("task.n_train and task.n_test must be >= 1".to_string());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            problems.push(format!(
                "task.noise_std must be finite and >= 0, got {}",
                self.noise_std
            ));
        }
        problems
    }

    pub fn generate(&self) -> Result<crate::train::LowRankTask> {
        let mut rng = Rng::derive(self.seed, seed_streams::DATA);
        gen_low_rank_task(
            &mut rng,
            self.d,
            self.m,
            self.true_rank,
            self.n_train,
            self.n_test,
            self.noise_std,
        )
    }
}

/// Train one arm from scratch and sweep it. The two arms of a comparison
/// differ only in the rank sampler.
#[allow(clippy::too_many_arguments)]
fn train_and_sweep(
    task: &crate::train::LowRankTask,
    adapter: &AdapterConfig,
    train_cfg: &TrainConfig,
    block_size: usize,
    superblock_size: Option<usize>,
    mut sampler: RankSampler,
    ranks: &[usize],
    config_hash: &str,
) -> Result<(ToyModel, Vec<StepRecord>, SweepReport)> {
    let mut init = Rng::derive(train_cfg.seed, seed_streams::INIT);
    let mut model = student_for_task(task, adapter, block_size, superblock_size, &mut init)?;
    let mut dropout = Rng::derive(train_cfg.seed, seed_streams::DROPOUT);
    let mut opt = OptimizerState::new(&model)?;
    let history = train(
        &mut model,
        &task.dataset,
        &mut sampler,
        &mut dropout,
        train_cfg,
        &mut opt,
    )?;
    let report = rank_sweep(
        &model,
        &task.dataset.test_inputs,
        &task.dataset.test_targets,
        ranks,
        train_cfg.seed,
        config_hash.to_string(),
    )?;
    Ok((model, history, report))
}

/// Train a dynamic arm (ranks sampled from the adapter's distribution) and a
/// static arm (rank pinned at r_max) under identical seeds, budgets, and
/// architectures, then sweep both over the same rank list.
pub fn compare_dynamic_vs_static(
    task_spec: &TaskSpec,
    adapter: &AdapterConfig,
    train_cfg: &TrainConfig,
    block_size: usize,
    superblock_size: Option<usize>,
    ranks: &[usize],
    config_hash: &str,
) -> Result<ComparisonReport> {
    adapter.validate()?;
    train_cfg.validate()?;
    let task = task_spec.generate()?;

    let dynamic_sampler =
        RankSampler::new(adapter, Rng::derive(train_cfg.seed, seed_streams::RANK))?;
    let (_, _, dynamic) = train_and_sweep(
        &task,
        adapter,
        train_cfg,
        block_size,
        superblock_size,
        dynamic_sampler,
        ranks,
        config_hash,
    )?;

    let static_sampler = RankSampler::fixed(
        adapter.r_max,
        Rng::derive(train_cfg.seed, seed_streams::RANK),
    );
    let (_, _, static_arm) = train_and_sweep(
        &task,
        adapter,
        train_cfg,
        block_size,
        superblock_size,
        static_sampler,
        ranks,
        config_hash,
    )?;

    let delta = dynamic
        .metrics
        .iter()
        .zip(&static_arm.metrics)
        .map(|(d, s)| d - s)
        .collect();
    Ok(ComparisonReport {
        metric: dynamic.metric,
        ranks: ranks.to_vec(),
        dynamic: dynamic.metrics,
        static_arm: static_arm.metrics,
        delta,
        seed: train_cfg.seed,
        config_hash: config_hash.to_string(),
    })
}
