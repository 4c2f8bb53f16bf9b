//! End-to-end pipelines assembled from a `RunConfig`: generate the task,
//! build the student, train, and evaluate. The CLI and the C API are thin
//! shells over these.

use crate::adapter::RankSampler;
use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::{compare_dynamic_vs_static, rank_sweep, ComparisonReport, SweepReport};
use crate::model::ToyModel;
use crate::quant;
use crate::tensor::{Matrix, Rng};
use crate::train::{
    seed_streams, student_for_task, train, Dataset, LowRankTask, OptimizerState, StepRecord,
};

/// Everything a finished training run produces.
pub struct TrainingRun {
    pub model: ToyModel,
    pub optimizer: OptimizerState,
    pub history: Vec<StepRecord>,
    pub dataset: Dataset,
}

/// Build the student for a config. With no hidden widths the single layer's
/// frozen base is the quantized teacher base; hidden layers get random
/// frozen bases (entries N(0, 1/in_dim)) drawn from the init stream.
pub fn build_model(cfg: &RunConfig, task: &LowRankTask, init_rng: &mut Rng) -> Result<ToyModel> {
    if cfg.model.hidden.is_empty() {
        let mut model = student_for_task(
            task,
            &cfg.adapter,
            cfg.quant.block_size,
            cfg.quant.superblock(),
            init_rng,
        )?;
        if cfg.head() != crate::model::Head::Identity {
            model = ToyModel::new(model.layers().to_vec(), cfg.head())?;
        }
        Ok(model)
    } else {
        let dims = cfg.layer_dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let std = (1.0 / in_dim as f64).sqrt();
            let base_w = Matrix::gaussian(init_rng, out_dim, in_dim, 0.0, std)?;
            let base = match cfg.quant.superblock() {
                Some(sb) => quant::quantize(&base_w, cfg.quant.block_size, sb)?,
                None => quant::quantize_single_level(&base_w, cfg.quant.block_size)?,
            };
            layers.push(crate::adapter::DynamicLoraLayer::new(
                base,
                cfg.adapter.clone(),
                init_rng,
            )?);
        }
        ToyModel::new(layers, cfg.head())
    }
}

/// Generate the task, build the student, and run the configured number of
/// steps. Fully deterministic given the config.
pub fn run_training(cfg: &RunConfig, dq_cache: bool) -> Result<TrainingRun> {
    cfg.validate()?;
    let task = cfg.task.generate()?;
    let mut init_rng = Rng::derive(cfg.train.seed, seed_streams::INIT);
    let mut model = build_model(cfg, &task, &mut init_rng)?;
    if dq_cache {
        model.set_dq_cache(true)?;
    }
    let mut sampler = RankSampler::new(
        &cfg.adapter,
        Rng::derive(cfg.train.seed, seed_streams::RANK),
    )?;
    let mut dropout = Rng::derive(cfg.train.seed, seed_streams::DROPOUT);
    let mut optimizer = OptimizerState::new(&model)?;
    let history = if cfg.train.iterations > 0 {
        train(
            &mut model,
            &task.dataset,
            &mut sampler,
            &mut dropout,
            &cfg.train,
            &mut optimizer,
        )?
    } else {
        Vec::new()
    };
    if dq_cache {
        // drop the cache so saved state and later evaluations share one path
        model.set_dq_cache(false)?;
    }
    Ok(TrainingRun {
        model,
        optimizer,
        history,
        dataset: task.dataset,
    })
}

/// Sweep a model over the config's rank list against a test set.
pub fn run_sweep(
    cfg: &RunConfig,
    model: &ToyModel,
    inputs: &Matrix,
    targets: &Matrix,
) -> Result<SweepReport> {
    rank_sweep(
        model,
        inputs,
        targets,
        &cfg.resolved_ranks(),
        cfg.train.seed,
        cfg.hash(),
    )
}

/// Dynamic-vs-static comparison for a config.
pub fn run_compare(cfg: &RunConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    compare_dynamic_vs_static(
        &cfg.task,
        &cfg.adapter,
        &cfg.train,
        cfg.quant.block_size,
        cfg.quant.superblock(),
        &cfg.resolved_ranks(),
        &cfg.hash(),
    )
}
