//! The training loop: per-step rank sampling, forward, loss, backward,
//! global gradient clipping, and optimizer updates restricted to the
//! truncated slices.
//!
//! One rank is drawn per step and shared by every adapter site. Only the
//! leading `b` rows of each down-projection and `b` columns of each
//! up-projection see a gradient; parameters and optimizer moments past the
//! sampled rank stay bit-identical. The frozen quantized bases are never
//! touched at all.

use serde::{Deserialize, Serialize};

use crate::adapter::RankSampler;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, LossKind, ToyModel};
use crate::quant;
use crate::tensor::{Matrix, Rng};

/// Adam epsilon; the usual stability constant.
const ADAM_EPS: f64 = 1e-8;

/// Stream tags for deriving independent generators from one master seed.
pub mod seed_streams {
    pub const INIT: u64 = 1;
    pub const RANK: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const DATA: u64 = 4;
}

/// Which update rule applies to the truncated slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[serde(rename = "adamw")]
    AdamW,
    Sgd,
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Step size. The toy-task default; small-model dimensions need a much
    /// larger step than billion-parameter runs.
    pub lr: f32,
    pub iterations: usize,
    pub batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub max_grad_norm: f32,
    /// Fraction of the iteration budget spent ramping the rate up linearly;
    /// constant afterwards.
    pub warmup_ratio: f32,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            iterations: 2000,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            max_grad_norm: 0.3,
            warmup_ratio: 0.03,
            optimizer: OptimizerKind::AdamW,
            loss: LossKind::Mse,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid { problems })
        }
    }

    /// Every problem, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!("train.lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("train.batch_size must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) {
            problems.push(format!("train.beta1 must be in [0, 1), got {}", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            problems.push(format!("train.beta2 must be in [0, 1), got {}", self.beta2));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!(
                "train.weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.max_grad_norm > 0.0 && self.max_grad_norm.is_finite()) {
            problems.push(format!(
                "train.max_grad_norm must be positive, got {}",
                self.max_grad_norm
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            problems.push(format!(
                "train.warmup_ratio must be in [0, 1), got {}",
                self.warmup_ratio
            ));
        }
        problems
    }

    /// Linear warmup to `lr` over ceil(warmup_ratio * iterations) steps,
    /// constant afterwards. `step` is 0-based.
    pub fn scheduled_lr(&self, step: u64) -> f32 {
        let warmup_steps = (f64::from(self.warmup_ratio) * self.iterations as f64).ceil() as u64;
        if warmup_steps == 0 || step + 1 >= warmup_steps {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / warmup_steps as f64) as f32
        }
    }
}

/// Adam moment accumulators for one adapter site.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMoments {
    pub m_down: Matrix,
    pub v_down: Matrix,
    pub m_up: Matrix,
    pub v_up: Matrix,
}

/// Optimizer state shaped like the model's trainable parameters. Moments at
/// indices never covered by a sampled rank stay exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub layers: Vec<LayerMoments>,
    /// Global step counter; bias correction uses it regardless of which
    /// slices a given step touched.
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &ToyModel) -> Result<Self> {
        let mut layers = Vec::with_capacity(model.layers().len());
        for layer in model.layers() {
            layers.push(LayerMoments {
                m_down: Matrix::zeros(layer.r_max(), layer.in_dim())?,
                v_down: Matrix::zeros(layer.r_max(), layer.in_dim())?,
                m_up: Matrix::zeros(layer.out_dim(), layer.r_max())?,
                v_up: Matrix::zeros(layer.out_dim(), layer.r_max())?,
            });
        }
        Ok(OptimizerState { layers, step: 0 })
    }

    pub fn from_parts(layers: Vec<LayerMoments>, step: u64) -> Self {
        OptimizerState { layers, step }
    }
}

/// What one training step reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub rank: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f32,
}

/// One optimization step: sample a rank, run the truncated pass, clip, and
/// update only the truncated slices.
pub fn train_step(
    model: &mut ToyModel,
    batch_inputs: &Matrix,
    batch_targets: &Matrix,
    sampler: &mut RankSampler,
    dropout_rng: &mut Rng,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<StepRecord> {
    if batch_inputs.cols() != batch_targets.cols() {
        return Err(Error::ShapeMismatch {
            op: "train_step batch",
            left: batch_inputs.shape(),
            right: batch_targets.shape(),
        });
    }

    let rank = sampler.sample();
    let (output, ctx) = model.forward_train(batch_inputs, rank, Some(dropout_rng))?;
    let (loss, grad_out) = loss_and_grad(cfg.loss, &output, batch_targets)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.step,
            rank,
        });
    }
    let grads = model.backward(ctx, &grad_out)?;

    // global norm over the truncated slices (the only nonzero gradients)
    let mut sq_sum = 0.0f64;
    for g in &grads {
        sq_sum += g.down.frob_norm().powi(2) + g.up.frob_norm().powi(2);
    }
    let grad_norm = sq_sum.sqrt();
    let clip = if grad_norm > f64::from(cfg.max_grad_norm) {
        (f64::from(cfg.max_grad_norm) / grad_norm) as f32
    } else {
        1.0
    };

    let lr = cfg.scheduled_lr(opt.step);
    opt.step += 1;
    let t = opt.step;
    let bias1 = 1.0 - f64::from(cfg.beta1).powi(t as i32);
    let bias2 = 1.0 - f64::from(cfg.beta2).powi(t as i32);

    for (li, g) in grads.iter().enumerate() {
        let moments = &mut opt.layers[li];
        let layer = &mut model.layers_mut()[li];
        let (down, up) = layer.params_mut();

        match cfg.optimizer {
            OptimizerKind::Sgd => {
                for r in 0..rank {
                    for k in 0..down.cols() {
                        let gv = g.down.at(r, k) * clip;
                        let v = down.at(r, k);
                        down.set(r, k, v - lr * gv);
                    }
                }
                for i in 0..up.rows() {
                    for r in 0..rank {
                        let gv = g.up.at(i, r) * clip;
                        let v = up.at(i, r);
                        up.set(i, r, v - lr * gv);
                    }
                }
            }
            OptimizerKind::AdamW => {
                let decay = 1.0 - lr * cfg.weight_decay;
                let adam = |p: &mut Matrix,
                                m: &mut Matrix,
                                v: &mut Matrix,
                                r: usize,
                                c: usize,
                                gv: f32| {
                    let g64 = f64::from(gv);
                    let m_new = f64::from(cfg.beta1) * f64::from(m.at(r, c))
                        + (1.0 - f64::from(cfg.beta1)) * g64;
                    let v_new = f64::from(cfg.beta2) * f64::from(v.at(r, c))
                        + (1.0 - f64::from(cfg.beta2)) * g64 * g64;
                    m.set(r, c, m_new as f32);
                    v.set(r, c, v_new as f32);
                    let m_hat = m_new / bias1;
                    let v_hat = v_new / bias2;
                    let p_decayed = f64::from(p.at(r, c)) * f64::from(decay);
                    let step = f64::from(lr) * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    p.set(r, c, (p_decayed - step) as f32);
                };
                for r in 0..rank {
                    for k in 0..g.down.cols() {
                        adam(
                            down,
                            &mut moments.m_down,
                            &mut moments.v_down,
                            r,
                            k,
                            g.down.at(r, k) * clip,
                        );
                    }
                }
                for i in 0..g.up.rows() {
                    for r in 0..rank {
                        adam(
                            up,
                            &mut moments.m_up,
                            &mut moments.v_up,
                            i,
                            r,
                            g.up.at(i, r) * clip,
                        );
                    }
                }
            }
        }
    }

    Ok(StepRecord {
        step: t - 1,
        rank,
        loss,
        grad_norm,
        lr,
    })
}

/// Run `cfg.iterations` steps over the dataset. Batches walk the training
/// columns cyclically: step t uses columns (t*B + i) mod n. Deterministic
/// given the sampler and dropout generators.
pub fn train(
    model: &mut ToyModel,
    dataset: &Dataset,
    sampler: &mut RankSampler,
    dropout_rng: &mut Rng,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let n = dataset.train_inputs.cols();
    let mut history = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|i| (t * cfg.batch_size + i) % n)
            .collect();
        let bx = dataset.train_inputs.select_cols(&idx)?;
        let by = dataset.train_targets.select_cols(&idx)?;
        let record = train_step(model, &bx, &by, sampler, dropout_rng, cfg, opt)?;
        history.push(record);
    }
    Ok(history)
}

/// Input/target pairs, one sample per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train_inputs: Matrix,
    pub train_targets: Matrix,
    pub test_inputs: Matrix,
    pub test_targets: Matrix,
}

/// A generated low-rank regression task plus the pieces oracle tests need.
#[derive(Clone, Debug)]
pub struct LowRankTask {
    pub dataset: Dataset,
    /// Teacher base weight; quantized, it becomes the student's frozen base.
    pub base: Matrix,
    /// The low-rank residual the adapter has to learn (zero matrix when
    /// `true_rank` is 0).
    pub residual: Matrix,
}

impl LowRankTask {
    /// Teacher weight = base + residual.
    pub fn teacher(&self) -> Result<Matrix> {
        self.base.add(&self.residual)
    }
}

/// Synthetic regression task: teacher = W_base + U*V with a known true rank.
/// Base entries are N(0, 1/d) so quantization error stays small next to the
/// unit-variance residual; inputs are standard normal; targets get isotropic
/// noise of the given standard deviation.
pub fn gen_low_rank_task(
    rng: &mut Rng,
    d: usize,
    m: usize,
    true_rank: usize,
    n_train: usize,
    n_test: usize,
    noise_std: f64,
) -> Result<LowRankTask> {
    if true_rank > d.min(m) {
        return Err(Error::InvalidArgument {
            context: format!("true_rank {true_rank} exceeds min(d={d}, m={m})"),
        });
    }
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument {
            context: "n_train and n_test must be >= 1".into(),
        });
    }
    if noise_std < 0.0 {
        return Err(Error::InvalidArgument {
            context: format!("noise_std must be >= 0, got {noise_std}"),
        });
    }

    let base_std = (1.0 / d as f64).sqrt();
    let base = Matrix::gaussian(rng, m, d, 0.0, base_std)?;
    let residual = if true_rank == 0 {
        Matrix::zeros(m, d)?
    } else {
        // U entries N(0,1), V entries N(0, 1/true_rank): unit-variance product
        let u = Matrix::gaussian(rng, m, true_rank, 0.0, 1.0)?;
        let v = Matrix::gaussian(rng, true_rank, d, 0.0, (1.0 / true_rank as f64).sqrt())?;
        u.matmul(&v)?
    };
    let teacher = base.add(&residual)?;

    let mut sampled = |n: usize| -> Result<(Matrix, Matrix)> {
        let x = Matrix::gaussian(rng, d, n, 0.0, 1.0)?;
        let clean = teacher.matmul(&x)?;
        let y = if noise_std > 0.0 {
            let noise = Matrix::gaussian(rng, m, n, 0.0, noise_std)?;
            clean.add(&noise)?
        } else {
            clean
        };
        Ok((x, y))
    };
    let (train_inputs, train_targets) = sampled(n_train)?;
    let (test_inputs, test_targets) = sampled(n_test)?;

    Ok(LowRankTask {
        dataset: Dataset {
            train_inputs,
            train_targets,
            test_inputs,
            test_targets,
        },
        base,
        residual,
    })
}

/// Build the student for a task: a single adapter site whose frozen base is
/// the quantized teacher base.
pub fn student_for_task(
    task: &LowRankTask,
    adapter: &crate::adapter::AdapterConfig,
    block_size: usize,
    superblock_size: Option<usize>,
    init_rng: &mut Rng,
) -> Result<ToyModel> {
    let q = match superblock_size {
        Some(sb) => quant::quantize(&task.base, block_size, sb)?,
        None => quant::quantize_single_level(&task.base, block_size)?,
    };
    ToyModel::single(q, adapter.clone(), crate::model::Head::Identity, init_rng)
}
