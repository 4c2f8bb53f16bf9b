//! Dynamic low-rank adapters over frozen quantized bases.
//!
//! One adapter site holds a frozen `QuantizedMatrix` base W0 (m x d) and two
//! trainable full-precision matrices: a down-projection (r_max x d) and an
//! up-projection (m x r_max). Each pass picks a rank `b` and uses only the
//! leading `b` rows / columns:
//!
//! ```text
//! h = dequantize(W0) * x  +  (alpha / b) * up[:, :b] * (down[:b, :] * x~)
//! ```
//!
//! where `x~` is the input with inverted dropout on the adapter branch only
//! (the frozen path always sees the raw input). Gradients flow to the
//! truncated slices alone; everything past index `b` stays untouched, which
//! is what lets a single training run serve every rank in the range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantizedMatrix;
use crate::tensor::{Mat, Matrix, Rng, Scalar};

/// Distribution of the per-step rank draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankDistribution {
    /// Uniform over the integers [r_min, r_max].
    Uniform,
    /// Truncated geometric favoring low ranks: p(b) proportional to
    /// (1-p)^(b - r_min) on [r_min, r_max].
    Geometric { p: f64 },
}

/// Adapter hyperparameters shared by all sites of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub r_min: usize,
    pub r_max: usize,
    pub alpha: f32,
    pub dropout_p: f32,
    pub distribution: RankDistribution,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            r_min: 1,
            r_max: 64,
            alpha: 16.0,
            dropout_p: 0.05,
            distribution: RankDistribution::Uniform,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.r_min < 1 {
            problems.push("adapter.r_min must be >= 1".to_string());
        }
        if self.r_min > self.r_max {
            problems.push(format!(
                "adapter.r_min {} exceeds adapter.r_max {}",
                self.r_min, self.r_max
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            problems.push(format!("adapter.alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            problems.push(format!(
                "adapter.dropout_p must be in [0, 1), got {}",
                self.dropout_p
            ));
        }
        if let RankDistribution::Geometric { p } = self.distribution {
            if !(p > 0.0 && p < 1.0) {
                problems.push(format!("geometric rank distribution needs p in (0,1), got {p}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid { problems })
        }
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank < self.r_min || rank > self.r_max {
            return Err(Error::RankOutOfRange {
                rank,
                min: self.r_min,
                max: self.r_max,
            });
        }
        Ok(())
    }
}

/// Seeded per-step rank source.
#[derive(Clone, Debug)]
pub struct RankSampler {
    r_min: usize,
    r_max: usize,
    distribution: RankDistribution,
    rng: Rng,
}

impl RankSampler {
    pub fn new(config: &AdapterConfig, rng: Rng) -> Result<Self> {
        config.validate()?;
        Ok(RankSampler {
            r_min: config.r_min,
            r_max: config.r_max,
            distribution: config.distribution.clone(),
            rng,
        })
    }

    /// A sampler that always returns `rank`; the static-training regime.
    pub fn fixed(rank: usize, rng: Rng) -> Self {
        RankSampler {
            r_min: rank,
            r_max: rank,
            distribution: RankDistribution::Uniform,
            rng,
        }
    }

    /// Draw one rank in [r_min, r_max].
    pub fn sample(&mut self) -> usize {
        let span = (self.r_max - self.r_min + 1) as u64;
        match self.distribution {
            RankDistribution::Uniform => self.r_min + self.rng.range_u64(span) as usize,
            RankDistribution::Geometric { p } => {
                // inverse-CDF over the truncated support
                let q = 1.0 - p;
                let total = 1.0 - q.powi(span as i32);
                let u = self.rng.uniform() * total;
                let mut cum = 0.0;
                let mut mass = p;
                for k in 0..span {
                    cum += mass;
                    if u < cum {
                        return self.r_min + k as usize;
                    }
                    mass *= q;
                }
                self.r_max
            }
        }
    }
}

/// What the backward pass needs from a forward pass. Single-use: consumed
/// by `backward`, and invalidated by any parameter update in between.
#[derive(Debug)]
pub struct ForwardContext {
    rank: usize,
    generation: u64,
    /// Adapter-branch input after dropout (d x n).
    x_adapter: Matrix,
    /// down[:b, :] * x_adapter (b x n).
    down_out: Matrix,
    /// Inverted-dropout mask actually applied, when training (d x n).
    mask: Option<Matrix>,
}

impl ForwardContext {
    pub fn rank(&self) -> usize {
        self.rank
    }
}

/// Gradients of one adapter site at rank `b`, plus the gradient passed on
/// to the layer input.
#[derive(Clone, Debug)]
pub struct AdapterGrads {
    /// d loss / d down[:b, :]  (b x d).
    pub down: Matrix,
    /// d loss / d up[:, :b]  (m x b).
    pub up: Matrix,
    /// d loss / d x  (d x n).
    pub input: Matrix,
}

/// One adapter site: frozen quantized base plus trainable projections.
#[derive(Clone, Debug)]
pub struct DynamicLoraLayer {
    base: QuantizedMatrix,
    down: Matrix,
    up: Matrix,
    config: AdapterConfig,
    dq_cache: Option<Matrix>,
    generation: u64,
}

impl DynamicLoraLayer {
    /// Fresh adapter: up-projection all zeros (the model starts exactly at
    /// the frozen base), down-projection N(0, 1/d).
    pub fn new(base: QuantizedMatrix, config: AdapterConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = base.cols();
        let m = base.rows();
        let std = (1.0 / d as f64).sqrt();
        let down = Matrix::gaussian(rng, config.r_max, d, 0.0, std)?;
        let up = Matrix::zeros(m, config.r_max)?;
        Self::from_parts(base, down, up, config)
    }

    /// Assemble from explicit parts, validating shape composition.
    pub fn from_parts(
        base: QuantizedMatrix,
        down: Matrix,
        up: Matrix,
        config: AdapterConfig,
    ) -> Result<Self> {
        config.validate()?;
        let (m, d) = (base.rows(), base.cols());
        if down.shape() != (config.r_max, d) {
            return Err(Error::ShapeMismatch {
                op: "adapter down-projection",
                left: (config.r_max, d),
                right: down.shape(),
            });
        }
        if up.shape() != (m, config.r_max) {
            return Err(Error::ShapeMismatch {
                op: "adapter up-projection",
                left: (m, config.r_max),
                right: up.shape(),
            });
        }
        Ok(DynamicLoraLayer {
            base,
            down,
            up,
            config,
            dq_cache: None,
            generation: 0,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.base.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.base.rows()
    }

    pub fn r_max(&self) -> usize {
        self.config.r_max
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn base(&self) -> &QuantizedMatrix {
        &self.base
    }

    pub fn down(&self) -> &Matrix {
        &self.down
    }

    pub fn up(&self) -> &Matrix {
        &self.up
    }

    /// Mutable access for the optimizer. Bumps the generation so contexts
    /// captured before the update cannot be replayed.
    pub(crate) fn params_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        self.generation += 1;
        (&mut self.down, &mut self.up)
    }

    /// Keep the dequantized base resident instead of re-decoding each pass.
    pub fn set_dq_cache(&mut self, enabled: bool) -> Result<()> {
        self.dq_cache = if enabled {
            Some(self.base.dequantize()?)
        } else {
            None
        };
        Ok(())
    }

    fn base_dense(&self) -> Result<Matrix> {
        match &self.dq_cache {
            Some(m) => Ok(m.clone()),
            None => self.base.dequantize(),
        }
    }

    /// Leading slices used at rank `b`: (down[:b, :], up[:, :b]).
    pub fn truncate(&self, rank: usize) -> Result<(Matrix, Matrix)> {
        self.config.check_rank(rank)?;
        Ok((self.down.lead_rows(rank)?, self.up.lead_cols(rank)?))
    }

    /// Forward pass at rank `b`. Pass a generator to enable training-time
    /// dropout on the adapter branch; evaluation passes `None`.
    pub fn forward(
        &self,
        x: &Matrix,
        rank: usize,
        train_rng: Option<&mut Rng>,
    ) -> Result<(Matrix, ForwardContext)> {
        self.config.check_rank(rank)?;
        if x.rows() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "adapter forward",
                left: (self.out_dim(), self.in_dim()),
                right: x.shape(),
            });
        }
        if !x.all_finite() {
            return Err(Error::NonFinite {
                context: "adapter forward input",
            });
        }

        let mask = match train_rng {
            Some(rng) if self.config.dropout_p > 0.0 => {
                let p = f64::from(self.config.dropout_p);
                let keep_scale = (1.0 / (1.0 - p)) as f32;
                Some(Matrix::from_fn(x.rows(), x.cols(), |_, _| {
                    if rng.bernoulli(p) {
                        0.0
                    } else {
                        keep_scale
                    }
                })?)
            }
            _ => None,
        };
        let x_adapter = match &mask {
            Some(m) => x.hadamard(m)?,
            None => x.clone(),
        };

        let (down_b, up_b) = self.truncate(rank)?;
        let base = self.base_dense()?;
        let (h, down_out) = forward_parts(
            &base,
            &down_b,
            &up_b,
            self.config.alpha,
            rank,
            x,
            &x_adapter,
        )?;

        Ok((
            h,
            ForwardContext {
                rank,
                generation: self.generation,
                x_adapter,
                down_out,
                mask,
            },
        ))
    }

    /// Gradients at the context's rank. Consumes the context; replay against
    /// updated parameters is rejected.
    pub fn backward(&self, ctx: ForwardContext, grad_out: &Matrix) -> Result<AdapterGrads> {
        if ctx.generation != self.generation {
            return Err(Error::StaleContext {
                expected: self.generation,
                got: ctx.generation,
            });
        }
        let n = ctx.x_adapter.cols();
        if grad_out.shape() != (self.out_dim(), n) {
            return Err(Error::ShapeMismatch {
                op: "adapter backward",
                left: (self.out_dim(), n),
                right: grad_out.shape(),
            });
        }
        let (down_b, up_b) = self.truncate(ctx.rank)?;
        let base = self.base_dense()?;
        let (down, up, input) = backward_parts(
            &base,
            &down_b,
            &up_b,
            self.config.alpha,
            ctx.rank,
            &ctx.x_adapter,
            &ctx.down_out,
            grad_out,
            ctx.mask.as_ref(),
        )?;
        Ok(AdapterGrads { down, up, input })
    }

    /// Dense effective weight at rank `b`:
    /// dequantize(base) + (alpha/b) * up[:, :b] * down[:b, :].
    pub fn merge(&self, rank: usize) -> Result<Matrix> {
        self.config.check_rank(rank)?;
        let (down_b, up_b) = self.truncate(rank)?;
        let factor = self.config.alpha / rank as f32;
        let adapter = up_b.matmul(&down_b)?.scale(factor);
        self.base_dense()?.add(&adapter)
    }

    /// Full-precision twin of this site for the 64-bit gradient-check mode.
    pub fn to_dense_f64(&self) -> Result<DenseAdapter<f64>> {
        Ok(DenseAdapter {
            base: self.base.dequantize()?.convert::<f64>(),
            down: self.down.convert::<f64>(),
            up: self.up.convert::<f64>(),
            alpha: f64::from(self.config.alpha),
            r_min: self.config.r_min,
            r_max: self.config.r_max,
        })
    }
}

/// Plain dense adapter over any scalar type. Runs the same forward and
/// backward formulas as `DynamicLoraLayer`, without quantization, dropout,
/// or context bookkeeping; this is the 64-bit mode used for gradient checks.
#[derive(Clone, Debug)]
pub struct DenseAdapter<T> {
    pub base: Mat<T>,
    pub down: Mat<T>,
    pub up: Mat<T>,
    pub alpha: T,
    pub r_min: usize,
    pub r_max: usize,
}

impl<T: Scalar> DenseAdapter<T> {
    pub fn forward(&self, x: &Mat<T>, rank: usize) -> Result<Mat<T>> {
        if rank < self.r_min || rank > self.r_max {
            return Err(Error::RankOutOfRange {
                rank,
                min: self.r_min,
                max: self.r_max,
            });
        }
        let down_b = self.down.lead_rows(rank)?;
        let up_b = self.up.lead_cols(rank)?;
        let (h, _) = forward_parts(&self.base, &down_b, &up_b, self.alpha, rank, x, x)?;
        Ok(h)
    }

    /// (d_down b x d, d_up m x b) for the given input and output gradient.
    pub fn backward(&self, x: &Mat<T>, rank: usize, grad_out: &Mat<T>) -> Result<(Mat<T>, Mat<T>)> {
        let down_b = self.down.lead_rows(rank)?;
        let up_b = self.up.lead_cols(rank)?;
        let down_out = down_b.matmul(x)?;
        let (d_down, d_up, _) = backward_parts(
            &self.base, &down_b, &up_b, self.alpha, rank, x, &down_out, grad_out, None,
        )?;
        Ok((d_down, d_up))
    }
}

/// h = base * x + (alpha/b) * up_b * (down_b * x_adapter). Shared by the f32
/// layer and the f64 checking mode so both run the identical formula.
fn forward_parts<T: Scalar>(
    base: &Mat<T>,
    down_b: &Mat<T>,
    up_b: &Mat<T>,
    alpha: T,
    rank: usize,
    x: &Mat<T>,
    x_adapter: &Mat<T>,
) -> Result<(Mat<T>, Mat<T>)> {
    let factor = alpha / T::from_f64(rank as f64);
    let down_out = down_b.matmul(x_adapter)?;
    let adapter = up_b.matmul(&down_out)?.scale(factor);
    let h = base.matmul(x)?.add(&adapter)?;
    Ok((h, down_out))
}

/// d_up = (alpha/b) * g * down_out^T; d_down = (alpha/b) * up_b^T * g * x~^T;
/// d_x = base^T * g + (alpha/b) * mask .* (down_b^T * (up_b^T * g)),
/// with the dropout mask applied to the adapter path only.
#[allow(clippy::too_many_arguments)]
fn backward_parts<T: Scalar>(
    base: &Mat<T>,
    down_b: &Mat<T>,
    up_b: &Mat<T>,
    alpha: T,
    rank: usize,
    x_adapter: &Mat<T>,
    down_out: &Mat<T>,
    grad_out: &Mat<T>,
    mask: Option<&Mat<T>>,
) -> Result<(Mat<T>, Mat<T>, Mat<T>)> {
    let factor = alpha / T::from_f64(rank as f64);
    let up_t_g = up_b.transpose().matmul(grad_out)?;
    let d_up = grad_out.matmul(&down_out.transpose())?.scale(factor);
    let d_down = up_t_g.matmul(&x_adapter.transpose())?.scale(factor);
    let mut adapter_path = down_b.transpose().matmul(&up_t_g)?.scale(factor);
    if let Some(m) = mask {
        adapter_path = adapter_path.hadamard(m)?;
    }
    let d_input = base.transpose().matmul(grad_out)?.add(&adapter_path)?;
    Ok((d_down, d_up, d_input))
}
