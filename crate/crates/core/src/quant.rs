//! Blockwise 4-bit NormalFloat quantization of frozen base weights, with
//! optional double quantization of the per-block scaling constants.
//!
//! First level: each block of `block_size` elements is scaled by its max
//! absolute value (absmax) and every element is coded as the index of the
//! nearest of 16 codebook values; ties round toward the lower index. Codes
//! pack two per byte, low nibble first.
//!
//! Second level (double quantization): the per-block absmax values are
//! themselves coded to 8 bits per superblock of `superblock_size` blocks.
//! The mapping, fixed here once and for all:
//!
//! ```text
//! offset = mean(absmax over the superblock)          (one f32)
//! scale  = max |absmax - offset| over the superblock (one f32)
//! code 0          <-> absmax is exactly 0
//! code c in 1..=255 <-> clamp_0( offset + scale * (c - 128) / 127 )
//! encode: c = clamp(round(128 + 127 * (absmax - offset) / scale), 1, 255)
//! ```
//!
//! Code 0 is reserved so an all-zero block decodes to exactly zero, and the
//! final `clamp_0` keeps every decoded absmax nonnegative. A zero `scale`
//! (all absmax equal) encodes as the midpoint 128 and decodes to `offset`
//! exactly.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Number of levels in the 4-bit code.
pub const NF4_LEVELS: usize = 16;

/// Index of the exact-zero codebook entry.
pub const NF4_ZERO_CODE: u8 = 7;

const ABSMAX_ZERO_CODE: u8 = 0;
const ABSMAX_MID_CODE: u8 = 128;

/// The 16-value 4-bit NormalFloat code: normalized quantiles of the standard
/// normal with exact -1, 0, +1 entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Nf4Codebook {
    values: [f32; NF4_LEVELS],
}

/// Inverse CDF of the standard normal (Acklam's rational approximation,
/// relative error below 1.2e-9 — far inside the codebook's 1e-6 contract).
fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

impl Nf4Codebook {
    /// Builds the code from evenly spaced normal quantiles: 8 probabilities
    /// from `offset` down toward 0.5 on the positive side, 7 on the negative
    /// side, plus an exact zero at the join, all normalized so the endpoints
    /// are exactly -1 and +1. `offset = 1 - (1/32 + 1/30)/2`.
    pub fn build() -> Self {
        let offset = 1.0 - (1.0 / 32.0 + 1.0 / 30.0) / 2.0;

        let mut raw = [0.0f64; NF4_LEVELS];
        // negative side: 7 values from -quantile(offset) up toward zero
        for (i, v) in raw.iter_mut().take(7).enumerate() {
            let p = offset + (0.5 - offset) * i as f64 / 7.0;
            *v = -normal_quantile(p);
        }
        raw[7] = 0.0;
        // positive side: 8 values from near zero up to quantile(offset)
        for i in 0..8 {
            let p = offset + (0.5 - offset) * (7 - i) as f64 / 8.0;
            raw[8 + i] = normal_quantile(p);
        }

        let max = raw[NF4_LEVELS - 1];
        let mut values = [0.0f32; NF4_LEVELS];
        for (v, &r) in values.iter_mut().zip(raw.iter()) {
            *v = (r / max) as f32;
        }
        // normalization guarantees the endpoints; force them bit-exact anyway
        values[0] = -1.0;
        values[7] = 0.0;
        values[NF4_LEVELS - 1] = 1.0;
        Nf4Codebook { values }
    }

    /// The process-wide codebook (the construction is deterministic).
    pub fn get() -> &'static Nf4Codebook {
        static CODEBOOK: OnceLock<Nf4Codebook> = OnceLock::new();
        CODEBOOK.get_or_init(Nf4Codebook::build)
    }

    #[inline]
    pub fn values(&self) -> &[f32; NF4_LEVELS] {
        &self.values
    }

    #[inline]
    pub fn value(&self, code: u8) -> f32 {
        self.values[code as usize]
    }

    /// Index of the nearest codebook value to `t`; exact midpoints go to the
    /// lower index. Distances are compared in f64.
    pub fn nearest_code(&self, t: f64) -> u8 {
        let mut best = 0u8;
        let mut best_dist = (t - f64::from(self.values[0])).abs();
        for (k, &v) in self.values.iter().enumerate().skip(1) {
            let d = (t - f64::from(v)).abs();
            if d < best_dist {
                best = k as u8;
                best_dist = d;
            }
        }
        best
    }
}

/// How the per-block absmax constants are stored.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockConstants {
    /// One raw f32 per block (double quantization off).
    Raw { absmax: Vec<f32> },
    /// 8-bit code per block plus one f32 scale and offset per superblock.
    DoubleQuant {
        codes: Vec<u8>,
        superblock_size: usize,
        scales: Vec<f32>,
        offsets: Vec<f32>,
    },
}

/// A frozen weight matrix stored as packed 4-bit codes plus per-block
/// scaling constants. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    block_size: usize,
    codes: Vec<u8>,
    constants: BlockConstants,
}

/// Size accounting for a quantized matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BitsReport {
    pub params: usize,
    /// Effective bits per parameter from the layout formula
    /// (4 + constant bits amortized over the block sizes).
    pub bits_per_param: f64,
    pub code_bytes: usize,
    pub constant_bytes: usize,
    pub total_bytes: usize,
}

/// Quantize with double-quantized constants (the default storage).
pub fn quantize(w: &Matrix, block_size: usize, superblock_size: usize) -> Result<QuantizedMatrix> {
    if superblock_size == 0 {
        return Err(Error::InvalidArgument {
            context: "superblock_size must be >= 1".into(),
        });
    }
    let (codes, absmax) = first_level(w, block_size)?;
    let constants = encode_constants(&absmax, superblock_size);
    Ok(QuantizedMatrix {
        rows: w.rows(),
        cols: w.cols(),
        block_size,
        codes,
        constants,
    })
}

/// Quantize keeping raw f32 absmax per block (double quantization off).
pub fn quantize_single_level(w: &Matrix, block_size: usize) -> Result<QuantizedMatrix> {
    let (codes, absmax) = first_level(w, block_size)?;
    Ok(QuantizedMatrix {
        rows: w.rows(),
        cols: w.cols(),
        block_size,
        codes,
        constants: BlockConstants::Raw { absmax },
    })
}

fn first_level(w: &Matrix, block_size: usize) -> Result<(Vec<u8>, Vec<f32>)> {
    if block_size == 0 {
        return Err(Error::InvalidArgument {
            context: "block_size must be >= 1".into(),
        });
    }
    if !w.all_finite() {
        return Err(Error::NonFinite {
            context: "quantize input",
        });
    }
    let cb = Nf4Codebook::get();
    let data = w.data();
    let n = data.len();
    let n_blocks = n.div_ceil(block_size);

    let mut absmax = Vec::with_capacity(n_blocks);
    let mut nibbles = Vec::with_capacity(n);
    for block in data.chunks(block_size) {
        let a = block.iter().fold(0.0f32, |acc, &v| acc.max(v.abs()));
        absmax.push(a);
        if a == 0.0 {
            nibbles.extend(std::iter::repeat_n(NF4_ZERO_CODE, block.len()));
        } else {
            let inv = f64::from(a);
            nibbles.extend(block.iter().map(|&v| cb.nearest_code(f64::from(v) / inv)));
        }
    }

    let mut codes = vec![0u8; n.div_ceil(2)];
    for (i, &nib) in nibbles.iter().enumerate() {
        if i % 2 == 0 {
            codes[i / 2] = nib & 0x0F;
        } else {
            codes[i / 2] |= (nib & 0x0F) << 4;
        }
    }
    Ok((codes, absmax))
}

fn encode_constants(absmax: &[f32], superblock_size: usize) -> BlockConstants {
    let n_super = absmax.len().div_ceil(superblock_size);
    let mut codes = Vec::with_capacity(absmax.len());
    let mut scales = Vec::with_capacity(n_super);
    let mut offsets = Vec::with_capacity(n_super);

    for group in absmax.chunks(superblock_size) {
        let mean = group.iter().map(|&a| f64::from(a)).sum::<f64>() / group.len() as f64;
        let offset = mean as f32;
        let radius = group
            .iter()
            .fold(0.0f64, |acc, &a| acc.max((f64::from(a) - f64::from(offset)).abs()));
        let scale = radius as f32;
        offsets.push(offset);
        scales.push(scale);

        for &a in group {
            let code = if a == 0.0 {
                ABSMAX_ZERO_CODE
            } else if scale == 0.0 {
                ABSMAX_MID_CODE
            } else {
                let t = (f64::from(a) - f64::from(offset)) / f64::from(scale);
                (128.0 + 127.0 * t).round().clamp(1.0, 255.0) as u8
            };
            codes.push(code);
        }
    }
    BlockConstants::DoubleQuant {
        codes,
        superblock_size,
        scales,
        offsets,
    }
}

#[inline]
fn decode_absmax_code(code: u8, scale: f32, offset: f32) -> f32 {
    if code == ABSMAX_ZERO_CODE {
        0.0
    } else {
        let v = offset + scale * ((i32::from(code) - 128) as f32 / 127.0);
        v.max(0.0)
    }
}

impl QuantizedMatrix {
    /// Rebuild from stored parts, validating every structural invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        block_size: usize,
        codes: Vec<u8>,
        constants: BlockConstants,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidDimensions { rows, cols });
        }
        if block_size == 0 {
            return Err(Error::InvalidArgument {
                context: "block_size must be >= 1".into(),
            });
        }
        let n = rows * cols;
        if codes.len() != n.div_ceil(2) {
            return Err(Error::CorruptContainer {
                message: format!(
                    "packed code bytes {} do not match {} elements",
                    codes.len(),
                    n
                ),
            });
        }
        let n_blocks = n.div_ceil(block_size);
        match &constants {
            BlockConstants::Raw { absmax } => {
                if absmax.len() != n_blocks {
                    return Err(Error::CorruptContainer {
                        message: format!(
                            "absmax count {} does not match {} blocks",
                            absmax.len(),
                            n_blocks
                        ),
                    });
                }
                if absmax.iter().any(|a| !a.is_finite() || *a < 0.0) {
                    return Err(Error::CorruptContainer {
                        message: "absmax constants must be finite and nonnegative".into(),
                    });
                }
            }
            BlockConstants::DoubleQuant {
                codes: ccodes,
                superblock_size,
                scales,
                offsets,
            } => {
                if *superblock_size == 0 {
                    return Err(Error::InvalidArgument {
                        context: "superblock_size must be >= 1".into(),
                    });
                }
                let n_super = n_blocks.div_ceil(*superblock_size);
                if ccodes.len() != n_blocks || scales.len() != n_super || offsets.len() != n_super {
                    return Err(Error::CorruptContainer {
                        message: format!(
                            "constant array lengths ({}, {}, {}) do not match {} blocks / {} superblocks",
                            ccodes.len(),
                            scales.len(),
                            offsets.len(),
                            n_blocks,
                            n_super
                        ),
                    });
                }
                if scales.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::CorruptContainer {
                        message: "superblock constants must be finite".into(),
                    });
                }
            }
        }
        Ok(QuantizedMatrix {
            rows,
            cols,
            block_size,
            codes,
            constants,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    #[inline]
    pub fn params(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn num_blocks(&self) -> usize {
        self.params().div_ceil(self.block_size)
    }

    #[inline]
    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    #[inline]
    pub fn constants(&self) -> &BlockConstants {
        &self.constants
    }

    /// 4-bit code of element `i` (row-major order).
    #[inline]
    pub fn code_at(&self, i: usize) -> u8 {
        let byte = self.codes[i / 2];
        if i % 2 == 0 {
            byte & 0x0F
        } else {
            byte >> 4
        }
    }

    /// Decoded absmax of block `b`; always >= 0.
    pub fn decoded_absmax(&self, b: usize) -> f32 {
        match &self.constants {
            BlockConstants::Raw { absmax } => absmax[b],
            BlockConstants::DoubleQuant {
                codes,
                superblock_size,
                scales,
                offsets,
            } => {
                let s = b / superblock_size;
                decode_absmax_code(codes[b], scales[s], offsets[s])
            }
        }
    }

    /// Dense reconstruction: element = codebook[code] * decoded_absmax(block).
    pub fn dequantize(&self) -> Result<Matrix> {
        let cb = Nf4Codebook::get();
        let n = self.params();
        let n_blocks = self.num_blocks();
        // revalidate array lengths; cheap insurance when loaded from disk
        if self.codes.len() != n.div_ceil(2) {
            return Err(Error::CorruptContainer {
                message: "packed code length inconsistent with shape".into(),
            });
        }
        let mut out = Vec::with_capacity(n);
        for b in 0..n_blocks {
            let a = self.decoded_absmax(b);
            let start = b * self.block_size;
            let end = (start + self.block_size).min(n);
            for i in start..end {
                out.push(cb.value(self.code_at(i)) * a);
            }
        }
        Matrix::from_vec(self.rows, self.cols, out)
    }

    /// Effective bits per parameter plus concrete byte totals.
    pub fn memory_footprint(&self) -> BitsReport {
        let params = self.params();
        let bs = self.block_size as f64;
        let (bits_per_param, constant_bytes) = match &self.constants {
            BlockConstants::Raw { absmax } => (4.0 + 32.0 / bs, absmax.len() * 4),
            BlockConstants::DoubleQuant {
                codes,
                superblock_size,
                scales,
                offsets,
            } => (
                4.0 + 8.0 / bs + 2.0 * 32.0 / (bs * *superblock_size as f64),
                codes.len() + (scales.len() + offsets.len()) * 4,
            ),
        };
        BitsReport {
            params,
            bits_per_param,
            code_bytes: self.codes.len(),
            constant_bytes,
            total_bytes: self.codes.len() + constant_bytes,
        }
    }
}
