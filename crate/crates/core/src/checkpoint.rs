//! Bit-exact QDLR containers for checkpoints, datasets, and dense matrices.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "QDLR" | u32 version | u64 header length | header (canonical JSON)
//! then blobs in declaration order, each:
//! u64 length | payload bytes | u32 crc32
//! ```
//!
//! The header is serialized from fixed structs (no timestamps, no maps), so
//! saving the same state twice yields byte-identical files. Version and kind
//! are checked before any blob is read; every blob is length-framed and
//! checksummed, and failures name the blob.
//!
//! Packed 4-bit codes store the earlier element in the low nibble; constants
//! arrays are in block order; f32 arrays are raw little-endian words.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, DynamicLoraLayer};
use crate::error::{Error, Result};
use crate::model::{Head, ToyModel};
use crate::quant::{BlockConstants, QuantizedMatrix};
use crate::tensor::Matrix;
use crate::train::{Dataset, LayerMoments, OptimizerState};

pub const MAGIC: [u8; 4] = *b"QDLR";
pub const VERSION: u32 = 1;

/// Shape of one adapter site as stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub out_dim: usize,
    pub in_dim: usize,
}

/// First- and second-level quantization geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantMeta {
    pub block_size: usize,
    /// `None` means raw f32 constants (double quantization off).
    pub superblock_size: Option<usize>,
}

/// Container payload descriptor; the `kind` tag dispatches parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Header {
    Checkpoint {
        layers: Vec<LayerMeta>,
        adapter: AdapterConfig,
        head: Head,
        quant: QuantMeta,
        train_config_hash: String,
        seed: u64,
        optimizer_step: Option<u64>,
    },
    Dataset {
        in_dim: usize,
        out_dim: usize,
        n_train: usize,
        n_test: usize,
    },
    Matrix {
        rows: usize,
        cols: usize,
    },
}

/// Header plus the exact byte count consumed reading it.
#[derive(Clone, Debug, PartialEq)]
pub struct ContainerInfo {
    pub version: u32,
    pub header: Header,
    pub header_bytes: u64,
}

fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f32s(bytes: &[u8], blob: &str) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::CorruptContainer {
            message: format!("blob {blob} length {} is not a multiple of 4", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

struct BlobWriter<W: Write> {
    inner: W,
}

impl<W: Write> BlobWriter<W> {
    fn write_blob(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(&(bytes.len() as u64).to_le_bytes())?;
        self.inner.write_all(bytes)?;
        self.inner.write_all(&crc32fast::hash(bytes).to_le_bytes())
    }
}

struct BlobReader<R: Read> {
    inner: R,
}

impl<R: Read> BlobReader<R> {
    fn read_exact_or_eof(&mut self, buf: &mut [u8], blob: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| Error::UnexpectedEof {
            blob: blob.to_string(),
        })
    }

    fn read_blob(&mut self, blob: &str) -> Result<Vec<u8>> {
        let mut len_bytes = [0u8; 8];
        self.read_exact_or_eof(&mut len_bytes, blob)?;
        let len = u64::from_le_bytes(len_bytes);
        let mut payload = vec![0u8; len as usize];
        self.read_exact_or_eof(&mut payload, blob)?;
        let mut crc_bytes = [0u8; 4];
        self.read_exact_or_eof(&mut crc_bytes, blob)?;
        if crc32fast::hash(&payload) != u32::from_le_bytes(crc_bytes) {
            return Err(Error::ChecksumMismatch {
                blob: blob.to_string(),
            });
        }
        Ok(payload)
    }
}

fn write_container(path: &Path, header: &Header, blobs: &[Vec<u8>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header_json = serde_json::to_vec(header).map_err(|e| Error::CorruptContainer {
        message: format!("header serialization failed: {e}"),
    })?;
    let io_err = |e| Error::io(path, e);
    w.write_all(&MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;
    let mut bw = BlobWriter { inner: w };
    for blob in blobs {
        bw.write_blob(blob).map_err(|e| Error::io(path, e))?;
    }
    bw.inner.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse magic, version, and header. Reads exactly 16 + header-length bytes
/// and never touches blob data; version is rejected before the header parse.
pub fn read_header<R: Read>(reader: &mut R) -> Result<ContainerInfo> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic).map_err(|_| Error::UnexpectedEof {
        blob: "magic".to_string(),
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let mut version_bytes = [0u8; 4];
    reader
        .read_exact(&mut version_bytes)
        .map_err(|_| Error::UnexpectedEof {
            blob: "version".to_string(),
        })?;
    let version = u32::from_le_bytes(version_bytes);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let mut len_bytes = [0u8; 8];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|_| Error::UnexpectedEof {
            blob: "header length".to_string(),
        })?;
    let header_len = u64::from_le_bytes(len_bytes);
    let mut header_json = vec![0u8; header_len as usize];
    reader
        .read_exact(&mut header_json)
        .map_err(|_| Error::UnexpectedEof {
            blob: "header".to_string(),
        })?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| Error::CorruptContainer {
            message: format!("header parse failed: {e}"),
        })?;
    Ok(ContainerInfo {
        version,
        header,
        header_bytes: 16 + header_len,
    })
}

/// Header-only inspection of a container file.
pub fn inspect(path: &Path) -> Result<ContainerInfo> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    read_header(&mut reader)
}

fn constants_blobs(q: &QuantizedMatrix, blobs: &mut Vec<Vec<u8>>) {
    match q.constants() {
        BlockConstants::Raw { absmax } => {
            blobs.push(f32s_to_bytes(absmax));
        }
        BlockConstants::DoubleQuant {
            codes,
            scales,
            offsets,
            ..
        } => {
            blobs.push(codes.clone());
            blobs.push(f32s_to_bytes(scales));
            blobs.push(f32s_to_bytes(offsets));
        }
    }
}

/// Write a model (and optionally optimizer state) as a checkpoint container.
/// Refuses to write any non-finite parameter or moment.
pub fn save_checkpoint(
    path: &Path,
    model: &ToyModel,
    train_config_hash: &str,
    seed: u64,
    opt: Option<&OptimizerState>,
) -> Result<()> {
    for layer in model.layers() {
        if !layer.down().all_finite() || !layer.up().all_finite() {
            return Err(Error::NonFinite {
                context: "checkpoint parameters",
            });
        }
    }
    if let Some(state) = opt {
        for m in &state.layers {
            if !(m.m_down.all_finite()
                && m.v_down.all_finite()
                && m.m_up.all_finite()
                && m.v_up.all_finite())
            {
                return Err(Error::NonFinite {
                    context: "checkpoint optimizer state",
                });
            }
        }
    }

    let first = model.layers()[0].base();
    let quant = QuantMeta {
        block_size: first.block_size(),
        superblock_size: match first.constants() {
            BlockConstants::Raw { .. } => None,
            BlockConstants::DoubleQuant {
                superblock_size, ..
            } => Some(*superblock_size),
        },
    };
    let header = Header::Checkpoint {
        layers: model
            .layers()
            .iter()
            .map(|l| LayerMeta {
                out_dim: l.out_dim(),
                in_dim: l.in_dim(),
            })
            .collect(),
        adapter: model.adapter_config().clone(),
        head: model.head(),
        quant,
        train_config_hash: train_config_hash.to_string(),
        seed,
        optimizer_step: opt.map(|s| s.step),
    };

    let mut blobs = Vec::new();
    for layer in model.layers() {
        blobs.push(layer.base().packed_codes().to_vec());
        constants_blobs(layer.base(), &mut blobs);
        blobs.push(f32s_to_bytes(layer.down().data()));
        blobs.push(f32s_to_bytes(layer.up().data()));
    }
    if let Some(state) = opt {
        for m in &state.layers {
            blobs.push(f32s_to_bytes(m.m_down.data()));
            blobs.push(f32s_to_bytes(m.v_down.data()));
            blobs.push(f32s_to_bytes(m.m_up.data()));
            blobs.push(f32s_to_bytes(m.v_up.data()));
        }
    }
    write_container(path, &header, &blobs)
}

/// Load a checkpoint container back into a model and optional optimizer
/// state, verifying checksums and every structural invariant.
pub fn load_checkpoint(path: &Path) -> Result<(ToyModel, Option<OptimizerState>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let info = read_header(&mut reader)?;
    let (layers_meta, adapter, head, quant, optimizer_step) = match info.header {
        Header::Checkpoint {
            layers,
            adapter,
            head,
            quant,
            optimizer_step,
            ..
        } => (layers, adapter, head, quant, optimizer_step),
        other => {
            return Err(Error::WrongContainerKind {
                expected: "checkpoint",
                found: kind_name(&other).to_string(),
            })
        }
    };
    if layers_meta.is_empty() {
        return Err(Error::CorruptContainer {
            message: "checkpoint lists no layers".to_string(),
        });
    }
    adapter.validate()?;

    let mut br = BlobReader { inner: reader };
    let mut layers = Vec::with_capacity(layers_meta.len());
    for (i, meta) in layers_meta.iter().enumerate() {
        let codes = br.read_blob(&format!("layer{i}/codes"))?;
        let constants = match quant.superblock_size {
            None => {
                let absmax =
                    bytes_to_f32s(&br.read_blob(&format!("layer{i}/absmax"))?, "absmax")?;
                BlockConstants::Raw { absmax }
            }
            Some(superblock_size) => {
                let ccodes = br.read_blob(&format!("layer{i}/absmax_codes"))?;
                let scales = bytes_to_f32s(
                    &br.read_blob(&format!("layer{i}/superblock_scales"))?,
                    "superblock_scales",
                )?;
                let offsets = bytes_to_f32s(
                    &br.read_blob(&format!("layer{i}/superblock_offsets"))?,
                    "superblock_offsets",
                )?;
                BlockConstants::DoubleQuant {
                    codes: ccodes,
                    superblock_size,
                    scales,
                    offsets,
                }
            }
        };
        let base = QuantizedMatrix::from_parts(
            meta.out_dim,
            meta.in_dim,
            quant.block_size,
            codes,
            constants,
        )?;
        let down_data = bytes_to_f32s(&br.read_blob(&format!("layer{i}/down"))?, "down")?;
        let up_data = bytes_to_f32s(&br.read_blob(&format!("layer{i}/up"))?, "up")?;
        let down = Matrix::from_vec(adapter.r_max, meta.in_dim, down_data)?;
        let up = Matrix::from_vec(meta.out_dim, adapter.r_max, up_data)?;
        layers.push(DynamicLoraLayer::from_parts(base, down, up, adapter.clone())?);
    }

    let opt = match optimizer_step {
        None => None,
        Some(step) => {
            let mut moment_layers = Vec::with_capacity(layers_meta.len());
            for (i, meta) in layers_meta.iter().enumerate() {
                let read_mat = |br: &mut BlobReader<_>, name: &str, rows, cols| -> Result<Matrix> {
                    let data =
                        bytes_to_f32s(&br.read_blob(&format!("optimizer{i}/{name}"))?, name)?;
                    Matrix::from_vec(rows, cols, data)
                };
                moment_layers.push(LayerMoments {
                    m_down: read_mat(&mut br, "m_down", adapter.r_max, meta.in_dim)?,
                    v_down: read_mat(&mut br, "v_down", adapter.r_max, meta.in_dim)?,
                    m_up: read_mat(&mut br, "m_up", meta.out_dim, adapter.r_max)?,
                    v_up: read_mat(&mut br, "v_up", meta.out_dim, adapter.r_max)?,
                });
            }
            Some(OptimizerState::from_parts(moment_layers, step))
        }
    };

    Ok((ToyModel::new(layers, head)?, opt))
}

/// Write the four dataset tensors as a container.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    for (mat, _) in dataset_tensors(dataset) {
        if !mat.all_finite() {
            return Err(Error::NonFinite {
                context: "dataset tensors",
            });
        }
    }
    let header = Header::Dataset {
        in_dim: dataset.train_inputs.rows(),
        out_dim: dataset.train_targets.rows(),
        n_train: dataset.train_inputs.cols(),
        n_test: dataset.test_inputs.cols(),
    };
    let blobs: Vec<Vec<u8>> = dataset_tensors(dataset)
        .into_iter()
        .map(|(mat, _)| f32s_to_bytes(mat.data()))
        .collect();
    write_container(path, &header, &blobs)
}

fn dataset_tensors(dataset: &Dataset) -> [(&Matrix, &'static str); 4] {
    [
        (&dataset.train_inputs, "train_inputs"),
        (&dataset.train_targets, "train_targets"),
        (&dataset.test_inputs, "test_inputs"),
        (&dataset.test_targets, "test_targets"),
    ]
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let info = read_header(&mut reader)?;
    let (in_dim, out_dim, n_train, n_test) = match info.header {
        Header::Dataset {
            in_dim,
            out_dim,
            n_train,
            n_test,
        } => (in_dim, out_dim, n_train, n_test),
        other => {
            return Err(Error::WrongContainerKind {
                expected: "dataset",
                found: kind_name(&other).to_string(),
            })
        }
    };
    let mut br = BlobReader { inner: reader };
    let mut read_mat = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
        Matrix::from_vec(rows, cols, bytes_to_f32s(&br.read_blob(name)?, name)?)
    };
    Ok(Dataset {
        train_inputs: read_mat("train_inputs", in_dim, n_train)?,
        train_targets: read_mat("train_targets", out_dim, n_train)?,
        test_inputs: read_mat("test_inputs", in_dim, n_test)?,
        test_targets: read_mat("test_targets", out_dim, n_test)?,
    })
}

/// Write one dense f32 matrix as a container.
pub fn save_matrix(path: &Path, matrix: &Matrix) -> Result<()> {
    if !matrix.all_finite() {
        return Err(Error::NonFinite {
            context: "matrix payload",
        });
    }
    let header = Header::Matrix {
        rows: matrix.rows(),
        cols: matrix.cols(),
    };
    write_container(path, &header, &[f32s_to_bytes(matrix.data())])
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let info = read_header(&mut reader)?;
    let (rows, cols) = match info.header {
        Header::Matrix { rows, cols } => (rows, cols),
        other => {
            return Err(Error::WrongContainerKind {
                expected: "matrix",
                found: kind_name(&other).to_string(),
            })
        }
    };
    let mut br = BlobReader { inner: reader };
    Matrix::from_vec(rows, cols, bytes_to_f32s(&br.read_blob("matrix")?, "matrix")?)
}

fn kind_name(header: &Header) -> &'static str {
    match header {
        Header::Checkpoint { .. } => "checkpoint",
        Header::Dataset { .. } => "dataset",
        Header::Matrix { .. } => "matrix",
    }
}
