//! Editor parameters: per-block attention and FFN weights, layer norms,
//! deterministic initialization, and the flat-binary checkpoint format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::KernelError;

/// Architecture of the editor stack. `model_dim` must be divisible by `heads`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub blocks: usize,
    /// Pre-layer-norm placement when true; raw residual blocks when false.
    pub layer_norm: bool,
    /// Bias terms on every linear projection when true.
    pub bias: bool,
}

impl EditorConfig {
    pub fn new(model_dim: usize, heads: usize, blocks: usize) -> Self {
        EditorConfig {
            model_dim,
            heads,
            ffn_dim: 4 * model_dim,
            blocks,
            layer_norm: true,
            bias: true,
        }
    }

    /// Defaults: 2 blocks, 8 heads, ffn 4xD, pre-LN, biases on.
    pub fn default_for_dim(model_dim: usize) -> Self {
        EditorConfig::new(model_dim, 8, 2)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.model_dim == 0 || self.heads == 0 || self.blocks == 0 || self.ffn_dim == 0 {
            return Err(KernelError::Shape(
                "model_dim, heads, ffn_dim and blocks must all be positive".into(),
            ));
        }
        if self.model_dim % self.heads != 0 {
            return Err(KernelError::Shape(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Weights for one cross-attention + FFN block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub b_q: Vec<f64>,
    pub b_k: Vec<f64>,
    pub b_v: Vec<f64>,
    pub b_o: Vec<f64>,
    pub w_1: Matrix,
    pub b_1: Vec<f64>,
    pub w_2: Matrix,
    pub b_2: Vec<f64>,
    /// Layer norm ahead of the attention, then ahead of the FFN.
    pub ln1_scale: Vec<f64>,
    pub ln1_offset: Vec<f64>,
    pub ln2_scale: Vec<f64>,
    pub ln2_offset: Vec<f64>,
}

impl BlockParams {
    fn zeros(cfg: &EditorConfig) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        BlockParams {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            b_q: vec![0.0; d],
            b_k: vec![0.0; d],
            b_v: vec![0.0; d],
            b_o: vec![0.0; d],
            w_1: Matrix::zeros(d, f),
            b_1: vec![0.0; f],
            w_2: Matrix::zeros(f, d),
            b_2: vec![0.0; d],
            ln1_scale: vec![1.0; d],
            ln1_offset: vec![0.0; d],
            ln2_scale: vec![1.0; d],
            ln2_offset: vec![0.0; d],
        }
    }
}

/// Full parameter set for the editor stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditorParams {
    pub config: EditorConfig,
    pub blocks: Vec<BlockParams>,
}

impl EditorParams {
    /// All-zero weights (layer-norm scales at one). `editor_forward` with
    /// these is the identity map.
    pub fn zeros(cfg: EditorConfig) -> Result<Self, KernelError> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks).map(|_| BlockParams::zeros(&cfg)).collect();
        Ok(EditorParams {
            config: cfg,
            blocks,
        })
    }

    /// Deterministic initialization used by the self-checks: output
    /// projections (`w_o`, `w_2`) and all biases zero, remaining weights
    /// uniform in [-1/sqrt(D), 1/sqrt(D)] from a fixed-seed generator.
    pub fn seeded(cfg: EditorConfig, seed: u64) -> Result<Self, KernelError> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(seed);
        let bound = 1.0 / (cfg.model_dim as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let mut block = BlockParams::zeros(&cfg);
            for m in [
                &mut block.w_q,
                &mut block.w_k,
                &mut block.w_v,
                &mut block.w_1,
            ] {
                for v in m.data_mut() {
                    *v = rng.uniform(-bound, bound);
                }
            }
            blocks.push(block);
        }
        Ok(EditorParams {
            config: cfg,
            blocks,
        })
    }

    /// Like [`EditorParams::seeded`] but with every tensor randomized,
    /// including output projections. Used by the gradient checks, where an
    /// identity-shaped network would leave most gradients trivially zero.
    pub fn seeded_dense(cfg: EditorConfig, seed: u64) -> Result<Self, KernelError> {
        let mut params = EditorParams::seeded(cfg, seed)?;
        let mut rng = SplitMix64::new(seed ^ 0x9e37_79b9_7f4a_7c15);
        let bound = 1.0 / (params.config.model_dim as f64).sqrt();
        for block in &mut params.blocks {
            for m in [&mut block.w_o, &mut block.w_2] {
                for v in m.data_mut() {
                    *v = rng.uniform(-bound, bound);
                }
            }
            if params.config.bias {
                for b in [
                    &mut block.b_q,
                    &mut block.b_k,
                    &mut block.b_v,
                    &mut block.b_o,
                    &mut block.b_1,
                    &mut block.b_2,
                ] {
                    for v in b.iter_mut() {
                        *v = rng.uniform(-bound, bound);
                    }
                }
            }
            if params.config.layer_norm {
                for s in [&mut block.ln1_scale, &mut block.ln2_scale] {
                    for v in s.iter_mut() {
                        *v = 1.0 + rng.uniform(-0.1, 0.1);
                    }
                }
                for o in [&mut block.ln1_offset, &mut block.ln2_offset] {
                    for v in o.iter_mut() {
                        *v = rng.uniform(-0.1, 0.1);
                    }
                }
            }
        }
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        self.config.validate()?;
        if self.blocks.len() != self.config.blocks {
            return Err(KernelError::Shape(format!(
                "config declares {} blocks, params hold {}",
                self.config.blocks,
                self.blocks.len()
            )));
        }
        let d = self.config.model_dim;
        let f = self.config.ffn_dim;
        for (i, b) in self.blocks.iter().enumerate() {
            let shapes_ok = b.w_q.rows() == d
                && b.w_q.cols() == d
                && b.w_k.rows() == d
                && b.w_k.cols() == d
                && b.w_v.rows() == d
                && b.w_v.cols() == d
                && b.w_o.rows() == d
                && b.w_o.cols() == d
                && b.w_1.rows() == d
                && b.w_1.cols() == f
                && b.w_2.rows() == f
                && b.w_2.cols() == d
                && b.b_q.len() == d
                && b.b_k.len() == d
                && b.b_v.len() == d
                && b.b_o.len() == d
                && b.b_1.len() == f
                && b.b_2.len() == d
                && b.ln1_scale.len() == d
                && b.ln1_offset.len() == d
                && b.ln2_scale.len() == d
                && b.ln2_offset.len() == d;
            if !shapes_ok {
                return Err(KernelError::Shape(format!(
                    "block {i} has inconsistent shapes"
                )));
            }
            let finite = b.w_q.is_finite()
                && b.w_k.is_finite()
                && b.w_v.is_finite()
                && b.w_o.is_finite()
                && b.w_1.is_finite()
                && b.w_2.is_finite()
                && [&b.b_q, &b.b_k, &b.b_v, &b.b_o, &b.b_1, &b.b_2]
                    .iter()
                    .all(|v| v.iter().all(|x| x.is_finite()))
                && [&b.ln1_scale, &b.ln1_offset, &b.ln2_scale, &b.ln2_offset]
                    .iter()
                    .all(|v| v.iter().all(|x| x.is_finite()));
            if !finite {
                return Err(KernelError::NonFinite {
                    locus: format!("block {i} parameters"),
                });
            }
        }
        Ok(())
    }

    /// Visits every tensor in checkpoint order: (name, shape, values).
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[usize], &[f64])) {
        for (i, b) in self.blocks.iter().enumerate() {
            let d = self.config.model_dim;
            let ff = self.config.ffn_dim;
            f(&format!("block{i}.w_q"), &[d, d], b.w_q.data());
            f(&format!("block{i}.w_k"), &[d, d], b.w_k.data());
            f(&format!("block{i}.w_v"), &[d, d], b.w_v.data());
            f(&format!("block{i}.w_o"), &[d, d], b.w_o.data());
            f(&format!("block{i}.b_q"), &[d], &b.b_q);
            f(&format!("block{i}.b_k"), &[d], &b.b_k);
            f(&format!("block{i}.b_v"), &[d], &b.b_v);
            f(&format!("block{i}.b_o"), &[d], &b.b_o);
            f(&format!("block{i}.w_1"), &[d, ff], b.w_1.data());
            f(&format!("block{i}.b_1"), &[ff], &b.b_1);
            f(&format!("block{i}.w_2"), &[ff, d], b.w_2.data());
            f(&format!("block{i}.b_2"), &[d], &b.b_2);
            f(&format!("block{i}.ln1_scale"), &[d], &b.ln1_scale);
            f(&format!("block{i}.ln1_offset"), &[d], &b.ln1_offset);
            f(&format!("block{i}.ln2_scale"), &[d], &b.ln2_scale);
            f(&format!("block{i}.ln2_offset"), &[d], &b.ln2_offset);
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointSidecar {
    dtype: String,
    config: EditorConfig,
    tensors: Vec<TensorDescriptor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorDescriptor {
    name: String,
    shape: Vec<usize>,
}

/// Writes `<path>.bin` (flat little-endian f64) and `<path>.json` (shape
/// sidecar describing order).
pub fn save_checkpoint(params: &EditorParams, path: &Path) -> Result<(), KernelError> {
    params.validate()?;
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    params.for_each_tensor(|name, shape, values| {
        tensors.push(TensorDescriptor {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let sidecar = CheckpointSidecar {
        dtype: "f64le".to_string(),
        config: params.config.clone(),
        tensors,
    };
    let mut bin = fs::File::create(path.with_extension("bin"))?;
    bin.write_all(&blob)?;
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    fs::write(path.with_extension("json"), json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EditorParams, KernelError> {
    let sidecar: CheckpointSidecar =
        serde_json::from_slice(&fs::read(path.with_extension("json"))?)
            .map_err(|e| KernelError::Checkpoint(format!("bad sidecar: {e}")))?;
    if sidecar.dtype != "f64le" {
        return Err(KernelError::Checkpoint(format!(
            "unsupported dtype {}",
            sidecar.dtype
        )));
    }
    let mut bin = fs::File::open(path.with_extension("bin"))?;
    let mut blob = Vec::new();
    bin.read_to_end(&mut blob)?;

    let mut params = EditorParams::zeros(sidecar.config.clone())?;
    let mut offset = 0usize;
    let mut expected = Vec::new();
    params.for_each_tensor(|name, shape, _| expected.push((name.to_string(), shape.to_vec())));
    if expected.len() != sidecar.tensors.len() {
        return Err(KernelError::Checkpoint(format!(
            "sidecar lists {} tensors, config implies {}",
            sidecar.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), desc) in expected.iter().zip(&sidecar.tensors) {
        if &desc.name != name || &desc.shape != shape {
            return Err(KernelError::Checkpoint(format!(
                "tensor order mismatch: expected {name} {shape:?}, sidecar has {} {:?}",
                desc.name, desc.shape
            )));
        }
    }

    let mut read_tensor = |len: usize| -> Result<Vec<f64>, KernelError> {
        let bytes = len * 8;
        if offset + bytes > blob.len() {
            return Err(KernelError::Checkpoint("binary blob truncated".into()));
        }
        let mut out = Vec::with_capacity(len);
        for chunk in blob[offset..offset + bytes].chunks_exact(8) {
            out.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
        offset += bytes;
        Ok(out)
    };

    let d = params.config.model_dim;
    let ff = params.config.ffn_dim;
    for b in &mut params.blocks {
        b.w_q = Matrix::from_vec(d, d, read_tensor(d * d)?)?;
        b.w_k = Matrix::from_vec(d, d, read_tensor(d * d)?)?;
        b.w_v = Matrix::from_vec(d, d, read_tensor(d * d)?)?;
        b.w_o = Matrix::from_vec(d, d, read_tensor(d * d)?)?;
        b.b_q = read_tensor(d)?;
        b.b_k = read_tensor(d)?;
        b.b_v = read_tensor(d)?;
        b.b_o = read_tensor(d)?;
        b.w_1 = Matrix::from_vec(d, ff, read_tensor(d * ff)?)?;
        b.b_1 = read_tensor(ff)?;
        b.w_2 = Matrix::from_vec(ff, d, read_tensor(ff * d)?)?;
        b.b_2 = read_tensor(d)?;
        b.ln1_scale = read_tensor(d)?;
        b.ln1_offset = read_tensor(d)?;
        b.ln2_scale = read_tensor(d)?;
        b.ln2_offset = read_tensor(d)?;
    }
    if offset != blob.len() {
        return Err(KernelError::Checkpoint(format!(
            "binary blob has {} trailing bytes",
            blob.len() - offset
        )));
    }
    params.validate()?;
    Ok(params)
}

/// SplitMix64: tiny deterministic generator so seeded parameter sets are
/// reproducible independent of any external RNG crate's stream changes.
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}
