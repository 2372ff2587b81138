//! Forward pass: adaptive pooling, the cross-attention editor block, the
//! stacked editor, and the l1 objective.
//!
//! Visual tokens are the queries; pooled action tokens supply keys and
//! values. Each block computes
//!
//!   E~ = MHA(E_v W_q, E_a W_k, E_a W_v) + E_v
//!   out = FFN(E~) + E~
//!
//! with softmax over the action positions scaled by 1/sqrt(head_dim).
//! Layer norms (pre-norm placement) and biases are optional per config.

use crate::matrix::Matrix;
use crate::params::{BlockParams, EditorConfig, EditorParams};
use crate::KernelError;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Mean-pools N input rows into `target` rows. Row i of the output averages
/// input rows [floor(i*N/M), ceil((i+1)*N/M)); bins may overlap when N < M
/// and every bin is non-empty.
pub fn adaptive_pool(input: &Matrix, target: usize) -> Result<Matrix, KernelError> {
    let n = input.rows();
    if n == 0 || target == 0 {
        return Err(KernelError::Shape(
            "adaptive_pool needs at least one input row and a positive target".into(),
        ));
    }
    if n == target {
        return Ok(input.clone());
    }
    let mut out = Matrix::zeros(target, input.cols());
    for i in 0..target {
        let start = i * n / target;
        let end = ((i + 1) * n).div_ceil(target);
        let width = end - start;
        for c in 0..input.cols() {
            let mut acc = 0.0;
            for r in start..end {
                acc += input.get(r, c);
            }
            out.set(i, c, acc / width as f64);
        }
    }
    Ok(out)
}

/// GELU, tanh approximation. Smooth, which the finite-difference checks rely on.
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797884560802865; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797884560802865;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

/// Row-wise layer norm; returns (normalized*scale+offset, x_hat, inv_sigma).
pub(crate) fn layer_norm(x: &Matrix, scale: &[f64], offset: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut x_hat = Matrix::zeros(x.rows(), d);
    let mut inv_sigma = vec![0.0; x.rows()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_sigma[r] = inv;
        for c in 0..d {
            let xh = (x.get(r, c) - mean) * inv;
            x_hat.set(r, c, xh);
            out.set(r, c, xh * scale[c] + offset[c]);
        }
    }
    (out, x_hat, inv_sigma)
}

/// Numerically stable row softmax; returns probabilities.
pub(crate) fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut exps = vec![0.0; row.len()];
        for (e, v) in exps.iter_mut().zip(row) {
            *e = (v - max).exp();
            sum += *e;
        }
        for (c, e) in exps.iter().enumerate() {
            out.set(r, c, e / sum);
        }
    }
    out
}

/// Everything the backward pass needs from one block's forward evaluation.
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: Matrix,
    pub q_source: Matrix,
    pub ln1_hat: Option<Matrix>,
    pub ln1_inv_sigma: Option<Vec<f64>>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Per-head attention probabilities, each K x M.
    pub probs: Vec<Matrix>,
    /// Concatenated head outputs before the output projection, K x D.
    pub head_concat: Matrix,
    pub after_attention: Matrix,
    pub ffn_source: Matrix,
    pub ln2_hat: Option<Matrix>,
    pub ln2_inv_sigma: Option<Vec<f64>>,
    /// FFN pre-activation, K x ffn_dim.
    pub ffn_pre: Matrix,
    /// FFN hidden activations, K x ffn_dim.
    pub ffn_hidden: Matrix,
    pub output: Matrix,
}

fn check_finite(m: &Matrix, locus: &str) -> Result<(), KernelError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(KernelError::NonFinite {
            locus: locus.to_string(),
        })
    }
}

/// One editor block over visual tokens `e_v` (K x D) conditioned on action
/// tokens `e_act` (M x D). Output keeps the K x D shape.
pub fn editor_block_cached(
    e_v: &Matrix,
    e_act: &Matrix,
    block: &BlockParams,
    cfg: &EditorConfig,
    locus: &str,
) -> Result<BlockCache, KernelError> {
    let d = cfg.model_dim;
    if e_v.cols() != d || e_act.cols() != d {
        return Err(KernelError::Shape(format!(
            "{locus}: inputs must have width {d} (got E_v {}x{}, E_act {}x{})",
            e_v.rows(),
            e_v.cols(),
            e_act.rows(),
            e_act.cols()
        )));
    }
    if e_v.rows() == 0 || e_act.rows() == 0 {
        return Err(KernelError::Shape(format!("{locus}: empty input")));
    }
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    let (q_source, ln1_hat, ln1_inv_sigma) = if cfg.layer_norm {
        let (out, hat, inv) = layer_norm(e_v, &block.ln1_scale, &block.ln1_offset);
        (out, Some(hat), Some(inv))
    } else {
        (e_v.clone(), None, None)
    };

    let mut q = q_source.matmul(&block.w_q);
    let mut k = e_act.matmul(&block.w_k);
    let mut v = e_act.matmul(&block.w_v);
    if cfg.bias {
        q = q.add_row_broadcast(&block.b_q);
        k = k.add_row_broadcast(&block.b_k);
        v = v.add_row_broadcast(&block.b_v);
    }

    let mut probs = Vec::with_capacity(cfg.heads);
    let mut head_concat = Matrix::zeros(e_v.rows(), d);
    for h in 0..cfg.heads {
        let from = h * head_dim;
        let to = from + head_dim;
        let qh = q.slice_cols(from, to);
        let kh = k.slice_cols(from, to);
        let vh = v.slice_cols(from, to);
        let scores = qh.matmul_transpose(&kh).scale(scale);
        check_finite(&scores, &format!("{locus} head {h} scores"))?;
        let p = softmax_rows(&scores);
        let out = p.matmul(&vh);
        head_concat.write_cols(from, &out);
        probs.push(p);
    }

    let mut mha = head_concat.matmul(&block.w_o);
    if cfg.bias {
        mha = mha.add_row_broadcast(&block.b_o);
    }
    let after_attention = e_v.add(&mha);
    check_finite(&after_attention, &format!("{locus} attention residual"))?;

    let (ffn_source, ln2_hat, ln2_inv_sigma) = if cfg.layer_norm {
        let (out, hat, inv) = layer_norm(&after_attention, &block.ln2_scale, &block.ln2_offset);
        (out, Some(hat), Some(inv))
    } else {
        (after_attention.clone(), None, None)
    };

    let mut ffn_pre = ffn_source.matmul(&block.w_1);
    if cfg.bias {
        ffn_pre = ffn_pre.add_row_broadcast(&block.b_1);
    }
    let ffn_hidden = ffn_pre.map(gelu);
    let mut ffn_out = ffn_hidden.matmul(&block.w_2);
    if cfg.bias {
        ffn_out = ffn_out.add_row_broadcast(&block.b_2);
    }
    let output = after_attention.add(&ffn_out);
    check_finite(&output, &format!("{locus} ffn residual"))?;

    Ok(BlockCache {
        input: e_v.clone(),
        q_source,
        ln1_hat,
        ln1_inv_sigma,
        q,
        k,
        v,
        probs,
        head_concat,
        after_attention,
        ffn_source,
        ln2_hat,
        ln2_inv_sigma,
        ffn_pre,
        ffn_hidden,
        output,
    })
}

/// One editor block; output only.
pub fn editor_block(
    e_v: &Matrix,
    e_act: &Matrix,
    block: &BlockParams,
    cfg: &EditorConfig,
) -> Result<Matrix, KernelError> {
    Ok(editor_block_cached(e_v, e_act, block, cfg, "block")?.output)
}

/// Stacked editor forward pass with caches retained for backprop. Every
/// block cross-attends to the same `e_act`.
pub fn editor_forward_cached(
    e_v: &Matrix,
    e_act: &Matrix,
    params: &EditorParams,
) -> Result<Vec<BlockCache>, KernelError> {
    params.validate()?;
    let mut caches = Vec::with_capacity(params.blocks.len());
    let mut current = e_v.clone();
    for (i, block) in params.blocks.iter().enumerate() {
        let cache = editor_block_cached(
            &current,
            e_act,
            block,
            &params.config,
            &format!("block {i}"),
        )?;
        current = cache.output.clone();
        caches.push(cache);
    }
    Ok(caches)
}

/// Stacked editor forward pass. Pure; output has the same row count as `e_v`.
pub fn editor_forward(
    e_v: &Matrix,
    e_act: &Matrix,
    params: &EditorParams,
) -> Result<Matrix, KernelError> {
    let caches = editor_forward_cached(e_v, e_act, params)?;
    Ok(caches.last().expect("at least one block").output.clone())
}

/// Mean absolute difference over all entries.
pub fn l1_loss(pred: &Matrix, target: &Matrix) -> Result<f64, KernelError> {
    if !pred.same_shape(target) {
        return Err(KernelError::Shape(format!(
            "l1_loss shape mismatch: {}x{} vs {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let n = (pred.rows() * pred.cols()) as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / n)
}
