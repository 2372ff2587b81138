//! Analytic gradients of `l1_loss(editor_forward(E_v, E_act, params), target)`
//! with respect to every parameter tensor and to `E_act`.
//!
//! The l1 objective uses subgradient 0 at exact ties. `E_v` comes from a
//! frozen encoder, so no gradient is produced for it.

use crate::forward::{editor_forward_cached, gelu_grad, BlockCache};
use crate::matrix::Matrix;
use crate::params::{BlockParams, EditorConfig, EditorParams};
use crate::KernelError;

/// Gradient tensors mirroring [`BlockParams`].
#[derive(Debug, Clone)]
pub struct BlockGradients {
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
    pub ln1_scale: Vec<f64>,
    pub ln1_offset: Vec<f64>,
    pub ln2_scale: Vec<f64>,
    pub ln2_offset: Vec<f64>,
}

impl BlockGradients {
    fn zeros(cfg: &EditorConfig) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        BlockGradients {
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
            ln1_scale: vec![0.0; d],
            ln1_offset: vec![0.0; d],
            ln2_scale: vec![0.0; d],
            ln2_offset: vec![0.0; d],
        }
    }
}

/// Result of one backward pass.
#[derive(Debug, Clone)]
pub struct EditorGradients {
    pub loss: f64,
    pub prediction: Matrix,
    pub blocks: Vec<BlockGradients>,
    pub e_act: Matrix,
}

fn add_vec(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Layer-norm backward. `d_out` is the gradient at the scaled output; returns
/// the gradient at the raw input and accumulates scale/offset gradients.
fn layer_norm_backward(
    d_out: &Matrix,
    x_hat: &Matrix,
    inv_sigma: &[f64],
    scale: &[f64],
    d_scale: &mut [f64],
    d_offset: &mut [f64],
) -> Matrix {
    let d = d_out.cols() as f64;
    let mut dx = Matrix::zeros(d_out.rows(), d_out.cols());
    for r in 0..d_out.rows() {
        let dy = d_out.row(r);
        let xh = x_hat.row(r);
        for (c, (g, h)) in dy.iter().zip(xh).enumerate() {
            d_scale[c] += g * h;
            d_offset[c] += g;
        }
        // d_xhat = dy * scale; dx = inv_sigma * (d_xhat - mean(d_xhat) - xhat * mean(d_xhat*xhat))
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d_out.cols() {
            let dxh = dy[c] * scale[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= d;
        mean_dxh_xh /= d;
        for c in 0..d_out.cols() {
            let dxh = dy[c] * scale[c];
            dx.set(r, c, inv_sigma[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh));
        }
    }
    dx
}

/// Softmax backward, row-wise: dS = P .* (dP - rowdot(dP, P)).
fn softmax_backward(probs: &Matrix, d_probs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for c in 0..probs.cols() {
            out.set(r, c, p[c] * (dp[c] - dot));
        }
    }
    out
}

/// Backward through one block. Returns the gradient at the block input and
/// accumulates into `grads` and `d_e_act`.
fn block_backward(
    d_output: &Matrix,
    cache: &BlockCache,
    block: &BlockParams,
    cfg: &EditorConfig,
    e_act: &Matrix,
    grads: &mut BlockGradients,
    d_e_act: &mut Matrix,
) -> Matrix {
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    // out = after_attention + ffn(ffn_source)
    let mut d_after_attention = d_output.clone();
    let d_ffn_out = d_output;

    grads
        .w_2
        .add_assign(&cache.ffn_hidden.transpose_matmul(d_ffn_out));
    if cfg.bias {
        add_vec(&mut grads.b_2, &d_ffn_out.column_sums());
    }
    let d_hidden = d_ffn_out.matmul_transpose(&block.w_2);
    let d_pre = d_hidden.hadamard(&cache.ffn_pre.map(gelu_grad));
    grads
        .w_1
        .add_assign(&cache.ffn_source.transpose_matmul(&d_pre));
    if cfg.bias {
        add_vec(&mut grads.b_1, &d_pre.column_sums());
    }
    let d_ffn_source = d_pre.matmul_transpose(&block.w_1);

    if cfg.layer_norm {
        let dx = layer_norm_backward(
            &d_ffn_source,
            cache.ln2_hat.as_ref().expect("ln2 cache"),
            cache.ln2_inv_sigma.as_ref().expect("ln2 cache"),
            &block.ln2_scale,
            &mut grads.ln2_scale,
            &mut grads.ln2_offset,
        );
        d_after_attention.add_assign(&dx);
    } else {
        d_after_attention.add_assign(&d_ffn_source);
    }

    // after_attention = input + mha
    let mut d_input = d_after_attention.clone();
    let d_mha = &d_after_attention;

    grads
        .w_o
        .add_assign(&cache.head_concat.transpose_matmul(d_mha));
    if cfg.bias {
        add_vec(&mut grads.b_o, &d_mha.column_sums());
    }
    let d_concat = d_mha.matmul_transpose(&block.w_o);

    let k_rows = cache.input.rows();
    let m_rows = e_act.rows();
    let mut d_q = Matrix::zeros(k_rows, cfg.model_dim);
    let mut d_k = Matrix::zeros(m_rows, cfg.model_dim);
    let mut d_v = Matrix::zeros(m_rows, cfg.model_dim);
    for h in 0..cfg.heads {
        let from = h * head_dim;
        let to = from + head_dim;
        let d_out_h = d_concat.slice_cols(from, to);
        let p = &cache.probs[h];
        let kh = cache.k.slice_cols(from, to);
        let vh = cache.v.slice_cols(from, to);
        let qh = cache.q.slice_cols(from, to);

        let d_p = d_out_h.matmul_transpose(&vh);
        let d_vh = p.transpose_matmul(&d_out_h);
        let d_scores = softmax_backward(p, &d_p);
        let d_qh = d_scores.matmul(&kh).scale(scale);
        let d_kh = d_scores.transpose_matmul(&qh).scale(scale);

        d_q.write_cols(from, &d_qh);
        d_k.write_cols(from, &d_kh);
        d_v.write_cols(from, &d_vh);
    }

    grads.w_q.add_assign(&cache.q_source.transpose_matmul(&d_q));
    if cfg.bias {
        add_vec(&mut grads.b_q, &d_q.column_sums());
    }
    let d_q_source = d_q.matmul_transpose(&block.w_q);

    grads.w_k.add_assign(&e_act.transpose_matmul(&d_k));
    grads.w_v.add_assign(&e_act.transpose_matmul(&d_v));
    if cfg.bias {
        add_vec(&mut grads.b_k, &d_k.column_sums());
        add_vec(&mut grads.b_v, &d_v.column_sums());
    }
    d_e_act.add_assign(&d_k.matmul_transpose(&block.w_k));
    d_e_act.add_assign(&d_v.matmul_transpose(&block.w_v));

    if cfg.layer_norm {
        let dx = layer_norm_backward(
            &d_q_source,
            cache.ln1_hat.as_ref().expect("ln1 cache"),
            cache.ln1_inv_sigma.as_ref().expect("ln1 cache"),
            &block.ln1_scale,
            &mut grads.ln1_scale,
            &mut grads.ln1_offset,
        );
        d_input.add_assign(&dx);
    } else {
        d_input.add_assign(&d_q_source);
    }

    d_input
}

/// Forward plus full backward pass.
pub fn backward(
    e_v: &Matrix,
    e_act: &Matrix,
    params: &EditorParams,
    target: &Matrix,
) -> Result<EditorGradients, KernelError> {
    let caches = editor_forward_cached(e_v, e_act, params)?;
    let prediction = caches.last().expect("blocks").output.clone();
    if !prediction.same_shape(target) {
        return Err(KernelError::Shape(format!(
            "target shape {}x{} does not match prediction {}x{}",
            target.rows(),
            target.cols(),
            prediction.rows(),
            prediction.cols()
        )));
    }

    let n = (prediction.rows() * prediction.cols()) as f64;
    let mut loss = 0.0;
    let mut d_out = Matrix::zeros(prediction.rows(), prediction.cols());
    for (i, (p, t)) in prediction.data().iter().zip(target.data()).enumerate() {
        let diff = p - t;
        loss += diff.abs();
        let g = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        d_out.data_mut()[i] = g / n;
    }
    loss /= n;

    let cfg = &params.config;
    let mut blocks: Vec<BlockGradients> = (0..params.blocks.len())
        .map(|_| BlockGradients::zeros(cfg))
        .collect();
    let mut d_e_act = Matrix::zeros(e_act.rows(), e_act.cols());

    let mut upstream = d_out;
    for i in (0..params.blocks.len()).rev() {
        upstream = block_backward(
            &upstream,
            &caches[i],
            &params.blocks[i],
            cfg,
            e_act,
            &mut blocks[i],
            &mut d_e_act,
        );
    }

    let grads = EditorGradients {
        loss,
        prediction,
        blocks,
        e_act: d_e_act,
    };
    for (i, b) in grads.blocks.iter().enumerate() {
        let finite = b.w_q.is_finite()
            && b.w_k.is_finite()
            && b.w_v.is_finite()
            && b.w_o.is_finite()
            && b.w_1.is_finite()
            && b.w_2.is_finite();
        if !finite {
            return Err(KernelError::NonFinite {
                locus: format!("gradients of block {i}"),
            });
        }
    }
    if !grads.e_act.is_finite() {
        return Err(KernelError::NonFinite {
            locus: "gradient of action embeddings".into(),
        });
    }
    Ok(grads)
}

/// Flat scalar views over parameters and gradients, in checkpoint tensor
/// order. These drive the finite-difference comparison entry by entry.
impl EditorParams {
    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, _, vals| n += vals.len());
        n
    }

    pub fn scalar(&self, index: usize) -> f64 {
        let mut remaining = index;
        let mut found = None;
        self.for_each_tensor(|_, _, vals| {
            if found.is_none() {
                if remaining < vals.len() {
                    found = Some(vals[remaining]);
                } else {
                    remaining -= vals.len();
                }
            }
        });
        found.expect("scalar index in range")
    }

    pub fn set_scalar(&mut self, index: usize, value: f64) {
        let mut remaining = index;
        for b in &mut self.blocks {
            let d = self.config.model_dim;
            let f = self.config.ffn_dim;
            let fields: [(&mut [f64], usize); 16] = [
                (b.w_q.data_mut(), d * d),
                (b.w_k.data_mut(), d * d),
                (b.w_v.data_mut(), d * d),
                (b.w_o.data_mut(), d * d),
                (&mut b.b_q, d),
                (&mut b.b_k, d),
                (&mut b.b_v, d),
                (&mut b.b_o, d),
                (b.w_1.data_mut(), d * f),
                (&mut b.b_1, f),
                (b.w_2.data_mut(), f * d),
                (&mut b.b_2, d),
                (&mut b.ln1_scale, d),
                (&mut b.ln1_offset, d),
                (&mut b.ln2_scale, d),
                (&mut b.ln2_offset, d),
            ];
            for (slice, len) in fields {
                if remaining < len {
                    slice[remaining] = value;
                    return;
                }
                remaining -= len;
            }
        }
        panic!("scalar index out of range");
    }
}

impl EditorGradients {
    /// Gradient scalar at `index`, matching [`EditorParams::scalar`] order.
    pub fn scalar(&self, index: usize, cfg: &EditorConfig) -> f64 {
        let mut remaining = index;
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        for b in &self.blocks {
            let fields: [(&[f64], usize); 16] = [
                (b.w_q.data(), d * d),
                (b.w_k.data(), d * d),
                (b.w_v.data(), d * d),
                (b.w_o.data(), d * d),
                (&b.b_q, d),
                (&b.b_k, d),
                (&b.b_v, d),
                (&b.b_o, d),
                (b.w_1.data(), d * f),
                (&b.b_1, f),
                (b.w_2.data(), f * d),
                (&b.b_2, d),
                (&b.ln1_scale, d),
                (&b.ln1_offset, d),
                (&b.ln2_scale, d),
                (&b.ln2_offset, d),
            ];
            for (slice, len) in fields {
                if remaining < len {
                    return slice[remaining];
                }
                remaining -= len;
            }
        }
        panic!("gradient scalar index out of range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{editor_forward, l1_loss};
    use crate::params::SplitMix64;

    fn random_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn zero_loss_means_zero_gradients() {
        let cfg = EditorConfig::new(6, 2, 2);
        let params = EditorParams::seeded_dense(cfg.clone(), 60).unwrap();
        let mut rng = SplitMix64::new(61);
        let e_v = random_matrix(4, 6, &mut rng);
        let e_act = random_matrix(8, 6, &mut rng);
        let target = editor_forward(&e_v, &e_act, &params).unwrap();
        let grads = backward(&e_v, &e_act, &params, &target).unwrap();
        assert_eq!(grads.loss, 0.0);
        for i in 0..params.scalar_count() {
            assert_eq!(grads.scalar(i, &cfg), 0.0, "param {i}");
        }
        assert!(grads.e_act.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unused_parameters_get_exactly_zero_gradient() {
        // With w_1 zeroed the FFN hidden activations are constant, so w_2's
        // input never varies with w_1... the cleaner unused case: zero w_1
        // and b_1 make the hidden layer gelu(0) for every token, but w_2
        // still transmits gradient. Truly unused: layer_norm disabled means
        // the ln tensors never enter the forward graph.
        let mut cfg = EditorConfig::new(4, 2, 1);
        cfg.layer_norm = false;
        let params = EditorParams::seeded_dense(cfg.clone(), 70).unwrap();
        let mut rng = SplitMix64::new(71);
        let e_v = random_matrix(3, 4, &mut rng);
        let e_act = random_matrix(5, 4, &mut rng);
        let target = random_matrix(3, 4, &mut rng);
        let grads = backward(&e_v, &e_act, &params, &target).unwrap();
        let b = &grads.blocks[0];
        assert!(b.ln1_scale.iter().all(|v| *v == 0.0));
        assert!(b.ln1_offset.iter().all(|v| *v == 0.0));
        assert!(b.ln2_scale.iter().all(|v| *v == 0.0));
        assert!(b.ln2_offset.iter().all(|v| *v == 0.0));
        // And some used tensor is non-zero, so the test is not vacuous.
        assert!(b.w_q.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn bias_gradients_zero_when_biases_disabled() {
        let mut cfg = EditorConfig::new(4, 2, 1);
        cfg.bias = false;
        let params = EditorParams::seeded_dense(cfg.clone(), 80).unwrap();
        let mut rng = SplitMix64::new(81);
        let e_v = random_matrix(2, 4, &mut rng);
        let e_act = random_matrix(4, 4, &mut rng);
        let target = random_matrix(2, 4, &mut rng);
        let grads = backward(&e_v, &e_act, &params, &target).unwrap();
        let b = &grads.blocks[0];
        for bias in [&b.b_q, &b.b_k, &b.b_v, &b.b_o, &b.b_1, &b.b_2] {
            assert!(bias.iter().all(|v| *v == 0.0));
        }
    }

    // Central finite differences over every parameter of a small config.
    // The full 20-configuration sweep lives in the acceptance suite; this is
    // the fast inner-loop version.
    #[test]
    fn finite_differences_agree_on_small_config() {
        let mut cfg = EditorConfig::new(4, 2, 2);
        cfg.ffn_dim = 8;
        let params = EditorParams::seeded_dense(cfg.clone(), 90).unwrap();
        let mut rng = SplitMix64::new(91);
        let e_v = random_matrix(3, 4, &mut rng);
        let e_act = random_matrix(5, 4, &mut rng);
        let target = random_matrix(3, 4, &mut rng);

        let grads = backward(&e_v, &e_act, &params, &target).unwrap();
        let eps = 1e-5;
        let mut checked = 0usize;
        for i in 0..params.scalar_count() {
            let base = params.scalar(i);
            let mut plus = params.clone();
            plus.set_scalar(i, base + eps);
            let mut minus = params.clone();
            minus.set_scalar(i, base - eps);
            let lp = l1_loss(&editor_forward(&e_v, &e_act, &plus).unwrap(), &target).unwrap();
            let lm = l1_loss(&editor_forward(&e_v, &e_act, &minus).unwrap(), &target).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = grads.scalar(i, &cfg);
            let denom = analytic.abs().max(numeric.abs()).max(1e-10);
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel <= 1e-4 || (analytic - numeric).abs() < 1e-9,
                "param {i}: analytic {analytic} vs numeric {numeric} (rel {rel})"
            );
            checked += 1;
        }
        assert!(checked > 100);

        // Same comparison for the action-embedding gradient.
        for r in 0..e_act.rows() {
            for c in 0..e_act.cols() {
                let mut plus = e_act.clone();
                plus.set(r, c, e_act.get(r, c) + eps);
                let mut minus = e_act.clone();
                minus.set(r, c, e_act.get(r, c) - eps);
                let lp = l1_loss(&editor_forward(&e_v, &plus, &params).unwrap(), &target).unwrap();
                let lm = l1_loss(&editor_forward(&e_v, &minus, &params).unwrap(), &target).unwrap();
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = grads.e_act.get(r, c);
                let denom = analytic.abs().max(numeric.abs()).max(1e-10);
                assert!(
                    (analytic - numeric).abs() / denom <= 1e-4 || (analytic - numeric).abs() < 1e-9,
                    "e_act[{r},{c}]: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn scalar_roundtrip_covers_every_slot() {
        let cfg = EditorConfig::new(4, 2, 2);
        let mut params = EditorParams::seeded_dense(cfg.clone(), 100).unwrap();
        let n = params.scalar_count();
        for i in 0..n {
            params.set_scalar(i, i as f64);
        }
        for i in 0..n {
            assert_eq!(params.scalar(i), i as f64);
        }
    }
}
