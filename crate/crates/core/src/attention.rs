//! Scaled dot-product attention and the multi-head window attention used by
//! the transformer blocks, with optional additive masking for shifted
//! windows.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::windowing::AttnMask;

/// Projection weights for multi-head attention over channel dim `C`.
/// Separate value/output dims are not supported: every head works in
/// `C / num_heads`.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// Biases for the q/k/v/o projections; disabled by default.
    pub bias: Option<[Tensor; 4]>,
    pub num_heads: usize,
}

impl MhaParams {
    pub fn new(
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        wo: Tensor,
        bias: Option<[Tensor; 4]>,
        num_heads: usize,
    ) -> Result<Self> {
        let c = wq.shape().first().copied().unwrap_or(0);
        for (name, w) in [("wq", &wq), ("wk", &wk), ("wv", &wv), ("wo", &wo)] {
            if w.shape() != [c, c] {
                return Err(Error::Config(format!(
                    "{name} must be [{c}, {c}], got {:?}",
                    w.shape()
                )));
            }
        }
        if num_heads == 0 || c % num_heads != 0 {
            return Err(Error::Divisibility {
                what: "channels over heads",
                value: c,
                divisor: num_heads.max(1),
            });
        }
        Ok(MhaParams { wq, wk, wv, wo, bias, num_heads })
    }

    /// Fresh parameters with truncated-normal weights, optionally biased.
    pub fn init(channels: usize, num_heads: usize, with_bias: bool, rng: &mut SplitMix64) -> Result<Self> {
        let mut w = || Tensor::trunc_normal(&[channels, channels], 0.02, rng);
        let (wq, wk, wv, wo) = (w(), w(), w(), w());
        let bias = with_bias.then(|| {
            [0; 4].map(|_| Tensor::parameter(vec![0.0; channels], &[channels]).unwrap())
        });
        MhaParams::new(wq, wk, wv, wo, bias, num_heads)
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.num_heads
    }
}

/// `Softmax(Q K^T / sqrt(d_k) + mask) V` for a single window:
/// `Q, K: [n, d_k]`, `V: [n, d_v]`, optional additive `mask: [n, n]`.
pub fn scaled_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let weights = attention_weights(q, k, mask)?;
    weights.matmul(v)
}

/// The softmax weight matrix of [`scaled_attention`]; rows sum to one.
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let d_k = *q.shape().last().unwrap();
    if k.shape().last() != Some(&d_k) {
        return Err(Error::ShapeMismatch {
            op: "scaled_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let mut scores = q
        .matmul(&k.transpose_last2()?)?
        .mul_scalar(1.0 / (d_k as f64).sqrt());
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    scores.softmax(scores.shape().len() - 1)
}

/// Multi-head attention applied independently inside each window.
///
/// `tokens` is `[num_windows, M^2, C]`; when the caller batches several maps,
/// `num_windows` is the batch-times-grid product and the mask repeats
/// cyclically. Per window and head: project, attend, concatenate heads,
/// apply the output projection.
pub fn window_mha(tokens: &Tensor, params: &MhaParams, mask: Option<&AttnMask>) -> Result<Tensor> {
    let (out, _) = window_mha_inner(tokens, params, mask)?;
    Ok(out)
}

/// The per-head softmax weights `[num_windows, heads, M^2, M^2]` produced by
/// [`window_mha`] on the same inputs.
pub fn window_attention_weights(
    tokens: &Tensor,
    params: &MhaParams,
    mask: Option<&AttnMask>,
) -> Result<Tensor> {
    let (_, weights) = window_mha_inner(tokens, params, mask)?;
    Ok(weights)
}

fn window_mha_inner(
    tokens: &Tensor,
    params: &MhaParams,
    mask: Option<&AttnMask>,
) -> Result<(Tensor, Tensor)> {
    let [nw, t, c] = tokens.shape()[..] else {
        return Err(Error::ShapeMismatch {
            op: "window_mha",
            lhs: tokens.shape().to_vec(),
            rhs: vec![],
        });
    };
    if c != params.channels() {
        return Err(Error::ShapeMismatch {
            op: "window_mha",
            lhs: tokens.shape().to_vec(),
            rhs: params.wq.shape().to_vec(),
        });
    }
    let heads = params.num_heads;
    let d = params.head_dim();

    let project = |w: &Tensor, b: Option<&Tensor>| -> Result<Tensor> {
        let p = tokens.matmul(w)?;
        let p = match b {
            Some(bias) => p.add(bias)?,
            None => p,
        };
        // [nw, t, C] -> [nw, heads, t, d]
        p.reshape(&[nw, t, heads, d])?.permute(&[0, 2, 1, 3])
    };
    let bias = |i: usize| params.bias.as_ref().map(|b| &b[i]);
    let q = project(&params.wq, bias(0))?;
    let k = project(&params.wk, bias(1))?;
    let v = project(&params.wv, bias(2))?;

    let mut scores = q
        .matmul(&k.transpose_last2()?)?
        .mul_scalar(1.0 / (d as f64).sqrt());
    if let Some(m) = mask {
        scores = scores.add(&m.tiled_tensor(nw, heads)?)?;
    }
    let weights = scores.softmax(3)?;
    let ctx = weights.matmul(&v)?; // [nw, heads, t, d]
    let merged = ctx.permute(&[0, 2, 1, 3])?.reshape(&[nw, t, c])?;
    let mut out = merged.matmul(&params.wo)?;
    if let Some(b) = bias(3) {
        out = out.add(b)?;
    }
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::windowing::{build_shift_mask, WindowGrid};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect(), shape).unwrap()
    }

    #[test]
    fn single_key_returns_value_exactly() {
        let q = Tensor::from_vec(vec![0.7, -1.1], &[1, 2]).unwrap();
        let k = Tensor::from_vec(vec![2.0, 0.3], &[1, 2]).unwrap();
        let v = Tensor::from_vec(vec![5.0, -3.0, 9.0], &[1, 3]).unwrap();
        let out = scaled_attention(&q, &k, &v, None).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn identical_keys_give_column_mean_of_values() {
        let q = rand_tensor(&[3, 2], 1);
        let k = Tensor::from_vec(vec![0.4, -0.9].repeat(3), &[3, 2]).unwrap();
        let v = rand_tensor(&[3, 2], 2);
        let out = scaled_attention(&q, &k, &v, None).unwrap();
        for row in 0..3 {
            for col in 0..2 {
                let mean = (v.data()[col] + v.data()[2 + col] + v.data()[4 + col]) / 3.0;
                assert!((out.data()[row * 2 + col] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_key_direct_evaluation() {
        // scores per query are [0, ln 2] at d_k = 1, so the weights are
        // [1/3, 2/3] and each output is 1/3 * 1 + 2/3 * 3 = 7/3.
        let q = Tensor::from_vec(vec![1.0, 1.0], &[2, 1]).unwrap();
        let k = Tensor::from_vec(vec![0.0, 2f64.ln()], &[2, 1]).unwrap();
        let v = Tensor::from_vec(vec![1.0, 3.0], &[2, 1]).unwrap();
        let out = scaled_attention(&q, &k, &v, None).unwrap();
        for &o in out.data() {
            assert!((o - 7.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_rows_sum_to_one_masked_or_not() {
        let tokens = rand_tensor(&[4, 4, 8], 3);
        let mut rng = SplitMix64::new(4);
        let params = MhaParams::init(8, 2, false, &mut rng).unwrap();
        let grid = WindowGrid::new(4, 4, 2, 1).unwrap();
        let mask = build_shift_mask(&grid);
        for m in [None, Some(&mask)] {
            let w = window_attention_weights(&tokens, &params, m).unwrap();
            for row in w.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_weights_underflow_to_zero() {
        let tokens = rand_tensor(&[4, 4, 8], 5);
        let mut rng = SplitMix64::new(6);
        let params = MhaParams::init(8, 2, false, &mut rng).unwrap();
        let grid = WindowGrid::new(4, 4, 2, 1).unwrap();
        let mask = build_shift_mask(&grid);
        let w = window_attention_weights(&tokens, &params, Some(&mask)).unwrap();
        let t = 4;
        for win in 0..4 {
            for h in 0..2 {
                for i in 0..t {
                    for j in 0..t {
                        if mask.at(win, i, j) != 0.0 {
                            let idx = ((win * 2 + h) * t + i) * t + j;
                            assert!(w.data()[idx] < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_head_single_window_equals_scaled_attention() {
        let tokens = rand_tensor(&[1, 4, 6], 7);
        let mut rng = SplitMix64::new(8);
        let params = MhaParams::init(6, 1, false, &mut rng).unwrap();
        let out = window_mha(&tokens, &params, None).unwrap();

        let flat = tokens.reshape(&[4, 6]).unwrap();
        let q = flat.matmul(&params.wq).unwrap();
        let k = flat.matmul(&params.wk).unwrap();
        let v = flat.matmul(&params.wv).unwrap();
        let expect = scaled_attention(&q, &k, &v, None)
            .unwrap()
            .matmul(&params.wo)
            .unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_output_projection_gives_zeros() {
        let tokens = rand_tensor(&[2, 4, 8], 9);
        let mut rng = SplitMix64::new(10);
        let mut params = MhaParams::init(8, 2, false, &mut rng).unwrap();
        params.wo = Tensor::parameter(vec![0.0; 64], &[8, 8]).unwrap();
        let out = window_mha(&tokens, &params, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    /// Plain-loop two-head attention, independent of the tensor ops.
    fn naive_mha(x: &[f64], t: usize, c: usize, p: &MhaParams) -> Vec<f64> {
        let heads = p.num_heads;
        let d = c / heads;
        let proj = |w: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; t * c];
            for i in 0..t {
                for j in 0..c {
                    for kk in 0..c {
                        out[i * c + j] += x[i * c + kk] * w.data()[kk * c + j];
                    }
                }
            }
            out
        };
        let (q, k, v) = (proj(&p.wq), proj(&p.wk), proj(&p.wv));
        let mut merged = vec![0.0; t * c];
        for h in 0..heads {
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for j in 0..t {
                    let mut s = 0.0;
                    for dd in 0..d {
                        s += q[i * c + h * d + dd] * k[j * c + h * d + dd];
                    }
                    scores[j] = s / (d as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for dd in 0..d {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += exps[j] / z * v[j * c + h * d + dd];
                    }
                    merged[i * c + h * d + dd] = acc;
                }
            }
        }
        let mut out = vec![0.0; t * c];
        for i in 0..t {
            for j in 0..c {
                for kk in 0..c {
                    out[i * c + j] += merged[i * c + kk] * p.wo.data()[kk * c + j];
                }
            }
        }
        out
    }

    #[test]
    fn two_heads_match_naive_per_head_loop() {
        let tokens = rand_tensor(&[1, 4, 4], 11);
        let mut rng = SplitMix64::new(12);
        let params = MhaParams::init(4, 2, false, &mut rng).unwrap();
        let out = window_mha(&tokens, &params, None).unwrap();
        let expect = naive_mha(tokens.data(), 4, 4, &params);
        for (a, b) in out.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let tokens = rand_tensor(&[1, 4, 6], 13);
        let mut rng = SplitMix64::new(14);
        let params = MhaParams::init(6, 2, false, &mut rng).unwrap();
        let out = window_mha(&tokens, &params, None).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut permuted = vec![0.0; tokens.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 6..(dst + 1) * 6].copy_from_slice(&tokens.data()[src * 6..(src + 1) * 6]);
        }
        let out_p = window_mha(
            &Tensor::from_vec(permuted, &[1, 4, 6]).unwrap(),
            &params,
            None,
        )
        .unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for ch in 0..6 {
                let a = out.data()[src * 6 + ch];
                let b = out_p.data()[dst * 6 + ch];
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_pass_finite_difference_check() {
        let tokens = rand_tensor(&[2, 4, 4], 15);
        let mut rng = SplitMix64::new(16);
        let params = MhaParams::init(4, 2, false, &mut rng).unwrap();
        let grid = WindowGrid::new(4, 2, 2, 1).unwrap();
        let mask = build_shift_mask(&grid);

        for pick in 0..4 {
            let p = params.clone();
            let err = grad_check(
                |w| {
                    let mut p2 = p.clone();
                    match pick {
                        0 => p2.wq = w.clone(),
                        1 => p2.wk = w.clone(),
                        2 => p2.wv = w.clone(),
                        _ => p2.wo = w.clone(),
                    }
                    Ok(window_mha(&tokens, &p2, Some(&mask))?.mul(&tokens)?.sum_all())
                },
                [&params.wq, &params.wk, &params.wv, &params.wo][pick],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "param {pick}: err = {err}");
        }
    }
}
