//! Built-in verification suites behind the `check` CLI command: gradient
//! checks for every differentiable op and a full block, windowing
//! roundtrips, the masked-attention brute-force oracle, complexity parity,
//! and the AUROC pairwise oracle. The oracles here are plain-loop
//! re-derivations, independent of the tensor-op path they validate.

use crate::attention::{scaled_attention, window_attention_weights, window_mha, MhaParams};
use crate::complexity::{measure_attention_macs, omega_msa, omega_wmsa, AttentionMode, ComplexityQuery};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::eval::auroc;
use crate::model::swin_block_pair;
use crate::rng::SplitMix64;
use crate::tensor::{concat_last, grad_check, Tensor};
use crate::windowing::{build_shift_mask, cyclic_shift, window_partition, window_reverse, WindowGrid};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn from_result(name: &'static str, result: Result<String>) -> Self {
        match result {
            Ok(detail) => CheckOutcome { name, passed: true, detail },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: e.to_string(),
            },
        }
    }
}

/// Run every suite; all must pass for a healthy build.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        CheckOutcome::from_result("op-gradients", check_op_gradients(100)),
        CheckOutcome::from_result("block-gradients", check_block_gradients()),
        CheckOutcome::from_result("windowing-roundtrip", check_windowing_roundtrip(50)),
        CheckOutcome::from_result("masked-attention-oracle", check_masked_attention_oracle()),
        CheckOutcome::from_result("attention-contract", check_attention_contract()),
        CheckOutcome::from_result("complexity-parity", check_complexity_parity()),
        CheckOutcome::from_result("auroc-oracle", check_auroc_oracle(500)),
    ]
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(crate::error::Error::CheckFailed(msg()))
    }
}

fn rand_vec(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + rng.next_f64() * (hi - lo)).collect()
}

/// Finite-difference check for each differentiable op at `points` random
/// inputs; the worst relative error must stay below 1e-5.
pub fn check_op_gradients(points: usize) -> Result<String> {
    let tol = 1e-5;
    let eps = 1e-5;
    let mut rng = SplitMix64::new(0x5EED);
    let mut worst: (f64, &str) = (0.0, "none");

    for _ in 0..points {
        let other = Tensor::from_vec(rand_vec(&mut rng, 12, -1.0, 1.0), &[3, 4])?;
        let mat = Tensor::from_vec(rand_vec(&mut rng, 8, -1.0, 1.0), &[4, 2])?;
        let gamma = Tensor::from_vec(rand_vec(&mut rng, 4, 0.5, 1.5), &[4])?;
        let beta = Tensor::from_vec(rand_vec(&mut rng, 4, -0.5, 0.5), &[4])?;

        let cases: Vec<(&'static str, Box<dyn Fn(&Tensor) -> Result<Tensor>>, Tensor)> = vec![
            (
                "add",
                {
                    let o = other.clone();
                    Box::new(move |x| Ok(x.add(&o)?.mul(x)?.sum_all()))
                },
                Tensor::from_vec(rand_vec(&mut rng, 12, -1.0, 1.0), &[3, 4])?,
            ),
            (
                "sub-mul",
                {
                    let o = other.clone();
                    Box::new(move |x| Ok(x.sub(&o)?.mul(x)?.mean_all()))
                },
                Tensor::from_vec(rand_vec(&mut rng, 12, -1.0, 1.0), &[3, 4])?,
            ),
            (
                "matmul",
                {
                    let m = mat.clone();
                    Box::new(move |x| Ok(x.matmul(&m)?.gelu().sum_all()))
                },
                Tensor::from_vec(rand_vec(&mut rng, 12, -1.0, 1.0), &[3, 4])?,
            ),
            (
                "softmax",
                Box::new(|x| {
                    let s = x.softmax(1)?;
                    Ok(s.mul(&s)?.sum_all())
                }),
                Tensor::from_vec(rand_vec(&mut rng, 12, -2.0, 2.0), &[3, 4])?,
            ),
            (
                "layer_norm",
                {
                    let (g, b) = (gamma.clone(), beta.clone());
                    Box::new(move |x| Ok(x.layer_norm(&g, &b, 1e-5)?.sigmoid().sum_all()))
                },
                Tensor::from_vec(rand_vec(&mut rng, 12, -1.0, 1.0), &[3, 4])?,
            ),
            (
                "relu",
                Box::new(|x| Ok(x.relu().mul(x)?.sum_all())),
                // keep sample points away from the kink
                Tensor::from_vec(
                    rand_vec(&mut rng, 12, 0.01, 1.0)
                        .into_iter()
                        .enumerate()
                        .map(|(i, v)| if i % 2 == 0 { v } else { -v })
                        .collect(),
                    &[12],
                )?,
            ),
            (
                "gelu-sigmoid",
                Box::new(|x| Ok(x.gelu().sigmoid().sum_all())),
                Tensor::from_vec(rand_vec(&mut rng, 12, -2.0, 2.0), &[12])?,
            ),
            (
                "ln",
                Box::new(|x| Ok(x.ln().sum_all())),
                Tensor::from_vec(rand_vec(&mut rng, 12, 0.1, 2.0), &[12])?,
            ),
            (
                "clamp",
                Box::new(|x| Ok(x.clamp(0.2, 0.8).mul(x)?.sum_all())),
                // interior and exterior points, none near the boundaries
                Tensor::from_vec(
                    (0..12)
                        .map(|i| if i % 2 == 0 { 0.4 + 0.1 * rng.next_f64() } else { 0.9 + rng.next_f64() })
                        .collect(),
                    &[12],
                )?,
            ),
            (
                "avg_pool2d",
                Box::new(|x| Ok(x.avg_pool2d(2)?.mul_scalar(3.0).sum_all())),
                Tensor::from_vec(rand_vec(&mut rng, 32, -1.0, 1.0), &[1, 4, 4, 2])?,
            ),
            (
                "permute-reshape",
                Box::new(|x| {
                    let y = x.permute(&[1, 0])?.reshape(&[2, 6])?;
                    Ok(y.mul(&y)?.sum_all())
                }),
                Tensor::from_vec(rand_vec(&mut rng, 12, -1.0, 1.0), &[3, 4])?,
            ),
            (
                "cyclic-shift-window",
                Box::new(|x| {
                    let shifted = cyclic_shift(x, 1, 1)?;
                    let wins = window_partition(&shifted, 2)?;
                    Ok(wins.mul(&wins)?.sum_all())
                }),
                Tensor::from_vec(rand_vec(&mut rng, 32, -1.0, 1.0), &[4, 4, 2])?,
            ),
            (
                "concat",
                Box::new(|x| {
                    let a = x.reshape(&[6, 2])?;
                    let c = concat_last(&[a.clone(), a.relu()])?;
                    Ok(c.mul(&c)?.sum_all())
                }),
                Tensor::from_vec(rand_vec(&mut rng, 12, 0.05, 1.0), &[12])?,
            ),
        ];

        for (name, f, x) in cases {
            let err = grad_check(|t| f(t), &x, eps)?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    ensure(worst.0 < tol, || {
        format!("worst op gradient error {} ({})", worst.0, worst.1)
    })?;
    Ok(format!(
        "worst relative error {:.2e} ({}) over {points} random points",
        worst.0, worst.1
    ))
}

/// End-to-end gradient of a block pair on a small token map.
pub fn check_block_gradients() -> Result<String> {
    let cfg = ModelConfig::desk();
    let mut rng = SplitMix64::new(0xB10C);
    let b1 = crate::model::BlockParams::init(4, 2, 8, false, &mut rng)?;
    let b2 = crate::model::BlockParams::init(4, 2, 8, false, &mut rng)?;
    let z = Tensor::from_vec(rand_vec(&mut rng, 4 * 4 * 4, -1.0, 1.0), &[4, 4, 4])?;
    let err = grad_check(
        |x| Ok(swin_block_pair(x, &b1, &b2, 2, &cfg)?.mul(x)?.sum_all()),
        &z,
        1e-5,
    )?;
    ensure(err < 1e-4, || format!("block gradient error {err}"))?;
    Ok(format!("block-pair gradient error {err:.2e}"))
}

pub fn check_windowing_roundtrip(cases: usize) -> Result<String> {
    let mut rng = SplitMix64::new(0x909);
    for i in 0..cases {
        let m = 1 + (rng.next_below(4) as usize);
        let h = m * (1 + rng.next_below(4) as usize);
        let w = m * (1 + rng.next_below(4) as usize);
        let c = 1 + (rng.next_below(5) as usize);
        let x = Tensor::from_vec(rand_vec(&mut rng, h * w * c, -2.0, 2.0), &[h, w, c])?;
        let back = window_reverse(&window_partition(&x, m)?, m, h, w)?;
        ensure(back.data() == x.data(), || {
            format!("roundtrip {i} failed for h={h} w={w} M={m}")
        })?;
    }
    Ok(format!("{cases} random partition/reverse roundtrips exact"))
}

/// Plain-loop masked attention: per shifted window, each token attends only
/// to tokens with its region id.
fn naive_masked_sw_msa(
    x: &Tensor,
    params: &MhaParams,
    grid: &WindowGrid,
) -> Vec<f64> {
    let (h, w, m, s) = (grid.height, grid.width, grid.window, grid.shift);
    let c = params.channels();
    let heads = params.num_heads;
    let d = c / heads;

    // shifted map
    let mut xs = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = ((i + s) % h, (j + s) % w);
            xs[(i * w + j) * c..(i * w + j) * c + c]
                .copy_from_slice(&x.data()[(si * w + sj) * c..(si * w + sj) * c + c]);
        }
    }
    // region ids on the shifted frame
    let slice_of = |pos: usize, n: usize| {
        if pos < n - m {
            0
        } else if pos < n - s {
            1
        } else {
            2
        }
    };
    let id_at = |i: usize, j: usize| 3 * slice_of(i, h) + slice_of(j, w);

    let proj = |w_mat: &Tensor, row: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; c];
        for j in 0..c {
            for k in 0..c {
                out[j] += row[k] * w_mat.data()[k * c + j];
            }
        }
        out
    };

    let mut out_shifted = vec![0.0; h * w * c];
    for wy in 0..h / m {
        for wx in 0..w / m {
            // gather window token coordinates
            let coords: Vec<(usize, usize)> = (0..m * m)
                .map(|t| (wy * m + t / m, wx * m + t % m))
                .collect();
            let qkv: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = coords
                .iter()
                .map(|&(i, j)| {
                    let row = &xs[(i * w + j) * c..(i * w + j) * c + c];
                    (
                        proj(&params.wq, row),
                        proj(&params.wk, row),
                        proj(&params.wv, row),
                    )
                })
                .collect();
            for (ti, &(i, j)) in coords.iter().enumerate() {
                let mut merged = vec![0.0; c];
                for head in 0..heads {
                    let mut scores = Vec::new();
                    for (tj, &(i2, j2)) in coords.iter().enumerate() {
                        if id_at(i2, j2) != id_at(i, j) {
                            continue;
                        }
                        let mut dot = 0.0;
                        for k in 0..d {
                            dot += qkv[ti].0[head * d + k] * qkv[tj].1[head * d + k];
                        }
                        scores.push((tj, dot / (d as f64).sqrt()));
                    }
                    let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
                    for &(tj, score) in &scores {
                        let weight = (score - max).exp() / z;
                        for k in 0..d {
                            merged[head * d + k] += weight * qkv[tj].2[head * d + k];
                        }
                    }
                }
                let projected = proj(&params.wo, &merged);
                out_shifted[(i * w + j) * c..(i * w + j) * c + c].copy_from_slice(&projected);
            }
        }
    }
    // the token at shifted (i, j) is original token ((i+s)%h, (j+s)%w);
    // its output goes back to that original position
    let mut out = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = ((i + s) % h, (j + s) % w);
            out[(si * w + sj) * c..(si * w + sj) * c + c]
                .copy_from_slice(&out_shifted[(i * w + j) * c..(i * w + j) * c + c]);
        }
    }
    out
}

pub fn check_masked_attention_oracle() -> Result<String> {
    let mut rng = SplitMix64::new(0xFACE);
    let mut worst: f64 = 0.0;
    for (h, w, m) in [(4, 4, 2), (6, 6, 3), (8, 8, 4), (8, 4, 4)] {
        let s = m / 2;
        let grid = WindowGrid::new(h, w, m, s)?;
        let c = 4;
        let params = MhaParams::init(c, 2, false, &mut rng)?;
        let x = Tensor::from_vec(rand_vec(&mut rng, h * w * c, -1.0, 1.0), &[h, w, c])?;

        // tensor-op path: shift, partition, masked attention, reverse, unshift
        let mask = build_shift_mask(&grid);
        let shifted = cyclic_shift(&x, s as i64, s as i64)?;
        let windows = window_partition(&shifted, m)?;
        let attended = window_mha(&windows, &params, Some(&mask))?;
        let merged = window_reverse(&attended, m, h, w)?;
        let path = cyclic_shift(&merged, -(s as i64), -(s as i64))?;

        let oracle = naive_masked_sw_msa(&x, &params, &grid);
        for (a, b) in path.data().iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-10, || {
        format!("masked attention deviates from oracle by {worst}")
    })?;
    Ok(format!("max deviation from same-region oracle {worst:.2e}"))
}

pub fn check_attention_contract() -> Result<String> {
    let mut rng = SplitMix64::new(0xE901);
    // single key: output equals the value row exactly
    let q = Tensor::from_vec(rand_vec(&mut rng, 3, -1.0, 1.0), &[1, 3])?;
    let k = Tensor::from_vec(rand_vec(&mut rng, 3, -1.0, 1.0), &[1, 3])?;
    let v = Tensor::from_vec(rand_vec(&mut rng, 3, -1.0, 1.0), &[1, 3])?;
    let out = scaled_attention(&q, &k, &v, None)?;
    ensure(out.data() == v.data(), || "single-key case not exact".into())?;

    // weight rows sum to one within 1e-12, masked or not
    let grid = WindowGrid::new(4, 4, 2, 1)?;
    let mask = build_shift_mask(&grid);
    let tokens = Tensor::from_vec(rand_vec(&mut rng, 4 * 4 * 8, -2.0, 2.0), &[4, 4, 8])?;
    let params = MhaParams::init(8, 2, false, &mut rng)?;
    let mut worst: f64 = 0.0;
    for m in [None, Some(&mask)] {
        let weights = window_attention_weights(&tokens, &params, m)?;
        for row in weights.data().chunks(4) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst < 1e-12, || format!("weight row sum off by {worst}"))?;
    Ok(format!("single-key exact; worst row-sum deviation {worst:.2e}"))
}

pub fn check_complexity_parity() -> Result<String> {
    let spot = ComplexityQuery::new(7, 7, 1, 7)?;
    ensure(omega_msa(&spot) == 4998, || "omega_msa(7,7,1) != 4998".into())?;
    let large = ComplexityQuery::new(56, 56, 192, 7)?;
    ensure(omega_wmsa(&large)? == 521_428_992, || {
        "omega_wmsa(56,56,192,7) != 521428992".into()
    })?;

    let mut checked = 0;
    for h in [4usize, 8, 12] {
        for c in [2usize, 4, 8] {
            // m = 4 makes the h = 4 row the single-window coincidence case
            let q = ComplexityQuery::new(h, h, c, 4)?;
            let mg = measure_attention_macs(&q, AttentionMode::Global)?;
            let mw = measure_attention_macs(&q, AttentionMode::Windowed)?;
            ensure(mg == omega_msa(&q), || {
                format!("global mismatch at h={h} C={c}: {mg} vs {}", omega_msa(&q))
            })?;
            ensure(mw == omega_wmsa(&q).unwrap(), || {
                format!("windowed mismatch at h={h} C={c}")
            })?;
            if h == 4 {
                ensure(mg == mw, || "single-window modes should coincide".into())?;
            }
            checked += 1;
        }
    }
    Ok(format!(
        "formulas verified; measured counts match exactly on {checked} configs"
    ))
}

pub fn check_auroc_oracle(cases: usize) -> Result<String> {
    let mut rng = SplitMix64::new(0xA0C);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = 4 + rng.next_below(60) as usize;
        let scores: Vec<f64> = (0..n).map(|_| (rng.next_f64() * 6.0).floor() / 6.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() & 1) as u8).collect();
        labels[0] = 1;
        labels[1] = 0;
        let fast = auroc(&scores, &labels)?;
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            if labels[i] != 1 {
                continue;
            }
            for j in 0..n {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        worst = worst.max((fast - wins / pairs).abs());
    }
    ensure(worst < 1e-9, || format!("auroc deviates from pairwise oracle by {worst}"))?;
    Ok(format!("max deviation from pairwise oracle {worst:.2e} over {cases} instances"))
}
