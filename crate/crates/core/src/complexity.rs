//! Multiply-accumulate cost of global versus window-based multi-head
//! self-attention, both as closed-form counts and as instrumented
//! measurements of the actual attention kernel.
//!
//! Counting convention: one MAC per scalar product term in the four C x C
//! projections and the two attention matrix products. Softmax, the
//! 1/sqrt(d) scaling, masking, and residuals are excluded, so the measured
//! kernel matches the formulas exactly rather than approximately.

use crate::attention::{window_mha, MhaParams};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{no_grad, with_mac_counter, Tensor};

/// Token-grid geometry for one cost query.
#[derive(Clone, Copy, Debug)]
pub struct ComplexityQuery {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Window side; ignored by the global formula.
    pub m: usize,
}

impl ComplexityQuery {
    pub fn new(h: usize, w: usize, c: usize, m: usize) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || m == 0 {
            return Err(Error::Config(format!(
                "complexity query must be positive: h={h} w={w} C={c} M={m}"
            )));
        }
        Ok(ComplexityQuery { h, w, c, m })
    }

    fn check_divisible(&self) -> Result<()> {
        if self.h % self.m != 0 {
            return Err(Error::Divisibility { what: "grid height", value: self.h, divisor: self.m });
        }
        if self.w % self.m != 0 {
            return Err(Error::Divisibility { what: "grid width", value: self.w, divisor: self.m });
        }
        Ok(())
    }
}

/// MACs of one global multi-head self-attention layer on an `h x w` grid
/// with `C` channels: `4hwC^2 + 2(hw)^2 C`.
pub fn omega_msa(q: &ComplexityQuery) -> u128 {
    let (hw, c) = (q.h as u128 * q.w as u128, q.c as u128);
    4 * hw * c * c + 2 * hw * hw * c
}

/// MACs of the window-based variant with `M x M` windows:
/// `4hwC^2 + 2 M^2 hw C` - linear in the token count for fixed `M`.
pub fn omega_wmsa(q: &ComplexityQuery) -> Result<u128> {
    q.check_divisible()?;
    let (hw, c, m) = (q.h as u128 * q.w as u128, q.c as u128, q.m as u128);
    Ok(4 * hw * c * c + 2 * m * m * hw * c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// One window spanning the whole grid.
    Global,
    /// Non-overlapping `M x M` windows.
    Windowed,
}

/// Run the attention module on random data with MAC counters attached to
/// the projection and attention matmuls; returns the exact count.
pub fn measure_attention_macs(q: &ComplexityQuery, mode: AttentionMode) -> Result<u128> {
    let (tokens_per_window, num_windows) = match mode {
        AttentionMode::Global => (q.h * q.w, 1),
        AttentionMode::Windowed => {
            q.check_divisible()?;
            (q.m * q.m, (q.h / q.m) * (q.w / q.m))
        }
    };
    let mut rng = SplitMix64::new(0xC0DE);
    let params = MhaParams::init(q.c, 1, false, &mut rng)?;
    let data: Vec<f64> = (0..num_windows * tokens_per_window * q.c)
        .map(|_| rng.next_f64())
        .collect();
    let tokens = Tensor::from_vec(data, &[num_windows, tokens_per_window, q.c])?;
    let (result, macs) = with_mac_counter(|| no_grad(|| window_mha(&tokens, &params, None)));
    result?;
    Ok(macs)
}

/// CSV table over the given queries:
/// `h,w,C,M,omega_msa,omega_wmsa,measured_global,measured_windowed`.
pub fn complexity_csv(queries: &[ComplexityQuery]) -> Result<String> {
    let mut out = String::from("h,w,C,M,omega_msa,omega_wmsa,measured_global,measured_windowed\n");
    for q in queries {
        let row = format!(
            "{},{},{},{},{},{},{},{}\n",
            q.h,
            q.w,
            q.c,
            q.m,
            omega_msa(q),
            omega_wmsa(q)?,
            measure_attention_macs(q, AttentionMode::Global)?,
            measure_attention_macs(q, AttentionMode::Windowed)?,
        );
        out.push_str(&row);
    }
    Ok(out)
}
