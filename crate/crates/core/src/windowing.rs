//! Spatial bookkeeping for window-based attention: partition a token map
//! into M x M windows, invert the partition, cyclically shift the map, and
//! build the additive mask that blocks cross-region pairs after a shift.
//!
//! All functions are pure; the tensor ops they build on are data-movement
//! gathers, so `window_reverse(window_partition(x)) == x` holds exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Finite stand-in for minus infinity: large enough that softmax drives a
/// masked weight below 1e-12, small enough to keep gradients finite.
pub const NEG_LARGE: f64 = -1e9;

/// Token-grid geometry for one windowed-attention layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowGrid {
    pub fn new(height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        if height % window != 0 {
            return Err(Error::Divisibility { what: "grid height", value: height, divisor: window });
        }
        if width % window != 0 {
            return Err(Error::Divisibility { what: "grid width", value: width, divisor: window });
        }
        if shift >= window {
            return Err(Error::Config(format!(
                "shift {shift} must be < window {window}"
            )));
        }
        Ok(WindowGrid { height, width, window, shift })
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }
}

/// Additive attention mask, one `M^2 x M^2` matrix per window, with entries
/// in `{0, NEG_LARGE}`. Symmetric within each window; diagonals are zero.
#[derive(Clone, Debug)]
pub struct AttnMask {
    values: Vec<f64>,
    num_windows: usize,
    tokens: usize,
}

impl AttnMask {
    pub fn num_windows(&self) -> usize {
        self.num_windows
    }

    /// Tokens per window (M^2).
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Raw values in `[window][i][j]` order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, window: usize, i: usize, j: usize) -> f64 {
        self.values[(window * self.tokens + i) * self.tokens + j]
    }

    /// Materialize as a `[total_windows, heads, tokens, tokens]` constant
    /// tensor, repeating the per-window masks cyclically over any leading
    /// batch factor. `total_windows` must be a multiple of `num_windows`.
    pub fn tiled_tensor(&self, total_windows: usize, heads: usize) -> Result<Tensor> {
        if total_windows % self.num_windows != 0 {
            return Err(Error::ShapeMismatch {
                op: "mask tile",
                lhs: vec![total_windows],
                rhs: vec![self.num_windows],
            });
        }
        let t2 = self.tokens * self.tokens;
        let mut data = Vec::with_capacity(total_windows * heads * t2);
        for w in 0..total_windows {
            let src = &self.values[(w % self.num_windows) * t2..(w % self.num_windows + 1) * t2];
            for _ in 0..heads {
                data.extend_from_slice(src);
            }
        }
        Tensor::from_vec(data, &[total_windows, heads, self.tokens, self.tokens])
    }
}

fn spatial_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// Split a `[h, w, C]` or `[batch, h, w, C]` map into non-overlapping
/// `M x M` windows: output `[(batch*)num_windows, M^2, C]`. Windows are
/// ordered row-major over the window grid (batch-major first) and tokens
/// row-major within each window.
pub fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, h, w, c) = spatial_dims(x, "window_partition")?;
    if h % window != 0 {
        return Err(Error::Divisibility { what: "map height", value: h, divisor: window });
    }
    if w % window != 0 {
        return Err(Error::Divisibility { what: "map width", value: w, divisor: window });
    }
    let (nwh, nww) = (h / window, w / window);
    let mut index = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for wy in 0..nwh {
            for wx in 0..nww {
                for ty in 0..window {
                    for tx in 0..window {
                        let (y, xx) = (wy * window + ty, wx * window + tx);
                        let base = ((bi * h + y) * w + xx) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
    }
    Ok(x.gather(index, vec![b * nwh * nww, window * window, c]))
}

/// Inverse of [`window_partition`]: reassemble windows into the spatial map.
/// Returns `[h, w, C]` when the windows came from a single map and
/// `[batch, h, w, C]` otherwise.
pub fn window_reverse(windows: &Tensor, window: usize, h: usize, w: usize) -> Result<Tensor> {
    let shape = windows.shape().to_vec();
    let mismatch = || Error::ShapeMismatch {
        op: "window_reverse",
        lhs: shape.clone(),
        rhs: vec![h, w],
    };
    let [nw_total, tokens, c] = shape[..] else {
        return Err(mismatch());
    };
    if tokens != window * window || h % window != 0 || w % window != 0 {
        return Err(mismatch());
    }
    let (nwh, nww) = (h / window, w / window);
    if nw_total % (nwh * nww) != 0 {
        return Err(mismatch());
    }
    let b = nw_total / (nwh * nww);
    let mut index = Vec::with_capacity(windows.numel());
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let win = (bi * nwh + y / window) * nww + xx / window;
                let tok = (y % window) * window + (xx % window);
                let base = (win * tokens + tok) * c;
                index.extend(base..base + c);
            }
        }
    }
    let out_shape = if b == 1 {
        vec![h, w, c]
    } else {
        vec![b, h, w, c]
    };
    Ok(windows.gather(index, out_shape))
}

/// Cyclic translation of the spatial dims: `out[i][j] = x[(i+dy) mod h][(j+dx) mod w]`.
/// Negative offsets shift the other way; `cyclic_shift(, dy, dx)` then
/// `(, -dy, -dx)` is the identity.
pub fn cyclic_shift(x: &Tensor, dy: i64, dx: i64) -> Result<Tensor> {
    let (b, h, w, c) = spatial_dims(x, "cyclic_shift")?;
    let rank3 = x.shape().len() == 3;
    let mut index = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for y in 0..h {
            let sy = (y as i64 + dy).rem_euclid(h as i64) as usize;
            for xx in 0..w {
                let sx = (xx as i64 + dx).rem_euclid(w as i64) as usize;
                let base = ((bi * h + sy) * w + sx) * c;
                index.extend(base..base + c);
            }
        }
    }
    let out_shape = if rank3 {
        vec![h, w, c]
    } else {
        vec![b, h, w, c]
    };
    Ok(x.gather(index, out_shape))
}

/// Region-id map used by the shift mask: the spatial axes are cut into the
/// three slices `[0, n-M)`, `[n-M, n-s)`, `[n-s, n)` and a token's id is its
/// (row-slice, column-slice) cell. Tokens that end up in the same window
/// after the cyclic shift may only attend to each other when they share an
/// id.
fn region_ids(grid: &WindowGrid) -> Vec<usize> {
    let (h, w, m, s) = (grid.height, grid.width, grid.window, grid.shift);
    let slice_of = |pos: usize, n: usize| -> usize {
        if pos < n - m {
            0
        } else if pos < n - s {
            1
        } else {
            2
        }
    };
    let mut ids = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            ids[y * w + x] = 3 * slice_of(y, h) + slice_of(x, w);
        }
    }
    ids
}

/// Build the additive mask for shifted-window attention on `grid`. A zero
/// shift needs no blocking and yields an all-zero mask.
pub fn build_shift_mask(grid: &WindowGrid) -> AttnMask {
    let m = grid.window;
    let tokens = m * m;
    let nw = grid.num_windows();
    if grid.shift == 0 {
        return AttnMask {
            values: vec![0.0; nw * tokens * tokens],
            num_windows: nw,
            tokens,
        };
    }
    let ids = region_ids(grid);
    let (w, nww) = (grid.width, grid.width / m);
    // per-window token ids, windows row-major, tokens row-major
    let mut win_ids = vec![0usize; nw * tokens];
    for (flat, slot) in win_ids.iter_mut().enumerate() {
        let (win, tok) = (flat / tokens, flat % tokens);
        let (wy, wx) = (win / nww, win % nww);
        let (ty, tx) = (tok / m, tok % m);
        *slot = ids[(wy * m + ty) * w + (wx * m + tx)];
    }
    let mut values = vec![0.0; nw * tokens * tokens];
    for win in 0..nw {
        let ids = &win_ids[win * tokens..(win + 1) * tokens];
        for i in 0..tokens {
            for j in 0..tokens {
                if ids[i] != ids[j] {
                    values[(win * tokens + i) * tokens + j] = NEG_LARGE;
                }
            }
        }
    }
    AttnMask {
        values,
        num_windows: nw,
        tokens,
    }
}
