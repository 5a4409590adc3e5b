//! Building blocks shared by the trunks. Feature maps are stored
//! position-major: an `(h·w) × channels` matrix with row index `y·w + x`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

/// `3 × H × W` tensor to a position-major map.
pub fn to_positions(x: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    Array2::from_shape_fn((h * w, c), |(p, k)| x[[k, p / w, p % w]])
}

/// Mean pooling by an integer factor on each side of a `C × H × W` tensor.
pub fn downsample(x: ArrayView3<f64>, factor: usize) -> Array3<f64> {
    if factor == 1 {
        return x.to_owned();
    }
    let (c, h, w) = x.dim();
    let norm = 1.0 / (factor * factor) as f64;
    Array3::from_shape_fn((c, h / factor, w / factor), |(k, y, xx)| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += x[[k, y * factor + dy, xx * factor + dx]];
            }
        }
        s * norm
    })
}

/// 3×3, zero-padded patches: row `p` holds `x[c, y+dy, x+dx]` at column
/// `c·9 + (dy+1)·3 + (dx+1)`, matching a `out × in × 3 × 3` weight tensor.
pub fn im2col(x: ArrayView2<f64>, side: usize) -> Array2<f64> {
    let c = x.ncols();
    let mut cols = Array2::zeros((side * side, c * 9));
    for y in 0..side {
        for xx in 0..side {
            let p = y * side + xx;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= side as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= side as isize {
                        continue;
                    }
                    let q = sy as usize * side + sx as usize;
                    for k in 0..c {
                        cols[[p, k * 9 + ky * 3 + kx]] = x[[q, k]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter column gradients back onto the input map.
pub fn col2im(dcols: ArrayView2<f64>, side: usize, channels: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((side * side, channels));
    for y in 0..side {
        for xx in 0..side {
            let p = y * side + xx;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= side as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= side as isize {
                        continue;
                    }
                    let q = sy as usize * side + sx as usize;
                    for k in 0..channels {
                        dx[[q, k]] += dcols[[p, k * 9 + ky * 3 + kx]];
                    }
                }
            }
        }
    }
    dx
}

/// 2×2 mean pooling of a position-major map with even `side`.
pub fn pool2(x: ArrayView2<f64>, side: usize) -> Array2<f64> {
    let half = side / 2;
    let mut out = Array2::zeros((half * half, x.ncols()));
    for y in 0..half {
        for xx in 0..half {
            let mut row = out.row_mut(y * half + xx);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                row += &x.row((2 * y + dy) * side + 2 * xx + dx);
            }
            row *= 0.25;
        }
    }
    out
}

pub fn pool2_backward(d_out: ArrayView2<f64>, side: usize) -> Array2<f64> {
    let half = side / 2;
    let mut dx = Array2::zeros((side * side, d_out.ncols()));
    for p in 0..side * side {
        let (y, xx) = (p / side, p % side);
        let src = d_out.row((y / 2) * half + xx / 2);
        dx.row_mut(p).scaled_add(0.25, &src);
    }
    dx
}

pub fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| v.max(0.0));
}

/// `dZ = dA ⊙ [Z > 0]` evaluated against the post-activation values.
pub fn relu_backward(d: &mut Array2<f64>, activated: &Array2<f64>) {
    d.zip_mut_with(activated, |g, &a| {
        if a <= 0.0 {
            *g = 0.0
        }
    });
}

/// Bit signature of which units are active, used to detect kinks.
pub fn active_mask(a: &Array2<f64>) -> Vec<bool> {
    a.iter().map(|&v| v > 0.0).collect()
}
