//! Non-negative sparse coding and dictionary learning over OD pixels.
//!
//! Objective, for pixels `V` (n × 3), dictionary `W` (k × 3, unit-norm
//! non-negative rows) and codes `H` (n × k, non-negative):
//!
//! ```text
//! ½‖V − H·W‖² + λ‖H‖₁
//! ```
//!
//! Codes are solved by projected ISTA with step `1/L`, `L = λmax(W·Wᵀ)`.
//! Atoms are updated by projected gradient steps followed by row
//! renormalization.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

const CHUNK: usize = 4096;

/// Largest eigenvalue of the symmetric `k × k` Gram matrix `W·Wᵀ`.
pub fn lipschitz(w: ArrayView2<f64>) -> f64 {
    let g = w.dot(&w.t());
    match g.nrows() {
        1 => g[[0, 0]],
        2 => {
            let (a, b, d) = (g[[0, 0]], g[[0, 1]], g[[1, 1]]);
            let half_tr = 0.5 * (a + d);
            let disc = (0.25 * (a - d).powi(2) + b * b).sqrt();
            half_tr + disc
        }
        _ => power_iteration(&g),
    }
}

fn power_iteration(g: &Array2<f64>) -> f64 {
    let mut v = ndarray::Array1::from_elem(g.nrows(), 1.0 / (g.nrows() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let next = g.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&next);
        v = next / norm;
    }
    lambda
}

/// Per-pixel objective `½‖v − Wᵀh‖² + λ·Σh`.
pub fn pixel_objective(v: ArrayView1<f64>, w: ArrayView2<f64>, h: &[f64], lambda: f64) -> f64 {
    let mut r = v.to_owned();
    for (k, &hk) in h.iter().enumerate() {
        r.scaled_add(-hk, &w.row(k));
    }
    0.5 * r.dot(&r) + lambda * h.iter().sum::<f64>()
}

/// Total objective `½‖V − H·W‖² + λ‖H‖₁`.
pub fn objective(v: ArrayView2<f64>, w: ArrayView2<f64>, h: ArrayView2<f64>, lambda: f64) -> f64 {
    let r = &v - &h.dot(&w);
    0.5 * r.iter().map(|x| x * x).sum::<f64>() + lambda * h.sum()
}

/// Precomputed quantities shared by every pixel's ISTA run.
struct Coder {
    gram: Array2<f64>,
    step: f64,
    shrink: f64,
}

impl Coder {
    fn new(w: ArrayView2<f64>, lambda: f64) -> Coder {
        let l = lipschitz(w).max(f64::MIN_POSITIVE);
        Coder {
            gram: w.dot(&w.t()),
            step: 1.0 / l,
            shrink: lambda / l,
        }
    }

    /// One projected ISTA step; returns the largest coordinate change.
    fn step(&self, h: &mut [f64], b: &[f64]) -> f64 {
        let k = h.len();
        let mut next = [0.0f64; 8];
        for i in 0..k {
            let mut grad = -b[i];
            for j in 0..k {
                grad += self.gram[[i, j]] * h[j];
            }
            next[i] = (h[i] - self.step * grad - self.shrink).max(0.0);
        }
        let mut delta = 0.0f64;
        for i in 0..k {
            delta = delta.max((next[i] - h[i]).abs());
            h[i] = next[i];
        }
        delta
    }
}

/// ISTA on one pixel, recording the objective after every iteration
/// (entry 0 is the objective at the starting point).
pub fn ista_trace(
    v: ArrayView1<f64>,
    w: ArrayView2<f64>,
    lambda: f64,
    iters: usize,
    start: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let coder = Coder::new(w, lambda);
    let b: Vec<f64> = (0..w.nrows()).map(|k| w.row(k).dot(&v)).collect();
    let mut h = start.to_vec();
    let mut trace = vec![pixel_objective(v, w, &h, lambda)];
    for _ in 0..iters {
        coder.step(&mut h, &b);
        trace.push(pixel_objective(v, w, &h, lambda));
    }
    (h, trace)
}

/// Sparse non-negative codes for every row of `v`, warm-started from `init`
/// when given. Pixels are independent, so the result does not depend on how
/// rows are split across threads.
pub fn encode(
    v: ArrayView2<f64>,
    w: ArrayView2<f64>,
    lambda: f64,
    iters: usize,
    tol: f64,
    init: Option<ArrayView2<f64>>,
) -> Array2<f64> {
    let k = w.nrows();
    assert!(k <= 8, "at most 8 atoms supported");
    let coder = Coder::new(w, lambda);
    let mut h = match init {
        Some(h0) => h0.to_owned(),
        None => Array2::zeros((v.nrows(), k)),
    };
    let chunks: Vec<_> = h
        .axis_chunks_iter_mut(Axis(0), CHUNK)
        .zip(v.axis_chunks_iter(Axis(0), CHUNK))
        .collect();
    chunks.into_par_iter().for_each(|(mut hc, vc)| {
        let mut b = vec![0.0; k];
        let mut hk = vec![0.0; k];
        for (mut hrow, vrow) in hc.rows_mut().into_iter().zip(vc.rows()) {
            for (a, bk) in b.iter_mut().enumerate() {
                *bk = w.row(a).dot(&vrow);
            }
            hk.copy_from_slice(hrow.as_slice().expect("standard layout"));
            for _ in 0..iters {
                if coder.step(&mut hk, &b) <= tol {
                    break;
                }
            }
            hrow.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&hk);
        }
    });
    h
}

fn normalize_rows(w: &mut Array2<f64>, fallback: &Array2<f64>) {
    for (mut row, prev) in w.rows_mut().into_iter().zip(fallback.rows()) {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        } else {
            row.assign(&prev);
        }
    }
}

/// Deterministic farthest-point initialization: the first atom is the pixel
/// direction farthest (in angle) from the mean direction, each next atom the
/// direction farthest from all atoms chosen so far.
pub fn farthest_point_init(v: ArrayView2<f64>, k: usize) -> Array2<f64> {
    let dirs: Vec<[f64; 3]> = v
        .rows()
        .into_iter()
        .map(|r| {
            let n = r.dot(&r).sqrt();
            [r[0] / n, r[1] / n, r[2] / n]
        })
        .collect();
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut mean = [0.0; 3];
    for d in &dirs {
        for c in 0..3 {
            mean[c] += d[c];
        }
    }
    let mn = dot(&mean, &mean).sqrt();
    for m in &mut mean {
        *m /= mn;
    }
    let argmin = |score: &dyn Fn(&[f64; 3]) -> f64| {
        let mut best = 0;
        let mut best_s = f64::INFINITY;
        for (i, d) in dirs.iter().enumerate() {
            let s = score(d);
            if s < best_s {
                best_s = s;
                best = i;
            }
        }
        best
    };
    let mut chosen: Vec<[f64; 3]> = vec![dirs[argmin(&|d| dot(d, &mean))]];
    while chosen.len() < k {
        let c = chosen.clone();
        let i = argmin(&|d| {
            c.iter()
                .map(|a| dot(d, a))
                .fold(f64::NEG_INFINITY, f64::max)
        });
        chosen.push(dirs[i]);
    }
    Array2::from_shape_fn((k, 3), |(a, c)| chosen[a][c])
}

/// Settings for [`learn_dictionary`].
#[derive(Debug, Clone, Copy)]
pub struct DictionarySettings {
    pub atoms: usize,
    pub lambda: f64,
    pub dict_iters: usize,
    pub code_iters: usize,
    pub tol: f64,
}

/// Alternate code and atom updates starting from [`farthest_point_init`].
/// Returns `(W, H)`.
pub fn learn_dictionary(v: ArrayView2<f64>, s: &DictionarySettings) -> (Array2<f64>, Array2<f64>) {
    let mut w = farthest_point_init(v, s.atoms);
    let mut h = encode(v, w.view(), s.lambda, s.code_iters, s.tol, None);
    for _ in 0..s.dict_iters {
        let prev = w.clone();
        let hth = h.t().dot(&h);
        let l = lipschitz_sym(&hth);
        if l <= 0.0 {
            break;
        }
        for _ in 0..5 {
            let grad = hth.dot(&w) - h.t().dot(&v);
            w.scaled_add(-1.0 / l, &grad);
            w.mapv_inplace(|x| x.max(0.0));
            normalize_rows(&mut w, &prev);
        }
        h = encode(v, w.view(), s.lambda, s.code_iters, s.tol, Some(h.view()));
        let change = (&w - &prev).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if change < s.tol {
            break;
        }
    }
    (w, h)
}

fn lipschitz_sym(g: &Array2<f64>) -> f64 {
    if g.nrows() == 2 {
        let (a, b, d) = (g[[0, 0]], g[[0, 1]], g[[1, 1]]);
        0.5 * (a + d) + (0.25 * (a - d).powi(2) + b * b).sqrt()
    } else {
        power_iteration(g)
    }
}
