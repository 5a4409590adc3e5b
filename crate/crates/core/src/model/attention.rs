//! Scaled dot-product attention and its multi-head wrapper.

use ndarray::{s, Array2, ArrayView2, Axis};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

/// `softmax(Q·Kᵀ / √d_k)`.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    softmax_rows(&(q.dot(&k.t()) * scale))
}

/// `softmax(Q·Kᵀ / √d_k)·V`.
pub fn attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Array2<f64> {
    attention_weights(q, k).dot(&v)
}

/// Gradients of one attention head given `dOut`; returns `(dQ, dK, dV)`.
pub fn attention_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    a: &Array2<f64>,
    d_out: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let dv = a.t().dot(&d_out);
    let da = d_out.dot(&v.t());
    let mut ds = &da * a;
    let dots = ds.sum_axis(Axis(1));
    for ((mut row, arow), d) in ds.rows_mut().into_iter().zip(a.rows()).zip(dots.iter()) {
        row.scaled_add(-d, &arow);
    }
    ds *= scale;
    (ds.dot(&k), ds.t().dot(&q), dv)
}

/// Intermediate values of [`multi_head`], kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MultiHeadCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// One `N × N` weight matrix per head.
    pub weights: Vec<Array2<f64>>,
    /// Concatenated head outputs, `N × (heads·d_k)`.
    pub concat: Array2<f64>,
}

/// `[head₁, …, head_c]·W₀` with `headᵢ = attention(X·W_Qᵢ, X·W_Kᵢ, X·W_Vᵢ)`.
///
/// The per-head projections are stored side by side: head `i` uses columns
/// `i·d_k .. (i+1)·d_k` of `wq`, `wk` and `wv`.
pub fn multi_head(
    x: ArrayView2<f64>,
    wq: ArrayView2<f64>,
    wk: ArrayView2<f64>,
    wv: ArrayView2<f64>,
    wo: ArrayView2<f64>,
    heads: usize,
) -> (Array2<f64>, MultiHeadCache) {
    let q = x.dot(&wq);
    let k = x.dot(&wk);
    let v = x.dot(&wv);
    let dk = q.ncols() / heads;
    let mut concat = Array2::zeros((x.nrows(), heads * dk));
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let a = attention_weights(q.slice(cols), k.slice(cols));
        concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        weights.push(a);
    }
    let out = concat.dot(&wo);
    (
        out,
        MultiHeadCache {
            q,
            k,
            v,
            weights,
            concat,
        },
    )
}

/// Gradients of [`multi_head`]: `(dX, dWq, dWk, dWv, dWo)`.
pub fn multi_head_backward(
    x: ArrayView2<f64>,
    wq: ArrayView2<f64>,
    wk: ArrayView2<f64>,
    wv: ArrayView2<f64>,
    wo: ArrayView2<f64>,
    cache: &MultiHeadCache,
    d_out: ArrayView2<f64>,
) -> [Array2<f64>; 5] {
    let heads = cache.weights.len();
    let dk = cache.q.ncols() / heads;
    let dwo = cache.concat.t().dot(&d_out);
    let dconcat = d_out.dot(&wo.t());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dkm = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, a) in cache.weights.iter().enumerate() {
        let cols = s![.., h * dk..(h + 1) * dk];
        let (gq, gk, gv) = attention_backward(
            cache.q.slice(cols),
            cache.k.slice(cols),
            cache.v.slice(cols),
            a,
            dconcat.slice(cols),
        );
        dq.slice_mut(cols).assign(&gq);
        dkm.slice_mut(cols).assign(&gk);
        dv.slice_mut(cols).assign(&gv);
    }
    let dx = dq.dot(&wq.t()) + dkm.dot(&wk.t()) + dv.dot(&wv.t());
    [dx, x.t().dot(&dq), x.t().dot(&dkm), x.t().dot(&dv), dwo]
}
