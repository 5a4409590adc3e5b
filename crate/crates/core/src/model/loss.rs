//! Per-head losses and the combined objective `L_main + λ·L_aux`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::config::{HeadLoss, LossConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_main: f64,
    pub l_aux: f64,
    /// `λ·L_aux`.
    pub aux_term: f64,
    pub total: f64,
}

fn check_finite(p: ArrayView2<f64>) -> Result<()> {
    for (i, row) in p.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { batch_index: i });
        }
    }
    Ok(())
}

fn check_shapes(p: ArrayView2<f64>, t: ArrayView2<f64>, what: &str) -> Result<()> {
    if p.dim() != t.dim() {
        return Err(Error::Config(format!(
            "{what} predictions are {:?} but targets are {:?}",
            p.dim(),
            t.dim()
        )));
    }
    Ok(())
}

fn softmax_row(x: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax_row(x: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

/// Loss of one head. MSE averages over every element; soft cross-entropy
/// compares `softmax(pred)` against `softmax(target)` per sample and averages
/// over samples. An empty head contributes 0.
pub fn head_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, kind: HeadLoss) -> f64 {
    let (b, k) = pred.dim();
    if b == 0 || k == 0 {
        return 0.0;
    }
    match kind {
        HeadLoss::Mse => {
            let s: f64 = pred
                .iter()
                .zip(target.iter())
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            s / (b * k) as f64
        }
        HeadLoss::SoftCrossEntropy => {
            let mut s = 0.0;
            for (p, t) in pred.rows().into_iter().zip(target.rows()) {
                let q = softmax_row(t);
                let lp = log_softmax_row(p);
                s -= q.iter().zip(&lp).map(|(a, b)| a * b).sum::<f64>();
            }
            s / b as f64
        }
    }
}

/// `∂ head_loss / ∂ pred`.
pub fn head_loss_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    kind: HeadLoss,
) -> Array2<f64> {
    let (b, k) = pred.dim();
    let mut g = Array2::zeros((b, k));
    if b == 0 || k == 0 {
        return g;
    }
    match kind {
        HeadLoss::Mse => {
            let c = 2.0 / (b * k) as f64;
            ndarray::Zip::from(&mut g)
                .and(pred)
                .and(target)
                .for_each(|g, &p, &t| *g = c * (p - t));
        }
        HeadLoss::SoftCrossEntropy => {
            for ((mut gr, p), t) in g.rows_mut().into_iter().zip(pred.rows()).zip(target.rows()) {
                let sp = softmax_row(p);
                let q = softmax_row(t);
                for j in 0..k {
                    gr[j] = (sp[j] - q[j]) / b as f64;
                }
            }
        }
    }
    g
}

/// `total = L_main + λ·L_aux`.
pub fn loss(
    main_pred: ArrayView2<f64>,
    aux_pred: ArrayView2<f64>,
    main_target: ArrayView2<f64>,
    aux_target: ArrayView2<f64>,
    lc: &LossConfig,
) -> Result<LossParts> {
    check_shapes(main_pred, main_target, "main")?;
    check_shapes(aux_pred, aux_target, "aux")?;
    check_finite(main_pred)?;
    check_finite(aux_pred)?;
    let l_main = head_loss(main_pred, main_target, lc.head_loss);
    let l_aux = head_loss(aux_pred, aux_target, lc.head_loss);
    let aux_term = lc.lambda * l_aux;
    Ok(LossParts {
        l_main,
        l_aux,
        aux_term,
        total: l_main + aux_term,
    })
}
