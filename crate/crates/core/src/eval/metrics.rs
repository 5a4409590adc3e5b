use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Argument(format!(
            "length mismatch: {} vs {}",
            y.len(),
            yhat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Argument(
            "metrics need at least one observation".into(),
        ));
    }
    Ok(())
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let ss: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / y.len() as f64).sqrt())
}

/// Pearson correlation, or `None` when either side is constant.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Argument(
            "correlation needs at least two observations".into(),
        ));
    }
    // An exactly constant input can still produce tiny non-zero deviations
    // from its floating-point mean, so test constancy directly.
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(a) || constant(b) {
        return Ok(None);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)))
}

/// Median of the values; `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Strong,
    Medium,
    Weak,
    Negligible,
    Negative,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Strong => "strong",
            Category::Medium => "medium",
            Category::Weak => "weak",
            Category::Negligible => "negligible",
            Category::Negative => "negative",
        }
    }
}

/// Lower bounds are closed: 0.5 is strong, 0.3 medium, 0.1 weak, 0 negligible.
pub fn categorize(p: f64) -> Category {
    if p >= 0.5 {
        Category::Strong
    } else if p >= 0.3 {
        Category::Medium
    } else if p >= 0.1 {
        Category::Weak
    } else if p >= 0.0 {
        Category::Negligible
    } else {
        Category::Negative
    }
}
