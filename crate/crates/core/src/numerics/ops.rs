use super::Tensor;
use crate::error::{Error, Result};

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::config(format!("leaky slope {slope} outside (0, 1)")));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("leaky_relu input"));
    }
    Ok(x.map(|v| if v >= 0.0 { v } else { slope * v }))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite("sigmoid input"));
    }
    Ok(x.map(logistic))
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}
