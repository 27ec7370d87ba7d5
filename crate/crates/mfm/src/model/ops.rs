//! Straight-line reference implementations of the core model operations,
//! kept free of the autodiff graph so tests can pin their values directly.

use ndarray::Array2;

use crate::error::{Error, Result};

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Scaled dot-product attention: `softmax(QKᵀ/√d_h + mask)·V`, softmax taken
/// row-wise. `mask`, when given, is added to the score matrix (use large
/// negative entries to forbid positions).
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    mask: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    let d_h = q.ncols();
    if d_h == 0 {
        return Err(Error::Dimension {
            what: "attention head width".into(),
            expected: ">= 1".into(),
            got: "0".into(),
        });
    }
    if k.ncols() != d_h {
        return Err(Error::Dimension {
            what: "attention key width".into(),
            expected: format!("{d_h}"),
            got: format!("{}", k.ncols()),
        });
    }
    if v.nrows() != k.nrows() {
        return Err(Error::Dimension {
            what: "attention value rows".into(),
            expected: format!("{}", k.nrows()),
            got: format!("{}", v.nrows()),
        });
    }
    let mut scores = q.dot(&k.t()) / (d_h as f64).sqrt();
    if let Some(m) = mask {
        if m.dim() != scores.dim() {
            return Err(Error::Dimension {
                what: "attention mask".into(),
                expected: format!("{:?}", scores.dim()),
                got: format!("{:?}", m.dim()),
            });
        }
        scores += m;
    }
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    Ok(scores.dot(v))
}

/// Bottleneck adapter: `f_up(GELU(f_down(S))) + S`.
pub fn adapter_apply(
    down_w: &Array2<f64>,
    down_b: &Array2<f64>,
    up_w: &Array2<f64>,
    up_b: &Array2<f64>,
    s: &Array2<f64>,
) -> Result<Array2<f64>> {
    let d = s.ncols();
    if down_w.nrows() != d {
        return Err(Error::Dimension {
            what: "adapter down-projection input".into(),
            expected: format!("{d}"),
            got: format!("{}", down_w.nrows()),
        });
    }
    if up_w.ncols() != d || up_w.nrows() != down_w.ncols() {
        return Err(Error::Dimension {
            what: "adapter up-projection".into(),
            expected: format!("{}x{d}", down_w.ncols()),
            got: format!("{}x{}", up_w.nrows(), up_w.ncols()),
        });
    }
    let hidden = (s.dot(down_w) + down_b).mapv(gelu);
    Ok(hidden.dot(up_w) + up_b + s)
}

/// Two-linear-layer mapping from one image feature vector to `k` token
/// embeddings of width `d` (GELU between the layers, output reshaped k×d).
pub fn map_image_feature(
    w1: &Array2<f64>,
    b1: &Array2<f64>,
    w2: &Array2<f64>,
    b2: &Array2<f64>,
    x: &[f64],
    k: usize,
    d: usize,
) -> Result<Array2<f64>> {
    if w1.nrows() != x.len() {
        return Err(Error::Dimension {
            what: "image feature width".into(),
            expected: format!("{}", w1.nrows()),
            got: format!("{}", x.len()),
        });
    }
    if w2.ncols() != k * d {
        return Err(Error::Dimension {
            what: "mapping network output width".into(),
            expected: format!("{}", k * d),
            got: format!("{}", w2.ncols()),
        });
    }
    let xr = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    let hidden = (xr.dot(w1) + b1).mapv(gelu);
    let flat = hidden.dot(w2) + b2;
    let out: Vec<f64> = flat.iter().cloned().collect();
    Ok(Array2::from_shape_vec((k, d), out).expect("k*d elements"))
}
