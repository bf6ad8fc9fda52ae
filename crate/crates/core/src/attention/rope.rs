//! Rotary position embedding over adjacent channel pairs `(2j, 2j+1)`.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Rotates each row of `x` (shape `n × d_h`) by its position.
///
/// Pair `j` of the row at position `p` turns by `p · base^(-2j/d_h)`.
pub fn rope_apply<T: Real>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    rotate(x, positions, base, false)
}

/// Inverse rotation; the adjoint of [`rope_apply`].
pub fn rope_inverse<T: Real>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    rotate(x, positions, base, true)
}

fn rotate<T: Real>(x: &Tensor<T>, positions: &[usize], base: f64, inverse: bool) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: "rope expects a matrix".into(),
        });
    }
    let (n, d) = (x.rows(), x.cols());
    if d % 2 != 0 {
        return Err(Error::Config(format!("rope needs an even head dimension, got {d}")));
    }
    if positions.len() != n {
        return Err(Error::Dimension {
            op: "rope",
            left: x.shape().to_vec(),
            right: vec![positions.len()],
        });
    }
    let freqs: Vec<f64> = (0..d / 2)
        .map(|j| base.powf(-(2.0 * j as f64) / d as f64))
        .collect();
    let mut out = x.data().to_vec();
    for (i, &pos) in positions.iter().enumerate() {
        let row = &mut out[i * d..(i + 1) * d];
        for (j, &f) in freqs.iter().enumerate() {
            let angle = pos as f64 * f;
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::lit(if inverse { -s } else { s }), T::lit(c));
            let (a, b) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = a * c - b * s;
            row[2 * j + 1] = a * s + b * c;
        }
    }
    Tensor::new(vec![n, d], out)
}
