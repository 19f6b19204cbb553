//! Dense tensors with a reverse-mode tape.
//!
//! Every operation is evaluated eagerly and recorded on a [`Tape`]; the
//! reverse sweep walks the tape backwards and scatters parameter adjoints
//! into one flat vector that shares the canonical parameter order of the
//! model. Computations are generic over [`Scalar`] so the same graph can be
//! evaluated in `f64` for finite-difference checks.

mod tape;
mod tensor;

pub use tape::{Adjoints, Tape, Var};
pub use tensor::{layer_norm_rows, softmax, Scalar, Tensor, LAYER_NORM_EPS};

use serde::{Deserialize, Serialize};

/// Flat derivative vector aligned with the canonical parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient(pub Vec<f32>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Gradient(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Largest relative deviation between two gradient estimates, with the
/// denominator floored at `1e-8`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Richardson-extrapolated central differences, `(4 D(h/2) - D(h)) / 3`.
/// Truncation error is `O(h^4)`, so a step large enough to keep roundoff
/// negligible still resolves small gradients accurately.
pub fn richardson_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let coarse = central_differences(x, h, &mut f);
    let fine = central_differences(x, 0.5 * h, &mut f);
    coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect()
}
