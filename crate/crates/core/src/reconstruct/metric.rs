use nalgebra::{DMatrix, DVector};

use super::dictionary::Generator;
use super::frame::RecoveredFrames;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen;

/// Fiber metric in the recovered reference frames.
#[derive(Debug, Clone)]
pub struct RecoveredMetric {
    pub values: Vec<DMatrix<f64>>,
    /// Dimension of the zero-position subspace used by the constrained minimization.
    pub kernel_dim: usize,
    /// Largest dropped over smallest kept singular value of the position map.
    pub kernel_gap: f64,
}

/// Symmetric matrix from a quadratic form via `(q(e_m + e_n) − q(e_m − e_n)) / 4`.
pub fn polarize(d: usize, q: impl Fn(&DVector<f64>) -> f64) -> DMatrix<f64> {
    let e = |k: usize| DVector::from_fn(d, |i, _| if i == k { 1.0 } else { 0.0 });
    DMatrix::from_fn(d, d, |m, n| {
        if m == n {
            q(&e(m))
        } else {
            (q(&(e(m) + e(n))) - q(&(e(m) - e(n)))) / 4.0
        }
    })
}

/// `ĥ(x)[η, η]` is the least energy of a state with vanishing position
/// everywhere and velocity `η` at `x`, divided by the node weight.
pub fn metric_recover(
    frames: &RecoveredFrames,
    gen: &Generator,
    weights: &[f64],
) -> Result<RecoveredMetric> {
    let n = weights.len();
    let d = frames.rank;
    let dinv = gen.inverse()?;
    let r = dinv.nrows();
    let mut pos = DMatrix::zeros(n * d, r);
    for x in 0..n {
        pos.view_mut((x * d, 0), (d, r))
            .copy_from(&(frames.reference_coords(x) * &dinv));
    }
    let kept = n * d;
    if r < kept + d {
        return Err(Error::KernelTooSmall(format!(
            "energy space of dimension {r} leaves no room beyond {kept} position constraints"
        )));
    }
    let (vals, vecs) = sym_eigen(&(pos.transpose() * &pos));
    let free = r - kept;
    // ascending: the first `free` directions are the zero-position states
    let gap = (vals[free - 1].max(0.0) / vals[free]).sqrt();
    let kernel = vecs.columns(0, free).into_owned();
    let mut values = Vec::with_capacity(n);
    for (x, &w) in weights.iter().enumerate() {
        let k = frames.reference_coords(x) * &kernel;
        let gram = &k * k.transpose();
        let inv = gram
            .try_inverse()
            .ok_or(Error::ConstrainedSolveSingular { node: x })?;
        let h = polarize(d, |eta| (eta.transpose() * &inv * eta)[0] / w);
        values.push(h);
    }
    Ok(RecoveredMetric {
        values,
        kernel_dim: kernel.ncols(),
        kernel_gap: gap,
    })
}
