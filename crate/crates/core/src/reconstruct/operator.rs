use nalgebra::DMatrix;

use super::dictionary::Generator;
use super::frame::RecoveredFrames;
use crate::error::{Error, Result};
use crate::forward::{EllipticOperatorSpec, Stencil};
use crate::linalg::{pseudo_inverse, singular_values};

/// Operator coefficients in the recovered frames.
#[derive(Debug, Clone)]
pub struct RecoveredOperator {
    pub stencil: Stencil<f64>,
    pub spec: EllipticOperatorSpec<f64>,
    /// Largest relative residual of the per-node fits.
    pub residual: f64,
    /// Smallest relative singular value of a jet matrix.
    pub jet_conditioning: f64,
}

/// Least-squares `blocks · jet = target` at one node. `jet` stacks the
/// transported left neighbour, the node, and the right neighbour positions.
/// Returns the blocks, the relative residual, and the jet conditioning.
pub fn fit_node(
    jet: &DMatrix<f64>,
    target: &DMatrix<f64>,
    node: usize,
    jet_tol: f64,
    fit_tol: f64,
) -> Result<(DMatrix<f64>, f64, f64)> {
    let s = singular_values(jet);
    let rel = s[s.len() - 1] / s[0];
    if !(rel > jet_tol) {
        return Err(Error::JetRankDeficient {
            node,
            rel_sigma: rel,
        });
    }
    let blocks = target * pseudo_inverse(jet, 1e-14);
    let res = (target - &blocks * jet).norm() / target.norm();
    if !(res <= fit_tol) {
        return Err(Error::FitResidualAboveTolerance {
            node,
            residual: res,
            tolerance: fit_tol,
        });
    }
    Ok((blocks, res, rel))
}

/// Fits `[L D R]` at every node from the graph of the wave: positions of
/// the node and its transported neighbours against `A u = −∂²_t u`, over a
/// basis of the energy space.
pub fn operator_recover(
    frames: &RecoveredFrames,
    gen: &Generator,
    spacing: f64,
    jet_tol: f64,
    fit_tol: f64,
) -> Result<RecoveredOperator> {
    let atlas = &frames.atlas;
    let n = atlas.node_count();
    let d = frames.rank;
    let dinv = gen.inverse()?;
    let r = dinv.nrows();
    let position: Vec<DMatrix<f64>> = (0..n).map(|x| frames.reference_coords(x) * &dinv).collect();
    let mut stencil = Stencil {
        left: Vec::with_capacity(n),
        diag: Vec::with_capacity(n),
        right: Vec::with_capacity(n),
    };
    let mut residual = 0.0f64;
    let mut jet = f64::INFINITY;
    for i in 0..n {
        let im = (i + n - 1) % n;
        let ip = (i + 1) % n;
        let mut x = DMatrix::zeros(3 * d, r);
        x.view_mut((0, 0), (d, r))
            .copy_from(&(atlas.transport(i, im) * &position[im]));
        x.view_mut((d, 0), (d, r)).copy_from(&position[i]);
        x.view_mut((2 * d, 0), (d, r))
            .copy_from(&(atlas.transport(i, ip) * &position[ip]));
        let target = -(frames.reference_coords(i) * &gen.d);
        let (blocks, res, rel) = fit_node(&x, &target, i, jet_tol, fit_tol)?;
        jet = jet.min(rel);
        residual = residual.max(res);
        stencil.left.push(blocks.columns(0, d).into_owned());
        stencil.diag.push(blocks.columns(d, d).into_owned());
        stencil.right.push(blocks.columns(2 * d, d).into_owned());
    }
    let spec = EllipticOperatorSpec::from_stencil(&stencil, spacing);
    Ok(RecoveredOperator {
        stencil,
        spec,
        residual,
        jet_conditioning: jet,
    })
}
