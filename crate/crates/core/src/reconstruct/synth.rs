use nalgebra::{DMatrix, DVector};

use super::dictionary::{AtomDictionary, CrossGram, EnergyCoordinates, Generator};
use super::Measurer;
use crate::error::{Error, Result};
use crate::linalg::ridge_solve;
use crate::oracle::{AdmissibleQuery, QueryItem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthMode {
    /// Cancel the target wave.
    Negate,
    /// Reproduce the target wave.
    Copy,
    /// Reproduce `((τ_h − 1)/h)^order` of the target wave.
    Derivative { order: u32, step: f64 },
}

/// Atom coefficients standing in for a source the families do not contain.
#[derive(Debug, Clone)]
pub struct VirtualSource {
    pub coefficients: DVector<f64>,
    /// `½ |Z c − y|²`: energy left by the approximation.
    pub residual: f64,
}

/// Measures a target (items disjoint from every atom) against the dictionary:
/// its cross terms with each atom and its own energy, at `tau0`. Single-atom
/// energies come from the Gram diagonal.
pub fn measure_target(
    m: &Measurer,
    dict: &AtomDictionary,
    gram: &CrossGram,
    target: &[QueryItem],
) -> Result<(DVector<f64>, f64)> {
    let t = dict.tau0().clone();
    let own = m.measure(&AdmissibleQuery::new(target.to_vec(), t.clone()))?;
    let atoms = dict.atoms();
    let joint = m.measure_many(atoms.len(), |j| {
        let mut items = target.to_vec();
        items.push(atoms[j].item());
        AdmissibleQuery::new(items, t.clone())
    })?;
    let mut cross = DVector::zeros(atoms.len());
    for j in 0..atoms.len() {
        cross[j] = joint[j] - own - 0.5 * gram.get(j, j)?;
    }
    Ok((cross, own))
}

/// Solves `(G + ρ) c = Zᵀ y` for the wave `y` requested by `mode`, given the
/// target's cross terms against the atoms. Fails with `SingularGram` when the
/// retained spectrum is wider than the ridge can resolve.
pub fn synthesize(
    gram: &CrossGram,
    coords: &EnergyCoordinates,
    gen: Option<&Generator>,
    target_cross: &DVector<f64>,
    mode: SynthMode,
    ridge: f64,
) -> Result<VirtualSource> {
    let g = gram.matrix()?;
    let top = coords.sigma.max();
    let condition = if coords.rank() == 0 {
        f64::INFINITY
    } else {
        top / coords.sigma.min()
    };
    if !(condition * ridge < 1.0) {
        return Err(Error::SingularGram { condition });
    }
    let zt = coords.whiten(target_cross);
    let y = match mode {
        SynthMode::Negate => -zt,
        SynthMode::Copy => zt,
        SynthMode::Derivative { order, step } => {
            let gen = gen.ok_or_else(|| Error::StageInputMissing {
                missing: "generator".into(),
                prerequisite: "estimate_generator".into(),
            })?;
            let r = coords.rank();
            let diff = (gen.evolution(step) - DMatrix::identity(r, r)) / step;
            let mut y = zt;
            for _ in 0..order {
                y = &diff * y;
            }
            y
        }
    };
    let rho = ridge * g.trace() / g.nrows() as f64;
    let rhs = coords.z.transpose() * &y;
    let c = ridge_solve(
        g,
        &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()),
        rho,
    )?;
    let c = c.column(0).into_owned();
    let miss = &coords.z * &c - &y;
    Ok(VirtualSource {
        coefficients: c,
        residual: 0.5 * miss.norm_squared(),
    })
}

/// `sqrt(½ |D^s Z c|²)`: the `s`-th time-derivative energy of a virtual source.
pub fn semi_norm(coords: &EnergyCoordinates, gen: &Generator, c: &DVector<f64>, s: u32) -> f64 {
    let mut y = &coords.z * c;
    for _ in 0..s {
        y = &gen.d * y;
    }
    (0.5 * y.norm_squared()).sqrt()
}
