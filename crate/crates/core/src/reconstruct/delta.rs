use nalgebra::DMatrix;
use num_rational::BigRational;

use super::dictionary::{AtomDictionary, EnergyCoordinates};
use super::pairing::{pairing_functionals, Probe};
use super::Measurer;
use crate::error::{Error, Result};
use crate::linalg::pseudo_inverse;

/// One ball of the shrinking sequence around a node.
#[derive(Debug, Clone)]
pub struct DeltaLevel {
    pub radius: usize,
    pub volume: f64,
    /// Best match of the finest functionals by this ball's members, normalized by volume.
    pub selection: DMatrix<f64>,
    /// Relative distance to the selection of the next finer ball.
    pub cauchy_defect: f64,
}

#[derive(Debug, Clone)]
pub struct DeltaSequence {
    pub node: usize,
    pub levels: Vec<DeltaLevel>,
}

impl DeltaSequence {
    /// Largest Cauchy defect of the sequence.
    pub fn defect(&self) -> f64 {
        self.levels
            .iter()
            .map(|l| l.cauchy_defect)
            .fold(0.0, f64::max)
    }
}

/// Velocity functionals of families on shrinking balls around `node`. Each
/// ball's members are combined by least squares to match the finest ball,
/// after dividing by the ball volume, and consecutive selections must agree.
///
/// `levels` runs from the largest ball to the smallest: `(radius, volume, probes)`.
#[allow(clippy::too_many_arguments)]
pub fn delta_search(
    m: &Measurer,
    dict: &AtomDictionary,
    coords: &EnergyCoordinates,
    node: usize,
    levels: &[(usize, f64, Vec<Probe>)],
    h: &BigRational,
    richardson: bool,
    tol: f64,
) -> Result<DeltaSequence> {
    let mut rows = Vec::with_capacity(levels.len());
    for (_, vol, probes) in levels {
        let t = pairing_functionals(m, dict, coords, probes, h, richardson, f64::INFINITY)?;
        rows.push(t.velocity / *vol);
    }
    let finest = rows.last().ok_or(Error::NoConvergentSelection {
        defect: f64::INFINITY,
    })?;
    let scale = finest.norm().max(f64::MIN_POSITIVE);
    let selections: Vec<DMatrix<f64>> = rows
        .iter()
        .map(|level| {
            // rows of `finest` projected onto the row space of `level`
            let coef = finest * pseudo_inverse(level, 1e-10);
            coef * level
        })
        .collect();
    let mut out = Vec::with_capacity(levels.len());
    for (k, (radius, volume, _)) in levels.iter().enumerate() {
        let next = selections.get(k + 1).unwrap_or(&selections[k]);
        out.push(DeltaLevel {
            radius: *radius,
            volume: *volume,
            selection: selections[k].clone(),
            cauchy_defect: (&selections[k] - next).norm() / scale,
        });
    }
    let seq = DeltaSequence { node, levels: out };
    let last = seq.levels.len().saturating_sub(2);
    let defect = seq.levels[last].cauchy_defect;
    if defect > tol {
        return Err(Error::NoConvergentSelection { defect });
    }
    Ok(seq)
}
