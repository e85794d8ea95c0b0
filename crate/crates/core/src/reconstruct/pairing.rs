use nalgebra::DMatrix;
use num_rational::BigRational;

use super::dictionary::{AtomDictionary, EnergyCoordinates, Generator};
use super::Measurer;
use crate::error::{Error, Result};
use crate::oracle::{ratio, AdmissibleQuery, QueryItem};

/// An unshifted member of a localized family, read at the pairing time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub family: usize,
    pub member: usize,
    /// Node the family's chart is centred on.
    pub node: usize,
}

impl Probe {
    pub fn item(&self) -> QueryItem {
        QueryItem::new(
            self.family,
            self.member,
            BigRational::from_integer(0.into()),
        )
    }
}

fn times(tau: &BigRational, s: &BigRational) -> [BigRational; 2] {
    [tau + s, tau - s]
}

/// `⟨p(τ), ∂_t u^a(τ)⟩` from energies alone: the time derivative at `τ` of the
/// cross term `E(a + p) − E(a) − E(p)`, by central differences with step `h`
/// (and Richardson extrapolation with `h/2`). Both sides are superpositions
/// of items; the items of `a` must be inactive near `τ`.
pub fn velocity_pairing(
    m: &Measurer,
    atom: &[QueryItem],
    probe: &[QueryItem],
    tau: &BigRational,
    h: &BigRational,
    richardson: bool,
) -> Result<f64> {
    let one = |s: &BigRational| -> Result<f64> {
        let [tp, tm] = times(tau, s);
        let mut both = atom.to_vec();
        both.extend_from_slice(probe);
        let jp = m.measure(&AdmissibleQuery::new(both.clone(), tp.clone()))?;
        let jm = m.measure(&AdmissibleQuery::new(both, tm.clone()))?;
        let pp = m.measure(&AdmissibleQuery::new(probe.to_vec(), tp))?;
        let pm = m.measure(&AdmissibleQuery::new(probe.to_vec(), tm))?;
        Ok(((jp - jm) - (pp - pm)) / (2.0 * ratio(s)))
    };
    let coarse = one(h)?;
    if !richardson {
        return Ok(coarse);
    }
    let fine = one(&(h / BigRational::from_integer(2.into())))?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Velocity functionals of the probes in energy coordinates, one row per probe:
/// `⟨p_μ(τ), ∂_t u^z(τ)⟩ = velocity[μ] · z`.
#[derive(Debug, Clone)]
pub struct PairingTable {
    pub probes: Vec<Probe>,
    pub velocity: DMatrix<f64>,
    /// Relative disagreement between the two difference steps.
    pub defect: f64,
}

impl PairingTable {
    /// `⟨p_μ, u^z⟩`, using `∂_t u = v` and `∂_t z = D z`.
    pub fn position(&self, gen: &Generator) -> Result<DMatrix<f64>> {
        Ok(&self.velocity * gen.inverse()?)
    }

    /// `⟨p_μ, ∂_t² u^z⟩ = −⟨p_μ, A u^z⟩`.
    pub fn acceleration(&self, gen: &Generator) -> DMatrix<f64> {
        &self.velocity * &gen.d
    }

    /// Row indices of the probes centred on `node`.
    pub fn rows_at(&self, node: usize) -> Vec<usize> {
        (0..self.probes.len())
            .filter(|&k| self.probes[k].node == node)
            .collect()
    }
}

fn pairing_matrix(
    m: &Measurer,
    dict: &AtomDictionary,
    probes: &[Probe],
    tau: &BigRational,
    s: &BigRational,
) -> Result<DMatrix<f64>> {
    let n = dict.len();
    let atoms = dict.atoms();
    let [tp, tm] = times(tau, s);
    let alone = m.measure_many(2 * probes.len(), |k| {
        let t = if k % 2 == 0 { &tp } else { &tm };
        AdmissibleQuery::new(vec![probes[k / 2].item()], t.clone())
    })?;
    let joint = m.measure_many(2 * n * probes.len(), |k| {
        let (mu, rest) = (k / (2 * n), k % (2 * n));
        let t = if rest % 2 == 0 { &tp } else { &tm };
        AdmissibleQuery::new(vec![atoms[rest / 2].item(), probes[mu].item()], t.clone())
    })?;
    let two_s = 2.0 * ratio(s);
    Ok(DMatrix::from_fn(probes.len(), n, |mu, j| {
        let k = 2 * (mu * n + j);
        ((joint[k] - joint[k + 1]) - (alone[2 * mu] - alone[2 * mu + 1])) / two_s
    }))
}

/// Measures every probe against every atom and pulls the pairings back to
/// energy coordinates. The pairing time is the dictionary's `tau0`.
pub fn pairing_functionals(
    m: &Measurer,
    dict: &AtomDictionary,
    coords: &EnergyCoordinates,
    probes: &[Probe],
    h: &BigRational,
    richardson: bool,
    tol: f64,
) -> Result<PairingTable> {
    let tau = dict.tau0();
    let coarse = pairing_matrix(m, dict, probes, tau, h)?;
    let (f, defect) = if richardson {
        let fine = pairing_matrix(
            m,
            dict,
            probes,
            tau,
            &(h / BigRational::from_integer(2.into())),
        )?;
        let defect = (&coarse - &fine).norm() / fine.norm().max(f64::MIN_POSITIVE);
        ((fine * 4.0 - coarse) / 3.0, defect)
    } else {
        (coarse, 0.0)
    };
    if defect > tol {
        return Err(Error::DerivativeStepTooCoarse { defect });
    }
    Ok(PairingTable {
        probes: probes.to_vec(),
        velocity: coords.whiten_rows(&f),
        defect,
    })
}
