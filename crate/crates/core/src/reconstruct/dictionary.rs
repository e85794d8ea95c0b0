use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;
use num_traits::Zero;

use super::Measurer;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen;
use crate::oracle::{ratio, AdmissibleQuery, FamilyCatalog, QueryItem};

/// A shifted family member `τ_T F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub family: usize,
    pub member: usize,
    pub shift: BigRational,
}

impl Atom {
    pub fn item(&self) -> QueryItem {
        QueryItem::new(self.family, self.member, self.shift.clone())
    }

    /// The same member moved on by an extra shift `s` (may be negative).
    pub fn item_shifted(&self, s: &BigRational) -> QueryItem {
        QueryItem::new(self.family, self.member, &self.shift + s)
    }

    pub fn support(&self, catalog: &FamilyCatalog) -> (BigRational, BigRational) {
        let f = &catalog.families[self.family];
        (&f.start - &self.shift, &f.end - &self.shift)
    }
}

/// Atoms with pairwise disjoint supports, all ending before `tau0`.
#[derive(Debug, Clone)]
pub struct AtomDictionary {
    atoms: Vec<Atom>,
    tau0: BigRational,
    /// Smallest distance between two supports, or between a support and `tau0`/the origin.
    clearance: BigRational,
}

impl AtomDictionary {
    pub fn new(catalog: &FamilyCatalog, atoms: Vec<Atom>, tau0: BigRational) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InadmissibleLayout("empty dictionary".into()));
        }
        let mut spans = Vec::with_capacity(atoms.len());
        for (j, a) in atoms.iter().enumerate() {
            let fam = catalog.families.get(a.family).ok_or(Error::UnknownMember {
                family: a.family,
                member: a.member,
            })?;
            if a.member >= fam.count {
                return Err(Error::UnknownMember {
                    family: a.family,
                    member: a.member,
                });
            }
            if a.shift < BigRational::zero() {
                return Err(Error::InadmissibleLayout(format!(
                    "atom {j} has negative shift"
                )));
            }
            let (lo, hi) = a.support(catalog);
            if lo <= catalog.origin {
                return Err(Error::InadmissibleLayout(format!(
                    "atom {j} starts at {lo}, before the origin"
                )));
            }
            if hi >= tau0 {
                return Err(Error::InadmissibleLayout(format!(
                    "atom {j} ends at {hi}, not before {tau0}"
                )));
            }
            spans.push((lo, hi, j));
        }
        spans.sort();
        let mut clearance = &spans[0].0 - &catalog.origin;
        clearance = clearance.min(&tau0 - &spans[spans.len() - 1].1);
        for w in spans.windows(2) {
            if w[0].1 >= w[1].0 {
                return Err(Error::InadmissibleLayout(format!(
                    "atoms {} and {} overlap",
                    w[0].2.min(w[1].2),
                    w[0].2.max(w[1].2)
                )));
            }
            clearance = clearance.min(&w[1].0 - &w[0].1);
        }
        let min_shift = atoms
            .iter()
            .map(|a| a.shift.clone())
            .min()
            .unwrap_or_default();
        Ok(Self {
            atoms,
            tau0,
            clearance: clearance.min(min_shift),
        })
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn tau0(&self) -> &BigRational {
        &self.tau0
    }

    /// Every atom can be moved by up to this much without touching a neighbour,
    /// the origin, `tau0`, or a negative shift.
    pub fn clearance(&self) -> &BigRational {
        &self.clearance
    }
}

/// Members `0..count` of one family, shifted back one after another:
/// atom `j` gets `T_j = base + j (W + gap)` with `W` the family's time width.
pub fn staggered_layout(
    catalog: &FamilyCatalog,
    family: usize,
    count: usize,
    base: &BigRational,
    gap: &BigRational,
    tau0: BigRational,
) -> Result<AtomDictionary> {
    let fam = catalog
        .families
        .get(family)
        .ok_or(Error::UnknownMember { family, member: 0 })?;
    if count > fam.count {
        return Err(Error::UnknownMember {
            family,
            member: count - 1,
        });
    }
    let step = &fam.end - &fam.start + gap;
    let atoms = (0..count)
        .map(|j| Atom {
            family,
            member: j,
            shift: base + &step * BigRational::from_integer(j.into()),
        })
        .collect();
    AtomDictionary::new(catalog, atoms, tau0)
}

/// Pairwise energy cross terms `G_ij = E(a_i + a_j) − E(a_i) − E(a_j)` with `G_ii = 2E(a_i)`,
/// so that `E(Σ c_j a_j) = ½ cᵀ G c`.
#[derive(Debug, Clone)]
pub struct CrossGram {
    values: DMatrix<f64>,
    known: DMatrix<bool>,
    pub time: BigRational,
}

impl CrossGram {
    /// A partially known Gram; entries are mirrored.
    pub fn from_entries(
        n: usize,
        entries: impl IntoIterator<Item = ((usize, usize), f64)>,
        time: BigRational,
    ) -> Self {
        let mut values = DMatrix::zeros(n, n);
        let mut known = DMatrix::from_element(n, n, false);
        for ((i, j), v) in entries {
            values[(i, j)] = v;
            values[(j, i)] = v;
            known[(i, j)] = true;
            known[(j, i)] = true;
        }
        Self {
            values,
            known,
            time,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> Result<f64> {
        if self.known[(i, j)] {
            Ok(self.values[(i, j)])
        } else {
            Err(Error::MissingGramEntry(i, j))
        }
    }

    pub fn matrix(&self) -> Result<&DMatrix<f64>> {
        for j in 0..self.dim() {
            for i in 0..=j {
                self.get(i, j)?;
            }
        }
        Ok(&self.values)
    }

    /// `E(Σ c_j a_j)` at the Gram time; only entries with `c_i c_j ≠ 0` are needed.
    pub fn combination_energy(&self, c: &DVector<f64>) -> Result<f64> {
        let nz: Vec<usize> = (0..c.len()).filter(|&i| c[i] != 0.0).collect();
        let mut e = 0.0;
        for &i in &nz {
            for &j in &nz {
                e += c[i] * c[j] * self.get(i, j)?;
            }
        }
        Ok(0.5 * e)
    }
}

/// `n` single-atom and `n(n−1)/2` pair energies at `tau0`.
pub fn build_gram(m: &Measurer, dict: &AtomDictionary) -> Result<CrossGram> {
    let n = dict.len();
    let t = dict.tau0().clone();
    let atoms = dict.atoms();
    let single = m.measure_many(n, |i| {
        AdmissibleQuery::new(vec![atoms[i].item()], t.clone())
    })?;
    let pairs = upper_pairs(n);
    let joint = m.measure_many(pairs.len(), |k| {
        let (i, j) = pairs[k];
        AdmissibleQuery::new(vec![atoms[i].item(), atoms[j].item()], t.clone())
    })?;
    let diag = (0..n).map(|i| ((i, i), 2.0 * single[i]));
    let off = pairs
        .iter()
        .zip(&joint)
        .map(|(&(i, j), &e)| ((i, j), e - single[i] - single[j]));
    Ok(CrossGram::from_entries(n, diag.chain(off), t))
}

pub(crate) fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// Energy coordinates: `G = Zᵀ Z` with `Z = Σ^{1/2} Vᵀ` of rank `r`.
///
/// Column `j` of `Z` is the Cauchy data of atom `j` at `tau0`, written in an
/// unknown orthonormal basis of the energy space, so `E = ½ |z|²`.
#[derive(Debug, Clone)]
pub struct EnergyCoordinates {
    pub z: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl EnergyCoordinates {
    pub fn new(g: &DMatrix<f64>, rtol: f64) -> Self {
        let (vals, vecs) = sym_eigen(g);
        let top = vals.iter().cloned().fold(0.0, f64::max);
        let mut keep: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > rtol * top).collect();
        keep.reverse();
        let sigma = DVector::from_iterator(keep.len(), keep.iter().map(|&k| vals[k]));
        let v = DMatrix::from_fn(g.nrows(), keep.len(), |i, c| vecs[(i, keep[c])]);
        let z = DMatrix::from_fn(keep.len(), g.nrows(), |c, i| sigma[c].sqrt() * v[(i, c)]);
        Self { z, sigma, v }
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Coordinates of a state from its cross terms `g_j = z · z_j` against the atoms.
    pub fn whiten(&self, cross: &DVector<f64>) -> DVector<f64> {
        let y = self.v.transpose() * cross;
        y.component_div(&self.sigma.map(f64::sqrt))
    }

    /// Row functionals `f_j = ℓ · z_j` on the atoms, pulled back to coordinates.
    pub fn whiten_rows(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.sigma.map(|x| 1.0 / x.sqrt());
        let mut out = f * &self.v;
        for (c, sc) in s.iter().enumerate() {
            out.column_mut(c).scale_mut(*sc);
        }
        out
    }

    /// Minimum-norm atom coefficients with `Z c = y`.
    pub fn coefficients(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.v * y.component_div(&self.sigma.map(f64::sqrt))
    }
}

/// The free-evolution generator in energy coordinates: `∂_t z = D z`.
#[derive(Debug, Clone)]
pub struct Generator {
    pub d: DMatrix<f64>,
    /// Relative disagreement between the steps `h` and `h/2`.
    pub defect: f64,
    pub step: f64,
}

fn derivative_gram(m: &Measurer, dict: &AtomDictionary, s: &BigRational) -> Result<DMatrix<f64>> {
    let n = dict.len();
    let atoms = dict.atoms();
    let t = dict.tau0().clone();
    let pairs = upper_pairs(n);
    let neg = -s.clone();
    let plus = m.measure_many(pairs.len(), |k| {
        let (i, j) = pairs[k];
        AdmissibleQuery::new(vec![atoms[i].item(), atoms[j].item_shifted(s)], t.clone())
    })?;
    let minus = m.measure_many(pairs.len(), |k| {
        let (i, j) = pairs[k];
        AdmissibleQuery::new(
            vec![atoms[i].item(), atoms[j].item_shifted(&neg)],
            t.clone(),
        )
    })?;
    let two_s = 2.0 * ratio(s);
    let mut gd = DMatrix::zeros(n, n);
    for (k, &(i, j)) in pairs.iter().enumerate() {
        // single energies cancel: both shifted copies carry E(a_j)
        let x = (plus[k] - minus[k]) / two_s;
        gd[(i, j)] = x;
        gd[(j, i)] = -x;
    }
    Ok(gd)
}

/// Estimates `D` from `Ġ_ij = d/ds z_i · R(s) z_j` at `s = 0`, measured with
/// atom `j` moved by `±h` (and `±h/2` for the Richardson combination).
pub fn estimate_generator(
    m: &Measurer,
    dict: &AtomDictionary,
    coords: &EnergyCoordinates,
    h: &BigRational,
    richardson: bool,
    tol: f64,
) -> Result<Generator> {
    let two = BigRational::from_integer(2.into());
    if h <= &BigRational::zero() || h * &two >= *dict.clearance() {
        return Err(Error::InadmissibleLayout(format!(
            "generator step {h} needs clearance above {}, have {}",
            h * &two,
            dict.clearance()
        )));
    }
    let coarse = derivative_gram(m, dict, h)?;
    let (gd, defect) = if richardson {
        let fine = derivative_gram(m, dict, &(h / &two))?;
        let defect = (&coarse - &fine).norm() / fine.norm().max(f64::MIN_POSITIVE);
        ((fine * 4.0 - coarse) / 3.0, defect)
    } else {
        (coarse, 0.0)
    };
    if defect > tol {
        return Err(Error::DerivativeStepTooCoarse { defect });
    }
    let w = coords.whiten_rows(&gd.transpose());
    let d = coords.whiten_rows(&w.transpose());
    let d = (&d - d.transpose()) * 0.5;
    Ok(Generator {
        d,
        defect,
        step: ratio(h) * if richardson { 0.5 } else { 1.0 },
    })
}

impl Generator {
    /// `exp(s D)`, the free evolution over time `s` in energy coordinates.
    pub fn evolution(&self, s: f64) -> DMatrix<f64> {
        (&self.d * s).exp()
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.d.clone().try_inverse().ok_or(Error::SingularGram {
            condition: f64::INFINITY,
        })
    }
}
