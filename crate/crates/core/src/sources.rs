//! Seeded Gaussian source families on space-time boxes and their density diagnostics.
//!
//! The covariance is `e^{−L}` with `L = −ℓ²Δ_h − ∂_σ² + σ²` on the node set of an
//! arc times a time grid, where `σ ∈ [−σ_max, σ_max]` is the affine image of the
//! family interval. `L` separates, so the Karhunen–Loève basis is the tensor
//! product of the spatial connection-Laplacian modes and discrete oscillator
//! modes in time.

use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::SourceFunction;
use crate::geometry::{Arc, GridBundle};
use crate::linalg::{sym_eigen, symmetrize};

/// Parameters of the Gaussian covariance of one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSpec {
    /// Sobolev order used for the reported `H^s` trace.
    #[serde(default)]
    pub sobolev_order: u32,
    /// Spatial correlation length `ℓ` multiplying the Laplacian.
    #[serde(default = "default_length")]
    pub length_scale: f64,
    /// Half-width of the oscillator coordinate the interval is mapped onto.
    #[serde(default = "default_sigma")]
    pub sigma_max: f64,
    /// Number of time knots on the family interval (endpoints included).
    #[serde(default = "default_time_grid")]
    pub time_grid: usize,
    /// KL truncation rank; `None` means `min(N·d·time_grid, 400)`.
    #[serde(default)]
    pub rank: Option<usize>,
}

fn default_length() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    3.0
}
fn default_time_grid() -> usize {
    16
}

impl Default for CovarianceSpec {
    fn default() -> Self {
        Self {
            sobolev_order: 0,
            length_scale: default_length(),
            sigma_max: default_sigma(),
            time_grid: default_time_grid(),
            rank: None,
        }
    }
}

/// Truncated KL expansion of a family covariance.
#[derive(Debug, Clone)]
pub struct KlBasis {
    /// Spatial modes embedded in the flat `N·d` space (columns).
    pub space: DMatrix<f64>,
    pub space_eigs: Vec<f64>,
    /// Time modes on the knot grid (columns).
    pub time: DMatrix<f64>,
    pub time_eigs: Vec<f64>,
    /// Retained `(space index, time index, weight)` triples, weights descending.
    pub retained: Vec<(usize, usize, f64)>,
    /// `Σ weights`.
    pub trace: f64,
    /// `Σ weights · k^{−s}` with `k` the Rayleigh quotient of `−Δ_h − ∂_t² + 1`.
    pub sobolev_trace: f64,
}

/// A seeded family of sources supported in `Ū × Ī`.
#[derive(Debug, Clone)]
pub struct BasicFamily {
    pub arc: Arc,
    pub start: BigRational,
    pub end: BigRational,
    pub seed: u64,
    pub covariance: CovarianceSpec,
    /// `None` for families assembled from explicit members.
    pub basis: Option<KlBasis>,
    pub members: Vec<SourceFunction<f64>>,
    dim: usize,
}

/// Symmetrized connection Laplacian `−Δ_h` on the arc nodes (periodic for a full arc).
fn connection_laplacian(bundle: &GridBundle<f64>, arc: &Arc) -> (Vec<usize>, DMatrix<f64>) {
    let n = bundle.node_count();
    let d = bundle.rank();
    let nodes = arc.nodes(n);
    let k = nodes.len();
    let dx2 = bundle.manifold.spacing().powi(2);
    let full = arc.covers_circle(n);
    let mut lap = DMatrix::zeros(k * d, k * d);
    let edges = if full { k } else { k.saturating_sub(1) };
    for e in 0..edges {
        let (a, b) = (e, (e + 1) % k);
        let p = bundle.atlas.transport(nodes[a], nodes[b]);
        let q = bundle.atlas.transport(nodes[b], nodes[a]);
        let id = DMatrix::<f64>::identity(d, d);
        for (r, c, m) in [(a, a, id.clone()), (b, b, id), (a, b, -p), (b, a, -q)] {
            let mut blk = lap.view_mut((r * d, c * d), (d, d));
            blk += m / dx2;
        }
    }
    (nodes, symmetrize(&lap))
}

/// Discrete `−∂_σ² + σ²` on `m` knots of `[−σ_max, σ_max]` with zero continuation.
fn oscillator(m: usize, sigma_max: f64) -> DMatrix<f64> {
    let ds = 2.0 * sigma_max / (m - 1) as f64;
    let mut op = DMatrix::zeros(m, m);
    for k in 0..m {
        let s = -sigma_max + k as f64 * ds;
        op[(k, k)] = 2.0 / (ds * ds) + s * s;
        if k + 1 < m {
            op[(k, k + 1)] = -1.0 / (ds * ds);
            op[(k + 1, k)] = -1.0 / (ds * ds);
        }
    }
    op
}

impl KlBasis {
    pub fn new(
        bundle: &GridBundle<f64>,
        cov: &CovarianceSpec,
        arc: &Arc,
        width: f64,
    ) -> Result<Self> {
        if cov.time_grid < 3 {
            return Err(Error::InvalidBundle(
                "time grid needs at least 3 knots".into(),
            ));
        }
        let n = bundle.node_count();
        let d = bundle.rank();
        let (nodes, lap) = connection_laplacian(bundle, arc);
        let (lam_x, vx) = sym_eigen(&lap);
        let w = bundle.manifold.weights();
        let mut space = DMatrix::zeros(n * d, nodes.len() * d);
        for col in 0..vx.ncols() {
            for (k, &node) in nodes.iter().enumerate() {
                for r in 0..d {
                    space[(node * d + r, col)] = vx[(k * d + r, col)] / w[node].sqrt();
                }
            }
        }
        let m = cov.time_grid;
        let (lam_t, vt) = sym_eigen(&oscillator(m, cov.sigma_max));
        let dt = width / (m - 1) as f64;
        let time = vt / dt.sqrt();

        let mut all: Vec<(usize, usize, f64)> = Vec::with_capacity(lam_x.len() * m);
        for a in 0..lam_x.len() {
            for b in 0..m {
                let mu = cov.length_scale.powi(2) * lam_x[a].max(0.0) + lam_t[b];
                all.push((a, b, (-mu).exp()));
            }
        }
        all.sort_by(|x, y| {
            y.2.partial_cmp(&x.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then((x.0, x.1).cmp(&(y.0, y.1)))
        });
        let rank = cov.rank.unwrap_or((n * d * m).min(400)).min(all.len());
        if rank == 0 {
            return Err(Error::InvalidCount(0));
        }
        all.truncate(rank);
        if let Some((index, &(_, _, weight))) = all.iter().enumerate().find(|(_, r)| !(r.2 > 0.0)) {
            return Err(Error::DegenerateCovariance { index, weight });
        }

        let second_diff = {
            let mut op = DMatrix::zeros(m, m);
            for k in 0..m {
                op[(k, k)] = 2.0 / (dt * dt);
                if k + 1 < m {
                    op[(k, k + 1)] = -1.0 / (dt * dt);
                    op[(k + 1, k)] = -1.0 / (dt * dt);
                }
            }
            op
        };
        let time_k: Vec<f64> = (0..m)
            .map(|b| {
                let v = time.column(b);
                (v.transpose() * &second_diff * v)[0] * dt
            })
            .collect();
        let trace = all.iter().map(|r| r.2).sum();
        let sobolev_trace = all
            .iter()
            .map(|&(a, b, wgt)| {
                wgt * (lam_x[a].max(0.0) + time_k[b] + 1.0).powi(-(cov.sobolev_order as i32))
            })
            .sum();
        Ok(Self {
            space,
            space_eigs: lam_x.iter().copied().collect(),
            time,
            time_eigs: lam_t.iter().copied().collect(),
            retained: all,
            trace,
            sobolev_trace,
        })
    }

    /// Draws one field as an `N·d × knots` matrix from standard normal coefficients.
    pub fn draw(&self, rng: &mut impl Rng) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.space.nrows(), self.time.nrows());
        for &(a, b, w) in &self.retained {
            let g: f64 = rng.sample(StandardNormal);
            let amp = g * w.sqrt();
            out.ger(amp, &self.space.column(a), &self.time.column(b), 1.0);
        }
        out
    }

    /// Variance of the field at flat index `row` and knot `knot`.
    pub fn pointwise_variance(&self, row: usize, knot: usize) -> f64 {
        self.retained
            .iter()
            .map(|&(a, b, w)| w * (self.space[(row, a)] * self.time[(knot, b)]).powi(2))
            .sum()
    }
}

fn to_f64(q: &BigRational) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

/// Deterministic RNG for member `k` of the family seeded with `seed`.
pub fn member_rng(seed: u64, k: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Samples `n` members supported in `arc × [start, end]`.
pub fn sample_family(
    bundle: &GridBundle<f64>,
    cov: &CovarianceSpec,
    arc: Arc,
    start: BigRational,
    end: BigRational,
    n: usize,
    seed: u64,
) -> Result<BasicFamily> {
    if n == 0 {
        return Err(Error::InvalidCount(0));
    }
    let (t0, t1) = (to_f64(&start), to_f64(&end));
    if !(t1 > t0) {
        return Err(Error::InadmissibleTime(format!(
            "family interval [{start}, {end}] is empty"
        )));
    }
    let basis = KlBasis::new(bundle, cov, &arc, t1 - t0)?;
    let step = (t1 - t0) / (cov.time_grid - 1) as f64;
    let members = (0..n)
        .map(|k| SourceFunction::Sampled {
            start: t0,
            step,
            values: basis.draw(&mut member_rng(seed, k)),
        })
        .collect();
    Ok(BasicFamily {
        arc,
        start,
        end,
        seed,
        covariance: cov.clone(),
        basis: Some(basis),
        members,
        dim: bundle.dim(),
    })
}

impl BasicFamily {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn interval_f64(&self) -> (f64, f64) {
        (to_f64(&self.start), to_f64(&self.end))
    }

    /// Family with explicitly given members (test fixtures, closed-form atoms).
    pub fn from_members(
        bundle: &GridBundle<f64>,
        arc: Arc,
        start: BigRational,
        end: BigRational,
        members: Vec<SourceFunction<f64>>,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidCount(0));
        }
        Ok(Self {
            arc,
            start,
            end,
            seed: 0,
            covariance: CovarianceSpec::default(),
            basis: None,
            members,
            dim: bundle.dim(),
        })
    }

    /// Knot values of member `k`, for sampled members.
    pub fn values(&self, k: usize) -> Option<&DMatrix<f64>> {
        match &self.members[k] {
            SourceFunction::Sampled { values, .. } => Some(values),
            _ => None,
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.dim
    }
}

/// Relative L² projection residuals of each target onto `span{F_1..F_n}` for each `n` in `n_grid`.
///
/// Inner product: bundle mass matrix in space, uniform knot weights in time.
/// Residuals come from a single Gram–Schmidt sweep, so curves are non-increasing.
pub fn density_diagnostic(
    bundle: &GridBundle<f64>,
    family: &BasicFamily,
    targets: &[DMatrix<f64>],
    n_grid: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mass = bundle.mass_matrix();
    let (t0, t1) = family.interval_f64();
    let knots = family.covariance.time_grid;
    let dt = (t1 - t0) / (knots - 1) as f64;
    let ip = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a.transpose() * &mass * b).trace() * dt;
    let max_n = n_grid.iter().copied().max().unwrap_or(0).min(family.len());
    let member = |k: usize| {
        family
            .values(k)
            .ok_or_else(|| Error::Dimension(format!("member {k} has no knot values")))
    };
    let mut basis: Vec<DMatrix<f64>> = Vec::new();
    let mut coeff_sq: Vec<Vec<f64>> = vec![Vec::new(); targets.len()];
    for k in 0..max_n {
        let mut v = member(k)?.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = ip(q, &v);
                v -= q * c;
            }
        }
        let norm = ip(&v, &v).max(0.0).sqrt();
        let scale = ip(member(k)?, member(k)?).sqrt();
        let q = (norm > 1e-10 * scale).then(|| v / norm);
        for (t, target) in targets.iter().enumerate() {
            let c = q.as_ref().map_or(0.0, |q| ip(q, target));
            coeff_sq[t].push(c * c);
        }
        if let Some(q) = q {
            basis.push(q);
        }
    }
    Ok(targets
        .iter()
        .enumerate()
        .map(|(t, target)| {
            let total = ip(target, target);
            n_grid
                .iter()
                .map(|&n| {
                    if total <= 0.0 {
                        return 0.0;
                    }
                    let captured: f64 = coeff_sq[t][..n.min(max_n)].iter().sum();
                    ((total - captured).max(0.0) / total).sqrt()
                })
                .collect()
        })
        .collect())
}

/// Zero outside the box: largest absolute value of `values` at nodes off the arc.
pub fn max_outside(values: &DMatrix<f64>, arc: &Arc, nodes: usize, rank: usize) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..nodes {
        if !arc.contains(i, nodes) {
            for r in 0..rank {
                for k in 0..values.ncols() {
                    m = m.max(values[(i * rank + r, k)].abs());
                }
            }
        }
    }
    m
}

/// Product target `profile ⊗ time_profile` on the family knot grid.
pub fn product_target(profile: &DVector<f64>, time_profile: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(profile.len(), time_profile.len(), |r, k| {
        profile[r] * time_profile[k]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ChartAtlas, FiberMetric, GridManifold};
    use num_bigint::BigInt;

    fn bundle(n: usize) -> GridBundle<f64> {
        GridBundle::new(
            GridManifold::uniform(n).unwrap(),
            ChartAtlas::trivial(n, 1),
            FiberMetric::constant(n, DMatrix::identity(1, 1)).unwrap(),
        )
        .unwrap()
    }

    fn q(a: i64, b: i64) -> BigRational {
        BigRational::new(BigInt::from(a), BigInt::from(b))
    }

    #[test]
    fn zero_count_rejected() {
        let err = sample_family(
            &bundle(16),
            &CovarianceSpec::default(),
            Arc::new(0, 16),
            q(0, 1),
            q(1, 1),
            0,
            1,
        )
        .unwrap_err();
        assert_eq!(err, Error::InvalidCount(0));
    }

    #[test]
    fn members_reproducible_bit_for_bit() {
        let b = bundle(16);
        let cov = CovarianceSpec::default();
        let f1 = sample_family(&b, &cov, Arc::new(0, 16), q(0, 1), q(1, 2), 5, 42).unwrap();
        let f2 = sample_family(&b, &cov, Arc::new(0, 16), q(0, 1), q(1, 2), 4, 42).unwrap();
        assert_eq!(f1.values(3), f2.values(3));
        assert_ne!(f1.values(2), f1.values(3));
    }

    #[test]
    fn support_is_confined_to_arc() {
        let b = bundle(24);
        let arc = Arc::new(20, 9);
        let fam =
            sample_family(&b, &CovarianceSpec::default(), arc, q(0, 1), q(1, 1), 6, 3).unwrap();
        for k in 0..fam.len() {
            assert_eq!(max_outside(fam.values(k).unwrap(), &arc, 24, 1), 0.0);
            assert!(fam.values(k).unwrap().amax() > 0.0);
        }
        assert_eq!(fam.members[0].value_at(1.0001, 24).amax(), 0.0);
        assert_eq!(fam.members[0].value_at(-0.0001, 24).amax(), 0.0);
    }

    #[test]
    fn sample_mean_within_monte_carlo_bound() {
        let b = bundle(16);
        let fam = sample_family(
            &b,
            &CovarianceSpec::default(),
            Arc::new(0, 16),
            q(0, 1),
            q(1, 1),
            500,
            9,
        )
        .unwrap();
        for &(row, knot) in &[(0, 3), (7, 8), (15, 12)] {
            let mean: f64 = (0..500)
                .map(|k| fam.values(k).unwrap()[(row, knot)])
                .sum::<f64>()
                / 500.0;
            let sd = fam
                .basis
                .as_ref()
                .unwrap()
                .pointwise_variance(row, knot)
                .sqrt();
            assert!(mean.abs() <= 4.0 * sd / 500f64.sqrt(), "{mean} vs {sd}");
        }
    }

    #[test]
    fn retained_weights_positive_and_trace_reported() {
        let b = bundle(16);
        let cov = CovarianceSpec {
            sobolev_order: 2,
            ..CovarianceSpec::default()
        };
        let basis = KlBasis::new(&b, &cov, &Arc::new(0, 16), 1.0).unwrap();
        assert_eq!(basis.retained.len(), 16 * 16);
        assert!(basis.retained.iter().all(|r| r.2 > 0.0));
        assert!(basis.trace.is_finite() && basis.sobolev_trace < basis.trace);
    }

    #[test]
    fn density_residuals_trivial_cases_and_monotone() {
        let b = bundle(16);
        let fam = sample_family(
            &b,
            &CovarianceSpec::default(),
            Arc::new(0, 16),
            q(0, 1),
            q(1, 1),
            30,
            5,
        )
        .unwrap();
        let v = |k| fam.values(k).unwrap().clone();
        let targets = vec![v(0), DMatrix::zeros(16, 16), v(7) * 2.0 + v(29)];
        let grid: Vec<usize> = (1..=30).collect();
        let res = density_diagnostic(&b, &fam, &targets, &grid).unwrap();
        assert!(res[0].iter().all(|&r| r < 1e-7));
        assert!(res[1].iter().all(|&r| r == 0.0));
        assert!(res[2][29] < 1e-7);
        for curve in &res {
            assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
