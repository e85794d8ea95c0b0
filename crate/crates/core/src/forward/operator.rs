use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{GridBundle, Section};
use crate::linalg::{generalized_sym_eigen, relative_asymmetry, symmetrize};
use crate::scalar::{c, f, Real};

/// Relative asymmetry accepted before symmetrization of a hidden operator.
pub const SELF_ADJOINT_TOL: f64 = 1e-10;

/// Per-node coefficients of `A u = a2 u'' + a1 u' + a0 u` in node-reference coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticOperatorSpec<T: Real> {
    pub a2: Vec<DMatrix<T>>,
    pub a1: Vec<DMatrix<T>>,
    pub a0: Vec<DMatrix<T>>,
}

/// Three-point stencil blocks: `(A u)_i = L_i u'_{i-1} + D_i u_i + R_i u'_{i+1}`,
/// where primes denote neighbours transported into the chart of node `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil<T: Real> {
    pub left: Vec<DMatrix<T>>,
    pub diag: Vec<DMatrix<T>>,
    pub right: Vec<DMatrix<T>>,
}

impl<T: Real> EllipticOperatorSpec<T> {
    /// `A = −∂²ₓ + 1` componentwise.
    pub fn laplace_plus_one(nodes: usize, rank: usize) -> Self {
        Self::laplace_with_potential(nodes, rank, |_| T::one())
    }

    /// `A = −∂²ₓ + q(x)` with scalar potential `q` evaluated at node positions.
    pub fn laplace_with_potential(nodes: usize, rank: usize, q: impl Fn(usize) -> T) -> Self {
        let id = DMatrix::<T>::identity(rank, rank);
        Self {
            a2: vec![-id.clone(); nodes],
            a1: vec![DMatrix::zeros(rank, rank); nodes],
            a0: (0..nodes).map(|i| &id * q(i)).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.a0.len()
    }

    pub fn rank(&self) -> usize {
        self.a0.first().map_or(0, |m| m.nrows())
    }

    pub fn to_stencil(&self, dx: T) -> Stencil<T> {
        let two = c::<T>(2.0);
        let dx2 = dx * dx;
        let mut s = Stencil {
            left: Vec::new(),
            diag: Vec::new(),
            right: Vec::new(),
        };
        for i in 0..self.node_count() {
            let second = &self.a2[i] / dx2;
            let first = &self.a1[i] / (two * dx);
            s.left.push(&second - &first);
            s.right.push(&second + &first);
            s.diag.push(&self.a0[i] - second * two);
        }
        s
    }

    pub fn from_stencil(s: &Stencil<T>, dx: T) -> Self {
        let half = c::<T>(0.5);
        let mut out = Self {
            a2: Vec::new(),
            a1: Vec::new(),
            a0: Vec::new(),
        };
        for i in 0..s.diag.len() {
            out.a2.push((&s.left[i] + &s.right[i]) * (dx * dx * half));
            out.a1.push((&s.right[i] - &s.left[i]) * dx);
            out.a0.push(&s.diag[i] + &s.left[i] + &s.right[i]);
        }
        out
    }

    /// Coefficients of the same discrete operator after the change of frame `u = g ũ`.
    pub fn gauge_transform(&self, bundle: &GridBundle<T>, g: &[DMatrix<T>]) -> Result<Self> {
        let n = bundle.node_count();
        let dx = bundle.manifold.spacing();
        let st = self.to_stencil(dx);
        let gauged = bundle.gauge_transform(g)?;
        let inv = |m: &DMatrix<T>, node: usize| {
            m.clone()
                .try_inverse()
                .ok_or_else(|| Error::InvalidBundle(format!("singular gauge at node {node}")))
        };
        let mut out = Stencil {
            left: Vec::new(),
            diag: Vec::new(),
            right: Vec::new(),
        };
        for i in 0..n {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            let gi_inv = inv(&g[i], i)?;
            let p_old_l = bundle.atlas.transport(i, im);
            let p_old_r = bundle.atlas.transport(i, ip);
            let p_new_l = inv(&gauged.atlas.transport(i, im), im)?;
            let p_new_r = inv(&gauged.atlas.transport(i, ip), ip)?;
            out.left
                .push(&gi_inv * &st.left[i] * p_old_l * &g[im] * p_new_l);
            out.diag.push(&gi_inv * &st.diag[i] * &g[i]);
            out.right
                .push(&gi_inv * &st.right[i] * p_old_r * &g[ip] * p_new_r);
        }
        Ok(Self::from_stencil(&out, dx))
    }
}

/// Assembles the flat `N·d × N·d` operator matrix in node-reference coordinates.
pub fn assemble<T: Real>(
    spec: &EllipticOperatorSpec<T>,
    bundle: &GridBundle<T>,
) -> Result<DMatrix<T>> {
    let n = bundle.node_count();
    let d = bundle.rank();
    if spec.node_count() != n || spec.rank() != d {
        return Err(Error::Dimension(format!(
            "operator has {}x{} coefficients, bundle has {n} nodes of rank {d}",
            spec.node_count(),
            spec.rank()
        )));
    }
    let st = spec.to_stencil(bundle.manifold.spacing());
    let mut a = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        let ip = (i + 1) % n;
        let im = (i + n - 1) % n;
        let l = &st.left[i] * bundle.atlas.transport(i, im);
        let r = &st.right[i] * bundle.atlas.transport(i, ip);
        let mut add = |j: usize, block: &DMatrix<T>| {
            let mut v = a.view_mut((i * d, j * d), (d, d));
            v += block;
        };
        add(im, &l);
        add(i, &st.diag[i]);
        add(ip, &r);
    }
    Ok(a)
}

/// Eigen-decomposition of the assembled operator with `M`-orthonormal eigensections.
#[derive(Debug, Clone)]
pub struct SpectralModel<T: Real> {
    pub bundle: GridBundle<T>,
    pub spec: EllipticOperatorSpec<T>,
    operator: DMatrix<T>,
    mass: DMatrix<T>,
    eigenvalues: DVector<T>,
    frequencies: DVector<T>,
    eigenvectors: DMatrix<T>,
    projector: DMatrix<T>,
    asymmetry: T,
}

/// Assembles `A`, checks self-adjointness and positivity, and decomposes.
pub fn assemble_and_decompose<T: Real>(
    spec: &EllipticOperatorSpec<T>,
    bundle: &GridBundle<T>,
) -> Result<SpectralModel<T>> {
    SpectralModel::new(spec, bundle, SELF_ADJOINT_TOL)
}

impl<T: Real> SpectralModel<T> {
    /// As [`assemble_and_decompose`] with an explicit asymmetry tolerance.
    pub fn new(
        spec: &EllipticOperatorSpec<T>,
        bundle: &GridBundle<T>,
        asym_tol: f64,
    ) -> Result<Self> {
        let a = assemble(spec, bundle)?;
        let mass = bundle.mass_matrix();
        let s = &mass * &a;
        let asymmetry = relative_asymmetry(&s);
        let tol = asym_tol.max(100.0 * f(T::default_epsilon()));
        if !(f(asymmetry) <= tol) {
            return Err(Error::NotSelfAdjoint {
                asymmetry: f(asymmetry),
            });
        }
        let s_sym = symmetrize(&s);
        let (eigenvalues, eigenvectors) = generalized_sym_eigen(&s_sym, &mass)?;
        let lmin = eigenvalues[0];
        let lmax = eigenvalues[eigenvalues.len() - 1];
        let floor = 1e-10_f64.max(1e3 * f(T::default_epsilon())) * f(lmax.abs()).max(1.0);
        if !(f(lmin) > floor) {
            return Err(Error::NotPositive {
                lambda_min: f(lmin),
            });
        }
        let operator = mass
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Dimension("mass matrix is not positive definite".into()))?
            .solve(&s_sym);
        let frequencies = eigenvalues.map(|l| l.sqrt());
        let projector = eigenvectors.transpose() * &mass;
        Ok(Self {
            bundle: bundle.clone(),
            spec: spec.clone(),
            operator,
            mass,
            eigenvalues,
            frequencies,
            eigenvectors,
            projector,
            asymmetry,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<T> {
        &self.eigenvalues
    }

    /// `ω_l = √λ_l`.
    pub fn frequencies(&self) -> &DVector<T> {
        &self.frequencies
    }

    /// Columns are the eigensections `φ_l` in flat node-reference coordinates.
    pub fn eigenvectors(&self) -> &DMatrix<T> {
        &self.eigenvectors
    }

    pub fn eigensection(&self, l: usize) -> Section<T> {
        Section::from_flat(
            &self.eigenvectors.column(l).into_owned(),
            self.bundle.rank(),
        )
    }

    /// Symmetrized operator matrix.
    pub fn operator(&self) -> &DMatrix<T> {
        &self.operator
    }

    pub fn mass(&self) -> &DMatrix<T> {
        &self.mass
    }

    /// Relative asymmetry of `M A` before symmetrization.
    pub fn asymmetry(&self) -> T {
        self.asymmetry
    }

    /// Modal coefficients `c = Φ^T M v` of a flat section.
    pub fn project(&self, flat: &DVector<T>) -> DVector<T> {
        &self.projector * flat
    }

    /// Modal coefficients for every column of `values`.
    pub fn project_columns(&self, values: &DMatrix<T>) -> DMatrix<T> {
        &self.projector * values
    }

    /// Flat section `Φ c`.
    pub fn synthesize(&self, coeffs: &DVector<T>) -> DVector<T> {
        &self.eigenvectors * coeffs
    }

    /// `½ Σ (v_l² + λ_l u_l²)` for modal coefficients.
    pub fn modal_energy(&self, u: &DVector<T>, v: &DVector<T>) -> T {
        let mut e = T::zero();
        for l in 0..self.dim() {
            e += v[l] * v[l] + self.eigenvalues[l] * u[l] * u[l];
        }
        e * c::<T>(0.5)
    }

    /// `Σ (1 + λ_l^s) |c_l|²`.
    pub fn sobolev_norm_sq(&self, v: &Section<T>, s: u32) -> T {
        let coeffs = self.project(&v.to_flat());
        let mut acc = T::zero();
        for l in 0..self.dim() {
            acc += (T::one() + self.eigenvalues[l].powi(s as i32)) * coeffs[l] * coeffs[l];
        }
        acc
    }

    pub fn sobolev_norm(&self, v: &Section<T>, s: u32) -> T {
        self.sobolev_norm_sq(v, s).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ChartAtlas, FiberMetric, GridManifold};
    use std::f64::consts::PI;

    fn line(n: usize, twisted: bool) -> GridBundle<f64> {
        let atlas = if twisted {
            ChartAtlas::two_chart(
                n,
                1,
                |_| DMatrix::from_element(1, 1, 1.0),
                |_| DMatrix::from_element(1, 1, -1.0),
            )
            .unwrap()
        } else {
            ChartAtlas::trivial(n, 1)
        };
        GridBundle::new(
            GridManifold::uniform(n).unwrap(),
            atlas,
            FiberMetric::constant(n, DMatrix::identity(1, 1)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn periodic_spectrum_matches_closed_form() {
        let n = 32;
        let b = line(n, false);
        let m = assemble_and_decompose(&EllipticOperatorSpec::laplace_plus_one(n, 1), &b).unwrap();
        let dx = 2.0 * PI / n as f64;
        let mut expected: Vec<f64> = (0..n)
            .map(|k| 2.0 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()) / (dx * dx) + 1.0)
            .collect();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (l, e) in expected.iter().enumerate() {
            assert!((m.eigenvalues()[l] - e).abs() < 1e-10 * e.max(1.0));
        }
        assert!((m.eigenvalues()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn antiperiodic_spectrum_on_mobius() {
        let n = 32;
        let b = line(n, true);
        let m = assemble_and_decompose(&EllipticOperatorSpec::laplace_plus_one(n, 1), &b).unwrap();
        let dx = 2.0 * PI / n as f64;
        let mut expected: Vec<f64> = (0..n)
            .map(|k| 2.0 * (1.0 - (PI * (2 * k + 1) as f64 / n as f64).cos()) / (dx * dx) + 1.0)
            .collect();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(m.eigenvalues()[0] > 1.0);
        for (l, e) in expected.iter().enumerate() {
            assert!((m.eigenvalues()[l] - e).abs() < 1e-10 * e.max(1.0));
        }
    }

    #[test]
    fn zero_potential_is_not_positive() {
        let n = 16;
        let spec = EllipticOperatorSpec::laplace_with_potential(n, 1, |_| 0.0);
        let err = assemble_and_decompose(&spec, &line(n, false)).unwrap_err();
        assert!(matches!(err, Error::NotPositive { lambda_min } if lambda_min.abs() < 1e-8));
    }

    #[test]
    fn first_order_term_breaks_self_adjointness() {
        let n = 16;
        let mut spec = EllipticOperatorSpec::laplace_plus_one(n, 1);
        spec.a1 = vec![DMatrix::from_element(1, 1, 0.5); n];
        let err = assemble_and_decompose(&spec, &line(n, false)).unwrap_err();
        assert!(matches!(err, Error::NotSelfAdjoint { .. }));
    }

    #[test]
    fn eigensections_orthonormal_with_small_residual() {
        let n = 24;
        let b = line(n, true);
        let m = assemble_and_decompose(&EllipticOperatorSpec::laplace_plus_one(n, 1), &b).unwrap();
        let phi = m.eigenvectors();
        let gram = phi.transpose() * m.mass() * phi;
        assert!((gram - DMatrix::identity(n, n)).amax() < 1e-10);
        for l in 0..n {
            let v = phi.column(l);
            let r = m.operator() * v - v * m.eigenvalues()[l];
            assert!(r.norm() <= 1e-8 * v.norm() * m.eigenvalues()[l].max(1.0));
        }
    }

    #[test]
    fn stencil_round_trip() {
        let n = 12;
        let mut spec = EllipticOperatorSpec::<f64>::laplace_plus_one(n, 2);
        spec.a1[3] = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, -0.3, 0.4]);
        let dx = 0.3;
        let back = EllipticOperatorSpec::from_stencil(&spec.to_stencil(dx), dx);
        for i in 0..n {
            assert!((&back.a2[i] - &spec.a2[i]).norm() < 1e-12);
            assert!((&back.a1[i] - &spec.a1[i]).norm() < 1e-12);
            assert!((&back.a0[i] - &spec.a0[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn sobolev_single_modes() {
        let n = 16;
        let b = line(n, false);
        let m = assemble_and_decompose(&EllipticOperatorSpec::laplace_plus_one(n, 1), &b).unwrap();
        let phi0 = m.eigensection(0);
        for s in 0..4 {
            assert!((m.sobolev_norm_sq(&phi0, s) - 2.0).abs() < 1e-10);
        }
        let l = 5;
        let lam = m.eigenvalues()[l];
        let v = m.eigensection(l);
        assert!((m.sobolev_norm_sq(&v, 2) - (1.0 + lam * lam)).abs() < 1e-8 * lam * lam);
        assert_eq!(m.sobolev_norm_sq(&Section::zero(1, n), 3), 0.0);
    }

    #[test]
    fn single_precision_decomposition() {
        let n = 16;
        let b = GridBundle::<f32>::new(
            GridManifold::uniform(n).unwrap(),
            ChartAtlas::trivial(n, 1),
            FiberMetric::constant(n, DMatrix::identity(1, 1)).unwrap(),
        )
        .unwrap();
        let m = assemble_and_decompose(&EllipticOperatorSpec::laplace_plus_one(n, 1), &b).unwrap();
        assert!((m.eigenvalues()[0] - 1.0).abs() < 1e-4);
    }
}
