use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{c, f, Real};

/// Time profile of a separable source on its support `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Indicator of the support.
    Boxcar,
    /// `sin²(π (s − start) / (end − start))`, vanishing with its derivative at both ends.
    Hann,
}

/// Cutoff-driven source steering the wave onto prescribed Cauchy data.
///
/// With `v` the free wave through `(a, b)` at `target` and `ψ` the quintic
/// smoothstep rising from 0 at `start` to 1 at `end`, the source is
/// `2 ∂_t v ψ' + v ψ''`, so that `ψ v` solves the driven equation.
#[derive(Debug, Clone, PartialEq)]
pub struct CauchyControl<T: Real> {
    /// Modal Cauchy data at `target`.
    pub a: DVector<T>,
    pub b: DVector<T>,
    pub frequencies: DVector<T>,
    /// Eigensections used to map modal values back to flat sections.
    pub basis: DMatrix<T>,
    pub start: T,
    pub end: T,
    pub target: T,
}

impl<T: Real> CauchyControl<T> {
    fn psi_derivatives(&self, s: T) -> (T, T) {
        let w = self.end - self.start;
        let x = (s - self.start) / w;
        if x <= T::zero() || x >= T::one() {
            return (T::zero(), T::zero());
        }
        let one = T::one();
        let d1 = c::<T>(30.0) * x * x * (one - x) * (one - x) / w;
        let d2 = c::<T>(60.0) * x * (one - x) * (one - c::<T>(2.0) * x) / (w * w);
        (d1, d2)
    }

    /// Modal source values at time `s`.
    pub fn modal_value(&self, s: T) -> DVector<T> {
        let (p1, p2) = self.psi_derivatives(s);
        let tau = s - self.target;
        DVector::from_iterator(
            self.a.len(),
            (0..self.a.len()).map(|l| {
                let w = self.frequencies[l];
                let (sn, cs) = (w * tau).sin_cos();
                let v = self.a[l] * cs + self.b[l] * sn / w;
                let dv = -self.a[l] * w * sn + self.b[l] * cs;
                c::<T>(2.0) * dv * p1 + v * p2
            }),
        )
    }
}

/// A driving term `F(x, s)` of the wave equation in flat node-reference coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceFunction<T: Real> {
    Zero,
    /// `profile(x) · window(s)`.
    Separable {
        profile: DVector<T>,
        window: Window,
        start: T,
        end: T,
    },
    /// Knot values `values[:, k]` at `start + k·step`, linear in between, zero outside.
    Sampled {
        start: T,
        step: T,
        values: DMatrix<T>,
    },
    Control(Box<CauchyControl<T>>),
    /// `Σ coef · τ_shift F` with `(τ_T F)(x, s) = F(x, s + T)`.
    Sum(Vec<(T, T, SourceFunction<T>)>),
}

impl<T: Real> SourceFunction<T> {
    /// Closed time support `[t⁻, t⁺]`, `None` for the zero source.
    pub fn support(&self) -> Option<(T, T)> {
        match self {
            Self::Zero => None,
            Self::Separable { start, end, .. } => Some((*start, *end)),
            Self::Sampled {
                start,
                step,
                values,
            } => Some((
                *start,
                *start + *step * c::<T>((values.ncols().max(1) - 1) as f64),
            )),
            Self::Control(ctl) => Some((ctl.start, ctl.end)),
            Self::Sum(terms) => terms
                .iter()
                .filter_map(|(_, shift, src)| src.support().map(|(a, b)| (a - *shift, b - *shift)))
                .reduce(|x, y| (x.0.min(y.0), x.1.max(y.1))),
        }
    }

    /// `τ_T F`.
    pub fn shifted(self, shift: T) -> Self {
        Self::Sum(vec![(T::one(), shift, self)])
    }

    /// Flat section value at time `s`; `dim` is `N·d`.
    pub fn value_at(&self, s: T, dim: usize) -> DVector<T> {
        match self {
            Self::Zero => DVector::zeros(dim),
            Self::Separable {
                profile,
                window,
                start,
                end,
            } => {
                if s < *start || s > *end {
                    return DVector::zeros(dim);
                }
                let w = match window {
                    Window::Boxcar => T::one(),
                    Window::Hann => {
                        let x = (T::pi() * (s - *start) / (*end - *start)).sin();
                        x * x
                    }
                };
                profile * w
            }
            Self::Sampled {
                start,
                step,
                values,
            } => {
                let n = values.ncols();
                let x = (s - *start) / *step;
                let last = c::<T>((n - 1) as f64);
                if x < T::zero() || x > last || n == 0 {
                    return DVector::zeros(dim);
                }
                let k = f(x.floor()) as usize;
                if k + 1 >= n {
                    return values.column(n - 1).into_owned();
                }
                let frac = x - c::<T>(k as f64);
                values.column(k) * (T::one() - frac) + values.column(k + 1) * frac
            }
            Self::Control(ctl) => &ctl.basis * ctl.modal_value(s),
            Self::Sum(terms) => terms
                .iter()
                .fold(DVector::zeros(dim), |acc, (coef, shift, src)| {
                    acc + src.value_at(s + *shift, dim) * *coef
                }),
        }
    }

    /// Applies a linear map to the spatial values (used for changes of fiber frame).
    pub fn map_values(&self, map: &DMatrix<T>) -> Result<Self> {
        Ok(match self {
            Self::Zero => Self::Zero,
            Self::Separable {
                profile,
                window,
                start,
                end,
            } => Self::Separable {
                profile: map * profile,
                window: *window,
                start: *start,
                end: *end,
            },
            Self::Sampled {
                start,
                step,
                values,
            } => Self::Sampled {
                start: *start,
                step: *step,
                values: map * values,
            },
            Self::Control(_) => {
                return Err(Error::Dimension(
                    "control sources are tied to one spectral model".into(),
                ));
            }
            Self::Sum(terms) => Self::Sum(
                terms
                    .iter()
                    .map(|(coef, shift, src)| Ok((*coef, *shift, src.map_values(map)?)))
                    .collect::<Result<_>>()?,
            ),
        })
    }
}

/// `sin x / x`.
pub(crate) fn sinc<T: Real>(x: T) -> T {
    if x.abs() < c(1e-4) {
        let x2 = x * x;
        T::one() - x2 / c(6.0) + x2 * x2 / c(120.0)
    } else {
        x.sin() / x
    }
}

/// `(sin x − x cos x) / x³`.
pub(crate) fn sinc3<T: Real>(x: T) -> T {
    if x.abs() < c(2e-2) {
        let x2 = x * x;
        T::one() / c(3.0) - x2 / c(30.0) + x2 * x2 / c(840.0) - x2 * x2 * x2 / c(45360.0)
    } else {
        (x.sin() - x * x.cos()) / (x * x * x)
    }
}

/// `∫_a^b e^{iασ} dσ` as `(re, im)`.
pub(crate) fn exp_integral<T: Real>(alpha: T, a: T, b: T) -> (T, T) {
    let half = c::<T>(0.5);
    let len = b - a;
    let mid = (a + b) * half;
    let mag = len * sinc(alpha * len * half);
    let (s, co) = (alpha * mid).sin_cos();
    (mag * co, mag * s)
}

/// `∫_a^b F(σ) e^{iωσ} dσ` for `F` linear with end values `fa`, `fb`.
pub(crate) fn linear_segment<T: Real>(omega: T, a: T, b: T, fa: T, fb: T) -> (T, T) {
    let half = c::<T>(0.5);
    let hw = (b - a) * half;
    if hw <= T::zero() {
        return (T::zero(), T::zero());
    }
    let mid = (a + b) * half;
    let fm = (fa + fb) * half;
    let slope = (fb - fa) / (b - a);
    let x = omega * hw;
    let two = c::<T>(2.0);
    let re = fm * two * hw * sinc(x);
    let im = slope * two * hw * hw * hw * omega * sinc3(x);
    let (s, co) = (omega * mid).sin_cos();
    (re * co - im * s, re * s + im * co)
}

/// `∫_a^b w(σ) e^{iωσ} dσ` for a window centred at `σ = 0` with width `width`.
pub(crate) fn window_integral<T: Real>(window: Window, omega: T, width: T, a: T, b: T) -> (T, T) {
    match window {
        Window::Boxcar => exp_integral(omega, a, b),
        Window::Hann => {
            let k = c::<T>(2.0) * T::pi() / width;
            let (r0, i0) = exp_integral(omega, a, b);
            let (r1, i1) = exp_integral(omega + k, a, b);
            let (r2, i2) = exp_integral(omega - k, a, b);
            let h = c::<T>(0.5);
            let q = c::<T>(0.25);
            (h * r0 + q * (r1 + r2), h * i0 + q * (i1 + i2))
        }
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute<Fn_: Fn(f64) -> f64>(g: Fn_, omega: f64, a: f64, b: f64) -> (f64, f64) {
        let (x, w) = gauss_legendre(20);
        let panels = 64;
        let h = (b - a) / panels as f64;
        let mut acc = (0.0, 0.0);
        for p in 0..panels {
            let lo = a + p as f64 * h;
            for k in 0..x.len() {
                let s = lo + 0.5 * h * (x[k] + 1.0);
                let wt = 0.5 * h * w[k];
                acc.0 += wt * g(s) * (omega * s).cos();
                acc.1 += wt * g(s) * (omega * s).sin();
            }
        }
        acc
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((s - 2.0 / 15.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn linear_segment_matches_quadrature() {
        for &omega in &[1e-7, 0.3, 1.0, 17.0] {
            let (a, b, fa, fb) = (-0.4, 0.9, 1.5, -2.0);
            let got = linear_segment(omega, a, b, fa, fb);
            let want = brute(|s| fa + (fb - fa) * (s - a) / (b - a), omega, a, b);
            assert!(
                (got.0 - want.0).abs() < 1e-13 && (got.1 - want.1).abs() < 1e-13,
                "{omega}"
            );
        }
    }

    #[test]
    fn hann_window_matches_quadrature() {
        let width = 0.7;
        for &omega in &[0.5, 2.0 * std::f64::consts::PI / width, 9.0] {
            let got = window_integral(Window::Hann, omega, width, -0.35, 0.1);
            let want = brute(
                |s| 0.5 * (1.0 + (2.0 * std::f64::consts::PI * s / width).cos()),
                omega,
                -0.35,
                0.1,
            );
            assert!((got.0 - want.0).abs() < 1e-13 && (got.1 - want.1).abs() < 1e-13);
        }
    }

    #[test]
    fn sampled_value_is_piecewise_linear_and_compact() {
        let values = DMatrix::<f64>::from_row_slice(1, 3, &[1.0, 3.0, -1.0]);
        let src = SourceFunction::Sampled {
            start: 0.0,
            step: 0.5,
            values,
        };
        assert_eq!(src.value_at(-0.01, 1)[0], 0.0);
        assert!((src.value_at(0.25, 1)[0] - 2.0).abs() < 1e-15);
        assert!((src.value_at(1.0, 1)[0] + 1.0).abs() < 1e-15);
        assert_eq!(src.value_at(1.01, 1)[0], 0.0);
        assert_eq!(src.support(), Some((0.0, 1.0)));
        let shifted = src.shifted(2.0);
        assert_eq!(shifted.support(), Some((-2.0, -1.0)));
        assert!((shifted.value_at(-1.75, 1)[0] - 2.0).abs() < 1e-15);
    }
}
