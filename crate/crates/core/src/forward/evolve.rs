use nalgebra::{DMatrix, DVector};

use super::operator::SpectralModel;
use super::source::{
    gauss_legendre, linear_segment, window_integral, CauchyControl, SourceFunction, Window,
};
use crate::error::{Error, Result};
use crate::geometry::Section;
use crate::scalar::{c, f, Real};

/// Wave field and its time derivative at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CauchyState<T: Real> {
    pub t: T,
    pub u: Section<T>,
    pub u_t: Section<T>,
}

/// A source projected onto the eigenbasis of one model, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub enum ModalSource<T: Real> {
    Zero,
    Separable {
        coeffs: DVector<T>,
        window: Window,
        start: T,
        end: T,
    },
    Sampled {
        start: T,
        step: T,
        /// Modal knot values, modes × knots.
        coeffs: DMatrix<T>,
        /// Cumulative `∫ F_l cos(ω_l σ)` and `∫ F_l sin(ω_l σ)` up to each knot,
        /// with `σ` measured from the support centre.
        prefix_cos: DMatrix<T>,
        prefix_sin: DMatrix<T>,
    },
    Quadrature(Box<CauchyControl<T>>),
    Sum(Vec<(T, T, ModalSource<T>)>),
}

fn finite<T: Real>(it: impl IntoIterator<Item = T>, what: &str) -> Result<()> {
    if it.into_iter().all(|x| f(x).is_finite()) {
        Ok(())
    } else {
        Err(Error::QuadratureFailure(format!("non-finite {what}")))
    }
}

impl<T: Real> ModalSource<T> {
    pub fn new(model: &SpectralModel<T>, src: &SourceFunction<T>) -> Result<Self> {
        Ok(match src {
            SourceFunction::Zero => Self::Zero,
            SourceFunction::Separable {
                profile,
                window,
                start,
                end,
            } => {
                let coeffs = model.project(profile);
                finite(coeffs.iter().copied(), "source profile")?;
                Self::Separable {
                    coeffs,
                    window: *window,
                    start: *start,
                    end: *end,
                }
            }
            SourceFunction::Sampled {
                start,
                step,
                values,
            } => {
                let coeffs = model.project_columns(values);
                finite(coeffs.iter().copied(), "source samples")?;
                let (modes, knots) = coeffs.shape();
                let center = *start + *step * c::<T>((knots.max(1) - 1) as f64 * 0.5);
                let mut prefix_cos = DMatrix::zeros(modes, knots);
                let mut prefix_sin = DMatrix::zeros(modes, knots);
                for l in 0..modes {
                    let w = model.frequencies()[l];
                    let (mut acc_c, mut acc_s) = (T::zero(), T::zero());
                    for k in 1..knots {
                        let a = *start + *step * c::<T>((k - 1) as f64) - center;
                        let b = a + *step;
                        let (ci, si) = linear_segment(w, a, b, coeffs[(l, k - 1)], coeffs[(l, k)]);
                        acc_c += ci;
                        acc_s += si;
                        prefix_cos[(l, k)] = acc_c;
                        prefix_sin[(l, k)] = acc_s;
                    }
                }
                Self::Sampled {
                    start: *start,
                    step: *step,
                    coeffs,
                    prefix_cos,
                    prefix_sin,
                }
            }
            SourceFunction::Control(ctl) => {
                finite(ctl.a.iter().chain(ctl.b.iter()).copied(), "Cauchy data")?;
                Self::Quadrature(ctl.clone())
            }
            SourceFunction::Sum(terms) => Self::Sum(
                terms
                    .iter()
                    .map(|(coef, shift, s)| Ok((*coef, *shift, Self::new(model, s)?)))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    /// Modal `(u_l(t), ∂_t u_l(t))`.
    pub fn state(&self, model: &SpectralModel<T>, t: T) -> Result<(DVector<T>, DVector<T>)> {
        let n = model.dim();
        let omega = model.frequencies();
        let zero = || (DVector::zeros(n), DVector::zeros(n));
        match self {
            Self::Zero => Ok(zero()),
            Self::Separable {
                coeffs,
                window,
                start,
                end,
            } => {
                if t <= *start {
                    return Ok(zero());
                }
                let half = c::<T>(0.5);
                let center = (*start + *end) * half;
                let width = *end - *start;
                let upper = if t < *end { t } else { *end };
                let (a, b) = (*start - center, upper - center);
                let mut u = DVector::zeros(n);
                let mut v = DVector::zeros(n);
                for l in 0..n {
                    let (ci, si) = window_integral(*window, omega[l], width, a, b);
                    let (ul, vl) = rotate(omega[l], t - center, ci * coeffs[l], si * coeffs[l]);
                    u[l] = ul;
                    v[l] = vl;
                }
                Ok((u, v))
            }
            Self::Sampled {
                start,
                step,
                coeffs,
                prefix_cos,
                prefix_sin,
            } => {
                let knots = coeffs.ncols();
                if t <= *start || knots < 2 {
                    return Ok(zero());
                }
                let center = *start + *step * c::<T>((knots - 1) as f64 * 0.5);
                let x = (t - *start) / *step;
                let seg = f(x.floor()) as usize;
                let mut u = DVector::zeros(n);
                let mut v = DVector::zeros(n);
                for l in 0..n {
                    let (cl, sl) = if seg >= knots - 1 {
                        (prefix_cos[(l, knots - 1)], prefix_sin[(l, knots - 1)])
                    } else {
                        let a = *start + *step * c::<T>(seg as f64);
                        let frac = x - c::<T>(seg as f64);
                        let fa = coeffs[(l, seg)];
                        let ft = fa + (coeffs[(l, seg + 1)] - fa) * frac;
                        let (ci, si) = linear_segment(omega[l], a - center, t - center, fa, ft);
                        (prefix_cos[(l, seg)] + ci, prefix_sin[(l, seg)] + si)
                    };
                    let (ul, vl) = rotate(omega[l], t - center, cl, sl);
                    u[l] = ul;
                    v[l] = vl;
                }
                Ok((u, v))
            }
            Self::Quadrature(ctl) => quadrature_state(model, ctl, t),
            Self::Sum(terms) => {
                let (mut u, mut v) = zero();
                for (coef, shift, s) in terms {
                    let (du, dv) = s.state(model, t + *shift)?;
                    u += du * *coef;
                    v += dv * *coef;
                }
                Ok((u, v))
            }
        }
    }

    pub fn energy(&self, model: &SpectralModel<T>, t: T) -> Result<T> {
        let (u, v) = self.state(model, t)?;
        Ok(model.modal_energy(&u, &v))
    }
}

/// Turns the centred integrals `C = ∫F cos ωσ`, `S = ∫F sin ωσ` into `(u, ∂_t u)` at
/// centred time `tau`.
#[inline]
fn rotate<T: Real>(omega: T, tau: T, cs: T, sn: T) -> (T, T) {
    let (s, co) = (omega * tau).sin_cos();
    ((s * cs - co * sn) / omega, co * cs + s * sn)
}

fn quadrature_state<T: Real>(
    model: &SpectralModel<T>,
    ctl: &CauchyControl<T>,
    t: T,
) -> Result<(DVector<T>, DVector<T>)> {
    let n = model.dim();
    let mut u = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    if t <= ctl.start {
        return Ok((u, v));
    }
    let upper = if t < ctl.end { t } else { ctl.end };
    let omega = model.frequencies();
    let wmax = omega
        .iter()
        .fold(T::zero(), |a, &b| if b > a { b } else { a });
    let len = f(upper - ctl.start);
    let panels = ((len * f(wmax) * 2.0).ceil() as usize).max(16);
    let (gx, gw) = gauss_legendre(16);
    let h = (upper - ctl.start) / c::<T>(panels as f64);
    let half = c::<T>(0.5);
    for p in 0..panels {
        let lo = ctl.start + h * c::<T>(p as f64);
        for k in 0..gx.len() {
            let s = lo + h * half * (c::<T>(gx[k]) + T::one());
            let wt = h * half * c::<T>(gw[k]);
            let modal = model.project(&(&ctl.basis * ctl.modal_value(s)));
            finite(modal.iter().copied(), "control integrand")?;
            for l in 0..n {
                let (sn, cs) = (omega[l] * (t - s)).sin_cos();
                u[l] += wt * sn / omega[l] * modal[l];
                v[l] += wt * cs * modal[l];
            }
        }
    }
    Ok((u, v))
}

/// Exact Duhamel solution of `(∂_t² + A) u = F` with zero data in the past.
pub fn duhamel_evolve<T: Real>(
    model: &SpectralModel<T>,
    src: &SourceFunction<T>,
    t: T,
) -> Result<CauchyState<T>> {
    let (u, v) = ModalSource::new(model, src)?.state(model, t)?;
    let d = model.bundle.rank();
    Ok(CauchyState {
        t,
        u: Section::from_flat(&model.synthesize(&u), d),
        u_t: Section::from_flat(&model.synthesize(&v), d),
    })
}

/// `E(F, t) = ½(‖∂_t u‖² + ⟨A u, u⟩)`.
pub fn energy<T: Real>(model: &SpectralModel<T>, src: &SourceFunction<T>, t: T) -> Result<T> {
    ModalSource::new(model, src)?.energy(model, t)
}

/// Modal free wave through modal data `(a, b)` at time `t0`, evaluated at `t`.
pub fn free_wave<T: Real>(
    model: &SpectralModel<T>,
    a: &DVector<T>,
    b: &DVector<T>,
    t0: T,
    t: T,
) -> (DVector<T>, DVector<T>) {
    let omega = model.frequencies();
    let n = model.dim();
    let mut u = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    for l in 0..n {
        let (s, co) = (omega[l] * (t - t0)).sin_cos();
        u[l] = a[l] * co + b[l] * s / omega[l];
        v[l] = -a[l] * omega[l] * s + b[l] * co;
    }
    (u, v)
}

/// Source supported in `[start, end]` whose wave has Cauchy data `(a, b)` at `target`.
pub fn source_for_cauchy_data<T: Real>(
    model: &SpectralModel<T>,
    a: &Section<T>,
    b: &Section<T>,
    start: T,
    end: T,
    target: T,
) -> Result<SourceFunction<T>> {
    if !(start < end && end <= target) {
        return Err(Error::InadmissibleTime(
            "control interval must end before the target time".into(),
        ));
    }
    let am = model.project(&a.to_flat());
    let bm = model.project(&b.to_flat());
    if am.iter().chain(bm.iter()).all(|x| *x == T::zero()) {
        return Ok(SourceFunction::Zero);
    }
    Ok(SourceFunction::Control(Box::new(CauchyControl {
        a: am,
        b: bm,
        frequencies: model.frequencies().clone(),
        basis: model.eigenvectors().clone(),
        start,
        end,
        target,
    })))
}
