//! Gauge-invariant judgement of a reconstruction: spectrum, class,
//! measurement equivalence, and an explicit gauge map. This side may read the
//! hidden model.

use std::f64::consts::TAU;
use std::sync::Arc as Shared;

use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;
use num_traits::ToPrimitive;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ModalSource, SourceFunction, SpectralModel};
use crate::geometry::{ChartAtlas, GridBundle, GridManifold};
use crate::linalg::{block_diag, pseudo_inverse};
use crate::oracle::{AdmissibleQuery, FamilyCatalog, HiddenWorld, QueryItem};
use crate::reconstruct::{parse_rational, RecoveredModel};
use crate::sources::{member_rng, BasicFamily};

fn invalid(e: Error) -> Error {
    match e {
        Error::RebuiltModelInvalid(_) => e,
        other => Error::RebuiltModelInvalid(other.to_string()),
    }
}

/// Assembles and decomposes the recovered model on the recovered bundle.
pub fn rebuild(model: &RecoveredModel, asymmetry_tol: f64) -> Result<SpectralModel<f64>> {
    let bundle = GridBundle::new(
        GridManifold::uniform(model.nodes).map_err(invalid)?,
        model.atlas().map_err(invalid)?,
        model.metric().map_err(invalid)?,
    )
    .map_err(invalid)?;
    SpectralModel::new(
        &model.operator_spec().map_err(invalid)?,
        &bundle,
        asymmetry_tol,
    )
    .map_err(invalid)
}

/// Largest relative deviation among the first `l` sorted eigenvalues.
pub fn spectrum_compare(
    hidden: &SpectralModel<f64>,
    rebuilt: &SpectralModel<f64>,
    l: usize,
) -> f64 {
    let (a, b) = (hidden.eigenvalues(), rebuilt.eigenvalues());
    (0..l.min(a.len()).min(b.len()))
        .map(|k| ((a[k] - b[k]) / a[k].abs().max(f64::MIN_POSITIVE)).abs())
        .fold(0.0, f64::max)
}

pub fn class_invariant(atlas: &ChartAtlas<f64>) -> i32 {
    atlas.loop_determinant_sign()
}

/// Node-wise map from recovered to hidden fiber coordinates, `u = Φ ũ`.
#[derive(Debug, Clone)]
pub struct GaugeFit {
    pub phi: Vec<DMatrix<f64>>,
    /// `‖Φ⁻¹ A Φ − Ã‖ / ‖Ã‖` on the assembled operators.
    pub conjugation_residual: f64,
    /// `max_x ‖Φᵀ h Φ − ĥ‖ / ‖ĥ‖`.
    pub metric_defect: f64,
}

impl GaugeFit {
    pub fn identity(nodes: usize, rank: usize) -> Self {
        Self {
            phi: vec![DMatrix::identity(rank, rank); nodes],
            conjugation_residual: 0.0,
            metric_defect: 0.0,
        }
    }

    fn flat_inverse(&self) -> Result<DMatrix<f64>> {
        let inv = self
            .phi
            .iter()
            .enumerate()
            .map(|(x, p)| {
                p.clone().try_inverse().ok_or_else(|| {
                    Error::RebuiltModelInvalid(format!("singular gauge at node {x}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(block_diag(&inv))
    }
}

/// Hidden velocity of every dictionary atom at `tau0`, per node (`d × n`).
fn hidden_atom_velocity(world: &HiddenWorld, model: &RecoveredModel) -> Result<Vec<DMatrix<f64>>> {
    let m = &world.model;
    let (n, d) = (m.bundle.node_count(), m.bundle.rank());
    let tau0 = model.tau0()?;
    let mut out = vec![DMatrix::zeros(d, model.atoms.len()); n];
    for (j, a) in model.atoms.iter().enumerate() {
        let item = QueryItem::new(a.family, a.member, parse_rational(&a.shift)?);
        let (_, v) = world.state(&[item], &tau0)?;
        let flat = m.synthesize(&v);
        for (x, block) in out.iter_mut().enumerate() {
            for c in 0..d {
                block[(c, j)] = flat[x * d + c];
            }
        }
    }
    Ok(out)
}

/// Fits `Φ(x)` from the atom velocities in both coordinate systems, after
/// checking that the classes agree.
pub fn gauge_fit(
    world: &HiddenWorld,
    model: &RecoveredModel,
    rebuilt: &SpectralModel<f64>,
) -> Result<GaugeFit> {
    let hidden = &world.model;
    let hc = hidden.bundle.class_invariant();
    let rc = rebuilt.bundle.class_invariant();
    if hc != rc {
        return Err(Error::ClassMismatch {
            hidden: hc,
            rebuilt: rc,
        });
    }
    if hidden.bundle.rank() != model.rank || hidden.bundle.node_count() != model.nodes {
        return Err(Error::Dimension(format!(
            "hidden bundle {}x{} vs recovered {}x{}",
            hidden.bundle.node_count(),
            hidden.bundle.rank(),
            model.nodes,
            model.rank
        )));
    }
    let velocity = hidden_atom_velocity(world, model)?;
    let phi = (0..model.nodes)
        .map(|x| Ok(&velocity[x] * pseudo_inverse(&model.atom_velocity(x)?, 1e-12)))
        .collect::<Result<Vec<_>>>()?;
    let mut fit = GaugeFit {
        phi,
        conjugation_residual: 0.0,
        metric_defect: 0.0,
    };
    let p = block_diag(&fit.phi);
    let pinv = fit.flat_inverse()?;
    let conj = &pinv * hidden.operator() * &p;
    fit.conjugation_residual = (&conj - rebuilt.operator()).norm() / rebuilt.operator().norm();
    fit.metric_defect = (0..model.nodes)
        .map(|x| {
            let h = hidden.bundle.metric.at(x);
            let hh = rebuilt.bundle.metric.at(x);
            (fit.phi[x].transpose() * h * &fit.phi[x] - hh).norm() / hh.norm()
        })
        .fold(0.0, f64::max);
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub errors: Vec<f64>,
    pub median: f64,
    pub max: f64,
}

fn summarize(errors: Vec<f64>) -> Equivalence {
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let median = match k {
        0 => 0.0,
        _ if k % 2 == 1 => sorted[k / 2],
        _ => 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]),
    };
    Equivalence {
        max: sorted.last().copied().unwrap_or(0.0),
        median,
        errors,
    }
}

/// Relative energy errors of the rebuilt model, driven by `Φ⁻¹ F`, against
/// the hidden model on each query.
pub fn measurement_equivalence(
    world: &HiddenWorld,
    rebuilt: &SpectralModel<f64>,
    fit: &GaugeFit,
    queries: &[AdmissibleQuery],
) -> Result<Equivalence> {
    use rayon::prelude::*;
    let map = fit.flat_inverse()?;
    let mapped: Vec<Vec<Option<ModalSource<f64>>>> = {
        let mut used = vec![vec![false; 0]; world.families.len()];
        for (f, fam) in world.families.iter().enumerate() {
            used[f] = vec![false; fam.len()];
        }
        for q in queries {
            for it in &q.items {
                *used
                    .get_mut(it.family)
                    .and_then(|v| v.get_mut(it.member))
                    .ok_or(Error::UnknownMember {
                        family: it.family,
                        member: it.member,
                    })? = true;
            }
        }
        world
            .families
            .iter()
            .enumerate()
            .map(|(f, fam)| {
                fam.members
                    .iter()
                    .enumerate()
                    .map(|(k, src)| {
                        if used[f][k] {
                            Ok(Some(ModalSource::new(rebuilt, &src.map_values(&map)?)?))
                        } else {
                            Ok(None)
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
    };
    let errors = queries
        .par_iter()
        .map(|q| {
            let e = world.energy(&q.items, &q.time)?;
            let dim = rebuilt.dim();
            let (mut u, mut v) = (DVector::zeros(dim), DVector::zeros(dim));
            for it in &q.items {
                let src = mapped[it.family][it.member]
                    .as_ref()
                    .expect("marked as used");
                let t = (&q.time + &it.shift).to_f64().unwrap_or(f64::NAN);
                let (du, dv) = src.state(rebuilt, t)?;
                u += du;
                v += dv;
            }
            let er = rebuilt.modal_energy(&u, &v);
            Ok(((er - e) / e.abs().max(f64::MIN_POSITIVE)).abs())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(errors))
}

fn random_rational(rng: &mut impl Rng, lo: f64, hi: f64, den: i64) -> BigRational {
    let k = rng.random_range((lo * den as f64).ceil() as i64..=(hi * den as f64).floor() as i64);
    BigRational::new(k.into(), den.into())
}

/// Seeded admissible queries of one to three items from any family. The
/// first item is always active before the evaluation time, so every energy
/// is positive.
pub fn held_out_queries(
    catalog: &FamilyCatalog,
    count: usize,
    seed: u64,
    horizon: f64,
) -> Vec<AdmissibleQuery> {
    let mut rng = member_rng(seed, usize::MAX >> 1);
    let t_min = catalog.t_min.to_f64().unwrap_or(0.0);
    let origin = catalog.origin.to_f64().unwrap_or(f64::NEG_INFINITY);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let t = random_rational(&mut rng, t_min, t_min + horizon, 64);
        let tf = t.to_f64().unwrap_or(0.0);
        let k = rng.random_range(1..=3usize);
        let mut items: Vec<QueryItem> = Vec::with_capacity(k);
        for slot in 0..k {
            for _ in 0..50 {
                let family = rng.random_range(0..catalog.families.len());
                let fam = &catalog.families[family];
                let member = rng.random_range(0..fam.count);
                let start = fam.start.to_f64().unwrap_or(0.0);
                // the first item starts at least 0.05 before t; later ones anywhere admissible
                let lo = if slot == 0 {
                    (start - tf + 0.05).max(0.0)
                } else {
                    0.0
                };
                let hi = (start - origin - 0.5).min(lo + 12.0);
                if hi <= lo {
                    continue;
                }
                let shift = random_rational(&mut rng, lo, hi, 64);
                let mut trial = items.clone();
                trial.push(QueryItem::new(family, member, shift));
                if AdmissibleQuery::new(trial.clone(), t.clone())
                    .validate(catalog)
                    .is_ok()
                {
                    items = trial;
                    break;
                }
            }
        }
        if !items.is_empty() {
            out.push(AdmissibleQuery::new(items, t));
        }
    }
    out
}

/// A smooth, node-wise invertible gauge: `exp(a sin(x + φ₁) B₁ + b cos(x + φ₂) B₂)`.
pub fn random_smooth_gauge(nodes: usize, rank: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let mut rng = member_rng(seed, 0);
    let mut draw = || DMatrix::from_fn(rank, rank, |_, _| rng.random_range(-1.0..1.0));
    let (b1, b2) = (draw(), draw());
    let mut rng = member_rng(seed, 1);
    let (p1, p2): (f64, f64) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    (0..nodes)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / nodes as f64;
            (&b1 * (0.4 * (x + p1).sin()) + &b2 * (0.3 * (x + p2).cos())).exp()
        })
        .collect()
}

/// The same hidden world in another frame: `u = g ũ`, families `g⁻¹ F`.
pub fn conjugate_world(world: &HiddenWorld, g: &[DMatrix<f64>]) -> Result<HiddenWorld> {
    let m = &world.model;
    let bundle = m.bundle.gauge_transform(g)?;
    let spec = m.spec.gauge_transform(&m.bundle, g)?;
    let model = SpectralModel::new(&spec, &bundle, crate::forward::SELF_ADJOINT_TOL)?;
    let inv = g
        .iter()
        .map(|x| {
            x.clone()
                .try_inverse()
                .ok_or_else(|| Error::InvalidBundle("singular gauge".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let map = block_diag(&inv);
    let families = world
        .families
        .iter()
        .map(|fam| {
            let members = fam
                .members
                .iter()
                .map(|s| s.map_values(&map))
                .collect::<Result<Vec<SourceFunction<f64>>>>()?;
            BasicFamily::from_members(
                &bundle,
                fam.arc,
                fam.start.clone(),
                fam.end.clone(),
                members,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    HiddenWorld::new(model, families)
}

/// One acceptance row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionRow {
    pub id: String,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub scenario: String,
    pub hidden_class: i32,
    pub rebuilt_class: i32,
    pub hidden_eigenvalues: Vec<f64>,
    pub rebuilt_eigenvalues: Vec<f64>,
    pub spectrum_deviation: f64,
    pub measurement: Equivalence,
    pub metric_defect: f64,
    pub metric_spd: bool,
    pub conjugation_residual: f64,
    pub rebuilt_asymmetry: f64,
    /// Changes of the spectrum and measurement outputs when the hidden model
    /// is conjugated by a random smooth gauge.
    pub judge_spectrum_shift: f64,
    pub judge_measurement_shift: f64,
    pub queries: usize,
    pub audit: bool,
    pub rows: Vec<CriterionRow>,
}

impl ReconstructionReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scenario,criterion,name,value,threshold,pass\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.12e},{:.12e},{}\n",
                self.scenario, r.id, r.name, r.value, r.threshold, r.pass
            ));
        }
        s
    }
}

/// Thresholds and sample sizes of the judgement.
#[derive(Debug, Clone, PartialEq)]
pub struct Judgement {
    pub held_out: usize,
    pub eigenvalues: usize,
    pub horizon: f64,
    pub seed: u64,
    pub median_tol: f64,
    pub max_tol: f64,
    pub spectrum_tol: f64,
    pub metric_tol: f64,
    pub asymmetry_tol: f64,
}

fn row(id: &str, name: &str, value: f64, threshold: f64, pass: bool) -> CriterionRow {
    CriterionRow {
        id: id.into(),
        name: name.into(),
        value,
        threshold,
        pass,
    }
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    m.clone().cholesky().is_some()
}

/// Runs every gauge-invariant check for one reconstruction.
pub fn judge(
    scenario: &str,
    world: &Shared<HiddenWorld>,
    catalog: &FamilyCatalog,
    model: &RecoveredModel,
    j: &Judgement,
) -> Result<ReconstructionReport> {
    let rebuilt = rebuild(model, j.asymmetry_tol)?;
    let hidden = &world.model;
    let spectrum = spectrum_compare(hidden, &rebuilt, j.eigenvalues);
    let fit = gauge_fit(world, model, &rebuilt)?;
    let queries = held_out_queries(catalog, j.held_out, j.seed, j.horizon);
    let eq = measurement_equivalence(world, &rebuilt, &fit, &queries)?;

    let g = random_smooth_gauge(model.nodes, model.rank, j.seed ^ 0x5EED);
    let gw = conjugate_world(world, &g)?;
    let g_spectrum = spectrum_compare(&gw.model, &rebuilt, j.eigenvalues);
    let g_fit = gauge_fit(&gw, model, &rebuilt)?;
    let g_eq = measurement_equivalence(&gw, &rebuilt, &g_fit, &queries)?;
    let judge_spectrum_shift = (g_spectrum - spectrum).abs();
    let judge_measurement_shift = eq
        .errors
        .iter()
        .zip(&g_eq.errors)
        .map(|(a, b)| (a - b).abs())
        .fold(
            (g_eq.median - eq.median)
                .abs()
                .max((g_eq.max - eq.max).abs()),
            f64::max,
        );

    let metric_spd = (0..model.nodes).all(|x| is_spd(rebuilt.bundle.metric.at(x)));
    let hc = hidden.bundle.class_invariant();
    let rc = class_invariant(&rebuilt.bundle.atlas);
    let l = j.eigenvalues.min(hidden.dim());
    let rows = vec![
        row(
            "5",
            "class_invariant",
            f64::from(rc),
            f64::from(hc),
            rc == hc,
        ),
        row(
            "6",
            "spectrum_max_relative_deviation",
            spectrum,
            j.spectrum_tol,
            spectrum <= j.spectrum_tol,
        ),
        row(
            "7a",
            "measurement_median_relative_error",
            eq.median,
            j.median_tol,
            eq.median <= j.median_tol,
        ),
        row(
            "7b",
            "measurement_max_relative_error",
            eq.max,
            j.max_tol,
            eq.max <= j.max_tol,
        ),
        row(
            "8a",
            "metric_spd",
            f64::from(u8::from(metric_spd)),
            1.0,
            metric_spd,
        ),
        row(
            "8b",
            "metric_isometry_defect",
            fit.metric_defect,
            j.metric_tol,
            fit.metric_defect <= j.metric_tol,
        ),
        row(
            "10a",
            "judge_spectrum_shift",
            judge_spectrum_shift,
            1e-9,
            judge_spectrum_shift <= 1e-9,
        ),
        row(
            "10b",
            "judge_measurement_shift",
            judge_measurement_shift,
            1e-9,
            judge_measurement_shift <= 1e-9,
        ),
        row(
            "audit",
            "oracle_firewall_audit",
            f64::from(u8::from(model.audit)),
            1.0,
            model.audit,
        ),
    ];
    Ok(ReconstructionReport {
        scenario: scenario.into(),
        hidden_class: hc,
        rebuilt_class: rc,
        hidden_eigenvalues: hidden.eigenvalues().iter().take(l).copied().collect(),
        rebuilt_eigenvalues: rebuilt.eigenvalues().iter().take(l).copied().collect(),
        spectrum_deviation: spectrum,
        measurement: eq,
        metric_defect: fit.metric_defect,
        metric_spd,
        conjugation_residual: fit.conjugation_residual,
        rebuilt_asymmetry: rebuilt.asymmetry(),
        judge_spectrum_shift,
        judge_measurement_shift,
        queries: model.queries,
        audit: model.audit,
        rows,
    })
}
