use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use super::delta::{delta_search, DeltaSequence};
use super::dictionary::{build_gram, estimate_generator, staggered_layout, EnergyCoordinates};
use super::frame::frame_and_cocycle;
use super::metric::metric_recover;
use super::operator::operator_recover;
use super::pairing::{pairing_functionals, Probe};
use super::{parse_rational, Measurer, ReconstructConfig};
use crate::error::{Error, Result};
use crate::forward::{EllipticOperatorSpec, Stencil};
use crate::geometry::{Arc, ChartAtlas, FiberMetric, TransitionTable};
use crate::oracle::{FamilyCatalog, Oracle};

/// Which public families play which part.
#[derive(Debug, Clone, PartialEq)]
pub struct Roles {
    pub dictionary: usize,
    /// `(node, family)` for families on a single node.
    pub node_probes: Vec<(usize, usize)>,
    /// `(node, radius, family)` for the larger balls of the delta search.
    pub balls: Vec<(usize, usize, usize)>,
}

impl Roles {
    /// Reads the roles off the family charts: the first circle-covering family
    /// is the dictionary, odd-length arcs are balls around their middle node.
    pub fn infer(catalog: &FamilyCatalog) -> Result<Self> {
        let n = catalog.manifold.node_count();
        let mut dictionary = None;
        let mut node_probes = Vec::new();
        let mut balls = Vec::new();
        for (k, f) in catalog.families.iter().enumerate() {
            if f.arc.covers_circle(n) {
                dictionary.get_or_insert(k);
            } else if f.arc.len == 1 {
                node_probes.push((f.arc.start % n, k));
            } else if f.arc.len % 2 == 1 {
                let radius = f.arc.len / 2;
                balls.push(((f.arc.start + radius) % n, radius, k));
            }
        }
        let dictionary = dictionary
            .ok_or_else(|| Error::InadmissibleLayout("no family covers the whole circle".into()))?;
        let mut seen: Vec<usize> = node_probes.iter().map(|p| p.0).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n {
            return Err(Error::InadmissibleLayout(format!(
                "single-node probe families cover {} of {n} nodes",
                seen.len()
            )));
        }
        Ok(Self {
            dictionary,
            node_probes,
            balls,
        })
    }
}

/// Diagnostics of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub queries: usize,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEntry {
    pub to: usize,
    pub from: usize,
    pub node: usize,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomRecord {
    pub family: usize,
    pub member: usize,
    pub shift: String,
}

/// Everything recovered, in plain data, together with the diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredModel {
    pub nodes: usize,
    pub rank: usize,
    pub spacing: f64,
    pub tau0: String,
    pub charts: Vec<(usize, usize)>,
    pub transitions: Vec<TransitionEntry>,
    pub metric: Vec<Vec<Vec<f64>>>,
    pub left: Vec<Vec<Vec<f64>>>,
    pub diag: Vec<Vec<Vec<f64>>>,
    pub right: Vec<Vec<Vec<f64>>>,
    pub class_invariant: i32,
    /// Velocity coordinates of every atom at `tau0`, per node (`d × n`).
    pub atom_velocity: Vec<Vec<Vec<f64>>>,
    pub atoms: Vec<AtomRecord>,
    pub stages: Vec<StageReport>,
    pub queries: usize,
    /// Every oracle query was consumed by the pipeline.
    pub audit: bool,
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl RecoveredModel {
    pub fn atlas(&self) -> Result<ChartAtlas<f64>> {
        let charts = self.charts.iter().map(|&(s, l)| Arc::new(s, l)).collect();
        let mut table: TransitionTable<f64> = BTreeMap::new();
        for t in &self.transitions {
            table
                .entry((t.to, t.from))
                .or_default()
                .insert(t.node, from_rows(&t.matrix)?);
        }
        ChartAtlas::new(self.nodes, self.rank, charts, table)
    }

    pub fn metric(&self) -> Result<FiberMetric<f64>> {
        FiberMetric::new(
            self.metric
                .iter()
                .map(|m| from_rows(m))
                .collect::<Result<_>>()?,
        )
    }

    pub fn stencil(&self) -> Result<Stencil<f64>> {
        let conv =
            |v: &Vec<Vec<Vec<f64>>>| v.iter().map(|m| from_rows(m)).collect::<Result<Vec<_>>>();
        Ok(Stencil {
            left: conv(&self.left)?,
            diag: conv(&self.diag)?,
            right: conv(&self.right)?,
        })
    }

    pub fn operator_spec(&self) -> Result<EllipticOperatorSpec<f64>> {
        Ok(EllipticOperatorSpec::from_stencil(
            &self.stencil()?,
            self.spacing,
        ))
    }

    pub fn atom_velocity(&self, node: usize) -> Result<DMatrix<f64>> {
        from_rows(&self.atom_velocity[node])
    }

    pub fn tau0(&self) -> Result<BigRational> {
        parse_rational(&self.tau0)
    }

    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

struct Stages<'m, 'o> {
    m: &'m Measurer<'o>,
    last: usize,
    out: Vec<StageReport>,
}

impl Stages<'_, '_> {
    fn push(&mut self, stage: &str, values: &[(&str, f64)]) {
        let now = self.m.consumed();
        self.out.push(StageReport {
            stage: stage.into(),
            queries: now - self.last,
            values: values.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        });
        self.last = now;
    }
}

fn two() -> BigRational {
    BigRational::from_integer(2.into())
}

/// Intermediate stage outputs kept for inspection and resumable runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageArtifacts {
    pub gram: GramRecord,
    pub frames: FramesRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramRecord {
    pub time: String,
    pub atoms: Vec<AtomRecord>,
    pub matrix: Vec<Vec<f64>>,
    /// Retained eigenvalues, largest first.
    pub spectrum: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartRecord {
    pub start: usize,
    pub len: usize,
    pub score: f64,
    /// Chosen frame waves in energy coordinates, one column per fiber direction.
    pub candidates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramesRecord {
    pub charts: Vec<ChartRecord>,
    pub transitions: Vec<TransitionEntry>,
    pub overlap_condition: f64,
    pub class_invariant: i32,
}

/// Runs every stage against the oracle. Nothing but the catalog and measured
/// energies is consulted.
pub fn reconstruct(
    oracle: &Oracle,
    roles: &Roles,
    cfg: &ReconstructConfig,
) -> Result<RecoveredModel> {
    reconstruct_with_artifacts(oracle, roles, cfg).map(|(m, _)| m)
}

/// [`reconstruct`], also returning the Gram and frame stage outputs.
pub fn reconstruct_with_artifacts(
    oracle: &Oracle,
    roles: &Roles,
    cfg: &ReconstructConfig,
) -> Result<(RecoveredModel, StageArtifacts)> {
    let m = Measurer::new(oracle);
    let catalog = oracle.catalog();
    let n = catalog.manifold.node_count();
    let mut st = Stages {
        m: &m,
        last: 0,
        out: Vec::new(),
    };
    let key = |path: &str, v: &str| {
        parse_rational(v).map_err(|_| Error::ConfigInvalid {
            path: format!("reconstruct.{path}"),
            message: format!("`{v}` is not a rational number"),
        })
    };
    let base = key("base_shift", &cfg.base_shift)?;
    let gap = key("gap", &cfg.gap)?;
    let h_pair = key("pairing_step", &cfg.pairing_step)?;
    let h_gen = key("generator_step", &cfg.generator_step)?;

    let first_probe = roles
        .node_probes
        .first()
        .map(|p| p.1)
        .ok_or_else(|| Error::InadmissibleLayout("no single-node probe families".into()))?;
    let pf = &catalog.families[first_probe];
    let tau0 = (&pf.start + &pf.end) / two();
    for &(_, fam) in &roles.node_probes {
        let f = &catalog.families[fam];
        if f.start != pf.start || f.end != pf.end {
            return Err(Error::InadmissibleLayout(format!(
                "probe family {fam} has a different time interval"
            )));
        }
    }

    let dfam = &catalog.families[roles.dictionary];
    let dict = staggered_layout(
        catalog,
        roles.dictionary,
        dfam.count,
        &base,
        &gap,
        tau0.clone(),
    )?;
    let gram = build_gram(&m, &dict)?;
    let coords = EnergyCoordinates::new(gram.matrix()?, cfg.rank_rtol);
    let r = coords.rank();
    if r == 0 || !r.is_multiple_of(2 * n) {
        return Err(Error::Dimension(format!(
            "Gram rank {r} is not a positive multiple of twice the node count {n}"
        )));
    }
    let rank = r / (2 * n);
    let sig = &coords.sigma;
    st.push(
        "gram",
        &[
            ("atoms", dict.len() as f64),
            ("rank", r as f64),
            ("fiber_rank", rank as f64),
            ("condition", sig[0] / sig[r - 1]),
        ],
    );

    let gen = estimate_generator(
        &m,
        &dict,
        &coords,
        &h_gen,
        cfg.richardson,
        cfg.derivative_tol,
    )?;
    st.push(
        "generator",
        &[("richardson_defect", gen.defect), ("step", gen.step)],
    );

    let mut probes = Vec::new();
    for &(node, fam) in &roles.node_probes {
        for member in 0..catalog.families[fam].count {
            probes.push(Probe {
                family: fam,
                member,
                node,
            });
        }
    }
    let table = pairing_functionals(
        &m,
        &dict,
        &coords,
        &probes,
        &h_pair,
        cfg.richardson,
        cfg.derivative_tol,
    )?;
    st.push(
        "pairing",
        &[
            ("richardson_defect", table.defect),
            ("probes", probes.len() as f64),
        ],
    );

    let mut deltas: Vec<DeltaSequence> = Vec::new();
    for &x in &cfg.delta_nodes {
        let mut levels: Vec<(usize, f64, Vec<Probe>)> = roles
            .balls
            .iter()
            .filter(|b| b.0 == x)
            .map(|&(node, radius, family)| {
                let vol = catalog
                    .manifold
                    .volume(&catalog.manifold.ball(node, radius));
                let members = (0..catalog.families[family].count)
                    .map(|member| Probe {
                        family,
                        member,
                        node,
                    })
                    .collect();
                (radius, vol, members)
            })
            .collect();
        levels.sort_by_key(|l| std::cmp::Reverse(l.0));
        let finest: Vec<Probe> = probes.iter().filter(|p| p.node == x).copied().collect();
        levels.push((0, catalog.manifold.weights()[x], finest));
        deltas.push(delta_search(
            &m,
            &dict,
            &coords,
            x,
            &levels,
            &h_pair,
            cfg.richardson,
            cfg.cauchy_tol,
        )?);
    }
    let worst = deltas.iter().map(DeltaSequence::defect).fold(0.0, f64::max);
    st.push(
        "delta",
        &[("nodes", deltas.len() as f64), ("max_cauchy_defect", worst)],
    );

    let frames = frame_and_cocycle(
        &table,
        &gen,
        n,
        rank,
        cfg.charts,
        cfg.chart_overlap,
        cfg.candidates_per_rank,
        cfg.frame_tol,
        cfg.overlap_condition_tol,
    )?;
    let min_score = frames
        .charts
        .iter()
        .map(|c| c.score)
        .fold(f64::INFINITY, f64::min);
    st.push(
        "frames",
        &[
            ("charts", frames.charts.len() as f64),
            ("min_score", min_score),
            ("overlap_condition", frames.overlap_condition),
            ("class_invariant", frames.class_invariant() as f64),
        ],
    );

    let metric = metric_recover(&frames, &gen, catalog.manifold.weights())?;
    st.push(
        "metric",
        &[
            ("kernel_dim", metric.kernel_dim as f64),
            ("kernel_gap", metric.kernel_gap),
        ],
    );

    let op = operator_recover(
        &frames,
        &gen,
        catalog.manifold.spacing(),
        cfg.jet_tol,
        cfg.fit_tol,
    )?;
    st.push(
        "operator",
        &[
            ("fit_residual", op.residual),
            ("jet_conditioning", op.jet_conditioning),
        ],
    );

    let atlas = &frames.atlas;
    let mut transitions = Vec::new();
    for (&(to, from), table) in atlas.transitions() {
        for (&node, t) in table {
            transitions.push(TransitionEntry {
                to,
                from,
                node,
                matrix: to_rows(t),
            });
        }
    }
    let atom_velocity = (0..n)
        .map(|x| to_rows(&(frames.reference_coords(x) * &coords.z)))
        .collect();
    let atoms: Vec<AtomRecord> = dict
        .atoms()
        .iter()
        .map(|a| AtomRecord {
            family: a.family,
            member: a.member,
            shift: a.shift.to_string(),
        })
        .collect();
    let artifacts = StageArtifacts {
        gram: GramRecord {
            time: gram.time.to_string(),
            atoms: atoms.clone(),
            matrix: to_rows(gram.matrix()?),
            spectrum: coords.sigma.iter().copied().collect(),
        },
        frames: FramesRecord {
            charts: frames
                .charts
                .iter()
                .map(|c| ChartRecord {
                    start: c.arc.start,
                    len: c.arc.len,
                    score: c.score,
                    candidates: to_rows(&c.candidates),
                })
                .collect(),
            transitions: transitions.clone(),
            overlap_condition: frames.overlap_condition,
            class_invariant: frames.class_invariant(),
        },
    };
    let stages = st.out;
    let model = RecoveredModel {
        nodes: n,
        rank,
        spacing: catalog.manifold.spacing(),
        tau0: tau0.to_string(),
        charts: atlas.charts().iter().map(|a| (a.start, a.len)).collect(),
        transitions,
        metric: metric.values.iter().map(to_rows).collect(),
        left: op.stencil.left.iter().map(to_rows).collect(),
        diag: op.stencil.diag.iter().map(to_rows).collect(),
        right: op.stencil.right.iter().map(to_rows).collect(),
        class_invariant: frames.class_invariant(),
        atom_velocity,
        atoms,
        stages,
        queries: m.consumed(),
        audit: m.audit(),
    };
    Ok((model, artifacts))
}
