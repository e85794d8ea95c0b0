//! Versioned scenario files: hidden bundle, operator, families, oracle and
//! reconstruction settings, with `key.path=value` overrides.

use std::path::Path;
use std::sync::Arc as Shared;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{EllipticOperatorSpec, SpectralModel, SELF_ADJOINT_TOL};
use crate::geometry::{rotation, Arc, ChartAtlas, FiberMetric, GridBundle, GridManifold};
use crate::oracle::{FamilyCatalog, HiddenWorld, Oracle, OracleConfig};
use crate::reconstruct::{parse_rational, ReconstructConfig};
use crate::sources::{sample_family, CovarianceSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    Trivial,
    /// Two charts, one transition `diag(−1, 1, …)`.
    Mobius,
    /// Two charts, one transition `−Id`.
    Flip,
    /// Rank 2, two charts with node-dependent rotations.
    Rotating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Identity,
    /// Constant `diag(metric_diag)`.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleConfig {
    pub nodes: usize,
    #[serde(default = "one")]
    pub rank: usize,
    #[serde(default = "trivial")]
    pub kind: BundleKind,
    /// Base rotation angle of the rotating transitions.
    #[serde(default = "default_twist")]
    pub twist: f64,
    #[serde(default = "identity")]
    pub metric: MetricKind,
    #[serde(default)]
    pub metric_diag: Vec<f64>,
}

fn one() -> usize {
    1
}
fn trivial() -> BundleKind {
    BundleKind::Trivial
}
fn identity() -> MetricKind {
    MetricKind::Identity
}
fn default_twist() -> f64 {
    0.6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConfig {
    /// `A = −∂²ₓ + q(x)` with `q(x) = 1 + potential · cos x`.
    pub potential: f64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self { potential: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamiliesConfig {
    /// Dictionary members; `None` means `⌈1.25 · 2Nd⌉`.
    pub dictionary_count: Option<usize>,
    pub dictionary_start: String,
    pub dictionary_width: String,
    pub probe_start: String,
    pub probe_width: String,
    /// Members per single-node probe family; `None` means `d + 1`.
    pub probes_per_node: Option<usize>,
    /// Nodes carrying larger ball families for the delta search.
    pub ball_nodes: Vec<usize>,
    pub ball_radii: Vec<usize>,
}

impl Default for FamiliesConfig {
    fn default() -> Self {
        Self {
            dictionary_count: None,
            dictionary_start: "0".into(),
            dictionary_width: "1/5".into(),
            probe_start: "1".into(),
            probe_width: "1/20".into(),
            probes_per_node: None,
            ball_nodes: Vec::new(),
            ball_radii: vec![2, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub max_queries: Option<usize>,
    pub origin: String,
    pub t_min: String,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            max_queries: None,
            origin: "-100".into(),
            t_min: "0".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub held_out: usize,
    pub eigenvalues: usize,
    /// Largest evaluation time of a held-out query, after `t_min`.
    pub horizon: f64,
    pub median_tol: f64,
    pub max_tol: f64,
    pub spectrum_tol: f64,
    pub metric_tol: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            held_out: 100,
            eigenvalues: 10,
            horizon: 4.0,
            median_tol: 1e-2,
            max_tol: 5e-2,
            spectrum_tol: 1e-2,
            metric_tol: 5e-2,
        }
    }
}

fn scenario_covariance() -> CovarianceSpec {
    CovarianceSpec {
        length_scale: 0.1,
        ..CovarianceSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub bundle: BundleConfig,
    #[serde(default)]
    pub operator: OperatorConfig,
    #[serde(default)]
    pub families: FamiliesConfig,
    #[serde(default = "scenario_covariance")]
    pub covariance: CovarianceSpec,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub reconstruct: ReconstructConfig,
    #[serde(default)]
    pub verify: VerifySection,
}

fn default_seed() -> u64 {
    7
}

fn invalid(path: &str, message: impl Into<String>) -> Error {
    Error::ConfigInvalid {
        path: path.into(),
        message: message.into(),
    }
}

/// Sets `a.b.c = value` in a TOML table; the value is read as TOML when it
/// parses, otherwise as a string.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for (k, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(invalid(key, "empty key segment"));
        }
        if k + 1 == parts.len() {
            cur.insert(part.to_string(), parsed);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(&parts[..=k].join("."), "not a table"))?;
    }
    Ok(())
}

impl ScenarioConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| invalid("", e.message().to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| invalid(o, "override must look like key=value"))?;
            apply_override(&mut table, k.trim(), v.trim())?;
        }
        let cfg: Self =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
                let path = e.path().to_string();
                invalid(&path, e.into_inner().to_string())
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("", format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        let b = &self.bundle;
        if b.rank == 0 {
            return Err(invalid("bundle.rank", "must be at least 1"));
        }
        if b.kind == BundleKind::Rotating && b.rank != 2 {
            return Err(invalid("bundle.kind", "rotating transitions need rank 2"));
        }
        if b.metric == MetricKind::Diagonal && b.metric_diag.len() != b.rank {
            return Err(invalid(
                "bundle.metric_diag",
                format!("needs {} entries", b.rank),
            ));
        }
        for (path, v) in [
            ("families.dictionary_start", &self.families.dictionary_start),
            ("families.dictionary_width", &self.families.dictionary_width),
            ("families.probe_start", &self.families.probe_start),
            ("families.probe_width", &self.families.probe_width),
            ("oracle.origin", &self.oracle.origin),
            ("oracle.t_min", &self.oracle.t_min),
            ("reconstruct.base_shift", &self.reconstruct.base_shift),
            ("reconstruct.gap", &self.reconstruct.gap),
            ("reconstruct.pairing_step", &self.reconstruct.pairing_step),
            (
                "reconstruct.generator_step",
                &self.reconstruct.generator_step,
            ),
        ] {
            parse_rational(v)
                .map_err(|_| invalid(path, format!("`{v}` is not a rational number")))?;
        }
        Ok(())
    }

    pub fn dictionary_count(&self) -> usize {
        self.families
            .dictionary_count
            .unwrap_or((5 * self.bundle.nodes * self.bundle.rank).div_ceil(2))
    }

    pub fn probes_per_node(&self) -> usize {
        self.families
            .probes_per_node
            .unwrap_or(self.bundle.rank + 1)
    }
}

fn mobius_block(d: usize, sign_all: bool) -> nalgebra::DMatrix<f64> {
    let mut m = nalgebra::DMatrix::identity(d, d);
    if sign_all {
        m = -m;
    } else {
        m[(0, 0)] = -1.0;
    }
    m
}

/// The hidden bundle of a scenario.
pub fn build_bundle(cfg: &BundleConfig) -> Result<GridBundle<f64>> {
    let n = cfg.nodes;
    let d = cfg.rank;
    let manifold = GridManifold::uniform(n)?;
    let atlas = match cfg.kind {
        BundleKind::Trivial => ChartAtlas::trivial(n, d),
        BundleKind::Mobius => ChartAtlas::two_chart(
            n,
            d,
            |_| nalgebra::DMatrix::identity(d, d),
            |_| mobius_block(d, false),
        )?,
        BundleKind::Flip => ChartAtlas::two_chart(
            n,
            d,
            |_| nalgebra::DMatrix::identity(d, d),
            |_| mobius_block(d, true),
        )?,
        BundleKind::Rotating => {
            let tw = cfg.twist;
            ChartAtlas::two_chart(
                n,
                d,
                |node| rotation(tw * (1.0 + 0.25 * node as f64 / n as f64)),
                |node| rotation(-0.5 * tw * (1.0 + node as f64)),
            )?
        }
    };
    let h = match cfg.metric {
        MetricKind::Identity => nalgebra::DMatrix::identity(d, d),
        MetricKind::Diagonal => {
            nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(cfg.metric_diag.clone()))
        }
    };
    GridBundle::new(manifold, atlas, FiberMetric::constant(n, h)?)
}

pub fn build_operator(cfg: &ScenarioConfig) -> EllipticOperatorSpec<f64> {
    let n = cfg.bundle.nodes;
    let p = cfg.operator.potential;
    EllipticOperatorSpec::laplace_with_potential(n, cfg.bundle.rank, |i| {
        1.0 + p * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()
    })
}

/// Hidden world plus the oracle settings of a scenario.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub world: Shared<HiddenWorld>,
}

impl Scenario {
    pub fn build(cfg: &ScenarioConfig) -> Result<Self> {
        let bundle = build_bundle(&cfg.bundle)?;
        let model = SpectralModel::new(&build_operator(cfg), &bundle, SELF_ADJOINT_TOL)?;
        let n = cfg.bundle.nodes;
        let fam = &cfg.families;
        let q = |s: &str| parse_rational(s);
        let (d0, dw) = (q(&fam.dictionary_start)?, q(&fam.dictionary_width)?);
        let (p0, pw) = (q(&fam.probe_start)?, q(&fam.probe_width)?);
        let seed = |k: usize| {
            cfg.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(k as u64)
        };
        let cov = &cfg.covariance;
        let mut families = Vec::new();
        families.push(sample_family(
            &bundle,
            cov,
            Arc::new(0, n),
            d0.clone(),
            &d0 + &dw,
            cfg.dictionary_count(),
            seed(0),
        )?);
        for x in 0..n {
            let k = families.len();
            families.push(sample_family(
                &bundle,
                cov,
                Arc::new(x, 1),
                p0.clone(),
                &p0 + &pw,
                cfg.probes_per_node(),
                seed(k),
            )?);
        }
        for &x in &fam.ball_nodes {
            for &rad in &fam.ball_radii {
                if rad == 0 || 2 * rad + 1 >= n {
                    return Err(invalid(
                        "families.ball_radii",
                        format!("radius {rad} does not fit"),
                    ));
                }
                let k = families.len();
                let len = 2 * rad + 1;
                families.push(sample_family(
                    &bundle,
                    cov,
                    Arc::new((x + n - rad) % n, len),
                    p0.clone(),
                    &p0 + &pw,
                    len * cfg.bundle.rank + 1,
                    seed(k),
                )?);
            }
        }
        Ok(Self {
            config: cfg.clone(),
            world: Shared::new(HiddenWorld::new(model, families)?),
        })
    }

    pub fn model(&self) -> &SpectralModel<f64> {
        &self.world.model
    }

    pub fn oracle(&self, log: Option<&Path>) -> Result<Oracle> {
        let o = Oracle::new(
            self.world.clone(),
            parse_rational(&self.config.oracle.origin)?,
            parse_rational(&self.config.oracle.t_min)?,
            OracleConfig {
                max_queries: self.config.oracle.max_queries,
                keep_records: false,
            },
        );
        match log {
            Some(p) => o.with_log_file(p),
            None => Ok(o),
        }
    }

    pub fn catalog(&self) -> Result<FamilyCatalog> {
        Ok(self.oracle(None)?.catalog().clone())
    }
}

impl ScenarioConfig {
    pub fn judgement(&self) -> crate::verify::Judgement {
        let v = &self.verify;
        crate::verify::Judgement {
            held_out: v.held_out,
            eigenvalues: v.eigenvalues,
            horizon: v.horizon,
            seed: self.seed,
            median_tol: v.median_tol,
            max_tol: v.max_tol,
            spectrum_tol: v.spectrum_tol,
            metric_tol: v.metric_tol,
            asymmetry_tol: self.reconstruct.rebuilt_asymmetry_tol,
        }
    }
}
