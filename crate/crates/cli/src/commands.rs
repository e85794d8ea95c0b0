//! The four stages. Each one hashes its inputs, skips itself when the
//! manifest already records that hash with intact outputs, and otherwise
//! rewrites its artifacts.

use std::fmt::Write as _;
use std::fs;

use anyhow::{Context, Result};
use bundlelab_core::reconstruct::{
    parse_rational, reconstruct_with_artifacts, RecoveredModel, Roles,
};
use bundlelab_core::scenario::{Scenario, ScenarioConfig};
use bundlelab_core::sources::{density_diagnostic, product_target};
use bundlelab_core::verify::{held_out_queries, judge, ReconstructionReport};
use bundlelab_core::Error;
use nalgebra::DVector;
use serde_json::json;

use crate::artifacts::{cell, fixed_json, sha256_hex, Workspace};

pub struct Stage<'a> {
    pub config: &'a ScenarioConfig,
    pub ws: Workspace,
    pub force: bool,
}

/// Hash of the validated config, so equivalent TOML spellings agree.
pub fn config_hash(cfg: &ScenarioConfig) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
}

fn combined(parts: &[&str]) -> String {
    sha256_hex(parts.join("\n").as_bytes())
}

fn scenario_name(cfg: &ScenarioConfig) -> String {
    if cfg.name.is_empty() {
        "scenario".into()
    } else {
        cfg.name.clone()
    }
}

/// Outcome of a stage, for the exit code.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    UpToDate,
    Failed,
}

impl Stage<'_> {
    fn skip(&self, stage: &str, input: &str) -> bool {
        let skip = !self.force && self.ws.up_to_date(stage, input);
        if skip {
            println!("{stage}: up to date");
        }
        skip
    }

    /// The hash a downstream stage keys on: `stage` must have run against
    /// `expected` and its output `file` must be intact.
    fn require(&self, stage: &str, expected: &str, file: &str) -> Result<String> {
        match (self.ws.recorded_input(stage), self.ws.file_hash(file)) {
            (Some(input), Some(hash)) if input == expected => Ok(hash),
            _ => Err(Error::StageInputMissing {
                missing: self.ws.path(file).display().to_string(),
                prerequisite: stage.into(),
            }
            .into()),
        }
    }

    pub fn simulate(&mut self) -> Result<Outcome> {
        let cfg = self.config;
        let input = config_hash(cfg)?;
        if self.skip("simulate", &input) {
            return Ok(Outcome::UpToDate);
        }
        let sc = Scenario::build(cfg)?;
        let model = sc.model();
        let catalog = sc.catalog()?;
        let families: Vec<_> = catalog
            .families
            .iter()
            .map(|f| {
                json!({
                    "arc_start": f.arc.start,
                    "arc_len": f.arc.len,
                    "start": f.start.to_string(),
                    "end": f.end.to_string(),
                    "count": f.count,
                })
            })
            .collect();
        let record = json!({
            "scenario": scenario_name(cfg),
            "config_hash": input,
            "nodes": cfg.bundle.nodes,
            "rank": cfg.bundle.rank,
            "class_invariant": model.bundle.class_invariant(),
            "asymmetry": model.asymmetry(),
            "eigenvalues": model.eigenvalues().iter().collect::<Vec<_>>(),
            "families": families,
        });
        self.ws.write("model.json", &fixed_json(&record)?)?;

        let v = &cfg.verify;
        let queries = held_out_queries(&catalog, v.held_out, cfg.seed, v.horizon);
        let mut csv = String::from("query,items,time,energy\n");
        for (k, q) in queries.iter().enumerate() {
            let e = sc.world.energy(&q.items, &q.time)?;
            writeln!(csv, "{k},{},{},{}", q.items.len(), q.time, cell(e))?;
        }
        self.ws.write("energies.csv", &csv)?;
        self.ws
            .commit("simulate", &input, &["model.json", "energies.csv"])?;
        println!(
            "simulate: {} nodes, rank {}, lambda_1 = {:.6e}, class {}",
            cfg.bundle.nodes,
            cfg.bundle.rank,
            model.eigenvalues()[0],
            model.bundle.class_invariant()
        );
        Ok(Outcome::Done)
    }

    pub fn reconstruct(&mut self) -> Result<Outcome> {
        let cfg = self.config;
        let input = config_hash(cfg)?;
        if self.skip("reconstruct", &input) {
            return Ok(Outcome::UpToDate);
        }
        let sc = Scenario::build(cfg)?;
        let oracle = sc.oracle(Some(&self.ws.path("queries.jsonl")))?;
        let roles = Roles::infer(oracle.catalog())?;
        let (model, art) = reconstruct_with_artifacts(&oracle, &roles, &cfg.reconstruct)?;
        oracle.flush()?;
        self.ws.write("gram.json", &fixed_json(&art.gram)?)?;
        self.ws.write("frames.json", &fixed_json(&art.frames)?)?;
        // verify re-reads this one, so it keeps full round-trip precision
        self.ws.write(
            "recovered_model.json",
            &(serde_json::to_string_pretty(&model)? + "\n"),
        )?;
        let outputs = [
            "queries.jsonl",
            "gram.json",
            "frames.json",
            "recovered_model.json",
        ];
        self.ws.commit("reconstruct", &input, &outputs)?;
        for s in &model.stages {
            println!("reconstruct: {:<10} {:>7} queries", s.stage, s.queries);
        }
        println!(
            "reconstruct: {} queries, audit {}, class {}",
            model.queries, model.audit, model.class_invariant
        );
        Ok(Outcome::Done)
    }

    pub fn verify(&mut self) -> Result<Outcome> {
        let cfg = self.config;
        let chash = config_hash(cfg)?;
        let model_hash = self.require("reconstruct", &chash, "recovered_model.json")?;
        let input = combined(&[&chash, &model_hash]);
        if self.skip("verify", &input) {
            let report = self.load_report()?;
            return Ok(if report.passed() {
                Outcome::UpToDate
            } else {
                Outcome::Failed
            });
        }
        let text = fs::read_to_string(self.ws.path("recovered_model.json"))?;
        let model: RecoveredModel =
            serde_json::from_str(&text).context("parsing recovered_model.json")?;
        let sc = Scenario::build(cfg)?;
        let report = judge(
            &scenario_name(cfg),
            &sc.world,
            &sc.catalog()?,
            &model,
            &cfg.judgement(),
        )?;
        self.ws.write("report.json", &fixed_json(&report)?)?;
        self.ws.write("report.csv", &report.to_csv())?;
        self.ws
            .commit("verify", &input, &["report.json", "report.csv"])?;
        for r in &report.rows {
            println!(
                "verify: {} {:<40} {:.3e} (threshold {:.3e})",
                if r.pass { "PASS" } else { "FAIL" },
                r.name,
                r.value,
                r.threshold
            );
        }
        Ok(if report.passed() {
            Outcome::Done
        } else {
            Outcome::Failed
        })
    }

    fn load_report(&self) -> Result<ReconstructionReport> {
        let text = fs::read_to_string(self.ws.path("report.json"))?;
        serde_json::from_str(&text).context("parsing report.json")
    }

    pub fn report(&mut self) -> Result<Outcome> {
        let cfg = self.config;
        let chash = config_hash(cfg)?;
        let model_hash = self.require("reconstruct", &chash, "recovered_model.json")?;
        let report_hash =
            self.require("verify", &combined(&[&chash, &model_hash]), "report.json")?;
        let input = combined(&[&chash, &report_hash]);
        let outputs = [
            "summary.txt",
            "eigenvalues.csv",
            "energy_curves.csv",
            "residual_vs_n.csv",
            "measurement_errors.csv",
        ];
        if self.skip("report", &input) {
            print!("{}", fs::read_to_string(self.ws.path("summary.txt"))?);
            return Ok(Outcome::UpToDate);
        }
        let report = self.load_report()?;
        let sc = Scenario::build(cfg)?;

        let mut eig = String::from("index,hidden,rebuilt,relative_deviation\n");
        for (k, (h, r)) in report
            .hidden_eigenvalues
            .iter()
            .zip(&report.rebuilt_eigenvalues)
            .enumerate()
        {
            writeln!(
                eig,
                "{k},{},{},{}",
                cell(*h),
                cell(*r),
                cell((r - h).abs() / h.abs())
            )?;
        }

        let mut errs = String::from("query,relative_error\n");
        for (k, e) in report.measurement.errors.iter().enumerate() {
            writeln!(errs, "{k},{}", cell(*e))?;
        }

        // hidden energy along a few held-out item sets, sampled every 1/16
        let catalog = sc.catalog()?;
        let v = &cfg.verify;
        let mut curves = String::from("query,time,energy\n");
        for (k, q) in held_out_queries(&catalog, v.held_out.min(4), cfg.seed, v.horizon)
            .iter()
            .enumerate()
        {
            for step in 0..=32 {
                let t = &q.time + parse_rational(&format!("{step}/16"))?;
                writeln!(curves, "{k},{t},{}", cell(sc.world.energy(&q.items, &t)?))?;
            }
        }

        // how fast the dictionary captures a smooth bump at the centre node
        let bundle = &sc.model().bundle;
        let dict = &sc.world.families[0];
        let n = cfg.bundle.nodes;
        let d = cfg.bundle.rank;
        let width = (n as f64 / 10.0).max(1.0);
        let profile = DVector::from_fn(n * d, |i, _| {
            let dist = (i / d) as f64 - (n / 2) as f64;
            if i % d == 0 {
                (-dist * dist / (2.0 * width * width)).exp()
            } else {
                0.0
            }
        });
        let knots = dict.covariance.time_grid;
        let time: Vec<f64> = (0..knots)
            .map(|k| {
                (std::f64::consts::PI * k as f64 / (knots - 1) as f64)
                    .sin()
                    .powi(2)
            })
            .collect();
        let grid: Vec<usize> = (1..=dict.len()).collect();
        let curve =
            density_diagnostic(bundle, dict, &[product_target(&profile, &time)], &grid)?.remove(0);
        let mut resid = String::from("n,residual\n");
        for (n, r) in grid.iter().zip(&curve) {
            writeln!(resid, "{n},{}", cell(*r))?;
        }

        let mut summary = String::new();
        writeln!(summary, "scenario {}", report.scenario)?;
        writeln!(
            summary,
            "class hidden {} rebuilt {}",
            report.hidden_class, report.rebuilt_class
        )?;
        writeln!(summary, "queries {} audit {}", report.queries, report.audit)?;
        writeln!(
            summary,
            "spectrum deviation {:.3e}",
            report.spectrum_deviation
        )?;
        writeln!(
            summary,
            "measurement error median {:.3e} max {:.3e}",
            report.measurement.median, report.measurement.max
        )?;
        writeln!(
            summary,
            "dictionary residual at n={} {:.3e}",
            dict.len(),
            curve.last().copied().unwrap_or(0.0)
        )?;
        for r in &report.rows {
            writeln!(
                summary,
                "{} {} {} {:.3e} <= {:.3e}",
                if r.pass { "PASS" } else { "FAIL" },
                r.id,
                r.name,
                r.value,
                r.threshold
            )?;
        }
        writeln!(
            summary,
            "overall {}",
            if report.passed() { "PASS" } else { "FAIL" }
        )?;

        self.ws.write("summary.txt", &summary)?;
        self.ws.write("eigenvalues.csv", &eig)?;
        self.ws.write("energy_curves.csv", &curves)?;
        self.ws.write("residual_vs_n.csv", &resid)?;
        self.ws.write("measurement_errors.csv", &errs)?;
        self.ws.commit("report", &input, &outputs)?;
        print!("{summary}");
        Ok(Outcome::Done)
    }
}
