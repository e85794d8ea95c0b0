//! The measurement firewall.
//!
//! [`Oracle`] owns the hidden model behind an `Arc<HiddenWorld>` and answers only
//! admissible energy queries. The reconstruction side sees the [`FamilyCatalog`]
//! and the returned scalars, nothing else.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc as Shared, Mutex};

use nalgebra::DVector;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{ModalSource, SpectralModel};
use crate::geometry::{Arc, GridManifold};
use crate::sources::BasicFamily;

/// Hidden ground truth: the forward model and the sampled families.
pub struct HiddenWorld {
    pub model: SpectralModel<f64>,
    pub families: Vec<BasicFamily>,
    modal: Vec<Vec<ModalSource<f64>>>,
}

impl HiddenWorld {
    pub fn new(model: SpectralModel<f64>, families: Vec<BasicFamily>) -> Result<Self> {
        let modal = families
            .iter()
            .map(|fam| {
                fam.members
                    .iter()
                    .map(|m| ModalSource::new(&model, m))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            families,
            modal,
        })
    }

    pub fn modal_member(&self, family: usize, member: usize) -> Option<&ModalSource<f64>> {
        self.modal.get(family).and_then(|f| f.get(member))
    }

    /// Modal state of `Σ τ_{T_j} F_j` at `t`, evaluating each item at `t + T_j`.
    pub fn state(
        &self,
        items: &[QueryItem],
        t: &BigRational,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.model.dim();
        let mut u = DVector::zeros(n);
        let mut v = DVector::zeros(n);
        for it in items {
            let src = self
                .modal_member(it.family, it.member)
                .ok_or(Error::UnknownMember {
                    family: it.family,
                    member: it.member,
                })?;
            let (du, dv) = src.state(&self.model, ratio(&(t + &it.shift)))?;
            u += du;
            v += dv;
        }
        Ok((u, v))
    }

    pub fn energy(&self, items: &[QueryItem], t: &BigRational) -> Result<f64> {
        let (u, v) = self.state(items, t)?;
        Ok(self.model.modal_energy(&u, &v))
    }
}

/// Public description of one family: box and member count.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyInfo {
    pub arc: Arc,
    pub start: BigRational,
    pub end: BigRational,
    pub count: usize,
}

/// Everything the reconstruction may know besides measured energies.
#[derive(Debug, Clone)]
pub struct FamilyCatalog {
    pub manifold: GridManifold<f64>,
    pub families: Vec<FamilyInfo>,
    /// Global start time `−τ`; every shifted support must begin after it.
    pub origin: BigRational,
    /// Earliest admissible evaluation time.
    pub t_min: BigRational,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QueryItem {
    pub family: usize,
    pub member: usize,
    /// Non-negative shift `T`; the item is `τ_T F` with support moved by `−T`.
    pub shift: BigRational,
}

impl QueryItem {
    pub fn new(family: usize, member: usize, shift: BigRational) -> Self {
        Self {
            family,
            member,
            shift,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleQuery {
    pub items: Vec<QueryItem>,
    pub time: BigRational,
}

impl AdmissibleQuery {
    pub fn new(items: Vec<QueryItem>, time: BigRational) -> Self {
        Self { items, time }
    }

    /// Checks membership, shifts, disjointness of the shifted closed supports,
    /// the global origin and the evaluation time. Independent of item order.
    pub fn validate(&self, catalog: &FamilyCatalog) -> Result<()> {
        if self.time < catalog.t_min {
            return Err(Error::InadmissibleTime(format!(
                "evaluation time {} precedes t_min {}",
                self.time, catalog.t_min
            )));
        }
        let mut spans = Vec::with_capacity(self.items.len());
        for (idx, it) in self.items.iter().enumerate() {
            let fam = catalog
                .families
                .get(it.family)
                .ok_or(Error::UnknownMember {
                    family: it.family,
                    member: it.member,
                })?;
            if it.member >= fam.count {
                return Err(Error::UnknownMember {
                    family: it.family,
                    member: it.member,
                });
            }
            if it.shift < BigRational::zero() {
                return Err(Error::InadmissibleTime(format!(
                    "negative shift {}",
                    it.shift
                )));
            }
            let lo = &fam.start - &it.shift;
            if lo <= catalog.origin {
                return Err(Error::InadmissibleTime(format!(
                    "item {idx} starts at {lo}, not after the origin {}",
                    catalog.origin
                )));
            }
            spans.push((lo, &fam.end - &it.shift, idx));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[0].1 >= w[1].0 {
                let (a, b) = (w[0].2.min(w[1].2), w[0].2.max(w[1].2));
                return Err(Error::InadmissibleQuery {
                    first: a,
                    second: b,
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn ratio(q: &BigRational) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

/// One logged measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRecord {
    pub items: Vec<(usize, usize, String)>,
    pub t: String,
    pub energy: f64,
}

impl QueryRecord {
    fn new(q: &AdmissibleQuery, energy: f64) -> Self {
        Self {
            items: q
                .items
                .iter()
                .map(|i| (i.family, i.member, i.shift.to_string()))
                .collect(),
            t: q.time.to_string(),
            energy,
        }
    }
}

#[derive(Debug, Default)]
struct LogState {
    count: usize,
    cost: usize,
    records: Vec<QueryRecord>,
}

/// Runtime knobs of the oracle.
#[derive(Debug, Clone, Default)]
pub struct OracleConfig {
    pub max_queries: Option<usize>,
    /// Keep every record in memory (the count is always kept).
    pub keep_records: bool,
}

pub struct Oracle {
    world: Shared<HiddenWorld>,
    catalog: FamilyCatalog,
    config: OracleConfig,
    log: Mutex<LogState>,
    sink: Option<Mutex<BufWriter<File>>>,
}

impl Oracle {
    pub fn new(
        world: Shared<HiddenWorld>,
        origin: BigRational,
        t_min: BigRational,
        config: OracleConfig,
    ) -> Self {
        let families = world
            .families
            .iter()
            .map(|f| FamilyInfo {
                arc: f.arc,
                start: f.start.clone(),
                end: f.end.clone(),
                count: f.len(),
            })
            .collect();
        let catalog = FamilyCatalog {
            manifold: world.model.bundle.manifold.clone(),
            families,
            origin,
            t_min,
        };
        Self {
            world,
            catalog,
            config,
            log: Mutex::new(LogState::default()),
            sink: None,
        }
    }

    /// Streams every record to a JSON-lines file.
    pub fn with_log_file(mut self, path: &Path) -> Result<Self> {
        let file =
            File::create(path).map_err(|e| Error::Io(format!("cannot open query log: {e}")))?;
        self.sink = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn catalog(&self) -> &FamilyCatalog {
        &self.catalog
    }

    pub fn query_count(&self) -> usize {
        self.log.lock().expect("log lock").count
    }

    /// Total number of items over all queries.
    pub fn query_cost(&self) -> usize {
        self.log.lock().expect("log lock").cost
    }

    pub fn records(&self) -> Vec<QueryRecord> {
        self.log.lock().expect("log lock").records.clone()
    }

    pub fn flush(&self) -> Result<()> {
        if let Some(sink) = &self.sink {
            sink.lock()
                .expect("sink lock")
                .flush()
                .map_err(|e| Error::Io(format!("query log: {e}")))?;
        }
        Ok(())
    }

    /// Energy of the summed shifted sources at the query time.
    pub fn measure(&self, q: &AdmissibleQuery) -> Result<f64> {
        let energy = self.answer(q)?;
        self.record(q, energy)?;
        Ok(energy)
    }

    /// Measures independent queries concurrently; results and log lines are
    /// in input order.
    pub fn measure_batch(&self, qs: &[AdmissibleQuery]) -> Result<Vec<f64>> {
        let energies = qs
            .par_iter()
            .map(|q| self.answer(q))
            .collect::<Result<Vec<_>>>()?;
        for (q, &e) in qs.iter().zip(&energies) {
            self.record(q, e)?;
        }
        Ok(energies)
    }

    fn answer(&self, q: &AdmissibleQuery) -> Result<f64> {
        q.validate(&self.catalog)?;
        {
            let mut log = self.log.lock().expect("log lock");
            if let Some(max) = self.config.max_queries {
                if log.count >= max {
                    return Err(Error::BudgetExceeded(max));
                }
            }
            log.count += 1;
            log.cost += q.items.len();
        }
        if q.items.is_empty() {
            return Ok(0.0);
        }
        Ok(self.world.energy(&q.items, &q.time)?.max(0.0))
    }

    fn record(&self, q: &AdmissibleQuery, energy: f64) -> Result<()> {
        if !self.config.keep_records && self.sink.is_none() {
            return Ok(());
        }
        let rec = QueryRecord::new(q, energy);
        if let Some(sink) = &self.sink {
            let line = serde_json::to_string(&rec).expect("record serializes");
            let mut w = sink.lock().expect("sink lock");
            writeln!(w, "{line}").map_err(|e| Error::Io(format!("query log: {e}")))?;
        }
        if self.config.keep_records {
            self.log.lock().expect("log lock").records.push(rec);
        }
        Ok(())
    }

    /// Energies of one item template at several times.
    pub fn measure_series(&self, items: &[QueryItem], times: &[BigRational]) -> Result<Vec<f64>> {
        let qs: Vec<_> = times
            .iter()
            .map(|t| AdmissibleQuery::new(items.to_vec(), t.clone()))
            .collect();
        self.measure_batch(&qs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{assemble_and_decompose, EllipticOperatorSpec, SourceFunction, Window};
    use crate::geometry::{ChartAtlas, FiberMetric, GridBundle};
    use nalgebra::DMatrix;
    use num_bigint::BigInt;

    fn q(a: i64, b: i64) -> BigRational {
        BigRational::new(BigInt::from(a), BigInt::from(b))
    }

    /// Family 0: the lowest eigenmode with a boxcar on `[0, 3]`; family 1: a sampled field on `[1, 2]`.
    fn oracle(budget: Option<usize>) -> (Shared<HiddenWorld>, Oracle) {
        let n = 16;
        let b = GridBundle::new(
            GridManifold::uniform(n).unwrap(),
            ChartAtlas::trivial(n, 1),
            FiberMetric::constant(n, DMatrix::identity(1, 1)).unwrap(),
        )
        .unwrap();
        let model =
            assemble_and_decompose(&EllipticOperatorSpec::laplace_plus_one(n, 1), &b).unwrap();
        let mode = SourceFunction::Separable {
            profile: model.eigenvectors().column(0).into_owned(),
            window: Window::Boxcar,
            start: 0.0,
            end: 3.0,
        };
        let f0 =
            BasicFamily::from_members(&b, Arc::new(0, n), q(0, 1), q(3, 1), vec![mode]).unwrap();
        let f1 = crate::sources::sample_family(
            &b,
            &Default::default(),
            Arc::new(2, 5),
            q(1, 1),
            q(2, 1),
            3,
            11,
        )
        .unwrap();
        let world = Shared::new(HiddenWorld::new(model, vec![f0, f1]).unwrap());
        let o = Oracle::new(
            world.clone(),
            q(-10, 1),
            q(-10, 1),
            OracleConfig {
                max_queries: budget,
                keep_records: true,
            },
        );
        (world, o)
    }

    #[test]
    fn empty_query_is_zero_and_logged() {
        let (_, o) = oracle(None);
        assert_eq!(
            o.measure(&AdmissibleQuery::new(vec![], q(1, 1))).unwrap(),
            0.0
        );
        assert_eq!(o.query_count(), 1);
        assert_eq!(o.records().len(), 1);
    }

    #[test]
    fn before_support_is_zero() {
        let (_, o) = oracle(None);
        let e = o
            .measure(&AdmissibleQuery::new(
                vec![QueryItem::new(0, 0, q(0, 1))],
                q(-1, 2),
            ))
            .unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn single_mode_cross_term() {
        let (_, o) = oracle(None);
        let t_shift = q(16, 5);
        let items = vec![
            QueryItem::new(0, 0, q(0, 1)),
            QueryItem::new(0, 0, t_shift.clone()),
        ];
        let e = o.measure(&AdmissibleQuery::new(items, q(4, 1))).unwrap();
        let single = 2.0 * 1.5f64.sin().powi(2);
        let want = 2.0 * single * (1.0 + ratio(&t_shift).cos());
        assert!((e - want).abs() < 1e-12, "{e} vs {want}");
    }

    #[test]
    fn overlapping_and_touching_supports_rejected_symmetrically() {
        let (_, o) = oracle(None);
        let a = QueryItem::new(0, 0, q(0, 1));
        let b = QueryItem::new(0, 0, q(2, 1));
        let c = QueryItem::new(0, 0, q(3, 1));
        for items in [vec![a.clone(), b.clone()], vec![b.clone(), a.clone()]] {
            let err = o
                .measure(&AdmissibleQuery::new(items, q(4, 1)))
                .unwrap_err();
            assert_eq!(
                err,
                Error::InadmissibleQuery {
                    first: 0,
                    second: 1
                }
            );
        }
        assert!(matches!(
            o.measure(&AdmissibleQuery::new(vec![c, a], q(4, 1))),
            Err(Error::InadmissibleQuery { .. })
        ));
        assert_eq!(o.query_count(), 0);
    }

    #[test]
    fn unknown_member_origin_and_budget() {
        let (_, o) = oracle(Some(2));
        let bad = AdmissibleQuery::new(vec![QueryItem::new(1, 3, q(0, 1))], q(3, 1));
        assert_eq!(
            o.measure(&bad).unwrap_err(),
            Error::UnknownMember {
                family: 1,
                member: 3
            }
        );
        let early = AdmissibleQuery::new(vec![QueryItem::new(0, 0, q(10, 1))], q(3, 1));
        assert!(matches!(o.measure(&early), Err(Error::InadmissibleTime(_))));
        let ok = AdmissibleQuery::new(vec![QueryItem::new(1, 2, q(1, 3))], q(3, 1));
        let e1 = o.measure(&ok).unwrap();
        let e2 = o.measure(&ok).unwrap();
        assert_eq!(e1.to_bits(), e2.to_bits());
        assert_eq!(o.measure(&ok).unwrap_err(), Error::BudgetExceeded(2));
    }

    #[test]
    fn series_conserved_after_support_and_continuous_inside() {
        let (_, o) = oracle(None);
        let items = vec![QueryItem::new(1, 0, q(0, 1)), QueryItem::new(0, 0, q(5, 1))];
        let late: Vec<_> = (0..6).map(|k| q(3, 1) + q(k, 2)).collect();
        let es = o.measure_series(&items, &late).unwrap();
        for e in &es {
            assert!((e - es[0]).abs() <= 1e-10 * es[0]);
        }
        let base = q(3, 2);
        let e0 = o
            .measure_series(&items, std::slice::from_ref(&base))
            .unwrap()[0];
        let d2 = (o.measure_series(&items, &[&base + q(1, 100)]).unwrap()[0] - e0).abs();
        let d3 = (o.measure_series(&items, &[&base + q(1, 1000)]).unwrap()[0] - e0).abs();
        assert!(d3 < d2 && d3 < 1e-2 * e0.max(1.0));
        assert_eq!(o.measure_series(&[], &late).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn batch_preserves_order() {
        let (world, o) = oracle(None);
        let qs: Vec<_> = (0..20)
            .map(|k| AdmissibleQuery::new(vec![QueryItem::new(1, k % 3, q(k as i64, 7))], q(5, 1)))
            .collect();
        let got = o.measure_batch(&qs).unwrap();
        for (qq, e) in qs.iter().zip(&got) {
            assert_eq!(
                world
                    .energy(&qq.items, &qq.time)
                    .unwrap()
                    .max(0.0)
                    .to_bits(),
                e.to_bits()
            );
        }
    }
}
