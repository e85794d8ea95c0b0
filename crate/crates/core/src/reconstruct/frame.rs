use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, SVD};

use super::dictionary::Generator;
use super::pairing::PairingTable;
use crate::error::{Error, Result};
use crate::geometry::{Arc, ChartAtlas, TransitionTable};
use crate::linalg::{condition_number, pseudo_inverse, sym_eigen};

/// Frame of one recovered chart: fiber coordinates of the velocity at each
/// node, `y = coords[x] · z`, relative to `d` smooth candidate waves.
#[derive(Debug, Clone)]
pub struct ChartFrame {
    pub arc: Arc,
    /// `r × d` candidate states; their velocities are the frame vectors.
    pub candidates: DMatrix<f64>,
    pub coords: BTreeMap<usize, DMatrix<f64>>,
    /// Smallest score over the chart's nodes.
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct RecoveredFrames {
    pub rank: usize,
    pub charts: Vec<ChartFrame>,
    pub atlas: ChartAtlas<f64>,
    /// Largest transition condition number on any overlap.
    pub overlap_condition: f64,
}

impl RecoveredFrames {
    /// Velocity coordinates at `node` in its reference chart.
    pub fn reference_coords(&self, node: usize) -> &DMatrix<f64> {
        let a = self.atlas.reference_charts()[node];
        &self.charts[a].coords[&node]
    }

    /// Velocity coordinates at `node` in chart `alpha`, if it covers the node.
    pub fn coords_in(&self, alpha: usize, node: usize) -> Option<&DMatrix<f64>> {
        self.charts[alpha].coords.get(&node)
    }

    pub fn class_invariant(&self) -> i32 {
        self.atlas.loop_determinant_sign()
    }
}

/// Orthonormal basis (`d × r`) of the velocity functionals observed at each node.
fn row_spaces(table: &PairingTable, nodes: usize, d: usize, tol: f64) -> Result<Vec<DMatrix<f64>>> {
    (0..nodes)
        .map(|x| {
            let rows = table.rows_at(x);
            if rows.len() < d {
                return Err(Error::RankDeficientFrame {
                    node: x,
                    score: 0.0,
                });
            }
            let omega = table.velocity.select_rows(&rows);
            let svd = SVD::new(omega, false, true);
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
            let s = &svd.singular_values;
            let rel = if d < s.len() {
                s[order[d - 1]] / s[order[0]]
            } else {
                1.0
            };
            if !(rel > tol) {
                return Err(Error::RankDeficientFrame {
                    node: x,
                    score: rel,
                });
            }
            let vt = svd.v_t.expect("requested");
            Ok(vt.select_rows(&order[..d]))
        })
        .collect()
}

/// Lowest modes of `−D²` and their time derivatives, normalized: smooth waves
/// whose velocity fields serve as frame vectors.
pub fn select_candidates(gen: &Generator, count: usize) -> DMatrix<f64> {
    let neg_sq = -(&gen.d * &gen.d);
    let (_, vecs) = sym_eigen(&((&neg_sq + neg_sq.transpose()) * 0.5));
    let count = count.min(vecs.ncols());
    let mut cols = Vec::with_capacity(2 * count);
    for k in 0..count {
        let c = vecs.column(k).into_owned();
        let dc = &gen.d * &c;
        cols.push(c);
        let nd = dc.norm();
        if nd > 0.0 {
            cols.push(dc / nd);
        }
    }
    DMatrix::from_columns(&cols)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Candidate subsets kept per chart for the joint choice.
const FRAME_OPTIONS: usize = 8;

/// First node of `a ∩ b` where the transition determinant changes sign
/// between neighbours. A frame that vanishes between two grid nodes shows up
/// this way even when both nodes score well.
fn sign_break(a: &ChartFrame, b: &ChartFrame, nodes: usize) -> Option<usize> {
    let sign: BTreeMap<usize, bool> = a
        .coords
        .iter()
        .filter_map(|(&x, ca)| {
            let cb = b.coords.get(&x)?;
            Some((x, (ca * pseudo_inverse(cb, 1e-14)).determinant() > 0.0))
        })
        .collect();
    sign.iter()
        .find(|&(&x, s)| sign.get(&((x + 1) % nodes)).is_some_and(|t| t != s))
        .map(|(&x, _)| x)
}

/// Best-scoring frame per chart such that every overlap has a transition of
/// constant determinant sign along each of its connected runs.
fn consistent_frames(options: Vec<Vec<ChartFrame>>, nodes: usize) -> Result<Vec<ChartFrame>> {
    // (pick, first broken node, remaining steps)
    type State = (Vec<usize>, Option<usize>, usize);
    fn search(options: &[Vec<ChartFrame>], nodes: usize, st: &mut State) -> bool {
        let a = st.0.len();
        if a == options.len() {
            return true;
        }
        for k in 0..options[a].len() {
            if st.2 == 0 {
                return false;
            }
            st.2 -= 1;
            let fa = &options[a][k];
            let clash = (0..a).find_map(|b| sign_break(&options[b][st.0[b]], fa, nodes));
            if let Some(x) = clash {
                st.1.get_or_insert(x);
                continue;
            }
            st.0.push(k);
            if search(options, nodes, st) {
                return true;
            }
            st.0.pop();
        }
        false
    }
    let mut st: State = (Vec::with_capacity(options.len()), None, 100_000);
    if !search(&options, nodes, &mut st) {
        return Err(Error::RankDeficientFrame {
            node: st.1.unwrap_or(0),
            score: 0.0,
        });
    }
    Ok(options
        .into_iter()
        .zip(st.0)
        .map(|(mut o, k)| o.swap_remove(k))
        .collect())
}

fn min_singular(m: &DMatrix<f64>) -> f64 {
    m.singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Recovers chart frames on `charts` evenly spaced arcs and the transition
/// cocycle between them, and from it the class invariant.
#[allow(clippy::too_many_arguments)]
pub fn frame_and_cocycle(
    table: &PairingTable,
    gen: &Generator,
    nodes: usize,
    rank: usize,
    charts: usize,
    overlap: usize,
    candidates_per_rank: usize,
    frame_tol: f64,
    condition_tol: f64,
) -> Result<RecoveredFrames> {
    let spaces = row_spaces(table, nodes, rank, frame_tol)?;
    let cand = select_candidates(gen, candidates_per_rank * rank);
    let projected: Vec<DMatrix<f64>> = spaces.iter().map(|y| y * &cand).collect();
    let subsets = combinations(cand.ncols(), rank);
    let arcs = ChartAtlas::<f64>::even_arcs(nodes, charts, overlap);
    let chart_frame = |arc: Arc, subset: &[usize], score: f64| {
        let c = cand.select_columns(subset);
        let coords = arc
            .nodes(nodes)
            .into_iter()
            .map(|x| {
                let omega = table.velocity.select_rows(&table.rows_at(x));
                let w = &omega * &c;
                (x, pseudo_inverse(&w, 1e-14) * omega)
            })
            .collect();
        ChartFrame {
            arc,
            candidates: c,
            coords,
            score,
        }
    };
    let mut options: Vec<Vec<ChartFrame>> = Vec::with_capacity(arcs.len());
    for arc in arcs {
        let members = arc.nodes(nodes);
        let score_of = |s: &[usize]| {
            members
                .iter()
                .map(|&x| min_singular(&projected[x].select_columns(s)))
                .fold(f64::INFINITY, f64::min)
        };
        let mut ranked: Vec<(f64, &Vec<usize>)> =
            subsets.iter().map(|s| (score_of(s), s)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (best, subset) = ranked[0];
        if !(best > frame_tol) {
            let node = members
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    min_singular(&projected[a].select_columns(subset))
                        .total_cmp(&min_singular(&projected[b].select_columns(subset)))
                })
                .unwrap_or(arc.start);
            return Err(Error::RankDeficientFrame { node, score: best });
        }
        options.push(
            ranked
                .into_iter()
                .take_while(|(score, _)| *score > frame_tol)
                .take(FRAME_OPTIONS)
                .map(|(score, s)| chart_frame(arc, s, score))
                .collect(),
        );
    }
    let frames = consistent_frames(options, nodes)?;
    let mut transitions: TransitionTable<f64> = BTreeMap::new();
    let mut worst = 1.0f64;
    let mut pinv_cache: HashMap<(usize, usize), DMatrix<f64>> = HashMap::new();
    for a in 0..frames.len() {
        for b in a + 1..frames.len() {
            for (&x, ba) in &frames[a].coords {
                let Some(bb) = frames[b].coords.get(&x) else {
                    continue;
                };
                let pb = pinv_cache
                    .entry((b, x))
                    .or_insert_with(|| pseudo_inverse(bb, 1e-14))
                    .clone();
                let g = ba * pb;
                let cond = condition_number(&g);
                if !(cond <= condition_tol) {
                    return Err(Error::IllConditionedOverlap {
                        node: x,
                        condition: cond,
                    });
                }
                worst = worst.max(cond);
                let inv = g
                    .clone()
                    .try_inverse()
                    .ok_or(Error::IllConditionedOverlap {
                        node: x,
                        condition: f64::INFINITY,
                    })?;
                transitions.entry((a, b)).or_default().insert(x, g);
                transitions.entry((b, a)).or_default().insert(x, inv);
            }
        }
    }
    let atlas = ChartAtlas::new(
        nodes,
        rank,
        frames.iter().map(|f| f.arc).collect(),
        transitions,
    )?;
    Ok(RecoveredFrames {
        rank,
        charts: frames,
        atlas,
        overlap_condition: worst,
    })
}
