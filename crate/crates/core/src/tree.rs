//! Exact depth-one and depth-two policy-tree search.
//!
//! A tree maximizes `Σ_i gamma[i][tree(x_i)]` over all axis-aligned trees of the
//! given depth. Splits route `x <= value` to the left; split values are midpoints
//! between consecutive distinct feature values. Ties go to the lowest feature,
//! then the smallest split value, then the earliest action.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{HistoryKind, HistoryTable};
use crate::error::{Error, Result};
use crate::table::Value;

pub use crate::learning::recursive_value_search;

const TIE_TOL: f64 = 1e-10;

fn better(candidate: f64, incumbent: f64) -> bool {
    candidate > incumbent + TIE_TOL * (1.0 + incumbent.abs())
}

/// Features and per-action scores for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    /// Feature-major: `features[j][i]` is feature `j` of unit `i`.
    pub features: Vec<Vec<f64>>,
    /// Unit-major: `gamma[i][a]`.
    pub gamma: Vec<Vec<f64>>,
}

impl ScoredSample {
    /// Build from unit-major feature rows.
    pub fn new(rows: &[Vec<f64>], gamma: Vec<Vec<f64>>) -> Result<Self> {
        let n = gamma.len();
        if n == 0 || rows.len() != n {
            return Err(Error::Structure(format!("{} feature rows for {n} score rows", rows.len())));
        }
        let p = rows[0].len();
        let m = gamma[0].len();
        if p == 0 || m == 0 {
            return Err(Error::Structure("need at least one feature and one action".into()));
        }
        if rows.iter().any(|r| r.len() != p) || gamma.iter().any(|g| g.len() != m) {
            return Err(Error::Structure("ragged feature or score rows".into()));
        }
        if rows.iter().flatten().chain(gamma.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite feature or score".into()));
        }
        let features = (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        Ok(ScoredSample { features, gamma })
    }

    pub fn n(&self) -> usize {
        self.gamma.len()
    }

    pub fn p(&self) -> usize {
        self.features.len()
    }

    pub fn n_actions(&self) -> usize {
        self.gamma[0].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub value: f64,
}

/// Complete binary tree stored breadth-first. Depth one has one node and two
/// leaves; depth two has nodes `[root, left, right]` and four leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTree {
    pub depth: usize,
    pub nodes: Vec<Split>,
    pub leaves: Vec<String>,
    #[serde(default)]
    pub features: Vec<String>,
}

impl PolicyTree {
    /// Leaf index reached by a feature row.
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for _ in 0..self.depth {
            let s = self.nodes[node];
            node = 2 * node + if x[s.feature] <= s.value { 1 } else { 2 };
        }
        node - self.nodes.len()
    }

    pub fn predict_row(&self, x: &[f64]) -> &str {
        &self.leaves[self.leaf_of(x)]
    }

    fn validate(&self) -> Result<()> {
        let nodes = (1 << self.depth) - 1;
        if !(1..=2).contains(&self.depth) || self.nodes.len() != nodes || self.leaves.len() != nodes + 1 {
            return Err(Error::Format(format!(
                "tree of depth {} has {} nodes and {} leaves",
                self.depth,
                self.nodes.len(),
                self.leaves.len()
            )));
        }
        Ok(())
    }
}

/// Route unit-major feature rows through a tree.
pub fn predict_tree(t: &PolicyTree, rows: &[Vec<f64>]) -> Result<Vec<String>> {
    t.validate()?;
    let p = t.nodes.iter().map(|s| s.feature + 1).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            if r.len() < p || (!t.features.is_empty() && r.len() != t.features.len()) {
                return Err(Error::Schema(format!("feature row of length {} for the tree", r.len())));
            }
            Ok(t.predict_row(r).to_string())
        })
        .collect()
}

fn leaf_best(sums: &[f64]) -> (f64, usize) {
    let mut best = (sums[0], 0);
    for (a, &v) in sums.iter().enumerate().skip(1) {
        if better(v, best.0) {
            best = (v, a);
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct Stump {
    objective: f64,
    split: Split,
    left: usize,
    right: usize,
}

/// Best stump over the rows flagged in `member` (or all rows). `orders[j]` lists
/// all rows sorted by feature `j`.
fn best_stump(s: &ScoredSample, orders: &[Vec<usize>], member: Option<&[bool]>) -> Option<Stump> {
    let m = s.n_actions();
    let inside = |r: usize| member.map_or(true, |mm| mm[r]);
    let mut total = vec![0.0; m];
    let mut count = 0usize;
    for r in 0..s.n() {
        if inside(r) {
            count += 1;
            for a in 0..m {
                total[a] += s.gamma[r][a];
            }
        }
    }
    if count == 0 {
        return None;
    }
    let mut best: Option<Stump> = None;
    let mut prefix = vec![0.0; m];
    let mut rest = vec![0.0; m];
    for (j, order) in orders.iter().enumerate() {
        let x = &s.features[j];
        prefix.iter_mut().for_each(|v| *v = 0.0);
        let mut prev: Option<usize> = None;
        for &r in order.iter().filter(|&&r| inside(r)) {
            if let Some(q) = prev {
                if x[r] > x[q] {
                    for a in 0..m {
                        rest[a] = total[a] - prefix[a];
                    }
                    let (lv, la) = leaf_best(&prefix);
                    let (rv, ra) = leaf_best(&rest);
                    let obj = lv + rv;
                    if best.map_or(true, |b| better(obj, b.objective)) {
                        best = Some(Stump {
                            objective: obj,
                            split: Split {
                                feature: j,
                                value: 0.5 * (x[q] + x[r]),
                            },
                            left: la,
                            right: ra,
                        });
                    }
                }
            }
            for a in 0..m {
                prefix[a] += s.gamma[r][a];
            }
            prev = Some(r);
        }
    }
    best.or_else(|| {
        // No split separates the rows: everything goes left.
        let (v, a) = leaf_best(&total);
        let maxv = (0..s.n())
            .filter(|&r| inside(r))
            .map(|r| s.features[0][r])
            .fold(f64::NEG_INFINITY, f64::max);
        Some(Stump {
            objective: v,
            split: Split { feature: 0, value: maxv },
            left: a,
            right: a,
        })
    })
}

fn sort_orders(s: &ScoredSample) -> Vec<Vec<usize>> {
    s.features
        .iter()
        .map(|x| {
            let mut o: Vec<usize> = (0..x.len()).collect();
            o.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
            o
        })
        .collect()
}

/// Exact search over trees of depth 1 or 2. Returns the tree (leaves labelled by
/// `actions`) and its objective.
pub fn exact_tree_search(
    s: &ScoredSample,
    depth: usize,
    actions: &[String],
    feature_names: &[String],
) -> Result<(PolicyTree, f64)> {
    if actions.len() != s.n_actions() {
        return Err(Error::Structure(format!(
            "{} action labels for {} score columns",
            actions.len(),
            s.n_actions()
        )));
    }
    let orders = sort_orders(s);
    let label = |a: usize| actions[a].clone();
    let features = feature_names.to_vec();
    match depth {
        1 => {
            let b = best_stump(s, &orders, None).expect("nonempty sample");
            Ok((
                PolicyTree {
                    depth: 1,
                    nodes: vec![b.split],
                    leaves: vec![label(b.left), label(b.right)],
                    features,
                },
                b.objective,
            ))
        }
        2 => {
            let n = s.n();
            // Candidate root splits in canonical order: (feature, position in order).
            let mut roots = Vec::new();
            for (j, order) in orders.iter().enumerate() {
                let x = &s.features[j];
                for pos in 1..n {
                    if x[order[pos]] > x[order[pos - 1]] {
                        roots.push((j, pos));
                    }
                }
            }
            let evaluated: Vec<(f64, Split, Stump, Stump)> = roots
                .par_iter()
                .map(|&(j, pos)| {
                    let order = &orders[j];
                    let mut left = vec![false; n];
                    for &r in &order[..pos] {
                        left[r] = true;
                    }
                    let right: Vec<bool> = left.iter().map(|b| !b).collect();
                    let l = best_stump(s, &orders, Some(&left)).expect("nonempty side");
                    let r = best_stump(s, &orders, Some(&right)).expect("nonempty side");
                    let x = &s.features[j];
                    let split = Split {
                        feature: j,
                        value: 0.5 * (x[order[pos - 1]] + x[order[pos]]),
                    };
                    (l.objective + r.objective, split, l, r)
                })
                .collect();
            let mut best: Option<&(f64, Split, Stump, Stump)> = None;
            for e in &evaluated {
                if best.map_or(true, |b| better(e.0, b.0)) {
                    best = Some(e);
                }
            }
            let (obj, root, l, r) = match best {
                Some(&(o, sp, l, r)) => (o, sp, l, r),
                None => {
                    let b = best_stump(s, &orders, None).expect("nonempty sample");
                    (b.objective, b.split, b, b)
                }
            };
            Ok((
                PolicyTree {
                    depth: 2,
                    nodes: vec![root, l.split, r.split],
                    leaves: vec![label(l.left), label(l.right), label(r.left), label(r.right)],
                    features,
                },
                obj,
            ))
        }
        d => Err(Error::Range(format!("tree depth {d} is not supported; use 1 or 2"))),
    }
}

/// Sum of the scores of the actions a tree assigns.
pub fn tree_objective(t: &PolicyTree, s: &ScoredSample, actions: &[String]) -> f64 {
    (0..s.n())
        .map(|i| {
            let x: Vec<f64> = s.features.iter().map(|f| f[i]).collect();
            let a = actions.iter().position(|a| a == t.predict_row(&x)).expect("tree action");
            s.gamma[i][a]
        })
        .sum()
}

/// Tree input columns: numeric variables as-is, categorical variables one-hot over
/// all levels (named `{var}{level}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFeatures {
    pub history: HistoryKind,
    pub vars: Vec<String>,
    #[serde(default)]
    pub levels: BTreeMap<String, Vec<String>>,
}

impl TreeFeatures {
    /// Record the categorical levels of `vars` as found in `h`.
    pub fn from_history(h: &HistoryTable, vars: &[String]) -> Result<Self> {
        let mut levels = BTreeMap::new();
        for v in vars {
            if let Some(l) = &h.column_or_err(v)?.levels {
                levels.insert(v.clone(), l.clone());
            }
        }
        Ok(TreeFeatures {
            history: h.kind,
            vars: vars.to_vec(),
            levels,
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for v in &self.vars {
            match self.levels.get(v) {
                Some(ls) => out.extend(ls.iter().map(|l| format!("{v}{l}"))),
                None => out.push(v.clone()),
            }
        }
        out
    }

    /// Unit-major feature rows for the rows of `h`.
    pub fn rows(&self, h: &HistoryTable) -> Result<Vec<Vec<f64>>> {
        let mut rows = vec![Vec::new(); h.nrows()];
        for v in &self.vars {
            let col = h.column_or_err(v)?;
            for (r, val) in col.values.iter().enumerate() {
                match (self.levels.get(v), val) {
                    (_, Value::Missing) => {
                        return Err(Error::Schema(format!("variable '{v}' is missing for id '{}'", h.ids[r])))
                    }
                    (Some(ls), _) => {
                        let lab = val.as_label().expect("not missing");
                        let k = ls
                            .iter()
                            .position(|l| *l == lab)
                            .ok_or_else(|| Error::Domain(format!("unknown level '{lab}' of '{v}'")))?;
                        rows[r].extend((0..ls.len()).map(|i| if i == k { 1.0 } else { 0.0 }));
                    }
                    (None, _) => rows[r].push(
                        val.as_f64()
                            .ok_or_else(|| Error::Schema(format!("variable '{v}' is not numeric")))?,
                    ),
                }
            }
        }
        Ok(rows)
    }
}
