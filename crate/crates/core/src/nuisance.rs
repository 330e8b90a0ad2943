//! Action-probability (g) and outcome (Q) models, and fold assignment for cross-fitting.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{get_history, HistoryKind, HistoryTable, PolicyData, StageSel};
use crate::design::{build_design, parse_formula, ActionColumn, DesignMatrix, DesignSpec};
use crate::error::{Error, Result};
use crate::glm::{
    fit_logistic, fit_multinomial, fit_ols, linear_predict, logistic_predict, multinomial_predict, LinearFit,
    LogisticFit, MultinomialFit,
};
use crate::table::{label_cmp, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Ols,
    Logistic,
    Multinomial,
    Empirical,
}

/// Model specification as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub formula: String,
    #[serde(default)]
    pub history: HistoryKind,
    #[serde(default)]
    pub pooled: bool,
}

impl ModelSpec {
    pub fn new(family: Family, formula: &str, history: HistoryKind, pooled: bool) -> Self {
        ModelSpec {
            family,
            formula: formula.to_string(),
            history,
            pooled,
        }
    }

    /// Logistic regression on all state covariates, pooled over stages.
    pub fn g_default() -> Self {
        Self::new(Family::Logistic, "~.", HistoryKind::State, true)
    }

    /// Least squares with action interactions on all state covariates.
    pub fn q_default() -> Self {
        Self::new(Family::Ols, "~A*.", HistoryKind::State, false)
    }

    pub fn parsed(&self) -> Result<DesignSpec> {
        parse_formula(&self.formula)
    }
}

/// Stage histories of both kinds, one row per subject and stage.
#[derive(Debug, Clone)]
pub struct Histories {
    pub full: Vec<HistoryTable>,
    pub state: Vec<HistoryTable>,
}

impl Histories {
    pub fn new(pd: &PolicyData) -> Result<Self> {
        pd.require_uniform()?;
        let k = pd.max_stages();
        let full = (1..=k)
            .map(|s| get_history(pd, StageSel::Stage(s), HistoryKind::Full))
            .collect::<Result<_>>()?;
        let state = (1..=k)
            .map(|s| get_history(pd, StageSel::Stage(s), HistoryKind::State))
            .collect::<Result<_>>()?;
        Ok(Histories { full, state })
    }

    /// Stage `k` (1-based) history of the given kind.
    pub fn get(&self, kind: HistoryKind, k: usize) -> &HistoryTable {
        match kind {
            HistoryKind::Full => &self.full[k - 1],
            HistoryKind::State => &self.state[k - 1],
        }
    }

    pub fn stages(&self) -> usize {
        self.full.len()
    }
}

/// Expand a spec list to one spec per stage, or a single pooled spec.
fn stage_specs(specs: &[ModelSpec], k: usize, what: &str) -> Result<Vec<ModelSpec>> {
    match specs.len() {
        0 => Err(Error::Config(format!("no {what} model given"))),
        1 => Ok(vec![specs[0].clone(); if specs[0].pooled { 1 } else { k }]),
        n if n == k => {
            if specs.iter().any(|s| s.pooled) {
                return Err(Error::Config(format!("per-stage {what} models cannot be pooled")));
            }
            Ok(specs.to_vec())
        }
        n => Err(Error::Config(format!("{n} {what} models given for {k} stages"))),
    }
}

fn categorical_levels(h: &HistoryTable, spec: &DesignSpec) -> BTreeMap<String, Vec<String>> {
    spec.variables()
        .into_iter()
        .filter_map(|v| h.column(&v).and_then(|c| c.levels.clone()).map(|l| (v, l)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum GFit {
    /// Single observed action: probability one.
    Constant,
    Logistic {
        design: DesignSpec,
        columns: Vec<String>,
        fit: LogisticFit,
    },
    Multinomial {
        design: DesignSpec,
        columns: Vec<String>,
        fit: MultinomialFit,
    },
    Empirical {
        vars: Vec<String>,
        strata: Vec<(Vec<String>, Vec<f64>)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageG {
    pub actions: Vec<String>,
    pub levels: BTreeMap<String, Vec<String>>,
    pub fit: GFit,
}

/// Fitted action-probability model, per stage or pooled across stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GModel {
    pub history: HistoryKind,
    pub pooled: bool,
    pub stages: Vec<StageG>,
    /// Subject indices of the training set.
    #[serde(skip)]
    pub training: Vec<usize>,
}

/// Predicted action probabilities for a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StageProbs {
    pub actions: Vec<String>,
    pub p: Vec<Vec<f64>>,
    /// Rows whose stratum was not seen in training (uniform fallback).
    pub unseen: usize,
}

impl StageProbs {
    /// Probability of action `a` in row `i`; zero for actions the model never saw.
    pub fn prob(&self, i: usize, a: &str) -> f64 {
        self.actions.iter().position(|x| x == a).map_or(0.0, |j| self.p[i][j])
    }
}

fn design_for(spec: &DesignSpec, h: &HistoryTable, levels: Option<&BTreeMap<String, Vec<String>>>) -> Result<DesignMatrix> {
    build_design(spec, h, None, levels)
}

fn stratum_key(h: &HistoryTable, vars: &[String], r: usize) -> Result<Vec<String>> {
    vars.iter()
        .map(|v| {
            h.column_or_err(v)?.values[r]
                .as_label()
                .ok_or_else(|| Error::Schema(format!("variable '{v}' is missing for id '{}'", h.ids[r])))
        })
        .collect()
}

fn fit_stage_g(spec: &ModelSpec, h: &HistoryTable, actions: &[String]) -> Result<StageG> {
    let parsed = spec.parsed()?.resolve(h.names());
    let levels = categorical_levels(h, &parsed);
    if h.nrows() == 0 {
        return Err(Error::Fit("no rows to fit the action model".into()));
    }
    let idx: Vec<usize> = h
        .actions
        .iter()
        .map(|a| {
            actions
                .iter()
                .position(|x| x == a)
                .ok_or_else(|| Error::Domain(format!("action '{a}' outside the stage action set")))
        })
        .collect::<Result<_>>()?;
    if actions.len() == 1 && spec.family != Family::Empirical {
        return Ok(StageG {
            actions: actions.to_vec(),
            levels,
            fit: GFit::Constant,
        });
    }
    let fit = match spec.family {
        Family::Logistic => {
            if actions.len() != 2 {
                return Err(Error::Config(format!(
                    "logistic action model needs two actions, found {}; use the multinomial family",
                    actions.len()
                )));
            }
            let d = design_for(&parsed, h, Some(&levels))?;
            let y: Vec<f64> = idx.iter().map(|&j| j as f64).collect();
            GFit::Logistic {
                fit: fit_logistic(&d.x, &y, None)?,
                columns: d.names,
                design: parsed,
            }
        }
        Family::Multinomial => {
            let d = design_for(&parsed, h, Some(&levels))?;
            GFit::Multinomial {
                fit: fit_multinomial(&d.x, &idx, actions.len(), None)?,
                columns: d.names,
                design: parsed,
            }
        }
        Family::Empirical => {
            let vars = parsed.variables();
            let mut counts: HashMap<Vec<String>, Vec<f64>> = HashMap::new();
            for (r, &j) in idx.iter().enumerate() {
                let key = stratum_key(h, &vars, r)?;
                counts.entry(key).or_insert_with(|| vec![0.0; actions.len()])[j] += 1.0;
            }
            let mut strata: Vec<(Vec<String>, Vec<f64>)> = counts
                .into_iter()
                .map(|(k, c)| {
                    let s: f64 = c.iter().sum();
                    (k, c.iter().map(|x| x / s).collect())
                })
                .collect();
            strata.sort_by(|a, b| {
                a.0.iter()
                    .zip(&b.0)
                    .map(|(x, y)| label_cmp(x, y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            GFit::Empirical { vars, strata }
        }
        Family::Ols => return Err(Error::Config("the ols family cannot model action probabilities".into())),
    };
    Ok(StageG {
        actions: actions.to_vec(),
        levels,
        fit,
    })
}

impl StageG {
    pub fn predict(&self, h: &HistoryTable) -> Result<StageProbs> {
        let n = h.nrows();
        let m = self.actions.len();
        let mut unseen = 0;
        let p = match &self.fit {
            GFit::Constant => vec![vec![1.0]; n],
            GFit::Logistic { design, columns, fit } => {
                let d = design_for(design, h, Some(&self.levels))?;
                check_columns(columns, &d)?;
                logistic_predict(&d.x, &fit.coef).into_iter().map(|q| vec![1.0 - q, q]).collect()
            }
            GFit::Multinomial { design, columns, fit } => {
                let d = design_for(design, h, Some(&self.levels))?;
                check_columns(columns, &d)?;
                multinomial_predict(&d.x, &fit.coef)
            }
            GFit::Empirical { vars, strata } => {
                let lookup: HashMap<&[String], &Vec<f64>> = strata.iter().map(|(k, v)| (k.as_slice(), v)).collect();
                let mut out = Vec::with_capacity(n);
                for r in 0..n {
                    let key = stratum_key(h, vars, r)?;
                    match lookup.get(key.as_slice()) {
                        Some(v) => out.push((*v).clone()),
                        None => {
                            unseen += 1;
                            out.push(vec![1.0 / m as f64; m]);
                        }
                    }
                }
                out
            }
        };
        Ok(StageProbs {
            actions: self.actions.clone(),
            p,
            unseen,
        })
    }

    /// Whether the fit hit complete or quasi-complete separation.
    pub fn separation(&self) -> bool {
        match &self.fit {
            GFit::Logistic { fit, .. } => fit.separation,
            GFit::Multinomial { fit, .. } => fit.separation,
            _ => false,
        }
    }
}

fn check_columns(expected: &[String], d: &DesignMatrix) -> Result<()> {
    if expected != d.names.as_slice() {
        return Err(Error::Schema(format!(
            "design columns {:?} do not match the fitted columns {:?}",
            d.names, expected
        )));
    }
    Ok(())
}

fn live_training_rows(h: &HistoryTable, train: &[bool]) -> Vec<usize> {
    (0..h.nrows())
        .filter(|&r| !h.degenerate[r] && train[h.subjects[r]])
        .collect()
}

impl GModel {
    pub fn stage(&self, k: usize) -> &StageG {
        if self.pooled {
            &self.stages[0]
        } else {
            &self.stages[k - 1]
        }
    }

    /// Probabilities at stage `k` for the rows of `h`, which must be a history of
    /// the model's kind.
    pub fn predict(&self, h: &HistoryTable, k: usize) -> Result<StageProbs> {
        self.stage(k).predict(h).map_err(|e| e.context(format!("stage {k} action model")))
    }

    /// Probabilities at stage `k` for every subject (degenerate rows included,
    /// where the default action has probability one).
    pub fn predict_all(&self, hs: &Histories, k: usize) -> Result<StageProbs> {
        let h = hs.get(self.history, k);
        let live = h.live_rows();
        let pr = self.predict(&h.filter(&live), k)?;
        let mut p = vec![Vec::new(); h.nrows()];
        let mut actions = pr.actions.clone();
        let dead: Vec<usize> = (0..h.nrows()).filter(|&r| h.degenerate[r]).collect();
        for r in &dead {
            if !actions.contains(&h.actions[*r]) {
                actions.push(h.actions[*r].clone());
            }
        }
        for (j, &r) in live.iter().enumerate() {
            let mut row = pr.p[j].clone();
            row.resize(actions.len(), 0.0);
            p[r] = row;
        }
        for &r in &dead {
            let mut row = vec![0.0; actions.len()];
            row[actions.iter().position(|a| a == &h.actions[r]).expect("added above")] = 1.0;
            p[r] = row;
        }
        Ok(StageProbs {
            actions,
            p,
            unseen: pr.unseen,
        })
    }

    pub fn any_separation(&self) -> bool {
        self.stages.iter().any(StageG::separation)
    }
}

/// Fit a g-model on the subjects flagged in `train`.
pub fn fit_g_model(pd: &PolicyData, hs: &Histories, specs: &[ModelSpec], train: &[bool]) -> Result<GModel> {
    let k = pd.max_stages();
    let specs = stage_specs(specs, k, "g")?;
    let history = specs[0].history;
    if specs.iter().any(|s| s.history != history) {
        return Err(Error::Config("all g models must use the same history kind".into()));
    }
    let training: Vec<usize> = (0..pd.n()).filter(|&i| train[i]).collect();
    if specs[0].pooled {
        if history != HistoryKind::State {
            return Err(Error::Config("a pooled g model requires the state history".into()));
        }
        let parts: Vec<HistoryTable> = (1..=k)
            .map(|s| {
                let h = hs.get(history, s);
                h.filter(&live_training_rows(h, train))
            })
            .collect();
        let stacked = HistoryTable::stack(&parts)?;
        let actions: Vec<String> = pd
            .action_set()
            .iter()
            .filter(|a| pd.stage_action_sets().iter().any(|s| s.contains(a)))
            .cloned()
            .collect();
        let sg = fit_stage_g(&specs[0], &stacked, &actions).map_err(|e| e.context("pooled action model"))?;
        return Ok(GModel {
            history,
            pooled: true,
            stages: vec![sg],
            training,
        });
    }
    let mut stages = Vec::with_capacity(k);
    for (s, spec) in specs.iter().enumerate() {
        let h = hs.get(history, s + 1);
        let sub = h.filter(&live_training_rows(h, train));
        let sg = fit_stage_g(spec, &sub, pd.stage_action_set(s + 1))
            .map_err(|e| e.context(format!("stage {} action model", s + 1)))?;
        stages.push(sg);
    }
    Ok(GModel {
        history,
        pooled: false,
        stages,
        training,
    })
}

/// Residual outcome model for one stage, with the action as a design variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QModel {
    pub stage: usize,
    pub history: HistoryKind,
    pub design: DesignSpec,
    pub columns: Vec<String>,
    pub actions: Vec<String>,
    pub levels: BTreeMap<String, Vec<String>>,
    pub fit: LinearFit,
    #[serde(skip)]
    pub training: Vec<usize>,
}

impl QModel {
    /// Predictions with every row's action set to `action`.
    pub fn predict(&self, h: &HistoryTable, action: &str) -> Result<Vec<f64>> {
        let acts = vec![action.to_string(); h.nrows()];
        self.predict_actions(h, &acts)
    }

    pub fn predict_actions(&self, h: &HistoryTable, actions: &[String]) -> Result<Vec<f64>> {
        let d = build_design(
            &self.design,
            h,
            Some(ActionColumn {
                values: actions,
                levels: &self.actions,
            }),
            Some(&self.levels),
        )
        .map_err(|e| e.context(format!("stage {} outcome model", self.stage)))?;
        check_columns(&self.columns, &d)?;
        Ok(linear_predict(&d.x, &self.fit.coef))
    }
}

/// Fit the stage-`k` outcome model on the live training rows, regressing `target`
/// (one value per subject) on the history and the observed action.
pub fn fit_q_model(
    pd: &PolicyData,
    hs: &Histories,
    k: usize,
    target: &[f64],
    spec: &ModelSpec,
    train: &[bool],
) -> Result<QModel> {
    if spec.family != Family::Ols {
        return Err(Error::Config("outcome models use the ols family".into()));
    }
    let h = hs.get(spec.history, k);
    let rows = live_training_rows(h, train);
    let sub = h.filter(&rows);
    let parsed = spec.parsed()?.resolve(sub.names());
    let levels = categorical_levels(&sub, &parsed);
    let actions = pd.stage_action_set(k).to_vec();
    let d = build_design(
        &parsed,
        &sub,
        Some(ActionColumn {
            values: &sub.actions,
            levels: &actions,
        }),
        Some(&levels),
    )
    .map_err(|e| e.context(format!("stage {k} outcome model")))?;
    let y: Vec<f64> = sub.subjects.iter().map(|&i| target[i]).collect();
    let fit = fit_ols(&d.x, &y, None).map_err(|e| e.context(format!("stage {k} outcome model")))?;
    Ok(QModel {
        stage: k,
        history: spec.history,
        design: parsed,
        columns: d.names,
        actions,
        levels,
        fit,
        training: (0..pd.n()).filter(|&i| train[i]).collect(),
    })
}

/// Expand Q specs to one per stage.
pub fn q_stage_specs(specs: &[ModelSpec], k: usize) -> Result<Vec<ModelSpec>> {
    if specs.iter().any(|s| s.pooled) {
        return Err(Error::Config("outcome models cannot be pooled".into()));
    }
    stage_specs(specs, k, "Q")
}

/// Subject-to-fold map for cross-fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub ids: Vec<String>,
    /// Fold index (0-based) of each id, aligned with `ids`.
    pub fold_of: Vec<usize>,
    pub m: usize,
    pub seed: u64,
}

impl FoldAssignment {
    /// Mask of subjects used for training when fold `f` is held out. With a single
    /// fold every subject trains and is evaluated.
    pub fn train_mask(&self, f: usize) -> Vec<bool> {
        if self.m == 1 {
            return vec![true; self.ids.len()];
        }
        self.fold_of.iter().map(|&x| x != f).collect()
    }

    pub fn test_rows(&self, f: usize) -> Vec<usize> {
        (0..self.ids.len()).filter(|&i| self.fold_of[i] == f).collect()
    }

    pub fn train_rows(&self, f: usize) -> Vec<usize> {
        let mask = self.train_mask(f);
        (0..self.ids.len()).filter(|&i| mask[i]).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.m];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Deterministic `M`-fold split: ids are ordered canonically, shuffled with a
/// seeded ChaCha stream and dealt round-robin.
pub fn make_folds(ids: &[String], m: usize, seed: u64) -> Result<FoldAssignment> {
    if m == 0 {
        return Err(Error::Range("number of folds must be at least 1".into()));
    }
    if m > ids.len() {
        return Err(Error::Range(format!("{m} folds for {} ids", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| label_cmp(&ids[a], &ids[b]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0; ids.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % m;
    }
    Ok(FoldAssignment {
        ids: ids.to_vec(),
        fold_of,
        m,
        seed,
    })
}

/// One g-model per fold, each trained on the complement of its fold.
pub fn fit_g(pd: &PolicyData, specs: &[ModelSpec], folds: &FoldAssignment) -> Result<Vec<GModel>> {
    let hs = Histories::new(pd)?;
    (0..folds.m)
        .map(|f| fit_g_model(pd, &hs, specs, &folds.train_mask(f)).map_err(|e| e.context(format!("fold {}", f + 1))))
        .collect()
}

/// One stage-`k` Q-model per fold, each trained on the complement of its fold.
pub fn fit_q_stage(
    pd: &PolicyData,
    k: usize,
    pseudo_outcome: &[f64],
    spec: &ModelSpec,
    folds: &FoldAssignment,
) -> Result<Vec<QModel>> {
    if k == 0 || k > pd.max_stages() {
        return Err(Error::Range(format!("stage {k} outside 1..={}", pd.max_stages())));
    }
    let hs = Histories::new(pd)?;
    (0..folds.m)
        .map(|f| {
            fit_q_model(pd, &hs, k, pseudo_outcome, spec, &folds.train_mask(f))
                .map_err(|e| e.context(format!("fold {}", f + 1)))
        })
        .collect()
}

/// Empirical probability model over categorical strata, fitted on all data.
pub fn fit_g_empir(pd: &PolicyData, formula: &str, history: HistoryKind, pooled: bool) -> Result<GModel> {
    let hs = Histories::new(pd)?;
    let spec = ModelSpec::new(Family::Empirical, formula, history, pooled);
    fit_g_model(pd, &hs, &[spec], &vec![true; pd.n()])
}

/// Column of `h` as labels (for strata and tables).
pub fn labels_of(h: &HistoryTable, var: &str) -> Result<Vec<Option<String>>> {
    Ok(h.column_or_err(var)?.values.iter().map(Value::as_label).collect())
}
