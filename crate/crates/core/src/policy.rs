//! Policies: per-stage rules mapping histories to actions, realistic action sets
//! and JSON serialization.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{get_history, HistoryKind, HistoryTable, PolicyData, StageSel};
use crate::design::{build_design, DesignSpec};
use crate::error::{Error, Result};
use crate::glm::linear_predict;
use crate::nuisance::{QModel, StageG, StageProbs};
use crate::table::Value;
use crate::tree::{PolicyTree, TreeFeatures};

/// Version of the policy JSON format.
pub const POLICY_FORMAT_VERSION: u32 = 1;

/// Stage-`k` histories of both kinds for the same rows.
#[derive(Debug, Clone, Copy)]
pub struct StageInput<'a> {
    pub full: &'a HistoryTable,
    pub state: &'a HistoryTable,
}

impl<'a> StageInput<'a> {
    /// Ad-hoc rows: one table serves both history kinds.
    pub fn adhoc(h: &'a HistoryTable) -> Self {
        StageInput { full: h, state: h }
    }

    pub fn get(&self, kind: HistoryKind) -> &'a HistoryTable {
        match kind {
            HistoryKind::Full => self.full,
            HistoryKind::State => self.state,
        }
    }

    pub fn nrows(&self) -> usize {
        self.state.nrows()
    }

    pub fn filter(&self, rows: &[usize]) -> (HistoryTable, HistoryTable) {
        (self.full.filter(rows), self.state.filter(rows))
    }
}

pub type CustomRule = Arc<dyn Fn(&StageInput) -> Result<Vec<String>> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub key: Vec<String>,
    pub action: String,
}

/// Linear predictor on a history, as used by QV and blip models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScore {
    pub history: HistoryKind,
    pub design: DesignSpec,
    pub columns: Vec<String>,
    #[serde(default)]
    pub levels: BTreeMap<String, Vec<String>>,
    pub coef: Vec<f64>,
}

impl LinearScore {
    pub fn predict(&self, h: &HistoryTable) -> Result<Vec<f64>> {
        let d = build_design(&self.design, h, None, Some(&self.levels))?;
        if d.names != self.columns {
            return Err(Error::Schema(format!(
                "design columns {:?} do not match the fitted columns {:?}",
                d.names, self.columns
            )));
        }
        Ok(linear_predict(&d.x, &self.coef))
    }
}

/// Per-action scores whose argmax is the recommended action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Scorer {
    /// Outcome model evaluated at each action.
    Q { model: QModel },
    /// One regression per action.
    Qv { models: Vec<LinearScore> },
    /// Contrast of the second action against the first.
    Blip { model: LinearScore },
    /// Tree recommendation as a one-hot score.
    Tree { tree: PolicyTree, features: TreeFeatures },
}

impl Scorer {
    /// `values[i][a]` for the rows of `input`.
    pub fn values(&self, input: &StageInput, actions: &[String]) -> Result<Vec<Vec<f64>>> {
        let n = input.nrows();
        match self {
            Scorer::Q { model } => {
                let h = input.get(model.history);
                let cols = actions
                    .iter()
                    .map(|a| model.predict(h, a))
                    .collect::<Result<Vec<_>>>()?;
                Ok((0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
            }
            Scorer::Qv { models } => {
                let cols = models
                    .iter()
                    .map(|m| m.predict(input.get(m.history)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
            }
            Scorer::Blip { model } => {
                let b = model.predict(input.get(model.history))?;
                Ok(b.into_iter().map(|v| vec![0.0, v]).collect())
            }
            Scorer::Tree { tree, features } => {
                let rows = features.rows(input.get(features.history))?;
                Ok(rows
                    .iter()
                    .map(|x| {
                        let rec = tree.predict_row(x);
                        actions.iter().map(|a| if a == rec { 1.0 } else { 0.0 }).collect()
                    })
                    .collect())
            }
        }
    }
}

/// Action-probability component used to restrict recommendations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealisticG {
    pub history: HistoryKind,
    pub model: StageG,
}

/// A learned stage rule: argmax of its scores over the realistic actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedRule {
    pub learner: String,
    pub stage: usize,
    pub actions: Vec<String>,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub realistic: Option<RealisticG>,
    pub scorer: Scorer,
}

impl LearnedRule {
    pub fn apply(&self, input: &StageInput) -> Result<Vec<String>> {
        let values = self.scorer.values(input, &self.actions)?;
        let allowed = match (&self.realistic, self.alpha > 0.0) {
            (Some(g), true) => {
                let h = input.get(g.history);
                let probs = g.model.predict(h)?;
                Some(realistic_set(&probs, &h.ids, self.stage, self.alpha)?)
            }
            _ => None,
        };
        choose_actions(&values, &self.actions, allowed.as_ref())
    }
}

/// Earliest action with the largest score among the allowed ones.
pub fn choose_actions(
    values: &[Vec<f64>],
    actions: &[String],
    allowed: Option<&RealisticActionSet>,
) -> Result<Vec<String>> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut best: Option<(usize, f64)> = None;
            for (a, &x) in v.iter().enumerate() {
                if let Some(ras) = allowed {
                    if !ras.allowed[i].contains(&actions[a]) {
                        continue;
                    }
                }
                if best.map_or(true, |(_, b)| x > b) {
                    best = Some((a, x));
                }
            }
            best.map(|(a, _)| actions[a].clone()).ok_or_else(|| {
                Error::Positivity(format!(
                    "no realistic action among {actions:?} for id '{}'",
                    allowed.map_or("", |r| r.ids[i].as_str())
                ))
            })
        })
        .collect()
}

/// Rule for a single stage.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StageRule {
    Static {
        action: String,
    },
    /// `action_if_positive` when `intercept + Σ coef·var > 0`, else `action_else`.
    LinearThreshold {
        #[serde(default)]
        history: HistoryKind,
        coefficients: BTreeMap<String, f64>,
        #[serde(default)]
        intercept: f64,
        action_if_positive: String,
        action_else: String,
    },
    /// Lookup by the labels of `vars`; unmatched strata use `default`.
    Table {
        #[serde(default)]
        history: HistoryKind,
        vars: Vec<String>,
        table: Vec<TableEntry>,
        #[serde(default)]
        default: Option<String>,
    },
    Learned(LearnedRule),
    #[serde(skip)]
    Custom(CustomRule),
}

impl fmt::Debug for StageRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageRule::Static { action } => write!(f, "Static({action})"),
            StageRule::LinearThreshold { coefficients, intercept, .. } => {
                write!(f, "LinearThreshold({coefficients:?}, {intercept})")
            }
            StageRule::Table { vars, .. } => write!(f, "Table({vars:?})"),
            StageRule::Learned(l) => write!(f, "Learned({}, stage {})", l.learner, l.stage),
            StageRule::Custom(_) => write!(f, "Custom"),
        }
    }
}

fn numeric_column(h: &HistoryTable, var: &str) -> Result<Vec<f64>> {
    h.column_or_err(var)?
        .values
        .iter()
        .enumerate()
        .map(|(r, v)| match v {
            Value::Num(x) => Ok(*x),
            Value::Missing => Err(Error::Schema(format!("variable '{var}' is missing for id '{}'", h.ids[r]))),
            Value::Text(t) => t
                .parse::<f64>()
                .map_err(|_| Error::Schema(format!("variable '{var}' is not numeric"))),
        })
        .collect()
}

impl StageRule {
    pub fn static_action(action: &str) -> Self {
        StageRule::Static {
            action: action.to_string(),
        }
    }

    pub fn custom<F>(f: F) -> Self
    where
        F: Fn(&StageInput) -> Result<Vec<String>> + Send + Sync + 'static,
    {
        StageRule::Custom(Arc::new(f))
    }

    /// Actions for every row of `input`.
    pub fn apply(&self, input: &StageInput) -> Result<Vec<String>> {
        let n = input.nrows();
        let out = match self {
            StageRule::Static { action } => vec![action.clone(); n],
            StageRule::LinearThreshold {
                history,
                coefficients,
                intercept,
                action_if_positive,
                action_else,
            } => {
                let h = input.get(*history);
                let mut score = vec![*intercept; n];
                for (var, c) in coefficients {
                    for (s, x) in score.iter_mut().zip(numeric_column(h, var)?) {
                        *s += c * x;
                    }
                }
                score
                    .into_iter()
                    .map(|s| if s > 0.0 { action_if_positive.clone() } else { action_else.clone() })
                    .collect()
            }
            StageRule::Table {
                history,
                vars,
                table,
                default,
            } => {
                let h = input.get(*history);
                let cols = vars
                    .iter()
                    .map(|v| h.column_or_err(v))
                    .collect::<Result<Vec<_>>>()?;
                (0..n)
                    .map(|r| {
                        let key: Vec<Option<String>> = cols.iter().map(|c| c.values[r].as_label()).collect();
                        table
                            .iter()
                            .find(|e| e.key.iter().zip(&key).all(|(a, b)| b.as_deref() == Some(a.as_str())))
                            .map(|e| e.action.clone())
                            .or_else(|| default.clone())
                            .ok_or_else(|| {
                                Error::Domain(format!("no table entry for {key:?} (id '{}')", h.ids[r]))
                            })
                    })
                    .collect::<Result<_>>()?
            }
            StageRule::Learned(l) => l.apply(input)?,
            StageRule::Custom(f) => f(input)?,
        };
        if out.len() != n {
            return Err(Error::Structure(format!("rule returned {} actions for {n} rows", out.len())));
        }
        Ok(out)
    }
}

/// A named policy with one rule per stage, or one rule used at every stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Policy {
    pub name: String,
    pub rules: Vec<StageRule>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// Actions per `(id, stage)`, ordered by subject then stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTable {
    pub ids: Vec<String>,
    pub stages: Vec<usize>,
    pub subjects: Vec<usize>,
    pub actions: Vec<String>,
}

impl ActionTable {
    /// Stage-`k` action of every subject (`None` past a subject's last stage).
    pub fn stage(&self, k: usize, n: usize) -> Vec<Option<String>> {
        let mut out = vec![None; n];
        for r in 0..self.ids.len() {
            if self.stages[r] == k {
                out[self.subjects[r]] = Some(self.actions[r].clone());
            }
        }
        out
    }

    /// Stage-`k` actions of all subjects, which must all reach stage `k`.
    pub fn stage_full(&self, k: usize, n: usize) -> Result<Vec<String>> {
        self.stage(k, n)
            .into_iter()
            .map(|a| a.ok_or_else(|| Error::Structure(format!("some subjects have no stage {k}"))))
            .collect()
    }

    pub fn to_table(&self) -> crate::table::Table {
        let mut t = crate::table::Table::new();
        t.push_column("id", self.ids.iter().cloned().map(Value::Text).collect())
            .expect("fresh table");
        t.push_column("stage", self.stages.iter().map(|&s| Value::Num(s as f64)).collect())
            .expect("fresh table");
        t.push_column("d", self.actions.iter().cloned().map(Value::Text).collect())
            .expect("fresh table");
        t
    }
}

impl Policy {
    pub fn new(name: &str, rules: Vec<StageRule>) -> Self {
        Policy {
            name: name.to_string(),
            rules,
            metadata: BTreeMap::new(),
        }
    }

    pub fn static_policy(name: &str, action: &str) -> Self {
        Self::new(name, vec![StageRule::static_action(action)])
    }

    /// Rule for stage `k` (1-based).
    pub fn rule(&self, k: usize, stages: usize) -> Result<&StageRule> {
        match self.rules.len() {
            1 => Ok(&self.rules[0]),
            n if n == stages => Ok(&self.rules[k - 1]),
            n => Err(Error::Config(format!(
                "policy '{}' has {n} rules for {stages} stages",
                self.name
            ))),
        }
    }

    /// Apply stage `k`'s rule to the histories, leaving degenerate rows at their
    /// observed action and checking membership in the stage action set.
    pub fn apply_stage(
        &self,
        k: usize,
        stages: usize,
        input: &StageInput,
        stage_actions: Option<&[String]>,
    ) -> Result<Vec<String>> {
        let rule = self.rule(k, stages)?;
        let live = input.state.live_rows();
        let mut out = input.state.actions.clone();
        if !live.is_empty() {
            let rec = if live.len() == input.nrows() {
                rule.apply(input)
            } else {
                let (full, state) = input.filter(&live);
                rule.apply(&StageInput {
                    full: &full,
                    state: &state,
                })
            }
            .map_err(|e| e.context(format!("policy '{}' stage {k}", self.name)))?;
            for (&r, a) in live.iter().zip(rec) {
                if let Some(set) = stage_actions {
                    if !set.contains(&a) {
                        return Err(Error::Domain(format!(
                            "policy '{}' chose '{a}' at stage {k}, outside {set:?}",
                            self.name
                        )));
                    }
                }
                out[r] = a;
            }
        }
        Ok(out)
    }

    /// Stage-`k` rule on ad-hoc history rows.
    pub fn apply_rows(&self, k: usize, h: &HistoryTable) -> Result<Vec<String>> {
        let stages = if self.rules.len() == 1 { k.max(1) } else { self.rules.len() };
        if k == 0 || k > stages {
            return Err(Error::Range(format!("stage {k} outside 1..={stages}")));
        }
        self.rule(k, stages)?.apply(&StageInput::adhoc(h))
    }
}

/// One action per `(id, stage)` of `pd`.
pub fn apply_policy(p: &Policy, pd: &PolicyData) -> Result<ActionTable> {
    let k_max = pd.max_stages();
    p.rule(1, k_max)?;
    let mut rows: Vec<(usize, usize, String, String)> = Vec::new();
    for k in 1..=k_max {
        let full = get_history(pd, StageSel::Stage(k), HistoryKind::Full)?;
        let state = get_history(pd, StageSel::Stage(k), HistoryKind::State)?;
        let acts = p.apply_stage(k, k_max, &StageInput { full: &full, state: &state }, Some(pd.stage_action_set(k)))?;
        for (r, a) in acts.into_iter().enumerate() {
            rows.push((state.subjects[r], k, state.ids[r].clone(), a));
        }
    }
    rows.sort_by_key(|r| (r.0, r.1));
    Ok(ActionTable {
        subjects: rows.iter().map(|r| r.0).collect(),
        stages: rows.iter().map(|r| r.1).collect(),
        ids: rows.iter().map(|r| r.2.clone()).collect(),
        actions: rows.into_iter().map(|r| r.3).collect(),
    })
}

/// Actions with probability above `alpha`, per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RealisticActionSet {
    pub alpha: f64,
    pub stage: usize,
    pub ids: Vec<String>,
    pub allowed: Vec<Vec<String>>,
}

pub fn realistic_set(probs: &StageProbs, ids: &[String], stage: usize, alpha: f64) -> Result<RealisticActionSet> {
    if !(0.0..0.5).contains(&alpha) {
        return Err(Error::Range(format!("alpha {alpha} outside [0, 0.5)")));
    }
    let allowed = probs
        .p
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let set: Vec<String> = probs
                .actions
                .iter()
                .zip(row)
                .filter(|(_, &p)| p > alpha)
                .map(|(a, _)| a.clone())
                .collect();
            if set.is_empty() {
                return Err(Error::Positivity(format!(
                    "no action has probability above {alpha} for id '{}' at stage {stage}",
                    ids[i]
                )));
            }
            Ok(set)
        })
        .collect::<Result<_>>()?;
    Ok(RealisticActionSet {
        alpha,
        stage,
        ids: ids.to_vec(),
        allowed,
    })
}

/// Replace unrealistic recommendations by the other action of a binary set.
/// Returns the actions and the number of replacements.
pub fn overrule_unrealistic(
    actions: &[String],
    ras: &RealisticActionSet,
    action_set: &[String],
) -> Result<(Vec<String>, usize)> {
    if action_set.len() != 2 {
        return Err(Error::Unsupported(format!(
            "overruling needs a binary action set, got {action_set:?}"
        )));
    }
    let mut count = 0;
    let out = actions
        .iter()
        .zip(&ras.allowed)
        .map(|(a, allowed)| {
            if allowed.contains(a) {
                a.clone()
            } else {
                count += 1;
                if action_set[0] == *a {
                    action_set[1].clone()
                } else {
                    action_set[0].clone()
                }
            }
        })
        .collect();
    Ok((out, count))
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    version: u32,
    policy: Policy,
}

pub fn serialize_policy(p: &Policy) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Out<'a> {
        version: u32,
        policy: &'a Policy,
    }
    serde_json::to_vec_pretty(&Out {
        version: POLICY_FORMAT_VERSION,
        policy: p,
    })
    .map_err(|e| Error::Format(format!("cannot serialize policy: {e}")))
}

pub fn deserialize_policy(bytes: &[u8]) -> Result<Policy> {
    let v: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("invalid policy JSON: {e}")))?;
    match v.get("version").and_then(serde_json::Value::as_u64) {
        Some(x) if x == u64::from(POLICY_FORMAT_VERSION) => {}
        Some(x) => {
            return Err(Error::Format(format!(
                "policy format version {x}, expected {POLICY_FORMAT_VERSION}"
            )))
        }
        None => return Err(Error::Format("policy JSON has no version".into())),
    }
    let f: PolicyFile =
        serde_json::from_value(v).map_err(|e| Error::Format(format!("invalid policy JSON: {e}")))?;
    Ok(f.policy)
}
