//! Staged trajectories, ingestion from wide and long tables, stage augmentation,
//! partial truncation and history extraction.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{label_cmp, sorted_levels, Table, Value};

/// Which history a model or rule sees at stage k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HistoryKind {
    /// `(B, X_1, A_1, ..., A_{k-1}, X_k)` with stage-suffixed names.
    Full,
    /// `(B, X_k)` with unsuffixed names.
    #[default]
    State,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub state: BTreeMap<String, Value>,
    pub reward: f64,
    pub action: String,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub baseline: BTreeMap<String, Value>,
    pub stages: Vec<StageRecord>,
    pub terminal_reward: f64,
}

impl Trajectory {
    /// Sum of all stage rewards plus the terminal reward.
    pub fn utility(&self) -> f64 {
        self.stages.iter().map(|s| s.reward).sum::<f64>() + self.terminal_reward
    }

    /// Number of non-degenerate stages.
    pub fn observed_stages(&self) -> usize {
        self.stages.iter().filter(|s| !s.degenerate).count()
    }
}

/// A validated collection of trajectories plus the schema they share.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyData {
    trajectories: Vec<Trajectory>,
    action_set: Vec<String>,
    stage_action_sets: Vec<Vec<String>>,
    max_stages: usize,
    covariates: Vec<String>,
    covariate_schema: Vec<Vec<String>>,
    baseline_schema: Vec<String>,
    augmented: bool,
    levels: BTreeMap<String, Vec<String>>,
}

/// Column layout of a wide table: one row per subject.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WideSchema {
    #[serde(default)]
    pub id: Option<String>,
    pub actions: Vec<String>,
    /// Covariate name and its per-stage column (`None` when absent at that stage).
    #[serde(default)]
    pub covariates: Vec<(String, Vec<Option<String>>)>,
    pub utility: Vec<String>,
    #[serde(default)]
    pub baseline: Vec<String>,
}

/// Column layout of a long table: `K* + 1` rows per subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongSchema {
    pub id: String,
    pub stage: String,
    pub event: String,
    pub action: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    pub utility: String,
    #[serde(default)]
    pub baseline: Vec<String>,
}

impl PolicyData {
    /// Validate and canonicalize trajectories. Subjects are sorted by id, covariate
    /// types are inferred over the whole data (numeric when every non-missing cell
    /// parses as a number) and the action set is inferred when not given.
    pub fn new(
        mut trajectories: Vec<Trajectory>,
        action_set: Option<Vec<String>>,
        covariates: Vec<String>,
        covariate_schema: Vec<Vec<String>>,
        baseline_schema: Vec<String>,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Structure("no trajectories".into()));
        }
        trajectories.sort_by(|a, b| label_cmp(&a.id, &b.id));
        for w in trajectories.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Key(format!("duplicate id '{}'", w[0].id)));
            }
        }
        let mut max_stages = 0;
        for t in &trajectories {
            if t.stages.is_empty() {
                return Err(Error::Structure(format!("id '{}' has no stages", t.id)));
            }
            for (j, s) in t.stages.iter().enumerate() {
                if s.stage != j + 1 {
                    return Err(Error::Structure(format!(
                        "id '{}': stages are not numbered 1..K contiguously",
                        t.id
                    )));
                }
                if !s.reward.is_finite() {
                    return Err(Error::Value(format!("id '{}' stage {}: non-finite reward", t.id, s.stage)));
                }
                if s.degenerate && (!s.state.is_empty() || s.reward != 0.0) {
                    return Err(Error::Structure(format!(
                        "id '{}' stage {}: degenerate stage with state or reward",
                        t.id, s.stage
                    )));
                }
            }
            if !t.terminal_reward.is_finite() {
                return Err(Error::Value(format!("id '{}': non-finite terminal reward", t.id)));
            }
            max_stages = max_stages.max(t.stages.len());
        }

        let observed: BTreeSet<&str> = trajectories
            .iter()
            .flat_map(|t| t.stages.iter().map(|s| s.action.as_str()))
            .collect();
        let action_set = match action_set {
            Some(a) => a,
            None => sorted_levels(observed.iter().map(|s| s.to_string())),
        };
        for t in &trajectories {
            for s in &t.stages {
                if !action_set.contains(&s.action) {
                    return Err(Error::Domain(format!(
                        "id '{}' stage {}: action '{}' not in action set",
                        t.id, s.stage, s.action
                    )));
                }
            }
        }
        let stage_action_sets = (1..=max_stages)
            .map(|k| {
                let seen: BTreeSet<&str> = trajectories
                    .iter()
                    .filter_map(|t| t.stages.get(k - 1))
                    .filter(|s| !s.degenerate)
                    .map(|s| s.action.as_str())
                    .collect();
                action_set.iter().filter(|a| seen.contains(a.as_str())).cloned().collect()
            })
            .collect();

        let mut covariate_schema = covariate_schema;
        covariate_schema.resize(max_stages, covariates.clone());

        let mut levels = BTreeMap::new();
        for name in covariates.iter().chain(baseline_schema.iter()) {
            let is_baseline = baseline_schema.contains(name);
            let cells = trajectories.iter().flat_map(|t| {
                let b = if is_baseline { t.baseline.get(name) } else { None };
                b.into_iter().chain(t.stages.iter().filter_map(|s| s.state.get(name)))
            });
            let mut numeric = true;
            let mut labels = BTreeSet::new();
            for v in cells {
                match v {
                    Value::Missing => {}
                    Value::Num(_) => {}
                    Value::Text(s) => {
                        if s.trim().parse::<f64>().is_err() {
                            numeric = false;
                        }
                        labels.insert(s.clone());
                    }
                }
            }
            if !numeric {
                let mut all = labels;
                for t in &trajectories {
                    let vals = t.baseline.get(name).into_iter().chain(t.stages.iter().filter_map(|s| s.state.get(name)));
                    for v in vals {
                        if let Value::Num(x) = v {
                            all.insert(crate::table::format_num(*x));
                        }
                    }
                }
                levels.insert(name.clone(), sorted_levels(all));
            }
        }
        let convert = |v: &mut Value, categorical: bool| {
            *v = match std::mem::replace(v, Value::Missing) {
                Value::Missing => Value::Missing,
                other if categorical => Value::Text(other.as_label().unwrap_or_default()),
                other => match other.as_f64() {
                    Some(x) => Value::Num(x),
                    None => Value::Missing,
                },
            };
        };
        for t in &mut trajectories {
            for (name, v) in t.baseline.iter_mut() {
                convert(v, levels.contains_key(name));
            }
            for s in &mut t.stages {
                for (name, v) in s.state.iter_mut() {
                    convert(v, levels.contains_key(name));
                }
            }
        }

        Ok(PolicyData {
            trajectories,
            action_set,
            stage_action_sets,
            max_stages,
            covariates,
            covariate_schema,
            baseline_schema,
            augmented: false,
            levels,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.trajectories.iter().map(|t| t.id.clone()).collect()
    }

    pub fn action_set(&self) -> &[String] {
        &self.action_set
    }

    /// Observed (non-degenerate) actions at stage `k` (1-based), in action-set order.
    pub fn stage_action_set(&self, k: usize) -> &[String] {
        &self.stage_action_sets[k - 1]
    }

    pub fn stage_action_sets(&self) -> &[Vec<String>] {
        &self.stage_action_sets
    }

    pub fn max_stages(&self) -> usize {
        self.max_stages
    }

    pub fn covariates(&self) -> &[String] {
        &self.covariates
    }

    pub fn covariate_schema(&self) -> &[Vec<String>] {
        &self.covariate_schema
    }

    pub fn baseline_schema(&self) -> &[String] {
        &self.baseline_schema
    }

    pub fn augmented(&self) -> bool {
        self.augmented
    }

    /// Categorical levels of covariates and baseline variables (numeric ones are absent).
    pub fn levels(&self) -> &BTreeMap<String, Vec<String>> {
        &self.levels
    }

    /// True when every trajectory has exactly `max_stages` stage records.
    pub fn is_uniform(&self) -> bool {
        self.trajectories.iter().all(|t| t.stages.len() == self.max_stages)
    }

    pub fn utility(&self) -> Vec<f64> {
        self.trajectories.iter().map(Trajectory::utility).collect()
    }

    /// Subjects by index, keeping schema, action sets and level registry.
    pub fn subset(&self, rows: &[usize]) -> PolicyData {
        PolicyData {
            trajectories: rows.iter().map(|&i| self.trajectories[i].clone()).collect(),
            ..self.clone_schema()
        }
    }

    fn clone_schema(&self) -> PolicyData {
        PolicyData {
            trajectories: Vec::new(),
            action_set: self.action_set.clone(),
            stage_action_sets: self.stage_action_sets.clone(),
            max_stages: self.max_stages,
            covariates: self.covariates.clone(),
            covariate_schema: self.covariate_schema.clone(),
            baseline_schema: self.baseline_schema.clone(),
            augmented: self.augmented,
            levels: self.levels.clone(),
        }
    }

    /// Index of subject `id`, if present.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.trajectories
            .binary_search_by(|t| label_cmp(&t.id, id))
            .ok()
    }

    /// Require a fixed number of stages per subject (augmented or naturally uniform).
    pub fn require_uniform(&self) -> Result<()> {
        if self.is_uniform() {
            Ok(())
        } else {
            Err(Error::Structure(
                "trajectories have different numbers of stages; augment the stages first".into(),
            ))
        }
    }

    /// Baseline value of `name` per subject.
    pub fn baseline_column(&self, name: &str) -> Result<Vec<Value>> {
        if !self.baseline_schema.iter().any(|b| b == name) {
            return Err(Error::Schema(format!("'{name}' is not a baseline variable")));
        }
        Ok(self
            .trajectories
            .iter()
            .map(|t| t.baseline.get(name).cloned().unwrap_or(Value::Missing))
            .collect())
    }

    /// Tabulate action counts per stage, in action-set order.
    pub fn action_counts(&self) -> Vec<Vec<usize>> {
        (1..=self.max_stages)
            .map(|k| {
                self.action_set
                    .iter()
                    .map(|a| {
                        self.trajectories
                            .iter()
                            .filter_map(|t| t.stages.get(k - 1))
                            .filter(|s| !s.degenerate && &s.action == a)
                            .count()
                    })
                    .collect()
            })
            .collect()
    }
}

fn cell<'a>(table: &'a Table, name: &str, row: usize) -> Result<&'a Value> {
    Ok(&table.column(name)?[row])
}

fn finite(v: &Value, what: &str) -> Result<f64> {
    match v.as_f64() {
        Some(x) if x.is_finite() => Ok(x),
        _ => Err(Error::Value(format!("{what} is not a finite number"))),
    }
}

/// One trajectory per row with `K = actions.len()` stages.
pub fn ingest_wide(table: &Table, schema: &WideSchema) -> Result<PolicyData> {
    let k = schema.actions.len();
    if k == 0 {
        return Err(Error::Config("at least one action column is required".into()));
    }
    if schema.utility.len() != 1 && schema.utility.len() != k + 1 {
        return Err(Error::Config(format!(
            "utility needs 1 or {} columns, got {}",
            k + 1,
            schema.utility.len()
        )));
    }
    for (name, cols) in &schema.covariates {
        if cols.len() != k {
            return Err(Error::Config(format!(
                "covariate '{name}' lists {} columns for {k} stages",
                cols.len()
            )));
        }
    }
    let referenced = schema
        .actions
        .iter()
        .chain(schema.utility.iter())
        .chain(schema.baseline.iter())
        .chain(schema.id.iter())
        .chain(schema.covariates.iter().flat_map(|(_, c)| c.iter().flatten()));
    for name in referenced {
        table.column(name)?;
    }

    let mut trajectories = Vec::with_capacity(table.nrows());
    for r in 0..table.nrows() {
        let id = match &schema.id {
            Some(c) => cell(table, c, r)?
                .as_label()
                .ok_or_else(|| Error::Value(format!("row {r}: missing id")))?,
            None => (r + 1).to_string(),
        };
        let baseline = schema
            .baseline
            .iter()
            .map(|b| Ok((b.clone(), cell(table, b, r)?.clone())))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let mut stages = Vec::with_capacity(k);
        for j in 0..k {
            let action = cell(table, &schema.actions[j], r)?
                .as_label()
                .ok_or_else(|| Error::Value(format!("row {r}: missing action in '{}'", schema.actions[j])))?;
            let mut state = BTreeMap::new();
            for (name, cols) in &schema.covariates {
                let v = match &cols[j] {
                    Some(c) => cell(table, c, r)?.clone(),
                    None => Value::Missing,
                };
                state.insert(name.clone(), v);
            }
            let reward = if schema.utility.len() == 1 {
                0.0
            } else {
                finite(cell(table, &schema.utility[j], r)?, &format!("row {r} '{}'", schema.utility[j]))?
            };
            stages.push(StageRecord {
                stage: j + 1,
                state,
                reward,
                action,
                degenerate: false,
            });
        }
        let last = schema.utility.last().expect("checked above");
        let terminal_reward = finite(cell(table, last, r)?, &format!("row {r} '{last}'"))?;
        trajectories.push(Trajectory {
            id,
            baseline,
            stages,
            terminal_reward,
        });
    }
    let covariates: Vec<String> = schema.covariates.iter().map(|(n, _)| n.clone()).collect();
    let covariate_schema = (0..k)
        .map(|j| {
            schema
                .covariates
                .iter()
                .filter(|(_, cols)| cols[j].is_some())
                .map(|(n, _)| n.clone())
                .collect()
        })
        .collect();
    PolicyData::new(trajectories, None, covariates, covariate_schema, schema.baseline.clone())
}

/// Long layout: decision rows with `event = 0` and one terminal row with `event = 1`
/// per id. Baseline variables come from `baseline_table` keyed by the id column.
pub fn ingest_long(stage_table: &Table, baseline_table: Option<&Table>, schema: &LongSchema) -> Result<PolicyData> {
    for name in [&schema.id, &schema.stage, &schema.event, &schema.action, &schema.utility]
        .into_iter()
        .chain(schema.covariates.iter())
    {
        stage_table.column(name)?;
    }
    let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
    let mut order = Vec::new();
    for r in 0..stage_table.nrows() {
        let id = cell(stage_table, &schema.id, r)?
            .as_label()
            .ok_or_else(|| Error::Value(format!("row {r}: missing id")))?;
        groups
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id.clone());
                Vec::new()
            })
            .push(r);
    }

    let mut baseline_rows: HashMap<String, usize> = HashMap::new();
    if let Some(bt) = baseline_table {
        for name in std::iter::once(&schema.id).chain(schema.baseline.iter()) {
            bt.column(name)?;
        }
        for r in 0..bt.nrows() {
            let id = cell(bt, &schema.id, r)?
                .as_label()
                .ok_or_else(|| Error::Value(format!("baseline row {r}: missing id")))?;
            if baseline_rows.insert(id.clone(), r).is_some() {
                return Err(Error::Key(format!("duplicate baseline row for id '{id}'")));
            }
        }
    } else if !schema.baseline.is_empty() {
        return Err(Error::Schema("baseline variables given without a baseline table".into()));
    }

    let mut trajectories = Vec::with_capacity(order.len());
    for id in order {
        let rows = &groups[&id];
        let mut staged: Vec<(usize, usize)> = Vec::with_capacity(rows.len());
        for &r in rows {
            let s = finite(cell(stage_table, &schema.stage, r)?, &format!("row {r} stage"))?;
            if s < 1.0 || s.fract() != 0.0 {
                return Err(Error::Structure(format!("id '{id}': invalid stage number {s}")));
            }
            staged.push((s as usize, r));
        }
        staged.sort_unstable();
        for w in staged.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Key(format!("duplicate (id, stage) = ('{id}', {})", w[0].0)));
            }
        }
        for (j, (s, _)) in staged.iter().enumerate() {
            if *s != j + 1 {
                return Err(Error::Structure(format!("id '{id}': stages are not contiguous from 1")));
            }
        }
        let events: Vec<f64> = staged
            .iter()
            .map(|&(_, r)| finite(cell(stage_table, &schema.event, r)?, &format!("row {r} event")))
            .collect::<Result<_>>()?;
        let n_terminal = events.iter().filter(|&&e| e == 1.0).count();
        if n_terminal != 1 || *events.last().expect("non-empty group") != 1.0 {
            return Err(Error::Structure(format!(
                "id '{id}': expected a single terminal row (event = 1) after the decision rows"
            )));
        }
        if events.iter().any(|&e| e != 0.0 && e != 1.0) {
            return Err(Error::Structure(format!("id '{id}': event must be 0 or 1")));
        }
        if staged.len() < 2 {
            return Err(Error::Structure(format!("id '{id}' has no decision rows")));
        }
        let mut stages = Vec::with_capacity(staged.len() - 1);
        for &(s, r) in &staged[..staged.len() - 1] {
            let action = cell(stage_table, &schema.action, r)?
                .as_label()
                .ok_or_else(|| Error::Value(format!("id '{id}' stage {s}: missing action")))?;
            let state = schema
                .covariates
                .iter()
                .map(|c| Ok((c.clone(), cell(stage_table, c, r)?.clone())))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let reward = finite(cell(stage_table, &schema.utility, r)?, &format!("id '{id}' stage {s} reward"))?;
            stages.push(StageRecord {
                stage: s,
                state,
                reward,
                action,
                degenerate: false,
            });
        }
        let (_, tr) = staged[staged.len() - 1];
        let terminal_reward = finite(cell(stage_table, &schema.utility, tr)?, &format!("id '{id}' terminal reward"))?;
        let baseline = match baseline_table {
            Some(bt) => {
                let r = *baseline_rows
                    .get(&id)
                    .ok_or_else(|| Error::Key(format!("no baseline row for id '{id}'")))?;
                schema
                    .baseline
                    .iter()
                    .map(|b| Ok((b.clone(), cell(bt, b, r)?.clone())))
                    .collect::<Result<BTreeMap<_, _>>>()?
            }
            None => BTreeMap::new(),
        };
        trajectories.push(Trajectory {
            id,
            baseline,
            stages,
            terminal_reward,
        });
    }
    PolicyData::new(
        trajectories,
        None,
        schema.covariates.clone(),
        Vec::new(),
        schema.baseline.clone(),
    )
}

/// Pad every trajectory to the maximal number of stages with degenerate stages
/// taking `default_action`, no state and zero reward.
pub fn augment_stages(pd: &PolicyData, default_action: &str) -> Result<PolicyData> {
    if pd.augmented {
        return Err(Error::Structure("data are already augmented".into()));
    }
    if !pd.action_set.iter().any(|a| a == default_action) {
        return Err(Error::Domain(format!("default action '{default_action}' not in action set")));
    }
    let mut out = pd.clone();
    for t in &mut out.trajectories {
        for k in t.stages.len() + 1..=pd.max_stages {
            t.stages.push(StageRecord {
                stage: k,
                state: BTreeMap::new(),
                reward: 0.0,
                action: default_action.to_string(),
                degenerate: true,
            });
        }
    }
    out.augmented = true;
    Ok(out)
}

/// Keep stages `1..=k_tilde`; later rewards are folded into the terminal reward.
pub fn partial(pd: &PolicyData, k_tilde: usize) -> Result<PolicyData> {
    if k_tilde == 0 || k_tilde >= pd.max_stages {
        return Err(Error::Range(format!(
            "partial stage count must lie in 1..{}, got {k_tilde}",
            pd.max_stages
        )));
    }
    let mut out = pd.clone();
    for t in &mut out.trajectories {
        if t.stages.len() > k_tilde {
            let folded: f64 = t.stages[k_tilde..].iter().map(|s| s.reward).sum();
            t.terminal_reward += folded;
            t.stages.truncate(k_tilde);
        }
    }
    out.max_stages = k_tilde;
    out.stage_action_sets.truncate(k_tilde);
    out.covariate_schema.truncate(k_tilde);
    Ok(out)
}

/// Which stages a history table covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageScope {
    Single(usize),
    Pooled,
}

/// A history column: cells plus categorical levels (`None` for numeric columns).
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryColumn {
    pub values: Vec<Value>,
    pub levels: Option<Vec<String>>,
}

/// Histories keyed by `(id, stage)`, with the observed action of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryTable {
    pub ids: Vec<String>,
    pub stages: Vec<usize>,
    /// Subject index into the originating [`PolicyData`].
    pub subjects: Vec<usize>,
    pub actions: Vec<String>,
    pub degenerate: Vec<bool>,
    pub kind: HistoryKind,
    pub scope: StageScope,
    names: Vec<String>,
    columns: Vec<HistoryColumn>,
}

impl HistoryTable {
    /// History rows built from a raw table, e.g. ad-hoc rows for a single-stage rule.
    /// Columns whose cells all parse as numbers are numeric; others are categorical.
    pub fn from_table(table: &Table, stage: usize, kind: HistoryKind) -> Result<Self> {
        let n = table.nrows();
        let mut names = Vec::new();
        let mut columns = Vec::new();
        for name in table.names() {
            let col = table.column(name)?;
            let numeric = col.iter().all(|v| v.is_missing() || v.as_f64().is_some());
            let (values, levels) = if numeric {
                (col.iter().map(|v| v.as_f64().map_or(Value::Missing, Value::Num)).collect(), None)
            } else {
                let labels: Vec<Value> = col
                    .iter()
                    .map(|v| v.as_label().map_or(Value::Missing, Value::Text))
                    .collect();
                let lv = sorted_levels(col.iter().filter_map(Value::as_label));
                (labels, Some(lv))
            };
            names.push(name.clone());
            columns.push(HistoryColumn { values, levels });
        }
        Ok(HistoryTable {
            ids: (1..=n).map(|i| i.to_string()).collect(),
            stages: vec![stage; n],
            subjects: (0..n).collect(),
            actions: vec![String::new(); n],
            degenerate: vec![false; n],
            kind,
            scope: StageScope::Single(stage),
            names,
            columns,
        })
    }

    pub fn nrows(&self) -> usize {
        self.ids.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&HistoryColumn> {
        self.names.iter().position(|n| n == name).map(|i| &self.columns[i])
    }

    pub fn column_or_err(&self, name: &str) -> Result<&HistoryColumn> {
        self.column(name)
            .ok_or_else(|| Error::Schema(format!("variable '{name}' is not in the history")))
    }

    /// Select rows by position.
    pub fn filter(&self, rows: &[usize]) -> HistoryTable {
        let pick = |v: &[String]| rows.iter().map(|&r| v[r].clone()).collect::<Vec<_>>();
        HistoryTable {
            ids: pick(&self.ids),
            stages: rows.iter().map(|&r| self.stages[r]).collect(),
            subjects: rows.iter().map(|&r| self.subjects[r]).collect(),
            actions: pick(&self.actions),
            degenerate: rows.iter().map(|&r| self.degenerate[r]).collect(),
            kind: self.kind,
            scope: self.scope,
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| HistoryColumn {
                    values: rows.iter().map(|&r| c.values[r].clone()).collect(),
                    levels: c.levels.clone(),
                })
                .collect(),
        }
    }

    /// Row positions of non-degenerate rows.
    pub fn live_rows(&self) -> Vec<usize> {
        (0..self.nrows()).filter(|&r| !self.degenerate[r]).collect()
    }

    /// Stack tables with identical columns, e.g. per-stage state histories.
    pub fn stack(parts: &[HistoryTable]) -> Result<HistoryTable> {
        let first = parts.first().ok_or_else(|| Error::Structure("nothing to stack".into()))?;
        let mut out = first.clone();
        out.scope = StageScope::Pooled;
        for p in &parts[1..] {
            if p.names != out.names {
                return Err(Error::Schema("history tables have different columns".into()));
            }
            out.ids.extend(p.ids.iter().cloned());
            out.stages.extend(&p.stages);
            out.subjects.extend(&p.subjects);
            out.actions.extend(p.actions.iter().cloned());
            out.degenerate.extend(&p.degenerate);
            for (c, pc) in out.columns.iter_mut().zip(&p.columns) {
                c.values.extend(pc.values.iter().cloned());
            }
        }
        Ok(out)
    }

    fn push(&mut self, name: String, values: Vec<Value>, levels: Option<Vec<String>>) {
        self.names.push(name);
        self.columns.push(HistoryColumn { values, levels });
    }

    /// Convert to a raw table with `id` and `stage` key columns first.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new();
        t.push_column("id", self.ids.iter().cloned().map(Value::Text).collect())
            .expect("fresh table");
        t.push_column("stage", self.stages.iter().map(|&s| Value::Num(s as f64)).collect())
            .expect("fresh table");
        for (n, c) in self.names.iter().zip(&self.columns) {
            // History names never collide with the key columns in practice; skip if they do.
            let _ = t.push_column(n.clone(), c.values.clone());
        }
        t
    }
}

/// Stage selector for [`get_history`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSel {
    Stage(usize),
    All,
}

fn empty_history(kind: HistoryKind, scope: StageScope) -> HistoryTable {
    HistoryTable {
        ids: Vec::new(),
        stages: Vec::new(),
        subjects: Vec::new(),
        actions: Vec::new(),
        degenerate: Vec::new(),
        kind,
        scope,
        names: Vec::new(),
        columns: Vec::new(),
    }
}

fn stage_history(pd: &PolicyData, k: usize, kind: HistoryKind) -> HistoryTable {
    let rows: Vec<usize> = (0..pd.n()).filter(|&i| pd.trajectories[i].stages.len() >= k).collect();
    let mut h = empty_history(kind, StageScope::Single(k));
    for &i in &rows {
        let t = &pd.trajectories[i];
        let s = &t.stages[k - 1];
        h.ids.push(t.id.clone());
        h.stages.push(k);
        h.subjects.push(i);
        h.actions.push(s.action.clone());
        h.degenerate.push(s.degenerate);
    }
    let state_at = |name: &str, j: usize| -> Vec<Value> {
        rows.iter()
            .map(|&i| {
                pd.trajectories[i].stages[j - 1]
                    .state
                    .get(name)
                    .cloned()
                    .unwrap_or(Value::Missing)
            })
            .collect()
    };
    match kind {
        HistoryKind::Full => {
            for j in 1..k {
                let vals = rows
                    .iter()
                    .map(|&i| Value::Text(pd.trajectories[i].stages[j - 1].action.clone()))
                    .collect();
                h.push(format!("A_{j}"), vals, Some(pd.stage_action_sets[j - 1].clone()));
            }
            for name in &pd.covariates {
                for j in 1..=k {
                    h.push(format!("{name}_{j}"), state_at(name, j), pd.levels.get(name).cloned());
                }
            }
        }
        HistoryKind::State => {
            for name in &pd.covariates {
                h.push(name.clone(), state_at(name, k), pd.levels.get(name).cloned());
            }
        }
    }
    for name in &pd.baseline_schema {
        let vals = rows
            .iter()
            .map(|&i| pd.trajectories[i].baseline.get(name).cloned().unwrap_or(Value::Missing))
            .collect();
        h.push(name.clone(), vals, pd.levels.get(name).cloned());
    }
    h
}

/// History table of the given kind for one stage, or pooled over all stages
/// (state histories only). Rows are ordered by `(id, stage)`.
pub fn get_history(pd: &PolicyData, stage: StageSel, kind: HistoryKind) -> Result<HistoryTable> {
    match stage {
        StageSel::Stage(k) => {
            if k == 0 || k > pd.max_stages {
                return Err(Error::Range(format!("stage {k} outside 1..={}", pd.max_stages)));
            }
            Ok(stage_history(pd, k, kind))
        }
        StageSel::All => {
            if kind == HistoryKind::Full {
                return Err(Error::Unsupported(
                    "full histories differ by stage and cannot be pooled".into(),
                ));
            }
            let parts: Vec<HistoryTable> = (1..=pd.max_stages).map(|k| stage_history(pd, k, kind)).collect();
            let stacked = HistoryTable::stack(&parts)?;
            let mut order: Vec<usize> = (0..stacked.nrows()).collect();
            order.sort_by_key(|&r| (stacked.subjects[r], stacked.stages[r]));
            let mut out = stacked.filter(&order);
            out.scope = StageScope::Pooled;
            Ok(out)
        }
    }
}

/// Per-subject utility, keyed by id.
pub fn utility(pd: &PolicyData) -> Vec<(String, f64)> {
    pd.trajectories.iter().map(|t| (t.id.clone(), t.utility())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wide_fixture() -> (Table, WideSchema) {
        let src = "B,X_1,U_1,A_1,X_2,W_2,U_2,A_2,U_3\n1,0.2,1,1,0.3,0.1,2,0,3\n";
        let t = Table::read_csv(src.as_bytes()).unwrap();
        let schema = WideSchema {
            id: None,
            actions: vec!["A_1".into(), "A_2".into()],
            covariates: vec![
                ("X".into(), vec![Some("X_1".into()), Some("X_2".into())]),
                ("W".into(), vec![None, Some("W_2".into())]),
            ],
            utility: vec!["U_1".into(), "U_2".into(), "U_3".into()],
            baseline: vec!["B".into()],
        };
        (t, schema)
    }

    #[test]
    fn wide_row_becomes_two_stage_trajectory() {
        let (t, s) = wide_fixture();
        let pd = ingest_wide(&t, &s).unwrap();
        let tr = &pd.trajectories()[0];
        assert_eq!(tr.stages.len(), 2);
        assert_eq!(tr.utility(), 6.0);
        assert_eq!(tr.stages[0].state["W"], Value::Missing);
        assert_eq!(tr.stages[1].state["W"], Value::Num(0.1));
        assert_eq!(pd.covariate_schema()[0], vec!["X".to_string()]);
    }

    #[test]
    fn single_utility_column_is_terminal() {
        let t = Table::read_csv("A,U\n1,5\n".as_bytes()).unwrap();
        let s = WideSchema {
            actions: vec!["A".into()],
            utility: vec!["U".into()],
            ..Default::default()
        };
        let pd = ingest_wide(&t, &s).unwrap();
        assert_eq!(pd.trajectories()[0].terminal_reward, 5.0);
        assert_eq!(pd.trajectories()[0].stages[0].reward, 0.0);
    }

    #[test]
    fn unknown_column_and_bad_utility_are_rejected() {
        let t = Table::read_csv("A,U\n1,5\n1,inf\n".as_bytes()).unwrap();
        let mut s = WideSchema {
            actions: vec!["A".into()],
            utility: vec!["V".into()],
            ..Default::default()
        };
        assert!(matches!(ingest_wide(&t, &s), Err(Error::Schema(_))));
        s.utility = vec!["U".into()];
        assert!(matches!(ingest_wide(&t, &s), Err(Error::Value(_))));
    }

    fn long_schema() -> LongSchema {
        LongSchema {
            id: "id".into(),
            stage: "stage".into(),
            event: "event".into(),
            action: "A".into(),
            covariates: vec![],
            utility: "U".into(),
            baseline: vec![],
        }
    }

    #[test]
    fn minimal_long_record() {
        let t = Table::read_csv("id,stage,event,A,U\n7,1,0,a,1\n7,2,1,,2\n".as_bytes()).unwrap();
        let pd = ingest_long(&t, None, &long_schema()).unwrap();
        assert_eq!(pd.max_stages(), 1);
        assert_eq!(pd.utility(), vec![3.0]);
    }

    #[test]
    fn heterogeneous_stage_counts() {
        let src = "id,stage,event,A,U\n1,1,0,0,1\n1,2,1,,0\n2,1,0,1,1\n2,2,0,0,1\n2,3,0,1,1\n2,4,1,,1\n";
        let pd = ingest_long(&Table::read_csv(src.as_bytes()).unwrap(), None, &long_schema()).unwrap();
        assert_eq!(pd.max_stages(), 3);
        assert!(!pd.augmented());
        assert!(!pd.is_uniform());
    }

    #[test]
    fn long_errors() {
        let missing_terminal = "id,stage,event,A,U\n1,1,0,0,1\n";
        let r = ingest_long(&Table::read_csv(missing_terminal.as_bytes()).unwrap(), None, &long_schema());
        assert!(matches!(r, Err(Error::Structure(_))));
        let dup = "id,stage,event,A,U\n1,1,0,0,1\n1,1,0,0,1\n1,2,1,,1\n";
        let r = ingest_long(&Table::read_csv(dup.as_bytes()).unwrap(), None, &long_schema());
        assert!(matches!(r, Err(Error::Key(_))));
        let gap = "id,stage,event,A,U\n1,1,0,0,1\n1,3,1,,1\n";
        let r = ingest_long(&Table::read_csv(gap.as_bytes()).unwrap(), None, &long_schema());
        assert!(matches!(r, Err(Error::Structure(_))));
    }

    #[test]
    fn augmentation_pads_and_preserves_utility() {
        let src = "id,stage,event,A,U\n1,1,0,0,1\n1,2,1,,4\n2,1,0,1,1\n2,2,0,0,1\n2,3,0,1,1\n2,4,1,,1\n";
        let pd = ingest_long(&Table::read_csv(src.as_bytes()).unwrap(), None, &long_schema()).unwrap();
        let aug = augment_stages(&pd, "0").unwrap();
        assert!(aug.augmented() && aug.is_uniform());
        let t = &aug.trajectories()[0];
        assert!(t.stages[1].degenerate && t.stages[2].degenerate);
        assert_eq!(aug.utility(), pd.utility());
        assert!(matches!(augment_stages(&pd, "9"), Err(Error::Domain(_))));
        assert!(matches!(augment_stages(&aug, "0"), Err(Error::Structure(_))));
    }

    #[test]
    fn partial_folds_rewards() {
        let (t, s) = wide_fixture();
        let pd = ingest_wide(&t, &s).unwrap();
        let p = partial(&pd, 1).unwrap();
        let tr = &p.trajectories()[0];
        assert_eq!(tr.stages.len(), 1);
        assert_eq!(tr.stages[0].reward, 1.0);
        assert_eq!(tr.terminal_reward, 5.0);
        assert!(matches!(partial(&pd, 2), Err(Error::Range(_))));
    }

    #[test]
    fn full_history_naming() {
        let (t, s) = wide_fixture();
        let pd = ingest_wide(&t, &s).unwrap();
        let h = get_history(&pd, StageSel::Stage(2), HistoryKind::Full).unwrap();
        assert_eq!(h.names(), ["A_1", "X_1", "X_2", "W_1", "W_2", "B"]);
        assert!(h.column("W_1").unwrap().values[0].is_missing());
        let st = get_history(&pd, StageSel::All, HistoryKind::State).unwrap();
        assert_eq!(st.names(), ["X", "W", "B"]);
        assert_eq!(st.nrows(), 2);
        assert!(matches!(
            get_history(&pd, StageSel::Stage(3), HistoryKind::Full),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn ids_sort_numerically_and_categoricals_get_levels() {
        let src = "id,A,U,g\n10,1,0,b\n2,0,1,a\n";
        let t = Table::read_csv(src.as_bytes()).unwrap();
        let s = WideSchema {
            id: Some("id".into()),
            actions: vec!["A".into()],
            utility: vec!["U".into()],
            baseline: vec!["g".into()],
            ..Default::default()
        };
        let pd = ingest_wide(&t, &s).unwrap();
        assert_eq!(pd.ids(), vec!["2", "10"]);
        assert_eq!(pd.levels()["g"], vec!["a", "b"]);
        assert_eq!(pd.position("10"), Some(1));
    }
}
