//! Policy learners: Q-learning, doubly robust QV-learning (optionally restricted to
//! realistic actions), blip learning, value search over trees and weighted
//! classification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{HistoryKind, HistoryTable, PolicyData};
use crate::design::build_design;
use crate::error::{Error, Result};
use crate::evaluation::{fit_g_folds, Engine, FoldStage, PolicyLearner};
use crate::glm::fit_ols;
use crate::nuisance::{fit_g_model, make_folds, q_stage_specs, Family, FoldAssignment, GModel, Histories, ModelSpec, StageProbs};
use crate::policy::{choose_actions, realistic_set, LearnedRule, LinearScore, Policy, RealisticG, Scorer, StageInput, StageRule};
use crate::tree::{exact_tree_search, ScoredSample, TreeFeatures};

/// Blip magnitudes below this count as near zero in the diagnostics.
pub const NEAR_ZERO_BLIP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Ql,
    Drql,
    Blip,
    Ptl,
    Wcl,
}

impl LearnerKind {
    pub fn label(self) -> &'static str {
        match self {
            LearnerKind::Ql => "ql",
            LearnerKind::Drql => "drql",
            LearnerKind::Blip => "blip",
            LearnerKind::Ptl => "ptl",
            LearnerKind::Wcl => "wcl",
        }
    }
}

fn default_g() -> Vec<ModelSpec> {
    vec![ModelSpec::g_default()]
}

fn default_q() -> Vec<ModelSpec> {
    vec![ModelSpec::q_default()]
}

fn default_v() -> Vec<ModelSpec> {
    vec![ModelSpec::new(Family::Ols, "~.", HistoryKind::State, false)]
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

fn yes() -> bool {
    true
}

/// Learner configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    #[serde(rename = "type")]
    pub kind: LearnerKind,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_g")]
    pub g_models: Vec<ModelSpec>,
    #[serde(default = "default_q")]
    pub q_models: Vec<ModelSpec>,
    /// QV regressions (drql) or blip regressions (blip), per stage or shared.
    #[serde(default = "default_v")]
    pub qv_models: Vec<ModelSpec>,
    /// Tree input variables (ptl, wcl), per stage or shared.
    #[serde(default)]
    pub vars: Vec<Vec<String>>,
    #[serde(default)]
    pub vars_history: HistoryKind,
    #[serde(default)]
    pub alpha: f64,
    /// Number of cross-fitting folds `L`.
    #[serde(default = "one")]
    pub folds: usize,
    #[serde(default = "two")]
    pub depth: usize,
    #[serde(default = "yes")]
    pub cross_fit_g: bool,
    #[serde(default)]
    pub seed: u64,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind) -> Self {
        LearnerSpec {
            kind,
            name: None,
            g_models: default_g(),
            q_models: default_q(),
            qv_models: default_v(),
            vars: Vec::new(),
            vars_history: HistoryKind::State,
            alpha: 0.0,
            folds: 1,
            depth: 2,
            cross_fit_g: true,
            seed: 0,
        }
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.label().to_string())
    }
}

/// Per-stage learner diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageDiagnostics {
    pub stage: usize,
    /// Rows used to fit the stage rule.
    pub rows: usize,
    /// Rows with a blip (second minus first action score) of magnitude below 1e-8.
    pub near_zero_blip: usize,
    /// All classification weights were zero.
    #[serde(default)]
    pub degenerate_weights: bool,
    /// Recommendations replaced by realistic alternatives across folds.
    pub realistic_overrides: usize,
}

/// A fitted learner: one learned rule per stage plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyObject {
    pub kind: LearnerKind,
    pub name: String,
    pub alpha: f64,
    pub stage_action_sets: Vec<Vec<String>>,
    pub rules: Vec<LearnedRule>,
    pub folds: FoldAssignment,
    /// Action-probability model fitted on all data (when alpha > 0 or g is not cross-fitted).
    pub g_full: Option<GModel>,
    pub diagnostics: Vec<StageDiagnostics>,
}

pub fn get_policy(po: &PolicyObject) -> Policy {
    let mut p = Policy::new(&po.name, po.rules.iter().cloned().map(StageRule::Learned).collect());
    p.metadata.insert("learner".into(), po.kind.label().into());
    p.metadata.insert("alpha".into(), po.alpha.into());
    p.metadata.insert("folds".into(), po.folds.m.into());
    p.metadata.insert("seed".into(), po.folds.seed.into());
    p.metadata.insert(
        "diagnostics".into(),
        serde_json::to_value(&po.diagnostics).expect("plain data"),
    );
    p
}

/// The stage-`k` rule (1-based), evaluable on ad-hoc history rows.
pub fn get_policy_functions(po: &PolicyObject, stage: usize) -> Result<StageRule> {
    if stage == 0 || stage > po.rules.len() {
        return Err(Error::Range(format!("stage {stage} outside 1..={}", po.rules.len())));
    }
    Ok(StageRule::Learned(po.rules[stage - 1].clone()))
}

fn per_stage<T: Clone>(items: &[T], k: usize, what: &str) -> Result<Vec<T>> {
    match items.len() {
        1 => Ok(vec![items[0].clone(); k]),
        n if n == k => Ok(items.to_vec()),
        n => Err(Error::Config(format!("{n} {what} given for {k} stages"))),
    }
}

/// OLS of `y` on the design of `spec` over the rows of `h`.
fn fit_linear_score(spec: &ModelSpec, h: &HistoryTable, y: &[f64]) -> Result<LinearScore> {
    if spec.family != Family::Ols {
        return Err(Error::Config("QV and blip models use the ols family".into()));
    }
    let design = spec.parsed()?.resolve(h.names());
    if design.references(crate::design::ACTION_VAR) && h.column(crate::design::ACTION_VAR).is_none() {
        return Err(Error::Config("QV and blip models cannot use the current action".into()));
    }
    let levels: BTreeMap<String, Vec<String>> = design
        .variables()
        .into_iter()
        .filter_map(|v| h.column(&v).and_then(|c| c.levels.clone()).map(|l| (v, l)))
        .collect();
    let d = build_design(&design, h, None, Some(&levels))?;
    let fit = fit_ols(&d.x, y, None)?;
    Ok(LinearScore {
        history: spec.history,
        design,
        columns: d.names,
        levels,
        coef: fit.coef,
    })
}

fn realistic_g(g: &GModel, k: usize) -> RealisticG {
    RealisticG {
        history: g.history,
        model: g.stage(k).clone(),
    }
}

fn live_probs(p: &StageProbs, live: &[usize]) -> StageProbs {
    StageProbs {
        actions: p.actions.clone(),
        p: live.iter().map(|&i| p.p[i].clone()).collect(),
        unseen: p.unseen,
    }
}

/// Per-fold stage actions for every subject: the rule's scores restricted, when
/// `alpha > 0`, to the actions realistic under each fold's own g-model.
fn fold_actions(
    rule: &LearnedRule,
    hs: &Histories,
    k: usize,
    outs: &[FoldStage],
    diag: &mut StageDiagnostics,
) -> Result<Vec<Vec<String>>> {
    let full = hs.get(HistoryKind::Full, k);
    let state = hs.get(HistoryKind::State, k);
    let live = state.live_rows();
    let (f, s) = StageInput { full, state }.filter(&live);
    let input = StageInput { full: &f, state: &s };
    let values = rule.scorer.values(&input, &rule.actions)?;
    let mut out = Vec::with_capacity(outs.len());
    for o in outs {
        let allowed = match (&o.g, rule.alpha > 0.0) {
            (Some(g), true) => Some(realistic_set(&live_probs(g, &live), &s.ids, k, rule.alpha)?),
            _ => None,
        };
        let chosen = choose_actions(&values, &rule.actions, allowed.as_ref())?;
        if allowed.is_some() {
            let free = choose_actions(&values, &rule.actions, None)?;
            diag.realistic_overrides += free.iter().zip(&chosen).filter(|(a, b)| a != b).count();
        }
        let mut acts = state.actions.clone();
        for (&i, a) in live.iter().zip(chosen) {
            acts[i] = a;
        }
        out.push(acts);
    }
    Ok(out)
}

fn require_binary(pd: &PolicyData, what: &str) -> Result<()> {
    for (k, set) in pd.stage_action_sets().iter().enumerate() {
        if set.len() != 2 {
            return Err(Error::Unsupported(format!(
                "{what} needs two actions per stage; stage {} has {set:?}",
                k + 1
            )));
        }
    }
    Ok(())
}

/// Fit a learner on `pd`.
pub fn learn(pd: &PolicyData, spec: &LearnerSpec) -> Result<PolicyObject> {
    if !(0.0..0.5).contains(&spec.alpha) {
        return Err(Error::Range(format!("alpha {} outside [0, 0.5)", spec.alpha)));
    }
    let k_max = pd.max_stages();
    let hs = Histories::new(pd)?;
    match spec.kind {
        LearnerKind::Blip | LearnerKind::Wcl => require_binary(pd, spec.kind.label())?,
        LearnerKind::Ptl if spec.alpha > 0.0 => require_binary(pd, "realistic value search")?,
        _ => {}
    }
    if matches!(spec.kind, LearnerKind::Ptl | LearnerKind::Wcl) {
        if spec.vars.is_empty() {
            return Err(Error::Config(format!("{} needs tree variables", spec.kind.label())));
        }
        if !(1..=2).contains(&spec.depth) {
            return Err(Error::Range(format!("tree depth {} is not supported; use 1 or 2", spec.depth)));
        }
    }
    let q_specs = q_stage_specs(&spec.q_models, k_max)?;
    let folds = if spec.kind == LearnerKind::Ql {
        make_folds(&pd.ids(), 1, spec.seed)?
    } else {
        make_folds(&pd.ids(), spec.folds, spec.seed)?
    };
    let all = vec![true; pd.n()];
    let needs_full_g = spec.alpha > 0.0 || (!spec.cross_fit_g && spec.kind != LearnerKind::Ql);
    let g_full = if needs_full_g {
        Some(fit_g_model(pd, &hs, &spec.g_models, &all)?)
    } else {
        None
    };
    let g_folds: Option<Vec<GModel>> = match spec.kind {
        LearnerKind::Ql => g_full.as_ref().map(|g| vec![g.clone()]),
        _ if spec.cross_fit_g => Some(fit_g_folds(pd, &hs, &spec.g_models, &folds)?),
        _ => Some(vec![g_full.clone().expect("fitted above"); folds.m]),
    };
    let qv_specs = per_stage(&spec.qv_models, k_max, "QV models")?;
    let vars = if spec.vars.is_empty() {
        Vec::new()
    } else {
        per_stage(&spec.vars, k_max, "variable lists")?
    };
    let engine = Engine {
        pd,
        hs: &hs,
        folds: &folds,
        g: g_folds.as_deref(),
        q_specs,
    };
    let mut rules: Vec<Option<LearnedRule>> = vec![None; k_max];
    let mut diagnostics: Vec<StageDiagnostics> = vec![StageDiagnostics::default(); k_max];
    let kind = spec.kind;
    let mut decide = |k: usize, outs: &[FoldStage]| -> Result<Vec<Vec<String>>> {
        let actions = pd.stage_action_set(k).to_vec();
        let mut diag = StageDiagnostics {
            stage: k,
            ..Default::default()
        };
        let scorer = if kind == LearnerKind::Ql {
            diag.rows = outs[0].q_model.training.len();
            Scorer::Q {
                model: outs[0].q_model.clone(),
            }
        } else {
            // Held-out scores pooled over folds.
            let mut subjects = Vec::new();
            let mut z = Vec::new();
            for o in outs {
                for &i in &o.test {
                    if !pd.trajectories()[i].stages[k - 1].degenerate {
                        subjects.push(i);
                        z.push(o.z[i].clone());
                    }
                }
            }
            diag.rows = subjects.len();
            if subjects.is_empty() {
                return Err(Error::Fit(format!("no non-degenerate rows at stage {k}")));
            }
            if actions.len() == 2 {
                diag.near_zero_blip = z.iter().filter(|v| (v[1] - v[0]).abs() < NEAR_ZERO_BLIP).count();
            }
            match kind {
                LearnerKind::Drql => {
                    let spec_k = &qv_specs[k - 1];
                    let h = hs.get(spec_k.history, k).filter(&subjects);
                    let models = (0..actions.len())
                        .map(|a| {
                            let y: Vec<f64> = z.iter().map(|v| v[a]).collect();
                            fit_linear_score(spec_k, &h, &y)
                        })
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| e.context(format!("stage {k} QV model")))?;
                    Scorer::Qv { models }
                }
                LearnerKind::Blip => {
                    let spec_k = &qv_specs[k - 1];
                    let h = hs.get(spec_k.history, k).filter(&subjects);
                    let w: Vec<f64> = z.iter().map(|v| v[1] - v[0]).collect();
                    let model = fit_linear_score(spec_k, &h, &w).map_err(|e| e.context(format!("stage {k} blip model")))?;
                    Scorer::Blip { model }
                }
                LearnerKind::Ptl | LearnerKind::Wcl => {
                    let h = hs.get(spec.vars_history, k).filter(&subjects);
                    let features = TreeFeatures::from_history(hs.get(spec.vars_history, k), &vars[k - 1])?;
                    let rows = features.rows(&h)?;
                    let gamma = if kind == LearnerKind::Ptl {
                        z
                    } else {
                        // Weight |W| on the label I{W > 0}.
                        let g: Vec<Vec<f64>> = z
                            .iter()
                            .map(|v| {
                                let w = v[1] - v[0];
                                vec![(-w).max(0.0), w.max(0.0)]
                            })
                            .collect();
                        diag.degenerate_weights = g.iter().all(|r| r[0] == 0.0 && r[1] == 0.0);
                        g
                    };
                    let sample = ScoredSample::new(&rows, gamma)?;
                    let (tree, _) = exact_tree_search(&sample, spec.depth, &actions, &features.names())?;
                    Scorer::Tree { tree, features }
                }
                LearnerKind::Ql => unreachable!(),
            }
        };
        let fold_rule = LearnedRule {
            learner: kind.label().to_string(),
            stage: k,
            actions: actions.clone(),
            alpha: spec.alpha,
            realistic: None,
            scorer,
        };
        let decided = fold_actions(&fold_rule, &hs, k, outs, &mut diag)?;
        rules[k - 1] = Some(LearnedRule {
            realistic: g_full.as_ref().filter(|_| spec.alpha > 0.0).map(|g| realistic_g(g, k)),
            ..fold_rule
        });
        diagnostics[k - 1] = diag;
        Ok(decided)
    };
    engine.run(&mut decide)?;
    Ok(PolicyObject {
        kind,
        name: spec.display_name(),
        alpha: spec.alpha,
        stage_action_sets: pd.stage_action_sets().to_vec(),
        rules: rules.into_iter().map(|r| r.expect("every stage decided")).collect(),
        folds,
        g_full,
        diagnostics,
    })
}

impl PolicyLearner for LearnerSpec {
    fn name(&self) -> String {
        self.display_name()
    }

    fn learn(&self, pd: &PolicyData, seed: u64) -> Result<Policy> {
        let spec = LearnerSpec { seed, ..self.clone() };
        learn(pd, &spec).map(|po| get_policy(&po))
    }
}

/// Q-learning by backward induction, argmax over the realistic actions when `alpha > 0`.
pub fn learn_ql(pd: &PolicyData, q_models: &[ModelSpec], g_models: &[ModelSpec], alpha: f64) -> Result<PolicyObject> {
    learn(
        pd,
        &LearnerSpec {
            q_models: q_models.to_vec(),
            g_models: g_models.to_vec(),
            alpha,
            ..LearnerSpec::new(LearnerKind::Ql)
        },
    )
}

/// Doubly robust QV-learning, realistic when `alpha > 0`.
#[allow(clippy::too_many_arguments)]
pub fn learn_drql(
    pd: &PolicyData,
    qv_models: &[ModelSpec],
    g_models: &[ModelSpec],
    q_models: &[ModelSpec],
    folds: usize,
    alpha: f64,
    cross_fit_g: bool,
    seed: u64,
) -> Result<PolicyObject> {
    learn(
        pd,
        &LearnerSpec {
            qv_models: qv_models.to_vec(),
            g_models: g_models.to_vec(),
            q_models: q_models.to_vec(),
            folds,
            alpha,
            cross_fit_g,
            seed,
            ..LearnerSpec::new(LearnerKind::Drql)
        },
    )
}

/// Blip learning: regress the score contrast and recommend `I{B > 0}`.
pub fn learn_blip(
    pd: &PolicyData,
    blip_models: &[ModelSpec],
    g_models: &[ModelSpec],
    q_models: &[ModelSpec],
    folds: usize,
    alpha: f64,
    seed: u64,
) -> Result<PolicyObject> {
    learn(
        pd,
        &LearnerSpec {
            qv_models: blip_models.to_vec(),
            g_models: g_models.to_vec(),
            q_models: q_models.to_vec(),
            folds,
            alpha,
            seed,
            ..LearnerSpec::new(LearnerKind::Blip)
        },
    )
}

fn tree_spec(
    kind: LearnerKind,
    vars: &[Vec<String>],
    g_models: &[ModelSpec],
    q_models: &[ModelSpec],
    folds: usize,
    depth: usize,
    alpha: f64,
    seed: u64,
) -> LearnerSpec {
    LearnerSpec {
        vars: vars.to_vec(),
        g_models: g_models.to_vec(),
        q_models: q_models.to_vec(),
        folds,
        depth,
        alpha,
        seed,
        ..LearnerSpec::new(kind)
    }
}

/// Recursive value search over depth-bounded trees.
#[allow(clippy::too_many_arguments)]
pub fn recursive_value_search(
    pd: &PolicyData,
    vars: &[Vec<String>],
    g_models: &[ModelSpec],
    q_models: &[ModelSpec],
    folds: usize,
    depth: usize,
    alpha: f64,
    seed: u64,
) -> Result<PolicyObject> {
    learn(pd, &tree_spec(LearnerKind::Ptl, vars, g_models, q_models, folds, depth, alpha, seed))
}

/// Weighted 0-1 classification with weights `|W|` and labels `I{W > 0}`.
#[allow(clippy::too_many_arguments)]
pub fn learn_wcl(
    pd: &PolicyData,
    vars: &[Vec<String>],
    g_models: &[ModelSpec],
    q_models: &[ModelSpec],
    folds: usize,
    depth: usize,
    alpha: f64,
    seed: u64,
) -> Result<PolicyObject> {
    learn(pd, &tree_spec(LearnerKind::Wcl, vars, g_models, q_models, folds, depth, alpha, seed))
}
