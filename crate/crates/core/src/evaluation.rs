//! Policy value estimation (IPW, outcome regression, cross-fitted doubly robust),
//! the learned-policy value, and influence-curve inference.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::PolicyData;
use crate::error::{Error, Result};
use crate::nuisance::{
    fit_g_model, fit_q_model, make_folds, q_stage_specs, FoldAssignment, GModel, Histories, ModelSpec, QModel, StageProbs,
};
use crate::policy::{apply_policy, ActionTable, Policy};
use crate::seed::derive_seed;
use crate::table::{Table, Value};

/// Lower bound applied to action probabilities before division.
pub const G_FLOOR: f64 = 1e-12;

const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Ipw,
    Or,
    Dr,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Ipw => "ipw",
            Estimator::Or => "or",
            Estimator::Dr => "dr",
        })
    }
}

/// Point estimate with per-id influence values.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub name: String,
    pub estimate: f64,
    pub variance_of_mean: f64,
    pub ic: Vec<f64>,
    pub ids: Vec<String>,
    pub n: usize,
    pub estimator: Estimator,
    pub clustered: bool,
    /// The influence values are not from an efficient influence curve.
    pub naive_variance: bool,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub warnings: Vec<String>,
}

/// JSON summary of an [`EvalResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub name: String,
    pub estimate: f64,
    pub std_err: f64,
    pub ci95: [f64; 2],
    pub p_value: f64,
    pub n: usize,
    pub estimator: Estimator,
    pub clustered: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

impl EvalResult {
    /// Result from per-id scores `z`: estimate is the mean, IC the centered scores.
    pub fn from_scores(name: &str, ids: Vec<String>, z: &[f64], estimator: Estimator) -> Self {
        let n = z.len();
        let est = z.iter().sum::<f64>() / n as f64;
        let ic: Vec<f64> = z.iter().map(|v| v - est).collect();
        let var = ic.iter().map(|v| v * v).sum::<f64>() / (n * n) as f64;
        EvalResult {
            name: name.to_string(),
            estimate: est,
            variance_of_mean: var,
            ic,
            ids,
            n,
            estimator,
            clustered: false,
            naive_variance: false,
            metadata: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn std_err(&self) -> f64 {
        self.variance_of_mean.max(0.0).sqrt()
    }

    pub fn ci95(&self) -> [f64; 2] {
        let se = self.std_err();
        [self.estimate - Z_975 * se, self.estimate + Z_975 * se]
    }

    /// Two-sided normal p-value for a zero value.
    pub fn p_value(&self) -> f64 {
        let se = self.std_err();
        if se == 0.0 {
            return if self.estimate == 0.0 { 1.0 } else { 0.0 };
        }
        2.0 * std_normal().cdf(-(self.estimate / se).abs())
    }

    /// Scores `θ + IC_i`.
    pub fn scores(&self) -> Vec<f64> {
        self.ic.iter().map(|v| self.estimate + v).collect()
    }

    pub fn summary(&self) -> EvalSummary {
        let mut metadata = self.metadata.clone();
        if self.naive_variance {
            metadata.insert("naive_variance".into(), true.into());
        }
        EvalSummary {
            name: self.name.clone(),
            estimate: self.estimate,
            std_err: self.std_err(),
            ci95: self.ci95(),
            p_value: self.p_value(),
            n: self.n,
            estimator: self.estimator,
            clustered: self.clustered,
            metadata,
            warnings: self.warnings.clone(),
        }
    }

    /// Influence values keyed by id.
    pub fn ic_table(&self) -> Table {
        let mut t = Table::new();
        t.push_column("id", self.ids.iter().cloned().map(Value::Text).collect())
            .expect("fresh table");
        t.push_numeric(&self.name, &self.ic).expect("fresh table");
        t
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [lo, hi] = self.ci95();
        write!(
            f,
            "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            self.name,
            self.estimate,
            self.std_err(),
            lo,
            hi,
            self.p_value()
        )
    }
}

/// Per-stage, per-action doubly robust scores.
#[derive(Debug, Clone, PartialEq)]
pub struct StageScores {
    pub actions: Vec<String>,
    /// `z[i][a]`, subject-major.
    pub z: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub ids: Vec<String>,
    pub stages: Vec<StageScores>,
    /// Stage-one score of the evaluated policy.
    pub z1: Vec<f64>,
    pub floor_hits: usize,
}

struct Rewards {
    /// `cum[k-1][i]`: rewards observed up to and including stage `k`.
    cum: Vec<Vec<f64>>,
    /// `next[k-1][i]`: the reward following action `k` (terminal after the last stage).
    next: Vec<Vec<f64>>,
    utility: Vec<f64>,
}

impl Rewards {
    fn new(pd: &PolicyData) -> Self {
        let k_max = pd.max_stages();
        let n = pd.n();
        let mut cum = vec![vec![0.0; n]; k_max];
        let mut next = vec![vec![0.0; n]; k_max];
        for (i, t) in pd.trajectories().iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..k_max {
                acc += t.stages[k].reward;
                cum[k][i] = acc;
                next[k][i] = if k + 1 < k_max {
                    t.stages[k + 1].reward
                } else {
                    t.terminal_reward
                };
            }
        }
        Rewards {
            cum,
            next,
            utility: pd.utility(),
        }
    }
}

/// One stage of the backward score recursion for the rows in `rows`.
/// `q[i][a]` is the full Q-value; degenerate rows carry their next score.
#[allow(clippy::too_many_arguments)]
fn stage_z(
    rows: &[usize],
    actions: &[String],
    observed: &[String],
    degenerate: &[bool],
    q: &[Vec<f64>],
    g: &StageProbs,
    z_next: &[f64],
    floor_hits: &mut usize,
) -> Vec<Vec<f64>> {
    let mut z = vec![Vec::new(); observed.len()];
    for &i in rows {
        if degenerate[i] {
            z[i] = vec![z_next[i]; actions.len()];
            continue;
        }
        let mut gi = g.prob(i, &observed[i]);
        if gi < G_FLOOR {
            gi = G_FLOOR;
            *floor_hits += 1;
        }
        z[i] = actions
            .iter()
            .zip(&q[i])
            .map(|(a, &qa)| {
                if *a == observed[i] {
                    qa + (z_next[i] - qa) / gi
                } else {
                    qa
                }
            })
            .collect();
    }
    z
}

fn action_index(actions: &[String], a: &str, k: usize) -> Result<usize> {
    actions
        .iter()
        .position(|x| x == a)
        .ok_or_else(|| Error::Domain(format!("action '{a}' is not in the stage {k} action set {actions:?}")))
}

/// Doubly robust scores from given action probabilities and Q-values.
///
/// `g[k]` holds stage-`k+1` probabilities for every subject and `q[k][i][a]` the
/// Q-value of subject `i` under the `a`-th action of the stage action set.
pub fn dr_scores(pd: &PolicyData, policy: &ActionTable, g: &[StageProbs], q: &[Vec<Vec<f64>>]) -> Result<ScoreMatrix> {
    pd.require_uniform()?;
    let k_max = pd.max_stages();
    let n = pd.n();
    if g.len() != k_max || q.len() != k_max {
        return Err(Error::Structure(format!("need g and Q for {k_max} stages")));
    }
    let rewards = Rewards::new(pd);
    let rows: Vec<usize> = (0..n).collect();
    let mut z_next = rewards.utility.clone();
    let mut floor_hits = 0;
    let mut stages = Vec::with_capacity(k_max);
    for k in (1..=k_max).rev() {
        let acts = pd.stage_action_set(k);
        let observed: Vec<String> = pd.trajectories().iter().map(|t| t.stages[k - 1].action.clone()).collect();
        let degenerate: Vec<bool> = pd.trajectories().iter().map(|t| t.stages[k - 1].degenerate).collect();
        let qk = &q[k - 1];
        if qk.len() != n || (0..n).any(|i| !degenerate[i] && qk[i].len() != acts.len()) {
            return Err(Error::Schema(format!("missing Q predictions at stage {k}")));
        }
        let z = stage_z(&rows, acts, &observed, &degenerate, qk, &g[k - 1], &z_next, &mut floor_hits);
        let d = policy.stage_full(k, n)?;
        for i in 0..n {
            if !degenerate[i] {
                z_next[i] = z[i][action_index(acts, &d[i], k)?];
            }
        }
        stages.push(StageScores {
            actions: acts.to_vec(),
            z,
        });
    }
    stages.reverse();
    Ok(ScoreMatrix {
        ids: pd.ids(),
        stages,
        z1: z_next,
        floor_hits,
    })
}

/// Inverse probability weighted terms `∏_k I{A_k = d_k}/g_k · U`.
pub fn ipw_terms(pd: &PolicyData, policy: &ActionTable, g: &[StageProbs]) -> Result<(Vec<f64>, usize)> {
    pd.require_uniform()?;
    let n = pd.n();
    let mut w = vec![1.0; n];
    let mut floor_hits = 0;
    for k in 1..=pd.max_stages() {
        let d = policy.stage_full(k, n)?;
        for (i, t) in pd.trajectories().iter().enumerate() {
            let s = &t.stages[k - 1];
            if s.degenerate {
                continue;
            }
            if s.action != d[i] {
                w[i] = 0.0;
                continue;
            }
            let mut gi = g[k - 1].prob(i, &s.action);
            if gi < G_FLOOR {
                gi = G_FLOOR;
                floor_hits += 1;
            }
            w[i] /= gi;
        }
    }
    Ok((w.iter().zip(pd.utility()).map(|(w, u)| w * u).collect(), floor_hits))
}

/// Per-fold output of one backward stage of the cross-fitting engine.
#[derive(Debug, Clone)]
pub struct FoldStage {
    pub fold: usize,
    /// Held-out subjects of the fold (all subjects with a single fold).
    pub test: Vec<usize>,
    /// Residual Q-values `qres[i][a]` for every subject.
    pub qres: Vec<Vec<f64>>,
    /// Per-action scores for held-out subjects (empty rows elsewhere).
    pub z: Vec<Vec<f64>>,
    /// Action probabilities for every subject.
    pub g: Option<StageProbs>,
    pub q_model: QModel,
}

/// Output of an engine run.
#[derive(Debug, Clone)]
pub struct EngineRun {
    /// Stage-one policy score per subject from its held-out fold.
    pub z1: Vec<f64>,
    /// Outcome-regression plug-in value per subject from its held-out fold.
    pub plugin: Vec<f64>,
    pub floor_hits: usize,
    /// `q_models[k-1][fold]`.
    pub q_models: Vec<Vec<QModel>>,
}

/// Backward cross-fitted recursion shared by evaluation and learning. At every
/// stage the caller chooses each fold's actions for all subjects.
pub struct Engine<'a> {
    pub pd: &'a PolicyData,
    pub hs: &'a Histories,
    pub folds: &'a FoldAssignment,
    /// One g-model per fold; without them no scores are computed.
    pub g: Option<&'a [GModel]>,
    /// One Q spec per stage.
    pub q_specs: Vec<ModelSpec>,
}

pub type Decider<'d> = dyn FnMut(usize, &[FoldStage]) -> Result<Vec<Vec<String>>> + 'd;

impl Engine<'_> {
    pub fn run(&self, decide: &mut Decider) -> Result<EngineRun> {
        let pd = self.pd;
        let n = pd.n();
        let k_max = pd.max_stages();
        let m = self.folds.m;
        if self.q_specs.len() != k_max {
            return Err(Error::Config(format!("{} Q specs for {k_max} stages", self.q_specs.len())));
        }
        let rewards = Rewards::new(pd);
        let masks: Vec<Vec<bool>> = (0..m).map(|l| self.folds.train_mask(l)).collect();
        let tests: Vec<Vec<usize>> = (0..m).map(|l| self.folds.test_rows(l)).collect();
        let mut next_qres = vec![vec![0.0; n]; m];
        let mut z_next = vec![rewards.utility.clone(); m];
        let mut floor_hits = 0;
        let mut q_models = vec![Vec::new(); k_max];
        for k in (1..=k_max).rev() {
            let acts = pd.stage_action_set(k);
            let observed: Vec<String> = pd.trajectories().iter().map(|t| t.stages[k - 1].action.clone()).collect();
            let degenerate: Vec<bool> = pd.trajectories().iter().map(|t| t.stages[k - 1].degenerate).collect();
            let live: Vec<usize> = (0..n).filter(|&i| !degenerate[i]).collect();
            let outs: Vec<(FoldStage, usize)> = (0..m)
                .into_par_iter()
                .map(|l| -> Result<(FoldStage, usize)> {
                    let target: Vec<f64> = (0..n).map(|i| rewards.next[k - 1][i] + next_qres[l][i]).collect();
                    let q = fit_q_model(pd, self.hs, k, &target, &self.q_specs[k - 1], &masks[l])?;
                    let h = self.hs.get(q.history, k).filter(&live);
                    let cols = acts.iter().map(|a| q.predict(&h, a)).collect::<Result<Vec<_>>>()?;
                    let mut qres = vec![Vec::new(); n];
                    for (j, &i) in live.iter().enumerate() {
                        qres[i] = cols.iter().map(|c| c[j]).collect();
                    }
                    for i in (0..n).filter(|&i| degenerate[i]) {
                        qres[i] = vec![rewards.utility[i] - rewards.cum[k - 1][i]; acts.len()];
                    }
                    let mut hits = 0;
                    let (g, z) = match self.g {
                        Some(gs) => {
                            let probs = gs[l].predict_all(self.hs, k)?;
                            let full_q: Vec<Vec<f64>> = (0..n)
                                .map(|i| qres[i].iter().map(|v| v + rewards.cum[k - 1][i]).collect())
                                .collect();
                            let z = stage_z(&tests[l], acts, &observed, &degenerate, &full_q, &probs, &z_next[l], &mut hits);
                            (Some(probs), z)
                        }
                        None => (None, vec![Vec::new(); n]),
                    };
                    Ok((
                        FoldStage {
                            fold: l,
                            test: tests[l].clone(),
                            qres,
                            z,
                            g,
                            q_model: q,
                        },
                        hits,
                    ))
                })
                .enumerate()
                .map(|(l, r)| {
                    r.map_err(|e| {
                        let e = e.context(format!("stage {k}"));
                        if m > 1 {
                            e.context(format!("fold {}", l + 1))
                        } else {
                            e
                        }
                    })
                })
                .collect::<Result<_>>()?;
            let outs: Vec<FoldStage> = outs
                .into_iter()
                .map(|(o, h)| {
                    floor_hits += h;
                    o
                })
                .collect();
            let decided = decide(k, &outs)?;
            if decided.len() != m {
                return Err(Error::Structure(format!("{} fold decisions for {m} folds", decided.len())));
            }
            for (l, o) in outs.iter().enumerate() {
                let d = &decided[l];
                for i in 0..n {
                    if degenerate[i] {
                        next_qres[l][i] = o.qres[i][0];
                        continue;
                    }
                    let a = action_index(acts, &d[i], k)?;
                    next_qres[l][i] = o.qres[i][a];
                    if self.g.is_some() && !o.z[i].is_empty() {
                        z_next[l][i] = o.z[i][a];
                    }
                }
            }
            q_models[k - 1] = outs.into_iter().map(|o| o.q_model).collect();
        }
        let mut z1 = vec![0.0; n];
        let mut plugin = vec![0.0; n];
        for l in 0..m {
            for &i in &tests[l] {
                z1[i] = z_next[l][i];
                plugin[i] = rewards.cum[0][i] + next_qres[l][i];
            }
        }
        Ok(EngineRun {
            z1,
            plugin,
            floor_hits,
            q_models,
        })
    }
}

/// Fit one g-model per fold on the fold complements, in parallel.
pub fn fit_g_folds(pd: &PolicyData, hs: &Histories, specs: &[ModelSpec], folds: &FoldAssignment) -> Result<Vec<GModel>> {
    (0..folds.m)
        .into_par_iter()
        .map(|l| {
            fit_g_model(pd, hs, specs, &folds.train_mask(l)).map_err(|e| {
                if folds.m > 1 {
                    e.context(format!("fold {}", l + 1))
                } else {
                    e
                }
            })
        })
        .collect()
}

fn stage_actions(at: &ActionTable, k_max: usize, n: usize) -> Result<Vec<Vec<String>>> {
    (1..=k_max).map(|k| at.stage_full(k, n)).collect()
}

fn base_metadata(folds: &FoldAssignment) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("folds".into(), folds.m.into());
    m.insert("seed".into(), folds.seed.into());
    m
}

fn finish(mut r: EvalResult, floor_hits: usize, gs: Option<&[GModel]>) -> EvalResult {
    if floor_hits > 0 {
        r.metadata.insert("g_floor_hits".into(), floor_hits.into());
        r.warnings.push(format!("{floor_hits} action probabilities were floored at {G_FLOOR:e}"));
    }
    if let Some(gs) = gs {
        if gs.iter().any(GModel::any_separation) {
            r.warnings.push("separation detected in an action-probability model".into());
        }
    }
    r
}

/// Inverse probability weighted value with cross-fitted g (a single fold fits on all data).
pub fn value_ipw(pd: &PolicyData, policy: &Policy, g_specs: &[ModelSpec], folds: usize, seed: u64) -> Result<EvalResult> {
    let hs = Histories::new(pd)?;
    let fa = make_folds(&pd.ids(), folds, seed)?;
    let at = apply_policy(policy, pd)?;
    let gs = fit_g_folds(pd, &hs, g_specs, &fa)?;
    let n = pd.n();
    let mut terms = vec![0.0; n];
    let mut hits = 0;
    for l in 0..fa.m {
        let probs = (1..=pd.max_stages())
            .map(|k| gs[l].predict_all(&hs, k))
            .collect::<Result<Vec<_>>>()?;
        let (t, h) = ipw_terms(pd, &at, &probs)?;
        for i in fa.test_rows(l) {
            terms[i] = t[i];
        }
        hits += h;
    }
    let mut r = EvalResult::from_scores(&policy.name, pd.ids(), &terms, Estimator::Ipw);
    r.metadata = base_metadata(&fa);
    Ok(finish(r, hits, Some(&gs)))
}

/// Outcome-regression plug-in value by backward recursive regression.
pub fn value_or(pd: &PolicyData, policy: &Policy, q_specs: &[ModelSpec], folds: usize, seed: u64) -> Result<EvalResult> {
    let hs = Histories::new(pd)?;
    let fa = make_folds(&pd.ids(), folds, seed)?;
    let at = apply_policy(policy, pd)?;
    let acts = stage_actions(&at, pd.max_stages(), pd.n())?;
    let engine = Engine {
        pd,
        hs: &hs,
        folds: &fa,
        g: None,
        q_specs: q_stage_specs(q_specs, pd.max_stages())?,
    };
    let run = engine.run(&mut |k, outs| Ok(vec![acts[k - 1].clone(); outs.len()]))?;
    let mut r = EvalResult::from_scores(&policy.name, pd.ids(), &run.plugin, Estimator::Or);
    r.naive_variance = true;
    r.metadata = base_metadata(&fa);
    Ok(r)
}

/// Cross-fitted doubly robust value of a fixed policy.
pub fn value_dr(
    pd: &PolicyData,
    policy: &Policy,
    g_specs: &[ModelSpec],
    q_specs: &[ModelSpec],
    folds: usize,
    seed: u64,
) -> Result<EvalResult> {
    let hs = Histories::new(pd)?;
    let fa = make_folds(&pd.ids(), folds, seed)?;
    let at = apply_policy(policy, pd)?;
    let acts = stage_actions(&at, pd.max_stages(), pd.n())?;
    let gs = fit_g_folds(pd, &hs, g_specs, &fa)?;
    let engine = Engine {
        pd,
        hs: &hs,
        folds: &fa,
        g: Some(&gs),
        q_specs: q_stage_specs(q_specs, pd.max_stages())?,
    };
    let run = engine.run(&mut |k, outs| Ok(vec![acts[k - 1].clone(); outs.len()]))?;
    let mut r = EvalResult::from_scores(&policy.name, pd.ids(), &run.z1, Estimator::Dr);
    r.metadata = base_metadata(&fa);
    Ok(finish(r, run.floor_hits, Some(&gs)))
}

/// Anything that maps data to a policy.
pub trait PolicyLearner: Sync {
    fn name(&self) -> String;
    fn learn(&self, pd: &PolicyData, seed: u64) -> Result<Policy>;
}

impl PolicyLearner for Policy {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn learn(&self, _pd: &PolicyData, _seed: u64) -> Result<Policy> {
        Ok(self.clone())
    }
}

/// Cross-fitted doubly robust value of a learning procedure: per fold the policy
/// is learned on the complement and scored on the held-out subjects.
pub fn value_of_learner(
    pd: &PolicyData,
    learner: &dyn PolicyLearner,
    g_specs: &[ModelSpec],
    q_specs: &[ModelSpec],
    folds: usize,
    seed: u64,
) -> Result<EvalResult> {
    let hs = Histories::new(pd)?;
    let fa = make_folds(&pd.ids(), folds, seed)?;
    let k_max = pd.max_stages();
    let policies: Vec<Vec<Vec<String>>> = (0..fa.m)
        .into_par_iter()
        .map(|l| -> Result<Vec<Vec<String>>> {
            let ctx = |e: Error| {
                if fa.m > 1 {
                    e.context(format!("fold {}", l + 1))
                } else {
                    e
                }
            };
            let sub = pd.subset(&fa.train_rows(l));
            let p = learner.learn(&sub, derive_seed(seed, "learner", l as u64)).map_err(ctx)?;
            let at = apply_policy(&p, pd).map_err(ctx)?;
            stage_actions(&at, k_max, pd.n())
        })
        .collect::<Result<_>>()?;
    let gs = fit_g_folds(pd, &hs, g_specs, &fa)?;
    let engine = Engine {
        pd,
        hs: &hs,
        folds: &fa,
        g: Some(&gs),
        q_specs: q_stage_specs(q_specs, k_max)?,
    };
    let run = engine.run(&mut |k, outs| Ok(outs.iter().map(|o| policies[o.fold][k - 1].clone()).collect()))?;
    let mut r = EvalResult::from_scores(&learner.name(), pd.ids(), &run.z1, Estimator::Dr);
    r.metadata = base_metadata(&fa);
    Ok(finish(r, run.floor_hits, Some(&gs)))
}

/// Several results over the same ids.
#[derive(Debug, Clone, PartialEq)]
pub struct JointResult {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    /// `ic[j][i]` for result `j`.
    pub ic: Vec<Vec<f64>>,
    pub ids: Vec<String>,
    pub estimator: Estimator,
}

impl JointResult {
    /// Covariance matrix of the estimates.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let n = self.ids.len() as f64;
        self.ic
            .iter()
            .map(|a| {
                self.ic
                    .iter()
                    .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (n * n))
                    .collect()
            })
            .collect()
    }
}

pub fn merge_results(results: &[EvalResult]) -> Result<JointResult> {
    let first = results
        .first()
        .ok_or_else(|| Error::Structure("no results to merge".into()))?;
    for r in &results[1..] {
        if r.ids != first.ids {
            return Err(Error::Alignment(format!(
                "results '{}' and '{}' cover different ids",
                first.name, r.name
            )));
        }
    }
    Ok(JointResult {
        names: results.iter().map(|r| r.name.clone()).collect(),
        estimates: results.iter().map(|r| r.estimate).collect(),
        ic: results.iter().map(|r| r.ic.clone()).collect(),
        ids: first.ids.clone(),
        estimator: first.estimator,
    })
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Scalar transform of a joint estimate.
#[derive(Clone)]
pub enum Transform {
    /// Weighted sum, handled exactly.
    Linear(Vec<f64>),
    /// Smooth function, differentiated by central differences.
    Function(ScalarFn),
}

impl Transform {
    pub fn difference(j: usize, i: usize, len: usize) -> Self {
        let mut w = vec![0.0; len];
        w[j] += 1.0;
        w[i] -= 1.0;
        Transform::Linear(w)
    }
}

/// Delta-method estimate of a transform of the joint estimate.
pub fn contrast(joint: &JointResult, f: &Transform, name: &str) -> Result<EvalResult> {
    let p = joint.estimates.len();
    let (est, grad) = match f {
        Transform::Linear(w) => {
            if w.len() != p {
                return Err(Error::Structure(format!("{} weights for {p} estimates", w.len())));
            }
            (w.iter().zip(&joint.estimates).map(|(a, b)| a * b).sum(), w.clone())
        }
        Transform::Function(func) => {
            let theta = &joint.estimates;
            let grad = (0..p)
                .map(|j| {
                    let h = 1e-6 * (1.0 + theta[j].abs());
                    let mut up = theta.clone();
                    let mut dn = theta.clone();
                    up[j] += h;
                    dn[j] -= h;
                    (func(&up) - func(&dn)) / (2.0 * h)
                })
                .collect::<Vec<_>>();
            (func(theta), grad)
        }
    };
    if !est.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Value("transform is not finite at the estimate".into()));
    }
    let n = joint.ids.len();
    let ic: Vec<f64> = (0..n)
        .map(|i| grad.iter().zip(&joint.ic).map(|(g, c)| g * c[i]).sum())
        .collect();
    let var = ic.iter().map(|v| v * v).sum::<f64>() / (n * n) as f64;
    Ok(EvalResult {
        name: name.to_string(),
        estimate: est,
        variance_of_mean: var,
        ic,
        ids: joint.ids.clone(),
        n,
        estimator: joint.estimator,
        clustered: false,
        naive_variance: false,
        metadata: BTreeMap::new(),
        warnings: Vec::new(),
    })
}

/// Cluster-robust variance: influence values are summed within clusters.
/// `cluster_of` is aligned with the result ids.
pub fn clustered_variance(result: &EvalResult, cluster_of: &[String]) -> Result<EvalResult> {
    if cluster_of.len() != result.ids.len() {
        return Err(Error::Alignment(format!(
            "{} cluster labels for {} ids",
            cluster_of.len(),
            result.ids.len()
        )));
    }
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for (c, v) in cluster_of.iter().zip(&result.ic) {
        *sums.entry(c.as_str()).or_insert(0.0) += v;
    }
    let n = result.n as f64;
    let mut out = result.clone();
    out.variance_of_mean = sums.values().map(|s| s * s).sum::<f64>() / (n * n);
    out.clustered = true;
    out.metadata.insert("clusters".into(), sums.len().into());
    if sums.len() == 1 {
        out.warnings.push("a single cluster: the clustered variance is degenerate".into());
    }
    Ok(out)
}

/// Subgroup values by the levels of a baseline variable.
pub fn conditional_value(result: &EvalResult, pd: &PolicyData, baseline_var: &str) -> Result<Vec<EvalResult>> {
    if result.ids != pd.ids() {
        return Err(Error::Alignment("result ids do not match the data".into()));
    }
    let col = pd.baseline_column(baseline_var)?;
    let labels: Vec<String> = col
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.as_label()
                .ok_or_else(|| Error::Value(format!("'{baseline_var}' is missing for id '{}'", result.ids[i])))
        })
        .collect::<Result<_>>()?;
    let levels = match pd.levels().get(baseline_var) {
        Some(l) => l.clone(),
        None => crate::table::sorted_levels(labels.iter().cloned()),
    };
    let z = result.scores();
    let n = result.n;
    let mut out = Vec::new();
    for v in levels {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == v).collect();
        if members.is_empty() {
            continue;
        }
        let p = members.len() as f64 / n as f64;
        let theta = members.iter().map(|&i| z[i]).sum::<f64>() / members.len() as f64;
        let ic: Vec<f64> = (0..n)
            .map(|i| if labels[i] == v { (z[i] - theta) / p } else { 0.0 })
            .collect();
        let var = ic.iter().map(|x| x * x).sum::<f64>() / (n * n) as f64;
        let mut r = result.clone();
        r.name = format!("{}[{baseline_var}={v}]", result.name);
        r.estimate = theta;
        r.variance_of_mean = var;
        r.ic = ic;
        r.clustered = false;
        r.metadata.insert("group_size".into(), members.len().into());
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(name: &str, z: &[f64]) -> EvalResult {
        let ids = (1..=z.len()).map(|i| i.to_string()).collect();
        EvalResult::from_scores(name, ids, z, Estimator::Dr)
    }

    #[test]
    fn ic_centered_and_variance() {
        let r = res("a", &[1.0, 2.0, 6.0]);
        assert_eq!(r.estimate, 3.0);
        assert!(r.ic.iter().sum::<f64>().abs() < 1e-12);
        assert!((r.variance_of_mean - 14.0 / 9.0).abs() < 1e-12);
        let [lo, hi] = r.ci95();
        assert!((hi - lo - 2.0 * Z_975 * r.std_err()).abs() < 1e-12);
    }

    #[test]
    fn linear_contrast_exact_and_identity() {
        let a = res("a", &[1.0, 2.0, 6.0, 0.5]);
        let b = res("b", &[0.0, 4.0, 1.0, 2.5]);
        let j = merge_results(&[a.clone(), b.clone()]).unwrap();
        let d = contrast(&j, &Transform::difference(1, 0, 2), "ATE").unwrap();
        assert_eq!(d.estimate, b.estimate - a.estimate);
        for i in 0..4 {
            assert_eq!(d.ic[i], b.ic[i] - a.ic[i]);
        }
        let id = contrast(&merge_results(&[a.clone()]).unwrap(), &Transform::Linear(vec![1.0]), "a").unwrap();
        assert_eq!(id.estimate, a.estimate);
        assert_eq!(id.ic, a.ic);
        let f = contrast(&j, &Transform::Function(Arc::new(|x| x[1] - x[0])), "ATE").unwrap();
        assert!((f.estimate - d.estimate).abs() < 1e-12);
        assert!((f.variance_of_mean - d.variance_of_mean).abs() < 1e-8);
    }

    #[test]
    fn merge_mismatched_ids() {
        let a = res("a", &[1.0, 2.0]);
        let mut b = res("b", &[1.0, 2.0]);
        b.ids[1] = "x".into();
        assert!(matches!(merge_results(&[a, b]), Err(Error::Alignment(_))));
    }

    #[test]
    fn cluster_variants() {
        let r = res("a", &[1.0, 2.0, 6.0, 3.0]);
        let single: Vec<String> = r.ids.clone();
        assert_eq!(clustered_variance(&r, &single).unwrap().variance_of_mean, r.variance_of_mean);
        let one = clustered_variance(&r, &vec!["c".to_string(); 4]).unwrap();
        assert!(one.variance_of_mean < 1e-20);
        assert_eq!(one.warnings.len(), 1);
        // IC (1, 1, -1, -1): clusters {1,2} and {3,4} double the variance.
        let r2 = res("b", &[1.0, 1.0, -1.0, -1.0]);
        let c = clustered_variance(&r2, &["x".into(), "x".into(), "y".into(), "y".into()]).unwrap();
        assert!((c.variance_of_mean - 2.0 * r2.variance_of_mean).abs() < 1e-15);
    }

    #[test]
    fn p_value_edge_cases() {
        let r = res("a", &[0.0, 0.0]);
        assert_eq!(r.p_value(), 1.0);
        let r = res("a", &[1.0, 1.0]);
        assert_eq!(r.p_value(), 0.0);
        let r = res("a", &[Z_975 - 2f64.sqrt(), Z_975 + 2f64.sqrt()]);
        assert!((r.p_value() - 0.05).abs() < 1e-9);
    }
}
