//! Simulation benchmarks: a single-stage and a two-stage data generating process,
//! their closed-form optimal policies and a Monte Carlo value oracle.
//!
//! Every subject draws from its own ChaCha8 stream (stream = subject index), in a
//! fixed order, so tables are reproducible and independent of chunking.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::{get_history, ingest_wide, HistoryKind, PolicyData, StageSel, WideSchema};
use crate::error::{Error, Result};
use crate::glm::expit;
use crate::policy::{Policy, StageInput, StageRule};
use crate::table::{Table, Value};

const MC_CHUNK: usize = 50_000;
const Z_CLAMP: f64 = 1e-3;

/// Parameters of the single-stage model
/// `A ~ Bern(expit(κ Z⁻² (Z + L − 1) + δ B))`,
/// `U ~ N(Z + L + A (γ Z + α L + β), σ²)` with `Z, L ~ N(0, 1)`, `B ~ Bern(π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleStageParams {
    pub pi: f64,
    pub kappa: f64,
    pub delta: f64,
    pub alpha_c: f64,
    pub beta_c: f64,
    pub gamma_c: f64,
    pub sigma: f64,
}

impl Default for SingleStageParams {
    fn default() -> Self {
        SingleStageParams {
            pi: 0.3,
            kappa: 0.1,
            delta: 0.5,
            alpha_c: 1.0,
            beta_c: -2.5,
            gamma_c: 3.0,
            sigma: 1.0,
        }
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, f64)>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("parameter '{kv}' is not key=value")))?;
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("parameter '{k}' has a non-numeric value '{v}'")))?;
            if !x.is_finite() {
                return Err(Error::Config(format!("parameter '{k}' is not finite")));
            }
            Ok((k.trim().to_string(), x))
        })
        .collect()
}

impl SingleStageParams {
    /// Parse `p=..,k=..,d=..,a=..,b=..,c=..[,sigma=..]`; missing keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Self::default();
        for (k, v) in parse_pairs(text)? {
            match k.as_str() {
                "p" | "pi" => p.pi = v,
                "k" | "kappa" => p.kappa = v,
                "d" | "delta" => p.delta = v,
                "a" | "alpha" => p.alpha_c = v,
                "b" | "beta" => p.beta_c = v,
                "c" | "gamma" => p.gamma_c = v,
                "s" | "sigma" => p.sigma = v,
                other => return Err(Error::Config(format!("unknown single-stage parameter '{other}'"))),
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::Config(format!("pi = {} is outside [0, 1]", self.pi)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma = {} must be positive", self.sigma)));
        }
        Ok(())
    }

    /// Blip `γ Z + α L + β`.
    pub fn blip(&self, z: f64, l: f64) -> f64 {
        self.gamma_c * z + self.alpha_c * l + self.beta_c
    }

    /// Value of the optimal rule, `E[max(0, blip)]` with blip ~ N(β, γ² + α²).
    pub fn optimal_value(&self) -> f64 {
        let mu = self.beta_c;
        let s = (self.gamma_c.powi(2) + self.alpha_c.powi(2)).sqrt();
        let nd = std_normal();
        mu * nd.cdf(mu / s) + s * nd.pdf(mu / s)
    }
}

/// Parameters of the two-stage model: `C₂ ~ N(γ L₁ + A₁, 1)`, `A_k ~ Bern(expit(β C_k))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStageParams {
    pub gamma: f64,
    pub beta: f64,
}

impl Default for TwoStageParams {
    fn default() -> Self {
        TwoStageParams { gamma: 0.5, beta: 1.0 }
    }
}

impl TwoStageParams {
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Self::default();
        for (k, v) in parse_pairs(text)? {
            match k.as_str() {
                "gamma" => p.gamma = v,
                "beta" => p.beta = v,
                other => return Err(Error::Config(format!("unknown two-stage parameter '{other}'"))),
            }
        }
        Ok(p)
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid normal")
}

/// `κ(μ) = E[max(X, 0)]` for `X ~ N(μ, 1)`: `Φ(μ) μ + φ(μ)`.
pub fn kappa(mu: f64) -> f64 {
    let nd = std_normal();
    nd.cdf(mu) * mu + nd.pdf(mu)
}

struct Draws {
    rng: ChaCha8Rng,
    normal: Normal,
}

impl Draws {
    fn new(seed: u64, subject: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(subject as u64);
        Draws {
            rng,
            normal: std_normal(),
        }
    }

    /// Uniform on the open interval (0, 1).
    fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    fn normal(&mut self) -> f64 {
        let u = self.uniform();
        self.normal.inverse_cdf(u)
    }
}

/// Simulated data with its raw table.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub pd: PolicyData,
    pub table: Table,
    /// Draws of `Z` whose magnitude was clamped in the propensity.
    pub clamped: usize,
}

pub fn single_stage_schema() -> WideSchema {
    WideSchema {
        id: None,
        actions: vec!["A".into()],
        covariates: ["Z", "L", "B"]
            .iter()
            .map(|c| (c.to_string(), vec![Some(c.to_string())]))
            .collect(),
        utility: vec!["U".into()],
        baseline: vec![],
    }
}

pub fn two_stage_schema() -> WideSchema {
    WideSchema {
        id: None,
        actions: vec!["A_1".into(), "A_2".into()],
        covariates: ["L", "C"]
            .iter()
            .map(|c| (c.to_string(), vec![Some(format!("{c}_1")), Some(format!("{c}_2"))]))
            .collect(),
        utility: vec!["U_1".into(), "U_2".into(), "U_3".into()],
        baseline: vec![],
    }
}

struct SingleRaw {
    z: f64,
    l: f64,
    b: f64,
    u_a: f64,
    e: f64,
}

fn single_raw(seed: u64, i: usize, p: &SingleStageParams) -> SingleRaw {
    let mut d = Draws::new(seed, i);
    let z = d.normal();
    let l = d.normal();
    let b = if d.uniform() < p.pi { 1.0 } else { 0.0 };
    let u_a = d.uniform();
    let e = d.normal();
    SingleRaw { z, l, b, u_a, e }
}

fn single_propensity(r: &SingleRaw, p: &SingleStageParams) -> (f64, bool) {
    let clamped = r.z.abs() < Z_CLAMP;
    let z2 = r.z.abs().max(Z_CLAMP).powi(2);
    (expit(p.kappa / z2 * (r.z + r.l - 1.0) + p.delta * r.b), clamped)
}

fn single_outcome(r: &SingleRaw, a: f64, p: &SingleStageParams) -> f64 {
    r.z + r.l + a * p.blip(r.z, r.l) + p.sigma * r.e
}

fn single_table(rows: &[SingleRaw], a: &[f64], u: &[f64]) -> Table {
    let col = |f: &dyn Fn(&SingleRaw) -> f64| rows.iter().map(|r| Value::Num(f(r))).collect::<Vec<_>>();
    Table::from_columns(vec![
        ("Z".into(), col(&|r| r.z)),
        ("L".into(), col(&|r| r.l)),
        ("B".into(), col(&|r| r.b)),
        ("A".into(), a.iter().map(|&x| Value::Num(x)).collect()),
        ("U".into(), u.iter().map(|&x| Value::Num(x)).collect()),
    ])
    .expect("consistent columns")
}

/// Observational draw from the single-stage model; columns `Z, L, B, A, U`.
pub fn sim_single_stage(n: usize, seed: u64, p: &SingleStageParams) -> Result<Simulation> {
    if n == 0 {
        return Err(Error::Range("n must be at least 1".into()));
    }
    p.validate()?;
    let rows: Vec<SingleRaw> = (0..n).map(|i| single_raw(seed, i, p)).collect();
    let mut clamped = 0;
    let a: Vec<f64> = rows
        .iter()
        .map(|r| {
            let (pa, c) = single_propensity(r, p);
            clamped += usize::from(c);
            if r.u_a < pa {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let u: Vec<f64> = rows.iter().zip(&a).map(|(r, &a)| single_outcome(r, a, p)).collect();
    let table = single_table(&rows, &a, &u);
    let pd = ingest_wide(&table, &single_stage_schema())?;
    Ok(Simulation { pd, table, clamped })
}

struct TwoRaw {
    l1: f64,
    e1: f64,
    u1: f64,
    l2: f64,
    e2: f64,
    u2: f64,
    l3: f64,
}

fn two_raw(seed: u64, i: usize) -> TwoRaw {
    let mut d = Draws::new(seed, i);
    TwoRaw {
        l1: d.normal(),
        e1: d.normal(),
        u1: d.uniform(),
        l2: d.normal(),
        e2: d.normal(),
        u2: d.uniform(),
        l3: d.normal(),
    }
}

fn two_table(rows: &[TwoRaw], a1: &[f64], a2: &[f64], p: &TwoStageParams) -> Table {
    let n = rows.len();
    let c1: Vec<f64> = rows.iter().map(|r| r.l1 + r.e1).collect();
    let c2: Vec<f64> = (0..n).map(|i| p.gamma * rows[i].l1 + a1[i] + rows[i].e2).collect();
    let num = |v: Vec<f64>| v.into_iter().map(Value::Num).collect::<Vec<_>>();
    Table::from_columns(vec![
        ("L_1".into(), num(rows.iter().map(|r| r.l1).collect())),
        ("C_1".into(), num(c1.clone())),
        ("A_1".into(), num(a1.to_vec())),
        ("L_2".into(), num(rows.iter().map(|r| r.l2).collect())),
        ("C_2".into(), num(c2.clone())),
        ("A_2".into(), num(a2.to_vec())),
        ("L_3".into(), num(rows.iter().map(|r| r.l3).collect())),
        ("U_1".into(), num(rows.iter().map(|r| r.l1).collect())),
        ("U_2".into(), num((0..n).map(|i| a1[i] * c1[i] + rows[i].l2).collect())),
        ("U_3".into(), num((0..n).map(|i| a2[i] * c2[i] + rows[i].l3).collect())),
    ])
    .expect("consistent columns")
}

/// Observational draw from the two-stage model; columns
/// `L_1, C_1, A_1, L_2, C_2, A_2, L_3, U_1, U_2, U_3`.
pub fn sim_two_stage(n: usize, seed: u64, p: &TwoStageParams) -> Result<Simulation> {
    if n == 0 {
        return Err(Error::Range("n must be at least 1".into()));
    }
    let rows: Vec<TwoRaw> = (0..n).map(|i| two_raw(seed, i)).collect();
    let bern = |u: f64, c: f64| if u < expit(p.beta * c) { 1.0 } else { 0.0 };
    let a1: Vec<f64> = rows.iter().map(|r| bern(r.u1, r.l1 + r.e1)).collect();
    let a2: Vec<f64> = rows
        .iter()
        .zip(&a1)
        .map(|(r, &a)| bern(r.u2, p.gamma * r.l1 + a + r.e2))
        .collect();
    let table = two_table(&rows, &a1, &a2, p);
    let pd = ingest_wide(&table, &two_stage_schema())?;
    Ok(Simulation { pd, table, clamped: 0 })
}

/// `I{γ Z + α L + β > 0}`.
pub fn optimal_policy_single(p: &SingleStageParams) -> Policy {
    Policy::new(
        "optimal",
        vec![StageRule::LinearThreshold {
            history: HistoryKind::State,
            coefficients: BTreeMap::from([("Z".to_string(), p.gamma_c), ("L".to_string(), p.alpha_c)]),
            intercept: p.beta_c,
            action_if_positive: "1".into(),
            action_else: "0".into(),
        }],
    )
}

/// Stage one: `I{C₁ + κ(γ L₁ + 1) − κ(γ L₁) > 0}`; stage two: `I{C₂ > 0}`.
pub fn optimal_policy_two_stage(p: &TwoStageParams) -> Policy {
    let gamma = p.gamma;
    let stage1 = StageRule::custom(move |input: &StageInput| {
        let h = input.state;
        let num = |name: &str| -> Result<Vec<f64>> {
            h.column_or_err(name)?
                .values
                .iter()
                .map(|v| v.as_f64().ok_or_else(|| Error::Schema(format!("'{name}' is not numeric"))))
                .collect()
        };
        let l = num("L")?;
        let c = num("C")?;
        Ok(l.iter()
            .zip(&c)
            .map(|(&l, &c)| {
                if c + kappa(gamma * l + 1.0) - kappa(gamma * l) > 0.0 {
                    "1".to_string()
                } else {
                    "0".to_string()
                }
            })
            .collect())
    });
    let stage2 = StageRule::LinearThreshold {
        history: HistoryKind::State,
        coefficients: BTreeMap::from([("C".to_string(), 1.0)]),
        intercept: 0.0,
        action_if_positive: "1".into(),
        action_else: "0".into(),
    };
    Policy::new("optimal", vec![stage1, stage2])
}

/// Which benchmark model to simulate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dgp {
    Single(SingleStageParams),
    Two(TwoStageParams),
}

/// Placeholder actions so both levels exist while a stage is still undecided.
fn placeholder(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i % 2) as f64).collect()
}

fn stage_decisions(policy: &Policy, pd: &PolicyData, k: usize) -> Result<Vec<f64>> {
    let full = get_history(pd, StageSel::Stage(k), HistoryKind::Full)?;
    let state = get_history(pd, StageSel::Stage(k), HistoryKind::State)?;
    let binary = ["0".to_string(), "1".to_string()];
    let acts = policy.apply_stage(k, pd.max_stages(), &StageInput { full: &full, state: &state }, Some(&binary))?;
    Ok(acts.iter().map(|a| if a == "1" { 1.0 } else { 0.0 }).collect())
}

/// Utilities of subjects `start..start+len` with actions forced by `policy`.
fn forced_utilities(dgp: &Dgp, policy: &Policy, seed: u64, start: usize, len: usize) -> Result<Vec<f64>> {
    match dgp {
        Dgp::Single(p) => {
            let rows: Vec<SingleRaw> = (start..start + len).map(|i| single_raw(seed, i, p)).collect();
            let zeros = vec![0.0; len];
            let pd = ingest_wide(&single_table(&rows, &placeholder(len), &zeros), &single_stage_schema())?;
            let a = stage_decisions(policy, &pd, 1)?;
            Ok(rows.iter().zip(&a).map(|(r, &a)| single_outcome(r, a, p)).collect())
        }
        Dgp::Two(p) => {
            let rows: Vec<TwoRaw> = (start..start + len).map(|i| two_raw(seed, i)).collect();
            let ph = placeholder(len);
            let pd = ingest_wide(&two_table(&rows, &ph, &ph, p), &two_stage_schema())?;
            let a1 = stage_decisions(policy, &pd, 1)?;
            let pd = ingest_wide(&two_table(&rows, &a1, &ph, p), &two_stage_schema())?;
            let a2 = stage_decisions(policy, &pd, 2)?;
            let t = two_table(&rows, &a1, &a2, p);
            let u: Vec<f64> = ["U_1", "U_2", "U_3"]
                .iter()
                .map(|c| t.numeric(c))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(vec![0.0; len], |acc, col| acc.iter().zip(col).map(|(a, b)| a + b).collect());
            Ok(u)
        }
    }
}

/// Value of `policy` by forced-action simulation: mean utility and its MC standard error.
pub fn mc_value_oracle(dgp: &Dgp, policy: &Policy, n_mc: usize, seed: u64) -> Result<(f64, f64)> {
    use rayon::prelude::*;
    if n_mc < 2 {
        return Err(Error::Range("n_mc must be at least 2".into()));
    }
    let chunks: Vec<(usize, usize)> = (0..n_mc)
        .step_by(MC_CHUNK)
        .map(|s| (s, MC_CHUNK.min(n_mc - s)))
        .collect();
    let sums: Vec<(f64, f64)> = chunks
        .par_iter()
        .map(|&(s, len)| {
            let u = forced_utilities(dgp, policy, seed, s, len)?;
            Ok((u.iter().sum(), u.iter().map(|x| x * x).sum()))
        })
        .collect::<Result<_>>()?;
    let n = n_mc as f64;
    let (s1, s2) = sums.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let mean = s1 / n;
    let var = (s2 - n * mean * mean) / (n - 1.0);
    Ok((mean, (var.max(0.0) / n).sqrt()))
}
