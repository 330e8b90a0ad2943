//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dtr::data::{ingest_wide, PolicyData, WideSchema};
use dtr::nuisance::{Family, ModelSpec};
use dtr::data::HistoryKind;
use dtr::simulation::{sim_single_stage, SingleStageParams};
use dtr::table::{Table, Value};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn spec(family: Family, formula: &str) -> ModelSpec {
    ModelSpec::new(family, formula, HistoryKind::State, false)
}

pub fn ols(formula: &str) -> ModelSpec {
    spec(Family::Ols, formula)
}

pub fn logit(formula: &str) -> ModelSpec {
    spec(Family::Logistic, formula)
}

/// Single-stage simulation with the engineered propensity feature
/// `W = (Z + L − 1) / max(|Z|, 1e-3)²` added as a covariate.
pub fn single_with_feature(n: usize, seed: u64) -> PolicyData {
    let sim = sim_single_stage(n, seed, &SingleStageParams::default()).unwrap();
    let mut t = sim.table.clone();
    let z = t.numeric("Z").unwrap();
    let l = t.numeric("L").unwrap();
    let w: Vec<f64> = z
        .iter()
        .zip(&l)
        .map(|(&z, &l)| (z + l - 1.0) / z.abs().max(1e-3).powi(2))
        .collect();
    t.push_numeric("W", &w).unwrap();
    let schema = WideSchema {
        actions: vec!["A".into()],
        covariates: ["Z", "L", "B", "W"]
            .iter()
            .map(|c| (c.to_string(), vec![Some(c.to_string())]))
            .collect(),
        utility: vec!["U".into()],
        ..Default::default()
    };
    ingest_wide(&t, &schema).unwrap()
}

/// Best objective over all trees whose thresholds are observed values
/// (`x <= t` left), enumerated exhaustively with separable leaves.
pub fn brute_tree_objective(rows: &[Vec<f64>], gamma: &[Vec<f64>], depth: usize) -> f64 {
    let n = rows.len();
    let p = rows[0].len();
    let m = gamma[0].len();
    let leaf = |members: &[usize]| -> f64 {
        (0..m)
            .map(|a| members.iter().map(|&i| gamma[i][a]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let stump = |members: &[usize]| -> f64 {
        let mut best = leaf(members);
        for j in 0..p {
            for &t in rows.iter().map(|r| &r[j]) {
                let (l, r): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&i| rows[i][j] <= t);
                best = best.max(leaf(&l) + leaf(&r));
            }
        }
        best
    };
    let all: Vec<usize> = (0..n).collect();
    if depth == 1 {
        return stump(&all);
    }
    let mut best = stump(&all);
    for j in 0..p {
        for &t in rows.iter().map(|r| &r[j]) {
            let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| rows[i][j] <= t);
            best = best.max(stump(&l) + stump(&r));
        }
    }
    best
}

/// Newton-Raphson for logistic regression with explicit Hessian and LU solves.
pub fn newton_logistic(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let p = x.ncols();
    let y = DVector::from_column_slice(y);
    let mut beta = DVector::zeros(p);
    for _ in 0..200 {
        let eta = x * &beta;
        let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let w = mu.map(|m| m * (1.0 - m));
        let grad = x.transpose() * (&y - &mu);
        let mut h = DMatrix::zeros(p, p);
        for i in 0..x.nrows() {
            let r = x.row(i);
            h += w[i] * r.transpose() * r;
        }
        let step = h.lu().solve(&grad).expect("nonsingular Hessian");
        beta += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    beta.iter().copied().collect()
}

/// Discrete two-stage toy with known laws. Binary `X_1`, `A_1`, `X_2`, `A_2`;
/// `U = μ(x1, a1, x2, a2) + N(0, 1)` with all rewards terminal.
pub struct Toy;

impl Toy {
    pub fn p_x1() -> f64 {
        0.5
    }
    pub fn p_a1(x1: u8) -> f64 {
        0.3 + 0.4 * f64::from(x1)
    }
    pub fn p_x2(x1: u8, a1: u8) -> f64 {
        0.2 + 0.3 * f64::from(x1) + 0.4 * f64::from(a1)
    }
    pub fn p_a2(x1: u8, a1: u8, x2: u8) -> f64 {
        0.25 + 0.2 * f64::from(x2) + 0.15 * f64::from(a1) + 0.1 * f64::from(x1)
    }
    pub fn mu(x1: u8, a1: u8, x2: u8, a2: u8) -> f64 {
        let (x1, a1, x2, a2) = (f64::from(x1), f64::from(a1), f64::from(x2), f64::from(a2));
        x1 + x2 + a1 * (0.8 - 1.5 * x1) + a2 * (1.2 * x1 - 0.6 + 0.9 * x2 - 1.4 * a1 * x2)
    }

    pub fn table(n: usize, seed: u64) -> Table {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for _ in 0..n {
            let b = |rng: &mut ChaCha8Rng, p: f64| u8::from(rng.gen::<f64>() < p);
            let x1 = b(&mut rng, Self::p_x1());
            let a1 = b(&mut rng, Self::p_a1(x1));
            let x2 = b(&mut rng, Self::p_x2(x1, a1));
            let a2 = b(&mut rng, Self::p_a2(x1, a1, x2));
            let noise: f64 = {
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            };
            let u = Self::mu(x1, a1, x2, a2) + noise;
            for (k, v) in [("X_1", x1 as f64), ("A_1", a1 as f64), ("X_2", x2 as f64), ("A_2", a2 as f64), ("U", u)] {
                cols.entry(k).or_default().push(v);
            }
        }
        Table::from_columns(
            ["X_1", "A_1", "X_2", "A_2", "U"]
                .iter()
                .map(|k| (k.to_string(), cols[k].iter().map(|&v| Value::Num(v)).collect()))
                .collect(),
        )
        .unwrap()
    }

    pub fn schema() -> WideSchema {
        WideSchema {
            actions: vec!["A_1".into(), "A_2".into()],
            covariates: vec![("X".into(), vec![Some("X_1".into()), Some("X_2".into())])],
            utility: vec!["U".into()],
            ..Default::default()
        }
    }

    pub fn data(n: usize, seed: u64) -> PolicyData {
        ingest_wide(&Self::table(n, seed), &Self::schema()).unwrap()
    }

    /// V-optimal rules by enumeration of the known laws: stage two uses
    /// `V_2 = (A_1, X_2)`, stage one `V_1 = X_1`. Returns
    /// (`d2[a1][x2]`, `d1[x1]`, stage-two blips, stage-one blips).
    pub fn v_optimal() -> ([[u8; 2]; 2], [u8; 2], [[f64; 2]; 2], [f64; 2]) {
        let pr = |p: f64, v: u8| if v == 1 { p } else { 1.0 - p };
        // B2(a1, x2) = E[μ(X1,a1,x2,1) − μ(X1,a1,x2,0) | A1=a1, X2=x2].
        let mut b2 = [[0.0; 2]; 2];
        let mut d2 = [[0u8; 2]; 2];
        for a1 in 0..2u8 {
            for x2 in 0..2u8 {
                let (mut num, mut den) = (0.0, 0.0);
                for x1 in 0..2u8 {
                    let w = pr(Self::p_x1(), x1) * pr(Self::p_a1(x1), a1) * pr(Self::p_x2(x1, a1), x2);
                    num += w * (Self::mu(x1, a1, x2, 1) - Self::mu(x1, a1, x2, 0));
                    den += w;
                }
                b2[a1 as usize][x2 as usize] = num / den;
                d2[a1 as usize][x2 as usize] = u8::from(num / den > 0.0);
            }
        }
        // Q1(x1, a1) = E[μ(x1, a1, X2, d2(a1, X2)) | x1, a1]; B1(x1) = Q1(x1,1) − Q1(x1,0).
        let q1 = |x1: u8, a1: u8| -> f64 {
            (0..2u8)
                .map(|x2| pr(Self::p_x2(x1, a1), x2) * Self::mu(x1, a1, x2, d2[a1 as usize][x2 as usize]))
                .sum()
        };
        let b1 = [q1(0, 1) - q1(0, 0), q1(1, 1) - q1(1, 0)];
        let d1 = [u8::from(b1[0] > 0.0), u8::from(b1[1] > 0.0)];
        (d2, d1, b2, b1)
    }

    /// Marginal probability of `(A_1 = a1, X_2 = x2)` under the observational law.
    pub fn mass_a1_x2(a1: u8, x2: u8) -> f64 {
        let pr = |p: f64, v: u8| if v == 1 { p } else { 1.0 - p };
        (0..2u8)
            .map(|x1| pr(Self::p_x1(), x1) * pr(Self::p_a1(x1), a1) * pr(Self::p_x2(x1, a1), x2))
            .sum()
    }
}

/// Empirical backward induction on the toy with saturated cell means:
/// returns `d2[x1][a1][x2]` and `d1[x1]` (ties to action 0).
pub fn empirical_dp(t: &Table) -> ([[[u8; 2]; 2]; 2], [u8; 2]) {
    let col = |c: &str| t.numeric(c).unwrap();
    let (x1, a1, x2, a2, u) = (col("X_1"), col("A_1"), col("X_2"), col("A_2"), col("U"));
    let n = u.len();
    let mut s2 = [[[[(0.0, 0usize); 2]; 2]; 2]; 2];
    for i in 0..n {
        let c = &mut s2[x1[i] as usize][a1[i] as usize][x2[i] as usize][a2[i] as usize];
        c.0 += u[i];
        c.1 += 1;
    }
    let mean = |c: (f64, usize)| c.0 / c.1 as f64;
    let mut d2 = [[[0u8; 2]; 2]; 2];
    let mut v2 = [[[0.0; 2]; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                let q0 = mean(s2[i][j][k][0]);
                let q1 = mean(s2[i][j][k][1]);
                d2[i][j][k] = u8::from(q1 > q0);
                v2[i][j][k] = q0.max(q1);
            }
        }
    }
    let mut s1 = [[(0.0, 0usize); 2]; 2];
    for i in 0..n {
        let c = &mut s1[x1[i] as usize][a1[i] as usize];
        c.0 += v2[x1[i] as usize][a1[i] as usize][x2[i] as usize];
        c.1 += 1;
    }
    let d1 = [
        u8::from(mean(s1[0][1]) > mean(s1[0][0])),
        u8::from(mean(s1[1][1]) > mean(s1[1][0])),
    ];
    (d2, d1)
}
