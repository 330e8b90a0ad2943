//! Least squares, binomial and multinomial logistic regression.
//!
//! Rank handling is deterministic: columns are orthogonalized left to right and a
//! column whose residual norm falls below `1e-10` times its own norm is aliased
//! (coefficient fixed at zero).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance below which a column is treated as linearly dependent.
pub const ALIAS_TOL: f64 = 1e-10;
const ETA_CLAMP: f64 = 30.0;
const MAX_ITER: usize = 100;
const SCORE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub coef: Vec<f64>,
    pub aliased: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coef: Vec<f64>,
    pub aliased: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
    /// Some class is empty or perfectly fitted (fitted probabilities within 1e-8 of the labels).
    pub separation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultinomialFit {
    /// `p x (m - 1)` coefficients, column `j` for class `j + 1` against class 0.
    pub coef: Vec<Vec<f64>>,
    pub aliased: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
    pub separation: bool,
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_weights(n: usize, w: Option<&[f64]>) -> Result<Vec<f64>> {
    match w {
        None => Ok(vec![1.0; n]),
        Some(w) => {
            if w.len() != n {
                return Err(Error::Fit(format!("{} weights for {n} rows", w.len())));
            }
            if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::Fit("weights must be finite and non-negative".into()));
            }
            Ok(w.to_vec())
        }
    }
}

/// Weighted least squares by modified Gram-Schmidt with one reorthogonalization pass.
fn wls(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<LinearFit> {
    let (n, p) = x.shape();
    if n == 0 {
        return Err(Error::Fit("no rows to fit".into()));
    }
    if y.len() != n {
        return Err(Error::Fit(format!("{} responses for {n} rows", y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite values in regression input".into()));
    }
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let mut qs: Vec<DVector<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut r = DMatrix::<f64>::zeros(p, p);
    let mut aliased = vec![false; p];
    for j in 0..p {
        let mut v = DVector::from_iterator(n, x.column(j).iter().zip(&sw).map(|(a, s)| a * s));
        let norm0 = v.norm();
        for _ in 0..2 {
            for (i, q) in qs.iter().enumerate() {
                let c = q.dot(&v);
                r[(i, qs.len())] += c;
                v.axpy(-c, q, 1.0);
            }
        }
        let nv = v.norm();
        if norm0 == 0.0 || nv <= ALIAS_TOL * norm0 {
            aliased[j] = true;
            for i in 0..qs.len() {
                r[(i, qs.len())] = 0.0;
            }
            continue;
        }
        r[(qs.len(), qs.len())] = nv;
        qs.push(v / nv);
        kept.push(j);
    }
    let yw = DVector::from_iterator(n, y.iter().zip(&sw).map(|(a, s)| a * s));
    let k = kept.len();
    let qty: Vec<f64> = qs.iter().map(|q| q.dot(&yw)).collect();
    let mut b = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = qty[i];
        for (jj, bj) in b.iter().enumerate().take(k).skip(i + 1) {
            s -= r[(i, jj)] * bj;
        }
        b[i] = s / r[(i, i)];
    }
    let mut coef = vec![0.0; p];
    for (i, &j) in kept.iter().enumerate() {
        coef[j] = b[i];
    }
    Ok(LinearFit { coef, aliased })
}

/// Ordinary (optionally weighted) least squares.
pub fn fit_ols(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<LinearFit> {
    let w = check_weights(x.nrows(), weights)?;
    wls(x, y, &w)
}

pub fn linear_predict(x: &DMatrix<f64>, coef: &[f64]) -> Vec<f64> {
    (x * DVector::from_column_slice(coef)).iter().copied().collect()
}

fn binomial_deviance(y: &[f64], mu: &[f64], w: &[f64]) -> f64 {
    let mut d = 0.0;
    for i in 0..y.len() {
        let m = mu[i].clamp(1e-300, 1.0 - 1e-16);
        if y[i] > 0.0 {
            d -= 2.0 * w[i] * y[i] * m.ln();
        }
        if y[i] < 1.0 {
            d -= 2.0 * w[i] * (1.0 - y[i]) * (1.0 - m).ln();
        }
    }
    d
}

fn eta_of(x: &DMatrix<f64>, coef: &[f64]) -> Vec<f64> {
    linear_predict(x, coef).into_iter().map(|e| e.clamp(-ETA_CLAMP, ETA_CLAMP)).collect()
}

/// Binary logistic regression by iteratively reweighted least squares.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    let w = check_weights(n, weights)?;
    if n == 0 {
        return Err(Error::Fit("no rows to fit".into()));
    }
    if y.len() != n || y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Fit("logistic response must be 0/1 with one value per row".into()));
    }
    let mut mu: Vec<f64> = (0..n).map(|i| (w[i] * y[i] + 0.5) / (w[i] + 1.0)).collect();
    let mut eta: Vec<f64> = mu.iter().map(|&m| logit(m)).collect();
    let mut coef = vec![0.0; p];
    let mut aliased = vec![false; p];
    let mut dev = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=MAX_ITER {
        iterations = it;
        let mut z = vec![0.0; n];
        let mut wt = vec![0.0; n];
        for i in 0..n {
            let v = (mu[i] * (1.0 - mu[i])).max(1e-300);
            z[i] = eta[i] + (y[i] - mu[i]) / v;
            wt[i] = w[i] * v;
        }
        let fit = wls(x, &z, &wt)?;
        let mut cand = fit.coef;
        aliased = fit.aliased;
        let mut cand_eta = eta_of(x, &cand);
        let mut cand_mu: Vec<f64> = cand_eta.iter().map(|&e| expit(e)).collect();
        let mut cand_dev = binomial_deviance(y, &cand_mu, &w);
        let mut halvings = 0;
        while it > 1 && !(cand_dev <= dev * (1.0 + 1e-12) + 1e-12) && halvings < 30 {
            for (c, o) in cand.iter_mut().zip(&coef) {
                *c = 0.5 * (*c + o);
            }
            cand_eta = eta_of(x, &cand);
            cand_mu = cand_eta.iter().map(|&e| expit(e)).collect();
            cand_dev = binomial_deviance(y, &cand_mu, &w);
            halvings += 1;
        }
        coef = cand;
        eta = cand_eta;
        mu = cand_mu;
        dev = cand_dev;
        let score = max_abs_score(x, y, &mu, &w, &aliased);
        if score < SCORE_TOL {
            converged = true;
            break;
        }
    }
    let separation = separated(y, &mu);
    Ok(LogisticFit {
        coef,
        aliased,
        iterations,
        converged,
        separation,
    })
}

fn max_abs_score(x: &DMatrix<f64>, y: &[f64], mu: &[f64], w: &[f64], aliased: &[bool]) -> f64 {
    let r = DVector::from_iterator(y.len(), (0..y.len()).map(|i| w[i] * (y[i] - mu[i])));
    let g = x.tr_mul(&r);
    g.iter()
        .zip(aliased)
        .filter(|(_, &a)| !a)
        .fold(0.0f64, |m, (v, _)| m.max(v.abs()))
}

fn separated(y: &[f64], mu: &[f64]) -> bool {
    let ones: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1.0).collect();
    let zeros: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 0.0).collect();
    ones.is_empty()
        || zeros.is_empty()
        || ones.iter().all(|&i| mu[i] > 1.0 - 1e-8)
        || zeros.iter().all(|&i| mu[i] < 1e-8)
}

pub fn logistic_predict(x: &DMatrix<f64>, coef: &[f64]) -> Vec<f64> {
    eta_of(x, coef).into_iter().map(expit).collect()
}

/// Baseline-category multinomial logistic regression by damped Newton steps.
/// `y[i]` is the class index in `0..m`; every class must occur.
pub fn fit_multinomial(x: &DMatrix<f64>, y: &[usize], m: usize, weights: Option<&[f64]>) -> Result<MultinomialFit> {
    let (n, p) = x.shape();
    let w = check_weights(n, weights)?;
    if n == 0 {
        return Err(Error::Fit("no rows to fit".into()));
    }
    if m < 2 {
        return Err(Error::Fit("multinomial model needs at least two classes".into()));
    }
    if y.len() != n || y.iter().any(|&c| c >= m) {
        return Err(Error::Fit("class index out of range".into()));
    }
    for c in 0..m {
        if !(0..n).any(|i| y[i] == c && w[i] > 0.0) {
            return Err(Error::Fit(format!("class {c} does not occur in the training data")));
        }
    }
    let aliased = wls(x, &vec![0.0; n], &w)?.aliased;
    let kept: Vec<usize> = (0..p).filter(|&j| !aliased[j]).collect();
    let xr = x.select_columns(&kept);
    let q = kept.len();
    let d = q * (m - 1);
    let mut beta = DVector::<f64>::zeros(d);

    let probs = |beta: &DVector<f64>| -> Vec<Vec<f64>> {
        let b = DMatrix::from_column_slice(q, m - 1, beta.as_slice());
        let eta = &xr * b;
        (0..n)
            .map(|i| {
                let e: Vec<f64> = (0..m - 1).map(|j| eta[(i, j)].clamp(-ETA_CLAMP, ETA_CLAMP)).collect();
                let mx = e.iter().fold(0.0f64, |a, &b| a.max(b));
                let mut pr = Vec::with_capacity(m);
                pr.push((-mx).exp());
                pr.extend(e.iter().map(|&v| (v - mx).exp()));
                let s: f64 = pr.iter().sum();
                pr.iter().map(|v| v / s).collect()
            })
            .collect()
    };
    let deviance = |pr: &[Vec<f64>]| -> f64 { -2.0 * (0..n).map(|i| w[i] * pr[i][y[i]].max(1e-300).ln()).sum::<f64>() };

    let mut pr = probs(&beta);
    let mut dev = deviance(&pr);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=MAX_ITER {
        iterations = it;
        let mut grad = DVector::<f64>::zeros(d);
        let mut hess = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let xi = xr.row(i);
            for a in 0..m - 1 {
                let ra = w[i] * ((y[i] == a + 1) as u8 as f64 - pr[i][a + 1]);
                for (u, xu) in xi.iter().enumerate() {
                    grad[a * q + u] += ra * xu;
                }
                for b in 0..m - 1 {
                    let c = w[i] * (if a == b { pr[i][a + 1] } else { 0.0 } - pr[i][a + 1] * pr[i][b + 1]);
                    if c == 0.0 {
                        continue;
                    }
                    for (u, xu) in xi.iter().enumerate() {
                        let cu = c * xu;
                        for (v, xv) in xi.iter().enumerate() {
                            hess[(a * q + u, b * q + v)] += cu * xv;
                        }
                    }
                }
            }
        }
        if grad.amax() < SCORE_TOL {
            converged = true;
            iterations = it - 1;
            break;
        }
        let ridge = 1e-12 * (1.0 + hess.diagonal().amax());
        for k in 0..d {
            hess[(k, k)] += ridge;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => return Err(Error::Fit("multinomial Hessian is not positive definite".into())),
        };
        let mut t = 1.0;
        let mut cand = &beta + &step * t;
        let mut cpr = probs(&cand);
        let mut cdev = deviance(&cpr);
        let mut halvings = 0;
        while !(cdev <= dev * (1.0 + 1e-12) + 1e-12) && halvings < 30 {
            t *= 0.5;
            cand = &beta + &step * t;
            cpr = probs(&cand);
            cdev = deviance(&cpr);
            halvings += 1;
        }
        beta = cand;
        pr = cpr;
        dev = cdev;
    }
    if !converged {
        // Final gradient check after the last update.
        let mut gmax = 0.0f64;
        for a in 0..m - 1 {
            for u in 0..q {
                let g: f64 = (0..n)
                    .map(|i| w[i] * ((y[i] == a + 1) as u8 as f64 - pr[i][a + 1]) * xr[(i, u)])
                    .sum();
                gmax = gmax.max(g.abs());
            }
        }
        converged = gmax < SCORE_TOL;
    }
    let separation = (0..m).any(|c| {
        let rows: Vec<usize> = (0..n).filter(|&i| y[i] == c).collect();
        rows.iter().all(|&i| pr[i][c] > 1.0 - 1e-8)
    });
    let mut coef = vec![vec![0.0; m - 1]; p];
    for (u, &j) in kept.iter().enumerate() {
        for a in 0..m - 1 {
            coef[j][a] = beta[a * q + u];
        }
    }
    Ok(MultinomialFit {
        coef,
        aliased,
        iterations,
        converged,
        separation,
    })
}

/// Class probabilities (`n x m`) from a multinomial fit.
pub fn multinomial_predict(x: &DMatrix<f64>, coef: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = coef.len();
    let m1 = coef.first().map_or(0, Vec::len);
    let b = DMatrix::from_fn(p, m1, |i, j| coef[i][j]);
    let eta = x * b;
    (0..x.nrows())
        .map(|i| {
            let e: Vec<f64> = (0..m1).map(|j| eta[(i, j)].clamp(-ETA_CLAMP, ETA_CLAMP)).collect();
            let mx = e.iter().fold(0.0f64, |a, &b| a.max(b));
            let mut pr = Vec::with_capacity(m1 + 1);
            pr.push((-mx).exp());
            pr.extend(e.iter().map(|&v| (v - mx).exp()));
            let s: f64 = pr.iter().sum();
            pr.iter().map(|v| v / s).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_interpolation() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let f = fit_ols(&x, &[1.0, 3.0], None).unwrap();
        assert!((f.coef[0] - 1.0).abs() < 1e-14 && (f.coef[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn duplicated_column_is_aliased() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
        let f = fit_ols(&x, &[1.0, 2.0, 4.0], None).unwrap();
        assert_eq!(f.aliased, [false, false, true]);
        assert_eq!(f.coef[2], 0.0);
        let x2 = x.columns(0, 2).into_owned();
        let g = fit_ols(&x2, &[1.0, 2.0, 4.0], None).unwrap();
        let (a, b) = (linear_predict(&x, &f.coef), linear_predict(&x2, &g.coef));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rows_fail() {
        assert!(matches!(fit_ols(&DMatrix::zeros(0, 1), &[], None), Err(Error::Fit(_))));
    }

    #[test]
    fn intercept_logistic_is_logit_of_mean() {
        let x = DMatrix::from_element(8, 1, 1.0);
        let y = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let f = fit_logistic(&x, &y, None).unwrap();
        assert!(f.converged && !f.separation);
        assert!((f.coef[0] - (0.25f64 / 0.75).ln()).abs() < 1e-10);
    }

    #[test]
    fn all_zero_response_flags_separation() {
        let x = DMatrix::from_element(5, 1, 1.0);
        let f = fit_logistic(&x, &[0.0; 5], None).unwrap();
        assert!(f.separation);
        assert!(logistic_predict(&x, &f.coef).iter().all(|&p| p <= 1e-8));
    }

    #[test]
    fn multinomial_intercept_matches_frequencies() {
        let mut y = vec![0; 10];
        y.extend(vec![1; 20]);
        y.extend(vec![2; 70]);
        let x = DMatrix::from_element(100, 1, 1.0);
        let f = fit_multinomial(&x, &y, 3, None).unwrap();
        let p = &multinomial_predict(&x, &f.coef)[0];
        for (a, b) in p.iter().zip([0.1, 0.2, 0.7]) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn multinomial_absent_class_fails() {
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(fit_multinomial(&x, &[0, 0, 1], 3, None), Err(Error::Fit(_))));
    }
}
