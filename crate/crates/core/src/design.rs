//! A small formula language (`~A*X`, `~.-x`, `~A*(Z+L) - 1`) and the design
//! matrices it expands to over a history table.
//!
//! Grammar:
//!
//! ```text
//! formula := '~' sum
//! sum     := ['-'] prod (('+' | '-') prod)*
//! prod    := inter ('*' inter)*
//! inter   := atom (':' atom)*
//! atom    := name | '.' | '(' sum ')' | '1' | '0'
//! ```
//!
//! `a*b` expands to `a + b + a:b`. `.` stands for every history column and is
//! resolved when the design is built. Removals (`-term`) and the intercept
//! markers `1`/`0` are only allowed at the top level.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::HistoryTable;
use crate::error::{Error, Result};
use crate::table::Value;

/// Name of the synthetic action variable available to Q-model formulas.
pub const ACTION_VAR: &str = "A";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Factor {
    Var(String),
    Dot,
}

/// An interaction of factors; the empty term is the intercept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Term(pub Vec<Factor>);

impl Term {
    pub fn var(name: &str) -> Self {
        Term(vec![Factor::Var(name.to_string())])
    }

    fn has_dot(&self) -> bool {
        self.0.contains(&Factor::Dot)
    }

    /// Variables of the term (factors other than `.`).
    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.0.iter().filter_map(|f| match f {
            Factor::Var(v) => Some(v.as_str()),
            Factor::Dot => None,
        })
    }

    fn merge(&self, other: &Term) -> Term {
        let mut f = self.0.clone();
        for x in &other.0 {
            if !f.contains(x) {
                f.push(x.clone());
            }
        }
        Term(f)
    }
}

impl PartialEq for Term {
    fn eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len() && self.0.iter().all(|f| other.0.contains(f))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self
            .0
            .iter()
            .map(|x| match x {
                Factor::Var(v) => v.as_str(),
                Factor::Dot => ".",
            })
            .collect();
        write!(f, "{}", parts.join(":"))
    }
}

/// Parsed formula: expanded terms in first-appearance order, pending removals
/// (applied again once `.` is resolved) and the intercept flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignSpec {
    pub terms: Vec<Term>,
    pub removed: Vec<Term>,
    pub intercept: bool,
    pub source_text: String,
}

impl PartialEq for DesignSpec {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms && self.removed == other.removed && self.intercept == other.intercept
    }
}

impl fmt::Display for DesignSpec {
    /// Canonical form, e.g. `~A + X + A:X - x - 1`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::from("~");
        let body: Vec<String> = self.terms.iter().map(Term::to_string).collect();
        if body.is_empty() {
            s.push_str(if self.intercept { "1" } else { "0" });
            for r in &self.removed {
                s.push_str(&format!(" - {r}"));
            }
        } else {
            s.push_str(&body.join(" + "));
            for r in &self.removed {
                s.push_str(&format!(" - {r}"));
            }
            if !self.intercept {
                s.push_str(" - 1");
            }
        }
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Tilde,
    Plus,
    Minus,
    Star,
    Colon,
    LParen,
    RParen,
    Dot,
    One,
    Zero,
    Name(String),
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        let single = match c {
            '~' => Some(Tok::Tilde),
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            ':' => Some(Tok::Colon),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            _ => None,
        };
        if let Some(t) = single {
            out.push((start, t));
            i += 1;
        } else if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' || c == '.' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.') {
                i += 1;
            }
            let word = &text[start..i];
            out.push((start, if word == "." { Tok::Dot } else { Tok::Name(word.to_string()) }));
        } else if c.is_ascii_digit() {
            while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                i += 1;
            }
            let t = match &text[start..i] {
                "1" => Tok::One,
                "0" => Tok::Zero,
                other => {
                    return Err(Error::Syntax {
                        offset: start,
                        message: format!("unknown token '{other}'"),
                    })
                }
            };
            out.push((start, t));
        } else {
            return Err(Error::Syntax {
                offset: start,
                message: format!("unknown token '{c}'"),
            });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: &'a [(usize, Tok)],
    pos: usize,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            offset: self.offset(),
            message: message.into(),
        })
    }

    /// Top-level sum: returns (terms, removed, intercept).
    fn top(&mut self) -> Result<(Vec<Term>, Vec<Term>, bool)> {
        let mut terms: Vec<Term> = Vec::new();
        let mut removed: Vec<Term> = Vec::new();
        let mut intercept = true;
        let mut sign = 1;
        if self.peek() == Some(&Tok::Minus) {
            sign = -1;
            self.pos += 1;
        }
        loop {
            match self.peek() {
                Some(Tok::One) | Some(Tok::Zero) => {
                    let one = self.peek() == Some(&Tok::One);
                    self.pos += 1;
                    intercept = one == (sign > 0);
                }
                _ => {
                    let ts = self.prod()?;
                    for t in ts {
                        let list = if sign > 0 { &mut terms } else { &mut removed };
                        if !list.contains(&t) {
                            list.push(t);
                        }
                    }
                }
            }
            match self.peek() {
                Some(Tok::Plus) => sign = 1,
                Some(Tok::Minus) => sign = -1,
                None => break,
                Some(_) => return self.err("expected '+', '-' or end of formula"),
            }
            self.pos += 1;
        }
        Ok((terms, removed, intercept))
    }

    fn sum(&mut self) -> Result<Vec<Term>> {
        let mut out: Vec<Term> = Vec::new();
        loop {
            for t in self.prod()? {
                if !out.contains(&t) {
                    out.push(t);
                }
            }
            match self.peek() {
                Some(Tok::Plus) => self.pos += 1,
                Some(Tok::Minus) => return self.err("removal is only allowed at the top level"),
                _ => return Ok(out),
            }
        }
    }

    fn prod(&mut self) -> Result<Vec<Term>> {
        let mut acc = self.inter()?;
        while self.peek() == Some(&Tok::Star) {
            self.pos += 1;
            let rhs = self.inter()?;
            let mut next = acc.clone();
            for t in rhs.iter().cloned().chain(cross(&acc, &rhs)) {
                if !next.contains(&t) {
                    next.push(t);
                }
            }
            acc = next;
        }
        Ok(acc)
    }

    fn inter(&mut self) -> Result<Vec<Term>> {
        let mut acc = self.atom()?;
        while self.peek() == Some(&Tok::Colon) {
            self.pos += 1;
            let rhs = self.atom()?;
            acc = cross(&acc, &rhs);
        }
        Ok(acc)
    }

    fn atom(&mut self) -> Result<Vec<Term>> {
        match self.peek().cloned() {
            Some(Tok::Name(n)) => {
                self.pos += 1;
                Ok(vec![Term::var(&n)])
            }
            Some(Tok::Dot) => {
                self.pos += 1;
                Ok(vec![Term(vec![Factor::Dot])])
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.sum()?;
                if self.peek() != Some(&Tok::RParen) {
                    return self.err("expected ')'");
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(Tok::One) | Some(Tok::Zero) => self.err("intercept markers are only allowed at the top level"),
            Some(_) => self.err("expected a variable, '.' or '('"),
            None => self.err("unexpected end of formula"),
        }
    }
}

fn cross(a: &[Term], b: &[Term]) -> Vec<Term> {
    let mut out: Vec<Term> = Vec::new();
    for x in a {
        for y in b {
            let t = x.merge(y);
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    out
}

/// Parse a formula into its expanded, deduplicated term list.
pub fn parse_formula(text: &str) -> Result<DesignSpec> {
    let toks = tokenize(text)?;
    let mut p = Parser {
        toks: &toks,
        pos: 0,
        end: text.len(),
    };
    if p.peek() != Some(&Tok::Tilde) {
        return p.err("formula must start with '~'");
    }
    p.pos += 1;
    if p.peek().is_none() {
        return p.err("empty formula");
    }
    let (terms, removed, intercept) = p.top()?;
    let terms = terms.into_iter().filter(|t| !removed.contains(t)).collect();
    Ok(DesignSpec {
        terms,
        removed,
        intercept,
        source_text: text.to_string(),
    })
}

impl DesignSpec {
    /// Intercept-only design.
    pub fn intercept_only() -> Self {
        DesignSpec {
            terms: Vec::new(),
            removed: Vec::new(),
            intercept: true,
            source_text: "~1".into(),
        }
    }

    /// Expand `.` against `columns` and apply removals.
    pub fn resolve(&self, columns: &[String]) -> DesignSpec {
        let expand = |terms: &[Term]| -> Vec<Term> {
            let mut out: Vec<Term> = Vec::new();
            for t in terms {
                let expanded = if t.has_dot() {
                    let fixed = Term(t.0.iter().filter(|f| **f != Factor::Dot).cloned().collect());
                    columns.iter().map(|c| fixed.merge(&Term::var(c))).collect()
                } else {
                    vec![t.clone()]
                };
                for e in expanded {
                    if !e.0.is_empty() && !out.contains(&e) {
                        out.push(e);
                    }
                }
            }
            out
        };
        let removed = expand(&self.removed);
        let terms = expand(&self.terms).into_iter().filter(|t| !removed.contains(t)).collect();
        DesignSpec {
            terms,
            removed,
            intercept: self.intercept,
            source_text: self.source_text.clone(),
        }
    }

    pub fn has_dot(&self) -> bool {
        self.terms.iter().chain(&self.removed).any(Term::has_dot)
    }

    /// Variables referenced by the (resolved) terms, in first-appearance order.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.terms {
            for v in t.vars() {
                if !out.iter().any(|o| o == v) {
                    out.push(v.to_string());
                }
            }
        }
        out
    }

    pub fn references(&self, var: &str) -> bool {
        self.terms.iter().any(|t| t.vars().any(|v| v == var))
    }
}

/// Numeric design matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub x: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Stack designs with identical columns.
    pub fn vstack(parts: &[DesignMatrix]) -> Result<DesignMatrix> {
        let first = parts.first().ok_or_else(|| Error::Structure("nothing to stack".into()))?;
        let p = first.ncols();
        let n: usize = parts.iter().map(DesignMatrix::nrows).sum();
        let mut x = DMatrix::zeros(n, p);
        let mut r0 = 0;
        for d in parts {
            if d.names != first.names {
                return Err(Error::Schema("designs have different columns".into()));
            }
            x.rows_mut(r0, d.nrows()).copy_from(&d.x);
            r0 += d.nrows();
        }
        Ok(DesignMatrix {
            names: first.names.clone(),
            x,
        })
    }
}

/// Values of the synthetic action variable for a design.
#[derive(Debug, Clone, Copy)]
pub struct ActionColumn<'a> {
    pub values: &'a [String],
    pub levels: &'a [String],
}

/// One variable's expansion: column names and values (row-major per column).
struct Expansion {
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
}

fn expand_var(
    var: &str,
    h: &HistoryTable,
    action: Option<ActionColumn<'_>>,
    levels: Option<&BTreeMap<String, Vec<String>>>,
) -> Result<Expansion> {
    let n = h.nrows();
    if var == ACTION_VAR {
        if let Some(a) = action {
            return categorical(var, a.values.iter().map(|s| Some(s.as_str())), a.levels, n);
        }
    }
    let col = h.column_or_err(var)?;
    let lv = levels.and_then(|m| m.get(var)).or(col.levels.as_ref());
    match lv {
        Some(lv) => {
            let mut labels = Vec::with_capacity(n);
            for (r, v) in col.values.iter().enumerate() {
                match v {
                    Value::Missing => {
                        return Err(Error::Schema(format!(
                            "variable '{var}' is missing for id '{}' at stage {}",
                            h.ids[r], h.stages[r]
                        )))
                    }
                    _ => labels.push(v.as_label()),
                }
            }
            categorical(var, labels.iter().map(|s| s.as_deref()), lv, n)
        }
        None => {
            let mut vals = Vec::with_capacity(n);
            for (r, v) in col.values.iter().enumerate() {
                match v.as_f64() {
                    Some(x) => vals.push(x),
                    None => {
                        return Err(Error::Schema(format!(
                            "variable '{var}' is missing or non-numeric for id '{}' at stage {}",
                            h.ids[r], h.stages[r]
                        )))
                    }
                }
            }
            Ok(Expansion {
                names: vec![var.to_string()],
                cols: vec![vals],
            })
        }
    }
}

fn categorical<'s>(
    var: &str,
    labels: impl Iterator<Item = Option<&'s str>>,
    levels: &[String],
    n: usize,
) -> Result<Expansion> {
    let width = levels.len().saturating_sub(1);
    let mut cols = vec![vec![0.0; n]; width];
    for (r, l) in labels.enumerate() {
        let l = l.ok_or_else(|| Error::Schema(format!("variable '{var}' is missing in row {r}")))?;
        let j = levels
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::Domain(format!("level '{l}' of '{var}' is not among {levels:?}")))?;
        if j > 0 {
            cols[j - 1][r] = 1.0;
        }
    }
    Ok(Expansion {
        names: levels.iter().skip(1).map(|l| format!("{var}{l}")).collect(),
        cols,
    })
}

/// Expand a design over a history table. `.` is resolved against the table's
/// columns; `A` refers to `action` when supplied. Categorical variables use
/// treatment contrasts against their first level; `levels` overrides the
/// levels recorded in the table (used when predicting with a fitted model).
pub fn build_design(
    spec: &DesignSpec,
    h: &HistoryTable,
    action: Option<ActionColumn<'_>>,
    levels: Option<&BTreeMap<String, Vec<String>>>,
) -> Result<DesignMatrix> {
    let spec = if spec.has_dot() {
        spec.resolve(h.names())
    } else {
        spec.clone()
    };
    let n = h.nrows();
    let mut cache: BTreeMap<String, Expansion> = BTreeMap::new();
    for v in spec.variables() {
        let e = expand_var(&v, h, action, levels)?;
        cache.insert(v, e);
    }
    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    if spec.intercept {
        names.push("(Intercept)".to_string());
        cols.push(vec![1.0; n]);
    }
    for t in &spec.terms {
        let mut acc_names = vec![String::new()];
        let mut acc_cols = vec![vec![1.0; n]];
        for v in t.vars() {
            let e = &cache[v];
            let mut nn = Vec::new();
            let mut nc = Vec::new();
            for (an, ac) in acc_names.iter().zip(&acc_cols) {
                for (en, ec) in e.names.iter().zip(&e.cols) {
                    nn.push(if an.is_empty() { en.clone() } else { format!("{an}:{en}") });
                    nc.push(ac.iter().zip(ec).map(|(a, b)| a * b).collect());
                }
            }
            acc_names = nn;
            acc_cols = nc;
        }
        names.extend(acc_names);
        cols.extend(acc_cols);
    }
    let p = cols.len();
    let mut x = DMatrix::zeros(n, p);
    for (j, c) in cols.iter().enumerate() {
        x.column_mut(j).copy_from_slice(c);
    }
    Ok(DesignMatrix { names, x })
}
