//! Regression model formulas of the form `response ~ term + term + ...`.
//!
//! Supported terms: `1` (accepted, the intercept is always present), a
//! variable name, an interaction `a:b`, and a square `I(x^2)`.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tabular::Columns;

/// Response name for the intermediate regressions of the DR recursion.
pub const PSEUDO_OUTCOME: &str = "Pseudo_Outcome";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Main(String),
    Interaction(String, String),
    Square(String),
}

impl Term {
    pub fn variables(&self) -> Vec<&str> {
        match self {
            Term::Main(a) | Term::Square(a) => vec![a],
            Term::Interaction(a, b) => vec![a, b],
        }
    }

    /// Interactions compare equal regardless of operand order.
    fn canonical(&self) -> Term {
        match self {
            Term::Interaction(a, b) if b < a => Term::Interaction(b.clone(), a.clone()),
            other => other.clone(),
        }
    }

    #[inline]
    pub fn value(&self, get: impl Fn(&str) -> f64) -> f64 {
        match self {
            Term::Main(a) => get(a),
            Term::Interaction(a, b) => get(a) * get(b),
            Term::Square(a) => {
                let v = get(a);
                v * v
            }
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Main(a) => f.write_str(a),
            Term::Interaction(a, b) => write!(f, "{a}:{b}"),
            Term::Square(a) => write!(f, "I({a}^2)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFormula {
    pub response: String,
    pub terms: Vec<Term>,
}

impl ModelFormula {
    /// Number of design columns, intercept included.
    pub fn n_columns(&self) -> usize {
        self.terms.len() + 1
    }

    pub fn column_labels(&self) -> Vec<String> {
        std::iter::once("(Intercept)".to_string())
            .chain(self.terms.iter().map(Term::to_string))
            .collect()
    }

    /// Every variable used on the right-hand side, first occurrence order.
    pub fn variables(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for v in self.terms.iter().flat_map(Term::variables) {
            if !out.contains(&v) {
                out.push(v);
            }
        }
        out
    }

    pub fn uses(&self, name: &str) -> bool {
        self.terms.iter().any(|t| t.variables().contains(&name))
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}~1", self.response)?;
        for t in &self.terms {
            write!(f, "+{t}")?;
        }
        Ok(())
    }
}

fn is_name(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '.' || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_')
}

pub fn parse_formula(text: &str) -> Result<ModelFormula> {
    let fail = |message: String| Error::Formula {
        formula: text.to_string(),
        message,
    };
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let mut sides = compact.split('~');
    let (Some(lhs), Some(rhs), None) = (sides.next(), sides.next(), sides.next()) else {
        return Err(fail("expected exactly one `~`".into()));
    };
    if !is_name(lhs) {
        return Err(fail(format!("invalid response `{lhs}`")));
    }
    if rhs.is_empty() {
        return Err(fail("empty right-hand side".into()));
    }
    let mut terms: Vec<Term> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for piece in rhs.split('+') {
        let term = if piece == "1" {
            continue;
        } else if piece.is_empty() {
            return Err(fail("empty term".into()));
        } else if let Some(inner) = piece.strip_prefix("I(").and_then(|s| s.strip_suffix("^2)")) {
            if !is_name(inner) {
                return Err(fail(format!("unsupported construct `{piece}`")));
            }
            Term::Square(inner.to_string())
        } else if let Some((a, b)) = piece.split_once(':') {
            if !is_name(a) || !is_name(b) {
                return Err(fail(format!("unsupported construct `{piece}`")));
            }
            if a == b {
                return Err(fail(format!("`{piece}` interacts a variable with itself")));
            }
            Term::Interaction(a.to_string(), b.to_string())
        } else if is_name(piece) {
            Term::Main(piece.to_string())
        } else {
            return Err(fail(format!("unsupported construct `{piece}`")));
        };
        if !seen.insert(term.canonical()) {
            return Err(fail(format!("duplicate term `{term}`")));
        }
        terms.push(term);
    }
    Ok(ModelFormula {
        response: lhs.to_string(),
        terms,
    })
}

fn lookup<'a>(rows: &'a dyn Columns, name: &str) -> Result<&'a [f64]> {
    rows.column(name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

/// Right-hand-side design matrix: intercept column first, then terms in order.
pub fn model_matrix(formula: &ModelFormula, rows: &dyn Columns) -> Result<DMatrix<f64>> {
    let n = rows.n_rows();
    let mut x = DMatrix::zeros(n, formula.n_columns());
    x.column_mut(0).fill(1.0);
    for (j, term) in formula.terms.iter().enumerate() {
        let mut col = x.column_mut(j + 1);
        match term {
            Term::Main(a) => col.copy_from_slice(lookup(rows, a)?),
            Term::Interaction(a, b) => {
                let (a, b) = (lookup(rows, a)?, lookup(rows, b)?);
                for i in 0..n {
                    col[i] = a[i] * b[i];
                }
            }
            Term::Square(a) => {
                let a = lookup(rows, a)?;
                for i in 0..n {
                    col[i] = a[i] * a[i];
                }
            }
        }
    }
    Ok(x)
}

pub fn design_matrix(
    formula: &ModelFormula,
    rows: &dyn Columns,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let x = model_matrix(formula, rows)?;
    let y = DVector::from_column_slice(lookup(rows, &formula.response)?);
    Ok((x, y))
}
