//! Families of dynamic treatment regimes indexed by a real vector psi.

use crate::dsl::rule::{BinOp, Expr, RuleExpr};
use crate::error::{Error, Result};
use crate::tabular::{Columns, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeFamily {
    rules: Vec<RuleExpr>,
    psi_names: Vec<String>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl RegimeFamily {
    pub fn new(
        rules: Vec<RuleExpr>,
        psi_names: Vec<String>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self> {
        if rules.is_empty() {
            return Err(Error::Invalid("a regime needs at least one rule".into()));
        }
        if psi_names.is_empty() {
            return Err(Error::Invalid(
                "a regime family needs at least one index coordinate".into(),
            ));
        }
        if lower.len() != psi_names.len() || upper.len() != psi_names.len() {
            return Err(Error::Invalid(format!(
                "{} index names but {} lower and {} upper bounds",
                psi_names.len(),
                lower.len(),
                upper.len()
            )));
        }
        for (i, name) in psi_names.iter().enumerate() {
            if psi_names[..i].contains(name) {
                return Err(Error::Invalid(format!("index name `{name}` repeated")));
            }
            if !(lower[i].is_finite() && upper[i].is_finite() && lower[i] <= upper[i]) {
                return Err(Error::Invalid(format!(
                    "empty or non-finite domain [{}, {}] for `{name}`",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(Self {
            rules,
            psi_names,
            lower,
            upper,
        })
    }

    pub fn from_strings(
        rules: &[&str],
        psi_names: &[&str],
        lower: &[f64],
        upper: &[f64],
    ) -> Result<Self> {
        let parsed = rules
            .iter()
            .map(|r| crate::dsl::parse_rule(r))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            parsed,
            psi_names.iter().map(|s| s.to_string()).collect(),
            lower.to_vec(),
            upper.to_vec(),
        )
    }

    pub fn stages(&self) -> usize {
        self.rules.len()
    }

    pub fn dim(&self) -> usize {
        self.psi_names.len()
    }

    pub fn rules(&self) -> &[RuleExpr] {
        &self.rules
    }

    pub fn rule(&self, stage: usize) -> &RuleExpr {
        &self.rules[stage]
    }

    pub fn psi_names(&self) -> &[String] {
        &self.psi_names
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, psi: &[f64]) -> bool {
        psi.len() == self.dim()
            && psi
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(p, (lo, hi))| *lo <= *p && *p <= *hi)
    }

    /// Hard error unless `names` equals the family's index names in order.
    pub fn check_names(&self, names: &[String]) -> Result<()> {
        if names == self.psi_names.as_slice() {
            Ok(())
        } else {
            Err(Error::NameMismatch {
                expected: self.psi_names.clone(),
                found: names.to_vec(),
            })
        }
    }

    /// Checks that every rule can be evaluated on `data`.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.stages() != data.stages() {
            return Err(Error::Invalid(format!(
                "{} rules for {} treatment stages",
                self.stages(),
                data.stages()
            )));
        }
        for name in &self.psi_names {
            if data.column_index(name).is_some() || name == data.id_column() {
                return Err(Error::Invalid(format!(
                    "index name `{name}` collides with a dataset column"
                )));
            }
        }
        let treatments = data.treatment_names();
        for (k, rule) in self.rules.iter().enumerate() {
            for ident in rule.identifiers() {
                if self.psi_names.iter().any(|p| p == ident) {
                    continue;
                }
                if data.column_index(ident).is_none() {
                    return Err(
                        Error::Unbound(ident.to_string()).with_context(format!("rule {}", k + 1))
                    );
                }
                if ident == data.outcome_name() {
                    return Err(Error::Invalid(format!(
                        "rule {} refers to the outcome `{ident}`",
                        k + 1
                    )));
                }
                if let Some(j) = treatments.iter().position(|t| *t == ident) {
                    if j >= k {
                        return Err(Error::Invalid(format!(
                            "rule {} refers to treatment `{ident}` which is decided at or after that stage",
                            k + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn compile<'a>(&self, data: &'a Dataset) -> Result<CompiledRegime<'a>> {
        self.validate(data)?;
        let treatments = data.treatment_names();
        let mut columns: Vec<&'a [f64]> = Vec::new();
        let mut col_names: Vec<String> = Vec::new();
        let mut rules = Vec::with_capacity(self.stages());
        for rule in &self.rules {
            let mut lower = |e: &Expr| -> CExpr {
                compile_expr(
                    e,
                    &self.psi_names,
                    &treatments,
                    data,
                    &mut columns,
                    &mut col_names,
                )
            };
            rules.push((lower(&rule.lhs), rule.op, lower(&rule.rhs)));
        }
        Ok(CompiledRegime {
            n: data.n(),
            columns,
            rules,
            observed: (0..data.stages()).map(|k| data.treatment(k)).collect(),
        })
    }
}

#[derive(Debug, Clone)]
enum CExpr {
    Const(f64),
    Column(usize),
    Psi(usize),
    /// Treatment of an earlier stage, read from the regime-enforced values.
    Treatment(usize),
    Neg(Box<CExpr>),
    Binary(BinOp, Box<CExpr>, Box<CExpr>),
}

fn compile_expr<'a>(
    e: &Expr,
    psi_names: &[String],
    treatments: &[&str],
    data: &'a Dataset,
    columns: &mut Vec<&'a [f64]>,
    col_names: &mut Vec<String>,
) -> CExpr {
    let mut rec = |e: &Expr| compile_expr(e, psi_names, treatments, data, columns, col_names);
    match e {
        Expr::Const(v) => CExpr::Const(*v),
        Expr::Neg(inner) => CExpr::Neg(Box::new(rec(inner))),
        Expr::Binary(op, a, b) => CExpr::Binary(*op, Box::new(rec(a)), Box::new(rec(b))),
        Expr::Ident(name) => {
            if let Some(d) = psi_names.iter().position(|p| p == name) {
                CExpr::Psi(d)
            } else if let Some(j) = treatments.iter().position(|t| t == name) {
                CExpr::Treatment(j)
            } else {
                let slot = match col_names.iter().position(|c| c == name) {
                    Some(s) => s,
                    None => {
                        // validate() has already checked existence
                        columns.push(data.column(name).expect("validated column"));
                        col_names.push(name.clone());
                        columns.len() - 1
                    }
                };
                CExpr::Column(slot)
            }
        }
    }
}

/// A regime family bound to the columns of one dataset, for fast repeated
/// evaluation at many index points.
pub struct CompiledRegime<'a> {
    n: usize,
    columns: Vec<&'a [f64]>,
    rules: Vec<(CExpr, crate::dsl::CmpOp, CExpr)>,
    observed: Vec<&'a [f64]>,
}

/// Regime-enforced treatments and observed adherence at one index point.
#[derive(Debug, Clone, PartialEq)]
pub struct Enforcement {
    /// `treat[k][i]`: treatment patient `i` would receive at stage `k`.
    pub treat: Vec<Vec<f64>>,
    /// `adherent[k][i]`: observed treatments agree with the regime for all
    /// stages up to and including `k`.
    pub adherent: Vec<Vec<bool>>,
}

impl Enforcement {
    pub fn adherent_count(&self, stage: usize) -> usize {
        self.adherent[stage].iter().filter(|&&a| a).count()
    }
}

impl CompiledRegime<'_> {
    fn eval(&self, e: &CExpr, i: usize, psi: &[f64], treat: &[Vec<f64>]) -> Result<f64> {
        Ok(match e {
            CExpr::Const(v) => *v,
            CExpr::Column(s) => self.columns[*s][i],
            CExpr::Psi(d) => psi[*d],
            CExpr::Treatment(j) => treat[*j][i],
            CExpr::Neg(inner) => -self.eval(inner, i, psi, treat)?,
            CExpr::Binary(op, a, b) => {
                let a = self.eval(a, i, psi, treat)?;
                let b = self.eval(b, i, psi, treat)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(Error::DivisionByZero(format!(
                                "rule at patient row {}",
                                i + 1
                            )));
                        }
                        a / b
                    }
                }
            }
        })
    }

    /// Evaluates every rule for every patient at `psi`. Rules that refer to
    /// earlier treatments see the regime-enforced values.
    pub fn enforce(&self, psi: &[f64]) -> Result<Enforcement> {
        let k_total = self.rules.len();
        let mut treat: Vec<Vec<f64>> = Vec::with_capacity(k_total);
        let mut adherent: Vec<Vec<bool>> = Vec::with_capacity(k_total);
        for (k, (lhs, op, rhs)) in self.rules.iter().enumerate() {
            let mut g = Vec::with_capacity(self.n);
            for i in 0..self.n {
                let l = self.eval(lhs, i, psi, &treat)?;
                let r = self.eval(rhs, i, psi, &treat)?;
                g.push(if op.holds(l, r) { 1.0 } else { 0.0 });
            }
            let adh: Vec<bool> = (0..self.n)
                .map(|i| (k == 0 || adherent[k - 1][i]) && self.observed[k][i] == g[i])
                .collect();
            treat.push(g);
            adherent.push(adh);
        }
        Ok(Enforcement { treat, adherent })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> Dataset {
        Dataset::new(
            "id",
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                ("cd4.0".into(), vec![350.0, 350.0, 200.0]),
                ("cd4.20".into(), vec![300.0, 400.0, 200.0]),
                ("z1".into(), vec![1.0, 0.0, 0.0]),
                ("z2".into(), vec![1.0, 1.0, 0.0]),
                ("y".into(), vec![1.0, 2.0, 3.0]),
            ],
            &["z1", "z2"],
            "y",
        )
        .unwrap()
    }

    fn family() -> RegimeFamily {
        RegimeFamily::from_strings(
            &["cd4.0>=psi1", "cd4.20>=psi2"],
            &["psi1", "psi2"],
            &[200.0, 200.0],
            &[500.0, 500.0],
        )
        .unwrap()
    }

    #[test]
    fn adherence_is_cumulative() {
        let d = data();
        let fam = family();
        let reg = fam.compile(&d).unwrap();
        let e = reg.enforce(&[335.0, 335.0]).unwrap();
        // a: z1=1 matches, cd4.20=300 < 335 so rule says 0 but z2=1
        assert_eq!(e.adherent[0], vec![true, false, true]);
        assert_eq!(e.adherent[1], vec![false, false, true]);
        assert_eq!(e.treat[0], vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_future_treatment_and_outcome() {
        let d = data();
        let fam = RegimeFamily::from_strings(&["z2>0", "cd4.20>psi1"], &["psi1"], &[0.0], &[1.0])
            .unwrap();
        assert!(fam.validate(&d).is_err());
        let fam =
            RegimeFamily::from_strings(&["y>psi1", "z1>psi1"], &["psi1"], &[0.0], &[1.0]).unwrap();
        assert!(fam.validate(&d).is_err());
        let fam = RegimeFamily::from_strings(&["cd4.0>psi1", "z1>psi1"], &["psi1"], &[0.0], &[1.0])
            .unwrap();
        assert!(fam.validate(&d).is_ok());
        let fam =
            RegimeFamily::from_strings(&["cd4.0>q", "z1>psi1"], &["psi1"], &[0.0], &[1.0]).unwrap();
        assert!(fam.validate(&d).is_err());
    }

    #[test]
    fn name_mismatch_is_hard_error() {
        let fam = family();
        assert!(fam.check_names(&["psi1".into(), "psi2".into()]).is_ok());
        assert!(matches!(
            fam.check_names(&["psi2".into(), "psi1".into()]),
            Err(Error::NameMismatch { .. })
        ));
    }

    #[test]
    fn empty_domain_rejected() {
        assert!(RegimeFamily::from_strings(&["x>psi1"], &["psi1"], &[2.0], &[1.0]).is_err());
    }
}
