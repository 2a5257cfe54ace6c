//! Decision-rule expressions, regression formulas and regime families.

mod formula;
mod regime;
mod rule;

pub use formula::{design_matrix, model_matrix, parse_formula, ModelFormula, Term, PSEUDO_OUTCOME};
pub use regime::{CompiledRegime, Enforcement, RegimeFamily};
pub use rule::{eval_rule, parse_rule, BinOp, CmpOp, Expr, RuleExpr};
