//! Reward-assignment functions: maps from a discriminator logit to a reward.

pub mod builtin;
pub mod expr;
pub mod parse;
pub mod validate;

pub use builtin::{
    all_builtins, builtin_expr, named_ra, resolve_ra, RaFunction, RaSource, UnknownRaName,
    BUILTIN_NAMES,
};
pub use expr::{BinaryOp, GuardStats, LimitError, RaExpr, UnaryOp};
pub use parse::{parse, ParseError};
pub use validate::{validate, ValidationReport};

/// Evaluates `f` on every logit, returning the rewards and the guard counts.
pub fn eval_ra(f: &RaFunction, logits: &[f64]) -> (Vec<f64>, GuardStats) {
    let mut guards = GuardStats::default();
    let out = logits
        .iter()
        .map(|&l| f.expr.eval_guarded(l, &mut guards))
        .collect();
    (out, guards)
}
