use serde::{Deserialize, Serialize};

use super::expr::{BinaryOp as B, RaExpr, UnaryOp as U};

/// Where a reward-assignment function came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaSource {
    Builtin,
    Llm,
    LocalMutation,
    /// Written by hand, e.g. on the command line.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaFunction {
    pub name: String,
    pub expr: RaExpr,
    pub source: RaSource,
}

impl RaFunction {
    pub fn new(name: impl Into<String>, expr: RaExpr, source: RaSource) -> Self {
        Self {
            name: name.into(),
            expr,
            source,
        }
    }

    pub fn eval(&self, logit: f64) -> f64 {
        self.expr.eval(logit)
    }
}

pub const BUILTIN_NAMES: [&str; 11] = [
    "gail",
    "airl",
    "fairl",
    "gail_heuristic",
    "dail",
    "sigmoid_only",
    "half_tanh",
    "top2",
    "top3",
    "top4",
    "top5",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("unknown reward-assignment function `{name}`; valid names: {}", BUILTIN_NAMES.join(", "))]
pub struct UnknownRaName {
    pub name: String,
}

fn x() -> RaExpr {
    RaExpr::Var
}
fn c(v: f64) -> RaExpr {
    RaExpr::Const(v)
}
fn un(op: U, e: RaExpr) -> RaExpr {
    RaExpr::unary(op, e)
}
fn bin(op: B, a: RaExpr, b: RaExpr) -> RaExpr {
    RaExpr::binary(op, a, b)
}

/// `0.5 * sigmoid(x) * (tanh(x) + 1)`, built left-associatively like the parser.
fn dail_expr() -> RaExpr {
    bin(
        B::Mul,
        bin(B::Mul, c(0.5), un(U::Sigmoid, x())),
        bin(B::Add, un(U::Tanh, x()), c(1.0)),
    )
}

/// `0.5 * (tanh(x) + 1)`
fn half_tanh_expr() -> RaExpr {
    bin(B::Mul, c(0.5), bin(B::Add, un(U::Tanh, x()), c(1.0)))
}

/// `x / (1 + abs(x))`
fn softsign_expr() -> RaExpr {
    bin(B::Div, x(), bin(B::Add, c(1.0), un(U::Abs, x())))
}

/// Piecewise-linear core with softplus tails, clipped to `[0, 1.5]`.
///
/// The middle and upper cases split at 0.8 with the upper case owning the
/// boundary itself, so the inner test uses the largest double below 0.8.
fn top2_expr() -> RaExpr {
    let lower = bin(
        B::Sub,
        bin(B::Add, c(0.5), bin(B::Mul, c(0.8), x())),
        bin(
            B::Div,
            un(
                U::Softplus,
                bin(B::Mul, c(1.5), bin(B::Sub, un(U::Neg, x()), c(0.8))),
            ),
            c(1.5),
        ),
    );
    let middle = bin(B::Add, c(0.5), bin(B::Mul, c(0.8), x()));
    let upper = bin(
        B::Add,
        bin(B::Add, c(0.5), bin(B::Mul, c(0.8), c(0.8))),
        bin(
            B::Div,
            un(U::Softplus, bin(B::Mul, c(1.5), bin(B::Sub, x(), c(0.8)))),
            c(1.5),
        ),
    );
    let below_08 = f64::from_bits(0.8f64.to_bits() - 1);
    let cases = RaExpr::branch(
        -0.8,
        lower,
        RaExpr::branch(0.8, RaExpr::branch(below_08, middle, upper.clone()), upper),
    );
    bin(B::Min, c(1.5), bin(B::Max, c(0.0), cases))
}

/// `softplus(x) * sigmoid(1.5 * x) + 0.5 * gelu(x)`
fn top3_expr() -> RaExpr {
    bin(
        B::Add,
        bin(
            B::Mul,
            un(U::Softplus, x()),
            un(U::Sigmoid, bin(B::Mul, c(1.5), x())),
        ),
        bin(B::Mul, c(0.5), un(U::Gelu, x())),
    )
}

/// `x / (1 + abs(x)) * sigmoid(3 * x) * 0.5 * (tanh(x) + 1)`
fn top4_expr() -> RaExpr {
    bin(
        B::Mul,
        bin(
            B::Mul,
            bin(
                B::Mul,
                softsign_expr(),
                un(U::Sigmoid, bin(B::Mul, c(3.0), x())),
            ),
            c(0.5),
        ),
        bin(B::Add, un(U::Tanh, x()), c(1.0)),
    )
}

/// `0.5 * (x / (1 + abs(x)) + 1) * sigmoid(3 * x)`
fn top5_expr() -> RaExpr {
    bin(
        B::Mul,
        bin(B::Mul, c(0.5), bin(B::Add, softsign_expr(), c(1.0))),
        un(U::Sigmoid, bin(B::Mul, c(3.0), x())),
    )
}

/// Expression for a builtin name.
pub fn builtin_expr(name: &str) -> Result<RaExpr, UnknownRaName> {
    let e = match name {
        "gail" => un(U::Softplus, x()),
        "airl" => x(),
        "fairl" => bin(B::Mul, un(U::Neg, x()), un(U::Exp, x())),
        "gail_heuristic" => un(U::Neg, un(U::Softplus, un(U::Neg, x()))),
        "dail" => dail_expr(),
        "sigmoid_only" => un(U::Sigmoid, x()),
        "half_tanh" => half_tanh_expr(),
        "top2" => top2_expr(),
        "top3" => top3_expr(),
        "top4" => top4_expr(),
        "top5" => top5_expr(),
        _ => {
            return Err(UnknownRaName {
                name: name.to_string(),
            })
        }
    };
    Ok(e)
}

/// Looks up one of the builtin reward-assignment functions by name.
pub fn named_ra(name: &str) -> Result<RaFunction, UnknownRaName> {
    Ok(RaFunction::new(
        name,
        builtin_expr(name)?,
        RaSource::Builtin,
    ))
}

/// A builtin name, or otherwise an expression in the reward language.
pub fn resolve_ra(spec: &str) -> Result<RaFunction, super::ParseError> {
    if let Ok(f) = named_ra(spec) {
        return Ok(f);
    }
    let expr = super::parse(spec)?;
    Ok(RaFunction::new(expr.serialize(), expr, RaSource::Custom))
}

pub fn all_builtins() -> Vec<RaFunction> {
    BUILTIN_NAMES
        .iter()
        .map(|n| named_ra(n).expect("builtin names resolve"))
        .collect()
}
