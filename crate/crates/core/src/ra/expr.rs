use std::fmt;

use serde::{Deserialize, Serialize};

/// Maximum tree depth (a lone leaf has depth 1).
pub const MAX_DEPTH: usize = 16;
/// Maximum number of nodes in a tree.
pub const MAX_NODES: usize = 128;

/// Lower clamp applied to the argument of `log`.
pub const LOG_FLOOR: f64 = 1e-12;
/// Minimum magnitude of a divisor.
pub const DIV_FLOOR: f64 = 1e-12;
/// Upper clamp applied to the argument of `exp`.
pub const EXP_CEIL: f64 = 60.0;
/// Magnitude substituted for an intermediate that overflowed to infinity.
pub const OVERFLOW_CAP: f64 = 1e300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Abs,
    Tanh,
    Sigmoid,
    Softplus,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 8] = [
        UnaryOp::Neg,
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Abs,
        UnaryOp::Tanh,
        UnaryOp::Sigmoid,
        UnaryOp::Softplus,
        UnaryOp::Gelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Abs => "abs",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Gelu => "gelu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|op| op.name() == name)
    }

    fn apply(self, v: f64, guards: &mut GuardStats) -> f64 {
        match self {
            UnaryOp::Neg => -v,
            UnaryOp::Exp => {
                if v > EXP_CEIL {
                    guards.exp_clamps += 1;
                    EXP_CEIL.exp()
                } else {
                    v.exp()
                }
            }
            UnaryOp::Log => {
                if v < LOG_FLOOR {
                    guards.log_clamps += 1;
                    LOG_FLOOR.ln()
                } else {
                    v.ln()
                }
            }
            UnaryOp::Abs => v.abs(),
            UnaryOp::Tanh => v.tanh(),
            UnaryOp::Sigmoid => sigmoid(v),
            UnaryOp::Softplus => softplus(v),
            UnaryOp::Gelu => gelu(v),
        }
    }
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 6] = [
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Mul,
        BinaryOp::Div,
        BinaryOp::Min,
        BinaryOp::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Min => "min",
            BinaryOp::Max => "max",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|op| op.name() == name)
    }

    /// Infix symbol, if the operator is written infix.
    pub fn symbol(self) -> Option<char> {
        match self {
            BinaryOp::Add => Some('+'),
            BinaryOp::Sub => Some('-'),
            BinaryOp::Mul => Some('*'),
            BinaryOp::Div => Some('/'),
            BinaryOp::Min | BinaryOp::Max => None,
        }
    }

    fn apply(self, a: f64, b: f64, guards: &mut GuardStats) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => {
                if b.abs() < DIV_FLOOR {
                    guards.div_clamps += 1;
                    // sign of zero counts as positive
                    let d = if b < 0.0 { -DIV_FLOOR } else { DIV_FLOOR };
                    a / d
                } else {
                    a / b
                }
            }
            BinaryOp::Min => a.min(b),
            BinaryOp::Max => a.max(b),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x, 0) + log1p(exp(-|x|))`
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Tanh approximation of the Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Counts of guard substitutions made while evaluating an expression.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardStats {
    pub log_clamps: u64,
    pub div_clamps: u64,
    pub exp_clamps: u64,
    pub overflow_clamps: u64,
}

impl GuardStats {
    pub fn total(&self) -> u64 {
        self.log_clamps + self.div_clamps + self.exp_clamps + self.overflow_clamps
    }

    pub fn merge(&mut self, other: &GuardStats) {
        self.log_clamps += other.log_clamps;
        self.div_clamps += other.div_clamps;
        self.exp_clamps += other.exp_clamps;
        self.overflow_clamps += other.overflow_clamps;
    }
}

/// Expression tree over a single variable, the discriminator logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RaExpr {
    Const(f64),
    Var,
    Unary(UnaryOp, Box<RaExpr>),
    Binary(BinaryOp, Box<RaExpr>, Box<RaExpr>),
    /// `if_le` when the logit is at most `threshold`, `if_gt` otherwise.
    Branch {
        threshold: f64,
        if_le: Box<RaExpr>,
        if_gt: Box<RaExpr>,
    },
}

impl RaExpr {
    pub fn constant(c: f64) -> Self {
        RaExpr::Const(c)
    }

    pub fn unary(op: UnaryOp, child: RaExpr) -> Self {
        RaExpr::Unary(op, Box::new(child))
    }

    pub fn binary(op: BinaryOp, left: RaExpr, right: RaExpr) -> Self {
        RaExpr::Binary(op, Box::new(left), Box::new(right))
    }

    pub fn branch(threshold: f64, if_le: RaExpr, if_gt: RaExpr) -> Self {
        RaExpr::Branch {
            threshold,
            if_le: Box::new(if_le),
            if_gt: Box::new(if_gt),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            RaExpr::Const(_) | RaExpr::Var => 1,
            RaExpr::Unary(_, c) => 1 + c.node_count(),
            RaExpr::Binary(_, l, r) => 1 + l.node_count() + r.node_count(),
            RaExpr::Branch { if_le, if_gt, .. } => 1 + if_le.node_count() + if_gt.node_count(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            RaExpr::Const(_) | RaExpr::Var => 1,
            RaExpr::Unary(_, c) => 1 + c.depth(),
            RaExpr::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
            RaExpr::Branch { if_le, if_gt, .. } => 1 + if_le.depth().max(if_gt.depth()),
        }
    }

    /// Checks the size limits and that every constant is finite.
    pub fn check_limits(&self) -> Result<(), LimitError> {
        let nodes = self.node_count();
        if nodes > MAX_NODES {
            return Err(LimitError::TooManyNodes(nodes));
        }
        let depth = self.depth();
        if depth > MAX_DEPTH {
            return Err(LimitError::TooDeep(depth));
        }
        if !self.constants_finite() {
            return Err(LimitError::NonFiniteConstant);
        }
        Ok(())
    }

    fn constants_finite(&self) -> bool {
        match self {
            RaExpr::Const(c) => c.is_finite(),
            RaExpr::Var => true,
            RaExpr::Unary(_, c) => c.constants_finite(),
            RaExpr::Binary(_, l, r) => l.constants_finite() && r.constants_finite(),
            RaExpr::Branch {
                threshold,
                if_le,
                if_gt,
            } => threshold.is_finite() && if_le.constants_finite() && if_gt.constants_finite(),
        }
    }

    /// Evaluates at `x`, ignoring guard statistics.
    pub fn eval(&self, x: f64) -> f64 {
        self.eval_guarded(x, &mut GuardStats::default())
    }

    /// Evaluates at `x` and records every guard substitution in `guards`.
    pub fn eval_guarded(&self, x: f64, guards: &mut GuardStats) -> f64 {
        let v = match self {
            RaExpr::Const(c) => *c,
            RaExpr::Var => x,
            RaExpr::Unary(op, c) => {
                let v = c.eval_guarded(x, guards);
                op.apply(v, guards)
            }
            RaExpr::Binary(op, l, r) => {
                let a = l.eval_guarded(x, guards);
                let b = r.eval_guarded(x, guards);
                op.apply(a, b, guards)
            }
            RaExpr::Branch {
                threshold,
                if_le,
                if_gt,
            } => {
                if x <= *threshold {
                    if_le.eval_guarded(x, guards)
                } else {
                    if_gt.eval_guarded(x, guards)
                }
            }
        };
        if v.is_finite() {
            v
        } else {
            guards.overflow_clamps += 1;
            if v.is_nan() {
                0.0
            } else {
                OVERFLOW_CAP.copysign(v)
            }
        }
    }

    /// Visits nodes in pre-order.
    pub fn preorder(&self) -> Vec<&RaExpr> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            out.push(node);
            match node {
                RaExpr::Const(_) | RaExpr::Var => {}
                RaExpr::Unary(_, c) => stack.push(c),
                RaExpr::Binary(_, l, r) => {
                    stack.push(r);
                    stack.push(l);
                }
                RaExpr::Branch { if_le, if_gt, .. } => {
                    stack.push(if_gt);
                    stack.push(if_le);
                }
            }
        }
        out
    }

    /// Mutable access to the `index`-th node in pre-order.
    pub fn node_mut(&mut self, index: usize) -> Option<&mut RaExpr> {
        let mut counter = 0;
        self.node_mut_inner(index, &mut counter)
    }

    fn node_mut_inner(&mut self, index: usize, counter: &mut usize) -> Option<&mut RaExpr> {
        if *counter == index {
            return Some(self);
        }
        *counter += 1;
        match self {
            RaExpr::Const(_) | RaExpr::Var => None,
            RaExpr::Unary(_, c) => c.node_mut_inner(index, counter),
            RaExpr::Binary(_, l, r) => {
                if let Some(n) = l.node_mut_inner(index, counter) {
                    return Some(n);
                }
                r.node_mut_inner(index, counter)
            }
            RaExpr::Branch { if_le, if_gt, .. } => {
                if let Some(n) = if_le.node_mut_inner(index, counter) {
                    return Some(n);
                }
                if_gt.node_mut_inner(index, counter)
            }
        }
    }

    /// Canonical text form; see [`crate::ra::parse`] for the grammar.
    pub fn serialize(&self) -> String {
        self.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LimitError {
    #[error("expression has {0} nodes, limit is {MAX_NODES}")]
    TooManyNodes(usize),
    #[error("expression has depth {0}, limit is {MAX_DEPTH}")]
    TooDeep(usize),
    #[error("expression contains a non-finite constant")]
    NonFiniteConstant,
}

/// Shortest text that parses back to exactly `c`.
pub(crate) fn format_number(c: f64) -> String {
    let a = c.abs();
    if c == 0.0 {
        if c.is_sign_negative() {
            "-0".to_string()
        } else {
            "0".to_string()
        }
    } else if (1e-5..1e16).contains(&a) {
        format!("{c}")
    } else {
        format!("{c:e}")
    }
}

impl fmt::Display for RaExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RaExpr::Const(c) => f.write_str(&format_number(*c)),
            RaExpr::Var => f.write_str("x"),
            RaExpr::Unary(op, c) => write!(f, "{}({})", op.name(), c),
            RaExpr::Binary(op, l, r) => match op.symbol() {
                Some(sym) => write!(f, "({l} {sym} {r})"),
                None => write!(f, "{}({l}, {r})", op.name()),
            },
            RaExpr::Branch {
                threshold,
                if_le,
                if_gt,
            } => write!(f, "branch({}, {if_le}, {if_gt})", format_number(*threshold)),
        }
    }
}
