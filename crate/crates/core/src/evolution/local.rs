//! Offline crossover: random tree edits that need no language model.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::ra::{validate, BinaryOp, RaExpr, UnaryOp};
use crate::rng::Rng;

/// Invalid samples tolerated before falling back to the fitter parent.
pub const MAX_LOCAL_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalOp {
    /// A random subtree of the first parent is replaced by one of the second.
    SubtreeSwap,
    /// An operator is replaced by another of the same arity.
    OpMutation,
    /// A constant is scaled by U[0.5, 2] or shifted by N(0, 0.25).
    ConstPerturb,
    /// `a * f(x) + b` with `a` in {0.5, 1, 2} and `b` in {-0.5, 0, 0.5}.
    AffineWrap,
}

impl LocalOp {
    pub const ALL: [LocalOp; 4] = [
        LocalOp::SubtreeSwap,
        LocalOp::OpMutation,
        LocalOp::ConstPerturb,
        LocalOp::AffineWrap,
    ];
}

/// Where a subtree swap cuts; `None` picks uniformly.
#[derive(Debug, Clone, Copy, Default)]
pub struct SwapPoints {
    pub target: Option<usize>,
    pub donor: Option<usize>,
}

fn subtree_swap(p1: &RaExpr, p2: &RaExpr, at: SwapPoints, rng: &mut Rng) -> RaExpr {
    let target = at
        .target
        .unwrap_or_else(|| rng.gen_range(0..p1.node_count()));
    let donor_idx = at
        .donor
        .unwrap_or_else(|| rng.gen_range(0..p2.node_count()));
    let donor = p2.preorder()[donor_idx].clone();
    let mut child = p1.clone();
    *child.node_mut(target).expect("index within node count") = donor;
    child
}

fn op_mutation(p: &RaExpr, rng: &mut Rng) -> Option<RaExpr> {
    let candidates: Vec<usize> = p
        .preorder()
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n, RaExpr::Unary(..) | RaExpr::Binary(..)))
        .map(|(i, _)| i)
        .collect();
    let &idx = candidates.choose(rng)?;
    let mut child = p.clone();
    match child.node_mut(idx)? {
        RaExpr::Unary(op, _) => {
            let others: Vec<UnaryOp> = UnaryOp::ALL.iter().copied().filter(|o| o != op).collect();
            *op = *others.choose(rng)?;
        }
        RaExpr::Binary(op, _, _) => {
            let others: Vec<BinaryOp> = BinaryOp::ALL.iter().copied().filter(|o| o != op).collect();
            *op = *others.choose(rng)?;
        }
        _ => unreachable!("filtered to operator nodes"),
    }
    Some(child)
}

fn const_perturb(p: &RaExpr, rng: &mut Rng) -> Option<RaExpr> {
    let candidates: Vec<usize> = p
        .preorder()
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n, RaExpr::Const(_) | RaExpr::Branch { .. }))
        .map(|(i, _)| i)
        .collect();
    let &idx = candidates.choose(rng)?;
    let mut child = p.clone();
    let value = match child.node_mut(idx)? {
        RaExpr::Const(c) => c,
        RaExpr::Branch { threshold, .. } => threshold,
        _ => unreachable!("filtered to constant-bearing nodes"),
    };
    if rng.gen_bool(0.5) {
        *value *= rng.gen_range(0.5..=2.0);
    } else {
        *value += Normal::new(0.0, 0.25).expect("valid std").sample(rng);
    }
    Some(child)
}

fn affine_wrap(p: &RaExpr, rng: &mut Rng) -> RaExpr {
    let a = *[0.5, 1.0, 2.0].choose(rng).expect("nonempty");
    let b = *[-0.5, 0.0, 0.5].choose(rng).expect("nonempty");
    let mut e = p.clone();
    if a != 1.0 {
        e = RaExpr::binary(BinaryOp::Mul, RaExpr::Const(a), e);
    }
    if b != 0.0 {
        e = RaExpr::binary(BinaryOp::Add, e, RaExpr::Const(b));
    }
    e
}

/// Applies one edit. Ops that need a particular node kind the parent lacks
/// return `None`.
pub fn apply_local_op(
    op: LocalOp,
    p1: &RaExpr,
    p2: &RaExpr,
    swap: SwapPoints,
    rng: &mut Rng,
) -> Option<RaExpr> {
    let (a, b) = if rng.gen_bool(0.5) {
        (p1, p2)
    } else {
        (p2, p1)
    };
    match op {
        LocalOp::SubtreeSwap => Some(subtree_swap(a, b, swap, rng)),
        LocalOp::OpMutation => op_mutation(a, rng),
        LocalOp::ConstPerturb => const_perturb(a, rng),
        LocalOp::AffineWrap => Some(affine_wrap(a, rng)),
    }
}

/// Whether an expression may enter the population.
pub fn is_valid_candidate(e: &RaExpr) -> bool {
    e.check_limits().is_ok() && validate(e).is_acceptable()
}

/// Outcome of [`crossover_local`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalChild {
    pub expr: RaExpr,
    /// Samples drawn, including the accepted one.
    pub attempts: usize,
    /// No valid new sample was found; `expr` copies the fitter parent.
    pub fell_back: bool,
}

/// Draws an edit uniformly from [`LocalOp::ALL`] until the result is valid
/// and differs from both parents; after [`MAX_LOCAL_ATTEMPTS`] failures the
/// fitter parent (`p1`) is returned unchanged.
pub fn crossover_local(p1: &RaExpr, p2: &RaExpr, rng: &mut Rng) -> LocalChild {
    let (s1, s2) = (p1.serialize(), p2.serialize());
    for attempt in 1..=MAX_LOCAL_ATTEMPTS {
        let op = *LocalOp::ALL.choose(rng).expect("nonempty");
        if let Some(e) = apply_local_op(op, p1, p2, SwapPoints::default(), rng) {
            let s = e.serialize();
            if s != s1 && s != s2 && is_valid_candidate(&e) {
                return LocalChild {
                    expr: e,
                    attempts: attempt,
                    fell_back: false,
                };
            }
        }
    }
    log::warn!("local crossover found no valid child; copying the fitter parent");
    LocalChild {
        expr: p1.clone(),
        attempts: MAX_LOCAL_ATTEMPTS,
        fell_back: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ra::builtin_expr;
    use crate::rng::seeded;

    #[test]
    fn root_swap_returns_a_parent_intact() {
        let airl = builtin_expr("airl").unwrap();
        let gail = builtin_expr("gail").unwrap();
        let at = SwapPoints {
            target: Some(0),
            donor: Some(0),
        };
        for seed in 0..8 {
            let e =
                apply_local_op(LocalOp::SubtreeSwap, &airl, &gail, at, &mut seeded(seed)).unwrap();
            assert!(e == airl || e == gail);
        }
    }

    #[test]
    fn op_mutation_keeps_arity() {
        let gail = builtin_expr("gail").unwrap();
        let mut rng = seeded(2);
        for _ in 0..20 {
            let e = op_mutation(&gail, &mut rng).unwrap();
            assert!(matches!(e, RaExpr::Unary(op, _) if op != UnaryOp::Softplus));
        }
        assert!(op_mutation(&RaExpr::Var, &mut rng).is_none());
    }

    #[test]
    fn const_perturb_changes_only_constants() {
        let e = builtin_expr("dail").unwrap();
        let mut rng = seeded(5);
        let p = const_perturb(&e, &mut rng).unwrap();
        assert_eq!(p.node_count(), e.node_count());
        assert_ne!(p, e);
        assert!(const_perturb(&RaExpr::Var, &mut rng).is_none());
    }

    #[test]
    fn affine_wrap_shape() {
        let mut rng = seeded(1);
        for _ in 0..20 {
            let e = affine_wrap(&RaExpr::Var, &mut rng);
            for x in [-1.0, 0.0, 2.0] {
                let y = e.eval(x);
                let ok = [0.5, 1.0, 2.0].iter().any(|a| {
                    [-0.5, 0.0, 0.5]
                        .iter()
                        .any(|b| (a * x + b - y).abs() < 1e-12)
                });
                assert!(ok);
            }
        }
    }

    #[test]
    fn crossover_is_valid_and_seeded() {
        let p1 = builtin_expr("fairl").unwrap();
        let p2 = builtin_expr("gail_heuristic").unwrap();
        for seed in 0..50 {
            let a = crossover_local(&p1, &p2, &mut seeded(seed));
            let b = crossover_local(&p1, &p2, &mut seeded(seed));
            assert_eq!(a, b);
            assert!(a.expr.node_count() <= crate::ra::expr::MAX_NODES);
            if !a.fell_back {
                assert!(is_valid_candidate(&a.expr));
                assert_ne!(a.expr, p1);
                assert_ne!(a.expr, p2);
            }
        }
    }

    #[test]
    fn identical_leaf_parents_fall_back() {
        // Every edit of `x` with itself is either a parent copy or needs an
        // operator/constant that is not there, except the affine wrap.
        let mut fell = 0;
        for seed in 0..50 {
            let c = crossover_local(&RaExpr::Var, &RaExpr::Var, &mut seeded(seed));
            if c.fell_back {
                assert_eq!(c.expr, RaExpr::Var);
                assert_eq!(c.attempts, MAX_LOCAL_ATTEMPTS);
                fell += 1;
            }
        }
        assert!(fell < 50);
    }
}
