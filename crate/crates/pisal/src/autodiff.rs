//! Scalar computation graph with reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only DAG of arithmetic nodes; topological order is
//! the append order. The tape is generic over [`Scalar`], so the same graph
//! code runs on plain floats, forward-mode duals, or the two-tag jets carrying
//! input derivatives. Gradients with respect to leaves come from one reverse
//! sweep; derivatives of derivatives come from evaluating the graph over
//! nested dual numbers ([`derivative_nested`]).

use crate::scalar::{Dual, Scalar, Slot};
use thiserror::Error;

/// Handle to a node on a tape. Indices are tape-local.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Operation kinds. `Dot` is a fused multiply-accumulate over an argument
/// slice; everything else is at most binary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Leaf,
    Const(f64),
    /// Constant unit in a derivative slot (used to seed inputs mid-graph).
    SeedConst(Slot),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    PowConst(NodeId, f64),
    Square(NodeId),
    /// Re-embed one derivative slot of the parent as a plain value.
    Part(NodeId, Slot),
    /// `sum_i args[2i] * args[2i+1] + args[last]`; `pairs` many products.
    Dot { args_start: u32, pairs: u32 },
}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("leaf {0:?} has no assigned value")]
    MissingLeafValue(NodeId),
    #[error("domain error at node {node:?}: {what}")]
    Domain { node: NodeId, what: &'static str },
    #[error("node {0:?} is not on this tape")]
    UnknownNode(NodeId),
    #[error("derivative order {0} unsupported (max 3)")]
    UnsupportedOrder(usize),
}

/// Append-only computation graph over scalar type `S`.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    ops: Vec<Op>,
    args: Vec<NodeId>,
    values: Vec<S>,
    leaves: Vec<NodeId>,
    assigned: Vec<bool>,
    tanh_fault: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            args: Vec::new(),
            values: Vec::new(),
            leaves: Vec::new(),
            assigned: Vec::new(),
            tanh_fault: false,
        }
    }

    #[inline]
    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.ops.len() as u32);
        self.ops.push(op);
        self.values.push(S::zero());
        self.assigned.push(false);
        id
    }

    pub fn leaf(&mut self) -> NodeId {
        let id = self.push(Op::Leaf);
        self.leaves.push(id);
        id
    }

    pub fn constant(&mut self, x: f64) -> NodeId {
        self.push(Op::Const(x))
    }

    pub fn seed_constant(&mut self, slot: Slot) -> NodeId {
        self.push(Op::SeedConst(slot))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }
    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Ln(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }
    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sin(a))
    }
    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Cos(a))
    }
    pub fn pow_const(&mut self, a: NodeId, e: f64) -> NodeId {
        self.push(Op::PowConst(a, e))
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }
    pub fn part(&mut self, a: NodeId, slot: Slot) -> NodeId {
        self.push(Op::Part(a, slot))
    }

    /// Fused `sum_i x_i * w_i + bias`.
    pub fn dot_bias(&mut self, pairs: &[(NodeId, NodeId)], bias: NodeId) -> NodeId {
        let args_start = self.args.len() as u32;
        for &(x, w) in pairs {
            self.args.push(x);
            self.args.push(w);
        }
        self.args.push(bias);
        self.push(Op::Dot {
            args_start,
            pairs: pairs.len() as u32,
        })
    }

    /// Convenience: `a + c` with a fresh constant node.
    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let c = self.constant(c);
        self.add(a, c)
    }

    /// Convenience: `a * c` with a fresh constant node.
    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let c = self.constant(c);
        self.mul(a, c)
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    #[inline]
    pub fn set_leaf(&mut self, id: NodeId, value: S) {
        debug_assert!(matches!(self.ops[id.idx()], Op::Leaf));
        self.values[id.idx()] = value;
        self.assigned[id.idx()] = true;
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> S {
        self.values[id.idx()]
    }

    /// Test fixture: perturb the tanh derivative used by the reverse sweep so
    /// gradient checkers can prove they detect a wrong rule.
    #[doc(hidden)]
    pub fn inject_tanh_derivative_fault(&mut self) {
        self.tanh_fault = true;
    }

    /// Recompute every non-leaf value in topological order. Leaf values must
    /// have been assigned beforehand.
    pub fn forward(&mut self) -> Result<(), AutodiffError> {
        for i in 0..self.ops.len() {
            let v = match self.ops[i] {
                Op::Leaf => continue,
                Op::Const(c) => S::from_f64(c),
                Op::SeedConst(slot) => S::seed(slot),
                Op::Add(a, b) => self.values[a.idx()] + self.values[b.idx()],
                Op::Sub(a, b) => self.values[a.idx()] - self.values[b.idx()],
                Op::Mul(a, b) => self.values[a.idx()] * self.values[b.idx()],
                Op::Div(a, b) => {
                    let d = self.values[b.idx()];
                    if d.primal() == 0.0 {
                        return Err(AutodiffError::Domain {
                            node: NodeId(i as u32),
                            what: "division by zero",
                        });
                    }
                    self.values[a.idx()] / d
                }
                Op::Neg(a) => -self.values[a.idx()],
                Op::Exp(a) => self.values[a.idx()].exp(),
                Op::Ln(a) => {
                    let x = self.values[a.idx()];
                    if x.primal() <= 0.0 {
                        return Err(AutodiffError::Domain {
                            node: NodeId(i as u32),
                            what: "ln of non-positive value",
                        });
                    }
                    x.ln()
                }
                Op::Tanh(a) => self.values[a.idx()].tanh(),
                Op::Sin(a) => self.values[a.idx()].sin(),
                Op::Cos(a) => self.values[a.idx()].cos(),
                Op::PowConst(a, e) => {
                    let x = self.values[a.idx()];
                    if x.primal() < 0.0 && e.fract() != 0.0 {
                        return Err(AutodiffError::Domain {
                            node: NodeId(i as u32),
                            what: "fractional power of negative value",
                        });
                    }
                    x.powf_const(e)
                }
                Op::Square(a) => {
                    let x = self.values[a.idx()];
                    x * x
                }
                Op::Part(a, slot) => self.values[a.idx()].part(slot),
                Op::Dot { args_start, pairs } => {
                    let s = args_start as usize;
                    let mut acc = self.values[self.args[s + 2 * pairs as usize].idx()];
                    for p in 0..pairs as usize {
                        let x = self.values[self.args[s + 2 * p].idx()];
                        let w = self.values[self.args[s + 2 * p + 1].idx()];
                        acc = acc + x * w;
                    }
                    acc
                }
            };
            self.values[i] = v;
        }
        Ok(())
    }

    /// Checked evaluation: assigns the given leaf values, verifies every leaf
    /// is covered, and returns the value of every node.
    pub fn evaluate(&mut self, leaf_values: &[(NodeId, S)]) -> Result<Vec<S>, AutodiffError> {
        for &(id, v) in leaf_values {
            if id.idx() >= self.ops.len() || !matches!(self.ops[id.idx()], Op::Leaf) {
                return Err(AutodiffError::UnknownNode(id));
            }
            self.set_leaf(id, v);
        }
        for &leaf in &self.leaves {
            if !self.assigned[leaf.idx()] {
                return Err(AutodiffError::MissingLeafValue(leaf));
            }
        }
        self.forward()?;
        Ok(self.values.clone())
    }

    /// Reverse sweep from `root`, reusing a caller-owned adjoint buffer.
    /// `forward` must have run on the current leaf values.
    pub fn backward_into(&self, root: NodeId, adj: &mut Vec<S>) -> Result<(), AutodiffError> {
        if root.idx() >= self.ops.len() {
            return Err(AutodiffError::UnknownNode(root));
        }
        adj.clear();
        adj.resize(self.ops.len(), S::zero());
        adj[root.idx()] = S::one();
        let zero = S::zero();
        for i in (0..=root.idx()).rev() {
            let up = adj[i];
            if up == zero {
                continue;
            }
            match self.ops[i] {
                Op::Leaf | Op::Const(_) | Op::SeedConst(_) => {}
                Op::Add(a, b) => {
                    adj[a.idx()] = adj[a.idx()] + up;
                    adj[b.idx()] = adj[b.idx()] + up;
                }
                Op::Sub(a, b) => {
                    adj[a.idx()] = adj[a.idx()] + up;
                    adj[b.idx()] = adj[b.idx()] - up;
                }
                Op::Mul(a, b) => {
                    let va = self.values[a.idx()];
                    let vb = self.values[b.idx()];
                    adj[a.idx()] = adj[a.idx()] + S::adjoint_mul(vb, up);
                    adj[b.idx()] = adj[b.idx()] + S::adjoint_mul(va, up);
                }
                Op::Div(a, b) => {
                    let vb = self.values[b.idx()];
                    let w = self.values[i];
                    adj[a.idx()] = adj[a.idx()] + S::adjoint_mul(S::one() / vb, up);
                    adj[b.idx()] = adj[b.idx()] + S::adjoint_mul(-(w / vb), up);
                }
                Op::Neg(a) => {
                    adj[a.idx()] = adj[a.idx()] - up;
                }
                Op::Exp(a) => {
                    adj[a.idx()] = adj[a.idx()] + S::adjoint_mul(self.values[i], up);
                }
                Op::Ln(a) => {
                    let p = S::one() / self.values[a.idx()];
                    adj[a.idx()] = adj[a.idx()] + S::adjoint_mul(p, up);
                }
                Op::Tanh(a) => {
                    let t = self.values[i];
                    let mut p = S::one() - t * t;
                    if self.tanh_fault {
                        p = p * S::from_f64(1.01);
                    }
                    adj[a.idx()] = adj[a.idx()] + S::adjoint_mul(p, up);
                }
                Op::Sin(a) => {
                    let p = self.values[a.idx()].cos();
                    adj[a.idx()] = adj[a.idx()] + S::adjoint_mul(p, up);
                }
                Op::Cos(a) => {
                    let p = -self.values[a.idx()].sin();
                    adj[a.idx()] = adj[a.idx()] + S::adjoint_mul(p, up);
                }
                Op::PowConst(a, e) => {
                    let p = S::from_f64(e) * self.values[a.idx()].powf_const(e - 1.0);
                    adj[a.idx()] = adj[a.idx()] + S::adjoint_mul(p, up);
                }
                Op::Square(a) => {
                    let p = self.values[a.idx()];
                    adj[a.idx()] = adj[a.idx()] + S::adjoint_mul(p + p, up);
                }
                Op::Part(a, slot) => {
                    adj[a.idx()] = adj[a.idx()] + S::adjoint_part(slot, up);
                }
                Op::Dot { args_start, pairs } => {
                    let s = args_start as usize;
                    for p in 0..pairs as usize {
                        let x = self.args[s + 2 * p];
                        let w = self.args[s + 2 * p + 1];
                        let vx = self.values[x.idx()];
                        let vw = self.values[w.idx()];
                        adj[x.idx()] = adj[x.idx()] + S::adjoint_mul(vw, up);
                        adj[w.idx()] = adj[w.idx()] + S::adjoint_mul(vx, up);
                    }
                    let b = self.args[s + 2 * pairs as usize];
                    adj[b.idx()] = adj[b.idx()] + up;
                }
            }
        }
        Ok(())
    }

    /// d(root)/d(leaf) for each requested leaf. Correctness is independent of
    /// the request set; unrequested leaves are simply not reported.
    pub fn gradient(&self, root: NodeId, leaves: &[NodeId]) -> Result<Vec<S>, AutodiffError> {
        let mut adj = Vec::new();
        self.backward_into(root, &mut adj)?;
        Ok(leaves.iter().map(|l| adj[l.idx()]).collect())
    }
}

/// Re-expresses a function of `arity` real inputs as a graph, over any scalar
/// type. This is what lets derivatives be differentiated again: the same
/// expression is rebuilt over derivative-carrying leaves.
pub trait ExprBuilder {
    fn arity(&self) -> usize;
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, leaves: &[NodeId]) -> NodeId;
}

fn eval_with<S: Scalar>(builder: &impl ExprBuilder, inputs: &[S]) -> Result<S, AutodiffError> {
    let mut tape = Tape::<S>::new();
    let leaves: Vec<NodeId> = (0..builder.arity()).map(|_| tape.leaf()).collect();
    let root = builder.build(&mut tape, &leaves);
    for (leaf, &v) in leaves.iter().zip(inputs) {
        tape.set_leaf(*leaf, v);
    }
    tape.forward()?;
    Ok(tape.value(root))
}

/// Mixed partial of the built expression, differentiated once per entry of
/// `wrt` (indices into the leaf list), evaluated at `at`. Supports total
/// order up to three via nested forward-mode duals.
pub fn derivative_nested(
    builder: &impl ExprBuilder,
    wrt: &[usize],
    at: &[f64],
) -> Result<f64, AutodiffError> {
    assert_eq!(at.len(), builder.arity(), "one value per leaf required");
    let seed = |i: usize, level: usize| if wrt[level] == i { 1.0 } else { 0.0 };
    match wrt.len() {
        0 => Ok(eval_with::<f64>(builder, at)?),
        1 => {
            let inputs: Vec<Dual<f64>> = at
                .iter()
                .enumerate()
                .map(|(i, &x)| Dual::new(x, seed(i, 0)))
                .collect();
            Ok(eval_with(builder, &inputs)?.du)
        }
        2 => {
            let inputs: Vec<Dual<Dual<f64>>> = at
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    Dual::new(
                        Dual::new(x, seed(i, 1)),
                        Dual::new(seed(i, 0), 0.0),
                    )
                })
                .collect();
            Ok(eval_with(builder, &inputs)?.du.du)
        }
        3 => {
            let inputs: Vec<Dual<Dual<Dual<f64>>>> = at
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    Dual::new(
                        Dual::new(Dual::new(x, seed(i, 2)), Dual::new(seed(i, 1), 0.0)),
                        Dual::constant(Dual::new(seed(i, 0), 0.0)),
                    )
                })
                .collect();
            Ok(eval_with(builder, &inputs)?.du.du.du)
        }
        n => Err(AutodiffError::UnsupportedOrder(n)),
    }
}

/// Compares every analytic first partial of the built expression against
/// central finite differences with step `step` and returns the worst
/// relative error. Reports, never fails.
pub fn check_gradient_fd(builder: &impl ExprBuilder, at: &[f64], step: f64) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::<f64>::new();
    let leaves: Vec<NodeId> = (0..builder.arity()).map(|_| tape.leaf()).collect();
    let root = builder.build(&mut tape, &leaves);
    let assign = |tape: &mut Tape<f64>, xs: &[f64]| {
        for (leaf, &v) in leaves.iter().zip(xs) {
            tape.set_leaf(*leaf, v);
        }
    };
    assign(&mut tape, at);
    if tape.forward().is_err() {
        return f64::INFINITY;
    }
    let analytic = match tape.gradient(root, &leaves) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };

    let mut worst: f64 = 0.0;
    let mut xs = at.to_vec();
    for i in 0..leaves.len() {
        let x0 = xs[i];
        xs[i] = x0 + step;
        assign(&mut tape, &xs);
        let fp = match tape.forward() {
            Ok(()) => tape.value(root),
            Err(_) => return f64::INFINITY,
        };
        xs[i] = x0 - step;
        assign(&mut tape, &xs);
        let fm = match tape.forward() {
            Ok(()) => tape.value(root),
            Err(_) => return f64::INFINITY,
        };
        xs[i] = x0;
        let fd = (fp - fm) / (2.0 * step);
        let scale = analytic[i].abs().max(fd.abs());
        let err = if scale == 0.0 {
            0.0
        } else {
            (analytic[i] - fd).abs() / scale.max(1.0)
        };
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SquarePlusProduct;
    impl ExprBuilder for SquarePlusProduct {
        fn arity(&self) -> usize {
            2
        }
        fn build<S: Scalar>(&self, tape: &mut Tape<S>, leaves: &[NodeId]) -> NodeId {
            // square(x) + x*y would alias; keep the spec shape square(a) + mul(b, c)
            let sq = tape.square(leaves[0]);
            let prod = tape.mul(leaves[0], leaves[1]);
            tape.add(sq, prod)
        }
    }

    struct Tanh1;
    impl ExprBuilder for Tanh1 {
        fn arity(&self) -> usize {
            1
        }
        fn build<S: Scalar>(&self, tape: &mut Tape<S>, leaves: &[NodeId]) -> NodeId {
            tape.tanh(leaves[0])
        }
    }

    struct Square1;
    impl ExprBuilder for Square1 {
        fn arity(&self) -> usize {
            1
        }
        fn build<S: Scalar>(&self, tape: &mut Tape<S>, leaves: &[NodeId]) -> NodeId {
            tape.square(leaves[0])
        }
    }

    struct Const1;
    impl ExprBuilder for Const1 {
        fn arity(&self) -> usize {
            1
        }
        fn build<S: Scalar>(&self, tape: &mut Tape<S>, _leaves: &[NodeId]) -> NodeId {
            tape.constant(4.25)
        }
    }

    #[test]
    fn primal_values_match_hand_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf();
        let y = tape.leaf();
        let z = tape.leaf();
        let sq = tape.square(x);
        let prod = tape.mul(y, z);
        let sum = tape.add(sq, prod);
        let th = tape.tanh(x);
        let ex = tape.exp(x);
        let values = tape
            .evaluate(&[(x, 0.0), (y, 2.0), (z, 4.0)])
            .expect("all leaves assigned");
        assert_eq!(values[th.0 as usize], 0.0);
        assert_eq!(values[ex.0 as usize], 1.0);
        let mut tape2 = Tape::<f64>::new();
        let a = tape2.leaf();
        let b = tape2.leaf();
        let c = tape2.leaf();
        let sq2 = tape2.square(a);
        let pr2 = tape2.mul(b, c);
        let s2 = tape2.add(sq2, pr2);
        let v2 = tape2.evaluate(&[(a, 3.0), (b, 2.0), (c, 4.0)]).unwrap();
        assert_eq!(v2[s2.0 as usize], 17.0);
        let _ = (sum, prod);
    }

    #[test]
    fn missing_leaf_is_reported() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf();
        let y = tape.leaf();
        let _ = tape.add(x, y);
        let err = tape.evaluate(&[(x, 1.0)]).unwrap_err();
        assert!(matches!(err, AutodiffError::MissingLeafValue(id) if id == y));
    }

    #[test]
    fn division_by_zero_names_the_node() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf();
        let y = tape.leaf();
        let d = tape.div(x, y);
        let err = tape.evaluate(&[(x, 1.0), (y, 0.0)]).unwrap_err();
        assert!(matches!(err, AutodiffError::Domain { node, .. } if node == d));
    }

    #[test]
    fn gradient_power_rule() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf();
        let y = tape.square(x);
        tape.set_leaf(x, 3.0);
        tape.forward().unwrap();
        let g = tape.gradient(y, &[x]).unwrap();
        assert_eq!(g[0], 6.0);
    }

    #[test]
    fn gradient_tanh_at_origin() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf();
        let y = tape.tanh(x);
        tape.set_leaf(x, 0.0);
        tape.forward().unwrap();
        let g = tape.gradient(y, &[x]).unwrap();
        assert_eq!(g[0], 1.0);
    }

    #[test]
    fn gradient_of_two_leaf_expression() {
        // f(x, y) = x*y + exp(x) at (1, 2): df/dx = 2 + e, df/dy = 1
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf();
        let y = tape.leaf();
        let prod = tape.mul(x, y);
        let ex = tape.exp(x);
        let f = tape.add(prod, ex);
        tape.set_leaf(x, 1.0);
        tape.set_leaf(y, 2.0);
        tape.forward().unwrap();
        let g = tape.gradient(f, &[x, y]).unwrap();
        assert!((g[0] - (2.0 + 1f64.exp())).abs() < 1e-14);
        assert!((g[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_unknown_root_is_usage_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf();
        tape.set_leaf(x, 1.0);
        tape.forward().unwrap();
        assert!(matches!(
            tape.gradient(NodeId(99), &[x]),
            Err(AutodiffError::UnknownNode(_))
        ));
    }

    struct Cube;
    impl ExprBuilder for Cube {
        fn arity(&self) -> usize {
            1
        }
        fn build<S: Scalar>(&self, tape: &mut Tape<S>, leaves: &[NodeId]) -> NodeId {
            tape.pow_const(leaves[0], 3.0)
        }
    }

    struct XYSquared;
    impl ExprBuilder for XYSquared {
        fn arity(&self) -> usize {
            2
        }
        fn build<S: Scalar>(&self, tape: &mut Tape<S>, leaves: &[NodeId]) -> NodeId {
            let y2 = tape.square(leaves[1]);
            tape.mul(leaves[0], y2)
        }
    }

    struct Exp2X;
    impl ExprBuilder for Exp2X {
        fn arity(&self) -> usize {
            1
        }
        fn build<S: Scalar>(&self, tape: &mut Tape<S>, leaves: &[NodeId]) -> NodeId {
            let twice = tape.mul_const(leaves[0], 2.0);
            tape.exp(twice)
        }
    }

    #[test]
    fn nested_second_derivative_of_cube() {
        let d = derivative_nested(&Cube, &[0, 0], &[2.0]).unwrap();
        assert!((d - 12.0).abs() < 1e-12);
    }

    #[test]
    fn nested_mixed_partial() {
        // d2/dxdy [x*y^2] at (1, 3) = 2y = 6
        let d = derivative_nested(&XYSquared, &[0, 1], &[1.0, 3.0]).unwrap();
        assert!((d - 6.0).abs() < 1e-12);
        let d_other = derivative_nested(&XYSquared, &[1, 0], &[1.0, 3.0]).unwrap();
        assert!((d - d_other).abs() <= 1e-10 * (1.0 + d.abs()));
    }

    #[test]
    fn nested_third_derivative() {
        // d3/dx3 [exp(2x)] at 0 = 8
        let d = derivative_nested(&Exp2X, &[0, 0, 0], &[0.0]).unwrap();
        assert!((d - 8.0).abs() < 1e-12);
    }

    #[test]
    fn order_above_three_is_rejected() {
        assert!(matches!(
            derivative_nested(&Cube, &[0, 0, 0, 0], &[1.0]),
            Err(AutodiffError::UnsupportedOrder(4))
        ));
    }

    #[test]
    fn fd_check_on_square_and_tanh() {
        assert!(check_gradient_fd(&Square1, &[1.0], 1e-5) <= 1e-8);
        assert!(check_gradient_fd(&Tanh1, &[0.5], 1e-5) <= 1e-7);
        assert_eq!(check_gradient_fd(&Const1, &[0.3], 1e-5), 0.0);
        assert!(check_gradient_fd(&SquarePlusProduct, &[1.2, -0.7], 1e-5) <= 1e-8);
    }

    #[test]
    fn fd_check_catches_corrupted_tanh_derivative() {
        // Same computation, but with the reverse-pass tanh rule perturbed.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf();
        let y = tape.tanh(x);
        tape.inject_tanh_derivative_fault();
        tape.set_leaf(x, 0.5);
        tape.forward().unwrap();
        let bad = tape.gradient(y, &[x]).unwrap()[0];
        let truth = 1.0 - 0.5f64.tanh().powi(2);
        assert!((bad - truth).abs() / truth > 1e-3);
    }

    #[test]
    fn reevaluation_is_bitwise_deterministic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf();
        let y = tape.leaf();
        let a = tape.mul(x, y);
        let b = tape.sin(a);
        let c = tape.exp(b);
        let d = tape.div(c, y);
        let first = tape.evaluate(&[(x, 0.123), (y, 4.56)]).unwrap();
        let second = tape.evaluate(&[(x, 0.123), (y, 4.56)]).unwrap();
        assert_eq!(first, second);
        let _ = d;
    }

    #[test]
    fn reverse_over_jets_matches_nested_duals() {
        // d/dtheta of d2/dx2 [tanh(theta * x)] via jet-valued reverse mode
        // must agree with pure forward nesting.
        use crate::scalar::Jet2;
        let theta = 0.8_f64;
        let x0 = 0.4_f64;

        let mut tape = Tape::<Jet2<f64>>::new();
        let th = tape.leaf();
        let x = tape.leaf();
        let prod = tape.mul(th, x);
        let y = tape.tanh(prod);
        let uxx = tape.part(y, Slot::SecondA);
        tape.set_leaf(th, Jet2::constant(theta));
        tape.set_leaf(x, Jet2::variable_a(x0));
        tape.forward().unwrap();
        let grad = tape.gradient(uxx, &[th]).unwrap()[0].primal();

        struct F;
        impl ExprBuilder for F {
            fn arity(&self) -> usize {
                2
            }
            fn build<S: Scalar>(&self, tape: &mut Tape<S>, leaves: &[NodeId]) -> NodeId {
                let prod = tape.mul(leaves[0], leaves[1]);
                tape.tanh(prod)
            }
        }
        // d3/(dx dx dtheta)
        let expected = derivative_nested(&F, &[1, 1, 0], &[theta, x0]).unwrap();
        assert!(
            (grad - expected).abs() <= 1e-10 * (1.0 + expected.abs()),
            "{grad} vs {expected}"
        );
    }
}
