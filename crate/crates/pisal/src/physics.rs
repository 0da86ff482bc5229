//! Benchmark problem definitions: governing operators, interface conditions,
//! sources, exact solutions, and dataset generation for the two-phase heat
//! (Stefan) benchmark and the stationary two-fluid Stokes benchmark.
//!
//! Residuals are built as graph nodes over any [`Scalar`]. The convention is
//! that the first spatial input rides tag `a` of the jet and the second input
//! (y, or time for the Stefan case) rides tag `b`; builders create their own
//! seeded input nodes from plain coordinates.

use crate::autodiff::{NodeId, Tape};
use crate::network::FieldGraph;
use crate::scalar::{Scalar, Slot};
use crate::{derive_stream_seed, Real};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("point ({x}, {y}) is outside the problem domain")]
    OutOfDomain { x: Real, y: Real },
    #[error("dataset file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset file is malformed at line {line}: {what}")]
    Malformed { line: usize, what: String },
}

/// Side of the interface a point belongs to, or the band straddling it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionTag {
    Region1,
    Region2,
    InterfaceBand,
}

/// Space(-time) coordinates of a sample. `time` is absent for the stationary
/// Stokes benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub coords: Vec<Real>,
    pub time: Option<Real>,
}

impl SamplePoint {
    pub fn space_time(x: Real, t: Real) -> Self {
        SamplePoint {
            coords: vec![x],
            time: Some(t),
        }
    }
    pub fn plane(x: Real, y: Real) -> Self {
        SamplePoint {
            coords: vec![x, y],
            time: None,
        }
    }
}

/// A sample with its observed field values.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub point: SamplePoint,
    pub fields: Vec<Real>,
    pub is_initial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Stefan,
    Stokes,
}

/// Known constants of the two-phase heat benchmark.
#[derive(Debug, Clone, Copy)]
pub struct StefanConstants {
    pub alpha1: Real,
    pub alpha2: Real,
    pub s0: Real,
    pub u_star: Real,
}

pub const STEFAN_CONSTANTS: StefanConstants = StefanConstants {
    alpha1: -2.0,
    alpha2: 1.0,
    s0: 0.5,
    u_star: 0.0,
};

/// Known constants of the two-fluid Stokes benchmark. The viscosities are the
/// unknowns; they appear here only as ground truth for metrics and for the
/// exact-solution oracle.
#[derive(Debug, Clone, Copy)]
pub struct StokesConstants {
    pub sigma: Real,
    pub kappa: Real,
    pub nu1: Real,
    pub nu2: Real,
}

pub const STOKES_CONSTANTS: StokesConstants = StokesConstants {
    sigma: 10.0,
    kappa: 0.1,
    nu1: 0.1,
    nu2: 0.2,
};

/// A benchmark: domain, arities, unknown-coefficient ground truth, exact
/// oracle, and interface geometry.
#[derive(Debug, Clone)]
pub struct ProblemDefinition {
    pub kind: ProblemKind,
    pub name: &'static str,
    pub spatial_dim: usize,
    pub output_arity: usize,
    /// Bounding box per spatial coordinate.
    pub space_bounds: Vec<(Real, Real)>,
    pub time_bounds: Option<(Real, Real)>,
    pub lambda_true: [Real; 2],
    pub lambda_names: [&'static str; 2],
    /// Wall points where the interface curve is softly anchored (deviation
    /// knob, default on; empty for the Stefan problem).
    pub interface_anchor: Vec<(Real, Real)>,
}

impl ProblemDefinition {
    pub fn stefan() -> Self {
        ProblemDefinition {
            kind: ProblemKind::Stefan,
            name: "stefan",
            spatial_dim: 1,
            output_arity: 1,
            space_bounds: vec![(0.0, 2.0)],
            time_bounds: Some((0.0, 1.0)),
            lambda_true: [2.0, 1.0],
            lambda_names: ["k1", "k2"],
            interface_anchor: Vec::new(),
        }
    }

    pub fn stokes() -> Self {
        ProblemDefinition {
            kind: ProblemKind::Stokes,
            name: "stokes",
            spatial_dim: 2,
            output_arity: 3,
            space_bounds: vec![(0.0, 1.0), (-1.0, 1.0)],
            time_bounds: None,
            lambda_true: [STOKES_CONSTANTS.nu1, STOKES_CONSTANTS.nu2],
            lambda_names: ["nu1", "nu2"],
            interface_anchor: vec![(0.0, 0.0), (1.0, 0.0)],
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "stefan" => Some(Self::stefan()),
            "stokes" => Some(Self::stokes()),
            _ => None,
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        self.time_bounds.is_some()
    }

    /// Interface-normal coordinate axis extent (x for Stefan, y for Stokes);
    /// the classification band width is a fraction of this.
    pub fn interface_normal_extent(&self) -> Real {
        match self.kind {
            ProblemKind::Stefan => self.space_bounds[0].1 - self.space_bounds[0].0,
            ProblemKind::Stokes => self.space_bounds[1].1 - self.space_bounds[1].0,
        }
    }

    /// True interface position as a function of its parameter (t for Stefan,
    /// x for Stokes). Used by metrics, never by training.
    pub fn true_interface(&self, param: Real) -> Real {
        match self.kind {
            ProblemKind::Stefan => param + 0.5,
            ProblemKind::Stokes => 0.0,
        }
    }

    /// Parameter range of the interface curve.
    pub fn interface_param_bounds(&self) -> (Real, Real) {
        match self.kind {
            ProblemKind::Stefan => self.time_bounds.unwrap(),
            ProblemKind::Stokes => self.space_bounds[0],
        }
    }

    /// Midpoint of the interface-normal axis; added to the raw interface-net
    /// output so a freshly initialized curve starts inside the domain.
    pub fn interface_output_offset(&self) -> Real {
        match self.kind {
            ProblemKind::Stefan => {
                let (lo, hi) = self.space_bounds[0];
                0.5 * (lo + hi)
            }
            ProblemKind::Stokes => {
                let (lo, hi) = self.space_bounds[1];
                0.5 * (lo + hi)
            }
        }
    }

    pub fn contains(&self, p: &SamplePoint) -> bool {
        for (c, (lo, hi)) in p.coords.iter().zip(&self.space_bounds) {
            if c < lo || c > hi {
                return false;
            }
        }
        match (p.time, self.time_bounds) {
            (Some(t), Some((lo, hi))) => t >= lo && t <= hi,
            (None, None) => true,
            _ => false,
        }
    }

    /// Exact solution and true-region tag at a point.
    pub fn exact(&self, p: &SamplePoint) -> Result<(Vec<Real>, RegionTag), PhysicsError> {
        match self.kind {
            ProblemKind::Stefan => {
                let (u, r) = stefan_exact(p.coords[0], p.time.unwrap_or(0.0))?;
                Ok((vec![u], r))
            }
            ProblemKind::Stokes => {
                let (f, r) = ns_exact(p.coords[0], p.coords[1])?;
                Ok((f.to_vec(), r))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Two-phase Stefan benchmark
// ---------------------------------------------------------------------------

/// Exact temperature and true region for the melting benchmark on
/// [0,2] x [0,1]. On the interface both branches give u = u* = 0.
pub fn stefan_exact(x: Real, t: Real) -> Result<(Real, RegionTag), PhysicsError> {
    if !(0.0..=2.0).contains(&x) || !(0.0..=1.0).contains(&t) {
        return Err(PhysicsError::OutOfDomain { x, y: t });
    }
    let s = t + 0.5;
    let z = s - x;
    if x < s {
        Ok((2.0 * ((0.5 * z).exp() - 1.0), RegionTag::Region1))
    } else {
        Ok((z.exp() - 1.0, RegionTag::Region2))
    }
}

/// Exact solution of one region as a tape graph, for oracle substitution in
/// residual builders. Inputs are (x, t).
#[derive(Debug, Clone, Copy)]
pub struct StefanExactField {
    pub region: RegionTag,
}

impl<S: Scalar> FieldGraph<S> for StefanExactField {
    fn outputs(&self, tape: &mut Tape<S>, inputs: &[NodeId]) -> Vec<NodeId> {
        let (x, t) = (inputs[0], inputs[1]);
        let z0 = tape.add_const(t, 0.5);
        let z = tape.sub(z0, x);
        let u = match self.region {
            RegionTag::Region2 => {
                let e = tape.exp(z);
                tape.add_const(e, -1.0)
            }
            _ => {
                let half = tape.mul_const(z, 0.5);
                let e = tape.exp(half);
                let em1 = tape.add_const(e, -1.0);
                tape.mul_const(em1, 2.0)
            }
        };
        vec![u]
    }
}

/// True moving interface s(t) = t + 1/2 as a graph; input is (t).
#[derive(Debug, Clone, Copy)]
pub struct StefanExactInterface;

impl<S: Scalar> FieldGraph<S> for StefanExactInterface {
    fn outputs(&self, tape: &mut Tape<S>, inputs: &[NodeId]) -> Vec<NodeId> {
        vec![tape.add_const(inputs[0], 0.5)]
    }
}

/// Input node carrying the given coordinate with a unit derivative seed.
pub fn seeded_input<S: Scalar>(tape: &mut Tape<S>, value: Real, slot: Slot) -> NodeId {
    let c = tape.constant(value);
    let seed = tape.seed_constant(slot);
    tape.add(c, seed)
}

/// Heat-balance bulk residual u_t - k u_xx at (x, t), differentiable in the
/// field parameters and in k.
pub fn stefan_residual_bulk<S: Scalar>(
    tape: &mut Tape<S>,
    field: &(impl FieldGraph<S> + ?Sized),
    k: NodeId,
    x: Real,
    t: Real,
) -> NodeId {
    let xn = seeded_input(tape, x, Slot::FirstA);
    let tn = seeded_input(tape, t, Slot::FirstB);
    let u = field.outputs(tape, &[xn, tn])[0];
    let u_t = tape.part(u, Slot::FirstB);
    let u_xx = tape.part(u, Slot::SecondA);
    let diff = tape.mul(k, u_xx);
    tape.sub(u_t, diff)
}

/// The three per-time interface residuals: temperature continuity of each
/// side against u*, and the energy-balance (Stefan) condition.
pub fn stefan_residual_interface<S: Scalar>(
    tape: &mut Tape<S>,
    field1: &(impl FieldGraph<S> + ?Sized),
    field2: &(impl FieldGraph<S> + ?Sized),
    interface: &(impl FieldGraph<S> + ?Sized),
    t: Real,
    c: &StefanConstants,
) -> [NodeId; 3] {
    // Tag a means d/dt inside the interface subgraph and d/dx inside the
    // field subgraphs; the value projection between them keeps the chain
    // rule intact while the partials stay partial.
    let t_tagged = seeded_input(tape, t, Slot::FirstA);
    let s = interface.outputs(tape, &[t_tagged])[0];
    let s_prime = tape.part(s, Slot::FirstA);
    let s_val = tape.part(s, Slot::Value);
    let x_seed = tape.seed_constant(Slot::FirstA);
    let x_arg = tape.add(s_val, x_seed);
    let t_arg = tape.constant(t);
    let u1 = field1.outputs(tape, &[x_arg, t_arg])[0];
    let u2 = field2.outputs(tape, &[x_arg, t_arg])[0];

    let u1_val = tape.part(u1, Slot::Value);
    let u2_val = tape.part(u2, Slot::Value);
    let u_star = tape.constant(c.u_star);
    let r_a = tape.sub(u1_val, u_star);
    let r_b = tape.sub(u2_val, u_star);

    let u1_x = tape.part(u1, Slot::FirstA);
    let u2_x = tape.part(u2, Slot::FirstA);
    let flux1 = tape.mul_const(u1_x, c.alpha1);
    let flux2 = tape.mul_const(u2_x, c.alpha2);
    let flux = tape.add(flux1, flux2);
    let r_c = tape.sub(s_prime, flux);
    [r_a, r_b, r_c]
}

/// Initial-position residual s(0) - s0, emitted once per loss evaluation.
pub fn stefan_residual_initial<S: Scalar>(
    tape: &mut Tape<S>,
    interface: &(impl FieldGraph<S> + ?Sized),
    c: &StefanConstants,
) -> NodeId {
    let t0 = tape.constant(0.0);
    let s = interface.outputs(tape, &[t0])[0];
    tape.add_const(s, -c.s0)
}

// ---------------------------------------------------------------------------
// Stationary two-fluid Stokes benchmark
// ---------------------------------------------------------------------------

/// Exact velocity/pressure fields and true region on [0,1] x [-1,1].
pub fn ns_exact(x: Real, y: Real) -> Result<([Real; 3], RegionTag), PhysicsError> {
    if !(0.0..=1.0).contains(&x) || !(-1.0..=1.0).contains(&y) {
        return Err(PhysicsError::OutOfDomain { x, y });
    }
    let c = STOKES_CONSTANTS;
    let q = x * x * (x - 1.0) * (x - 1.0);
    let p = (PI * x).cos() * (PI * y).sin();
    if y > 0.0 {
        let ux = -q * (y - 1.0);
        let uy = x * y * (6.0 * x + y - 3.0 * x * y + 2.0 * x * x * y - 4.0 * x * x - 2.0);
        Ok(([ux, uy, p], RegionTag::Region1))
    } else {
        let r = c.nu1 / c.nu2;
        let cc = c.nu1 / c.kappa + 1.0;
        let c2 = 2.0 * c.nu1 / c.kappa + 2.0;
        let m = (2.0 * x - 1.0) * x * (x - 1.0);
        let ux = q * (cc - r * y);
        let uy = m * (r * y * y - c2 * y);
        Ok(([ux, uy, p], RegionTag::Region2))
    }
}

/// Momentum sources obtained by inserting the exact solutions into the
/// governing equations: g = sigma u - nu lap(u) + grad(p).
pub fn ns_source(x: Real, y: Real, region: RegionTag) -> Result<[Real; 2], PhysicsError> {
    if !(0.0..=1.0).contains(&x) || !(-1.0..=1.0).contains(&y) {
        return Err(PhysicsError::OutOfDomain { x, y });
    }
    let c = STOKES_CONSTANTS;
    let q = x * x * (x - 1.0) * (x - 1.0);
    let q2 = 12.0 * x * x - 12.0 * x + 2.0;
    let px = -PI * (PI * x).sin() * (PI * y).sin();
    let py = PI * (PI * x).cos() * (PI * y).cos();
    match region {
        RegionTag::Region1 => {
            let ux = -q * (y - 1.0);
            let uy = x * y * (6.0 * x + y - 3.0 * x * y + 2.0 * x * x * y - 4.0 * x * x - 2.0);
            let lap_ux = -q2 * (y - 1.0);
            let lap_uy = 12.0 * y - 6.0 * y * y + 12.0 * x * y * y - 24.0 * x * y + 2.0 * x
                - 6.0 * x * x
                + 4.0 * x * x * x;
            Ok([
                c.sigma * ux - c.nu1 * lap_ux + px,
                c.sigma * uy - c.nu1 * lap_uy + py,
            ])
        }
        RegionTag::Region2 => {
            let r = c.nu1 / c.nu2;
            let cc = c.nu1 / c.kappa + 1.0;
            let c2 = 2.0 * c.nu1 / c.kappa + 2.0;
            let m = (2.0 * x - 1.0) * x * (x - 1.0);
            let m2 = 12.0 * x - 6.0;
            let ux = q * (cc - r * y);
            let uy = m * (r * y * y - c2 * y);
            let lap_ux = q2 * (cc - r * y);
            let lap_uy = m2 * (r * y * y - c2 * y) + 2.0 * r * m;
            Ok([
                c.sigma * ux - c.nu2 * lap_ux + px,
                c.sigma * uy - c.nu2 * lap_uy + py,
            ])
        }
        RegionTag::InterfaceBand => Err(PhysicsError::OutOfDomain { x, y }),
    }
}

/// Exact Stokes fields of one region as a graph; inputs are (x, y), outputs
/// (ux, uy, p).
#[derive(Debug, Clone, Copy)]
pub struct StokesExactField {
    pub region: RegionTag,
}

impl<S: Scalar> FieldGraph<S> for StokesExactField {
    fn outputs(&self, tape: &mut Tape<S>, inputs: &[NodeId]) -> Vec<NodeId> {
        let c = STOKES_CONSTANTS;
        let (x, y) = (inputs[0], inputs[1]);
        let xm1 = tape.add_const(x, -1.0);
        let x2 = tape.square(x);
        let xm1sq = tape.square(xm1);
        let q = tape.mul(x2, xm1sq);
        let pix = tape.mul_const(x, PI);
        let piy = tape.mul_const(y, PI);
        let cospix = tape.cos(pix);
        let sinpiy = tape.sin(piy);
        let p = tape.mul(cospix, sinpiy);
        match self.region {
            RegionTag::Region2 => {
                let r = c.nu1 / c.nu2;
                let cc = c.nu1 / c.kappa + 1.0;
                let c2 = 2.0 * c.nu1 / c.kappa + 2.0;
                let ry = tape.mul_const(y, r);
                let cc_node = tape.constant(cc);
                let fac = tape.sub(cc_node, ry);
                let ux = tape.mul(q, fac);
                let twox = tape.mul_const(x, 2.0);
                let twoxm1 = tape.add_const(twox, -1.0);
                let xx = tape.mul(twoxm1, x);
                let m = tape.mul(xx, xm1);
                let y2 = tape.square(y);
                let ry2 = tape.mul_const(y2, r);
                let c2y = tape.mul_const(y, c2);
                let yfac = tape.sub(ry2, c2y);
                let uy = tape.mul(m, yfac);
                vec![ux, uy, p]
            }
            _ => {
                let one = tape.constant(1.0);
                let omy = tape.sub(one, y);
                let ux = tape.mul(q, omy);
                let sixx = tape.mul_const(x, 6.0);
                let xy = tape.mul(x, y);
                let threexy = tape.mul_const(xy, 3.0);
                let x2y = tape.mul(x2, y);
                let twox2y = tape.mul_const(x2y, 2.0);
                let fourx2 = tape.mul_const(x2, 4.0);
                let s1 = tape.add(sixx, y);
                let s2 = tape.sub(s1, threexy);
                let s3 = tape.add(s2, twox2y);
                let s4 = tape.sub(s3, fourx2);
                let inner = tape.add_const(s4, -2.0);
                let uy = tape.mul(xy, inner);
                vec![ux, uy, p]
            }
        }
    }
}

/// True flat interface y = 0 as a graph; input is (x).
#[derive(Debug, Clone, Copy)]
pub struct StokesExactInterface;

impl<S: Scalar> FieldGraph<S> for StokesExactInterface {
    fn outputs(&self, tape: &mut Tape<S>, inputs: &[NodeId]) -> Vec<NodeId> {
        let zero = tape.constant(0.0);
        vec![tape.mul(inputs[0], zero)]
    }
}

/// Momentum and continuity residuals at (x, y): sigma u - nu lap(u) +
/// grad(p) - g, and div(u). Differentiable in the field parameters and nu.
pub fn ns_residual_bulk<S: Scalar>(
    tape: &mut Tape<S>,
    field: &(impl FieldGraph<S> + ?Sized),
    nu: NodeId,
    x: Real,
    y: Real,
    source: [Real; 2],
) -> [NodeId; 3] {
    let c = STOKES_CONSTANTS;
    let xn = seeded_input(tape, x, Slot::FirstA);
    let yn = seeded_input(tape, y, Slot::FirstB);
    let outs = field.outputs(tape, &[xn, yn]);
    let (ux, uy, p) = (outs[0], outs[1], outs[2]);
    let p_x = tape.part(p, Slot::FirstA);
    let p_y = tape.part(p, Slot::FirstB);

    let momentum = |u: NodeId, grad_p: NodeId, g: Real, tape: &mut Tape<S>| {
        let val = tape.part(u, Slot::Value);
        let sig = tape.mul_const(val, c.sigma);
        let u_xx = tape.part(u, Slot::SecondA);
        let u_yy = tape.part(u, Slot::SecondB);
        let lap = tape.add(u_xx, u_yy);
        let visc = tape.mul(nu, lap);
        let a = tape.sub(sig, visc);
        let b = tape.add(a, grad_p);
        tape.add_const(b, -g)
    };
    let mom_x = momentum(ux, p_x, source[0], tape);
    let mom_y = momentum(uy, p_y, source[1], tape);
    let ux_x = tape.part(ux, Slot::FirstA);
    let uy_y = tape.part(uy, Slot::FirstB);
    let continuity = tape.add(ux_x, uy_y);
    [mom_x, mom_y, continuity]
}

/// Interface residual nodes at one curve sample: tangential friction balance
/// and normal-velocity vanishing, one of each per side.
#[derive(Debug, Clone, Copy)]
pub struct NsInterfaceResiduals {
    pub friction: [NodeId; 2],
    pub normal: [NodeId; 2],
}

/// Friction-type interface residuals at (x, Gamma(x)) with the curve taken
/// from the interface graph. The unit tangent and normals are computed from
/// the curve slope, and the pressure enters through (p I n) . tau even though
/// that term vanishes for exactly orthogonal n and tau.
pub fn ns_residual_interface<S: Scalar>(
    tape: &mut Tape<S>,
    field1: &(impl FieldGraph<S> + ?Sized),
    field2: &(impl FieldGraph<S> + ?Sized),
    interface: &(impl FieldGraph<S> + ?Sized),
    x: Real,
    nu1: NodeId,
    nu2: NodeId,
) -> NsInterfaceResiduals {
    let c = STOKES_CONSTANTS;
    let x_tagged = seeded_input(tape, x, Slot::FirstA);
    let gamma = interface.outputs(tape, &[x_tagged])[0];
    let g_val = tape.part(gamma, Slot::Value);
    let g_slope = tape.part(gamma, Slot::FirstA);

    let x_arg = seeded_input(tape, x, Slot::FirstA);
    let y_seed = tape.seed_constant(Slot::FirstB);
    let y_arg = tape.add(g_val, y_seed);

    // Unit tangent (1, g')/w and side-1 outward normal (g', -1)/w, w^2 = 1 + g'^2.
    let slope_sq = tape.square(g_slope);
    let w2 = tape.add_const(slope_sq, 1.0);
    let inv_w = tape.pow_const(w2, -0.5);
    let one = tape.constant(1.0);
    let tau = [tape.mul(one, inv_w), tape.mul(g_slope, inv_w)];
    let minus_one = tape.constant(-1.0);
    let n1 = [tape.mul(g_slope, inv_w), tape.mul(minus_one, inv_w)];
    let n2 = [tape.neg(n1[0]), tape.neg(n1[1])];

    let outs1 = field1.outputs(tape, &[x_arg, y_arg]);
    let outs2 = field2.outputs(tape, &[x_arg, y_arg]);

    // ((nu grad(u) - p I) n) . tau - kappa (u_other - u_self) . tau
    let traction = |outs: &[NodeId],
                        nu: NodeId,
                        n: [NodeId; 2],
                        other: &[NodeId],
                        tape: &mut Tape<S>| {
        let (ux, uy, p) = (outs[0], outs[1], outs[2]);
        let ux_x = tape.part(ux, Slot::FirstA);
        let ux_y = tape.part(ux, Slot::FirstB);
        let uy_x = tape.part(uy, Slot::FirstA);
        let uy_y = tape.part(uy, Slot::FirstB);
        let gx1 = tape.mul(ux_x, n[0]);
        let gx2 = tape.mul(ux_y, n[1]);
        let gradun_x = tape.add(gx1, gx2);
        let gy1 = tape.mul(uy_x, n[0]);
        let gy2 = tape.mul(uy_y, n[1]);
        let gradun_y = tape.add(gy1, gy2);
        let t1 = tape.mul(gradun_x, tau[0]);
        let t2 = tape.mul(gradun_y, tau[1]);
        let gradun_tau = tape.add(t1, t2);
        let visc = tape.mul(nu, gradun_tau);
        let ndt1 = tape.mul(n[0], tau[0]);
        let ndt2 = tape.mul(n[1], tau[1]);
        let n_dot_tau = tape.add(ndt1, ndt2);
        let p_val = tape.part(p, Slot::Value);
        let p_term = tape.mul(p_val, n_dot_tau);
        let lhs = tape.sub(visc, p_term);
        let oux = tape.part(other[0], Slot::Value);
        let ouy = tape.part(other[1], Slot::Value);
        let sux = tape.part(ux, Slot::Value);
        let suy = tape.part(uy, Slot::Value);
        let dx = tape.sub(oux, sux);
        let dy = tape.sub(ouy, suy);
        let j1 = tape.mul(dx, tau[0]);
        let j2 = tape.mul(dy, tau[1]);
        let jump_tau = tape.add(j1, j2);
        let rhs = tape.mul_const(jump_tau, c.kappa);
        tape.sub(lhs, rhs)
    };
    let friction1 = traction(&outs1, nu1, n1, &outs2, tape);
    let friction2 = traction(&outs2, nu2, n2, &outs1, tape);

    let normal_velocity = |outs: &[NodeId], n: [NodeId; 2], tape: &mut Tape<S>| {
        let ux = tape.part(outs[0], Slot::Value);
        let uy = tape.part(outs[1], Slot::Value);
        let a = tape.mul(ux, n[0]);
        let b = tape.mul(uy, n[1]);
        tape.add(a, b)
    };
    let normal1 = normal_velocity(&outs1, n1, tape);
    let normal2 = normal_velocity(&outs2, n2, tape);

    NsInterfaceResiduals {
        friction: [friction1, friction2],
        normal: [normal1, normal2],
    }
}

/// Wall-anchoring residuals Gamma(x_w) - y_w, emitted once per loss
/// evaluation (empty when the problem declares no anchors).
pub fn interface_anchor_residuals<S: Scalar>(
    tape: &mut Tape<S>,
    interface: &(impl FieldGraph<S> + ?Sized),
    anchors: &[(Real, Real)],
) -> Vec<NodeId> {
    anchors
        .iter()
        .map(|&(x, y)| {
            let xn = tape.constant(x);
            let g = interface.outputs(tape, &[xn])[0];
            tape.add_const(g, -y)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset generation and CSV interchange
// ---------------------------------------------------------------------------

fn uniform_in(rng: &mut ChaCha8Rng, lo: Real, hi: Real) -> Real {
    rng.gen_range(lo..=hi)
}

/// Draws the labeled training set D and the collocation set E. For
/// time-dependent problems `n_initial` of the `n_u` samples sit on t = 0; for
/// stationary problems they sit on the outer walls, so Dirichlet data enters
/// through the data loss.
pub fn sample_dataset(
    problem: &ProblemDefinition,
    n_u: usize,
    n_f: usize,
    n_initial: usize,
    seed: u64,
) -> (Vec<LabeledSample>, Vec<SamplePoint>) {
    let mut rng_d = ChaCha8Rng::seed_from_u64(derive_stream_seed(seed, "sample/D"));
    let mut rng_e = ChaCha8Rng::seed_from_u64(derive_stream_seed(seed, "sample/E"));
    draw_dataset(problem, n_u, n_f, n_initial, &mut rng_d, &mut rng_e)
}

/// Like [`sample_dataset`] but advancing caller-owned generators, so repeated
/// draws (the empty-band resampling path) stay reproducible.
pub fn draw_dataset(
    problem: &ProblemDefinition,
    n_u: usize,
    n_f: usize,
    n_initial: usize,
    rng_d: &mut ChaCha8Rng,
    rng_e: &mut ChaCha8Rng,
) -> (Vec<LabeledSample>, Vec<SamplePoint>) {
    assert!(n_u >= n_initial, "n_u must cover the initial/boundary draw");
    let mut data = Vec::with_capacity(n_u);
    for i in 0..n_u {
        let special = i < n_initial;
        let point = sample_point(problem, rng_d, special);
        let (fields, _) = problem.exact(&point).expect("sampler stays in-domain");
        data.push(LabeledSample {
            point,
            fields,
            is_initial: special,
        });
    }
    let colloc = (0..n_f)
        .map(|_| sample_point(problem, rng_e, false))
        .collect();
    (data, colloc)
}

fn sample_point(problem: &ProblemDefinition, rng: &mut ChaCha8Rng, special: bool) -> SamplePoint {
    match problem.kind {
        ProblemKind::Stefan => {
            let (xlo, xhi) = problem.space_bounds[0];
            let (tlo, thi) = problem.time_bounds.unwrap();
            let x = uniform_in(rng, xlo, xhi);
            let t = if special { tlo } else { uniform_in(rng, tlo, thi) };
            SamplePoint::space_time(x, t)
        }
        ProblemKind::Stokes => {
            let (xlo, xhi) = problem.space_bounds[0];
            let (ylo, yhi) = problem.space_bounds[1];
            if special {
                // Uniform over the outer walls by perimeter length.
                let w = xhi - xlo;
                let h = yhi - ylo;
                let s = uniform_in(rng, 0.0, 2.0 * (w + h));
                let (x, y) = if s < h {
                    (xlo, ylo + s)
                } else if s < 2.0 * h {
                    (xhi, ylo + (s - h))
                } else if s < 2.0 * h + w {
                    (xlo + (s - 2.0 * h), ylo)
                } else {
                    (xlo + (s - 2.0 * h - w), yhi)
                };
                SamplePoint::plane(x, y)
            } else {
                SamplePoint::plane(uniform_in(rng, xlo, xhi), uniform_in(rng, ylo, yhi))
            }
        }
    }
}

fn fmt_real(x: Real) -> String {
    format!("{x:.16e}")
}

fn coord_header(problem: &ProblemDefinition) -> String {
    let mut cols = vec!["x".to_string()];
    if problem.spatial_dim > 1 {
        cols.push("y".to_string());
    }
    if problem.is_time_dependent() {
        cols.push("t".to_string());
    }
    cols.join(",")
}

/// Writes D as CSV: `x[,y][,t],field_0..field_{m-1},is_initial`.
pub fn write_dataset_csv(
    problem: &ProblemDefinition,
    data: &[LabeledSample],
    w: &mut impl Write,
) -> Result<(), PhysicsError> {
    let fields: Vec<String> = (0..problem.output_arity)
        .map(|i| format!("field_{i}"))
        .collect();
    writeln!(w, "{},{},is_initial", coord_header(problem), fields.join(","))?;
    for s in data {
        let mut row: Vec<String> = s.point.coords.iter().map(|&c| fmt_real(c)).collect();
        if let Some(t) = s.point.time {
            row.push(fmt_real(t));
        }
        row.extend(s.fields.iter().map(|&f| fmt_real(f)));
        row.push(if s.is_initial { "1".into() } else { "0".into() });
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes E as CSV: `x[,y][,t]`.
pub fn write_collocation_csv(
    problem: &ProblemDefinition,
    points: &[SamplePoint],
    w: &mut impl Write,
) -> Result<(), PhysicsError> {
    writeln!(w, "{}", coord_header(problem))?;
    for p in points {
        let mut row: Vec<String> = p.coords.iter().map(|&c| fmt_real(c)).collect();
        if let Some(t) = p.time {
            row.push(fmt_real(t));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn parse_row(line: &str, lineno: usize) -> Result<Vec<Real>, PhysicsError> {
    line.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<Real>()
                .map_err(|e| PhysicsError::Malformed {
                    line: lineno,
                    what: e.to_string(),
                })
        })
        .collect()
}

/// Reads a dataset written by [`write_dataset_csv`].
pub fn read_dataset_csv(
    problem: &ProblemDefinition,
    r: &mut impl BufRead,
) -> Result<Vec<LabeledSample>, PhysicsError> {
    let n_coord = problem.spatial_dim + usize::from(problem.is_time_dependent());
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let row = parse_row(&line, i + 1)?;
        if row.len() != n_coord + problem.output_arity + 1 {
            return Err(PhysicsError::Malformed {
                line: i + 1,
                what: format!("expected {} columns", n_coord + problem.output_arity + 1),
            });
        }
        let coords = row[..problem.spatial_dim].to_vec();
        let time = problem
            .is_time_dependent()
            .then(|| row[problem.spatial_dim]);
        out.push(LabeledSample {
            point: SamplePoint { coords, time },
            fields: row[n_coord..n_coord + problem.output_arity].to_vec(),
            is_initial: row[n_coord + problem.output_arity] != 0.0,
        });
    }
    Ok(out)
}

/// Reads a collocation set written by [`write_collocation_csv`].
pub fn read_collocation_csv(
    problem: &ProblemDefinition,
    r: &mut impl BufRead,
) -> Result<Vec<SamplePoint>, PhysicsError> {
    let n_coord = problem.spatial_dim + usize::from(problem.is_time_dependent());
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let row = parse_row(&line, i + 1)?;
        if row.len() != n_coord {
            return Err(PhysicsError::Malformed {
                line: i + 1,
                what: format!("expected {n_coord} columns"),
            });
        }
        let coords = row[..problem.spatial_dim].to_vec();
        let time = problem
            .is_time_dependent()
            .then(|| row[problem.spatial_dim]);
        out.push(SamplePoint { coords, time });
    }
    Ok(out)
}

/// Writes both sets next to each other in `dir`.
pub fn export_dataset(
    problem: &ProblemDefinition,
    data: &[LabeledSample],
    colloc: &[SamplePoint],
    dir: &Path,
) -> Result<(), PhysicsError> {
    let mut d = std::io::BufWriter::new(std::fs::File::create(dir.join("dataset_d.csv"))?);
    write_dataset_csv(problem, data, &mut d)?;
    let mut e = std::io::BufWriter::new(std::fs::File::create(dir.join("collocation_e.csv"))?);
    write_collocation_csv(problem, colloc, &mut e)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::PdeJet;

    fn jet_tape() -> Tape<PdeJet> {
        Tape::new()
    }

    #[test]
    fn stefan_exact_matches_closed_forms() {
        // On the interface both branches agree on u* = 0.
        let (u, _) = stefan_exact(0.8, 0.3).unwrap();
        assert!(u.abs() < 1e-15);
        let (u, r) = stefan_exact(0.5, 0.3).unwrap();
        assert_eq!(r, RegionTag::Region1);
        assert!((u - 2.0 * (0.15f64.exp() - 1.0)).abs() < 1e-15);
        assert!((u - 0.3236685).abs() < 1e-6);
        let (u, r) = stefan_exact(1.5, 0.3).unwrap();
        assert_eq!(r, RegionTag::Region2);
        assert!((u - (-0.5034147)).abs() < 1e-7);
        assert!(stefan_exact(2.5, 0.3).is_err());
        assert!(stefan_exact(1.0, -0.1).is_err());
    }

    #[test]
    fn stefan_bulk_residual_vanishes_on_exact_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = jet_tape();
        let k1 = tape.constant(2.0);
        let k2 = tape.constant(1.0);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let t: f64 = rng.gen_range(0.0..=1.0);
            let s = t + 0.5;
            let x1 = rng.gen_range(0.0..s);
            let x2 = rng.gen_range(s..2.0);
            let r1 = stefan_residual_bulk(
                &mut tape,
                &StefanExactField {
                    region: RegionTag::Region1,
                },
                k1,
                x1,
                t,
            );
            let r2 = stefan_residual_bulk(
                &mut tape,
                &StefanExactField {
                    region: RegionTag::Region2,
                },
                k2,
                x2,
                t,
            );
            tape.forward().unwrap();
            worst = worst.max(tape.value(r1).primal().abs());
            worst = worst.max(tape.value(r2).primal().abs());
        }
        assert!(worst <= 1e-8, "max |residual| = {worst}");
    }

    #[test]
    fn stefan_bulk_residual_with_wrong_coefficient() {
        // Exact region-2 field with k = 2: residual = u_t - 2 u_xx = -exp(t+1/2-x).
        let mut tape = jet_tape();
        let k = tape.constant(2.0);
        let r = stefan_residual_bulk(
            &mut tape,
            &StefanExactField {
                region: RegionTag::Region2,
            },
            k,
            1.5,
            0.3,
        );
        tape.forward().unwrap();
        let expected = -(-0.7f64).exp();
        assert!((tape.value(r).primal() - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_field_has_zero_bulk_residual() {
        struct ConstField;
        impl<S: Scalar> FieldGraph<S> for ConstField {
            fn outputs(&self, tape: &mut Tape<S>, _inputs: &[NodeId]) -> Vec<NodeId> {
                vec![tape.constant(3.7)]
            }
        }
        let mut tape = jet_tape();
        let k = tape.constant(123.0);
        let r = stefan_residual_bulk(&mut tape, &ConstField, k, 1.0, 0.5);
        tape.forward().unwrap();
        assert_eq!(tape.value(r).primal(), 0.0);
    }

    #[test]
    fn stefan_interface_residuals_vanish_on_exact_solution() {
        let f1 = StefanExactField {
            region: RegionTag::Region1,
        };
        let f2 = StefanExactField {
            region: RegionTag::Region2,
        };
        let mut tape = jet_tape();
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let rs = stefan_residual_interface(
                &mut tape,
                &f1,
                &f2,
                &StefanExactInterface,
                t,
                &STEFAN_CONSTANTS,
            );
            tape.forward().unwrap();
            for r in rs {
                assert!(tape.value(r).primal().abs() <= 1e-8);
            }
        }
        let rd = stefan_residual_initial(&mut tape, &StefanExactInterface, &STEFAN_CONSTANTS);
        tape.forward().unwrap();
        assert!(tape.value(rd).primal().abs() <= 1e-15);
    }

    #[test]
    fn stefan_interface_residuals_for_degenerate_fields() {
        // Zero fields with the true interface: temperature residuals vanish
        // (u* = 0) and the energy balance leaves s'(t) = 1.
        struct ZeroField;
        impl<S: Scalar> FieldGraph<S> for ZeroField {
            fn outputs(&self, tape: &mut Tape<S>, _inputs: &[NodeId]) -> Vec<NodeId> {
                vec![tape.constant(0.0)]
            }
        }
        let mut tape = jet_tape();
        let [ra, rb, rc] = stefan_residual_interface(
            &mut tape,
            &ZeroField,
            &ZeroField,
            &StefanExactInterface,
            0.4,
            &STEFAN_CONSTANTS,
        );
        tape.forward().unwrap();
        assert_eq!(tape.value(ra).primal(), 0.0);
        assert_eq!(tape.value(rb).primal(), 0.0);
        assert!((tape.value(rc).primal() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn constant_interface_matches_initial_position() {
        struct HalfInterface;
        impl<S: Scalar> FieldGraph<S> for HalfInterface {
            fn outputs(&self, tape: &mut Tape<S>, _inputs: &[NodeId]) -> Vec<NodeId> {
                vec![tape.constant(0.5)]
            }
        }
        let mut tape = jet_tape();
        let rd = stefan_residual_initial(&mut tape, &HalfInterface, &STEFAN_CONSTANTS);
        tape.forward().unwrap();
        assert_eq!(tape.value(rd).primal(), 0.0);
    }

    #[test]
    fn stefan_condition_identity_along_true_interface() {
        // s'(t) = 1 = alpha1 du1/dx + alpha2 du2/dx for all t.
        for i in 0..=50 {
            let t = i as f64 / 50.0;
            let s = t + 0.5;
            let du1 = -((0.5 * (t + 0.5 - s)).exp());
            let du2 = -((t + 0.5 - s).exp());
            let rhs = STEFAN_CONSTANTS.alpha1 * du1 + STEFAN_CONSTANTS.alpha2 * du2;
            assert!((rhs - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn ns_exact_values_and_regions() {
        let ([_, uy, _], _) = ns_exact(0.5, 1e-12).unwrap();
        assert!(uy.abs() < 1e-11, "normal velocity on the interface");
        let ([ux, _, _], r) = ns_exact(0.5, 0.0).unwrap();
        assert_eq!(r, RegionTag::Region2);
        assert!((ux - 0.125).abs() < 1e-15);
        assert!(ns_exact(1.5, 0.0).is_err());
    }

    #[test]
    fn ns_exact_graph_divergence_is_zero_analytically() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x: f64 = rng.gen_range(0.0..=1.0);
            let y: f64 = rng.gen_range(-1.0..=1.0);
            let region = if y > 0.0 {
                RegionTag::Region1
            } else {
                RegionTag::Region2
            };
            let mut tape = jet_tape();
            let xn = seeded_input(&mut tape, x, Slot::FirstA);
            let yn = seeded_input(&mut tape, y, Slot::FirstB);
            let outs = StokesExactField { region }.outputs(&mut tape, &[xn, yn]);
            let ux_x = tape.part(outs[0], Slot::FirstA);
            let uy_y = tape.part(outs[1], Slot::FirstB);
            let div = tape.add(ux_x, uy_y);
            tape.forward().unwrap();
            worst = worst.max(tape.value(div).primal().abs());
        }
        assert!(worst <= 1e-10, "max |div u| = {worst}");
    }

    #[test]
    fn ns_normal_velocities_vanish_on_true_interface() {
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            let ([_, uy1, _], _) = ns_exact(x, 1e-300).unwrap();
            let ([_, uy2, _], _) = ns_exact(x, 0.0).unwrap();
            assert!(uy1.abs() <= 1e-12);
            assert!(uy2.abs() <= 1e-12);
        }
    }

    #[test]
    fn ns_bulk_residual_vanishes_on_exact_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        let mut tape = jet_tape();
        let nu1 = tape.constant(STOKES_CONSTANTS.nu1);
        let nu2 = tape.constant(STOKES_CONSTANTS.nu2);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(0.0..=1.0);
            let y1: f64 = rng.gen_range(0.0..=1.0);
            let y2: f64 = rng.gen_range(-1.0..=0.0);
            for (y, region, nu) in [
                (y1, RegionTag::Region1, nu1),
                (y2, RegionTag::Region2, nu2),
            ] {
                let g = ns_source(x, y, region).unwrap();
                let rs = ns_residual_bulk(&mut tape, &StokesExactField { region }, nu, x, y, g);
                tape.forward().unwrap();
                for r in rs {
                    worst = worst.max(tape.value(r).primal().abs());
                }
            }
        }
        assert!(worst <= 1e-8, "max |residual| = {worst}");
    }

    #[test]
    fn ns_pressure_gradient_matches_hand_value() {
        // dp/dx at (0.5, 0.5) = -pi sin(pi/2) sin(pi/2) = -pi.
        let mut tape = jet_tape();
        let xn = seeded_input(&mut tape, 0.5, Slot::FirstA);
        let yn = seeded_input(&mut tape, 0.5, Slot::FirstB);
        let outs = StokesExactField {
            region: RegionTag::Region1,
        }
        .outputs(&mut tape, &[xn, yn]);
        let p_x = tape.part(outs[2], Slot::FirstA);
        tape.forward().unwrap();
        assert!((tape.value(p_x).primal() + PI).abs() < 1e-12);
    }

    #[test]
    fn ns_zero_fields_zero_source_zero_residual() {
        struct ZeroField;
        impl<S: Scalar> FieldGraph<S> for ZeroField {
            fn outputs(&self, tape: &mut Tape<S>, _inputs: &[NodeId]) -> Vec<NodeId> {
                let z = tape.constant(0.0);
                vec![z, z, z]
            }
        }
        let mut tape = jet_tape();
        let nu = tape.constant(0.13);
        let rs = ns_residual_bulk(&mut tape, &ZeroField, nu, 0.3, -0.4, [0.0, 0.0]);
        tape.forward().unwrap();
        for r in rs {
            assert_eq!(tape.value(r).primal(), 0.0);
        }
    }

    #[test]
    fn ns_continuity_is_independent_of_viscosity() {
        // Exact region-2 fields with the wrong nu: momentum residual nonzero,
        // continuity still zero.
        let mut tape = jet_tape();
        let wrong_nu = tape.constant(0.1);
        let g = ns_source(0.3, -0.5, RegionTag::Region2).unwrap();
        let [mx, _, cont] = ns_residual_bulk(
            &mut tape,
            &StokesExactField {
                region: RegionTag::Region2,
            },
            wrong_nu,
            0.3,
            -0.5,
            g,
        );
        tape.forward().unwrap();
        assert!(tape.value(mx).primal().abs() > 1e-4);
        assert!(tape.value(cont).primal().abs() <= 1e-10);
    }

    #[test]
    fn ns_interface_residuals_vanish_on_exact_solution() {
        let f1 = StokesExactField {
            region: RegionTag::Region1,
        };
        let f2 = StokesExactField {
            region: RegionTag::Region2,
        };
        let mut tape = jet_tape();
        let nu1 = tape.constant(STOKES_CONSTANTS.nu1);
        let nu2 = tape.constant(STOKES_CONSTANTS.nu2);
        let mut worst: f64 = 0.0;
        for i in 0..=40 {
            let x = i as f64 / 40.0;
            let rs =
                ns_residual_interface(&mut tape, &f1, &f2, &StokesExactInterface, x, nu1, nu2);
            tape.forward().unwrap();
            for r in rs.friction.into_iter().chain(rs.normal) {
                worst = worst.max(tape.value(r).primal().abs());
            }
        }
        let anchors = interface_anchor_residuals(
            &mut tape,
            &StokesExactInterface,
            &ProblemDefinition::stokes().interface_anchor,
        );
        tape.forward().unwrap();
        for a in anchors {
            worst = worst.max(tape.value(a).primal().abs());
        }
        assert!(worst <= 1e-8, "max |interface residual| = {worst}");
    }

    #[test]
    fn ns_friction_reduces_to_own_stress_for_equal_fields() {
        // With u1 = u2 the kappa term vanishes, leaving each side's own
        // tangential stress: -nu1 d(u1x)/dy = nu1 q(x) on the flat curve.
        let f1 = StokesExactField {
            region: RegionTag::Region1,
        };
        let mut tape = jet_tape();
        let nu1 = tape.constant(STOKES_CONSTANTS.nu1);
        let rs = ns_residual_interface(&mut tape, &f1, &f1, &StokesExactInterface, 0.5, nu1, nu1);
        tape.forward().unwrap();
        let expected = STOKES_CONSTANTS.nu1 * 0.0625;
        assert!((tape.value(rs.friction[0]).primal() - expected).abs() < 1e-12);
    }

    #[test]
    fn flat_interface_geometry() {
        // Gamma = 0: tau = (1, 0), n1 = (0, -1); checked through the normal
        // residual of a constant field (0, 1): u . n1 = -1, u . n2 = 1.
        struct UnitY;
        impl<S: Scalar> FieldGraph<S> for UnitY {
            fn outputs(&self, tape: &mut Tape<S>, _inputs: &[NodeId]) -> Vec<NodeId> {
                let zero = tape.constant(0.0);
                let one = tape.constant(1.0);
                vec![zero, one, zero]
            }
        }
        let mut tape = jet_tape();
        let nu = tape.constant(1.0);
        let rs =
            ns_residual_interface(&mut tape, &UnitY, &UnitY, &StokesExactInterface, 0.3, nu, nu);
        tape.forward().unwrap();
        assert!((tape.value(rs.normal[0]).primal() + 1.0).abs() < 1e-14);
        assert!((tape.value(rs.normal[1]).primal() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn dataset_sampling_is_deterministic_and_labeled_by_oracle() {
        let problem = ProblemDefinition::stefan();
        let (d1, e1) = sample_dataset(&problem, 220, 50, 20, 9);
        let (d2, e2) = sample_dataset(&problem, 220, 50, 20, 9);
        assert_eq!(d1, d2);
        assert_eq!(e1, e2);
        assert_eq!(d1.len(), 220);
        assert_eq!(e1.len(), 50);
        assert_eq!(d1.iter().filter(|s| s.point.time == Some(0.0)).count(), 20);
        for s in &d1 {
            let (fields, _) = problem.exact(&s.point).unwrap();
            assert_eq!(s.fields, fields);
            assert!(problem.contains(&s.point));
        }
        let (d3, _) = sample_dataset(&problem, 220, 50, 20, 10);
        assert_ne!(d1, d3);
    }

    #[test]
    fn stokes_boundary_draw_sits_on_walls() {
        let problem = ProblemDefinition::stokes();
        let (d, _) = sample_dataset(&problem, 300, 10, 60, 4);
        let on_wall = d
            .iter()
            .take(60)
            .filter(|s| {
                let (x, y) = (s.point.coords[0], s.point.coords[1]);
                x == 0.0 || x == 1.0 || y == -1.0 || y == 1.0
            })
            .count();
        assert_eq!(on_wall, 60);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let problem = ProblemDefinition::stokes();
        let (d, e) = sample_dataset(&problem, 40, 25, 8, 123);
        let mut buf = Vec::new();
        write_dataset_csv(&problem, &d, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,field_0,field_1,field_2,is_initial\n"));
        let back = read_dataset_csv(&problem, &mut text.as_bytes()).unwrap();
        assert_eq!(back, d);

        let mut buf = Vec::new();
        write_collocation_csv(&problem, &e, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y\n"));
        let back = read_collocation_csv(&problem, &mut text.as_bytes()).unwrap();
        assert_eq!(back, e);
    }
}
