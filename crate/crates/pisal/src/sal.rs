//! The three-network model and its synchronic-adaptive training loop.
//!
//! Training alternates an interface-network step against the interface data
//! and residuals, a repartition of all samples by the refreshed interface
//! estimate, and a joint field-network/coefficient step, accepting updates
//! that reduce their respective losses. Loss terms are assembled as jet
//! tapes, chunked over points so evaluations can fan out across threads with
//! a fixed reduction order (results are bit-reproducible for a given seed).

use crate::autodiff::{NodeId, Tape};
use crate::metrics::{self, FieldPredictor, GridSpec};
use crate::network::{FieldGraph, Mlp, MlpBinding, NetworkCheckpoint, NetworkError};
use crate::optim::{lbfgs_minimize, AdamParams, AdamState, LbfgsConfig, LbfgsState, OptimError};
use crate::physics::{
    draw_dataset, interface_anchor_residuals, ns_residual_bulk, ns_residual_interface, ns_source,
    stefan_residual_bulk, stefan_residual_initial, stefan_residual_interface, LabeledSample,
    ProblemDefinition, ProblemKind, RegionTag, SamplePoint, STEFAN_CONSTANTS,
};
use crate::scalar::Scalar;
use crate::{derive_stream_seed, PdeJet, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::ops::Range;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("network shape error: {0}")]
    Network(#[from] NetworkError),
    #[error("optimizer error: {0}")]
    Optim(#[from] OptimError),
    #[error("partition set {0} is empty; caller should resample")]
    PartitionDegenerate(&'static str),
    #[error("resampling failed to populate the interface band {0} times in a row")]
    ResamplingFailed(usize),
    #[error("loss became non-finite at outer step {step}")]
    NonFiniteLoss { step: usize },
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// The trained object: two field networks, the interface network, and the
/// two unknown coefficients.
#[derive(Debug, Clone)]
pub struct PisalModel {
    pub net1: Mlp,
    pub net2: Mlp,
    pub net_i: Mlp,
    pub lambda1: Real,
    pub lambda2: Real,
    /// Added to the raw interface-net output (mid-domain start).
    pub interface_offset: Real,
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(hidden.len() + 2);
    v.push(input);
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

impl PisalModel {
    /// Xavier-seeded model with both coefficients starting at 1.0. Each
    /// network draws from its own named stream off the master seed.
    pub fn init(
        problem: &ProblemDefinition,
        hidden1: &[usize],
        hidden2: &[usize],
        hidden_i: &[usize],
        seed: u64,
    ) -> Result<Self, NetworkError> {
        let field_inputs = problem.spatial_dim + usize::from(problem.is_time_dependent());
        let net1 = Mlp::init_xavier(
            &layer_sizes(field_inputs, hidden1, problem.output_arity),
            derive_stream_seed(seed, "init/net1"),
        )?;
        let net2 = Mlp::init_xavier(
            &layer_sizes(field_inputs, hidden2, problem.output_arity),
            derive_stream_seed(seed, "init/net2"),
        )?;
        let net_i = Mlp::init_xavier(
            &layer_sizes(1, hidden_i, 1),
            derive_stream_seed(seed, "init/netI"),
        )?;
        Ok(PisalModel {
            net1,
            net2,
            net_i,
            lambda1: 1.0,
            lambda2: 1.0,
            interface_offset: problem.interface_output_offset(),
        })
    }

    /// Predicted interface position at a curve parameter.
    pub fn interface_at(&self, param: Real) -> Real {
        self.net_i.forward_values(&[param]).expect("arity 1")[0] + self.interface_offset
    }

    fn field_inputs(p: &SamplePoint) -> Vec<Real> {
        let mut v = p.coords.clone();
        if let Some(t) = p.time {
            v.push(t);
        }
        v
    }
}

impl FieldPredictor for PisalModel {
    fn predict(&self, p: &SamplePoint, region: RegionTag) -> Vec<Real> {
        let inputs = Self::field_inputs(p);
        let net = match region {
            RegionTag::Region2 => &self.net2,
            _ => &self.net1,
        };
        net.forward_values(&inputs).expect("input arity")
    }
    fn interface_at(&self, param: Real) -> Real {
        PisalModel::interface_at(self, param)
    }
    fn lambda_hat(&self) -> [Real; 2] {
        [self.lambda1, self.lambda2]
    }
}

/// Single network, single shared coefficient, no interface estimate.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub net: Mlp,
    pub lambda: Real,
}

impl FieldPredictor for BaselineModel {
    fn predict(&self, p: &SamplePoint, _region: RegionTag) -> Vec<Real> {
        self.net
            .forward_values(&PisalModel::field_inputs(p))
            .expect("input arity")
    }
    fn interface_at(&self, _param: Real) -> Real {
        Real::NAN
    }
    fn lambda_hat(&self) -> [Real; 2] {
        [self.lambda, self.lambda]
    }
}

// ---------------------------------------------------------------------------
// Decomposition criterion and partition
// ---------------------------------------------------------------------------

/// Classifies a point against an interface estimate along the
/// interface-normal coordinate. Band edges are inclusive.
pub fn classify(
    problem: &ProblemDefinition,
    interface_at: impl Fn(Real) -> Real,
    p: &SamplePoint,
    eps: Real,
) -> RegionTag {
    match problem.kind {
        ProblemKind::Stefan => {
            let s = interface_at(p.time.expect("time-dependent sample"));
            let c = p.coords[0] - s;
            if c.abs() <= eps {
                RegionTag::InterfaceBand
            } else if c < 0.0 {
                RegionTag::Region1
            } else {
                RegionTag::Region2
            }
        }
        ProblemKind::Stokes => {
            let g = interface_at(p.coords[0]);
            let c = p.coords[1] - g;
            if c.abs() <= eps {
                RegionTag::InterfaceBand
            } else if c > 0.0 {
                RegionTag::Region1
            } else {
                RegionTag::Region2
            }
        }
    }
}

/// The training and collocation sets split by the current interface
/// estimate. Band members go into both sides and into the interface sets.
///
/// Because the fields may jump across the interface, a sample observes only
/// the field of the side it actually lies on: `d1_active`/`d2_active` mark
/// which members of each side carry a usable observation for that side's
/// data term (band members are active on their strict side only), and
/// `di_sides` records the strict side of each interface sample.
#[derive(Debug, Clone, Default)]
pub struct PartitionedData {
    pub d1: Vec<LabeledSample>,
    pub d2: Vec<LabeledSample>,
    pub di: Vec<LabeledSample>,
    pub e1: Vec<SamplePoint>,
    pub e2: Vec<SamplePoint>,
    pub ei: Vec<SamplePoint>,
    pub d1_active: Vec<bool>,
    pub d2_active: Vec<bool>,
    pub di_sides: Vec<RegionTag>,
}

/// Strict side of a point (on-curve points follow the region convention and
/// count as side 2).
fn strict_side(problem: &ProblemDefinition, interface_at: impl Fn(Real) -> Real, p: &SamplePoint) -> RegionTag {
    match problem.kind {
        ProblemKind::Stefan => {
            if p.coords[0] < interface_at(p.time.expect("time-dependent sample")) {
                RegionTag::Region1
            } else {
                RegionTag::Region2
            }
        }
        ProblemKind::Stokes => {
            if p.coords[1] > interface_at(p.coords[0]) {
                RegionTag::Region1
            } else {
                RegionTag::Region2
            }
        }
    }
}

pub fn partition(
    problem: &ProblemDefinition,
    interface_at: impl Fn(Real) -> Real + Copy,
    data: &[LabeledSample],
    colloc: &[SamplePoint],
    eps: Real,
) -> PartitionedData {
    let mut out = PartitionedData::default();
    for s in data {
        match classify(problem, interface_at, &s.point, eps) {
            RegionTag::Region1 => {
                out.d1.push(s.clone());
                out.d1_active.push(true);
            }
            RegionTag::Region2 => {
                out.d2.push(s.clone());
                out.d2_active.push(true);
            }
            RegionTag::InterfaceBand => {
                let side = strict_side(problem, interface_at, &s.point);
                out.d1.push(s.clone());
                out.d1_active.push(side == RegionTag::Region1);
                out.d2.push(s.clone());
                out.d2_active.push(side == RegionTag::Region2);
                out.di.push(s.clone());
                out.di_sides.push(side);
            }
        }
    }
    for p in colloc {
        match classify(problem, interface_at, p, eps) {
            RegionTag::Region1 => out.e1.push(p.clone()),
            RegionTag::Region2 => out.e2.push(p.clone()),
            RegionTag::InterfaceBand => {
                out.e1.push(p.clone());
                out.e2.push(p.clone());
                out.ei.push(p.clone());
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Loss graph assembly
// ---------------------------------------------------------------------------

/// Where a field comes from when the loss graph is assembled: a trainable
/// network or the exact-solution oracle.
#[derive(Debug, Clone, Copy)]
pub enum FieldSource<'a> {
    Net(&'a Mlp),
    Exact(RegionTag),
}

#[derive(Debug, Clone, Copy)]
pub enum InterfaceSource<'a> {
    Net { net: &'a Mlp, offset: Real },
    Exact,
}

/// The six loss components. Data terms average squared field mismatches;
/// physics terms average squared residuals; once-per-evaluation terms
/// (initial interface position, wall anchors) fold into `pm_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub dm_u1: Real,
    pub dm_u2: Real,
    pub dm_i: Real,
    pub pm_u1: Real,
    pub pm_u2: Real,
    pub pm_i: Real,
}

impl LossBreakdown {
    pub fn total(&self) -> Real {
        self.dm_u1 + self.dm_u2 + self.dm_i + self.pm_u1 + self.pm_u2 + self.pm_i
    }
    pub fn interface_part(&self) -> Real {
        self.dm_i + self.pm_i
    }
    pub fn fields_part(&self) -> Real {
        self.dm_u1 + self.dm_u2 + self.pm_u1 + self.pm_u2
    }
    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}

/// Gradient root selector: the interface objective (step 4), the field
/// objective (step 7), or everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootKind {
    Interface,
    Fields,
    Total,
}

#[derive(Debug, Clone, Default)]
struct ParamLayout {
    theta1: Range<usize>,
    theta2: Range<usize>,
    theta_i: Range<usize>,
    lambda: Range<usize>,
    total: usize,
}

enum BoundField {
    Net(MlpBinding),
    Exact(RegionTag),
}

impl BoundField {
    fn as_graph(&self, kind: ProblemKind) -> Box<dyn FieldGraph<PdeJet> + '_> {
        match (self, kind) {
            (BoundField::Net(b), _) => Box::new(b.clone()),
            (BoundField::Exact(r), ProblemKind::Stefan) => {
                Box::new(crate::physics::StefanExactField { region: *r })
            }
            (BoundField::Exact(r), ProblemKind::Stokes) => {
                Box::new(crate::physics::StokesExactField { region: *r })
            }
        }
    }

    fn param_leaves(&self) -> &[NodeId] {
        match self {
            BoundField::Net(b) => b.param_leaves(),
            BoundField::Exact(_) => &[],
        }
    }
}

/// Interface graph with the output offset folded in.
struct OffsetInterface {
    binding: MlpBinding,
    offset: Real,
}

impl<S: Scalar> FieldGraph<S> for OffsetInterface {
    fn outputs(&self, tape: &mut Tape<S>, inputs: &[NodeId]) -> Vec<NodeId> {
        let raw = self.binding.build_forward(tape, inputs).expect("arity 1")[0];
        vec![tape.add_const(raw, self.offset)]
    }
}

enum BoundInterface {
    Net(OffsetInterface),
    Exact(ProblemKind),
}

impl BoundInterface {
    fn as_graph(&self) -> Box<dyn FieldGraph<PdeJet> + '_> {
        match self {
            BoundInterface::Net(o) => Box::new(OffsetInterface {
                binding: o.binding.clone(),
                offset: o.offset,
            }),
            BoundInterface::Exact(ProblemKind::Stefan) => {
                Box::new(crate::physics::StefanExactInterface)
            }
            BoundInterface::Exact(ProblemKind::Stokes) => {
                Box::new(crate::physics::StokesExactInterface)
            }
        }
    }

    fn param_leaves(&self) -> &[NodeId] {
        match self {
            BoundInterface::Net(o) => o.binding.param_leaves(),
            BoundInterface::Exact(_) => &[],
        }
    }
}

struct ChunkGraph {
    tape: Tape<PdeJet>,
    field1: BoundField,
    field2: BoundField,
    interface: BoundInterface,
    lambda_leaves: [NodeId; 2],
    components: [NodeId; 6],
    roots: [NodeId; 3],
    adj: Vec<PdeJet>,
    grad: Vec<Real>,
}

fn slice_bounds(len: usize, chunk: usize, n_chunks: usize) -> Range<usize> {
    (len * chunk / n_chunks)..(len * (chunk + 1) / n_chunks)
}

impl ChunkGraph {
    #[allow(clippy::too_many_arguments)]
    fn build(
        problem: &ProblemDefinition,
        f1: FieldSource,
        f2: FieldSource,
        fi: InterfaceSource,
        part: &PartitionedData,
        cards: &[usize; 6],
        chunk: usize,
        n_chunks: usize,
    ) -> Self {
        let mut tape = Tape::<PdeJet>::new();
        let bind = |tape: &mut Tape<PdeJet>, s: FieldSource| match s {
            FieldSource::Net(m) => BoundField::Net(m.register(tape)),
            FieldSource::Exact(r) => BoundField::Exact(r),
        };
        let field1 = bind(&mut tape, f1);
        let field2 = bind(&mut tape, f2);
        let interface = match fi {
            InterfaceSource::Net { net, offset } => BoundInterface::Net(OffsetInterface {
                binding: net.register(&mut tape),
                offset,
            }),
            InterfaceSource::Exact => BoundInterface::Exact(problem.kind),
        };
        let lambda_leaves = [tape.leaf(), tape.leaf()];

        let g1 = field1.as_graph(problem.kind);
        let g2 = field2.as_graph(problem.kind);
        let gi = interface.as_graph();

        let r1 = slice_bounds(part.d1.len(), chunk, n_chunks);
        let d1 = &part.d1[r1.clone()];
        let d1_active = &part.d1_active[r1];
        let r2 = slice_bounds(part.d2.len(), chunk, n_chunks);
        let d2 = &part.d2[r2.clone()];
        let d2_active = &part.d2_active[r2];
        let ri = slice_bounds(part.di.len(), chunk, n_chunks);
        let di = &part.di[ri.clone()];
        let di_sides = &part.di_sides[ri];
        let e1 = &part.e1[slice_bounds(part.e1.len(), chunk, n_chunks)];
        let e2 = &part.e2[slice_bounds(part.e2.len(), chunk, n_chunks)];
        let ei = &part.ei[slice_bounds(part.ei.len(), chunk, n_chunks)];

        let data_sum = |tape: &mut Tape<PdeJet>,
                        field: &dyn FieldGraph<PdeJet>,
                        samples: &[LabeledSample],
                        active: &[bool]| {
            let mut acc = tape.constant(0.0);
            for (s, &is_active) in samples.iter().zip(active) {
                if !is_active {
                    continue;
                }
                let mut inputs: Vec<NodeId> =
                    s.point.coords.iter().map(|&c| tape.constant(c)).collect();
                if let Some(t) = s.point.time {
                    inputs.push(tape.constant(t));
                }
                let outs = field.outputs(tape, &inputs);
                for (o, &truth) in outs.iter().zip(&s.fields) {
                    let d = tape.add_const(*o, -truth);
                    let sq = tape.square(d);
                    acc = tape.add(acc, sq);
                }
            }
            acc
        };
        let dm_u1_sum = data_sum(&mut tape, g1.as_ref(), d1, d1_active);
        let dm_u2_sum = data_sum(&mut tape, g2.as_ref(), d2, d2_active);

        // Interface data term, evaluated on the predicted curve. The heat
        // benchmark compares both fields to the known interface temperature;
        // the Stokes fields jump across the curve, so each sample supervises
        // the field of the side it lies on.
        let mut dm_i_sum = tape.constant(0.0);
        for (s, side) in di.iter().zip(di_sides) {
            match problem.kind {
                ProblemKind::Stefan => {
                    let t = s.point.time.unwrap();
                    let tn = tape.constant(t);
                    let s_node = gi.outputs(&mut tape, &[tn])[0];
                    for g in [g1.as_ref(), g2.as_ref()] {
                        let u = g.outputs(&mut tape, &[s_node, tn])[0];
                        let d = tape.add_const(u, -STEFAN_CONSTANTS.u_star);
                        let sq = tape.square(d);
                        dm_i_sum = tape.add(dm_i_sum, sq);
                    }
                }
                ProblemKind::Stokes => {
                    let x = s.point.coords[0];
                    let xn = tape.constant(x);
                    let g_node = gi.outputs(&mut tape, &[xn])[0];
                    let g = match side {
                        RegionTag::Region1 => g1.as_ref(),
                        _ => g2.as_ref(),
                    };
                    let outs = g.outputs(&mut tape, &[xn, g_node]);
                    for (o, &truth) in outs.iter().zip(&s.fields) {
                        let d = tape.add_const(*o, -truth);
                        let sq = tape.square(d);
                        dm_i_sum = tape.add(dm_i_sum, sq);
                    }
                }
            }
        }

        let bulk_sum = |tape: &mut Tape<PdeJet>,
                            field: &dyn FieldGraph<PdeJet>,
                            lambda: NodeId,
                            region: RegionTag,
                            points: &[SamplePoint]| {
            let mut acc = tape.constant(0.0);
            for p in points {
                match problem.kind {
                    ProblemKind::Stefan => {
                        let r = stefan_residual_bulk(
                            tape,
                            field,
                            lambda,
                            p.coords[0],
                            p.time.unwrap(),
                        );
                        let sq = tape.square(r);
                        acc = tape.add(acc, sq);
                    }
                    ProblemKind::Stokes => {
                        let g = ns_source(p.coords[0], p.coords[1], region)
                            .expect("collocation in-domain");
                        let rs =
                            ns_residual_bulk(tape, field, lambda, p.coords[0], p.coords[1], g);
                        for r in rs {
                            let sq = tape.square(r);
                            acc = tape.add(acc, sq);
                        }
                    }
                }
            }
            acc
        };
        let pm_u1_sum = bulk_sum(
            &mut tape,
            g1.as_ref(),
            lambda_leaves[0],
            RegionTag::Region1,
            e1,
        );
        let pm_u2_sum = bulk_sum(
            &mut tape,
            g2.as_ref(),
            lambda_leaves[1],
            RegionTag::Region2,
            e2,
        );

        let mut pm_i_sum = tape.constant(0.0);
        for p in ei {
            match problem.kind {
                ProblemKind::Stefan => {
                    let rs = stefan_residual_interface(
                        &mut tape,
                        g1.as_ref(),
                        g2.as_ref(),
                        gi.as_ref(),
                        p.time.unwrap(),
                        &STEFAN_CONSTANTS,
                    );
                    for r in rs {
                        let sq = tape.square(r);
                        pm_i_sum = tape.add(pm_i_sum, sq);
                    }
                }
                ProblemKind::Stokes => {
                    let rs = ns_residual_interface(
                        &mut tape,
                        g1.as_ref(),
                        g2.as_ref(),
                        gi.as_ref(),
                        p.coords[0],
                        lambda_leaves[0],
                        lambda_leaves[1],
                    );
                    for r in rs.friction.into_iter().chain(rs.normal) {
                        let sq = tape.square(r);
                        pm_i_sum = tape.add(pm_i_sum, sq);
                    }
                }
            }
        }

        // Once-per-evaluation residuals live on chunk 0.
        let mut pm_i_once = tape.constant(0.0);
        if chunk == 0 {
            match problem.kind {
                ProblemKind::Stefan => {
                    let rd = stefan_residual_initial(&mut tape, gi.as_ref(), &STEFAN_CONSTANTS);
                    let sq = tape.square(rd);
                    pm_i_once = tape.add(pm_i_once, sq);
                }
                ProblemKind::Stokes => {
                    for r in interface_anchor_residuals(
                        &mut tape,
                        gi.as_ref(),
                        &problem.interface_anchor,
                    ) {
                        let sq = tape.square(r);
                        pm_i_once = tape.add(pm_i_once, sq);
                    }
                }
            }
        }
        drop((g1, g2, gi));

        let scale = |tape: &mut Tape<PdeJet>, sum: NodeId, card: usize| {
            tape.mul_const(sum, 1.0 / card.max(1) as Real)
        };
        let dm_u1 = scale(&mut tape, dm_u1_sum, cards[0]);
        let dm_u2 = scale(&mut tape, dm_u2_sum, cards[1]);
        let dm_i = scale(&mut tape, dm_i_sum, cards[2]);
        let pm_u1 = scale(&mut tape, pm_u1_sum, cards[3]);
        let pm_u2 = scale(&mut tape, pm_u2_sum, cards[4]);
        let pm_i_avg = scale(&mut tape, pm_i_sum, cards[5]);
        let pm_i = tape.add(pm_i_avg, pm_i_once);

        let root_interface = tape.add(dm_i, pm_i);
        let a = tape.add(dm_u1, dm_u2);
        let b = tape.add(pm_u1, pm_u2);
        let root_fields = tape.add(a, b);
        let root_total = tape.add(root_interface, root_fields);

        ChunkGraph {
            tape,
            field1,
            field2,
            interface,
            lambda_leaves,
            components: [dm_u1, dm_u2, dm_i, pm_u1, pm_u2, pm_i],
            roots: [root_interface, root_fields, root_total],
            adj: Vec::new(),
            grad: Vec::new(),
        }
    }
}

/// Assembled loss graphs for one partition, evaluable at any parameter
/// vector laid out as [theta1 | theta2 | theta_i | lambda1 lambda2].
pub struct LossEvaluator {
    chunks: Vec<ChunkGraph>,
    layout: ParamLayout,
}

const LOSS_CHUNKS: usize = 16;

fn set_leaves(tape: &mut Tape<PdeJet>, leaves: &[NodeId], values: &[Real]) {
    for (leaf, &v) in leaves.iter().zip(values) {
        tape.set_leaf(*leaf, PdeJet::constant(v));
    }
}

impl LossEvaluator {
    pub fn build(
        problem: &ProblemDefinition,
        f1: FieldSource,
        f2: FieldSource,
        fi: InterfaceSource,
        part: &PartitionedData,
    ) -> Result<Self, TrainError> {
        let active1 = part.d1_active.iter().filter(|a| **a).count();
        let active2 = part.d2_active.iter().filter(|a| **a).count();
        for (name, len) in [
            ("D1", active1),
            ("D2", active2),
            ("DI", part.di.len()),
            ("E1", part.e1.len()),
            ("E2", part.e2.len()),
            ("EI", part.ei.len()),
        ] {
            if len == 0 {
                return Err(TrainError::PartitionDegenerate(name));
            }
        }
        let cards = [
            active1,
            active2,
            part.di.len(),
            part.e1.len(),
            part.e2.len(),
            part.ei.len(),
        ];
        let count = |s: FieldSource| match s {
            FieldSource::Net(m) => m.param_count(),
            FieldSource::Exact(_) => 0,
        };
        let (n1, n2) = (count(f1), count(f2));
        let ni = match fi {
            InterfaceSource::Net { net, .. } => net.param_count(),
            InterfaceSource::Exact => 0,
        };
        let layout = ParamLayout {
            theta1: 0..n1,
            theta2: n1..n1 + n2,
            theta_i: n1 + n2..n1 + n2 + ni,
            lambda: n1 + n2 + ni..n1 + n2 + ni + 2,
            total: n1 + n2 + ni + 2,
        };
        let chunks: Vec<ChunkGraph> = (0..LOSS_CHUNKS)
            .into_par_iter()
            .map(|c| ChunkGraph::build(problem, f1, f2, fi, part, &cards, c, LOSS_CHUNKS))
            .collect();
        Ok(LossEvaluator { chunks, layout })
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn set_params(&mut self, flat: &[Real]) {
        let layout = self.layout.clone();
        self.chunks.par_iter_mut().for_each(|c| {
            let ChunkGraph {
                tape,
                field1,
                field2,
                interface,
                lambda_leaves,
                ..
            } = c;
            set_leaves(tape, field1.param_leaves(), &flat[layout.theta1.clone()]);
            set_leaves(tape, field2.param_leaves(), &flat[layout.theta2.clone()]);
            set_leaves(tape, interface.param_leaves(), &flat[layout.theta_i.clone()]);
            tape.set_leaf(lambda_leaves[0], PdeJet::constant(flat[layout.lambda.start]));
            tape.set_leaf(
                lambda_leaves[1],
                PdeJet::constant(flat[layout.lambda.start + 1]),
            );
        });
    }

    fn forward(&mut self) -> LossBreakdown {
        let parts: Vec<[Real; 6]> = self
            .chunks
            .par_iter_mut()
            .map(|c| {
                c.tape.forward().expect("loss graph stays in-domain");
                let mut v = [0.0; 6];
                for (i, n) in c.components.iter().enumerate() {
                    v[i] = c.tape.value(*n).primal();
                }
                v
            })
            .collect();
        let mut sums = [0.0; 6];
        for p in parts {
            for i in 0..6 {
                sums[i] += p[i];
            }
        }
        LossBreakdown {
            dm_u1: sums[0],
            dm_u2: sums[1],
            dm_i: sums[2],
            pm_u1: sums[3],
            pm_u2: sums[4],
            pm_i: sums[5],
        }
    }

    fn backward(&mut self, root: RootKind) -> Vec<Real> {
        let layout = self.layout.clone();
        let root_ix = match root {
            RootKind::Interface => 0,
            RootKind::Fields => 1,
            RootKind::Total => 2,
        };
        self.chunks.par_iter_mut().for_each(|c| {
            let root = c.roots[root_ix];
            let mut adj = std::mem::take(&mut c.adj);
            c.tape.backward_into(root, &mut adj).expect("root on tape");
            let grad = &mut c.grad;
            grad.clear();
            grad.resize(layout.total, 0.0);
            for (g, leaf) in grad[layout.theta1.clone()]
                .iter_mut()
                .zip(c.field1.param_leaves())
            {
                *g = adj[leaf.0 as usize].primal();
            }
            for (g, leaf) in grad[layout.theta2.clone()]
                .iter_mut()
                .zip(c.field2.param_leaves())
            {
                *g = adj[leaf.0 as usize].primal();
            }
            for (g, leaf) in grad[layout.theta_i.clone()]
                .iter_mut()
                .zip(c.interface.param_leaves())
            {
                *g = adj[leaf.0 as usize].primal();
            }
            grad[layout.lambda.start] = adj[c.lambda_leaves[0].0 as usize].primal();
            grad[layout.lambda.start + 1] = adj[c.lambda_leaves[1].0 as usize].primal();
            c.adj = adj;
        });
        let mut total = vec![0.0; layout.total];
        for c in &self.chunks {
            for (t, g) in total.iter_mut().zip(&c.grad) {
                *t += g;
            }
        }
        total
    }

    /// Loss components at a parameter vector, no gradient.
    pub fn components(&mut self, flat: &[Real]) -> LossBreakdown {
        self.set_params(flat);
        self.forward()
    }

    /// Loss components and the full-layout gradient of the chosen root.
    pub fn value_and_grad(&mut self, flat: &[Real], root: RootKind) -> (LossBreakdown, Vec<Real>) {
        self.set_params(flat);
        let breakdown = self.forward();
        let grad = self.backward(root);
        (breakdown, grad)
    }
}

/// The six loss terms for a model on a partition, through the same graph
/// machinery the trainer uses.
pub fn loss_terms(
    model: &PisalModel,
    problem: &ProblemDefinition,
    part: &PartitionedData,
) -> Result<LossBreakdown, TrainError> {
    let mut ev = build_model_evaluator(problem, model, part)?;
    Ok(ev.components(&flatten_model(model)))
}

/// Loss terms with the exact solutions substituted for all three networks.
pub fn loss_terms_oracle(
    problem: &ProblemDefinition,
    part: &PartitionedData,
    lambda: [Real; 2],
) -> Result<LossBreakdown, TrainError> {
    let mut ev = LossEvaluator::build(
        problem,
        FieldSource::Exact(RegionTag::Region1),
        FieldSource::Exact(RegionTag::Region2),
        InterfaceSource::Exact,
        part,
    )?;
    Ok(ev.components(&[lambda[0], lambda[1]]))
}

pub fn flatten_model(model: &PisalModel) -> Vec<Real> {
    let mut flat = model.net1.flatten();
    flat.extend(model.net2.flatten());
    flat.extend(model.net_i.flatten());
    flat.push(model.lambda1);
    flat.push(model.lambda2);
    flat
}

fn unflatten_into_model(model: &mut PisalModel, flat: &[Real]) {
    let n1 = model.net1.param_count();
    let n2 = model.net2.param_count();
    let ni = model.net_i.param_count();
    model.net1 = Mlp::unflatten(model.net1.layer_sizes(), &flat[..n1]).unwrap();
    model.net2 = Mlp::unflatten(model.net2.layer_sizes(), &flat[n1..n1 + n2]).unwrap();
    model.net_i = Mlp::unflatten(model.net_i.layer_sizes(), &flat[n1 + n2..n1 + n2 + ni]).unwrap();
    model.lambda1 = flat[n1 + n2 + ni];
    model.lambda2 = flat[n1 + n2 + ni + 1];
}

// ---------------------------------------------------------------------------
// Training configuration and log
// ---------------------------------------------------------------------------

/// Outer-loop and inner-budget settings. Defaults follow the benchmark
/// setups; network sizes are hidden-layer widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k_max: usize,
    pub delta_train: Real,
    pub n_u: usize,
    pub n_f: usize,
    pub n_initial: usize,
    /// Interface band half-width as a fraction of the interface-normal
    /// domain extent.
    pub epsilon_fraction: Real,
    pub interface_lbfgs_iters: usize,
    pub fields_lbfgs_iters: usize,
    pub adam_steps: usize,
    pub rounds: usize,
    pub adam_lr: Real,
    pub seed: u64,
    pub net1_hidden: Vec<usize>,
    pub net2_hidden: Vec<usize>,
    pub net_i_hidden: Vec<usize>,
}

impl TrainConfig {
    pub fn default_for(problem: &ProblemDefinition) -> Self {
        match problem.kind {
            ProblemKind::Stefan => TrainConfig {
                k_max: 20,
                delta_train: 1e-5,
                n_u: 220,
                n_f: 2000,
                n_initial: 20,
                epsilon_fraction: 0.02,
                interface_lbfgs_iters: 300,
                fields_lbfgs_iters: 150,
                adam_steps: 200,
                rounds: 6,
                adam_lr: 1e-3,
                seed: 0,
                net1_hidden: vec![100],
                net2_hidden: vec![100],
                net_i_hidden: vec![100],
            },
            ProblemKind::Stokes => TrainConfig {
                k_max: 20,
                delta_train: 1e-5,
                n_u: 1000,
                n_f: 1000,
                n_initial: 200,
                epsilon_fraction: 0.02,
                interface_lbfgs_iters: 300,
                fields_lbfgs_iters: 150,
                adam_steps: 200,
                rounds: 6,
                adam_lr: 1e-3,
                seed: 0,
                net1_hidden: vec![90, 90],
                net2_hidden: vec![90, 90],
                net_i_hidden: vec![100],
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k_max == 0 || self.rounds == 0 {
            return Err("budgets must be >= 1".into());
        }
        if self.delta_train <= 0.0 || self.epsilon_fraction <= 0.0 {
            return Err("delta_train and epsilon_fraction must be positive".into());
        }
        if self.n_u < self.n_initial {
            return Err("n_u must be >= n_initial".into());
        }
        if self.interface_lbfgs_iters == 0 || self.fields_lbfgs_iters == 0 || self.adam_steps == 0
        {
            return Err("inner iteration budgets must be >= 1".into());
        }
        Ok(())
    }
}

/// One outer-iteration log row plus audit fields that never reach the CSV.
#[derive(Debug, Clone)]
pub struct TrainLogRecord {
    pub k: usize,
    pub mse_dm_u1: Real,
    pub mse_dm_u2: Real,
    pub mse_dm_i: Real,
    pub mse_pm_u1: Real,
    pub mse_pm_u2: Real,
    pub mse_pm_i: Real,
    pub lambda1: Real,
    pub lambda2: Real,
    pub n_d1: usize,
    pub n_d2: usize,
    pub n_di: usize,
    pub n_e1: usize,
    pub n_e2: usize,
    pub n_ei: usize,
    pub seconds: Real,
    /// Coarse-grid field RMSE at this iterate (audit only).
    pub field_error: Real,
    /// Objective values around the interface and field steps on the
    /// partition each comparison ran on (audit only).
    pub step4: Option<StepAudit>,
    pub step7: Option<StepAudit>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepAudit {
    pub before: Real,
    pub after: Real,
    pub accepted: bool,
}

impl TrainLogRecord {
    pub fn mse_total(&self) -> Real {
        self.mse_dm_u1
            + self.mse_dm_u2
            + self.mse_dm_i
            + self.mse_pm_u1
            + self.mse_pm_u2
            + self.mse_pm_i
    }
}

pub const TRAIN_LOG_HEADER: &str =
    "k,mse_dm_u1,mse_dm_u2,mse_dm_i,mse_pm_u1,mse_pm_u2,mse_pm_i,lambda1,lambda2,n_d1,n_d2,n_di,n_e1,n_e2,n_ei,seconds";

/// Writes the pinned-format training log. Wall-clock seconds are real times
/// when `include_timing` is set and 0 otherwise, which keeps the file
/// byte-identical across reruns of the same seed.
pub fn write_training_log(
    records: &[TrainLogRecord],
    include_timing: bool,
    w: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for r in records {
        let secs = if include_timing { r.seconds } else { 0.0 };
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{},{},{},{},{:.16e}",
            r.k,
            r.mse_dm_u1,
            r.mse_dm_u2,
            r.mse_dm_i,
            r.mse_pm_u1,
            r.mse_pm_u2,
            r.mse_pm_i,
            r.lambda1,
            r.lambda2,
            r.n_d1,
            r.n_d2,
            r.n_di,
            r.n_e1,
            r.n_e2,
            r.n_ei,
            secs
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// SAL training
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub model: PisalModel,
    pub log: Vec<TrainLogRecord>,
    pub rng_d: RngSnapshot,
    pub rng_e: RngSnapshot,
}

const MAX_RESAMPLE: usize = 10;

/// Quasi-Newton steps between coefficient refreshes in the field stage.
const LAMBDA_REFRESH_CADENCE: usize = 1;

/// Quasi-Newton steps at the start of the field stage before the first
/// coefficient refresh, so the conditional coefficient optimum is estimated
/// on fields that already carry data shape.
const LAMBDA_WARMUP_ITERS: usize = 25;

/// The coefficients are diffusivities or viscosities; keep them positive.
const LAMBDA_FLOOR: Real = 1e-3;

fn coarse_field_error(model: &impl FieldPredictor, problem: &ProblemDefinition) -> Real {
    let grid = GridSpec::coarse_for(problem);
    let report = metrics::evaluate_model(model, problem, &grid);
    let ms: Real = report.rmse_overall.iter().map(|r| r * r).sum::<Real>()
        / report.rmse_overall.len().max(1) as Real;
    ms.sqrt()
}

struct Sampler {
    rng_d: ChaCha8Rng,
    rng_e: ChaCha8Rng,
}

impl Sampler {
    fn new(seed: u64) -> Self {
        Sampler {
            rng_d: ChaCha8Rng::seed_from_u64(derive_stream_seed(seed, "sample/D")),
            rng_e: ChaCha8Rng::seed_from_u64(derive_stream_seed(seed, "sample/E")),
        }
    }
    fn draw(
        &mut self,
        problem: &ProblemDefinition,
        cfg: &TrainConfig,
    ) -> (Vec<LabeledSample>, Vec<SamplePoint>) {
        draw_dataset(
            problem,
            cfg.n_u,
            cfg.n_f,
            cfg.n_initial,
            &mut self.rng_d,
            &mut self.rng_e,
        )
    }
}

/// Partition with the empty-band fallback: when the band misses every sample
/// the full D and E are redrawn (bounded retries).
fn partition_with_resample(
    problem: &ProblemDefinition,
    model: &PisalModel,
    cfg: &TrainConfig,
    sampler: &mut Sampler,
    data: &mut Vec<LabeledSample>,
    colloc: &mut Vec<SamplePoint>,
    eps: Real,
) -> Result<PartitionedData, TrainError> {
    for attempt in 0..=MAX_RESAMPLE {
        let part = partition(problem, |p| model.interface_at(p), data, colloc, eps);
        let degenerate = !part.d1_active.iter().any(|a| *a)
            || !part.d2_active.iter().any(|a| *a)
            || part.di.is_empty()
            || part.e1.is_empty()
            || part.e2.is_empty()
            || part.ei.is_empty();
        if !degenerate {
            return Ok(part);
        }
        if attempt == MAX_RESAMPLE {
            break;
        }
        let (d, e) = sampler.draw(problem, cfg);
        *data = d;
        *colloc = e;
    }
    Err(TrainError::ResamplingFailed(MAX_RESAMPLE))
}

/// Adam steps on the two coefficients. The field objective is exactly
/// quadratic in each coefficient (residuals are affine in them and the two
/// physics terms decouple), so both parabolas are reconstructed from three
/// evaluations and Adam runs on the closed-form gradients.
fn adam_on_lambdas(
    ev: &mut LossEvaluator,
    flat: &mut [Real],
    lambda_range: &Range<usize>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let saved = [flat[lambda_range.start], flat[lambda_range.start + 1]];
    let mut probe = |ev: &mut LossEvaluator, flat: &mut [Real], l: Real| {
        flat[lambda_range.start] = l;
        flat[lambda_range.start + 1] = l;
        let bd = ev.components(flat);
        (bd.pm_u1, bd.pm_u2)
    };
    let (f0a, f0b) = probe(ev, flat, 0.0);
    let (f1a, f1b) = probe(ev, flat, 1.0);
    let (f2a, f2b) = probe(ev, flat, 2.0);
    // f(l) = a l^2 + b l + c from values at l = 0, 1, 2.
    let parabola = |f0: Real, f1: Real, f2: Real| {
        let a = 0.5 * (f2 - 2.0 * f1 + f0);
        let b = f1 - f0 - a;
        (a, b)
    };
    let (a1, b1) = parabola(f0a, f1a, f2a);
    let (a2, b2) = parabola(f0b, f1b, f2b);
    let mut adam = AdamState::new(
        2,
        AdamParams {
            lr: cfg.adam_lr,
            ..AdamParams::default()
        },
    );
    let mut lambdas = saved;
    for _ in 0..cfg.adam_steps {
        let grad = [
            2.0 * a1 * lambdas[0] + b1,
            2.0 * a2 * lambdas[1] + b2,
        ];
        adam.step(&mut lambdas, &grad)?;
        lambdas[0] = lambdas[0].max(LAMBDA_FLOOR);
        lambdas[1] = lambdas[1].max(LAMBDA_FLOOR);
    }
    flat[lambda_range.start] = lambdas[0];
    flat[lambda_range.start + 1] = lambdas[1];
    Ok(())
}

fn lbfgs_subvector(
    ev: &mut LossEvaluator,
    flat: &mut [Real],
    range: Range<usize>,
    root: RootKind,
    max_iters: usize,
) -> Result<(), TrainError> {
    let x0: Vec<Real> = flat[range.clone()].to_vec();
    let cfg = LbfgsConfig {
        max_iters,
        grad_tol: 1e-9,
        progress_tol: 1e-12,
        slope_refine_tol: 0.5,
        ..LbfgsConfig::default()
    };
    let mut work = flat.to_vec();
    let objective = |x: &[Real], grad_out: &mut [Real]| {
        work[range.clone()].copy_from_slice(x);
        let (bd, grad) = ev.value_and_grad(&work, root);
        grad_out.copy_from_slice(&grad[range.clone()]);
        match root {
            RootKind::Interface => bd.interface_part(),
            RootKind::Fields => bd.fields_part(),
            RootKind::Total => bd.total(),
        }
    };
    let result = lbfgs_minimize(objective, &x0, &cfg)?;
    flat[range].copy_from_slice(&result.x);
    Ok(())
}

/// Runs the alternating training loop from a freshly initialized model.
pub fn sal_train(
    problem: &ProblemDefinition,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let model = PisalModel::init(
        problem,
        &cfg.net1_hidden,
        &cfg.net2_hidden,
        &cfg.net_i_hidden,
        cfg.seed,
    )?;
    sal_train_from(problem, cfg, model)
}

/// Runs the alternating training loop from a given starting model.
pub fn sal_train_from(
    problem: &ProblemDefinition,
    cfg: &TrainConfig,
    mut model: PisalModel,
) -> Result<TrainOutcome, TrainError> {
    let start = Instant::now();
    let eps = cfg.epsilon_fraction * problem.interface_normal_extent();
    let mut sampler = Sampler::new(cfg.seed);
    let (mut data, mut colloc) = sampler.draw(problem, cfg);
    let mut log: Vec<TrainLogRecord> = Vec::new();

    let mut part = partition_with_resample(
        problem,
        &model,
        cfg,
        &mut sampler,
        &mut data,
        &mut colloc,
        eps,
    )?;
    let mut evaluator = build_model_evaluator(problem, &model, &part)?;
    let mut flat = flatten_model(&model);

    let mut k = 0usize;
    loop {
        let breakdown = evaluator.components(&flat);
        if !breakdown.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: k });
        }
        let mut record = TrainLogRecord {
            k,
            mse_dm_u1: breakdown.dm_u1,
            mse_dm_u2: breakdown.dm_u2,
            mse_dm_i: breakdown.dm_i,
            mse_pm_u1: breakdown.pm_u1,
            mse_pm_u2: breakdown.pm_u2,
            mse_pm_i: breakdown.pm_i,
            lambda1: model.lambda1,
            lambda2: model.lambda2,
            n_d1: part.d1.len(),
            n_d2: part.d2.len(),
            n_di: part.di.len(),
            n_e1: part.e1.len(),
            n_e2: part.e2.len(),
            n_ei: part.ei.len(),
            seconds: start.elapsed().as_secs_f64(),
            field_error: coarse_field_error(&model, problem),
            step4: None,
            step7: None,
        };
        if breakdown.total() <= cfg.delta_train || k >= cfg.k_max {
            log.push(record);
            break;
        }

        // Step 4: interface network against interface data + residuals.
        let theta_i = evaluator_theta_i_range(&model);
        let before_i = breakdown.interface_part();
        let saved: Vec<Real> = flat[theta_i.clone()].to_vec();
        lbfgs_subvector(
            &mut evaluator,
            &mut flat,
            theta_i.clone(),
            RootKind::Interface,
            cfg.interface_lbfgs_iters,
        )?;
        let after_i = evaluator.components(&flat).interface_part();
        let accepted_i = after_i < before_i;
        if !accepted_i {
            flat[theta_i].copy_from_slice(&saved);
        }
        record.step4 = Some(StepAudit {
            before: before_i,
            after: after_i,
            accepted: accepted_i,
        });
        unflatten_into_model(&mut model, &flat);

        // Repartition by the refreshed interface; resample on an empty band.
        part = partition_with_resample(
            problem,
            &model,
            cfg,
            &mut sampler,
            &mut data,
            &mut colloc,
            eps,
        )?;
        evaluator = build_model_evaluator(problem, &model, &part)?;

        // Step 7: field networks by quasi-Newton with the coefficients
        // riding along: Adam passes on the coefficients are interleaved
        // between quasi-Newton steps so both move while the residuals still
        // carry coefficient information.
        let theta_12 = evaluator_theta_fields_range(&model);
        let lambda_range = evaluator_lambda_range(&model);
        let before_u = evaluator.components(&flat).fields_part();
        let mut best_u = before_u;
        let mut best_fields: Vec<Real> = flat[theta_12.start..lambda_range.end].to_vec();

        let lcfg = LbfgsConfig {
            max_iters: cfg.rounds * cfg.fields_lbfgs_iters,
            grad_tol: 1e-9,
            progress_tol: 1e-12,
            slope_refine_tol: 0.5,
            ..LbfgsConfig::default()
        };
        let mut state = LbfgsState::new(&flat[theta_12.clone()], lcfg);
        let mut since_refresh = 0usize;
        let mut total_iters = 0usize;
        'step7: for _round in 0..cfg.rounds {
            for _ in 0..cfg.fields_lbfgs_iters {
                total_iters += 1;
                if since_refresh == 0 && total_iters > LAMBDA_WARMUP_ITERS {
                    let old = [flat[lambda_range.start], flat[lambda_range.start + 1]];
                    adam_on_lambdas(&mut evaluator, &mut flat, &lambda_range, cfg)?;
                    let moved = (flat[lambda_range.start] - old[0]).abs()
                        + (flat[lambda_range.start + 1] - old[1]).abs();
                    if moved > 1e-14 {
                        state.mark_objective_changed();
                    }
                }
                since_refresh = (since_refresh + 1) % LAMBDA_REFRESH_CADENCE;

                let frozen = flat.clone();
                let range = theta_12.clone();
                let outcome = {
                    let ev = &mut evaluator;
                    let mut obj = |x: &[Real], g: &mut [Real]| {
                        let mut work = frozen.clone();
                        work[range.clone()].copy_from_slice(x);
                        let (bd, grad) = ev.value_and_grad(&work, RootKind::Fields);
                        g.copy_from_slice(&grad[range.clone()]);
                        bd.fields_part()
                    };
                    state.step(&mut obj)?
                };
                flat[theta_12.clone()].copy_from_slice(state.x());
                if let crate::optim::StepOutcome::Finished(_) = outcome {
                    // The field block is stationary; stop once the
                    // coefficients stop moving too.
                    let old = [flat[lambda_range.start], flat[lambda_range.start + 1]];
                    adam_on_lambdas(&mut evaluator, &mut flat, &lambda_range, cfg)?;
                    let moved = (flat[lambda_range.start] - old[0]).abs()
                        + (flat[lambda_range.start + 1] - old[1]).abs();
                    if moved <= 1e-14 {
                        let u_now = evaluator.components(&flat).fields_part();
                        if u_now < best_u {
                            best_u = u_now;
                            best_fields = flat[theta_12.start..lambda_range.end].to_vec();
                        }
                        break 'step7;
                    }
                    state.mark_objective_changed();
                    since_refresh = 1 % LAMBDA_REFRESH_CADENCE;
                }
            }
            let u_now = evaluator.components(&flat).fields_part();
            if u_now < best_u {
                best_u = u_now;
                best_fields = flat[theta_12.start..lambda_range.end].to_vec();
            }
        }
        let accepted_u = best_u < before_u;
        flat[theta_12.start..lambda_range.end].copy_from_slice(&best_fields);
        record.step7 = Some(StepAudit {
            before: before_u,
            after: best_u,
            accepted: accepted_u,
        });
        unflatten_into_model(&mut model, &flat);

        log.push(record);
        k += 1;
    }

    Ok(TrainOutcome {
        model,
        log,
        rng_d: RngSnapshot::capture(&sampler.rng_d),
        rng_e: RngSnapshot::capture(&sampler.rng_e),
    })
}

fn build_model_evaluator(
    problem: &ProblemDefinition,
    model: &PisalModel,
    part: &PartitionedData,
) -> Result<LossEvaluator, TrainError> {
    LossEvaluator::build(
        problem,
        FieldSource::Net(&model.net1),
        FieldSource::Net(&model.net2),
        InterfaceSource::Net {
            net: &model.net_i,
            offset: model.interface_offset,
        },
        part,
    )
}

fn evaluator_theta_i_range(model: &PisalModel) -> Range<usize> {
    let n1 = model.net1.param_count();
    let n2 = model.net2.param_count();
    let ni = model.net_i.param_count();
    n1 + n2..n1 + n2 + ni
}

fn evaluator_theta_fields_range(model: &PisalModel) -> Range<usize> {
    0..model.net1.param_count() + model.net2.param_count()
}

fn evaluator_lambda_range(model: &PisalModel) -> Range<usize> {
    let n = model.net1.param_count() + model.net2.param_count() + model.net_i.param_count();
    n..n + 2
}

// ---------------------------------------------------------------------------
// Vanilla single-network baseline
// ---------------------------------------------------------------------------

pub struct BaselineOutcome {
    pub model: BaselineModel,
    pub log: Vec<TrainLogRecord>,
}

/// One network, one shared coefficient, no interface handling: data loss
/// over all of D, physics loss over all of E with the single coefficient.
/// Stationary-benchmark sources use the true-region piecewise form (they are
/// given data).
pub fn pinn_baseline_train(
    problem: &ProblemDefinition,
    cfg: &TrainConfig,
) -> Result<BaselineOutcome, TrainError> {
    let start = Instant::now();
    let field_inputs = problem.spatial_dim + usize::from(problem.is_time_dependent());
    let net = Mlp::init_xavier(
        &layer_sizes(field_inputs, &cfg.net1_hidden, problem.output_arity),
        derive_stream_seed(cfg.seed, "init/net1"),
    )?;
    let mut sampler = Sampler::new(cfg.seed);
    let (data, colloc) = sampler.draw(problem, cfg);

    let mut model = BaselineModel { net, lambda: 1.0 };
    let mut log = Vec::new();
    let mut flat = model.net.flatten();
    flat.push(model.lambda);
    let n_theta = flat.len() - 1;

    let mut ev = BaselineEvaluator::build(problem, &model.net, &data, &colloc);
    for k in 0..=cfg.k_max {
        let (data_mse, phys_mse) = ev.components(&flat);
        let total = data_mse + phys_mse;
        model.net = Mlp::unflatten(model.net.layer_sizes(), &flat[..n_theta]).unwrap();
        model.lambda = flat[n_theta];
        log.push(TrainLogRecord {
            k,
            mse_dm_u1: data_mse,
            mse_dm_u2: 0.0,
            mse_dm_i: 0.0,
            mse_pm_u1: phys_mse,
            mse_pm_u2: 0.0,
            mse_pm_i: 0.0,
            lambda1: model.lambda,
            lambda2: model.lambda,
            n_d1: data.len(),
            n_d2: 0,
            n_di: 0,
            n_e1: colloc.len(),
            n_e2: 0,
            n_ei: 0,
            seconds: start.elapsed().as_secs_f64(),
            field_error: coarse_field_error(&model, problem),
            step4: None,
            step7: None,
        });
        if total <= cfg.delta_train || k == cfg.k_max {
            break;
        }
        for _round in 0..cfg.rounds {
            let x0: Vec<Real> = flat[..n_theta].to_vec();
            let lcfg = LbfgsConfig {
                max_iters: cfg.fields_lbfgs_iters,
                grad_tol: 1e-9,
                progress_tol: 1e-12,
                ..LbfgsConfig::default()
            };
            let mut work = flat.clone();
            let res = lbfgs_minimize(
                |x, g| {
                    work[..n_theta].copy_from_slice(x);
                    let (loss, grad) = ev.value_and_grad(&work);
                    g.copy_from_slice(&grad[..n_theta]);
                    loss
                },
                &x0,
                &lcfg,
            )?;
            flat[..n_theta].copy_from_slice(&res.x);

            let mut adam = AdamState::new(
                1,
                AdamParams {
                    lr: cfg.adam_lr,
                    ..AdamParams::default()
                },
            );
            let mut lambda = [flat[n_theta]];
            for _ in 0..cfg.adam_steps {
                flat[n_theta] = lambda[0];
                let (_, grad) = ev.value_and_grad(&flat);
                adam.step(&mut lambda, &[grad[n_theta]])?;
            }
            flat[n_theta] = lambda[0];
        }
    }
    model.net = Mlp::unflatten(model.net.layer_sizes(), &flat[..n_theta]).unwrap();
    model.lambda = flat[n_theta];
    Ok(BaselineOutcome { model, log })
}

struct BaselineChunk {
    tape: Tape<PdeJet>,
    binding: MlpBinding,
    lambda_leaf: NodeId,
    data_node: NodeId,
    phys_node: NodeId,
    root: NodeId,
    adj: Vec<PdeJet>,
    grad: Vec<Real>,
}

struct BaselineEvaluator {
    chunks: Vec<BaselineChunk>,
    n_params: usize,
}

impl BaselineEvaluator {
    fn build(
        problem: &ProblemDefinition,
        net: &Mlp,
        data: &[LabeledSample],
        colloc: &[SamplePoint],
    ) -> Self {
        let n_params = net.param_count();
        let chunks = (0..LOSS_CHUNKS)
            .into_par_iter()
            .map(|c| {
                let mut tape = Tape::<PdeJet>::new();
                let binding = net.register(&mut tape);
                let lambda_leaf = tape.leaf();
                let d = &data[slice_bounds(data.len(), c, LOSS_CHUNKS)];
                let e = &colloc[slice_bounds(colloc.len(), c, LOSS_CHUNKS)];
                let mut data_sum = tape.constant(0.0);
                for s in d {
                    let mut inputs: Vec<NodeId> =
                        s.point.coords.iter().map(|&v| tape.constant(v)).collect();
                    if let Some(t) = s.point.time {
                        inputs.push(tape.constant(t));
                    }
                    let outs = binding.build_forward(&mut tape, &inputs).unwrap();
                    for (o, &truth) in outs.iter().zip(&s.fields) {
                        let diff = tape.add_const(*o, -truth);
                        let sq = tape.square(diff);
                        data_sum = tape.add(data_sum, sq);
                    }
                }
                let mut phys_sum = tape.constant(0.0);
                for p in e {
                    match problem.kind {
                        ProblemKind::Stefan => {
                            let r = stefan_residual_bulk(
                                &mut tape,
                                &binding,
                                lambda_leaf,
                                p.coords[0],
                                p.time.unwrap(),
                            );
                            let sq = tape.square(r);
                            phys_sum = tape.add(phys_sum, sq);
                        }
                        ProblemKind::Stokes => {
                            let region = if p.coords[1] > 0.0 {
                                RegionTag::Region1
                            } else {
                                RegionTag::Region2
                            };
                            let g = ns_source(p.coords[0], p.coords[1], region).unwrap();
                            let rs = ns_residual_bulk(
                                &mut tape,
                                &binding,
                                lambda_leaf,
                                p.coords[0],
                                p.coords[1],
                                g,
                            );
                            for r in rs {
                                let sq = tape.square(r);
                                phys_sum = tape.add(phys_sum, sq);
                            }
                        }
                    }
                }
                let data_node = tape.mul_const(data_sum, 1.0 / data.len().max(1) as Real);
                let phys_node = tape.mul_const(phys_sum, 1.0 / colloc.len().max(1) as Real);
                let root = tape.add(data_node, phys_node);
                BaselineChunk {
                    tape,
                    binding,
                    lambda_leaf,
                    data_node,
                    phys_node,
                    root,
                    adj: Vec::new(),
                    grad: Vec::new(),
                }
            })
            .collect();
        BaselineEvaluator { chunks, n_params }
    }

    fn components(&mut self, flat: &[Real]) -> (Real, Real) {
        let n = self.n_params;
        self.chunks.par_iter_mut().for_each(|c| {
            let BaselineChunk {
                tape,
                binding,
                lambda_leaf,
                ..
            } = c;
            set_leaves(tape, binding.param_leaves(), &flat[..n]);
            tape.set_leaf(*lambda_leaf, PdeJet::constant(flat[n]));
        });
        let parts: Vec<(Real, Real)> = self
            .chunks
            .par_iter_mut()
            .map(|c| {
                c.tape.forward().expect("in-domain");
                (
                    c.tape.value(c.data_node).primal(),
                    c.tape.value(c.phys_node).primal(),
                )
            })
            .collect();
        parts
            .into_iter()
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y))
    }

    fn value_and_grad(&mut self, flat: &[Real]) -> (Real, Vec<Real>) {
        let (d, p) = self.components(flat);
        let n = self.n_params;
        self.chunks.par_iter_mut().for_each(|c| {
            let mut adj = std::mem::take(&mut c.adj);
            c.tape.backward_into(c.root, &mut adj).unwrap();
            c.grad.clear();
            c.grad.resize(n + 1, 0.0);
            for (g, leaf) in c.grad[..n].iter_mut().zip(c.binding.param_leaves()) {
                *g = adj[leaf.0 as usize].primal();
            }
            c.grad[n] = adj[c.lambda_leaf.0 as usize].primal();
            c.adj = adj;
        });
        let mut grad = vec![0.0; n + 1];
        for c in &self.chunks {
            for (t, g) in grad.iter_mut().zip(&c.grad) {
                *t += g;
            }
        }
        (d + p, grad)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint bundle
// ---------------------------------------------------------------------------

/// Serializable RNG position (seed plus stream word offset).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngSnapshot {
    pub seed: Vec<u8>,
    pub word_pos: String,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngSnapshot {
            seed: rng.get_seed().to_vec(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }
    pub fn restore(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&self.seed);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(self.word_pos.parse().unwrap_or(0));
        rng
    }
}

/// JSON checkpoint bundle: the three networks, coefficients, configuration,
/// and the sampling RNG state at the end of training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PisalCheckpoint {
    pub net1: NetworkCheckpoint,
    pub net2: NetworkCheckpoint,
    pub net_i: NetworkCheckpoint,
    pub lambda1: Real,
    pub lambda2: Real,
    pub interface_offset: Real,
    pub config: TrainConfig,
    pub rng_d: RngSnapshot,
    pub rng_e: RngSnapshot,
}

impl PisalCheckpoint {
    pub fn new(outcome: &TrainOutcome, cfg: &TrainConfig) -> Self {
        let model = &outcome.model;
        PisalCheckpoint {
            net1: model
                .net1
                .to_checkpoint(derive_stream_seed(cfg.seed, "init/net1")),
            net2: model
                .net2
                .to_checkpoint(derive_stream_seed(cfg.seed, "init/net2")),
            net_i: model
                .net_i
                .to_checkpoint(derive_stream_seed(cfg.seed, "init/netI")),
            lambda1: model.lambda1,
            lambda2: model.lambda2,
            interface_offset: model.interface_offset,
            config: cfg.clone(),
            rng_d: outcome.rng_d.clone(),
            rng_e: outcome.rng_e.clone(),
        }
    }

    pub fn to_model(&self) -> Result<PisalModel, NetworkError> {
        Ok(PisalModel {
            net1: self.net1.to_mlp()?,
            net2: self.net2.to_mlp()?,
            net_i: self.net_i.to_mlp()?,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            interface_offset: self.interface_offset,
        })
    }
}

/// Checkpoint for the single-network baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineCheckpoint {
    pub net: NetworkCheckpoint,
    pub lambda: Real,
    pub config: TrainConfig,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::sample_dataset;

    #[test]
    fn classify_examples() {
        let stefan = ProblemDefinition::stefan();
        let s_hat = |t: Real| t + 0.5;
        let p = SamplePoint::space_time(0.2, 0.3);
        assert_eq!(classify(&stefan, s_hat, &p, 0.02), RegionTag::Region1);
        let p = SamplePoint::space_time(0.8, 0.3);
        assert_eq!(classify(&stefan, s_hat, &p, 0.02), RegionTag::InterfaceBand);
        let stokes = ProblemDefinition::stokes();
        let p = SamplePoint::plane(0.5, -0.5);
        assert_eq!(classify(&stokes, |_| 0.0, &p, 0.02), RegionTag::Region2);
        let p = SamplePoint::plane(0.5, 0.5);
        assert_eq!(classify(&stokes, |_| 0.0, &p, 0.02), RegionTag::Region1);
        // Inclusive band edge.
        let p = SamplePoint::plane(0.5, 0.02);
        assert_eq!(
            classify(&stokes, |_| 0.0, &p, 0.02),
            RegionTag::InterfaceBand
        );
    }

    #[test]
    fn partition_covers_and_double_counts_the_band() {
        let problem = ProblemDefinition::stefan();
        let (d, e) = sample_dataset(&problem, 220, 500, 20, 7);
        let part = partition(&problem, |t| t + 0.5, &d, &e, 0.04);
        assert_eq!(part.d1.len() + part.d2.len() - part.di.len(), 220);
        assert_eq!(part.e1.len() + part.e2.len() - part.ei.len(), 500);
        for s in &part.di {
            assert!(part.d1.contains(s) && part.d2.contains(s));
        }
    }

    #[test]
    fn band_covering_the_domain_swallows_everything() {
        let problem = ProblemDefinition::stefan();
        let (d, e) = sample_dataset(&problem, 50, 50, 5, 7);
        let part = partition(&problem, |t| t + 0.5, &d, &e, 10.0);
        assert_eq!(part.di.len(), 50);
        assert_eq!(part.ei.len(), 50);
        let empty_band = partition(&problem, |t| t + 0.5, &d, &e, 1e-15);
        assert!(empty_band.di.is_empty());
    }

    #[test]
    fn oracle_model_drives_all_terms_to_zero() {
        // Interface samples sit exactly on the true curve (the band is shrunk
        // to the curve itself), which is the regime where all six terms reach
        // their floor simultaneously.
        for problem in [ProblemDefinition::stefan(), ProblemDefinition::stokes()] {
            let (mut d, mut e) = sample_dataset(&problem, 60, 60, 10, 3);
            for i in 0..8 {
                let param = 0.05 + 0.9 * i as Real / 7.0;
                let point = match problem.kind {
                    ProblemKind::Stefan => {
                        SamplePoint::space_time(problem.true_interface(param), param)
                    }
                    ProblemKind::Stokes => {
                        SamplePoint::plane(param, problem.true_interface(param))
                    }
                };
                let (fields, _) = problem.exact(&point).unwrap();
                d.push(LabeledSample {
                    point: point.clone(),
                    fields,
                    is_initial: false,
                });
                e.push(point);
            }
            let part = partition(&problem, |p| problem.true_interface(p), &d, &e, 1e-12);
            assert_eq!(part.di.len(), 8);
            let bd = loss_terms_oracle(&problem, &part, problem.lambda_true).unwrap();
            for v in [bd.dm_u1, bd.dm_u2, bd.dm_i, bd.pm_u1, bd.pm_u2, bd.pm_i] {
                assert!(v <= 1e-12, "loss term {v} not at oracle floor: {bd:?}");
            }
        }
    }

    #[test]
    fn zero_model_data_loss_is_mean_square_of_truth() {
        let problem = ProblemDefinition::stefan();
        let (d, e) = sample_dataset(&problem, 80, 80, 10, 5);
        let eps = 0.02 * problem.interface_normal_extent();
        let part = partition(&problem, |t| t + 0.5, &d, &e, eps);
        let mut model = PisalModel::init(&problem, &[4], &[4], &[4], 1).unwrap();
        model.net1 = Mlp::zeros(model.net1.layer_sizes()).unwrap();
        let bd = loss_terms(&model, &problem, &part).unwrap();
        let active: Vec<&LabeledSample> = part
            .d1
            .iter()
            .zip(&part.d1_active)
            .filter(|(_, a)| **a)
            .map(|(s, _)| s)
            .collect();
        let expected: Real = active
            .iter()
            .map(|s| s.fields[0] * s.fields[0])
            .sum::<Real>()
            / active.len() as Real;
        assert!((bd.dm_u1 - expected).abs() <= 1e-12 * (1.0 + expected));
    }

    fn stefan_exact_u(x: Real, t: Real) -> Real {
        crate::physics::stefan_exact(x, t).unwrap().0
    }

    #[test]
    fn single_point_sets_reduce_to_squared_residuals() {
        let problem = ProblemDefinition::stefan();
        let d = vec![
            LabeledSample {
                point: SamplePoint::space_time(0.2, 0.5),
                fields: vec![stefan_exact_u(0.2, 0.5)],
                is_initial: false,
            },
            LabeledSample {
                point: SamplePoint::space_time(1.8, 0.5),
                fields: vec![stefan_exact_u(1.8, 0.5)],
                is_initial: false,
            },
            LabeledSample {
                point: SamplePoint::space_time(1.0, 0.5),
                fields: vec![stefan_exact_u(1.0, 0.5)],
                is_initial: false,
            },
        ];
        let e = vec![
            SamplePoint::space_time(0.3, 0.4),
            SamplePoint::space_time(1.7, 0.4),
            SamplePoint::space_time(1.0, 0.5),
        ];
        let part = partition(&problem, |t| t + 0.5, &d, &e, 0.04);
        assert_eq!(part.di.len(), 1);
        let model = PisalModel::init(&problem, &[3], &[3], &[3], 9).unwrap();
        let bd = loss_terms(&model, &problem, &part).unwrap();
        // dm_i for one interface sample is the two squared mismatches of the
        // fields at the predicted interface against u*.
        let t = 0.5;
        let s_hat = model.interface_at(t);
        let u1 = model.net1.forward_values(&[s_hat, t]).unwrap()[0];
        let u2 = model.net2.forward_values(&[s_hat, t]).unwrap()[0];
        let expected = u1 * u1 + u2 * u2;
        assert!((bd.dm_i - expected).abs() <= 1e-12 * (1.0 + expected));
    }

    #[test]
    fn loss_decomposition_sums_to_total() {
        let problem = ProblemDefinition::stokes();
        let (d, e) = sample_dataset(&problem, 50, 50, 10, 21);
        let eps = 0.05 * problem.interface_normal_extent();
        let part = partition(&problem, |_| 0.0, &d, &e, eps);
        let model = PisalModel::init(&problem, &[6], &[6], &[6], 2).unwrap();
        let bd = loss_terms(&model, &problem, &part).unwrap();
        let total = bd.dm_u1 + bd.dm_u2 + bd.dm_i + bd.pm_u1 + bd.pm_u2 + bd.pm_i;
        assert!((bd.total() - total).abs() <= 1e-12 * (1.0 + total.abs()));
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        // Five-neuron smoke model; every parameter and both coefficients.
        let problem = ProblemDefinition::stefan();
        let (d, e) = sample_dataset(&problem, 30, 30, 5, 13);
        let eps = 0.05 * problem.interface_normal_extent();
        let model = PisalModel::init(&problem, &[5], &[5], &[5], 4).unwrap();
        let part = partition(&problem, |p| model.interface_at(p), &d, &e, eps);
        let mut ev = build_model_evaluator(&problem, &model, &part).unwrap();
        let mut flat = flatten_model(&model);
        let (_, grad) = ev.value_and_grad(&flat, RootKind::Total);
        let h = 1e-5;
        let mut worst: Real = 0.0;
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + h;
            let fp = ev.components(&flat).total();
            flat[i] = orig - h;
            let fm = ev.components(&flat).total();
            flat[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1.0);
            worst = worst.max((grad[i] - fd).abs() / scale);
        }
        assert!(worst <= 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn training_stops_immediately_when_threshold_exceeds_initial_loss() {
        let problem = ProblemDefinition::stefan();
        let mut cfg = TrainConfig::default_for(&problem);
        cfg.n_u = 40;
        cfg.n_f = 40;
        cfg.n_initial = 5;
        cfg.net1_hidden = vec![4];
        cfg.net2_hidden = vec![4];
        cfg.net_i_hidden = vec![4];
        cfg.delta_train = 1e9;
        let out = sal_train(&problem, &cfg).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.model.lambda1, 1.0);
        assert_eq!(out.model.lambda2, 1.0);
    }

    #[test]
    fn checkpoint_bundle_round_trips() {
        let problem = ProblemDefinition::stokes();
        let mut cfg = TrainConfig::default_for(&problem);
        cfg.n_u = 30;
        cfg.n_f = 30;
        cfg.n_initial = 5;
        cfg.net1_hidden = vec![5];
        cfg.net2_hidden = vec![5];
        cfg.net_i_hidden = vec![5];
        cfg.delta_train = 1e9;
        let out = sal_train(&problem, &cfg).unwrap();
        let ck = PisalCheckpoint::new(&out, &cfg);
        let json = serde_json::to_string(&ck).unwrap();
        let back: PisalCheckpoint = serde_json::from_str(&json).unwrap();
        let model2 = back.to_model().unwrap();
        assert_eq!(flatten_model(&out.model), flatten_model(&model2));
        assert_eq!(back.rng_d, ck.rng_d);
        let restored = back.rng_d.restore();
        assert_eq!(RngSnapshot::capture(&restored), ck.rng_d);
    }

    #[test]
    fn training_log_format_is_pinned() {
        let rec = TrainLogRecord {
            k: 0,
            mse_dm_u1: 1.0,
            mse_dm_u2: 2.0,
            mse_dm_i: 3.0,
            mse_pm_u1: 4.0,
            mse_pm_u2: 5.0,
            mse_pm_i: 6.0,
            lambda1: 1.5,
            lambda2: 0.5,
            n_d1: 10,
            n_d2: 20,
            n_di: 3,
            n_e1: 40,
            n_e2: 50,
            n_ei: 6,
            seconds: 12.5,
            field_error: 0.0,
            step4: None,
            step7: None,
        };
        assert!((rec.mse_total() - 21.0).abs() < 1e-12);
        let mut buf = Vec::new();
        write_training_log(&[rec.clone()], false, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(TRAIN_LOG_HEADER));
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .ends_with(",0.0000000000000000e0"));
        let mut buf = Vec::new();
        write_training_log(&[rec], true, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().contains("1.2500000000000000e1"));
    }
}
