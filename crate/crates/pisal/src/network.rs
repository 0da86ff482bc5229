//! Fully connected tanh networks with Xavier initialization.
//!
//! An [`Mlp`] owns concrete `f64` parameters. To differentiate through a
//! network the parameters are registered as tape leaves ([`Mlp::register`]),
//! after which [`MlpBinding::outputs`] builds the forward graph for any scalar
//! type. Hidden layers use tanh; the output layer is affine.

use crate::autodiff::{NodeId, Tape};
use crate::scalar::Scalar;
use crate::Real;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("layer list must contain at least input and output sizes")]
    TooFewLayers,
    #[error("layer sizes must all be >= 1")]
    ZeroLayerSize,
    #[error("expected {expected} inputs, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("expected a parameter vector of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// A field realized as nodes on a tape: either a network forward pass or an
/// exact-solution graph standing in for one.
pub trait FieldGraph<S: Scalar> {
    fn outputs(&self, tape: &mut Tape<S>, inputs: &[NodeId]) -> Vec<NodeId>;
}

/// Fully connected network parameters. `weights[l]` is row-major
/// `layer_sizes[l+1] x layer_sizes[l]`; biases follow the output side.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<Real>>,
    biases: Vec<Vec<Real>>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<(), NetworkError> {
    if layer_sizes.len() < 2 {
        return Err(NetworkError::TooFewLayers);
    }
    if layer_sizes.iter().any(|&n| n == 0) {
        return Err(NetworkError::ZeroLayerSize);
    }
    Ok(())
}

impl Mlp {
    /// Xavier-uniform weights on +-sqrt(6 / (fan_in + fan_out)), zero biases.
    /// The same seed always produces the same parameters.
    pub fn init_xavier(layer_sizes: &[usize], seed: u64) -> Result<Self, NetworkError> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_sizes.len() - 1 {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as Real).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let w: Vec<Real> = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self, NetworkError> {
        validate_sizes(layer_sizes)?;
        let weights = (0..layer_sizes.len() - 1)
            .map(|l| vec![0.0; layer_sizes[l] * layer_sizes[l + 1]])
            .collect();
        let biases = (1..layer_sizes.len()).map(|l| vec![0.0; layer_sizes[l]]).collect();
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_arity(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_arity(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Layer-major, weights row-major, biases after weights per layer.
    pub fn flatten(&self) -> Vec<Real> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn unflatten(layer_sizes: &[usize], params: &[Real]) -> Result<Self, NetworkError> {
        let mut net = Mlp::zeros(layer_sizes)?;
        if params.len() != net.param_count() {
            return Err(NetworkError::LengthMismatch {
                expected: net.param_count(),
                got: params.len(),
            });
        }
        let mut at = 0;
        for l in 0..net.weights.len() {
            let nw = net.weights[l].len();
            net.weights[l].copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = net.biases[l].len();
            net.biases[l].copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(net)
    }

    pub fn set_weight(&mut self, layer: usize, row: usize, col: usize, v: Real) {
        let fan_in = self.layer_sizes[layer];
        self.weights[layer][row * fan_in + col] = v;
    }

    pub fn set_bias(&mut self, layer: usize, row: usize, v: Real) {
        self.biases[layer][row] = v;
    }

    /// Plain arithmetic forward pass. Accumulation order matches the fused
    /// dot nodes built by [`MlpBinding::outputs`], so the two agree bitwise.
    pub fn forward_values(&self, inputs: &[Real]) -> Result<Vec<Real>, NetworkError> {
        if inputs.len() != self.input_arity() {
            return Err(NetworkError::ArityMismatch {
                expected: self.input_arity(),
                got: inputs.len(),
            });
        }
        let last = self.weights.len() - 1;
        let mut act = inputs.to_vec();
        for l in 0..self.weights.len() {
            let fan_in = self.layer_sizes[l];
            let fan_out = self.layer_sizes[l + 1];
            let mut next = Vec::with_capacity(fan_out);
            for r in 0..fan_out {
                let mut acc = self.biases[l][r];
                for c in 0..fan_in {
                    acc += act[c] * self.weights[l][r * fan_in + c];
                }
                next.push(if l == last { acc } else { acc.tanh() });
            }
            act = next;
        }
        Ok(act)
    }

    /// Register every parameter as a leaf on `tape` (flatten order) and
    /// return the binding used to build forward graphs.
    pub fn register<S: Scalar>(&self, tape: &mut Tape<S>) -> MlpBinding {
        let mut param_leaves = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            for _ in 0..self.weights[l].len() + self.biases[l].len() {
                param_leaves.push(tape.leaf());
            }
        }
        MlpBinding {
            layer_sizes: self.layer_sizes.clone(),
            param_leaves,
        }
    }

    pub fn to_checkpoint(&self, seed: u64) -> NetworkCheckpoint {
        NetworkCheckpoint {
            layer_sizes: self.layer_sizes.clone(),
            params: self.flatten(),
            seed,
        }
    }
}

/// Tape-side handle to a registered network: parameter leaves in flatten
/// order plus the shape needed to wire forward passes.
#[derive(Debug, Clone)]
pub struct MlpBinding {
    layer_sizes: Vec<usize>,
    param_leaves: Vec<NodeId>,
}

impl MlpBinding {
    pub fn param_leaves(&self) -> &[NodeId] {
        &self.param_leaves
    }

    pub fn param_count(&self) -> usize {
        self.param_leaves.len()
    }

    /// Assign parameter leaf values from a flat vector (flatten order).
    pub fn set_params<S: Scalar>(&self, tape: &mut Tape<S>, flat: &[Real]) {
        debug_assert_eq!(flat.len(), self.param_leaves.len());
        for (leaf, &p) in self.param_leaves.iter().zip(flat) {
            tape.set_leaf(*leaf, S::from_f64(p));
        }
    }

    /// Build the forward graph `tanh(W_l ... tanh(W_1 x + b_1) ...) + b_L`
    /// with an affine output layer; returns one node per output.
    pub fn build_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        inputs: &[NodeId],
    ) -> Result<Vec<NodeId>, NetworkError> {
        if inputs.len() != self.layer_sizes[0] {
            return Err(NetworkError::ArityMismatch {
                expected: self.layer_sizes[0],
                got: inputs.len(),
            });
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut act: Vec<NodeId> = inputs.to_vec();
        let mut offset = 0;
        let mut pairs: Vec<(NodeId, NodeId)> = Vec::new();
        for l in 0..n_layers {
            let fan_in = self.layer_sizes[l];
            let fan_out = self.layer_sizes[l + 1];
            let weights = &self.param_leaves[offset..offset + fan_in * fan_out];
            let biases = &self.param_leaves[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;
            let mut pre: Vec<NodeId> = Vec::with_capacity(fan_out);
            for r in 0..fan_out {
                pairs.clear();
                for c in 0..fan_in {
                    pairs.push((act[c], weights[r * fan_in + c]));
                }
                pre.push(tape.dot_bias(&pairs, biases[r]));
            }
            act = if l == n_layers - 1 {
                pre
            } else {
                pre.iter().map(|&n| tape.tanh(n)).collect()
            };
        }
        Ok(act)
    }
}

impl<S: Scalar> FieldGraph<S> for MlpBinding {
    fn outputs(&self, tape: &mut Tape<S>, inputs: &[NodeId]) -> Vec<NodeId> {
        self.build_forward(tape, inputs)
            .expect("binding arity checked at construction")
    }
}

/// Flat JSON checkpoint: `{layer_sizes, params, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub params: Vec<Real>,
    pub seed: u64,
}

impl NetworkCheckpoint {
    pub fn to_mlp(&self) -> Result<Mlp, NetworkError> {
        Mlp::unflatten(&self.layer_sizes, &self.params)
    }
}
