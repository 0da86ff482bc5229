//! Physics-informed synchronic-adaptive learning (PISAL) for PDE inverse
//! problems in two-medium domains.
//!
//! Three coupled networks are trained by an alternating scheme: two field
//! networks learn the solution on either side of an unknown interface while a
//! third network learns the interface itself, and the PDE coefficients of both
//! media are identified along the way. The numerical core (tape, networks,
//! optimizers, metrics) is generic over the scalar type; the benchmark
//! problems and the trainer are pinned to [`Real`].

pub mod autodiff;
pub mod cli;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod physics;
pub mod sal;
pub mod scalar;

/// Scalar used by every concrete solver path.
pub type Real = f64;

/// Jet carried through residual graphs: two derivative tags, second order each.
pub type PdeJet = scalar::Jet2<Real>;

/// Derives a per-purpose RNG seed from the master seed, so that individual
/// components (network init, dataset draws) stay reproducible under partial
/// configuration changes. FNV-1a over the name, mixed with splitmix64.
pub fn derive_stream_seed(master: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
