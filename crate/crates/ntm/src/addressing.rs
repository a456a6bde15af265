//! The four-stage addressing pipeline and the read/write mechanics, as
//! differentiable tape operations: content weighting by key similarity,
//! interpolation with the previous weighting, rotational shift by circular
//! convolution, and power sharpening.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;

/// Content weighting: softmax over locations of `beta * cosine(key, row)`.
pub fn content_weighting(t: &mut Tape, memory: NodeId, key: NodeId, beta: NodeId) -> Result<NodeId> {
    let sims = t.cosine_sim(memory, key)?;
    let scaled = t.mul(beta, sims)?;
    t.softmax(scaled)
}

/// Gated blend `g * w_c + (1 - g) * w_prev`.
pub fn interpolate(t: &mut Tape, w_c: NodeId, w_prev: NodeId, gate: NodeId) -> Result<NodeId> {
    let gated_c = t.mul(gate, w_c)?;
    let neg_g = t.scale(gate, -1.0)?;
    let one_minus_g = t.add_const(neg_g, 1.0)?;
    let gated_prev = t.mul(one_minus_g, w_prev)?;
    t.add(gated_c, gated_prev)
}

/// Rotational shift of a weighting by a normalized kernel over offsets
/// `-radius ..= radius`, modulo the number of locations.
pub fn shift(t: &mut Tape, w: NodeId, kernel: NodeId, radius: usize) -> Result<NodeId> {
    t.circular_conv(w, kernel, radius)
}

/// Pointwise exponentiation by `gamma >= 1` followed by renormalization.
pub fn sharpen(t: &mut Tape, w: NodeId, gamma: NodeId) -> Result<NodeId> {
    // w^γ/Σw^γ is invariant to rescaling w, so divide by the max first:
    // the largest entry then powers to exactly 1 and the sum cannot
    // underflow however large γ gets. Scale invariance also makes the
    // gradient through the constant factor exact.
    let peak = t.value(w).iter().cloned().fold(f64::MIN, f64::max);
    let w = if peak > 0.0 && peak != 1.0 { t.scale(w, 1.0 / peak)? } else { w };
    let powered = t.power(w, gamma)?;
    let total = t.sum(powered)?;
    let total = t.add_const(total, 1e-16)?;
    t.div(powered, total)
}

/// The scalar-shift parameterization: a real shift `x` becomes a full
/// length-n kernel (offsets 0..n-1 modulo n) splitting mass between
/// `floor(x)` and `floor(x)+1` by the fractional part. Not the default
/// shift path; emitted kernels feed `circular_conv` with radius 0.
pub fn shift_from_scalar(x: f64, n: usize) -> Vec<f64> {
    let mut kernel = vec![0.0; n];
    let lo = x.floor();
    let frac = x - lo;
    let lo_idx = (lo as isize).rem_euclid(n as isize) as usize;
    let hi_idx = (lo_idx + 1) % n;
    kernel[lo_idx] += 1.0 - frac;
    kernel[hi_idx] += frac;
    kernel
}

/// Read vector: the weighting-convex combination of memory rows.
pub fn read(t: &mut Tape, memory: NodeId, w: NodeId) -> Result<NodeId> {
    t.vecmat(w, memory)
}

/// Apply all write heads to memory: every erase first, then every add.
/// The result is independent of head order within each phase.
pub fn write(t: &mut Tape, memory: NodeId, heads: &[(NodeId, NodeId, NodeId)]) -> Result<NodeId> {
    let mut m = memory;
    for &(w, e, _) in heads {
        let we = t.outer(w, e)?;
        let neg = t.scale(we, -1.0)?;
        let keep = t.add_const(neg, 1.0)?;
        m = t.mul(m, keep)?;
    }
    for &(w, _, a) in heads {
        let wa = t.outer(w, a)?;
        m = t.add(m, wa)?;
    }
    Ok(m)
}
