//! Mapping from the controller's raw interface vector to per-head
//! parameters, with activations chosen so every head-parameter invariant
//! holds by construction: beta > 0, 0 < g < 1, shift kernel normalized,
//! gamma >= 1, erase components in (0, 1).

use std::ops::Range;

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;

/// Keeps beta strictly positive after the softplus.
pub const BETA_EPS: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum HeadKind {
    Read,
    Write,
}

/// Slice boundaries of one head's pre-activation segments inside the
/// interface vector.
#[derive(Clone, Debug)]
pub struct HeadLayout {
    pub kind: HeadKind,
    pub key: Range<usize>,
    pub beta: usize,
    pub gate: usize,
    pub shift: Range<usize>,
    pub gamma: usize,
    pub erase: Option<Range<usize>>,
    pub add: Option<Range<usize>>,
}

impl HeadLayout {
    pub fn width(&self) -> usize {
        let base = self.key.len() + 3 + self.shift.len();
        match self.kind {
            HeadKind::Read => base,
            HeadKind::Write => base + self.erase.as_ref().unwrap().len() + self.add.as_ref().unwrap().len(),
        }
    }
}

/// Disjoint per-head slices exactly covering the controller interface
/// vector. Read heads come first, then write heads.
#[derive(Clone, Debug)]
pub struct InterfaceLayout {
    pub heads: Vec<HeadLayout>,
    pub width: usize,
}

impl InterfaceLayout {
    pub fn new(mem_cols: usize, shift_radius: usize, read_heads: usize, write_heads: usize) -> Self {
        let shift_len = 2 * shift_radius + 1;
        let mut heads = Vec::with_capacity(read_heads + write_heads);
        let mut off = 0usize;
        let push = |kind: HeadKind, off: &mut usize| {
            let key = *off..*off + mem_cols;
            *off += mem_cols;
            let beta = *off;
            *off += 1;
            let gate = *off;
            *off += 1;
            let shift = *off..*off + shift_len;
            *off += shift_len;
            let gamma = *off;
            *off += 1;
            let (erase, add) = if kind == HeadKind::Write {
                let e = *off..*off + mem_cols;
                *off += mem_cols;
                let a = *off..*off + mem_cols;
                *off += mem_cols;
                (Some(e), Some(a))
            } else {
                (None, None)
            };
            HeadLayout { kind, key, beta, gate, shift, gamma, erase, add }
        };
        for _ in 0..read_heads {
            heads.push(push(HeadKind::Read, &mut off));
        }
        for _ in 0..write_heads {
            heads.push(push(HeadKind::Write, &mut off));
        }
        InterfaceLayout { heads, width: off }
    }
}

/// Activated head parameters as tape nodes.
pub struct HeadParams {
    pub key: NodeId,
    pub beta: NodeId,
    pub gate: NodeId,
    pub shift: NodeId,
    pub gamma: NodeId,
    pub erase: Option<NodeId>,
    pub add: Option<NodeId>,
}

/// Squash one head's slice of the raw interface vector:
/// key identity, beta softplus + eps, gate sigmoid, shift softmax,
/// gamma 1 + softplus, erase sigmoid, add identity.
pub fn squash_head_params(t: &mut Tape, iface: NodeId, head: &HeadLayout) -> Result<HeadParams> {
    let key = t.slice(iface, head.key.start, head.key.len())?;

    let beta_raw = t.slice(iface, head.beta, 1)?;
    let beta = t.softplus(beta_raw)?;
    let beta = t.add_const(beta, BETA_EPS)?;

    let gate_raw = t.slice(iface, head.gate, 1)?;
    let gate = t.sigmoid(gate_raw)?;

    let shift_raw = t.slice(iface, head.shift.start, head.shift.len())?;
    let shift = t.softmax(shift_raw)?;

    let gamma_raw = t.slice(iface, head.gamma, 1)?;
    let gamma = t.softplus(gamma_raw)?;
    let gamma = t.add_const(gamma, 1.0)?;

    let (erase, add) = match (&head.erase, &head.add) {
        (Some(e), Some(a)) => {
            let erase_raw = t.slice(iface, e.start, e.len())?;
            let erase = t.sigmoid(erase_raw)?;
            let add = t.slice(iface, a.start, a.len())?;
            (Some(erase), Some(add))
        }
        _ => (None, None),
    };

    Ok(HeadParams { key, beta, gate, shift, gamma, erase, add })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_slices_are_disjoint_and_cover_the_vector() {
        let layout = InterfaceLayout::new(4, 1, 2, 2);
        let mut covered = vec![false; layout.width];
        let mut mark = |r: Range<usize>| {
            for i in r {
                assert!(!covered[i], "overlapping slice at {i}");
                covered[i] = true;
            }
        };
        for h in &layout.heads {
            mark(h.key.clone());
            mark(h.beta..h.beta + 1);
            mark(h.gate..h.gate + 1);
            mark(h.shift.clone());
            mark(h.gamma..h.gamma + 1);
            if let Some(e) = &h.erase {
                mark(e.clone());
            }
            if let Some(a) = &h.add {
                mark(a.clone());
            }
        }
        assert!(covered.iter().all(|&c| c));
        // read head: M + 3 + (2R+1); write head adds 2M
        assert_eq!(layout.width, 2 * (4 + 3 + 3) + 2 * (4 + 3 + 3 + 8));
    }

    #[test]
    fn zero_raw_values_hit_activation_midpoints() {
        let layout = InterfaceLayout::new(3, 1, 0, 1);
        let mut t = Tape::new();
        let raw = t.input(&vec![0.0; layout.width], &[layout.width]).unwrap();
        let hp = squash_head_params(&mut t, raw, &layout.heads[0]).unwrap();
        assert!((t.scalar(hp.gate) - 0.5).abs() < 1e-12);
        for &s in t.value(hp.shift) {
            assert!((s - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((t.scalar(hp.gamma) - (1.0 + 2.0_f64.ln())).abs() < 1e-12);
        for &e in t.value(hp.erase.unwrap()) {
            assert!((e - 0.5).abs() < 1e-12);
        }
        assert!((t.scalar(hp.beta) - (2.0_f64.ln() + BETA_EPS)).abs() < 1e-12);
    }

    #[test]
    fn saturated_gate_approaches_one() {
        let layout = InterfaceLayout::new(2, 1, 1, 0);
        let mut t = Tape::new();
        let mut raw = vec![0.0; layout.width];
        raw[layout.heads[0].gate] = 50.0;
        let raw = t.input(&raw, &[layout.width]).unwrap();
        let hp = squash_head_params(&mut t, raw, &layout.heads[0]).unwrap();
        assert!(t.scalar(hp.gate) > 1.0 - 1e-12);
    }

    proptest! {
        #[test]
        fn invariants_hold_for_random_raw_vectors(vals in proptest::collection::vec(-20.0f64..20.0, 15)) {
            // write head on a 3-column memory with radius 1: width 15
            let layout = InterfaceLayout::new(3, 1, 0, 1);
            prop_assert_eq!(layout.width, 15);
            let mut t = Tape::new();
            let raw = t.input(&vals, &[15]).unwrap();
            let hp = squash_head_params(&mut t, raw, &layout.heads[0]).unwrap();
            prop_assert!(t.scalar(hp.beta) > 0.0);
            let g = t.scalar(hp.gate);
            prop_assert!(g > 0.0 && g < 1.0);
            let s = t.value(hp.shift);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.iter().all(|&x| x >= 0.0));
            prop_assert!(t.scalar(hp.gamma) >= 1.0);
            for &e in t.value(hp.erase.unwrap()) {
                prop_assert!(e > 0.0 && e < 1.0);
            }
        }
    }
}
