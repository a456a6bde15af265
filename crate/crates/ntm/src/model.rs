//! The full machine: controller + memory matrix + parallel read and write
//! heads wired through the addressing pipeline.
//!
//! Within a timestep every head weighting is computed against the previous
//! memory; write heads then produce the new memory, and read heads read
//! from that new memory. A same-step write can therefore be read back in
//! the same step.

use rand::Rng;

use crate::addressing;
use crate::autodiff::{NodeId, ParameterStore, Tape};
use crate::controller::{uniform_init, Controller, ControllerBound, ControllerConfig, CtrlState};
use crate::error::{NtmError, Result};
use crate::heads::{squash_head_params, HeadKind, InterfaceLayout};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct NtmConfig {
    pub input_width: usize,
    pub output_width: usize,
    pub mem_rows: usize,
    pub mem_cols: usize,
    pub read_heads: usize,
    pub write_heads: usize,
    pub shift_radius: usize,
    pub controller: ControllerConfig,
}

impl NtmConfig {
    fn validate(&self) -> Result<()> {
        if self.mem_rows == 0 || self.mem_cols == 0 {
            return Err(NtmError::Config("memory must be non-empty".to_string()));
        }
        if self.read_heads == 0 || self.write_heads == 0 {
            return Err(NtmError::Config("need at least one read and one write head".to_string()));
        }
        if 2 * self.shift_radius + 1 > self.mem_rows {
            return Err(NtmError::Config("shift kernel wider than memory".to_string()));
        }
        Ok(())
    }
}

/// Dynamic state carried between steps. `adds` holds the add vectors of
/// the step that produced this state, for diagnostics.
#[derive(Clone)]
pub struct NtmState {
    pub memory: NodeId,
    /// One weighting per head, read heads first.
    pub weightings: Vec<NodeId>,
    pub reads: Vec<NodeId>,
    pub ctrl: CtrlState,
    pub adds: Vec<NodeId>,
}

pub struct NtmBound {
    ctrl: ControllerBound,
    w_iface: NodeId,
    b_iface: NodeId,
    w_out: NodeId,
    b_out: NodeId,
}

#[derive(Clone, Debug)]
pub struct Ntm {
    pub cfg: NtmConfig,
    pub layout: InterfaceLayout,
    pub ctrl: Controller,
}

impl Ntm {
    pub fn new(cfg: NtmConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = InterfaceLayout::new(cfg.mem_cols, cfg.shift_radius, cfg.read_heads, cfg.write_heads);
        let ctrl_input = cfg.input_width + cfg.read_heads * cfg.mem_cols;
        let ctrl = Controller::new(&cfg.controller, "ctrl", ctrl_input)?;
        Ok(Ntm { cfg, layout, ctrl })
    }

    pub fn heads(&self) -> usize {
        self.cfg.read_heads + self.cfg.write_heads
    }

    pub fn register<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.ctrl.register(store, rng)?;
        let h = self.ctrl.output_width();
        let iface = self.layout.width;
        store.register("iface.w", &[iface, h], uniform_init(rng, iface * h, h))?;
        store.register("iface.b", &[iface], vec![0.0; iface])?;

        let out_in = h + self.cfg.read_heads * self.cfg.mem_cols;
        store.register(
            "out.w",
            &[self.cfg.output_width, out_in],
            uniform_init(rng, self.cfg.output_width * out_in, out_in),
        )?;
        store.register("out.b", &[self.cfg.output_width], vec![0.0; self.cfg.output_width])?;

        // memory starts near zero so early content lookups stay diffuse
        let n = self.cfg.mem_rows;
        let m = self.cfg.mem_cols;
        store.register("init.memory", &[n, m], vec![1e-6; n * m])?;
        for head in 0..self.heads() {
            store.register(
                &format!("init.w{head}"),
                &[n],
                uniform_init(rng, n, 1),
            )?;
        }
        for head in 0..self.cfg.read_heads {
            store.register(
                &format!("init.r{head}"),
                &[m],
                uniform_init(rng, m, 1),
            )?;
        }
        Ok(())
    }

    pub fn bind(&self, t: &mut Tape, store: &ParameterStore) -> Result<NtmBound> {
        Ok(NtmBound {
            ctrl: self.ctrl.bind(t, store)?,
            w_iface: t.param(store, "iface.w")?,
            b_iface: t.param(store, "iface.b")?,
            w_out: t.param(store, "out.w")?,
            b_out: t.param(store, "out.b")?,
        })
    }

    /// Episode reset: memory, weightings, reads, and controller state all
    /// come from learned bias parameters.
    pub fn initial_state(&self, t: &mut Tape, store: &ParameterStore) -> Result<NtmState> {
        let mem_bias = t.param(store, "init.memory")?;
        let memory = t.tanh(mem_bias)?;
        let mut weightings = Vec::with_capacity(self.heads());
        for head in 0..self.heads() {
            let bias = t.param(store, &format!("init.w{head}"))?;
            weightings.push(t.softmax(bias)?);
        }
        let mut reads = Vec::with_capacity(self.cfg.read_heads);
        for head in 0..self.cfg.read_heads {
            reads.push(t.param(store, &format!("init.r{head}"))?);
        }
        let ctrl = self.ctrl.init_state(t, store)?;
        Ok(NtmState { memory, weightings, reads, ctrl, adds: Vec::new() })
    }

    /// One update cycle. Returns the new state and the external output
    /// pre-activations.
    pub fn step(
        &self,
        t: &mut Tape,
        bound: &NtmBound,
        state: &NtmState,
        x: &[f64],
    ) -> Result<(NtmState, NodeId)> {
        if x.len() != self.cfg.input_width {
            return Err(NtmError::Shape {
                op: "ntm-step",
                detail: format!("input width {} vs configured {}", x.len(), self.cfg.input_width),
            });
        }
        let x_node = t.input(x, &[self.cfg.input_width])?;
        let mut aug = vec![x_node];
        aug.extend_from_slice(&state.reads);
        let x_aug = t.concat(&aug)?;

        let (hidden, ctrl_state) = self.ctrl.step(t, &bound.ctrl, x_aug, &state.ctrl)?;
        let iface = t.matvec(bound.w_iface, hidden)?;
        let iface = t.add(iface, bound.b_iface)?;

        // all head weightings address the previous memory
        let mut weightings = Vec::with_capacity(self.heads());
        let mut write_ops = Vec::with_capacity(self.cfg.write_heads);
        for (idx, head) in self.layout.heads.iter().enumerate() {
            let hp = squash_head_params(t, iface, head)?;
            let w_c = addressing::content_weighting(t, state.memory, hp.key, hp.beta)?;
            let w_g = addressing::interpolate(t, w_c, state.weightings[idx], hp.gate)?;
            let w_s = addressing::shift(t, w_g, hp.shift, self.cfg.shift_radius)?;
            let w = addressing::sharpen(t, w_s, hp.gamma)?;
            weightings.push(w);
            if head.kind == HeadKind::Write {
                write_ops.push((w, hp.erase.unwrap(), hp.add.unwrap()));
            }
        }

        // writes resolve before reads; reads see the new memory
        let memory = addressing::write(t, state.memory, &write_ops)?;
        let mut reads = Vec::with_capacity(self.cfg.read_heads);
        for w in weightings.iter().take(self.cfg.read_heads) {
            reads.push(addressing::read(t, memory, *w)?);
        }

        let mut out_parts = vec![hidden];
        out_parts.extend_from_slice(&reads);
        let out_in = t.concat(&out_parts)?;
        let y = t.matvec(bound.w_out, out_in)?;
        let y = t.add(y, bound.b_out)?;

        Ok((
            NtmState {
                memory,
                weightings,
                reads,
                ctrl: ctrl_state,
                adds: write_ops.iter().map(|&(_, _, a)| a).collect(),
            },
            y,
        ))
    }

    /// Weighting node ids of the read heads (first) and write heads (rest).
    pub fn read_weightings<'a>(&self, state: &'a NtmState) -> &'a [NodeId] {
        &state.weightings[..self.cfg.read_heads]
    }

    pub fn write_weightings<'a>(&self, state: &'a NtmState) -> &'a [NodeId] {
        &state.weightings[self.cfg.read_heads..]
    }
}
