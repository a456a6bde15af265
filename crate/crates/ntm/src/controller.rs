//! Controller networks: a stateless feedforward stack and a stacked LSTM
//! with learned initial-state biases, plus the pure-LSTM baseline model
//! that has no external memory.

use rand::Rng;

use crate::autodiff::{NodeId, ParameterStore, Tape};
use crate::error::{NtmError, Result};

/// Uniform init in [-0.1/sqrt(fan_in), +0.1/sqrt(fan_in)].
pub fn uniform_init<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 0.1 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Feedforward,
    Lstm,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Hidden layer sizes, bottom to top.
    pub sizes: Vec<usize>,
}

/// Per-layer parameter nodes bound onto a tape for one episode.
pub enum ControllerBound {
    /// (weight, bias) per layer.
    Feedforward(Vec<(NodeId, NodeId)>),
    Lstm(Vec<LstmLayerBound>),
}

pub struct LstmLayerBound {
    pub wx: NodeId,
    pub wh: NodeId,
    pub bias: NodeId,
}

/// Controller-owned recurrent state. Stateless for feedforward.
#[derive(Clone)]
pub enum CtrlState {
    Stateless,
    /// (hidden, cell) per layer.
    Lstm(Vec<(NodeId, NodeId)>),
}

#[derive(Clone, Debug)]
pub struct Controller {
    pub kind: ControllerKind,
    pub prefix: String,
    pub input_width: usize,
    pub sizes: Vec<usize>,
}

impl Controller {
    pub fn new(cfg: &ControllerConfig, prefix: &str, input_width: usize) -> Result<Self> {
        if cfg.sizes.is_empty() {
            return Err(NtmError::Config("controller needs at least one layer".to_string()));
        }
        Ok(Controller {
            kind: cfg.kind,
            prefix: prefix.to_string(),
            input_width,
            sizes: cfg.sizes.clone(),
        })
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_width
        } else {
            self.sizes[layer - 1]
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        match self.kind {
            ControllerKind::Feedforward => {
                for (l, &h) in self.sizes.iter().enumerate() {
                    let fan_in = self.layer_input(l);
                    store.register(
                        &format!("{}.ff{l}.w", self.prefix),
                        &[h, fan_in],
                        uniform_init(rng, h * fan_in, fan_in),
                    )?;
                    store.register(&format!("{}.ff{l}.b", self.prefix), &[h], vec![0.0; h])?;
                }
            }
            ControllerKind::Lstm => {
                for (l, &h) in self.sizes.iter().enumerate() {
                    let fan_in = self.layer_input(l);
                    store.register(
                        &format!("{}.lstm{l}.wx", self.prefix),
                        &[4 * h, fan_in],
                        uniform_init(rng, 4 * h * fan_in, fan_in),
                    )?;
                    store.register(
                        &format!("{}.lstm{l}.wh", self.prefix),
                        &[4 * h, h],
                        uniform_init(rng, 4 * h * h, h),
                    )?;
                    // gate order i, f, c, o; forget bias starts at +1
                    let mut bias = vec![0.0; 4 * h];
                    for b in bias.iter_mut().take(2 * h).skip(h) {
                        *b = 1.0;
                    }
                    store.register(&format!("{}.lstm{l}.b", self.prefix), &[4 * h], bias)?;
                    store.register(&format!("{}.lstm{l}.h0", self.prefix), &[h], vec![0.0; h])?;
                    store.register(&format!("{}.lstm{l}.c0", self.prefix), &[h], vec![0.0; h])?;
                }
            }
        }
        Ok(())
    }

    pub fn bind(&self, t: &mut Tape, store: &ParameterStore) -> Result<ControllerBound> {
        match self.kind {
            ControllerKind::Feedforward => {
                let mut layers = Vec::with_capacity(self.sizes.len());
                for l in 0..self.sizes.len() {
                    let w = t.param(store, &format!("{}.ff{l}.w", self.prefix))?;
                    let b = t.param(store, &format!("{}.ff{l}.b", self.prefix))?;
                    layers.push((w, b));
                }
                Ok(ControllerBound::Feedforward(layers))
            }
            ControllerKind::Lstm => {
                let mut layers = Vec::with_capacity(self.sizes.len());
                for l in 0..self.sizes.len() {
                    layers.push(LstmLayerBound {
                        wx: t.param(store, &format!("{}.lstm{l}.wx", self.prefix))?,
                        wh: t.param(store, &format!("{}.lstm{l}.wh", self.prefix))?,
                        bias: t.param(store, &format!("{}.lstm{l}.b", self.prefix))?,
                    });
                }
                Ok(ControllerBound::Lstm(layers))
            }
        }
    }

    /// Initial state from learned bias parameters.
    pub fn init_state(&self, t: &mut Tape, store: &ParameterStore) -> Result<CtrlState> {
        match self.kind {
            ControllerKind::Feedforward => Ok(CtrlState::Stateless),
            ControllerKind::Lstm => {
                let mut layers = Vec::with_capacity(self.sizes.len());
                for l in 0..self.sizes.len() {
                    let h0 = t.param(store, &format!("{}.lstm{l}.h0", self.prefix))?;
                    let c0 = t.param(store, &format!("{}.lstm{l}.c0", self.prefix))?;
                    layers.push((h0, c0));
                }
                Ok(CtrlState::Lstm(layers))
            }
        }
    }

    /// One controller step over the augmented input. Returns the top-layer
    /// activation and the new state (unchanged for feedforward).
    pub fn step(
        &self,
        t: &mut Tape,
        bound: &ControllerBound,
        x: NodeId,
        state: &CtrlState,
    ) -> Result<(NodeId, CtrlState)> {
        if t.shape(x) != [self.input_width] {
            return Err(NtmError::Shape {
                op: "controller-step",
                detail: format!("input {:?}, expected [{}]", t.shape(x), self.input_width),
            });
        }
        match (bound, state) {
            (ControllerBound::Feedforward(layers), CtrlState::Stateless) => {
                let mut h = x;
                for &(w, b) in layers {
                    let z = t.matvec(w, h)?;
                    let z = t.add(z, b)?;
                    h = t.tanh(z)?;
                }
                Ok((h, CtrlState::Stateless))
            }
            (ControllerBound::Lstm(layers), CtrlState::Lstm(states)) => {
                let mut input = x;
                let mut new_states = Vec::with_capacity(layers.len());
                for (layer, &(h_prev, c_prev)) in layers.iter().zip(states) {
                    let (h, c) = lstm_cell(t, layer, input, h_prev, c_prev)?;
                    new_states.push((h, c));
                    input = h;
                }
                Ok((input, CtrlState::Lstm(new_states)))
            }
            _ => Err(NtmError::Config("controller bound/state kind mismatch".to_string())),
        }
    }
}

/// Standard LSTM cell, gate order i, f, c, o. No peepholes.
fn lstm_cell(
    t: &mut Tape,
    layer: &LstmLayerBound,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let h_size = t.shape(h_prev)[0];
    let zx = t.matvec(layer.wx, x)?;
    let zh = t.matvec(layer.wh, h_prev)?;
    let z = t.add(zx, zh)?;
    let z = t.add(z, layer.bias)?;

    let i_raw = t.slice(z, 0, h_size)?;
    let f_raw = t.slice(z, h_size, h_size)?;
    let c_raw = t.slice(z, 2 * h_size, h_size)?;
    let o_raw = t.slice(z, 3 * h_size, h_size)?;

    let i = t.sigmoid(i_raw)?;
    let f = t.sigmoid(f_raw)?;
    let c_cand = t.tanh(c_raw)?;
    let o = t.sigmoid(o_raw)?;

    let keep = t.mul(f, c_prev)?;
    let gain = t.mul(i, c_cand)?;
    let c = t.add(keep, gain)?;
    let c_act = t.tanh(c)?;
    let h = t.mul(o, c_act)?;
    Ok((h, c))
}

/// Stacked LSTM followed by an affine output layer: the memory-free
/// baseline architecture.
#[derive(Clone, Debug)]
pub struct LstmBaseline {
    pub ctrl: Controller,
    pub input_width: usize,
    pub output_width: usize,
}

pub struct LstmBaselineBound {
    ctrl: ControllerBound,
    w_out: NodeId,
    b_out: NodeId,
}

impl LstmBaseline {
    pub fn new(input_width: usize, output_width: usize, sizes: Vec<usize>) -> Result<Self> {
        let ctrl = Controller::new(
            &ControllerConfig { kind: ControllerKind::Lstm, sizes },
            "lstm",
            input_width,
        )?;
        Ok(LstmBaseline { ctrl, input_width, output_width })
    }

    pub fn register<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.ctrl.register(store, rng)?;
        let h = self.ctrl.output_width();
        store.register(
            "out.w",
            &[self.output_width, h],
            uniform_init(rng, self.output_width * h, h),
        )?;
        store.register("out.b", &[self.output_width], vec![0.0; self.output_width])?;
        Ok(())
    }

    pub fn begin(&self, t: &mut Tape, store: &ParameterStore) -> Result<(LstmBaselineBound, CtrlState)> {
        let bound = LstmBaselineBound {
            ctrl: self.ctrl.bind(t, store)?,
            w_out: t.param(store, "out.w")?,
            b_out: t.param(store, "out.b")?,
        };
        let state = self.ctrl.init_state(t, store)?;
        Ok((bound, state))
    }

    /// One step; returns output pre-activations (logits).
    pub fn step(
        &self,
        t: &mut Tape,
        bound: &LstmBaselineBound,
        x: &[f64],
        state: &CtrlState,
    ) -> Result<(NodeId, CtrlState)> {
        let x = t.input(x, &[self.input_width])?;
        let (h, state) = self.ctrl.step(t, &bound.ctrl, x, state)?;
        let y = t.matvec(bound.w_out, h)?;
        let y = t.add(y, bound.b_out)?;
        Ok((y, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ff_controller() -> (Controller, ParameterStore) {
        let ctrl = Controller::new(
            &ControllerConfig { kind: ControllerKind::Feedforward, sizes: vec![6, 5] },
            "ctrl",
            4,
        )
        .unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ctrl.register(&mut store, &mut rng).unwrap();
        (ctrl, store)
    }

    #[test]
    fn feedforward_is_stateless() {
        let (ctrl, store) = ff_controller();
        let mut t = Tape::new();
        let bound = ctrl.bind(&mut t, &store).unwrap();
        let state = ctrl.init_state(&mut t, &store).unwrap();
        let x = t.input(&[0.1, -0.2, 0.3, 0.5], &[4]).unwrap();
        let (h1, state) = ctrl.step(&mut t, &bound, x, &state).unwrap();
        let (h2, _) = ctrl.step(&mut t, &bound, x, &state).unwrap();
        assert_eq!(t.value(h1), t.value(h2));
    }

    #[test]
    fn saturated_forget_and_closed_input_keeps_cell_constant() {
        let ctrl = Controller::new(
            &ControllerConfig { kind: ControllerKind::Lstm, sizes: vec![3] },
            "ctrl",
            2,
        )
        .unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ctrl.register(&mut store, &mut rng).unwrap();
        // zero the weights, pin forget gate on and input gate off via bias
        for name in ["ctrl.lstm0.wx", "ctrl.lstm0.wh"] {
            store.entry_mut(name).unwrap().value.iter_mut().for_each(|v| *v = 0.0);
        }
        {
            let b = &mut store.entry_mut("ctrl.lstm0.b").unwrap().value;
            for i in 0..3 {
                b[i] = -50.0; // input gate ~ 0
                b[3 + i] = 50.0; // forget gate ~ 1
            }
        }
        store.entry_mut("ctrl.lstm0.c0").unwrap().value.copy_from_slice(&[0.4, -0.7, 1.1]);

        let mut t = Tape::new();
        let bound = ctrl.bind(&mut t, &store).unwrap();
        let mut state = ctrl.init_state(&mut t, &store).unwrap();
        for step in 0..5 {
            let x = t.input(&[step as f64, 1.0], &[2]).unwrap();
            let (_, next) = ctrl.step(&mut t, &bound, x, &state).unwrap();
            state = next;
        }
        let CtrlState::Lstm(layers) = &state else { panic!() };
        let c = t.value(layers[0].1);
        for (got, want) in c.iter().zip(&[0.4, -0.7, 1.1]) {
            assert!((got - want).abs() < 1e-9, "cell drifted: {got} vs {want}");
        }
    }

    #[test]
    fn gradcheck_three_stacked_lstm_steps() {
        let ctrl = Controller::new(
            &ControllerConfig { kind: ControllerKind::Lstm, sizes: vec![4, 3, 3] },
            "ctrl",
            2,
        )
        .unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        ctrl.register(&mut store, &mut rng).unwrap();
        let xs = [[0.3, -0.5], [0.8, 0.1], [-0.2, 0.6]];
        let report = gradient_check(
            |t, s| {
                let bound = ctrl.bind(t, s)?;
                let mut state = ctrl.init_state(t, s)?;
                let mut last = None;
                for x in &xs {
                    let xn = t.input(x, &[2])?;
                    let (h, next) = ctrl.step(t, &bound, xn, &state)?;
                    state = next;
                    last = Some(h);
                }
                let h = last.unwrap();
                let sq = t.mul(h, h)?;
                t.sum(sq)
            },
            &mut store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "max_rel_err = {}", report.max_rel_err);
    }

    #[test]
    fn pinned_gates_preserve_input_sensitivity_over_time() {
        // With forget gates pinned to 1 and the other gates fixed, the
        // gradient of the final state w.r.t. the first input must not decay
        // with sequence length (checked at T=5 vs T=50, within a factor 2).
        let grad_at_t = |steps: usize| -> f64 {
            let ctrl = Controller::new(
                &ControllerConfig { kind: ControllerKind::Lstm, sizes: vec![2] },
                "ctrl",
                1,
            )
            .unwrap();
            let mut store = ParameterStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            ctrl.register(&mut store, &mut rng).unwrap();
            store.entry_mut("ctrl.lstm0.wh").unwrap().value.iter_mut().for_each(|v| *v = 0.0);
            {
                let wx = &mut store.entry_mut("ctrl.lstm0.wx").unwrap().value;
                wx.iter_mut().for_each(|v| *v = 0.0);
                wx[2 * 2] = 1.0; // cell candidate of unit 0 listens to the input
                wx[2 * 2 + 1] = 0.0;
            }
            {
                let b = &mut store.entry_mut("ctrl.lstm0.b").unwrap().value;
                b[0] = 0.0;
                b[1] = 0.0; // input gates fixed at 0.5
                b[2] = 50.0;
                b[3] = 50.0; // forget gates pinned at 1
                b[6] = 0.0;
                b[7] = 0.0; // output gates fixed at 0.5
            }
            store.register("x_first", &[1], vec![0.1]).unwrap();

            store.zero_grads();
            let mut t = Tape::new();
            let bound = ctrl.bind(&mut t, &store).unwrap();
            let mut state = ctrl.init_state(&mut t, &store).unwrap();
            let x0 = t.param(&store, "x_first").unwrap();
            let (_, next) = ctrl.step(&mut t, &bound, x0, &state).unwrap();
            state = next;
            let mut last = None;
            for _ in 1..steps {
                let x = t.input(&[0.0], &[1]).unwrap();
                let (h, next) = ctrl.step(&mut t, &bound, x, &state).unwrap();
                state = next;
                last = Some(h);
            }
            let loss = t.sum(last.unwrap()).unwrap();
            t.backward(loss, &mut store).unwrap();
            store.entry("x_first").unwrap().grad[0].abs()
        };
        let g5 = grad_at_t(5);
        let g50 = grad_at_t(50);
        assert!(g5 > 0.0 && g50 > 0.0);
        let ratio = g5 / g50;
        assert!(ratio < 2.0 && ratio > 0.5, "sensitivity decayed: {g5} vs {g50}");
    }

    #[test]
    fn baseline_resets_to_learned_biases() {
        let model = LstmBaseline::new(3, 2, vec![4, 4, 4]).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        model.register(&mut store, &mut rng).unwrap();
        store.entry_mut("lstm.lstm0.h0").unwrap().value.copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);

        let mut t = Tape::new();
        let (_, state) = model.begin(&mut t, &store).unwrap();
        let CtrlState::Lstm(layers) = &state else { panic!() };
        assert_eq!(t.value(layers[0].0), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn zero_weight_baseline_emits_constant_output() {
        let model = LstmBaseline::new(2, 3, vec![4]).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        model.register(&mut store, &mut rng).unwrap();
        for (_, e) in store.iter_mut() {
            e.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::new();
        let (bound, mut state) = model.begin(&mut t, &store).unwrap();
        let mut outputs = Vec::new();
        for step in 0..4 {
            let x = [step as f64, -(step as f64)];
            let (y, next) = model.step(&mut t, &bound, &x, &state).unwrap();
            state = next;
            outputs.push(t.value(y).to_vec());
        }
        for o in &outputs[1..] {
            assert_eq!(o, &outputs[0]);
        }
    }

    #[test]
    fn gradcheck_baseline_five_steps() {
        let model = LstmBaseline::new(2, 2, vec![3]).unwrap();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        model.register(&mut store, &mut rng).unwrap();
        let xs: Vec<[f64; 2]> = (0..5).map(|i| [(i as f64) * 0.2 - 0.4, 0.3]).collect();
        let targets = [1.0, 0.0];
        let report = gradient_check(
            |t, s| {
                let (bound, mut state) = model.begin(t, s)?;
                let mut loss = None;
                for x in &xs {
                    let (y, next) = model.step(t, &bound, x, &state)?;
                    state = next;
                    let l = t.sigmoid_cross_entropy(y, &targets, &[1.0, 1.0])?;
                    loss = Some(match loss {
                        None => l,
                        Some(acc) => t.add(acc, l)?,
                    });
                }
                Ok(loss.unwrap())
            },
            &mut store,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "max_rel_err = {}", report.max_rel_err);
    }
}
