//! Convolutional LSTM and GRU cells, and the template encoder obtained by severing
//! the LSTM's recurrence.
//!
//! Cell weights live in a [`ParamSet`] under a prefix (`convlstm.w_xi`, ...). The step
//! functions and the template encoder resolve the same names, so they always read the
//! same storage.

use rand::Rng;

use crate::autodiff::{Binder, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!("model.cell: unknown cell type {other:?} (lstm|gru)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }
}

const LSTM_GATES: [(&str, &str, &str); 4] =
    [("w_xi", "w_hi", "b_i"), ("w_xf", "w_hf", "b_f"), ("w_xc", "w_hc", "b_c"), ("w_xo", "w_ho", "b_o")];
const GRU_GATES: [(&str, &str, &str); 3] = [("w_xz", "w_hz", "b_z"), ("w_xr", "w_hr", "b_r"), ("w_xh", "w_hh", "b_h")];

/// One recurrent layer: its shape and where its weights live.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSpec {
    pub kind: CellKind,
    pub prefix: String,
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    /// Reads the cell-candidate recurrent term as `w_hc ∘ h` with `w_hc: [Ch, H, W]`
    /// instead of a convolution. Only meaningful for LSTM cells.
    pub hc_hadamard: Option<(usize, usize)>,
}

/// Recurrent state on a tape. `c` is only present for LSTM cells.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

impl CellSpec {
    pub fn new(kind: CellKind, prefix: impl Into<String>, in_channels: usize, hidden_channels: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("model.k: cell kernel must be odd, got {kernel}")));
        }
        if in_channels == 0 || hidden_channels == 0 {
            return Err(Error::Config("cell channels must be positive".into()));
        }
        Ok(CellSpec { kind, prefix: prefix.into(), in_channels, hidden_channels, kernel, hc_hadamard: None })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    fn gates(&self) -> &'static [(&'static str, &'static str, &'static str)] {
        match self.kind {
            CellKind::Lstm => &LSTM_GATES,
            CellKind::Gru => &GRU_GATES,
        }
    }

    /// Every parameter name this cell owns.
    pub fn param_names(&self) -> Vec<String> {
        self.gates()
            .iter()
            .flat_map(|(wx, wh, b)| [self.name(wx), self.name(wh), self.name(b)])
            .collect()
    }

    /// Uniform `[-s, s]` weights with `s = 1/sqrt(fan_in)`; zero biases.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        let (ch, cx, k) = (self.hidden_channels, self.in_channels, self.kernel);
        for (wx, wh, b) in self.gates() {
            params.insert(self.name(wx), uniform(&[ch, cx, k, k], cx * k * k, rng))?;
            let wh_tensor = match (self.kind, *wh, self.hc_hadamard) {
                (CellKind::Lstm, "w_hc", Some((h, w))) => uniform(&[ch, h, w], 1, rng),
                _ => uniform(&[ch, ch, k, k], ch * k * k, rng),
            };
            params.insert(self.name(wh), wh_tensor)?;
            params.insert(self.name(b), Tensor::zeros(&[ch]))?;
        }
        Ok(())
    }

    fn input_term<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, wx: &str, bias: &str) -> Result<Var> {
        let w = b.var(tape, &self.name(wx))?;
        let bv = b.var(tape, &self.name(bias))?;
        tape.conv2d(x, w, Some(bv), 1, self.kernel / 2)
    }

    fn recurrent_term<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, h: Var, wh: &str) -> Result<Var> {
        let w = b.var(tape, &self.name(wh))?;
        if wh == "w_hc" && self.hc_hadamard.is_some() {
            return tape.mul(w, h);
        }
        tape.conv2d(h, w, None, 1, self.kernel / 2)
    }

    /// `σ(w_x*x + w_h*h + b)` or, without `h`, `σ(w_x*x + b)`.
    fn gate<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, h: Option<Var>, names: (&str, &str, &str)) -> Result<Var> {
        let pre = self.pre_activation(tape, b, x, h, names)?;
        Ok(tape.sigmoid(pre))
    }

    fn pre_activation<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, h: Option<Var>, (wx, wh, bias): (&str, &str, &str)) -> Result<Var> {
        let xt = self.input_term(tape, b, x, wx, bias)?;
        match h {
            Some(h) => {
                let ht = self.recurrent_term(tape, b, h, wh)?;
                tape.add(xt, ht)
            }
            None => Ok(xt),
        }
    }

    pub fn zero_state(&self, tape: &mut Tape<'_>, height: usize, width: usize) -> CellState {
        let dims = [self.hidden_channels, height, width];
        let h = tape.leaf(Tensor::zeros(&dims));
        let c = match self.kind {
            CellKind::Lstm => Some(tape.leaf(Tensor::zeros(&dims))),
            CellKind::Gru => None,
        };
        CellState { h, c }
    }

    fn check_input(&self, tape: &Tape<'_>, x: Var, prev: Option<&CellState>) -> Result<()> {
        let (cx, h, w) = tape.value(x).chw()?;
        if cx != self.in_channels {
            return Err(Error::shape(format!(
                "{}: input has {cx} channels, cell expects {}",
                self.prefix, self.in_channels
            )));
        }
        if let Some(prev) = prev {
            let hd = tape.value(prev.h).dims();
            if hd != [self.hidden_channels, h, w] {
                return Err(Error::shape(format!(
                    "{}: state dims {hd:?} do not match input spatial extent {h}x{w} with {} channels",
                    self.prefix, self.hidden_channels
                )));
            }
        }
        Ok(())
    }

    /// One recurrent step; returns the new state (whose `h` is the layer output).
    pub fn step<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, prev: &CellState) -> Result<CellState> {
        self.check_input(tape, x, Some(prev))?;
        match self.kind {
            CellKind::Lstm => {
                let c_prev = prev.c.ok_or_else(|| Error::Contract("LSTM state without a cell map".into()))?;
                let i = self.gate(tape, b, x, Some(prev.h), LSTM_GATES[0])?;
                let f = self.gate(tape, b, x, Some(prev.h), LSTM_GATES[1])?;
                let cand_pre = self.pre_activation(tape, b, x, Some(prev.h), LSTM_GATES[2])?;
                let cand = tape.tanh(cand_pre);
                let o = self.gate(tape, b, x, Some(prev.h), LSTM_GATES[3])?;
                let keep = tape.mul(f, c_prev)?;
                let write = tape.mul(i, cand)?;
                let c = tape.add(keep, write)?;
                let tc = tape.tanh(c);
                let h = tape.mul(o, tc)?;
                Ok(CellState { h, c: Some(c) })
            }
            CellKind::Gru => {
                let z = self.gate(tape, b, x, Some(prev.h), GRU_GATES[0])?;
                let r = self.gate(tape, b, x, Some(prev.h), GRU_GATES[1])?;
                let rh = tape.mul(r, prev.h)?;
                let cand_pre = self.pre_activation(tape, b, x, Some(rh), GRU_GATES[2])?;
                let cand = tape.tanh(cand_pre);
                let keep = tape.mul(z, prev.h)?;
                let one_minus_z = tape.one_minus(z);
                let write = tape.mul(one_minus_z, cand)?;
                let h = tape.add(keep, write)?;
                Ok(CellState { h, c: None })
            }
        }
    }

    /// The cell with its recurrence severed: zero previous state and, for LSTM, a
    /// forget gate forced to zero. Shares every weight with [`CellSpec::step`].
    pub fn encode<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, x: Var) -> Result<Var> {
        self.check_input(tape, x, None)?;
        match self.kind {
            CellKind::Lstm => {
                let i = self.gate(tape, b, x, None, LSTM_GATES[0])?;
                let cand_pre = self.pre_activation(tape, b, x, None, LSTM_GATES[2])?;
                let cand = tape.tanh(cand_pre);
                let c = tape.mul(i, cand)?;
                let o = self.gate(tape, b, x, None, LSTM_GATES[3])?;
                let tc = tape.tanh(c);
                tape.mul(o, tc)
            }
            CellKind::Gru => {
                let z = self.gate(tape, b, x, None, GRU_GATES[0])?;
                let cand_pre = self.pre_activation(tape, b, x, None, GRU_GATES[2])?;
                let cand = tape.tanh(cand_pre);
                let one_minus_z = tape.one_minus(z);
                tape.mul(one_minus_z, cand)
            }
        }
    }
}

pub(crate) fn uniform(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.random_range(-s..=s))
}

/// A stack of recurrent layers; layer 0 reads the backbone features.
#[derive(Clone, Debug, PartialEq)]
pub struct CellStack {
    pub layers: Vec<CellSpec>,
}

impl CellStack {
    pub fn new(kind: CellKind, in_channels: usize, hidden_channels: usize, kernel: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("model.depth must be at least 1".into()));
        }
        let base = match kind {
            CellKind::Lstm => "convlstm",
            CellKind::Gru => "convgru",
        };
        let layers = (0..depth)
            .map(|l| {
                let prefix = if l == 0 { base.to_string() } else { format!("{base}.{l}") };
                let cin = if l == 0 { in_channels } else { hidden_channels };
                CellSpec::new(kind, prefix, cin, hidden_channels, kernel)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CellStack { layers })
    }

    pub fn hidden_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden_channels)
    }

    pub fn init_params(&self, params: &mut ParamSet, rng: &mut impl Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init_params(params, rng))
    }

    pub fn zero_state(&self, tape: &mut Tape<'_>, height: usize, width: usize) -> Vec<CellState> {
        self.layers.iter().map(|l| l.zero_state(tape, height, width)).collect()
    }

    pub fn step<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, x: Var, prev: &[CellState]) -> Result<Vec<CellState>> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, state) in self.layers.iter().zip(prev) {
            let s = layer.step(tape, b, input, state)?;
            input = s.h;
            next.push(s);
        }
        Ok(next)
    }

    pub fn encode<'p>(&self, tape: &mut Tape<'p>, b: &mut Binder<'p>, x: Var) -> Result<Var> {
        let mut input = x;
        for layer in &self.layers {
            input = layer.encode(tape, b, input)?;
        }
        Ok(input)
    }
}

/// Weights of a single ConvLSTM layer as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmWeights {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub b_f: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub b_c: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub b_o: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGruWeights {
    pub w_xz: Tensor,
    pub w_hz: Tensor,
    pub b_z: Tensor,
    pub w_xr: Tensor,
    pub w_hr: Tensor,
    pub b_r: Tensor,
    pub w_xh: Tensor,
    pub w_hh: Tensor,
    pub b_h: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ConvLstmState {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ConvLstmState { h: Tensor::zeros(&[channels, height, width]), c: Tensor::zeros(&[channels, height, width]) }
    }
}

fn kernel_dims(w: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *w.dims() {
        [ch, cx, k, k2] if k == k2 => Ok((ch, cx, k)),
        _ => Err(Error::shape(format!("{what} must be [Ch,Cx,k,k], got {:?}", w.dims()))),
    }
}

impl ConvLstmWeights {
    pub fn spec(&self) -> Result<CellSpec> {
        let (ch, cx, k) = kernel_dims(&self.w_xi, "w_xi")?;
        CellSpec::new(CellKind::Lstm, "convlstm", cx, ch, k)
    }

    pub fn to_params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        let fields = [
            ("w_xi", &self.w_xi), ("w_hi", &self.w_hi), ("b_i", &self.b_i),
            ("w_xf", &self.w_xf), ("w_hf", &self.w_hf), ("b_f", &self.b_f),
            ("w_xc", &self.w_xc), ("w_hc", &self.w_hc), ("b_c", &self.b_c),
            ("w_xo", &self.w_xo), ("w_ho", &self.w_ho), ("b_o", &self.b_o),
        ];
        for (n, t) in fields {
            p.insert(format!("convlstm.{n}"), t.clone())?;
        }
        Ok(p)
    }

    /// All-zero weights for `cx` input and `ch` hidden channels.
    pub fn zeros(cx: usize, ch: usize, k: usize) -> Self {
        let wx = || Tensor::zeros(&[ch, cx, k, k]);
        let wh = || Tensor::zeros(&[ch, ch, k, k]);
        let b = || Tensor::zeros(&[ch]);
        ConvLstmWeights {
            w_xi: wx(), w_hi: wh(), b_i: b(),
            w_xf: wx(), w_hf: wh(), b_f: b(),
            w_xc: wx(), w_hc: wh(), b_c: b(),
            w_xo: wx(), w_ho: wh(), b_o: b(),
        }
    }
}

impl ConvGruWeights {
    pub fn spec(&self) -> Result<CellSpec> {
        let (ch, cx, k) = kernel_dims(&self.w_xz, "w_xz")?;
        CellSpec::new(CellKind::Gru, "convgru", cx, ch, k)
    }

    pub fn to_params(&self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        let fields = [
            ("w_xz", &self.w_xz), ("w_hz", &self.w_hz), ("b_z", &self.b_z),
            ("w_xr", &self.w_xr), ("w_hr", &self.w_hr), ("b_r", &self.b_r),
            ("w_xh", &self.w_xh), ("w_hh", &self.w_hh), ("b_h", &self.b_h),
        ];
        for (n, t) in fields {
            p.insert(format!("convgru.{n}"), t.clone())?;
        }
        Ok(p)
    }

    pub fn zeros(cx: usize, ch: usize, k: usize) -> Self {
        let wx = || Tensor::zeros(&[ch, cx, k, k]);
        let wh = || Tensor::zeros(&[ch, ch, k, k]);
        let b = || Tensor::zeros(&[ch]);
        ConvGruWeights {
            w_xz: wx(), w_hz: wh(), b_z: b(),
            w_xr: wx(), w_hr: wh(), b_r: b(),
            w_xh: wx(), w_hh: wh(), b_h: b(),
        }
    }
}

/// One ConvLSTM step on plain tensors. Returns `h_t` and the next state.
pub fn conv_lstm_step(x: &Tensor, prev: &ConvLstmState, w: &ConvLstmWeights) -> Result<(Tensor, ConvLstmState)> {
    let spec = w.spec()?;
    let params = w.to_params()?;
    let mut tape = Tape::new();
    let mut b = Binder::new(&params);
    let xv = tape.leaf(x.clone());
    let state = CellState { h: tape.leaf(prev.h.clone()), c: Some(tape.leaf(prev.c.clone())) };
    let next = spec.step(&mut tape, &mut b, xv, &state)?;
    let h = tape.value(next.h).clone();
    let c = tape.value(next.c.expect("lstm state")).clone();
    Ok((h.clone(), ConvLstmState { h, c }))
}

/// One ConvGRU step on plain tensors.
pub fn conv_gru_step(x: &Tensor, h_prev: &Tensor, w: &ConvGruWeights) -> Result<Tensor> {
    let spec = w.spec()?;
    let params = w.to_params()?;
    let mut tape = Tape::new();
    let mut b = Binder::new(&params);
    let xv = tape.leaf(x.clone());
    let state = CellState { h: tape.leaf(h_prev.clone()), c: None };
    let next = spec.step(&mut tape, &mut b, xv, &state)?;
    Ok(tape.value(next.h).clone())
}

/// Severed-recurrence ConvLSTM on plain tensors.
pub fn template_encode(x: &Tensor, w: &ConvLstmWeights) -> Result<Tensor> {
    let spec = w.spec()?;
    let params = w.to_params()?;
    let mut tape = Tape::new();
    let mut b = Binder::new(&params);
    let xv = tape.leaf(x.clone());
    let out = spec.encode(&mut tape, &mut b, xv)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::sigmoid_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Tensor {
        Tensor::full(&[1, 1, 1], v)
    }

    fn kern(v: f64) -> Tensor {
        Tensor::full(&[1, 1, 1, 1], v)
    }

    fn random_lstm(rng: &mut ChaCha8Rng, cx: usize, ch: usize, k: usize) -> ConvLstmWeights {
        let spec = CellSpec::new(CellKind::Lstm, "convlstm", cx, ch, k).unwrap();
        let mut p = ParamSet::new();
        spec.init_params(&mut p, rng).unwrap();
        let g = |n: &str| p.get(&format!("convlstm.{n}")).unwrap().clone();
        let mut w = ConvLstmWeights {
            w_xi: g("w_xi"), w_hi: g("w_hi"), b_i: g("b_i"),
            w_xf: g("w_xf"), w_hf: g("w_hf"), b_f: g("b_f"),
            w_xc: g("w_xc"), w_hc: g("w_hc"), b_c: g("b_c"),
            w_xo: g("w_xo"), w_ho: g("w_ho"), b_o: g("b_o"),
        };
        for b in [&mut w.b_i, &mut w.b_f, &mut w.b_c, &mut w.b_o] {
            *b = Tensor::from_fn(b.dims(), |_| rng.random_range(-1.0..1.0));
        }
        w
    }

    #[test]
    fn lstm_zero_fixed_point() {
        let w = ConvLstmWeights::zeros(2, 3, 3);
        let (h, s) = conv_lstm_step(&Tensor::ones(&[2, 4, 4]), &ConvLstmState::zeros(3, 4, 4), &w).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(s.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_forget_gate_retains_memory() {
        let mut w = ConvLstmWeights::zeros(1, 2, 3);
        w.b_f = Tensor::full(&[2], 10.0);
        w.b_i = Tensor::full(&[2], -10.0);
        let c0 = Tensor::new(vec![2, 2, 2], vec![0.9, -0.4, 0.3, 0.0, -0.7, 0.5, 0.2, -0.1]).unwrap();
        let mut state = ConvLstmState { h: Tensor::zeros(&[2, 2, 2]), c: c0.clone() };
        let x = Tensor::ones(&[1, 2, 2]);
        for _ in 0..10 {
            let prev_c = state.c.clone();
            state = conv_lstm_step(&x, &state, &w).unwrap().1;
            for (a, b) in state.c.data().iter().zip(prev_c.data()) {
                assert!((a - b).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn lstm_matches_scalar_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let r = |rng: &mut ChaCha8Rng| rng.random_range(-2.0..2.0);
            let vals: Vec<f64> = (0..15).map(|_| r(&mut rng)).collect();
            let [wxi, whi, bi, wxf, whf, bf, wxc, whc, bc, wxo, who, bo, x, h0, c0] = vals[..] else { unreachable!() };
            let w = ConvLstmWeights {
                w_xi: kern(wxi), w_hi: kern(whi), b_i: Tensor::full(&[1], bi),
                w_xf: kern(wxf), w_hf: kern(whf), b_f: Tensor::full(&[1], bf),
                w_xc: kern(wxc), w_hc: kern(whc), b_c: Tensor::full(&[1], bc),
                w_xo: kern(wxo), w_ho: kern(who), b_o: Tensor::full(&[1], bo),
            };
            let prev = ConvLstmState { h: scalar(h0), c: scalar(c0) };
            let (h, s) = conv_lstm_step(&scalar(x), &prev, &w).unwrap();
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let i = sig(wxi * x + whi * h0 + bi);
            let f = sig(wxf * x + whf * h0 + bf);
            let c = f * c0 + i * (wxc * x + whc * h0 + bc).tanh();
            let o = sig(wxo * x + who * h0 + bo);
            let hh = o * c.tanh();
            assert!((s.c.item() - c).abs() < 1e-12);
            assert!((h.item() - hh).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_matches_scalar_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..11).map(|_| rng.random_range(-2.0..2.0)).collect();
            let [wxz, whz, bz, wxr, whr, br, wxh, whh, bh, x, h0] = vals[..] else { unreachable!() };
            let w = ConvGruWeights {
                w_xz: kern(wxz), w_hz: kern(whz), b_z: Tensor::full(&[1], bz),
                w_xr: kern(wxr), w_hr: kern(whr), b_r: Tensor::full(&[1], br),
                w_xh: kern(wxh), w_hh: kern(whh), b_h: Tensor::full(&[1], bh),
            };
            let h = conv_gru_step(&scalar(x), &scalar(h0), &w).unwrap();
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let z = sig(wxz * x + whz * h0 + bz);
            let r = sig(wxr * x + whr * h0 + br);
            let want = z * h0 + (1.0 - z) * (wxh * x + whh * (r * h0) + bh).tanh();
            assert!((h.item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_zero_and_saturated_update_gate() {
        let w = ConvGruWeights::zeros(1, 1, 3);
        let h = conv_gru_step(&Tensor::ones(&[1, 3, 3]), &Tensor::zeros(&[1, 3, 3]), &w).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        let mut w = ConvGruWeights::zeros(1, 2, 3);
        w.b_z = Tensor::full(&[2], 10.0);
        let mut h = Tensor::from_fn(&[2, 3, 3], |i| (i as f64 * 0.37).sin());
        for _ in 0..10 {
            let next = conv_gru_step(&Tensor::ones(&[1, 3, 3]), &h, &w).unwrap();
            for (a, b) in next.data().iter().zip(h.data()) {
                assert!((a - b).abs() < 1e-3);
            }
            h = next;
        }
    }

    #[test]
    fn template_encode_is_severed_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random_lstm(&mut rng, 2, 3, 3);
        let x = Tensor::from_fn(&[2, 5, 5], |_| rng.random_range(-1.0..1.0));
        let enc = template_encode(&x, &w).unwrap();
        let mut forced = w.clone();
        forced.b_f = Tensor::full(&[3], -1e300);
        let (h, _) = conv_lstm_step(&x, &ConvLstmState::zeros(3, 5, 5), &forced).unwrap();
        assert_eq!(enc, h);
        // Zero state alone already severs the forget path.
        let (h0, _) = conv_lstm_step(&x, &ConvLstmState::zeros(3, 5, 5), &w).unwrap();
        assert_eq!(enc, h0);
        assert!(template_encode(&x, &ConvLstmWeights::zeros(2, 3, 3)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn template_encode_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = random_lstm(&mut rng, 1, 1, 1);
        let x = 0.83;
        let f = |t: &Tensor| t.data()[0];
        let i = sigmoid_scalar(f(&w.w_xi) * x + f(&w.b_i));
        let c = i * (f(&w.w_xc) * x + f(&w.b_c)).tanh();
        let o = sigmoid_scalar(f(&w.w_xo) * x + f(&w.b_o));
        let got = template_encode(&scalar(x), &w).unwrap().item();
        assert!((got - o * c.tanh()).abs() < 1e-12);
    }

    #[test]
    fn encoder_observes_shared_weight_updates() {
        let spec = CellSpec::new(CellKind::Lstm, "convlstm", 1, 1, 1).unwrap();
        let mut params = ParamSet::new();
        spec.init_params(&mut params, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let run = |p: &ParamSet| {
            let mut tape = Tape::new();
            let mut b = Binder::new(p);
            let x = tape.leaf(scalar(0.7));
            let out = spec.encode(&mut tape, &mut b, x).unwrap();
            tape.value(out).item()
        };
        let before = run(&params);
        params.get_mut("convlstm.w_xc").unwrap().data_mut()[0] += 0.5;
        assert_ne!(before, run(&params));
    }

    #[test]
    fn outputs_bounded_and_spatial_dims_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for kind in [CellKind::Lstm, CellKind::Gru] {
            let stack = CellStack::new(kind, 2, 3, 3, 1).unwrap();
            let mut params = ParamSet::new();
            stack.init_params(&mut params, &mut rng).unwrap();
            let mut tape = Tape::new();
            let mut b = Binder::new(&params);
            let mut state = stack.zero_state(&mut tape, 6, 5);
            for _ in 0..4 {
                let x = tape.leaf(Tensor::from_fn(&[2, 6, 5], |_| rng.random_range(-30.0..30.0)));
                state = stack.step(&mut tape, &mut b, x, &state).unwrap();
                let h = tape.value(state[0].h);
                assert_eq!(h.dims(), &[3, 6, 5]);
                assert!(h.data().iter().all(|v| v.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let w = ConvLstmWeights::zeros(2, 3, 3);
        assert!(conv_lstm_step(&Tensor::zeros(&[1, 4, 4]), &ConvLstmState::zeros(3, 4, 4), &w).is_err());
        assert!(conv_lstm_step(&Tensor::zeros(&[2, 4, 4]), &ConvLstmState::zeros(3, 5, 4), &w).is_err());
        assert!(CellSpec::new(CellKind::Lstm, "x", 1, 1, 2).is_err());
    }

    fn unrolled_grad_check(kind: CellKind, hadamard: bool) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut spec = CellSpec::new(kind, "cell", 2, 2, 3).unwrap();
        if hadamard {
            spec.hc_hadamard = Some((4, 4));
        }
        let mut params = ParamSet::new();
        spec.init_params(&mut params, &mut rng).unwrap();
        let xs: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[2, 4, 4], |_| rng.random_range(-1.0..1.0))).collect();
        let target = Tensor::from_fn(&[2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let f = |p: &ParamSet| {
            let mut tape = Tape::new();
            let mut b = Binder::new(p);
            let mut state = spec.zero_state(&mut tape, 4, 4);
            for x in &xs {
                let xv = tape.leaf(x.clone());
                state = spec.step(&mut tape, &mut b, xv, &state)?;
            }
            let t = tape.leaf(target.clone());
            let prod = tape.mul(state.h, t)?;
            let loss = tape.sum(prod);
            let g = tape.backward(loss)?;
            Ok((tape.value(loss).item(), b.param_grads(&tape, &g)))
        };
        grad_check(f, &params, 1e-5, 50, 1).unwrap().max_rel_error
    }

    #[test]
    fn three_step_unroll_gradients() {
        assert!(unrolled_grad_check(CellKind::Lstm, false) < 1e-4);
        assert!(unrolled_grad_check(CellKind::Gru, false) < 1e-4);
        assert!(unrolled_grad_check(CellKind::Lstm, true) < 1e-4);
    }
}
