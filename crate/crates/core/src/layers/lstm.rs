use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Hidden and cell state of one LSTM for a batch (`B × h` each).
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros<S: Scalar>(g: &mut Graph<'_, S>, batch: usize, hidden: usize) -> Result<Self> {
        let h = g.constant(Tensor::zeros(&[batch, hidden]))?;
        let c = g.constant(Tensor::zeros(&[batch, hidden]))?;
        Ok(LstmState { h, c })
    }
}

/// One LSTM cell. Gate rows are ordered input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmCell {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        LstmCell {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn w_ih(&self) -> String {
        format!("{}.w_ih", self.prefix)
    }

    pub fn w_hh(&self) -> String {
        format!("{}.w_hh", self.prefix)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.w_ih(), self.w_hh(), self.bias()]
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let g = 4 * self.hidden;
        vec![
            (self.w_ih(), vec![g, self.input]),
            (self.w_hh(), vec![g, self.hidden]),
            (self.bias(), vec![g]),
        ]
    }

    pub fn num_elements(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden + 1)
    }

    /// Xavier weights, zero bias except the forget gate at 1.
    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let h = self.hidden;
        ps.insert(self.w_ih(), init::xavier(4 * h, self.input, rng))?;
        ps.insert(self.w_hh(), init::xavier(4 * h, h, rng))?;
        let mut b = init::zeros::<f32>(4 * h);
        b.data_mut()[h..2 * h].fill(1.0);
        ps.insert(self.bias(), b)
    }

    pub fn step<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, state: LstmState) -> Result<LstmState> {
        let (_, d) = g.shape(x);
        if d != self.input {
            return Err(Error::dim(
                "lstm_cell_step",
                format!("{}: input width {d}, expected {}", self.prefix, self.input),
            ));
        }
        let (_, hd) = g.shape(state.h);
        if hd != self.hidden || g.shape(state.c).1 != self.hidden {
            return Err(Error::dim(
                "lstm_cell_step",
                format!("{}: state width {hd}, expected {}", self.prefix, self.hidden),
            ));
        }
        let h = self.hidden;
        let w_ih = g.param(&self.w_ih())?;
        let w_hh = g.param(&self.w_hh())?;
        let b = g.param(&self.bias())?;
        let xi = g.matmul_bt(x, w_ih)?;
        let hh = g.matmul_bt(state.h, w_hh)?;
        let pre = g.add(xi, hh)?;
        let gates = g.add_bias(pre, b)?;

        let i = g.slice_cols(gates, 0, h)?;
        let f = g.slice_cols(gates, h, h)?;
        let cand = g.slice_cols(gates, 2 * h, h)?;
        let o = g.slice_cols(gates, 3 * h, h)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;

        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h_new = g.mul(o, tc)?;
        Ok(LstmState { h: h_new, c })
    }

    /// Step that leaves rows with mask 0 at their previous state.
    /// `mask` is a `B × 1` column of ones and zeros; `inv` is `1 - mask`.
    pub fn step_masked<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        state: LstmState,
        mask: Option<(Var, Var)>,
    ) -> Result<LstmState> {
        let next = self.step(g, x, state)?;
        let Some((m, inv)) = mask else {
            return Ok(next);
        };
        let blend = |g: &mut Graph<'_, S>, new: Var, old: Var| -> Result<Var> {
            let a = g.scale_rows(new, m)?;
            let b = g.scale_rows(old, inv)?;
            g.add(a, b)
        };
        Ok(LstmState {
            h: blend(g, next.h, state.h)?,
            c: blend(g, next.c, state.c)?,
        })
    }
}

/// Per-step `B × 1` validity masks built from sequence lengths.
pub fn step_masks<S: Scalar>(g: &mut Graph<'_, S>, lengths: &[usize], steps: usize) -> Result<Vec<Option<(Var, Var)>>> {
    if lengths.iter().all(|&l| l == steps) {
        return Ok(vec![None; steps]);
    }
    (0..steps)
        .map(|t| {
            let m: Vec<S> = lengths
                .iter()
                .map(|&l| if t < l { S::one() } else { S::zero() })
                .collect();
            let inv: Vec<S> = m.iter().map(|&v| S::one() - v).collect();
            let b = lengths.len();
            let mv = g.constant(Tensor::new(vec![b, 1], m)?)?;
            let iv = g.constant(Tensor::new(vec![b, 1], inv)?)?;
            Ok(Some((mv, iv)))
        })
        .collect()
}

fn validate_lengths(xs: &[Var], lengths: &[usize], rows: usize) -> Result<()> {
    if xs.is_empty() || lengths.contains(&0) {
        return Err(Error::EmptyInput("zero-length sequence".into()));
    }
    if lengths.len() != rows {
        return Err(Error::dim(
            "lstm",
            format!("{} lengths for a batch of {rows}", lengths.len()),
        ));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l > xs.len()) {
        return Err(Error::dim(
            "lstm",
            format!("length {l} exceeds sequence extent {}", xs.len()),
        ));
    }
    Ok(())
}

/// Zeroes padded rows of a per-step output.
fn mask_output<S: Scalar>(g: &mut Graph<'_, S>, h: Var, mask: Option<(Var, Var)>) -> Result<Var> {
    match mask {
        Some((m, _)) => g.scale_rows(h, m),
        None => Ok(h),
    }
}

/// Unidirectional LSTM over a time-major batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lstm {
    pub cell: LstmCell,
}

impl Lstm {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Lstm {
            cell: LstmCell::new(prefix, input, hidden),
        }
    }

    /// Returns per-step outputs (zero at padding) and the state after each
    /// sequence's last valid step.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        xs: &[Var],
        lengths: &[usize],
        init: Option<LstmState>,
    ) -> Result<(Vec<Var>, LstmState)> {
        let rows = xs.first().map_or(0, |&x| g.shape(x).0);
        validate_lengths(xs, lengths, rows)?;
        let masks = step_masks(g, lengths, xs.len())?;
        let mut state = match init {
            Some(s) => s,
            None => LstmState::zeros(g, rows, self.cell.hidden)?,
        };
        let mut out = Vec::with_capacity(xs.len());
        for (&x, &mask) in xs.iter().zip(&masks) {
            state = self.cell.step_masked(g, x, state, mask)?;
            out.push(mask_output(g, state.h, mask)?);
        }
        Ok((out, state))
    }
}

/// Bidirectional LSTM; per-step output is `[h_fwd ; h_bwd]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

pub struct BiLstmOutput {
    pub steps: Vec<Var>,
    pub fwd_final: LstmState,
    pub bwd_final: LstmState,
}

impl BiLstm {
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        BiLstm {
            fwd: LstmCell::new(format!("{prefix}.fwd"), input, hidden),
            bwd: LstmCell::new(format!("{prefix}.bwd"), input, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn input(&self) -> usize {
        self.fwd.input
    }

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.fwd.init(ps, rng)?;
        self.bwd.init(ps, rng)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = self.fwd.param_names();
        v.extend(self.bwd.param_names());
        v
    }

    pub fn num_elements(&self) -> usize {
        self.fwd.num_elements() + self.bwd.num_elements()
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, xs: &[Var], lengths: &[usize]) -> Result<BiLstmOutput> {
        let rows = xs.first().map_or(0, |&x| g.shape(x).0);
        validate_lengths(xs, lengths, rows)?;
        let masks = step_masks(g, lengths, xs.len())?;
        let hd = self.hidden();

        let mut state = LstmState::zeros(g, rows, hd)?;
        let mut fwd = Vec::with_capacity(xs.len());
        for (&x, &mask) in xs.iter().zip(&masks) {
            state = self.fwd.step_masked(g, x, state, mask)?;
            fwd.push(mask_output(g, state.h, mask)?);
        }
        let fwd_final = state;

        // Padding sits at the end, so walking backwards the padded steps
        // leave the zero state untouched until each sequence's last token.
        let mut state = LstmState::zeros(g, rows, hd)?;
        let mut bwd = vec![None; xs.len()];
        for t in (0..xs.len()).rev() {
            state = self.bwd.step_masked(g, xs[t], state, masks[t])?;
            bwd[t] = Some(mask_output(g, state.h, masks[t])?);
        }
        let bwd_final = state;

        let steps = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| g.concat(&[f, b.expect("filled")], 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(BiLstmOutput {
            steps,
            fwd_final,
            bwd_final,
        })
    }
}

/// Stack of unidirectional LSTM layers, each feeding the next.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackedLstm {
    pub layers: Vec<LstmCell>,
}

impl StackedLstm {
    /// `prefix.l1`, `prefix.l2`, ... with the first layer reading `input`.
    pub fn new(prefix: &str, input: usize, hidden: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let inp = if i == 0 { input } else { hidden };
                LstmCell::new(format!("{prefix}.l{}", i + 1), inp, hidden)
            })
            .collect();
        StackedLstm { layers }
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().expect("non-empty stack").hidden
    }

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(ps, rng))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.layers.iter().flat_map(LstmCell::param_names).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.layers.iter().map(LstmCell::num_elements).sum()
    }

    pub fn zero_states<S: Scalar>(&self, g: &mut Graph<'_, S>, batch: usize) -> Result<Vec<LstmState>> {
        self.layers
            .iter()
            .map(|l| LstmState::zeros(g, batch, l.hidden))
            .collect()
    }

    /// Advances every layer by one step; returns the new per-layer states.
    pub fn step<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, states: &[LstmState]) -> Result<Vec<LstmState>> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, &s) in self.layers.iter().zip(states) {
            let ns = layer.step(g, input, s)?;
            input = ns.h;
            next.push(ns);
        }
        Ok(next)
    }

    /// Runs the whole stack; outputs are the top layer's states.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, xs: &[Var], lengths: &[usize]) -> Result<Vec<Var>> {
        let mut seq = xs.to_vec();
        for layer in &self.layers {
            let lstm = Lstm { cell: layer.clone() };
            seq = lstm.forward(g, &seq, lengths, None)?.0;
        }
        Ok(seq)
    }
}
