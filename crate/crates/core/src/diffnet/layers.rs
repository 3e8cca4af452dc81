use rand::Rng;

use super::tape::{NodeId, Tape};
use super::tensor::{ParamId, ParamSet, Tensor};
use crate::{Error, Result};

/// Hidden and cell vectors of an LSTM, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LstmNodes {
    pub hidden: NodeId,
    pub cell: NodeId,
}

/// Hidden and cell vectors as plain values, for carrying state across tapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmCellState {
    pub fn zeros(h: usize) -> Self {
        Self {
            hidden: vec![0.0; h],
            cell: vec![0.0; h],
        }
    }

    pub fn on_tape(&self, tape: &mut Tape<'_>) -> LstmNodes {
        LstmNodes {
            hidden: tape.input(self.hidden.clone()),
            cell: tape.input(self.cell.clone()),
        }
    }

    pub fn from_tape(tape: &Tape<'_>, n: LstmNodes) -> Self {
        Self {
            hidden: tape.value(n.hidden).to_vec(),
            cell: tape.value(n.cell).to_vec(),
        }
    }
}

/// Single-layer LSTM: gates `[i; f; g; o] = W [x; h] + b`.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Registers `{prefix}.w` (`4H × (in + H)`, Xavier) and `{prefix}.b`
    /// (`4H`, zeros except forget-gate bias 1).
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut w = Tensor::zeros(format!("{prefix}.w"), 4 * hidden, input + hidden);
        w.xavier_uniform(rng);
        let mut b = Tensor::zeros(format!("{prefix}.b"), 4 * hidden, 1);
        b.data[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Ok(Self {
            weight: params.insert(w)?,
            bias: params.insert(b)?,
            input,
            hidden,
        })
    }

    pub fn lookup(params: &ParamSet, prefix: &str) -> Result<Self> {
        let weight = lookup(params, &format!("{prefix}.w"))?;
        let bias = lookup(params, &format!("{prefix}.b"))?;
        let t = params.get(weight);
        let hidden = t.rows / 4;
        Ok(Self {
            weight,
            bias,
            input: t.cols - hidden,
            hidden,
        })
    }

    pub fn step(&self, tape: &mut Tape<'_>, prev: LstmNodes, x: NodeId) -> Result<LstmNodes> {
        let h = self.hidden;
        let (xl, hl, cl) = (
            tape.value(x).len(),
            tape.value(prev.hidden).len(),
            tape.value(prev.cell).len(),
        );
        if xl != self.input || hl != h || cl != h {
            return Err(Error::Shape {
                op: "lstm_cell",
                detail: format!(
                    "expected input {} and state {h}, got input {xl}, hidden {hl}, cell {cl}",
                    self.input
                ),
            });
        }
        let xh = tape.concat(&[x, prev.hidden]);
        let z = tape.matvec(self.weight, xh)?;
        let b = tape.param_vec(self.bias);
        let z = tape.add(z, b)?;
        let zi = tape.slice(z, 0, h)?;
        let zf = tape.slice(z, h, h)?;
        let zg = tape.slice(z, 2 * h, h)?;
        let zo = tape.slice(z, 3 * h, h)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let keep = tape.mul(f, prev.cell)?;
        let write = tape.mul(i, g)?;
        let cell = tape.add(keep, write)?;
        let tc = tape.tanh(cell);
        let hidden = tape.mul(o, tc)?;
        Ok(LstmNodes { hidden, cell })
    }
}

/// `W2 · relu(W1 · x)`, no biases.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl Mlp2 {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut w1 = Tensor::zeros(format!("{prefix}.w1"), hidden, input);
        w1.xavier_uniform(rng);
        let mut w2 = Tensor::zeros(format!("{prefix}.w2"), output, hidden);
        w2.xavier_uniform(rng);
        Ok(Self {
            w1: params.insert(w1)?,
            w2: params.insert(w2)?,
        })
    }

    pub fn lookup(params: &ParamSet, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: lookup(params, &format!("{prefix}.w1"))?,
            w2: lookup(params, &format!("{prefix}.w2"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId> {
        mlp2_relu(tape, x, self.w1, self.w2)
    }
}

pub fn mlp2_relu(tape: &mut Tape<'_>, x: NodeId, w1: ParamId, w2: ParamId) -> Result<NodeId> {
    let (r1, c2) = (tape.params().get(w1).rows, tape.params().get(w2).cols);
    if r1 != c2 {
        return Err(Error::Shape {
            op: "mlp2_relu",
            detail: format!("W1 produces {r1} values but W2 expects {c2}"),
        });
    }
    let a = tape.matvec(w1, x)?;
    let a = tape.relu(a);
    tape.matvec(w2, a)
}

pub(crate) fn lookup(params: &ParamSet, name: &str) -> Result<ParamId> {
    params
        .id(name)
        .ok_or_else(|| Error::Format(format!("parameter `{name}` missing")))
}
