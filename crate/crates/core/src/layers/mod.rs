//! Parametrized layers shared by the comprehension and seq2seq models.
//!
//! Layers only hold parameter names and sizes; values live in a
//! [`ParamStore`](crate::params::ParamStore) bound to the tape.

mod char_cnn;
mod embedding;
mod lstm;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{init, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

pub use char_cnn::CharCnn;
pub use embedding::Embedding;
pub use lstm::{step_masks, BiLstm, BiLstmOutput, Lstm, LstmCell, LstmState, StackedLstm};

/// `x Wᵀ + b` with `W` laid out `out × in`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            input,
            output,
        }
    }

    pub fn weight(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        vec![self.weight(), self.bias()]
    }

    pub fn num_elements(&self) -> usize {
        self.output * (self.input + 1)
    }

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        ps.insert(self.weight(), init::xavier(self.output, self.input, rng))?;
        ps.insert(self.bias(), init::zeros(self.output))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight())?;
        let b = g.param(&self.bias())?;
        let y = g.matmul_bt(x, w)?;
        g.add_bias(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, Tensor};

    #[test]
    fn linear_is_affine() {
        let lin = Linear::new("l", 2, 1);
        let mut ps = ParamStore::<f64>::new();
        ps.insert("l.w", Tensor::from_rows(&[&[2.0, -1.0]])).unwrap();
        ps.insert("l.b", Tensor::row_vector(&[0.5])).unwrap();
        let mut g = Graph::new(&ps, Mode::Eval, 0);
        let x = g.constant(Tensor::from_rows(&[&[1.0, 3.0], &[0.0, 0.0]])).unwrap();
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[-0.5, 0.5]);
    }
}
