use crate::autodiff::{Parameters, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Scalar linear head `h ↦ h·w + b`.
#[derive(Debug, Clone)]
pub struct RewardHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl RewardHead {
    pub fn new(d_model: usize, rng: &mut Rng) -> Self {
        RewardHead {
            weight: Tensor::randn(&[d_model, 1], 1.0 / (d_model as f32).sqrt(), rng).with_grad(),
            bias: Tensor::zeros(&[1]).with_grad(),
        }
    }

    pub fn closed_form_count(d_model: usize) -> usize {
        d_model + 1
    }

    /// Maps `n×d` hidden rows to a length-`n` vector.
    pub fn forward(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let out = tape.matmul(hidden, w)?;
        let out = tape.add_row(out, b)?;
        let n = tape.shape(out)[0];
        tape.reshape(out, vec![n])
    }
}

impl Parameters for RewardHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("head.weight", &self.weight);
        f("head.bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("head.weight", &mut self.weight);
        f("head.bias", &mut self.bias);
    }
}
