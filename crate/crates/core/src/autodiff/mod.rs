//! Minimal reverse-mode automatic differentiation over dense f32 tensors.

mod gemm;
mod tape;
mod tensor;

pub use gemm::gemm;
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorId};

use crate::error::Result;

/// A collection of named parameter tensors.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| {
            if t.requires_grad() {
                n += t.numel()
            }
        });
        n
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(trainable));
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    /// Combined bitwise fingerprint of all tensors, in visit order.
    fn checksum(&self) -> u64 {
        let mut h = 0u64;
        self.visit(&mut |_, t| h = crate::rng::mix64(h ^ t.checksum()));
        h
    }

    /// Routes gradients of the last backward sweep into the grad slots.
    fn collect_grads(&mut self, tape: &Tape) {
        self.visit_mut(&mut |_, t| {
            tape.write_grad(t);
        });
    }
}

/// Central finite-difference gradient check.
///
/// Returns `max_i |analytic_i − numeric_i| / (|analytic_i| + |numeric_i| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    const EPS: f64 = 1e-8;
    let mut probe = x.clone().with_grad();
    let mut tape = Tape::new();
    let xv = tape.param(&probe);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(t);
        let out = f(&mut tape, v)?;
        Ok(tape.item(out) as f64)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let (xu, xd) = (orig + h, orig - h);
        probe.data_mut()[i] = xu;
        let up = eval(&probe)?;
        probe.data_mut()[i] = xd;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // Divide by the step actually taken after f32 rounding.
        let numeric = (up - down) / (xu as f64 - xd as f64);
        let a = analytic[i] as f64;
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + EPS);
        worst = worst.max(err);
    }
    Ok(worst as f32)
}
