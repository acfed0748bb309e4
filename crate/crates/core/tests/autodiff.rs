use erlab_core::autodiff::{grad_check, Parameters, Tape, Tensor, Var};
use erlab_core::rng::stream;
use erlab_core::{Error, Result};

const TOL: f32 = 1e-3;
const H: f32 = 1e-3;
/// Step for the per-primitive sweep; large enough to clear f32 rounding,
/// small enough that truncation error stays near 1e-5.
const H_OP: f32 = 1e-2;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.5, 1.5, &mut stream(seed, "x"))
}

/// Fixed operand with entries in [0.5, 1.5]. f32 central differences carry
/// about 1e-4 absolute noise, so the test functions keep gradients O(1).
fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.5, 1.5, &mut stream(seed, "w"))
}

/// Σ c ⊙ y with fixed weights of magnitude in [0.5, 1.5] and alternating
/// sign, so every output contributes and the loss stays small (its f32
/// rounding dominates the finite-difference noise).
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut c = Tensor::uniform(&shape, 0.5, 1.5, &mut stream(seed, "c")).into_data();
    c.iter_mut().step_by(2).for_each(|v| *v = -*v);
    let cv = tape.constant(shape, c)?;
    let p = tape.mul(y, cv)?;
    Ok(tape.sum(p))
}

fn check(name: &str, shape: &[usize], f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    check_in(name, shape, (-1.5, 1.5), f)
}

/// Relative error is meaningless where the true derivative is zero, so ops
/// with a stationary point sample inputs from a range that avoids it.
fn check_in(name: &str, shape: &[usize], (lo, hi): (f32, f32), f: impl Fn(&mut Tape, Var) -> Result<Var>) {
    for seed in 0..5 {
        let x = Tensor::uniform(shape, lo, hi, &mut stream(seed, "x"));
        let err = grad_check(|t, v| f(t, v).and_then(|y| weighted(t, y, 99)), &x, H_OP).unwrap();
        assert!(err < TOL, "{name} seed {seed}: relative error {err}");
    }
}

#[test]
fn forward_values() {
    let mut t = Tape::new();
    let z = t.constant(vec![1], vec![0.0]).unwrap();
    let s = t.sigmoid(z);
    assert_eq!(t.value(s), &[0.5]);

    let eye: Vec<f32> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let x: Vec<f32> = (0..12).map(|i| i as f32 * 0.7 - 3.0).collect();
    let i3 = t.constant(vec![3, 3], eye).unwrap();
    let xv = t.constant(vec![3, 4], x.clone()).unwrap();
    let y = t.matmul(i3, xv).unwrap();
    assert_eq!(t.value(y), &x[..]);

    let pair = t.constant(vec![2], vec![0.0, 2.0]).unwrap();
    let sd = t.std(pair);
    assert_eq!(t.item(sd), 1.0);
}

#[test]
fn sum_of_squares_gradient() {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
    let mut t = Tape::new();
    let v = t.param(&x);
    let sq = t.mul(v, v).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(v).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn log_sigmoid_derivative_at_zero() {
    let a = Tensor::scalar(0.0).with_grad();
    let b = Tensor::scalar(0.0).with_grad();
    let mut t = Tape::new();
    let (av, bv) = (t.param(&a), t.param(&b));
    let d = t.sub(av, bv).unwrap();
    let s = t.sigmoid(d);
    let l = t.log(s);
    t.backward(l).unwrap();
    assert!((t.grad(av).unwrap()[0] - 0.5).abs() < 1e-7);
    assert!((t.grad(bv).unwrap()[0] + 0.5).abs() < 1e-7);
}

#[test]
fn grad_check_on_sum_of_squares_is_tight() {
    let x = rand(&[10], 3);
    let err = grad_check(
        |t, v| {
            let s = t.square(v);
            Ok(t.sum(s))
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn grad_check_handles_dead_coordinates() {
    // Clamp kills the gradient of every coordinate outside [-0.1, 0.1].
    let x = Tensor::new(vec![4], vec![0.5, -0.7, 0.9, -1.2]).unwrap();
    let err = grad_check(
        |t, v| {
            let c = t.clamp(v, -0.1, 0.1);
            Ok(t.sum(c))
        },
        &x,
        H,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn primitive_ops_pass_grad_check() {
    check("matmul lhs", &[3, 4], |t, x| {
        let w = positive(&[4, 2], 11);
        let wv = t.constant(vec![4, 2], w.into_data())?;
        t.matmul(x, wv)
    });
    check("matmul rhs transposed", &[5, 4], |t, x| {
        let a = positive(&[3, 4], 12);
        let av = t.constant(vec![3, 4], a.into_data())?;
        t.matmul_t(av, x, false, true)
    });
    check("matmul lhs transposed", &[4, 3], |t, x| {
        let b = positive(&[4, 2], 13);
        let bv = t.constant(vec![4, 2], b.into_data())?;
        t.matmul_t(x, bv, true, false)
    });
    check("add/sub/mul", &[2, 3], |t, x| {
        let sq = t.mul(x, x)?;
        let s = t.add(sq, x)?;
        t.sub(s, sq)
    });
    check("add_row", &[3], |t, x| {
        let m = t.constant(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6])?;
        t.add_row(m, x)
    });
    check("softmax", &[2, 4], |t, x| Ok(t.softmax(x)));
    check("log_softmax", &[2, 4], |t, x| Ok(t.log_softmax(x)));
    // GELU is flat near x = -0.75.
    check_in("gelu", &[6], (-0.4, 1.5), |t, x| Ok(t.gelu(x)));
    check("tanh", &[6], |t, x| Ok(t.tanh(x)));
    check("sigmoid", &[6], |t, x| Ok(t.sigmoid(x)));
    check("softplus", &[6], |t, x| Ok(t.softplus(x)));
    check("exp", &[6], |t, x| Ok(t.exp(x)));
    check("log", &[6], |t, x| {
        let s = t.square(x);
        let p = t.add_scalar(s, 0.5);
        Ok(t.log(p))
    });
    check("mean", &[5], |t, x| {
        let s = t.square(x);
        Ok(t.mean(s))
    });
    check("std", &[5], |t, x| Ok(t.std(x)));
    // The input side of layernorm is checked against an f64 oracle below.
    check("layernorm gain", &[5], |t, g| {
        let x = t.constant(vec![3, 5], rand(&[3, 5], 7).into_data())?;
        let b = t.constant(vec![5], vec![0.0, 0.1, -0.2, 0.3, 0.0])?;
        t.layernorm(x, g, b)
    });
    check("layernorm bias", &[5], |t, b| {
        let x = t.constant(vec![3, 5], rand(&[3, 5], 7).into_data())?;
        let g = t.constant(vec![5], vec![1.0, 0.5, 2.0, 1.5, 0.8])?;
        t.layernorm(x, g, b)
    });
    check("embedding", &[5, 3], |t, x| t.embedding(x, &[0, 2, 2, 4]));
    check("gather/pick", &[4, 3], |t, x| {
        let g = t.gather_rows(x, &[3, 1, 1])?;
        t.pick(g, &[0, 2, 1])
    });
    check("reshape", &[2, 3], |t, x| t.reshape(x, vec![6]));
    check("causal attention", &[2 * 3, 4], |t, x| {
        let k = t.scale(x, 0.7);
        let v = t.tanh(x);
        t.causal_attention(x, k, v, 2, 3, 2)
    });
}

/// Row-centred ops have gradients summing to zero per row, so some entries
/// sit near zero where f32 differences cannot resolve them.
#[test]
fn layernorm_input_gradient_matches_f64_oracle() {
    const G: [f64; 5] = [1.0, 0.5, 2.0, 1.5, 0.8];
    const B: [f64; 5] = [0.0, 0.1, -0.2, 0.3, 0.0];
    for seed in 0..5 {
        let x = rand(&[3, 5], seed).with_grad();
        let c = Tensor::uniform(&[3, 5], -1.5, 1.5, &mut stream(seed, "c")).into_data();
        let mut t = Tape::new();
        let xv = t.param(&x);
        let g = t.constant(vec![5], G.iter().map(|&v| v as f32).collect()).unwrap();
        let b = t.constant(vec![5], B.iter().map(|&v| v as f32).collect()).unwrap();
        let y = t.layernorm(xv, g, b).unwrap();
        let cv = t.constant(vec![3, 5], c.clone()).unwrap();
        let p = t.mul(y, cv).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        let analytic = t.grad(xv).unwrap().to_vec();

        let f = |xs: &[f64]| {
            let mut s = 0.0;
            for (r, row) in xs.chunks(5).enumerate() {
                let m = row.iter().sum::<f64>() / 5.0;
                let var = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 5.0;
                let rstd = 1.0 / (var + 1e-5).sqrt();
                for j in 0..5 {
                    s += c[r * 5 + j] as f64 * ((row[j] - m) * rstd * G[j] + B[j]);
                }
            }
            s
        };
        let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        for (i, &a) in analytic.iter().enumerate() {
            let (mut up, mut down) = (base.clone(), base.clone());
            up[i] += 1e-6;
            down[i] -= 1e-6;
            let numeric = (f(&up) - f(&down)) / 2e-6;
            assert!((a as f64 - numeric).abs() < 1e-5, "seed {seed} [{i}]: {a} vs {numeric}");
        }
    }
}

#[test]
fn minimum_and_clamp_gradients_route_correctly() {
    let a = Tensor::new(vec![3], vec![0.5, 2.0, -1.0]).unwrap().with_grad();
    let b = Tensor::new(vec![3], vec![1.0, 1.0, -2.0]).unwrap().with_grad();
    let mut t = Tape::new();
    let (av, bv) = (t.param(&a), t.param(&b));
    let m = t.minimum(av, bv).unwrap();
    let c = t.clamp(m, -1.5, 1.2);
    let l = t.sum(c);
    t.backward(l).unwrap();
    assert_eq!(t.grad(av).unwrap(), &[1.0, 0.0, 0.0]);
    assert_eq!(t.grad(bv).unwrap(), &[0.0, 1.0, 0.0]);
}

struct Mlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

const N: usize = 4;
const DIN: usize = 3;
const DH: usize = 5;

fn mlp(seed: u64) -> (Mlp, Vec<f32>) {
    let mut rng = stream(seed, "mlp");
    let m = Mlp {
        w1: Tensor::randn(&[DIN, DH], 0.8, &mut rng).with_grad(),
        b1: Tensor::randn(&[DH], 0.3, &mut rng).with_grad(),
        w2: Tensor::randn(&[DH, 1], 0.8, &mut rng).with_grad(),
        b2: Tensor::randn(&[1], 0.3, &mut rng).with_grad(),
    };
    let x = Tensor::randn(&[N, DIN], 1.0, &mut rng).into_data();
    (m, x)
}

fn mlp_loss_tape(m: &Mlp, x: &[f32], t: &mut Tape) -> Var {
    let xv = t.constant(vec![N, DIN], x.to_vec()).unwrap();
    let (w1, b1, w2, b2) = (t.param(&m.w1), t.param(&m.b1), t.param(&m.w2), t.param(&m.b2));
    let h = t.matmul(xv, w1).unwrap();
    let h = t.add_row(h, b1).unwrap();
    let h = t.tanh(h);
    let o = t.matmul(h, w2).unwrap();
    let o = t.add_row(o, b2).unwrap();
    let s = t.square(o);
    t.mean(s)
}

/// Independent f64 evaluation of the same MLP loss.
fn mlp_loss_f64(p: &[Vec<f64>; 4], x: &[f32]) -> f64 {
    let [w1, b1, w2, b2] = p;
    let mut total = 0.0;
    for n in 0..N {
        let mut o = b2[0];
        for j in 0..DH {
            let mut z = b1[j];
            for i in 0..DIN {
                z += x[n * DIN + i] as f64 * w1[i * DH + j];
            }
            o += z.tanh() * w2[j];
        }
        total += o * o;
    }
    total / N as f64
}

#[test]
fn mlp_gradients_match_f64_finite_differences() {
    for seed in 0..5 {
        let (mut m, x) = mlp(seed);
        let mut t = Tape::new();
        let loss = mlp_loss_tape(&m, &x, &mut t);
        t.backward(loss).unwrap();
        m.collect_grads(&t);

        let base: [Vec<f64>; 4] = [&m.w1, &m.b1, &m.w2, &m.b2].map(|t| t.data().iter().map(|&v| v as f64).collect());
        let analytic = [&m.w1, &m.b1, &m.w2, &m.b2].map(|t| t.grad().unwrap().to_vec());
        let h = 1e-3;
        let mut worst = 0.0f64;
        for (p, grads) in analytic.iter().enumerate() {
            for i in 0..base[p].len() {
                let mut up = base.clone();
                up[p][i] += h;
                let mut down = base.clone();
                down[p][i] -= h;
                let numeric = (mlp_loss_f64(&up, &x) - mlp_loss_f64(&down, &x)) / (2.0 * h);
                let a = grads[i] as f64;
                worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8));
            }
        }
        assert!(worst < 1e-3, "seed {seed}: {worst}");
    }
}

#[test]
fn backward_twice_doubles_accumulated_grads() {
    let (mut m, x) = mlp(7);
    let mut t = Tape::new();
    let loss = mlp_loss_tape(&m, &x, &mut t);
    t.backward(loss).unwrap();
    m.collect_grads(&t);
    let once = m.w1.grad().unwrap().to_vec();
    t.backward(loss).unwrap();
    m.collect_grads(&t);
    for (g2, g1) in m.w1.grad().unwrap().iter().zip(&once) {
        assert_eq!(*g2, 2.0 * g1);
    }
    m.zero_grads();
    assert!(m.w1.grad().unwrap().iter().all(|g| *g == 0.0));
}

#[test]
fn no_grad_inputs_record_nothing() {
    let (mut m, x) = mlp(8);
    m.set_trainable(false);
    let mut t = Tape::new();
    mlp_loss_tape(&m, &x, &mut t);
    assert!(!t.is_empty());
    assert_eq!(t.recorded_ops(), 0);

    m.set_trainable(true);
    let mut inf = Tape::inference();
    mlp_loss_tape(&m, &x, &mut inf);
    assert_eq!(inf.recorded_ops(), 0);

    let mut t = Tape::new();
    mlp_loss_tape(&m, &x, &mut t);
    assert!(t.recorded_ops() > 0);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(vec![4, 5], vec![0.0; 20]).unwrap();
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let x = Tensor::zeros(&[3]).with_grad();
    let mut t = Tape::new();
    let v = t.param(&x);
    assert!(matches!(t.backward(v), Err(Error::NonScalarLoss(_))));
}

#[test]
fn tied_parameter_binds_once() {
    let x = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap().with_grad();
    let mut t = Tape::new();
    let a = t.param(&x);
    let b = t.param(&x);
    assert_eq!(a, b);
    let p = t.mul(a, b).unwrap();
    let l = t.sum(p);
    t.backward(l).unwrap();
    assert_eq!(t.grad(a).unwrap(), &[2.0, -4.0]);
}
