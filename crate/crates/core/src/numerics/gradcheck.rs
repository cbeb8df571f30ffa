//! Central finite-difference checking for tape gradients.
//!
//! The oracle only ever evaluates the forward pass, so it is independent of
//! every vector-Jacobian product it checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step `h`.
    pub step: f64,
    /// Allowed relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)`.
    pub tolerance: f64,
}

/// Relative error between two gradient vectors, measured in the 2-norm.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Analytic gradient of `f` with respect to each input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.wrt_or_zeros(v)).collect()))
}

/// Central-difference gradient of the scalar `f` with respect to each input.
pub fn numeric_gradients<F>(inputs: &[Tensor], step: f64, f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant_ref(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
        out.push(Tensor::new(inputs[t].shape().to_vec(), g)?);
    }
    Ok(out)
}

/// Compares analytic and finite-difference gradients over all inputs jointly.
/// Returns the relative error, or a numerical error if it exceeds the tolerance.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheck, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, cfg.step, &f)?;
    let flat_a: Vec<f64> = analytic.iter().flat_map(|t| t.data().to_vec()).collect();
    let flat_n: Vec<f64> = numeric.iter().flat_map(|t| t.data().to_vec()).collect();
    let err = relative_error(&flat_a, &flat_n);
    if err > cfg.tolerance || !err.is_finite() {
        return Err(Error::Numerical(format!(
            "gradient mismatch: relative error {err:.3e} > {:.1e}",
            cfg.tolerance
        )));
    }
    Ok(err)
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Linear { w: usize, b: usize, tanh: bool },
    Norm { gain: usize, bias: usize },
    Attention { wq: usize, wk: usize, gain: usize, bias: usize },
    Gate { w: usize },
}

#[derive(Clone, Copy, Debug)]
enum Head {
    Squares,
    Pointer { visible: u32, index: usize },
    Pooled,
}

/// A random miniature network (input, layers and scalar head drawn from
/// `seed`) with its parameters, ready for [`check_gradients`].
pub struct RandomNetwork {
    pub inputs: Vec<Tensor>,
    layers: Vec<Layer>,
    head: Head,
}

impl RandomNetwork {
    pub fn new(seed: u64) -> Self {
        use rand::Rng as _;
        let mut rng = super::SeedTree::new(seed).named("random-network").rng();
        let rows = rng.random_range(3..=5usize);
        let mut width = rng.random_range(3..=6usize);
        let mut inputs = vec![Tensor::randn(&[rows, width], 1.0, &mut rng)];
        let push = |t: Tensor, inputs: &mut Vec<Tensor>| {
            inputs.push(t);
            inputs.len() - 1
        };
        let mut layers = Vec::new();
        for _ in 0..rng.random_range(1..=4) {
            let layer = match rng.random_range(0..4u8) {
                0 => {
                    let out = rng.random_range(3..=6usize);
                    let std = 1.0 / (width as f64).sqrt();
                    let w = push(Tensor::randn(&[width, out], std, &mut rng), &mut inputs);
                    let b = push(Tensor::randn(&[out], 0.1, &mut rng), &mut inputs);
                    width = out;
                    Layer::Linear { w, b, tanh: rng.random_bool(0.7) }
                }
                1 => {
                    let gain = push(Tensor::uniform(&[width], 1.0, &mut rng), &mut inputs);
                    let bias = push(Tensor::randn(&[width], 0.1, &mut rng), &mut inputs);
                    Layer::Norm { gain, bias }
                }
                2 => {
                    let std = 1.0 / (width as f64).sqrt();
                    let wq = push(Tensor::randn(&[width, width], std, &mut rng), &mut inputs);
                    let wk = push(Tensor::randn(&[width, width], std, &mut rng), &mut inputs);
                    let gain = push(Tensor::uniform(&[width], 1.0, &mut rng), &mut inputs);
                    let bias = push(Tensor::randn(&[width], 0.1, &mut rng), &mut inputs);
                    Layer::Attention { wq, wk, gain, bias }
                }
                _ => {
                    let w = push(Tensor::randn(&[width, width], 0.5, &mut rng), &mut inputs);
                    Layer::Gate { w }
                }
            };
            layers.push(layer);
        }
        let head = match rng.random_range(0..3u8) {
            0 => Head::Squares,
            1 => {
                let index = rng.random_range(0..rows);
                // the picked entry plus at least one other stays visible
                let other = (index + rng.random_range(1..rows)) % rows;
                let visible = rng.random::<u32>() | (1 << index) | (1 << other);
                Head::Pointer { visible, index }
            }
            _ => Head::Pooled,
        };
        RandomNetwork { inputs, layers, head }
    }

    /// Scalar output of the network for parameters `v` (same order as `inputs`).
    pub fn forward(&self, tape: &mut Tape, v: &[Var]) -> Result<Var> {
        let mut x = v[0];
        for layer in &self.layers {
            x = match *layer {
                Layer::Linear { w, b, tanh } => {
                    let h = tape.matmul(x, v[w])?;
                    let h = tape.add_row(h, v[b])?;
                    if tanh {
                        tape.tanh(h)
                    } else {
                        h
                    }
                }
                Layer::Norm { gain, bias } => tape.layer_norm(x, v[gain], v[bias], 1e-5)?,
                Layer::Attention { wq, wk, gain, bias } => {
                    let q = tape.matmul(x, v[wq])?;
                    let k = tape.matmul(x, v[wk])?;
                    let s = tape.matmul_bt(q, k)?;
                    let width = tape.value(x).shape()[1];
                    let s = tape.scale(s, 1.0 / (width as f64).sqrt());
                    let p = tape.softmax_rows(s, None)?;
                    let mixed = tape.matmul(p, x)?;
                    let res = tape.add(x, mixed)?;
                    tape.layer_norm(res, v[gain], v[bias], 1e-5)?
                }
                Layer::Gate { w } => {
                    let g = tape.matmul(x, v[w])?;
                    let g = tape.tanh(g);
                    tape.mul(x, g)?
                }
            };
        }
        match self.head {
            Head::Squares => {
                let sq = tape.mul(x, x)?;
                Ok(tape.mean(sq))
            }
            Head::Pointer { visible, index } => {
                let rows = tape.value(x).shape()[0];
                let width = tape.value(x).shape()[1];
                let q = tape.mean_rows(x)?;
                let logits = tape.matmul_bt(q, x)?;
                let logits = tape.scale(logits, 1.0 / (width as f64).sqrt());
                let mask: Vec<bool> = (0..rows).map(|r| visible & (1 << r) != 0).collect();
                tape.log_softmax_pick(logits, Some(&mask), index)
            }
            Head::Pooled => {
                let pooled = tape.mean_rows(x)?;
                let t = tape.tanh(pooled);
                Ok(tape.sum(t))
            }
        }
    }
}

/// Builds [`RandomNetwork::new`]`(seed)` and checks its gradients.
pub fn check_random_network(seed: u64, cfg: GradCheck) -> Result<f64> {
    let net = RandomNetwork::new(seed);
    check_gradients(&net.inputs, cfg, |tape, v| net.forward(tape, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_networks_pass() {
        let cfg = GradCheck { step: 1e-6, tolerance: 1e-4 };
        for seed in 0..25 {
            let err = check_random_network(seed, cfg).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn mismatched_gradients_are_caught() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 0.7]).unwrap();
        let square = |t: &mut Tape, v: &[Var]| {
            let s = t.mul(v[0], v[0])?;
            Ok(t.sum(s))
        };
        assert!(check_gradients(std::slice::from_ref(&x), GradCheck { step: 1e-6, tolerance: 1e-6 }, square).is_ok());
        let (_, analytic) = analytic_gradients(std::slice::from_ref(&x), &square).unwrap();
        let numeric = numeric_gradients(&[x], 1e-6, &|t, v| {
            let a = t.abs(v[0]);
            Ok(t.sum(a))
        })
        .unwrap();
        assert!(relative_error(analytic[0].data(), numeric[0].data()) > 0.1);
    }
}
