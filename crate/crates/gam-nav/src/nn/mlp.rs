//! Dense feed-forward network with an explicit activation tape for
//! exact backprop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::softmax;
use super::param_store::ParamStore;
use crate::error::{GamError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputMode {
    Linear,
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<usize>,
    pub activation: Activation,
    pub output: OutputMode,
}

impl MlpSpec {
    pub fn new(layers: Vec<usize>, activation: Activation, output: OutputMode) -> Result<Self> {
        if layers.len() < 2 {
            return Err(GamError::Config(format!(
                "MLP needs at least 2 layer sizes, got {}",
                layers.len()
            )));
        }
        if layers.contains(&0) {
            return Err(GamError::Config("MLP layer sizes must be >= 1".into()));
        }
        Ok(Self {
            layers,
            activation,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layers.last().unwrap()
    }
}

/// Activation cache from one forward pass; everything backward needs.
#[derive(Debug, Clone)]
pub struct MlpTape {
    input: Vec<f64>,
    /// Post-activation output of each hidden layer.
    hidden: Vec<Vec<f64>>,
    /// Final output after the output mode is applied.
    output: Vec<f64>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// A dense network bound to parameter blocks `{prefix}.w{i}` / `{prefix}.b{i}`
/// inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub prefix: String,
}

impl Mlp {
    pub fn new(spec: MlpSpec, prefix: &str) -> Self {
        Self {
            spec,
            prefix: prefix.to_string(),
        }
    }

    fn wname(&self, i: usize) -> String {
        format!("{}.w{}", self.prefix, i)
    }

    fn bname(&self, i: usize) -> String {
        format!("{}.b{}", self.prefix, i)
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for i in 0..self.spec.layers.len() - 1 {
            let fan_in = self.spec.layers[i];
            let fan_out = self.spec.layers[i + 1];
            store.add_uniform(&self.wname(i), fan_out, fan_in, fan_in, fan_out, rng);
            store.add_zeros(&self.bname(i), fan_out, 1);
        }
    }

    pub fn forward(&self, store: &ParamStore, input: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        if input.len() != self.spec.input_dim() {
            return Err(GamError::Dimension {
                context: format!("mlp '{}' input (layer 0)", self.prefix),
                expected: self.spec.input_dim(),
                got: input.len(),
            });
        }
        let n_layers = self.spec.layers.len() - 1;
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut cur: Vec<f64> = input.to_vec();
        for l in 0..n_layers {
            let w = store.block(&self.wname(l));
            let b = store.block(&self.bname(l));
            debug_assert_eq!(w.cols, cur.len(), "layer {l} weight shape");
            let mut z = vec![0.0; w.rows];
            for r in 0..w.rows {
                let row = w.row(r);
                let mut acc = b.values[r];
                for (wv, xv) in row.iter().zip(cur.iter()) {
                    acc += wv * xv;
                }
                z[r] = acc;
            }
            let last = l == n_layers - 1;
            if !last {
                match self.spec.activation {
                    Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
                    Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
                }
                hidden.push(z.clone());
                cur = z;
            } else {
                cur = match self.spec.output {
                    OutputMode::Linear => z,
                    OutputMode::Softmax => softmax(&z)?,
                    OutputMode::Sigmoid => z.iter().map(|v| sigmoid(*v)).collect(),
                };
            }
        }
        let tape = MlpTape {
            input: input.to_vec(),
            hidden,
            output: cur.clone(),
        };
        Ok((cur, tape))
    }

    /// Backprop `dL/d(output)` through the tape. Accumulates parameter
    /// gradients into the store and returns `dL/d(input)`.
    pub fn backward(&self, store: &mut ParamStore, tape: &MlpTape, dout: &[f64]) -> Vec<f64> {
        assert_eq!(dout.len(), self.spec.output_dim(), "dout length");
        let n_layers = self.spec.layers.len() - 1;

        // output mode jacobian -> dL/dz at last layer
        let mut dz: Vec<f64> = match self.spec.output {
            OutputMode::Linear => dout.to_vec(),
            OutputMode::Softmax => {
                let y = &tape.output;
                let dot: f64 = y.iter().zip(dout).map(|(yi, di)| yi * di).sum();
                y.iter().zip(dout).map(|(yi, di)| yi * (di - dot)).collect()
            }
            OutputMode::Sigmoid => tape
                .output
                .iter()
                .zip(dout)
                .map(|(yi, di)| di * yi * (1.0 - yi))
                .collect(),
        };

        for l in (0..n_layers).rev() {
            let below: &[f64] = if l == 0 { &tape.input } else { &tape.hidden[l - 1] };
            // accumulate dW, db; compute dL/d(below)
            let mut dbelow = vec![0.0; below.len()];
            {
                let wname = self.wname(l);
                let w = store.block(&wname);
                for r in 0..w.rows {
                    let row = w.row(r);
                    let d = dz[r];
                    for (c, wv) in row.iter().enumerate() {
                        dbelow[c] += wv * d;
                    }
                }
            }
            {
                let wname = self.wname(l);
                let wb = store.block_mut(&wname);
                let cols = wb.cols;
                for r in 0..wb.rows {
                    let d = dz[r];
                    let grow = &mut wb.grads[r * cols..(r + 1) * cols];
                    for (c, g) in grow.iter_mut().enumerate() {
                        *g += d * below[c];
                    }
                }
            }
            {
                let bname = self.bname(l);
                let bb = store.block_mut(&bname);
                for (g, d) in bb.grads.iter_mut().zip(dz.iter()) {
                    *g += d;
                }
            }
            if l > 0 {
                // activation jacobian of hidden layer l-1
                let h = &tape.hidden[l - 1];
                match self.spec.activation {
                    Activation::Relu => {
                        for (d, hv) in dbelow.iter_mut().zip(h.iter()) {
                            if *hv <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    Activation::Tanh => {
                        for (d, hv) in dbelow.iter_mut().zip(h.iter()) {
                            *d *= 1.0 - hv * hv;
                        }
                    }
                }
            }
            dz = dbelow;
        }
        dz
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check::grad_check;
    use approx::assert_abs_diff_eq;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu, OutputMode::Linear).unwrap();
        let mlp = Mlp::new(spec, "t");
        let mut store = ParamStore::new();
        for i in 0..2 {
            store.add_zeros(&format!("t.w{i}"), [4, 2][i], [3, 4][i]);
            store.add_zeros(&format!("t.b{i}"), [4, 2][i], 1);
        }
        let (out, _) = mlp.forward(&store, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer_relu() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu, OutputMode::Linear).unwrap();
        let mlp = Mlp::new(spec, "t");
        let mut store = ParamStore::new();
        store.add_zeros("t.w0", 2, 2);
        store.add_zeros("t.b0", 2, 1);
        store.block_mut("t.w0").values.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        // single-layer net: the "output" layer is linear, so apply relu by
        // treating it as a hidden layer in a 2-layer net instead
        let spec2 = MlpSpec::new(vec![2, 2, 2], Activation::Relu, OutputMode::Linear).unwrap();
        let mlp2 = Mlp::new(spec2, "u");
        store.add_zeros("u.w0", 2, 2);
        store.add_zeros("u.b0", 2, 1);
        store.add_zeros("u.w1", 2, 2);
        store.add_zeros("u.b1", 2, 1);
        store.block_mut("u.w0").values.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        store.block_mut("u.w1").values.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let (out, _) = mlp2.forward(&store, &[-1.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 2.0]);
        // linear single layer passes through
        let (out, _) = mlp.forward(&store, &[-1.0, 2.0]).unwrap();
        assert_eq!(out, vec![-1.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Relu, OutputMode::Linear).unwrap();
        let mlp = Mlp::new(spec, "t");
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        mlp.init_params(&mut store, &mut rng);
        let err = mlp.forward(&store, &[1.0]).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn finite_difference_check_3_4_2() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu, OutputMode::Linear).unwrap();
        let mlp = Mlp::new(spec, "t");
        let mut store = ParamStore::new();
        mlp.init_params(&mut store, &mut rng);
        let input = [0.3, -0.7, 1.1];
        // scalar loss: sum of outputs squared
        let max_err = grad_check(
            &mut store,
            200,
            1e-5,
            &mut rng,
            |store, with_grad| {
                let (out, tape) = mlp.forward(store, &input).unwrap();
                let loss: f64 = out.iter().map(|v| v * v).sum::<f64>() * 0.5;
                if with_grad {
                    let dout: Vec<f64> = out.clone();
                    mlp.backward(store, &tape, &dout);
                }
                loss
            },
        )
        .unwrap();
        assert!(max_err <= 1e-4, "max rel err {max_err}");
    }

    #[test]
    fn softmax_output_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::new(vec![3, 5, 4], Activation::Tanh, OutputMode::Softmax).unwrap();
        let mlp = Mlp::new(spec, "t");
        let mut store = ParamStore::new();
        mlp.init_params(&mut store, &mut rng);
        let input = [0.2, 0.9, -0.4];
        let max_err = grad_check(&mut store, 150, 1e-5, &mut rng, |store, with_grad| {
            let (out, tape) = mlp.forward(store, &input).unwrap();
            // cross-entropy against class 2
            let loss = -out[2].max(1e-12).ln();
            if with_grad {
                let mut dout = vec![0.0; 4];
                dout[2] = -1.0 / out[2].max(1e-12);
                mlp.backward(store, &tape, &dout);
            }
            loss
        })
        .unwrap();
        assert!(max_err <= 1e-4, "max rel err {max_err}");
    }

    #[test]
    fn sigmoid_output_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = MlpSpec::new(vec![4, 6, 1], Activation::Relu, OutputMode::Sigmoid).unwrap();
        let mlp = Mlp::new(spec, "t");
        let mut store = ParamStore::new();
        mlp.init_params(&mut store, &mut rng);
        let (out, _) = mlp.forward(&store, &[5.0, -3.0, 2.0, 0.1]).unwrap();
        assert!(out[0] > 0.0 && out[0] < 1.0);
        assert_abs_diff_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, OutputMode::Linear).is_err());
        assert!(MlpSpec::new(vec![3, 0], Activation::Relu, OutputMode::Linear).is_err());
    }
}
