//! Single LSTM cell with analytic backward, used by the recurrent
//! baseline policy.

use rand::Rng;

use super::mlp::sigmoid;
use super::param_store::ParamStore;
use crate::error::{GamError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(n: usize) -> Self {
        Self {
            hidden: vec![0.0; n],
            cell: vec![0.0; n],
        }
    }
}

/// Gate pre-activations and inputs cached for backward.
#[derive(Debug, Clone)]
pub struct LstmTape {
    input: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_new: Vec<f64>,
}

/// LSTM cell bound to blocks `{prefix}.w_ih` (4H x I), `{prefix}.w_hh`
/// (4H x H) and `{prefix}.b` (4H). Gate order: input, forget, candidate,
/// output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub prefix: String,
}

impl Lstm {
    pub fn new(input_dim: usize, hidden_dim: usize, prefix: &str) -> Self {
        Self {
            input_dim,
            hidden_dim,
            prefix: prefix.to_string(),
        }
    }

    fn names(&self) -> (String, String, String) {
        (
            format!("{}.w_ih", self.prefix),
            format!("{}.w_hh", self.prefix),
            format!("{}.b", self.prefix),
        )
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let (wih, whh, b) = self.names();
        let h4 = 4 * self.hidden_dim;
        store.add_uniform(&wih, h4, self.input_dim, self.input_dim, self.hidden_dim, rng);
        store.add_uniform(&whh, h4, self.hidden_dim, self.hidden_dim, self.hidden_dim, rng);
        store.add_zeros(&b, h4, 1);
    }

    pub fn step(
        &self,
        store: &ParamStore,
        input: &[f64],
        state: &LstmState,
    ) -> Result<(LstmState, LstmTape)> {
        if input.len() != self.input_dim {
            return Err(GamError::Dimension {
                context: format!("lstm '{}' input", self.prefix),
                expected: self.input_dim,
                got: input.len(),
            });
        }
        if state.hidden.len() != self.hidden_dim || state.cell.len() != self.hidden_dim {
            return Err(GamError::Dimension {
                context: format!("lstm '{}' state", self.prefix),
                expected: self.hidden_dim,
                got: state.hidden.len(),
            });
        }
        let (wih, whh, bn) = self.names();
        let wih = store.block(&wih);
        let whh = store.block(&whh);
        let b = store.block(&bn);
        let h = self.hidden_dim;
        let mut z = vec![0.0; 4 * h];
        for r in 0..4 * h {
            let mut acc = b.values[r];
            let row = wih.row(r);
            for (wv, xv) in row.iter().zip(input.iter()) {
                acc += wv * xv;
            }
            let row = whh.row(r);
            for (wv, hv) in row.iter().zip(state.hidden.iter()) {
                acc += wv * hv;
            }
            z[r] = acc;
        }
        let i: Vec<f64> = z[0..h].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = z[2 * h..3 * h].iter().map(|&v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * h..4 * h].iter().map(|&v| sigmoid(v)).collect();
        let mut c_new = vec![0.0; h];
        let mut h_new = vec![0.0; h];
        for k in 0..h {
            c_new[k] = f[k] * state.cell[k] + i[k] * g[k];
            h_new[k] = o[k] * c_new[k].tanh();
        }
        let tape = LstmTape {
            input: input.to_vec(),
            h_prev: state.hidden.clone(),
            c_prev: state.cell.clone(),
            i,
            f,
            g,
            o,
            c_new: c_new.clone(),
        };
        Ok((
            LstmState {
                hidden: h_new,
                cell: c_new,
            },
            tape,
        ))
    }

    /// Backward one step. `dh` / `dc` are gradients w.r.t. the new hidden
    /// and cell state; returns (d_input, d_h_prev, d_c_prev).
    pub fn backward_step(
        &self,
        store: &mut ParamStore,
        tape: &LstmTape,
        dh: &[f64],
        dc: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden_dim;
        let mut dz = vec![0.0; 4 * h];
        let mut dc_total = vec![0.0; h];
        for k in 0..h {
            let tanh_c = tape.c_new[k].tanh();
            let do_ = dh[k] * tanh_c;
            let dct = dh[k] * tape.o[k] * (1.0 - tanh_c * tanh_c) + dc[k];
            dc_total[k] = dct;
            let di = dct * tape.g[k];
            let df = dct * tape.c_prev[k];
            let dg = dct * tape.i[k];
            dz[k] = di * tape.i[k] * (1.0 - tape.i[k]);
            dz[h + k] = df * tape.f[k] * (1.0 - tape.f[k]);
            dz[2 * h + k] = dg * (1.0 - tape.g[k] * tape.g[k]);
            dz[3 * h + k] = do_ * tape.o[k] * (1.0 - tape.o[k]);
        }
        let dc_prev: Vec<f64> = (0..h).map(|k| dc_total[k] * tape.f[k]).collect();

        let (wihn, whhn, bn) = self.names();
        let mut dinput = vec![0.0; self.input_dim];
        let mut dh_prev = vec![0.0; h];
        {
            let wih = store.block(&wihn);
            for r in 0..4 * h {
                let row = wih.row(r);
                for (c, wv) in row.iter().enumerate() {
                    dinput[c] += wv * dz[r];
                }
            }
            let whh = store.block(&whhn);
            for r in 0..4 * h {
                let row = whh.row(r);
                for (c, wv) in row.iter().enumerate() {
                    dh_prev[c] += wv * dz[r];
                }
            }
        }
        {
            let wb = store.block_mut(&wihn);
            let cols = wb.cols;
            for r in 0..4 * h {
                let grow = &mut wb.grads[r * cols..(r + 1) * cols];
                for (c, gv) in grow.iter_mut().enumerate() {
                    *gv += dz[r] * tape.input[c];
                }
            }
        }
        {
            let wb = store.block_mut(&whhn);
            let cols = wb.cols;
            for r in 0..4 * h {
                let grow = &mut wb.grads[r * cols..(r + 1) * cols];
                for (c, gv) in grow.iter_mut().enumerate() {
                    *gv += dz[r] * tape.h_prev[c];
                }
            }
        }
        {
            let bb = store.block_mut(&bn);
            for (g, d) in bb.grads.iter_mut().zip(dz.iter()) {
                *g += d;
            }
        }
        (dinput, dh_prev, dc_prev)
    }
}
