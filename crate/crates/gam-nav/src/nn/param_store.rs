use rand::Rng;

use crate::error::{GamError, Result};

/// One named parameter block: a `rows x cols` matrix stored row-major,
/// with a same-shaped gradient accumulator and optimizer slots.
#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    /// First-moment (Adam) or mean-square (RMSProp) accumulator.
    pub(crate) slot_m: Vec<f64>,
    /// Second-moment accumulator (Adam only).
    pub(crate) slot_v: Vec<f64>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// A flat store of named parameter blocks plus optimizer state.
///
/// Blocks keep insertion order; coordinate indices used by the gradient
/// checker range over the concatenation of all blocks in that order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: Vec<Block>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        let n = rows * cols;
        self.blocks.push(Block {
            name: name.to_string(),
            rows,
            cols,
            values: vec![0.0; n],
            grads: vec![0.0; n],
            slot_m: vec![0.0; n],
            slot_v: vec![0.0; n],
        });
    }

    /// Glorot-uniform init in +-sqrt(6 / (fan_in + fan_out)).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = rows * cols;
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.blocks.push(Block {
            name: name.to_string(),
            rows,
            cols,
            values,
            grads: vec![0.0; n],
            slot_m: vec![0.0; n],
            slot_v: vec![0.0; n],
        });
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn block(&self, name: &str) -> &Block {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("no parameter block named {name}"))
    }

    pub fn block_mut(&mut self, name: &str) -> &mut Block {
        self.blocks
            .iter_mut()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("no parameter block named {name}"))
    }

    pub fn has_block(&self, name: &str) -> bool {
        self.blocks.iter().any(|b| b.name == name)
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            b.grads.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn locate(&self, coord: usize) -> (usize, usize) {
        let mut off = coord;
        for (i, b) in self.blocks.iter().enumerate() {
            if off < b.len() {
                return (i, off);
            }
            off -= b.len();
        }
        panic!("coordinate {coord} out of range ({} params)", self.n_params());
    }

    pub fn coord(&self, i: usize) -> f64 {
        let (b, o) = self.locate(i);
        self.blocks[b].values[o]
    }

    pub fn set_coord(&mut self, i: usize, v: f64) {
        let (b, o) = self.locate(i);
        self.blocks[b].values[o] = v;
    }

    pub fn grad_coord(&self, i: usize) -> f64 {
        let (b, o) = self.locate(i);
        self.blocks[b].grads[o]
    }

    fn check_grads_finite(&self) -> Result<()> {
        for b in &self.blocks {
            if b.grads.iter().any(|g| !g.is_finite()) {
                return Err(GamError::Numerical(format!(
                    "non-finite gradient in block '{}' at step {}",
                    b.name, self.step
                )));
            }
        }
        Ok(())
    }

    fn check_values_finite(&self) -> Result<()> {
        for b in &self.blocks {
            if b.values.iter().any(|v| !v.is_finite()) {
                return Err(GamError::Numerical(format!(
                    "non-finite parameter in block '{}' at step {}",
                    b.name, self.step
                )));
            }
        }
        Ok(())
    }

    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.check_grads_finite()?;
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - B1.powf(t);
        let c2 = 1.0 - B2.powf(t);
        for b in &mut self.blocks {
            for i in 0..b.values.len() {
                let g = b.grads[i];
                b.slot_m[i] = B1 * b.slot_m[i] + (1.0 - B1) * g;
                b.slot_v[i] = B2 * b.slot_v[i] + (1.0 - B2) * g * g;
                let mh = b.slot_m[i] / c1;
                let vh = b.slot_v[i] / c2;
                b.values[i] -= lr * mh / (vh.sqrt() + EPS);
            }
        }
        self.check_values_finite()
    }

    /// RMSProp with decay = 0.99, eps = 1e-5.
    pub fn rmsprop_step(&mut self, lr: f64) -> Result<()> {
        const DECAY: f64 = 0.99;
        const EPS: f64 = 1e-5;
        self.check_grads_finite()?;
        self.step += 1;
        for b in &mut self.blocks {
            for i in 0..b.values.len() {
                let g = b.grads[i];
                b.slot_m[i] = DECAY * b.slot_m[i] + (1.0 - DECAY) * g * g;
                b.values[i] -= lr * g / (b.slot_m[i].sqrt() + EPS);
            }
        }
        self.check_values_finite()
    }

    /// Squared L2 norm of all gradients.
    pub fn grad_sq_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.grads.iter())
            .map(|g| g * g)
            .sum()
    }

    /// Scale every gradient by `s`.
    pub fn scale_grads(&mut self, s: f64) {
        for b in &mut self.blocks {
            b.grads.iter_mut().for_each(|g| *g *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_first_step_moves_by_about_lr() {
        let mut ps = ParamStore::new();
        ps.add_zeros("p", 1, 1);
        ps.block_mut("p").grads[0] = 3.7;
        ps.adam_step(0.01).unwrap();
        let p = ps.block("p").values[0];
        // first Adam step has magnitude ~ lr * sign(g)
        assert!((p + 0.01).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn zero_grad_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new();
        ps.add_uniform("w", 3, 4, 4, 3, &mut rng);
        let before = ps.block("w").values.clone();
        ps.adam_step(0.1).unwrap();
        assert_eq!(before, ps.block("w").values);
        ps.rmsprop_step(0.1).unwrap();
        assert_eq!(before, ps.block("w").values);
    }

    #[test]
    fn adam_two_steps_monotone_against_grad_sign() {
        let mut ps = ParamStore::new();
        ps.add_zeros("p", 1, 1);
        ps.block_mut("p").grads[0] = 1.0;
        ps.adam_step(0.01).unwrap();
        let p1 = ps.block("p").values[0];
        ps.block_mut("p").grads[0] = 1.0;
        ps.adam_step(0.01).unwrap();
        let p2 = ps.block("p").values[0];
        assert!(p1 < 0.0 && p2 < p1);
    }

    #[test]
    fn rmsprop_constant_grad_delta_approaches_lr() {
        let mut ps = ParamStore::new();
        ps.add_zeros("p", 1, 1);
        let lr = 0.01;
        let mut prev = 0.0;
        let mut delta = 0.0;
        for _ in 0..2000 {
            ps.block_mut("p").grads[0] = 2.0;
            ps.rmsprop_step(lr).unwrap();
            let cur = ps.block("p").values[0];
            delta = prev - cur;
            prev = cur;
        }
        // accumulator saturates at g^2, so per-step delta -> lr * g/|g|
        assert!((delta - lr).abs() < 1e-4, "delta = {delta}");
    }

    #[test]
    fn non_finite_grad_aborts() {
        let mut ps = ParamStore::new();
        ps.add_zeros("p", 1, 1);
        ps.block_mut("p").grads[0] = f64::NAN;
        assert!(ps.adam_step(0.01).is_err());
    }

    #[test]
    fn coord_roundtrip_spans_blocks() {
        let mut ps = ParamStore::new();
        ps.add_zeros("a", 2, 2);
        ps.add_zeros("b", 1, 3);
        assert_eq!(ps.n_params(), 7);
        ps.set_coord(5, 9.0);
        assert_eq!(ps.block("b").values[1], 9.0);
        assert_eq!(ps.coord(5), 9.0);
    }
}
