//! Small neural building blocks on top of the autodiff engine.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ndarray::{ArrayD, IxDyn};

use crate::autodiff::{AdResult, Arr, ParameterSet, Value};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, drawn in row-major order.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Arr {
    let k = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-k..k))
}

/// Fully connected layer `y = x W + b` over row-batched inputs.
pub struct Linear {
    pub w: Value,
    pub b: Value,
}

impl Linear {
    pub fn new(
        ps: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> AdResult<Self> {
        let w = Value::param(init_uniform(rng, &[in_dim, out_dim], in_dim));
        let b = Value::param(init_uniform(rng, &[out_dim], in_dim));
        ps.insert(&format!("{name}/w"), w.clone(), true)?;
        ps.insert(&format!("{name}/b"), b.clone(), true)?;
        Ok(Self { w, b })
    }

    /// `x`: `[rows, in_dim]` -> `[rows, out_dim]`.
    pub fn forward(&self, x: &Value) -> AdResult<Value> {
        x.matmul(&self.w)?.add(&self.b)
    }
}

/// Gated recurrent cell with the usual three-gate form:
///   r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
///   z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
///   n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
///   h' = (1 - z) * n + z * h
/// Gate blocks are packed `[r | z | n]` along the output axis.
pub struct GruCell {
    pub wx: Value,
    pub bx: Value,
    pub wh: Value,
    pub bh: Value,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        ps: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> AdResult<Self> {
        let wx = Value::param(init_uniform(rng, &[in_dim, 3 * hidden], hidden));
        let bx = Value::param(init_uniform(rng, &[3 * hidden], hidden));
        let wh = Value::param(init_uniform(rng, &[hidden, 3 * hidden], hidden));
        let bh = Value::param(init_uniform(rng, &[3 * hidden], hidden));
        ps.insert(&format!("{name}/wx"), wx.clone(), true)?;
        ps.insert(&format!("{name}/bx"), bx.clone(), true)?;
        ps.insert(&format!("{name}/wh"), wh.clone(), true)?;
        ps.insert(&format!("{name}/bh"), bh.clone(), true)?;
        Ok(Self {
            wx,
            bx,
            wh,
            bh,
            hidden,
        })
    }

    /// One step over row-batched inputs. With `xp` the precomputed input
    /// projection `x W_x + b_x`, only the hidden path is evaluated here.
    pub fn step_with_projected(&self, xp: &Value, h: &Value) -> AdResult<Value> {
        let hd = self.hidden;
        let hp = h.matmul(&self.wh)?.add(&self.bh)?;
        let r = xp
            .slice_axis(1, 0..hd)?
            .add(&hp.slice_axis(1, 0..hd)?)?
            .sigmoid();
        let z = xp
            .slice_axis(1, hd..2 * hd)?
            .add(&hp.slice_axis(1, hd..2 * hd)?)?
            .sigmoid();
        let n = xp
            .slice_axis(1, 2 * hd..3 * hd)?
            .add(&r.mul(&hp.slice_axis(1, 2 * hd..3 * hd)?)?)?
            .tanh();
        // h' = (1 - z) * n + z * h = n - z*n + z*h
        n.sub(&z.mul(&n)?)?.add(&z.mul(h)?)
    }

    pub fn project_input(&self, x: &Value) -> AdResult<Value> {
        x.matmul(&self.wx)?.add(&self.bx)
    }

    pub fn step(&self, x: &Value, h: &Value) -> AdResult<Value> {
        let xp = self.project_input(x)?;
        self.step_with_projected(&xp, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn linear_shapes_and_registration() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut ps, "lin", 4, 3, &mut rng).unwrap();
        assert_eq!(ps.len(), 2);
        let x = Value::constant(ArrayD::zeros(IxDyn(&[2, 4])));
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.shape(), vec![2, 3]);
    }

    /// Hand-rolled recurrence oracle: a 3-step GRU chain replayed step by
    /// step with plain scalar math must match the batched cell.
    #[test]
    fn gru_matches_scalar_recurrence_oracle() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cell = GruCell::new(&mut ps, "gru", 3, 2, &mut rng).unwrap();
        let wx = cell.wx.data_clone();
        let bx = cell.bx.data_clone();
        let wh = cell.wh.data_clone();
        let bh = cell.bh.data_clone();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let inputs: Vec<[f64; 3]> = vec![[0.3, -0.2, 0.5], [-1.0, 0.4, 0.1], [0.2, 0.2, -0.7]];

        // scalar oracle
        let mut h_oracle = [0.0f64; 2];
        for x in &inputs {
            let mut gx = [0.0f64; 6];
            let mut gh = [0.0f64; 6];
            for j in 0..6 {
                for (i, xi) in x.iter().enumerate() {
                    gx[j] += xi * wx[[i, j]];
                }
                gx[j] += bx[[j]];
                for (i, hi) in h_oracle.iter().enumerate() {
                    gh[j] += hi * wh[[i, j]];
                }
                gh[j] += bh[[j]];
            }
            let mut h_new = [0.0f64; 2];
            for k in 0..2 {
                let r = sig(gx[k] + gh[k]);
                let z = sig(gx[2 + k] + gh[2 + k]);
                let n = (gx[4 + k] + r * gh[4 + k]).tanh();
                h_new[k] = (1.0 - z) * n + z * h_oracle[k];
            }
            h_oracle = h_new;
        }

        // batched cell
        let mut h = Value::constant(ArrayD::zeros(IxDyn(&[1, 2])));
        for x in &inputs {
            let xv = Value::constant(
                ArrayD::from_shape_vec(IxDyn(&[1, 3]), x.to_vec()).unwrap(),
            );
            h = cell.step(&xv, &h).unwrap();
        }
        let hd = h.data_clone();
        for k in 0..2 {
            assert!(
                (hd[[0, k]] - h_oracle[k]).abs() < 1e-12,
                "h[{k}]: {} vs oracle {}",
                hd[[0, k]],
                h_oracle[k]
            );
        }
    }
}
