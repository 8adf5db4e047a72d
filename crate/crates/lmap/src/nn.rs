//! Minimal dense linear algebra and an Adam optimizer for the desk-scale
//! models in [`crate::codec`] and [`crate::prior`].
//!
//! Everything is `f64`, row-major, and single-threaded so training runs are
//! bit-reproducible for a fixed seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Uniform init in [-scale, scale].
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            y[r] = acc;
        }
        y
    }

    /// y = A^T x
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for (yc, a) in y.iter_mut().zip(row) {
                *yc += a * xr;
            }
        }
        y
    }

    /// A += u v^T (outer-product accumulate, used for gradients).
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            let ur = u[r];
            for (a, b) in self.row_mut(r).iter_mut().zip(v) {
                *a += ur * b;
            }
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn vec_uniform(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..=scale)).collect()
}

#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn add_assign(y: &mut [f64], x: &[f64]) {
    axpy(y, 1.0, x);
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn tanh_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// dL/d(pre-activation) given dL/d(tanh output) and the tanh output itself.
#[inline]
pub fn tanh_backward(d_out: &[f64], out: &[f64]) -> Vec<f64> {
    d_out
        .iter()
        .zip(out)
        .map(|(d, t)| d * (1.0 - t * t))
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// A named view over a model's parameter blocks. Implementors expose every
/// trainable block so optimizer steps, finite-difference checks and
/// checkpoint serialization stay generic.
pub trait ParamBlocks {
    fn block_names(&self) -> Vec<&'static str>;
    fn block(&self, name: &str) -> &[f64];
    fn block_mut(&mut self, name: &str) -> &mut [f64];

    fn param_count(&self) -> usize {
        self.block_names()
            .iter()
            .map(|n| self.block(n).len())
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.block_names()
            .iter()
            .all(|n| self.block(n).iter().all(|x| x.is_finite()))
    }
}

/// Adam with the usual bias correction. One instance per trained model.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: ParamBlocks>(params: &P, lr: f64) -> Self {
        let sizes: Vec<usize> = params
            .block_names()
            .iter()
            .map(|n| params.block(n).len())
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// Apply one step; `grads` must have the same block layout as `params`.
    pub fn step<P: ParamBlocks>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names = params.block_names();
        for (bi, name) in names.iter().enumerate() {
            let g = grads.block(name);
            let p = params.block_mut(name);
            if g.len() != p.len() {
                return Err(Error::DimMismatch(format!(
                    "gradient block {name}: {} vs {}",
                    g.len(),
                    p.len()
                )));
            }
            let m = &mut self.m[bi];
            let v = &mut self.v[bi];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, streams};

    #[test]
    fn matvec_and_transpose_agree_with_hand_values() {
        let a = Mat {
            rows: 2,
            cols: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        assert_eq!(a.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(a.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -100.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn outer_accumulate() {
        let mut a = Mat::zeros(2, 2);
        a.add_outer(&[1.0, 2.0], &[3.0, 4.0]);
        assert_eq!(a.data, vec![3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn uniform_init_is_seeded() {
        let mut r1 = stream_rng(1, streams::CODEC_INIT);
        let mut r2 = stream_rng(1, streams::CODEC_INIT);
        assert_eq!(
            Mat::uniform(3, 3, 0.1, &mut r1).data,
            Mat::uniform(3, 3, 0.1, &mut r2).data
        );
    }
}
