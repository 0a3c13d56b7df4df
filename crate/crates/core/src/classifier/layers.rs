use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Affine map `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Dense {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense::zeros(self.inputs, self.outputs)
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.inputs..(o + 1) * self.inputs]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        (0..self.outputs)
            .map(|o| dot(self.row(o), x) + self.bias[o])
            .collect()
    }

    /// `W[:, cols] x` without bias.
    pub fn forward_columns(&self, cols: std::ops::Range<usize>, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), cols.len());
        (0..self.outputs)
            .map(|o| dot(&self.row(o)[cols.clone()], x))
            .collect()
    }

    /// `out = W[:, cols] x` without bias.
    pub fn forward_columns_into(&self, cols: std::ops::Range<usize>, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), cols.len());
        for (o, y) in out.iter_mut().enumerate() {
            *y = dot(&self.row(o)[cols.clone()], x);
        }
    }

    /// Accumulate `dW += g x^T` over `cols` (bias untouched).
    pub fn accumulate_outer(&mut self, cols: std::ops::Range<usize>, g: &[f64], x: &[f64], scale: f64) {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            let row = &mut self.weight[o * self.inputs..(o + 1) * self.inputs];
            for (w, &xv) in row[cols.clone()].iter_mut().zip(x) {
                *w += scale * go * xv;
            }
        }
    }

    /// `dx += W[:, cols]^T g`.
    pub fn backprop_columns(&self, cols: std::ops::Range<usize>, g: &[f64], dx: &mut [f64], scale: f64) {
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            for (d, &w) in dx.iter_mut().zip(&self.row(o)[cols.clone()]) {
                *d += scale * go * w;
            }
        }
    }
}

#[inline]
/// Dot product over eight interleaved partial sums.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Squared Euclidean distance, summed like [`dot`].
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Row-major `rows x cols` matrix of node features.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NodeMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        NodeMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<const F: usize>(rows: &[[f64; F]]) -> Self {
        NodeMatrix {
            rows: rows.len(),
            cols: F,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Groups bit-identical rows: the first row of each class, in order, and
    /// the class of every row.
    pub fn row_classes(&self) -> (Vec<usize>, Vec<usize>) {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::with_capacity(self.rows);
        let mut reps = Vec::new();
        let class = (0..self.rows)
            .map(|r| {
                let key: Vec<u64> = self.row(r).iter().map(|v| v.to_bits()).collect();
                *seen.entry(key).or_insert_with(|| {
                    reps.push(r);
                    reps.len() - 1
                })
            })
            .collect();
        (reps, class)
    }
}
