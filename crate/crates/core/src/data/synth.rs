//! Synthetic majority-vote task on an 8×8 token grid.
//!
//! Each token is one of `K` orthogonal unit prototypes plus Gaussian noise;
//! the label is the prototype assigned to the most tokens. Solving it needs
//! global aggregation over the grid.

use super::Rng;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Generator parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthTask {
    pub grid: (usize, usize),
    pub token_dim: usize,
    pub classes: usize,
    pub noise: f64,
}

impl Default for SynthTask {
    fn default() -> Self {
        SynthTask { grid: (8, 8), token_dim: 16, classes: 4, noise: 0.5 }
    }
}

/// Inputs `[B, H, W, C]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Gathers the given samples into a new batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.inputs.len() / self.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..][..per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset { inputs: self.inputs.cast(), labels: self.labels.clone(), num_classes: self.num_classes }
    }
}

impl SynthTask {
    pub fn with_noise(noise: f64) -> Self {
        SynthTask { noise, ..Self::default() }
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Prototype `k` is the `k`-th standard basis vector.
    pub fn prototype(&self, k: usize) -> Vec<f64> {
        (0..self.token_dim).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
    }

    /// One sample. Per token (row-major): one class draw, then one Gaussian
    /// per dimension in ascending order. Samples whose majority is tied are
    /// discarded and regenerated from the continuing stream.
    pub fn sample(&self, rng: &mut Rng) -> (Vec<f64>, usize) {
        let (n, dim) = (self.tokens(), self.token_dim);
        loop {
            let mut counts = vec![0usize; self.classes];
            let mut values = Vec::with_capacity(n * dim);
            for _ in 0..n {
                let class = rng.below(self.classes);
                counts[class] += 1;
                for i in 0..dim {
                    let base = if i == class { 1.0 } else { 0.0 };
                    values.push(base + self.noise * rng.gaussian());
                }
            }
            let best = *counts.iter().max().expect("classes > 0");
            let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
            let (label, _) = winners.next().expect("a maximum exists");
            if winners.next().is_none() {
                return (values, label);
            }
        }
    }

    /// `batch` consecutive samples from `rng`, shaped `[B, H, W, dim]`.
    pub fn gen_synth_batch<T: Scalar>(&self, rng: &mut Rng, batch: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(batch * self.tokens() * self.token_dim);
        let mut labels = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (v, l) = self.sample(rng);
            data.extend(v.into_iter().map(T::from_f64));
            labels.push(l);
        }
        let inputs = Tensor::new([batch, self.grid.0, self.grid.1, self.token_dim], data)?;
        Ok((inputs, labels))
    }

    /// Deterministic dataset: sample `i` is drawn from `Rng::stream(seed, i)`.
    pub fn dataset<T: Scalar>(&self, seed: u64, size: usize) -> Result<Dataset<T>> {
        let mut data = Vec::with_capacity(size * self.tokens() * self.token_dim);
        let mut labels = Vec::with_capacity(size);
        for i in 0..size {
            let (v, l) = self.sample(&mut Rng::stream(seed, i as u64));
            data.extend(v.into_iter().map(T::from_f64));
            labels.push(l);
        }
        let inputs = Tensor::new([size, self.grid.0, self.grid.1, self.token_dim], data)?;
        Ok(Dataset { inputs, labels, num_classes: self.classes })
    }
}
