//! Named parameter storage shared by every trainable block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::Matrix;

/// Handle to one parameter matrix inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Matrix::filled(rows, cols, v))
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    /// Glorot/Xavier uniform for a `fan_in x fan_out` weight.
    pub fn xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, fan_in, fan_out, bound, rng)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "shape change for parameter {}",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Flat view over every scalar, in registration order.
    pub fn flat_get(&self, mut index: usize) -> f64 {
        for v in &self.values {
            if index < v.len() {
                return v.as_slice()[index];
            }
            index -= v.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn flat_set(&mut self, mut index: usize, value: f64) {
        for v in &mut self.values {
            if index < v.len() {
                v.as_mut_slice()[index] = value;
                return;
            }
            index -= v.len();
        }
        panic!("flat parameter index out of range")
    }

    /// Appends copies of every parameter in `other`.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (name, value) in other.iter() {
            self.add(name, value.clone());
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((value.rows() as u64).to_le_bytes());
            h.update((value.cols() as u64).to_le_bytes());
            for v in value.as_slice() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradient accumulator shaped like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Matrix>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Matrix) {
        self.grads[id.0].add_assign(grad);
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn flat_get(&self, mut index: usize) -> f64 {
        for g in &self.grads {
            if index < g.len() {
                return g.as_slice()[index];
            }
            index -= g.len();
        }
        panic!("flat gradient index out of range")
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Matrix::norm_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            self.scale(max_norm / (norm + 1e-12));
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Matrix::all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checksum_tracks_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let w = s.xavier("w", 3, 2, &mut rng);
        let before = s.checksum();
        assert_eq!(before, s.clone().checksum());
        let x = s.get(w)[(0, 0)];
        s.get_mut(w)[(0, 0)] = f64::from_bits(x.to_bits() ^ 1);
        assert_ne!(before, s.checksum());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = ParamStore::new();
        let a = s.zeros("a", 1, 2);
        let mut g = GradStore::zeros_like(&s);
        g.accumulate(a, &Matrix::row_vector(&[3.0, 4.0]));
        let pre = g.clip_global_norm(1.0);
        assert_eq!(pre, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn flat_indexing_spans_parameters() {
        let mut s = ParamStore::new();
        s.add("a", Matrix::row_vector(&[1.0, 2.0]));
        s.add("b", Matrix::row_vector(&[3.0]));
        assert_eq!(s.num_scalars(), 3);
        assert_eq!(s.flat_get(2), 3.0);
        s.flat_set(1, 9.0);
        assert_eq!(s.get(ParamId(0)).as_slice(), &[1.0, 9.0]);
    }
}
