//! Flat, named parameter storage.
//!
//! Every learnable tensor lives in one contiguous `Vec<f64>` so that
//! checkpoints, the optimizer and finite-difference probes can treat the
//! model as a single vector. Each entry records its name, shape and offset.

use std::ops::Range;

use rand::Rng;

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-level group, e.g. `backbone` for `backbone.conv1.w`.
    pub fn group(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a store from a saved layout; `data` must cover every entry.
    pub fn from_parts(entries: Vec<ParamEntry>, data: Vec<f64>) -> Option<Self> {
        let mut expected = 0;
        for e in &entries {
            if e.offset != expected {
                return None;
            }
            expected += e.len();
        }
        (expected == data.len()).then_some(Self { entries, data })
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name,
            rows: value.rows(),
            cols: value.cols(),
            offset: self.data.len(),
        });
        self.data.extend_from_slice(value.as_slice());
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Matrix::zeros(rows, cols))
    }

    /// Uniform Glorot initialisation for a `fan_in × fan_out` weight.
    pub fn glorot<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, fan_in, fan_out, limit, rng)
    }

    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        limit: f64,
        rng: &mut R,
    ) -> ParamId {
        let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..=limit));
        self.add(name, m)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        let e = &self.entries[id.0];
        e.offset..e.offset + e.len()
    }

    pub fn matrix(&self, id: ParamId) -> Matrix {
        let e = &self.entries[id.0];
        Matrix::from_vec(e.rows, e.cols, self.data[self.range(id)].to_vec()).expect("entry shape matches range")
    }

    pub fn set(&mut self, id: ParamId, value: &Matrix) {
        let e = &self.entries[id.0];
        assert_eq!((e.rows, e.cols), value.shape(), "param {} shape", e.name);
        let r = self.range(id);
        self.data[r].copy_from_slice(value.as_slice());
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Names of the distinct top-level groups, in declaration order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.iter().any(|g| g == e.group()) {
                out.push(e.group().to_string());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_contiguous() {
        let mut s = ParamStore::new();
        let a = s.zeros("a.w", 2, 3);
        let b = s.add("b.w", Matrix::filled(1, 4, 2.0));
        assert_eq!(s.range(a), 0..6);
        assert_eq!(s.range(b), 6..10);
        assert_eq!(s.matrix(b).as_slice(), &[2.0; 4]);
        assert_eq!(s.groups(), vec!["a", "b"]);
        let rebuilt = ParamStore::from_parts(s.entries().to_vec(), s.flat().to_vec()).unwrap();
        assert_eq!(rebuilt, s);
    }

    #[test]
    fn from_parts_rejects_gaps() {
        let entries = vec![ParamEntry {
            name: "x".into(),
            rows: 1,
            cols: 2,
            offset: 1,
        }];
        assert!(ParamStore::from_parts(entries, vec![0.0; 3]).is_none());
    }
}
