use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{input_err, FadeError, Result};

/// Row-major activation matrix. Activations are kept in 64-bit; parameters
/// are stored in 32-bit and widened when a forward pass resolves them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// A named parameter of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub layer_id: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub requires_grad: bool,
}

impl ParamTensor {
    pub fn new(layer_id: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let layer_id = layer_id.into();
        let n: usize = shape.iter().product();
        if n != values.len() {
            return input_err(format!("parameter {layer_id}: shape {shape:?} holds {n} values but {} were given", values.len()));
        }
        Ok(Self { layer_id, shape, values, requires_grad: true })
    }

    pub fn zeros(layer_id: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { layer_id: layer_id.into(), shape, values: vec![0.0; n], requires_grad: true }
    }

    pub fn filled(layer_id: impl Into<String>, shape: Vec<usize>, v: f32) -> Self {
        let mut p = Self::zeros(layer_id, shape);
        p.values.iter_mut().for_each(|x| *x = v);
        p
    }

    pub fn gaussian<R: Rng>(layer_id: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(layer_id, shape);
        for v in &mut p.values {
            let z: f64 = rng.sample(StandardNormal);
            *v = (z * std) as f32;
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Ordered parameter collection with unique layer ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: ParamTensor) -> Result<()> {
        if self.index.contains_key(&p.layer_id) {
            return input_err(format!("duplicate layer id {}", p.layer_id));
        }
        self.index.insert(p.layer_id.clone(), self.tensors.len());
        self.tensors.push(p);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ParamTensor> {
        self.index.get(id).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut ParamTensor> {
        match self.index.get(id) {
            Some(&i) => Some(&mut self.tensors[i]),
            None => None,
        }
    }

    pub fn require(&self, id: &str) -> Result<&ParamTensor> {
        self.get(id).ok_or_else(|| FadeError::Input(format!("unknown layer id {id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.layer_id.as_str())
    }
}

/// Gradient arrays keyed by layer id, accumulated in 64-bit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, g: Vec<f64>) {
        self.map.insert(id.into(), g);
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.map.get(id).map(|v| v.as_slice())
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Vec<f64>> {
        self.map.get_mut(id)
    }

    /// Slot for `id`, zero-initialised with `len` entries on first access.
    pub fn entry(&mut self, id: &str, len: usize) -> &mut Vec<f64> {
        self.map.entry(id.to_string()).or_insert_with(|| vec![0.0; len])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Vec<f64>)> {
        self.map.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise `self += other`, adding missing keys.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, g) in &other.map {
            let slot = self.entry(k, g.len());
            for (a, b) in slot.iter_mut().zip(g) {
                *a += *b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.map.retain(|k, _| keep(k));
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}
