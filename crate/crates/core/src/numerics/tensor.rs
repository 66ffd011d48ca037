//! Storage types: f32 [`Tensor`]s grouped in a [`ParamStore`], the f64
//! [`Matrix`] that all computation runs on, and [`Grads`] mirroring a store.

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Dense row-major f32 array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                context: "Tensor::new".into(),
                expected: vec![n],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Widen to a matrix. Rank-1 tensors become a single row.
    pub fn to_matrix(&self) -> Matrix {
        let (rows, cols) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.data.len()),
        };
        Matrix {
            rows,
            cols,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Dense row-major f64 matrix; rows are samples, columns are features.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                context: "Matrix::new".into(),
                expected: vec![rows, cols],
                actual: vec![data.len()],
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    context: "Matrix::from_rows".into(),
                    expected: vec![cols],
                    actual: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Narrow to an f32 tensor of shape `[rows, cols]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            vec![self.rows, self.cols],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Round every entry through f32, the storage precision.
    pub fn round_to_f32(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f64::from(v as f32)).collect(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape {
                    context: "Matrix::vstack".into(),
                    expected: vec![cols],
                    actual: vec![p.cols],
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// Ordered collection of named parameter tensors. Iteration follows
/// insertion order, which is fixed by the network constructors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate tensor name `{name}`")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar parameters across all tensors.
    pub fn total_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    /// Error unless `other` has the same names, order, and shapes.
    pub fn check_same_layout(&self, other: &ParamStore, context: &str) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape {
                context: format!("{context}: tensor count"),
                expected: vec![self.entries.len()],
                actual: vec![other.entries.len()],
            });
        }
        for ((ka, ta), (kb, tb)) in self.entries.iter().zip(other.entries.iter()) {
            if ka != kb {
                return Err(Error::invalid(format!(
                    "{context}: tensor order differs (`{ka}` vs `{kb}`)"
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Shape {
                    context: format!("{context}: `{ka}`"),
                    expected: ta.shape().to_vec(),
                    actual: tb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Flat copy of all parameters in iteration order.
    pub fn flatten(&self) -> Vec<f32> {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

/// Gradients keyed like a [`ParamStore`], held in f64.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    entries: IndexMap<String, Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            entries: store
                .iter()
                .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Vec<f64>) {
        self.entries.insert(name.into(), g);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &Grads) -> f64 {
        self.entries
            .iter()
            .map(|(k, g)| {
                other
                    .entries
                    .get(k)
                    .map_or(0.0, |h| g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>())
            })
            .sum()
    }

    pub fn scaled(&self, s: f64) -> Grads {
        Grads {
            entries: self
                .entries
                .iter()
                .map(|(k, g)| (k.clone(), g.iter().map(|v| v * s).collect()))
                .collect(),
        }
    }

    /// `self += s * other`, for names present in both.
    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for (k, g) in self.entries.iter_mut() {
            if let Some(h) = other.entries.get(k) {
                for (a, b) in g.iter_mut().zip(h) {
                    *a += s * b;
                }
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|g| g.iter().copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().all(|g| g.iter().all(|&v| v == 0.0))
    }
}
