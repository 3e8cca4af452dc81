use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named rank-≤2 parameter stored as row-major `f32`.
///
/// Vectors are `n × 1`. Tables flagged `row_sparse` (embedding lookups)
/// collect gradients per touched row instead of densely.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub row_sparse: bool,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
            row_sparse: false,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Xavier/Glorot uniform fill: `U(−a, a)` with `a = √(6 / (rows + cols))`.
    pub fn xavier_uniform(&mut self, rng: &mut impl Rng) {
        let a = (6.0 / (self.rows + self.cols) as f64).sqrt();
        for v in &mut self.data {
            *v = rng.random_range(-a..a) as f32;
        }
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(&tensor.name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{}`", tensor.name)));
        }
        if tensor.data.len() != tensor.rows * tensor.cols {
            return Err(Error::Shape {
                op: "ParamSet::insert",
                detail: format!(
                    "`{}` has {} values for shape {}x{}",
                    tensor.name,
                    tensor.data.len(),
                    tensor.rows,
                    tensor.cols
                ),
            });
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(tensor.name.clone(), id);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub enum GradBuf {
    Dense(Vec<f64>),
    Rows(BTreeMap<usize, Vec<f64>>),
}

/// Gradient accumulators paired with a [`ParamSet`]; allocated lazily.
#[derive(Debug, Clone)]
pub struct Gradients {
    bufs: Vec<Option<GradBuf>>,
    shapes: Vec<(usize, usize, bool)>,
}

impl Gradients {
    pub fn for_params(params: &ParamSet) -> Self {
        Self {
            bufs: vec![None; params.len()],
            shapes: params
                .tensors
                .iter()
                .map(|t| (t.rows, t.cols, t.row_sparse))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&GradBuf> {
        self.bufs[id.0].as_ref()
    }

    /// Dense copy of one parameter's gradient (zeros if untouched).
    pub fn dense(&self, id: ParamId) -> Vec<f64> {
        let (rows, cols, _) = self.shapes[id.0];
        let mut out = vec![0.0; rows * cols];
        match &self.bufs[id.0] {
            None => {}
            Some(GradBuf::Dense(v)) => out.copy_from_slice(v),
            Some(GradBuf::Rows(m)) => {
                for (&r, g) in m {
                    out[r * cols..(r + 1) * cols].copy_from_slice(g);
                }
            }
        }
        out
    }

    pub(crate) fn dense_mut(&mut self, id: ParamId) -> &mut [f64] {
        let (rows, cols, _) = self.shapes[id.0];
        let buf = self.bufs[id.0].get_or_insert_with(|| GradBuf::Dense(vec![0.0; rows * cols]));
        match buf {
            GradBuf::Dense(v) => v,
            GradBuf::Rows(_) => unreachable!("row-sparse parameter used densely"),
        }
    }

    pub(crate) fn row_mut(&mut self, id: ParamId, row: usize) -> &mut [f64] {
        let (rows, cols, sparse) = self.shapes[id.0];
        if !sparse {
            let v = self.dense_mut(id);
            return &mut v[row * cols..(row + 1) * cols];
        }
        debug_assert!(row < rows);
        let buf = self.bufs[id.0].get_or_insert_with(|| GradBuf::Rows(BTreeMap::new()));
        match buf {
            GradBuf::Rows(m) => m.entry(row).or_insert_with(|| vec![0.0; cols]),
            GradBuf::Dense(_) => unreachable!(),
        }
    }

    /// `self += other`, visiting buffers in a fixed order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (i, ob) in other.bufs.iter().enumerate() {
            let Some(ob) = ob else { continue };
            match ob {
                GradBuf::Dense(v) => {
                    let dst = self.dense_mut(ParamId(i));
                    for (d, s) in dst.iter_mut().zip(v) {
                        *d += s;
                    }
                }
                GradBuf::Rows(m) => {
                    for (&r, g) in m {
                        let dst = self.row_mut(ParamId(i), r);
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.bufs.iter_mut().flatten().flat_map(|b| -> Box<dyn Iterator<Item = &mut f64>> {
            match b {
                GradBuf::Dense(v) => Box::new(v.iter_mut()),
                GradBuf::Rows(m) => Box::new(m.values_mut().flat_map(|g| g.iter_mut())),
            }
        })
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flatten()
            .map(|b| match b {
                GradBuf::Dense(v) => v.iter().map(|x| x * x).sum::<f64>(),
                GradBuf::Rows(m) => m.values().flat_map(|g| g.iter()).map(|x| x * x).sum(),
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn zero_param(&mut self, id: ParamId) {
        self.bufs[id.0] = None;
    }

    pub fn clear(&mut self) {
        self.bufs.iter_mut().for_each(|b| *b = None);
    }

    pub fn is_finite(&self) -> bool {
        self.global_norm().is_finite()
    }
}
