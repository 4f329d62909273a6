use std::fmt;

use crate::error::{dim_err, Result};

/// Dense row-major array of `f64`.
///
/// Every extent is positive; a rank-0 tensor (empty shape) is a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return dim_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose shape and length are already known to agree.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return dim_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2, "row() needs a matrix");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `data` (laid out as `shape`) into the axis order given by `perm`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    debug_assert_eq!(shape.len(), perm.len());
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return data.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // odometer over the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Result shape of trailing-axis broadcasting, or `None` if incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Materializes `data` (shape `from`) broadcast to `to`.
pub(crate) fn expand(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return data.to_vec();
    }
    let n: usize = to.iter().product();
    // common case: `from` equals a suffix of `to`
    if from.len() <= to.len() && to[to.len() - from.len()..] == *from {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            out.extend_from_slice(data);
        }
        return out;
    }
    let src = broadcast_strides(from, to);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..to.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < to[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Sums `data` (shape `from`) down to a shape `to` that broadcasts to `from`.
pub(crate) fn reduce_to(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return data.to_vec();
    }
    let m: usize = to.iter().product();
    let mut out = vec![0.0; m];
    if to.len() <= from.len() && from[from.len() - to.len()..] == *to {
        for chunk in data.chunks(m) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return out;
    }
    let dst = broadcast_strides(to, from);
    let mut idx = vec![0usize; from.len()];
    for v in data {
        let off: usize = idx.iter().zip(&dst).map(|(i, s)| i * s).sum();
        out[off] += v;
        for ax in (0..from.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < from[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Strides of `small` addressed with a multi-index of `big` (0 on broadcast axes).
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let s = strides(small);
    let lead = big.len() - small.len();
    (0..big.len())
        .map(|i| {
            if i < lead || small[i - lead] == 1 {
                0
            } else {
                s[i - lead]
            }
        })
        .collect()
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
