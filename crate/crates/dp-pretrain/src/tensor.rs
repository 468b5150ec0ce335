//! Dense row-major tensors generic over f32/f64, plus the global-norm clipping
//! primitives that every gradient must pass through.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Storage precision of a tensor element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::parameter(format!(
                "unknown precision `{other}` (expected f32 or f64)"
            ))),
        }
    }
}

/// Scalar element type. All numeric kernels are generic over this so the whole
/// training stack runs in either precision.
pub trait Element:
    Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + PartialOrd
    + num_traits::Float
    + 'static
{
    const PRECISION: Precision;
    /// Bytes per element in the little-endian checkpoint encoding.
    const BYTE_WIDTH: usize;
    /// Multiplicative safety margin applied to the clip factor so that the
    /// rounded product of element-wise multiplications never exceeds the
    /// target norm: a re-clip of an already clipped gradient is a no-op.
    const CLIP_MARGIN: f64;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Row-major generalized matrix multiply C = alpha*A*B + beta*C with
    /// explicit strides (rs = stride between rows, cs = between columns).
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dimensions/strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTE_WIDTH: usize = 4;
    // 1 - 2^-20: leaves ~2^4 ulps of headroom against f32 rounding.
    const CLIP_MARGIN: f64 = 1.0 - 9.5367431640625e-7;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTE_WIDTH: usize = 8;
    // 1 - 2^-48: same headroom argument at f64 resolution.
    const CLIP_MARGIN: f64 = 1.0 - 3.552713678800501e-15;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense row-major tensor. Rank 1 and 2 cover every shape in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![E::zero(); len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(format!(
                "buffer of {} elements cannot fill shape {shape:?} ({expect} elements)",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        E::PRECISION
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Interpret as a matrix, failing on any other rank.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(format!("expected rank-2 tensor, got shape {other:?}"))),
        }
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[E] {
        let (rows, cols) = self.dims2().expect("row() needs rank 2");
        assert!(r < rows, "row {r} out of {rows}");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [E] {
        let (rows, cols) = self.dims2().expect("row_mut() needs rank 2");
        assert!(r < rows, "row {r} out of {rows}");
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Sum of squared elements, accumulated in f64 regardless of E.
    pub fn sum_squares(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn scale_in_place(&mut self, factor: E) {
        for x in &mut self.data {
            *x = *x * factor;
        }
    }

    /// self += other * factor, element-wise.
    pub fn add_scaled(&mut self, other: &Tensor<E>, factor: E) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_scaled of {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b * factor;
        }
        Ok(())
    }

    /// Error if any element is NaN or infinite; `context` names the tensor.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(context.to_string()));
        }
        Ok(())
    }

    /// Lossless-or-rounding cast between precisions.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| F::from_f64(x.as_f64())).collect(),
        }
    }
}

/// Euclidean norm over the concatenation of all tensors, f64 accumulation.
pub fn global_l2_norm<'a, E: Element>(
    tensors: impl IntoIterator<Item = &'a Tensor<E>>,
) -> f64 {
    tensors.into_iter().map(|t| t.sum_squares()).sum::<f64>().sqrt()
}

/// Ordered collection of named tensors: parameters, gradients, moments.
/// Iteration order is insertion order and is part of every determinism
/// contract built on top (noise draws, checkpoint layout, norm reports).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMap<E: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
}

impl<E: Element> Default for TensorMap<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> TensorMap<E> {
    pub fn new() -> Self {
        TensorMap { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::contract(format!("duplicate tensor name `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        let i = self.position(name)?;
        Ok(&mut self.tensors[i])
    }

    fn position(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::contract(format!("no tensor named `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter_mut())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn tensors(&self) -> &[Tensor<E>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.tensors
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> TensorMap<E> {
        TensorMap {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Error unless `other` has identical names and shapes in the same order.
    pub fn same_layout(&self, other: &TensorMap<E>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::contract("tensor maps have different names or ordering".to_string()));
        }
        for ((n, a), (_, b)) in self.iter().zip(other.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::shape(format!(
                    "tensor `{n}`: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Apply f(self_elem, other_elem) across every paired element.
    pub fn zip_apply(
        &mut self,
        other: &TensorMap<E>,
        mut f: impl FnMut(&mut E, E),
    ) -> Result<()> {
        self.same_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                f(x, *y);
            }
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        global_l2_norm(self.tensors.iter())
    }

    pub fn scale_in_place(&mut self, factor: E) {
        for t in &mut self.tensors {
            t.scale_in_place(factor);
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (n, t) in self.iter() {
            t.check_finite(&format!("{context}.{n}"))?;
        }
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> TensorMap<F> {
        TensorMap {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Scale factor that brings a vector of norm `norm` inside the ball of radius
/// `max_norm`. Already-inside vectors get exactly 1 so they pass through
/// bitwise unchanged; others get (max_norm/norm) shaved by `E::CLIP_MARGIN` so
/// the rounded rescale lands at or below the boundary and clipping is
/// idempotent in finite precision.
pub fn clip_factor<E: Element>(norm: f64, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::parameter(format!("clip norm must be positive, got {max_norm}")));
    }
    if !norm.is_finite() {
        return Err(Error::NonFinite("norm passed to clip_factor".into()));
    }
    if norm <= max_norm {
        Ok(1.0)
    } else {
        Ok(max_norm / norm * E::CLIP_MARGIN)
    }
}

/// Clip a multi-tensor gradient to global norm `max_norm`, in place.
pub fn clip_in_place<E: Element>(tensors: &mut [Tensor<E>], max_norm: f64) -> Result<f64> {
    let norm = global_l2_norm(tensors.iter());
    let factor = clip_factor::<E>(norm, max_norm)?;
    if factor != 1.0 {
        let f = E::from_f64(factor);
        for t in tensors.iter_mut() {
            t.scale_in_place(f);
        }
    }
    Ok(factor)
}

/// Clip a multi-tensor gradient to global norm `max_norm`, returning copies.
pub fn clip_to_norm<E: Element>(tensors: &[Tensor<E>], max_norm: f64) -> Result<Vec<Tensor<E>>> {
    let mut out = tensors.to_vec();
    clip_in_place(&mut out, max_norm)?;
    Ok(out)
}
