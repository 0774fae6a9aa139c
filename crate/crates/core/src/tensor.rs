//! Dense tensors and the named weight store.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::ir::{LayerKind, ModelGraph};

/// Element type of the runtime. `f32` for experiments, `f64` for gradient
/// verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `C = alpha * A * B + beta * C` with arbitrary strides; `A` is `m x k`,
    /// `B` is `k x n`, `C` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

macro_rules! check_gemm_bounds {
    ($m:expr, $k:expr, $n:expr, $a:expr, $rsa:expr, $csa:expr, $b:expr, $rsb:expr, $csb:expr, $c:expr, $rsc:expr, $csc:expr) => {
        let last = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
            if rows == 0 || cols == 0 {
                0
            } else {
                (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
            }
        };
        assert!($rsa >= 0 && $csa >= 0 && $rsb >= 0 && $csb >= 0 && $rsc >= 0 && $csc >= 0);
        assert!(last($m, $k, $rsa, $csa) <= $a.len(), "gemm: A out of bounds");
        assert!(last($k, $n, $rsb, $csb) <= $b.len(), "gemm: B out of bounds");
        assert!(last($m, $n, $rsc, $csc) <= $c.len(), "gemm: C out of bounds");
    };
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        // SAFETY: extents checked above against the slice lengths.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        // SAFETY: extents checked above against the slice lengths.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

/// Contiguous row-major (channel-major for images, `N, C, H, W`) tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                name: "tensor".into(),
                expected: shape,
                found: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                name: "reshape".into(),
                expected: shape,
                found: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }
}

pub fn tensor_name(layer: &str, field: &str) -> String {
    format!("{layer}.{field}")
}

/// Named tensors `<layer>.weight`, `<layer>.bias`, `<layer>.gamma`,
/// `<layer>.beta`, `<layer>.running_mean`, `<layer>.running_var`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> WeightStore<T> {
    pub fn new() -> Self {
        WeightStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn param(&self, layer: &str, field: &str) -> Result<&Tensor<T>> {
        self.get(&tensor_name(layer, field))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that exactly the tensors `graph` needs are present with the right
    /// shapes.
    pub fn check_against(&self, graph: &ModelGraph) -> Result<()> {
        let expected = expected_shapes(graph);
        for (name, dims) in &expected {
            let t = self.get(name)?;
            if t.shape() != dims.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: dims.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::ShapeMismatch {
                name: extra.clone(),
                expected: vec![],
                found: self.tensors[extra].shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Learnable tensors (trained by SGD); running statistics are excluded.
pub fn is_learnable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

/// Every tensor a graph needs, with its shape.
pub fn expected_shapes(graph: &ModelGraph) -> BTreeMap<String, Vec<usize>> {
    let mut out = BTreeMap::new();
    for node in graph.nodes() {
        match &node.kind {
            LayerKind::Conv(p) => {
                out.insert(tensor_name(&node.id, "weight"), p.weight_dims());
                if p.has_bias {
                    out.insert(tensor_name(&node.id, "bias"), vec![p.out_channels]);
                }
            }
            LayerKind::BatchNorm(p) => {
                for f in ["gamma", "beta", "running_mean", "running_var"] {
                    out.insert(tensor_name(&node.id, f), vec![p.channels]);
                }
            }
            LayerKind::Linear(p) => {
                out.insert(
                    tensor_name(&node.id, "weight"),
                    vec![p.out_features, p.in_features],
                );
                out.insert(tensor_name(&node.id, "bias"), vec![p.out_features]);
            }
            _ => {}
        }
    }
    out
}
