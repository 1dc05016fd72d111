//! Dense row-major tensors and the raw numeric kernels the autograd tape is
//! built on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Element type stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Floating point scalar usable by the tensor kernels.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a @ b + beta * c` with explicit row/column strides.
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

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

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
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices covering every strided index that the
        // (m, k, n) product touches; checked by `debug_check_extent`.
        debug_check_extent(m, k, rsa, csa, a.len());
        debug_check_extent(k, n, rsb, csb, b.len());
        debug_check_extent(m, n, rsc, csc, c.len());
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
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

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
        if m == 0 || n == 0 {
            return;
        }
        debug_check_extent(m, k, rsa, csa, a.len());
        debug_check_extent(k, n, rsb, csb, b.len());
        debug_check_extent(m, n, rsc, csc, c.len());
        // SAFETY: see the f32 implementation.
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
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[inline]
fn debug_check_extent(rows: usize, cols: usize, rs: isize, cs: isize, len: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Raw kernels. Shapes are validated by the autograd layer.

/// `a [m,k] @ b [k,n]` with optional transposition of either operand
/// (transposition refers to the stored layout: `ta` means `a` is stored
/// `[k,m]`).
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (m, k) = if ta {
        (a.shape[1], a.shape[0])
    } else {
        (a.shape[0], a.shape[1])
    };
    let (k2, n) = if tb {
        (b.shape[1], b.shape[0])
    } else {
        (b.shape[0], b.shape[1])
    };
    assert_eq!(k, k2, "matmul inner dimension");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data,
        rsa,
        csa,
        &b.data,
        rsb,
        csb,
        T::zero(),
        &mut out.data,
        n as isize,
        1,
    );
    out
}

pub fn transpose2<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// Broadcasts `a` to `shape`; every dimension of `a` must equal the target or
/// be 1, and ranks must match.
pub fn expand<T: Real>(a: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    assert_eq!(a.shape.len(), shape.len(), "expand rank");
    if a.shape == shape {
        return a.clone();
    }
    let rank = shape.len();
    let src_strides = broadcast_strides(&a.shape);
    let mut out = Vec::with_capacity(numel(shape));
    let mut idx = vec![0usize; rank];
    let total = numel(shape);
    // Innermost contiguous run handled as a block.
    let inner = shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut produced = 0;
    while produced < total {
        let base: usize = (0..rank - 1).map(|d| idx[d] * src_strides[d]).sum();
        if inner_stride == 0 {
            out.extend(std::iter::repeat_n(a.data[base], inner));
        } else {
            out.extend_from_slice(&a.data[base..base + inner]);
        }
        produced += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Sums `a` down to `shape` (inverse of [`expand`]).
pub fn sum_to<T: Real>(a: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    assert_eq!(a.shape.len(), shape.len(), "sum_to rank");
    if a.shape == shape {
        return a.clone();
    }
    let rank = shape.len();
    let dst_strides = broadcast_strides(shape);
    let mut out = vec![T::zero(); numel(shape)];
    let inner = a.shape[rank - 1];
    let inner_stride = dst_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut pos = 0;
    while pos < a.data.len() {
        let base: usize = (0..rank - 1).map(|d| idx[d] * dst_strides[d]).sum();
        let row = &a.data[pos..pos + inner];
        if inner_stride == 0 {
            let s: T = row.iter().copied().sum();
            out[base] += s;
        } else {
            for (o, &v) in out[base..base + inner].iter_mut().zip(row) {
                *o += v;
            }
        }
        pos += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < a.shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

/// Geometry of a square-kernel 2-D convolution on NCHW tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }

    fn is_pointwise(&self, kernel: usize) -> bool {
        kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `x [N,C,H,W]` convolved with `w [O,C,k,k]` → `[N,O,Ho,Wo]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeom) -> Tensor<T> {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, k) = (w.shape[0], w.shape[2]);
    assert_eq!(w.shape[1], c, "conv2d channel mismatch");
    let (ho, wo) = (geom.out_size(h, k), geom.out_size(wd, k));
    let ckk = c * k * k;
    let hw = ho * wo;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    let pointwise = geom.is_pointwise(k);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw]
    };
    for b in 0..n {
        let xb = &x.data[b * c * h * wd..(b + 1) * c * h * wd];
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, c, h, wd, k, geom, ho, wo, &mut cols);
            &cols
        };
        T::gemm(
            o,
            ckk,
            hw,
            T::one(),
            &w.data,
            ckk as isize,
            1,
            src,
            hw as isize,
            1,
            T::zero(),
            &mut out.data[b * o * hw..(b + 1) * o * hw],
            hw as isize,
            1,
        );
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad<T: Real>(
    gy: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    geom: ConvGeom,
) -> Tensor<T> {
    let (n, c, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (o, k) = (w.shape[0], w.shape[2]);
    let (ho, wo) = (gy.shape[2], gy.shape[3]);
    let ckk = c * k * k;
    let hw = ho * wo;
    let mut gx = Tensor::zeros(x_shape);
    let pointwise = geom.is_pointwise(k);
    let mut cols = vec![T::zero(); ckk * hw];
    for b in 0..n {
        let gyb = &gy.data[b * o * hw..(b + 1) * o * hw];
        let gxb = &mut gx.data[b * c * h * wd..(b + 1) * c * h * wd];
        let dst: &mut [T] = if pointwise { gxb } else { &mut cols };
        T::gemm(
            ckk,
            o,
            hw,
            T::one(),
            &w.data,
            1,
            ckk as isize,
            gyb,
            hw as isize,
            1,
            T::zero(),
            dst,
            hw as isize,
            1,
        );
        if !pointwise {
            col2im(&cols, c, h, wd, k, geom, ho, wo, gxb);
        }
    }
    gx
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad<T: Real>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    geom: ConvGeom,
) -> Tensor<T> {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, k) = (w_shape[0], w_shape[2]);
    let (ho, wo) = (gy.shape[2], gy.shape[3]);
    let ckk = c * k * k;
    let hw = ho * wo;
    let mut gw = Tensor::zeros(w_shape);
    let pointwise = geom.is_pointwise(k);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw]
    };
    for b in 0..n {
        let xb = &x.data[b * c * h * wd..(b + 1) * c * h * wd];
        let src: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, c, h, wd, k, geom, ho, wo, &mut cols);
            &cols
        };
        T::gemm(
            o,
            hw,
            ckk,
            T::one(),
            &gy.data[b * o * hw..(b + 1) * o * hw],
            hw as isize,
            1,
            src,
            1,
            hw as isize,
            T::one(),
            &mut gw.data,
            ckk as isize,
            1,
        );
    }
    gw
}

/// Nearest-neighbour ×2 upsampling of the two trailing axes.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let r = x.shape.len();
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let planes = x.data.len() / (h * w);
    let mut shape = x.shape.clone();
    shape[r - 2] = 2 * h;
    shape[r - 1] = 2 * w;
    let mut out = Vec::with_capacity(x.data.len() * 4);
    for p in 0..planes {
        let plane = &x.data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    Tensor { shape, data: out }
}

/// 2×2 sum pooling of the two trailing axes (adjoint of [`upsample2`]).
pub fn sum_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let r = x.shape.len();
    let (h, w) = (x.shape[r - 2], x.shape[r - 1]);
    let (ho, wo) = (h / 2, w / 2);
    let planes = x.data.len() / (h * w);
    let mut shape = x.shape.clone();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let plane = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / 2) * wo + xx / 2] += plane[y * w + xx];
            }
        }
    }
    Tensor { shape, data: out }
}

/// Slice `len` entries starting at `start` along `axis`.
pub fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let full = x.shape[axis];
    let mut shape = x.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    Tensor { shape, data }
}

/// Places `x` into zeros of extent `full` along `axis` at offset `start`
/// (adjoint of [`narrow`]).
pub fn unnarrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, full: usize) -> Tensor<T> {
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let len = x.shape[axis];
    let mut shape = x.shape.clone();
    shape[axis] = full;
    let mut data = vec![T::zero(); outer * full * inner];
    for o in 0..outer {
        let src = &x.data[o * len * inner..(o + 1) * len * inner];
        let base = (o * full + start) * inner;
        data[base..base + len * inner].copy_from_slice(src);
    }
    Tensor { shape, data }
}

pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let first = parts[0];
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut shape = first.shape.clone();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
        }
    }
    Tensor { shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (o, k) = (w.shape[0], w.shape[2]);
        let (ho, wo) = (g.out_size(h, k), g.out_size(wd, k));
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize
                                    {
                                        continue;
                                    }
                                    acc += x.data[((b * c + ic) * h + iy as usize) * wd
                                        + ix as usize]
                                        * w.data[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data[((b * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = rand::rng();
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let g = ConvGeom { stride, pad };
            let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[4, 3, k, k], 1.0, &mut rng);
            let fast = conv2d(&x, &w, g);
            let slow = naive_conv(&x, &w, g);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} s={stride}");
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        let mut rng = rand::rng();
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let g = ConvGeom { stride, pad };
            let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[5, 3, k, k], 1.0, &mut rng);
            let y = conv2d(&x, &w, g);
            let gy = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
            let gx = conv2d_input_grad(&gy, &w, x.shape(), g);
            let gw = conv2d_weight_grad(&gy, &x, w.shape(), g);
            let lhs = dot(&y, &gy);
            assert!((lhs - dot(&x, &gx)).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - dot(&w, &gw)).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn expand_and_sum_to_are_adjoint() {
        let mut rng = rand::rng();
        let a = Tensor::<f64>::randn(&[2, 1, 3, 1], 1.0, &mut rng);
        let big = expand(&a, &[2, 4, 3, 5]);
        let g = Tensor::<f64>::randn(big.shape(), 1.0, &mut rng);
        let back = sum_to(&g, a.shape());
        assert!((dot(&big, &g) - dot(&a, &back)).abs() < 1e-10);
        assert_eq!(big.data[5 * 3 + 7], a.data[1]);
    }

    #[test]
    fn narrow_concat_round_trip() {
        let mut rng = rand::rng();
        let a = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[2, 2, 4], 1.0, &mut rng);
        let c = concat(&[&a, &b], 1);
        assert_eq!(narrow(&c, 1, 0, 3), a);
        assert_eq!(narrow(&c, 1, 3, 2), b);
        let u = unnarrow(&b, 1, 3, 5);
        assert_eq!(narrow(&u, 1, 3, 2), b);
        assert_eq!(narrow(&u, 1, 0, 3).sum(), 0.0);
    }

    #[test]
    fn upsample_and_pool_are_adjoint() {
        let mut rng = rand::rng();
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let up = upsample2(&x);
        let g = Tensor::<f64>::randn(up.shape(), 1.0, &mut rng);
        assert!((dot(&up, &g) - dot(&x, &sum_pool2(&g))).abs() < 1e-10);
    }

    #[test]
    fn matmul_transposes() {
        let mut rng = rand::rng();
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let ab = matmul(&a, &b, false, false);
        let at = transpose2(&a);
        let bt = transpose2(&b);
        assert!(ab.max_abs_diff(&matmul(&at, &b, true, false)) < 1e-12);
        assert!(ab.max_abs_diff(&matmul(&a, &bt, false, true)) < 1e-12);
    }
}
