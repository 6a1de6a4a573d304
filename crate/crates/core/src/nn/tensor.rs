use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type usable by the toolkit.
pub trait Real:
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
    /// `c = op(a) · op(b) + beta · c` with row-major operands.
    ///
    /// `a` is `m×k` (stored `k×m` when `a_t`), `b` is `k×n` (stored `n×k`
    /// when `b_t`), `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical (rows × cols); storage is (cols × rows) when transposed
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: the asserts above guarantee every strided access
                // stays within the three slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense activation tensor in `[C, N, H, W]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![T::zero(); c * n * h * w] }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data length");
        Self { c, n, h, w, data }
    }

    /// Column vectors `[C, N]` stored as a tensor with unit spatial extent.
    pub fn vectors(c: usize, n: usize, data: Vec<T>) -> Self {
        Self::from_vec(c, n, 1, 1, data)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.c == other.c && self.n == other.n && self.h == other.h && self.w == other.w
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.n, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, c: usize, b: usize, y: usize, x: usize) -> usize {
        ((c * self.n + b) * self.h + y) * self.w + x
    }

    /// Same shape, new contents.
    pub fn with_data(&self, data: Vec<T>) -> Self {
        Self::from_vec(self.c, self.n, self.h, self.w, data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        assert!(self.same_shape(other), "add shape mismatch");
        self.with_data(self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Copy out sample `b` as a single-sample tensor.
    pub fn sample(&self, b: usize) -> Self {
        let plane = self.plane();
        let mut out = Self::zeros(self.c, 1, self.h, self.w);
        for c in 0..self.c {
            let src = (c * self.n + b) * plane;
            out.data[c * plane..(c + 1) * plane].copy_from_slice(&self.data[src..src + plane]);
        }
        out
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Self {
        assert!(!items.is_empty(), "stack of nothing");
        let first = &items[0];
        let plane = first.plane();
        let n: usize = items.iter().map(|t| t.n).sum();
        let mut out = Self::zeros(first.c, n, first.h, first.w);
        let mut b0 = 0;
        for t in items {
            assert!(t.c == first.c && t.h == first.h && t.w == first.w, "stack shape mismatch");
            for c in 0..t.c {
                for b in 0..t.n {
                    let src = (c * t.n + b) * plane;
                    let dst = (c * n + b0 + b) * plane;
                    out.data[dst..dst + plane].copy_from_slice(&t.data[src..src + plane]);
                }
            }
            b0 += t.n;
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
