//! Extended-precision storage for states that grow without bound.
//!
//! Closed loops with eigenvalues outside the unit circle grow like
//! `|lambda|^t`; a 2000-step run at `|lambda| = 1.5` reaches about `1e352`,
//! past the range of `f64`. Worse, when the closed loop is not normal, the
//! information about stable directions sits `|lambda|^t` below the magnitude
//! of the state, and `f64` rounding of a single matrix-vector product already
//! buries it. States and the least-squares factorization are therefore held
//! in MPFR floats whose precision is chosen per run (see
//! [`required_precision`]).

use nalgebra::DMatrix;
use rug::{Assign, Float};

/// Precision used when a run never leaves the `f64`-friendly range.
pub const BASE_PRECISION: u32 = 128;

/// Bits kept below the noise floor of a run.
pub const GUARD_BITS: u32 = 96;

pub fn hp(prec: u32, v: f64) -> Float {
    Float::with_val(prec, v)
}

/// Binary exponent `e` with `2^(e-1) <= |x| < 2^e`; `None` for zero.
pub fn exponent(x: &Float) -> Option<i64> {
    x.get_exp().map(i64::from)
}

/// Precision that resolves values down to `2^floor_log2` when the largest
/// magnitude seen is `2^max_log2`.
pub fn required_precision(max_log2: i64, floor_log2: i64) -> u32 {
    let span = (max_log2 - floor_log2).max(0) as u64 + GUARD_BITS as u64;
    let bits = span.max(BASE_PRECISION as u64);
    // round up to a multiple of 64 so reruns settle quickly
    (bits.div_ceil(64) * 64).min(u32::MAX as u64 / 2) as u32
}

pub fn vec_from_f64(prec: u32, v: &[f64]) -> Vec<Float> {
    v.iter().map(|&x| hp(prec, x)).collect()
}

pub fn vec_to_f64(v: &[Float]) -> Vec<f64> {
    v.iter().map(Float::to_f64).collect()
}

/// `m * x` for an `f64` matrix and an extended-precision vector.
pub fn mat_vec(m: &DMatrix<f64>, x: &[Float], prec: u32) -> Vec<Float> {
    debug_assert_eq!(m.ncols(), x.len());
    let mut out = Vec::with_capacity(m.nrows());
    let mut term = Float::new(prec);
    for i in 0..m.nrows() {
        let mut acc = Float::new(prec);
        for (j, xj) in x.iter().enumerate() {
            let c = m[(i, j)];
            if c != 0.0 {
                term.assign(xj * c);
                acc += &term;
            }
        }
        out.push(acc);
    }
    out
}

/// Row-major dense matrix of MPFR floats.
#[derive(Debug, Clone, PartialEq)]
pub struct HpMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Float>,
}

impl HpMatrix {
    pub fn zeros(rows: usize, cols: usize, prec: u32) -> Self {
        HpMatrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| Float::new(prec)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &Float {
        &self.data[i * self.cols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut Float {
        &mut self.data[i * self.cols + j]
    }

    /// Raises every entry to at least `prec` bits; values are unchanged.
    pub fn raise_precision(&mut self, prec: u32) {
        for v in &mut self.data {
            if v.prec() < prec {
                v.set_prec(prec);
            }
        }
    }

    /// Nearest `f64` matrix; entries outside the `f64` range saturate.
    pub fn to_f64(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().map(Float::to_f64))
    }

    pub fn max_exponent(&self) -> Option<i64> {
        self.data.iter().filter_map(exponent).max()
    }

    /// `(M * 2^-e, e)` where `e` is the largest entry exponent, so the
    /// returned `f64` matrix has entries of magnitude below one.
    pub fn scaled_f64(&self) -> (DMatrix<f64>, i64) {
        let e = self.max_exponent().unwrap_or(0);
        let shift = -e as i32;
        let m = DMatrix::from_row_iterator(
            self.rows,
            self.cols,
            self.data.iter().map(|x| {
                let mut y = x.clone();
                y <<= shift;
                y.to_f64()
            }),
        );
        (m, e)
    }

    /// Largest singular value, carried back to extended precision.
    ///
    /// The computation runs in `f64` on the scaled copy; entries that are
    /// more than ~1075 binades below the largest one flush to zero, which
    /// perturbs `sigma_max` only at the level of `f64` rounding.
    pub fn sigma_max(&self, prec: u32) -> Float {
        let (m, e) = self.scaled_f64();
        let s = crate::linalg::spectral_norm(&m);
        let mut out = hp(prec, s);
        out <<= e as i32;
        out
    }

    /// `M^T M` (exact up to the working precision).
    pub fn gram(&self, prec: u32) -> HpMatrix {
        let mut g = HpMatrix::zeros(self.cols, self.cols, prec);
        for i in 0..self.cols {
            for j in 0..self.cols {
                let mut acc = Float::new(prec);
                for k in 0..self.rows {
                    acc += Float::with_val(prec, self.get(k, i) * self.get(k, j));
                }
                *g.get_mut(i, j) = acc;
            }
        }
        g
    }
}
