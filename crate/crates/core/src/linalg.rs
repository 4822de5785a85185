//! Dense linear algebra support: LU with partial pivoting, norm estimation,
//! a scaling-and-squaring Taylor exponential used as the dense oracle, and
//! eigenvalue wrappers used by diagnostics and spectral-bound checks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// LU factorization with partial pivoting, stored packed.
pub struct LuFactors<T: Scalar> {
    lu: Array2<T>,
    piv: Vec<usize>,
}

impl<T: Scalar> LuFactors<T> {
    pub fn new(a: &Array2<T>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::shape("lu", format!("matrix[{}x{}] not square", a.nrows(), a.ncols())));
        }
        let mut lu = a.clone();
        let mut piv = Vec::with_capacity(n);
        for k in 0..n {
            // pivot: largest magnitude in column k at or below the diagonal
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == T::zero() || !best.is_finite() {
                return Err(Error::singular(format!("lu pivot {k} is {best}")));
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
            }
            piv.push(p);
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                for j in k + 1..n {
                    let sub = factor * lu[(k, j)];
                    lu[(i, j)] = lu[(i, j)] - sub;
                }
            }
        }
        Ok(LuFactors { lu, piv })
    }

    pub fn solve_vec(&self, b: &Array1<T>) -> Array1<T> {
        let n = self.lu.nrows();
        let mut x = b.clone();
        for k in 0..n {
            x.swap(k, self.piv[k]);
        }
        // forward: L y = Pb
        for i in 1..n {
            let mut s = x[i];
            for j in 0..i {
                s = s - self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        // back: U x = y
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s = s - self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }

    pub fn solve_mat(&self, b: &Array2<T>) -> Array2<T> {
        let mut out = b.clone();
        for mut col in out.columns_mut() {
            let v = col.to_owned();
            let solved = self.solve_vec(&v);
            col.assign(&solved);
        }
        out
    }
}

/// Power iteration estimate of the spectral norm (largest singular value),
/// iterating on `A^T A`. Fixed seed, fixed iteration count: deterministic.
pub fn spectral_norm_estimate<T: Scalar>(a: &Array2<T>, iters: usize) -> T {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return T::zero();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut v: Array1<T> = Array1::from_shape_fn(n, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)));
    let mut norm = T::zero();
    for _ in 0..iters {
        let w = a.dot(&v);
        let z = a.t().dot(&w);
        let zn = z.iter().map(|x| *x * *x).fold(T::zero(), |s, x| s + x).sqrt();
        if zn == T::zero() || !zn.is_finite() {
            return T::zero();
        }
        v = z.mapv(|x| x / zn);
        let av = a.dot(&v);
        norm = av.iter().map(|x| *x * *x).fold(T::zero(), |s, x| s + x).sqrt();
    }
    norm
}

/// Dense matrix exponential by scaling and squaring of a machine-precision
/// Taylor sum. Test-oracle grade: intended for small matrices.
pub fn expm_dense<T: Scalar>(a: &Array2<T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::shape("expm", format!("matrix[{}x{}] not square", a.nrows(), a.ncols())));
    }
    // scale so the 1-norm is at most 0.5, sum the series, square back
    let norm = a
        .columns()
        .into_iter()
        .map(|c| c.iter().fold(T::zero(), |s, x| s + x.abs()))
        .fold(T::zero(), |m, s| if s > m { s } else { m });
    let mut squarings = 0u32;
    let mut scale = T::one();
    let half = T::from_f64_lossy(0.5);
    while norm * scale > half && squarings < 64 {
        scale = scale * half;
        squarings += 1;
    }
    let z = a.mapv(|x| x * scale);
    let mut result = Array2::eye(n);
    let mut term: Array2<T> = Array2::eye(n);
    for k in 1..200 {
        term = term.dot(&z).mapv(|x| x / T::from_f64_lossy(k as f64));
        let tn = fro_norm(&term);
        result = result + &term;
        if tn <= T::from_f64_lossy(1e-20) * fro_norm(&result) {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    Ok(result)
}

pub fn fro_norm<T: Scalar>(a: &Array2<T>) -> T {
    a.iter().map(|x| *x * *x).fold(T::zero(), |s, x| s + x).sqrt()
}

/// Maximum real part over the eigenvalues of a real square matrix
/// (QR-algorithm eigensolve; the spectral oracle).
pub fn max_real_eigenvalue<T: Scalar>(a: &Array2<T>) -> Result<f64> {
    let eigs = eigenvalues(a)?;
    Ok(eigs.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max))
}

/// All eigenvalues of a real square matrix, computed in f64.
pub fn eigenvalues<T: Scalar>(a: &Array2<T>) -> Result<Vec<num_complex::Complex64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::shape("eig", format!("matrix[{}x{}] not square", a.nrows(), a.ncols())));
    }
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[(i, j)].to_f64_lossy());
    let eigs = m.complex_eigenvalues();
    Ok(eigs.iter().map(|c| num_complex::Complex64::new(c.re, c.im)).collect())
}

/// Largest eigenvalue of the symmetric part (A + A^T)/2.
pub fn max_symmetric_eigenvalue<T: Scalar>(a: &Array2<T>) -> Result<f64> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::shape("eig_sym", format!("matrix[{}x{}] not square", a.nrows(), a.ncols())));
    }
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        0.5 * (a[(i, j)].to_f64_lossy() + a[(j, i)].to_f64_lossy())
    });
    let eig = m.symmetric_eigen();
    Ok(eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Exact spectral norm via SVD (f64), for small oracle-side computations.
pub fn spectral_norm_exact<T: Scalar>(a: &Array2<T>) -> f64 {
    let m = nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)].to_f64_lossy());
    m.svd(false, false).singular_values.iter().copied().fold(0.0, f64::max)
}

/// 2-norm condition number via SVD (f64).
pub fn condition_number_2<T: Scalar>(a: &Array2<T>) -> Result<f64> {
    let m = nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)].to_f64_lossy());
    let sv = m.svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0f64, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 || !smin.is_finite() {
        return Err(Error::singular("condition number of rank-deficient matrix".to_string()));
    }
    Ok(smax / smin)
}

/// 2-norm condition number of an eigenvector basis of a real matrix,
/// computed in f64 (used by the Lyapunov-bound estimate). Eigenvectors come
/// from shifted inverse iteration seeded by the QR eigenvalues; fails when
/// the matrix is too close to defective for a reliable basis.
pub fn eigenbasis_condition<T: Scalar>(a: &Array2<T>) -> Result<f64> {
    use num_complex::Complex64;
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::shape("eig_basis", format!("matrix[{}x{}] not square", a.nrows(), a.ncols())));
    }
    let eigs = eigenvalues(a)?;
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        Complex64::new(a[(i, j)].to_f64_lossy(), 0.0)
    });
    let scale = eigs.iter().map(|e| e.norm()).fold(1e-12, f64::max);
    let mut t = nalgebra::DMatrix::<Complex64>::zeros(n, n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    for (j, lam) in eigs.iter().enumerate() {
        // small shift off the exact eigenvalue keeps A - sigma I invertible
        let sigma = lam + Complex64::new(1e-8 * scale, 1e-8 * scale);
        let shifted = &m - nalgebra::DMatrix::<Complex64>::identity(n, n) * sigma;
        let lu = shifted.lu();
        let mut v = nalgebra::DVector::<Complex64>::from_fn(n, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        for _ in 0..4 {
            let w = lu
                .solve(&v)
                .ok_or_else(|| Error::singular("inverse iteration solve".to_string()))?;
            let nw = w.norm();
            if nw <= 1e-300 || !nw.is_finite() {
                return Err(Error::singular("defective eigenbasis".to_string()));
            }
            v = w / Complex64::new(nw, 0.0);
        }
        t.set_column(j, &v);
    }
    let sv = t.svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0f64, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin <= 1e-12 * smax {
        return Err(Error::singular("defective eigenbasis".to_string()));
    }
    Ok(smax / smin)
}
