//! φ-functions and the matrix-free action of the matrix exponential.
//!
//! `expmv` advances `e^{tA} b` without ever forming `e^{tA}`: the interval is
//! split into `s` segments and each segment applies a truncated Taylor sum,
//!
//! ```text
//! b_{i,0} = f_{i-1},   b_{i,k} = (t / (s k)) A b_{i,k-1},   f_i = Σ_k b_{i,k}.
//! ```
//!
//! The inner truncation `m` is adaptive: the sum stops once appended terms
//! drop below `τ` relative to the running partial sum, with a hard cap. All
//! recurrence arithmetic is recorded on the tape, so gradients flow through
//! the integrator; the integers `s` and `m` are frozen per step and carry no
//! gradient.
//!
//! φ-evaluations never happen at deployment time: an exponential step is an
//! `expmv` on an augmented `(n+p)`-dimensional operator `[[A, W], [0, J]]`
//! whose exponential encodes `Σ φ_k(tA) t^k g_k`. Dense φ-functions exist
//! here mainly as the test oracle.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Value;
use ndarray::{Array1, Array2};

/// Hard cap on the adaptive Taylor truncation.
pub const M_CAP: usize = 128;
/// Default convergence tolerance for the adaptive truncation.
pub const DEFAULT_TOL: f64 = 1e-12;
/// Default multiplier in the segment-count rule `s = ceil(c · Δt · ‖A‖)`.
pub const DEFAULT_S_RULE_C: f64 = 1.0;

/// Controls one truncated-Taylor exponential action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpmvConfig<T: Scalar> {
    /// Segment count (scaling).
    pub s: usize,
    /// Cap on Taylor terms per segment.
    pub m_max: usize,
    /// Relative tolerance for the adaptive truncation.
    pub tol: T,
}

impl<T: Scalar> ExpmvConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.s < 1 || self.m_max < 1 || self.tol <= T::zero() {
            return Err(Error::invalid(format!(
                "expmv config requires s >= 1, m >= 1, tol > 0 (got s={}, m={}, tol={})",
                self.s, self.m_max, self.tol
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for ExpmvConfig<T> {
    fn default() -> Self {
        ExpmvConfig { s: 1, m_max: M_CAP, tol: T::from_f64_lossy(DEFAULT_TOL) }
    }
}

/// Tunable defaults for [`select_s_m`].
#[derive(Debug, Clone, Copy)]
pub struct ExpmvOptions<T: Scalar> {
    /// Multiplier `c` in `s = max(1, ceil(c · Δt · ‖A‖))`.
    pub s_rule_c: f64,
    pub tol: T,
    pub m_max: usize,
}

impl<T: Scalar> Default for ExpmvOptions<T> {
    fn default() -> Self {
        ExpmvOptions { s_rule_c: DEFAULT_S_RULE_C, tol: T::from_f64_lossy(DEFAULT_TOL), m_max: M_CAP }
    }
}

/// Pick the segment count from the step size and a spectral-norm estimate of
/// the operator; the truncation stays adaptive.
pub fn select_s_m<T: Scalar>(dt_max: T, a_norm_estimate: T, opts: &ExpmvOptions<T>) -> ExpmvConfig<T> {
    let prod = (dt_max * a_norm_estimate).to_f64_lossy() * opts.s_rule_c;
    let s = if prod.is_finite() && prod > 0.0 { prod.ceil() as usize } else { 0 };
    ExpmvConfig { s: s.max(1), m_max: opts.m_max, tol: opts.tol }
}

/// A linear operator applied through the tape; the operator itself may be
/// parameter-dependent (its nodes participate in the backward sweep).
pub trait TapeLinOp<T: Scalar> {
    fn apply(&self, tape: &mut Tape<T>, v: Var) -> Result<Var>;

    /// Apply and multiply by a constant. Operators can override this with a
    /// fused node to halve the tape traffic in the Taylor recurrence.
    fn apply_scaled(&self, tape: &mut Tape<T>, v: Var, c: T) -> Result<Var> {
        let y = self.apply(tape, v)?;
        Ok(tape.scale(y, c))
    }
}

impl<T: Scalar, F> TapeLinOp<T> for F
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    fn apply(&self, tape: &mut Tape<T>, v: Var) -> Result<Var> {
        self(tape, v)
    }
}

/// Multiplication by an assembled matrix node. Accepts vector or matrix
/// (batched columns) operands.
pub struct MatrixOp {
    pub a: Var,
}

impl<T: Scalar> TapeLinOp<T> for MatrixOp {
    fn apply(&self, tape: &mut Tape<T>, v: Var) -> Result<Var> {
        match tape.value(v) {
            Value::Vector(_) => tape.matvec(self.a, v),
            Value::Matrix(_) => tape.matmul(self.a, v),
            Value::Scalar(_) => Err(Error::shape("matrix_op", "scalar operand".to_string())),
        }
    }

    fn apply_scaled(&self, tape: &mut Tape<T>, v: Var, c: T) -> Result<Var> {
        match tape.value(v) {
            Value::Matrix(_) => tape.matmul_scaled(self.a, v, c),
            _ => {
                let y = self.apply(tape, v)?;
                Ok(tape.scale(y, c))
            }
        }
    }
}

/// The `(n+p)`-dimensional augmented operator `[[A, W], [0, J]]` with the
/// nilpotent shift `J`; column `p-k` of `W` holds the supplied `g_k`.
pub struct AugmentedOp<'a, T: Scalar, O: TapeLinOp<T>> {
    inner: &'a O,
    /// `(g_k, tail column index p-k)` pairs.
    g_cols: Vec<(Var, usize)>,
    n: usize,
    p: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<'a, T: Scalar, O: TapeLinOp<T>> AugmentedOp<'a, T, O> {
    /// Build from the derivative stack `g_list = [g_1, .., g_p]`.
    pub fn new(inner: &'a O, g_list: &[Var], n: usize) -> Self {
        let p = g_list.len();
        let g_cols = g_list.iter().enumerate().map(|(i, g)| (*g, p - (i + 1))).collect();
        AugmentedOp { inner, g_cols, n, p, _marker: std::marker::PhantomData }
    }
}

impl<'a, T: Scalar, O: TapeLinOp<T>> TapeLinOp<T> for AugmentedOp<'a, T, O> {
    fn apply(&self, tape: &mut Tape<T>, v: Var) -> Result<Var> {
        let (n, p) = (self.n, self.p);
        let head = tape.slice(v, 0, n)?;
        let ah = self.inner.apply(tape, head)?;
        let mut parts = vec![ah];
        for (g, col) in &self.g_cols {
            let tail_elem = tape.slice(v, n + col, 1)?;
            let w = tape.sum(tail_elem);
            parts.push(tape.scale_by(*g, w)?);
        }
        let new_head = tape.add_n(&parts)?;
        // J shifts the tail up by one and zeroes the last slot
        let new_tail = if p == 1 {
            tape.constant_vector(Array1::zeros(1))
        } else {
            let shifted = tape.slice(v, n + 1, p - 1)?;
            let zero = tape.constant_vector(Array1::zeros(1));
            tape.concat(&[shifted, zero])?
        };
        tape.concat(&[new_head, new_tail])
    }
}

/// Segmented truncated-Taylor recurrence, optionally with a constant forcing
/// injected at the first term of every segment. With `forcing = Some(G)` this
/// computes the augmented exponential action on `[b; 1]` with the constant
/// tail eliminated analytically: `e^{tA} b + t φ1(tA) G`.
fn segmented_taylor<T: Scalar, O: TapeLinOp<T>>(
    tape: &mut Tape<T>,
    op: &O,
    b: Var,
    forcing: Option<Var>,
    t: T,
    cfg: &ExpmvConfig<T>,
) -> Result<Var> {
    cfg.validate()?;
    let s = cfg.s;
    let seg = t / T::from_f64_lossy(s as f64);
    // the forcing contribution to the k=1 term is identical in every segment
    let forcing_scaled = forcing.map(|g| tape.scale(g, seg));

    let mut f = b;
    for i in 0..s {
        let mut terms = vec![f];
        let mut partial = tape.value(f).clone();
        let mut prev_norm = T::infinity();
        let mut converged = false;
        for k in 1..=cfg.m_max {
            let coeff = seg / T::from_f64_lossy(k as f64);
            let prev = *terms.last().expect("segment has at least b_{i,0}");
            let mut term = op.apply_scaled(tape, prev, coeff)?;
            if k == 1 {
                if let Some(g) = forcing_scaled {
                    term = tape.add(term, g)?;
                }
            }
            let tn = tape.value(term).norm();
            if !tn.is_finite() {
                return Err(Error::non_finite(format!(
                    "expmv segment {i} of {s}: Taylor term {k} diverged (t*||A||/s too large)"
                )));
            }
            partial.add_assign(tape.value(term))?;
            terms.push(term);
            let pn = partial.norm();
            if tn + prev_norm.min(tn) <= cfg.tol * pn {
                converged = true;
                break;
            }
            prev_norm = tn;
        }
        if !converged {
            return Err(Error::no_convergence(format!(
                "expmv segment {i} of {s}: {} Taylor terms without reaching tol {}",
                cfg.m_max, cfg.tol
            )));
        }
        f = tape.add_n(&terms)?;
    }
    Ok(f)
}

/// Matrix-free `e^{tA} b` through the tape.
pub fn expmv<T: Scalar, O: TapeLinOp<T>>(
    tape: &mut Tape<T>,
    op: &O,
    b: Var,
    t: T,
    cfg: &ExpmvConfig<T>,
) -> Result<Var> {
    segmented_taylor(tape, op, b, None, t, cfg)
}

/// [`expmv`] that doubles the segment count on divergence or non-convergence,
/// up to 10 retries. Failed attempts leave dead nodes on the tape; they carry
/// no gradient.
pub fn expmv_retry<T: Scalar, O: TapeLinOp<T>>(
    tape: &mut Tape<T>,
    op: &O,
    b: Var,
    forcing: Option<Var>,
    t: T,
    cfg: &ExpmvConfig<T>,
) -> Result<(Var, ExpmvConfig<T>)> {
    let mut attempt = *cfg;
    let mut last_err = None;
    for _ in 0..=10 {
        match segmented_taylor(tape, op, b, forcing, t, &attempt) {
            Ok(v) => return Ok((v, attempt)),
            Err(e @ Error::NonFinite { .. }) | Err(e @ Error::NoConvergence { .. }) => {
                last_err = Some(e);
                attempt.s = attempt.s.saturating_mul(2);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::no_convergence("expmv retries exhausted".to_string())))
}

/// One exponential step `e^{hA} u + h φ1(hA) g0` for a batch of column
/// states, via the augmented system with the constant tail row eliminated.
pub fn etd1_batch_step<T: Scalar>(
    tape: &mut Tape<T>,
    a: Var,
    g: Var,
    u: Var,
    h: T,
    cfg: &ExpmvConfig<T>,
) -> Result<(Var, ExpmvConfig<T>)> {
    let op = MatrixOp { a };
    expmv_retry(tape, &op, u, Some(g), h, cfg)
}

/// The order-1 exponential step on a single state vector, built literally as
/// the `(n+1)`-dimensional augmented exponential applied to `[u0; 1]`.
/// Algebraically equals `e^{hA} u0 + h φ1(hA) g0`.
pub fn etd1_augmented_step<T: Scalar, O: TapeLinOp<T>>(
    tape: &mut Tape<T>,
    a_op: &O,
    g0: Var,
    u0: Var,
    h: T,
    cfg: &ExpmvConfig<T>,
) -> Result<Var> {
    etd_p_augmented_step(tape, a_op, &[g0], u0, h, cfg)
}

/// The order-p exponential step: first `n` components of
/// `exp(h [[A, W], [0, J]]) [u0; e_p]` with analytically supplied `g_k`.
/// Equals the truncation `e^{hA} u0 + Σ_k φ_k(hA) h^k g_k`.
pub fn etd_p_augmented_step<T: Scalar, O: TapeLinOp<T>>(
    tape: &mut Tape<T>,
    a_op: &O,
    g_list: &[Var],
    u0: Var,
    h: T,
    cfg: &ExpmvConfig<T>,
) -> Result<Var> {
    if g_list.is_empty() {
        return Err(Error::invalid("etd_p requires p >= 1 derivative terms"));
    }
    if h < T::zero() {
        return Err(Error::invalid(format!("etd step requires h >= 0, got {h}")));
    }
    let n = tape
        .value(u0)
        .as_vector()
        .map_err(|_| {
            Error::shape("etd_step", format!("state must be a vector, got {}", tape.value(u0).shape_desc()))
        })?
        .len();
    let p = g_list.len();
    let aug = AugmentedOp::new(a_op, g_list, n);
    // augmented initial state [u0; e_p]
    let mut tail = Array1::zeros(p);
    tail[p - 1] = T::one();
    let tail_v = tape.constant_vector(tail);
    let b = tape.concat(&[u0, tail_v])?;
    let (f, _) = expmv_retry(tape, &aug, b, None, h, cfg)?;
    tape.slice(f, 0, n)
}

// ---- dense oracle ----------------------------------------------------------

/// Dense `φ_k` by Taylor series `Σ_j Z^j / (j+k)!` summed to stagnation
/// (`φ_0` delegates to the scaling-and-squaring exponential so the oracle
/// stays accurate for large norms). Test-scale matrices only.
pub fn phi_dense<T: Scalar>(k: usize, z: &Array2<T>) -> Result<Array2<T>> {
    let n = z.nrows();
    if n != z.ncols() {
        return Err(Error::shape("phi_dense", format!("matrix[{}x{}] not square", z.nrows(), z.ncols())));
    }
    if k == 0 {
        return linalg::expm_dense(z);
    }
    let mut fact = T::one();
    for j in 1..=k {
        fact = fact * T::from_f64_lossy(j as f64);
    }
    let mut result: Array2<T> = Array2::eye(n).mapv(|e: T| e / fact);
    let mut term: Array2<T> = Array2::eye(n).mapv(|e: T| e / fact);
    for j in 1..500usize {
        term = term.dot(z).mapv(|x| x / T::from_f64_lossy((j + k) as f64));
        result = result + &term;
        let tn = linalg::fro_norm(&term);
        if tn <= T::from_f64_lossy(1e-20) * linalg::fro_norm(&result) {
            return Ok(result);
        }
    }
    Err(Error::no_convergence("phi_dense Taylor series".to_string()))
}

/// Scalar `φ_k(z)`.
pub fn phi_scalar<T: Scalar>(k: usize, z: T) -> T {
    let m = phi_dense(k, &Array2::from_elem((1, 1), z)).expect("1x1 phi");
    m[(0, 0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use approx::assert_relative_eq;
    use ndarray::arr1;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn expmv_plain(a: &Array2<f64>, b: &Array1<f64>, t: f64, cfg: &ExpmvConfig<f64>) -> Array1<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let av = tape.constant_matrix(a.clone());
        let bv = tape.constant_vector(b.clone());
        let op = MatrixOp { a: av };
        let out = expmv(&mut tape, &op, bv, t, cfg).unwrap();
        tape.value(out).as_vector().unwrap().clone()
    }

    #[test]
    fn phi0_of_zero_is_identity() {
        let z: Array2<f64> = Array2::zeros((3, 3));
        assert_eq!(phi_dense(0, &z).unwrap(), Array2::<f64>::eye(3));
    }

    #[test]
    fn phi1_at_zero_is_one() {
        assert_eq!(phi_scalar::<f64>(1, 0.0), 1.0);
    }

    #[test]
    fn phi1_at_one_is_e_minus_one() {
        assert_relative_eq!(phi_scalar::<f64>(1, 1.0), std::f64::consts::E - 1.0, epsilon = 1e-14);
    }

    #[test]
    fn phi_recurrence_consistency() {
        // (φ_k(z) - 1/k!)/z = φ_{k+1}(z)
        for &z in &[0.5f64, -0.5, 2.0, -2.0] {
            let mut fact = 1.0f64;
            for k in 0..4usize {
                if k > 0 {
                    fact *= k as f64;
                }
                let lhs = (phi_scalar(k, z) - 1.0 / fact) / z;
                let rhs = phi_scalar(k + 1, z);
                assert_relative_eq!(lhs, rhs, epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn phi_dense_rejects_non_square() {
        let z: Array2<f64> = Array2::zeros((2, 3));
        assert!(phi_dense(1, &z).is_err());
    }

    #[test]
    fn expmv_zero_operator_returns_b() {
        let a: Array2<f64> = Array2::zeros((3, 3));
        let b = arr1(&[1.0, -2.0, 0.5]);
        for &t in &[0.1, 1.0, 17.0] {
            let out = expmv_plain(&a, &b, t, &ExpmvConfig::default());
            assert_eq!(out, b);
        }
    }

    #[test]
    fn expmv_jordan_block_closed_form() {
        // e^{tA} = e^{-2t} [[1, t], [0, 1]] for the decay matrix
        let a = ndarray::arr2(&[[-2.0, 1.0], [0.0, -2.0]]);
        let cfg = select_s_m(1.0, linalg::spectral_norm_estimate(&a, 20), &ExpmvOptions::default());
        let s = (-2.0f64).exp();
        let out = expmv_plain(&a, &arr1(&[1.0, 0.0]), 1.0, &cfg);
        assert_relative_eq!(out[0], s, max_relative = 1e-12);
        assert_relative_eq!(out[1], 0.0, epsilon = 1e-14);
        let out = expmv_plain(&a, &arr1(&[0.0, 1.0]), 1.0, &cfg);
        assert_relative_eq!(out[0], s, max_relative = 1e-12);
        assert_relative_eq!(out[1], s, max_relative = 1e-12);
    }

    #[test]
    fn expmv_matches_dense_oracle_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 10;
            let mut a = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
            let norm = linalg::spectral_norm_estimate(&a, 30);
            a.mapv_inplace(|x| x * 5.0 / norm);
            let b = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
            let cfg = select_s_m(1.0, 5.0, &ExpmvOptions::default());
            let got = expmv_plain(&a, &b, 1.0, &cfg);
            let want = phi_dense(0, &a).unwrap().dot(&b);
            let err = (&got - &want).mapv(f64::abs).sum() / want.mapv(f64::abs).sum();
            assert!(err < 1e-10, "relative error {err}");
        }
    }

    #[test]
    fn select_s_m_rules() {
        let opts = ExpmvOptions::<f64>::default();
        assert_eq!(select_s_m(0.0, 0.0, &opts).s, 1);
        assert_eq!(select_s_m(2.0, 3.0, &opts).s, 6);
        let cfg = select_s_m(1.72e6, 2.5e-3, &opts);
        assert_eq!(cfg.s, (1.72e6f64 * 2.5e-3).ceil() as usize);
        assert_eq!(cfg.tol, 1e-12);
    }

    #[test]
    fn etd1_step_limits() {
        // h = 0 → u0, and A = 0 → u0 + h g0 (forward Euler limit)
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant_matrix(ndarray::arr2(&[[-1.0, 0.0], [0.5, -2.0]]));
        let u0 = tape.constant_vector(arr1(&[0.3, -0.7]));
        let g0 = tape.constant_vector(arr1(&[1.0, 2.0]));
        let op = MatrixOp { a };
        let out = etd1_augmented_step(&mut tape, &op, g0, u0, 0.0, &ExpmvConfig::default()).unwrap();
        assert_eq!(tape.value(out).as_vector().unwrap(), &arr1(&[0.3, -0.7]));

        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant_matrix(Array2::zeros((2, 2)));
        let u0 = tape.constant_vector(arr1(&[0.3, -0.7]));
        let g0 = tape.constant_vector(arr1(&[1.0, 2.0]));
        let op = MatrixOp { a };
        let out = etd1_augmented_step(&mut tape, &op, g0, u0, 0.25, &ExpmvConfig::default()).unwrap();
        let v = tape.value(out).as_vector().unwrap();
        assert_relative_eq!(v[0], 0.3 + 0.25, epsilon = 1e-14);
        assert_relative_eq!(v[1], -0.7 + 0.5, epsilon = 1e-14);
    }

    #[test]
    fn etd1_matches_dense_phi_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 8;
        let a = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let u0 = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let g0 = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let h = 0.3;

        let mut tape: Tape<f64> = Tape::new();
        let av = tape.constant_matrix(a.clone());
        let uv = tape.constant_vector(u0.clone());
        let gv = tape.constant_vector(g0.clone());
        let op = MatrixOp { a: av };
        let norm = linalg::spectral_norm_estimate(&a, 20);
        let cfg = select_s_m(h, norm, &ExpmvOptions::default());
        let out = etd1_augmented_step(&mut tape, &op, gv, uv, h, &cfg).unwrap();
        let got = tape.value(out).as_vector().unwrap().clone();

        let ha = a.mapv(|x| x * h);
        let want = phi_dense(0, &ha).unwrap().dot(&u0)
            + phi_dense(1, &ha).unwrap().dot(&g0).mapv(|x| x * h);
        let err = (&got - &want).mapv(f64::abs).sum() / want.mapv(f64::abs).sum();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn etd1_batch_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 4;
        let a = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let cfg = select_s_m(0.5, linalg::spectral_norm_estimate(&a, 20), &ExpmvOptions::default());
        let us: Vec<Array1<f64>> =
            (0..3).map(|_| Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0))).collect();
        let gs: Vec<Array1<f64>> =
            (0..3).map(|_| Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0))).collect();

        let mut tape: Tape<f64> = Tape::new();
        let av = tape.constant_matrix(a.clone());
        let mut u_mat = Array2::zeros((n, 3));
        let mut g_mat = Array2::zeros((n, 3));
        for j in 0..3 {
            u_mat.column_mut(j).assign(&us[j]);
            g_mat.column_mut(j).assign(&gs[j]);
        }
        let uv = tape.constant_matrix(u_mat);
        let gv = tape.constant_matrix(g_mat);
        let (batch, _) = etd1_batch_step(&mut tape, av, gv, uv, 0.5, &cfg).unwrap();
        let batch_val = tape.value(batch).as_matrix().unwrap().clone();

        for j in 0..3 {
            let mut t2: Tape<f64> = Tape::new();
            let av2 = t2.constant_matrix(a.clone());
            let uv2 = t2.constant_vector(us[j].clone());
            let gv2 = t2.constant_vector(gs[j].clone());
            let op = MatrixOp { a: av2 };
            let single = etd1_augmented_step(&mut t2, &op, gv2, uv2, 0.5, &cfg).unwrap();
            let sv = t2.value(single).as_vector().unwrap().clone();
            for i in 0..n {
                assert_relative_eq!(batch_val[(i, j)], sv[i], max_relative = 1e-11, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn etd_p_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 5;
        let a = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let u0 = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let g1 = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let cfg = select_s_m(0.4, linalg::spectral_norm_estimate(&a, 20), &ExpmvOptions::default());

        // p = 1 identical to the dedicated step
        let mut t1: Tape<f64> = Tape::new();
        let av = t1.constant_matrix(a.clone());
        let uv = t1.constant_vector(u0.clone());
        let gv = t1.constant_vector(g1.clone());
        let op = MatrixOp { a: av };
        let e1 = etd1_augmented_step(&mut t1, &op, gv, uv, 0.4, &cfg).unwrap();
        let e1v = t1.value(e1).as_vector().unwrap().clone();
        let mut t2: Tape<f64> = Tape::new();
        let av = t2.constant_matrix(a.clone());
        let uv = t2.constant_vector(u0.clone());
        let gv = t2.constant_vector(g1.clone());
        let op = MatrixOp { a: av };
        let ep = etd_p_augmented_step(&mut t2, &op, &[gv], uv, 0.4, &cfg).unwrap();
        assert_eq!(&e1v, t2.value(ep).as_vector().unwrap());

        // all g_k = 0 → plain exponential
        let mut t3: Tape<f64> = Tape::new();
        let av = t3.constant_matrix(a.clone());
        let uv = t3.constant_vector(u0.clone());
        let z1 = t3.constant_vector(Array1::zeros(n));
        let z2 = t3.constant_vector(Array1::zeros(n));
        let op = MatrixOp { a: av };
        let out = etd_p_augmented_step(&mut t3, &op, &[z1, z2], uv, 0.4, &cfg).unwrap();
        let got = t3.value(out).as_vector().unwrap().clone();
        let want = phi_dense(0, &a.mapv(|x| x * 0.4)).unwrap().dot(&u0);
        let err = (&got - &want).mapv(f64::abs).sum() / want.mapv(f64::abs).sum();
        assert!(err < 1e-10);
    }

    #[test]
    fn etd_p2_scalar_matches_phi_form() {
        // scalar problem with supplied g1, g2
        let lam = -1.3f64;
        let (u0, g1, g2, h) = (0.8f64, 0.4f64, -0.2f64, 0.6f64);
        let mut tape: Tape<f64> = Tape::new();
        let av = tape.constant_matrix(Array2::from_elem((1, 1), lam));
        let uv = tape.constant_vector(arr1(&[u0]));
        let g1v = tape.constant_vector(arr1(&[g1]));
        let g2v = tape.constant_vector(arr1(&[g2]));
        let op = MatrixOp { a: av };
        let cfg = select_s_m(h, lam.abs(), &ExpmvOptions::default());
        let out = etd_p_augmented_step(&mut tape, &op, &[g1v, g2v], uv, h, &cfg).unwrap();
        let got = tape.value(out).as_vector().unwrap()[0];
        let z = h * lam;
        let want = z.exp() * u0 + phi_scalar(1, z) * h * g1 + phi_scalar(2, z) * h * h * g2;
        assert_relative_eq!(got, want, max_relative = 1e-10);
    }

    #[test]
    fn segmentation_consistency_linearity_semigroup() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 6;
        let a = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let b1 = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let b2 = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let norm = linalg::spectral_norm_estimate(&a, 20);
        let cfg = select_s_m(1.0, norm, &ExpmvOptions::default());
        let cfg2 = ExpmvConfig { s: cfg.s * 2, ..cfg };

        let r1 = expmv_plain(&a, &b1, 1.0, &cfg);
        let r2 = expmv_plain(&a, &b1, 1.0, &cfg2);
        let rel = (&r1 - &r2).mapv(f64::abs).sum() / r1.mapv(f64::abs).sum();
        assert!(rel < 1e-9, "segmentation consistency {rel}");

        let alpha = 0.7;
        let beta = -1.9;
        let combo = b1.mapv(|x| x * alpha) + b2.mapv(|x| x * beta);
        let lhs = expmv_plain(&a, &combo, 1.0, &cfg);
        let rhs = expmv_plain(&a, &b1, 1.0, &cfg).mapv(|x| x * alpha)
            + expmv_plain(&a, &b2, 1.0, &cfg).mapv(|x| x * beta);
        let rel = (&lhs - &rhs).mapv(f64::abs).sum() / lhs.mapv(f64::abs).sum().max(1e-300);
        assert!(rel < 1e-12, "linearity {rel}");

        let mid = expmv_plain(&a, &b1, 0.4, &cfg);
        let lhs = expmv_plain(&a, &mid, 0.6, &cfg);
        let rhs = expmv_plain(&a, &b1, 1.0, &cfg);
        let rel = (&lhs - &rhs).mapv(f64::abs).sum() / rhs.mapv(f64::abs).sum();
        assert!(rel < 1e-9, "semigroup {rel}");
    }

    #[test]
    fn expmv_gradient_matches_finite_differences() {
        use crate::autodiff::{finite_diff_check, ParamStore};
        use crate::tensor::Value;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 3;
        let a = Array2::from_shape_fn((n, n), |_| rng.gen_range(-0.8..0.8));
        let b = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let mut store = ParamStore::new();
        store.insert("a", Value::Matrix(a)).unwrap();
        store.insert("b", Value::Vector(b)).unwrap();
        let cfg = ExpmvConfig { s: 3, m_max: M_CAP, tol: 1e-12 };
        let report = finite_diff_check(
            &store,
            |tape, store| {
                let av = tape.leaf(store, "a")?;
                let bv = tape.leaf(store, "b")?;
                let op = MatrixOp { a: av };
                let out = expmv(tape, &op, bv, 0.7, &cfg)?;
                Ok(tape.sumsq(out))
            },
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.all_ok(), "max rel err {}", report.max_rel_err);
    }
}
