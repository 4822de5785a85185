//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! The engine is deliberately small: an eager Wengert tape with the handful of
//! primitives the rest of the crate needs (linear algebra, tanh, the norm and
//! clamp machinery of the constrained layers, and a differentiable LU solve
//! for the implicit-explicit baseline).

mod params;
mod tape;

pub use params::{Gradients, ParamEntry, ParamStore};
pub use tape::{Tape, Var};

use crate::error::Result;
use crate::scalar::Scalar;

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub flagged: bool,
}

/// Report from [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl FiniteDiffReport {
    pub fn all_ok(&self) -> bool {
        self.per_param.iter().all(|p| !p.flagged)
    }
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` records the scalar function of interest on a fresh tape; it is
/// called once for the reverse sweep and twice per parameter element for the
/// central differences. Per-parameter discrepancies are measured relative to
/// the infinity norm of that parameter's finite-difference gradient.
pub fn finite_diff_check<T, F>(
    store: &ParamStore<T>,
    build: F,
    step: T,
    rel_tol: f64,
) -> Result<FiniteDiffReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let grads = tape.backward(out, store.len())?;

    let two = T::from_f64_lossy(2.0);
    let mut per_param = Vec::with_capacity(store.len());
    let mut global_max = 0.0f64;

    for id in 0..store.len() {
        let entry = store.entry(id);
        let n = entry.value.len();
        let mut fd = Vec::with_capacity(n);
        for elem in 0..n {
            let mut plus = store.clone();
            plus.nudge(id, elem, step);
            let mut t1 = Tape::new();
            let v1 = build(&mut t1, &plus)?;
            let f_plus = t1.scalar_value(v1)?;

            let mut minus = store.clone();
            minus.nudge(id, elem, -step);
            let mut t2 = Tape::new();
            let v2 = build(&mut t2, &minus)?;
            let f_minus = t2.scalar_value(v2)?;

            fd.push((f_plus - f_minus) / (two * step));
        }

        let ad: Vec<T> = match grads.get(id) {
            Some(g) => g.flat(),
            None => vec![T::zero(); n],
        };
        let fd_scale = fd
            .iter()
            .map(|x| x.to_f64_lossy().abs())
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let max_rel = ad
            .iter()
            .zip(&fd)
            .map(|(a, f)| (a.to_f64_lossy() - f.to_f64_lossy()).abs() / fd_scale)
            .fold(0.0f64, f64::max);

        global_max = global_max.max(max_rel);
        per_param.push(ParamCheck {
            name: entry.name.clone(),
            max_rel_err: max_rel,
            flagged: max_rel > rel_tol,
        });
    }

    Ok(FiniteDiffReport { per_param, max_rel_err: global_max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Value;
    use approx::assert_relative_eq;
    use ndarray::{arr1, arr2, Array1, Array2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, v: Value<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, v).unwrap();
        s
    }

    #[test]
    fn record_scalar_square() {
        let store = store_with("x", Value::Scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.leaf(&store, "x").unwrap();
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.scalar_value(y).unwrap(), 9.0);
    }

    #[test]
    fn record_tanh_at_origin() {
        let store = store_with("u", Value::Scalar(0.0));
        let mut tape = Tape::new();
        let u = tape.leaf(&store, "u").unwrap();
        let y = tape.tanh(u);
        assert_eq!(tape.scalar_value(y).unwrap(), 0.0);
    }

    #[test]
    fn record_decay_matvec() {
        // A_decay * (1,1) = (-1,-2)
        let a = arr2(&[[-2.0, 1.0], [0.0, -2.0]]);
        let mut tape: Tape<f64> = Tape::new();
        let am = tape.constant_matrix(a);
        let u = tape.constant_vector(arr1(&[1.0, 1.0]));
        let y = tape.matvec(am, u).unwrap();
        assert_eq!(tape.value(y).as_vector().unwrap(), &arr1(&[-1.0, -2.0]));
    }

    #[test]
    fn backward_square_and_tanh() {
        let mut store = store_with("x", Value::Scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.leaf(&store, "x").unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward_into(y, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad.as_scalar().unwrap(), 6.0);

        let mut store = store_with("x", Value::Scalar(0.0));
        let mut tape = Tape::new();
        let x = tape.leaf(&store, "x").unwrap();
        let y = tape.tanh(x);
        tape.backward_into(y, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad.as_scalar().unwrap(), 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = store_with("x", Value::Vector(arr1(&[1.0, 2.0])));
        let mut tape = Tape::new();
        let x = tape.leaf(&store, "x").unwrap();
        assert!(tape.backward(x, store.len()).is_err());
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant_vector(arr1(&[1.0, 2.0]));
        let b = tape.constant_vector(arr1(&[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("vector[2]") && msg.contains("vector[3]"));
    }

    #[test]
    fn quadratic_form_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-1.0..1.0));
        let u = Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
        let store = store_with("w", Value::Matrix(w));
        let report = finite_diff_check(
            &store,
            |tape, store| {
                let wv = tape.leaf(store, "w")?;
                let uv = tape.constant_vector(u.clone());
                let y = tape.matvec(wv, uv)?;
                Ok(tape.sumsq(y))
            },
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.all_ok(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-7, "quadratic should be near-exact: {}", report.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_discrepancy() {
        let store = store_with("x", Value::Scalar(1.5));
        let report = finite_diff_check(
            &store,
            |tape, _| Ok(tape.constant_scalar(7.0)),
            1e-6,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn max1_tie_takes_constant_branch() {
        let mut store = store_with("x", Value::Scalar(1.0));
        let mut tape = Tape::new();
        let x = tape.leaf(&store, "x").unwrap();
        let y = tape.max1(x);
        tape.backward_into(y, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad.as_scalar().unwrap(), 0.0);
    }

    #[test]
    fn norm_tie_breaks_to_lowest_index() {
        // both columns sum to 3; subgradient must live on column 0
        let w = arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        let mut store = store_with("w", Value::Matrix(w));
        let mut tape = Tape::new();
        let wv = tape.leaf(&store, "w").unwrap();
        let n = tape.norm1(wv).unwrap();
        assert_eq!(tape.scalar_value(n).unwrap(), 3.0);
        tape.backward_into(n, &mut store).unwrap();
        let g = store.get("w").unwrap().grad.as_matrix().unwrap().clone();
        assert_eq!(g, arr2(&[[1.0, 0.0], [1.0, 0.0]]));
    }

    #[test]
    fn solve_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // diagonally dominant so LU stays well-conditioned under nudges
        let mut a = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-0.5..0.5));
        for i in 0..3 {
            a[(i, i)] += 3.0;
        }
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
        let mut store = ParamStore::new();
        store.insert("a", Value::Matrix(a)).unwrap();
        store.insert("b", Value::Vector(b)).unwrap();
        let report = finite_diff_check(
            &store,
            |tape, store| {
                let av = tape.leaf(store, "a")?;
                let bv = tape.leaf(store, "b")?;
                let x = tape.solve(av, bv)?;
                Ok(tape.sumsq(x))
            },
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.all_ok(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gradient_accumulation_order_is_fixed() {
        // sum of per-element losses == loss of sum, with grads merged in index order
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let us: Vec<Array1<f64>> =
            (0..4).map(|_| Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0))).collect();
        let store = store_with("w", Value::Matrix(w));

        // single tape, summed loss
        let mut tape = Tape::new();
        let wv = tape.leaf(&store, "w").unwrap();
        let mut parts = Vec::new();
        for u in &us {
            let uv = tape.constant_vector(u.clone());
            let y = tape.matvec(wv, uv).unwrap();
            parts.push(tape.sumsq(y));
        }
        let total = tape.add_n(&parts).unwrap();
        let g_joint = tape.backward(total, store.len()).unwrap();

        // private tapes, merged in fixed order
        let mut g_acc = Gradients::new(store.len());
        for u in &us {
            let mut t = Tape::new();
            let wv = t.leaf(&store, "w").unwrap();
            let uv = t.constant_vector(u.clone());
            let y = t.matvec(wv, uv).unwrap();
            let l = t.sumsq(y);
            let g = t.backward(l, store.len()).unwrap();
            g_acc.merge(&g).unwrap();
        }

        let a = g_joint.get(0).unwrap().as_matrix().unwrap().clone();
        let b = g_acc.get(0).unwrap().as_matrix().unwrap().clone();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(x, y, max_relative = 1e-14);
        }
    }

    /// Every supported primitive matches central finite differences at random
    /// points (the per-primitive gradient oracle).
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let primitives: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> crate::error::Result<Var>>)> = vec![
            ("add", Box::new(|t, s| {
                let a = t.leaf(s, "a")?;
                let b = t.leaf(s, "b")?;
                let y = t.add(a, b)?;
                Ok(t.sumsq(y))
            })),
            ("sub", Box::new(|t, s| {
                let a = t.leaf(s, "a")?;
                let b = t.leaf(s, "b")?;
                let y = t.sub(a, b)?;
                Ok(t.sumsq(y))
            })),
            ("mul", Box::new(|t, s| {
                let a = t.leaf(s, "a")?;
                let b = t.leaf(s, "b")?;
                let y = t.mul(a, b)?;
                Ok(t.sum(y))
            })),
            ("matmul", Box::new(|t, s| {
                let m = t.leaf(s, "m")?;
                let n = t.leaf(s, "n")?;
                let y = t.matmul(m, n)?;
                Ok(t.sumsq(y))
            })),
            ("matmul_scaled", Box::new(|t, s| {
                let m = t.leaf(s, "m")?;
                let n = t.leaf(s, "n")?;
                let y = t.matmul_scaled(m, n, 0.37)?;
                Ok(t.sumsq(y))
            })),
            ("matvec", Box::new(|t, s| {
                let m = t.leaf(s, "m")?;
                let a = t.leaf(s, "a")?;
                let y = t.matvec(m, a)?;
                Ok(t.sumsq(y))
            })),
            ("add_col", Box::new(|t, s| {
                let m = t.leaf(s, "m")?;
                let a = t.leaf(s, "a")?;
                let y = t.add_col(m, a)?;
                Ok(t.sumsq(y))
            })),
            ("scale", Box::new(|t, s| {
                let a = t.leaf(s, "a")?;
                let y = t.scale(a, 1.7);
                Ok(t.sumsq(y))
            })),
            ("scale_by", Box::new(|t, s| {
                let a = t.leaf(s, "a")?;
                let c = t.leaf(s, "c")?;
                let y = t.scale_by(a, c)?;
                Ok(t.sumsq(y))
            })),
            ("tanh", Box::new(|t, s| {
                let a = t.leaf(s, "a")?;
                let y = t.tanh(a);
                Ok(t.sumsq(y))
            })),
            ("sqrt_recip_max1", Box::new(|t, s| {
                let c = t.leaf(s, "cpos")?;
                let r = t.sqrt(c);
                let m = t.max1(r);
                Ok(t.recip(m))
            })),
            ("softplus", Box::new(|t, s| {
                let a = t.leaf(s, "a")?;
                let y = t.softplus(a);
                Ok(t.sumsq(y))
            })),
            ("transpose", Box::new(|t, s| {
                let m = t.leaf(s, "n")?;
                let y = t.transpose(m)?;
                let p = t.matmul(y, m)?;
                Ok(t.sumsq(p))
            })),
            ("scatter", Box::new(|t, s| {
                let a = t.leaf(s, "a")?;
                let m = t.scatter_mat(a, &[(0, 0), (1, 1), (2, 0)], 3, 2)?;
                Ok(t.sumsq(m))
            })),
            ("sum", Box::new(|t, s| {
                let a = t.leaf(s, "a")?;
                Ok(t.sum(a))
            })),
            ("col_sumsq", Box::new(|t, s| {
                let m = t.leaf(s, "m")?;
                let v = t.col_sumsq(m)?;
                Ok(t.sumsq(v))
            })),
            ("norm1", Box::new(|t, s| {
                let m = t.leaf(s, "m")?;
                Ok(t.norm1(m)?)
            })),
            ("norminf", Box::new(|t, s| {
                let m = t.leaf(s, "m")?;
                Ok(t.norminf(m)?)
            })),
            ("concat_slice", Box::new(|t, s| {
                let a = t.leaf(s, "a")?;
                let b = t.leaf(s, "b")?;
                let c = t.concat(&[a, b])?;
                let d = t.slice(c, 1, 3)?;
                Ok(t.sumsq(d))
            })),
            ("add_n", Box::new(|t, s| {
                let a = t.leaf(s, "a")?;
                let b = t.leaf(s, "b")?;
                let c = t.add_n(&[a, b, a])?;
                Ok(t.sumsq(c))
            })),
        ];

        let mut worst = 0.0f64;
        for seed in 0..110u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store
                .insert("a", Value::Vector(Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0))))
                .unwrap();
            store
                .insert("b", Value::Vector(Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0))))
                .unwrap();
            store
                .insert("m", Value::Matrix(Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0))))
                .unwrap();
            store
                .insert("n", Value::Matrix(Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0))))
                .unwrap();
            store.insert("c", Value::Scalar(rng.gen_range(-1.0..1.0))).unwrap();
            store.insert("cpos", Value::Scalar(rng.gen_range(0.5..3.0))).unwrap();

            let (name, build) = &primitives[seed as usize % primitives.len()];
            let report = finite_diff_check(&store, build, 1e-6, 1e-5).unwrap();
            assert!(report.all_ok(), "{name} failed at seed {seed}: {}", report.max_rel_err);
            worst = worst.max(report.max_rel_err);
        }
        assert!(worst < 1e-5);
    }
}
