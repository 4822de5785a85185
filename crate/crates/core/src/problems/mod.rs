//! Built-in benchmark systems, ground-truth generation, and transient-growth
//! diagnostics.

pub mod ks;

use crate::error::{Error, Result};
use crate::integrators::{self, TimeGrid, Trajectory};
use crate::linalg;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

/// Mix a base seed with a stream index (splitmix-style) so trajectories can
/// be generated in parallel with reproducible per-trajectory randomness.
pub fn derive_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A set of trajectories sharing one grid recipe. States are stored in
/// scaled coordinates when scaling is active.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub problem: String,
    pub grid: TimeGrid<T>,
    /// One `(nt, dim)` block per trajectory.
    pub states: Vec<Array2<T>>,
    /// Per-component multipliers applied to raw states.
    pub scaling: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
    pub gen_tol: f64,
    pub epsilon: Option<f64>,
}

impl<T: Scalar> Dataset<T> {
    pub fn n_traj(&self) -> usize {
        self.states.len()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map(|s| s.ncols()).unwrap_or(0)
    }

    pub fn trajectory(&self, i: usize) -> Result<Trajectory<T>> {
        Trajectory::new(self.grid.clone(), self.states[i].clone())
    }

    /// Per-component standard deviation over all trajectories and times.
    pub fn component_std(&self) -> Vec<f64> {
        let dim = self.dim();
        let mut mean = vec![0.0f64; dim];
        let mut count = 0usize;
        for s in &self.states {
            for row in s.rows() {
                for (j, v) in row.iter().enumerate() {
                    mean[j] += v.to_f64_lossy();
                }
                count += 1;
            }
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0f64; dim];
        for s in &self.states {
            for row in s.rows() {
                for (j, v) in row.iter().enumerate() {
                    let d = v.to_f64_lossy() - mean[j];
                    var[j] += d * d;
                }
            }
        }
        var.iter().map(|v| (v / count as f64).sqrt()).collect()
    }
}

/// Add i.i.d. Gaussian noise with per-component std `noise_scale * data_std`.
pub(crate) fn add_noise<T: Scalar>(ds: &mut Dataset<T>, noise_scale: f64, seed: u64) {
    if noise_scale <= 0.0 {
        return;
    }
    let stds = ds.component_std();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, usize::MAX - 1));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for s in ds.states.iter_mut() {
        for mut row in s.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let z: f64 = normal.sample(&mut rng);
                *v = *v + T::from_f64_lossy(noise_scale * stds[j] * z);
            }
        }
    }
    ds.noise = noise_scale;
}

// ---- transient-growth diagnostics ---------------------------------------------

/// `alpha = max Re lambda(A)` and `gamma = max lambda((A + A^T)/2)`: the sign
/// of `gamma` decides whether `||e^{tA}||` grows near `t = 0`.
pub fn transient_diagnostics<T: Scalar>(a: &Array2<T>) -> Result<(f64, f64)> {
    let alpha = linalg::max_real_eigenvalue(a)?;
    let gamma = linalg::max_symmetric_eigenvalue(a)?;
    Ok((alpha, gamma))
}

// ---- weakly nonlinear transient-growth system ----------------------------------

pub fn a_decay<T: Scalar>() -> Array2<T> {
    let c = |x: f64| T::from_f64_lossy(x);
    ndarray::arr2(&[[c(-2.0), c(1.0)], [c(0.0), c(-2.0)]])
}

pub fn a_bump<T: Scalar>() -> Array2<T> {
    let c = |x: f64| T::from_f64_lossy(x);
    ndarray::arr2(&[[c(-2.0), c(10.0)], [c(0.0), c(-2.0)]])
}

/// `A x + eps sin(x)` with the sine applied componentwise.
pub fn weakly_nonlinear_rhs<T: Scalar>(x: &Array1<T>, eps: T, a: &Array2<T>) -> Array1<T> {
    a.dot(x) + x.mapv(|v| v.sin() * eps)
}

/// Settings for the weakly nonlinear dataset.
#[derive(Debug, Clone, Copy)]
pub struct WeaklyNonlinearOptions {
    pub epsilon: f64,
    /// Reference-solver tolerance.
    pub rel_tol: f64,
    pub t_end: f64,
}

impl Default for WeaklyNonlinearOptions {
    fn default() -> Self {
        WeaklyNonlinearOptions { epsilon: 1.0, rel_tol: 1e-8, t_end: 10.0 }
    }
}

/// Shared grid + trajectories for the transient-growth system with the bump
/// matrix. The grid is the accepted-step grid of one reference trajectory
/// (fixed seed), and every initial condition is integrated adaptively and
/// interpolated onto it.
pub fn weakly_nonlinear_dataset<T: Scalar>(
    n_traj: usize,
    opts: &WeaklyNonlinearOptions,
    noise_scale: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    let a = a_bump::<T>();
    let eps = T::from_f64_lossy(opts.epsilon);
    let rhs = move |x: &Array1<T>| weakly_nonlinear_rhs(x, eps, &a);
    let rhs = &rhs;
    let rtol = T::from_f64_lossy(opts.rel_tol);
    let t_end = T::from_f64_lossy(opts.t_end);

    // reference trajectory defines the shared grid
    let mut rng0 = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let ic0 = Array1::from_shape_fn(2, |_| T::from_f64_lossy(rng0.gen_range(-1.0..=1.0)));
    let reference = integrators::rkf45_solve(|x: &Array1<T>| rhs(x), &ic0, (T::zero(), t_end), rtol)?;
    let grid = reference.grid.clone();

    let states: Result<Vec<Array2<T>>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            if i == 0 {
                return Ok(reference.states.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
            let ic = Array1::from_shape_fn(2, |_| T::from_f64_lossy(rng.gen_range(-1.0..=1.0)));
            let traj =
                integrators::rkf45_solve(|x: &Array1<T>| rhs(x), &ic, (T::zero(), t_end), rtol)?;
            resample_onto(&traj, &grid, &|x: &Array1<T>| rhs(x))
        })
        .collect();

    let mut ds = Dataset {
        problem: "weakly-nonlinear".to_string(),
        grid,
        states: states?,
        scaling: vec![1.0, 1.0],
        noise: 0.0,
        seed,
        gen_tol: opts.rel_tol,
        epsilon: Some(opts.epsilon),
    };
    add_noise(&mut ds, noise_scale, seed);
    Ok(ds)
}

/// Cubic-Hermite resampling of an adaptively gridded trajectory onto a target
/// grid inside its span.
fn resample_onto<T: Scalar>(
    traj: &Trajectory<T>,
    target: &TimeGrid<T>,
    rhs: &impl Fn(&Array1<T>) -> Array1<T>,
) -> Result<Array2<T>> {
    let src = traj.grid.times();
    let mut out = Array2::zeros((target.len(), traj.dim()));
    let mut k = 0usize;
    for (row, &t) in target.times().iter().enumerate() {
        while k + 1 < src.len() - 1 && src[k + 1] < t {
            k += 1;
        }
        let (t0, t1) = (src[k], src[k + 1]);
        if t < t0 || t > t1 + (t1 - t0) * T::from_f64_lossy(1e-9) {
            return Err(Error::invalid(format!("resample target {t} outside source span")));
        }
        let y0 = traj.state(k);
        let y1 = traj.state(k + 1);
        let yi = if t == t0 {
            y0
        } else if t == t1 {
            y1
        } else {
            let f0 = rhs(&y0);
            let f1 = rhs(&y1);
            integrators::hermite_interp(t0, &y0, &f0, t1, &y1, &f1, t)
        };
        out.row_mut(row).assign(&yi);
    }
    Ok(out)
}

// ---- Robertson kinetics ------------------------------------------------------------

pub fn robertson_rhs<T: Scalar>(y: &Array1<T>) -> Array1<T> {
    let c = |x: f64| T::from_f64_lossy(x);
    Array1::from(vec![
        c(-0.04) * y[0] + c(1.0e4) * y[1] * y[2],
        c(0.04) * y[0] - c(1.0e4) * y[1] * y[2] - c(3.0e7) * y[1] * y[1],
        c(3.0e7) * y[1] * y[1],
    ])
}

pub fn robertson_jacobian<T: Scalar>(y: &Array1<T>) -> Array2<T> {
    let c = |x: f64| T::from_f64_lossy(x);
    ndarray::arr2(&[
        [c(-0.04), c(1.0e4) * y[2], c(1.0e4) * y[1]],
        [c(0.04), c(-1.0e4) * y[2] - c(6.0e7) * y[1], c(-1.0e4) * y[1]],
        [c(0.0), c(6.0e7) * y[1], c(0.0)],
    ])
}

/// Scaling that brings the second component to O(1).
pub fn robertson_scaling() -> Vec<f64> {
    vec![1.0, 1.0e4, 1.0]
}

pub fn robertson_scale<T: Scalar>(y: &Array1<T>) -> Array1<T> {
    apply_scaling(y, &robertson_scaling())
}

pub fn robertson_unscale<T: Scalar>(y_scaled: &Array1<T>) -> Array1<T> {
    unapply_scaling(y_scaled, &robertson_scaling())
}

pub fn apply_scaling<T: Scalar>(y: &Array1<T>, scaling: &[f64]) -> Array1<T> {
    Array1::from_iter(y.iter().zip(scaling).map(|(v, s)| *v * T::from_f64_lossy(*s)))
}

pub fn unapply_scaling<T: Scalar>(y: &Array1<T>, scaling: &[f64]) -> Array1<T> {
    Array1::from_iter(y.iter().zip(scaling).map(|(v, s)| *v / T::from_f64_lossy(*s)))
}

#[derive(Debug, Clone, Copy)]
pub struct RobertsonOptions {
    pub tol: f64,
    pub grid_points: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub perturbation: f64,
}

impl Default for RobertsonOptions {
    fn default() -> Self {
        RobertsonOptions { tol: 1e-10, grid_points: 50, t_min: 4e-6, t_max: 4e6, perturbation: 1e-2 }
    }
}

/// Robertson initial condition: `(1,0,0)` plus a small perturbation on the
/// first and third components, renormalized onto the conservation simplex.
pub fn robertson_ic<T: Scalar>(rng: &mut ChaCha8Rng, perturbation: f64) -> Array1<T> {
    let d1: f64 = rng.gen_range(-perturbation..=perturbation);
    let d3: f64 = rng.gen_range(0.0..=perturbation);
    let y1 = 1.0 + d1;
    let y3 = d3;
    let total = y1 + y3;
    Array1::from(vec![T::from_f64_lossy(y1 / total), T::zero(), T::from_f64_lossy(y3 / total)])
}

/// Log-spaced ground truth in scaled coordinates.
pub fn robertson_dataset<T: Scalar>(
    n_traj: usize,
    opts: &RobertsonOptions,
    noise_scale: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    let grid = TimeGrid::log_space(
        T::from_f64_lossy(opts.t_min),
        T::from_f64_lossy(opts.t_max),
        opts.grid_points,
    )?;
    let tol = T::from_f64_lossy(opts.tol);
    let scaling = robertson_scaling();

    let states: Result<Vec<Array2<T>>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
            let ic = robertson_ic::<T>(&mut rng, opts.perturbation);
            let traj =
                integrators::stiff_solve(robertson_rhs, robertson_jacobian, &ic, T::zero(), &grid, tol)?;
            let mut scaled = traj.states;
            for (j, s) in scaling.iter().enumerate() {
                scaled.column_mut(j).mapv_inplace(|v| v * T::from_f64_lossy(*s));
            }
            Ok(scaled)
        })
        .collect();

    let mut ds = Dataset {
        problem: "robertson".to_string(),
        grid,
        states: states?,
        scaling,
        noise: 0.0,
        seed,
        gen_tol: opts.tol,
        epsilon: None,
    };
    add_noise(&mut ds, noise_scale, seed);
    Ok(ds)
}

// ---- dispatcher ---------------------------------------------------------------------

/// Options shared by the `gen-data` entry point.
#[derive(Debug, Clone)]
pub enum ProblemOptions {
    WeaklyNonlinear(WeaklyNonlinearOptions),
    Robertson(RobertsonOptions),
    Ks(ks::KsOptions),
}

/// Generate a dataset by problem name.
pub fn gen_dataset<T: Scalar + rustfft::FftNum>(
    problem: &str,
    n_traj: usize,
    opts: &ProblemOptions,
    noise_scale: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    match (problem, opts) {
        ("weakly-nonlinear", ProblemOptions::WeaklyNonlinear(o)) => {
            weakly_nonlinear_dataset(n_traj, o, noise_scale, seed)
        }
        ("robertson", ProblemOptions::Robertson(o)) => robertson_dataset(n_traj, o, noise_scale, seed),
        ("ks", ProblemOptions::Ks(o)) => ks::ks_dataset(n_traj, o, noise_scale, seed),
        _ => Err(Error::invalid(format!("unknown problem or mismatched options: {problem}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr1;

    #[test]
    fn weakly_nonlinear_rhs_values() {
        // eps = 0 at (1,0) under the bump matrix
        let y = weakly_nonlinear_rhs(&arr1(&[1.0, 0.0]), 0.0, &a_bump::<f64>());
        assert_eq!(y, arr1(&[-2.0, 0.0]));
        // fixed point at the origin for any eps
        let y = weakly_nonlinear_rhs(&arr1(&[0.0, 0.0]), 3.7, &a_bump::<f64>());
        assert_eq!(y, arr1(&[0.0, 0.0]));
        // sin(pi/2) = 1, sin(0) = 0
        let x = arr1(&[std::f64::consts::FRAC_PI_2, 0.0]);
        let y = weakly_nonlinear_rhs(&x, 1.0, &a_bump::<f64>());
        let want = a_bump::<f64>().dot(&x) + arr1(&[1.0, 0.0]);
        assert_relative_eq!(y[0], want[0], epsilon = 1e-15);
        assert_relative_eq!(y[1], want[1], epsilon = 1e-15);
    }

    #[test]
    fn transient_diagnostics_signs() {
        let (alpha, gamma) = transient_diagnostics(&a_decay::<f64>()).unwrap();
        assert_relative_eq!(alpha, -2.0, epsilon = 1e-9);
        assert_relative_eq!(gamma, -1.5, epsilon = 1e-12);
        let (alpha, gamma) = transient_diagnostics(&a_bump::<f64>()).unwrap();
        assert_relative_eq!(alpha, -2.0, epsilon = 1e-9);
        assert_relative_eq!(gamma, 3.0, epsilon = 1e-12);
        let (alpha, gamma) = transient_diagnostics(&(-Array2::<f64>::eye(3))).unwrap();
        assert_relative_eq!(alpha, -1.0, epsilon = 1e-12);
        assert_relative_eq!(gamma, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn robertson_rhs_values() {
        let y = robertson_rhs(&arr1(&[1.0, 0.0, 0.0]));
        assert_eq!(y, arr1(&[-0.04, 0.04, 0.0]));
        // conservation by construction
        let y: Array1<f64> = robertson_rhs(&arr1(&[0.3, 1e-5, 0.6]));
        assert!((y[0] + y[1] + y[2]).abs() < 1e-15);
    }

    #[test]
    fn robertson_scaling_roundtrip() {
        let y = arr1(&[0.3, 2.5e-5, 0.6]);
        let back = robertson_unscale(&robertson_scale(&y));
        for i in 0..3 {
            assert_relative_eq!(back[i], y[i], epsilon = 1e-18);
        }
        assert_relative_eq!(robertson_scale(&y)[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn dataset_deterministic_per_seed() {
        let opts = WeaklyNonlinearOptions { epsilon: 0.0, rel_tol: 1e-6, t_end: 2.0 };
        let d1 = weakly_nonlinear_dataset::<f64>(4, &opts, 0.0, 7).unwrap();
        let d2 = weakly_nonlinear_dataset::<f64>(4, &opts, 0.0, 7).unwrap();
        assert_eq!(d1.states, d2.states);
        // different seed, different draws
        let d3 = weakly_nonlinear_dataset::<f64>(4, &opts, 0.0, 8).unwrap();
        assert_ne!(d1.states[1], d3.states[1]);
    }

    #[test]
    fn robertson_dataset_small() {
        let opts = RobertsonOptions { tol: 1e-8, grid_points: 30, ..Default::default() };
        let ds = robertson_dataset::<f64>(3, &opts, 0.0, 11).unwrap();
        assert_eq!(ds.n_traj(), 3);
        assert_eq!(ds.dim(), 3);
        // stored scaled: unscale and check conservation across the grid
        for s in &ds.states {
            for row in s.rows() {
                let raw = robertson_unscale(&row.to_owned());
                let total = raw[0] + raw[1] + raw[2];
                assert!((total - 1.0).abs() < 1e-7, "mass {total}");
            }
        }
        // long-time equilibrium: y3 → 1
        let last = ds.states[0].row(29);
        assert!((last[2] - 1.0).abs() < 1e-3, "y3 end {}", last[2]);
        assert!(last[0].abs() < 1e-3);
    }

    #[test]
    fn noise_is_scaled_per_component() {
        let opts = WeaklyNonlinearOptions { epsilon: 0.0, rel_tol: 1e-6, t_end: 2.0 };
        let clean = weakly_nonlinear_dataset::<f64>(8, &opts, 0.0, 3).unwrap();
        let noisy = weakly_nonlinear_dataset::<f64>(8, &opts, 0.1, 3).unwrap();
        let stds = clean.component_std();
        let mut diff_ss = vec![0.0f64; 2];
        let mut count = 0usize;
        for (a, b) in clean.states.iter().zip(&noisy.states) {
            for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
                for j in 0..2 {
                    diff_ss[j] += (ra[j] - rb[j]).powi(2);
                }
                count += 1;
            }
        }
        for j in 0..2 {
            let emp = (diff_ss[j] / count as f64).sqrt();
            let want = 0.1 * stds[j];
            assert!((emp - want).abs() / want < 0.25, "component {j}: {emp} vs {want}");
        }
    }
}
