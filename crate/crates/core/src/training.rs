//! Training: the trapezoidal time-integral loss, Adam with a decay schedule,
//! the mini-batch loop over integrator rollouts, the a-priori divergence
//! bound diagnostic, and evaluation statistics.

use crate::autodiff::{Gradients, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::expmv::ExpmvOptions;
use crate::integrators::{self, TimeGrid, Trajectory};
use crate::linalg;
use crate::models::{empirical_lipschitz, NodeModel};
use crate::problems::Dataset;
use crate::scalar::Scalar;
use crate::tensor::Value;
use ndarray::{Array1, Array2};
use num_complex::Complex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorKind {
    Etd1,
    ImexSsp2,
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate every `decay_every` steps.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    /// Total optimizer steps.
    pub iterations: usize,
    pub integrator: IntegratorKind,
    /// Adaptive-truncation tolerance for the exponential action.
    pub expmv_tol: f64,
    /// Multiplier in the segment rule `s = ceil(c * h * ||A||)`.
    pub expmv_s_rule_c: f64,
    pub seed: u64,
    /// Train on a subset of the dataset grid (indices into it).
    pub train_indices: Option<Vec<usize>>,
    /// Trajectories per tape chunk (memory / parallelism knob).
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            lr_decay: 0.99,
            decay_every: 1,
            batch_size: 100,
            iterations: 1000,
            integrator: IntegratorKind::Etd1,
            expmv_tol: 1e-8,
            expmv_s_rule_c: 1.0,
            seed: 0,
            train_indices: None,
            chunk_size: 250,
        }
    }
}

impl TrainConfig {
    pub fn expmv_options<T: Scalar>(&self) -> ExpmvOptions<T> {
        ExpmvOptions {
            s_rule_c: self.expmv_s_rule_c,
            tol: T::from_f64_lossy(self.expmv_tol),
            m_max: crate::expmv::M_CAP,
        }
    }

    pub fn validate(&self, n_traj: usize) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::invalid("learning rate must be >= 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr decay must be in (0, 1]"));
        }
        if self.batch_size == 0 || self.batch_size > n_traj {
            return Err(Error::invalid(format!(
                "batch size {} must be in 1..={n_traj}",
                self.batch_size
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::invalid("chunk size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub records: Vec<EpochRecord>,
    /// Mean loss over the full dataset with the final parameters.
    pub final_loss: f64,
    pub wall_ms_total: f64,
}

// ---- loss -------------------------------------------------------------------------

/// Record the rollout loss of a batch on the tape and return the scalar sum
/// over the batch (divide by the batch size for the mean). The loss per
/// trajectory is the trapezoidal time integral of the squared 2-norm error in
/// the original coordinates:
/// `sum_n 1/2 (||U_{n+1} - dec(u_{n+1})||^2 + ||U_n - dec(u_n)||^2) (t_{n+1} - t_n)`.
pub fn batch_loss_sum_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &NodeModel,
    store: &ParamStore<T>,
    grid: &TimeGrid<T>,
    batch: &[&Array2<T>],
    integrator: IntegratorKind,
    opts: &ExpmvOptions<T>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let nt = grid.len();
    let m = batch[0].ncols();
    let b = batch.len();
    for s in batch {
        if s.nrows() != nt || s.ncols() != m {
            return Err(Error::shape(
                "batch_loss",
                format!("trajectory block {}x{} vs grid {nt} and dim {m}", s.nrows(), s.ncols()),
            ));
        }
    }

    let bound = model.bind(tape, store)?;

    // snapshot constants: one (m, b) matrix per grid point
    let mut data_vars = Vec::with_capacity(nt);
    for k in 0..nt {
        let mut mat = Array2::zeros((m, b));
        for (j, s) in batch.iter().enumerate() {
            mat.column_mut(j).assign(&s.row(k));
        }
        data_vars.push(tape.constant_matrix(mat));
    }

    let z0 = match &bound.encoder {
        Some(enc) => enc.apply(tape, data_vars[0])?,
        None => data_vars[0],
    };
    let latents = match integrator {
        IntegratorKind::Etd1 => integrators::etd1_rollout_tape(tape, &bound, z0, grid, opts)?,
        IntegratorKind::ImexSsp2 => integrators::imex_ssp2_rollout_tape(tape, &bound, z0, grid)?,
    };

    // per-snapshot squared errors in the original coordinates
    let mut errors = Vec::with_capacity(nt);
    for k in 0..nt {
        let decoded = match &bound.decoder {
            Some(dec) => dec.apply(tape, latents[k])?,
            None => latents[k],
        };
        let diff = tape.sub(data_vars[k], decoded)?;
        errors.push(tape.col_sumsq(diff)?);
    }

    // trapezoid over intervals, per trajectory
    let half = T::from_f64_lossy(0.5);
    let times = grid.times();
    let mut interval_terms = Vec::with_capacity(nt - 1);
    for k in 0..nt - 1 {
        let dt = times[k + 1] - times[k];
        let pair = tape.add(errors[k], errors[k + 1])?;
        interval_terms.push(tape.scale(pair, half * dt));
    }
    let per_traj = tape.add_n(&interval_terms)?;
    Ok(tape.sum(per_traj))
}

/// The prediction loss of a single trajectory (sum form of the batch loss).
pub fn trajectory_loss<T: Scalar>(
    truth: &Trajectory<T>,
    model: &NodeModel,
    store: &ParamStore<T>,
    integrator: IntegratorKind,
    opts: &ExpmvOptions<T>,
) -> Result<T> {
    let mut tape = Tape::new();
    let loss =
        batch_loss_sum_tape(&mut tape, model, store, &truth.grid, &[&truth.states], integrator, opts)?;
    tape.scalar_value(loss)
}

/// Mean loss over a whole dataset, evaluated with the same chunking the
/// trainer uses (bitwise reproducible for a fixed chunk size).
pub fn dataset_loss<T: Scalar>(
    dataset: &Dataset<T>,
    model: &NodeModel,
    store: &ParamStore<T>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let grid = training_grid(dataset, cfg)?;
    let indices: Vec<usize> = (0..dataset.n_traj()).collect();
    let opts = cfg.expmv_options::<T>();
    let (loss_sum, _grads) =
        batch_gradients(dataset, model, store, &grid, &indices, cfg, &opts, false)?;
    Ok(loss_sum.to_f64_lossy() / dataset.n_traj() as f64)
}

fn training_grid<T: Scalar>(dataset: &Dataset<T>, cfg: &TrainConfig) -> Result<TimeGrid<T>> {
    match &cfg.train_indices {
        Some(idx) => dataset.grid.subsample(idx),
        None => Ok(dataset.grid.clone()),
    }
}

fn subsample_states<T: Scalar>(states: &Array2<T>, indices: &Option<Vec<usize>>) -> Array2<T> {
    match indices {
        None => states.clone(),
        Some(idx) => {
            let mut out = Array2::zeros((idx.len(), states.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).assign(&states.row(i));
            }
            out
        }
    }
}

/// Loss sum and (optionally) gradients for a set of trajectory indices,
/// evaluated in fixed-size chunks on private tapes. Chunks run in parallel;
/// their contributions merge in chunk order, so the result is independent of
/// the thread count.
#[allow(clippy::too_many_arguments)]
fn batch_gradients<T: Scalar>(
    dataset: &Dataset<T>,
    model: &NodeModel,
    store: &ParamStore<T>,
    grid: &TimeGrid<T>,
    indices: &[usize],
    cfg: &TrainConfig,
    opts: &ExpmvOptions<T>,
    with_grads: bool,
) -> Result<(T, Gradients<T>)> {
    let chunks: Vec<&[usize]> = indices.chunks(cfg.chunk_size).collect();
    let results: Result<Vec<(T, Option<Gradients<T>>)>> = chunks
        .par_iter()
        .map(|chunk| {
            let blocks: Vec<Array2<T>> = chunk
                .iter()
                .map(|&i| subsample_states(&dataset.states[i], &cfg.train_indices))
                .collect();
            let refs: Vec<&Array2<T>> = blocks.iter().collect();
            let mut tape = Tape::new();
            let loss =
                batch_loss_sum_tape(&mut tape, model, store, grid, &refs, cfg.integrator, opts)?;
            let value = tape.scalar_value(loss)?;
            let grads = if with_grads {
                Some(tape.backward(loss, store.len())?)
            } else {
                None
            };
            Ok((value, grads))
        })
        .collect();

    let mut total = T::zero();
    let mut grads = Gradients::new(store.len());
    for (value, g) in results? {
        total = total + value;
        if let Some(g) = g {
            grads.merge(&g)?;
        }
    }
    Ok((total, grads))
}

// ---- Adam ----------------------------------------------------------------------------

/// One bias-corrected Adam update from the gradients currently in the store.
/// Moment state lives in the store and persists across steps; `t` is the
/// 1-based step index.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: usize,
) -> Result<()> {
    let t_i32 = t as i32;
    let bc1 = T::one() - beta1.powi(t_i32);
    let bc2 = T::one() - beta2.powi(t_i32);
    let one = T::one();
    for id in 0..store.len() {
        let entry = store.entry_mut(id);
        let g = entry.grad.flat();
        let mut m = entry.m1.flat();
        let mut v = entry.m2.flat();
        let mut x = entry.value.flat();
        for i in 0..g.len() {
            m[i] = beta1 * m[i] + (one - beta1) * g[i];
            v[i] = beta2 * v[i] + (one - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            x[i] = x[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        entry.m1 = rebuild_like(&entry.m1, &m);
        entry.m2 = rebuild_like(&entry.m2, &v);
        entry.value = rebuild_like(&entry.value, &x);
    }
    Ok(())
}

fn rebuild_like<T: Scalar>(template: &Value<T>, flat: &[T]) -> Value<T> {
    match template {
        Value::Scalar(_) => Value::Scalar(flat[0]),
        Value::Vector(v) => Value::Vector(Array1::from_vec(flat.to_vec()).into_shape_with_order(v.len()).expect("shape")),
        Value::Matrix(m) => {
            Value::Matrix(Array2::from_shape_vec(m.dim(), flat.to_vec()).expect("shape"))
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// ---- training loop ----------------------------------------------------------------------

/// Mini-batch training with Adam. Batches are drawn by a seeded shuffle and
/// sorted ascending before evaluation, so the result depends on the drawn
/// set, not the draw order. Deterministic given (dataset, config, seed).
pub fn train<T: Scalar>(
    dataset: &Dataset<T>,
    model: &NodeModel,
    store: &mut ParamStore<T>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    cfg.validate(dataset.n_traj())?;
    let grid = training_grid(dataset, cfg)?;
    let opts = cfg.expmv_options::<T>();
    let n = dataset.n_traj();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle
    let mut lr = cfg.learning_rate;
    let mut records = Vec::with_capacity(cfg.iterations);
    let t_start = Instant::now();

    for step in 1..=cfg.iterations {
        if cursor + cfg.batch_size > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mut batch: Vec<usize> = order[cursor..cursor + cfg.batch_size].to_vec();
        cursor += cfg.batch_size;
        batch.sort_unstable();

        let t_iter = Instant::now();
        let (loss_sum, grads) =
            batch_gradients(dataset, model, store, &grid, &batch, cfg, &opts, true)?;
        let loss = loss_sum.to_f64_lossy() / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("loss at iteration {step}")));
        }

        store.zero_grads();
        store.accumulate(&grads)?;
        // gradients of the mean loss
        let scale = T::from_f64_lossy(1.0 / cfg.batch_size as f64);
        for id in 0..store.len() {
            let e = store.entry_mut(id);
            match &mut e.grad {
                Value::Scalar(s) => *s = *s * scale,
                Value::Vector(v) => v.mapv_inplace(|x| x * scale),
                Value::Matrix(m) => m.mapv_inplace(|x| x * scale),
            }
        }
        let grad_norm = store.grad_norm().to_f64_lossy();

        adam_step(
            store,
            T::from_f64_lossy(lr),
            T::from_f64_lossy(ADAM_BETA1),
            T::from_f64_lossy(ADAM_BETA2),
            T::from_f64_lossy(ADAM_EPS),
            step,
        )?;

        records.push(EpochRecord {
            epoch: step,
            loss,
            lr,
            grad_norm,
            wall_ms: t_iter.elapsed().as_secs_f64() * 1e3,
        });

        if step % cfg.decay_every == 0 {
            lr *= cfg.lr_decay;
        }
    }

    let final_loss = dataset_loss(dataset, model, store, cfg)?;
    Ok(LossReport {
        records,
        final_loss,
        wall_ms_total: t_start.elapsed().as_secs_f64() * 1e3,
    })
}

// ---- a-priori divergence bound -----------------------------------------------------------

/// Exponential-in-time bound on trajectory divergence:
/// `rho e^{(a+L)(t-t0)} + (da+dg) V / (a+L) * (e^{(a+L)(t-t0)} - 1)`.
#[allow(clippy::too_many_arguments)]
pub fn gronwall_bound(
    rho: f64,
    a_norm: f64,
    da_norm: f64,
    dg_norm: f64,
    lipschitz: f64,
    v_bound: f64,
    t: f64,
    t0: f64,
) -> f64 {
    let rate = a_norm + lipschitz;
    let growth = (rate * (t - t0)).exp();
    rho * growth + (da_norm + dg_norm) * v_bound / rate * (growth - 1.0)
}

// ---- joint distribution of spatial derivatives ----------------------------------------------

/// Normalized 2-d histogram over `(u_x, u_xx)` with fixed bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPdf {
    pub bins: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub density: Vec<f64>,
}

impl JointPdf {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.density[i * self.bins + j]
    }
}

/// Spectral derivatives of every snapshot, histogrammed jointly. With
/// `ranges = None` the bin edges come from the data (symmetric, small
/// margin); pass the reference ranges to compare distributions.
pub fn joint_pdf_stats<T: Scalar + rustfft::FftNum>(
    traj: &Trajectory<T>,
    bins: usize,
    domain_length: f64,
    ranges: Option<((f64, f64), (f64, f64))>,
) -> Result<JointPdf> {
    if bins < 1 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let nx = traj.dim();
    let mut planner = FftPlannerWrap::<T>::new(nx);
    let mut ux_all = Vec::with_capacity(traj.grid.len() * nx);
    let mut uxx_all = Vec::with_capacity(traj.grid.len() * nx);
    for k in 0..traj.grid.len() {
        let row = traj.state(k);
        let (ux, uxx) = planner.derivatives(&row, domain_length)?;
        ux_all.extend(ux.iter().map(|x| x.to_f64_lossy()));
        uxx_all.extend(uxx.iter().map(|x| x.to_f64_lossy()));
    }

    let (x_range, y_range) = match ranges {
        Some(r) => r,
        None => (data_range(&ux_all), data_range(&uxx_all)),
    };

    let mut density = vec![0.0f64; bins * bins];
    let total = ux_all.len() as f64;
    for (x, y) in ux_all.iter().zip(&uxx_all) {
        let i = bin_index(*x, x_range, bins);
        let j = bin_index(*y, y_range, bins);
        density[i * bins + j] += 1.0 / total;
    }
    Ok(JointPdf { bins, x_range, y_range, density })
}

fn data_range(xs: &[f64]) -> (f64, f64) {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let margin = 0.05 * (hi - lo).max(1e-12);
    (lo - margin, hi + margin)
}

fn bin_index(x: f64, range: (f64, f64), bins: usize) -> usize {
    let t = (x - range.0) / (range.1 - range.0);
    ((t * bins as f64) as isize).clamp(0, bins as isize - 1) as usize
}

/// Histogram intersection `sum_ij min(p, q)` in `[0, 1]`.
pub fn pdf_overlap(a: &JointPdf, b: &JointPdf) -> Result<f64> {
    if a.bins != b.bins || a.x_range != b.x_range || a.y_range != b.y_range {
        return Err(Error::invalid("histogram overlap requires identical bins and edges"));
    }
    Ok(a.density.iter().zip(&b.density).map(|(p, q)| p.min(*q)).sum())
}

struct FftPlannerWrap<T: rustfft::FftNum> {
    n: usize,
    fft: std::sync::Arc<dyn rustfft::Fft<T>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<T>>,
}

impl<T: Scalar + rustfft::FftNum> FftPlannerWrap<T> {
    fn new(n: usize) -> Self {
        let mut planner = rustfft::FftPlanner::new();
        FftPlannerWrap { n, fft: planner.plan_fft_forward(n), ifft: planner.plan_fft_inverse(n) }
    }

    fn derivatives(&mut self, u: &Array1<T>, domain: f64) -> Result<(Array1<T>, Array1<T>)> {
        let n = self.n;
        if u.len() != n {
            return Err(Error::shape("derivatives", format!("{} vs {n}", u.len())));
        }
        let two_pi = std::f64::consts::TAU;
        let mut hat: Vec<Complex<T>> = u.iter().map(|&x| Complex::new(x, T::zero())).collect();
        self.fft.process(&mut hat);
        let mut d1 = vec![Complex::new(T::zero(), T::zero()); n];
        let mut d2 = d1.clone();
        for j in 0..n {
            let jj = if j <= n / 2 - 1 { j as f64 } else { j as f64 - n as f64 };
            let k = T::from_f64_lossy(two_pi * jj / domain);
            d1[j] = Complex::new(T::zero(), k) * hat[j];
            d2[j] = Complex::new(-(k * k), T::zero()) * hat[j];
        }
        // zero the unmatched Nyquist mode for the odd derivative
        if n % 2 == 0 {
            d1[n / 2] = Complex::new(T::zero(), T::zero());
        }
        self.ifft.process(&mut d1);
        self.ifft.process(&mut d2);
        let inv_n = T::one() / T::from_f64_lossy(n as f64);
        Ok((
            Array1::from_iter(d1.iter().map(|c| c.re * inv_n)),
            Array1::from_iter(d2.iter().map(|c| c.re * inv_n)),
        ))
    }
}

// ---- evaluation report -----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_loss: f64,
    pub per_component_max_error: Vec<f64>,
    pub empirical_lipschitz: f64,
    pub configured_lipschitz: Option<f64>,
    pub max_re_eigenvalue: f64,
    pub mu: f64,
    pub spectral_bound_ok: bool,
    pub pdf_overlap: Option<f64>,
}

/// Evaluate a model against a dataset: mean loss, worst per-component rollout
/// error, an empirical Lipschitz estimate of the nonlinearity, and the
/// spectral bound check on the assembled linear operator.
pub fn evaluate<T: Scalar + rustfft::FftNum>(
    dataset: &Dataset<T>,
    model: &NodeModel,
    store: &ParamStore<T>,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if dataset.dim() != model.physical_dim() {
        return Err(Error::shape(
            "evaluate",
            format!("dataset dim {} vs model dim {}", dataset.dim(), model.physical_dim()),
        ));
    }
    let mean_loss = dataset_loss(dataset, model, store, cfg)?;

    let grid = training_grid(dataset, cfg)?;
    let opts = cfg.expmv_options::<T>();
    let errors: Result<Vec<Vec<f64>>> = (0..dataset.n_traj())
        .into_par_iter()
        .map(|i| {
            let block = subsample_states(&dataset.states[i], &cfg.train_indices);
            let ic = block.row(0).to_owned();
            let pred = match cfg.integrator {
                IntegratorKind::Etd1 => integrators::etd1_rollout(model, store, &ic, &grid, &opts)?,
                IntegratorKind::ImexSsp2 => {
                    imex_model_rollout(model, store, &ic, &grid)?
                }
            };
            let mut comp_max = vec![0.0f64; dataset.dim()];
            for k in 0..grid.len() {
                for j in 0..dataset.dim() {
                    let e = (pred.states[(k, j)] - block[(k, j)]).to_f64_lossy().abs();
                    if e > comp_max[j] {
                        comp_max[j] = e;
                    }
                }
            }
            Ok(comp_max)
        })
        .collect();
    let mut per_component_max_error = vec![0.0f64; dataset.dim()];
    for comp in errors? {
        for (j, e) in comp.iter().enumerate() {
            per_component_max_error[j] = per_component_max_error[j].max(*e);
        }
    }

    let lip = empirical_lipschitz(
        model.nonlinear_fn(store),
        model.latent_dim(),
        10_000,
        T::from_f64_lossy(2.0),
        cfg.seed ^ 0xE7A1,
    )?
    .to_f64_lossy();

    let a = model.linear_plain(store)?;
    let max_re = linalg::max_real_eigenvalue(&a)?;
    let mu = model.linear.mu;

    Ok(EvalReport {
        mean_loss,
        per_component_max_error,
        empirical_lipschitz: lip,
        configured_lipschitz: model.nonlinear.configured_lipschitz(),
        max_re_eigenvalue: max_re,
        mu,
        spectral_bound_ok: max_re <= mu + 1e-8,
        pdf_overlap: None,
    })
}

/// Deploy a model with the implicit-explicit integrator (used when the model
/// was trained that way).
pub fn imex_model_rollout<T: Scalar>(
    model: &NodeModel,
    store: &ParamStore<T>,
    u0: &Array1<T>,
    grid: &TimeGrid<T>,
) -> Result<Trajectory<T>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, store)?;
    let mut col = Array2::zeros((u0.len(), 1));
    col.column_mut(0).assign(u0);
    let uv = tape.constant_matrix(col);
    let z0 = match &bound.encoder {
        Some(enc) => enc.apply(&mut tape, uv)?,
        None => uv,
    };
    let latents = integrators::imex_ssp2_rollout_tape(&mut tape, &bound, z0, grid)?;
    let m = model.physical_dim();
    let mut out = Array2::zeros((grid.len(), m));
    for (k, z) in latents.iter().enumerate() {
        let dec = match &bound.decoder {
            Some(d) => {
                let v = d.apply(&mut tape, *z)?;
                tape.value(v).as_matrix()?.column(0).to_owned()
            }
            None => tape.value(*z).as_matrix()?.column(0).to_owned(),
        };
        out.row_mut(k).assign(&dec);
    }
    Trajectory::new(grid.clone(), out)
}
