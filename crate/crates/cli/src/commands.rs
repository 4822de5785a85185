//! Subcommand implementations.

use crate::config::{self, ExperimentConfig};
use std::path::{Path, PathBuf};
use stiffnode::integrators::{self, TimeGrid};
use stiffnode::io as snio;
use stiffnode::models::NodeModel;
use stiffnode::problems::{self, Dataset};
use stiffnode::training::{self, IntegratorKind, TrainConfig};
use stiffnode::{ParamStore64, Real};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Map library failures onto the documented exit codes.
pub fn exit_code_for(err: &stiffnode::Error) -> i32 {
    match err {
        stiffnode::Error::NonFinite { .. }
        | stiffnode::Error::NoConvergence { .. }
        | stiffnode::Error::Singular { .. } => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

pub struct CliError {
    pub message: String,
    pub code: i32,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { message: message.into(), code: EXIT_USAGE }
    }

    pub fn from_lib(err: stiffnode::Error) -> Self {
        CliError { message: err.to_string(), code: exit_code_for(&err) }
    }
}

type CmdResult = Result<(), CliError>;

fn lib<T>(r: stiffnode::Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::from_lib)
}

// ---- gen-data -------------------------------------------------------------------

pub fn gen_data(
    problem: &str,
    n_traj: usize,
    seed: u64,
    noise: f64,
    epsilon: Option<f64>,
    out: &Path,
) -> CmdResult {
    let seed = seed_override(seed);
    let opts = config::default_problem_options(problem, epsilon).map_err(|e| {
        CliError::usage(format!("{e}; presets: {}", config::PRESET_NAMES.join(", ")))
    })?;
    let ds: Dataset<Real> =
        lib(problems::gen_dataset(problem, n_traj, &opts, noise, seed))?;
    lib(snio::save_dataset(out, &ds))?;

    println!("dataset: {}", out.display());
    println!("  problem:       {}", ds.problem);
    println!("  trajectories:  {}", ds.n_traj());
    println!("  grid:          {} points in [{:.3e}, {:.3e}]", ds.grid.len(), ds.grid.first(), ds.grid.last());
    println!("  min/max step:  {:.3e} / {:.3e}", ds.grid.min_step(), ds.grid.max_step());
    let stds = ds.component_std();
    for (j, s) in stds.iter().enumerate().take(8) {
        println!("  component {j}: std {s:.4e}");
    }
    if stds.len() > 8 {
        println!("  ... {} components total", stds.len());
    }
    Ok(())
}

fn seed_override(seed: u64) -> u64 {
    std::env::var("STIFFNODE_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(seed)
}

// ---- train ----------------------------------------------------------------------

pub struct TrainOutcome {
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

pub fn train(config_path: &str, out_dir: &Path, dataset_override: Option<&Path>) -> CmdResult {
    let mut cfg = config::load_config(config_path).map_err(CliError::usage)?;
    cfg.apply_seed_override();
    let outcome = run_training(&cfg, out_dir, dataset_override)?;
    println!("final loss: {}", snio::fmt_full(outcome.final_loss));
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

pub fn run_training(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    dataset_override: Option<&Path>,
) -> Result<TrainOutcome, CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", out_dir.display())))?;
    let ds_path = dataset_override.map(PathBuf::from).unwrap_or_else(|| PathBuf::from(&cfg.data.path));
    if !ds_path.exists() {
        return Err(CliError::usage(format!(
            "dataset {} not found (generate it with `stiffnode gen-data --problem {} --out {}`)",
            ds_path.display(),
            cfg.problem,
            ds_path.display()
        )));
    }
    let dataset: Dataset<Real> = lib(snio::load_dataset(&ds_path))?;
    if dataset.problem != cfg.problem {
        return Err(CliError::usage(format!(
            "dataset holds problem {} but config expects {}",
            dataset.problem, cfg.problem
        )));
    }

    let model_cfg = cfg.model_config().map_err(CliError::usage)?;
    let (model, mut store) = lib(model_cfg.build::<Real>())?;

    let report = lib(training::train(&dataset, &model, &mut store, &cfg.training))?;

    let ckpt = out_dir.join("model.ckpt");
    lib(snio::save_checkpoint(
        &ckpt,
        &model,
        &store,
        &dataset.scaling,
        Some(&cfg.problem),
        Some(&cfg.training),
    ))?;
    lib(snio::write_jsonl(&out_dir.join("training_log.jsonl"), &report.records))?;
    let cfg_text = config::config_to_toml(cfg).map_err(CliError::usage)?;
    std::fs::write(out_dir.join("config.toml"), cfg_text)
        .map_err(|e| CliError::usage(e.to_string()))?;

    Ok(TrainOutcome { final_loss: report.final_loss, checkpoint: ckpt })
}

// ---- predict --------------------------------------------------------------------

/// Grid specs: `log:a:b:n`, `lin:a:b:n`, `empty`, or `dataset:<path>`.
pub fn parse_grid(spec: &str) -> Result<Option<TimeGrid<Real>>, CliError> {
    if spec == "empty" {
        return Ok(None);
    }
    let parts: Vec<&str> = spec.split(':').collect();
    let parse_f = |s: &str| s.parse::<f64>().map_err(|e| CliError::usage(format!("bad grid number {s}: {e}")));
    match parts.as_slice() {
        ["log", a, b, n] => {
            let n: usize = n.parse().map_err(|e| CliError::usage(format!("bad grid count: {e}")))?;
            Ok(Some(lib(TimeGrid::log_space(parse_f(a)?, parse_f(b)?, n))?))
        }
        ["lin", a, b, n] => {
            let n: usize = n.parse().map_err(|e| CliError::usage(format!("bad grid count: {e}")))?;
            Ok(Some(lib(TimeGrid::uniform(parse_f(a)?, parse_f(b)?, n))?))
        }
        ["dataset", path] => {
            let ds: Dataset<Real> = lib(snio::load_dataset(Path::new(path)))?;
            Ok(Some(ds.grid))
        }
        _ => Err(CliError::usage(format!(
            "grid spec {spec} not understood (log:a:b:n, lin:a:b:n, dataset:path, empty)"
        ))),
    }
}

pub fn predict(checkpoint: &Path, ic: &str, grid_spec: &str, out: &Path) -> CmdResult {
    let (header, model, store): (_, NodeModel, ParamStore64) = lib(snio::load_checkpoint(checkpoint))?;
    let ic_values: Result<Vec<Real>, _> = ic
        .split(',')
        .map(|s| s.trim().parse::<Real>())
        .collect();
    let ic_values = ic_values.map_err(|e| CliError::usage(format!("bad initial condition: {e}")))?;
    if ic_values.len() != model.physical_dim() {
        return Err(CliError::usage(format!(
            "initial condition has {} components, model expects {}",
            ic_values.len(),
            model.physical_dim()
        )));
    }

    let dim = model.physical_dim();
    let columns: Vec<String> =
        std::iter::once("t".to_string()).chain((0..dim).map(|j| format!("u{j}"))).collect();

    let grid = parse_grid(grid_spec)?;
    let Some(grid) = grid else {
        lib(snio::write_csv(out, &columns, &[]))?;
        println!("wrote header-only csv: {}", out.display());
        return Ok(());
    };

    // the checkpoint stores training-space scaling; inputs and outputs of the
    // command are in original coordinates
    let ic_raw = ndarray::Array1::from(ic_values);
    let ic_scaled = problems::apply_scaling(&ic_raw, &header.scaling);

    let train_cfg = header.train.clone().unwrap_or_default();
    let opts = train_cfg.expmv_options::<Real>();
    let (traj, latent) = match train_cfg.integrator {
        IntegratorKind::Etd1 => {
            lib(integrators::etd1_rollout_with_latent(&model, &store, &ic_scaled, &grid, &opts))?
        }
        IntegratorKind::ImexSsp2 => {
            let t = lib(training::imex_model_rollout(&model, &store, &ic_scaled, &grid))?;
            let latent = t.clone();
            (t, latent)
        }
    };

    let mut rows = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let mut row = vec![grid.times()[k]];
        let unscaled = problems::unapply_scaling(&traj.state(k), &header.scaling);
        row.extend(unscaled.iter().copied());
        rows.push(row);
    }
    lib(snio::write_csv(out, &columns, &rows))?;
    println!("wrote {} rows: {}", rows.len(), out.display());

    if model.autoencoder.is_some() {
        let latent_path = out.with_extension("latent.csv");
        let lat_cols: Vec<String> = std::iter::once("t".to_string())
            .chain((0..model.latent_dim()).map(|j| format!("z{j}")))
            .collect();
        let mut lat_rows = Vec::with_capacity(grid.len());
        for k in 0..grid.len() {
            let mut row = vec![grid.times()[k]];
            row.extend(latent.state(k).iter().copied());
            lat_rows.push(row);
        }
        lib(snio::write_csv(&latent_path, &lat_cols, &lat_rows))?;
        println!("latent states: {}", latent_path.display());
    }
    Ok(())
}

// ---- eval -----------------------------------------------------------------------

pub fn eval(checkpoint: &Path, dataset_path: &Path, stats_pdf: bool, out: &Path) -> CmdResult {
    let (header, model, store): (_, NodeModel, ParamStore64) = lib(snio::load_checkpoint(checkpoint))?;
    let dataset: Dataset<Real> = lib(snio::load_dataset(dataset_path))?;
    if dataset.dim() != model.physical_dim() {
        return Err(CliError::usage(format!(
            "dataset dim {} incompatible with model dim {}",
            dataset.dim(),
            model.physical_dim()
        )));
    }
    let train_cfg = header.train.clone().unwrap_or_default();
    let mut report = lib(training::evaluate(&dataset, &model, &store, &train_cfg))?;

    if stats_pdf {
        report.pdf_overlap = Some(pdf_overlap_score(&dataset, &model, &store, &train_cfg)?);
    }

    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::usage(e.to_string()))?;
    std::fs::write(out, &json).map_err(|e| CliError::usage(e.to_string()))?;
    println!("{json}");
    Ok(())
}

/// Joint-distribution agreement: histogram intersection between the dataset
/// snapshots and a long model rollout from the first stored state.
fn pdf_overlap_score(
    dataset: &Dataset<Real>,
    model: &NodeModel,
    store: &ParamStore64,
    train_cfg: &TrainConfig,
) -> Result<f64, CliError> {
    let bins = 48;
    let domain = 22.0;
    // truth histogram from every dataset snapshot
    let nt_total: usize = dataset.states.iter().map(|s| s.nrows()).sum();
    let mut all = ndarray::Array2::zeros((nt_total, dataset.dim()));
    let mut r = 0;
    for s in &dataset.states {
        for row in s.rows() {
            all.row_mut(r).assign(&row);
            r += 1;
        }
    }
    let span = TimeGrid::uniform(0.0, nt_total as f64 - 1.0, nt_total)
        .map_err(CliError::from_lib)?;
    let truth_traj = integrators::Trajectory::new(span, all).map_err(CliError::from_lib)?;
    let truth_pdf = lib(training::joint_pdf_stats(&truth_traj, bins, domain, None))?;

    // model rollout of 500 unit steps from the first snapshot
    let steps = 500usize;
    let grid = TimeGrid::uniform(0.0, steps as f64, steps + 1).map_err(CliError::from_lib)?;
    let ic = dataset.states[0].row(0).to_owned();
    let opts = train_cfg.expmv_options::<Real>();
    let pred = lib(integrators::etd1_rollout(model, store, &ic, &grid, &opts))?;
    let pred_pdf = lib(training::joint_pdf_stats(
        &pred,
        bins,
        domain,
        Some((truth_pdf.x_range, truth_pdf.y_range)),
    ))?;
    lib(training::pdf_overlap(&truth_pdf, &pred_pdf))
}

// ---- ablate ---------------------------------------------------------------------

pub fn ablate(config_path: &str, out_dir: &Path, dataset_override: Option<&Path>) -> CmdResult {
    let mut base = config::load_config(config_path).map_err(CliError::usage)?;
    base.apply_seed_override();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", out_dir.display())))?;

    let init_scales = [1e-3, 1e-2, 1e-1, 1e0];
    let lipschitz: [Option<f64>; 3] = [None, Some(1.0), Some(2.0)];

    let cells: Vec<(usize, usize)> = (0..init_scales.len())
        .flat_map(|i| (0..lipschitz.len()).map(move |j| (i, j)))
        .collect();

    // each cell trains single-threaded; cells run in parallel
    let results: Vec<Result<f64, CliError>> = {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(i, j)| {
                let mut cfg = base.clone();
                cfg.model.init_scale = init_scales[i];
                cfg.model.nonlin = match lipschitz[j] {
                    Some(l) => stiffnode::models::NonlinSpec::Lipschitz {
                        lipschitz: l,
                        width: 100,
                        layers: 2,
                    },
                    None => stiffnode::models::NonlinSpec::Unconstrained { width: 100, layers: 2 },
                };
                cfg.training.chunk_size = cfg.training.batch_size;
                let cell_dir = out_dir.join(format!("cell_s{i}_l{j}"));
                let outcome = run_training(&cfg, &cell_dir, dataset_override)?;
                Ok(outcome.final_loss)
            })
            .collect()
    };

    let mut table = vec![vec![f64::NAN; lipschitz.len()]; init_scales.len()];
    for (idx, res) in results.into_iter().enumerate() {
        let (i, j) = cells[idx];
        table[i][j] = res?;
    }

    let columns = vec![
        "init_scale".to_string(),
        "no_lipschitz".to_string(),
        "lipschitz_1".to_string(),
        "lipschitz_2".to_string(),
    ];
    let rows: Vec<Vec<f64>> = init_scales
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = vec![*s];
            row.extend(&table[i]);
            row
        })
        .collect();
    let csv_path = out_dir.join("ablation.csv");
    lib(snio::write_csv(&csv_path, &columns, &rows))?;

    println!("{:>12} {:>14} {:>14} {:>14}", "init scale", "no constraint", "L = 1.0", "L = 2.0");
    for (i, s) in init_scales.iter().enumerate() {
        println!(
            "{:>12.0e} {:>14.6e} {:>14.6e} {:>14.6e}",
            s, table[i][0], table[i][1], table[i][2]
        );
    }
    println!("table: {}", csv_path.display());
    Ok(())
}
