//! File formats: model checkpoints and datasets are a compact JSON header
//! line followed by a flat little-endian 64-bit float block; CSV output uses
//! 17 significant digits so values round-trip exactly.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::integrators::TimeGrid;
use crate::models::NodeModel;
use crate::problems::Dataset;
use crate::scalar::Scalar;
use crate::tensor::Value;
use crate::training::TrainConfig;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "stiffnode-checkpoint-v1";
pub const DATASET_FORMAT: &str = "stiffnode-dataset-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub model: NodeModel,
    pub manifest: Vec<ManifestEntry>,
    /// Per-component scaling of the training data (states stored scaled).
    pub scaling: Vec<f64>,
    pub problem: Option<String>,
    pub train: Option<TrainConfig>,
}

fn write_header_and_block(path: &Path, header_json: String, block: &[f64]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(header_json.as_bytes())?;
    w.write_all(b"\n")?;
    for v in block {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_header_and_block(path: &Path) -> Result<(String, Vec<f64>)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::io(format!("{}: missing header terminator", path.display())));
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::io(format!(
            "{}: data block length {} is not a multiple of 8",
            path.display(),
            raw.len()
        )));
    }
    let block = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let header = String::from_utf8(header).map_err(|e| Error::io(e.to_string()))?;
    Ok((header, block))
}

// ---- checkpoints ----------------------------------------------------------------

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &NodeModel,
    store: &ParamStore<T>,
    scaling: &[f64],
    problem: Option<&str>,
    train: Option<&TrainConfig>,
) -> Result<()> {
    let mut manifest = Vec::with_capacity(store.len());
    let mut block = Vec::with_capacity(store.n_elements());
    for entry in store.iter() {
        let shape = match &entry.value {
            Value::Scalar(_) => vec![],
            Value::Vector(v) => vec![v.len()],
            Value::Matrix(m) => vec![m.nrows(), m.ncols()],
        };
        manifest.push(ManifestEntry { name: entry.name.clone(), offset: block.len(), shape });
        block.extend(entry.value.flat().iter().map(|x| x.to_f64_lossy()));
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        model: model.clone(),
        manifest,
        scaling: scaling.to_vec(),
        problem: problem.map(|s| s.to_string()),
        train: train.cloned(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::io(e.to_string()))?;
    write_header_and_block(path, json, &block)
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(CheckpointHeader, NodeModel, ParamStore<T>)> {
    let (json, block) = read_header_and_block(path)?;
    let header: CheckpointHeader =
        serde_json::from_str(&json).map_err(|e| Error::io(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::io(format!("unexpected checkpoint format: {}", header.format)));
    }
    let mut store = ParamStore::new();
    for entry in &header.manifest {
        let count: usize = entry.shape.iter().product::<usize>().max(1);
        let slice = block.get(entry.offset..entry.offset + count).ok_or_else(|| {
            Error::io(format!("checkpoint block too short for parameter {}", entry.name))
        })?;
        let data: Vec<T> = slice.iter().map(|x| T::from_f64_lossy(*x)).collect();
        let value = match entry.shape.len() {
            0 => Value::Scalar(data[0]),
            1 => Value::Vector(Array1::from_vec(data)),
            2 => Value::Matrix(
                Array2::from_shape_vec((entry.shape[0], entry.shape[1]), data)
                    .map_err(|e| Error::io(e.to_string()))?,
            ),
            n => return Err(Error::io(format!("unsupported parameter rank {n}"))),
        };
        store.insert(&entry.name, value)?;
    }
    let model = header.model.clone();
    Ok((header, model, store))
}

// ---- datasets --------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub problem: String,
    pub dim: usize,
    pub n_traj: usize,
    pub grid_points: usize,
    /// Grid stored explicitly (non-uniform in general).
    pub times: Vec<f64>,
    pub scaling: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
    pub gen_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

/// Block layout: trajectory-major, then time, then component.
pub fn save_dataset<T: Scalar>(path: &Path, ds: &Dataset<T>) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        problem: ds.problem.clone(),
        dim: ds.dim(),
        n_traj: ds.n_traj(),
        grid_points: ds.grid.len(),
        times: ds.grid.times().iter().map(|t| t.to_f64_lossy()).collect(),
        scaling: ds.scaling.clone(),
        noise: ds.noise,
        seed: ds.seed,
        gen_tol: ds.gen_tol,
        epsilon: ds.epsilon,
    };
    let mut block = Vec::with_capacity(ds.n_traj() * ds.grid.len() * ds.dim());
    for s in &ds.states {
        for row in s.rows() {
            block.extend(row.iter().map(|x| x.to_f64_lossy()));
        }
    }
    let json = serde_json::to_string(&header).map_err(|e| Error::io(e.to_string()))?;
    write_header_and_block(path, json, &block)
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let (json, block) = read_header_and_block(path)?;
    let header: DatasetHeader =
        serde_json::from_str(&json).map_err(|e| Error::io(format!("dataset header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::io(format!("unexpected dataset format: {}", header.format)));
    }
    let expected = header.n_traj * header.grid_points * header.dim;
    if block.len() != expected {
        return Err(Error::io(format!(
            "dataset block holds {} values, header promises {expected}",
            block.len()
        )));
    }
    let times: Vec<T> = header.times.iter().map(|t| T::from_f64_lossy(*t)).collect();
    let grid = TimeGrid::from_times(times)?;
    let per_traj = header.grid_points * header.dim;
    let mut states = Vec::with_capacity(header.n_traj);
    for i in 0..header.n_traj {
        let slice = &block[i * per_traj..(i + 1) * per_traj];
        let data: Vec<T> = slice.iter().map(|x| T::from_f64_lossy(*x)).collect();
        states.push(
            Array2::from_shape_vec((header.grid_points, header.dim), data)
                .map_err(|e| Error::io(e.to_string()))?,
        );
    }
    Ok(Dataset {
        problem: header.problem,
        grid,
        states,
        scaling: header.scaling,
        noise: header.noise,
        seed: header.seed,
        gen_tol: header.gen_tol,
        epsilon: header.epsilon,
    })
}

// ---- text outputs -------------------------------------------------------------------

/// Format a float with 17 significant digits (lossless f64 round-trip).
pub fn fmt_full(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write rows of (time, components...) as CSV.
pub fn write_csv(path: &Path, columns: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", columns.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| fmt_full(*v)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Append one JSON document per line.
pub fn write_jsonl<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::io(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}
