use crate::geom::{OccupancyGrid, SdfGrid};
use crate::hyper::{Checkpoint, EpochMetrics, HyperNetSpec, MainNetSpec, TrainConfig};
use crate::nn::Tensor;
use crate::reach::{StateGrid, ValueFunction};
use crate::sim::{EpisodeResult, McReport};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: payload length {got} bytes, expected {expected}")]
    PayloadLength { path: String, expected: usize, got: usize },
    #[error("{path}: artifact kind {got:?}, expected {expected:?}")]
    Kind { path: String, expected: String, got: String },
    #[error("{path}: format version {got}, expected {expected}")]
    Version { path: String, expected: u32, got: u32 },
    #[error("{path}: truncated file")]
    Truncated { path: String },
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
}

fn io_err(path: &Path, source: std::io::Error) -> ArtifactError {
    ArtifactError::Io { path: path.display().to_string(), source }
}

fn json_err(path: &Path, source: serde_json::Error) -> ArtifactError {
    ArtifactError::Json { path: path.display().to_string(), source }
}

/// Serialize with sorted keys (serde_json maps are ordered), so equal
/// values always produce equal bytes.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v: Value = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// Extra provenance stamped into artifact headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub tool_version: String,
    pub config_hash: String,
}

impl ArtifactMeta {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self { tool_version: super::tool_version().to_string(), config_hash: config_hash.into() }
    }
}

/// Atomic write: temp file in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ArtifactError> {
    let tmp = path.with_extension("tmp_write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Write `[u32 header_len][canonical JSON header][payload]`.
pub fn write_artifact(
    path: &Path,
    header: &Value,
    payload: &[u8],
) -> Result<(), ArtifactError> {
    let header_str = serde_json::to_string(header).map_err(|e| json_err(path, e))?;
    let mut bytes = Vec::with_capacity(4 + header_str.len() + payload.len());
    bytes.extend_from_slice(&(header_str.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header_str.as_bytes());
    bytes.extend_from_slice(payload);
    write_atomic(path, &bytes)
}

/// Read an artifact back as (header, payload).
pub fn read_artifact(path: &Path) -> Result<(Value, Vec<u8>), ArtifactError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 4 {
        return Err(ArtifactError::Truncated { path: path.display().to_string() });
    }
    let hlen = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if bytes.len() < 4 + hlen {
        return Err(ArtifactError::Truncated { path: path.display().to_string() });
    }
    let header: Value =
        serde_json::from_slice(&bytes[4..4 + hlen]).map_err(|e| json_err(path, e))?;
    Ok((header, bytes[4 + hlen..].to_vec()))
}

fn check_kind_version(path: &Path, header: &Value, kind: &str) -> Result<(), ArtifactError> {
    let got_kind = header.get("kind").and_then(Value::as_str).unwrap_or("");
    if got_kind != kind {
        return Err(ArtifactError::Kind {
            path: path.display().to_string(),
            expected: kind.to_string(),
            got: got_kind.to_string(),
        });
    }
    let got_version = header.get("format_version").and_then(Value::as_u64).unwrap_or(0) as u32;
    if got_version != FORMAT_VERSION {
        return Err(ArtifactError::Version {
            path: path.display().to_string(),
            expected: FORMAT_VERSION,
            got: got_version,
        });
    }
    Ok(())
}

fn header_for<T: Serialize>(
    kind: &str,
    body: &T,
    meta: &ArtifactMeta,
) -> Result<Value, serde_json::Error> {
    let mut v = serde_json::to_value(body)?;
    let obj = v.as_object_mut().expect("header body is an object");
    obj.insert("kind".into(), Value::String(kind.into()));
    obj.insert("format_version".into(), serde_json::json!(FORMAT_VERSION));
    obj.insert("tool_version".into(), Value::String(meta.tool_version.clone()));
    obj.insert("config_hash".into(), Value::String(meta.config_hash.clone()));
    Ok(v)
}

fn parse_header<T: DeserializeOwned>(path: &Path, header: &Value) -> Result<T, ArtifactError> {
    serde_json::from_value(header.clone()).map_err(|e| json_err(path, e))
}

fn f32s_to_le_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_bytes_to_f32s(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f32>, ArtifactError> {
    if bytes.len() != expected * 4 {
        return Err(ArtifactError::PayloadLength {
            path: path.display().to_string(),
            expected: expected * 4,
            got: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    width: usize,
    height: usize,
    resolution: f64,
    origin: (f64, f64),
}

pub fn save_occupancy(
    path: &Path,
    grid: &OccupancyGrid,
    meta: &ArtifactMeta,
) -> Result<(), ArtifactError> {
    let body = GridHeader {
        width: grid.width,
        height: grid.height,
        resolution: grid.resolution,
        origin: grid.origin,
    };
    let header = header_for("occupancy", &body, meta).map_err(|e| json_err(path, e))?;
    write_artifact(path, &header, &grid.cells)
}

pub fn load_occupancy(path: &Path) -> Result<OccupancyGrid, ArtifactError> {
    let (header, payload) = read_artifact(path)?;
    check_kind_version(path, &header, "occupancy")?;
    let h: GridHeader = parse_header(path, &header)?;
    if payload.len() != h.width * h.height {
        return Err(ArtifactError::PayloadLength {
            path: path.display().to_string(),
            expected: h.width * h.height,
            got: payload.len(),
        });
    }
    OccupancyGrid::new(h.width, h.height, h.resolution, h.origin, payload)
        .map_err(|e| ArtifactError::Invalid { path: path.display().to_string(), msg: e.to_string() })
}

pub fn save_sdf(path: &Path, sdf: &SdfGrid, meta: &ArtifactMeta) -> Result<(), ArtifactError> {
    let body = GridHeader {
        width: sdf.width,
        height: sdf.height,
        resolution: sdf.resolution,
        origin: sdf.origin,
    };
    let header = header_for("sdf", &body, meta).map_err(|e| json_err(path, e))?;
    write_artifact(path, &header, &f32s_to_le_bytes(sdf.values.iter().map(|&v| v as f32)))
}

pub fn load_sdf(path: &Path) -> Result<SdfGrid, ArtifactError> {
    let (header, payload) = read_artifact(path)?;
    check_kind_version(path, &header, "sdf")?;
    let h: GridHeader = parse_header(path, &header)?;
    let values = le_bytes_to_f32s(path, &payload, h.width * h.height)?;
    Ok(SdfGrid {
        width: h.width,
        height: h.height,
        resolution: h.resolution,
        origin: h.origin,
        values: values.into_iter().map(|v| v as f64).collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct VfHeader {
    grid: StateGrid,
    dynamics_id: String,
    r_robot: f64,
    sweeps: usize,
    converged: bool,
}

pub fn save_value_function(
    path: &Path,
    vf: &ValueFunction,
    meta: &ArtifactMeta,
) -> Result<(), ArtifactError> {
    let body = VfHeader {
        grid: vf.grid.clone(),
        dynamics_id: vf.dynamics_id.clone(),
        r_robot: vf.r_robot,
        sweeps: vf.sweeps,
        converged: vf.converged,
    };
    let header = header_for("value_function", &body, meta).map_err(|e| json_err(path, e))?;
    write_artifact(path, &header, &f32s_to_le_bytes(vf.values.iter().copied()))
}

pub fn load_value_function(path: &Path) -> Result<ValueFunction, ArtifactError> {
    let (header, payload) = read_artifact(path)?;
    check_kind_version(path, &header, "value_function")?;
    let h: VfHeader = parse_header(path, &header)?;
    let values = le_bytes_to_f32s(path, &payload, h.grid.total_points())?;
    Ok(ValueFunction {
        grid: h.grid,
        values,
        converged: h.converged,
        sweeps: h.sweeps,
        dynamics_id: h.dynamics_id,
        r_robot: h.r_robot,
    })
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    hyper: HyperNetSpec,
    main: MainNetSpec,
    weight_shapes: Vec<Vec<usize>>,
    sdf_mean: f64,
    sdf_std: f64,
    seed: u64,
    train_config: TrainConfig,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ArtifactError> {
    let body = CheckpointHeader {
        hyper: ckpt.hyper.clone(),
        main: ckpt.main.clone(),
        weight_shapes: ckpt.weights.iter().map(|w| w.shape().to_vec()).collect(),
        sdf_mean: ckpt.sdf_mean,
        sdf_std: ckpt.sdf_std,
        seed: ckpt.seed,
        train_config: ckpt.train_config.clone(),
    };
    let meta =
        ArtifactMeta { tool_version: ckpt.tool_version.clone(), config_hash: ckpt.config_hash.clone() };
    let header = header_for("checkpoint", &body, &meta).map_err(|e| json_err(path, e))?;
    let payload = f32s_to_le_bytes(
        ckpt.weights.iter().flat_map(|w| w.data().iter().map(|&v| v as f32)),
    );
    write_artifact(path, &header, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ArtifactError> {
    let (header, payload) = read_artifact(path)?;
    check_kind_version(path, &header, "checkpoint")?;
    let h: CheckpointHeader = parse_header(path, &header)?;
    let total: usize = h.weight_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let flat = le_bytes_to_f32s(path, &payload, total)?;
    let mut weights = Vec::with_capacity(h.weight_shapes.len());
    let mut off = 0usize;
    for shape in &h.weight_shapes {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = flat[off..off + numel].iter().map(|&v| v as f64).collect();
        off += numel;
        weights.push(Tensor::new(shape, data).map_err(|e| ArtifactError::Invalid {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?);
    }
    let tool_version = header
        .get("tool_version")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let config_hash = header
        .get("config_hash")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let ckpt = Checkpoint {
        hyper: h.hyper,
        main: h.main,
        weights,
        sdf_mean: h.sdf_mean,
        sdf_std: h.sdf_std,
        seed: h.seed,
        train_config: h.train_config,
        tool_version,
        config_hash,
    };
    ckpt.validate().map_err(|e| ArtifactError::Invalid {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(ckpt)
}

pub fn save_report(path: &Path, report: &McReport) -> Result<(), ArtifactError> {
    let json = canonical_json(report).map_err(|e| json_err(path, e))?;
    write_atomic(path, json.as_bytes())
}

pub fn load_report(path: &Path) -> Result<McReport, ArtifactError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| json_err(path, e))
}

pub fn write_metrics_csv(path: &Path, log: &[EpochMetrics]) -> Result<(), ArtifactError> {
    let mut out = String::from("epoch,train_loss,val_loss,val_iou,tp,fp,fn,tn\n");
    for m in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.epoch, m.train_loss, m.val_loss, m.val_iou, m.tp, m.fp, m.fn_, m.tn
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_episodes_csv(path: &Path, report: &McReport) -> Result<(), ArtifactError> {
    let mut out = String::from(
        "mode,horizon,episode,seed,env_hash,outcome,steps,path_m,mean_solve_ms,p95_solve_ms,mean_hyper_ms,min_terminal_value\n",
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.horizon,
            r.episode,
            r.seed,
            r.env_hash,
            serde_json::to_value(r.outcome).unwrap().as_str().unwrap(),
            r.steps,
            r.path_m,
            r.mean_solve_ms,
            r.p95_solve_ms,
            r.mean_hyper_ms,
            r.min_terminal_value,
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_summary_csv(path: &Path, report: &McReport) -> Result<(), ArtifactError> {
    let mut out =
        String::from("mode,horizon,episodes,successes,success_rate,mean_solve_ms,p95_solve_ms\n");
    for s in &report.summary {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.mode, s.horizon, s.episodes, s.successes, s.success_rate, s.mean_solve_ms, s.p95_solve_ms
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Per-step trace for plotting observed clearance and planned terminal
/// value.
pub fn write_trace_csv(path: &Path, result: &EpisodeResult) -> Result<(), ArtifactError> {
    let n = result.trace.poses.first().map(|p| p.len()).unwrap_or(0);
    let mut out = String::from("step");
    for j in 0..n {
        out.push_str(&format!(",x{j}"));
    }
    out.push_str(",sdf,terminal_value,status,solve_ms,hyper_ms\n");
    for (i, pose) in result.trace.poses.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in pose {
            out.push_str(&format!(",{v}"));
        }
        if i < result.trace.sdf_at_pose.len() {
            let status = serde_json::to_value(result.trace.statuses[i])
                .unwrap()
                .as_str()
                .unwrap()
                .to_string();
            out.push_str(&format!(
                ",{},{},{},{},{}\n",
                result.trace.sdf_at_pose[i],
                result.trace.terminal_values[i],
                status,
                result.trace.solve_ms[i],
                result.trace.hyper_ms[i],
            ));
        } else {
            out.push_str(",,,,,\n");
        }
    }
    write_atomic(path, out.as_bytes())
}
