use super::container::{
    canonical_json, load_occupancy, load_sdf, load_value_function, save_occupancy, save_sdf,
    save_value_function, ArtifactError, ArtifactMeta,
};
use crate::dynamics::DynamicsModel;
use crate::geom::{augment, gen_random_env, occupancy_to_sdf, EnvSpec};
use crate::hyper::{TrainDataset, TrainSample};
use crate::reach::{build_failure_field, solve_vi, SolveOpts, StateGrid};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Reach(#[from] crate::reach::ReachError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("dataset invalid: {0}")]
    Invalid(String),
    #[error("sample {index} not labeled yet (run the label step)")]
    Unlabeled { index: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub dir: String,
    pub occ: String,
    pub sdf: String,
    pub vf: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dynamics_id: String,
    pub state_grid: StateGrid,
    pub sdf_width: usize,
    pub sdf_height: usize,
    pub sdf_resolution: f64,
    pub r_robot: f64,
    pub sample_count: usize,
    pub samples: Vec<SampleEntry>,
    pub seed: u64,
    pub tool_version: String,
    pub config_hash: String,
}

const MANIFEST_NAME: &str = "manifest.json";

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let path = manifest_path(dir);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let m: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| DatasetError::Json { path: path.display().to_string(), source: e })?;
    if m.format_version != super::container::FORMAT_VERSION {
        return Err(DatasetError::Invalid(format!(
            "manifest format version {} unsupported",
            m.format_version
        )));
    }
    Ok(m)
}

fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let path = manifest_path(dir);
    let json = canonical_json(manifest)
        .map_err(|e| DatasetError::Json { path: path.display().to_string(), source: e })?;
    let tmp = path.with_extension("tmp_write");
    fs::write(&tmp, json.as_bytes()).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Generate `count` random local environments (optionally times 8 via
/// dihedral augmentation) into one directory per sample, plus a manifest.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    dir: &Path,
    env: &EnvSpec,
    count: usize,
    augment_samples: bool,
    model: &DynamicsModel,
    state_grid: &StateGrid,
    r_robot: f64,
    seed: u64,
    meta: &ArtifactMeta,
) -> Result<DatasetManifest, DatasetError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut grids = Vec::with_capacity(count);
    for i in 0..count {
        let mut spec = env.clone();
        spec.seed = seed.wrapping_add(i as u64);
        grids.push(gen_random_env(&spec)?);
    }
    if augment_samples {
        grids = augment(&grids)?;
    }
    let mut samples = Vec::with_capacity(grids.len());
    for (i, grid) in grids.iter().enumerate() {
        let sub = format!("sample_{i:05}");
        let sample_dir = dir.join(&sub);
        fs::create_dir_all(&sample_dir).map_err(|e| io_err(&sample_dir, e))?;
        save_occupancy(&sample_dir.join("occ.u8"), grid, meta)?;
        samples.push(SampleEntry {
            dir: sub,
            occ: "occ.u8".into(),
            sdf: "sdf.f32".into(),
            vf: "vf.f32".into(),
        });
    }
    let first = &grids[0];
    let manifest = DatasetManifest {
        format_version: super::container::FORMAT_VERSION,
        dynamics_id: model.id().to_string(),
        state_grid: state_grid.clone(),
        sdf_width: first.width,
        sdf_height: first.height,
        sdf_resolution: first.resolution,
        r_robot,
        sample_count: samples.len(),
        samples,
        seed,
        tool_version: meta.tool_version.clone(),
        config_hash: meta.config_hash.clone(),
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

fn vf_is_present(dir: &Path, entry: &SampleEntry, manifest: &DatasetManifest) -> bool {
    let path = dir.join(&entry.dir).join(&entry.vf);
    match load_value_function(&path) {
        Ok(vf) => vf.grid == manifest.state_grid,
        Err(_) => false,
    }
}

/// Label every sample that is not labeled yet: occupancy -> SDF ->
/// failure field -> converged value function. Already-labeled samples are
/// skipped, so an interrupted run resumes where it stopped. Returns the
/// number of samples labeled in this call.
pub fn label_dataset(
    dir: &Path,
    model: &DynamicsModel,
    opts: &SolveOpts,
    mut progress: impl FnMut(usize, usize),
) -> Result<usize, DatasetError> {
    let manifest = load_manifest(dir)?;
    if model.id() != manifest.dynamics_id {
        return Err(DatasetError::Invalid(format!(
            "dataset was built for {:?}, got {:?}",
            manifest.dynamics_id,
            model.id()
        )));
    }
    let meta = ArtifactMeta {
        tool_version: manifest.tool_version.clone(),
        config_hash: manifest.config_hash.clone(),
    };
    let total = manifest.samples.len();
    let mut labeled = 0usize;
    for (i, entry) in manifest.samples.iter().enumerate() {
        if vf_is_present(dir, entry, &manifest) {
            progress(i + 1, total);
            continue;
        }
        let sample_dir = dir.join(&entry.dir);
        let occ = load_occupancy(&sample_dir.join(&entry.occ))?;
        let sdf = occupancy_to_sdf(&occ);
        save_sdf(&sample_dir.join(&entry.sdf), &sdf, &meta)?;
        let l = build_failure_field(&sdf, &manifest.state_grid, manifest.r_robot)?;
        let vf = solve_vi(model, &l, opts)?;
        save_value_function(&sample_dir.join(&entry.vf), &vf, &meta)?;
        labeled += 1;
        progress(i + 1, total);
    }
    Ok(labeled)
}

/// Load a fully labeled dataset into memory for training/evaluation.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, TrainDataset), DatasetError> {
    let manifest = load_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, entry) in manifest.samples.iter().enumerate() {
        let sample_dir = dir.join(&entry.dir);
        let sdf_path = sample_dir.join(&entry.sdf);
        let vf_path = sample_dir.join(&entry.vf);
        if !sdf_path.exists() || !vf_path.exists() {
            return Err(DatasetError::Unlabeled { index: i });
        }
        let sdf = load_sdf(&sdf_path)?;
        if sdf.width != manifest.sdf_width || sdf.height != manifest.sdf_height {
            return Err(DatasetError::Invalid(format!(
                "sample {i}: SDF {}x{} does not match manifest {}x{}",
                sdf.width, sdf.height, manifest.sdf_width, manifest.sdf_height
            )));
        }
        let vf = load_value_function(&vf_path)?;
        if vf.grid != manifest.state_grid {
            return Err(DatasetError::Invalid(format!(
                "sample {i}: value grid does not match manifest grid"
            )));
        }
        samples.push(TrainSample { sdf, labels: vf.values });
    }
    let dataset = TrainDataset {
        samples,
        grid: manifest.state_grid.clone(),
        dynamics_id: manifest.dynamics_id.clone(),
        r_robot: manifest.r_robot,
    };
    Ok((manifest, dataset))
}
