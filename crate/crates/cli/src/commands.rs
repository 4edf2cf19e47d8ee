use reachmpc_core::hyper::{train_with_observer, Checkpoint, TrainEvent};
use reachmpc_core::io::{
    generate_dataset, label_dataset, load_checkpoint, load_dataset, load_report, save_checkpoint,
    save_report, tool_version, write_episodes_csv, write_metrics_csv, write_summary_csv,
    write_trace_csv, ArtifactMeta, ConfigError, RunConfig,
};
use reachmpc_core::mpc::ConstraintMode;
use reachmpc_core::sim::{
    fig1_scenario, monte_carlo as run_monte_carlo, oracle_vf, run_episode, McConfig, McMode,
    McReport, PlannerKind, World,
};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn validation(e: impl Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

pub fn gen_envs(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    count: usize,
    augment: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let model = cfg.model()?;
    let grid = cfg.dataset_state_grid(&model)?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let meta = ArtifactMeta::new(cfg.hash());
    let manifest = generate_dataset(
        out,
        &cfg.dataset_env_spec(),
        count,
        augment,
        &model,
        &grid,
        cfg.reach.r_robot,
        seed,
        &meta,
    )
    .map_err(runtime)?;
    println!(
        "wrote {} samples ({}x{} cells) to {}",
        manifest.sample_count,
        manifest.sdf_width,
        manifest.sdf_height,
        out.display()
    );
    Ok(())
}

pub fn label(config: Option<&Path>, data: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let model = cfg.model()?;
    let opts = cfg.solve_opts();
    let labeled = label_dataset(data, &model, &opts, |done, total| {
        if done % 10 == 0 || done == total {
            println!("labeled {done}/{total}");
        }
    })
    .map_err(|e| match e {
        reachmpc_core::io::DatasetError::Invalid(_) => validation(e),
        other => runtime(other),
    })?;
    println!("{labeled} samples labeled in this run");
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    seed: Option<u64>,
    data: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let model = cfg.model()?;
    let (manifest, dataset) = load_dataset(data).map_err(runtime)?;
    if manifest.dynamics_id != model.id() {
        return Err(validation(format!(
            "dataset dynamics {:?} does not match config {:?}",
            manifest.dynamics_id,
            model.id()
        )));
    }
    let mut train_cfg = cfg.train.clone();
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let main_spec = cfg.main_net_spec(&model);
    let hyper_spec = cfg.hyper_net_spec();
    std::fs::create_dir_all(out).map_err(runtime)?;
    let (ckpt, log) = train_with_observer(
        &dataset,
        &main_spec,
        &hyper_spec,
        &train_cfg,
        tool_version(),
        &cfg.hash(),
        |ev| {
            if let TrainEvent::EpochDone { metrics, .. } = ev {
                println!(
                    "epoch {:3}  train_loss {:10.4}  val_loss {:10.4}  val_iou {:.4}",
                    metrics.epoch, metrics.train_loss, metrics.val_loss, metrics.val_iou
                );
            }
        },
    )
    .map_err(runtime)?;
    save_checkpoint(&out.join("checkpoint.bin"), &ckpt).map_err(runtime)?;
    write_metrics_csv(&out.join("metrics.csv"), &log).map_err(runtime)?;
    println!(
        "checkpoint with {} weight tensors saved to {}",
        ckpt.weights.len(),
        out.join("checkpoint.bin").display()
    );
    Ok(())
}

pub fn eval_model(ckpt_path: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let ckpt = load_checkpoint(ckpt_path).map_err(validation)?;
    let (_, dataset) = load_dataset(data).map_err(runtime)?;
    let full = reachmpc_core::hyper::evaluate(&ckpt, &dataset, None).map_err(runtime)?;
    // Recover the checkpoint's own validation split.
    let val_idx = validation_split(&ckpt, dataset.samples.len());
    let val = reachmpc_core::hyper::evaluate(&ckpt, &dataset, Some(&val_idx)).map_err(runtime)?;
    println!(
        "full set : iou {:.6} loss {:.6} (tp {} fp {} fn {} tn {})",
        full.val_iou, full.val_loss, full.tp, full.fp, full.fn_, full.tn
    );
    println!(
        "val split: iou {:.6} loss {:.6} (tp {} fp {} fn {} tn {})",
        val.val_iou, val.val_loss, val.tp, val.fp, val.fn_, val.tn
    );
    if let Some(path) = out {
        let doc = serde_json::json!({ "full": full, "val_split": val });
        std::fs::write(path, serde_json::to_string_pretty(&doc).map_err(runtime)?)
            .map_err(runtime)?;
    }
    Ok(())
}

/// The deterministic validation split used during training.
fn validation_split(ckpt: &Checkpoint, n_samples: usize) -> Vec<usize> {
    reachmpc_core::hyper::split_indices(&ckpt.train_config, n_samples).1
}

pub fn simulate(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    mode: &str,
    horizon: Option<usize>,
    scenario: &str,
    ckpt_path: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let model = cfg.model()?;
    let horizon = horizon.unwrap_or(cfg.mpc.horizon);
    let mode = reachmpc_core::io::parse_mode_name(mode, cfg.mpc.gamma).map_err(validation)?;

    let world = match scenario {
        "fig1" => fig1_scenario(),
        "random" => {
            let mut env = cfg.mc_env_spec();
            env.seed = seed.unwrap_or(0);
            let grid = reachmpc_core::geom::gen_random_env(&env).map_err(runtime)?;
            World::new(
                grid,
                cfg.sim.mc.start.clone(),
                cfg.sim.mc.goal,
                cfg.sim.window_side,
            )
        }
        other => return Err(validation(format!("unknown scenario {other:?}"))),
    };
    let params = cfg.sim_params();
    world.validate(params.r_robot).map_err(validation)?;

    let ckpt = match (mode, ckpt_path) {
        (ConstraintMode::Ntc, Some(p)) => Some(load_checkpoint(p).map_err(validation)?),
        (ConstraintMode::Ntc, None) => {
            return Err(validation("mode ntc requires --ckpt".to_string()))
        }
        _ => None,
    };
    let oracle = if matches!(mode, ConstraintMode::NtcOracle) {
        Some(
            oracle_vf(&world, &model, &cfg.oracle_counts(&model), &cfg.solve_opts(), params.r_robot)
                .map_err(runtime)?,
        )
    } else {
        None
    };
    let kind = match mode {
        ConstraintMode::Sdf => PlannerKind::Sdf,
        ConstraintMode::Dcbf { gamma } => PlannerKind::Dcbf { gamma },
        ConstraintMode::Ntc => PlannerKind::Ntc(ckpt.as_ref().expect("checked above")),
        ConstraintMode::NtcOracle => PlannerKind::NtcOracle(oracle.as_ref().expect("built above")),
    };
    let problem = cfg.mpc_problem(model, horizon, mode);
    let result = run_episode(&world, kind, &problem, &params, seed.unwrap_or(0));
    std::fs::create_dir_all(out).map_err(runtime)?;
    write_trace_csv(&out.join("trace.csv"), &result).map_err(runtime)?;
    let summary = serde_json::json!({
        "outcome": result.outcome,
        "steps": result.steps,
        "path_m": result.path_length,
        "mode": problem.mode.name(),
        "horizon": horizon,
        "config_hash": cfg.hash(),
        "tool_version": tool_version(),
    });
    std::fs::write(
        out.join("episode.json"),
        serde_json::to_string_pretty(&summary).map_err(runtime)?,
    )
    .map_err(runtime)?;
    println!(
        "outcome: {} after {} steps ({:.2} m); trace in {}",
        serde_json::to_value(result.outcome).unwrap().as_str().unwrap(),
        result.steps,
        result.path_length,
        out.join("trace.csv").display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn monte_carlo(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    modes: Option<&str>,
    horizons: Option<&str>,
    episodes: Option<usize>,
    ckpt_path: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let model = cfg.model()?;
    let mode_names: Vec<String> = match modes {
        Some(s) => s.split(',').map(|m| m.trim().to_string()).collect(),
        None => cfg.sim.mc.modes.clone(),
    };
    let horizons: Vec<usize> = match horizons {
        Some(s) => s
            .split(',')
            .map(|h| h.trim().parse::<usize>().map_err(|e| validation(format!("horizons: {e}"))))
            .collect::<Result<_, _>>()?,
        None => cfg.sim.mc.horizons.clone(),
    };
    let needs_ckpt = mode_names.iter().any(|m| m == "ntc");
    let ckpt = match (needs_ckpt, ckpt_path) {
        (true, Some(p)) => Some(load_checkpoint(p).map_err(validation)?),
        (true, None) => return Err(validation("mode ntc requires --ckpt".to_string())),
        _ => None,
    };
    let mut mc_modes: Vec<McMode> = Vec::new();
    for name in &mode_names {
        let mode = reachmpc_core::io::parse_mode_name(name, cfg.mpc.gamma).map_err(validation)?;
        mc_modes.push(match mode {
            ConstraintMode::Sdf => McMode::Sdf,
            ConstraintMode::Dcbf { gamma } => McMode::Dcbf { gamma },
            ConstraintMode::Ntc => McMode::Ntc(ckpt.as_ref().expect("checked above")),
            ConstraintMode::NtcOracle => McMode::NtcOracle,
        });
    }
    let mc = McConfig {
        env: cfg.mc_env_spec(),
        start: cfg.sim.mc.start.clone(),
        goal: cfg.sim.mc.goal,
        window_side: cfg.sim.window_side,
        modes: mc_modes,
        horizons,
        episodes: episodes.unwrap_or(cfg.sim.mc.episodes),
        base_seed: seed.unwrap_or(0),
        problem: cfg.mpc_problem(model, cfg.mpc.horizon, ConstraintMode::Sdf),
        sim: cfg.sim_params(),
        oracle_counts: cfg.oracle_counts(&model),
        oracle_opts: cfg.solve_opts(),
        config_hash: cfg.hash(),
    };
    let report = run_monte_carlo(&mc).map_err(runtime)?;
    std::fs::create_dir_all(out).map_err(runtime)?;
    save_report(&out.join("report.json"), &report).map_err(runtime)?;
    write_episodes_csv(&out.join("episodes.csv"), &report).map_err(runtime)?;
    write_summary_csv(&out.join("summary.csv"), &report).map_err(runtime)?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &McReport) {
    println!("mode        horizon  episodes  success  rate    mean_ms  p95_ms");
    for s in &report.summary {
        println!(
            "{:<11} {:<8} {:<9} {:<8} {:<7.3} {:<8.2} {:<7.2}",
            s.mode, s.horizon, s.episodes, s.successes, s.success_rate, s.mean_solve_ms,
            s.p95_solve_ms
        );
    }
}

pub fn report(input: &Path, out: &Path) -> Result<(), CliError> {
    let path = if input.is_dir() { input.join("report.json") } else { input.to_path_buf() };
    let report = load_report(&path).map_err(validation)?;
    std::fs::create_dir_all(out).map_err(runtime)?;
    write_summary_csv(&out.join("summary.csv"), &report).map_err(runtime)?;

    // Plot-ready wide table: one row per horizon, one column per mode.
    let mut horizons: Vec<usize> = report.summary.iter().map(|s| s.horizon).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let mut modes: Vec<String> = report.summary.iter().map(|s| s.mode.clone()).collect();
    modes.sort();
    modes.dedup();
    let mut table: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
    for s in &report.summary {
        table.entry(s.horizon).or_default().insert(s.mode.clone(), s.success_rate);
    }
    let mut csv = String::from("horizon");
    for m in &modes {
        csv.push_str(&format!(",{m}"));
    }
    csv.push('\n');
    for h in &horizons {
        csv.push_str(&h.to_string());
        for m in &modes {
            match table.get(h).and_then(|row| row.get(m)) {
                Some(v) => csv.push_str(&format!(",{v}")),
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    std::fs::write(out.join("rate_by_horizon.csv"), csv).map_err(runtime)?;
    print_summary(&report);
    Ok(())
}
