//! Supervised training of the hypernetwork.
//!
//! Per sample: SDF -> hypernetwork -> parameter vector -> main network
//! over (a subsample of) the state grid -> loss against the HJ labels.
//! Gradients flow through both networks but only hypernetwork weights are
//! trainable. Validation metrics are computed each epoch with the weights
//! quantized to checkpoint precision, so the last row of the log is
//! exactly what the saved checkpoint reproduces.

use super::{
    hyper_forward_graph, iou_and_confusion, main_forward, main_forward_graph, quantize_weights,
    rwmse_weight, Checkpoint, HyperError, HyperNetSpec, MainNetSpec, Metrics,
};
use crate::geom::SdfGrid;
use crate::nn::{AdamState, Graph, NodeId, Tensor};
use crate::reach::StateGrid;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Rwmse,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of samples used for training; the rest validate. A
    /// single-sample dataset validates on itself.
    pub split: f64,
    /// Fraction of state-grid points per training sample (>= 0.25);
    /// validation always uses the full grid.
    pub grid_subsample: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Rwmse,
            alpha: 1000.0,
            beta: 10.0,
            epochs: 20,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            split: 0.8,
            grid_subsample: 0.25,
        }
    }
}

/// One labelled observation: the SDF image and the HJ value per grid node.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sdf: SdfGrid,
    pub labels: Vec<f32>,
}

/// In-memory dataset: samples plus the state grid the labels live on.
#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub samples: Vec<TrainSample>,
    pub grid: StateGrid,
    pub dynamics_id: String,
    pub r_robot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Progress callbacks for tests and logging.
#[derive(Debug, Clone, Copy)]
pub enum TrainEvent {
    BatchDone { epoch: usize, batch: usize, loss: f64 },
    EpochDone { epoch: usize, metrics: EpochMetrics },
}

fn loss_alpha(cfg: &TrainConfig) -> f64 {
    match cfg.loss {
        LossKind::Rwmse => cfg.alpha,
        LossKind::Mse => 0.0,
    }
}

/// Deterministic train/validation index split. A dataset whose split
/// rounds to "everything trains" validates on the training indices.
pub fn split_indices(cfg: &TrainConfig, n_samples: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    order.shuffle(&mut rng);
    let n_train = ((n_samples as f64 * cfg.split).round() as usize).clamp(1, n_samples);
    let train_idx: Vec<usize> = order[..n_train].to_vec();
    let val_idx: Vec<usize> =
        if n_train == n_samples { train_idx.clone() } else { order[n_train..].to_vec() };
    (train_idx, val_idx)
}

/// States of every grid node in row-major node order, flattened `[K, n]`.
fn grid_states(grid: &StateGrid) -> Vec<f64> {
    let n = grid.ndim();
    let total = grid.total_points();
    let mut out = Vec::with_capacity(total * n);
    let mut multi = vec![0usize; n];
    let mut x = vec![0.0; n];
    for idx in 0..total {
        grid.unravel(idx, &mut multi);
        grid.coords(&multi, &mut x);
        out.extend_from_slice(&x);
    }
    out
}

struct SampleBatchResult {
    loss: f64,
    grads: Vec<Tensor>,
}

/// Loss and hypernet weight gradients for one sample over the given grid
/// node subset.
#[allow(clippy::too_many_arguments)]
fn sample_pass(
    hyper: &HyperNetSpec,
    main: &MainNetSpec,
    weights: &[Tensor],
    sdf_mean: f64,
    sdf_std: f64,
    sample: &TrainSample,
    states: &[f64],
    labels: &[f64],
    node_subset: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<SampleBatchResult, HyperError> {
    let n = main.input_dim;
    let k = node_subset.len();
    let mut sub_states = Vec::with_capacity(k * n);
    let mut sub_labels = Vec::with_capacity(k);
    for &node in node_subset {
        sub_states.extend_from_slice(&states[node * n..(node + 1) * n]);
        sub_labels.push(labels[node]);
    }
    let mut g = Graph::new();
    let wids: Vec<NodeId> = weights.iter().map(|w| g.input(w.clone())).collect();
    let sdf_node = g.input(Tensor::new(
        &[1, hyper.input_h, hyper.input_w],
        sample.sdf.values.clone(),
    )?);
    let params = hyper_forward_graph(&mut g, hyper, &wids, sdf_node, sdf_mean, sdf_std)?;
    let st = g.input(Tensor::new(&[k, n], sub_states)?);
    let pred = main_forward_graph(&mut g, main, params, st)?;
    let target = g.input(Tensor::new(&[k, 1], sub_labels.clone())?);
    let w_vals: Vec<f64> = sub_labels.iter().map(|&t| rwmse_weight(t, alpha, beta)).collect();
    let w_node = g.input(Tensor::new(&[k, 1], w_vals)?);
    let resid = g.sub(target, pred)?;
    let sq = g.square(resid);
    let weighted = g.mul(w_node, sq)?;
    let loss = g.mean_all(weighted);
    g.backward(loss)?;
    Ok(SampleBatchResult {
        loss: g.value(loss).item(),
        grads: wids.iter().map(|&id| g.grad(id).clone()).collect(),
    })
}

/// Validation metrics of a (quantized) weight set on one sample, using the
/// same forward path as [`super::hyper_forward`].
fn validate_sample(
    ckpt: &Checkpoint,
    sample: &TrainSample,
    states: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<Metrics, HyperError> {
    let params = super::hyper_forward(ckpt, &sample.sdf)?;
    let pred = main_forward(&ckpt.main, &params, states)?;
    let labels: Vec<f64> = sample.labels.iter().map(|&v| v as f64).collect();
    let mut m = iou_and_confusion(&pred, &labels)?;
    m.loss = super::rwmse(&pred, &labels, alpha, beta)?;
    Ok(m)
}

pub fn train(
    dataset: &TrainDataset,
    main: &MainNetSpec,
    hyper: &HyperNetSpec,
    cfg: &TrainConfig,
    tool_version: &str,
    config_hash: &str,
) -> Result<(Checkpoint, Vec<EpochMetrics>), HyperError> {
    train_with_observer(dataset, main, hyper, cfg, tool_version, config_hash, |_| {})
}

pub fn train_with_observer(
    dataset: &TrainDataset,
    main: &MainNetSpec,
    hyper: &HyperNetSpec,
    cfg: &TrainConfig,
    tool_version: &str,
    config_hash: &str,
    mut observer: impl FnMut(TrainEvent),
) -> Result<(Checkpoint, Vec<EpochMetrics>), HyperError> {
    main.validate()?;
    if dataset.samples.is_empty() {
        return Err(HyperError::Train("empty dataset".into()));
    }
    if !(0.25..=1.0).contains(&cfg.grid_subsample) {
        return Err(HyperError::Train(format!(
            "grid_subsample {} outside [0.25, 1.0]",
            cfg.grid_subsample
        )));
    }
    let total_nodes = dataset.grid.total_points();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.sdf.height != hyper.input_h || s.sdf.width != hyper.input_w {
            return Err(HyperError::GeometryMismatch {
                got: format!("sample {i}: {}x{}", s.sdf.width, s.sdf.height),
                want: format!("{}x{}", hyper.input_w, hyper.input_h),
            });
        }
        if s.labels.len() != total_nodes {
            return Err(HyperError::Train(format!(
                "sample {i}: {} labels for {} grid nodes",
                s.labels.len(),
                total_nodes
            )));
        }
    }

    // Deterministic split.
    let (train_idx, val_idx) = split_indices(cfg, dataset.samples.len());

    // Normalization constants over the training split.
    let (mut acc, mut count) = (0.0f64, 0usize);
    for &i in &train_idx {
        acc += dataset.samples[i].sdf.values.iter().sum::<f64>();
        count += dataset.samples[i].sdf.values.len();
    }
    let sdf_mean = acc / count as f64;
    let mut var = 0.0f64;
    for &i in &train_idx {
        var += dataset.samples[i]
            .sdf
            .values
            .iter()
            .map(|v| (v - sdf_mean).powi(2))
            .sum::<f64>();
    }
    let sdf_std = (var / count as f64).sqrt().max(1e-9);

    let states = grid_states(&dataset.grid);
    let labels_f64: Vec<Vec<f64>> = dataset
        .samples
        .iter()
        .map(|s| s.labels.iter().map(|&v| v as f64).collect())
        .collect();

    let mut weights = super::init_weights(hyper, main, cfg.seed)?;
    let mut adam = AdamState::new(&weights, cfg.lr);
    let alpha = loss_alpha(cfg);
    let beta = cfg.beta;
    let subset_size = ((total_nodes as f64 * cfg.grid_subsample).ceil() as usize).clamp(1, total_nodes);

    let make_ckpt = |weights: &[Tensor]| Checkpoint {
        hyper: hyper.clone(),
        main: main.clone(),
        weights: quantize_weights(weights),
        sdf_mean,
        sdf_std,
        seed: cfg.seed,
        train_config: cfg.clone(),
        tool_version: tool_version.to_string(),
        config_hash: config_hash.to_string(),
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut epoch_order = train_idx.clone();
        let mut erng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64).wrapping_mul(0x85eb_ca6b));
        epoch_order.shuffle(&mut erng);

        let mut loss_sum = 0.0;
        let mut batch_count = 0usize;
        for (bi, chunk) in epoch_order.chunks(cfg.batch.max(1)).enumerate() {
            let mut grad_sum: Vec<Tensor> =
                weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
            let mut batch_loss = 0.0;
            for &si in chunk {
                // Per-(epoch, sample) deterministic node subset.
                let mut srng = ChaCha8Rng::seed_from_u64(
                    cfg.seed
                        .wrapping_mul(0xc2b2_ae35)
                        .wrapping_add((epoch as u64) << 24)
                        .wrapping_add(si as u64),
                );
                let subset: Vec<usize> = if subset_size == total_nodes {
                    (0..total_nodes).collect()
                } else {
                    rand::seq::index::sample(&mut srng, total_nodes, subset_size).into_vec()
                };
                let res = sample_pass(
                    hyper,
                    main,
                    &weights,
                    sdf_mean,
                    sdf_std,
                    &dataset.samples[si],
                    &states,
                    &labels_f64[si],
                    &subset,
                    alpha,
                    beta,
                )?;
                batch_loss += res.loss;
                for (acc, g) in grad_sum.iter_mut().zip(res.grads.iter()) {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grad_sum.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            batch_loss *= inv;
            adam.step(&mut weights, &grad_sum);
            loss_sum += batch_loss;
            batch_count += 1;
            observer(TrainEvent::BatchDone { epoch, batch: bi, loss: batch_loss });
        }

        // Validation with quantized weights (checkpoint-identical path).
        let ckpt = make_ckpt(&weights);
        let mut val_loss = 0.0;
        let mut agg = Metrics { iou: 0.0, tp: 0, fp: 0, fn_: 0, tn: 0, loss: 0.0 };
        for &vi in &val_idx {
            let m = validate_sample(&ckpt, &dataset.samples[vi], &states, alpha, beta)?;
            val_loss += m.loss;
            agg.tp += m.tp;
            agg.fp += m.fp;
            agg.fn_ += m.fn_;
            agg.tn += m.tn;
        }
        let union = agg.tp + agg.fp + agg.fn_;
        let val_iou = if union == 0 { 1.0 } else { agg.tp as f64 / union as f64 };
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / batch_count.max(1) as f64,
            val_loss: val_loss / val_idx.len() as f64,
            val_iou,
            tp: agg.tp,
            fp: agg.fp,
            fn_: agg.fn_,
            tn: agg.tn,
        };
        observer(TrainEvent::EpochDone { epoch, metrics });
        log.push(metrics);
    }

    Ok((make_ckpt(&weights), log))
}

/// Metrics of a checkpoint on a dataset, same code path as the per-epoch
/// validation log.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: &TrainDataset,
    sample_indices: Option<&[usize]>,
) -> Result<EpochMetrics, HyperError> {
    let states = grid_states(&dataset.grid);
    let alpha = loss_alpha(&ckpt.train_config);
    let beta = ckpt.train_config.beta;
    let all: Vec<usize> = (0..dataset.samples.len()).collect();
    let idx = sample_indices.unwrap_or(&all);
    let mut val_loss = 0.0;
    let mut agg = Metrics { iou: 0.0, tp: 0, fp: 0, fn_: 0, tn: 0, loss: 0.0 };
    for &vi in idx {
        let m = validate_sample(ckpt, &dataset.samples[vi], &states, alpha, beta)?;
        val_loss += m.loss;
        agg.tp += m.tp;
        agg.fp += m.fp;
        agg.fn_ += m.fn_;
        agg.tn += m.tn;
    }
    let union = agg.tp + agg.fp + agg.fn_;
    Ok(EpochMetrics {
        epoch: 0,
        train_loss: f64::NAN,
        val_loss: val_loss / idx.len().max(1) as f64,
        val_iou: if union == 0 { 1.0 } else { agg.tp as f64 / union as f64 },
        tp: agg.tp,
        fp: agg.fp,
        fn_: agg.fn_,
        tn: agg.tn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynamicsModel;
    use crate::geom::{occupancy_to_sdf, OccupancyGrid};
    use crate::hyper::{hyper_forward, ConvLayerSpec};
    use crate::reach::{build_failure_field, solve_vi, SolveOpts, StateGrid};

    /// Small dataset: coarse SDF windows with real HJ labels.
    fn tiny_dataset(n_samples: usize, with_obstacle: bool) -> (TrainDataset, HyperNetSpec, MainNetSpec) {
        let model = DynamicsModel::dubins_default();
        let side = 6.0;
        let res = 0.25;
        let cells = (side / res) as usize; // 24
        let grid = StateGrid::for_model(&model, (0.0, side), (0.0, side), &[12, 12, 9]).unwrap();
        let mut samples = Vec::new();
        for i in 0..n_samples {
            let mut occ = OccupancyGrid::free(cells, cells, res, (0.0, 0.0));
            if with_obstacle {
                let cx = 2.0 + (i as f64) * 0.8;
                for iy in 0..cells {
                    for ix in 0..cells {
                        let (x, y) = occ.cell_center(ix, iy);
                        if (x - cx).powi(2) + (y - 3.0).powi(2) <= 0.8 * 0.8 {
                            occ.cells[iy * cells + ix] = 1;
                        }
                    }
                }
            }
            let sdf = occupancy_to_sdf(&occ);
            let l = build_failure_field(&sdf, &grid, 0.0).unwrap();
            let vf = solve_vi(&model, &l, &SolveOpts::default()).unwrap();
            samples.push(TrainSample { sdf, labels: vf.values });
        }
        let dataset = TrainDataset {
            samples,
            grid,
            dynamics_id: "dubins".into(),
            r_robot: 0.0,
        };
        let hyper = HyperNetSpec {
            input_h: cells,
            input_w: cells,
            conv: vec![
                ConvLayerSpec { out_channels: 4, kernel: 3, stride: 2 },
                ConvLayerSpec { out_channels: 8, kernel: 3, stride: 2 },
            ],
            fc_hidden: vec![48],
        };
        let main = MainNetSpec::dubins_default(side);
        (dataset, hyper, main)
    }

    #[test]
    fn epoch1_batch1_loss_matches_scripted_forward() {
        let (dataset, hyper, main) = tiny_dataset(2, true);
        let cfg = TrainConfig {
            epochs: 1,
            batch: 1,
            grid_subsample: 1.0,
            lr: 1e-3,
            seed: 7,
            ..Default::default()
        };
        let mut first_loss = None;
        train_with_observer(&dataset, &main, &hyper, &cfg, "t", "h", |ev| {
            if let TrainEvent::BatchDone { epoch: 1, batch: 0, loss } = ev {
                first_loss.get_or_insert(loss);
            }
        })
        .unwrap();
        let got = first_loss.unwrap();

        // Independent recomputation through the public inference ops.
        let mut order: Vec<usize> = (0..2).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7u64.wrapping_mul(0x9e37_79b9).wrapping_add(1));
        order.shuffle(&mut rng);
        let n_train = 2; // split 0.8 of 2 rounds to 2
        let train_idx = &order[..n_train];
        let mut erng = ChaCha8Rng::seed_from_u64(7u64.wrapping_add(1).wrapping_mul(0x85eb_ca6b));
        let mut epoch_order = train_idx.to_vec();
        epoch_order.shuffle(&mut erng);
        let si = epoch_order[0];

        let (mut acc, mut count) = (0.0, 0usize);
        for &i in train_idx {
            acc += dataset.samples[i].sdf.values.iter().sum::<f64>();
            count += dataset.samples[i].sdf.values.len();
        }
        let mean = acc / count as f64;
        let mut var = 0.0;
        for &i in train_idx {
            var += dataset.samples[i].sdf.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        }
        let std = (var / count as f64).sqrt().max(1e-9);

        let weights = crate::hyper::init_weights(&hyper, &main, 7).unwrap();
        let ckpt = Checkpoint {
            hyper: hyper.clone(),
            main: main.clone(),
            weights, // unquantized: the training pass uses raw weights
            sdf_mean: mean,
            sdf_std: std,
            seed: 7,
            train_config: cfg.clone(),
            tool_version: "t".into(),
            config_hash: "h".into(),
        };
        let params = hyper_forward(&ckpt, &dataset.samples[si].sdf).unwrap();
        let states = grid_states(&dataset.grid);
        let pred = main_forward(&main, &params, &states).unwrap();
        let labels: Vec<f64> = dataset.samples[si].labels.iter().map(|&v| v as f64).collect();
        let want = crate::hyper::rwmse(&pred, &labels, 1000.0, 10.0).unwrap();
        let rel = (got - want).abs() / want.abs().max(1e-12);
        assert!(rel < 1e-12, "got {got}, scripted {want}");
    }

    #[test]
    fn training_is_deterministic() {
        let (dataset, hyper, main) = tiny_dataset(3, true);
        let cfg = TrainConfig { epochs: 2, batch: 2, seed: 11, ..Default::default() };
        let run = || {
            let mut first = None;
            let (_ckpt, log) =
                train_with_observer(&dataset, &main, &hyper, &cfg, "t", "h", |ev| {
                    if let TrainEvent::BatchDone { epoch: 1, batch: 0, loss } = ev {
                        first.get_or_insert(loss);
                    }
                })
                .unwrap();
            (first.unwrap(), log)
        };
        let (l1, log1) = run();
        let (l2, log2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(log1, log2);
    }

    #[test]
    fn loss_decreases_on_tiny_problem() {
        let (dataset, hyper, main) = tiny_dataset(1, true);
        let cfg = TrainConfig {
            epochs: 30,
            batch: 1,
            lr: 2e-3,
            seed: 3,
            grid_subsample: 1.0,
            ..Default::default()
        };
        let (ckpt, log) = train(&dataset, &main, &hyper, &cfg, "t", "h").unwrap();
        assert!(log.last().unwrap().val_loss < log[0].val_loss * 0.7,
            "first {} last {}", log[0].val_loss, log.last().unwrap().val_loss);
        // eval on the same set matches the last log row exactly.
        let m = evaluate(&ckpt, &dataset, None).unwrap();
        let last = log.last().unwrap();
        assert_eq!(m.val_iou.to_bits(), last.val_iou.to_bits());
        assert_eq!(m.val_loss.to_bits(), last.val_loss.to_bits());
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (last.tp, last.fp, last.fn_, last.tn));
    }
}
