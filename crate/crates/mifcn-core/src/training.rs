//! End-to-end training: the compound reconstruction loss, Adam, geometric
//! augmentation, and the epoch loop.
//!
//! The loss couples every branch to its clean target and the head output to
//! the main branch:
//!
//! ```text
//! J = (1/N) sum_i sum_t mean((Xhat_t - X_t)^2)
//!   + (1/N) sum_i       mean((Xhat_1 - Xhat_R)^2)
//! ```
//!
//! Both terms are per-pixel means, so J is comparable across patch sizes.
//! The second term deliberately compares two network outputs: it keeps the
//! refined result anchored to the main branch's prediction.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::dataset::{PatchPair, PatchTuple};
use crate::error::{Error, Result};
use crate::model::{insert_params, mifcn_forward_graph, MifcnOutput, MifcnParams, ModelConfig, ParamNodes};
use crate::tensor::{Graph, NodeId, Tensor};

/// Optimization schedule and optimizer constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for epochs 1 through `lr_switch_epoch`.
    pub lr_phase1: f64,
    /// Learning rate for the remaining epochs.
    pub lr_phase2: f64,
    pub lr_switch_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub shuffle_seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Hyperparams {
        Hyperparams {
            epochs: 60,
            batch_size: 64,
            lr_phase1: 1e-4,
            lr_phase2: 1e-5,
            lr_switch_epoch: 30,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle_seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Domain("epochs and batch size must be positive".into()));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return Err(Error::Domain("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Domain("Adam betas must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Domain("Adam epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch number.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_switch_epoch {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }
}

/// Adam moment estimates, one pair of tensors per parameter tensor, in
/// [`MifcnParams::named_tensors`] order.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &MifcnParams) -> AdamState {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. `grads` must be in
/// [`MifcnParams::named_tensors`] order.
pub fn adam_step(
    params: &mut MifcnParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hyper: &Hyperparams,
) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() || grads.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam got {} gradients for {} parameter tensors",
            grads.len(),
            tensors.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((param, grad), (m, v)) in tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if grad.shape() != param.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let (pd, gd) = (param.data_mut(), grad.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let g = gd[i];
            md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * g;
            vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * g * g;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

/// Batch loss over already-computed forward passes; `targets[i]` holds the T
/// high-SNR patches of sample i.
pub fn loss(outputs: &[MifcnOutput], targets: &[Vec<Tensor>]) -> Result<f64> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "loss got {} outputs and {} target sets",
            outputs.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (out, target_set) in outputs.iter().zip(targets) {
        if out.branch_outputs.len() != target_set.len() {
            return Err(Error::Shape(format!(
                "sample has {} branch outputs but {} targets",
                out.branch_outputs.len(),
                target_set.len()
            )));
        }
        for (xhat, x) in out.branch_outputs.iter().zip(target_set) {
            total += xhat.sub(x)?.square().reduce_mean()?;
        }
        total += out.branch_outputs[0].sub(&out.reconstruction)?.square().reduce_mean()?;
    }
    Ok(total / outputs.len() as f64)
}

/// Record the forward pass and loss of a whole batch on one tape and return
/// the scalar loss node.
pub fn batch_loss_graph(
    graph: &mut Graph,
    nodes: &ParamNodes,
    batch: &[&PatchTuple],
    config: &ModelConfig,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut total: Option<NodeId> = None;
    for tuple in batch {
        tuple.validate()?;
        if tuple.branch_count() != config.branches {
            return Err(Error::Data(format!(
                "tuple has {} patches but the model has {} branches",
                tuple.branch_count(),
                config.branches
            )));
        }
        let inputs: Vec<NodeId> =
            tuple.pairs.iter().map(|p| graph.leaf(p.noisy.clone())).collect();
        let out = mifcn_forward_graph(graph, &inputs, nodes, config)?;
        for (t, pair) in tuple.pairs.iter().enumerate() {
            let target = graph.leaf(pair.high_snr.clone());
            let diff = graph.sub(out.branch_outputs[t], target)?;
            let sq = graph.square(diff);
            let term = graph.mean(sq)?;
            total = Some(match total {
                Some(acc) => graph.add(acc, term)?,
                None => term,
            });
        }
        let diff = graph.sub(out.branch_outputs[0], out.reconstruction)?;
        let sq = graph.square(diff);
        let term = graph.mean(sq)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
    }
    Ok(graph.scale(total.expect("batch is nonempty"), 1.0 / batch.len() as f64))
}

/// Mirror a 2-D patch left-right.
pub fn hflip(patch: &Tensor) -> Result<Tensor> {
    let shape = patch.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("hflip expects a 2-D patch, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(shape);
    for r in 0..h {
        for c in 0..w {
            out.set2(r, c, patch.at2(r, w - 1 - c));
        }
    }
    Ok(out)
}

/// Rotate a square 2-D patch 90 degrees counter-clockwise.
pub fn rot90ccw(patch: &Tensor) -> Result<Tensor> {
    let shape = patch.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!(
            "90-degree rotation needs a square patch, got {shape:?}"
        )));
    }
    let n = shape[0];
    let mut out = Tensor::zeros(shape);
    for r in 0..n {
        for c in 0..n {
            out.set2(r, c, patch.at2(c, n - 1 - r));
        }
    }
    Ok(out)
}

fn map_tuple(tuple: &PatchTuple, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<PatchTuple> {
    let pairs = tuple
        .pairs
        .iter()
        .map(|p| {
            Ok(PatchPair { noisy: f(&p.noisy)?, high_snr: f(&p.high_snr)?, location: p.location })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchTuple { pairs })
}

/// The three training variants of one tuple: original, horizontal flip, and
/// +90 degree (counter-clockwise) rotation, each applied to every patch in
/// the tuple identically.
pub fn augment(tuple: &PatchTuple) -> Result<[PatchTuple; 3]> {
    tuple.validate()?;
    Ok([tuple.clone(), map_tuple(tuple, hflip)?, map_tuple(tuple, rot90ccw)?])
}

/// Expand a dataset by the three augmentation variants; output order is
/// deterministic (all variants of tuple 0, then tuple 1, ...).
pub fn augment_dataset(tuples: &[PatchTuple]) -> Result<Vec<PatchTuple>> {
    let mut out = Vec::with_capacity(tuples.len() * 3);
    for tuple in tuples {
        out.extend(augment(tuple)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean of J over all samples seen this epoch.
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock: Duration,
    pub checkpoint_path: PathBuf,
}

/// Run the full optimization loop and write the final checkpoint.
///
/// Initialization, shuffling, and arithmetic are all seeded, so identical
/// inputs and seeds produce bit-identical checkpoints. `on_epoch` fires
/// after each epoch for progress reporting.
pub fn train(
    tuples: &[PatchTuple],
    config: &ModelConfig,
    hyper: &Hyperparams,
    init_seed: u64,
    checkpoint_path: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MifcnParams, TrainRecord)> {
    config.validate()?;
    hyper.validate()?;
    if tuples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for tuple in tuples {
        tuple.validate()?;
        if tuple.branch_count() != config.branches {
            return Err(Error::Data(format!(
                "tuple has {} patches but the model has {} branches",
                tuple.branch_count(),
                config.branches
            )));
        }
    }
    let start = Instant::now();
    let mut params = MifcnParams::identity_init(config, init_seed)?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.shuffle_seed);
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    let mut records: Vec<EpochRecord> = Vec::with_capacity(hyper.epochs);

    for epoch in 1..=hyper.epochs {
        let lr = hyper.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&PatchTuple> = chunk.iter().map(|&i| &tuples[i]).collect();
            let mut graph = Graph::new();
            let nodes = insert_params(&mut graph, &params);
            let root = batch_loss_graph(&mut graph, &nodes, &batch, config)?;
            let j = graph.value(root).scalar_value()?;
            if !j.is_finite() {
                let last = records
                    .last()
                    .map(|r| format!("last finite epoch {} had mean loss {:.6}", r.epoch, r.mean_loss))
                    .unwrap_or_else(|| "no epoch completed".into());
                return Err(Error::Numeric(format!(
                    "loss became non-finite ({j}) in epoch {epoch}; {last}"
                )));
            }
            graph.backward(root)?;
            let grads: Vec<Tensor> = nodes
                .tensor_ids()
                .iter()
                .map(|&id| {
                    graph
                        .grad(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
                })
                .collect();
            adam_step(&mut params, &grads, &mut adam, lr, hyper)?;
            loss_sum += j * chunk.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            mean_loss: loss_sum / tuples.len() as f64,
        };
        on_epoch(&record);
        records.push(record);
    }

    save_checkpoint(&params, config, checkpoint_path)?;
    let record = TrainRecord {
        epochs: records,
        wall_clock: start.elapsed(),
        checkpoint_path: checkpoint_path.to_path_buf(),
    };
    Ok((params, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mifcn_forward;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hyperparam_defaults_and_schedule() {
        let h = Hyperparams::default();
        assert_eq!(h.epochs, 60);
        assert_eq!(h.lr_phase1, 1e-4);
        assert_eq!(h.lr_phase2, 1e-5);
        assert_eq!(h.learning_rate(1), 1e-4);
        assert_eq!(h.learning_rate(30), 1e-4);
        assert_eq!(h.learning_rate(31), 1e-5);
        assert_eq!(h.learning_rate(60), 1e-5);
        h.validate().unwrap();
        let mut bad = h.clone();
        bad.lr_phase2 = 0.0;
        assert!(bad.validate().is_err());
    }

    fn one_pixel_output(branch: f64, reconstruction: f64) -> MifcnOutput {
        let t = |v: f64| Tensor::from_vec(&[1, 1], vec![v]).unwrap();
        MifcnOutput {
            branch_outputs: vec![t(branch)],
            weights: vec![t(1.0)],
            fused: t(branch),
            reconstruction: t(reconstruction),
        }
    }

    #[test]
    fn loss_on_single_pixel_matches_hand_value() {
        // One branch, one pixel: (3-1)^2 + (3-2)^2 = 5.
        let outputs = vec![one_pixel_output(3.0, 2.0)];
        let targets = vec![vec![Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()]];
        assert_eq!(loss(&outputs, &targets).unwrap(), 5.0);
    }

    #[test]
    fn loss_is_zero_at_exact_fit_and_invariant_under_duplication() {
        let outputs = vec![one_pixel_output(3.0, 3.0)];
        let targets = vec![vec![Tensor::from_vec(&[1, 1], vec![3.0]).unwrap()]];
        assert_eq!(loss(&outputs, &targets).unwrap(), 0.0);

        let outputs2 = vec![one_pixel_output(3.0, 2.0), one_pixel_output(7.0, 1.0)];
        let targets2 = vec![
            vec![Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()],
            vec![Tensor::from_vec(&[1, 1], vec![4.0]).unwrap()],
        ];
        let j = loss(&outputs2, &targets2).unwrap();
        let doubled: Vec<MifcnOutput> =
            outputs2.iter().chain(outputs2.iter()).cloned().collect();
        let targets_doubled: Vec<Vec<Tensor>> =
            targets2.iter().chain(targets2.iter()).cloned().collect();
        assert!((loss(&doubled, &targets_doubled).unwrap() - j).abs() < 1e-15);
    }

    fn toy_tuple(rng: &mut ChaCha8Rng, branches: usize, size: usize) -> PatchTuple {
        let mut patch = |lo: f64, hi: f64| {
            let data = (0..size * size).map(|_| rng.gen_range(lo..hi)).collect();
            Tensor::from_vec(&[size, size], data).unwrap()
        };
        let pairs = (0..branches)
            .map(|t| PatchPair {
                noisy: patch(10.0, 250.0),
                high_snr: patch(10.0, 250.0),
                location: (t, t),
            })
            .collect();
        PatchTuple { pairs }
    }

    #[test]
    fn graph_loss_matches_pure_loss() {
        let config = ModelConfig {
            branches: 3,
            feature_maps: 4,
            branch_layers: 3,
            head_layers: 1,
            branch_dilations: vec![1, 2, 1],
            fusion_h: 400.0,
            leak: 0.2,
        };
        let params = MifcnParams::identity_init(&config, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tuples: Vec<PatchTuple> = (0..3).map(|_| toy_tuple(&mut rng, 3, 9)).collect();

        let mut graph = Graph::new();
        let nodes = insert_params(&mut graph, &params);
        let batch: Vec<&PatchTuple> = tuples.iter().collect();
        let root = batch_loss_graph(&mut graph, &nodes, &batch, &config).unwrap();
        let graph_j = graph.value(root).scalar_value().unwrap();

        let outputs: Vec<MifcnOutput> = tuples
            .iter()
            .map(|t| {
                let inputs: Vec<Tensor> = t.pairs.iter().map(|p| p.noisy.clone()).collect();
                mifcn_forward(&inputs, &params, &config).unwrap()
            })
            .collect();
        let targets: Vec<Vec<Tensor>> = tuples
            .iter()
            .map(|t| t.pairs.iter().map(|p| p.high_snr.clone()).collect())
            .collect();
        let pure_j = loss(&outputs, &targets).unwrap();
        assert!(
            (graph_j - pure_j).abs() <= 1e-12 * pure_j.abs().max(1.0),
            "graph {graph_j} vs pure {pure_j}"
        );
    }

    fn scalar_params() -> (MifcnParams, ModelConfig) {
        let config = ModelConfig {
            branches: 1,
            feature_maps: 1,
            branch_layers: 1,
            head_layers: 0,
            branch_dilations: vec![1],
            fusion_h: 400.0,
            leak: 0.2,
        };
        let params = MifcnParams::identity_init_with_noise(&config, 0, 0.0).unwrap();
        (params, config)
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let (mut params, _) = scalar_params();
        let mut state = AdamState::new(&params);
        let hyper = Hyperparams::default();
        let before: Vec<f64> = params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let grads: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::filled(t.shape(), 0.37))
            .collect();
        adam_step(&mut params, &grads, &mut state, 0.01, &hyper).unwrap();
        let after: Vec<f64> = params.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        for (b, a) in before.iter().zip(&after) {
            let step = b - a;
            assert!((step - 0.01).abs() < 1e-6, "step {step} should be ~lr");
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let (mut params, _) = scalar_params();
        let reference = params.clone();
        let mut state = AdamState::new(&params);
        let hyper = Hyperparams::default();
        let grads: Vec<Tensor> =
            params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state, 0.1, &hyper).unwrap();
        }
        assert_eq!(params, reference);
    }

    #[test]
    fn adam_three_step_trace_matches_hand_recurrence() {
        // Scalar parameter, g = 1 every step, lr = 0.1. The hand-evaluated
        // recurrence gives theta_3 = -0.29999999699999935 (mhat = vhat = 1
        // at every step, so each update is lr/(1 + eps)).
        let (mut params, _) = scalar_params();
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut state = AdamState::new(&params);
        let hyper = Hyperparams::default();
        let grads: Vec<Tensor> =
            params.tensors().iter().map(|t| Tensor::filled(t.shape(), 1.0)).collect();
        for _ in 0..3 {
            adam_step(&mut params, &grads, &mut state, 0.1, &hyper).unwrap();
        }
        for t in params.tensors() {
            for &v in t.data() {
                assert!((v - (-0.29999999699999935)).abs() < 1e-12, "theta_3 = {v}");
            }
        }
    }

    #[test]
    fn augment_matches_index_permutation_oracle() {
        let base = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(hflip(&base).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(rot90ccw(&base).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
        // Involution and constant-patch fixpoints.
        assert_eq!(hflip(&hflip(&base).unwrap()).unwrap(), base);
        let constant = Tensor::filled(&[3, 3], 5.0);
        assert_eq!(hflip(&constant).unwrap(), constant);
        assert_eq!(rot90ccw(&constant).unwrap(), constant);
    }

    #[test]
    fn augment_triples_and_transforms_all_patches_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tuple = toy_tuple(&mut rng, 3, 4);
        let variants = augment(&tuple).unwrap();
        assert_eq!(variants[0], tuple);
        for (pair, orig) in variants[1].pairs.iter().zip(&tuple.pairs) {
            assert_eq!(pair.noisy, hflip(&orig.noisy).unwrap());
            assert_eq!(pair.high_snr, hflip(&orig.high_snr).unwrap());
        }
        for (pair, orig) in variants[2].pairs.iter().zip(&tuple.pairs) {
            assert_eq!(pair.noisy, rot90ccw(&orig.noisy).unwrap());
        }
        let dataset: Vec<PatchTuple> = (0..4).map(|_| toy_tuple(&mut rng, 2, 4)).collect();
        assert_eq!(augment_dataset(&dataset).unwrap().len(), 12);
    }

    #[test]
    fn rotation_of_non_square_patch_is_rejected() {
        let wide = Tensor::zeros(&[2, 3]);
        assert!(rot90ccw(&wide).is_err());
        let tuple = PatchTuple {
            pairs: vec![PatchPair {
                noisy: wide.clone(),
                high_snr: wide.clone(),
                location: (0, 0),
            }],
        };
        assert!(augment(&tuple).is_err());
    }

    fn small_train_config() -> (ModelConfig, Hyperparams) {
        let config = ModelConfig {
            branches: 2,
            feature_maps: 2,
            branch_layers: 1,
            head_layers: 0,
            branch_dilations: vec![1],
            fusion_h: 400.0,
            leak: 0.2,
        };
        let hyper = Hyperparams {
            epochs: 8,
            batch_size: 2,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            lr_switch_epoch: 5,
            ..Hyperparams::default()
        };
        (config, hyper)
    }

    #[test]
    fn training_is_deterministic_and_records_every_epoch() {
        let (config, hyper) = small_train_config();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tuples: Vec<PatchTuple> = (0..5).map(|_| toy_tuple(&mut rng, 2, 6)).collect();
        let dir = tempfile::tempdir().unwrap();
        let ck1 = dir.path().join("a.ckpt");
        let ck2 = dir.path().join("b.ckpt");

        let (params1, record1) = train(&tuples, &config, &hyper, 3, &ck1, |_| {}).unwrap();
        let (params2, record2) = train(&tuples, &config, &hyper, 3, &ck2, |_| {}).unwrap();

        assert_eq!(params1, params2);
        assert_eq!(std::fs::read(&ck1).unwrap(), std::fs::read(&ck2).unwrap());
        assert_eq!(record1.epochs.len(), hyper.epochs);
        for (i, rec) in record1.epochs.iter().enumerate() {
            assert_eq!(rec.epoch, i + 1);
            assert_eq!(rec.mean_loss, record2.epochs[i].mean_loss);
        }
        // The learning-rate switch shows up in the records.
        assert_eq!(record1.epochs[4].learning_rate, 1e-3);
        assert_eq!(record1.epochs[5].learning_rate, 1e-4);
    }

    #[test]
    fn diverging_run_aborts_with_numeric_error() {
        // Adam steps are bounded by the learning rate, so an lr this large
        // throws the two conv layers to ~1e160 each after one update and the
        // next forward pass overflows f64.
        let (config, mut hyper) = small_train_config();
        hyper.lr_phase1 = 1e160;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let tuples: Vec<PatchTuple> = (0..4).map(|_| toy_tuple(&mut rng, 2, 6)).collect();
        let dir = tempfile::tempdir().unwrap();
        let result = train(&tuples, &config, &hyper, 3, &dir.path().join("x.ckpt"), |_| {});
        match result {
            Err(Error::Numeric(msg)) => assert!(msg.contains("non-finite"), "{msg}"),
            other => panic!("expected numeric abort, got {other:?}"),
        }
    }

    #[test]
    fn training_rejects_branch_count_mismatch() {
        let (config, hyper) = small_train_config();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let tuples = vec![toy_tuple(&mut rng, 3, 6)];
        let dir = tempfile::tempdir().unwrap();
        assert!(train(&tuples, &config, &hyper, 0, &dir.path().join("x.ckpt"), |_| {}).is_err());
    }
}
