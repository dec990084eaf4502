//! Numerical verification machinery: the convolution oracle sweep and the
//! end-to-end gradient check.
//!
//! The gradient check builds a small random model, evaluates the full
//! training loss on one random sample, and compares every analytic
//! parameter gradient from the tape against central finite differences of
//! the pure (tape-free) forward pass. Instances are drawn away from leaky
//! ReLU kinks, where finite differences straddle the slope change and the
//! comparison would be meaningless; instances too close to a kink are
//! redrawn with a fresh seed.
//!
//! Two knobs keep the comparison sharp:
//!
//! * Inputs and targets are drawn from `[0.2, 1.0]` rather than image scale
//!   `[0, 255]`, so the loss sits near 1 and central differences keep ~10
//!   significant digits at step 1e-6.
//! * The fusion bandwidth is tiny (0.05), which makes the weights genuinely
//!   data-dependent: gradient paths through the squared-difference maps and
//!   the normalized weights carry real signal instead of vanishing, so an
//!   implementation that forgot to differentiate through the fusion would
//!   fail loudly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{PatchPair, PatchTuple};
use crate::error::{Error, Result};
use crate::model::{insert_params, mifcn_forward, MifcnParams, ModelConfig};
use crate::reference::conv2d_reference;
use crate::tensor::{conv2d_dilated, finite_difference_grad, ConvSpec, Graph, Tensor};
use crate::training::{batch_loss_graph, loss};

/// |a - n| relative to the larger magnitude, floored so that two near-zero
/// gradients compare as equal instead of dividing noise by noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Outcome of comparing the stenciled convolution against the literal
/// quadruple-loop evaluation on random configurations.
#[derive(Clone, Copy, Debug)]
pub struct ConvSweepReport {
    pub cases: usize,
    pub max_abs_diff: f64,
}

/// Run `cases` random convolutions (channels ≤ 4, images ≤ 16×16,
/// kernel 1 or 3, dilation 1–3) through both implementations and report the
/// largest elementwise difference.
pub fn conv_oracle_sweep(cases: usize, seed: u64) -> Result<ConvSweepReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_diff = 0.0f64;
    for _ in 0..cases {
        let cin = rng.gen_range(1..=4);
        let cout = rng.gen_range(1..=4);
        let h = rng.gen_range(1..=16);
        let w = rng.gen_range(1..=16);
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let d = rng.gen_range(1..=3);
        let spec = ConvSpec::new(k, d)?;
        let mut fill = |shape: &[usize]| {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            Tensor::from_vec(shape, data).unwrap()
        };
        let input = fill(&[cin, h, w]);
        let kernels = fill(&[cout, cin, k, k]);
        let bias = fill(&[cout]);
        let fast = conv2d_dilated(&input, &kernels, &bias, spec)?;
        let slow = conv2d_reference(&input, &kernels, &bias, spec)?;
        max_abs_diff = max_abs_diff.max(fast.max_abs_diff(&slow)?);
    }
    Ok(ConvSweepReport { cases, max_abs_diff })
}

/// Shape and sampling choices for one gradient-check run.
#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    /// Side length of the square inputs.
    pub image_size: usize,
    /// Standard deviation of the initialization noise on kernel taps.
    pub init_noise: f64,
    /// Central-difference step.
    pub fd_step: f64,
    /// Reject instances whose smallest |leaky ReLU input| is below this.
    pub min_kink_distance: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> GradCheckConfig {
        GradCheckConfig {
            model: ModelConfig {
                branches: 3,
                feature_maps: 4,
                branch_layers: 3,
                head_layers: 1,
                branch_dilations: vec![1, 2, 1],
                fusion_h: 0.05,
                leak: 0.2,
            },
            image_size: 8,
            init_noise: 0.05,
            fd_step: 1e-6,
            min_kink_distance: 1e-3,
            tolerance: 1e-5,
        }
    }
}

/// Result of one model instance.
#[derive(Clone, Debug)]
pub struct InstanceReport {
    pub seed: u64,
    /// Number of instances discarded for sitting too close to a kink.
    pub redraws: usize,
    pub max_rel_err: f64,
    /// Parameter tensor holding the worst element.
    pub worst_tensor: String,
    /// Worst relative error per parameter tensor, in model naming order.
    pub tensor_errors: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub instances: Vec<InstanceReport>,
    pub fd_step: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.instances.iter().map(|i| i.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    /// Worst relative error per parameter tensor across all instances, in
    /// model naming order.
    pub fn group_errors(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for inst in &self.instances {
            for (name, err) in &inst.tensor_errors {
                match out.iter_mut().find(|(n, _)| n == name) {
                    Some((_, worst)) => *worst = worst.max(*err),
                    None => out.push((name.clone(), *err)),
                }
            }
        }
        out
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for inst in &self.instances {
            writeln!(
                f,
                "instance seed {:>4}: max relative error {:.3e} ({}){}",
                inst.seed,
                inst.max_rel_err,
                inst.worst_tensor,
                if inst.redraws > 0 { format!(" [redrawn {}x]", inst.redraws) } else { String::new() },
            )?;
        }
        writeln!(
            f,
            "{} instances, fd step {:.1e}: max relative error {:.3e} (tolerance {:.1e}) -> {}",
            self.instances.len(),
            self.fd_step,
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" },
        )
    }
}

fn random_patch(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let data = (0..size * size).map(|_| rng.gen_range(0.2..1.0)).collect();
    Tensor::from_vec(&[size, size], data).unwrap()
}

/// Check one instance. Returns the per-tensor worst relative error.
fn check_instance(config: &GradCheckConfig, seed: u64) -> Result<InstanceReport> {
    const MAX_REDRAWS: usize = 32;
    let mut redraws = 0;
    loop {
        let draw_seed = seed.wrapping_add(redraws as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
        let params =
            MifcnParams::identity_init_with_noise(&config.model, rng.gen(), config.init_noise)?;
        let tuple = PatchTuple {
            pairs: (0..config.model.branches)
                .map(|t| PatchPair {
                    noisy: random_patch(&mut rng, config.image_size),
                    high_snr: random_patch(&mut rng, config.image_size),
                    location: (t, 0),
                })
                .collect(),
        };

        let mut graph = Graph::new();
        let nodes = insert_params(&mut graph, &params);
        let root = batch_loss_graph(&mut graph, &nodes, &[&tuple], &config.model)?;
        if let Some(closest) = graph.min_abs_lrelu_input() {
            if closest < config.min_kink_distance {
                redraws += 1;
                if redraws > MAX_REDRAWS {
                    return Err(Error::Numeric(format!(
                        "could not draw an instance {MAX_REDRAWS} tries away from activation kinks"
                    )));
                }
                continue;
            }
        }
        graph.backward(root)?;

        let inputs: Vec<Tensor> = tuple.pairs.iter().map(|p| p.noisy.clone()).collect();
        let targets: Vec<Tensor> = tuple.pairs.iter().map(|p| p.high_snr.clone()).collect();
        let pure_loss = |p: &MifcnParams| -> f64 {
            let out = mifcn_forward(&inputs, p, &config.model)
                .expect("forward with perturbed parameters");
            loss(&[out], std::slice::from_ref(&targets)).expect("loss evaluation")
        };

        let ids = nodes.tensor_ids();
        let mut max_rel_err = 0.0f64;
        let mut worst_tensor = String::new();
        let mut tensor_errors = Vec::new();
        for (idx, (name, tensor)) in params.named_tensors().into_iter().enumerate() {
            let analytic = graph
                .grad(ids[idx])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
            let numeric = finite_difference_grad(
                |t| {
                    let mut perturbed = params.clone();
                    perturbed.tensors_mut()[idx].data_mut().copy_from_slice(t.data());
                    pure_loss(&perturbed)
                },
                tensor,
                config.fd_step,
            );
            let mut tensor_err = 0.0f64;
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                tensor_err = tensor_err.max(relative_error(*a, *n));
            }
            if tensor_err > max_rel_err {
                max_rel_err = tensor_err;
                worst_tensor = name.clone();
            }
            tensor_errors.push((name, tensor_err));
        }
        return Ok(InstanceReport { seed, redraws, max_rel_err, worst_tensor, tensor_errors });
    }
}

/// Gradient-check `count` random instances with the default configuration.
pub fn run(count: usize, seed: u64) -> Result<GradCheckReport> {
    run_with(&GradCheckConfig::default(), count, seed)
}

pub fn run_with(config: &GradCheckConfig, count: usize, seed: u64) -> Result<GradCheckReport> {
    if count == 0 {
        return Err(Error::Domain("gradient check needs at least one instance".into()));
    }
    config.model.validate()?;
    let instances = (0..count)
        .map(|i| check_instance(config, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { instances, fd_step: config.fd_step, tolerance: config.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_near_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-9, -1e-9) < 1e-4);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn conv_sweep_agrees_with_oracle() {
        let report = conv_oracle_sweep(40, 123).unwrap();
        assert_eq!(report.cases, 40);
        assert!(report.max_abs_diff <= 1e-12, "max diff {}", report.max_abs_diff);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let report = run(3, 17).unwrap();
        assert!(report.passed(), "{report}");
        for inst in &report.instances {
            assert!(inst.max_rel_err < 1e-5, "instance {}: {}", inst.seed, inst.max_rel_err);
        }
    }

    #[test]
    fn a_broken_gradient_would_be_caught() {
        // Sanity-check the checker itself: a finite-difference gradient of a
        // *different* loss (scaled by 1.001) must violate the tolerance.
        let config = GradCheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let params = MifcnParams::identity_init_with_noise(&config.model, rng.gen(), 0.05).unwrap();
        let inputs: Vec<Tensor> =
            (0..config.model.branches).map(|_| random_patch(&mut rng, 8)).collect();
        let targets: Vec<Tensor> =
            (0..config.model.branches).map(|_| random_patch(&mut rng, 8)).collect();

        let eval = |p: &MifcnParams, scale: f64| -> f64 {
            let out = mifcn_forward(&inputs, p, &config.model).unwrap();
            scale * loss(&[out], std::slice::from_ref(&targets)).unwrap()
        };
        let tensor = params.tensors()[0].clone();
        let honest = finite_difference_grad(
            |t| {
                let mut p = params.clone();
                p.tensors_mut()[0].data_mut().copy_from_slice(t.data());
                eval(&p, 1.0)
            },
            &tensor,
            1e-6,
        );
        let skewed = finite_difference_grad(
            |t| {
                let mut p = params.clone();
                p.tensors_mut()[0].data_mut().copy_from_slice(t.data());
                eval(&p, 1.001)
            },
            &tensor,
            1e-6,
        );
        let mut worst = 0.0f64;
        for (a, n) in honest.data().iter().zip(skewed.data()) {
            worst = worst.max(relative_error(*a, *n));
        }
        assert!(worst > 1e-5, "a 0.1% skew must exceed the tolerance, got {worst}");
    }

    #[test]
    fn run_rejects_zero_instances() {
        assert!(run(0, 1).is_err());
    }
}
