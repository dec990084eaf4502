//! The multi-input network: per-input branch FCNs, similarity-weighted pixel
//! fusion, and a shallow refinement head.
//!
//! Every branch maps its own noisy view of the scene to an estimate of the
//! clean image through a stack of dilated 3x3 convolutions with leaky
//! rectifiers and a final linear 1x1 layer. The estimates are then blended
//! per pixel: branch t gets weight `exp(-(x1 - xt)^2 / h)` normalized over
//! branches, so estimates that disagree with the first (anchor) branch are
//! suppressed. The head applies the same conv/rectifier pattern to the
//! blend and produces the final reconstruction.
//!
//! Two forward paths exist: a pure one on plain tensors for inference, and
//! one recorded on a [`Graph`] for training. They apply identical operations
//! in identical order, so their outputs agree bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{conv2d_dilated, ConvSpec, Graph, NodeId, Tensor};

/// Architecture and fusion hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of input images and branch networks (T).
    pub branches: usize,
    /// Feature maps per hidden convolution (C).
    pub feature_maps: usize,
    /// Hidden layers per branch (A).
    pub branch_layers: usize,
    /// Hidden layers in the refinement head (B).
    pub head_layers: usize,
    /// Dilation of each hidden branch layer; length must equal `branch_layers`.
    pub branch_dilations: Vec<usize>,
    /// Decay constant of the fusion similarity kernel (h).
    pub fusion_h: f64,
    /// Negative-side slope of the leaky rectifier.
    pub leak: f64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            branches: 5,
            feature_maps: 24,
            branch_layers: 3,
            head_layers: 1,
            branch_dilations: vec![1, 2, 1],
            fusion_h: 400.0,
            leak: 0.2,
        }
    }
}

impl ModelConfig {
    /// Dilation schedule used when none is given: the reference three-layer
    /// stack widens its middle layer, any other depth stays undilated.
    pub fn default_dilations(branch_layers: usize) -> Vec<usize> {
        if branch_layers == 3 {
            vec![1, 2, 1]
        } else {
            vec![1; branch_layers]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 {
            return Err(Error::Domain("model needs at least one branch".into()));
        }
        if self.feature_maps == 0 {
            return Err(Error::Domain("feature_maps must be positive".into()));
        }
        if self.branch_layers == 0 {
            return Err(Error::Domain("branches need at least one hidden layer".into()));
        }
        if self.branch_dilations.len() != self.branch_layers {
            return Err(Error::Domain(format!(
                "got {} dilations for {} branch layers",
                self.branch_dilations.len(),
                self.branch_layers
            )));
        }
        if self.branch_dilations.iter().any(|&d| d == 0) {
            return Err(Error::Domain("dilations must be at least 1".into()));
        }
        if !(self.fusion_h > 0.0 && self.fusion_h.is_finite()) {
            return Err(Error::Domain(format!("fusion_h must be positive, got {}", self.fusion_h)));
        }
        if !(0.0..1.0).contains(&self.leak) {
            return Err(Error::Domain(format!("leak must be in [0, 1), got {}", self.leak)));
        }
        Ok(())
    }
}

/// One convolution layer: kernels `[Cout, Cin, k, k]`, bias `[Cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub spec: ConvSpec,
}

/// Parameters of one branch: hidden 3x3 stack plus linear 1x1 output.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub hidden: Vec<ConvLayer>,
    pub output: ConvLayer,
}

/// All trainable parameters. Branches share no weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MifcnParams {
    pub branches: Vec<BranchParams>,
    pub head_hidden: Vec<ConvLayer>,
    pub head_output: ConvLayer,
}

/// Noise scale used by [`MifcnParams::identity_init`].
pub const INIT_NOISE_SD: f64 = 1e-4;

fn identity_layer(
    cout: usize,
    cin: usize,
    k: usize,
    dilation: usize,
    rng: &mut ChaCha8Rng,
    noise_sd: f64,
) -> Result<ConvLayer> {
    let spec = ConvSpec::new(k, dilation)?;
    let mut kernels = Tensor::zeros(&[cout, cin, k, k]);
    let center = (k - 1) / 2;
    for o in 0..cout {
        // Each output map copies one input map so the stack starts as the
        // identity; cycling through inputs covers the cin < cout case.
        let ci = o % cin;
        let idx = ((o * cin + ci) * k + center) * k + center;
        kernels.data_mut()[idx] = 1.0;
    }
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd)
            .map_err(|e| Error::Domain(format!("bad init noise sd {noise_sd}: {e}")))?;
        for v in kernels.data_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(ConvLayer { kernels, bias: Tensor::zeros(&[cout]), spec })
}

impl MifcnParams {
    /// Near-identity start: every kernel copies its input through the center
    /// tap, perturbed by Gaussian noise of scale [`INIT_NOISE_SD`]; biases
    /// are zero. Same seed, same parameters, bit for bit.
    pub fn identity_init(config: &ModelConfig, seed: u64) -> Result<MifcnParams> {
        MifcnParams::identity_init_with_noise(config, seed, INIT_NOISE_SD)
    }

    /// As [`identity_init`](Self::identity_init) with an explicit noise
    /// scale; zero gives the exact identity network.
    pub fn identity_init_with_noise(config: &ModelConfig, seed: u64, noise_sd: f64) -> Result<MifcnParams> {
        config.validate()?;
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(Error::Domain(format!("noise sd must be nonnegative, got {noise_sd}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.feature_maps;
        let mut branches = Vec::with_capacity(config.branches);
        for _ in 0..config.branches {
            let mut hidden = Vec::with_capacity(config.branch_layers);
            for (l, &d) in config.branch_dilations.iter().enumerate() {
                let cin = if l == 0 { 1 } else { c };
                hidden.push(identity_layer(c, cin, 3, d, &mut rng, noise_sd)?);
            }
            let output = identity_layer(1, c, 1, 1, &mut rng, noise_sd)?;
            branches.push(BranchParams { hidden, output });
        }
        let mut head_hidden = Vec::with_capacity(config.head_layers);
        for l in 0..config.head_layers {
            let cin = if l == 0 { 1 } else { c };
            head_hidden.push(identity_layer(c, cin, 3, 1, &mut rng, noise_sd)?);
        }
        let head_cin = if config.head_layers == 0 { 1 } else { c };
        let head_output = identity_layer(1, head_cin, 1, 1, &mut rng, noise_sd)?;
        Ok(MifcnParams { branches, head_hidden, head_output })
    }

    /// Check that this parameter set fits `config` exactly.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let c = config.feature_maps;
        if self.branches.len() != config.branches {
            return Err(Error::Shape(format!(
                "parameters hold {} branches, config says {}",
                self.branches.len(),
                config.branches
            )));
        }
        let check_layer = |layer: &ConvLayer, cout: usize, cin: usize, k: usize, d: usize, what: &str| {
            if layer.kernels.shape() != [cout, cin, k, k]
                || layer.bias.shape() != [cout]
                || layer.spec.kernel_size() != k
                || layer.spec.dilation() != d
            {
                return Err(Error::Shape(format!("{what} does not match the configuration")));
            }
            Ok(())
        };
        for (t, branch) in self.branches.iter().enumerate() {
            if branch.hidden.len() != config.branch_layers {
                return Err(Error::Shape(format!(
                    "branch {t} has {} hidden layers, config says {}",
                    branch.hidden.len(),
                    config.branch_layers
                )));
            }
            for (l, layer) in branch.hidden.iter().enumerate() {
                let cin = if l == 0 { 1 } else { c };
                check_layer(layer, c, cin, 3, config.branch_dilations[l], &format!("branch {t} hidden {l}"))?;
            }
            check_layer(&branch.output, 1, c, 1, 1, &format!("branch {t} output"))?;
        }
        if self.head_hidden.len() != config.head_layers {
            return Err(Error::Shape(format!(
                "head has {} hidden layers, config says {}",
                self.head_hidden.len(),
                config.head_layers
            )));
        }
        for (l, layer) in self.head_hidden.iter().enumerate() {
            let cin = if l == 0 { 1 } else { c };
            check_layer(layer, c, cin, 3, 1, &format!("head hidden {l}"))?;
        }
        let head_cin = if config.head_layers == 0 { 1 } else { c };
        check_layer(&self.head_output, 1, head_cin, 1, 1, "head output")?;
        Ok(())
    }

    /// Stable `(name, tensor)` enumeration; kernels before bias per layer,
    /// branches before head. Checkpoints and the optimizer rely on this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (t, branch) in self.branches.iter().enumerate() {
            for (l, layer) in branch.hidden.iter().enumerate() {
                out.push((format!("branch{t}.hidden{l}.kernels"), &layer.kernels));
                out.push((format!("branch{t}.hidden{l}.bias"), &layer.bias));
            }
            out.push((format!("branch{t}.output.kernels"), &branch.output.kernels));
            out.push((format!("branch{t}.output.bias"), &branch.output.bias));
        }
        for (l, layer) in self.head_hidden.iter().enumerate() {
            out.push((format!("head.hidden{l}.kernels"), &layer.kernels));
            out.push((format!("head.hidden{l}.bias"), &layer.bias));
        }
        out.push(("head.output.kernels".to_string(), &self.head_output.kernels));
        out.push(("head.output.bias".to_string(), &self.head_output.bias));
        out
    }

    /// Tensors in [`named_tensors`](Self::named_tensors) order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for branch in &mut self.branches {
            for layer in &mut branch.hidden {
                out.push(&mut layer.kernels);
                out.push(&mut layer.bias);
            }
            out.push(&mut branch.output.kernels);
            out.push(&mut branch.output.bias);
        }
        for layer in &mut self.head_hidden {
            out.push(&mut layer.kernels);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.head_output.kernels);
        out.push(&mut self.head_output.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Everything the forward pass produces, kept for loss terms and inspection.
#[derive(Clone, Debug)]
pub struct MifcnOutput {
    /// Per-branch clean-image estimates, one `[H, W]` tensor per input.
    pub branch_outputs: Vec<Tensor>,
    /// Normalized fusion weights, same shapes; each pixel sums to 1 over branches.
    pub weights: Vec<Tensor>,
    /// Pixelwise blend of the branch estimates.
    pub fused: Tensor,
    /// Final output of the refinement head.
    pub reconstruction: Tensor,
}

fn check_image(input: &Tensor) -> Result<(usize, usize)> {
    let shape = input.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::Shape(format!(
            "expected nonempty [height, width] image, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// One branch applied to one `[H, W]` image, result `[H, W]`.
pub fn branch_forward(input: &Tensor, params: &BranchParams, leak: f64) -> Result<Tensor> {
    let (h, w) = check_image(input)?;
    let mut x = input.reshape(&[1, h, w])?;
    for layer in &params.hidden {
        x = conv2d_dilated(&x, &layer.kernels, &layer.bias, layer.spec)?.lrelu(leak);
    }
    let out = conv2d_dilated(&x, &params.output.kernels, &params.output.bias, params.output.spec)?;
    out.reshape(&[h, w])
}

/// Normalized per-pixel blending weights given the branch estimates.
///
/// Branch 1 is the anchor: `W_t = exp(-(X1 - Xt)^2 / h)`, so `W_1 = 1`
/// everywhere and the normalizer is at least 1, which rules out division by
/// zero for finite inputs.
pub fn fusion_weights(branch_outputs: &[Tensor], h: f64) -> Result<Vec<Tensor>> {
    if branch_outputs.is_empty() {
        return Err(Error::Shape("fusion needs at least one branch output".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("fusion h must be positive, got {h}")));
    }
    let anchor = &branch_outputs[0];
    let mut unnormalized = Vec::with_capacity(branch_outputs.len());
    for xt in branch_outputs {
        let d = anchor.sub(xt)?.square();
        unnormalized.push(d.scale(-1.0 / h).exp());
    }
    let mut total = unnormalized[0].clone();
    for w in &unnormalized[1..] {
        total = total.add(w)?;
    }
    unnormalized.iter().map(|w| w.div(&total)).collect()
}

/// Pixelwise blend of the branch estimates with the given weights.
///
/// Evaluated in anchored form `X1 + sum_{t>=2} P_t * (Xt - X1)`, which is
/// algebraically the weighted sum (the weights of one pixel add to 1) but
/// returns the anchor exactly when all estimates coincide.
pub fn weighted_average(branch_outputs: &[Tensor], weights: &[Tensor]) -> Result<Tensor> {
    if branch_outputs.is_empty() || branch_outputs.len() != weights.len() {
        return Err(Error::Shape(format!(
            "weighted_average got {} outputs and {} weight maps",
            branch_outputs.len(),
            weights.len()
        )));
    }
    let anchor = &branch_outputs[0];
    let mut acc = anchor.clone();
    for (xt, pt) in branch_outputs.iter().zip(weights).skip(1) {
        let correction = pt.hadamard(&xt.sub(anchor)?)?;
        acc = acc.add(&correction)?;
    }
    Ok(acc)
}

/// Refinement head applied to the fused image.
pub fn head_forward(fused: &Tensor, head_hidden: &[ConvLayer], head_output: &ConvLayer, leak: f64) -> Result<Tensor> {
    let (h, w) = check_image(fused)?;
    let mut x = fused.reshape(&[1, h, w])?;
    for layer in head_hidden {
        x = conv2d_dilated(&x, &layer.kernels, &layer.bias, layer.spec)?.lrelu(leak);
    }
    let out = conv2d_dilated(&x, &head_output.kernels, &head_output.bias, head_output.spec)?;
    out.reshape(&[h, w])
}

fn check_inputs(inputs: &[Tensor], branches: usize) -> Result<()> {
    if inputs.len() != branches {
        return Err(Error::Shape(format!(
            "model has {branches} branches but got {} input images",
            inputs.len()
        )));
    }
    let first = check_image(&inputs[0])?;
    for (i, input) in inputs.iter().enumerate().skip(1) {
        if check_image(input)? != first {
            return Err(Error::Shape(format!(
                "input {i} has shape {:?}, expected {:?}",
                input.shape(),
                inputs[0].shape()
            )));
        }
    }
    Ok(())
}

/// Full forward pass on plain tensors. `inputs[0]` is the anchor view that
/// fusion weights are measured against.
pub fn mifcn_forward(inputs: &[Tensor], params: &MifcnParams, config: &ModelConfig) -> Result<MifcnOutput> {
    params.validate(config)?;
    check_inputs(inputs, config.branches)?;
    let branch_outputs = inputs
        .iter()
        .zip(&params.branches)
        .map(|(x, b)| branch_forward(x, b, config.leak))
        .collect::<Result<Vec<_>>>()?;
    let weights = fusion_weights(&branch_outputs, config.fusion_h)?;
    let fused = weighted_average(&branch_outputs, &weights)?;
    let reconstruction = head_forward(&fused, &params.head_hidden, &params.head_output, config.leak)?;
    Ok(MifcnOutput { branch_outputs, weights, fused, reconstruction })
}

/// Tape locations of one convolution layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub kernels: NodeId,
    pub bias: NodeId,
    pub spec: ConvSpec,
}

#[derive(Clone, Debug)]
pub struct BranchNodes {
    pub hidden: Vec<LayerNodes>,
    pub output: LayerNodes,
}

/// All parameter leaves of one model instance on a tape.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub branches: Vec<BranchNodes>,
    pub head_hidden: Vec<LayerNodes>,
    pub head_output: LayerNodes,
}

impl ParamNodes {
    /// Node ids in [`MifcnParams::named_tensors`] order.
    pub fn tensor_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for branch in &self.branches {
            for layer in &branch.hidden {
                out.push(layer.kernels);
                out.push(layer.bias);
            }
            out.push(branch.output.kernels);
            out.push(branch.output.bias);
        }
        for layer in &self.head_hidden {
            out.push(layer.kernels);
            out.push(layer.bias);
        }
        out.push(self.head_output.kernels);
        out.push(self.head_output.bias);
        out
    }
}

fn insert_layer(graph: &mut Graph, layer: &ConvLayer) -> LayerNodes {
    LayerNodes {
        kernels: graph.leaf(layer.kernels.clone()),
        bias: graph.leaf(layer.bias.clone()),
        spec: layer.spec,
    }
}

/// Copy all parameters onto a tape as leaves.
pub fn insert_params(graph: &mut Graph, params: &MifcnParams) -> ParamNodes {
    let branches = params
        .branches
        .iter()
        .map(|b| BranchNodes {
            hidden: b.hidden.iter().map(|l| insert_layer(graph, l)).collect(),
            output: insert_layer(graph, &b.output),
        })
        .collect();
    let head_hidden = params.head_hidden.iter().map(|l| insert_layer(graph, l)).collect();
    let head_output = insert_layer(graph, &params.head_output);
    ParamNodes { branches, head_hidden, head_output }
}

/// Node ids of everything the recorded forward pass produces.
#[derive(Clone, Debug)]
pub struct GraphOutput {
    pub branch_outputs: Vec<NodeId>,
    pub weights: Vec<NodeId>,
    pub fused: NodeId,
    pub reconstruction: NodeId,
}

fn branch_forward_graph(graph: &mut Graph, input: NodeId, branch: &BranchNodes, leak: f64) -> Result<NodeId> {
    let (h, w) = check_image(graph.value(input))?;
    let mut x = graph.reshape(input, &[1, h, w])?;
    for layer in &branch.hidden {
        let conv = graph.conv2d(x, layer.kernels, layer.bias, layer.spec)?;
        x = graph.lrelu(conv, leak);
    }
    let out = graph.conv2d(x, branch.output.kernels, branch.output.bias, branch.output.spec)?;
    graph.reshape(out, &[h, w])
}

/// Forward pass recorded on a tape; `inputs` are `[H, W]` leaf nodes.
///
/// Mirrors [`mifcn_forward`] operation for operation.
pub fn mifcn_forward_graph(
    graph: &mut Graph,
    inputs: &[NodeId],
    nodes: &ParamNodes,
    config: &ModelConfig,
) -> Result<GraphOutput> {
    config.validate()?;
    if inputs.len() != nodes.branches.len() || inputs.len() != config.branches {
        return Err(Error::Shape(format!(
            "graph forward got {} inputs for {} branches",
            inputs.len(),
            config.branches
        )));
    }
    let mut branch_outputs = Vec::with_capacity(inputs.len());
    for (&input, branch) in inputs.iter().zip(&nodes.branches) {
        branch_outputs.push(branch_forward_graph(graph, input, branch, config.leak)?);
    }

    let anchor = branch_outputs[0];
    let mut unnormalized = Vec::with_capacity(branch_outputs.len());
    for &xt in &branch_outputs {
        let d = graph.sub(anchor, xt)?;
        let sq = graph.square(d);
        let scaled = graph.scale(sq, -1.0 / config.fusion_h);
        unnormalized.push(graph.exp(scaled));
    }
    let mut total = unnormalized[0];
    for &w in &unnormalized[1..] {
        total = graph.add(total, w)?;
    }
    let weights = unnormalized
        .iter()
        .map(|&w| graph.div(w, total))
        .collect::<Result<Vec<_>>>()?;

    let mut fused = anchor;
    for (&xt, &pt) in branch_outputs.iter().zip(&weights).skip(1) {
        let diff = graph.sub(xt, anchor)?;
        let corr = graph.mul(pt, diff)?;
        fused = graph.add(fused, corr)?;
    }

    let (h, w) = check_image(graph.value(fused))?;
    let mut x = graph.reshape(fused, &[1, h, w])?;
    for layer in &nodes.head_hidden {
        let conv = graph.conv2d(x, layer.kernels, layer.bias, layer.spec)?;
        x = graph.lrelu(conv, config.leak);
    }
    let out = graph.conv2d(x, nodes.head_output.kernels, nodes.head_output.bias, nodes.head_output.spec)?;
    let reconstruction = graph.reshape(out, &[h, w])?;

    Ok(GraphOutput { branch_outputs, weights, fused, reconstruction })
}
