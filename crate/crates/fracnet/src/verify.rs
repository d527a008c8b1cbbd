//! The gradient-check suite: every layer the classifier uses, the attention
//! gates, and the full model, validated against central finite differences
//! in f64.
//!
//! Layer checks must stay below 1e-4 relative error; the end-to-end model
//! below 1e-3. The same suite backs the command-line `gradcheck` entry point
//! and the acceptance tests.

use crate::bam;
use crate::gradcheck::grad_check_params;
use crate::graph::{ConvSpec, Graph, Mode, NodeId};
use crate::model::{
    attach_head, build_backbone_with_input, init_params, insert_attention, pooled_features,
    HeadConfig,
};
use crate::params::Params;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Tensor, TensorError};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;
const SAMPLES_PER_PARAM: usize = 20;

#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.next_symmetric(scale)).collect();
    Tensor::from_vec(shape, data).expect("random tensor shape")
}

/// Projects a node against fixed pseudo-random weights and sums, so errors
/// cannot cancel across output coordinates.
fn projected_loss(g: &mut Graph<f64>, node: NodeId, seed: u64) -> Result<NodeId, TensorError> {
    let shape = g.value(node).shape().to_vec();
    let w = g.constant(random_tensor(&shape, seed, 1.0));
    let prod = g.mul(node, w)?;
    Ok(g.sum(prod))
}

/// Registers the layer input as a trainable entry so one call checks input
/// and weight gradients together.
fn check<F>(
    name: &'static str,
    tolerance: f64,
    params: &mut Params<f64>,
    samples: usize,
    seed: u64,
    build: F,
) -> Result<LayerCheck, TensorError>
where
    F: Fn(&mut Graph<f64>, &mut Params<f64>) -> Result<NodeId, TensorError>,
{
    let max_rel_err = grad_check_params(build, params, STEP, samples, seed)?;
    Ok(LayerCheck {
        name,
        max_rel_err,
        tolerance,
    })
}

fn conv_check(
    name: &'static str,
    spec: ConvSpec,
    input_shape: &[usize],
    kernel_shape: &[usize],
    seed: u64,
) -> Result<LayerCheck, TensorError> {
    let mut params = Params::new();
    let input = params.add("input", random_tensor(input_shape, seed, 1.0), true)?;
    let kernel = params.add("kernel", random_tensor(kernel_shape, seed + 1, 0.5), true)?;
    let bias = params.add(
        "bias",
        random_tensor(&[kernel_shape[0]], seed + 2, 0.5),
        true,
    )?;
    check(
        name,
        LAYER_TOLERANCE,
        &mut params,
        48,
        seed + 3,
        move |g, p| {
            let x = g.param(p, input);
            let k = g.param(p, kernel);
            let b = g.param(p, bias);
            let y = g.conv2d(x, k, Some(b), spec)?;
            projected_loss(g, y, seed + 4)
        },
    )
}

fn batch_norm_check(seed: u64) -> Result<LayerCheck, TensorError> {
    let mut params = Params::new();
    let input = params.add("input", random_tensor(&[3, 4, 5, 5], seed, 2.0), true)?;
    let gamma = params.add("gamma", random_tensor(&[4], seed + 1, 1.0), true)?;
    let beta = params.add("beta", random_tensor(&[4], seed + 2, 1.0), true)?;
    check(
        "batch_norm",
        LAYER_TOLERANCE,
        &mut params,
        48,
        seed + 3,
        move |g, p| {
            let x = g.param(p, input);
            let gm = g.param(p, gamma);
            let bt = g.param(p, beta);
            let (y, _) = g.batch_norm(x, gm, bt, &[0.0; 4], &[1.0; 4], Mode::Train, 0.1, 1e-5)?;
            projected_loss(g, y, seed + 4)
        },
    )
}

fn pool_checks(seed: u64) -> Result<Vec<LayerCheck>, TensorError> {
    let mut out = Vec::new();
    {
        let mut params = Params::new();
        let input = params.add("input", random_tensor(&[2, 2, 6, 6], seed, 1.0), true)?;
        out.push(check(
            "max_pool",
            LAYER_TOLERANCE,
            &mut params,
            72,
            seed + 1,
            move |g, p| {
                let x = g.param(p, input);
                let y = g.max_pool(x, 2, 2, 0)?;
                projected_loss(g, y, seed + 2)
            },
        )?);
    }
    {
        let mut params = Params::new();
        let input = params.add("input", random_tensor(&[2, 3, 5, 5], seed + 3, 1.0), true)?;
        out.push(check(
            "global_avg_pool",
            LAYER_TOLERANCE,
            &mut params,
            72,
            seed + 4,
            move |g, p| {
                let x = g.param(p, input);
                let y = g.global_avg_pool(x)?;
                projected_loss(g, y, seed + 5)
            },
        )?);
    }
    Ok(out)
}

fn dense_check(seed: u64) -> Result<LayerCheck, TensorError> {
    let mut params = Params::new();
    let input = params.add("input", random_tensor(&[3, 6], seed, 1.0), true)?;
    let weight = params.add("weight", random_tensor(&[6, 4], seed + 1, 0.7), true)?;
    let bias = params.add("bias", random_tensor(&[4], seed + 2, 0.7), true)?;
    check(
        "dense",
        LAYER_TOLERANCE,
        &mut params,
        48,
        seed + 3,
        move |g, p| {
            let x = g.param(p, input);
            let w = g.param(p, weight);
            let b = g.param(p, bias);
            let y = g.dense(x, w, b)?;
            projected_loss(g, y, seed + 4)
        },
    )
}

fn sigmoid_check(seed: u64) -> Result<LayerCheck, TensorError> {
    let mut params = Params::new();
    let input = params.add("input", random_tensor(&[4, 7], seed, 3.0), true)?;
    check(
        "sigmoid",
        LAYER_TOLERANCE,
        &mut params,
        48,
        seed + 1,
        move |g, p| {
            let x = g.param(p, input);
            let y = g.sigmoid(x);
            projected_loss(g, y, seed + 2)
        },
    )
}

fn cross_entropy_check(seed: u64) -> Result<LayerCheck, TensorError> {
    let mut params = Params::new();
    let input = params.add("logits", random_tensor(&[4, 3], seed, 2.0), true)?;
    let mut targets = vec![0.0; 12];
    for (r, c) in [(0usize, 1usize), (1, 0), (2, 2), (3, 1)] {
        targets[r * 3 + c] = 1.0;
    }
    let targets = Tensor::from_vec(&[4, 3], targets).expect("targets");
    check(
        "softmax_cross_entropy",
        LAYER_TOLERANCE,
        &mut params,
        48,
        seed + 1,
        move |g, p| {
            let x = g.param(p, input);
            g.softmax_cross_entropy(x, &targets)
        },
    )
}

/// Fresh attention parameters with the branch gains switched on so every
/// gate weight carries gradient.
fn active_bam(
    channels: usize,
    reduction: usize,
    dilation: usize,
    seed: u64,
) -> Result<(Params<f64>, bam::BamParams), TensorError> {
    let mut params = Params::new();
    let mut rng = SplitMix64::new(seed);
    let ids =
        bam::register_bam_params(&mut params, "bam", channels, reduction, dilation, &mut rng)?;
    for name in ["bam.channel.bn.gamma", "bam.spatial.bn.gamma"] {
        let id = params.id(name)?;
        let n = params.get(id).numel();
        params.set_data(id, &vec![0.8; n])?;
    }
    Ok((params, ids))
}

fn gate_checks(seed: u64) -> Result<Vec<LayerCheck>, TensorError> {
    let mut out = Vec::new();
    let feature = random_tensor(&[4, 8, 6, 6], seed, 1.0);

    for (name, which) in [
        ("channel_gate", 0usize),
        ("spatial_gate", 1),
        ("bam_refine", 2),
    ] {
        let (mut params, ids) = active_bam(8, 4, 2, seed + which as u64)?;
        let input = params.add("input", feature.clone(), true)?;
        let ids_for_build = ids.clone();
        out.push(check(
            name,
            LAYER_TOLERANCE,
            &mut params,
            SAMPLES_PER_PARAM,
            seed + 10 + which as u64,
            move |g, p| {
                let x = g.param(p, input);
                let y = match which {
                    0 => bam::channel_gate(g, p, &ids_for_build, x, Mode::Train)?,
                    1 => bam::spatial_gate(g, p, &ids_for_build, x, Mode::Train)?,
                    _ => bam::bam_refine(g, p, &ids_for_build, x, Mode::Train)?,
                };
                projected_loss(g, y, seed + 20 + which as u64)
            },
        )?);
    }
    Ok(out)
}

fn full_model_check(seed: u64) -> Result<LayerCheck, TensorError> {
    let backbone =
        build_backbone_with_input(8, 3, 16, 16).expect("width-8 backbone at 16x16 input");
    let with_bam = insert_attention(&backbone, 4, 4).expect("attention insertion");
    let head = HeadConfig::default_for(pooled_features(&with_bam).expect("pooled features"), 2);
    let spec = attach_head(&with_bam, &head).expect("head attachment");
    let mut params: Params<f64> = init_params(&spec, seed).expect("init");
    // Switch the attention gains on so gate weights carry gradient.
    for site in 1..=3 {
        for branch in ["channel", "spatial"] {
            let id = params.id(&format!("bam{site}.{branch}.bn.gamma"))?;
            let n = params.get(id).numel();
            params.set_data(id, &vec![0.7; n])?;
        }
    }

    let batch = random_tensor(&[2, 3, 16, 16], derive_seed(seed, &[1]), 1.0);
    let mut targets = vec![0.0; 4];
    targets[1] = 1.0;
    targets[2] = 1.0;
    let targets = Tensor::from_vec(&[2, 2], targets).expect("targets");

    let max_rel_err = grad_check_params(
        move |g, p| {
            let logits = crate::model::forward(&spec, p, g, &batch, Mode::Train, 7).map_err(
                |e| match e {
                    crate::model::ModelError::Tensor(t) => t,
                    other => TensorError::InvalidShape {
                        shape: vec![],
                        reason: other.to_string(),
                    },
                },
            )?;
            g.softmax_cross_entropy(logits, &targets)
        },
        &mut params,
        STEP,
        SAMPLES_PER_PARAM,
        derive_seed(seed, &[2]),
    )?;
    Ok(LayerCheck {
        name: "full_model",
        max_rel_err,
        tolerance: MODEL_TOLERANCE,
    })
}

/// Runs every check. Order is fixed; all checks execute even after a failure
/// so the report is complete.
pub fn run_suite(seed: u64) -> Result<Vec<LayerCheck>, TensorError> {
    let mut checks = Vec::new();
    checks.push(conv_check(
        "conv2d",
        ConvSpec {
            stride: 2,
            padding: 1,
            dilation: 1,
        },
        &[2, 3, 8, 8],
        &[4, 3, 3, 3],
        derive_seed(seed, &[1]),
    )?);
    checks.push(conv_check(
        "conv2d_dilation4",
        ConvSpec {
            stride: 1,
            padding: 4,
            dilation: 4,
        },
        &[2, 3, 12, 12],
        &[4, 3, 3, 3],
        derive_seed(seed, &[2]),
    )?);
    checks.push(batch_norm_check(derive_seed(seed, &[3]))?);
    checks.extend(pool_checks(derive_seed(seed, &[4]))?);
    checks.push(dense_check(derive_seed(seed, &[5]))?);
    checks.push(sigmoid_check(derive_seed(seed, &[6]))?);
    checks.push(cross_entropy_check(derive_seed(seed, &[7]))?);
    checks.extend(gate_checks(derive_seed(seed, &[8]))?);
    checks.push(full_model_check(derive_seed(seed, &[9]))?);
    Ok(checks)
}

pub fn suite_passes(checks: &[LayerCheck]) -> bool {
    checks.iter().all(|c| c.passed())
}
