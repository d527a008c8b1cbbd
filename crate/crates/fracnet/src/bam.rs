//! Bottleneck attention: channel and spatial gates fused by a sigmoid and
//! applied as a residual refinement.
//!
//! The channel gate squeezes the feature map to per-channel statistics and
//! runs them through a bottlenecked two-layer perceptron; the spatial gate
//! compresses channels and widens its receptive field with two dilated
//! convolutions. Each branch ends in batch normalization whose gain starts at
//! zero, so a freshly constructed module computes `M = sigmoid(0) = 0.5` and
//! refines `F` to exactly `1.5 * F`.
//!
//! Gate layers carry no biases: every branch ends in batch normalization,
//! which cancels uniform shifts, so the normalization's beta is the only
//! effective offset.
//!
//! Refinement: `M(F) = sigmoid(channel(F) + spatial(F))`, output
//! `F + F .* M(F)` with the NC11 channel map and the N1HW spatial map expanded
//! to NCHW by repetition.

use crate::graph::{ConvSpec, Graph, Mode, NodeId};
use crate::params::{ParamId, Params};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor, TensorError};

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_DILATION: usize = 4;

/// Batch-norm hyperparameters shared by both gate branches.
const BN_MOMENTUM: f64 = 0.1;
const BN_EPSILON: f64 = 1e-3;

/// Resolved parameter handles of one attention module instance.
#[derive(Debug, Clone)]
pub struct BamParams {
    pub channels: usize,
    pub reduction: usize,
    pub dilation: usize,
    fc1_w: ParamId,
    fc2_w: ParamId,
    ch_gamma: ParamId,
    ch_beta: ParamId,
    ch_rmean: ParamId,
    ch_rvar: ParamId,
    reduce_w: ParamId,
    dil1_w: ParamId,
    dil2_w: ParamId,
    project_w: ParamId,
    sp_gamma: ParamId,
    sp_beta: ParamId,
    sp_rmean: ParamId,
    sp_rvar: ParamId,
}

pub(crate) fn kaiming_uniform<E: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut SplitMix64,
) -> Tensor<E> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| E::from_f64(rng.next_symmetric(bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Number of trainable scalars one module adds for a given channel count.
pub fn bam_trainable_count(channels: usize, reduction: usize) -> usize {
    let q = channels / reduction;
    let channel_gate = channels * q + q * channels + 2 * channels;
    let spatial_gate = q * channels + 2 * (q * q * 9) + q + 2;
    channel_gate + spatial_gate
}

/// Registers all parameters of one module under `prefix`. `channels` must be
/// divisible by `reduction`.
pub fn register_bam_params<E: Scalar>(
    params: &mut Params<E>,
    prefix: &str,
    channels: usize,
    reduction: usize,
    dilation: usize,
    rng: &mut SplitMix64,
) -> Result<BamParams, TensorError> {
    if reduction == 0 || dilation == 0 || !channels.is_multiple_of(reduction) {
        return Err(TensorError::InvalidShape {
            shape: vec![channels, reduction, dilation],
            reason: "channels must be divisible by a positive reduction ratio".into(),
        });
    }
    let q = channels / reduction;
    let c = channels;
    let add = |params: &mut Params<E>, suffix: &str, t: Tensor<E>, trainable: bool| {
        params.add(format!("{prefix}.{suffix}"), t, trainable)
    };

    let fc1_w = add(
        params,
        "channel.fc1.weight",
        kaiming_uniform(&[c, q], c, rng),
        true,
    )?;
    let fc2_w = add(
        params,
        "channel.fc2.weight",
        kaiming_uniform(&[q, c], q, rng),
        true,
    )?;
    // Final branch normalization starts at zero gain: the module begins as
    // the 1.5x near-identity.
    let ch_gamma = add(params, "channel.bn.gamma", Tensor::zeros(&[c]), true)?;
    let ch_beta = add(params, "channel.bn.beta", Tensor::zeros(&[c]), true)?;
    let ch_rmean = add(
        params,
        "channel.bn.running_mean",
        Tensor::zeros(&[c]),
        false,
    )?;
    let ch_rvar = add(
        params,
        "channel.bn.running_var",
        Tensor::filled(&[c], E::one()),
        false,
    )?;

    let reduce_w = add(
        params,
        "spatial.reduce.weight",
        kaiming_uniform(&[q, c, 1, 1], c, rng),
        true,
    )?;
    let dil1_w = add(
        params,
        "spatial.dilated1.weight",
        kaiming_uniform(&[q, q, 3, 3], q * 9, rng),
        true,
    )?;
    let dil2_w = add(
        params,
        "spatial.dilated2.weight",
        kaiming_uniform(&[q, q, 3, 3], q * 9, rng),
        true,
    )?;
    let project_w = add(
        params,
        "spatial.project.weight",
        kaiming_uniform(&[1, q, 1, 1], q, rng),
        true,
    )?;
    let sp_gamma = add(params, "spatial.bn.gamma", Tensor::zeros(&[1]), true)?;
    let sp_beta = add(params, "spatial.bn.beta", Tensor::zeros(&[1]), true)?;
    let sp_rmean = add(
        params,
        "spatial.bn.running_mean",
        Tensor::zeros(&[1]),
        false,
    )?;
    let sp_rvar = add(
        params,
        "spatial.bn.running_var",
        Tensor::filled(&[1], E::one()),
        false,
    )?;

    Ok(BamParams {
        channels,
        reduction,
        dilation,
        fc1_w,
        fc2_w,
        ch_gamma,
        ch_beta,
        ch_rmean,
        ch_rvar,
        reduce_w,
        dil1_w,
        dil2_w,
        project_w,
        sp_gamma,
        sp_beta,
        sp_rmean,
        sp_rvar,
    })
}

/// Re-resolves handles by name, e.g. after loading a checkpoint.
pub fn resolve_bam_params<E: Scalar>(
    params: &Params<E>,
    prefix: &str,
    channels: usize,
    reduction: usize,
    dilation: usize,
) -> Result<BamParams, TensorError> {
    let id = |suffix: &str| params.id(&format!("{prefix}.{suffix}"));
    Ok(BamParams {
        channels,
        reduction,
        dilation,
        fc1_w: id("channel.fc1.weight")?,
        fc2_w: id("channel.fc2.weight")?,
        ch_gamma: id("channel.bn.gamma")?,
        ch_beta: id("channel.bn.beta")?,
        ch_rmean: id("channel.bn.running_mean")?,
        ch_rvar: id("channel.bn.running_var")?,
        reduce_w: id("spatial.reduce.weight")?,
        dil1_w: id("spatial.dilated1.weight")?,
        dil2_w: id("spatial.dilated2.weight")?,
        project_w: id("spatial.project.weight")?,
        sp_gamma: id("spatial.bn.gamma")?,
        sp_beta: id("spatial.bn.beta")?,
        sp_rmean: id("spatial.bn.running_mean")?,
        sp_rvar: id("spatial.bn.running_var")?,
    })
}

fn check_channels<E: Scalar>(
    g: &Graph<E>,
    feature: NodeId,
    bam: &BamParams,
    context: &'static str,
) -> Result<(usize, usize, usize, usize), TensorError> {
    let shape = g.value(feature).shape();
    if shape.len() != 4 || shape[1] != bam.channels {
        return Err(TensorError::ShapeMismatch {
            context,
            lhs: shape.to_vec(),
            rhs: vec![0, bam.channels, 0, 0],
        });
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Batch-norm over the batch dimension treating the second axis as features,
/// by viewing N x C as N x C x 1 x 1. Writes updated running statistics back
/// into the store in train mode.
#[allow(clippy::too_many_arguments)]
fn batch_norm_update<E: Scalar>(
    g: &mut Graph<E>,
    params: &mut Params<E>,
    input: NodeId,
    gamma: ParamId,
    beta: ParamId,
    rmean: ParamId,
    rvar: ParamId,
    mode: Mode,
) -> Result<NodeId, TensorError> {
    let gamma_n = g.param(params, gamma);
    let beta_n = g.param(params, beta);
    let rm = params.get(rmean).data().to_vec();
    let rv = params.get(rvar).data().to_vec();
    let (out, updated) = g.batch_norm(
        input,
        gamma_n,
        beta_n,
        &rm,
        &rv,
        mode,
        BN_MOMENTUM,
        BN_EPSILON,
    )?;
    if let Some((new_mean, new_var)) = updated {
        params.set_data(rmean, &new_mean)?;
        params.set_data(rvar, &new_var)?;
    }
    Ok(out)
}

/// Channel pathway: global average pool, bottleneck perceptron, batch-norm
/// over the batch. Output is N x C x 1 x 1, pre-sigmoid.
pub fn channel_gate<E: Scalar>(
    g: &mut Graph<E>,
    params: &mut Params<E>,
    bam: &BamParams,
    feature: NodeId,
    mode: Mode,
) -> Result<NodeId, TensorError> {
    let (n, c, _, _) = check_channels(g, feature, bam, "channel_gate feature vs BAM channels")?;
    let q = c / bam.reduction;
    let pooled = g.global_avg_pool(feature)?;
    let flat = g.reshape(pooled, &[n, c])?;
    let w1 = g.param(params, bam.fc1_w);
    let zero_q = g.constant(Tensor::zeros(&[q]));
    let hidden = g.dense(flat, w1, zero_q)?;
    let hidden = g.relu(hidden);
    let w2 = g.param(params, bam.fc2_w);
    let zero_c = g.constant(Tensor::zeros(&[c]));
    let out = g.dense(hidden, w2, zero_c)?;
    let out = g.reshape(out, &[n, c, 1, 1])?;
    batch_norm_update(
        g,
        params,
        out,
        bam.ch_gamma,
        bam.ch_beta,
        bam.ch_rmean,
        bam.ch_rvar,
        mode,
    )
}

/// Spatial pathway: 1x1 reduce, two 3x3 convolutions with dilation d and
/// padding d (extent-preserving), 1x1 projection to one channel, batch-norm.
/// Output is N x 1 x H x W, pre-sigmoid.
pub fn spatial_gate<E: Scalar>(
    g: &mut Graph<E>,
    params: &mut Params<E>,
    bam: &BamParams,
    feature: NodeId,
    mode: Mode,
) -> Result<NodeId, TensorError> {
    check_channels(g, feature, bam, "spatial_gate feature vs BAM channels")?;
    let one = ConvSpec {
        stride: 1,
        padding: 0,
        dilation: 1,
    };
    let dilated = ConvSpec {
        stride: 1,
        padding: bam.dilation,
        dilation: bam.dilation,
    };
    let rw = g.param(params, bam.reduce_w);
    let x = g.conv2d(feature, rw, None, one)?;
    let w1 = g.param(params, bam.dil1_w);
    let x = g.conv2d(x, w1, None, dilated)?;
    let w2 = g.param(params, bam.dil2_w);
    let x = g.conv2d(x, w2, None, dilated)?;
    let pw = g.param(params, bam.project_w);
    let x = g.conv2d(x, pw, None, one)?;
    batch_norm_update(
        g,
        params,
        x,
        bam.sp_gamma,
        bam.sp_beta,
        bam.sp_rmean,
        bam.sp_rvar,
        mode,
    )
}

/// Full refinement: `F + F .* sigmoid(channel(F) + spatial(F))`. Output shape
/// equals input shape.
pub fn bam_refine<E: Scalar>(
    g: &mut Graph<E>,
    params: &mut Params<E>,
    bam: &BamParams,
    feature: NodeId,
    mode: Mode,
) -> Result<NodeId, TensorError> {
    let shape = g.value(feature).shape().to_vec();
    let ch = channel_gate(g, params, bam, feature, mode)?;
    let sp = spatial_gate(g, params, bam, feature, mode)?;
    let ch = g.broadcast_to(ch, &shape)?;
    let sp = g.broadcast_to(sp, &shape)?;
    let gate = g.add(ch, sp)?;
    let attention = g.sigmoid(gate);
    let scaled = g.mul(feature, attention)?;
    g.add(feature, scaled)
}
