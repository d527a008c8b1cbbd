//! Classifier assembly: a compact parallel-branch backbone with three marked
//! downsampling bottlenecks, attention spliced at each bottleneck, and a
//! ten-layer head ending in a two-way classifier.
//!
//! A [`ModelSpec`] is a serializable DAG of layer nodes in topological order;
//! node indices always precede their consumers. Parameters are registered per
//! node under the node's name, so names survive attention insertion and
//! checkpoint round-trips. Convolutions and head denses that feed directly
//! into a batch norm are bias-free (the normalization's beta is the offset).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bam;
use crate::fixture::fnv1a64;
use crate::graph::{ConvSpec, Graph, Mode, NodeId};
use crate::params::Params;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Scalar, Tensor, TensorError};

pub const DEFAULT_INPUT_EXTENT: usize = 224;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("backbone width {0} must be at least 8 and divisible by 4")]
    InvalidWidth(usize),
    #[error("head must have exactly 10 layers, got {0}")]
    HeadLength(usize),
    #[error("head layer {index} breaks the extent chain (expected input extent {expected})")]
    HeadChainMismatch { index: usize, expected: usize },
    #[error("head must end in a dense layer with {expected} outputs")]
    HeadTerminal { expected: usize },
    #[error("head site already occupied")]
    HeadOccupied,
    #[error("bottleneck sites already occupied")]
    SitesOccupied,
    #[error("site channels {channels} not divisible by reduction ratio {reduction}")]
    SiteChannelsNotDivisible { channels: usize, reduction: usize },
    #[error("batch shape {found:?} does not match model input {expected:?}")]
    BatchShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid model graph: {0}")]
    InvalidGraph(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum LayerKind {
    Input,
    /// Bias-free square convolution (always followed by a batch norm here).
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    BatchNorm,
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    ConcatChannels,
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Dropout {
        p: f64,
    },
    /// One attention module; channel count fixed at insertion time.
    Bam {
        channels: usize,
        reduction: usize,
        dilation: usize,
    },
    /// Fixed scalar gain; baseline stand-in for a gate-zero attention module.
    Scale {
        factor: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BottleneckSite {
    pub node: usize,
    pub occupied: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub num_classes: usize,
    pub width: usize,
    pub nodes: Vec<LayerNode>,
    pub bottleneck_sites: Vec<BottleneckSite>,
    pub head_attached: bool,
    pub output: usize,
}

/// Per-node activation shape with the batch dimension implicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extent {
    Map { c: usize, h: usize, w: usize },
    Flat { f: usize },
}

/// One layer descriptor of the head stack. A dense layer may fold a
/// trailing relu so the stack stays at exactly ten entries.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum HeadLayer {
    Dense {
        in_features: usize,
        out_features: usize,
        relu: bool,
    },
    BatchNorm,
    Relu,
    Dropout {
        p: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HeadConfig {
    pub layers: Vec<HeadLayer>,
}

impl HeadConfig {
    /// The default ten-layer stack:
    /// dense(512), batch-norm, relu, dropout(0.3), dense(128), batch-norm,
    /// relu, dropout(0.3), dense(32)+relu, dense(num_classes).
    pub fn default_for(pooled_features: usize, num_classes: usize) -> Self {
        Self {
            layers: vec![
                HeadLayer::Dense {
                    in_features: pooled_features,
                    out_features: 512,
                    relu: false,
                },
                HeadLayer::BatchNorm,
                HeadLayer::Relu,
                HeadLayer::Dropout { p: 0.3 },
                HeadLayer::Dense {
                    in_features: 512,
                    out_features: 128,
                    relu: false,
                },
                HeadLayer::BatchNorm,
                HeadLayer::Relu,
                HeadLayer::Dropout { p: 0.3 },
                HeadLayer::Dense {
                    in_features: 128,
                    out_features: 32,
                    relu: true,
                },
                HeadLayer::Dense {
                    in_features: 32,
                    out_features: num_classes,
                    relu: false,
                },
            ],
        }
    }
}

// ---- backbone construction ---------------------------------------------------

struct Builder {
    nodes: Vec<LayerNode>,
}

impl Builder {
    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(LayerNode { name, kind, inputs });
        id
    }

    fn conv_bn_relu(
        &mut self,
        prefix: &str,
        input: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> usize {
        let conv = self.push(
            format!("{prefix}.conv"),
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                dilation: 1,
            },
            vec![input],
        );
        let bn = self.push(format!("{prefix}.bn"), LayerKind::BatchNorm, vec![conv]);
        self.push(format!("{prefix}.relu"), LayerKind::Relu, vec![bn])
    }

    /// Four parallel branches concatenated on channels: 1x1, 1x1-3x3,
    /// 1x1-3x3-3x3 (a 5x5 receptive field from stacked 3x3s), and
    /// pool-project. Each branch emits `width / 4` channels.
    fn inception_block(&mut self, prefix: &str, input: usize, width: usize) -> usize {
        let q = width / 4;
        let b1 = self.conv_bn_relu(&format!("{prefix}.b1"), input, q, 1, 1, 0);
        let b2a = self.conv_bn_relu(&format!("{prefix}.b2.reduce"), input, q, 1, 1, 0);
        let b2 = self.conv_bn_relu(&format!("{prefix}.b2.conv"), b2a, q, 3, 1, 1);
        let b3a = self.conv_bn_relu(&format!("{prefix}.b3.reduce"), input, q, 1, 1, 0);
        let b3b = self.conv_bn_relu(&format!("{prefix}.b3.conv1"), b3a, q, 3, 1, 1);
        let b3 = self.conv_bn_relu(&format!("{prefix}.b3.conv2"), b3b, q, 3, 1, 1);
        let pool = self.push(
            format!("{prefix}.b4.pool"),
            LayerKind::MaxPool {
                window: 3,
                stride: 1,
                padding: 1,
            },
            vec![input],
        );
        let b4 = self.conv_bn_relu(&format!("{prefix}.b4.project"), pool, q, 1, 1, 0);
        self.push(
            format!("{prefix}.concat"),
            LayerKind::ConcatChannels,
            vec![b1, b2, b3, b4],
        )
    }
}

/// Builds the backbone at the default 224 x 224 input extent.
pub fn build_backbone(width: usize, channels_in: usize) -> Result<ModelSpec, ModelError> {
    build_backbone_with_input(
        width,
        channels_in,
        DEFAULT_INPUT_EXTENT,
        DEFAULT_INPUT_EXTENT,
    )
}

/// Stem convolution at stride 2, then three stages of one parallel-branch
/// block each; the block output is a registered bottleneck site immediately
/// followed by a stride-2 downsampling convolution. Stage widths are
/// width, 2*width, 4*width. Ends in global average pooling.
pub fn build_backbone_with_input(
    width: usize,
    channels_in: usize,
    input_height: usize,
    input_width: usize,
) -> Result<ModelSpec, ModelError> {
    if width < 8 || !width.is_multiple_of(4) {
        return Err(ModelError::InvalidWidth(width));
    }
    let mut b = Builder { nodes: Vec::new() };
    let input = b.push("input".into(), LayerKind::Input, vec![]);
    let mut cur = b.conv_bn_relu("stem", input, width, 3, 2, 1);
    let mut sites = Vec::with_capacity(3);
    for stage in 1..=3usize {
        let stage_width = width << (stage - 1);
        let block = b.inception_block(&format!("stage{stage}"), cur, stage_width);
        sites.push(BottleneckSite {
            node: block,
            occupied: false,
        });
        cur = b.conv_bn_relu(&format!("stage{stage}.down"), block, stage_width, 3, 2, 1);
    }
    let gap = b.push("gap".into(), LayerKind::GlobalAvgPool, vec![cur]);
    let spec = ModelSpec {
        input_channels: channels_in,
        input_height,
        input_width,
        num_classes: 2,
        width,
        nodes: b.nodes,
        bottleneck_sites: sites,
        head_attached: false,
        output: gap,
    };
    // Fails if the input extent is too small for the declared strides.
    trace_shapes(&spec)?;
    Ok(spec)
}

// ---- shape tracing -------------------------------------------------------------

/// Propagates activation extents through the graph, validating every node.
pub fn trace_shapes(spec: &ModelSpec) -> Result<Vec<Extent>, ModelError> {
    use crate::tensor::conv_out_extent;
    let mut shapes: Vec<Extent> = Vec::with_capacity(spec.nodes.len());
    for (idx, node) in spec.nodes.iter().enumerate() {
        for &i in &node.inputs {
            if i >= idx {
                return Err(ModelError::InvalidGraph(format!(
                    "node {idx} ({}) consumes later node {i}",
                    node.name
                )));
            }
        }
        let input = |k: usize| shapes[node.inputs[k]];
        let shape = match &node.kind {
            LayerKind::Input => Extent::Map {
                c: spec.input_channels,
                h: spec.input_height,
                w: spec.input_width,
            },
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                dilation,
            } => match input(0) {
                Extent::Map { h, w, .. } => {
                    let oh = conv_out_extent(h, *kernel, *stride, *padding, *dilation);
                    let ow = conv_out_extent(w, *kernel, *stride, *padding, *dilation);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => Extent::Map {
                            c: *out_channels,
                            h: oh,
                            w: ow,
                        },
                        _ => {
                            return Err(ModelError::InvalidGraph(format!(
                                "{} output extent vanishes for {h}x{w} input",
                                node.name
                            )))
                        }
                    }
                }
                Extent::Flat { .. } => {
                    return Err(ModelError::InvalidGraph(format!(
                        "{} needs a feature map",
                        node.name
                    )))
                }
            },
            LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Dropout { .. } => input(0),
            LayerKind::MaxPool {
                window,
                stride,
                padding,
            } => match input(0) {
                Extent::Map { c, h, w } => {
                    if *window > h + 2 * padding || *window > w + 2 * padding {
                        return Err(ModelError::InvalidGraph(format!(
                            "{} window exceeds padded extent",
                            node.name
                        )));
                    }
                    Extent::Map {
                        c,
                        h: (h + 2 * padding - window) / stride + 1,
                        w: (w + 2 * padding - window) / stride + 1,
                    }
                }
                Extent::Flat { .. } => {
                    return Err(ModelError::InvalidGraph(format!(
                        "{} needs a feature map",
                        node.name
                    )))
                }
            },
            LayerKind::GlobalAvgPool => match input(0) {
                Extent::Map { c, .. } => Extent::Map { c, h: 1, w: 1 },
                Extent::Flat { .. } => {
                    return Err(ModelError::InvalidGraph(format!(
                        "{} needs a feature map",
                        node.name
                    )))
                }
            },
            LayerKind::ConcatChannels => {
                let mut total = 0;
                let mut hw = None;
                for k in 0..node.inputs.len() {
                    match input(k) {
                        Extent::Map { c, h, w } => {
                            if let Some((ph, pw)) = hw {
                                if (ph, pw) != (h, w) {
                                    return Err(ModelError::InvalidGraph(format!(
                                        "{} concat extents disagree: {ph}x{pw} vs {h}x{w}",
                                        node.name
                                    )));
                                }
                            }
                            hw = Some((h, w));
                            total += c;
                        }
                        Extent::Flat { .. } => {
                            return Err(ModelError::InvalidGraph(format!(
                                "{} needs feature maps",
                                node.name
                            )))
                        }
                    }
                }
                let (h, w) = hw.ok_or_else(|| {
                    ModelError::InvalidGraph(format!("{} has no inputs", node.name))
                })?;
                Extent::Map { c: total, h, w }
            }
            LayerKind::Flatten => match input(0) {
                Extent::Map { c, h, w } => Extent::Flat { f: c * h * w },
                Extent::Flat { f } => Extent::Flat { f },
            },
            LayerKind::Dense {
                in_features,
                out_features,
                ..
            } => match input(0) {
                Extent::Flat { f } if f == *in_features => Extent::Flat { f: *out_features },
                Extent::Flat { f } => {
                    return Err(ModelError::InvalidGraph(format!(
                        "{} expects {in_features} input features, got {f}",
                        node.name
                    )))
                }
                Extent::Map { .. } => {
                    return Err(ModelError::InvalidGraph(format!(
                        "{} needs flat features",
                        node.name
                    )))
                }
            },
            LayerKind::Bam {
                channels,
                reduction,
                ..
            } => match input(0) {
                Extent::Map { c, h, w } if c == *channels => {
                    if c % reduction != 0 {
                        return Err(ModelError::SiteChannelsNotDivisible {
                            channels: c,
                            reduction: *reduction,
                        });
                    }
                    Extent::Map { c, h, w }
                }
                other => {
                    return Err(ModelError::InvalidGraph(format!(
                        "{} expects {channels}-channel map, got {other:?}",
                        node.name
                    )))
                }
            },
            LayerKind::Scale { .. } => input(0),
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Pooled feature width at the head attachment point.
pub fn pooled_features(spec: &ModelSpec) -> Result<usize, ModelError> {
    let shapes = trace_shapes(spec)?;
    match shapes[spec.output] {
        Extent::Map { c, h, w } => Ok(c * h * w),
        Extent::Flat { f } => Ok(f),
    }
}

// ---- attention insertion and head attachment -----------------------------------

/// Splices one node between `pos` and all of its consumers, shifting indices.
fn splice_after(spec: &mut ModelSpec, pos: usize, name: String, kind: LayerKind) {
    let remap = |id: usize| -> usize {
        if id == pos {
            pos + 1
        } else if id > pos {
            id + 1
        } else {
            id
        }
    };
    for node in spec.nodes.iter_mut() {
        for input in node.inputs.iter_mut() {
            *input = remap(*input);
        }
    }
    spec.output = remap(spec.output);
    for site in spec.bottleneck_sites.iter_mut() {
        if site.node > pos {
            site.node += 1;
        }
    }
    spec.nodes.insert(
        pos + 1,
        LayerNode {
            name,
            kind,
            inputs: vec![pos],
        },
    );
}

/// Splices an independent attention module at each of the three bottleneck
/// sites. Output shapes are unchanged. A second insertion is rejected.
pub fn insert_attention(
    spec: &ModelSpec,
    reduction: usize,
    dilation: usize,
) -> Result<ModelSpec, ModelError> {
    if spec.bottleneck_sites.iter().any(|s| s.occupied) {
        return Err(ModelError::SitesOccupied);
    }
    let shapes = trace_shapes(spec)?;
    let mut site_channels = Vec::with_capacity(spec.bottleneck_sites.len());
    for site in &spec.bottleneck_sites {
        match shapes[site.node] {
            Extent::Map { c, .. } => {
                if reduction == 0 || c % reduction != 0 {
                    return Err(ModelError::SiteChannelsNotDivisible {
                        channels: c,
                        reduction,
                    });
                }
                site_channels.push(c);
            }
            Extent::Flat { .. } => {
                return Err(ModelError::InvalidGraph(
                    "bottleneck site is not a feature map".into(),
                ))
            }
        }
    }
    let mut out = spec.clone();
    // Insert from the last site backwards so earlier positions stay valid.
    for si in (0..out.bottleneck_sites.len()).rev() {
        let pos = out.bottleneck_sites[si].node;
        splice_after(
            &mut out,
            pos,
            format!("bam{}", si + 1),
            LayerKind::Bam {
                channels: site_channels[si],
                reduction,
                dilation,
            },
        );
        out.bottleneck_sites[si].occupied = true;
    }
    Ok(out)
}

/// Replaces attention with a fixed scalar gain at each bottleneck site;
/// the baseline a gate-zero attention module must match (factor 1.5).
pub fn splice_site_scaling(spec: &ModelSpec, factor: f64) -> Result<ModelSpec, ModelError> {
    if spec.bottleneck_sites.iter().any(|s| s.occupied) {
        return Err(ModelError::SitesOccupied);
    }
    let mut out = spec.clone();
    for si in (0..out.bottleneck_sites.len()).rev() {
        let pos = out.bottleneck_sites[si].node;
        splice_after(
            &mut out,
            pos,
            format!("scale{}", si + 1),
            LayerKind::Scale { factor },
        );
        out.bottleneck_sites[si].occupied = true;
    }
    Ok(out)
}

/// Appends the ten-layer head after the pooled features. Dense layers
/// directly followed by a batch norm are bias-free. The terminal layer must
/// be a dense with `num_classes` outputs.
pub fn attach_head(spec: &ModelSpec, head: &HeadConfig) -> Result<ModelSpec, ModelError> {
    if spec.head_attached {
        return Err(ModelError::HeadOccupied);
    }
    if head.layers.len() != 10 {
        return Err(ModelError::HeadLength(head.layers.len()));
    }
    let pooled = pooled_features(spec)?;

    // Validate the extent chain before touching the graph.
    let mut cur = pooled;
    for (index, layer) in head.layers.iter().enumerate() {
        if let HeadLayer::Dense {
            in_features,
            out_features,
            ..
        } = layer
        {
            if *in_features != cur {
                return Err(ModelError::HeadChainMismatch {
                    index,
                    expected: cur,
                });
            }
            cur = *out_features;
        }
    }
    match head.layers.last() {
        Some(HeadLayer::Dense { out_features, .. }) if *out_features == spec.num_classes => {}
        _ => {
            return Err(ModelError::HeadTerminal {
                expected: spec.num_classes,
            })
        }
    }

    let mut out = spec.clone();
    let mut b = Builder {
        nodes: std::mem::take(&mut out.nodes),
    };
    let mut cur_node = b.push("head.flatten".into(), LayerKind::Flatten, vec![out.output]);
    for (index, layer) in head.layers.iter().enumerate() {
        cur_node = match layer {
            HeadLayer::Dense {
                in_features,
                out_features,
                relu,
            } => {
                let followed_by_bn =
                    matches!(head.layers.get(index + 1), Some(HeadLayer::BatchNorm));
                let dense = b.push(
                    format!("head.l{index}.dense"),
                    LayerKind::Dense {
                        in_features: *in_features,
                        out_features: *out_features,
                        bias: !followed_by_bn,
                    },
                    vec![cur_node],
                );
                if *relu {
                    b.push(format!("head.l{index}.relu"), LayerKind::Relu, vec![dense])
                } else {
                    dense
                }
            }
            HeadLayer::BatchNorm => b.push(
                format!("head.l{index}.bn"),
                LayerKind::BatchNorm,
                vec![cur_node],
            ),
            HeadLayer::Relu => b.push(
                format!("head.l{index}.relu"),
                LayerKind::Relu,
                vec![cur_node],
            ),
            HeadLayer::Dropout { p } => b.push(
                format!("head.l{index}.dropout"),
                LayerKind::Dropout { p: *p },
                vec![cur_node],
            ),
        };
    }
    out.nodes = b.nodes;
    out.output = cur_node;
    out.head_attached = true;
    trace_shapes(&out)?;
    Ok(out)
}

// ---- parameters -----------------------------------------------------------------

const BN_MOMENTUM: f64 = 0.1;
const BN_EPSILON: f64 = 1e-3;

fn bn_features(extent: Extent) -> usize {
    match extent {
        Extent::Map { c, .. } => c,
        Extent::Flat { f } => f,
    }
}

/// Registers and initializes every parameter of the model: Kaiming-uniform
/// fan-in for convolution and dense weights, zeros for biases, gamma 1 /
/// beta 0 for batch norms (attention branch finals start at gamma 0), and
/// mean 0 / variance 1 running statistics.
pub fn init_params<E: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Params<E>, ModelError> {
    let shapes = trace_shapes(spec)?;
    let mut params = Params::new();
    let mut rng = SplitMix64::new(derive_seed(seed, &[0x6d6f64656c00]));
    for node in &spec.nodes {
        match &node.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let in_c = match shapes[node.inputs[0]] {
                    Extent::Map { c, .. } => c,
                    Extent::Flat { .. } => unreachable!("traced"),
                };
                let fan_in = in_c * kernel * kernel;
                params.add(
                    format!("{}.weight", node.name),
                    bam::kaiming_uniform(
                        &[*out_channels, in_c, *kernel, *kernel],
                        fan_in,
                        &mut rng,
                    ),
                    true,
                )?;
            }
            LayerKind::BatchNorm => {
                let c = bn_features(shapes[node.inputs[0]]);
                params.add(
                    format!("{}.gamma", node.name),
                    Tensor::filled(&[c], E::one()),
                    true,
                )?;
                params.add(format!("{}.beta", node.name), Tensor::zeros(&[c]), true)?;
                params.add(
                    format!("{}.running_mean", node.name),
                    Tensor::zeros(&[c]),
                    false,
                )?;
                params.add(
                    format!("{}.running_var", node.name),
                    Tensor::filled(&[c], E::one()),
                    false,
                )?;
            }
            LayerKind::Dense {
                in_features,
                out_features,
                bias,
            } => {
                params.add(
                    format!("{}.weight", node.name),
                    bam::kaiming_uniform(&[*in_features, *out_features], *in_features, &mut rng),
                    true,
                )?;
                if *bias {
                    params.add(
                        format!("{}.bias", node.name),
                        Tensor::zeros(&[*out_features]),
                        true,
                    )?;
                }
            }
            LayerKind::Bam {
                channels,
                reduction,
                dilation,
            } => {
                bam::register_bam_params(
                    &mut params,
                    &node.name,
                    *channels,
                    *reduction,
                    *dilation,
                    &mut rng,
                )?;
            }
            _ => {}
        }
    }
    Ok(params)
}

/// Total trainable scalar count, computed from the architecture description
/// alone (no parameter store needed).
pub fn param_count(spec: &ModelSpec) -> Result<usize, ModelError> {
    let shapes = trace_shapes(spec)?;
    let mut total = 0usize;
    for node in &spec.nodes {
        total += match &node.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let in_c = match shapes[node.inputs[0]] {
                    Extent::Map { c, .. } => c,
                    Extent::Flat { .. } => 0,
                };
                out_channels * in_c * kernel * kernel
            }
            LayerKind::BatchNorm => 2 * bn_features(shapes[node.inputs[0]]),
            LayerKind::Dense {
                in_features,
                out_features,
                bias,
            } => in_features * out_features + if *bias { *out_features } else { 0 },
            LayerKind::Bam {
                channels,
                reduction,
                ..
            } => bam::bam_trainable_count(*channels, *reduction),
            _ => 0,
        };
    }
    Ok(total)
}

// ---- forward ----------------------------------------------------------------------

/// Runs the model graph on a batch, recording onto `g`. Train mode uses batch
/// statistics and seeded dropout; eval mode is a pure function of parameters
/// and input.
pub fn forward<E: Scalar>(
    spec: &ModelSpec,
    params: &mut Params<E>,
    g: &mut Graph<E>,
    batch: &Tensor<E>,
    mode: Mode,
    dropout_seed: u64,
) -> Result<NodeId, ModelError> {
    let expected = vec![
        batch.shape().first().copied().unwrap_or(0),
        spec.input_channels,
        spec.input_height,
        spec.input_width,
    ];
    if batch.shape() != expected.as_slice() || batch.shape()[0] == 0 {
        return Err(ModelError::BatchShapeMismatch {
            expected,
            found: batch.shape().to_vec(),
        });
    }
    let n = batch.shape()[0];

    let mut outputs: Vec<NodeId> = Vec::with_capacity(spec.nodes.len());
    for (idx, node) in spec.nodes.iter().enumerate() {
        let input = |k: usize| outputs[node.inputs[k]];
        let out = match &node.kind {
            LayerKind::Input => g.leaf(batch.clone()),
            LayerKind::Conv {
                stride,
                padding,
                dilation,
                ..
            } => {
                let w = params.id(&format!("{}.weight", node.name))?;
                let wn = g.param(params, w);
                g.conv2d(
                    input(0),
                    wn,
                    None,
                    ConvSpec {
                        stride: *stride,
                        padding: *padding,
                        dilation: *dilation,
                    },
                )?
            }
            LayerKind::BatchNorm => {
                let x = input(0);
                let rank2 = g.value(x).shape().len() == 2;
                let x = if rank2 {
                    let f = g.value(x).shape()[1];
                    g.reshape(x, &[n, f, 1, 1])?
                } else {
                    x
                };
                let gamma = params.id(&format!("{}.gamma", node.name))?;
                let beta = params.id(&format!("{}.beta", node.name))?;
                let rmean = params.id(&format!("{}.running_mean", node.name))?;
                let rvar = params.id(&format!("{}.running_var", node.name))?;
                let gamma_n = g.param(params, gamma);
                let beta_n = g.param(params, beta);
                let rm = params.get(rmean).data().to_vec();
                let rv = params.get(rvar).data().to_vec();
                let (out, updated) =
                    g.batch_norm(x, gamma_n, beta_n, &rm, &rv, mode, BN_MOMENTUM, BN_EPSILON)?;
                if let Some((new_mean, new_var)) = updated {
                    params.set_data(rmean, &new_mean)?;
                    params.set_data(rvar, &new_var)?;
                }
                if rank2 {
                    let f = g.value(out).shape()[1];
                    g.reshape(out, &[n, f])?
                } else {
                    out
                }
            }
            LayerKind::Relu => g.relu(input(0)),
            LayerKind::MaxPool {
                window,
                stride,
                padding,
            } => g.max_pool(input(0), *window, *stride, *padding)?,
            LayerKind::GlobalAvgPool => g.global_avg_pool(input(0))?,
            LayerKind::ConcatChannels => {
                let ids: Vec<NodeId> = node.inputs.iter().map(|&i| outputs[i]).collect();
                g.concat_channels(&ids)?
            }
            LayerKind::Flatten => {
                let numel_per = g.value(input(0)).numel() / n;
                g.reshape(input(0), &[n, numel_per])?
            }
            LayerKind::Dense { bias, .. } => {
                let w = params.id(&format!("{}.weight", node.name))?;
                let wn = g.param(params, w);
                let out_features = g.value(wn).shape()[1];
                let bn = if *bias {
                    let b = params.id(&format!("{}.bias", node.name))?;
                    g.param(params, b)
                } else {
                    g.constant(Tensor::zeros(&[out_features]))
                };
                g.dense(input(0), wn, bn)?
            }
            LayerKind::Dropout { p } => match mode {
                Mode::Train => {
                    let mut rng = SplitMix64::new(derive_seed(dropout_seed, &[idx as u64]));
                    g.dropout(input(0), *p, &mut rng)
                }
                Mode::Eval => input(0),
            },
            LayerKind::Bam {
                channels,
                reduction,
                dilation,
            } => {
                let ids =
                    bam::resolve_bam_params(params, &node.name, *channels, *reduction, *dilation)?;
                bam::bam_refine(g, params, &ids, input(0), mode)?
            }
            LayerKind::Scale { factor } => g.scale(input(0), E::from_f64(*factor)),
        };
        outputs.push(out);
    }
    Ok(outputs[spec.output])
}

/// Convenience forward that returns the logits tensor.
pub fn run_forward<E: Scalar>(
    spec: &ModelSpec,
    params: &mut Params<E>,
    batch: &Tensor<E>,
    mode: Mode,
    dropout_seed: u64,
) -> Result<Tensor<E>, ModelError> {
    let mut g = Graph::new();
    let out = forward(spec, params, &mut g, batch, mode, dropout_seed)?;
    Ok(g.value(out).clone())
}

// ---- serialization ------------------------------------------------------------------

pub fn model_to_json(spec: &ModelSpec) -> Result<String, ModelError> {
    serde_json::to_string_pretty(spec).map_err(|e| ModelError::Json(e.to_string()))
}

pub fn model_from_json(json: &str) -> Result<ModelSpec, ModelError> {
    serde_json::from_str(json).map_err(|e| ModelError::Json(e.to_string()))
}

/// Fingerprint of the canonical architecture document; stored inside
/// checkpoint containers and verified on load.
pub fn arch_hash(spec: &ModelSpec) -> Result<u64, ModelError> {
    Ok(fnv1a64(model_to_json(spec)?.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> (ModelSpec, Params<f64>) {
        let backbone = build_backbone_with_input(8, 3, 16, 16).unwrap();
        let with_bam = insert_attention(&backbone, 4, 2).unwrap();
        let head = HeadConfig::default_for(pooled_features(&with_bam).unwrap(), 2);
        let spec = attach_head(&with_bam, &head).unwrap();
        let params = init_params(&spec, 7).unwrap();
        (spec, params)
    }

    fn random_batch(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.next_f64()).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn invalid_width_rejected() {
        assert!(matches!(
            build_backbone(6, 3),
            Err(ModelError::InvalidWidth(6))
        ));
        assert!(matches!(
            build_backbone(10, 3),
            Err(ModelError::InvalidWidth(10))
        ));
        assert!(build_backbone(8, 3).is_ok());
    }

    #[test]
    fn bottleneck_sites_sit_at_112_56_28() {
        let spec = build_backbone(32, 3).unwrap();
        let shapes = trace_shapes(&spec).unwrap();
        let extents: Vec<(usize, usize)> = spec
            .bottleneck_sites
            .iter()
            .map(|s| match shapes[s.node] {
                Extent::Map { h, w, .. } => (h, w),
                _ => panic!("site must be a map"),
            })
            .collect();
        assert_eq!(extents, vec![(112, 112), (56, 56), (28, 28)]);
        // Each site immediately precedes its stage's stride-2 downsampling.
        for site in &spec.bottleneck_sites {
            let consumer = spec
                .nodes
                .iter()
                .find(|n| n.inputs.contains(&site.node))
                .unwrap();
            assert!(matches!(consumer.kind, LayerKind::Conv { stride: 2, .. }));
        }
    }

    #[test]
    fn block_output_channels_are_branch_sum() {
        let spec = build_backbone(32, 3).unwrap();
        let shapes = trace_shapes(&spec).unwrap();
        let widths: Vec<usize> = spec
            .bottleneck_sites
            .iter()
            .map(|s| match shapes[s.node] {
                Extent::Map { c, .. } => c,
                _ => unreachable!(),
            })
            .collect();
        // 4 branches x width/4, doubling per stage.
        assert_eq!(widths, vec![32, 64, 128]);
    }

    #[test]
    fn param_count_matches_independent_closed_form() {
        // Hand-derived sums over the declared layers of the width-8 backbone.
        let conv = |i: usize, o: usize, k: usize| o * i * k * k;
        let bn = |c: usize| 2 * c;
        let block = |c_in: usize, w: usize| {
            let q = w / 4;
            let branch1 = conv(c_in, q, 1) + bn(q);
            let branch2 = conv(c_in, q, 1) + bn(q) + conv(q, q, 3) + bn(q);
            let branch3 = conv(c_in, q, 1) + bn(q) + 2 * (conv(q, q, 3) + bn(q));
            let branch4 = conv(c_in, q, 1) + bn(q);
            branch1 + branch2 + branch3 + branch4
        };
        let backbone_count = |width: usize, channels_in: usize| {
            let mut total = conv(channels_in, width, 3) + bn(width); // stem
            let mut c_in = width;
            for stage in 0..3 {
                let w = width << stage;
                total += block(c_in, w) + conv(w, w, 3) + bn(w);
                c_in = w;
            }
            total
        };

        let spec = build_backbone(8, 3).unwrap();
        let expected = backbone_count(8, 3);
        assert_eq!(param_count(&spec).unwrap(), expected);
        let params: Params<f64> = init_params(&spec, 1).unwrap();
        assert_eq!(params.trainable_count(), expected);

        let wide = build_backbone(32, 3).unwrap();
        assert_eq!(param_count(&wide).unwrap(), backbone_count(32, 3));
    }

    #[test]
    fn attention_adds_exactly_three_module_counts() {
        let backbone = build_backbone(32, 3).unwrap();
        let before = param_count(&backbone).unwrap();
        let with_bam = insert_attention(&backbone, 16, 4).unwrap();
        let after = param_count(&with_bam).unwrap();
        let expected_extra: usize = [32usize, 64, 128]
            .iter()
            .map(|&c| bam::bam_trainable_count(c, 16))
            .sum();
        assert_eq!(after, before + expected_extra);
    }

    #[test]
    fn attention_preserves_backbone_parameter_names() {
        let backbone = build_backbone(8, 3).unwrap();
        let with_bam = insert_attention(&backbone, 4, 2).unwrap();
        let base: std::collections::BTreeSet<String> = init_params::<f64>(&backbone, 1)
            .unwrap()
            .iter()
            .map(|(_, e)| e.name.clone())
            .collect();
        let augmented: std::collections::BTreeSet<String> = init_params::<f64>(&with_bam, 1)
            .unwrap()
            .iter()
            .map(|(_, e)| e.name.clone())
            .collect();
        assert!(base.is_subset(&augmented));
        assert!(augmented.difference(&base).all(|n| n.starts_with("bam")));
    }

    #[test]
    fn second_insertion_is_rejected() {
        let backbone = build_backbone(8, 3).unwrap();
        let once = insert_attention(&backbone, 4, 2).unwrap();
        let err = insert_attention(&once, 4, 2).unwrap_err();
        assert!(matches!(err, ModelError::SitesOccupied));
    }

    #[test]
    fn insertion_rejects_indivisible_reduction() {
        let backbone = build_backbone(8, 3).unwrap();
        // Site channels are 8/16/32; 16 does not divide 8.
        let err = insert_attention(&backbone, 16, 4).unwrap_err();
        assert!(matches!(err, ModelError::SiteChannelsNotDivisible { .. }));
    }

    #[test]
    fn insertion_preserves_forward_shapes() {
        let backbone = build_backbone_with_input(8, 3, 32, 32).unwrap();
        let with_bam = insert_attention(&backbone, 4, 2).unwrap();
        let a = trace_shapes(&backbone).unwrap();
        let b = trace_shapes(&with_bam).unwrap();
        assert_eq!(a[backbone.output], b[with_bam.output]);
    }

    #[test]
    fn head_must_have_ten_layers() {
        let backbone = build_backbone_with_input(8, 3, 16, 16).unwrap();
        let mut head = HeadConfig::default_for(pooled_features(&backbone).unwrap(), 2);
        head.layers.pop();
        let err = attach_head(&backbone, &head).unwrap_err();
        assert!(matches!(err, ModelError::HeadLength(9)));
    }

    #[test]
    fn head_chain_mismatch_reports_first_offending_index() {
        let backbone = build_backbone_with_input(8, 3, 16, 16).unwrap();
        let mut head = HeadConfig::default_for(pooled_features(&backbone).unwrap(), 2);
        head.layers[4] = HeadLayer::Dense {
            in_features: 999,
            out_features: 128,
            relu: false,
        };
        let err = attach_head(&backbone, &head).unwrap_err();
        assert!(
            matches!(
                err,
                ModelError::HeadChainMismatch {
                    index: 4,
                    expected: 512
                }
            ),
            "{err:?}"
        );
    }

    #[test]
    fn head_terminal_must_be_classifier_dense() {
        let backbone = build_backbone_with_input(8, 3, 16, 16).unwrap();
        let mut head = HeadConfig::default_for(pooled_features(&backbone).unwrap(), 2);
        let n = head.layers.len();
        head.layers[n - 1] = HeadLayer::Dense {
            in_features: 32,
            out_features: 5,
            relu: false,
        };
        let err = attach_head(&backbone, &head).unwrap_err();
        assert!(matches!(err, ModelError::HeadTerminal { expected: 2 }));
    }

    #[test]
    fn second_head_attachment_is_rejected() {
        let backbone = build_backbone_with_input(8, 3, 16, 16).unwrap();
        let head = HeadConfig::default_for(pooled_features(&backbone).unwrap(), 2);
        let once = attach_head(&backbone, &head).unwrap();
        let err = attach_head(&once, &head).unwrap_err();
        assert!(matches!(err, ModelError::HeadOccupied));
    }

    #[test]
    fn forward_emits_two_logits_and_rejects_bad_batches() {
        let (spec, mut params) = small_model();
        let batch = random_batch(&[3, 3, 16, 16], 2);
        let logits = run_forward(&spec, &mut params, &batch, Mode::Eval, 0).unwrap();
        assert_eq!(logits.shape(), &[3, 2]);

        let bad = random_batch(&[3, 1, 16, 16], 3);
        let err = run_forward(&spec, &mut params, &bad, Mode::Eval, 0).unwrap_err();
        assert!(matches!(err, ModelError::BatchShapeMismatch { .. }));
    }

    #[test]
    fn eval_forward_is_deterministic_and_dropout_free() {
        let (spec, mut params) = small_model();
        let batch = random_batch(&[2, 3, 16, 16], 4);
        let a = run_forward(&spec, &mut params, &batch, Mode::Eval, 11).unwrap();
        let b = run_forward(&spec, &mut params, &batch, Mode::Eval, 99).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn eval_rows_are_batch_independent() {
        let (spec, mut params) = small_model();
        let one = random_batch(&[1, 3, 16, 16], 5);
        let mut doubled = one.data().to_vec();
        doubled.extend_from_slice(one.data());
        let two = Tensor::from_vec(&[2, 3, 16, 16], doubled).unwrap();
        let logits = run_forward(&spec, &mut params, &two, Mode::Eval, 0).unwrap();
        assert_eq!(&logits.data()[0..2], &logits.data()[2..4]);
    }

    #[test]
    fn eval_forward_is_permutation_equivariant() {
        let (spec, mut params) = small_model();
        let a = random_batch(&[1, 3, 16, 16], 6);
        let b = random_batch(&[1, 3, 16, 16], 7);
        let mut ab = a.data().to_vec();
        ab.extend_from_slice(b.data());
        let mut ba = b.data().to_vec();
        ba.extend_from_slice(a.data());
        let ab = Tensor::from_vec(&[2, 3, 16, 16], ab).unwrap();
        let ba = Tensor::from_vec(&[2, 3, 16, 16], ba).unwrap();
        let lab = run_forward(&spec, &mut params, &ab, Mode::Eval, 0).unwrap();
        let lba = run_forward(&spec, &mut params, &ba, Mode::Eval, 0).unwrap();
        assert_eq!(&lab.data()[0..2], &lba.data()[2..4]);
        assert_eq!(&lab.data()[2..4], &lba.data()[0..2]);
    }

    #[test]
    fn softmax_of_logits_rows_normalize() {
        let (spec, mut params) = small_model();
        let batch = random_batch(&[4, 3, 16, 16], 8);
        let logits = run_forward(&spec, &mut params, &batch, Mode::Eval, 0).unwrap();
        let probs = crate::tensor::softmax_rows(&logits);
        for r in 0..4 {
            let s: f64 = probs.data()[r * 2..(r + 1) * 2].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_invariant_under_positive_scaling_of_classifier() {
        let (spec, mut params) = small_model();
        let batch = random_batch(&[4, 3, 16, 16], 9);
        let before = run_forward(&spec, &mut params, &batch, Mode::Eval, 0).unwrap();
        // Scale the terminal dense weights and bias by 3.
        for suffix in ["weight", "bias"] {
            let id = params.id(&format!("head.l9.dense.{suffix}")).unwrap();
            let scaled: Vec<f64> = params.get(id).data().iter().map(|v| v * 3.0).collect();
            params.set_data(id, &scaled).unwrap();
        }
        let after = run_forward(&spec, &mut params, &batch, Mode::Eval, 0).unwrap();
        assert_eq!(
            crate::tensor::argmax_rows(&before),
            crate::tensor::argmax_rows(&after)
        );
    }

    #[test]
    fn gate_zero_attention_equals_fixed_scaling_baseline() {
        let backbone = build_backbone_with_input(8, 3, 16, 16).unwrap();
        let head = HeadConfig::default_for(pooled_features(&backbone).unwrap(), 2);
        let with_bam = attach_head(&insert_attention(&backbone, 4, 2).unwrap(), &head).unwrap();
        let scaled = attach_head(&splice_site_scaling(&backbone, 1.5).unwrap(), &head).unwrap();

        // Copy the shared (backbone + head) parameters across so only the
        // gate-zero attention entries differ.
        let mut p_bam = init_params::<f64>(&with_bam, 3).unwrap();
        let mut p_scaled = init_params::<f64>(&scaled, 3).unwrap();
        let shared: Vec<(String, Vec<f64>)> = p_bam
            .iter()
            .map(|(_, e)| (e.name.clone(), e.tensor.data().to_vec()))
            .collect();
        for (name, data) in shared {
            if let Ok(id) = p_scaled.id(&name) {
                p_scaled.set_data(id, &data).unwrap();
            }
        }

        let batch = random_batch(&[2, 3, 16, 16], 10);
        let a = run_forward(&with_bam, &mut p_bam, &batch, Mode::Eval, 0).unwrap();
        let b = run_forward(&scaled, &mut p_scaled, &batch, Mode::Eval, 0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
        }
    }

    #[test]
    fn serialized_model_restores_bit_exact_logits() {
        let (spec, mut params) = small_model();
        let json = model_to_json(&spec).unwrap();
        let restored_spec = model_from_json(&json).unwrap();
        assert_eq!(spec, restored_spec);
        assert_eq!(
            arch_hash(&spec).unwrap(),
            arch_hash(&restored_spec).unwrap()
        );

        let mut buf = Vec::new();
        crate::fixture::write_params(&mut buf, arch_hash(&spec).unwrap(), &params).unwrap();
        let mut restored: Params<f64> = init_params(&restored_spec, 999).unwrap();
        crate::fixture::read_params_into(
            &mut buf.as_slice(),
            Some(arch_hash(&restored_spec).unwrap()),
            &mut restored,
        )
        .unwrap();

        let batch = random_batch(&[2, 3, 16, 16], 11);
        let a = run_forward(&spec, &mut params, &batch, Mode::Eval, 0).unwrap();
        let b = run_forward(&restored_spec, &mut restored, &batch, Mode::Eval, 0).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn train_forward_is_reproducible_for_fixed_dropout_seed() {
        let (spec, params) = small_model();
        let batch = random_batch(&[2, 3, 16, 16], 12);
        let mut p1 = params.clone();
        let mut p2 = params.clone();
        let a = run_forward(&spec, &mut p1, &batch, Mode::Train, 5).unwrap();
        let b = run_forward(&spec, &mut p2, &batch, Mode::Train, 5).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = run_forward(&spec, &mut p1, &batch, Mode::Train, 6).unwrap();
        assert!(a.data().iter().zip(c.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn doubling_head_width_doubles_that_layer() {
        let backbone = build_backbone_with_input(8, 3, 16, 16).unwrap();
        let pooled = pooled_features(&backbone).unwrap();
        let head_a = HeadConfig::default_for(pooled, 2);
        let mut head_b = HeadConfig::default_for(pooled, 2);
        head_b.layers[0] = HeadLayer::Dense {
            in_features: pooled,
            out_features: 1024,
            relu: false,
        };
        head_b.layers[4] = HeadLayer::Dense {
            in_features: 1024,
            out_features: 128,
            relu: false,
        };
        let a = attach_head(&backbone, &head_a).unwrap();
        let b = attach_head(&backbone, &head_b).unwrap();
        let backbone_count = param_count(&backbone).unwrap();
        // Isolate the first dense layer's weights (bias-free: batch norm follows).
        let first_a = pooled * 512;
        let first_b = pooled * 1024;
        let rest_a = param_count(&a).unwrap() - backbone_count - first_a;
        let rest_b = param_count(&b).unwrap() - backbone_count - first_b;
        assert_eq!(first_b, 2 * first_a);
        // The follow-on batch norm and second dense scale with the width too.
        assert_eq!(
            rest_b - rest_a,
            (2 * 1024 - 2 * 512) + (1024 * 128 - 512 * 128)
        );
    }
}
