//! Skeleton graphs and the GCN / ST-GCN-lite backbone classifiers.
//!
//! GCN layer: H ← relu(Â H W + b) with Â the add-self-loop symmetric
//! normalized adjacency, followed by a sum‖max readout over joints and
//! a 2-layer MLP head. ST-GCN-lite factorizes each layer into the same
//! spatial step applied frame-wise plus a depthwise temporal
//! convolution, with a global mean readout.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CglError, Result};
use crate::tensor::{Reduction, Tape, Tensor, VarId};

/// Fixed joint-adjacency structure of a skeleton.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SkeletonGraph {
    pub num_joints: usize,
    pub edges: Vec<(usize, usize)>,
    /// D^{-1/2}(A + I)D^{-1/2}, row-major `num_joints × num_joints`.
    pub normalized_adjacency: Tensor,
}

impl SkeletonGraph {
    pub fn new(num_joints: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_joints == 0 {
            return Err(CglError::InvalidConfig { detail: String::from("num_joints must be > 0") });
        }
        for &(u, v) in &edges {
            if u >= num_joints || v >= num_joints {
                return Err(CglError::InvalidData {
                    detail: format!("edge ({u},{v}) outside [0,{num_joints})"),
                });
            }
        }
        let n = num_joints;
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0; // self loop
        }
        for &(u, v) in &edges {
            a[u * n + v] = 1.0;
            a[v * n + u] = 1.0;
        }
        let deg: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| a[i * n + j]).sum::<f64>())
            .collect();
        let mut norm = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                if a[i * n + j] != 0.0 {
                    norm[i * n + j] = a[i * n + j] / libm::sqrt(deg[i] * deg[j]);
                }
            }
        }
        Ok(SkeletonGraph {
            num_joints,
            edges,
            normalized_adjacency: Tensor::from_vec(vec![n, n], norm)?,
        })
    }

    /// A simple chain skeleton, useful for synthetic data and tests.
    pub fn chain(num_joints: usize) -> Result<Self> {
        let edges = (0..num_joints.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        SkeletonGraph::new(num_joints, edges)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BackboneKind {
    Gcn,
    StgcnLite,
}

/// Backbone shape. `width` is the hidden size of the graph layers;
/// `head_width` stays at its default during width sweeps.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub depth: usize,
    pub width: usize,
    pub head_width: usize,
    pub num_classes: usize,
    /// Per-node feature length: 3·frames for GCN, 3 channels for ST-GCN.
    pub input_feature_length: usize,
    /// Temporal kernel size for ST-GCN-lite.
    pub temporal_kernel: usize,
}

pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_DEPTH: usize = 2;
pub const DEFAULT_TEMPORAL_KERNEL: usize = 9;

impl BackboneConfig {
    pub fn gcn_default(input_feature_length: usize, num_classes: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::Gcn,
            depth: DEFAULT_DEPTH,
            width: DEFAULT_WIDTH,
            head_width: DEFAULT_WIDTH,
            num_classes,
            input_feature_length,
            temporal_kernel: DEFAULT_TEMPORAL_KERNEL,
        }
    }

    pub fn stgcn_default(num_classes: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::StgcnLite,
            depth: DEFAULT_DEPTH,
            width: DEFAULT_WIDTH,
            head_width: DEFAULT_WIDTH,
            num_classes,
            input_feature_length: 3,
            temporal_kernel: DEFAULT_TEMPORAL_KERNEL,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.head_width == 0 {
            return Err(CglError::InvalidConfig {
                detail: format!("depth/width must be >= 1, got depth {} width {}", self.depth, self.width),
            });
        }
        if self.num_classes == 0 || self.input_feature_length == 0 {
            return Err(CglError::InvalidConfig {
                detail: String::from("num_classes and input_feature_length must be >= 1"),
            });
        }
        Ok(())
    }
}

/// A named parameter group. Names are stable across clones so that
/// importance maps keyed by name stay valid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Backbone + head with a stable parameter registry.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Model {
    pub config: BackboneConfig,
    pub params: Vec<Param>,
}

/// Tape bindings of the model parameters for one forward pass,
/// in registry order.
pub struct Bound {
    pub vars: Vec<VarId>,
}

/// Forward-pass byproducts needed by the CL methods: the aggregated
/// message nodes ÂH per graph layer (TWP topology term).
pub struct ForwardTrace {
    pub messages: Vec<VarId>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Build an initialized model; identical seeds give bit-identical
/// parameters.
pub fn build_backbone(config: &BackboneConfig, graph: &SkeletonGraph, seed: u64) -> Result<Model> {
    config.validate()?;
    let _ = graph; // shapes do not depend on the adjacency itself
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let push = |params: &mut Vec<Param>, name: String, shape: Vec<usize>, data: Vec<f64>| {
        let mut t = Tensor::from_vec(shape, data).expect("init shape");
        t.requires_grad = true;
        params.push(Param { name, value: t });
    };

    let mut in_dim = config.input_feature_length;
    for l in 0..config.depth {
        let w = xavier(&mut rng, in_dim, config.width, in_dim * config.width);
        push(&mut params, format!("gcn.{l}.weight"), vec![in_dim, config.width], w);
        push(&mut params, format!("gcn.{l}.bias"), vec![config.width], vec![0.0; config.width]);
        if config.kind == BackboneKind::StgcnLite {
            // sum-normalized depthwise temporal kernel
            let k = config.temporal_kernel;
            push(
                &mut params,
                format!("temporal.{l}.kernel"),
                vec![config.width, k],
                vec![1.0 / k as f64; config.width * k],
            );
        }
        in_dim = config.width;
    }

    // readout length: sum‖max concat for GCN, global mean for ST-GCN
    let readout_len = match config.kind {
        BackboneKind::Gcn => 2 * config.width,
        BackboneKind::StgcnLite => config.width,
    };
    let w1 = xavier(&mut rng, readout_len, config.head_width, readout_len * config.head_width);
    push(&mut params, String::from("head.0.weight"), vec![readout_len, config.head_width], w1);
    push(&mut params, String::from("head.0.bias"), vec![config.head_width], vec![0.0; config.head_width]);
    let w2 = xavier(&mut rng, config.head_width, config.num_classes, config.head_width * config.num_classes);
    push(&mut params, String::from("head.1.weight"), vec![config.head_width, config.num_classes], w2);
    push(&mut params, String::from("head.1.bias"), vec![config.num_classes], vec![0.0; config.num_classes]);

    Ok(Model { config: config.clone(), params })
}

/// Deep copy. Mutating the clone never affects the original.
pub fn clone_model(model: &Model) -> Model {
    model.clone()
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param_index(&self) -> BTreeMap<&str, usize> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.as_str(), i))
            .collect()
    }

    /// Record every parameter on the tape, in registry order.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.leaf(&p.value)).collect() }
    }

    /// Copy leaf gradients from the tape back onto the parameter
    /// tensors, accumulating.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            p.value.accumulate_grad(tape.grad(v));
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }

    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<()> {
        crate::tensor::sgd_step(
            self.params.iter_mut().map(|p| (p.name.as_str(), &mut p.value)),
            learning_rate,
        )
    }

    /// Flatten all gradients into one vector in registry order.
    pub fn flat_grad(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            let g = p.value.grad.as_ref().ok_or_else(|| CglError::MissingGradient {
                name: p.name.clone(),
            })?;
            out.extend_from_slice(g);
        }
        Ok(out)
    }

    /// Overwrite all gradients from one flat vector in registry order.
    pub fn set_flat_grad(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(CglError::InvalidData {
                detail: format!("flat grad length {} != param count {}", flat.len(), self.param_count()),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.grad = Some(flat[off..off + n].to_vec());
            off += n;
        }
        Ok(())
    }

    /// Flatten all parameter values in registry order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(&p.value.data);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(CglError::InvalidData {
                detail: format!("flat param length {} != param count {}", flat.len(), self.param_count()),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

fn find_var(model: &Model, bound: &Bound, name: &str) -> VarId {
    let idx = model
        .params
        .iter()
        .position(|p| p.name == name)
        .expect("parameter registry is stable");
    bound.vars[idx]
}

/// GCN forward over a batch. `features` has shape `[batch, joints, feat]`.
/// Returns the logits node and the per-layer message nodes.
pub fn gcn_forward(
    model: &Model,
    bound: &Bound,
    tape: &mut Tape,
    features: &Tensor,
    graph: &SkeletonGraph,
) -> Result<(VarId, ForwardTrace)> {
    if model.config.kind != BackboneKind::Gcn {
        return Err(CglError::InvalidConfig { detail: String::from("gcn_forward on non-GCN model") });
    }
    if features.shape.len() != 3 || features.shape[1] != graph.num_joints {
        return Err(CglError::ShapeMismatch {
            op: "gcn_forward",
            lhs: features.shape.clone(),
            rhs: vec![graph.num_joints, model.config.input_feature_length],
        });
    }
    if features.shape[2] != model.config.input_feature_length {
        return Err(CglError::ShapeMismatch {
            op: "gcn_forward",
            lhs: features.shape.clone(),
            rhs: vec![graph.num_joints, model.config.input_feature_length],
        });
    }
    let (batch, joints, feat) = (features.shape[0], features.shape[1], features.shape[2]);
    let adj = tape.constant(
        graph.normalized_adjacency.shape.clone(),
        graph.normalized_adjacency.data.clone(),
    );
    // one [batch*joints, feat] leaf, sliced per sample
    let stacked = tape.constant(vec![batch * joints, feat], features.data.clone());

    let mut messages = Vec::new();
    let mut readouts = Vec::with_capacity(batch);
    for s in 0..batch {
        let mut h = tape.slice_rows(stacked, s * joints, joints)?;
        for l in 0..model.config.depth {
            let w = find_var(model, bound, &format!("gcn.{l}.weight"));
            let b = find_var(model, bound, &format!("gcn.{l}.bias"));
            let msg = tape.matmul(adj, h)?;
            messages.push(msg);
            let hw = tape.matmul(msg, w)?;
            let hb = tape.add_row(hw, b)?;
            h = tape.relu(hb);
        }
        let sum = tape.reduce(h, 0, Reduction::Sum)?;
        let max = tape.reduce(h, 0, Reduction::Max)?;
        let readout = tape.concat(&[sum, max])?;
        readouts.push(readout);
    }
    let pooled = tape.stack_rows(&readouts)?;
    let logits = head_forward(model, bound, tape, pooled)?;
    Ok((logits, ForwardTrace { messages }))
}

/// ST-GCN-lite forward. `sequence` has shape `[batch, frames, joints, 3]`.
pub fn stgcn_lite_forward(
    model: &Model,
    bound: &Bound,
    tape: &mut Tape,
    sequence: &Tensor,
    graph: &SkeletonGraph,
) -> Result<(VarId, ForwardTrace)> {
    if model.config.kind != BackboneKind::StgcnLite {
        return Err(CglError::InvalidConfig {
            detail: String::from("stgcn_lite_forward on non-ST-GCN model"),
        });
    }
    if sequence.shape.len() != 4
        || sequence.shape[2] != graph.num_joints
        || sequence.shape[3] != 3
    {
        return Err(CglError::ShapeMismatch {
            op: "stgcn_lite_forward",
            lhs: sequence.shape.clone(),
            rhs: vec![graph.num_joints, 3],
        });
    }
    let (batch, frames, joints) = (sequence.shape[0], sequence.shape[1], sequence.shape[2]);
    if frames < model.config.temporal_kernel {
        return Err(CglError::InvalidConfig {
            detail: format!(
                "stgcn_lite_forward: {frames} frames < temporal kernel {}",
                model.config.temporal_kernel
            ),
        });
    }
    let adj = tape.constant(
        graph.normalized_adjacency.shape.clone(),
        graph.normalized_adjacency.data.clone(),
    );
    let width = model.config.width;
    let mut messages = Vec::new();
    let mut readouts = Vec::with_capacity(batch);
    for s in 0..batch {
        // frame-major [frames, joints*channels]
        let sample = &sequence.data[s * frames * joints * 3..(s + 1) * frames * joints * 3];
        let mut frame_vars: Vec<VarId> = (0..frames)
            .map(|t| {
                tape.constant(
                    vec![joints, 3],
                    sample[t * joints * 3..(t + 1) * joints * 3].to_vec(),
                )
            })
            .collect();
        for l in 0..model.config.depth {
            let w = find_var(model, bound, &format!("gcn.{l}.weight"));
            let b = find_var(model, bound, &format!("gcn.{l}.bias"));
            let kern = find_var(model, bound, &format!("temporal.{l}.kernel"));
            // spatial step per frame
            let mut spatial = Vec::with_capacity(frames);
            for &f in &frame_vars {
                let msg = tape.matmul(adj, f)?;
                messages.push(msg);
                let hw = tape.matmul(msg, w)?;
                let hb = tape.add_row(hw, b)?;
                spatial.push(tape.relu(hb));
            }
            // temporal step: depthwise conv along frames per joint-channel
            let time_major = tape.stack_rows(&spatial)?; // [frames, joints*width]
            let conv = tape.conv_time(time_major, kern, width)?;
            // back to [joints, width] frames for the next spatial step
            frame_vars = (0..frames)
                .map(|t| {
                    let row = tape.slice_rows(conv, t, 1)?;
                    reshape(tape, row, joints, width)
                })
                .collect::<Result<Vec<_>>>()?;
        }
        // global mean over frames and joints
        let all = tape.stack_rows(&frame_vars)?;
        let flat = reshape(tape, all, frames * joints, width)?;
        let mean = tape.reduce(flat, 0, Reduction::Mean)?;
        readouts.push(mean);
    }
    let pooled = tape.stack_rows(&readouts)?;
    let logits = head_forward(model, bound, tape, pooled)?;
    Ok((logits, ForwardTrace { messages }))
}

// Row-major data is reshape-invariant; an identity-scale node carries
// the new shape and passes gradient through.
fn reshape(tape: &mut Tape, v: VarId, rows: usize, cols: usize) -> Result<VarId> {
    let out = tape.scale(v, 1.0);
    tape.set_shape(out, vec![rows, cols])?;
    Ok(out)
}

/// 2-layer MLP head over the pooled readout `[batch, readout_len]`.
fn head_forward(model: &Model, bound: &Bound, tape: &mut Tape, pooled: VarId) -> Result<VarId> {
    let w1 = find_var(model, bound, "head.0.weight");
    let b1 = find_var(model, bound, "head.0.bias");
    let w2 = find_var(model, bound, "head.1.weight");
    let b2 = find_var(model, bound, "head.1.bias");
    let h = tape.matmul(pooled, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let logits = tape.matmul(h, w2)?;
    tape.add_row(logits, b2)
}

/// Forward dispatch on the backbone kind. `input` is `[batch, joints, feat]`
/// for GCN and `[batch, frames, joints, 3]` for ST-GCN-lite.
pub fn forward(
    model: &Model,
    bound: &Bound,
    tape: &mut Tape,
    input: &Tensor,
    graph: &SkeletonGraph,
) -> Result<(VarId, ForwardTrace)> {
    match model.config.kind {
        BackboneKind::Gcn => gcn_forward(model, bound, tape, input, graph),
        BackboneKind::StgcnLite => stgcn_lite_forward(model, bound, tape, input, graph),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_graph() -> SkeletonGraph {
        SkeletonGraph::chain(4).unwrap()
    }

    #[test]
    fn normalized_adjacency_symmetric() {
        let g = SkeletonGraph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]).unwrap();
        let n = g.num_joints;
        let a = &g.normalized_adjacency.data;
        let mut max_asym = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                max_asym = max_asym.max((a[i * n + j] - a[j * n + i]).abs());
            }
        }
        assert!(max_asym < 1e-12);
        assert!(g.normalized_adjacency.is_finite());
    }

    #[test]
    fn edge_out_of_range_rejected() {
        assert!(SkeletonGraph::new(3, vec![(0, 3)]).is_err());
    }

    #[test]
    fn parameter_count_oracle_default_gcn() {
        // hand count: 156·64 + 64 + 64·64 + 64 + (2·64)·64 + 64 + 64·10 + 10
        let expect = 156 * 64 + 64 + 64 * 64 + 64 + (2 * 64) * 64 + 64 + 64 * 10 + 10;
        let g = SkeletonGraph::chain(20).unwrap();
        let cfg = BackboneConfig::gcn_default(156, 10);
        let m = build_backbone(&cfg, &g, 0).unwrap();
        assert_eq!(m.param_count(), expect);
    }

    #[test]
    fn same_seed_identical_parameters() {
        let g = toy_graph();
        let cfg = BackboneConfig::gcn_default(12, 4);
        let a = build_backbone(&cfg, &g, 42).unwrap();
        let b = build_backbone(&cfg, &g, 42).unwrap();
        assert_eq!(a, b);
        let c = build_backbone(&cfg, &g, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn depth_one_builds_one_graph_layer() {
        let g = toy_graph();
        let mut cfg = BackboneConfig::gcn_default(12, 4);
        cfg.depth = 1;
        let m = build_backbone(&cfg, &g, 0).unwrap();
        let gcn_layers = m.params.iter().filter(|p| p.name.ends_with(".weight") && p.name.starts_with("gcn.")).count();
        assert_eq!(gcn_layers, 1);
    }

    #[test]
    fn zero_depth_rejected() {
        let g = toy_graph();
        let mut cfg = BackboneConfig::gcn_default(12, 4);
        cfg.depth = 0;
        assert!(build_backbone(&cfg, &g, 0).is_err());
    }

    #[test]
    fn param_count_monotone_in_width_and_depth() {
        let g = toy_graph();
        let mut last = 0;
        for width in [32, 64, 128, 256, 512] {
            let mut cfg = BackboneConfig::gcn_default(12, 10);
            cfg.width = width;
            let c = build_backbone(&cfg, &g, 0).unwrap().param_count();
            assert!(c > last);
            last = c;
        }
        let mut last = 0;
        for depth in [1, 2, 4, 8, 16] {
            let mut cfg = BackboneConfig::gcn_default(12, 10);
            cfg.depth = depth;
            let c = build_backbone(&cfg, &g, 0).unwrap().param_count();
            assert!(c > last);
            last = c;
        }
    }

    #[test]
    fn zero_features_give_head_bias_logits() {
        let g = toy_graph();
        let cfg = BackboneConfig::gcn_default(6, 3);
        let model = build_backbone(&cfg, &g, 1).unwrap();
        let feats = Tensor::zeros(vec![2, 4, 6]);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (logits, _) = gcn_forward(&model, &bound, &mut tape, &feats, &g).unwrap();
        // zero input, zero biases in graph layers → readout zero → logits
        // = head path of zero vector = b2 (since b1 = 0 and relu(0) = 0)
        let b2 = &model.params.last().unwrap().value.data;
        for r in 0..2 {
            for (c, &b) in b2.iter().enumerate() {
                assert!((tape.value(logits)[r * 3 + c] - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gcn_permutation_equivariance() {
        let g = SkeletonGraph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (1, 3)]).unwrap();
        let cfg = BackboneConfig::gcn_default(9, 4);
        let model = build_backbone(&cfg, &g, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..2 * 5 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feats = Tensor::from_vec(vec![2, 5, 9], data.clone()).unwrap();

        let perm = [3usize, 0, 4, 1, 2]; // new position of each joint
        let pedges: Vec<(usize, usize)> = g.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let pg = SkeletonGraph::new(5, pedges).unwrap();
        let mut pdata = vec![0.0; data.len()];
        for s in 0..2 {
            for j in 0..5 {
                for f in 0..9 {
                    pdata[s * 45 + perm[j] * 9 + f] = data[s * 45 + j * 9 + f];
                }
            }
        }
        let pfeats = Tensor::from_vec(vec![2, 5, 9], pdata).unwrap();

        let mut tape1 = Tape::new();
        let b1 = model.bind(&mut tape1);
        let (l1, _) = gcn_forward(&model, &b1, &mut tape1, &feats, &g).unwrap();
        let mut tape2 = Tape::new();
        let b2 = model.bind(&mut tape2);
        let (l2, _) = gcn_forward(&model, &b2, &mut tape2, &pfeats, &pg).unwrap();
        for (a, b) in tape1.value(l1).iter().zip(tape2.value(l2)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stgcn_permutation_equivariance_and_shape() {
        let g = SkeletonGraph::new(4, vec![(0, 1), (1, 2), (2, 3)]).unwrap();
        let mut cfg = BackboneConfig::stgcn_default(10);
        cfg.width = 8;
        cfg.head_width = 8;
        let model = build_backbone(&cfg, &g, 3).unwrap();
        let frames = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..frames * 4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seq = Tensor::from_vec(vec![1, frames, 4, 3], data.clone()).unwrap();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let (logits, _) = stgcn_lite_forward(&model, &bound, &mut tape, &seq, &g).unwrap();
        assert_eq!(tape.shape(logits), &[1, 10]);
        assert!(tape.value(logits).iter().all(|v| v.is_finite()));

        let perm = [2usize, 0, 3, 1];
        let pedges: Vec<(usize, usize)> = g.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let pg = SkeletonGraph::new(4, pedges).unwrap();
        let mut pdata = vec![0.0; data.len()];
        for t in 0..frames {
            for j in 0..4 {
                for d in 0..3 {
                    pdata[t * 12 + perm[j] * 3 + d] = data[t * 12 + j * 3 + d];
                }
            }
        }
        let pseq = Tensor::from_vec(vec![1, frames, 4, 3], pdata).unwrap();
        let mut tape2 = Tape::new();
        let b2 = model.bind(&mut tape2);
        let (l2, _) = stgcn_lite_forward(&model, &b2, &mut tape2, &pseq, &pg).unwrap();
        for (a, b) in tape.value(logits).iter().zip(tape2.value(l2)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stgcn_too_few_frames_rejected() {
        let g = toy_graph();
        let cfg = BackboneConfig::stgcn_default(4);
        let model = build_backbone(&cfg, &g, 0).unwrap();
        let seq = Tensor::zeros(vec![1, 4, 4, 3]); // 4 frames < kernel 9
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        assert!(stgcn_lite_forward(&model, &bound, &mut tape, &seq, &g).is_err());
    }

    #[test]
    fn clone_is_independent_and_idempotent() {
        let g = toy_graph();
        let cfg = BackboneConfig::gcn_default(6, 3);
        let model = build_backbone(&cfg, &g, 9).unwrap();
        let mut c = clone_model(&model);
        let cc = clone_model(&c);
        assert_eq!(c, cc);
        c.params[0].value.data[0] += 1.0;
        assert_ne!(c, model);
        let again = clone_model(&model);
        assert_eq!(again, model);
    }

    #[test]
    fn readout_length_is_twice_width() {
        let g = toy_graph();
        let cfg = BackboneConfig::gcn_default(6, 3);
        let model = build_backbone(&cfg, &g, 0).unwrap();
        let h0 = model.params.iter().find(|p| p.name == "head.0.weight").unwrap();
        assert_eq!(h0.value.shape[0], 2 * cfg.width);
    }
}
