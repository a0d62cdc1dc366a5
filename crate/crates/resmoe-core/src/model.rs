//! Model assembly: a CIFAR-style ResNet-18 baseline (3x3 stem, four
//! stages of two basic blocks, GAP + linear head) and the ResBlock-MoE
//! variant where one stage is replaced by a mixture of bottlenecked
//! expert replicas of that stage, a gate and a projection shortcut.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::constraints::{self, ConstraintConfig, ImportanceTracker};
use crate::moe::{self, EvalMode, GateConfig, GateKind, GateNodes};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};
use crate::{Error, Result};

pub const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeSettings {
    /// Stage to replace, 1..=4.
    pub position: usize,
    pub num_experts: usize,
    pub k: usize,
    pub gate: GateConfig,
    pub constraint: ConstraintConfig,
    /// Expert internal width as a fraction of the stage width; `None`
    /// solves it so k active experts match the replaced stage's MACs.
    pub expert_bottleneck_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_resolution: (usize, usize),
    /// Divides every stage width; 1 = full ResNet-18 widths.
    pub width_divisor: usize,
    pub moe: Option<MoeSettings>,
}

impl ModelConfig {
    pub fn baseline(num_classes: usize) -> Self {
        Self {
            num_classes,
            input_channels: 3,
            input_resolution: (32, 32),
            width_divisor: 1,
            moe: None,
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        let mut w = STAGE_WIDTHS;
        for v in &mut w {
            *v = (*v / self.width_divisor).max(1);
        }
        w
    }

    /// (input channels, output channels, stride) of stage `p` in 1..=4.
    pub fn stage_io(&self, p: usize) -> (usize, usize, usize) {
        let w = self.widths();
        if p == 1 {
            (w[0], w[0], 1)
        } else {
            (w[p - 2], w[p - 1], 2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.width_divisor == 0 {
            return Err(Error::InvalidArgument("width_divisor must be >= 1".into()));
        }
        if let Some(moe) = &self.moe {
            if !(1..=4).contains(&moe.position) {
                return Err(Error::InvalidArgument(format!(
                    "moe position {} out of range 1..=4",
                    moe.position
                )));
            }
            if moe.num_experts < 1 || moe.k < 1 || moe.k > moe.num_experts {
                return Err(Error::InvalidArgument(format!(
                    "invalid expert counts: N = {}, k = {}",
                    moe.num_experts, moe.k
                )));
            }
            if let Some(r) = moe.expert_bottleneck_ratio {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "bottleneck ratio {r} outside (0, 1]"
                    )));
                }
            }
            moe.constraint.validate()?;
        }
        Ok(())
    }
}

// ---- parameter storage ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamTensor<S: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    pub tensors: Vec<ParamTensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self {
            tensors: Vec::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    fn add(&mut self, name: String, shape: Vec<usize>, data: Vec<S>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(ParamTensor { name, shape, data });
        ParamId(self.tensors.len() - 1)
    }
}

/// Per-batchnorm running statistics, updated during training forwards.
#[derive(Debug, Clone)]
pub struct BnState<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: ParamId,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnP {
    gamma: ParamId,
    beta: ParamId,
    state: usize,
}

#[derive(Debug, Clone)]
struct BlockArch {
    conv1: ConvP,
    bn1: BnP,
    conv2: ConvP,
    bn2: BnP,
    proj: Option<(ConvP, BnP)>,
}

#[derive(Debug, Clone)]
struct GateArch {
    conv: Option<ConvP>,
    conv_bias: Option<ParamId>,
    fc_w: ParamId,
    fc_b: ParamId,
}

#[derive(Debug, Clone)]
struct MoeArch {
    experts: Vec<Vec<BlockArch>>,
    gate: GateArch,
    shortcut: (ConvP, BnP),
}

#[derive(Debug, Clone)]
enum Stage {
    Plain(Vec<BlockArch>),
    Moe(MoeArch),
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub bn_states: Vec<BnState<S>>,
    stem_conv: ConvP,
    stem_bn: BnP,
    stages: Vec<Stage>,
    head_w: ParamId,
    head_b: ParamId,
    /// Expert internal width actually used (resolved ratio).
    pub expert_width: Option<usize>,
}

// ---- builder ----

struct Builder<'a, S: Scalar> {
    params: &'a mut ParamStore<S>,
    bn_states: &'a mut Vec<BnState<S>>,
    rng: SeedRng,
}

impl<S: Scalar> Builder<'_, S> {
    fn kaiming_conv(&mut self, name: &str, f: usize, c: usize, k: usize) -> ParamId {
        let fan_in = c * k * k;
        let std = libm::sqrt(2.0 / fan_in as f64);
        let data = (0..f * c * k * k)
            .map(|_| S::from_f64(self.rng.normal() * std))
            .collect();
        self.params.add(String::from(name), vec![f, c, k, k], data)
    }

    fn kaiming_linear(&mut self, name: &str, o: usize, d: usize) -> (ParamId, ParamId) {
        let std = libm::sqrt(2.0 / d as f64);
        let w = (0..o * d)
            .map(|_| S::from_f64(self.rng.normal() * std))
            .collect();
        let wid = self.params.add(format!("{name}.w"), vec![o, d], w);
        let bid = self
            .params
            .add(format!("{name}.b"), vec![o], vec![S::ZERO; o]);
        (wid, bid)
    }

    fn bn(&mut self, name: &str, c: usize) -> BnP {
        let gamma = self
            .params
            .add(format!("{name}.gamma"), vec![c], vec![S::ONE; c]);
        let beta = self
            .params
            .add(format!("{name}.beta"), vec![c], vec![S::ZERO; c]);
        self.bn_states.push(BnState {
            mean: vec![S::ZERO; c],
            var: vec![S::ONE; c],
        });
        BnP {
            gamma,
            beta,
            state: self.bn_states.len() - 1,
        }
    }

    fn conv(&mut self, name: &str, f: usize, c: usize, k: usize, stride: usize) -> ConvP {
        ConvP {
            w: self.kaiming_conv(name, f, c, k),
            stride,
            padding: k / 2,
        }
    }

    /// Basic residual block `cin -> cout`, projection when shape changes.
    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> BlockArch {
        let conv1 = self.conv(&format!("{name}.conv1.w"), cout, cin, 3, stride);
        let bn1 = self.bn(&format!("{name}.bn1"), cout);
        let conv2 = self.conv(&format!("{name}.conv2.w"), cout, cout, 3, 1);
        let bn2 = self.bn(&format!("{name}.bn2"), cout);
        let proj = if stride != 1 || cin != cout {
            let pc = self.conv(&format!("{name}.proj.w"), cout, cin, 1, stride);
            let pb = self.bn(&format!("{name}.proj_bn"), cout);
            Some((pc, pb))
        } else {
            None
        };
        BlockArch {
            conv1,
            bn1,
            conv2,
            bn2,
            proj,
        }
    }

    /// Expert replica of a stage with internal width `w`: the first block
    /// maps `cin -> w` at the stage stride, the second `w -> cout`.
    fn expert(&mut self, name: &str, cin: usize, cout: usize, w: usize, stride: usize) -> Vec<BlockArch> {
        vec![
            self.block(&format!("{name}.block1"), cin, w, stride),
            self.block(&format!("{name}.block2"), w, cout, 1),
        ]
    }
}

/// Expert internal width for a bottleneck ratio, at least 1 channel.
pub fn expert_width_for_ratio(stage_out: usize, ratio: f64) -> Result<usize> {
    let w = libm::round(stage_out as f64 * ratio) as usize;
    if w < 1 {
        return Err(Error::InvalidArgument(format!(
            "bottleneck ratio {ratio} gives zero expert channels"
        )));
    }
    Ok(w.min(stage_out))
}

impl<S: Scalar> Model<S> {
    /// Deterministic build: the same seed yields identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut bn_states = Vec::new();
        let mut b = Builder {
            params: &mut params,
            bn_states: &mut bn_states,
            rng: SeedRng::new(seed),
        };

        let widths = config.widths();
        let stem_conv = b.conv("stem.conv.w", widths[0], config.input_channels, 3, 1);
        let stem_bn = b.bn("stem.bn", widths[0]);

        let mut expert_width = None;
        let mut stages = Vec::new();
        for p in 1..=4 {
            let (cin, cout, stride) = config.stage_io(p);
            match &config.moe {
                Some(moe) if moe.position == p => {
                    let ew = match moe.expert_bottleneck_ratio {
                        Some(r) => expert_width_for_ratio(cout, r)?,
                        None => crate::macs::solve_expert_width(config, moe)?,
                    };
                    expert_width = Some(ew);
                    let experts = (0..moe.num_experts)
                        .map(|i| b.expert(&format!("moe.expert{i}"), cin, cout, ew, stride))
                        .collect();
                    let gate = match moe.gate.kind {
                        GateKind::GapFc => {
                            let (fc_w, fc_b) =
                                b.kaiming_linear("moe.gate.fc", moe.num_experts, cin);
                            GateArch {
                                conv: None,
                                conv_bias: None,
                                fc_w,
                                fc_b,
                            }
                        }
                        GateKind::ConvGapFc => {
                            let gc = moe.gate.conv_channels.unwrap_or(cin);
                            let conv =
                                b.conv("moe.gate.conv.w", gc, cin, moe.gate.conv_kernel, 1);
                            let bias = b.params.add(
                                String::from("moe.gate.conv.b"),
                                vec![gc],
                                vec![S::ZERO; gc],
                            );
                            let (fc_w, fc_b) =
                                b.kaiming_linear("moe.gate.fc", moe.num_experts, gc);
                            GateArch {
                                conv: Some(conv),
                                conv_bias: Some(bias),
                                fc_w,
                                fc_b,
                            }
                        }
                    };
                    let sc = b.conv("moe.shortcut.w", cout, cin, 1, stride);
                    let sb = b.bn("moe.shortcut_bn", cout);
                    stages.push(Stage::Moe(MoeArch {
                        experts,
                        gate,
                        shortcut: (sc, sb),
                    }));
                }
                _ => {
                    stages.push(Stage::Plain(vec![
                        b.block(&format!("stage{p}.block1"), cin, cout, stride),
                        b.block(&format!("stage{p}.block2"), cout, cout, 1),
                    ]));
                }
            }
        }
        let (head_w, head_b) = b.kaiming_linear("head", config.num_classes, widths[3]);

        Ok(Self {
            config: config.clone(),
            params,
            bn_states,
            stem_conv,
            stem_bn,
            stages,
            head_w,
            head_b,
            expert_width,
        })
    }
}

// ---- forward pass ----

/// Gate state captured during one forward pass.
#[derive(Debug, Clone)]
pub struct GateRecord {
    pub logits: NodeId,
    pub dense: NodeId,
    pub sparse: NodeId,
    pub topk: Vec<Vec<usize>>,
    pub mask: Vec<bool>,
    /// Graph node of the per-expert importance used by the soft losses.
    pub importance_node: NodeId,
    /// Same importance as plain numbers, for tracker updates and logging.
    pub importance: Vec<f64>,
}

pub struct ForwardPass<S: Scalar> {
    pub graph: Graph<S>,
    pub logits: NodeId,
    pub gate: Option<GateRecord>,
    /// Graph leaf for each parameter, aligned with `ParamStore`.
    pub param_nodes: Vec<NodeId>,
}

impl<S: Scalar> ForwardPass<S> {
    /// Gradient of parameter `i` after `backward`, zeros if untouched.
    pub fn param_grad(&self, i: usize) -> Option<&[S]> {
        self.graph.grad(self.param_nodes[i])
    }
}

struct Ctx<'a, S: Scalar> {
    graph: Graph<S>,
    param_nodes: Vec<NodeId>,
    bn_states: &'a mut [BnState<S>],
    training: bool,
}

impl<S: Scalar> Ctx<'_, S> {
    fn p(&self, id: ParamId) -> NodeId {
        self.param_nodes[id.0]
    }

    fn conv(&mut self, x: NodeId, c: &ConvP) -> Result<NodeId> {
        let w = self.p(c.w);
        self.graph.conv2d(x, w, None, c.stride, c.padding)
    }

    fn bn(&mut self, x: NodeId, b: &BnP) -> Result<NodeId> {
        let gamma = self.p(b.gamma);
        let beta = self.p(b.beta);
        let st = &mut self.bn_states[b.state];
        self.graph.batchnorm2d(
            x,
            gamma,
            beta,
            &mut st.mean,
            &mut st.var,
            S::from_f64(BN_MOMENTUM),
            S::from_f64(BN_EPS),
            self.training,
        )
    }

    fn block(&mut self, x: NodeId, blk: &BlockArch) -> Result<NodeId> {
        let y = self.conv(x, &blk.conv1)?;
        let y = self.bn(y, &blk.bn1)?;
        let y = self.graph.relu(y)?;
        let y = self.conv(y, &blk.conv2)?;
        let y = self.bn(y, &blk.bn2)?;
        let shortcut = match &blk.proj {
            Some((pc, pb)) => {
                let s = self.conv(x, pc)?;
                self.bn(s, pb)?
            }
            None => x,
        };
        let y = self.graph.add(y, shortcut)?;
        self.graph.relu(y)
    }

    fn blocks(&mut self, mut x: NodeId, blocks: &[BlockArch]) -> Result<NodeId> {
        for blk in blocks {
            x = self.block(x, blk)?;
        }
        Ok(x)
    }
}

impl<S: Scalar> Model<S> {
    /// Run one batch. `tracker` enables hard-constraint masking (training
    /// mode only) and must outlive the batch so the caller can update it
    /// with the returned importances.
    pub fn forward(
        &mut self,
        input: &[S],
        batch: usize,
        training: bool,
        mode: EvalMode,
        tracker: Option<&mut ImportanceTracker>,
    ) -> Result<ForwardPass<S>> {
        let (h, w) = self.config.input_resolution;
        let c = self.config.input_channels;
        if input.len() != batch * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "input has {} values, expected {}x{}x{}x{}",
                input.len(),
                batch,
                c,
                h,
                w
            )));
        }
        let mut graph = Graph::new();
        let x = graph.leaf(&[batch, c, h, w], input.to_vec(), false)?;

        let mut param_nodes = Vec::with_capacity(self.params.len());
        for t in &self.params.tensors {
            param_nodes.push(graph.leaf(&t.shape, t.data.clone(), true)?);
        }

        let mut ctx = Ctx {
            graph,
            param_nodes,
            bn_states: &mut self.bn_states,
            training,
        };

        let mut y = ctx.conv(x, &self.stem_conv)?;
        y = ctx.bn(y, &self.stem_bn)?;
        y = ctx.graph.relu(y)?;

        let mut gate_record = None;
        let moe_cfg = self.config.moe.clone();
        let mut tracker = tracker;
        for stage in &self.stages {
            match stage {
                Stage::Plain(blocks) => {
                    y = ctx.blocks(y, blocks)?;
                }
                Stage::Moe(arch) => {
                    let moe = moe_cfg.as_ref().expect("moe stage without moe config");
                    let rec = forward_moe(
                        &mut ctx,
                        y,
                        arch,
                        moe,
                        mode,
                        training,
                        tracker.as_deref_mut(),
                    )?;
                    y = rec.0;
                    gate_record = Some(rec.1);
                }
            }
        }

        let pooled = ctx.graph.global_avg_pool(y)?;
        let head_w = ctx.p(self.head_w);
        let head_b = ctx.p(self.head_b);
        let logits = ctx.graph.linear(pooled, head_w, Some(head_b))?;

        Ok(ForwardPass {
            graph: ctx.graph,
            logits,
            gate: gate_record,
            param_nodes: ctx.param_nodes,
        })
    }

    pub fn num_experts(&self) -> Option<usize> {
        self.config.moe.as_ref().map(|m| m.num_experts)
    }
}

fn forward_moe<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    x: NodeId,
    arch: &MoeArch,
    moe: &MoeSettings,
    mode: EvalMode,
    training: bool,
    tracker: Option<&mut ImportanceTracker>,
) -> Result<(NodeId, GateRecord)> {
    let n = moe.num_experts;
    let gate_nodes = GateNodes {
        conv_w: arch.gate.conv.map(|c| ctx.p(c.w)),
        conv_b: arch.gate.conv_bias.map(|b| ctx.p(b)),
        fc_w: ctx.p(arch.gate.fc_w),
        fc_b: ctx.p(arch.gate.fc_b),
    };
    let logits = moe::gate_logits(&mut ctx.graph, x, &gate_nodes, moe.gate.kind)?;

    // Hard constraints mask logits before the softmax, training only.
    // Masking proceeds as long as one expert survives; top-k then picks
    // among survivors (a masked expert entering the top-k carries weight
    // exactly zero after renormalization).
    let mask = match tracker {
        Some(tracker) if training && moe.constraint.is_hard() => {
            tracker.effective_mask(&moe.constraint, 1)
        }
        _ => vec![false; n],
    };
    let masked_logits = constraints::mask_logits(&mut ctx.graph, logits, &mask)?;
    let dense = ctx.graph.softmax(masked_logits)?;

    let (weights, topk) = moe::mixing_weights(&mut ctx.graph, dense, moe.k, mode)?;
    let active = moe::active_experts(&topk, n);

    // projection shortcut from layer input to layer output
    let sc = ctx.conv(x, &arch.shortcut.0)?;
    let sc = ctx.bn(sc, &arch.shortcut.1)?;

    let mut expert_outs = vec![None; n];
    for (i, blocks) in arch.experts.iter().enumerate() {
        if active[i] {
            expert_outs[i] = Some(ctx.blocks(x, blocks)?);
        }
    }
    let out = moe::mix_experts(&mut ctx.graph, sc, &expert_outs, weights)?;

    // importance of the batch, from the realized weights by default
    let imp_source = if moe.constraint.dense_importance {
        dense
    } else {
        weights
    };
    let importance_node = ctx.graph.col_sum(imp_source)?;
    let importance: Vec<f64> = ctx
        .graph
        .data(importance_node)
        .iter()
        .map(|v| v.to_f64())
        .collect();

    Ok((
        out,
        GateRecord {
            logits,
            dense,
            sparse: weights,
            topk,
            mask,
            importance_node,
            importance,
        },
    ))
}
