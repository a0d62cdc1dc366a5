//! Analytic multiply-accumulate and parameter accounting.
//!
//! Conventions: conv MACs are F*C*kh*kw*H'*W' per sample, linear MACs are
//! O*D; batchnorm, activations and pooling count zero. MoE stages assume
//! exactly k experts execute. The walk here is independent of the model
//! builder so parameter counts cross-check the built model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, MoeSettings};
use crate::moe::GateKind;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MacComponent {
    pub name: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MacReport {
    pub components: Vec<MacComponent>,
    pub total_macs: u64,
    pub param_count: u64,
    /// MACs of one expert at the MoE stage, when present.
    pub per_expert_macs: Option<u64>,
    pub active_experts: Option<usize>,
}

impl MacReport {
    pub fn total_gmac(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct Cost {
    macs: u64,
    params: u64,
}

impl Cost {
    fn add(self, other: Self) -> Self {
        Self {
            macs: self.macs + other.macs,
            params: self.params + other.params,
        }
    }
}

fn conv_cost(f: usize, c: usize, k: usize, ho: usize, wo: usize) -> Cost {
    Cost {
        macs: (f * c * k * k * ho * wo) as u64,
        params: (f * c * k * k) as u64,
    }
}

fn bn_params(c: usize) -> Cost {
    Cost {
        macs: 0,
        params: 2 * c as u64,
    }
}

/// One basic residual block cin -> cout at the given input resolution.
/// Returns the cost and the output resolution.
fn block_cost(
    cin: usize,
    cout: usize,
    stride: usize,
    h: usize,
    w: usize,
) -> (Cost, (usize, usize)) {
    let ho = conv_out(h, 3, stride, 1);
    let wo = conv_out(w, 3, stride, 1);
    let mut cost = conv_cost(cout, cin, 3, ho, wo)
        .add(bn_params(cout))
        .add(conv_cost(cout, cout, 3, ho, wo))
        .add(bn_params(cout));
    if stride != 1 || cin != cout {
        cost = cost
            .add(conv_cost(cout, cin, 1, ho, wo))
            .add(bn_params(cout));
    }
    (cost, (ho, wo))
}

fn stage_cost(cin: usize, cout: usize, stride: usize, h: usize, w: usize) -> (Cost, (usize, usize)) {
    let (b1, (ho, wo)) = block_cost(cin, cout, stride, h, w);
    let (b2, _) = block_cost(cout, cout, 1, ho, wo);
    (b1.add(b2), (ho, wo))
}

/// Expert replica with internal width `ew`: cin -> ew at the stage stride,
/// then ew -> cout.
fn expert_cost(
    cin: usize,
    cout: usize,
    ew: usize,
    stride: usize,
    h: usize,
    w: usize,
) -> (Cost, (usize, usize)) {
    let (b1, (ho, wo)) = block_cost(cin, ew, stride, h, w);
    let (b2, _) = block_cost(ew, cout, 1, ho, wo);
    (b1.add(b2), (ho, wo))
}

fn gate_cost(moe: &MoeSettings, cin: usize, h: usize, w: usize) -> Cost {
    match moe.gate.kind {
        GateKind::GapFc => Cost {
            macs: (moe.num_experts * cin) as u64,
            params: (moe.num_experts * cin + moe.num_experts) as u64,
        },
        GateKind::ConvGapFc => {
            let gc = moe.gate.conv_channels.unwrap_or(cin);
            let k = moe.gate.conv_kernel;
            let conv = conv_cost(gc, cin, k, conv_out(h, k, 1, k / 2), conv_out(w, k, 1, k / 2));
            Cost {
                macs: conv.macs + (moe.num_experts * gc) as u64,
                params: conv.params
                    + gc as u64
                    + (moe.num_experts * gc + moe.num_experts) as u64,
            }
        }
    }
}

/// Expert internal width solved so that k active experts cost as many MACs
/// as the stage they replace.
pub fn solve_expert_width(config: &ModelConfig, moe: &MoeSettings) -> Result<usize> {
    let (cin, cout, stride) = config.stage_io(moe.position);
    let (h, w) = resolution_at_stage(config, moe.position);
    let (replaced, _) = stage_cost(cin, cout, stride, h, w);
    let mut best = 1;
    let mut best_err = u64::MAX;
    for ew in 1..=cout {
        let (cost, _) = expert_cost(cin, cout, ew, stride, h, w);
        let total = cost.macs * moe.k as u64;
        let err = total.abs_diff(replaced.macs);
        if err < best_err {
            best_err = err;
            best = ew;
        }
    }
    if best < 1 {
        return Err(Error::InvalidArgument(
            "could not solve expert width".into(),
        ));
    }
    Ok(best)
}

/// Input resolution of stage `p` (after the stem and earlier stages).
fn resolution_at_stage(config: &ModelConfig, p: usize) -> (usize, usize) {
    let (mut h, mut w) = config.input_resolution;
    for q in 1..p {
        let (_, _, stride) = config.stage_io(q);
        h = conv_out(h, 3, stride, 1);
        w = conv_out(w, 3, stride, 1);
    }
    (h, w)
}

/// Per-sample MAC and parameter report; MoE stages cost `k` experts.
pub fn count_macs(config: &ModelConfig) -> Result<MacReport> {
    let k = config.moe.as_ref().map(|m| m.k);
    count_macs_with_k(config, k)
}

/// Same report with the number of active experts overridden.
pub fn count_macs_with_k(config: &ModelConfig, k: Option<usize>) -> Result<MacReport> {
    config.validate()?;
    let widths = config.widths();
    let (mut h, mut w) = config.input_resolution;
    let mut components = Vec::new();
    let push = |components: &mut Vec<MacComponent>, name: String, cost: Cost| {
        components.push(MacComponent {
            name,
            macs: cost.macs,
            params: cost.params,
        });
    };

    let stem = conv_cost(widths[0], config.input_channels, 3, h, w).add(bn_params(widths[0]));
    push(&mut components, String::from("stem"), stem);

    let mut per_expert = None;
    let mut active = None;
    for p in 1..=4 {
        let (cin, cout, stride) = config.stage_io(p);
        match &config.moe {
            Some(moe) if moe.position == p => {
                let k = k.unwrap_or(moe.k);
                if k > moe.num_experts {
                    return Err(Error::InvalidArgument(format!(
                        "k = {k} exceeds {} experts",
                        moe.num_experts
                    )));
                }
                let ew = match moe.expert_bottleneck_ratio {
                    Some(r) => crate::model::expert_width_for_ratio(cout, r)?,
                    None => solve_expert_width(config, moe)?,
                };
                push(&mut components, format!("stage{p}.gate"), gate_cost(moe, cin, h, w));
                let ho = conv_out(h, 1, stride, 0);
                let wo = conv_out(w, 1, stride, 0);
                let shortcut = conv_cost(cout, cin, 1, ho, wo).add(bn_params(cout));
                push(&mut components, format!("stage{p}.shortcut"), shortcut);
                let (one_expert, out) = expert_cost(cin, cout, ew, stride, h, w);
                per_expert = Some(one_expert.macs);
                active = Some(k);
                // all N experts hold parameters; only k execute
                for i in 0..moe.num_experts {
                    push(
                        &mut components,
                        format!("stage{p}.expert{i}"),
                        Cost {
                            macs: if i < k { one_expert.macs } else { 0 },
                            params: one_expert.params,
                        },
                    );
                }
                h = out.0;
                w = out.1;
            }
            _ => {
                let (cost, out) = stage_cost(cin, cout, stride, h, w);
                push(&mut components, format!("stage{p}"), cost);
                h = out.0;
                w = out.1;
            }
        }
    }

    let head = Cost {
        macs: (config.num_classes * widths[3]) as u64,
        params: (config.num_classes * widths[3] + config.num_classes) as u64,
    };
    push(&mut components, String::from("head"), head);

    let total_macs = components.iter().map(|c| c.macs).sum();
    let param_count = components.iter().map(|c| c.params).sum();
    Ok(MacReport {
        components,
        total_macs,
        param_count,
        per_expert_macs: per_expert,
        active_experts: active,
    })
}
