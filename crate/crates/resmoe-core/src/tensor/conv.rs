//! Direct 2-D cross-correlation, forward and backward.
//!
//! No im2col, no external kernels: loops over output positions with the
//! valid input window precomputed, which is fast enough at desk scale and
//! trivially auditable against the nested-sum definition.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, NodeId, Op};
use crate::scalar::Scalar;
use crate::{Error, Result};

pub(super) fn forward<S: Scalar>(
    graph: &mut Graph<S>,
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    let xs = graph.shape(x).to_vec();
    let ws = graph.shape(w).to_vec();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input {xs:?} and weight {ws:?} must be rank 4"
        )));
    }
    let (batch, cin, h, win) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wc != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input has {cin} channels but weight {ws:?} expects {wc}"
        )));
    }
    if kh > h + 2 * padding || kw > win + 2 * padding {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            win + 2 * padding
        )));
    }
    if let Some(b) = b {
        if graph.shape(b) != [f] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: bias shape {:?}, expected [{f}]",
                graph.shape(b)
            )));
        }
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (win + 2 * padding - kw) / stride + 1;

    let xd = &graph.nodes[x.0].data;
    let wd = &graph.nodes[w.0].data;
    let mut out = vec![S::ZERO; batch * f * ho * wo];
    for bi in 0..batch {
        for fi in 0..f {
            let bias = b.map_or(S::ZERO, |b| graph.nodes[b.0].data[fi]);
            for oh in 0..ho {
                let ih0 = (oh * stride) as isize - padding as isize;
                for ow in 0..wo {
                    let iw0 = (ow * stride) as isize - padding as isize;
                    let mut acc = bias;
                    for ci in 0..cin {
                        let xbase = (bi * cin + ci) * h * win;
                        let wbase = (fi * cin + ci) * kh * kw;
                        for r in 0..kh {
                            let ih = ih0 + r as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * win;
                            let wrow = wbase + r * kw;
                            for cq in 0..kw {
                                let iw = iw0 + cq as isize;
                                if iw < 0 || iw >= win as isize {
                                    continue;
                                }
                                acc += xd[xrow + iw as usize] * wd[wrow + cq];
                            }
                        }
                    }
                    out[((bi * f + fi) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    let mut ids = vec![x, w];
    ids.extend(b);
    let rg = graph.requires(&ids);
    graph.push_checked(
        vec![batch, f, ho, wo],
        out,
        rg,
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
        },
        "conv2d",
    )
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<S: Scalar>(
    graph: &Graph<S>,
    node: usize,
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    stride: usize,
    padding: usize,
    g: &[S],
    dl: &mut [Option<Vec<S>>],
) {
    let xs = &graph.nodes[x.0].shape;
    let ws = &graph.nodes[w.0].shape;
    let os = &graph.nodes[node].shape;
    let (batch, cin, h, win) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (ho, wo) = (os[2], os[3]);

    let xd = &graph.nodes[x.0].data;
    let wd = &graph.nodes[w.0].data;
    let need_dx = graph.nodes[x.0].requires_grad;
    let need_dw = graph.nodes[w.0].requires_grad;

    let mut dx = vec![S::ZERO; xd.len()];
    let mut dw = vec![S::ZERO; wd.len()];
    for bi in 0..batch {
        for fi in 0..f {
            for oh in 0..ho {
                let ih0 = (oh * stride) as isize - padding as isize;
                for ow in 0..wo {
                    let gv = g[((bi * f + fi) * ho + oh) * wo + ow];
                    if gv == S::ZERO {
                        continue;
                    }
                    let iw0 = (ow * stride) as isize - padding as isize;
                    for ci in 0..cin {
                        let xbase = (bi * cin + ci) * h * win;
                        let wbase = (fi * cin + ci) * kh * kw;
                        for r in 0..kh {
                            let ih = ih0 + r as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * win;
                            let wrow = wbase + r * kw;
                            for cq in 0..kw {
                                let iw = iw0 + cq as isize;
                                if iw < 0 || iw >= win as isize {
                                    continue;
                                }
                                if need_dx {
                                    dx[xrow + iw as usize] += gv * wd[wrow + cq];
                                }
                                if need_dw {
                                    dw[wrow + cq] += gv * xd[xrow + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    graph.accumulate(dl, x, dx);
    graph.accumulate(dl, w, dw);
    if let Some(b) = b {
        if graph.nodes[b.0].requires_grad {
            let mut db = vec![S::ZERO; f];
            for bi in 0..batch {
                for fi in 0..f {
                    let base = (bi * f + fi) * ho * wo;
                    for i in 0..ho * wo {
                        db[fi] += g[base + i];
                    }
                }
            }
            graph.accumulate(dl, b, db);
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Graph;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn all_ones_full_window_sums_to_nine() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[1, 1, 3, 3], vec![1.0; 9], false).unwrap();
        let w = g.leaf(&[1, 1, 3, 3], vec![1.0; 9], false).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.data(y), &[9.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut g: Graph<f64> = Graph::new();
        let input: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = g.leaf(&[1, 1, 4, 4], input.clone(), false).unwrap();
        let w = g.leaf(&[1, 1, 1, 1], vec![1.0], false).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.data(y), input.as_slice());
    }

    #[test]
    fn output_shape_formula() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[2, 3, 5, 5], vec![0.0; 150], false).unwrap();
        let w = g.leaf(&[4, 3, 3, 3], vec![0.0; 108], false).unwrap();
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        // H' = floor((5 + 2 - 3)/2) + 1 = 3
        assert_eq!(g.shape(y), &[2, 4, 3, 3]);
    }

    #[test]
    fn channel_mismatch_reports_both_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[1, 2, 4, 4], vec![0.0; 32], false).unwrap();
        let w = g.leaf(&[1, 3, 3, 3], vec![0.0; 27], false).unwrap();
        let err = g.conv2d(x, w, None, 1, 0).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains('2') && msg.contains('3'), "{msg}");
    }
}
