//! Reverse-mode differentiation tape over the engine's primitive ops.
//!
//! The forward pass records one node per primitive; `backward` visits nodes
//! in exact reverse order and accumulates gradients for every parameter.
//! Spiking nonlinearities run in one of two modes:
//!
//! * `Surrogate` (production): hard thresholding forward, ATan surrogate
//!   backward (straight-through on the value, ATan on the Jacobian). The
//!   temporal recurrence (BPTT) is unrolled inside the `TemporalSpike` op,
//!   including the soft-reset path.
//! * `Relaxation` (verification only): every Heaviside gate is replaced by
//!   its smooth ATan primitive so the whole forward is differentiable and
//!   finite differences apply. Never used for reported metrics.

use crate::error::{EngineError, Result};
use crate::kernels;
use crate::neuron::{atan_primitive, atan_surrogate};
use crate::tensor::PotentialTensor;
use std::collections::BTreeMap;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    Surrogate,
    Relaxation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors. Registration order is deterministic and defines
/// the optimizer state layout and checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<PotentialTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: PotentialTensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &PotentialTensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut PotentialTensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar parameter count, optionally restricted to a name prefix.
    pub fn scalar_count(&self, prefix: Option<&str>) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| prefix.is_none_or(|p| n.starts_with(p)))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &PotentialTensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }
}

enum Op {
    Input,
    // payloads kept for debuggability even where backward doesn't read them
    #[allow(dead_code)]
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    #[allow(dead_code)]
    AddConst(NodeId, f64),
    MulScalar(NodeId, NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Matmul(NodeId, NodeId),
    Transpose2d(NodeId),
    ConvDense {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    },
    ConvDepthwise {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    },
    TemporalSpike {
        x: NodeId,
        beta: NodeId,
        theta: f64,
        z: u32,
        width: f64,
        saved_h: Vec<f64>,
    },
    Softmax(NodeId),
    Log(NodeId),
    ClampMin(NodeId, f64),
    PowConst(NodeId, f64),
    SumAll(NodeId),
    AddBiasRow {
        x: NodeId,
        b: NodeId,
    },
    BcastMulSite {
        x: NodeId,
        m: NodeId,
    },
    BroadcastChannels {
        v: NodeId,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        from: usize,
        to: usize,
    },
    UpsampleNearest2(NodeId),
    GlobalAvgPool(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Reshape(NodeId),
    PatchToImage {
        x: NodeId,
        h16: usize,
        w16: usize,
        patch: usize,
        c: usize,
    },
}

struct Node {
    value: PotentialTensor,
    op: Op,
}

pub struct Tape<'a> {
    pub store: &'a ParamStore,
    pub mode: SpikeMode,
    /// Include the soft-reset path in BPTT (production behavior). Exposed so
    /// tests can assert the path is actually wired.
    pub reset_path_grad: bool,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<usize, NodeId>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn node(&self, id: NodeId) -> Option<&Vec<f64>> {
        self.by_node[id].as_ref()
    }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore, mode: SpikeMode) -> Self {
        Tape {
            store,
            mode,
            reset_path_grad: true,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: PotentialTensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &PotentialTensor {
        &self.nodes[id].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].value.dims
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: PotentialTensor) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id.0) {
            return n;
        }
        let n = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_nodes.insert(id.0, n);
        n
    }

    fn zip_same(&self, a: NodeId, b: NodeId) -> (usize, Vec<usize>) {
        assert_eq!(self.dims(a), self.dims(b), "elementwise op shape mismatch");
        (self.nodes[a].value.len(), self.dims(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, dims) = self.zip_same(a, b);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(self.nodes[a].value.data[i] + self.nodes[b].value.data[i]);
        }
        self.push(PotentialTensor { dims, data }, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, dims) = self.zip_same(a, b);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(self.nodes[a].value.data[i] - self.nodes[b].value.data[i]);
        }
        self.push(PotentialTensor { dims, data }, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, dims) = self.zip_same(a, b);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(self.nodes[a].value.data[i] * self.nodes[b].value.data[i]);
        }
        self.push(PotentialTensor { dims, data }, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let dims = self.dims(a).to_vec();
        let data = self.nodes[a].value.data.iter().map(|v| v * c).collect();
        self.push(PotentialTensor { dims, data }, Op::ScaleConst(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let dims = self.dims(a).to_vec();
        let data = self.nodes[a].value.data.iter().map(|v| v + c).collect();
        self.push(PotentialTensor { dims, data }, Op::AddConst(a, c))
    }

    /// Tensor times a scalar node (shape [1]).
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s].value.len(), 1);
        let sv = self.nodes[s].value.data[0];
        let dims = self.dims(a).to_vec();
        let data = self.nodes[a].value.data.iter().map(|v| v * sv).collect();
        self.push(PotentialTensor { dims, data }, Op::MulScalar(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let dims = self.dims(a).to_vec();
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.push(PotentialTensor { dims, data }, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let dims = self.dims(a).to_vec();
        let data = self.nodes[a]
            .value
            .data
            .iter()
            .map(|&v| gelu_fwd(v))
            .collect();
        self.push(PotentialTensor { dims, data }, Op::Gelu(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.dims(a)[0], self.dims(a)[1]);
        let (k2, n) = (self.dims(b)[0], self.dims(b)[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let data = kernels::matmul_fwd(
            &self.nodes[a].value.data,
            m,
            k,
            &self.nodes[b].value.data,
            n,
        );
        self.push(
            PotentialTensor {
                dims: vec![m, n],
                data,
            },
            Op::Matmul(a, b),
        )
    }

    pub fn transpose2d(&mut self, a: NodeId) -> NodeId {
        let (m, n) = (self.dims(a)[0], self.dims(a)[1]);
        let data = kernels::transpose2d(&self.nodes[a].value.data, m, n);
        self.push(
            PotentialTensor {
                dims: vec![n, m],
                data,
            },
            Op::Transpose2d(a),
        )
    }

    /// Dense conv, same padding. x [T,H,W,Cin], w [K,K,Cin,Cout].
    pub fn conv_dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize) -> NodeId {
        let d = self.dims(x).to_vec();
        let (t, h, wd, cin) = (d[0], d[1], d[2], d[3]);
        let wd_dims = self.dims(w).to_vec();
        let (k, cout) = (wd_dims[0], wd_dims[3]);
        assert_eq!(wd_dims[2], cin, "conv channel mismatch");
        let bias = b.map(|bid| self.nodes[bid].value.data.clone());
        let data = kernels::conv2d_dense_fwd(
            &self.nodes[x].value.data,
            t,
            h,
            wd,
            cin,
            &self.nodes[w].value.data,
            bias.as_deref(),
            k,
            stride,
            cout,
        );
        let (oh, ow) = (
            kernels::conv_out_dim(h, stride),
            kernels::conv_out_dim(wd, stride),
        );
        self.push(
            PotentialTensor {
                dims: vec![t, oh, ow, cout],
                data,
            },
            Op::ConvDense { x, w, b, stride },
        )
    }

    /// Depthwise conv, same padding. x [T,H,W,C], w [K,K,C].
    pub fn conv_depthwise(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
    ) -> NodeId {
        let d = self.dims(x).to_vec();
        let (t, h, wd, c) = (d[0], d[1], d[2], d[3]);
        let k = self.dims(w)[0];
        assert_eq!(self.dims(w)[2], c, "depthwise channel mismatch");
        let bias = b.map(|bid| self.nodes[bid].value.data.clone());
        let data = kernels::conv2d_depthwise_fwd(
            &self.nodes[x].value.data,
            t,
            h,
            wd,
            c,
            &self.nodes[w].value.data,
            bias.as_deref(),
            k,
            stride,
        );
        let (oh, ow) = (
            kernels::conv_out_dim(h, stride),
            kernels::conv_out_dim(wd, stride),
        );
        self.push(
            PotentialTensor {
                dims: vec![t, oh, ow, c],
                data,
            },
            Op::ConvDepthwise { x, w, b, stride },
        )
    }

    /// Temporal spiking over the leading axis of `x` with learnable leak
    /// (scalar node `beta`), threshold `theta`, and alphabet size `z`
    /// (2 = binary LIF, larger = IntIF). Output values in {0..z-1} in
    /// surrogate mode, smooth in relaxation mode.
    pub fn temporal_spike(
        &mut self,
        x: NodeId,
        beta: NodeId,
        theta: f64,
        z: u32,
        width: f64,
    ) -> NodeId {
        assert!(z >= 2);
        let dims = self.dims(x).to_vec();
        let t_steps = dims[0];
        let sites: usize = dims[1..].iter().product();
        let beta_v = self.nodes[beta].value.data[0];
        let xs = &self.nodes[x].value.data;
        let mut saved_h = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        let mut u_prev = vec![0.0; sites];
        for t in 0..t_steps {
            let base = t * sites;
            for i in 0..sites {
                let h = beta_v * u_prev[i] + xs[base + i];
                saved_h[base + i] = h;
                let s = spike_value(h, theta, z, width, self.mode);
                out[base + i] = s;
                u_prev[i] = h - theta * s;
            }
        }
        self.push(
            PotentialTensor { dims, data: out },
            Op::TemporalSpike {
                x,
                beta,
                theta,
                z,
                width,
                saved_h,
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let dims = self.dims(x).to_vec();
        let d = *dims.last().unwrap();
        let xs = &self.nodes[x].value.data;
        let mut out = vec![0.0; xs.len()];
        for (row_o, row_x) in out.chunks_mut(d).zip(xs.chunks(d)) {
            let m = row_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in row_o.iter_mut().zip(row_x) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in row_o.iter_mut() {
                *o /= sum;
            }
        }
        self.push(PotentialTensor { dims, data: out }, Op::Softmax(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let dims = self.dims(x).to_vec();
        let data = self.nodes[x].value.data.iter().map(|v| v.ln()).collect();
        self.push(PotentialTensor { dims, data }, Op::Log(x))
    }

    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> NodeId {
        let dims = self.dims(x).to_vec();
        let data = self.nodes[x].value.data.iter().map(|v| v.max(c)).collect();
        self.push(PotentialTensor { dims, data }, Op::ClampMin(x, c))
    }

    pub fn pow_const(&mut self, x: NodeId, g: f64) -> NodeId {
        let dims = self.dims(x).to_vec();
        let data = self.nodes[x]
            .value
            .data
            .iter()
            .map(|&v| if v <= 0.0 { 0.0 } else { v.powf(g) })
            .collect();
        self.push(PotentialTensor { dims, data }, Op::PowConst(x, g))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data.iter().sum();
        self.push(
            PotentialTensor {
                dims: vec![1],
                data: vec![s],
            },
            Op::SumAll(x),
        )
    }

    /// x [n, d] plus a row vector b [d].
    pub fn add_bias_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let dims = self.dims(x).to_vec();
        let d = *dims.last().unwrap();
        assert_eq!(self.nodes[b].value.len(), d);
        let bv = self.nodes[b].value.data.clone();
        let mut data = self.nodes[x].value.data.clone();
        for row in data.chunks_mut(d) {
            for (v, &bb) in row.iter_mut().zip(&bv) {
                *v += bb;
            }
        }
        self.push(PotentialTensor { dims, data }, Op::AddBiasRow { x, b })
    }

    /// Per-site broadcast multiply: x [..., C] times m [...] (one value per
    /// site, broadcast over the channel axis).
    pub fn bcast_mul_site(&mut self, x: NodeId, m: NodeId) -> NodeId {
        let dims = self.dims(x).to_vec();
        let sites = self.nodes[m].value.len();
        let c = self.nodes[x].value.len() / sites;
        assert_eq!(sites * c, self.nodes[x].value.len(), "site mask mismatch");
        let mut data = self.nodes[x].value.data.clone();
        for (s, chunk) in data.chunks_mut(c).enumerate() {
            let mv = self.nodes[m].value.data[s];
            for v in chunk.iter_mut() {
                *v *= mv;
            }
        }
        self.push(PotentialTensor { dims, data }, Op::BcastMulSite { x, m })
    }

    /// Broadcast a channel vector v [C] to `dims` (last axis C).
    pub fn broadcast_channels(&mut self, v: NodeId, dims: &[usize]) -> NodeId {
        let c = self.nodes[v].value.len();
        assert_eq!(*dims.last().unwrap(), c);
        let sites: usize = dims.iter().product::<usize>() / c;
        let mut data = Vec::with_capacity(sites * c);
        for _ in 0..sites {
            data.extend_from_slice(&self.nodes[v].value.data);
        }
        self.push(
            PotentialTensor {
                dims: dims.to_vec(),
                data,
            },
            Op::BroadcastChannels { v },
        )
    }

    /// Concatenate 2-d blocks [n_i, d] along rows.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let d = self.dims(parts[0])[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.dims(p)[1], d);
            rows += self.dims(p)[0];
            data.extend_from_slice(&self.nodes[p].value.data);
        }
        self.push(
            PotentialTensor {
                dims: vec![rows, d],
                data,
            },
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Concatenate 2-d blocks [n, d_i] along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.dims(parts[0])[0];
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            assert_eq!(self.dims(p)[0], n);
            for r in 0..n {
                data[r * total + off..r * total + off + wd]
                    .copy_from_slice(&self.nodes[p].value.data[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        self.push(
            PotentialTensor {
                dims: vec![n, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let d = self.dims(x)[1];
        let data = self.nodes[x].value.data[from * d..to * d].to_vec();
        self.push(
            PotentialTensor {
                dims: vec![to - from, d],
                data,
            },
            Op::SliceRows { x, from, to },
        )
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let d = self.dims(x).to_vec();
        let data =
            kernels::upsample_nearest2_fwd(&self.nodes[x].value.data, d[0], d[1], d[2], d[3]);
        self.push(
            PotentialTensor {
                dims: vec![d[0], 2 * d[1], 2 * d[2], d[3]],
                data,
            },
            Op::UpsampleNearest2(x),
        )
    }

    /// Mean over (t, h, w) of a [T,H,W,C] tensor, yielding [C].
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let d = self.dims(x).to_vec();
        let c = d[3];
        let sites = d[0] * d[1] * d[2];
        let mut out = vec![0.0; c];
        for chunk in self.nodes[x].value.data.chunks(c) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= sites as f64;
        }
        self.push(
            PotentialTensor {
                dims: vec![c],
                data: out,
            },
            Op::GlobalAvgPool(x),
        )
    }

    /// Layer normalization over the last axis of [n, d].
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let dims = self.dims(x).to_vec();
        let d = *dims.last().unwrap();
        let g = self.nodes[gamma].value.data.clone();
        let b = self.nodes[beta].value.data.clone();
        let xs = &self.nodes[x].value.data;
        let mut out = vec![0.0; xs.len()];
        for (row_o, row_x) in out.chunks_mut(d).zip(xs.chunks(d)) {
            let mean = row_x.iter().sum::<f64>() / d as f64;
            let var = row_x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (i, (o, &v)) in row_o.iter_mut().zip(row_x).enumerate() {
                *o = g[i] * (v - mean) * rstd + b[i];
            }
        }
        self.push(
            PotentialTensor { dims, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        )
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> NodeId {
        let n: usize = dims.iter().product();
        assert_eq!(n, self.nodes[x].value.len(), "reshape element count");
        let data = self.nodes[x].value.data.clone();
        self.push(
            PotentialTensor {
                dims: dims.to_vec(),
                data,
            },
            Op::Reshape(x),
        )
    }

    /// Rearrange per-token patch pixels [T*h16*w16, patch*patch*c] into an
    /// image [T, h16*patch, w16*patch, c].
    pub fn patch_to_image(
        &mut self,
        x: NodeId,
        t: usize,
        h16: usize,
        w16: usize,
        patch: usize,
        c: usize,
    ) -> NodeId {
        let (h, w) = (h16 * patch, w16 * patch);
        let xs = &self.nodes[x].value.data;
        assert_eq!(xs.len(), t * h * w * c);
        let mut out = vec![0.0; xs.len()];
        for ti in 0..t {
            for gh in 0..h16 {
                for gw in 0..w16 {
                    let tok = (ti * h16 + gh) * w16 + gw;
                    for ph in 0..patch {
                        for pw in 0..patch {
                            let src = (tok * patch * patch + ph * patch + pw) * c;
                            let dst = ((ti * h + gh * patch + ph) * w + gw * patch + pw) * c;
                            out[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        }
                    }
                }
            }
        }
        self.push(
            PotentialTensor {
                dims: vec![t, h, w, c],
                data: out,
            },
            Op::PatchToImage {
                x,
                h16,
                w16,
                patch,
                c,
            },
        )
    }

    /// Reverse sweep from `loss` (a [1] node). Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { by_node: grads }
    }

    /// Gradients of every parameter touched by the tape, keyed by ParamId.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<ParamId, PotentialTensor> {
        let mut out = BTreeMap::new();
        for (&pid, &nid) in &self.param_nodes {
            if let Some(g) = grads.node(nid) {
                out.insert(
                    ParamId(pid),
                    PotentialTensor {
                        dims: self.dims(nid).to_vec(),
                        data: g.clone(),
                    },
                );
            }
        }
        out
    }

    fn backprop_node(&self, id: NodeId, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let accum =
            |grads: &mut Vec<Option<Vec<f64>>>, node: NodeId, delta: Vec<f64>| match &mut grads
                [node]
            {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            };
        match &self.nodes[id].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                accum(grads, *a, g.to_vec());
                accum(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.to_vec());
                accum(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value.data;
                let bv = &self.nodes[*b].value.data;
                accum(
                    grads,
                    *a,
                    g.iter().zip(bv).map(|(gv, bv)| gv * bv).collect(),
                );
                accum(
                    grads,
                    *b,
                    g.iter().zip(av).map(|(gv, av)| gv * av).collect(),
                );
            }
            Op::ScaleConst(a, c) => accum(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::AddConst(a, _) => accum(grads, *a, g.to_vec()),
            Op::MulScalar(a, s) => {
                let sv = self.nodes[*s].value.data[0];
                let av = &self.nodes[*a].value.data;
                accum(grads, *a, g.iter().map(|v| v * sv).collect());
                let ds: f64 = g.iter().zip(av).map(|(gv, av)| gv * av).sum();
                accum(grads, *s, vec![ds]);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value.data;
                accum(
                    grads,
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect(),
                );
            }
            Op::Gelu(a) => {
                let xv = &self.nodes[*a].value.data;
                accum(
                    grads,
                    *a,
                    g.iter().zip(xv).map(|(gv, &x)| gv * gelu_grad(x)).collect(),
                );
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                let (da, db) = kernels::matmul_bwd(
                    &self.nodes[*a].value.data,
                    m,
                    k,
                    &self.nodes[*b].value.data,
                    n,
                    g,
                );
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Transpose2d(a) => {
                let (m, n) = (self.dims(*a)[0], self.dims(*a)[1]);
                // output is [n, m]; transpose the gradient back
                accum(grads, *a, kernels::transpose2d(g, n, m));
            }
            Op::ConvDense { x, w, b, stride } => {
                let d = self.dims(*x);
                let (t, h, wd, cin) = (d[0], d[1], d[2], d[3]);
                let wd_dims = self.dims(*w);
                let (k, cout) = (wd_dims[0], wd_dims[3]);
                let (dx, dw, db) = kernels::conv2d_dense_bwd(
                    &self.nodes[*x].value.data,
                    t,
                    h,
                    wd,
                    cin,
                    &self.nodes[*w].value.data,
                    k,
                    *stride,
                    cout,
                    g,
                );
                accum(grads, *x, dx);
                accum(grads, *w, dw);
                if let Some(bid) = b {
                    accum(grads, *bid, db);
                }
            }
            Op::ConvDepthwise { x, w, b, stride } => {
                let d = self.dims(*x);
                let (t, h, wd, c) = (d[0], d[1], d[2], d[3]);
                let k = self.dims(*w)[0];
                let (dx, dw, db) = kernels::conv2d_depthwise_bwd(
                    &self.nodes[*x].value.data,
                    t,
                    h,
                    wd,
                    c,
                    &self.nodes[*w].value.data,
                    k,
                    *stride,
                    g,
                );
                accum(grads, *x, dx);
                accum(grads, *w, dw);
                if let Some(bid) = b {
                    accum(grads, *bid, db);
                }
            }
            Op::TemporalSpike {
                x,
                beta,
                theta,
                z,
                width,
                saved_h,
            } => {
                let dims = self.dims(id);
                let t_steps = dims[0];
                let sites: usize = dims[1..].iter().product();
                let beta_v = self.nodes[*beta].value.data[0];
                let mut dx = vec![0.0; saved_h.len()];
                let mut dbeta = 0.0;
                let mut a_next = vec![0.0; sites];
                for t in (0..t_steps).rev() {
                    let base = t * sites;
                    for i in 0..sites {
                        let h = saved_h[base + i];
                        let sg = surrogate_sum(h, *theta, *z, *width);
                        let ds = g[base + i];
                        let dh = if self.reset_path_grad {
                            ds * sg + a_next[i] * (1.0 - theta * sg)
                        } else {
                            ds * sg + a_next[i]
                        };
                        dx[base + i] = dh;
                        if t > 0 {
                            let h_prev = saved_h[base - sites + i];
                            let s_prev = spike_value(h_prev, *theta, *z, *width, self.mode);
                            let u_prev = h_prev - theta * s_prev;
                            dbeta += dh * u_prev;
                        }
                        a_next[i] = beta_v * dh;
                    }
                }
                accum(grads, *x, dx);
                accum(grads, *beta, vec![dbeta]);
            }
            Op::Softmax(a) => {
                let dims = self.dims(id);
                let d = *dims.last().unwrap();
                let y = &self.nodes[id].value.data;
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for ((o, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                accum(grads, *a, dx);
            }
            Op::Log(a) => {
                let xv = &self.nodes[*a].value.data;
                accum(
                    grads,
                    *a,
                    g.iter().zip(xv).map(|(gv, xv)| gv / xv).collect(),
                );
            }
            Op::ClampMin(a, c) => {
                let xv = &self.nodes[*a].value.data;
                accum(
                    grads,
                    *a,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, xv)| if *xv > *c { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::PowConst(a, p) => {
                let xv = &self.nodes[*a].value.data;
                accum(
                    grads,
                    *a,
                    g.iter()
                        .zip(xv)
                        .map(|(gv, &x)| {
                            if x <= 0.0 {
                                0.0
                            } else {
                                gv * p * x.powf(p - 1.0)
                            }
                        })
                        .collect(),
                );
            }
            Op::SumAll(a) => {
                let n = self.nodes[*a].value.len();
                accum(grads, *a, vec![g[0]; n]);
            }
            Op::AddBiasRow { x, b } => {
                accum(grads, *x, g.to_vec());
                let d = self.nodes[*b].value.len();
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accum(grads, *b, db);
            }
            Op::BcastMulSite { x, m } => {
                let sites = self.nodes[*m].value.len();
                let c = self.nodes[*x].value.len() / sites;
                let xv = &self.nodes[*x].value.data;
                let mv = &self.nodes[*m].value.data;
                let mut dx = vec![0.0; xv.len()];
                let mut dm = vec![0.0; sites];
                for s in 0..sites {
                    let gm = &g[s * c..(s + 1) * c];
                    for i in 0..c {
                        dx[s * c + i] = gm[i] * mv[s];
                        dm[s] += gm[i] * xv[s * c + i];
                    }
                }
                accum(grads, *x, dx);
                accum(grads, *m, dm);
            }
            Op::BroadcastChannels { v } => {
                let c = self.nodes[*v].value.len();
                let mut dv = vec![0.0; c];
                for chunk in g.chunks(c) {
                    for (o, &x) in dv.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                accum(grads, *v, dv);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    accum(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let n = self.dims(id)[0];
                let total = self.dims(id)[1];
                let mut off = 0;
                for &p in parts {
                    let wd = self.dims(p)[1];
                    let mut dp = vec![0.0; n * wd];
                    for r in 0..n {
                        dp[r * wd..(r + 1) * wd]
                            .copy_from_slice(&g[r * total + off..r * total + off + wd]);
                    }
                    accum(grads, p, dp);
                    off += wd;
                }
            }
            Op::SliceRows { x, from, to } => {
                let d = self.dims(*x)[1];
                let mut dx = vec![0.0; self.nodes[*x].value.len()];
                dx[from * d..to * d].copy_from_slice(g);
                accum(grads, *x, dx);
            }
            Op::UpsampleNearest2(x) => {
                let d = self.dims(*x);
                accum(
                    grads,
                    *x,
                    kernels::upsample_nearest2_bwd(g, d[0], d[1], d[2], d[3]),
                );
            }
            Op::GlobalAvgPool(x) => {
                let d = self.dims(*x);
                let c = d[3];
                let sites = (d[0] * d[1] * d[2]) as f64;
                let mut dx = vec![0.0; self.nodes[*x].value.len()];
                for chunk in dx.chunks_mut(c) {
                    for (o, &gv) in chunk.iter_mut().zip(g) {
                        *o = gv / sites;
                    }
                }
                accum(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let dims = self.dims(id);
                let d = *dims.last().unwrap();
                let xv = &self.nodes[*x].value.data;
                let gv = &self.nodes[*gamma].value.data;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (row, (dxr, xr)) in dx.chunks_mut(d).zip(xv.chunks(d)).enumerate() {
                    let gr = &g[row * d..(row + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let mut sum_gy = 0.0;
                    let mut sum_gyx = 0.0;
                    for i in 0..d {
                        let xhat = (xr[i] - mean) * rstd;
                        let gyi = gr[i] * gv[i];
                        sum_gy += gyi;
                        sum_gyx += gyi * xhat;
                        dgamma[i] += gr[i] * xhat;
                        dbeta[i] += gr[i];
                    }
                    for i in 0..d {
                        let xhat = (xr[i] - mean) * rstd;
                        dxr[i] =
                            rstd * (gr[i] * gv[i] - sum_gy / d as f64 - xhat * sum_gyx / d as f64);
                    }
                }
                accum(grads, *x, dx);
                accum(grads, *gamma, dgamma);
                accum(grads, *beta, dbeta);
            }
            Op::Reshape(x) => accum(grads, *x, g.to_vec()),
            Op::PatchToImage {
                x,
                h16,
                w16,
                patch,
                c,
            } => {
                let dims = self.dims(id);
                let (t, h, w) = (dims[0], dims[1], dims[2]);
                let mut dx = vec![0.0; self.nodes[*x].value.len()];
                for ti in 0..t {
                    for gh in 0..*h16 {
                        for gw in 0..*w16 {
                            let tok = (ti * h16 + gh) * w16 + gw;
                            for ph in 0..*patch {
                                for pw in 0..*patch {
                                    let src = (tok * patch * patch + ph * patch + pw) * c;
                                    let dst =
                                        ((ti * h + gh * patch + ph) * w + gw * patch + pw) * c;
                                    dx[src..src + c].copy_from_slice(&g[dst..dst + c]);
                                }
                            }
                        }
                    }
                }
                accum(grads, *x, dx);
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Spike output for a charge `h`: a sum of z-1 threshold gates, hard in
/// surrogate mode and smooth (ATan primitive) in relaxation mode. For z = 2
/// the hard branch is the plain Heaviside; for larger z it equals
/// clamp(floor(h/theta), 0, z-1).
pub fn spike_value(h: f64, theta: f64, z: u32, width: f64, mode: SpikeMode) -> f64 {
    match mode {
        SpikeMode::Surrogate => (h / theta).floor().clamp(0.0, (z - 1) as f64),
        SpikeMode::Relaxation => (1..z)
            .map(|j| atan_primitive(h - j as f64 * theta, width))
            .sum(),
    }
}

/// d(spike)/d(charge): the ATan surrogate summed over the z-1 gates (exact
/// derivative of the relaxation forward).
pub fn surrogate_sum(h: f64, theta: f64, z: u32, width: f64) -> f64 {
    (1..z)
        .map(|j| atan_surrogate(h - j as f64 * theta, width))
        .sum()
}

// --- deterministic initializers ---------------------------------------------

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Normal(0, std) truncated at two standard deviations.
pub fn trunc_normal(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> PotentialTensor {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("std must be positive");
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(v);
        }
    }
    PotentialTensor {
        dims: dims.to_vec(),
        data,
    }
}

/// He-style fan-in scaled init for conv/linear weights.
pub fn kaiming(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize, gain: f64) -> PotentialTensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    trunc_normal(rng, dims, std)
}

pub fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> PotentialTensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    PotentialTensor {
        dims: dims.to_vec(),
        data,
    }
}

/// Validate parameter gradients before an optimizer step.
pub fn check_grads_finite(
    store: &ParamStore,
    grads: &BTreeMap<ParamId, PotentialTensor>,
) -> Result<()> {
    for (id, g) in grads {
        if g.data.iter().any(|v| v.is_nan()) {
            return Err(EngineError::NanGradient(store.name(*id).to_string()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_chain_gradient_is_one() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let x = tape.input(PotentialTensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.add_const(x, 0.0);
        let z = tape.scale(y, 1.0);
        let loss = tape.sum_all(z);
        let grads = tape.backward(loss);
        assert_eq!(grads.node(x).unwrap(), &vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn single_lif_step_backward_is_surrogate() {
        // T=1: dS/dH = atan_surrogate(H - theta)
        let mut store = ParamStore::new();
        let braw = store.add("b", PotentialTensor::from_vec(&[1], vec![0.0]).unwrap());
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let x = tape.input(PotentialTensor::from_vec(&[1, 1], vec![0.7]).unwrap());
        let braw_n = tape.param(braw);
        let beta = tape.sigmoid(braw_n);
        let s = tape.temporal_spike(x, beta, 1.0, 2, 2.0);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss);
        let expected = atan_surrogate(0.7 - 1.0, 2.0);
        assert!((grads.node(x).unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn reset_path_gradient_is_wired() {
        // zeroing the reset-path gradient must change gradients on a 3-step chain
        let mut store = ParamStore::new();
        let braw = store.add("b", PotentialTensor::from_vec(&[1], vec![0.0]).unwrap());
        let xs = PotentialTensor::from_vec(&[3, 1], vec![0.9, 0.8, 0.7]).unwrap();
        let run = |reset: bool| {
            let mut tape = Tape::new(&store, SpikeMode::Surrogate);
            tape.reset_path_grad = reset;
            let x = tape.input(xs.clone());
            let braw_n = tape.param(braw);
            let beta = tape.sigmoid(braw_n);
            let s = tape.temporal_spike(x, beta, 1.0, 2, 2.0);
            let loss = tape.sum_all(s);
            let grads = tape.backward(loss);
            grads.node(x).unwrap().clone()
        };
        let with_reset = run(true);
        let without = run(false);
        assert_ne!(with_reset, without);
    }

    #[test]
    fn relaxation_spike_value_matches_hard_in_the_limit() {
        // wide surrogate approaches the hard gate away from the threshold
        let s_hard = spike_value(1.4, 1.0, 4, 2.0, SpikeMode::Surrogate);
        assert_eq!(s_hard, 1.0);
        let s_soft = spike_value(1.4, 1.0, 4, 200.0, SpikeMode::Relaxation);
        assert!((s_soft - 1.0).abs() < 0.02);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let x = tape.input(
            PotentialTensor::from_vec(&[2, 3], vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0]).unwrap(),
        );
        let y = tape.softmax(x);
        for row in tape.value(y).data.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_backward_runs_are_identical() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = store.add("w", uniform(&mut rng, &[4, 4], -1.0, 1.0));
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let x = tape.input(uniform(&mut rng, &[2, 4], -1.0, 1.0));
        let wn = tape.param(w);
        let y = tape.matmul(x, wn);
        let loss = tape.sum_all(y);
        let g1 = tape.backward(loss);
        let g2 = tape.backward(loss);
        assert_eq!(g1.node(wn), g2.node(wn));
    }

    use rand::SeedableRng;
}
