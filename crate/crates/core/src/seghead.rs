//! Downstream segmentation head: memory read/fusion via spike-driven Hamming
//! attention, a spike-driven feature pyramid (IntIF neurons, Z = 4), pixel
//! logits, and the cross-entropy + focal losses.
//!
//! Within a clip, frame t attends only to frames before it (the memory),
//! bounded by the bank capacity; frame 0 passes through untouched. The fused
//! output is added residually to the current features.

use crate::blocks::{add_pot, sdha_tape, Conv2d, NetworkConfig, RepConv, Sn, WInit};
use crate::encoder::{Encoder, EncoderConfig, MultiScaleFeatures, MultiScaleNodes};
use crate::error::Result;
use crate::metrics::IouAccum;
use crate::optim::AdamW;
use crate::profiler::InferCtx;
use crate::tape::{NodeId, ParamId, ParamStore, SpikeMode, Tape};
use crate::tensor::{PotentialTensor, SpikeTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::VecDeque;

pub const FPN_Z: u32 = 4;

#[derive(Debug, Clone)]
pub struct SegHeadConfig {
    /// Lateral/pyramid width: 128 for the small variant, 256 for the base.
    pub head_channels: usize,
    pub classes: usize,
    pub focal_gamma: f64,
    /// Memory bank capacity in frames (T-1 = 3 for 4-frame clips).
    pub mem_capacity: usize,
}

impl SegHeadConfig {
    pub fn new(head_channels: usize, classes: usize) -> Self {
        SegHeadConfig {
            head_channels,
            classes,
            focal_gamma: 2.0,
            mem_capacity: 3,
        }
    }
}

/// FIFO ring of previous-frame K/V spike tokens; never contains the frame
/// being fused.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub cap: usize,
    entries: VecDeque<(usize, SpikeTensor, SpikeTensor)>,
}

impl MemoryBank {
    pub fn new(cap: usize) -> Self {
        MemoryBank {
            cap,
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, frame: usize, k: SpikeTensor, v: SpikeTensor) {
        if self.entries.len() == self.cap {
            self.entries.pop_front();
        }
        self.entries.push_back((frame, k, v));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|(f, _, _)| *f).collect()
    }

    /// Concatenated K/V token matrices in FIFO order.
    pub fn concat(&self) -> Option<(SpikeTensor, SpikeTensor)> {
        if self.entries.is_empty() {
            return None;
        }
        let d = self.entries[0].1.dims[1];
        let mut kd = Vec::new();
        let mut vd = Vec::new();
        for (_, k, v) in &self.entries {
            kd.extend_from_slice(&k.data);
            vd.extend_from_slice(&v.data);
        }
        let rows = kd.len() / d;
        Some((
            SpikeTensor {
                dims: vec![rows, d],
                data: kd,
                levels: 2,
            },
            SpikeTensor {
                dims: vec![rows, d],
                data: vd,
                levels: 2,
            },
        ))
    }
}

/// Memory read and fusion: Q from the current frame, K/V from the bank,
/// fused through Hamming attention and added residually.
#[derive(Debug, Clone)]
pub struct MemoryFuse {
    pub d: usize,
    pub cap: usize,
    sn_in: Sn,
    q_proj: RepConv,
    k_proj: RepConv,
    v_proj: RepConv,
    sn_q: Sn,
    sn_k: Sn,
    sn_v: Sn,
    sn_attn: Sn,
    out_conv: Conv2d,
}

impl MemoryFuse {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        cap: usize,
        net: &NetworkConfig,
    ) -> Self {
        let th = net.u_th;
        let wd = net.surrogate_width;
        MemoryFuse {
            d,
            cap,
            sn_in: Sn::new(store, &format!("{name}.sn_in"), th, 2, wd),
            q_proj: RepConv::new(store, rng, &format!("{name}.q"), d, d, 0.02),
            k_proj: RepConv::new(store, rng, &format!("{name}.k"), d, d, 0.02),
            v_proj: RepConv::new(store, rng, &format!("{name}.v"), d, d, 0.02),
            sn_q: Sn::new(store, &format!("{name}.sn_q"), th, 2, wd),
            sn_k: Sn::new(store, &format!("{name}.sn_k"), th, 2, wd),
            sn_v: Sn::new(store, &format!("{name}.sn_v"), th, 2, wd),
            sn_attn: Sn::new(
                store,
                &format!("{name}.sn_attn"),
                2.0 * d as f64 * th,
                2,
                crate::blocks::sn_width(net, 2.0 * d as f64 * th),
            ),
            out_conv: Conv2d::new(
                store,
                rng,
                &format!("{name}.out"),
                d,
                d,
                3,
                1,
                false,
                WInit::TruncNormal(0.02),
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, u4: NodeId) -> NodeId {
        let dims = tape.dims(u4).to_vec();
        let (t, h, w, d) = (dims[0], dims[1], dims[2], dims[3]);
        if t == 1 {
            return u4; // empty bank: passthrough
        }
        let n = h * w;
        let s0 = self.sn_in.forward(tape, u4, None);
        let qh = self.q_proj.forward(tape, s0);
        let kh = self.k_proj.forward(tape, s0);
        let vh = self.v_proj.forward(tape, s0);
        let qs = self.sn_q.forward(tape, qh, None);
        let ks = self.sn_k.forward(tape, kh, None);
        let vs = self.sn_v.forward(tape, vh, None);
        let q2 = tape.reshape(qs, &[t * n, d]);
        let k2 = tape.reshape(ks, &[t * n, d]);
        let v2 = tape.reshape(vs, &[t * n, d]);
        let mut parts = Vec::with_capacity(t - 1);
        for fr in 1..t {
            let q_t = tape.slice_rows(q2, fr * n, (fr + 1) * n);
            let from = fr.saturating_sub(self.cap) * n;
            let k_m = tape.slice_rows(k2, from, fr * n);
            let v_m = tape.slice_rows(v2, from, fr * n);
            parts.push(sdha_tape(tape, q_t, k_m, v_m));
        }
        let pre = tape.concat_rows(&parts);
        let p4 = tape.reshape(pre, &[t - 1, h, w, d]);
        let attn = self.sn_attn.forward(tape, p4, None);
        let o = self.out_conv.forward(tape, attn);
        let o2 = tape.reshape(o, &[(t - 1) * n, d]);
        let zero = tape.input(PotentialTensor::zeros(&[n, d]));
        let padded = tape.concat_rows(&[zero, o2]);
        let padded = tape.reshape(padded, &[t, h, w, d]);
        tape.add(u4, padded)
    }

    /// Inference via an explicit FIFO memory bank; arithmetic matches the
    /// training forward exactly.
    pub fn infer(
        &self,
        store: &ParamStore,
        u4: &PotentialTensor,
        ctx: &mut InferCtx,
        name: &str,
    ) -> PotentialTensor {
        let dims = &u4.dims;
        let (t, h, w, d) = (dims[0], dims[1], dims[2], dims[3]);
        if t == 1 {
            return u4.clone();
        }
        let n = h * w;
        let s0 = self.sn_in.infer(store, u4, None);
        ctx.record_spikes(&format!("{name}.sn_in"), &s0);
        let qh = self.q_proj.infer(store, &s0, ctx, &format!("{name}.q"));
        let kh = self.k_proj.infer(store, &s0, ctx, &format!("{name}.k"));
        let vh = self.v_proj.infer(store, &s0, ctx, &format!("{name}.v"));
        let qs = self.sn_q.infer(store, &qh, None);
        let ks = self.sn_k.infer(store, &kh, None);
        let vs = self.sn_v.infer(store, &vh, None);
        ctx.record_spikes(&format!("{name}.sn_q"), &qs);
        ctx.record_spikes(&format!("{name}.sn_k"), &ks);
        ctx.record_spikes(&format!("{name}.sn_v"), &vs);
        let frame = |s: &SpikeTensor, fr: usize| SpikeTensor {
            dims: vec![n, d],
            data: s.data[fr * n * d..(fr + 1) * n * d].to_vec(),
            levels: 2,
        };
        let mut bank = MemoryBank::new(self.cap);
        bank.push(0, frame(&ks, 0), frame(&vs, 0));
        let mut pre = Vec::with_capacity((t - 1) * n * d);
        for fr in 1..t {
            let (k_m, v_m) = bank.concat().expect("bank non-empty for fr >= 1");
            let q_t = frame(&qs, fr);
            let p = crate::blocks::sdha_prespike(&q_t, &k_m, &v_m);
            let kv_ac = v_m.data.iter().filter(|&&x| x != 0).count() as u64 * d as u64;
            ctx.add_layer(
                &format!("{name}.attn{fr}.kv"),
                (k_m.dims[0] * d * d) as u64,
                kv_ac,
                0,
            );
            let qw = (n * d * d) as u64;
            ctx.add_layer(&format!("{name}.attn{fr}.qw"), qw, qw, 0);
            pre.extend(p.iter().map(|&x| x as f64));
            bank.push(fr, frame(&ks, fr), frame(&vs, fr));
        }
        let p4 = PotentialTensor {
            dims: vec![t - 1, h, w, d],
            data: pre,
        };
        let attn = self.sn_attn.infer(store, &p4, None);
        ctx.record_spikes(&format!("{name}.sn_attn"), &attn);
        let o = self
            .out_conv
            .infer(store, &attn, ctx, &format!("{name}.out"));
        let mut padded = vec![0.0; u4.len()];
        padded[n * d..].copy_from_slice(&o.data);
        add_pot(
            u4,
            &PotentialTensor {
                dims: dims.clone(),
                data: padded,
            },
        )
    }
}

/// SpikeFPN: O_4 = conv(SN(U_4)); O_l = conv(SN(U_l)) + Upsample(O_{l+1});
/// IntIF neurons with Z = 4; nearest-neighbor upsampling (x1 between the two
/// H/16 levels).
#[derive(Debug, Clone)]
pub struct SpikeFpn {
    sn: Vec<Sn>,
    lat: Vec<Conv2d>,
}

impl SpikeFpn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: [usize; 4],
        width: usize,
        net: &NetworkConfig,
    ) -> Self {
        let mut sn = Vec::new();
        let mut lat = Vec::new();
        for (l, &c) in in_ch.iter().enumerate() {
            sn.push(Sn::new(
                store,
                &format!("{name}.sn{}", l + 1),
                net.u_th,
                FPN_Z,
                net.surrogate_width,
            ));
            lat.push(Conv2d::new(
                store,
                rng,
                &format!("{name}.lat{}", l + 1),
                c,
                width,
                3,
                1,
                false,
                WInit::Kaiming(net.conv_gain),
            ));
        }
        SpikeFpn { sn, lat }
    }

    pub fn forward(&self, tape: &mut Tape, f: &MultiScaleNodes) -> [NodeId; 4] {
        let s4 = self.sn[3].forward(tape, f.u4, None);
        let o4 = self.lat[3].forward(tape, s4);
        let s3 = self.sn[2].forward(tape, f.u3, None);
        let l3 = self.lat[2].forward(tape, s3);
        let o3 = tape.add(l3, o4); // levels 4 and 3 share H/16
        let s2 = self.sn[1].forward(tape, f.u2, None);
        let l2 = self.lat[1].forward(tape, s2);
        let u3up = tape.upsample_nearest2(o3);
        let o2 = tape.add(l2, u3up);
        let s1 = self.sn[0].forward(tape, f.u1, None);
        let l1 = self.lat[0].forward(tape, s1);
        let u2up = tape.upsample_nearest2(o2);
        let o1 = tape.add(l1, u2up);
        [o1, o2, o3, o4]
    }

    pub fn infer(
        &self,
        store: &ParamStore,
        f: &MultiScaleFeatures,
        ctx: &mut InferCtx,
        name: &str,
    ) -> [PotentialTensor; 4] {
        let sp = |l: usize, u: &PotentialTensor, ctx: &mut InferCtx| {
            let s = self.sn[l].infer(store, u, None);
            ctx.record_spikes(&format!("{name}.sn{}", l + 1), &s);
            self.lat[l].infer(store, &s, ctx, &format!("{name}.lat{}", l + 1))
        };
        let o4 = sp(3, &f.u4, ctx);
        let o3 = add_pot(&sp(2, &f.u3, ctx), &o4);
        let d2 = o3.dims.clone();
        let up3 = PotentialTensor {
            dims: vec![d2[0], 2 * d2[1], 2 * d2[2], d2[3]],
            data: crate::kernels::upsample_nearest2_fwd(&o3.data, d2[0], d2[1], d2[2], d2[3]),
        };
        let o2 = add_pot(&sp(1, &f.u2, ctx), &up3);
        let d1 = o2.dims.clone();
        let up2 = PotentialTensor {
            dims: vec![d1[0], 2 * d1[1], 2 * d1[2], d1[3]],
            data: crate::kernels::upsample_nearest2_fwd(&o2.data, d1[0], d1[1], d1[2], d1[3]),
        };
        let o1 = add_pot(&sp(0, &f.u1, ctx), &up2);
        [o1, o2, o3, o4]
    }
}

/// Per-level class projections summed at full resolution:
/// y = sum_l Upsample(conv(SN(O_l))).
#[derive(Debug, Clone)]
pub struct SegLogits {
    sn: Vec<Sn>,
    conv: Vec<Conv2d>,
}

impl SegLogits {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        classes: usize,
        net: &NetworkConfig,
    ) -> Self {
        let mut sn = Vec::new();
        let mut conv = Vec::new();
        for l in 0..4 {
            sn.push(Sn::new(
                store,
                &format!("{name}.sn{}", l + 1),
                net.u_th,
                FPN_Z,
                net.surrogate_width,
            ));
            // zero-initialized classifier: training starts from uniform logits
            conv.push(Conv2d::new(
                store,
                rng,
                &format!("{name}.cls{}", l + 1),
                width,
                classes,
                3,
                1,
                false,
                WInit::Zero,
            ));
        }
        SegLogits { sn, conv }
    }

    fn upsample_to(tape: &mut Tape, mut x: NodeId, target_h: usize) -> NodeId {
        while tape.dims(x)[1] < target_h {
            x = tape.upsample_nearest2(x);
        }
        x
    }

    pub fn forward(&self, tape: &mut Tape, pyramid: &[NodeId; 4], full_h: usize) -> NodeId {
        let mut total: Option<NodeId> = None;
        for (l, &o) in pyramid.iter().enumerate() {
            let s = self.sn[l].forward(tape, o, None);
            let c = self.conv[l].forward(tape, s);
            let up = Self::upsample_to(tape, c, full_h);
            total = Some(match total {
                Some(acc) => tape.add(acc, up),
                None => up,
            });
        }
        total.expect("pyramid is non-empty")
    }

    pub fn infer(
        &self,
        store: &ParamStore,
        pyramid: &[PotentialTensor; 4],
        full_h: usize,
        ctx: &mut InferCtx,
        name: &str,
    ) -> PotentialTensor {
        let mut total: Option<PotentialTensor> = None;
        for (l, o) in pyramid.iter().enumerate() {
            let s = self.sn[l].infer(store, o, None);
            ctx.record_spikes(&format!("{name}.sn{}", l + 1), &s);
            let mut c = self.conv[l].infer(store, &s, ctx, &format!("{name}.cls{}", l + 1));
            while c.dims[1] < full_h {
                let d = c.dims.clone();
                c = PotentialTensor {
                    dims: vec![d[0], 2 * d[1], 2 * d[2], d[3]],
                    data: crate::kernels::upsample_nearest2_fwd(&c.data, d[0], d[1], d[2], d[3]),
                };
            }
            total = Some(match total {
                Some(acc) => add_pot(&acc, &c),
                None => c,
            });
        }
        total.expect("pyramid is non-empty")
    }
}

#[derive(Debug, Clone)]
pub struct SegHead {
    pub cfg: SegHeadConfig,
    pub mem: MemoryFuse,
    pub fpn: SpikeFpn,
    pub logits: SegLogits,
}

impl SegHead {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        enc_cfg: &EncoderConfig,
        cfg: &SegHeadConfig,
    ) -> Self {
        // u1..u4 channel widths: 2C, 4C, 8C, S4
        let [_, c2, c3, c4, s4] = enc_cfg.stage_channels();
        let in_ch = [c2, c3, c4, s4];
        SegHead {
            cfg: cfg.clone(),
            mem: MemoryFuse::new(store, rng, "head.mem", s4, cfg.mem_capacity, &enc_cfg.net),
            fpn: SpikeFpn::new(
                store,
                rng,
                "head.fpn",
                in_ch,
                cfg.head_channels,
                &enc_cfg.net,
            ),
            logits: SegLogits::new(
                store,
                rng,
                "head.out",
                cfg.head_channels,
                cfg.classes,
                &enc_cfg.net,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, feats: &MultiScaleNodes, full_h: usize) -> NodeId {
        let fused = self.mem.forward(tape, feats.u4);
        let fused_feats = MultiScaleNodes {
            u4: fused,
            ..*feats
        };
        let pyr = self.fpn.forward(tape, &fused_feats);
        self.logits.forward(tape, &pyr, full_h)
    }

    pub fn infer(
        &self,
        store: &ParamStore,
        feats: &MultiScaleFeatures,
        full_h: usize,
        ctx: &mut InferCtx,
    ) -> PotentialTensor {
        let fused = self.mem.infer(store, &feats.u4, ctx, "head.mem");
        let ff = MultiScaleFeatures {
            u1: feats.u1.clone(),
            u2: feats.u2.clone(),
            u3: feats.u3.clone(),
            u4: fused,
        };
        let pyr = self.fpn.infer(store, &ff, ctx, "head.fpn");
        self.logits.infer(store, &pyr, full_h, ctx, "head.out")
    }

    /// Scalar parameter count mirroring `build` (checked by tests).
    pub fn param_count(enc_cfg: &EncoderConfig, cfg: &SegHeadConfig) -> usize {
        let [_, c2, c3, c4, s4] = enc_cfg.stage_channels();
        let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
        let repconv = |d: usize| conv(1, d, d) + 9 * d + d;
        // 5 SNs (in, q, k, v, attn) + three projections + the 3x3 output conv
        let mem = 5 + 3 * repconv(s4) + conv(3, s4, s4);
        let fpn: usize = [c2, c3, c4, s4]
            .iter()
            .map(|&c| 1 + conv(3, c, cfg.head_channels))
            .sum();
        let out = 4 * (1 + conv(3, cfg.head_channels, cfg.classes));
        mem + fpn + out
    }
}

/// Full downstream model.
pub struct SegModel {
    pub encoder: Encoder,
    pub head: SegHead,
}

pub fn build_seg_model(
    store: &mut ParamStore,
    enc_cfg: &EncoderConfig,
    head_cfg: &SegHeadConfig,
    seed: u64,
) -> Result<SegModel> {
    let encoder = crate::encoder::build_encoder(store, enc_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6ead_c0de);
    let head = SegHead::build(store, &mut rng, enc_cfg, head_cfg);
    Ok(SegModel { encoder, head })
}

impl SegModel {
    pub fn logits_forward(&self, tape: &mut Tape, clip: &PotentialTensor) -> Result<NodeId> {
        let clip_node = tape.input(clip.clone());
        let feats = self.encoder.forward(tape, clip_node, None)?;
        Ok(self.head.forward(tape, &feats, clip.dims[1]))
    }

    pub fn infer_logits(
        &self,
        store: &ParamStore,
        clip: &PotentialTensor,
        ctx: &mut InferCtx,
    ) -> Result<PotentialTensor> {
        let feats = self.encoder.infer(store, clip, None, ctx)?;
        Ok(self.head.infer(store, &feats, clip.dims[1], ctx))
    }

    /// Per-pixel class prediction (argmax over the class axis).
    pub fn predict(
        &self,
        store: &ParamStore,
        clip: &PotentialTensor,
        ctx: &mut InferCtx,
    ) -> Result<Vec<u8>> {
        let logits = self.infer_logits(store, clip, ctx)?;
        Ok(argmax_classes(&logits))
    }
}

pub fn argmax_classes(logits: &PotentialTensor) -> Vec<u8> {
    let k = *logits.dims.last().unwrap();
    logits
        .data
        .chunks(k)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

pub fn one_hot(labels: &[u8], dims: &[usize], k: usize) -> PotentialTensor {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        data[i * k + l as usize] = 1.0;
    }
    let mut d = dims.to_vec();
    d.push(k);
    PotentialTensor { dims: d, data }
}

const LOG_EPS: f64 = 1e-12;

/// -(1 / (T*H*W)) * sum y * log(max(p, eps)).
pub fn ce_loss(tape: &mut Tape, y_onehot: NodeId, probs: NodeId) -> NodeId {
    let dims = tape.dims(probs).to_vec();
    let pixels: usize = dims[..dims.len() - 1].iter().product();
    let cl = tape.clamp_min(probs, LOG_EPS);
    let lp = tape.log(cl);
    let m = tape.mul(y_onehot, lp);
    let s = tape.sum_all(m);
    tape.scale(s, -1.0 / pixels as f64)
}

/// -(1 / (T*H*W)) * sum y * (1 - p)^gamma * log(max(p, eps)).
pub fn focal_loss(tape: &mut Tape, y_onehot: NodeId, probs: NodeId, gamma: f64) -> NodeId {
    let dims = tape.dims(probs).to_vec();
    let pixels: usize = dims[..dims.len() - 1].iter().product();
    let cl = tape.clamp_min(probs, LOG_EPS);
    let lp = tape.log(cl);
    let neg = tape.scale(probs, -1.0);
    let onemp = tape.add_const(neg, 1.0);
    let fw = tape.pow_const(onemp, gamma);
    let wlp = tape.mul(fw, lp);
    let m = tape.mul(y_onehot, wlp);
    let s = tape.sum_all(m);
    tape.scale(s, -1.0 / pixels as f64)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FinetuneMetrics {
    pub ce: f64,
    pub focal: f64,
    pub total: f64,
    pub miou_batch: f64,
}

/// One finetuning step: total loss = CE + focal (unit weights), one AdamW
/// update, optional encoder freeze (frozen parameters receive no update).
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    store: &mut ParamStore,
    model: &SegModel,
    batch: &[(PotentialTensor, Vec<u8>)],
    opt: &mut AdamW,
    lr: f64,
    freeze_encoder: bool,
) -> Result<FinetuneMetrics> {
    let gamma = model.head.cfg.focal_gamma;
    let k = model.head.cfg.classes;
    let results: Vec<_> = batch
        .par_iter()
        .map(|(clip, labels)| -> Result<_> {
            let mut tape = Tape::new(store, SpikeMode::Surrogate);
            let logits = model.logits_forward(&mut tape, clip)?;
            let probs = tape.softmax(logits);
            let y = one_hot(labels, &clip.dims[..3], k);
            let yn = tape.input(y);
            let ce = ce_loss(&mut tape, yn, probs);
            let fo = focal_loss(&mut tape, yn, probs, gamma);
            let total = tape.add(ce, fo);
            let (ce_v, fo_v, tot_v) = (
                tape.value(ce).data[0],
                tape.value(fo).data[0],
                tape.value(total).data[0],
            );
            let pred = argmax_classes(tape.value(logits));
            let grads = tape.backward(total);
            let pg = tape.param_grads(&grads);
            Ok((pg, ce_v, fo_v, tot_v, pred))
        })
        .collect();

    let mut merged: std::collections::BTreeMap<ParamId, PotentialTensor> =
        std::collections::BTreeMap::new();
    let mut metrics = FinetuneMetrics::default();
    let mut iou = IouAccum::new(k);
    let n = batch.len() as f64;
    for (r, (_, labels)) in results.into_iter().zip(batch) {
        let (pg, ce_v, fo_v, tot_v, pred) = r?;
        metrics.ce += ce_v / n;
        metrics.focal += fo_v / n;
        metrics.total += tot_v / n;
        iou.add(&pred, labels)?;
        for (id, g) in pg {
            if freeze_encoder && store.name(id).starts_with("enc.") {
                continue;
            }
            match merged.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&g.data) {
                        *a += b / n;
                    }
                }
                None => {
                    let mut g = g;
                    g.data.iter_mut().for_each(|v| *v /= n);
                    merged.insert(id, g);
                }
            }
        }
    }
    metrics.miou_batch = iou.miou()?;
    opt.step(store, &merged, lr)?;
    Ok(metrics)
}
