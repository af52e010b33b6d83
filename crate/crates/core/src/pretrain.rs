//! Masked-autoencoding pretraining: mask-embedding fill, a plain dense ViT
//! decoder, masked-pixel reconstruction loss, and teacher-aligned feature
//! distillation through a convolutional adapter.
//!
//! The decoder and the adapter exist only during pretraining; the exported
//! checkpoint carries encoder weights alone.

use crate::blocks::{Conv2d, WInit};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{EngineError, Result};
use crate::masking::TubeMaskSet;
use crate::optim::AdamW;
use crate::tape::{trunc_normal, NodeId, ParamId, ParamStore, SpikeMode, Tape};
use crate::tensor::{PotentialTensor, SpikeTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

/// Decoder geometry: an 8-layer dense transformer over joint space-time
/// tokens, one token per 16x16 patch per frame.
#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub t: usize,
    pub h16: usize,
    pub w16: usize,
}

impl DecoderConfig {
    pub fn for_encoder(cfg: &EncoderConfig, t: usize, h: usize, w: usize) -> Self {
        let heads = if cfg.stage4_channels % 8 == 0 && cfg.stage4_channels >= 256 {
            8
        } else {
            4
        };
        DecoderConfig {
            depth: 8,
            dim: cfg.stage4_channels,
            heads,
            t,
            h16: h / 16,
            w16: w / 16,
        }
    }

    pub fn tokens(&self) -> usize {
        self.t * self.h16 * self.w16
    }
}

struct DecHead {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
}

struct DecLayer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    heads: Vec<DecHead>,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    wm1: ParamId,
    bm1: ParamId,
    wm2: ParamId,
    bm2: ParamId,
}

/// Standard dense transformer decoder (softmax attention, real-valued) with
/// learned absolute positional embeddings and a linear patch unprojection to
/// 16x16x3 pixels per token.
pub struct VitDecoder {
    pub cfg: DecoderConfig,
    pos: ParamId,
    layers: Vec<DecLayer>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    wout: ParamId,
    bout: ParamId,
}

impl VitDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &DecoderConfig) -> Self {
        let d = cfg.dim;
        let dh = d / cfg.heads;
        assert!(dh * cfg.heads == d, "heads must divide dim");
        let std = 0.02;
        let ones = |n: usize| PotentialTensor::from_vec(&[n], vec![1.0; n]).unwrap();
        let pos = store.add("dec.pos", trunc_normal(rng, &[cfg.tokens(), d], std));
        let mut layers = Vec::new();
        for l in 0..cfg.depth {
            let p = format!("dec.l{l}");
            let heads = (0..cfg.heads)
                .map(|h| DecHead {
                    wq: store.add(format!("{p}.h{h}.wq"), trunc_normal(rng, &[d, dh], std)),
                    bq: store.add(format!("{p}.h{h}.bq"), PotentialTensor::zeros(&[dh])),
                    wk: store.add(format!("{p}.h{h}.wk"), trunc_normal(rng, &[d, dh], std)),
                    bk: store.add(format!("{p}.h{h}.bk"), PotentialTensor::zeros(&[dh])),
                    wv: store.add(format!("{p}.h{h}.wv"), trunc_normal(rng, &[d, dh], std)),
                    bv: store.add(format!("{p}.h{h}.bv"), PotentialTensor::zeros(&[dh])),
                })
                .collect();
            layers.push(DecLayer {
                ln1_g: store.add(format!("{p}.ln1.g"), ones(d)),
                ln1_b: store.add(format!("{p}.ln1.b"), PotentialTensor::zeros(&[d])),
                heads,
                wo: store.add(format!("{p}.wo"), trunc_normal(rng, &[d, d], std)),
                bo: store.add(format!("{p}.bo"), PotentialTensor::zeros(&[d])),
                ln2_g: store.add(format!("{p}.ln2.g"), ones(d)),
                ln2_b: store.add(format!("{p}.ln2.b"), PotentialTensor::zeros(&[d])),
                wm1: store.add(format!("{p}.wm1"), trunc_normal(rng, &[d, 4 * d], std)),
                bm1: store.add(format!("{p}.bm1"), PotentialTensor::zeros(&[4 * d])),
                wm2: store.add(format!("{p}.wm2"), trunc_normal(rng, &[4 * d, d], std)),
                bm2: store.add(format!("{p}.bm2"), PotentialTensor::zeros(&[d])),
            });
        }
        VitDecoder {
            cfg: cfg.clone(),
            pos,
            layers,
            lnf_g: store.add("dec.lnf.g", ones(d)),
            lnf_b: store.add("dec.lnf.b", PotentialTensor::zeros(&[d])),
            wout: store.add("dec.wout", trunc_normal(rng, &[d, 16 * 16 * 3], std)),
            bout: store.add("dec.bout", PotentialTensor::zeros(&[16 * 16 * 3])),
        }
    }

    fn linear(tape: &mut Tape, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let wn = tape.param(w);
        let bn = tape.param(b);
        let y = tape.matmul(x, wn);
        tape.add_bias_row(y, bn)
    }

    /// tokens [(T*h16*w16), dim] -> reconstructed clip [T, H, W, 3].
    pub fn forward(&self, tape: &mut Tape, tokens: NodeId) -> Result<NodeId> {
        let n = self.cfg.tokens();
        if tape.dims(tokens) != [n, self.cfg.dim] {
            return Err(EngineError::ShapeMismatch {
                expected: format!("[{n}, {}]", self.cfg.dim),
                got: format!("{:?}", tape.dims(tokens)),
            });
        }
        let dh = self.cfg.dim / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let pos = tape.param(self.pos);
        let mut x = tape.add(tokens, pos);
        for layer in &self.layers {
            let g1 = tape.param(layer.ln1_g);
            let b1 = tape.param(layer.ln1_b);
            let h = tape.layer_norm(x, g1, b1, 1e-6);
            let mut head_outs = Vec::with_capacity(self.cfg.heads);
            for hp in &layer.heads {
                let q = Self::linear(tape, h, hp.wq, hp.bq);
                let k = Self::linear(tape, h, hp.wk, hp.bk);
                let v = Self::linear(tape, h, hp.wv, hp.bv);
                let kt = tape.transpose2d(k);
                let sc = tape.matmul(q, kt);
                let sc = tape.scale(sc, scale);
                let attn = tape.softmax(sc);
                head_outs.push(tape.matmul(attn, v));
            }
            let cat = tape.concat_cols(&head_outs);
            let o = Self::linear(tape, cat, layer.wo, layer.bo);
            x = tape.add(x, o);
            let g2 = tape.param(layer.ln2_g);
            let b2 = tape.param(layer.ln2_b);
            let h2 = tape.layer_norm(x, g2, b2, 1e-6);
            let m = Self::linear(tape, h2, layer.wm1, layer.bm1);
            let m = tape.gelu(m);
            let m = Self::linear(tape, m, layer.wm2, layer.bm2);
            x = tape.add(x, m);
        }
        let gf = tape.param(self.lnf_g);
        let bf = tape.param(self.lnf_b);
        let xf = tape.layer_norm(x, gf, bf, 1e-6);
        let pix = Self::linear(tape, xf, self.wout, self.bout);
        Ok(tape.patch_to_image(pix, self.cfg.t, self.cfg.h16, self.cfg.w16, 16, 3))
    }
}

/// Learnable mask embedding, one vector of the latent width.
pub fn new_mask_embedding(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize) -> ParamId {
    store.add("pre.mask_emb", trunc_normal(rng, &[dim], 0.02))
}

/// out = M4 * u4 + (1 - M4) * m, site-wise with channel broadcast.
pub fn fill_masked(tape: &mut Tape, u4: NodeId, m4: &SpikeTensor, emb: ParamId) -> Result<NodeId> {
    let dims = tape.dims(u4).to_vec();
    if dims[..3] != m4.dims[..] {
        return Err(EngineError::ShapeMismatch {
            expected: format!("{:?} x C", m4.dims),
            got: format!("{dims:?}"),
        });
    }
    let keep = tape.input(m4.to_potential());
    let inv = PotentialTensor {
        dims: m4.dims.clone(),
        data: m4.data.iter().map(|&v| 1.0 - v as f64).collect(),
    };
    let inv = tape.input(inv);
    let kept = tape.bcast_mul_site(u4, keep);
    let e = tape.param(emb);
    let eb = tape.broadcast_channels(e, &dims);
    let filled = tape.bcast_mul_site(eb, inv);
    Ok(tape.add(kept, filled))
}

/// Mean squared error over masked pixels only (pixel set from the level-0
/// tube mask; channel differences summed per pixel).
pub fn recon_loss(
    tape: &mut Tape,
    recon: NodeId,
    clip: NodeId,
    m0: &SpikeTensor,
) -> Result<NodeId> {
    let masked_sites = m0.data.iter().filter(|&&v| v == 0).count();
    if masked_sites == 0 {
        return Err(EngineError::DegenerateMask(
            "recon loss needs at least one masked pixel".into(),
        ));
    }
    let omega = PotentialTensor {
        dims: m0.dims.clone(),
        data: m0.data.iter().map(|&v| 1.0 - v as f64).collect(),
    };
    let omega = tape.input(omega);
    let d = tape.sub(recon, clip);
    let d2 = tape.mul(d, d);
    let dm = tape.bcast_mul_site(d2, omega);
    let s = tape.sum_all(dm);
    Ok(tape.scale(s, 1.0 / masked_sites as f64))
}

/// || u4 - adapter(teacher) ||^2, mean over elements. The teacher features
/// enter as a constant: gradients reach the encoder and the adapter, never
/// the teacher.
pub fn kd_loss(
    tape: &mut Tape,
    u4: NodeId,
    teacher_feats: &PotentialTensor,
    adapter: &Conv2d,
) -> Result<NodeId> {
    let tf = tape.input(teacher_feats.clone());
    let aligned = adapter.forward(tape, tf);
    if tape.dims(aligned) != tape.dims(u4) {
        return Err(EngineError::ShapeMismatch {
            expected: format!("{:?}", tape.dims(u4)),
            got: format!("{:?}", tape.dims(aligned)),
        });
    }
    let n = tape.value(u4).len();
    let d = tape.sub(u4, aligned);
    let d2 = tape.mul(d, d);
    let s = tape.sum_all(d2);
    Ok(tape.scale(s, 1.0 / n as f64))
}

// --- teachers ---------------------------------------------------------------

/// A frozen provider of per-clip feature maps at the H/16 scale.
pub trait Teacher: Sync {
    fn channels(&self) -> usize;
    fn features(&self, id: &str, clip: &PotentialTensor) -> Result<PotentialTensor>;
}

/// Frozen random convolutional feature extractor (four 3x3 stride-2 convs
/// with tanh between). Weights live outside the parameter store, so no
/// optimizer can ever touch them.
pub struct RandomConvTeacher {
    weights: Vec<(PotentialTensor, PotentialTensor)>,
    ch: usize,
}

impl RandomConvTeacher {
    pub fn new(seed: u64, ch: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut cin = 3;
        for _ in 0..4 {
            let w = crate::tape::kaiming(&mut rng, &[3, 3, cin, ch], 9 * cin, 1.0);
            let b = PotentialTensor::zeros(&[ch]);
            weights.push((w, b));
            cin = ch;
        }
        RandomConvTeacher { weights, ch }
    }

    /// Stable digest of the frozen weights, for immutability checks.
    pub fn weight_digest(&self) -> u64 {
        let mut acc: u64 = 0xcbf29ce484222325;
        for (w, _) in &self.weights {
            for v in &w.data {
                acc ^= v.to_bits();
                acc = acc.wrapping_mul(0x100000001b3);
            }
        }
        acc
    }
}

impl Teacher for RandomConvTeacher {
    fn channels(&self) -> usize {
        self.ch
    }

    fn features(&self, _id: &str, clip: &PotentialTensor) -> Result<PotentialTensor> {
        let mut x = clip.clone();
        for (w, b) in &self.weights {
            let d = x.dims.clone();
            let cin = d[3];
            let y = crate::kernels::conv2d_dense_fwd(
                &x.data,
                d[0],
                d[1],
                d[2],
                cin,
                &w.data,
                Some(&b.data),
                3,
                2,
                self.ch,
            );
            let (oh, ow) = (
                crate::kernels::conv_out_dim(d[1], 2),
                crate::kernels::conv_out_dim(d[2], 2),
            );
            x = PotentialTensor {
                dims: vec![d[0], oh, ow, self.ch],
                data: y.iter().map(|v| v.tanh()).collect(),
            };
        }
        Ok(x)
    }
}

/// File-backed teacher: reads precomputed features keyed by clip id from a
/// directory of tensor dumps (`<dir>/<id>.spkt`).
pub struct FixtureTeacher {
    pub dir: std::path::PathBuf,
    pub ch: usize,
}

impl Teacher for FixtureTeacher {
    fn channels(&self) -> usize {
        self.ch
    }

    fn features(&self, id: &str, _clip: &PotentialTensor) -> Result<PotentialTensor> {
        let path = self.dir.join(format!("{id}.spkt"));
        let mut f = std::fs::File::open(&path).map_err(|e| EngineError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        crate::tensor::read_potential(&mut f)
    }
}

/// Zero-feature stub teacher (testing aid).
pub struct ZeroTeacher {
    pub ch: usize,
}

impl Teacher for ZeroTeacher {
    fn channels(&self) -> usize {
        self.ch
    }

    fn features(&self, _id: &str, clip: &PotentialTensor) -> Result<PotentialTensor> {
        let d = &clip.dims;
        Ok(PotentialTensor::zeros(&[
            d[0],
            d[1] / 16,
            d[2] / 16,
            self.ch,
        ]))
    }
}

// --- pretraining pipeline -----------------------------------------------

pub struct PretrainModel {
    pub encoder: Encoder,
    pub decoder: VitDecoder,
    pub mask_emb: ParamId,
    pub adapter: Conv2d,
    pub lambda_kd: f64,
    pub alpha: f64,
}

impl PretrainModel {
    pub fn build(
        store: &mut ParamStore,
        enc_cfg: &EncoderConfig,
        t: usize,
        h: usize,
        w: usize,
        teacher_ch: usize,
        lambda_kd: f64,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        let encoder = crate::encoder::build_encoder(store, enc_cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_dec0de);
        let dec_cfg = DecoderConfig::for_encoder(enc_cfg, t, h, w);
        let decoder = VitDecoder::new(store, &mut rng, &dec_cfg);
        let mask_emb = new_mask_embedding(store, &mut rng, enc_cfg.stage4_channels);
        let adapter = Conv2d::new(
            store,
            &mut rng,
            "kd.adapter",
            teacher_ch,
            enc_cfg.stage4_channels,
            3,
            1,
            false,
            WInit::Kaiming(1.0),
        );
        Ok(PretrainModel {
            encoder,
            decoder,
            mask_emb,
            adapter,
            lambda_kd,
            alpha,
        })
    }

    /// Forward + losses for one clip on a fresh tape. Returns
    /// (loss_node, recon_value, kd_value).
    pub fn clip_loss(
        &self,
        tape: &mut Tape,
        clip: &PotentialTensor,
        teacher_feats: Option<&PotentialTensor>,
        masks: &TubeMaskSet,
    ) -> Result<(NodeId, f64, f64)> {
        let clip_node = tape.input(clip.clone());
        let feats = self.encoder.forward(tape, clip_node, Some(masks))?;
        let m4 = &masks.levels[4];
        let filled = fill_masked(tape, feats.u4, m4, self.mask_emb)?;
        let dims = tape.dims(filled).to_vec();
        let tokens = tape.reshape(filled, &[dims[0] * dims[1] * dims[2], dims[3]]);
        let recon = self.decoder.forward(tape, tokens)?;
        let l_rec = recon_loss(tape, recon, clip_node, &masks.levels[0])?;
        let rec_v = tape.value(l_rec).data[0];
        if self.lambda_kd > 0.0 {
            let tf = teacher_feats.ok_or_else(|| {
                EngineError::InvalidConfig("lambda_kd > 0 requires teacher features".into())
            })?;
            let l_kd = kd_loss(tape, feats.u4, tf, &self.adapter)?;
            let kd_v = tape.value(l_kd).data[0];
            let kd_w = tape.scale(l_kd, self.lambda_kd);
            let total = tape.add(l_rec, kd_w);
            Ok((total, rec_v, kd_v))
        } else {
            Ok((l_rec, rec_v, 0.0))
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PretrainMetrics {
    pub recon: f64,
    pub kd: f64,
    pub total: f64,
}

/// One optimizer step over a batch of clips. Masks are freshly sampled per
/// clip per step; per-clip tapes run in parallel and their gradients merge
/// in batch order.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step(
    store: &mut ParamStore,
    model: &PretrainModel,
    teacher: &dyn Teacher,
    batch: &[(String, PotentialTensor)],
    opt: &mut AdamW,
    lr: f64,
    step_seed: u64,
) -> Result<PretrainMetrics> {
    let results: Vec<_> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (id, clip))| -> Result<_> {
            let (t, h, w) = (clip.dims[0], clip.dims[1], clip.dims[2]);
            let masks = TubeMaskSet::sample(
                h / 16,
                w / 16,
                t,
                model.alpha,
                step_seed
                    .wrapping_mul(0x9e3779b97f4a7c15)
                    .wrapping_add(i as u64),
            )?;
            let tfeats = if model.lambda_kd > 0.0 {
                Some(teacher.features(id, clip)?)
            } else {
                None
            };
            let mut tape = Tape::new(store, SpikeMode::Surrogate);
            let (loss, rec, kd) = model.clip_loss(&mut tape, clip, tfeats.as_ref(), &masks)?;
            let total = tape.value(loss).data[0];
            let grads = tape.backward(loss);
            let pg = tape.param_grads(&grads);
            Ok((
                pg,
                PretrainMetrics {
                    recon: rec,
                    kd,
                    total,
                },
            ))
        })
        .collect();

    let mut merged: std::collections::BTreeMap<crate::tape::ParamId, PotentialTensor> =
        std::collections::BTreeMap::new();
    let mut metrics = PretrainMetrics::default();
    let n = batch.len() as f64;
    for r in results {
        let (pg, m) = r?;
        metrics.recon += m.recon / n;
        metrics.kd += m.kd / n;
        metrics.total += m.total / n;
        for (id, g) in pg {
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
    opt.step(store, &merged, lr)?;
    Ok(metrics)
}

/// Export the downstream checkpoint: encoder weights only (the decoder, the
/// mask embedding and the adapter are discarded).
pub fn export_encoder(path: &Path, store: &ParamStore, config_echo: &str) -> Result<()> {
    crate::encoder::save_checkpoint(path, store, Some("enc."), config_echo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiler::InferCtx;
    use crate::tape::uniform;
    use rand::Rng;

    fn small_setup() -> (ParamStore, PretrainModel) {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig::tiny();
        let model = PretrainModel::build(&mut store, &cfg, 2, 32, 32, 8, 0.1, 0.5, 5).unwrap();
        (store, model)
    }

    fn random_clip(seed: u64, t: usize, h: usize, w: usize) -> PotentialTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PotentialTensor::from_vec(
            &[t, h, w, 3],
            (0..t * h * w * 3)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fill_masked_all_kept_and_all_masked() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = new_mask_embedding(&mut store, &mut rng, 3);
        let u = uniform(&mut rng, &[1, 2, 2, 3], -1.0, 1.0);

        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let un = tape.input(u.clone());
        let keep = SpikeTensor::from_vec(&[1, 2, 2], vec![1; 4], 2).unwrap();
        let out = fill_masked(&mut tape, un, &keep, emb).unwrap();
        assert_eq!(tape.value(out).data, u.data);

        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let un = tape.input(u.clone());
        let drop = SpikeTensor::zeros(&[1, 2, 2], 2);
        let out = fill_masked(&mut tape, un, &drop, emb).unwrap();
        let ev = &store.get(emb).data;
        for site in 0..4 {
            assert_eq!(&tape.value(out).data[site * 3..site * 3 + 3], &ev[..]);
        }
    }

    #[test]
    fn fill_masked_mixed_matches_elementwise_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = new_mask_embedding(&mut store, &mut rng, 2);
        let u = uniform(&mut rng, &[1, 4, 4, 2], -1.0, 1.0);
        let mdata: Vec<u8> = (0..16).map(|i| (i % 3 == 0) as u8).collect();
        let m = SpikeTensor::from_vec(&[1, 4, 4], mdata.clone(), 2).unwrap();
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let un = tape.input(u.clone());
        let out = fill_masked(&mut tape, un, &m, emb).unwrap();
        let ev = &store.get(emb).data;
        for site in 0..16 {
            for c in 0..2 {
                let want = if mdata[site] == 1 {
                    u.data[site * 2 + c]
                } else {
                    ev[c]
                };
                assert_eq!(tape.value(out).data[site * 2 + c], want);
            }
        }
    }

    #[test]
    fn decoder_shape_and_zero_weights() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DecoderConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            t: 2,
            h16: 2,
            w16: 2,
        };
        let dec = VitDecoder::new(&mut store, &mut rng, &cfg);
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let tok = tape.input(uniform(&mut rng, &[8, 8], -1.0, 1.0));
        let img = dec.forward(&mut tape, tok).unwrap();
        assert_eq!(tape.dims(img), &[2, 32, 32, 3]);

        // zero out the patch projection: reconstruction must be exactly zero
        let wout = store.find("dec.wout").unwrap();
        store.get_mut(wout).data.iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let tok = tape.input(uniform(&mut rng, &[8, 8], -1.0, 1.0));
        let img = dec.forward(&mut tape, tok).unwrap();
        assert!(tape.value(img).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recon_loss_basics() {
        let store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clip = uniform(&mut rng, &[1, 2, 2, 3], 0.0, 1.0);
        let m0 = SpikeTensor::from_vec(&[1, 2, 2], vec![1, 0, 1, 1], 2).unwrap();

        // perfect reconstruction -> 0
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let c = tape.input(clip.clone());
        let r = tape.input(clip.clone());
        let l = recon_loss(&mut tape, r, c, &m0).unwrap();
        assert_eq!(tape.value(l).data[0], 0.0);

        // perturbing only unmasked pixels leaves the loss unchanged
        let mut recon = clip.clone();
        recon.data[0] += 5.0; // site 0 is kept
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let c = tape.input(clip.clone());
        let r = tape.input(recon);
        let l = recon_loss(&mut tape, r, c, &m0).unwrap();
        assert_eq!(tape.value(l).data[0], 0.0);

        // single masked pixel differing by d -> d^2 (|Omega| = 1)
        let mut recon = clip.clone();
        recon.data[1 * 3 + 1] += 0.25; // site 1 is masked
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let c = tape.input(clip.clone());
        let r = tape.input(recon);
        let l = recon_loss(&mut tape, r, c, &m0).unwrap();
        assert!((tape.value(l).data[0] - 0.0625).abs() < 1e-12);

        // all-kept mask -> error (|Omega| = 0)
        let keep = SpikeTensor::from_vec(&[1, 2, 2], vec![1; 4], 2).unwrap();
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let c = tape.input(clip.clone());
        let r = tape.input(clip.clone());
        assert!(recon_loss(&mut tape, r, c, &keep).is_err());
    }

    #[test]
    fn kd_loss_zero_when_aligned_and_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let adapter = Conv2d::new(
            &mut store,
            &mut rng,
            "kd.adapter",
            2,
            2,
            3,
            1,
            false,
            WInit::Zero,
        );
        // identity adapter: 3x3 kernel with center diagonal 1
        {
            let w = store.get_mut(adapter.w);
            for i in 0..2 {
                w.data[((1 * 3 + 1) * 2 + i) * 2 + i] = 1.0;
            }
        }
        let feats = uniform(&mut rng, &[1, 2, 2, 2], -1.0, 1.0);
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let u4 = tape.input(feats.clone());
        let l = kd_loss(&mut tape, u4, &feats, &adapter).unwrap();
        assert!(tape.value(l).data[0].abs() < 1e-24);

        // random case against a direct elementwise oracle
        let teacher = uniform(&mut rng, &[1, 2, 2, 2], -1.0, 1.0);
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let u4n = tape.input(feats.clone());
        let l = kd_loss(&mut tape, u4n, &teacher, &adapter).unwrap();
        let aligned = adapter.apply(&store, &teacher);
        let want: f64 = feats
            .data
            .iter()
            .zip(&aligned.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / feats.len() as f64;
        assert!((tape.value(l).data[0] - want).abs() < 1e-12);
    }

    #[test]
    fn zero_teacher_kd_equals_mean_u4_sq_with_zero_adapter() {
        let (mut store, model) = small_setup();
        // zero the adapter so aligned features are exactly zero
        store
            .get_mut(model.adapter.w)
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        store
            .get_mut(model.adapter.b)
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let clip = random_clip(6, 2, 32, 32);
        let masks = TubeMaskSet::sample(2, 2, 2, 0.5, 3).unwrap();
        let teacher = ZeroTeacher { ch: 8 };
        let tfeats = teacher.features("x", &clip).unwrap();
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let (_, _, kd) = model
            .clip_loss(&mut tape, &clip, Some(&tfeats), &masks)
            .unwrap();
        // independent u4 norm
        let mut ctx = InferCtx::new();
        let feats = model
            .encoder
            .infer(&store, &clip, Some(&masks), &mut ctx)
            .unwrap();
        let want = feats.u4.data.iter().map(|v| v * v).sum::<f64>() / feats.u4.len() as f64;
        assert!((kd - want).abs() < 1e-9, "kd {kd} vs mean-square {want}");
    }

    #[test]
    fn pretrain_step_runs_and_teacher_stays_frozen() {
        let (mut store, model) = small_setup();
        let teacher = RandomConvTeacher::new(7, 8);
        let digest = teacher.weight_digest();
        let batch: Vec<(String, PotentialTensor)> = (0..2)
            .map(|i| (format!("c{i}"), random_clip(10 + i as u64, 2, 32, 32)))
            .collect();
        let mut opt = AdamW::new(0.0);
        let m1 = pretrain_step(&mut store, &model, &teacher, &batch, &mut opt, 1e-3, 1).unwrap();
        let m2 = pretrain_step(&mut store, &model, &teacher, &batch, &mut opt, 1e-3, 2).unwrap();
        assert!(m1.total.is_finite() && m2.total.is_finite());
        assert_eq!(teacher.weight_digest(), digest);
    }

    #[test]
    fn lambda_zero_is_pure_mae() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig::tiny();
        let model = PretrainModel::build(&mut store, &cfg, 2, 32, 32, 8, 0.0, 0.5, 5).unwrap();
        let clip = random_clip(8, 2, 32, 32);
        let masks = TubeMaskSet::sample(2, 2, 2, 0.5, 4).unwrap();
        let mut tape = Tape::new(&store, SpikeMode::Surrogate);
        let (total, rec, kd) = model.clip_loss(&mut tape, &clip, None, &masks).unwrap();
        assert_eq!(kd, 0.0);
        assert_eq!(tape.value(total).data[0], rec);
    }

    #[test]
    fn export_discards_everything_but_encoder() {
        let (store, _model) = small_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.spkc");
        export_encoder(&path, &store, "echo").unwrap();
        let (_, entries) = crate::encoder::load_checkpoint(&path).unwrap();
        assert!(!entries.is_empty());
        assert!(entries.iter().all(|(n, _)| n.starts_with("enc.")));
        // and the pretrain-only parameters existed in the store
        assert!(store.find("dec.pos").is_some());
        assert!(store.find("pre.mask_emb").is_some());
        assert!(store.find("kd.adapter.w").is_some());
    }

    #[test]
    fn fixture_teacher_reads_dumps() {
        let dir = tempfile::tempdir().unwrap();
        let feats =
            PotentialTensor::from_vec(&[1, 2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let mut f = std::fs::File::create(dir.path().join("clip7.spkt")).unwrap();
        crate::tensor::write_potential(&mut f, &feats).unwrap();
        drop(f);
        let teacher = FixtureTeacher {
            dir: dir.path().to_path_buf(),
            ch: 3,
        };
        let clip = PotentialTensor::zeros(&[1, 32, 32, 3]);
        let got = teacher.features("clip7", &clip).unwrap();
        assert_eq!(got, feats);
        assert!(teacher.features("missing", &clip).is_err());
    }
}
