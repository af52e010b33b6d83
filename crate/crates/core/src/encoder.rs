//! The 4-stage spike-driven video encoder with multi-scale outputs and
//! optional layer-wise tube masks.
//!
//! Stage layout (spatial size / channels):
//!   input coder (IntIF)            H     x 3
//!   down 7x7 s2 + conv blocks      H/2   x C
//!   down 3x3 s2 + conv blocks      H/4   x 2C     -> u1
//!   down 3x3 s2 + conv blocks      H/8   x 4C     -> u2
//!   down 3x3 s2 + transformers     H/16  x 8C     -> u3
//!   down 3x3 s1 + transformers     H/16  x S4     -> u4 (channel expansion only)
//!
//! The final stage keeps H/16 resolution: its nominal stride-2 entry is
//! implemented as stride 1 so the declared T x H/16 x W/16 x 12C output
//! shape holds. S4 is 12C except for the 16M variant, which widens it to 512.

use crate::blocks::{ConvBlock, Downsample, NetworkConfig, TransformerBlock};
use crate::error::{EngineError, Result};
use crate::masking::TubeMaskSet;
use crate::profiler::InferCtx;
use crate::tape::{NodeId, ParamStore, Tape};
use crate::tensor::{PotentialTensor, Shape4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub base_channels: usize,
    pub stage4_channels: usize,
    /// Conv-block depths for the three conv sub-stages (H/2, H/4, H/8).
    pub conv_depths: [usize; 3],
    /// Transformer depths for the two H/16 stages.
    pub transformer_depths: [usize; 2],
    pub net: NetworkConfig,
    pub variant: String,
}

impl EncoderConfig {
    pub fn tiny() -> Self {
        EncoderConfig {
            base_channels: 8,
            stage4_channels: 96,
            conv_depths: [1, 1, 1],
            transformer_depths: [2, 1],
            net: NetworkConfig::default(),
            variant: "tiny".into(),
        }
    }

    pub fn small_16m() -> Self {
        EncoderConfig {
            base_channels: 32,
            stage4_channels: 512, // widened from the nominal 12C = 384
            conv_depths: [1, 1, 2],
            transformer_depths: [6, 2],
            net: NetworkConfig::default(),
            variant: "small-16M".into(),
        }
    }

    pub fn base_56m() -> Self {
        EncoderConfig {
            base_channels: 64,
            stage4_channels: 768,
            conv_depths: [1, 1, 2],
            transformer_depths: [6, 2],
            net: NetworkConfig::default(),
            variant: "base-56M".into(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small-16M" | "small" => Ok(Self::small_16m()),
            "base-56M" | "base" => Ok(Self::base_56m()),
            other => Err(EngineError::InvalidConfig(format!(
                "unknown variant '{other}'"
            ))),
        }
    }

    /// [C, 2C, 4C, 8C, S4]
    pub fn stage_channels(&self) -> [usize; 5] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c, self.stage4_channels]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(EngineError::InvalidConfig(
                "base_channels must be >= 1".into(),
            ));
        }
        if self.stage4_channels < 8 * self.base_channels {
            return Err(EngineError::InvalidConfig(
                "stage-4 width must be at least the stage-3 width".into(),
            ));
        }
        Ok(())
    }

    /// Analytical scalar parameter count; kept in lockstep with `build`
    /// (asserted by tests) so large variants can be sized without allocation.
    pub fn param_count(&self) -> usize {
        let [c1, c2, c3, c4, s4] = self.stage_channels();
        let sn = 1usize;
        let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
        let dwconv = |k: usize, ch: usize| k * k * ch + ch;
        let repconv = |d: usize| conv(1, d, d) + dwconv(3, d) + sn; // pw + dw (+ its SN is counted by callers)
        let sepconv = |ch: usize| {
            let e = ch * crate::blocks::SEP_EXPANSION;
            3 * sn + conv(1, ch, e) + dwconv(7, e) + conv(1, e, ch)
        };
        let chconv = |ch: usize| {
            let hid = ch * crate::blocks::CHANNEL_CONV_RATIO;
            2 * sn + conv(3, ch, hid) + conv(3, hid, ch)
        };
        let convblock = |ch: usize| sepconv(ch) + chconv(ch);
        let mlp = |d: usize| {
            let hid = d * crate::blocks::MLP_RATIO;
            2 * sn + conv(1, d, hid) + conv(1, hid, d)
        };
        let transformer = |d: usize| {
            // sn_in + q/k/v projections + their SNs + sn_attn + out projection + mlp
            sn + 3 * (repconv(d) - sn) + 3 * sn + sn + (repconv(d) - sn) + mlp(d)
        };
        let down = |k: usize, cin: usize, cout: usize| sn + conv(k, cin, cout);

        let mut total = 0;
        total += down(7, 3, c1) + self.conv_depths[0] * convblock(c1);
        total += down(3, c1, c2) + self.conv_depths[1] * convblock(c2);
        total += down(3, c2, c3) + self.conv_depths[2] * convblock(c3);
        total += down(3, c3, c4) + self.transformer_depths[0] * transformer(c4);
        total += down(3, c4, s4) + self.transformer_depths[1] * transformer(s4);
        total
    }
}

/// Multi-scale stage outputs (membrane-potential maps).
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub u1: PotentialTensor,
    pub u2: PotentialTensor,
    pub u3: PotentialTensor,
    pub u4: PotentialTensor,
}

#[derive(Debug, Clone, Copy)]
pub struct MultiScaleNodes {
    pub u1: NodeId,
    pub u2: NodeId,
    pub u3: NodeId,
    pub u4: NodeId,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    d1: Downsample,
    s1a: Vec<ConvBlock>,
    d2: Downsample,
    s1b: Vec<ConvBlock>,
    d3: Downsample,
    s2: Vec<ConvBlock>,
    d4: Downsample,
    s3: Vec<TransformerBlock>,
    d5: Downsample,
    s4: Vec<TransformerBlock>,
}

/// Deterministic construction: same seed, same weights, bit for bit.
pub fn build_encoder(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) -> Result<Encoder> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let [c1, c2, c3, c4, s4ch] = cfg.stage_channels();
    let net = &cfg.net;
    // the input coder quantizes pixel charge into input_levels integer spikes
    let input_theta = net.u_th / net.input_levels as f64;
    let d1 = Downsample::new(
        store,
        r,
        "enc.d1",
        3,
        c1,
        7,
        2,
        net.input_levels,
        input_theta,
        net,
    );
    let s1a = (0..cfg.conv_depths[0])
        .map(|i| ConvBlock::new(store, r, &format!("enc.s1a{i}"), c1, net))
        .collect();
    let d2 = Downsample::new(store, r, "enc.d2", c1, c2, 3, 2, 2, net.u_th, net);
    let s1b = (0..cfg.conv_depths[1])
        .map(|i| ConvBlock::new(store, r, &format!("enc.s1b{i}"), c2, net))
        .collect();
    let d3 = Downsample::new(store, r, "enc.d3", c2, c3, 3, 2, 2, net.u_th, net);
    let s2 = (0..cfg.conv_depths[2])
        .map(|i| ConvBlock::new(store, r, &format!("enc.s2b{i}"), c3, net))
        .collect();
    let d4 = Downsample::new(store, r, "enc.d4", c3, c4, 3, 2, 2, net.u_th, net);
    let s3 = (0..cfg.transformer_depths[0])
        .map(|i| TransformerBlock::new(store, r, &format!("enc.s3b{i}"), c4, net))
        .collect();
    let d5 = Downsample::new(store, r, "enc.d5", c4, s4ch, 3, 1, 2, net.u_th, net);
    let s4 = (0..cfg.transformer_depths[1])
        .map(|i| TransformerBlock::new(store, r, &format!("enc.s4b{i}"), s4ch, net))
        .collect();
    Ok(Encoder {
        cfg: cfg.clone(),
        d1,
        s1a,
        d2,
        s1b,
        d3,
        s2,
        d4,
        s3,
        d5,
        s4,
    })
}

fn check_input(clip_dims: &[usize], masks: Option<&TubeMaskSet>) -> Result<Shape4> {
    if clip_dims.len() != 4 || clip_dims[3] != 3 {
        return Err(EngineError::ShapeMismatch {
            expected: "[T,H,W,3] clip".into(),
            got: format!("{clip_dims:?}"),
        });
    }
    let s = Shape4::new_encoder_input(clip_dims[0], clip_dims[1], clip_dims[2], 3)?;
    if let Some(m) = masks {
        let m0 = &m.levels[0];
        if m0.dims != [s.t, s.h, s.w] {
            return Err(EngineError::ShapeMismatch {
                expected: format!("mask level 0 of [{}, {}, {}]", s.t, s.h, s.w),
                got: format!("{:?}", m0.dims),
            });
        }
    }
    Ok(s)
}

impl Encoder {
    /// Training forward. Masks, when given, are re-applied before every
    /// temporal spiking at the matching resolution.
    pub fn forward(
        &self,
        tape: &mut Tape,
        clip: NodeId,
        masks: Option<&TubeMaskSet>,
    ) -> Result<MultiScaleNodes> {
        check_input(tape.dims(clip), masks)?;
        let mask_node = |tape: &mut Tape, l: usize| -> Option<NodeId> {
            masks.map(|m| tape.input(m.levels[l].to_potential()))
        };
        let m0 = mask_node(tape, 0);
        let m1 = mask_node(tape, 1);
        let m2 = mask_node(tape, 2);
        let m3 = mask_node(tape, 3);
        let m4 = mask_node(tape, 4);

        let mut x = self.d1.forward(tape, clip, m0)?;
        for b in &self.s1a {
            x = b.forward(tape, x, m1);
        }
        x = self.d2.forward(tape, x, m1)?;
        for b in &self.s1b {
            x = b.forward(tape, x, m2);
        }
        let u1 = x;
        x = self.d3.forward(tape, x, m2)?;
        for b in &self.s2 {
            x = b.forward(tape, x, m3);
        }
        let u2 = x;
        x = self.d4.forward(tape, x, m3)?;
        for b in &self.s3 {
            x = b.forward(tape, x, m4);
        }
        let u3 = x;
        x = self.d5.forward(tape, x, m4)?;
        for b in &self.s4 {
            x = b.forward(tape, x, m4);
        }
        Ok(MultiScaleNodes { u1, u2, u3, u4: x })
    }

    /// Inference forward with op accounting and optional spike tracing.
    pub fn infer(
        &self,
        store: &ParamStore,
        clip: &PotentialTensor,
        masks: Option<&TubeMaskSet>,
        ctx: &mut InferCtx,
    ) -> Result<MultiScaleFeatures> {
        check_input(&clip.dims, masks)?;
        let lvl = |l: usize| masks.map(|m| &m.levels[l]);

        let mut x = self.d1.infer(store, clip, lvl(0), ctx, "enc.d1")?;
        for (i, b) in self.s1a.iter().enumerate() {
            x = b.infer(store, &x, lvl(1), ctx, &format!("enc.s1a{i}"));
        }
        x = self.d2.infer(store, &x, lvl(1), ctx, "enc.d2")?;
        for (i, b) in self.s1b.iter().enumerate() {
            x = b.infer(store, &x, lvl(2), ctx, &format!("enc.s1b{i}"));
        }
        let u1 = x.clone();
        x = self.d3.infer(store, &x, lvl(2), ctx, "enc.d3")?;
        for (i, b) in self.s2.iter().enumerate() {
            x = b.infer(store, &x, lvl(3), ctx, &format!("enc.s2b{i}"));
        }
        let u2 = x.clone();
        x = self.d4.infer(store, &x, lvl(3), ctx, "enc.d4")?;
        for (i, b) in self.s3.iter().enumerate() {
            x = b.infer(store, &x, lvl(4), ctx, &format!("enc.s3b{i}"));
        }
        let u3 = x.clone();
        x = self.d5.infer(store, &x, lvl(4), ctx, "enc.d5")?;
        for (i, b) in self.s4.iter().enumerate() {
            x = b.infer(store, &x, lvl(4), ctx, &format!("enc.s4b{i}"));
        }
        Ok(MultiScaleFeatures { u1, u2, u3, u4: x })
    }
}

// --- checkpoint container ------------------------------------------------
//
// Magic "SPKC", u16 version, config echo (length-prefixed UTF-8), entry
// count, then per entry a length-prefixed name and an SPKT tensor blob.

const CKPT_MAGIC: &[u8; 4] = b"SPKC";

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    prefix: Option<&str>,
    config_echo: &str,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&1u16.to_le_bytes())?;
    let echo = config_echo.as_bytes();
    f.write_all(&(echo.len() as u32).to_le_bytes())?;
    f.write_all(echo)?;
    let entries: Vec<(&str, &PotentialTensor)> = store
        .entries()
        .filter(|(n, _)| prefix.is_none_or(|p| n.starts_with(p)))
        .collect();
    f.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let nb = name.as_bytes();
        f.write_all(&(nb.len() as u16).to_le_bytes())?;
        f.write_all(nb)?;
        crate::tensor::write_potential(&mut f, tensor)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<(String, PotentialTensor)>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(EngineError::Checkpoint("bad magic".into()));
    }
    let mut v = [0u8; 2];
    f.read_exact(&mut v)?;
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4)?;
    let mut echo = vec![0u8; u32::from_le_bytes(len4) as usize];
    f.read_exact(&mut echo)?;
    let echo = String::from_utf8(echo).map_err(|_| EngineError::Checkpoint("bad echo".into()))?;
    f.read_exact(&mut len4)?;
    let n = u32::from_le_bytes(len4) as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let mut len2 = [0u8; 2];
        f.read_exact(&mut len2)?;
        let mut nb = vec![0u8; u16::from_le_bytes(len2) as usize];
        f.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|_| EngineError::Checkpoint("bad name".into()))?;
        let t = crate::tensor::read_potential(&mut f)?;
        entries.push((name, t));
    }
    Ok((echo, entries))
}

/// Copy checkpoint entries into matching named parameters. Every entry must
/// exist with the same shape, and every store parameter under `prefix` must
/// be covered.
pub fn load_into(
    store: &mut ParamStore,
    entries: &[(String, PotentialTensor)],
    prefix: &str,
) -> Result<()> {
    for (name, tensor) in entries {
        let id = store
            .find(name)
            .ok_or_else(|| EngineError::Checkpoint(format!("no parameter named '{name}'")))?;
        if store.get(id).dims != tensor.dims {
            return Err(EngineError::Checkpoint(format!(
                "shape mismatch for '{name}': {:?} vs {:?}",
                store.get(id).dims,
                tensor.dims
            )));
        }
        *store.get_mut(id) = tensor.clone();
    }
    let covered: std::collections::BTreeSet<&str> =
        entries.iter().map(|(n, _)| n.as_str()).collect();
    for (name, _) in store.entries() {
        if name.starts_with(prefix) && !covered.contains(name) {
            return Err(EngineError::Checkpoint(format!(
                "checkpoint missing '{name}'"
            )));
        }
    }
    Ok(())
}
