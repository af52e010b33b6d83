//! Relaxation-mode finite-difference verification fragments: every hard
//! threshold replaced by its smooth ATan primitive, tape gradients compared
//! against central differences at eps = 1e-5 in double precision.

use crate::blocks::{ChannelMlp, Conv2d, ConvBlock, NetworkConfig, TransformerBlock, WInit};
use crate::encoder::MultiScaleNodes;
use crate::gradcheck::{finite_diff_check, random_projection};
use crate::pretrain::{fill_masked, kd_loss, recon_loss};
use crate::seghead::{ce_loss, focal_loss, one_hot, SegLogits, SpikeFpn};
use crate::tape::{uniform, ParamStore};
use crate::tensor::SpikeTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn net() -> NetworkConfig {
    NetworkConfig {
        conv_gain: 1.0,
        ..NetworkConfig::default()
    }
}

fn pick(store: &ParamStore, prefixes: &[&str]) -> Vec<crate::tape::ParamId> {
    store
        .ids()
        .filter(|&id| prefixes.iter().any(|p| store.name(id).starts_with(p)))
        .collect()
}

pub fn check_conv_block(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = ConvBlock::new(&mut store, &mut rng, "b", 3, &net());
    let x = uniform(&mut rng, &[2, 5, 5, 3], -0.5, 1.5);
    let params = pick(
        &store,
        &[
            "b.sep.pw1",
            "b.sep.dw",
            "b.chc.c1",
            "b.sep.sn1",
            "b.chc.sn2",
        ],
    );
    finite_diff_check(&mut store, &params, 6, seed ^ 1, &|tape| {
        let xn = tape.input(x.clone());
        let y = block.forward(tape, xn, None);
        random_projection(tape, y, seed ^ 2)
    })
}

pub fn check_channel_mlp(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mlp = ChannelMlp::new(&mut store, &mut rng, "m", 4, &net());
    let x = uniform(&mut rng, &[2, 3, 3, 4], -0.5, 1.5);
    let params = pick(&store, &["m."]);
    finite_diff_check(&mut store, &params, 6, seed ^ 3, &|tape| {
        let xn = tape.input(x.clone());
        let y = mlp.forward(tape, xn, None);
        random_projection(tape, y, seed ^ 4)
    })
}

/// The full attention path: projections, sign remap, reordered Hamming
/// product, temporal spiking, output projection, MLP.
pub fn check_sdha_path(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let blk = TransformerBlock::new(&mut store, &mut rng, "t", 4, &net());
    let x = uniform(&mut rng, &[2, 3, 3, 4], -0.5, 1.5);
    let params = pick(
        &store,
        &[
            "t.q.pw",
            "t.v.pw",
            "t.o.pw",
            "t.mlp.m1",
            "t.sn_q",
            "t.sn_attn",
        ],
    );
    finite_diff_check(&mut store, &params, 6, seed ^ 5, &|tape| {
        let xn = tape.input(x.clone());
        let y = blk.forward(tape, xn, None);
        random_projection(tape, y, seed ^ 6)
    })
}

pub fn check_fpn(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let fpn = SpikeFpn::new(&mut store, &mut rng, "f", [2, 3, 4, 5], 4, &net());
    let logits = SegLogits::new(&mut store, &mut rng, "o", 4, 2, &net());
    // the classifier convs are zero-initialized; give them mass so the check
    // exercises their gradients too
    for l in 1..=4 {
        let id = store.find(&format!("o.cls{l}.w")).unwrap();
        *store.get_mut(id) = uniform(&mut rng, &[3, 3, 4, 2], -0.3, 0.3);
    }
    let u1 = uniform(&mut rng, &[2, 8, 8, 2], -0.5, 1.5);
    let u2 = uniform(&mut rng, &[2, 4, 4, 3], -0.5, 1.5);
    let u3 = uniform(&mut rng, &[2, 2, 2, 4], -0.5, 1.5);
    let u4 = uniform(&mut rng, &[2, 2, 2, 5], -0.5, 1.5);
    let params = pick(&store, &["f.lat1", "f.lat4", "f.sn2", "o.cls1", "o.sn3"]);
    finite_diff_check(&mut store, &params, 6, seed ^ 7, &|tape| {
        let nodes = MultiScaleNodes {
            u1: tape.input(u1.clone()),
            u2: tape.input(u2.clone()),
            u3: tape.input(u3.clone()),
            u4: tape.input(u4.clone()),
        };
        let pyr = fpn.forward(tape, &nodes);
        let y = logits.forward(tape, &pyr, 32);
        random_projection(tape, y, seed ^ 8)
    })
}

pub fn check_ce_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let logits = store.add("logits", uniform(&mut rng, &[1, 3, 3, 3], -1.0, 1.0));
    let labels: Vec<u8> = (0..9).map(|_| rng.gen_range(0..3)).collect();
    finite_diff_check(&mut store, &[logits], 20, seed ^ 9, &|tape| {
        let z = tape.param(logits);
        let p = tape.softmax(z);
        let y = tape.input(one_hot(&labels, &[1, 3, 3], 3));
        ce_loss(tape, y, p)
    })
}

pub fn check_focal_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let logits = store.add("logits", uniform(&mut rng, &[1, 3, 3, 3], -1.0, 1.0));
    let labels: Vec<u8> = (0..9).map(|_| rng.gen_range(0..3)).collect();
    finite_diff_check(&mut store, &[logits], 20, seed ^ 11, &|tape| {
        let z = tape.param(logits);
        let p = tape.softmax(z);
        let y = tape.input(one_hot(&labels, &[1, 3, 3], 3));
        focal_loss(tape, y, p, 2.0)
    })
}

pub fn check_recon_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let recon = store.add("recon", uniform(&mut rng, &[1, 4, 4, 3], -0.2, 1.2));
    let clip = uniform(&mut rng, &[1, 4, 4, 3], 0.0, 1.0);
    let mdata: Vec<u8> = (0..16).map(|i| u8::from(i % 3 != 0)).collect();
    let m0 = SpikeTensor::from_vec(&[1, 4, 4], mdata, 2).unwrap();
    finite_diff_check(&mut store, &[recon], 20, seed ^ 13, &|tape| {
        let r = tape.param(recon);
        let c = tape.input(clip.clone());
        recon_loss(tape, r, c, &m0).unwrap()
    })
}

pub fn check_kd_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let u4 = store.add("u4", uniform(&mut rng, &[1, 3, 3, 4], -1.0, 1.0));
    let adapter = Conv2d::new(
        &mut store,
        &mut rng,
        "ad",
        2,
        4,
        3,
        1,
        false,
        WInit::Kaiming(1.0),
    );
    let teacher = uniform(&mut rng, &[1, 3, 3, 2], -1.0, 1.0);
    let params = vec![u4, adapter.w, adapter.b];
    finite_diff_check(&mut store, &params, 12, seed ^ 15, &|tape| {
        let u = tape.param(u4);
        kd_loss(tape, u, &teacher, &adapter).unwrap()
    })
}

pub fn check_mask_embedding(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let emb = store.add("emb", uniform(&mut rng, &[4], -0.5, 0.5));
    let u4 = uniform(&mut rng, &[1, 3, 3, 4], -1.0, 1.0);
    let mdata: Vec<u8> = (0..9).map(|i| u8::from(i % 2 == 0)).collect();
    let m4 = SpikeTensor::from_vec(&[1, 3, 3], mdata, 2).unwrap();
    finite_diff_check(&mut store, &[emb], 4, seed ^ 17, &|tape| {
        let u = tape.input(u4.clone());
        let filled = fill_masked(tape, u, &m4, emb).unwrap();
        random_projection(tape, filled, seed ^ 18)
    })
}

/// All criterion fragments with their names.
pub fn gradcheck_suite(seed: u64) -> Vec<(String, f64)> {
    vec![
        ("conv_block".to_string(), check_conv_block(seed)),
        ("channel_mlp".to_string(), check_channel_mlp(seed)),
        ("sdha_path".to_string(), check_sdha_path(seed)),
        ("fpn".to_string(), check_fpn(seed)),
        ("ce_loss".to_string(), check_ce_loss(seed)),
        ("focal_loss".to_string(), check_focal_loss(seed)),
        ("recon_loss".to_string(), check_recon_loss(seed)),
        ("kd_loss".to_string(), check_kd_loss(seed)),
        ("mask_embedding".to_string(), check_mask_embedding(seed)),
    ]
}
