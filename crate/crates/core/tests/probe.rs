#[test]
fn probe_pretrain_drift() {
    use spikeseg_core::*;
    use rand::{Rng, SeedableRng};
    let base = "
[model]
variant = tiny
head_channels = 32
classes = 2
[data]
h = 64
w = 64
clips_train = 16
clips_eval = 4
noise = 0.10
contrast = 0.42
occluders = true
[pretrain]
steps = 120
schedule_max = 150
lr = 2e-3
batch = 4
alpha = 0.5
lambda_kd = 0.1
teacher = random
teacher_channels = 16
[finetune]
steps = 5
batch = 2
";
    let cfg = config::Config::parse(base).unwrap();
    let exp = pipeline::Experiment::from_config(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let stats = |store: &tape::ParamStore, enc: &encoder::Encoder, tag: &str| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let clip = tensor::PotentialTensor::from_vec(
            &[4, 64, 64, 3],
            (0..4 * 64 * 64 * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let mut ctx = profiler::InferCtx::tracing();
        let f = enc.infer(store, &clip, None, &mut ctx).unwrap();
        let rate = |pat: &str| -> f64 {
            let sel: Vec<f64> = ctx
                .spike_trace
                .iter()
                .filter(|(n, _)| n.contains(pat))
                .map(|(_, s)| tensor::spike_rate(s).unwrap())
                .collect();
            sel.iter().sum::<f64>() / sel.len().max(1) as f64
        };
        let absmean = |t: &tensor::PotentialTensor| {
            t.data.iter().map(|v| v.abs()).sum::<f64>() / t.len() as f64
        };
        println!(
            "{tag}: rates s1a {:.3} s1b {:.3} s2 {:.3} s3 {:.3} s4 {:.3} | u1 {:.3} u2 {:.3} u3 {:.3} u4 {:.3}",
            rate("s1a0"), rate("s1b0"), rate("s2b0"), rate("s3b0"), rate("s4b0"),
            absmean(&f.u1), absmean(&f.u2), absmean(&f.u3), absmean(&f.u4)
        );
    };

    // fresh encoder
    let mut store = tape::ParamStore::new();
    let enc = encoder::build_encoder(&mut store, &exp.enc, 1).unwrap();
    stats(&store, &enc, "fresh   ");

    // pretrained encoder (120 steps)
    let ckpt = pipeline::run_pretrain(&exp, "probe", 1, dir.path()).unwrap();
    let (_e, entries) = encoder::load_checkpoint(&ckpt).unwrap();
    encoder::load_into(&mut store, &entries, "enc.").unwrap();
    stats(&store, &enc, "pretrain");

    // beta drift
    for name in ["enc.d1.sn.beta", "enc.s2b0.sep.sn1.beta", "enc.s4b0.sn_attn.beta"] {
        let id = store.find(name).unwrap();
        println!("{name} raw = {:.3}", store.get(id).data[0]);
    }
}
