use nameinv_core::data::*;
use nameinv_core::encoder::EncoderConfig;
use nameinv_core::head::cosine_logits;
use nameinv_core::store::generate_model;
use nameinv_core::train::*;

fn main() {
    let vocab = default_vocabulary();
    let config = EncoderConfig::desk();
    let model = generate_model(&config, vocab.len(), 42).unwrap();
    let mut cfg_synth = SyntheticConfig::classification(8, 16, 20, 0.05, 7);
    cfg_synth.with_partition = true;
    let synth = generate_synthetic(&cfg_synth, &model, &vocab).unwrap();
    let ds = synth.dataset().unwrap();
    let cfg = TrainConfig::classification();

    // A3: open-vocab
    let t = std::time::Instant::now();
    let (zs_qs, zs_groups) = zero_shot_metrics(&model, &vocab, &ds, &cfg).unwrap();
    let ov = run_open_vocab(&model, &vocab, &ds, &cfg, &[0]).unwrap();
    println!("A3 in {:?}", t.elapsed());
    println!("zero-shot groups: {zs_groups:?}");
    println!("openvocab groups: {:?}", ov.seeds[0].groups);

    // bitwise check of new-class logit columns
    let sel: Vec<(usize, QueryKind)> = (0..8)
        .map(|c| (c, if c < 4 { QueryKind::Learned } else { QueryKind::Named }))
        .collect();
    let qs_mixed = build_query_set(&model, &vocab, "default", &ds, &ov.seeds[0].learned, None, &sel, &cfg).unwrap();
    let eval_ids = &ds.manifest.splits.eval;
    let mut feats = Vec::new();
    for &id in eval_ids {
        let (f, _) = ds.classification_sample(id).unwrap();
        feats.extend_from_slice(f);
    }
    let fx = nameinv_core::tensor::Tensor::from_vec(&[eval_ids.len(), ds.features.dim], feats).unwrap();
    let lm = cosine_logits(&fx, &qs_mixed.features, model.logit_scale).unwrap();
    let lz = cosine_logits(&fx, &zs_qs.features, model.logit_scale).unwrap();
    let mut bitwise = true;
    for r in 0..eval_ids.len() {
        for c in 4..8 {
            if lm.at(r, c).to_bits() != lz.at(r, c).to_bits() { bitwise = false; }
        }
    }
    println!("new-class logit columns bitwise identical: {bitwise}");

    // base-group metric equals a base-only adaptation run's base accuracy
    let base_run = run_adaptation(&model, &vocab, &ds, &cfg, &[0], TaskKind::Adapt).unwrap();
    println!("adaptation (all classes trained) groups: {:?}", base_run.seeds[0].groups);

    // A4: sequential vs joint
    let t = std::time::Instant::now();
    let seq = run_sequential(&model, &vocab, &ds, &cfg, &[0]).unwrap();
    println!("A4 sequential in {:?}: {:?}", t.elapsed(), seq.seeds[0].groups);
    let joint = base_run.seeds[0].groups["all"];
    let seq_all = seq.seeds[0].groups["all"];
    println!("joint all {joint:.4} vs sequential all {seq_all:.4} (|diff| = {:.4})", (joint - seq_all).abs());
}
