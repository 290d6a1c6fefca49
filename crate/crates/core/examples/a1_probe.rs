use nameinv_core::data::{default_vocabulary, generate_synthetic, SyntheticConfig};
use nameinv_core::encoder::EncoderConfig;
use nameinv_core::store::generate_model;
use nameinv_core::train::*;
use nameinv_core::head::cosine_logits;
use nameinv_core::tensor::Tensor;

fn main() {
    let vocab = default_vocabulary();
    let config = EncoderConfig::desk();
    let model = generate_model(&config, vocab.len(), 42).unwrap();
    let synth = generate_synthetic(
        &SyntheticConfig::classification(8, 16, 20, 0.05, 7),
        &model,
        &vocab,
    )
    .unwrap();
    let ds = synth.dataset().unwrap();
    let cfg = TrainConfig::classification();

    // zero-shot with (wrong) names first
    let (_, zs) = zero_shot_metrics(&model, &vocab, &ds, &cfg).unwrap();
    println!("zero-shot (names unrelated to plants): {:?}", zs);

    let t = std::time::Instant::now();
    let run = run_adaptation(&model, &vocab, &ds, &cfg, &[0], TaskKind::Adapt).unwrap();
    println!("1 seed train time: {:?}", t.elapsed());
    println!("eval accuracy: {:?}", run.seeds[0].groups);

    // train accuracy
    let sel: Vec<(usize, QueryKind)> = (0..8).map(|c| (c, QueryKind::Learned)).collect();
    let qs = build_query_set(&model, &vocab, "default", &ds, &run.seeds[0].learned, None, &sel, &cfg).unwrap();
    let train_acc = evaluate_classification(&ds, &ds.manifest.splits.train, &qs, model.logit_scale).unwrap();
    println!("train accuracy: {train_acc:.4}");

    // planted-closeness: learned sentence feature vs planted text features
    let planted: Tensor<f32> = synth.planted_features.clone();
    let logits = cosine_logits(&qs.features, &planted, 1.0).unwrap();
    let mut ok = 0;
    for c in 0..8 {
        let row = logits.row(c);
        let best = (0..8).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        if best == c { ok += 1; }
        println!("class {c}: own-plant cos {:.3}, best {} ({:.3})", row[c], best, row[best]);
    }
    println!("plant association: {ok}/8");
}
