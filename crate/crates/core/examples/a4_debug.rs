use nameinv_core::data::*;
use nameinv_core::encoder::EncoderConfig;
use nameinv_core::store::generate_model;
use nameinv_core::train::*;

fn main() {
    let vocab = default_vocabulary();
    let config = EncoderConfig::desk();
    for (scale, lr) in [(10.0f32, 5e-4f64), (10.0, 1e-3), (10.0, 2e-3), (25.0, 1e-3)] {
        let mut model = generate_model(&config, vocab.len(), 42).unwrap();
        model.logit_scale = scale;
        let mut cfg_synth = SyntheticConfig::classification(8, 16, 20, 0.05, 7);
        cfg_synth.with_partition = true;
        let synth = generate_synthetic(&cfg_synth, &model, &vocab).unwrap();
        let ds = synth.dataset().unwrap();
        let mut cfg = TrainConfig::classification();
        cfg.base_lr = lr;
        let joint = run_adaptation(&model, &vocab, &ds, &cfg, &[0], TaskKind::Adapt).unwrap();
        let seq = run_sequential(&model, &vocab, &ds, &cfg, &[0]).unwrap();
        println!(
            "scale {scale} lr {lr:.0e}: joint all {:.3} | seq all {:.3} base {:.3} new {:.3}",
            joint.seeds[0].groups["all"],
            seq.seeds[0].groups["all"], seq.seeds[0].groups["base"], seq.seeds[0].groups["new"]
        );
    }
}
