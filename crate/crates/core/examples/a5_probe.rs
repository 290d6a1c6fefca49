use nameinv_core::data::*;
use nameinv_core::encoder::EncoderConfig;
use nameinv_core::store::generate_model;
use nameinv_core::train::*;
use nameinv_core::interpret::*;
use nameinv_core::tokenizer::PromptTemplate;

fn main() {
    let vocab = default_vocabulary();
    let config = EncoderConfig::desk();
    for (lr, epochs) in [(5e-4f64, 20usize), (1e-3, 10), (1e-3, 15), (7e-4, 20)] {
        let mut model = generate_model(&config, vocab.len(), 42).unwrap();
        model.logit_scale = 10.0;
        let mut cfg_synth = SyntheticConfig::classification(8, 16, 15, 0.1, 11);
        cfg_synth.mode = DatasetMode::Region;
        cfg_synth.planted = PlantedKind::OffsetFromName { offset: 3.0 };
        cfg_synth.rare_profile = Some(RareProfile::desk());
        let synth = generate_synthetic(&cfg_synth, &model, &vocab).unwrap();
        let ds = synth.dataset().unwrap();
        let mut cfg = TrainConfig::region();
        cfg.base_lr = lr;
        cfg.epochs = epochs;
        let (_, zs) = zero_shot_metrics(&model, &vocab, &ds, &cfg).unwrap();
        let run = run_adaptation(&model, &vocab, &ds, &cfg, &[0], TaskKind::Adapt).unwrap();
        let s = &run.seeds[0];
        // A7 correlation on this table
        let template = PromptTemplate::default_photo();
        let names = ds.manifest.class_names();
        let counts = ds.manifest.frequency_counts();
        let sims: Vec<f64> = (0..8)
            .map(|c| self_similarity(c, &names[c], &s.learned, &template, &model, &vocab).unwrap())
            .collect();
        let r = rarity_similarity_correlation(&counts, &sims).unwrap();
        println!(
            "lr {lr:.0e} ep {epochs}: d_all {:+.3} d_f {:+.3} d_r {:+.3} | corr {r:+.3}",
            s.groups["all"] - zs["all"], s.groups["frequent"] - zs["frequent"], s.groups["rare"] - zs["rare"]
        );
    }
}
