use nameinv_core::data::default_vocabulary;
use nameinv_core::encoder::{encode_class_set, EncoderConfig};
use nameinv_core::head::cosine_logits;
use nameinv_core::store::{generate_model, LearnableClassEmbeddings};
use nameinv_core::tensor::Tensor;
use nameinv_core::tokenizer::{render_named_query, PromptTemplate};

fn main() {
    let vocab = default_vocabulary();
    let config = EncoderConfig::desk();
    let names = ["dog", "car", "apple", "chair", "boot", "tiger", "lamp", "kettle"];
    for attn_mult in [1.0f32, 2.0, 4.0, 8.0] {
        let mut model = generate_model(&config, vocab.len(), 42).unwrap();
        // scale up Wq/Wk in place to sharpen attention
        for l in &mut model.weights.layers {
            for w in [&mut l.wq, &mut l.wk] {
                for v in w.data_mut() { *v *= attn_mult; }
            }
        }
        let template = PromptTemplate::default_photo();
        let queries: Vec<_> = names
            .iter()
            .map(|n| render_named_query(&template, n, &vocab, 32).unwrap().0)
            .collect();
        let dummy = LearnableClassEmbeddings::new(Tensor::zeros(&[1, 64]), 1).unwrap();
        let feats = encode_class_set(&queries, &model, &dummy, None).unwrap();
        let cos = cosine_logits(&feats, &feats, 1.0).unwrap();
        let mut vals: Vec<f64> = Vec::new();
        for i in 0..8 {
            for j in 0..i {
                vals.push(cos.at(i, j) as f64);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        let min = vals.iter().cloned().fold(f64::MAX, f64::min);
        println!("attn_mult {attn_mult}: cross-class cos mean {mean:.3} min {min:.3} max {max:.3}");
    }
}
