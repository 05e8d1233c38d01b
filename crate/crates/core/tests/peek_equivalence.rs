//! Full peeking at every layer reproduces vanilla causal attention.

use af1_core::interventions::{peek_plan, PeekMode};
use af1_core::tasks::sample_instance;
use af1_core::util::rng_from_seed;
use af1_core::{forward, Capture, InterventionPlan, ModelConfig, ModelWeights, Template, Vocab};

#[test]
fn full_peek_matches_vanilla_on_random_prompts() {
    let vocab = Vocab::build();
    let cfg = ModelConfig::seed_default(vocab.len());
    let templates = ["A+B", "A-B", "A+B+C", "A-B-C"]
        .map(|n| Template::builtin(n, &vocab).unwrap());
    let mut rng = rng_from_seed(77);
    let mut worst: f32 = 0.0;
    for init in 0..3 {
        let w = ModelWeights::init(cfg, &mut rng_from_seed(1000 + init)).unwrap();
        for i in 0..100 {
            let inst = sample_instance(&templates[i % templates.len()], &vocab, &mut rng);
            let seq = inst.tokens.len();
            let plan = InterventionPlan {
                peek: Some(peek_plan(seq, &vec![PeekMode::FullAll; cfg.n_layers]).unwrap()),
                ..Default::default()
            };
            let a = forward(&w, &inst.tokens, &Default::default(), Capture::default()).unwrap();
            let b = forward(&w, &inst.tokens, &plan, Capture::default()).unwrap();
            for (x, y) in a.logits.iter().zip(b.logits.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    assert!(worst <= 1e-5, "max abs logit diff {worst}");
}
