use eraselab_core::model::{init_model, pretrain, ModelConfig, PretrainHyper};
use eraselab_core::worldgen::{Generator, WorldConfig};
use std::time::Instant;

fn main() {
    let wcfg = WorldConfig {
        concepts: 12,
        relations: 5,
        fact_count: 40,
        control_count: 12,
        vocab_size: 96,
        style_tokens: 6,
        ..WorldConfig::default()
    };
    let gen = Generator::new(&wcfg).unwrap();
    let corpus = gen.training_corpus();
    println!("tiny corpus: {} items", corpus.len());

    for seed in 0..8u64 {
        let mcfg = ModelConfig {
            vocab_size: 96,
            width: 32,
            n_layers: 2,
            heads: 2,
            mlp_expansion: 2,
            seed,
            ..ModelConfig::default()
        };
        let state = init_model(&mcfg).unwrap();
        let hyper = PretrainHyper {
            max_steps: 6000,
            lr: 0.35,
            batch_size: 32,
            eval_every: 250,
            target_accuracy: 0.995,
            seed: seed.wrapping_add(100),
            ..PretrainHyper::default()
        };
        let t0 = Instant::now();
        match pretrain(&state, &corpus, &hyper) {
            Ok((_, r)) => println!(
                "seed {seed}: acc {:.4} at step {:5} ({:.0}s)",
                r.final_accuracy,
                r.steps_run,
                t0.elapsed().as_secs_f64()
            ),
            Err(e) => println!("seed {seed}: FAILED {e} ({:.0}s)", t0.elapsed().as_secs_f64()),
        }
    }
}
