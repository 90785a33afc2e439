use eraselab_core::backprop::{forward_backward, BatchItem, Objective, TrainScope};
use eraselab_core::model::{init_model, ModelConfig};
use eraselab_core::worldgen::{Generator, WorldConfig};
use std::time::Instant;

fn main() {
    let gen = Generator::new(&WorldConfig::default()).unwrap();
    let corpus = gen.training_corpus();
    let state = init_model(&ModelConfig::default()).unwrap();

    // single forward
    let f = &corpus[0];
    let t0 = Instant::now();
    let n = 200;
    for _ in 0..n { let _ = state.forward(&f.image, &f.question).unwrap(); }
    println!("light forward: {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // single-item fwd+bwd
    let item = BatchItem { image: f.image.clone(), question: f.question.clone(), target: f.answer };
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = forward_backward(&state, std::slice::from_ref(&item), &Objective::CrossEntropy, TrainScope::All).unwrap();
    }
    println!("item fwd+bwd (scope all): {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    // batch of 64
    let batch: Vec<BatchItem> = corpus.iter().take(64).map(|f| BatchItem { image: f.image.clone(), question: f.question.clone(), target: f.answer }).collect();
    let t0 = Instant::now();
    for _ in 0..10 {
        let _ = forward_backward(&state, &batch, &Objective::CrossEntropy, TrainScope::All).unwrap();
    }
    println!("batch-64 fwd+bwd: {:.1} ms/step", t0.elapsed().as_secs_f64() * 100.0);
}
