use eraselab_core::model::{init_model, pretrain, ModelConfig, PretrainHyper};
use eraselab_core::worldgen::{Generator, WorldConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("canon");
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.35);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6000);

    let gen = Generator::new(&WorldConfig::default()).unwrap();
    let canonical: Vec<_> = {
        let (mut f, c) = gen.gen_corpus();
        f.extend(c);
        // also the extra pairs so every pair is covered
        let world = gen.generate();
        f.extend(world.extra);
        f
    };
    let corpus = match mode {
        "canon" => canonical.clone(),
        _ => gen.training_corpus(),
    };
    println!("mode {mode}: corpus {} items, lr {lr}, steps {steps}", corpus.len());
    let state = init_model(&ModelConfig::default()).unwrap();
    let hyper = PretrainHyper {
        max_steps: steps,
        lr,
        eval_every: 400,
        verbose: true,
        ..PretrainHyper::default()
    };
    let t0 = Instant::now();
    match pretrain(&state, &corpus, &hyper) {
        Ok((trained, report)) => {
            println!("DONE steps {} acc {:.4} in {:.0}s", report.steps_run, report.final_accuracy, t0.elapsed().as_secs_f64());
            let canon_acc = trained.exact_match(&canonical).unwrap();
            println!("canonical-pair accuracy: {canon_acc:.4}");
        }
        Err(e) => println!("FAILED after {:.0}s: {e}", t0.elapsed().as_secs_f64()),
    }
}
