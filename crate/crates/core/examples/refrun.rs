use eraselab_core::editor::lens_rank;
use eraselab_core::lens::lens_distributions;
use eraselab_core::model::{init_model, pretrain, ModelConfig, PretrainHyper};
use eraselab_core::worldgen::{filter_retained, Generator, WorldConfig};
use std::time::Instant;

fn main() {
    let wcfg = WorldConfig::default();
    let gen = Generator::new(&wcfg).unwrap();
    let world = gen.generate();
    println!("world: {} facts, {} controls, {} extra, dropped {}",
        world.facts.len(), world.controls.len(), world.extra.len(), world.dropped.len());
    let corpus = gen.training_corpus();
    println!("training corpus: {} items", corpus.len());

    let mcfg = ModelConfig::default();
    let state = init_model(&mcfg).unwrap();
    let hyper = PretrainHyper { verbose: true, ..PretrainHyper::default() };
    let t0 = Instant::now();
    let (trained, report) = match pretrain(&state, &corpus, &hyper) {
        Ok(v) => v,
        Err(e) => { println!("PRETRAIN FAILED: {e}"); return; }
    };
    println!("pretrained in {:.1}s, steps {}, acc {:.4}", t0.elapsed().as_secs_f64(), report.steps_run, report.final_accuracy);
    for (s, a) in report.accuracy_trace.iter() { println!("  step {s}: {a:.4}"); }

    // canonical fact accuracy
    let facts: Vec<_> = world.facts.iter().map(|wf| wf.fact.clone()).collect();
    let acc = trained.exact_match(&facts).unwrap();
    println!("canonical fact accuracy: {acc:.4}");

    let t1 = Instant::now();
    let filt = filter_retained(&world, &trained).unwrap();
    println!("filter: retained {}/{} ({:.3}) know_fail {} rephrase_fail {} neighbor_fail {} in {:.1}s",
        filt.retained.len(), filt.total, filt.retention_rate(),
        filt.failed_know, filt.failed_rephrase, filt.failed_neighbor, t1.elapsed().as_secs_f64());

    // lens visibility: per-layer rank of the answer pre-edit
    let mut rank_hist = vec![[0usize; 5]; mcfg.n_layers]; // buckets: top1, top5, top20, top50, beyond
    let mut min_rank = vec![usize::MAX; mcfg.n_layers];
    for id in filt.retained.iter().take(200) {
        let wf = world.facts.iter().find(|w| w.fact.id == *id).unwrap();
        let stack = lens_distributions(&trained, &wf.fact.image, &wf.fact.question).unwrap();
        for (l, dist) in stack.dists.iter().enumerate() {
            let r = lens_rank(dist, wf.fact.answer);
            min_rank[l] = min_rank[l].min(r);
            let b = if r == 0 {0} else if r < 5 {1} else if r < 20 {2} else if r < 50 {3} else {4};
            rank_hist[l][b] += 1;
        }
    }
    for (l, hist) in rank_hist.iter().enumerate() {
        println!("lens layer {}: top1 {} top5 {} top20 {} top50 {} beyond {} (min rank {})",
            l + 1, hist[0], hist[1], hist[2], hist[3], hist[4], min_rank[l]);
    }
}
