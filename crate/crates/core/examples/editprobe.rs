use eraselab_core::attacks::*;
use eraselab_core::editor::*;
use eraselab_core::harness::checkpoint::{load_checkpoint, save_checkpoint};
use eraselab_core::lens::lens_distributions;
use eraselab_core::model::{init_model, pretrain, ModelConfig, PretrainHyper};
use eraselab_core::worldgen::*;
use std::time::Instant;

fn main() {
    let wcfg = WorldConfig::default();
    let gen = Generator::new(&wcfg).unwrap();
    let world = gen.generate();
    let ckpt = std::path::Path::new("/tmp/ref.ckpt");
    let state = if ckpt.exists() {
        load_checkpoint(ckpt).unwrap()
    } else {
        let corpus = gen.training_corpus();
        let hyper = PretrainHyper { verbose: true, ..PretrainHyper::default() };
        let (s, r) = pretrain(&init_model(&ModelConfig::default()).unwrap(), &corpus, &hyper).unwrap();
        eprintln!("trained: steps {} acc {:.4}", r.steps_run, r.final_accuracy);
        save_checkpoint(&s, ckpt).unwrap();
        s
    };
    let filt = filter_retained(&world, &state).unwrap();
    println!("retained {}/{} (know {} rephrase {} neigh {})",
        filt.retained.len(), filt.total, filt.failed_know, filt.failed_rephrase, filt.failed_neighbor);

    // lens visibility of the answer on the unedited model
    let mut rank_hist = vec![[0usize; 4]; 4];
    for id in filt.retained.iter().take(100) {
        let wf = world.facts.iter().find(|w| w.fact.id == *id).unwrap();
        let stack = lens_distributions(&state, &wf.fact.image, &wf.fact.question).unwrap();
        for (l, dist) in stack.dists.iter().enumerate() {
            let r = lens_rank(dist, wf.fact.answer);
            let b = if r == 0 {0} else if r < 20 {1} else if r < 50 {2} else {3};
            rank_hist[l][b] += 1;
        }
    }
    for (l, h) in rank_hist.iter().enumerate() {
        println!("pre-edit lens layer {}: top1 {:3} top20 {:3} top50 {:3} beyond {:3}", l+1, h[0], h[1], h[2], h[3]);
    }

    let n_layers = state.config.n_layers;
    let target = EditTarget::LlmMlpDown { layer: 2 };
    let controls = verified_controls(&world, &state).unwrap();
    println!("verified controls: {}", controls.len());

    let budget = 20;
    let attacks: Vec<(String, AttackSpec)> = vec![
        ("hp".into(), AttackSpec::whitebox(AttackKind::Hp, budget)),
        ("pd".into(), AttackSpec::whitebox(AttackKind::Pd, budget)),
        ("pd2".into(), AttackSpec::whitebox(AttackKind::Pd2, budget)),
        ("ft_hp".into(), AttackSpec::ft_hp(budget, FtParams::default())),
        ("bb_img_e".into(), AttackSpec::blackbox(AttackKind::BbImage, Level::Easy, budget)),
        ("bb_img_h".into(), AttackSpec::blackbox(AttackKind::BbImage, Level::Hard, budget)),
        ("bb_q_e".into(), AttackSpec::blackbox(AttackKind::BbQuestion, Level::Easy, budget)),
        ("bb_q_h".into(), AttackSpec::blackbox(AttackKind::BbQuestion, Level::Hard, budget)),
        ("bb_mm".into(), AttackSpec::blackbox(AttackKind::BbMultimodal, Level::Hard, budget)),
    ];

    let n_facts: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    for kind in DefenseKind::ALL {
        let spec = DefenseSpec::new(kind, n_layers);
        let t0 = Instant::now();
        let mut steps_sum = 0usize;
        let mut conv = 0usize;
        let mut rewrite_sum = 0.0;
        let mut rand_damage = 0.0;
        let mut hits = vec![0usize; attacks.len()];
        let mut ran = vec![0usize; attacks.len()];
        for id in filt.retained.iter().take(n_facts) {
            let wf = world.facts.iter().find(|w| w.fact.id == *id).unwrap();
            let (edited, rep) = edit(&state, &wf.fact, Some(&wf.bundle), &spec, target).unwrap();
            steps_sum += rep.steps;
            if !rep.converged { continue; }
            conv += 1;
            rewrite_sum += rep.rewrite_score();
            let mut correct = 0;
            for c in controls.iter() {
                if edited.answer(&c.image, &c.question).unwrap().0 == c.answer { correct += 1; }
            }
            rand_damage += 1.0 - correct as f64 / controls.len() as f64;
            for (i, (_, aspec)) in attacks.iter().enumerate() {
                if aspec.kind == AttackKind::FtHp && conv > 6 { continue; } // cap ft cost
                let set = match aspec.kind {
                    AttackKind::FtHp => finetune_then_attack(&edited, &controls, &wf.fact, aspec).unwrap(),
                    k if k.is_blackbox() => blackbox_rephrase_attack(&edited, &wf.fact, &wf.bundle, aspec).unwrap(),
                    _ => whitebox_attack(&edited, &wf.fact, aspec).unwrap(),
                };
                ran[i] += 1;
                if set.contains(wf.fact.answer) { hits[i] += 1; }
            }
        }
        print!("{:16} conv {:2}/{:2} steps~{:4} rw {:.3} randDacc {:.3} | ",
            kind.label(), conv, n_facts, steps_sum / n_facts.max(1), rewrite_sum / conv.max(1) as f64, rand_damage / conv.max(1) as f64);
        for (i, (name, _)) in attacks.iter().enumerate() {
            print!("{} {:.2} ", name, hits[i] as f64 / ran[i].max(1) as f64);
        }
        println!("({:.0}s)", t0.elapsed().as_secs_f64());
    }
}
