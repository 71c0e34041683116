//! Calibration harness: times the training step at full scale, then runs the
//! benchmark variants end to end and prints the metric ordering. Used to pin
//! the shipped default schedule; not part of the test suite.

use std::time::Instant;

use mmloc_core::config::{ExperimentConfig, FusionKind, FusionKindDefault, SplitMode};
use mmloc_core::data::generate_dataset;
use mmloc_core::proposals::BBox;
use mmloc_core::runner::{evaluate, train_with, EvalOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("time");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
    if let Some(e1) = args.get(3).and_then(|s| s.parse().ok()) {
        cfg.train.epochs_stage1 = e1;
    }
    if let Some(e2) = args.get(4).and_then(|s| s.parse().ok()) {
        cfg.train.epochs_stage2 = e2;
    }
    if let Some(lr) = args.get(6).and_then(|s| s.parse().ok()) {
        cfg.train.lr = lr;
    }
    if let Some(di) = args.get(7).and_then(|s| s.parse().ok()) {
        cfg.train.decay_interval = di;
    }

    eprintln!("generating dataset (seed {seed})...");
    let t0 = Instant::now();
    let ds = generate_dataset(&cfg.data, cfg.model.image_size, cfg.model.sketch_size, cfg.seed).unwrap();
    eprintln!("dataset: {:.1}s, {} train / {} test scenes", t0.elapsed().as_secs_f64(), ds.train.len(), ds.test.len());

    // anchor coverage: fraction of gt boxes with at least one IoU>=0.5 anchor
    {
        use mmloc_core::proposals::{anchor_targets, generate_anchors};
        let cells = cfg.model.image_size / cfg.model.stride;
        let anchors = generate_anchors(cells, cells, cfg.model.stride, &cfg.model.anchor_scales, &cfg.model.anchor_ratios);
        let mut covered = 0usize;
        let mut total = 0usize;
        for scene in &ds.train {
            for (b, _) in &scene.instances {
                total += 1;
                let t = anchor_targets(&anchors, &[*b]);
                if !t.positive.is_empty() {
                    covered += 1;
                }
            }
        }
        eprintln!("anchor coverage: {covered}/{total} = {:.3}", covered as f64 / total as f64);
        let _ = BBox::new(0.0, 0.0, 1.0, 1.0);
    }

    if mode == "time" {
        // time a handful of real training steps in both stages
        use mmloc_core::pipeline::{training_step, Model, TrainSample};
        use rand::{Rng, SeedableRng};
        let mut master = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let init_seed: u64 = master.gen();
        let model = Model::init(&cfg.model, ds.vocab_size(), init_seed).unwrap();
        let anchors = model.anchors();
        for attention in [false, true] {
            let t = Instant::now();
            let mut n = 0;
            for scene in ds.train.iter().take(20) {
                let cat = scene.instances[0].1;
                let query_boxes: Vec<BBox> = scene
                    .instances
                    .iter()
                    .filter(|(_, c)| *c == cat)
                    .map(|(b, _)| *b)
                    .collect();
                let sample = TrainSample {
                    image: &scene.image,
                    sketch: &ds.sketches[cat][0],
                    gloss: &ds.categories[cat].gloss,
                    class_tokens: None,
                    query_boxes,
                    all_boxes: scene.instances.iter().map(|(b, _)| *b).collect(),
                };
                let (b, _) = training_step(&model, &sample, FusionKind::Ops, attention, &cfg.train, &anchors).unwrap();
                assert!(b.total.is_finite());
                n += 1;
            }
            eprintln!(
                "stage{} step: {:.1} ms/sample",
                if attention { 2 } else { 1 },
                t.elapsed().as_secs_f64() * 1000.0 / n as f64
            );
        }
        return;
    }

    if mode == "probe" {
        // train one variant, then inspect score separation on train scenes
        use mmloc_core::pipeline::{encode_scene, encode_query, localize_scene, Model};
        use mmloc_core::fusion::FusionStrategy;
        use mmloc_core::proposals::{iou, label_proposals};
        let variant = FusionKind::parse(args.get(5).map(String::as_str).unwrap_or("ops")).unwrap();
        let attention_ready = cfg.train.epochs_stage2 > 0;
        let mut vcfg = cfg.clone();
        vcfg.fusion = FusionKindDefault(variant);
        let out = train_with(&vcfg, &ds, |e| {
            eprintln!("  stage{} epoch{:2} loss {:.4}", e.stage, e.epoch_in_stage, e.mean_loss);
        })
        .unwrap();
        let model: &Model = &out.model;
        let mut fg_scores = Vec::new();
        let mut bg_scores = Vec::new();
        let mut fg_found = 0usize;
        let mut obj_sep = Vec::new();
        for scene in ds.train.iter().take(40) {
            let cat = scene.instances[0].1;
            let gts: Vec<BBox> = scene.instances.iter().filter(|(_, c)| *c == cat).map(|(b, _)| *b).collect();
            let enc = encode_scene(model, &scene.image, attention_ready).unwrap();
            let q = encode_query(model, &[&ds.sketches[cat][0]], Some(&ds.categories[cat].gloss), None, FusionStrategy::new(variant)).unwrap();
            let lo = localize_scene(model, &enc, &q, variant, attention_ready, 100, 50).unwrap();
            let labels = label_proposals(&lo.proposals, &gts);
            if labels.iter().any(|&l| l == 1) { fg_found += 1; }
            // objectness: query-fg vs true background (other objects excluded)
            let all_boxes: Vec<BBox> = scene.instances.iter().map(|(b, _)| *b).collect();
            let fg_obj: Vec<f64> = lo.proposals.iter().zip(&labels).filter(|(_, &l)| l == 1).map(|(p, _)| p.objectness).collect();
            let bg_obj: Vec<f64> = lo.proposals.iter().filter(|p| all_boxes.iter().all(|b| iou(&p.bbox, b) < 0.2)).map(|p| p.objectness).collect();
            if !fg_obj.is_empty() && !bg_obj.is_empty() {
                obj_sep.push(fg_obj.iter().sum::<f64>() / fg_obj.len() as f64 - bg_obj.iter().sum::<f64>() / bg_obj.len() as f64);
            }
            for sp in &lo.scored {
                let is_fg = gts.iter().any(|g| iou(&sp.proposal.bbox, g) >= 0.5);
                if is_fg { fg_scores.push(sp.a); } else { bg_scores.push(sp.a); }
            }
        }
        let mean = |v: &Vec<f64>| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        // magnitude telemetry on one scene
        {
            let scene = &ds.train[0];
            let cat = scene.instances[0].1;
            let enc = encode_scene(model, &scene.image, attention_ready).unwrap();
            let q = encode_query(model, &[&ds.sketches[cat][0]], Some(&ds.categories[cat].gloss), None, FusionStrategy::new(FusionKind::Ops)).unwrap();
            let lo = localize_scene(model, &enc, &q, FusionKind::Ops, attention_ready, 100, 10).unwrap();
            let fm_scale = enc.img_fm.data.iter().map(|v| v.abs()).sum::<f64>() / enc.img_fm.data.len() as f64;
            if let Some(att) = &lo.attention {
                let mean_abs = att.scores.iter().map(|v| v.abs()).sum::<f64>() / att.scores.len() as f64;
                let max_abs = att.scores.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let objs: Vec<f64> = lo.proposals.iter().map(|p| p.objectness).collect();
                let omax = objs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let omin = objs.iter().cloned().fold(f64::INFINITY, f64::min);
                println!("telemetry: |fm| {:.4}  |lambda| mean {:.4} max {:.4}  obj range [{:.2}, {:.2}]", fm_scale, mean_abs, max_abs, omin, omax);
                println!("gts: {:?}", scene.instances.iter().map(|(b, c)| (format!("{:.0},{:.0},{:.0},{:.0}", b.x1, b.y1, b.x2, b.y2), *c)).collect::<Vec<_>>());
                for p in lo.proposals.iter().take(6) {
                    println!("  prop obj {:.2} box {:.0},{:.0},{:.0},{:.0} ({}x{})", p.objectness, p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2, p.bbox.width() as i64, p.bbox.height() as i64);
                }
            }
        }
        println!("scenes with fg proposal: {fg_found}/40");
        println!("fg score mean {:.4} (n={}), bg score mean {:.4} (n={})", mean(&fg_scores), fg_scores.len(), mean(&bg_scores), bg_scores.len());
        println!("mean objectness separation fg-bg: {:.4}", mean(&obj_sep));
        // also evaluate on the training categories over train scenes? approximate: closed-style eval on test scenes with seen cats
        return;
    }

    // mode == "run": full training + eval for the requested variants
    let variants: Vec<FusionKind> = match args.get(5).map(String::as_str) {
        Some("all") | None => vec![FusionKind::Ops, FusionKind::Concat, FusionKind::Sketch, FusionKind::Gloss],
        Some(one) => vec![FusionKind::parse(one).unwrap()],
    };
    for variant in variants {
        let mut vcfg = cfg.clone();
        vcfg.fusion = FusionKindDefault(variant);
        let t = Instant::now();
        let out = train_with(&vcfg, &ds, |e| {
            eprintln!(
                "  [{}] stage{} epoch{:2} loss {:.4} (lr {})",
                variant.as_str(),
                e.stage,
                e.epoch_in_stage,
                e.mean_loss,
                e.lr
            );
        })
        .unwrap();
        let train_secs = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let report = evaluate(
            &out.model,
            &vcfg,
            &ds,
            EvalOptions { split: SplitMode::Open, fusion: variant, attention_bypass: false },
        )
        .unwrap();
        let bypass = evaluate(
            &out.model,
            &vcfg,
            &ds,
            EvalOptions { split: SplitMode::Open, fusion: variant, attention_bypass: true },
        )
        .unwrap();
        println!(
            "{}: AP@50 {:.2} mAP {:.2} recall {:.4} (bypass recall {:.4}) | train {:.0}s eval {:.0}s | loss {:.3} -> {:.3}",
            variant.as_str(),
            report.ap50,
            report.map,
            report.proposal_recall,
            bypass.proposal_recall,
            train_secs,
            t.elapsed().as_secs_f64(),
            out.epoch_losses.first().unwrap_or(&f64::NAN),
            out.epoch_losses.last().unwrap_or(&f64::NAN),
        );
    }
}
