// Scratch probe: can the denoiser memorize 10 duplicated pairs when they
// dominate the training mass?

use memsearch_core::corpus::{build_mem_subset, generate_corpus, CaptionedSample, CorpusConfig, EmbeddingTable, TemplateFamily};
use memsearch_core::denoiser::{pretrain, train_full, ArchConfig, EffectiveModel, TrainConfig, TrainJob};
use memsearch_core::diffusion::{build_schedule, generate};
use memsearch_core::metrics::{cosine_distance, d_mem, tile_l2};
use memsearch_core::mitigation::MitigationConfig;
use memsearch_core::rng::{derive_seed, index_seed};

fn main() {
    for master in [1234u64, 2024] {
        run_one(master);
    }
}

fn run_one(master: u64) {
    println!("=== master seed {master} ===");
    let arch = ArchConfig { hidden_dim: 128, embed_dim: 32, ..ArchConfig::desk_default() };
    let sched = build_schedule(50, 0.1, 0.3).unwrap();
    let embed = EmbeddingTable::new(64, arch.embed_dim, derive_seed(master, "embed"));
    let mit = MitigationConfig::none();

    let base_cfg = CorpusConfig {
        seed: derive_seed(master, "base-corpus"),
        n_train: 2000,
        n_val: 250,
        n_test: 250,
        n_classes: 8,
        vocab_size: 64,
        height: 8,
        width: 8,
        family: TemplateFamily::Blobs,
        noise_sigma: 0.5,
        brightness_scale: 0.1,
    };
    let target_cfg = CorpusConfig {
        seed: derive_seed(master, "target-corpus"),
        family: TemplateFamily::Bars,
        ..base_cfg.clone()
    };
    let base_corpus = generate_corpus(&base_cfg).unwrap();
    let target = build_mem_subset(&generate_corpus(&target_cfg).unwrap(), 10, 50, 10).unwrap();

    let pre_cfg = TrainConfig {
        steps: 2500,
        batch_size: 32,
        ..TrainConfig::desk_default(derive_seed(master, "pretrain"))
    };
    let job = TrainJob {
        data: &base_corpus.train,
        schedule: &sched,
        embed: &embed,
        mitigation: &mit,
        calibration: &[],
    };
    // Key-geometry check: pairwise cosine similarity of dup-prompt embeddings.
    {
        let keys: Vec<Vec<f64>> = target.mem_subset.iter().map(|s| embed.embed_caption(&s.caption).unwrap()).collect();
        let mut acc = 0.0;
        let mut count = 0;
        let mut max_sim: f64 = -1.0;
        for i in 0..keys.len() {
            for j in (i + 1)..keys.len() {
                let sim = 1.0 - cosine_distance(&keys[i], &keys[j]).unwrap();
                acc += sim;
                count += 1;
                max_sim = max_sim.max(sim);
            }
        }
        println!("dup-key cosine similarity: mean {:.3} max {:.3}", acc / count as f64, max_sim);
        let caps: Vec<&[usize]> = target.mem_subset.iter().map(|s| s.caption.as_slice()).collect();
        for c in caps.iter().take(5) { println!("  caption {:?}", c); }
    }
    let (theta0, _) = pretrain(&arch, &job, &pre_cfg).unwrap();
    println!("pretrained");

    let dup_only: Vec<_> = target.train.clone();
    println!("train set: {} (full augmented)", dup_only.len());
    for (steps, lr) in [(16000usize, 2e-3)] {
        let cfg = TrainConfig {
            steps,
            batch_size: 32,
            learning_rate: lr,
            weight_decay: 0.0,
            ..TrainConfig::desk_default(derive_seed(master, "memprobe"))
        };
        let job = TrainJob {
            data: &dup_only,
            schedule: &sched,
            embed: &embed,
            mitigation: &mit,
            calibration: &[],
        };
        let r = train_full(&theta0, &job, &cfg, false).unwrap();
        let model = EffectiveModel::frozen(&r.params);
        let tail = r.loss_history[r.loss_history.len() - 20..].iter().sum::<f64>() / 20.0;

        // Generation recall per dup sample.
        let mut to_mem = 0.0;
        let mut to_tpl = 0.0;
        let mut seed_spread = 0.0;
        for (i, s) in target.mem_subset.iter().enumerate() {
            let e = embed.embed_caption(&s.caption).unwrap();
            let g1 = generate(&model, &e, 64, &sched, index_seed(7, (2 * i) as u64), memsearch_core::diffusion::ReverseConvention::Ddim).unwrap();
            let g2 = generate(&model, &e, 64, &sched, index_seed(7, (2 * i + 1) as u64), memsearch_core::diffusion::ReverseConvention::Ddim).unwrap();
            to_mem += cosine_distance(&g1, &s.image).unwrap();
            to_tpl += cosine_distance(&g1, &target.class_templates[s.class_id]).unwrap();
            seed_spread += tile_l2(&g1, &g2, 8, 8, 4).unwrap();
        }
        println!(
            "steps={steps} lr={lr}: tail loss {tail:.4}; gen->mem {:.3} gen->tpl {:.3} seed-spread {:.3}",
            to_mem / 10.0,
            to_tpl / 10.0,
            seed_spread / 10.0
        );

        // d_mem template-ref for dup vs val prompts.
        let mut dup_dm = 0.0;
        let mut val_dm = 0.0;
        for (i, s) in target.mem_subset.iter().enumerate() {
            let e = embed.embed_caption(&s.caption).unwrap();
            dup_dm += d_mem(&model, &e, &target.class_templates[s.class_id], &sched, index_seed(9, i as u64), 4).unwrap();
        }
        for (i, s) in target.val.iter().take(10).enumerate() {
            let e = embed.embed_caption(&s.caption).unwrap();
            val_dm += d_mem(&model, &e, &target.class_templates[s.class_id], &sched, index_seed(11, i as u64), 4).unwrap();
        }
        println!("  d_mem dup={:.4} val={:.4}", dup_dm / 10.0, val_dm / 10.0);
        let mut nd_dm = 0.0;
        let nondup: Vec<_> = target.train[..target.base_train_len].iter().filter(|s| !s.is_dup).take(10).collect();
        for (i, s) in nondup.iter().enumerate() {
            let e = embed.embed_caption(&s.caption).unwrap();
            nd_dm += d_mem(&model, &e, &target.class_templates[s.class_id], &sched, index_seed(13, i as u64), 4).unwrap();
        }
        println!("  d_mem nondup-train={:.4}", nd_dm / 10.0);
        // Extraction counts at the calibrated threshold.
        {
            use memsearch_core::metrics::{extraction_attack, AttackConfig, calibrate_attack_delta};
            let train_imgs: Vec<Vec<f64>> = target.train[..target.base_train_len].iter().map(|s| s.image.clone()).collect();
            let delta = calibrate_attack_delta(&train_imgs, 8, 8, 4, 2000, 99).unwrap();
            let acfg = AttackConfig { samples_per_prompt: 16, tile: 4, delta, min_clique: 3, seed: 303, convention: memsearch_core::diffusion::ReverseConvention::Ddim };
            let dup_p: Vec<Vec<f64>> = target.mem_subset.iter().map(|s| embed.embed_caption(&s.caption).unwrap()).collect();
            let ctl_p: Vec<Vec<f64>> = target.val.iter().take(10).map(|s| embed.embed_caption(&s.caption).unwrap()).collect();
            let a_dup = extraction_attack(&model, &dup_p, 8, 8, &sched, &acfg).unwrap();
            let a_ctl = extraction_attack(&model, &ctl_p, 8, 8, &sched, &acfg).unwrap();
            println!("  extraction delta={delta:.2}: dup={} ctl={}", a_dup.report.extracted_count, a_ctl.report.extracted_count);
            for d in [1.6] {
                let c2 = AttackConfig { delta: d, ..acfg };
                let ad = extraction_attack(&model, &dup_p, 8, 8, &sched, &c2).unwrap();
                let ac = extraction_attack(&model, &ctl_p, 8, 8, &sched, &c2).unwrap();
                println!("  extraction delta={d:.2}: dup={} ctl={}", ad.report.extracted_count, ac.report.extracted_count);
            }
        }
        // Additivity probe: is the prompt response x-dependent at all?
        {
            use memsearch_core::rng::Rng as R2;
            let mut pr = R2::new(4242);
            let e0 = embed.embed_caption(&target.mem_subset[0].caption).unwrap();
            let ez = vec![0.0; arch.embed_dim];
            let x1 = pr.normal_vec(64);
            let x2 = pr.normal_vec(64);
            for t in [5usize, 25] {
                let d1: Vec<f64> = model.predict(&x1, t, &e0).iter().zip(&model.predict(&x1, t, &ez)).map(|(a, b)| a - b).collect();
                let d2: Vec<f64> = model.predict(&x2, t, &e0).iter().zip(&model.predict(&x2, t, &ez)).map(|(a, b)| a - b).collect();
                let n1 = d1.iter().map(|v| v * v).sum::<f64>().sqrt();
                let diff = d1.iter().zip(&d2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                println!("  t={t}: |prompt-response|={n1:.3}, x-dependence {:.1}%", 100.0 * diff / n1);
            }
        }
        // Own-image reference variant of the same comparison.
        let own = |samples: Vec<&CaptionedSample>, tag: u64| -> f64 {
            let n = samples.len() as f64;
            samples.iter().enumerate().map(|(i, s)| {
                let e = embed.embed_caption(&s.caption).unwrap();
                d_mem(&model, &e, &s.image, &sched, index_seed(tag, i as u64), 4).unwrap()
            }).sum::<f64>() / n
        };
        let dup_own = own(target.mem_subset.iter().collect(), 71);
        let nd_own = own(target.train[..target.base_train_len].iter().filter(|s| !s.is_dup).take(10).collect(), 73);
        let val_own = own(target.val.iter().take(10).collect(), 79);
        println!("  d_mem own-ref: dup={dup_own:.4} nondup={nd_own:.4} val={val_own:.4}");
        {
            use memsearch_core::metrics::amd;
            let train_imgs: Vec<Vec<f64>> = target.train[..target.base_train_len].iter().map(|s| s.image.clone()).collect();
            let gen_set = |caps: Vec<Vec<usize>>, tag: u64| -> Vec<Vec<f64>> {
                caps.iter().enumerate().flat_map(|(i, c)| {
                    let e = embed.embed_caption(c).unwrap();
                    (0..4).map(|k| generate(&model, &e, 64, &sched, index_seed(tag, (i * 4 + k) as u64), memsearch_core::diffusion::ReverseConvention::Ddim).unwrap()).collect::<Vec<_>>()
                }).collect()
            };
            let dup_caps: Vec<Vec<usize>> = target.mem_subset.iter().map(|s| s.caption.clone()).collect();
            let ctl_caps: Vec<Vec<usize>> = target.val.iter().take(10).map(|s| s.caption.clone()).collect();
            let a_dup = amd(&gen_set(dup_caps, 61), &train_imgs).unwrap();
            let a_ctl = amd(&gen_set(ctl_caps, 67), &train_imgs).unwrap();
            println!("  amd dup={a_dup:.3} heldout-val={a_ctl:.3} (want dup < heldout)");
        }
        // Spread distributions: pairwise tile distances of generations per
        // prompt, dup vs control, against train-pair percentiles.
        {
            use memsearch_core::metrics::tile_l2;
            let spread_stats = |caps: Vec<Vec<usize>>, tag: u64| -> (f64, f64, f64) {
                let mut all: Vec<f64> = Vec::new();
                for (i, c) in caps.iter().enumerate() {
                    let e = embed.embed_caption(c).unwrap();
                    let gens: Vec<Vec<f64>> = (0..8)
                        .map(|k| generate(&model, &e, 64, &sched, index_seed(tag, (i * 8 + k) as u64), memsearch_core::diffusion::ReverseConvention::Ddim).unwrap())
                        .collect();
                    for a in 0..8 {
                        for b in (a + 1)..8 {
                            all.push(tile_l2(&gens[a], &gens[b], 8, 8, 4).unwrap());
                        }
                    }
                }
                all.sort_by(|x, y| x.partial_cmp(y).unwrap());
                (all[all.len() / 100], all[all.len() / 20], all[all.len() / 2])
            };
            let dup_caps: Vec<Vec<usize>> = target.mem_subset.iter().map(|s| s.caption.clone()).collect();
            let ctl_caps: Vec<Vec<usize>> = target.val.iter().take(10).map(|s| s.caption.clone()).collect();
            let (d1, d5, d50) = spread_stats(dup_caps, 31);
            let (c1, c5, c50) = spread_stats(ctl_caps, 37);
            println!("  gen spread dup: p1={d1:.2} p5={d5:.2} p50={d50:.2}");
            println!("  gen spread ctl: p1={c1:.2} p5={c5:.2} p50={c50:.2}");
            let train_imgs: Vec<Vec<f64>> = target.train[..target.base_train_len].iter().map(|s| s.image.clone()).collect();
            let mut pair: Vec<f64> = Vec::new();
            use memsearch_core::rng::Rng;
            let mut prng = Rng::new(99);
            for _ in 0..2000 {
                let i = prng.below(train_imgs.len());
                let j = prng.below(train_imgs.len());
                if i != j { pair.push(tile_l2(&train_imgs[i], &train_imgs[j], 8, 8, 4).unwrap()); }
            }
            pair.sort_by(|x, y| x.partial_cmp(y).unwrap());
            println!("  train pairs: p1={:.2} p5={:.2} p50={:.2}", pair[pair.len()/100], pair[pair.len()/20], pair[pair.len()/2]);
        }
        // Rollout trace: where does the trajectory commit?
        {
            use memsearch_core::diffusion::{predict_x0 as px0, reverse_step, NoisePredictor, ReverseConvention};
            use memsearch_core::rng::Rng;
            let s0 = &target.mem_subset[0];
            let e0 = embed.embed_caption(&s0.caption).unwrap();
            for z_seed in [100u64, 101] {
                let mut x = Rng::new(z_seed).normal_vec(64);
                print!("  rollout z{z_seed}: ");
                for t in (1..=50usize).rev() {
                    let eh = model.predict(&x, t, &e0);
                    if t % 10 == 0 || t == 1 {
                        let x0i = px0(&x, &eh, t, &sched, ReverseConvention::Ddim).unwrap();
                        let dm = cosine_distance(&x0i, &s0.image).unwrap();
                        let dt = cosine_distance(&x0i, &target.class_templates[s0.class_id]).unwrap();
                        print!("t{t}:mem{dm:.2}/tpl{dt:.2} ");
                    }
                    x = reverse_step(&x, &eh, t, &sched, ReverseConvention::Ddim).unwrap();
                }
                let fin_mem = cosine_distance(&x, &s0.image).unwrap();
                println!("final mem {fin_mem:.2}");
            }
        }
        // Mid-chain recall: implied x0 estimate vs true image / template.
        use memsearch_core::diffusion::{predict_x0, q_sample, NoisePredictor, ReverseConvention};
        use memsearch_core::rng::Rng;
        let s0 = &target.mem_subset[0];
        let e0 = embed.embed_caption(&s0.caption).unwrap();
        let e_empty = vec![0.0; arch.embed_dim];
        let mut rng = Rng::new(555);
        for t in [5usize, 15, 25, 35, 45] {
            let mut cond_to_mem = 0.0;
            let mut cond_to_tpl = 0.0;
            let mut unc_to_mem = 0.0;
            for _ in 0..3 {
                let eps = rng.normal_vec(64);
                let x_t = q_sample(&s0.image, t, &eps, &sched).unwrap();
                let eps_c = model.predict(&x_t, t, &e0);
                let eps_u = model.predict(&x_t, t, &e_empty);
                let x0_c = predict_x0(&x_t, &eps_c, t, &sched, ReverseConvention::Ddim).unwrap();
                let x0_u = predict_x0(&x_t, &eps_u, t, &sched, ReverseConvention::Ddim).unwrap();
                cond_to_mem += cosine_distance(&x0_c, &s0.image).unwrap();
                cond_to_tpl += cosine_distance(&x0_c, &target.class_templates[s0.class_id]).unwrap();
                unc_to_mem += cosine_distance(&x0_u, &s0.image).unwrap();
            }
            println!("  t={t}: x0hat cond->mem {:.3} cond->tpl {:.3} uncond->mem {:.3}",
                cond_to_mem / 3.0, cond_to_tpl / 3.0, unc_to_mem / 3.0);
        }
    }
}
