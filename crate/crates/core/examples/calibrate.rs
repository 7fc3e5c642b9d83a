// Scratch calibration runner: prints the direction-level quantities the
// experiment defaults must support. Not part of the deliverable surface.

use std::time::Instant;

use memsearch_core::corpus::{
    build_mem_subset, generate_corpus, hpo_subsample, CorpusConfig, EmbeddingTable, TemplateFamily,
};
use memsearch_core::denoiser::{
    effective_params, pretrain, train_full, train_inner, ArchConfig, EffectiveModel, Mask,
    MaskSpace, TrainConfig, TrainJob,
};
use memsearch_core::diffusion::build_schedule;
use memsearch_core::metrics::{
    amd, attack_prompts, evaluate_model, evaluate_objectives, extraction_attack, mem_subset_d_mem,
    resolve_attack_delta, AttackConfig, EvalContext, EvalSplit, MetricConfig,
};
use memsearch_core::mitigation::MitigationConfig;
use memsearch_core::rng::{derive_seed, index_seed};
use memsearch_core::search::{run_search, SearchConfig, TrialEvaluator};

fn main() {
    let t0 = Instant::now();
    let arch = ArchConfig::desk_default();
    let sched = build_schedule(50, 0.02, 0.35).unwrap();
    let embed = EmbeddingTable::new(64, arch.embed_dim, derive_seed(1234, "embed"));

    let base_cfg = CorpusConfig {
        seed: derive_seed(1234, "base-corpus"),
        n_train: 2000,
        n_val: 250,
        n_test: 250,
        n_classes: 8,
        vocab_size: 64,
        height: 8,
        width: 8,
        family: TemplateFamily::Blobs,
        noise_sigma: 0.35,
        brightness_scale: 0.2,
    };
    let target_cfg = CorpusConfig {
        seed: derive_seed(1234, "target-corpus"),
        family: TemplateFamily::Bars,
        ..base_cfg.clone()
    };

    let base_corpus = generate_corpus(&base_cfg).unwrap();
    let target = generate_corpus(&target_cfg).unwrap();
    let target = build_mem_subset(&target, 10, 50, 10).unwrap();
    println!("[{:?}] corpora built; train={} (augmented)", t0.elapsed(), target.train.len());

    let mit = MitigationConfig::none();
    let pre_cfg = TrainConfig {
        steps: 2500,
        batch_size: 32,
        ..TrainConfig::desk_default(derive_seed(1234, "pretrain"))
    };
    let job = TrainJob {
        data: &base_corpus.train,
        schedule: &sched,
        embed: &embed,
        mitigation: &mit,
        calibration: &[],
    };
    let t = Instant::now();
    let (theta0, pre_loss) = pretrain(&arch, &job, &pre_cfg).unwrap();
    println!(
        "[{:?}] pretrain {} steps in {:?}: loss {:.4} -> {:.4}",
        t0.elapsed(),
        pre_cfg.steps,
        t.elapsed(),
        pre_loss[..20].iter().sum::<f64>() / 20.0,
        pre_loss[pre_loss.len() - 20..].iter().sum::<f64>() / 20.0
    );

    let metric_cfg = MetricConfig::desk_default(derive_seed(1234, "eval"));
    let ctx = EvalContext {
        corpus: &target,
        embed: &embed,
        schedule: &sched,
        config: &metric_cfg,
    };

    // Freeze row.
    let frozen = EffectiveModel::frozen(&theta0);
    let t = Instant::now();
    let freeze_row = evaluate_model(&frozen, &ctx, EvalSplit::Test).unwrap();
    println!("[{:?}] freeze row ({:?}): {:?}", t0.elapsed(), t.elapsed(), freeze_row);

    // Full FT on the augmented train set.
    let ft_cfg = TrainConfig {
        steps: 10000,
        learning_rate: 2e-3,
        batch_size: 32,
        ..TrainConfig::desk_default(derive_seed(1234, "finetune"))
    };
    let job_full = TrainJob {
        data: &target.train,
        schedule: &sched,
        embed: &embed,
        mitigation: &mit,
        calibration: &target.val,
    };
    let t = Instant::now();
    let full = train_full(&theta0, &job_full, &ft_cfg, false).unwrap();
    println!(
        "[{:?}] full-FT 400 steps in {:?}: loss {:.4} -> {:.4}",
        t0.elapsed(),
        t.elapsed(),
        full.loss_history[..10].iter().sum::<f64>() / 10.0,
        full.loss_history[full.loss_history.len() - 10..].iter().sum::<f64>() / 10.0
    );
    let full_model = EffectiveModel::frozen(&full.params);
    let full_row = evaluate_model(&full_model, &ctx, EvalSplit::Test).unwrap();
    println!("full-FT row: {full_row:?}");

    // Criterion 5 quantities: dup vs held-out d_mem, amd, extraction.
    let dup_dmem = mem_subset_d_mem(&full_model, &ctx).unwrap();
    let mut held_dmem = 0.0;
    for (i, s) in target.val.iter().take(10).enumerate() {
        let emb_p = embed.embed_caption(&s.caption).unwrap();
        held_dmem += memsearch_core::metrics::d_mem(
            &full_model,
            &emb_p,
            &target.class_templates[s.class_id],
            &sched,
            index_seed(derive_seed(1234, "heldout"), i as u64),
            4,
        )
        .unwrap();
    }
    held_dmem /= 10.0;
    println!("d_mem dup={dup_dmem:.4} held-out={held_dmem:.4} (want dup > held)");
    // Non-duplicated train prompts: seen in training but not memorized.
    let mut train_dmem = 0.0;
    let nondup: Vec<&memsearch_core::corpus::CaptionedSample> = target.train[..target.base_train_len]
        .iter().filter(|s| !s.is_dup).take(10).collect();
    for (i, s) in nondup.iter().enumerate() {
        let emb_p = embed.embed_caption(&s.caption).unwrap();
        train_dmem += memsearch_core::metrics::d_mem(
            &full_model, &emb_p, &target.class_templates[s.class_id], &sched,
            index_seed(derive_seed(1234, "nondup"), i as u64), 4).unwrap();
    }
    train_dmem /= 10.0;
    println!("d_mem non-dup-train={train_dmem:.4} (want dup {dup_dmem:.4} > this)");
    // Same comparisons with the sample's own image as the reference.
    let own_ref = |samples: Vec<&memsearch_core::corpus::CaptionedSample>, tag: &str| -> f64 {
        let mut acc = 0.0;
        let n = samples.len() as f64;
        for (i, s) in samples.iter().enumerate() {
            let emb_p = embed.embed_caption(&s.caption).unwrap();
            acc += memsearch_core::metrics::d_mem(
                &full_model, &emb_p, &s.image, &sched,
                index_seed(derive_seed(1234, tag), i as u64), 4).unwrap();
        }
        acc / n
    };
    let dup_own = own_ref(target.mem_subset.iter().collect(), "own-dup");
    let nondup_own = own_ref(target.train[..target.base_train_len].iter().filter(|s| !s.is_dup).take(10).collect(), "own-nd");
    let val_own = own_ref(target.val.iter().take(10).collect(), "own-val");
    println!("d_mem(own-image ref): dup={dup_own:.4} nondup-train={nondup_own:.4} val={val_own:.4}");
    let dup_len: f64 = target.mem_subset.iter().map(|s| s.caption.len() as f64).sum::<f64>() / 10.0;
    let held_len: f64 = target.val.iter().take(10).map(|s| s.caption.len() as f64).sum::<f64>() / 10.0;
    let enorm = |c: &[usize]| {
        let e = embed.embed_caption(c).unwrap();
        e.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let dup_norm: f64 = target.mem_subset.iter().map(|s| enorm(&s.caption)).sum::<f64>() / 10.0;
    let held_norm: f64 = target.val.iter().take(10).map(|s| enorm(&s.caption)).sum::<f64>() / 10.0;
    println!("caption len dup={dup_len:.2} held={held_len:.2}; emb norm dup={dup_norm:.3} held={held_norm:.3}");
    // Does a dup-prompt generation approach its memorized image?
    {
        let d = target.config.image_dim();
        let s0 = &target.mem_subset[0];
        let e0 = embed.embed_caption(&s0.caption).unwrap();
        let g = memsearch_core::diffusion::generate(&full_model, &e0, d, &sched, 777, metric_cfg.convention).unwrap();
        let to_mem = memsearch_core::metrics::cosine_distance(&g, &s0.image).unwrap();
        let to_tpl = memsearch_core::metrics::cosine_distance(&g, &target.class_templates[s0.class_id]).unwrap();
        println!("gen(dup prompt): cos-dist to memorized image {to_mem:.3}, to template {to_tpl:.3}");
        let g2 = memsearch_core::diffusion::generate(&full_model, &e0, d, &sched, 778, metric_cfg.convention).unwrap();
        let seed_var = memsearch_core::metrics::tile_l2(&g, &g2, 8, 8, 4).unwrap();
        println!("tile_l2 between two seeds of same dup prompt: {seed_var:.3} (delta threshold above)");
    }

    // amd: generated from dup prompts vs held-out prompts.
    let d = target.config.image_dim();
    let gen_seed = derive_seed(1234, "gen-amd");
    let gen_from = |caps: Vec<Vec<usize>>, tag: u64| -> Vec<Vec<f64>> {
        caps.iter()
            .enumerate()
            .flat_map(|(i, c)| {
                let emb_p = embed.embed_caption(c).unwrap();
                (0..4)
                    .map(|k| {
                        memsearch_core::diffusion::generate(
                            &full_model,
                            &emb_p,
                            d,
                            &sched,
                            index_seed(gen_seed ^ tag, (i * 4 + k) as u64),
                            metric_cfg.convention,
                        )
                        .unwrap()
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let dup_caps: Vec<Vec<usize>> = target.mem_subset.iter().map(|s| s.caption.clone()).collect();
    let held_caps: Vec<Vec<usize>> = target.val.iter().take(10).map(|s| s.caption.clone()).collect();
    let gen_dup = gen_from(dup_caps, 1);
    let gen_held = gen_from(held_caps, 2);
    let train_imgs: Vec<Vec<f64>> = target.train[..target.base_train_len]
        .iter()
        .map(|s| s.image.clone())
        .collect();
    let amd_dup = amd(&gen_dup, &train_imgs).unwrap();
    let amd_held = amd(&gen_held, &train_imgs).unwrap();
    println!("amd dup={amd_dup:.4} held={amd_held:.4} (want dup < held)");

    let delta = resolve_attack_delta(&ctx).unwrap();
    println!("attack delta = {delta:.4}");
    let (dup_prompts, ctrl_prompts) = attack_prompts(&ctx, EvalSplit::Test).unwrap();
    let acfg = AttackConfig {
        samples_per_prompt: 16,
        tile: 4,
        delta,
        min_clique: 3,
        seed: derive_seed(1234, "atk"),
        convention: metric_cfg.convention,
    };
    let dup_atk = extraction_attack(&full_model, &dup_prompts, 8, 8, &sched, &acfg).unwrap();
    let ctrl_atk = extraction_attack(&full_model, &ctrl_prompts, 8, 8, &sched, &acfg).unwrap();
    println!(
        "extracted dup={} control={} (want dup > control)",
        dup_atk.report.extracted_count, ctrl_atk.report.extracted_count
    );

    // Spectral full-mask trial on the HPO subset (criterion 6 feel).
    let hpo = hpo_subsample(&target, 0.01, derive_seed(1234, "hpo")).unwrap();
    println!("hpo subset size = {}", hpo.len());
    let trial_cfg = TrainConfig {
        steps: 400,
        batch_size: 32,
        ..TrainConfig::desk_default(derive_seed(1234, "trial"))
    };
    let job_hpo = TrainJob {
        data: &hpo,
        schedule: &sched,
        embed: &embed,
        mitigation: &mit,
        calibration: &target.val,
    };
    let t = Instant::now();
    let spectral_full_mask = Mask::ones(MaskSpace::Spectral, &arch);
    let spec = train_inner(&theta0, &spectral_full_mask, &job_hpo, &trial_cfg).unwrap();
    let spec_model = effective_params(&spec.params, &spectral_full_mask).unwrap();
    let spec_obj = evaluate_objectives(&spec_model, &ctx).unwrap();
    println!(
        "[{:?}] spectral-full trial in {:?}: objectives {spec_obj:?}",
        t0.elapsed(),
        t.elapsed()
    );

    // Full-FT objectives measured the same way (on HPO subset training).
    let full_hpo = train_full(&theta0, &job_hpo, &trial_cfg, false).unwrap();
    let full_hpo_model = EffectiveModel::frozen(&full_hpo.params);
    let full_obj = evaluate_objectives(&full_hpo_model, &ctx).unwrap();
    println!("full-FT-on-hpo objectives: {full_obj:?}");

    // One short search to sniff trial cost.
    let evaluator = TrialEvaluator {
        theta0: &theta0,
        hpo_train: &hpo,
        corpus: &target,
        schedule: &sched,
        embed: &embed,
        train_cfg: trial_cfg.clone(),
        metric_cfg: metric_cfg.clone(),
        mitigation: MitigationConfig::none(),
    };
    let search_cfg = SearchConfig {
        trial_budget: 6,
        generations: 1,
        ..SearchConfig::desk_default(MaskSpace::Spectral, derive_seed(1234, "search"))
    };
    let t = Instant::now();
    let outcome = run_search(&search_cfg, arch.mask_len(MaskSpace::Spectral), &evaluator).unwrap();
    println!(
        "[{:?}] 6-trial search in {:?}; front size {}",
        t0.elapsed(),
        t.elapsed(),
        outcome.front.members.len()
    );
    for t in &outcome.log {
        println!(
            "  trial {} popcount={} obj={:?}",
            t.trial_id,
            t.mask.popcount(),
            t.objectives
        );
    }
    println!("total {:?}", t0.elapsed());
}
