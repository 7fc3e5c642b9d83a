// Scratch probe: approximation limit of the denoiser on fully-memorizable
// data, across schedules with different low-t gain ranges.

use memsearch_core::corpus::{CaptionedSample, EmbeddingTable};
use memsearch_core::denoiser::{init_params, train_full, ArchConfig, EffectiveModel, TrainConfig, TrainJob};
use memsearch_core::diffusion::{build_schedule, generate};
use memsearch_core::metrics::{cosine_distance, tile_l2};
use memsearch_core::mitigation::MitigationConfig;
use memsearch_core::rng::Rng;

fn main() {
    let arch = ArchConfig { hidden_dim: 128, embed_dim: 32, ..ArchConfig::desk_default() };
    let embed = EmbeddingTable::new(64, arch.embed_dim, 42);
    let mit = MitigationConfig::none();
    let mut rng = Rng::new(7);

    // Ten fixed random images with distinct captions.
    let images: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..64).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
        .collect();
    let samples: Vec<CaptionedSample> = images
        .iter()
        .enumerate()
        .map(|(i, img)| CaptionedSample {
            id: i,
            image: img.clone(),
            caption: vec![i % 8, 8 + i, 20 + 2 * i],
            class_id: i % 8,
            is_dup: true,
        })
        .collect();

    for (b0, b1) in [(0.1, 0.3)] {
        let sched = build_schedule(50, b0, b1).unwrap();
        for n in [1usize, 10] {
            let data: Vec<CaptionedSample> = samples[..n].to_vec();
            let cfg = TrainConfig {
                steps: 8000,
                batch_size: 32,
                learning_rate: 2e-3,
                ..TrainConfig::desk_default(5)
            };
            let job = TrainJob {
                data: &data,
                schedule: &sched,
                embed: &embed,
                mitigation: &mit,
                calibration: &[],
            };
            let fresh = init_params(&arch, 3).unwrap();
            let r = train_full(&fresh, &job, &cfg, true).unwrap();
            let model = EffectiveModel::frozen(&r.params);
            let tail = r.loss_history[r.loss_history.len() - 50..].iter().sum::<f64>() / 50.0;
            let mut to_mem = 0.0;
            let mut spread = 0.0;
            for (i, s) in data.iter().enumerate() {
                let e = embed.embed_caption(&s.caption).unwrap();
                let g1 = generate(&model, &e, 64, &sched, (100 + 2 * i) as u64, memsearch_core::diffusion::ReverseConvention::Ddim).unwrap();
                let g2 = generate(&model, &e, 64, &sched, (101 + 2 * i) as u64, memsearch_core::diffusion::ReverseConvention::Ddim).unwrap();
                to_mem += cosine_distance(&g1, &s.image).unwrap();
                spread += tile_l2(&g1, &g2, 8, 8, 4).unwrap();
            }
            println!(
                "beta=({b0},{b1}) n={n}: tail loss {tail:.4}; gen->mem {:.3}; seed-spread {:.3}",
                to_mem / n as f64,
                spread / n as f64
            );
        }
    }
}
