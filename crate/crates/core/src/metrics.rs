//! Memorization and quality measurement.
//!
//! Memorization is measured three ways: average minimum cosine distance
//! from generated samples to the training set (lower means closer copies),
//! a denoising-strength gap between prompt-conditioned and empty-prompt
//! noise predictions (higher means stronger prompt-specific memorization),
//! and a tile-wise extraction attack that links near-duplicate generations
//! into cliques. Quality is a Fréchet distance between Gaussian fits of
//! real and generated feature distributions, plus a prompt-fidelity proxy
//! scoring how often a generation lands nearest its conditioning class
//! template.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::corpus::EmbeddingTable;
use crate::diffusion::{generate, q_sample, NoisePredictor, NoiseSchedule, ReverseConvention};
use crate::linalg::{dot, eigh_jacobi, norm2, sqrtm_psd, Matrix};
use crate::math;
use crate::rng::{derive_seed, index_seed, Rng};
use crate::{Error, Result};

/// The outer-loop objective pair; both minimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub d_mem: f64,
    pub d_fid: f64,
}

impl Objectives {
    pub fn is_finite(&self) -> bool {
        self.d_mem.is_finite() && self.d_fid.is_finite()
    }
}

/// Result of the extraction attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Number of distinct prompts that yielded at least one clique.
    pub extracted_count: usize,
    /// Cliques as global sample indices (`prompt_idx * samples_per_prompt
    /// + sample_idx`).
    pub cliques: Vec<Vec<usize>>,
    pub delta: f64,
    pub min_clique: usize,
    pub samples_per_prompt: usize,
}

/// Cosine distance `1 - a.b / (|a||b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            what: "cosine_distance",
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 {
        return Err(Error::ZeroVector { side: "left" });
    }
    if nb == 0.0 {
        return Err(Error::ZeroVector { side: "right" });
    }
    Ok(1.0 - dot(a, b) / (na * nb))
}

/// Average minimum cosine distance from each generated sample to its
/// nearest training sample; the exact O(N*M) scan.
pub fn amd(generated: &[Vec<f64>], train: &[Vec<f64>]) -> Result<f64> {
    if generated.is_empty() || train.is_empty() {
        return Err(Error::InvalidArgument("amd: empty sample set".to_string()));
    }
    let mut total = 0.0;
    for g in generated {
        let mut best = f64::INFINITY;
        for t in train {
            let d = cosine_distance(g, t)?;
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    Ok(total / generated.len() as f64)
}

/// Denoising-strength memorization heuristic: the average L2 gap between
/// prompt-conditioned and empty-prompt noise predictions over all `T`
/// timesteps, averaged over `n_draws` independent noise trajectories of the
/// reference image.
pub fn d_mem<M: NoisePredictor + ?Sized>(
    model: &M,
    prompt_emb: &[f64],
    x_ref: &[f64],
    sched: &NoiseSchedule,
    seed: u64,
    n_draws: usize,
) -> Result<f64> {
    if n_draws == 0 {
        return Err(Error::InvalidArgument("d_mem: n_draws must be >= 1".to_string()));
    }
    let empty = vec![0.0; prompt_emb.len()];
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    for _ in 0..n_draws {
        let mut per_draw = 0.0;
        for t in 1..=sched.t_count {
            let eps = rng.normal_vec(x_ref.len());
            let x_t = q_sample(x_ref, t, &eps, sched)?;
            let with_prompt = model.predict(&x_t, t, prompt_emb);
            let without = model.predict(&x_t, t, &empty);
            let gap: Vec<f64> = with_prompt
                .iter()
                .zip(&without)
                .map(|(a, b)| a - b)
                .collect();
            per_draw += norm2(&gap);
        }
        total += per_draw / sched.t_count as f64;
    }
    Ok(total / n_draws as f64)
}

fn check_symmetric(c: &Matrix, what: &'static str) -> Result<()> {
    if c.rows() != c.cols() {
        return Err(Error::Matrix(format!("{what}: not square")));
    }
    let scale = c.data().iter().map(|v| math::abs(*v)).fold(1.0, f64::max);
    for i in 0..c.rows() {
        for j in (i + 1)..c.cols() {
            if math::abs(c.get(i, j) - c.get(j, i)) > 1e-8 * scale {
                return Err(Error::Matrix(format!("{what}: asymmetric beyond tolerance")));
            }
        }
    }
    Ok(())
}

/// Fréchet distance between two Gaussians:
/// `|mu1-mu2|^2 + tr(c1 + c2 - 2 (c1 c2)^(1/2))`.
///
/// The square-root trace is computed through the symmetric product
/// `B c2 B` with `B = c1^(1/2)`, whose eigenvalues match those of `c1 c2`.
/// Eigenvalues below `-1e-8` are rejected, small negatives clamped to zero.
pub fn frechet_distance(mu1: &[f64], cov1: &Matrix, mu2: &[f64], cov2: &Matrix) -> Result<f64> {
    let n = mu1.len();
    if mu2.len() != n {
        return Err(Error::Shape {
            what: "frechet mu",
            expected: n,
            got: mu2.len(),
        });
    }
    if cov1.rows() != n || cov2.rows() != n {
        return Err(Error::Shape {
            what: "frechet cov",
            expected: n,
            got: cov1.rows(),
        });
    }
    check_symmetric(cov1, "cov1")?;
    check_symmetric(cov2, "cov2")?;

    let root1 = sqrtm_psd(cov1, 1e-8)?;
    let mut product = root1.matmul(cov2).matmul(&root1);
    // Symmetrise numerical residue before the eigen solve.
    let pt = product.transpose();
    product.add_in_place(&pt);
    product.scale_in_place(0.5);
    let (lambda, _) = eigh_jacobi(&product)?;
    let mut trace_sqrt = 0.0;
    for l in lambda {
        if l < -1e-8 {
            return Err(Error::Matrix(format!(
                "cross-covariance eigenvalue {l:.3e} below -1e-8"
            )));
        }
        trace_sqrt += math::sqrt(l.max(0.0));
    }

    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let trace1: f64 = (0..n).map(|i| cov1.get(i, i)).sum();
    let trace2: f64 = (0..n).map(|i| cov2.get(i, i)).sum();
    Ok((mean_term + trace1 + trace2 - 2.0 * trace_sqrt).max(0.0))
}

/// Feature space used by the quality score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureMode {
    /// Raw pixels.
    Identity,
    /// Fixed seeded projection onto `k` orthonormal directions.
    RandomProjection { seed: u64, k: usize },
}

/// Orthonormal `k x d` projection built by Gram-Schmidt over seeded
/// Gaussian rows.
fn projection_matrix(seed: u64, k: usize, d: usize) -> Result<Matrix> {
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "random projection needs 0 < k <= d, got k={k} d={d}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut candidate = rng.normal_vec(d);
        for prev in &rows {
            let proj = dot(&candidate, prev);
            for (c, p) in candidate.iter_mut().zip(prev) {
                *c -= proj * p;
            }
        }
        let norm = norm2(&candidate);
        if norm < 1e-8 {
            continue;
        }
        for c in &mut candidate {
            *c /= norm;
        }
        rows.push(candidate);
    }
    Ok(Matrix::from_rows(&rows))
}

fn apply_features(images: &[Vec<f64>], mode: &FeatureMode) -> Result<Vec<Vec<f64>>> {
    match mode {
        FeatureMode::Identity => Ok(images.to_vec()),
        FeatureMode::RandomProjection { seed, k } => {
            let d = images.first().map(|x| x.len()).unwrap_or(0);
            let p = projection_matrix(*seed, *k, d)?;
            Ok(images.iter().map(|x| p.matvec(x)).collect())
        }
    }
}

fn mean_and_cov(samples: &[Vec<f64>]) -> (Vec<f64>, Matrix) {
    let n = samples.len();
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(d, d);
    for s in samples {
        let centered: Vec<f64> = s.iter().zip(&mean).map(|(v, m)| v - m).collect();
        cov.add_outer(1.0, &centered, &centered);
    }
    cov.scale_in_place(1.0 / (n - 1) as f64);
    (mean, cov)
}

/// Quality score: Fréchet distance between Gaussian fits of the two image
/// sets in feature space. Covariances use the 1/(n-1) normalisation.
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>], mode: &FeatureMode) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(Error::InvalidArgument(
            "fid needs at least 2 samples per side".to_string(),
        ));
    }
    let real_f = apply_features(real, mode)?;
    let gen_f = apply_features(generated, mode)?;
    let (mu1, cov1) = mean_and_cov(&real_f);
    let (mu2, cov2) = mean_and_cov(&gen_f);
    frechet_distance(&mu1, &cov1, &mu2, &cov2)
}

/// Modified L2: the maximum Euclidean distance across corresponding
/// `tile x tile` patches of two `h x w` images.
pub fn tile_l2(a: &[f64], b: &[f64], h: usize, w: usize, tile: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape {
            what: "tile_l2 image",
            expected: h * w,
            got: if a.len() != h * w { a.len() } else { b.len() },
        });
    }
    if tile == 0 || h % tile != 0 || w % tile != 0 {
        return Err(Error::InvalidArgument(format!(
            "tile {tile} does not divide {h}x{w}"
        )));
    }
    let mut max_dist: f64 = 0.0;
    for ti in (0..h).step_by(tile) {
        for tj in (0..w).step_by(tile) {
            let mut acc = 0.0;
            for i in ti..ti + tile {
                for j in tj..tj + tile {
                    let d = a[i * w + j] - b[i * w + j];
                    acc += d * d;
                }
            }
            max_dist = max_dist.max(math::sqrt(acc));
        }
    }
    Ok(max_dist)
}

/// Calibrate the attack threshold as the 1st percentile of tile distances
/// between randomly drawn distinct training images.
pub fn calibrate_attack_delta(
    train: &[Vec<f64>],
    h: usize,
    w: usize,
    tile: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if train.len() < 2 {
        return Err(Error::InvalidArgument(
            "delta calibration needs >= 2 training images".to_string(),
        ));
    }
    let mut rng = Rng::new(seed);
    let mut dists = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let i = rng.below(train.len());
        let j = loop {
            let j = rng.below(train.len());
            if j != i {
                break j;
            }
        };
        dists.push(tile_l2(&train[i], &train[j], h, w, tile)?);
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = (dists.len() / 100).min(dists.len() - 1);
    Ok(dists[idx])
}

/// Greedy maximal-clique extraction over a tile-distance similarity graph:
/// repeatedly seed at the highest-degree node, grow by degree order, report
/// cliques of size >= `k` and remove them.
pub fn similarity_cliques(
    images: &[Vec<f64>],
    h: usize,
    w: usize,
    tile: usize,
    delta: f64,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = images.len();
    let mut adj = vec![false; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            if tile_l2(&images[i], &images[j], h, w, tile)? <= delta {
                adj[i * n + j] = true;
                adj[j * n + i] = true;
            }
        }
    }
    let mut alive = vec![true; n];
    let mut cliques = Vec::new();
    loop {
        let degree = |i: usize, alive: &[bool]| -> usize {
            (0..n).filter(|&j| alive[j] && adj[i * n + j]).count()
        };
        let seed = (0..n)
            .filter(|&i| alive[i])
            .max_by_key(|&i| (degree(i, &alive), core::cmp::Reverse(i)));
        let Some(seed) = seed else { break };
        if degree(seed, &alive) + 1 < k {
            break;
        }
        let mut members = vec![seed];
        let mut candidates: Vec<usize> = (0..n)
            .filter(|&j| alive[j] && adj[seed * n + j])
            .collect();
        candidates.sort_by_key(|&j| (core::cmp::Reverse(degree(j, &alive)), j));
        for cand in candidates {
            if members.iter().all(|&m| adj[cand * n + m]) {
                members.push(cand);
            }
        }
        if members.len() >= k {
            members.sort_unstable();
            for &m in &members {
                alive[m] = false;
            }
            cliques.push(members);
        } else {
            alive[seed] = false;
        }
    }
    Ok(cliques)
}

/// Extraction attack configuration.
#[derive(Debug, Clone, Copy)]
pub struct AttackConfig {
    pub samples_per_prompt: usize,
    pub tile: usize,
    pub delta: f64,
    pub min_clique: usize,
    pub seed: u64,
    pub convention: ReverseConvention,
}

/// Attack report plus the generated pool backing it.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub report: AttackReport,
    /// All generations, indexed `prompt_idx * samples_per_prompt + s`.
    pub images: Vec<Vec<f64>>,
}

/// Generate `samples_per_prompt` images per prompt with distinct seeds,
/// then extract near-duplicate cliques per prompt.
pub fn extraction_attack<M: NoisePredictor + ?Sized>(
    model: &M,
    prompt_embs: &[Vec<f64>],
    h: usize,
    w: usize,
    sched: &NoiseSchedule,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    if cfg.samples_per_prompt < cfg.min_clique {
        return Err(Error::InvalidArgument(format!(
            "attack needs samples_per_prompt >= min_clique ({} < {})",
            cfg.samples_per_prompt, cfg.min_clique
        )));
    }
    let s = cfg.samples_per_prompt;
    let mut images = Vec::with_capacity(prompt_embs.len() * s);
    let mut cliques = Vec::new();
    let mut extracted = 0usize;
    for (p_idx, emb) in prompt_embs.iter().enumerate() {
        let pool: Vec<Vec<f64>> = (0..s)
            .map(|i| {
                generate(
                    model,
                    emb,
                    h * w,
                    sched,
                    index_seed(cfg.seed, (p_idx * s + i) as u64),
                    cfg.convention,
                )
            })
            .collect::<Result<_>>()?;
        let found = similarity_cliques(&pool, h, w, cfg.tile, cfg.delta, cfg.min_clique)?;
        if !found.is_empty() {
            extracted += 1;
        }
        for clique in found {
            cliques.push(clique.into_iter().map(|i| p_idx * s + i).collect());
        }
        images.extend(pool);
    }
    Ok(AttackOutcome {
        report: AttackReport {
            extracted_count: extracted,
            cliques,
            delta: cfg.delta,
            min_clique: cfg.min_clique,
            samples_per_prompt: s,
        },
        images,
    })
}

/// Fraction of generations whose nearest class template (by cosine
/// distance) matches their conditioning class.
pub fn prompt_fidelity(generated: &[(usize, Vec<f64>)], templates: &[Vec<f64>]) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::InvalidArgument("prompt_fidelity: empty set".to_string()));
    }
    let mut hits = 0usize;
    for (class, image) in generated {
        if *class >= templates.len() {
            return Err(Error::InvalidArgument(format!(
                "class {class} has no template (have {})",
                templates.len()
            )));
        }
        let mut best = f64::INFINITY;
        let mut best_class = 0;
        for (c, t) in templates.iter().enumerate() {
            let d = cosine_distance(image, t)?;
            if d < best {
                best = d;
                best_class = c;
            }
        }
        if best_class == *class {
            hits += 1;
        }
    }
    Ok(hits as f64 / generated.len() as f64)
}

/// Knobs of the five-metric evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub n_noise_draws: usize,
    pub fid_gen_count: usize,
    pub feature_mode: FeatureMode,
    pub attack_samples: usize,
    pub attack_tile: usize,
    /// Fixed tile-distance threshold; when absent it is calibrated as the
    /// 1st percentile over random distinct training pairs.
    pub attack_delta: Option<f64>,
    pub attack_min_clique: usize,
    pub fidelity_per_class: usize,
    pub eval_seed: u64,
    pub convention: ReverseConvention,
}

impl MetricConfig {
    pub fn desk_default(eval_seed: u64) -> Self {
        Self {
            n_noise_draws: 4,
            fid_gen_count: 48,
            feature_mode: FeatureMode::RandomProjection { seed: 0xf1d, k: 16 },
            attack_samples: 16,
            attack_tile: 4,
            attack_delta: None,
            attack_min_clique: 3,
            fidelity_per_class: 4,
            eval_seed,
            convention: ReverseConvention::Ddim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("metrics.n_noise_draws", self.n_noise_draws),
            ("metrics.attack_samples", self.attack_samples),
            ("metrics.attack_tile", self.attack_tile),
            ("metrics.attack_min_clique", self.attack_min_clique),
            ("metrics.fidelity_per_class", self.fidelity_per_class),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be >= 1".to_string(),
                });
            }
        }
        if self.fid_gen_count < 2 {
            return Err(Error::Config {
                field: "metrics.fid_gen_count",
                reason: "must be >= 2".to_string(),
            });
        }
        if self.attack_samples < self.attack_min_clique {
            return Err(Error::Config {
                field: "metrics.attack_samples",
                reason: "must be >= attack_min_clique".to_string(),
            });
        }
        Ok(())
    }
}

/// Shared inputs of model evaluation.
pub struct EvalContext<'a> {
    pub corpus: &'a Corpus,
    pub embed: &'a EmbeddingTable,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a MetricConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Val,
    Test,
}

/// One full metric evaluation of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub d_mem: f64,
    pub d_fid: f64,
    pub amd: f64,
    /// Prompts extracted over the duplicated + control prompt set.
    pub extracted_count: usize,
    pub extracted_dup: usize,
    pub extracted_control: usize,
    pub prompt_fidelity: f64,
}

/// Mean denoising-strength gap over the duplicated (memorization-subset)
/// prompts, with the per-prompt class template as the reference image.
pub fn mem_subset_d_mem<M: NoisePredictor + ?Sized>(model: &M, ctx: &EvalContext) -> Result<f64> {
    if ctx.corpus.mem_subset.is_empty() {
        return Err(Error::InvalidArgument(
            "corpus has no memorization subset".to_string(),
        ));
    }
    let seed = derive_seed(ctx.config.eval_seed, "dmem");
    let mut total = 0.0;
    for (i, sample) in ctx.corpus.mem_subset.iter().enumerate() {
        let emb = ctx.embed.embed_caption(&sample.caption)?;
        let x_ref = &ctx.corpus.class_templates[sample.class_id];
        total += d_mem(
            model,
            &emb,
            x_ref,
            ctx.schedule,
            index_seed(seed, i as u64),
            ctx.config.n_noise_draws,
        )?;
    }
    Ok(total / ctx.corpus.mem_subset.len() as f64)
}

fn split_samples<'a>(
    ctx: &'a EvalContext,
    split: EvalSplit,
) -> &'a [crate::corpus::CaptionedSample] {
    match split {
        EvalSplit::Val => &ctx.corpus.val,
        EvalSplit::Test => &ctx.corpus.test,
    }
}

/// Generate from the leading captions of a split, seeded per index.
fn generate_from_split<M: NoisePredictor + ?Sized>(
    model: &M,
    ctx: &EvalContext,
    split: EvalSplit,
    count: usize,
    tag: &str,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let samples = split_samples(ctx, split);
    let seed = derive_seed(ctx.config.eval_seed, tag);
    let d = ctx.corpus.config.image_dim();
    (0..count.min(samples.len()))
        .map(|i| {
            let s = &samples[i];
            let emb = ctx.embed.embed_caption(&s.caption)?;
            let img = generate(
                model,
                &emb,
                d,
                ctx.schedule,
                index_seed(seed, i as u64),
                ctx.config.convention,
            )?;
            Ok((s.class_id, img))
        })
        .collect()
}

/// The search-time objective pair: memorization on the duplicated prompts,
/// quality against the validation split.
pub fn evaluate_objectives<M: NoisePredictor + ?Sized>(
    model: &M,
    ctx: &EvalContext,
) -> Result<Objectives> {
    let d_mem_val = mem_subset_d_mem(model, ctx)?;
    let generated: Vec<Vec<f64>> =
        generate_from_split(model, ctx, EvalSplit::Val, ctx.config.fid_gen_count, "fid")?
            .into_iter()
            .map(|(_, img)| img)
            .collect();
    let real: Vec<Vec<f64>> = ctx.corpus.val.iter().map(|s| s.image.clone()).collect();
    let d_fid = fid(&real, &generated, &ctx.config.feature_mode)?;
    Ok(Objectives {
        d_mem: d_mem_val,
        d_fid,
    })
}

/// Resolve the attack threshold from config or calibration.
pub fn resolve_attack_delta(ctx: &EvalContext) -> Result<f64> {
    if let Some(delta) = ctx.config.attack_delta {
        return Ok(delta);
    }
    let base: Vec<Vec<f64>> = ctx.corpus.train[..ctx.corpus.base_train_len]
        .iter()
        .map(|s| s.image.clone())
        .collect();
    calibrate_attack_delta(
        &base,
        ctx.corpus.config.height,
        ctx.corpus.config.width,
        ctx.config.attack_tile,
        2000,
        derive_seed(ctx.config.eval_seed, "delta"),
    )
}

/// Duplicated-subset prompts plus an equal number of control prompts drawn
/// from the head of the given split.
pub fn attack_prompts(
    ctx: &EvalContext,
    split: EvalSplit,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let dup: Vec<Vec<f64>> = ctx
        .corpus
        .mem_subset
        .iter()
        .map(|s| ctx.embed.embed_caption(&s.caption))
        .collect::<Result<_>>()?;
    let controls: Vec<Vec<f64>> = split_samples(ctx, split)
        .iter()
        .take(ctx.corpus.mem_subset.len())
        .map(|s| ctx.embed.embed_caption(&s.caption))
        .collect::<Result<_>>()?;
    Ok((dup, controls))
}

/// Full five-metric evaluation of a model against a split.
pub fn evaluate_model<M: NoisePredictor + ?Sized>(
    model: &M,
    ctx: &EvalContext,
    split: EvalSplit,
) -> Result<MetricsRow> {
    ctx.config.validate()?;
    let d_mem_val = mem_subset_d_mem(model, ctx)?;

    let tagged = generate_from_split(model, ctx, split, ctx.config.fid_gen_count, "fid")?;
    let generated: Vec<Vec<f64>> = tagged.iter().map(|(_, img)| img.clone()).collect();
    let real: Vec<Vec<f64>> = split_samples(ctx, split)
        .iter()
        .map(|s| s.image.clone())
        .collect();
    let d_fid = fid(&real, &generated, &ctx.config.feature_mode)?;

    let train_base: Vec<Vec<f64>> = ctx.corpus.train[..ctx.corpus.base_train_len]
        .iter()
        .map(|s| s.image.clone())
        .collect();
    let amd_val = amd(&generated, &train_base)?;

    let delta = resolve_attack_delta(ctx)?;
    let (dup_prompts, control_prompts) = attack_prompts(ctx, split)?;
    let cfg = AttackConfig {
        samples_per_prompt: ctx.config.attack_samples,
        tile: ctx.config.attack_tile,
        delta,
        min_clique: ctx.config.attack_min_clique,
        seed: derive_seed(ctx.config.eval_seed, "attack"),
        convention: ctx.config.convention,
    };
    let (h, w) = (ctx.corpus.config.height, ctx.corpus.config.width);
    let dup_outcome = extraction_attack(model, &dup_prompts, h, w, ctx.schedule, &cfg)?;
    let control_cfg = AttackConfig {
        seed: derive_seed(ctx.config.eval_seed, "attack-control"),
        ..cfg
    };
    let control_outcome =
        extraction_attack(model, &control_prompts, h, w, ctx.schedule, &control_cfg)?;

    // Class-conditioned fidelity probes: one pure class-token caption each.
    let seed = derive_seed(ctx.config.eval_seed, "fidelity");
    let d = ctx.corpus.config.image_dim();
    let mut fidelity_gens = Vec::new();
    for class in 0..ctx.corpus.config.n_classes {
        let emb = ctx.embed.embed_caption(&[class])?;
        for i in 0..ctx.config.fidelity_per_class {
            let img = generate(
                model,
                &emb,
                d,
                ctx.schedule,
                index_seed(seed, (class * ctx.config.fidelity_per_class + i) as u64),
                ctx.config.convention,
            )?;
            fidelity_gens.push((class, img));
        }
    }
    let fidelity = prompt_fidelity(&fidelity_gens, &ctx.corpus.class_templates)?;

    Ok(MetricsRow {
        d_mem: d_mem_val,
        d_fid,
        amd: amd_val,
        extracted_count: dup_outcome.report.extracted_count
            + control_outcome.report.extracted_count,
        extracted_dup: dup_outcome.report.extracted_count,
        extracted_control: control_outcome.report.extracted_count,
        prompt_fidelity: fidelity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;

    #[test]
    fn cosine_basics() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector { side: "left" })
        ));
    }

    #[test]
    fn amd_trivial_cases() {
        let train = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let generated = vec![vec![1.0, 0.0]];
        assert!(amd(&generated, &train).unwrap().abs() < 1e-12);
        let ortho = vec![vec![1.0, 1.0]];
        let train2 = vec![vec![1.0, -1.0]];
        assert!((amd(&ortho, &train2).unwrap() - 1.0).abs() < 1e-12);
        assert!(amd(&[], &train).is_err());
    }

    #[test]
    fn amd_matches_double_loop_oracle() {
        let mut rng = Rng::new(8);
        let generated: Vec<Vec<f64>> = (0..20).map(|_| rng.normal_vec(5)).collect();
        let train: Vec<Vec<f64>> = (0..30).map(|_| rng.normal_vec(5)).collect();
        let fast = amd(&generated, &train).unwrap();
        // Independent double-loop recomputation.
        let mut total = 0.0;
        for g in &generated {
            let mut best = f64::INFINITY;
            for t in &train {
                let ng = math::sqrt(g.iter().map(|x| x * x).sum::<f64>());
                let nt = math::sqrt(t.iter().map(|x| x * x).sum::<f64>());
                let dp: f64 = g.iter().zip(t).map(|(a, b)| a * b).sum();
                best = best.min(1.0 - dp / (ng * nt));
            }
            total += best;
        }
        assert_eq!(fast, total / 20.0);
    }

    #[test]
    fn amd_shrinks_with_more_candidates() {
        let mut rng = Rng::new(9);
        let xs: Vec<Vec<f64>> = (0..10).map(|_| rng.normal_vec(4)).collect();
        let ys: Vec<Vec<f64>> = (0..10).map(|_| rng.normal_vec(4)).collect();
        let mut union = xs.clone();
        union.extend(ys.clone());
        assert!(amd(&xs, &union).unwrap() <= amd(&xs, &ys).unwrap() + 1e-15);
    }

    struct PromptScaled;
    impl NoisePredictor for PromptScaled {
        fn predict(&self, x_t: &[f64], _t: usize, p: &[f64]) -> alloc::vec::Vec<f64> {
            let gain: f64 = p.iter().sum();
            x_t.iter().map(|v| v * gain).collect()
        }
    }

    struct ConditioningBlind;
    impl NoisePredictor for ConditioningBlind {
        fn predict(&self, x_t: &[f64], _t: usize, _p: &[f64]) -> alloc::vec::Vec<f64> {
            x_t.to_vec()
        }
    }

    #[test]
    fn d_mem_zero_for_conditioning_blind_model() {
        let sched = build_schedule(6, 0.01, 0.2).unwrap();
        let x_ref = [0.5, -0.5, 0.25];
        let val = d_mem(&ConditioningBlind, &[1.0, 2.0], &x_ref, &sched, 3, 4).unwrap();
        assert_eq!(val, 0.0);
    }

    #[test]
    fn d_mem_zero_when_prompt_equals_empty() {
        let sched = build_schedule(6, 0.01, 0.2).unwrap();
        let x_ref = [0.5, -0.5, 0.25];
        let val = d_mem(&PromptScaled, &[0.0, 0.0], &x_ref, &sched, 3, 2).unwrap();
        assert_eq!(val, 0.0);
    }

    #[test]
    fn d_mem_positive_for_sensitive_model() {
        let sched = build_schedule(6, 0.01, 0.2).unwrap();
        let x_ref = [0.5, -0.5, 0.25];
        let val = d_mem(&PromptScaled, &[1.0, 0.5], &x_ref, &sched, 3, 2).unwrap();
        assert!(val > 0.0);
    }

    #[test]
    fn frechet_identical_gaussians() {
        let mu = [0.3, -0.2, 0.5];
        let mut cov = Matrix::identity(3);
        cov.set(0, 1, 0.2);
        cov.set(1, 0, 0.2);
        let d = frechet_distance(&mu, &cov, &mu, &cov).unwrap();
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn frechet_mean_shift_identity_cov() {
        let mu1 = [0.0, 0.0];
        let mu2 = [0.6, -0.8];
        let eye = Matrix::identity(2);
        let d = frechet_distance(&mu1, &eye, &mu2, &eye).unwrap();
        assert!((d - 1.0).abs() < 1e-10, "{d}");
    }

    #[test]
    fn frechet_diagonal_analytic() {
        let mu = [0.0, 0.0, 0.0];
        let a = [1.5, 0.7, 2.0];
        let b = [0.5, 1.1, 0.9];
        let mut cov1 = Matrix::zeros(3, 3);
        let mut cov2 = Matrix::zeros(3, 3);
        let mut expect = 0.0;
        for i in 0..3 {
            cov1.set(i, i, a[i]);
            cov2.set(i, i, b[i]);
            expect += a[i] + b[i] - 2.0 * math::sqrt(a[i] * b[i]);
        }
        let d = frechet_distance(&mu, &cov1, &mu, &cov2).unwrap();
        assert!((d - expect).abs() < 1e-10, "{d} vs {expect}");
    }

    #[test]
    fn frechet_shared_eigenbasis_oracle() {
        // cov1 and cov2 share an eigenbasis, so the trace term is known
        // analytically: sum of a_i + b_i - 2 sqrt(a_i b_i).
        let mut rng = Rng::new(4);
        let raw = Matrix::from_vec(4, 4, (0..16).map(|_| rng.normal()).collect());
        let q = crate::linalg::svd_jacobi(&raw).unwrap().u;
        let a = [2.0, 1.5, 1.0, 0.25];
        let b = [0.5, 3.0, 0.75, 1.25];
        let build = |d: &[f64]| {
            let mut scaled = q.clone();
            for j in 0..4 {
                for i in 0..4 {
                    let v = scaled.get(i, j) * d[j];
                    scaled.set(i, j, v);
                }
            }
            scaled.matmul(&q.transpose())
        };
        let cov1 = build(&a);
        let cov2 = build(&b);
        let mu1 = [0.1, 0.2, 0.3, 0.4];
        let mu2 = [-0.1, 0.0, 0.3, 0.9];
        let d = frechet_distance(&mu1, &cov1, &mu2, &cov2).unwrap();
        let mean_term: f64 = mu1.iter().zip(&mu2).map(|(x, y)| (x - y) * (x - y)).sum();
        let trace_term: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| x + y - 2.0 * math::sqrt(x * y))
            .sum();
        assert!((d - (mean_term + trace_term)).abs() < 1e-9, "{d}");
    }

    #[test]
    fn frechet_symmetry_and_error_paths() {
        let mut rng = Rng::new(5);
        let raw1 = Matrix::from_vec(3, 3, (0..9).map(|_| rng.normal()).collect());
        let raw2 = Matrix::from_vec(3, 3, (0..9).map(|_| rng.normal()).collect());
        let cov1 = raw1.matmul(&raw1.transpose());
        let cov2 = raw2.matmul(&raw2.transpose());
        let mu1 = [0.2, -0.4, 0.1];
        let mu2 = [0.0, 0.3, -0.2];
        let ab = frechet_distance(&mu1, &cov1, &mu2, &cov2).unwrap();
        let ba = frechet_distance(&mu2, &cov2, &mu1, &cov1).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        // Asymmetric input rejected.
        let mut bad = cov1.clone();
        bad.set(0, 1, bad.get(0, 1) + 1.0);
        assert!(frechet_distance(&mu1, &bad, &mu2, &cov2).is_err());
        // Indefinite input rejected.
        let mut indef = Matrix::identity(3);
        indef.set(2, 2, -0.5);
        assert!(frechet_distance(&mu1, &indef, &mu2, &cov2).is_err());
    }

    #[test]
    fn fid_same_set_is_zero() {
        let mut rng = Rng::new(6);
        let xs: Vec<Vec<f64>> = (0..10).map(|_| rng.normal_vec(4)).collect();
        let d = fid(&xs, &xs, &FeatureMode::Identity).unwrap();
        assert!(d <= 1e-9, "{d}");
    }

    #[test]
    fn fid_approaches_known_shift() {
        let mut rng = Rng::new(7);
        let shift = [0.9, -0.6, 0.3, 0.0, 0.5, -0.2];
        let shift_sq: f64 = shift.iter().map(|v| v * v).sum();
        let n = 5000;
        let real: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(6)).collect();
        let gen: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                rng.normal_vec(6)
                    .iter()
                    .zip(&shift)
                    .map(|(z, s)| z + s)
                    .collect()
            })
            .collect();
        let d = fid(&real, &gen, &FeatureMode::Identity).unwrap();
        assert!(
            (d - shift_sq).abs() / shift_sq < 0.10,
            "fid {d} vs analytic {shift_sq}"
        );
    }

    #[test]
    fn fid_invariant_under_full_rank_orthonormal_projection() {
        let mut rng = Rng::new(8);
        let real: Vec<Vec<f64>> = (0..40).map(|_| rng.normal_vec(5)).collect();
        let gen: Vec<Vec<f64>> = (0..30)
            .map(|_| rng.normal_vec(5).iter().map(|v| v + 0.4).collect())
            .collect();
        let ident = fid(&real, &gen, &FeatureMode::Identity).unwrap();
        let proj = fid(&real, &gen, &FeatureMode::RandomProjection { seed: 99, k: 5 }).unwrap();
        assert!((ident - proj).abs() < 1e-9, "{ident} vs {proj}");
    }

    #[test]
    fn fid_rejects_tiny_sets() {
        let xs = vec![vec![0.0, 1.0]];
        assert!(fid(&xs, &xs, &FeatureMode::Identity).is_err());
    }

    #[test]
    fn tile_l2_cases() {
        // 4x4 images, 2x2 tiles.
        let a: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        assert_eq!(tile_l2(&a, &a, 4, 4, 2).unwrap(), 0.0);

        // Differ in exactly one tile by a known vector.
        let mut b = a.clone();
        b[0] += 0.3;
        b[1] -= 0.4;
        let d = tile_l2(&a, &b, 4, 4, 2).unwrap();
        assert!((d - 0.5).abs() < 1e-12, "{d}");

        // Non-divisible geometry.
        assert!(tile_l2(&a, &b, 4, 4, 3).is_err());
    }

    #[test]
    fn tile_l2_matches_naive_recomputation() {
        let mut rng = Rng::new(10);
        let a = rng.normal_vec(64);
        let b = rng.normal_vec(64);
        let fast = tile_l2(&a, &b, 8, 8, 4).unwrap();
        let mut expect: f64 = 0.0;
        for ti in [0, 4] {
            for tj in [0, 4] {
                let mut acc = 0.0;
                for i in ti..ti + 4 {
                    for j in tj..tj + 4 {
                        let d = a[i * 8 + j] - b[i * 8 + j];
                        acc += d * d;
                    }
                }
                expect = expect.max(math::sqrt(acc));
            }
        }
        assert_eq!(fast, expect);
    }

    #[test]
    fn planted_clique_matches_exhaustive_enumeration() {
        // Six 4-pixel images (2x2, one tile): three identical, three far
        // from everything.
        let close = vec![0.5, 0.5, 0.5, 0.5];
        let images = vec![
            close.clone(),
            vec![5.0, 0.0, 0.0, 0.0],
            close.clone(),
            vec![0.0, 5.0, 0.0, 0.0],
            close.clone(),
            vec![0.0, 0.0, 5.0, 0.0],
        ];
        let delta = 0.1;
        let k = 3;
        let found = similarity_cliques(&images, 2, 2, 2, delta, k).unwrap();
        assert_eq!(found, vec![vec![0, 2, 4]]);

        // Exhaustive oracle over all subsets of size >= k.
        let n = images.len();
        let mut all_cliques: Vec<Vec<usize>> = Vec::new();
        for mask in 0u32..(1 << n) {
            let subset: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            if subset.len() < k {
                continue;
            }
            let is_clique = subset.iter().enumerate().all(|(ai, &a)| {
                subset[ai + 1..]
                    .iter()
                    .all(|&b| tile_l2(&images[a], &images[b], 2, 2, 2).unwrap() <= delta)
            });
            if is_clique {
                all_cliques.push(subset);
            }
        }
        // Every qualifying subset is contained in the planted clique, and
        // the planted clique itself qualifies.
        assert!(all_cliques.contains(&vec![0, 2, 4]));
        for clique in all_cliques {
            assert!(clique.iter().all(|i| [0, 2, 4].contains(i)));
        }
    }

    /// Drives every reverse step toward a fixed image regardless of the
    /// state, so generation is constant across seeds.
    struct ConstantTarget {
        target: Vec<f64>,
        sched: NoiseSchedule,
    }
    impl NoisePredictor for ConstantTarget {
        fn predict(&self, x_t: &[f64], t: usize, _p: &[f64]) -> alloc::vec::Vec<f64> {
            let abar_t = self.sched.alpha_bar(t);
            let abar_p = self.sched.alpha_bar_prev(t);
            if t == 1 {
                return vec![0.0; x_t.len()];
            }
            // Solve reverse_step(x, eps, t) == sqrt(abar(1)) * target, so
            // that the final t=1 rescale lands exactly on target.
            let ratio = math::sqrt(abar_p / abar_t);
            let denom = math::sqrt(1.0 - abar_p) * (1.0 - ratio);
            let want = math::sqrt(self.sched.alpha_bar(1));
            self.target
                .iter()
                .zip(x_t)
                .map(|(tg, x)| (want * tg - ratio * x) / denom)
                .collect()
        }
    }

    #[test]
    fn constant_model_extracted_everywhere() {
        let sched = build_schedule(6, 0.05, 0.3).unwrap();
        let model = ConstantTarget {
            target: vec![0.25; 4],
            sched: sched.clone(),
        };
        let prompts = vec![vec![0.0; 2]; 3];
        let cfg = AttackConfig {
            samples_per_prompt: 5,
            tile: 2,
            delta: 1e-6,
            min_clique: 3,
            seed: 41,
            convention: ReverseConvention::AsPrinted,
        };
        let out = extraction_attack(&model, &prompts, 2, 2, &sched, &cfg).unwrap();
        assert_eq!(out.report.extracted_count, 3);
        // One clique of size S per prompt.
        assert_eq!(out.report.cliques.len(), 3);
        for (p, clique) in out.report.cliques.iter().enumerate() {
            assert_eq!(clique.len(), 5);
            assert!(clique.iter().all(|i| i / 5 == p));
        }
        // Soundness replay: every reported clique obeys the pairwise bound.
        for clique in &out.report.cliques {
            for (ai, &a) in clique.iter().enumerate() {
                for &b in &clique[ai + 1..] {
                    let d = tile_l2(&out.images[a], &out.images[b], 2, 2, 2).unwrap();
                    assert!(d <= cfg.delta);
                }
            }
        }
    }

    struct PureNoise;
    impl NoisePredictor for PureNoise {
        fn predict(&self, x_t: &[f64], _t: usize, _p: &[f64]) -> alloc::vec::Vec<f64> {
            vec![0.0; x_t.len()]
        }
    }

    #[test]
    fn pure_noise_generator_yields_no_extractions() {
        // Distinct seeds give scattered outputs; at a tight threshold no
        // clique forms.
        let sched = build_schedule(6, 0.05, 0.3).unwrap();
        let prompts = vec![vec![0.0; 2]; 4];
        let cfg = AttackConfig {
            samples_per_prompt: 8,
            tile: 2,
            delta: 0.05,
            min_clique: 3,
            seed: 42,
            convention: ReverseConvention::AsPrinted,
        };
        let out = extraction_attack(&PureNoise, &prompts, 4, 4, &sched, &cfg).unwrap();
        assert_eq!(out.report.extracted_count, 0);
        assert!(out.report.cliques.is_empty());
    }

    #[test]
    fn prompt_fidelity_trivial_cases() {
        let templates = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let right = vec![(0usize, vec![1.0, 0.0]), (1, vec![0.0, 1.0])];
        assert_eq!(prompt_fidelity(&right, &templates).unwrap(), 1.0);
        let wrong = vec![(1usize, vec![1.0, 0.0]), (0, vec![0.0, 1.0])];
        assert_eq!(prompt_fidelity(&wrong, &templates).unwrap(), 0.0);
    }

    #[test]
    fn prompt_fidelity_chance_level_for_random_generations() {
        // The conditioning class is independent of the generation, so the
        // hit rate is exactly 1/C in expectation whatever the templates.
        let cfg = crate::corpus::CorpusConfig {
            seed: 3,
            n_train: 8,
            n_val: 8,
            n_test: 8,
            n_classes: 8,
            vocab_size: 32,
            height: 8,
            width: 8,
            family: crate::corpus::TemplateFamily::Bars,
            noise_sigma: 0.05,
            brightness_scale: 0.1,
        };
        let templates: Vec<Vec<f64>> = (0..8)
            .map(|c| crate::corpus::class_template(c, &cfg))
            .collect();
        let mut rng = Rng::new(11);
        let n = 2000;
        let gens: Vec<(usize, Vec<f64>)> = (0..n)
            .map(|_| {
                let class = rng.below(8);
                let img: Vec<f64> = (0..64).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                (class, img)
            })
            .collect();
        let p = prompt_fidelity(&gens, &templates).unwrap();
        let expect = 1.0 / 8.0;
        let se = math::sqrt(expect * (1.0 - expect) / n as f64);
        assert!((p - expect).abs() < 3.0 * se, "{p} vs {expect}");
    }

    #[test]
    fn delta_calibration_is_deterministic_percentile() {
        let mut rng = Rng::new(12);
        let train: Vec<Vec<f64>> = (0..50).map(|_| rng.normal_vec(16)).collect();
        let a = calibrate_attack_delta(&train, 4, 4, 2, 500, 7).unwrap();
        let b = calibrate_attack_delta(&train, 4, 4, 2, 500, 7).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
        // Roughly the 1st percentile: almost all random pairs exceed it.
        let mut above = 0;
        let mut total = 0;
        for i in 0..train.len() {
            for j in (i + 1)..train.len() {
                total += 1;
                if tile_l2(&train[i], &train[j], 4, 4, 2).unwrap() > a {
                    above += 1;
                }
            }
        }
        assert!(above as f64 / total as f64 > 0.95);
    }
}
