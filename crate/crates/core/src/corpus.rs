//! Synthetic captioned image corpora.
//!
//! Each corpus draws from a small vocabulary whose first `C` ids are class
//! tokens and the rest descriptor tokens. Every class has a fixed template
//! image; samples are templates plus seeded Gaussian perturbation plus a
//! descriptor-dependent brightness offset. The memorization subset is built
//! by duplicating the samples whose captions score highest against the
//! globally most frequent tokens.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::math;
use crate::rng::{index_seed, Rng};
use crate::{Error, Result};

/// Which family of class template images a corpus uses. Distinct families
/// have disjoint template geometry, standing in for distinct image domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFamily {
    /// Soft radial blobs on a ring; the pretraining ("broad") domain.
    Blobs,
    /// Oriented bars through the image centre; the primary target domain.
    Bars,
    /// Axis-aligned crosses; the secondary transfer-target domain.
    Crosses,
}

/// Vocabulary of token ids: class tokens first, descriptors after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
    pub n_classes: usize,
}

impl Vocab {
    pub fn new(n_classes: usize, size: usize) -> Result<Self> {
        if n_classes == 0 || n_classes >= size {
            return Err(Error::Config {
                field: "corpus.n_classes",
                reason: format!("need 0 < n_classes < vocab size, got {n_classes}/{size}"),
            });
        }
        let tokens = (0..size)
            .map(|i| {
                if i < n_classes {
                    format!("class{i}")
                } else {
                    format!("desc{i}")
                }
            })
            .collect();
        Ok(Self { tokens, n_classes })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_class_token(&self, id: usize) -> bool {
        id < self.n_classes
    }
}

/// One captioned image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedSample {
    pub id: usize,
    pub image: Vec<f64>,
    pub caption: Vec<usize>,
    pub class_id: usize,
    pub is_dup: bool,
}

/// Corpus construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub height: usize,
    pub width: usize,
    pub family: TemplateFamily,
    /// Std-dev of the per-sample Gaussian perturbation.
    pub noise_sigma: f64,
    /// Scale of the per-descriptor brightness offsets.
    pub brightness_scale: f64,
}

impl CorpusConfig {
    pub fn image_dim(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_val < 1 || self.n_test < 1 {
            return Err(Error::Config {
                field: "corpus.n_train",
                reason: "split sizes must be >= 1".to_string(),
            });
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config {
                field: "corpus.height",
                reason: "image geometry must be nonzero".to_string(),
            });
        }
        Vocab::new(self.n_classes, self.vocab_size).map(|_| ())
    }
}

/// An immutable corpus: splits, class templates and (once built) the
/// memorization subset. The train list may contain duplicated entries
/// appended after the `base_train_len` originals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    pub train: Vec<CaptionedSample>,
    pub val: Vec<CaptionedSample>,
    pub test: Vec<CaptionedSample>,
    /// The duplicated originals, in selection order.
    pub mem_subset: Vec<CaptionedSample>,
    /// Number of non-duplicated leading entries in `train`.
    pub base_train_len: usize,
    /// Per-class template images.
    pub class_templates: Vec<Vec<f64>>,
}

/// Class template image in `[-1, 1]`.
pub fn class_template(class: usize, cfg: &CorpusConfig) -> Vec<f64> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let ci = (h - 1.0) / 2.0;
    let cj = (w - 1.0) / 2.0;
    let c = class as f64;
    let n_c = cfg.n_classes as f64;
    let mut img = vec![0.0; cfg.image_dim()];
    for i in 0..cfg.height {
        for j in 0..cfg.width {
            let y = i as f64 - ci;
            let x = j as f64 - cj;
            let v = match cfg.family {
                TemplateFamily::Bars => {
                    // Bar through the centre at a class-specific angle.
                    let angle = core::f64::consts::PI * c / n_c;
                    let dist = math::abs(y * math::sin(angle) - x * math::cos(angle));
                    1.0 - 2.0 * (dist / 1.5).min(1.0)
                }
                TemplateFamily::Blobs => {
                    // Gaussian blob on a ring around the centre.
                    let r = 0.35 * (h.min(w) - 1.0);
                    let phase = 2.0 * core::f64::consts::PI * c / n_c;
                    let by = r * math::sin(phase);
                    let bx = r * math::cos(phase);
                    let d2 = (y - by) * (y - by) + (x - bx) * (x - bx);
                    2.0 * math::exp(-d2 / 3.0) - 1.0
                }
                TemplateFamily::Crosses => {
                    // Cross with class-dependent arm positions.
                    let row = 1 + (class % (cfg.height - 2));
                    let col = 1 + ((class * 3 + 1) % (cfg.width - 2));
                    if i == row || j == col {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            img[i * cfg.width + j] = v.clamp(-1.0, 1.0);
        }
    }
    img
}

/// Quadratically skewed descriptor draw so low-id descriptors dominate the
/// token-frequency ranking.
fn draw_descriptor(rng: &mut Rng, vocab: &Vocab) -> usize {
    let n_desc = vocab.size() - vocab.n_classes;
    let u = rng.uniform();
    let skewed = libm::pow(u, 1.4);
    vocab.n_classes + ((skewed * n_desc as f64) as usize).min(n_desc - 1)
}

fn synth_sample(
    id: usize,
    class: usize,
    cfg: &CorpusConfig,
    templates: &[Vec<f64>],
    brightness: &[f64],
    vocab: &Vocab,
    rng: &mut Rng,
) -> CaptionedSample {
    let n_desc_tokens = 2 + rng.below(6); // 2..=7 descriptors
    let mut caption = Vec::with_capacity(1 + n_desc_tokens);
    caption.push(class);
    for _ in 0..n_desc_tokens {
        caption.push(draw_descriptor(rng, vocab));
    }
    let offset: f64 = caption[1..]
        .iter()
        .map(|&t| brightness[t - vocab.n_classes])
        .sum::<f64>()
        / n_desc_tokens as f64;
    let image = templates[class]
        .iter()
        .map(|&v| (v + cfg.noise_sigma * rng.normal() + offset).clamp(-1.0, 1.0))
        .collect();
    CaptionedSample {
        id,
        image,
        caption,
        class_id: class,
        is_dup: false,
    }
}

/// Generate a corpus deterministically from its config.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocab::new(cfg.n_classes, cfg.vocab_size)?;
    let templates: Vec<Vec<f64>> = (0..cfg.n_classes).map(|c| class_template(c, cfg)).collect();

    let mut brightness_rng = Rng::new(index_seed(cfg.seed, 0xb1));
    let brightness: Vec<f64> = (0..cfg.vocab_size - cfg.n_classes)
        .map(|_| brightness_rng.uniform_in(-cfg.brightness_scale, cfg.brightness_scale))
        .collect();

    let mut next_id = 0;
    let mut make_split = |count: usize, split_tag: u64| -> Vec<CaptionedSample> {
        let mut rng = Rng::new(index_seed(cfg.seed, split_tag));
        (0..count)
            .map(|k| {
                let class = k % cfg.n_classes;
                let id = next_id;
                next_id += 1;
                synth_sample(id, class, cfg, &templates, &brightness, &vocab, &mut rng)
            })
            .collect()
    };

    let train = make_split(cfg.n_train, 1);
    let val = make_split(cfg.n_val, 2);
    let test = make_split(cfg.n_test, 3);
    let base_train_len = train.len();

    Ok(Corpus {
        config: cfg.clone(),
        vocab,
        train,
        val,
        test,
        mem_subset: Vec::new(),
        base_train_len,
        class_templates: templates,
    })
}

/// Exact token counts over a caption list, descending by count with ties
/// broken by ascending token id.
pub fn token_frequency(captions: &[&[usize]]) -> Result<Vec<(usize, usize)>> {
    if captions.is_empty() {
        return Err(Error::InvalidArgument("token_frequency: empty caption list".to_string()));
    }
    let max_id = captions
        .iter()
        .flat_map(|c| c.iter())
        .copied()
        .max()
        .unwrap_or(0);
    let mut counts = vec![0usize; max_id + 1];
    for caption in captions {
        for &t in *caption {
            counts[t] += 1;
        }
    }
    let mut out: Vec<(usize, usize)> = counts
        .into_iter()
        .enumerate()
        .filter(|(_, c)| *c > 0)
        .collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Sum of per-caption occurrence counts of the given top tokens.
fn caption_score(caption: &[usize], top_tokens: &[usize]) -> usize {
    caption
        .iter()
        .filter(|t| top_tokens.contains(t))
        .count()
}

/// Build the memorization subset: rank the base train captions by their
/// summed frequency of the `top_k` globally most frequent tokens, take the
/// top `n` samples (ties by id), and append `dup` flagged copies of each to
/// the train list.
pub fn build_mem_subset(corpus: &Corpus, n: usize, dup: usize, top_k: usize) -> Result<Corpus> {
    let base = &corpus.train[..corpus.base_train_len];
    if n > base.len() {
        return Err(Error::InvalidArgument(format!(
            "mem subset size {n} exceeds train size {}",
            base.len()
        )));
    }
    let captions: Vec<&[usize]> = base.iter().map(|s| s.caption.as_slice()).collect();
    let freq = token_frequency(&captions)?;
    let top_tokens: Vec<usize> = freq.iter().take(top_k).map(|(t, _)| *t).collect();

    let mut ranked: Vec<(usize, usize)> = base
        .iter()
        .enumerate()
        .map(|(i, s)| (i, caption_score(&s.caption, &top_tokens)))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(base[a.0].id.cmp(&base[b.0].id)));

    let selected: Vec<usize> = ranked.iter().take(n).map(|(i, _)| *i).collect();

    let mut out = corpus.clone();
    out.train.truncate(out.base_train_len);
    let mut mem_subset = Vec::with_capacity(n);
    for &i in &selected {
        out.train[i].is_dup = true;
        mem_subset.push(out.train[i].clone());
        for _ in 0..dup {
            out.train.push(out.train[i].clone());
        }
    }
    out.mem_subset = mem_subset;
    Ok(out)
}

/// Draw the search-time training subset: a uniform without-replacement
/// sample of the base train set, unioned with the `dup` copies of every
/// memorization-subset sample.
pub fn hpo_subsample(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Vec<CaptionedSample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "hpo fraction must be in (0, 1], got {fraction}"
        )));
    }
    let base = &corpus.train[..corpus.base_train_len];
    let k = (math::round(fraction * base.len() as f64) as usize).clamp(1, base.len());
    let mut rng = Rng::new(seed);
    let mut picked = rng.sample_indices(base.len(), k);
    picked.sort_unstable();
    let mut out: Vec<CaptionedSample> = picked.into_iter().map(|i| base[i].clone()).collect();
    // The duplicated copies live after the base block; keep them all.
    out.extend(corpus.train[corpus.base_train_len..].iter().cloned());
    Ok(out)
}

/// Frozen random token-embedding table; the stand-in for a text encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    table: Matrix,
}

impl EmbeddingTable {
    /// Seeded table of `vocab_size` rows of width `embed_dim`, scaled so a
    /// typical caption mean has roughly unit-order coordinates.
    pub fn new(vocab_size: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut table = Matrix::zeros(vocab_size, embed_dim);
        for v in table.data_mut() {
            *v = 2.0 * rng.normal();
        }
        Self { table }
    }

    pub fn embed_dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    /// Mean of the per-token embedding rows; the empty caption embeds to the
    /// zero vector (the empty-prompt embedding).
    pub fn embed_caption(&self, caption: &[usize]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.embed_dim()];
        if caption.is_empty() {
            return Ok(out);
        }
        for &t in caption {
            if t >= self.vocab_size() {
                return Err(Error::OutOfVocab {
                    id: t,
                    size: self.vocab_size(),
                });
            }
            for (o, v) in out.iter_mut().zip(self.table.row(t)) {
                *o += v;
            }
        }
        let inv = 1.0 / caption.len() as f64;
        for o in &mut out {
            *o *= inv;
        }
        Ok(out)
    }

    /// The empty-prompt embedding.
    pub fn empty_prompt(&self) -> Vec<f64> {
        vec![0.0; self.embed_dim()]
    }
}
