//! The trainable conditional noise predictor.
//!
//! The architecture is a residual conditional MLP standing in for a U-Net:
//!
//! ```text
//! h = in_proj x_t + time_emb[t-1] + prompt_proj p
//! for each of the mixing blocks (down..., mid, up...):
//!     h = h + gamma_b * tanh(W_b h + b_b)
//! eps_hat = out_proj h
//! ```
//!
//! The default layout has 13 mixing blocks (6 down, 1 mid, 6 up) plus three
//! extra units (input projection, prompt projection, output head), giving
//! the three mask search spaces their lengths: 13 for spectral and
//! scale-shift tuning, 13 + 3 = 16 for attention tuning.
//!
//! Mask bits follow the layout: the first six bits are the down blocks, the
//! next six the up blocks, and the last block bit is the mid block; the
//! attention space appends the three extra units.
//!
//! Fine-tuning never touches the frozen base parameters. Each PEFT family
//! owns a delta buffer and the effective parameters are assembled on the
//! fly: spectral shifts move singular values of the block weight matrices,
//! scale-shift moves per-block gain and bias, attention tuning adds dense
//! weight deltas per unit. Gradients are hand-derived reverse-mode
//! accumulation; an Adam loop updates only the deltas selected by the mask.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionedSample, EmbeddingTable};
use crate::diffusion::{q_sample, NoisePredictor, NoiseSchedule};
use crate::linalg::{dot, svd_jacobi, Matrix, Svd};
use crate::math;
use crate::mitigation::{
    calibrate_tau, rwa, threshold_filter, MitigationConfig, MitigationKind, ThresholdAction,
};
use crate::rng::{checksum_f64, index_seed, Rng};
use crate::{Error, Result};

/// Block count of the production layout: 6 down, 1 mid, 6 up.
pub const PROD_BLOCKS: usize = 13;
/// Extra maskable units in the attention space beyond the mixing blocks.
pub const EXTRA_UNITS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Image dimension D = H x W.
    pub image_dim: usize,
    /// Prompt embedding width E.
    pub embed_dim: usize,
    /// Hidden width of the mixing blocks.
    pub hidden_dim: usize,
    /// Diffusion step count T; the time-embedding table has this many rows.
    pub timesteps: usize,
    /// Number of mixing blocks; 13 in the production layout.
    pub n_blocks: usize,
}

impl ArchConfig {
    /// Desk-scale defaults: 8x8 images, 16-wide embeddings, 64-wide blocks.
    pub fn desk_default() -> Self {
        Self {
            image_dim: 64,
            embed_dim: 16,
            hidden_dim: 64,
            timesteps: 50,
            n_blocks: PROD_BLOCKS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("arch.image_dim", self.image_dim),
            ("arch.embed_dim", self.embed_dim),
            ("arch.hidden_dim", self.hidden_dim),
            ("arch.timesteps", self.timesteps),
            ("arch.n_blocks", self.n_blocks),
        ] {
            if v == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be >= 1".to_string(),
                });
            }
        }
        Ok(())
    }

    /// Mask length for a space under this layout.
    pub fn mask_len(&self, space: MaskSpace) -> usize {
        match space {
            MaskSpace::Spectral | MaskSpace::ScaleShift => self.n_blocks,
            MaskSpace::Attention => self.n_blocks + EXTRA_UNITS,
        }
    }

    /// Execution-order block index for a mask bit.
    ///
    /// Blocks run down(0..6), mid(6), up(7..13); mask bits are laid out as
    /// down(0..6), up(6..12), mid(12). Toy layouts map bits identically.
    pub fn block_for_bit(&self, bit: usize) -> usize {
        if self.n_blocks == PROD_BLOCKS {
            match bit {
                0..=5 => bit,
                6..=11 => bit + 1,
                12 => 6,
                _ => panic!("bit {bit} is not a block bit"),
            }
        } else {
            bit
        }
    }

    /// Inverse of [`Self::block_for_bit`].
    pub fn bit_for_block(&self, block: usize) -> usize {
        if self.n_blocks == PROD_BLOCKS {
            match block {
                0..=5 => block,
                6 => 12,
                7..=12 => block - 1,
                _ => panic!("block {block} out of range"),
            }
        } else {
            block
        }
    }

    /// Human-readable name of a maskable unit.
    pub fn unit_name(&self, space: MaskSpace, bit: usize) -> String {
        if bit >= self.n_blocks {
            debug_assert_eq!(space, MaskSpace::Attention);
            return match bit - self.n_blocks {
                0 => "in-proj".to_string(),
                1 => "prompt-proj".to_string(),
                _ => "out-head".to_string(),
            };
        }
        if self.n_blocks == PROD_BLOCKS {
            match bit {
                0..=5 => format!("down-{}", bit + 1),
                6..=11 => format!("up-{}", bit - 5),
                _ => "mid".to_string(),
            }
        } else {
            format!("block-{bit}")
        }
    }
}

/// The three PEFT search spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSpace {
    /// Fine-tune singular values of the block weight matrices.
    Spectral,
    /// Fine-tune per-block gain and bias.
    ScaleShift,
    /// Fine-tune dense weight deltas per unit, extras included.
    Attention,
}

impl MaskSpace {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskSpace::Spectral => "spectral",
            MaskSpace::ScaleShift => "scale_shift",
            MaskSpace::Attention => "attention",
        }
    }
}

impl core::str::FromStr for MaskSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(MaskSpace::Spectral),
            "scale_shift" => Ok(MaskSpace::ScaleShift),
            "attention" => Ok(MaskSpace::Attention),
            other => Err(Error::InvalidArgument(format!("unknown mask space {other:?}"))),
        }
    }
}

/// Binary mask over a PEFT search space; the outer-loop decision variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    pub space: MaskSpace,
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn zeros(space: MaskSpace, arch: &ArchConfig) -> Self {
        Self {
            space,
            bits: vec![0; arch.mask_len(space)],
        }
    }

    pub fn ones(space: MaskSpace, arch: &ArchConfig) -> Self {
        Self {
            space,
            bits: vec![1; arch.mask_len(space)],
        }
    }

    pub fn from_bits(space: MaskSpace, bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|b| *b > 1) {
            return Err(Error::MaskMismatch {
                reason: "bits must be 0 or 1".to_string(),
            });
        }
        Ok(Self { space, bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn is_set(&self, bit: usize) -> bool {
        self.bits[bit] == 1
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    /// Compact bit string, e.g. "1010011010110".
    pub fn bit_string(&self) -> String {
        self.bits.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
    }

    pub fn validate_for(&self, arch: &ArchConfig) -> Result<()> {
        let expect = arch.mask_len(self.space);
        if self.bits.len() != expect {
            return Err(Error::MaskMismatch {
                reason: format!(
                    "space {} expects {} bits, got {}",
                    self.space.as_str(),
                    expect,
                    self.bits.len()
                ),
            });
        }
        if self.bits.iter().any(|b| *b > 1) {
            return Err(Error::MaskMismatch {
                reason: "bits must be 0 or 1".to_string(),
            });
        }
        Ok(())
    }
}

/// Frozen parameter groups of the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub block_w: Vec<Matrix>,
    pub block_b: Vec<Vec<f64>>,
    pub block_gamma: Vec<f64>,
    pub in_proj: Matrix,
    pub prompt_proj: Matrix,
    pub out_proj: Matrix,
    pub time_emb: Matrix,
}

/// Per-block thin SVD factors of the base block weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub blocks: Vec<Svd>,
}

/// PEFT delta buffers, one family per mask space. All zeros at rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeftDeltas {
    /// Singular-value shifts per block.
    pub spectral: Vec<Vec<f64>>,
    /// Gain shift per block.
    pub scale_gamma: Vec<f64>,
    /// Bias shift per block.
    pub scale_bias: Vec<Vec<f64>>,
    /// Dense weight deltas per block.
    pub attn_blocks: Vec<Matrix>,
    pub attn_in: Matrix,
    pub attn_prompt: Matrix,
    pub attn_out: Matrix,
}

impl PeftDeltas {
    fn zeros(arch: &ArchConfig) -> Self {
        let h = arch.hidden_dim;
        Self {
            spectral: vec![vec![0.0; h]; arch.n_blocks],
            scale_gamma: vec![0.0; arch.n_blocks],
            scale_bias: vec![vec![0.0; h]; arch.n_blocks],
            attn_blocks: (0..arch.n_blocks).map(|_| Matrix::zeros(h, h)).collect(),
            attn_in: Matrix::zeros(h, arch.image_dim),
            attn_prompt: Matrix::zeros(h, arch.embed_dim),
            attn_out: Matrix::zeros(arch.image_dim, h),
        }
    }

    fn is_zero(&self) -> bool {
        self.spectral.iter().flatten().all(|v| *v == 0.0)
            && self.scale_gamma.iter().all(|v| *v == 0.0)
            && self.scale_bias.iter().flatten().all(|v| *v == 0.0)
            && self.attn_blocks.iter().all(|m| m.data().iter().all(|v| *v == 0.0))
            && self.attn_in.data().iter().all(|v| *v == 0.0)
            && self.attn_prompt.data().iter().all(|v| *v == 0.0)
            && self.attn_out.data().iter().all(|v| *v == 0.0)
    }
}

/// Base parameters, optional SVD factors and PEFT deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub arch: ArchConfig,
    pub base: BaseParams,
    pub svd: Option<SvdFactors>,
    pub deltas: PeftDeltas,
}

fn seeded_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = scale * rng.normal();
    }
    m
}

/// Fresh parameters: fan-in-scaled normal weights, unit gains, zero biases
/// and zero deltas. Deterministic per seed.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<DenoiserParams> {
    arch.validate()?;
    let mut rng = Rng::new(seed);
    let h = arch.hidden_dim;
    let block_w = (0..arch.n_blocks)
        .map(|_| seeded_matrix(&mut rng, h, h, 1.0 / math::sqrt(h as f64)))
        .collect();
    let base = BaseParams {
        block_w,
        block_b: vec![vec![0.0; h]; arch.n_blocks],
        block_gamma: vec![1.0; arch.n_blocks],
        in_proj: seeded_matrix(&mut rng, h, arch.image_dim, 1.0 / math::sqrt(arch.image_dim as f64)),
        prompt_proj: seeded_matrix(&mut rng, h, arch.embed_dim, 1.0 / math::sqrt(arch.embed_dim as f64)),
        out_proj: seeded_matrix(&mut rng, arch.image_dim, h, 1.0 / math::sqrt(h as f64)),
        time_emb: seeded_matrix(&mut rng, arch.timesteps, h, 0.05),
    };
    Ok(DenoiserParams {
        arch: *arch,
        base,
        svd: None,
        deltas: PeftDeltas::zeros(arch),
    })
}

/// Relative Frobenius tolerance of the SVD reconstruction invariant.
pub const SVD_RECON_TOL: f64 = 1e-8;

/// Populate the per-block SVD factors from the current base weights.
pub fn svd_decompose(params: &mut DenoiserParams) -> Result<()> {
    let mut blocks = Vec::with_capacity(params.arch.n_blocks);
    for (b, w) in params.base.block_w.iter().enumerate() {
        let svd = svd_jacobi(w).map_err(|e| match e {
            Error::Decomposition { sweeps, .. } => Error::Decomposition { block: b, sweeps },
            other => other,
        })?;
        let recon = svd.reconstruct();
        let denom = w.frobenius_norm().max(f64::MIN_POSITIVE);
        let mut err2 = 0.0;
        for (x, y) in recon.data().iter().zip(w.data()) {
            err2 += (x - y) * (x - y);
        }
        if math::sqrt(err2) / denom > SVD_RECON_TOL {
            return Err(Error::Decomposition { block: b, sweeps: 0 });
        }
        blocks.push(svd);
    }
    params.svd = Some(SvdFactors { blocks });
    Ok(())
}

impl DenoiserParams {
    /// FNV checksum over every base scalar and SVD factor, used to verify
    /// the frozen base stays untouched across trials.
    pub fn base_checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |xs: &[f64]| {
            acc ^= checksum_f64(xs);
            acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for w in &self.base.block_w {
            mix(w.data());
        }
        for b in &self.base.block_b {
            mix(b);
        }
        mix(&self.base.block_gamma);
        mix(self.base.in_proj.data());
        mix(self.base.prompt_proj.data());
        mix(self.base.out_proj.data());
        mix(self.base.time_emb.data());
        if let Some(svd) = &self.svd {
            for s in &svd.blocks {
                mix(s.u.data());
                mix(&s.sigma);
                mix(s.v.data());
            }
        }
        acc
    }

    /// Checksum over base and deltas; identifies the whole model state.
    pub fn full_checksum(&self) -> u64 {
        let mut acc = self.base_checksum();
        let mut mix = |xs: &[f64]| {
            acc ^= checksum_f64(xs);
            acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for d in &self.deltas.spectral {
            mix(d);
        }
        mix(&self.deltas.scale_gamma);
        for d in &self.deltas.scale_bias {
            mix(d);
        }
        for d in &self.deltas.attn_blocks {
            mix(d.data());
        }
        mix(self.deltas.attn_in.data());
        mix(self.deltas.attn_prompt.data());
        mix(self.deltas.attn_out.data());
        acc
    }

    /// Total scalar count across all base groups.
    pub fn total_scalars(&self) -> usize {
        let a = &self.arch;
        let h = a.hidden_dim;
        a.n_blocks * (h * h + h + 1)
            + h * a.image_dim
            + h * a.embed_dim
            + a.image_dim * h
            + a.timesteps * h
    }

    /// Scalars trainable under a mask.
    pub fn trainable_scalars(&self, mask: &Mask) -> usize {
        let a = &self.arch;
        let h = a.hidden_dim;
        let mut count = 0;
        for bit in 0..mask.len() {
            if !mask.is_set(bit) {
                continue;
            }
            count += match mask.space {
                MaskSpace::Spectral => h,
                MaskSpace::ScaleShift => 1 + h,
                MaskSpace::Attention => {
                    if bit < a.n_blocks {
                        h * h
                    } else {
                        match bit - a.n_blocks {
                            0 => h * a.image_dim,
                            1 => h * a.embed_dim,
                            _ => a.image_dim * h,
                        }
                    }
                }
            };
        }
        count
    }
}

/// A read-only view combining frozen base parameters with the deltas
/// selected by a mask. `mask = None` is the frozen base model.
#[derive(Clone, Copy)]
pub struct EffectiveModel<'a> {
    pub params: &'a DenoiserParams,
    pub mask: Option<&'a Mask>,
}

/// Per-block forward routing under a mask.
enum BlockRoute<'a> {
    /// Frozen base weight.
    Plain,
    /// Factored path with shifted singular values.
    Spectral { svd: &'a Svd, delta: &'a [f64] },
    /// Shifted gain and bias on the base weight.
    Scale { dgamma: f64, dbias: &'a [f64] },
    /// Dense weight delta on top of the base weight.
    Attn { delta: &'a Matrix },
}

/// Construct the effective view, validating the mask against the layout.
pub fn effective_params<'a>(
    params: &'a DenoiserParams,
    mask: &'a Mask,
) -> Result<EffectiveModel<'a>> {
    mask.validate_for(&params.arch)?;
    if mask.space == MaskSpace::Spectral && params.svd.is_none() {
        return Err(Error::InvalidArgument(
            "spectral mask requires svd factors; run svd_decompose first".to_string(),
        ));
    }
    Ok(EffectiveModel {
        params,
        mask: Some(mask),
    })
}

impl<'a> EffectiveModel<'a> {
    pub fn frozen(params: &'a DenoiserParams) -> Self {
        Self { params, mask: None }
    }

    fn route(&self, block: usize) -> BlockRoute<'a> {
        let Some(mask) = self.mask else {
            return BlockRoute::Plain;
        };
        let bit = self.params.arch.bit_for_block(block);
        if !mask.is_set(bit) {
            return BlockRoute::Plain;
        }
        match mask.space {
            MaskSpace::Spectral => BlockRoute::Spectral {
                svd: &self.params.svd.as_ref().expect("validated").blocks[block],
                delta: &self.params.deltas.spectral[block],
            },
            MaskSpace::ScaleShift => BlockRoute::Scale {
                dgamma: self.params.deltas.scale_gamma[block],
                dbias: &self.params.deltas.scale_bias[block],
            },
            MaskSpace::Attention => BlockRoute::Attn {
                delta: &self.params.deltas.attn_blocks[block],
            },
        }
    }

    /// Attention delta for an extra unit (0 in, 1 prompt, 2 out), if live.
    fn extra_delta(&self, unit: usize) -> Option<&'a Matrix> {
        let mask = self.mask?;
        if mask.space != MaskSpace::Attention {
            return None;
        }
        let bit = self.params.arch.n_blocks + unit;
        if !mask.is_set(bit) {
            return None;
        }
        Some(match unit {
            0 => &self.params.deltas.attn_in,
            1 => &self.params.deltas.attn_prompt,
            _ => &self.params.deltas.attn_out,
        })
    }

    fn proj(&self, base: &Matrix, unit: usize, x: &[f64]) -> Vec<f64> {
        let mut out = base.matvec(x);
        if let Some(delta) = self.extra_delta(unit) {
            let extra = delta.matvec(x);
            for (o, e) in out.iter_mut().zip(&extra) {
                *o += e;
            }
        }
        out
    }

    /// Deterministic forward pass at conceptual timestep `t` in `[1, T]`.
    pub fn forward(&self, x_t: &[f64], t: usize, prompt_emb: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(x_t, t, prompt_emb)?;
        Ok(cache.eps_hat)
    }

    fn forward_cached(&self, x_t: &[f64], t: usize, prompt_emb: &[f64]) -> Result<ForwardCache> {
        let arch = &self.params.arch;
        if x_t.len() != arch.image_dim {
            return Err(Error::Shape {
                what: "forward x_t",
                expected: arch.image_dim,
                got: x_t.len(),
            });
        }
        if prompt_emb.len() != arch.embed_dim {
            return Err(Error::Shape {
                what: "forward prompt_emb",
                expected: arch.embed_dim,
                got: prompt_emb.len(),
            });
        }
        if t == 0 || t > arch.timesteps {
            return Err(Error::InvalidArgument(format!(
                "forward timestep {t} outside [1, {}]",
                arch.timesteps
            )));
        }
        let base = &self.params.base;
        let mut h = self.proj(&base.in_proj, 0, x_t);
        let prompt_part = self.proj(&base.prompt_proj, 1, prompt_emb);
        for ((hv, te), pp) in h.iter_mut().zip(base.time_emb.row(t - 1)).zip(&prompt_part) {
            *hv += te + pp;
        }

        let n_blocks = arch.n_blocks;
        let mut h_in = Vec::with_capacity(n_blocks);
        let mut act = Vec::with_capacity(n_blocks);
        let mut proj_coords = vec![None; n_blocks];
        for b in 0..n_blocks {
            h_in.push(h.clone());
            let mut gamma = base.block_gamma[b];
            let mut z = match self.route(b) {
                BlockRoute::Plain => base.block_w[b].matvec(&h),
                BlockRoute::Spectral { svd, delta } => {
                    let q = svd.v.matvec_t(&h);
                    let scaled: Vec<f64> = q
                        .iter()
                        .zip(svd.sigma.iter().zip(delta))
                        .map(|(qi, (s, d))| qi * (s + d))
                        .collect();
                    proj_coords[b] = Some(q);
                    svd.u.matvec(&scaled)
                }
                BlockRoute::Scale { dgamma, dbias } => {
                    gamma += dgamma;
                    let mut z = base.block_w[b].matvec(&h);
                    for (zv, dbv) in z.iter_mut().zip(dbias) {
                        *zv += dbv;
                    }
                    z
                }
                BlockRoute::Attn { delta } => {
                    let mut z = base.block_w[b].matvec(&h);
                    let extra = delta.matvec(&h);
                    for (zv, e) in z.iter_mut().zip(&extra) {
                        *zv += e;
                    }
                    z
                }
            };
            for (zv, bias) in z.iter_mut().zip(&base.block_b[b]) {
                *zv += bias;
            }
            let a: Vec<f64> = z.iter().map(|v| math::tanh(*v)).collect();
            for (hv, av) in h.iter_mut().zip(&a) {
                *hv += gamma * av;
            }
            act.push(a);
        }

        let eps_hat = self.proj(&base.out_proj, 2, &h);
        Ok(ForwardCache {
            h_in,
            act,
            proj_coords,
            h_final: h,
            eps_hat,
        })
    }

    /// Materialise the effective parameters as a dense base-parameter set.
    pub fn to_dense(&self) -> BaseParams {
        let base = &self.params.base;
        let mut out = base.clone();
        for b in 0..self.params.arch.n_blocks {
            match self.route(b) {
                BlockRoute::Plain => {}
                BlockRoute::Spectral { svd, delta } => {
                    let shifted = Svd {
                        u: svd.u.clone(),
                        sigma: svd.sigma.iter().zip(delta).map(|(s, d)| s + d).collect(),
                        v: svd.v.clone(),
                    };
                    out.block_w[b] = shifted.reconstruct();
                }
                BlockRoute::Scale { dgamma, dbias } => {
                    out.block_gamma[b] += dgamma;
                    for (bv, d) in out.block_b[b].iter_mut().zip(dbias) {
                        *bv += d;
                    }
                }
                BlockRoute::Attn { delta } => {
                    out.block_w[b].add_in_place(delta);
                }
            }
        }
        if let Some(d) = self.extra_delta(0) {
            out.in_proj.add_in_place(d);
        }
        if let Some(d) = self.extra_delta(1) {
            out.prompt_proj.add_in_place(d);
        }
        if let Some(d) = self.extra_delta(2) {
            out.out_proj.add_in_place(d);
        }
        out
    }
}

impl NoisePredictor for EffectiveModel<'_> {
    fn predict(&self, x_t: &[f64], t: usize, prompt_emb: &[f64]) -> Vec<f64> {
        self.forward(x_t, t, prompt_emb)
            .expect("predict called with mismatched shapes")
    }
}

struct ForwardCache {
    h_in: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    /// `V^T h` per spectral-routed block.
    proj_coords: Vec<Option<Vec<f64>>>,
    h_final: Vec<f64>,
    eps_hat: Vec<f64>,
}

/// What the trainer updates.
#[derive(Debug, Clone)]
pub enum TrainMode {
    /// All base groups; the time-embedding table only when flagged (it is
    /// conditioning, frozen during fine-tuning like the prompt table).
    Full { train_time_emb: bool },
    /// Only the deltas selected by the mask.
    Masked(Mask),
}

/// Gradients w.r.t. the base groups (full fine-tuning and pretraining).
#[derive(Debug, Clone)]
pub struct BaseGrads {
    pub block_w: Vec<Matrix>,
    pub block_b: Vec<Vec<f64>>,
    pub block_gamma: Vec<f64>,
    pub in_proj: Matrix,
    pub prompt_proj: Matrix,
    pub out_proj: Matrix,
    pub time_emb: Matrix,
}

impl BaseGrads {
    fn zeros(arch: &ArchConfig) -> Self {
        let h = arch.hidden_dim;
        Self {
            block_w: (0..arch.n_blocks).map(|_| Matrix::zeros(h, h)).collect(),
            block_b: vec![vec![0.0; h]; arch.n_blocks],
            block_gamma: vec![0.0; arch.n_blocks],
            in_proj: Matrix::zeros(h, arch.image_dim),
            prompt_proj: Matrix::zeros(h, arch.embed_dim),
            out_proj: Matrix::zeros(arch.image_dim, h),
            time_emb: Matrix::zeros(arch.timesteps, h),
        }
    }
}

/// Gradients over the trainable set of a mode. Masked variants are shaped
/// like the full delta family of their space with exact zeros at masked-off
/// positions.
#[derive(Debug, Clone)]
pub enum GradSet {
    Spectral(Vec<Vec<f64>>),
    Scale {
        gamma: Vec<f64>,
        bias: Vec<Vec<f64>>,
    },
    Attention {
        blocks: Vec<Matrix>,
        in_proj: Matrix,
        prompt_proj: Matrix,
        out_proj: Matrix,
    },
    Full(BaseGrads),
}

impl GradSet {
    fn zeros(arch: &ArchConfig, mode: &TrainMode) -> Self {
        let h = arch.hidden_dim;
        match mode {
            TrainMode::Full { .. } => GradSet::Full(BaseGrads::zeros(arch)),
            TrainMode::Masked(mask) => match mask.space {
                MaskSpace::Spectral => GradSet::Spectral(vec![vec![0.0; h]; arch.n_blocks]),
                MaskSpace::ScaleShift => GradSet::Scale {
                    gamma: vec![0.0; arch.n_blocks],
                    bias: vec![vec![0.0; h]; arch.n_blocks],
                },
                MaskSpace::Attention => GradSet::Attention {
                    blocks: (0..arch.n_blocks).map(|_| Matrix::zeros(h, h)).collect(),
                    in_proj: Matrix::zeros(h, arch.image_dim),
                    prompt_proj: Matrix::zeros(h, arch.embed_dim),
                    out_proj: Matrix::zeros(arch.image_dim, h),
                },
            },
        }
    }
}

/// One training example after mitigation has resolved its prompt embedding.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub x0: Vec<f64>,
    pub prompt_emb: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

fn mask_bit_set(mode: &TrainMode, bit: usize) -> bool {
    match mode {
        TrainMode::Full { .. } => true,
        TrainMode::Masked(mask) => mask.is_set(bit),
    }
}

/// Mean-squared noise-prediction loss over a batch and its gradients over
/// the mode's trainable set.
///
/// The loss is `mean_i ||eps_i - eps_hat_i||^2 / D`. Gradients are
/// reverse-mode accumulation through the residual blocks; the spectral
/// gradient for singular value `j` of block `b` is `u_j^T (dL/dW_b) v_j`,
/// evaluated as `(U^T g_z)_j (V^T h)_j` without materialising `dL/dW_b`.
pub fn loss_and_grad(
    params: &DenoiserParams,
    mode: &TrainMode,
    batch: &[BatchItem],
    sched: &NoiseSchedule,
) -> Result<(f64, GradSet)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("loss_and_grad: empty batch".to_string()));
    }
    let arch = &params.arch;
    let model = match mode {
        TrainMode::Full { .. } => EffectiveModel::frozen(params),
        TrainMode::Masked(mask) => effective_params(params, mask)?,
    };
    let mut grads = GradSet::zeros(arch, mode);
    let d = arch.image_dim as f64;
    let inv_batch = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for item in batch {
        let x_t = q_sample(&item.x0, item.t, &item.eps, sched)?;
        let cache = model.forward_cached(&x_t, item.t, &item.prompt_emb)?;

        let residual: Vec<f64> = cache
            .eps_hat
            .iter()
            .zip(&item.eps)
            .map(|(p, e)| p - e)
            .collect();
        loss += dot(&residual, &residual) / d * inv_batch;

        // dL/deps_hat for this sample.
        let g_eps: Vec<f64> = residual.iter().map(|r| 2.0 * r / d * inv_batch).collect();

        // Head.
        let base = &params.base;
        let mut g_h = base.out_proj.matvec_t(&g_eps);
        if let Some(delta) = model.extra_delta(2) {
            let extra = delta.matvec_t(&g_eps);
            for (g, e) in g_h.iter_mut().zip(&extra) {
                *g += e;
            }
        }
        match &mut grads {
            GradSet::Full(bg) => bg.out_proj.add_outer(1.0, &g_eps, &cache.h_final),
            GradSet::Attention { out_proj, .. } => {
                if mask_bit_set(mode, arch.n_blocks + 2) {
                    out_proj.add_outer(1.0, &g_eps, &cache.h_final);
                }
            }
            _ => {}
        }

        // Blocks, reversed.
        for b in (0..arch.n_blocks).rev() {
            let h_in = &cache.h_in[b];
            let a = &cache.act[b];
            let gamma_eff = match model.route(b) {
                BlockRoute::Scale { dgamma, .. } => base.block_gamma[b] + dgamma,
                _ => base.block_gamma[b],
            };
            // g_a = gamma * g_h; g_z = g_a * (1 - a^2)
            let g_z: Vec<f64> = a
                .iter()
                .zip(&g_h)
                .map(|(av, gh)| gamma_eff * gh * (1.0 - av * av))
                .collect();

            match &mut grads {
                GradSet::Full(bg) => {
                    bg.block_gamma[b] += dot(a, &g_h);
                    for (gb, gz) in bg.block_b[b].iter_mut().zip(&g_z) {
                        *gb += gz;
                    }
                    bg.block_w[b].add_outer(1.0, &g_z, h_in);
                }
                GradSet::Spectral(ds) => {
                    if mask_bit_set(mode, arch.bit_for_block(b)) {
                        let svd = &params.svd.as_ref().expect("validated").blocks[b];
                        let q = cache.proj_coords[b].as_ref().expect("spectral cache");
                        let ug = svd.u.matvec_t(&g_z);
                        for ((gd, ugj), qj) in ds[b].iter_mut().zip(&ug).zip(q) {
                            *gd += ugj * qj;
                        }
                    }
                }
                GradSet::Scale { gamma, bias } => {
                    if mask_bit_set(mode, arch.bit_for_block(b)) {
                        gamma[b] += dot(a, &g_h);
                        for (gb, gz) in bias[b].iter_mut().zip(&g_z) {
                            *gb += gz;
                        }
                    }
                }
                GradSet::Attention { blocks, .. } => {
                    if mask_bit_set(mode, arch.bit_for_block(b)) {
                        blocks[b].add_outer(1.0, &g_z, h_in);
                    }
                }
            }

            // g_{h_in} = g_h + W_eff^T g_z
            let back = match model.route(b) {
                BlockRoute::Plain | BlockRoute::Scale { .. } => base.block_w[b].matvec_t(&g_z),
                BlockRoute::Spectral { svd, delta } => {
                    let ug = svd.u.matvec_t(&g_z);
                    let scaled: Vec<f64> = ug
                        .iter()
                        .zip(svd.sigma.iter().zip(delta))
                        .map(|(u, (s, dl))| u * (s + dl))
                        .collect();
                    svd.v.matvec(&scaled)
                }
                BlockRoute::Attn { delta } => {
                    let mut back = base.block_w[b].matvec_t(&g_z);
                    let extra = delta.matvec_t(&g_z);
                    for (x, e) in back.iter_mut().zip(&extra) {
                        *x += e;
                    }
                    back
                }
            };
            for (gh, bk) in g_h.iter_mut().zip(&back) {
                *gh += bk;
            }
        }

        // Input projections and time embedding.
        match &mut grads {
            GradSet::Full(bg) => {
                bg.in_proj.add_outer(1.0, &g_h, &x_t);
                bg.prompt_proj.add_outer(1.0, &g_h, &item.prompt_emb);
                for (gt, gh) in bg.time_emb.row_mut(item.t - 1).iter_mut().zip(&g_h) {
                    *gt += gh;
                }
            }
            GradSet::Attention {
                in_proj,
                prompt_proj,
                ..
            } => {
                if mask_bit_set(mode, arch.n_blocks) {
                    in_proj.add_outer(1.0, &g_h, &x_t);
                }
                if mask_bit_set(mode, arch.n_blocks + 1) {
                    prompt_proj.add_outer(1.0, &g_h, &item.prompt_emb);
                }
            }
            _ => {}
        }
    }

    Ok((loss, grads))
}

/// Optimization hyperparameters and stream seed for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled weight decay applied to the trainable set each step.
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk_default(seed: u64) -> Self {
        Self {
            steps: 400,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config {
                field: "train.steps",
                reason: "must be >= 1".to_string(),
            });
        }
        if self.batch_size < 1 {
            return Err(Error::Config {
                field: "train.batch_size",
                reason: "must be >= 1".to_string(),
            });
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config {
                field: "train.learning_rate",
                reason: "must be > 0".to_string(),
            });
        }
        for (field, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config {
                    field,
                    reason: "must be in [0, 1)".to_string(),
                });
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config {
                field: "train.adam_eps",
                reason: "must be > 0".to_string(),
            });
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config {
                field: "train.weight_decay",
                reason: "must be >= 0".to_string(),
            });
        }
        Ok(())
    }
}

/// Adam moment buffers over an ordered list of flat parameter slots.
/// Fresh at the start of every training run.
struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl AdamState {
    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|s| vec![0.0; *s]).collect(),
            v: sizes.iter().map(|s| vec![0.0; *s]).collect(),
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, mut slots: Vec<&mut [f64]>, grads: &[&[f64]]) {
        assert_eq!(slots.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.beta1_pow *= cfg.beta1;
        self.beta2_pow *= cfg.beta2;
        let bias1 = 1.0 - self.beta1_pow;
        let bias2 = 1.0 - self.beta2_pow;
        for (slot_idx, params) in slots.iter_mut().enumerate() {
            let g = grads[slot_idx];
            let m = &mut self.m[slot_idx];
            let v = &mut self.v[slot_idx];
            debug_assert_eq!(params.len(), g.len());
            let decay = cfg.learning_rate * cfg.weight_decay;
            for i in 0..params.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                params[i] -= cfg.learning_rate * m_hat / (math::sqrt(v_hat) + cfg.adam_eps)
                    + decay * params[i];
            }
        }
    }
}

/// Everything a training run reads besides the model: data, schedule, the
/// frozen embedding table, the mitigation hook and its calibration samples.
pub struct TrainJob<'a> {
    pub data: &'a [CaptionedSample],
    pub schedule: &'a NoiseSchedule,
    pub embed: &'a EmbeddingTable,
    pub mitigation: &'a MitigationConfig,
    /// Clean samples for automatic threshold calibration; may be empty when
    /// the mitigation has a fixed threshold or is disabled.
    pub calibration: &'a [CaptionedSample],
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: DenoiserParams,
    pub loss_history: Vec<f64>,
    /// Samples flagged by the mitigation hook, per step.
    pub flagged_per_step: Vec<usize>,
    /// Steps where the threshold filter emptied the batch and the trainer
    /// fell back to the unfiltered batch.
    pub fallback_steps: usize,
}

/// Fine-tune deltas under a mask, starting from zero deltas and a frozen
/// base. The returned parameters share the base values of `theta0`
/// bit-for-bit; only the masked delta family changes.
pub fn train_inner(
    theta0: &DenoiserParams,
    mask: &Mask,
    job: &TrainJob,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    mask.validate_for(&theta0.arch)?;
    if mask.space == MaskSpace::Spectral && theta0.svd.is_none() {
        return Err(Error::InvalidArgument(
            "spectral training requires svd factors; run svd_decompose first".to_string(),
        ));
    }
    train_loop(theta0, TrainMode::Masked(mask.clone()), job, cfg)
}

/// Full fine-tuning: every base group is trainable. The time-embedding
/// table joins only during pretraining.
pub fn train_full(
    theta0: &DenoiserParams,
    job: &TrainJob,
    cfg: &TrainConfig,
    train_time_emb: bool,
) -> Result<TrainResult> {
    cfg.validate()?;
    train_loop(theta0, TrainMode::Full { train_time_emb }, job, cfg)
}

/// Pretrain a fresh model on the broad base corpus (all groups trainable,
/// time embedding included), then snapshot it with SVD factors populated.
pub fn pretrain(
    arch: &ArchConfig,
    job: &TrainJob,
    cfg: &TrainConfig,
) -> Result<(DenoiserParams, Vec<f64>)> {
    let fresh = init_params(arch, index_seed(cfg.seed, 0x1217))?;
    let result = train_full(&fresh, job, cfg, true)?;
    let mut theta0 = result.params;
    svd_decompose(&mut theta0)?;
    Ok((theta0, result.loss_history))
}

/// Ordered trainable slot sizes for a mode; must agree with
/// `collect_param_slots` and `collect_grad_slots`.
fn slot_sizes(arch: &ArchConfig, mode: &TrainMode) -> Vec<usize> {
    let h = arch.hidden_dim;
    let mut sizes = Vec::new();
    match mode {
        TrainMode::Full { train_time_emb } => {
            for _ in 0..arch.n_blocks {
                sizes.push(h * h);
                sizes.push(h);
                sizes.push(1);
            }
            sizes.push(h * arch.image_dim);
            sizes.push(h * arch.embed_dim);
            sizes.push(arch.image_dim * h);
            if *train_time_emb {
                sizes.push(arch.timesteps * h);
            }
        }
        TrainMode::Masked(mask) => {
            for bit in 0..mask.len() {
                if !mask.is_set(bit) {
                    continue;
                }
                match mask.space {
                    MaskSpace::Spectral => sizes.push(h),
                    MaskSpace::ScaleShift => {
                        sizes.push(1);
                        sizes.push(h);
                    }
                    MaskSpace::Attention => {
                        if bit < arch.n_blocks {
                            sizes.push(h * h);
                        } else {
                            sizes.push(match bit - arch.n_blocks {
                                0 => h * arch.image_dim,
                                1 => h * arch.embed_dim,
                                _ => arch.image_dim * h,
                            });
                        }
                    }
                }
            }
        }
    }
    sizes
}

/// Mutable flat views over the trainable scalars, in mask-bit order for
/// masked modes and group order for full mode. Scalar gains are staged in
/// `gamma_scratch`; the caller writes them back after the update.
fn collect_param_slots<'p>(
    params: &'p mut DenoiserParams,
    mode: &TrainMode,
    gamma_scratch: &'p mut Vec<f64>,
) -> Vec<&'p mut [f64]> {
    let arch = params.arch;
    let mut staged: Vec<(usize, &'p mut [f64])> = Vec::new();
    match mode {
        TrainMode::Full { train_time_emb } => {
            gamma_scratch.clear();
            gamma_scratch.extend_from_slice(&params.base.block_gamma);
            let mut gamma_rest: &mut [f64] = gamma_scratch.as_mut_slice();
            for (b, (w, bias)) in params
                .base
                .block_w
                .iter_mut()
                .zip(params.base.block_b.iter_mut())
                .enumerate()
            {
                let (head, rest) = core::mem::take(&mut gamma_rest).split_at_mut(1);
                gamma_rest = rest;
                staged.push((3 * b, w.data_mut()));
                staged.push((3 * b + 1, bias.as_mut_slice()));
                staged.push((3 * b + 2, head));
            }
            let k = 3 * arch.n_blocks;
            staged.push((k, params.base.in_proj.data_mut()));
            staged.push((k + 1, params.base.prompt_proj.data_mut()));
            staged.push((k + 2, params.base.out_proj.data_mut()));
            if *train_time_emb {
                staged.push((k + 3, params.base.time_emb.data_mut()));
            }
        }
        TrainMode::Masked(mask) => match mask.space {
            MaskSpace::Spectral => {
                for (b, d) in params.deltas.spectral.iter_mut().enumerate() {
                    let bit = arch.bit_for_block(b);
                    if mask.is_set(bit) {
                        staged.push((bit, d.as_mut_slice()));
                    }
                }
            }
            MaskSpace::ScaleShift => {
                gamma_scratch.clear();
                gamma_scratch.extend_from_slice(&params.deltas.scale_gamma);
                let mut gamma_rest: &mut [f64] = gamma_scratch.as_mut_slice();
                for (b, bias) in params.deltas.scale_bias.iter_mut().enumerate() {
                    let (head, rest) = core::mem::take(&mut gamma_rest).split_at_mut(1);
                    gamma_rest = rest;
                    let bit = arch.bit_for_block(b);
                    if mask.is_set(bit) {
                        staged.push((2 * bit, head));
                        staged.push((2 * bit + 1, bias.as_mut_slice()));
                    }
                }
            }
            MaskSpace::Attention => {
                for (b, d) in params.deltas.attn_blocks.iter_mut().enumerate() {
                    let bit = arch.bit_for_block(b);
                    if mask.is_set(bit) {
                        staged.push((bit, d.data_mut()));
                    }
                }
                if mask.is_set(arch.n_blocks) {
                    staged.push((arch.n_blocks, params.deltas.attn_in.data_mut()));
                }
                if mask.is_set(arch.n_blocks + 1) {
                    staged.push((arch.n_blocks + 1, params.deltas.attn_prompt.data_mut()));
                }
                if mask.is_set(arch.n_blocks + 2) {
                    staged.push((arch.n_blocks + 2, params.deltas.attn_out.data_mut()));
                }
            }
        },
    }
    staged.sort_by_key(|(k, _)| *k);
    staged.into_iter().map(|(_, s)| s).collect()
}

/// Gradient views matching `collect_param_slots` order.
fn collect_grad_slots<'g>(
    arch: &ArchConfig,
    mode: &TrainMode,
    grads: &'g GradSet,
) -> Vec<&'g [f64]> {
    let mut slots: Vec<&[f64]> = Vec::new();
    match (mode, grads) {
        (TrainMode::Full { train_time_emb }, GradSet::Full(bg)) => {
            for b in 0..arch.n_blocks {
                slots.push(bg.block_w[b].data());
                slots.push(&bg.block_b[b]);
                slots.push(&bg.block_gamma[b..b + 1]);
            }
            slots.push(bg.in_proj.data());
            slots.push(bg.prompt_proj.data());
            slots.push(bg.out_proj.data());
            if *train_time_emb {
                slots.push(bg.time_emb.data());
            }
        }
        (TrainMode::Masked(mask), gs) => {
            for bit in 0..mask.len() {
                if !mask.is_set(bit) {
                    continue;
                }
                match gs {
                    GradSet::Spectral(ds) => slots.push(&ds[arch.block_for_bit(bit)]),
                    GradSet::Scale { gamma, bias } => {
                        let b = arch.block_for_bit(bit);
                        slots.push(&gamma[b..b + 1]);
                        slots.push(&bias[b]);
                    }
                    GradSet::Attention {
                        blocks,
                        in_proj,
                        prompt_proj,
                        out_proj,
                    } => {
                        if bit < arch.n_blocks {
                            slots.push(blocks[arch.block_for_bit(bit)].data());
                        } else {
                            slots.push(match bit - arch.n_blocks {
                                0 => in_proj.data(),
                                1 => prompt_proj.data(),
                                _ => out_proj.data(),
                            });
                        }
                    }
                    GradSet::Full(_) => unreachable!("mode/grads mismatch"),
                }
            }
        }
        _ => unreachable!("mode/grads mismatch"),
    }
    slots
}

fn train_loop(
    theta0: &DenoiserParams,
    mode: TrainMode,
    job: &TrainJob,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    job.mitigation.validate()?;
    if job.data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".to_string()));
    }
    let arch = theta0.arch;
    let mut params = theta0.clone();
    // Fresh deltas regardless of what the snapshot carried.
    params.deltas = PeftDeltas::zeros(&arch);

    let sizes = slot_sizes(&arch, &mode);
    let mut adam = AdamState::new(&sizes);
    let mut rng_train = Rng::new(cfg.seed);
    let mut rng_mit = Rng::new(index_seed(cfg.seed, 0x317));

    let t_count = job.schedule.t_count;
    let mut loss_history = Vec::with_capacity(cfg.steps);
    let mut flagged_per_step = Vec::with_capacity(cfg.steps);
    let mut fallback_steps = 0;
    let mut tau_current = job.mitigation.tau;

    for step in 0..cfg.steps {
        // Raw batch from the training stream.
        let mut drawn: Vec<(usize, usize, Vec<f64>)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng_train.below(job.data.len());
            let t = 1 + rng_train.below(t_count);
            let eps = rng_train.normal_vec(arch.image_dim);
            drawn.push((idx, t, eps));
        }

        // Mitigation hook. Uses its own stream so that `none` leaves the
        // training trajectory untouched.
        let mut flagged = 0usize;
        let batch: Vec<BatchItem> = match job.mitigation.kind {
            MitigationKind::None => drawn
                .iter()
                .map(|(idx, t, eps)| {
                    let s = &job.data[*idx];
                    Ok(BatchItem {
                        x0: s.image.clone(),
                        prompt_emb: job.embed.embed_caption(&s.caption)?,
                        t: *t,
                        eps: eps.clone(),
                    })
                })
                .collect::<Result<_>>()?,
            MitigationKind::Rwa => drawn
                .iter()
                .map(|(idx, t, eps)| {
                    let s = &job.data[*idx];
                    let caption = rwa(
                        &s.caption,
                        job.embed.vocab_size(),
                        job.mitigation.rwa_insertions,
                        job.mitigation.rwa_prob,
                        &mut rng_mit,
                    );
                    Ok(BatchItem {
                        x0: s.image.clone(),
                        prompt_emb: job.embed.embed_caption(&caption)?,
                        t: *t,
                        eps: eps.clone(),
                    })
                })
                .collect::<Result<_>>()?,
            MitigationKind::Threshold => {
                let model = match &mode {
                    TrainMode::Full { .. } => EffectiveModel::frozen(&params),
                    TrainMode::Masked(mask) => effective_params(&params, mask)?,
                };
                if job.mitigation.tau.is_none() && step % job.mitigation.tau_refresh_every == 0 {
                    if job.calibration.is_empty() {
                        return Err(Error::InvalidArgument(
                            "threshold mitigation with automatic tau needs calibration samples"
                                .to_string(),
                        ));
                    }
                    let take = job.calibration.len().min(cfg.batch_size.max(8));
                    let picked = rng_mit.sample_indices(job.calibration.len(), take);
                    let embedded: Vec<(Vec<f64>, Vec<f64>)> = picked
                        .iter()
                        .map(|&i| {
                            let s = &job.calibration[i];
                            Ok((s.image.clone(), job.embed.embed_caption(&s.caption)?))
                        })
                        .collect::<Result<_>>()?;
                    let refs: Vec<(&[f64], &[f64])> = embedded
                        .iter()
                        .map(|(x, p)| (x.as_slice(), p.as_slice()))
                        .collect();
                    tau_current = Some(calibrate_tau(
                        &model,
                        &refs,
                        job.schedule,
                        job.mitigation.tau_percentile,
                        rng_mit.next_u64(),
                    )?);
                }
                let tau = tau_current.expect("tau fixed or calibrated above");

                let embedded: Vec<(Vec<f64>, Vec<f64>)> = drawn
                    .iter()
                    .map(|(idx, _, _)| {
                        let s = &job.data[*idx];
                        Ok((s.image.clone(), job.embed.embed_caption(&s.caption)?))
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<(&[f64], &[f64])> = embedded
                    .iter()
                    .map(|(x, p)| (x.as_slice(), p.as_slice()))
                    .collect();
                let outcome =
                    threshold_filter(&model, &refs, job.schedule, tau, rng_mit.next_u64());
                flagged = outcome.flagged.len();

                match job.mitigation.action {
                    ThresholdAction::Skip => {
                        let keep: Vec<usize> = if outcome.kept.is_empty() {
                            fallback_steps += 1;
                            (0..drawn.len()).collect()
                        } else {
                            outcome.kept.clone()
                        };
                        keep.iter()
                            .map(|&i| {
                                let (idx, t, eps) = &drawn[i];
                                let s = &job.data[*idx];
                                Ok(BatchItem {
                                    x0: s.image.clone(),
                                    prompt_emb: embedded[i].1.clone(),
                                    t: *t,
                                    eps: eps.clone(),
                                })
                            })
                            .collect::<Result<_>>()?
                    }
                    ThresholdAction::Reembed => drawn
                        .iter()
                        .enumerate()
                        .map(|(i, (idx, t, eps))| {
                            let s = &job.data[*idx];
                            let prompt_emb = if outcome.flagged.contains(&i) {
                                let caption = rwa(
                                    &s.caption,
                                    job.embed.vocab_size(),
                                    job.mitigation.rwa_insertions.max(1),
                                    1.0,
                                    &mut rng_mit,
                                );
                                job.embed.embed_caption(&caption)?
                            } else {
                                embedded[i].1.clone()
                            };
                            Ok(BatchItem {
                                x0: s.image.clone(),
                                prompt_emb,
                                t: *t,
                                eps: eps.clone(),
                            })
                        })
                        .collect::<Result<_>>()?,
                }
            }
        };

        let (loss, grads) = loss_and_grad(&params, &mode, &batch, job.schedule)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        loss_history.push(loss);
        flagged_per_step.push(flagged);

        let grad_slots = collect_grad_slots(&arch, &mode, &grads);
        let mut gamma_scratch = Vec::new();
        let param_slots = collect_param_slots(&mut params, &mode, &mut gamma_scratch);
        debug_assert_eq!(param_slots.len(), grad_slots.len());
        adam.step(cfg, param_slots, &grad_slots);
        // Write staged scalar gains back.
        match &mode {
            TrainMode::Full { .. } => {
                params.base.block_gamma.copy_from_slice(&gamma_scratch);
            }
            TrainMode::Masked(mask) if mask.space == MaskSpace::ScaleShift => {
                params.deltas.scale_gamma.copy_from_slice(&gamma_scratch);
            }
            _ => {}
        }
    }

    Ok(TrainResult {
        params,
        loss_history,
        flagged_per_step,
        fallback_steps,
    })
}
