//! The occlusion auto-encoder network: patch embedding, position
//! embeddings, pre-norm transformer blocks, the encoder→decoder channel
//! projection, a shared learnable occlusion token, and the
//! coordinate-reshape reconstruction head.
//!
//! The encoder sees only visible patches; the decoder runs on the full
//! patch sequence with occlusion tokens standing in for hidden patches,
//! placed at their original indices. Decoder channel width equals
//! `3 * patch_size`, so each decoded occluded token reshapes directly
//! into `patch_size` coordinate offsets.

mod net;

pub use net::BoundModel;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError};

/// Layer-norm stabiliser used by every block.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Default standard deviation of the truncated-normal weight init.
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {reason}")]
    InvalidConfig { reason: String },
    #[error("{op}: non-finite input values")]
    NonFiniteInput { op: &'static str },
    #[error("mask covers {mask_groups} groups but {seeds} seeds were given")]
    MaskMismatch { mask_groups: usize, seeds: usize },
    #[error("mask expects {expected} visible tokens, got {got}")]
    VisibleCountMismatch { expected: usize, got: usize },
    #[error("no occluded patches to reconstruct")]
    NoOccludedPatches,
    #[error("decoder channels {dec_channels} must equal 3 * patch points ({patch_points})")]
    ChannelPatchMismatch {
        dec_channels: usize,
        patch_points: usize,
    },
    #[error("parameter index {index} out of range ({len} parameters)")]
    ParamOutOfRange { index: usize, len: usize },
    #[error("parameter `{name}`: expected shape {expected:?}, got {got:?}")]
    ParamShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("flat parameter vector has {got} values, model has {expected}")]
    FlatSizeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyper-parameters.
///
/// `dec_channels` must equal `3 * patch_size` so decoded occluded tokens
/// reshape into coordinates without a learned head; both channel widths
/// must divide evenly into `heads`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Points per input cloud.
    pub n_points: usize,
    /// Number of patches (seeds) per cloud.
    pub groups: usize,
    /// Points per patch.
    pub patch_size: usize,
    /// Encoder token width.
    pub enc_channels: usize,
    /// Decoder token width (= 3 * patch_size).
    pub dec_channels: usize,
    /// Encoder depth in blocks.
    pub enc_depth: usize,
    /// Decoder depth in blocks.
    pub dec_depth: usize,
    /// Attention heads (shared by encoder and decoder).
    pub heads: usize,
    /// FFN expansion factor.
    pub mlp_ratio: usize,
    /// Hidden width of the two embedding MLPs (patch and position).
    pub embed_hidden: usize,
    /// Standard deviation of the truncated-normal weight init.
    pub init_std: f64,
    /// Initialise the final projection of every FFN to zero, so blocks
    /// start as identity maps on the residual stream. Off by default:
    /// with it on, the hidden FFN layers receive exactly-zero gradients
    /// on the very first backward pass.
    pub zero_init_ffn: bool,
}

impl ModelConfig {
    /// Full-scale configuration from the reference training setup:
    /// 1024-point clouds, 64 patches of 32 points, 12+12 blocks at
    /// 384/96 channels, 6 heads.
    pub fn paper() -> Self {
        Self {
            n_points: 1024,
            groups: 64,
            patch_size: 32,
            enc_channels: 384,
            dec_channels: 96,
            enc_depth: 12,
            dec_depth: 12,
            heads: 6,
            mlp_ratio: 4,
            embed_hidden: 128,
            init_std: DEFAULT_INIT_STD,
            zero_init_ffn: false,
        }
    }

    /// Desk-scale configuration used by the end-to-end smoke runs:
    /// 256-point clouds, 16 patches of 16 points, 4+2 blocks at 64/48
    /// channels, 4 heads. The init std is raised to roughly Xavier scale
    /// for these widths (sqrt(2/(64+64)) ~= 0.125) so the network starts
    /// away from the collapse point where every predicted patch sits on
    /// its own seed; with the conventional 0.02 a 30-epoch run spends
    /// its first epochs merely climbing out of that plateau.
    pub fn desk() -> Self {
        Self {
            n_points: 256,
            groups: 16,
            patch_size: 16,
            enc_channels: 64,
            dec_channels: 48,
            enc_depth: 4,
            dec_depth: 2,
            heads: 4,
            mlp_ratio: 4,
            embed_hidden: 128,
            init_std: 0.1,
            zero_init_ffn: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::InvalidConfig { reason });
        if self.n_points == 0
            || self.groups == 0
            || self.patch_size == 0
            || self.enc_channels == 0
            || self.dec_channels == 0
            || self.enc_depth == 0
            || self.dec_depth == 0
            || self.heads == 0
            || self.mlp_ratio == 0
            || self.embed_hidden == 0
        {
            return fail("all dimensions must be positive".into());
        }
        if self.dec_channels != 3 * self.patch_size {
            return fail(format!(
                "dec_channels ({}) must equal 3 * patch_size ({})",
                self.dec_channels,
                3 * self.patch_size
            ));
        }
        if self.enc_channels % self.heads != 0 {
            return fail(format!(
                "enc_channels ({}) must divide into {} heads",
                self.enc_channels, self.heads
            ));
        }
        if self.dec_channels % self.heads != 0 {
            return fail(format!(
                "dec_channels ({}) must divide into {} heads",
                self.dec_channels, self.heads
            ));
        }
        if self.groups > self.n_points {
            return fail(format!(
                "groups ({}) cannot exceed n_points ({})",
                self.groups, self.n_points
            ));
        }
        if self.patch_size > self.n_points {
            return fail(format!(
                "patch_size ({}) cannot exceed n_points ({})",
                self.patch_size, self.n_points
            ));
        }
        if !self.init_std.is_finite() || self.init_std <= 0.0 {
            return fail(format!("init_std ({}) must be finite and > 0", self.init_std));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// parameter registry and layout
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearH {
    pub w: usize,
    pub b: usize,
}

/// Position MLP: 3 → hidden → out, GELU between, final layer bias-free
/// (so all-zero weights give an exactly-zero embedding).
#[derive(Debug, Clone, Copy)]
pub(crate) struct PosMlpH {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
}

/// Shared per-point MLP of the patch embedding: 3 → hidden → out.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EmbedMlpH {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormH {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadH {
    pub q: usize,
    pub k: usize,
    pub v: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockH {
    pub norm1: NormH,
    pub heads: Vec<HeadH>,
    pub out: usize,
    pub norm2: NormH,
    pub ffn: EmbedMlpH,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: EmbedMlpH,
    pub pos_enc: PosMlpH,
    pub pos_dec: PosMlpH,
    pub enc_blocks: Vec<BlockH>,
    pub enc_norm: NormH,
    pub proj: LinearH,
    pub occ_token: usize,
    pub dec_blocks: Vec<BlockH>,
}

/// Named-parameter registry plus the structural layout over it.
///
/// Registration order is fixed by the architecture walk, so parameter
/// iteration (optimiser updates, gradient accumulation, checkpointing)
/// is deterministic.
#[derive(Debug, Clone)]
pub struct ModelWeights<T> {
    cfg: ModelConfig,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    decay: Vec<bool>,
    layout: Layout,
}

enum Init {
    TruncNormal,
    Zero,
    One,
}

struct RegistryBuilder<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    decay: Vec<bool>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    init_std: f64,
    zero_init_ffn: bool,
}

impl<T: Scalar> RegistryBuilder<T> {
    fn new(seed: u64, init_std: f64, zero_init_ffn: bool) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            decay: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, init_std).expect("valid std"),
            init_std,
            zero_init_ffn,
        }
    }

    /// Normal(0, std) sample, resampled until it lies within two
    /// standard deviations.
    fn trunc_normal(&mut self) -> f64 {
        loop {
            let x = self.normal.sample(&mut self.rng);
            if x.abs() <= 2.0 * self.init_std {
                return x;
            }
        }
    }

    fn tensor(&mut self, name: String, shape: Vec<usize>, init: Init, decay: bool) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::TruncNormal => (0..n)
                .map(|_| T::from_f64(self.trunc_normal()))
                .collect(),
            Init::Zero => vec![T::zero(); n],
            Init::One => vec![T::one(); n],
        };
        let t = Tensor::from_vec(shape, data).expect("builder shapes are valid");
        self.names.push(name);
        self.values.push(t);
        self.decay.push(decay);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, rows: usize, cols: usize) -> LinearH {
        LinearH {
            w: self.tensor(
                format!("{prefix}.weight"),
                vec![rows, cols],
                Init::TruncNormal,
                true,
            ),
            b: self.tensor(format!("{prefix}.bias"), vec![cols], Init::Zero, false),
        }
    }

    fn norm(&mut self, prefix: &str, cols: usize) -> NormH {
        NormH {
            gamma: self.tensor(format!("{prefix}.gamma"), vec![cols], Init::One, false),
            beta: self.tensor(format!("{prefix}.beta"), vec![cols], Init::Zero, false),
        }
    }

    fn block(&mut self, prefix: &str, channels: usize, heads: usize, mlp_ratio: usize) -> BlockH {
        let head_dim = channels / heads;
        let norm1 = self.norm(&format!("{prefix}.norm1"), channels);
        let head_handles = (0..heads)
            .map(|h| HeadH {
                q: self.tensor(
                    format!("{prefix}.attn.head{h}.q.weight"),
                    vec![channels, head_dim],
                    Init::TruncNormal,
                    true,
                ),
                k: self.tensor(
                    format!("{prefix}.attn.head{h}.k.weight"),
                    vec![channels, head_dim],
                    Init::TruncNormal,
                    true,
                ),
                v: self.tensor(
                    format!("{prefix}.attn.head{h}.v.weight"),
                    vec![channels, head_dim],
                    Init::TruncNormal,
                    true,
                ),
            })
            .collect();
        let out = self.tensor(
            format!("{prefix}.attn.out.weight"),
            vec![channels, channels],
            Init::TruncNormal,
            true,
        );
        let norm2 = self.norm(&format!("{prefix}.norm2"), channels);
        let hidden = channels * mlp_ratio;
        let f1 = self.linear(&format!("{prefix}.ffn.fc1"), channels, hidden);
        let fc2_init = if self.zero_init_ffn {
            Init::Zero
        } else {
            Init::TruncNormal
        };
        let f2 = LinearH {
            w: self.tensor(
                format!("{prefix}.ffn.fc2.weight"),
                vec![hidden, channels],
                fc2_init,
                true,
            ),
            b: self.tensor(format!("{prefix}.ffn.fc2.bias"), vec![channels], Init::Zero, false),
        };
        BlockH {
            norm1,
            heads: head_handles,
            out,
            norm2,
            ffn: EmbedMlpH {
                w1: f1.w,
                b1: f1.b,
                w2: f2.w,
                b2: f2.b,
            },
        }
    }
}

impl<T: Scalar> ModelWeights<T> {
    /// Fresh weights: truncated-normal (`cfg.init_std`) matrices, zero
    /// biases, unit norm scales; FFN output projections start at zero
    /// when `cfg.zero_init_ffn` is set. Deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut b = RegistryBuilder::<T>::new(seed, cfg.init_std, cfg.zero_init_ffn);
        let h = cfg.embed_hidden;

        let e1 = b.linear("embed.fc1", 3, h);
        let e2 = b.linear("embed.fc2", h, cfg.enc_channels);
        let embed = EmbedMlpH {
            w1: e1.w,
            b1: e1.b,
            w2: e2.w,
            b2: e2.b,
        };

        let pos_enc = PosMlpH {
            w1: b.tensor("pos_enc.fc1.weight".into(), vec![3, h], Init::TruncNormal, true),
            b1: b.tensor("pos_enc.fc1.bias".into(), vec![h], Init::Zero, false),
            w2: b.tensor(
                "pos_enc.fc2.weight".into(),
                vec![h, cfg.enc_channels],
                Init::TruncNormal,
                true,
            ),
        };
        let pos_dec = PosMlpH {
            w1: b.tensor("pos_dec.fc1.weight".into(), vec![3, h], Init::TruncNormal, true),
            b1: b.tensor("pos_dec.fc1.bias".into(), vec![h], Init::Zero, false),
            w2: b.tensor(
                "pos_dec.fc2.weight".into(),
                vec![h, cfg.dec_channels],
                Init::TruncNormal,
                true,
            ),
        };

        let enc_blocks = (0..cfg.enc_depth)
            .map(|i| {
                b.block(
                    &format!("enc.block{i}"),
                    cfg.enc_channels,
                    cfg.heads,
                    cfg.mlp_ratio,
                )
            })
            .collect();
        let enc_norm = b.norm("enc.norm", cfg.enc_channels);
        let proj = b.linear("enc.proj", cfg.enc_channels, cfg.dec_channels);
        let occ_token = b.tensor(
            "occlusion_token".into(),
            vec![1, cfg.dec_channels],
            Init::TruncNormal,
            false,
        );
        let dec_blocks = (0..cfg.dec_depth)
            .map(|i| {
                b.block(
                    &format!("dec.block{i}"),
                    cfg.dec_channels,
                    cfg.heads,
                    cfg.mlp_ratio,
                )
            })
            .collect();

        Ok(Self {
            cfg: cfg.clone(),
            names: b.names,
            values: b.values,
            decay: b.decay,
            layout: Layout {
                embed,
                pos_enc,
                pos_dec,
                enc_blocks,
                enc_norm,
                proj,
                occ_token,
                dec_blocks,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Number of registered parameter tensors.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn value(&self, index: usize) -> &Tensor<T> {
        &self.values[index]
    }

    /// Whether parameter `index` receives decoupled weight decay
    /// (weight matrices do; biases, norm parameters and the occlusion
    /// token do not).
    pub fn decays(&self, index: usize) -> bool {
        self.decay[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    pub fn position_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Replaces parameter `index`; the shape must match.
    pub fn set_value(&mut self, index: usize, value: Tensor<T>) -> Result<(), ModelError> {
        let len = self.values.len();
        let current = self
            .values
            .get(index)
            .ok_or(ModelError::ParamOutOfRange { index, len })?;
        if current.shape() != value.shape() {
            return Err(ModelError::ParamShapeMismatch {
                name: self.names[index].clone(),
                expected: current.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        self.values[index] = value.detached();
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.values[index]
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Records every parameter on `tape` as a differentiable leaf, in
    /// registry order, and returns the bound view used by the forward
    /// functions and for gradient lookup.
    pub fn bind<'w>(&'w self, tape: &mut Tape<T>) -> BoundModel<'w, T> {
        let params = self.values.iter().map(|v| tape.param(v)).collect();
        BoundModel::new(self, params)
    }

    /// A bound view over the raw parameter values: forward passes
    /// through it compute without recording (inference).
    pub fn frozen(&self) -> BoundModel<'_, T> {
        BoundModel::new(self, self.values.to_vec())
    }

    /// All parameters concatenated in registry order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for v in &self.values {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Overwrites every parameter from a flat vector in registry order.
    pub fn set_from_flat(&mut self, flat: &[T]) -> Result<(), ModelError> {
        if flat.len() != self.param_count() {
            return Err(ModelError::FlatSizeMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for i in 0..self.values.len() {
            let shape = self.values[i].shape().to_vec();
            let n = self.values[i].numel();
            let slice = flat[offset..offset + n].to_vec();
            self.values[i] = Tensor::from_vec(shape, slice).expect("shape preserved");
            offset += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_paper_configs_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
    }

    #[test]
    fn config_rejects_channel_patch_mismatch() {
        let mut cfg = ModelConfig::desk();
        cfg.dec_channels = 47;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut cfg = ModelConfig::desk();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = ModelConfig::desk();
        let a = ModelWeights::<f32>::init(&cfg, 3).unwrap();
        let b = ModelWeights::<f32>::init(&cfg, 3).unwrap();
        for ((na, va), (nb, vb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va.data(), vb.data(), "parameter {na} must match");
        }
        let c = ModelWeights::<f32>::init(&cfg, 4).unwrap();
        assert!(
            a.iter().zip(c.iter()).any(|((_, va), (_, vc))| va.data() != vc.data()),
            "different seeds must give different weights"
        );
    }

    #[test]
    fn decay_mask_excludes_biases_norms_and_token() {
        let w = ModelWeights::<f32>::init(&ModelConfig::desk(), 0).unwrap();
        for i in 0..w.len() {
            let name = w.name(i);
            let expected = name.ends_with(".weight");
            assert_eq!(
                w.decays(i),
                expected,
                "decay flag for `{name}` should be {expected}"
            );
            if w.decays(i) {
                assert_eq!(w.value(i).rank(), 2, "decayed `{name}` must be a matrix");
            }
        }
        let token = w.position_of("occlusion_token").unwrap();
        assert!(!w.decays(token));
    }

    #[test]
    fn truncated_init_stays_within_two_sigma() {
        // Weight matrices and the occlusion token draw from the
        // truncated normal; biases are zero and norm scales are one.
        let cfg = ModelConfig::desk();
        let w = ModelWeights::<f64>::init(&cfg, 1).unwrap();
        for (name, v) in w.iter() {
            if !(name.ends_with(".weight") || name == "occlusion_token") {
                continue;
            }
            for &x in v.data() {
                assert!(
                    x.abs() <= 2.0 * cfg.init_std + 1e-12,
                    "`{name}` holds out-of-range init value {x}"
                );
            }
        }
    }

    #[test]
    fn zero_init_ffn_zeroes_exactly_the_ffn_output_projections() {
        let cfg = ModelConfig {
            zero_init_ffn: true,
            ..ModelConfig::desk()
        };
        let w = ModelWeights::<f64>::init(&cfg, 1).unwrap();
        for (name, v) in w.iter() {
            let all_zero = v.data().iter().all(|&x| x == 0.0);
            if name.ends_with("ffn.fc2.weight") {
                assert!(all_zero, "`{name}` should start at zero");
            } else if name.ends_with(".weight") {
                assert!(!all_zero, "`{name}` should not start at zero");
            }
        }
    }

    #[test]
    fn flatten_roundtrips() {
        let mut w = ModelWeights::<f64>::init(&ModelConfig::desk(), 5).unwrap();
        let flat = w.flatten();
        assert_eq!(flat.len(), w.param_count());
        let mut doubled = flat.clone();
        for x in &mut doubled {
            *x *= 2.0;
        }
        w.set_from_flat(&doubled).unwrap();
        assert_eq!(w.flatten(), doubled);
    }
}
