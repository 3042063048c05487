//! Forward computation over a bound parameter set.
//!
//! `BoundModel` holds one tensor per registered parameter: tape leaves
//! when produced by [`ModelWeights::bind`] (training), plain values when
//! produced by [`ModelWeights::frozen`] (inference — nothing is
//! recorded, because no input is attached to a tape).

use crate::geometry::OcclusionMask;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

use super::{BlockH, EmbedMlpH, LinearH, ModelError, ModelWeights, NormH, PosMlpH, LAYER_NORM_EPS};

/// A parameter set bound for one forward pass. See module docs.
pub struct BoundModel<'w, T> {
    weights: &'w ModelWeights<T>,
    params: Vec<Tensor<T>>,
}

impl<'w, T: Scalar> BoundModel<'w, T> {
    pub(super) fn new(weights: &'w ModelWeights<T>, params: Vec<Tensor<T>>) -> Self {
        Self { weights, params }
    }

    fn p(&self, index: usize) -> &Tensor<T> {
        &self.params[index]
    }

    /// The bound tensor for a named parameter; used to look up its
    /// gradient after `backward`.
    pub fn param(&self, index: usize) -> &Tensor<T> {
        self.p(index)
    }

    // -- small layers --------------------------------------------------

    fn linear(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        h: LinearH,
    ) -> Result<Tensor<T>, ModelError> {
        let y = tape.matmul(x, self.p(h.w))?;
        Ok(tape.add_row(&y, self.p(h.b))?)
    }

    fn mlp_two_layer(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        h: EmbedMlpH,
    ) -> Result<Tensor<T>, ModelError> {
        let a = tape.matmul(x, self.p(h.w1))?;
        let a = tape.add_row(&a, self.p(h.b1))?;
        let a = tape.gelu(&a)?;
        let b = tape.matmul(&a, self.p(h.w2))?;
        Ok(tape.add_row(&b, self.p(h.b2))?)
    }

    fn pos_mlp(
        &self,
        tape: &mut Tape<T>,
        seeds: &Tensor<T>,
        h: PosMlpH,
    ) -> Result<Tensor<T>, ModelError> {
        let a = tape.matmul(seeds, self.p(h.w1))?;
        let a = tape.add_row(&a, self.p(h.b1))?;
        let a = tape.gelu(&a)?;
        Ok(tape.matmul(&a, self.p(h.w2))?)
    }

    fn layer_norm(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        h: NormH,
    ) -> Result<Tensor<T>, ModelError> {
        Ok(tape.layer_norm(x, self.p(h.gamma), self.p(h.beta), LAYER_NORM_EPS)?)
    }

    /// Multi-head self-attention: per head, rows attend over
    /// `softmax(Q Kᵀ / √d)`, head outputs are concatenated and mixed by
    /// the output matrix. No biases anywhere in the attention path.
    fn attention(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        block: &BlockH,
    ) -> Result<Tensor<T>, ModelError> {
        let channels = x.shape()[1];
        let head_dim = channels / block.heads.len();
        let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
        let mut head_outputs = Vec::with_capacity(block.heads.len());
        for h in &block.heads {
            let q = tape.matmul(x, self.p(h.q))?;
            let k = tape.matmul(x, self.p(h.k))?;
            let v = tape.matmul(x, self.p(h.v))?;
            let kt = tape.transpose(&k)?;
            let scores = tape.matmul(&q, &kt)?;
            let scores = tape.scale(&scores, scale)?;
            let attn = tape.softmax_rows(&scores)?;
            head_outputs.push(tape.matmul(&attn, &v)?);
        }
        let refs: Vec<&Tensor<T>> = head_outputs.iter().collect();
        let concat = tape.concat(&refs, 1)?;
        Ok(tape.matmul(&concat, self.p(block.out))?)
    }

    /// Pre-norm block: `x + attn(LN(x))`, then `h + ffn(LN(h))`.
    fn block_forward(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        block: &BlockH,
    ) -> Result<Tensor<T>, ModelError> {
        let normed = self.layer_norm(tape, x, block.norm1)?;
        let attended = self.attention(tape, &normed, block)?;
        let h = tape.add(x, &attended)?;
        let normed = self.layer_norm(tape, &h, block.norm2)?;
        let ff = self.mlp_two_layer(tape, &normed, block.ffn)?;
        Ok(tape.add(&h, &ff)?)
    }

    /// Runs only the encoder block stack over token rows. Exposed so the
    /// relative arithmetic cost of the two stacks can be measured via
    /// `Tape::mac_count`.
    pub fn encoder_blocks(
        &self,
        tape: &mut Tape<T>,
        tokens: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        let mut x = tokens.clone();
        for block in &self.weights.layout().enc_blocks {
            x = self.block_forward(tape, &x, block)?;
        }
        Ok(x)
    }

    /// Runs only the decoder block stack over token rows.
    pub fn decoder_blocks(
        &self,
        tape: &mut Tape<T>,
        tokens: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        let mut x = tokens.clone();
        for block in &self.weights.layout().dec_blocks {
            x = self.block_forward(tape, &x, block)?;
        }
        Ok(x)
    }

    // -- embedding -----------------------------------------------------

    /// Per-patch feature: a shared point MLP (3 → hidden → channels)
    /// followed by a max-pool over the points of each patch, so the
    /// embedding is invariant to point order within a patch.
    ///
    /// `patches` is `(P, K, 3)` in patch-local offsets.
    pub fn patch_embed(
        &self,
        tape: &mut Tape<T>,
        patches: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        if !patches.all_finite() {
            return Err(ModelError::NonFiniteInput { op: "patch_embed" });
        }
        let (p, k) = (patches.shape()[0], patches.shape()[1]);
        let flat = tape.reshape(patches, vec![p * k, 3])?;
        let features = self.mlp_two_layer(tape, &flat, self.weights.layout().embed)?;
        let channels = features.shape()[1];
        let grouped = tape.reshape(&features, vec![p, k, channels])?;
        let (pooled, _argmax) = tape.max_reduce(&grouped, 1)?;
        Ok(pooled)
    }

    /// Position embedding for encoder tokens: seed coordinates through a
    /// bias-free-output MLP, so an all-zero weight state embeds every
    /// position to exactly zero.
    pub fn position_embedding_encoder(
        &self,
        tape: &mut Tape<T>,
        seeds: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        self.pos_mlp(tape, seeds, self.weights.layout().pos_enc)
    }

    /// Position embedding for decoder tokens (independent parameters,
    /// decoder width).
    pub fn position_embedding_decoder(
        &self,
        tape: &mut Tape<T>,
        seeds: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        self.pos_mlp(tape, seeds, self.weights.layout().pos_dec)
    }

    // -- encoder -------------------------------------------------------

    /// Encoder tokens before the channel projection: patch embeddings
    /// plus position embeddings, through the encoder blocks and the
    /// final layer norm. Shape `(V, enc_channels)`.
    ///
    /// These are the tokens pooled into a cloud-level feature for the
    /// linear evaluation protocol.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape<T>,
        patches: &Tensor<T>,
        seeds: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        let embedded = self.patch_embed(tape, patches)?;
        let pos = self.position_embedding_encoder(tape, seeds)?;
        let mut x = tape.add(&embedded, &pos)?;
        for block in &self.weights.layout().enc_blocks {
            x = self.block_forward(tape, &x, block)?;
        }
        Ok(self.layer_norm(tape, &x, self.weights.layout().enc_norm)?)
    }

    /// Full encoder: visible patches to decoder-width tokens,
    /// `(V, dec_channels)`.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        patches: &Tensor<T>,
        seeds: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        let tokens = self.encode_tokens(tape, patches, seeds)?;
        self.linear(tape, &tokens, self.weights.layout().proj)
    }

    // -- decoder -------------------------------------------------------

    /// Rebuilds the full-length token sequence: encoded visible tokens
    /// at their original patch indices, the shared occlusion token at
    /// every occluded index. Shape `(G, dec_channels)`.
    pub fn occlusion_sequence(
        &self,
        tape: &mut Tape<T>,
        encoded: &Tensor<T>,
        mask: &OcclusionMask,
    ) -> Result<Tensor<T>, ModelError> {
        let visible = mask.visible();
        if encoded.shape()[0] != visible.len() {
            return Err(ModelError::VisibleCountMismatch {
                expected: visible.len(),
                got: encoded.shape()[0],
            });
        }
        let token_row = visible.len();
        let stacked = tape.concat(&[encoded, self.p(self.weights.layout().occ_token)], 0)?;
        let mut map = vec![token_row; mask.groups()];
        for (rank, &g) in visible.iter().enumerate() {
            map[g] = rank;
        }
        Ok(tape.gather_rows(&stacked, &map)?)
    }

    /// Decoder: full-length sequence (visible tokens + occlusion tokens)
    /// plus decoder position embeddings for all `G` seeds, through the
    /// decoder blocks. No final norm. Shape `(G, dec_channels)`.
    pub fn decode(
        &self,
        tape: &mut Tape<T>,
        encoded: &Tensor<T>,
        mask: &OcclusionMask,
        all_seeds: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        if all_seeds.shape()[0] != mask.groups() {
            return Err(ModelError::MaskMismatch {
                mask_groups: mask.groups(),
                seeds: all_seeds.shape()[0],
            });
        }
        let sequence = self.occlusion_sequence(tape, encoded, mask)?;
        let pos = self.position_embedding_decoder(tape, all_seeds)?;
        let mut x = tape.add(&sequence, &pos)?;
        for block in &self.weights.layout().dec_blocks {
            x = self.block_forward(tape, &x, block)?;
        }
        Ok(x)
    }

    /// Reconstruction head: decoded tokens at occluded indices reshape
    /// into `patch_size` coordinate offsets each, then each offset is
    /// shifted by its patch seed, giving predicted absolute coordinates
    /// `(R * patch_size, 3)` ordered by ascending occluded index.
    pub fn reconstruct(
        &self,
        tape: &mut Tape<T>,
        decoded: &Tensor<T>,
        mask: &OcclusionMask,
        all_seeds: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        let occluded = mask.occluded();
        if occluded.is_empty() {
            return Err(ModelError::NoOccludedPatches);
        }
        if all_seeds.shape()[0] != mask.groups() {
            return Err(ModelError::MaskMismatch {
                mask_groups: mask.groups(),
                seeds: all_seeds.shape()[0],
            });
        }
        let channels = decoded.shape()[1];
        if channels % 3 != 0 {
            return Err(ModelError::ChannelPatchMismatch {
                dec_channels: channels,
                patch_points: channels / 3,
            });
        }
        let patch_points = channels / 3;
        let rows = tape.gather_rows(decoded, occluded)?;
        let offsets = tape.reshape(&rows, vec![occluded.len() * patch_points, 3])?;
        let repeat: Vec<usize> = occluded
            .iter()
            .flat_map(|&g| std::iter::repeat(g).take(patch_points))
            .collect();
        let seeds_repeated = tape.gather_rows(all_seeds, &repeat)?;
        Ok(tape.add(&offsets, &seeds_repeated)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{OcclusionMask, OcclusionStrategy};
    use crate::transformer::ModelConfig;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_points: 32,
            groups: 8,
            patch_size: 4,
            enc_channels: 16,
            dec_channels: 12,
            enc_depth: 2,
            dec_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            embed_hidden: 8,
            ..ModelConfig::desk()
        }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn patch_embedding_ignores_point_order_within_patch() {
        let cfg = tiny_config();
        let weights = ModelWeights::<f64>::init(&cfg, 7).unwrap();
        let model = weights.frozen();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = random_tensor(&mut rng, vec![3, cfg.patch_size, 3]);

        // Reverse the points of every patch.
        let mut permuted = patches.data().to_vec();
        for p in 0..3 {
            let base = p * cfg.patch_size * 3;
            let patch = &patches.data()[base..base + cfg.patch_size * 3];
            for (i, chunk) in patch.chunks(3).rev().enumerate() {
                permuted[base + i * 3..base + i * 3 + 3].copy_from_slice(chunk);
            }
        }
        let permuted = Tensor::from_vec(vec![3, cfg.patch_size, 3], permuted).unwrap();

        let mut tape = Tape::new();
        let a = model.patch_embed(&mut tape, &patches).unwrap();
        let b = model.patch_embed(&mut tape, &permuted).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(tape.is_empty(), "frozen forward must record nothing");
    }

    #[test]
    fn zeroed_position_mlp_embeds_everything_to_zero() {
        let cfg = tiny_config();
        let mut weights = ModelWeights::<f64>::init(&cfg, 7).unwrap();
        for name in ["pos_enc.fc1.weight", "pos_enc.fc1.bias", "pos_enc.fc2.weight"] {
            let i = weights.position_of(name).unwrap();
            let shape = weights.value(i).shape().to_vec();
            weights.set_value(i, Tensor::zeros(shape).unwrap()).unwrap();
        }
        let model = weights.frozen();
        let mut tape = Tape::new();
        let seeds = Tensor::from_rows3(&[[0.3, -0.2, 0.9], [1.0, 2.0, 3.0]]).unwrap();
        let pos = model.position_embedding_encoder(&mut tape, &seeds).unwrap();
        assert!(pos.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn occlusion_sequence_places_token_at_occluded_indices() {
        let cfg = tiny_config();
        let weights = ModelWeights::<f64>::init(&cfg, 2).unwrap();
        let model = weights.frozen();
        let mask = OcclusionMask::from_occluded(8, &[1, 4, 5], OcclusionStrategy::Random, 0.375)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let encoded = random_tensor(&mut rng, vec![5, cfg.dec_channels]);

        let mut tape = Tape::new();
        let seq = model.occlusion_sequence(&mut tape, &encoded, &mask).unwrap();
        assert_eq!(seq.shape(), &[8, cfg.dec_channels]);

        let token_index = weights.position_of("occlusion_token").unwrap();
        let token = weights.value(token_index).data();
        let c = cfg.dec_channels;
        let mut visible_rank = 0;
        for g in 0..8 {
            let row = &seq.data()[g * c..(g + 1) * c];
            if mask.occluded().contains(&g) {
                assert_eq!(row, token, "group {g} should hold the occlusion token");
            } else {
                let expected = &encoded.data()[visible_rank * c..(visible_rank + 1) * c];
                assert_eq!(row, expected, "group {g} should hold visible token {visible_rank}");
                visible_rank += 1;
            }
        }
    }

    #[test]
    fn occlusion_sequence_rejects_wrong_visible_count() {
        let cfg = tiny_config();
        let weights = ModelWeights::<f64>::init(&cfg, 2).unwrap();
        let model = weights.frozen();
        let mask =
            OcclusionMask::from_occluded(8, &[0, 1], OcclusionStrategy::Random, 0.25).unwrap();
        let mut tape = Tape::new();
        let encoded = Tensor::zeros(vec![4, cfg.dec_channels]).unwrap();
        let err = model
            .occlusion_sequence(&mut tape, &encoded, &mask)
            .unwrap_err();
        assert!(matches!(err, ModelError::VisibleCountMismatch { expected: 6, got: 4 }));
    }

    #[test]
    fn reconstruct_with_zero_decoded_returns_repeated_seeds() {
        let cfg = tiny_config();
        let weights = ModelWeights::<f64>::init(&cfg, 2).unwrap();
        let model = weights.frozen();
        let mask =
            OcclusionMask::from_occluded(4, &[0, 3], OcclusionStrategy::Random, 0.5).unwrap();
        let seeds = Tensor::from_rows3(&[
            [0.0, 0.0, 0.5],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [-1.0, -1.0, -1.0],
        ])
        .unwrap();
        let decoded = Tensor::zeros(vec![4, cfg.dec_channels]).unwrap();
        let mut tape = Tape::new();
        let pred = model.reconstruct(&mut tape, &decoded, &mask, &seeds).unwrap();
        assert_eq!(pred.shape(), &[2 * cfg.patch_size, 3]);
        for i in 0..cfg.patch_size {
            assert_eq!(&pred.data()[i * 3..i * 3 + 3], &[0.0, 0.0, 0.5]);
        }
        for i in cfg.patch_size..2 * cfg.patch_size {
            assert_eq!(&pred.data()[i * 3..i * 3 + 3], &[-1.0, -1.0, -1.0]);
        }
    }

    #[test]
    fn reconstruct_requires_an_occluded_patch() {
        let cfg = tiny_config();
        let weights = ModelWeights::<f64>::init(&cfg, 2).unwrap();
        let model = weights.frozen();
        let mask = OcclusionMask::from_occluded(4, &[], OcclusionStrategy::Random, 0.0).unwrap();
        let seeds = Tensor::zeros(vec![4, 3]).unwrap();
        let decoded = Tensor::zeros(vec![4, cfg.dec_channels]).unwrap();
        let mut tape = Tape::new();
        let err = model
            .reconstruct(&mut tape, &decoded, &mask, &seeds)
            .unwrap_err();
        assert!(matches!(err, ModelError::NoOccludedPatches));
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = tiny_config();
        let weights = ModelWeights::<f64>::init(&cfg, 11).unwrap();
        let model = weights.frozen();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patches = random_tensor(&mut rng, vec![6, cfg.patch_size, 3]);
        let seeds = random_tensor(&mut rng, vec![6, 3]);

        let mut tape = Tape::new();
        let tokens = model.encode_tokens(&mut tape, &patches, &seeds).unwrap();
        assert_eq!(tokens.shape(), &[6, cfg.enc_channels]);
        let encoded = model.encode(&mut tape, &patches, &seeds).unwrap();
        assert_eq!(encoded.shape(), &[6, cfg.dec_channels]);

        let mut tape2 = Tape::new();
        let encoded2 = model.encode(&mut tape2, &patches, &seeds).unwrap();
        assert_eq!(encoded.data(), encoded2.data(), "inference must be deterministic");
    }

    #[test]
    fn gradients_flow_to_every_parameter() {
        // One full forward (encode → decode → reconstruct → pooled mean)
        // must leave no parameter with a missing or all-zero gradient:
        // every registered tensor participates in the computation.
        let cfg = tiny_config();
        let weights = ModelWeights::<f64>::init(&cfg, 13).unwrap();
        let mut tape = Tape::new();
        let model = weights.bind(&mut tape);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask =
            OcclusionMask::from_occluded(8, &[2, 5, 6], OcclusionStrategy::Random, 0.375).unwrap();
        let visible_patches = random_tensor(&mut rng, vec![5, cfg.patch_size, 3]);
        let visible_seeds = random_tensor(&mut rng, vec![5, 3]);
        let all_seeds = random_tensor(&mut rng, vec![8, 3]);

        let encoded = model.encode(&mut tape, &visible_patches, &visible_seeds).unwrap();
        let decoded = model.decode(&mut tape, &encoded, &mask, &all_seeds).unwrap();
        let pred = model.reconstruct(&mut tape, &decoded, &mask, &all_seeds).unwrap();
        let flat = tape.reshape(&pred, vec![pred.numel()]).unwrap();
        let loss = tape.mean_reduce(&flat, 0).unwrap();

        let grads = tape.backward(&loss).unwrap();
        for i in 0..weights.len() {
            let g = grads
                .get(model.param(i))
                .unwrap_or_else(|| panic!("missing gradient for `{}`", weights.name(i)));
            assert!(
                g.data().iter().any(|&x| x != 0.0),
                "gradient for `{}` is identically zero",
                weights.name(i)
            );
        }
    }
}
