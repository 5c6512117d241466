//! The assembled network and its reverse-mode gradients.
//!
//! Audio path: 2 conv blocks (3x3 same, ReLU, x2 temporal max-pool), a
//! flatten projection to `d_model`, sinusoidal positions, pre-norm
//! transformer encoder. Text path: embedding at `text_enc_dim`, pre-norm
//! transformer encoder, linear projection to `d_model`. Shared decoder:
//! pre-norm transformer with causal self-attention and cross-attention over
//! the encoder states; the generator multiplies by the transpose of the
//! token embedding (tied weights).

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioFeatureSequence;
use crate::text::{TargetSequence, EOS_ID, PAD_ID};

use super::layers::*;
use super::store::{GradStore, Init, ParamGroup, ParamStore, StoreBuilder, TensorId};
use super::{EncodedSequence, ModelConfig, ModelError, Scalar, SourceKind};

struct EncLayerIds {
    ln1: LayerNormIds,
    attn: AttnIds,
    ln2: LayerNormIds,
    ffn: FfnIds,
}

struct DecLayerIds {
    ln1: LayerNormIds,
    self_attn: AttnIds,
    ln2: LayerNormIds,
    cross_attn: AttnIds,
    ln3: LayerNormIds,
    ffn: FfnIds,
}

struct NetLayout {
    conv1: ConvIds,
    conv2: ConvIds,
    cnn_proj: LinearIds,
    audio_layers: Vec<EncLayerIds>,
    audio_final_ln: LayerNormIds,
    text_emb: TensorId,
    text_layers: Vec<EncLayerIds>,
    text_final_ln: LayerNormIds,
    text_proj: LinearIds,
    tok_emb: TensorId,
    dec_layers: Vec<DecLayerIds>,
    dec_final_ln: LayerNormIds,
}

fn linear(
    b: &mut StoreBuilder,
    name: &str,
    group: ParamGroup,
    d_in: usize,
    d_out: usize,
    bias: bool,
) -> LinearIds {
    let w = b.tensor(
        &format!("{name}.w"),
        group,
        &[d_in, d_out],
        Init::GlorotUniform { fan_in: d_in, fan_out: d_out },
    );
    let b_id = bias.then(|| b.tensor(&format!("{name}.b"), group, &[d_out], Init::Zeros));
    LinearIds { w, b: b_id }
}

fn layer_norm(b: &mut StoreBuilder, name: &str, group: ParamGroup, d: usize) -> LayerNormIds {
    LayerNormIds {
        g: b.tensor(&format!("{name}.g"), group, &[d], Init::Ones),
        b: b.tensor(&format!("{name}.b"), group, &[d], Init::Zeros),
    }
}

fn attention(b: &mut StoreBuilder, name: &str, group: ParamGroup, d: usize) -> AttnIds {
    AttnIds {
        q: linear(b, &format!("{name}.q"), group, d, d, true),
        k: linear(b, &format!("{name}.k"), group, d, d, true),
        v: linear(b, &format!("{name}.v"), group, d, d, true),
        o: linear(b, &format!("{name}.o"), group, d, d, true),
    }
}

fn ffn(b: &mut StoreBuilder, name: &str, group: ParamGroup, d: usize, hidden: usize) -> FfnIds {
    FfnIds {
        lin1: linear(b, &format!("{name}.lin1"), group, d, hidden, true),
        lin2: linear(b, &format!("{name}.lin2"), group, hidden, d, true),
    }
}

fn enc_layer(
    b: &mut StoreBuilder,
    name: &str,
    group: ParamGroup,
    d: usize,
    hidden: usize,
) -> EncLayerIds {
    EncLayerIds {
        ln1: layer_norm(b, &format!("{name}.ln1"), group, d),
        attn: attention(b, &format!("{name}.attn"), group, d),
        ln2: layer_norm(b, &format!("{name}.ln2"), group, d),
        ffn: ffn(b, &format!("{name}.ffn"), group, d, hidden),
    }
}

fn dec_layer(b: &mut StoreBuilder, name: &str, d: usize, hidden: usize) -> DecLayerIds {
    let g = ParamGroup::Decoder;
    DecLayerIds {
        ln1: layer_norm(b, &format!("{name}.ln1"), g, d),
        self_attn: attention(b, &format!("{name}.self_attn"), g, d),
        ln2: layer_norm(b, &format!("{name}.ln2"), g, d),
        cross_attn: attention(b, &format!("{name}.cross_attn"), g, d),
        ln3: layer_norm(b, &format!("{name}.ln3"), g, d),
        ffn: ffn(b, &format!("{name}.ffn"), g, d, hidden),
    }
}

/// Model source input: extracted audio features or source-side token ids.
#[derive(Debug, Clone)]
pub enum InstanceSource<F: Scalar> {
    Audio(Array2<F>),
    Text(Vec<u32>),
}

impl<F: Scalar> InstanceSource<F> {
    pub fn from_features(f: &AudioFeatureSequence) -> Self {
        InstanceSource::Audio(f.frames.mapv(|v| F::from_f64(v as f64)))
    }
}

pub struct AtatModel<F: Scalar> {
    cfg: ModelConfig,
    store: ParamStore<F>,
    layout: NetLayout,
    pe_d: Array2<F>,
    pe_text: Array2<F>,
}

impl<F: Scalar> AtatModel<F> {
    /// Deterministic seeded initialization: scaled-uniform matrices, zero
    /// biases, unit layer-norm gains, sinusoidal (non-trainable) positions.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut b = StoreBuilder::new();
        let d = cfg.d_model;
        let (c1, c2) = (cfg.cnn_channels[0], cfg.cnn_channels[1]);

        let conv1 = ConvIds {
            w: b.tensor(
                "audio_cnn.conv1.w",
                ParamGroup::AudioCnn,
                &[9, c1],
                Init::GlorotUniform { fan_in: 9, fan_out: 9 * c1 },
            ),
            b: b.tensor("audio_cnn.conv1.b", ParamGroup::AudioCnn, &[c1], Init::Zeros),
        };
        let conv2 = ConvIds {
            w: b.tensor(
                "audio_cnn.conv2.w",
                ParamGroup::AudioCnn,
                &[9 * c1, c2],
                Init::GlorotUniform { fan_in: 9 * c1, fan_out: 9 * c2 },
            ),
            b: b.tensor("audio_cnn.conv2.b", ParamGroup::AudioCnn, &[c2], Init::Zeros),
        };
        let cnn_proj =
            linear(&mut b, "audio_cnn.proj", ParamGroup::AudioCnn, c2 * cfg.n_mels, d, true);

        let audio_layers = (0..cfg.audio_enc_layers)
            .map(|i| {
                enc_layer(&mut b, &format!("audio_enc.l{i}"), ParamGroup::AudioEncoder, d, cfg.ffn_dim)
            })
            .collect();
        let audio_final_ln = layer_norm(&mut b, "audio_enc.final_ln", ParamGroup::AudioEncoder, d);

        let text_emb = b.tensor(
            "text_enc.emb",
            ParamGroup::TextEncoder,
            &[cfg.vocab_size, cfg.text_enc_dim],
            Init::GlorotUniform { fan_in: cfg.vocab_size, fan_out: cfg.text_enc_dim },
        );
        let text_layers = (0..cfg.text_enc_layers)
            .map(|i| {
                enc_layer(
                    &mut b,
                    &format!("text_enc.l{i}"),
                    ParamGroup::TextEncoder,
                    cfg.text_enc_dim,
                    cfg.ffn_dim,
                )
            })
            .collect();
        let text_final_ln =
            layer_norm(&mut b, "text_enc.final_ln", ParamGroup::TextEncoder, cfg.text_enc_dim);
        // Pure linear map so projections add: proj(a + b) == proj(a) + proj(b).
        let text_proj =
            linear(&mut b, "text_proj", ParamGroup::TextProjection, cfg.text_enc_dim, d, false);

        let tok_emb = b.tensor(
            "tok_emb",
            ParamGroup::TokenEmbedding,
            &[cfg.vocab_size, d],
            Init::GlorotUniform { fan_in: cfg.vocab_size, fan_out: d },
        );
        let dec_layers = (0..cfg.dec_layers)
            .map(|i| dec_layer(&mut b, &format!("dec.l{i}"), d, cfg.ffn_dim))
            .collect();
        let dec_final_ln = layer_norm(&mut b, "dec.final_ln", ParamGroup::Decoder, d);

        let layout = NetLayout {
            conv1,
            conv2,
            cnn_proj,
            audio_layers,
            audio_final_ln,
            text_emb,
            text_layers,
            text_final_ln,
            text_proj,
            tok_emb,
            dec_layers,
            dec_final_ln,
        };
        let store = b.finish(seed);
        let pe_d = positional_table(cfg.max_positions, d);
        let pe_text = positional_table(cfg.max_positions, cfg.text_enc_dim);
        Ok(Self { cfg, store, layout, pe_d, pe_text })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.total_params()
    }

    /// The generator weight is the embedding matrix itself: both views
    /// resolve to the same storage.
    pub fn embedding_storage(&self) -> &[F] {
        self.store.slice(self.layout.tok_emb)
    }

    pub fn generator_storage(&self) -> &[F] {
        self.store.slice(self.layout.tok_emb)
    }

    pub fn token_embedding_id(&self) -> TensorId {
        self.layout.tok_emb
    }

    pub fn text_embedding_id(&self) -> TensorId {
        self.layout.text_emb
    }

    /// Grow both vocabulary-indexed tensors (target embedding and text
    /// encoder embedding) to a larger vocabulary. New rows are marked as
    /// newly initialized and train at full rate under freezing.
    pub fn grow_vocab(&mut self, new_vocab: usize, seed: u64) {
        assert!(new_vocab >= self.cfg.vocab_size);
        self.store.grow_rows(self.layout.tok_emb, new_vocab, seed);
        self.store.grow_rows(self.layout.text_emb, new_vocab, seed);
        self.cfg.vocab_size = new_vocab;
    }

    // ----- audio path -----

    /// Per-utterance, per-dim mean/variance normalization of the features.
    fn normalize_feats(&self, feats: &Array2<F>) -> Array2<F> {
        let (t, m) = feats.dim();
        let tn = F::from_f64(t as f64);
        let eps = F::from_f64(1e-5);
        let mut out = Array2::<F>::zeros((t, m));
        for j in 0..m {
            let mut mean = F::zero();
            for i in 0..t {
                mean = mean + feats[[i, j]];
            }
            mean = mean / tn;
            let mut var = F::zero();
            for i in 0..t {
                let c = feats[[i, j]] - mean;
                var = var + c * c;
            }
            var = var / tn;
            let istd = F::one() / (var + eps).sqrt();
            for i in 0..t {
                out[[i, j]] = (feats[[i, j]] - mean) * istd;
            }
        }
        out
    }

    pub fn audio_encode(&self, feats: &Array2<F>) -> Result<EncodedSequence<F>, ModelError> {
        self.audio_encode_cached(feats, None).map(|(e, _)| e)
    }

    fn audio_encode_cached(
        &self,
        feats: &Array2<F>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(EncodedSequence<F>, AudioCache<F>), ModelError> {
        let (t, m) = feats.dim();
        assert!(t >= 1, "empty feature sequence");
        if m != self.cfg.n_mels {
            return Err(ModelError::ConfigMismatch(format!(
                "expected {} mel bins, got {m}",
                self.cfg.n_mels
            )));
        }
        let normed = self.normalize_feats(feats);
        let x0 = normed.into_shape_with_order((1, t, m)).expect("reshape");

        let (c1_out, c1_cache) = conv3x3_relu_fwd(&self.store, self.layout.conv1, &x0);
        let (p1, arg1) = maxpool_t2_fwd(&c1_out);
        let t1 = p1.dim().1;
        let (c2_out, c2_cache) = conv3x3_relu_fwd(&self.store, self.layout.conv2, &p1);
        let (p2, arg2) = maxpool_t2_fwd(&c2_out);
        let (ch, t2, _) = p2.dim();
        debug_assert_eq!(t2, t.div_ceil(2).div_ceil(2));
        if t2 > self.cfg.max_positions {
            return Err(ModelError::SequenceTooLong { len: t2, max: self.cfg.max_positions });
        }

        // (ch, t2, m) -> (t2, ch * m)
        let mut flat = Array2::<F>::zeros((t2, ch * m));
        for c in 0..ch {
            for ti in 0..t2 {
                for mi in 0..m {
                    flat[[ti, c * m + mi]] = p2[[c, ti, mi]];
                }
            }
        }
        let mut x = linear_fwd(&self.store, self.layout.cnn_proj, &flat);
        for i in 0..t2 {
            for j in 0..self.cfg.d_model {
                x[[i, j]] = x[[i, j]] + self.pe_d[[i, j]];
            }
        }

        let mask = vec![true; t2];
        let mut layer_caches = Vec::with_capacity(self.layout.audio_layers.len());
        for l in &self.layout.audio_layers {
            let (y, cache) = self.enc_layer_fwd(l, &x, &mask, rng.as_deref_mut());
            x = y;
            layer_caches.push(cache);
        }
        let (states, final_ln) = ln_fwd(&self.store, self.layout.audio_final_ln, &x);

        Ok((
            EncodedSequence { states, source_kind: SourceKind::Audio, mask },
            AudioCache {
                c1_cache,
                arg1,
                t_in: t,
                t1,
                c2_cache,
                arg2,
                flat,
                layer_caches,
                final_ln,
            },
        ))
    }

    fn audio_backward(&self, cache: &AudioCache<F>, grads: &mut GradStore<F>, d_states: &Array2<F>) {
        let mut dx = ln_bwd(&self.store, grads, self.layout.audio_final_ln, &cache.final_ln, d_states);
        for (l, c) in self
            .layout
            .audio_layers
            .iter()
            .zip(&cache.layer_caches)
            .rev()
        {
            dx = self.enc_layer_bwd(l, c, grads, &dx);
        }
        // Positions are constant; gradient passes straight to the projection.
        let dflat = linear_bwd(&self.store, grads, self.layout.cnn_proj, &cache.flat, &dx);
        let (t2, chm) = dflat.dim();
        let m = self.cfg.n_mels;
        let ch = chm / m;
        let mut dp2 = Array3::<F>::zeros((ch, t2, m));
        for c in 0..ch {
            for ti in 0..t2 {
                for mi in 0..m {
                    dp2[[c, ti, mi]] = dflat[[ti, c * m + mi]];
                }
            }
        }
        let dc2 = maxpool_t2_bwd(&cache.arg2, cache.t1, &dp2);
        let dp1 = conv3x3_relu_bwd(
            &self.store,
            grads,
            self.layout.conv2,
            &cache.c2_cache,
            self.cfg.cnn_channels[0],
            &dc2,
        );
        let dc1 = maxpool_t2_bwd(&cache.arg1, cache.t_in, &dp1);
        let _dx0 = conv3x3_relu_bwd(&self.store, grads, self.layout.conv1, &cache.c1_cache, 1, &dc1);
    }

    // ----- text path -----

    pub fn text_encode(&self, ids: &[u32]) -> Result<EncodedSequence<F>, ModelError> {
        self.text_encode_cached(ids, None).map(|(e, _)| e)
    }

    fn text_encode_cached(
        &self,
        ids: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(EncodedSequence<F>, TextCache<F>), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::BadTarget("empty text source".into()));
        }
        if ids.len() > self.cfg.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: self.cfg.max_positions,
            });
        }
        self.check_ids(ids)?;
        let mut x = embed_fwd(&self.store, self.layout.text_emb, ids);
        let e_dim = self.cfg.text_enc_dim;
        for i in 0..ids.len() {
            for j in 0..e_dim {
                x[[i, j]] = x[[i, j]] + self.pe_text[[i, j]];
            }
        }
        let mask = vec![true; ids.len()];
        let mut layer_caches = Vec::with_capacity(self.layout.text_layers.len());
        for l in &self.layout.text_layers {
            let (y, cache) = self.enc_layer_fwd(l, &x, &mask, rng.as_deref_mut());
            x = y;
            layer_caches.push(cache);
        }
        let (ln_out, final_ln) = ln_fwd(&self.store, self.layout.text_final_ln, &x);
        let states = linear_fwd(&self.store, self.layout.text_proj, &ln_out);
        Ok((
            EncodedSequence { states, source_kind: SourceKind::Text, mask },
            TextCache { ids: ids.to_vec(), layer_caches, final_ln, ln_out },
        ))
    }

    fn text_backward(&self, cache: &TextCache<F>, grads: &mut GradStore<F>, d_states: &Array2<F>) {
        let d_ln_out = linear_bwd(&self.store, grads, self.layout.text_proj, &cache.ln_out, d_states);
        let mut dx = ln_bwd(&self.store, grads, self.layout.text_final_ln, &cache.final_ln, &d_ln_out);
        for (l, c) in self.layout.text_layers.iter().zip(&cache.layer_caches).rev() {
            dx = self.enc_layer_bwd(l, c, grads, &dx);
        }
        embed_bwd(grads, self.layout.text_emb, &cache.ids, &dx);
    }

    // ----- shared encoder layer -----

    fn enc_layer_fwd(
        &self,
        ids: &EncLayerIds,
        x: &Array2<F>,
        mask: &[bool],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<F>, EncLayerCache<F>) {
        let p = self.cfg.dropout;
        let (ln1_out, ln1) = ln_fwd(&self.store, ids.ln1, x);
        let (mut a, attn) = attn_fwd(&self.store, &ids.attn, &ln1_out, &ln1_out, self.cfg.heads, false, mask);
        let drop1 = dropout_fwd(&mut a, p, rng.as_deref_mut());
        let x1 = x + &a;
        let (ln2_out, ln2) = ln_fwd(&self.store, ids.ln2, &x1);
        let (mut f, ffn) = ffn_fwd(&self.store, &ids.ffn, &ln2_out);
        let drop2 = dropout_fwd(&mut f, p, rng);
        let y = &x1 + &f;
        (y, EncLayerCache { ln1, ln1_out, attn, drop1, ln2, ln2_out, ffn, drop2 })
    }

    fn enc_layer_bwd(
        &self,
        ids: &EncLayerIds,
        c: &EncLayerCache<F>,
        grads: &mut GradStore<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        let p = self.cfg.dropout;
        // y = x1 + Drop(FFN(LN2(x1)))
        let mut df = dy.clone();
        dropout_bwd(&c.drop2, p, &mut df);
        let d_ln2_out = ffn_bwd(&self.store, grads, &ids.ffn, &c.ffn, &c.ln2_out, &df);
        let mut dx1 = dy + &ln_bwd(&self.store, grads, ids.ln2, &c.ln2, &d_ln2_out);
        // x1 = x + Drop(Attn(LN1(x)))
        let mut da = dx1.clone();
        dropout_bwd(&c.drop1, p, &mut da);
        let (dq, dkv) = attn_bwd(
            &self.store,
            grads,
            &ids.attn,
            &c.attn,
            &c.ln1_out,
            &c.ln1_out,
            self.cfg.heads,
            &da,
        );
        let d_ln1_out = dq + dkv;
        dx1 += &ln_bwd(&self.store, grads, ids.ln1, &c.ln1, &d_ln1_out);
        dx1
    }

    // ----- decoder -----

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        for &t in ids {
            if t as usize >= self.cfg.vocab_size {
                return Err(ModelError::BadTarget(format!(
                    "token id {t} out of vocabulary ({})",
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn decoder_fwd(
        &self,
        enc: &EncodedSequence<F>,
        input_ids: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<F>, DecCache<F>), ModelError> {
        if input_ids.len() > self.cfg.max_positions {
            return Err(ModelError::SequenceTooLong {
                len: input_ids.len(),
                max: self.cfg.max_positions,
            });
        }
        self.check_ids(input_ids)?;
        let n = input_ids.len();
        let d = self.cfg.d_model;
        let mut x = embed_fwd(&self.store, self.layout.tok_emb, input_ids);
        for i in 0..n {
            for j in 0..d {
                x[[i, j]] = x[[i, j]] + self.pe_d[[i, j]];
            }
        }
        let self_mask = vec![true; n];
        let p = self.cfg.dropout;
        let mut layer_caches = Vec::with_capacity(self.layout.dec_layers.len());
        for ids in &self.layout.dec_layers {
            let (ln1_out, ln1) = ln_fwd(&self.store, ids.ln1, &x);
            let (mut a, self_attn) = attn_fwd(
                &self.store,
                &ids.self_attn,
                &ln1_out,
                &ln1_out,
                self.cfg.heads,
                true,
                &self_mask,
            );
            let drop1 = dropout_fwd(&mut a, p, rng.as_deref_mut());
            let x1 = &x + &a;

            let (ln2_out, ln2) = ln_fwd(&self.store, ids.ln2, &x1);
            let (mut cr, cross_attn) = attn_fwd(
                &self.store,
                &ids.cross_attn,
                &ln2_out,
                &enc.states,
                self.cfg.heads,
                false,
                &enc.mask,
            );
            let drop2 = dropout_fwd(&mut cr, p, rng.as_deref_mut());
            let x2 = &x1 + &cr;

            let (ln3_out, ln3) = ln_fwd(&self.store, ids.ln3, &x2);
            let (mut f, ffn) = ffn_fwd(&self.store, &ids.ffn, &ln3_out);
            let drop3 = dropout_fwd(&mut f, p, rng.as_deref_mut());
            let y = &x2 + &f;

            layer_caches.push(DecLayerCache {
                ln1,
                ln1_out,
                self_attn,
                drop1,
                ln2,
                ln2_out,
                cross_attn,
                drop2,
                ln3,
                ln3_out,
                ffn,
                drop3,
            });
            x = y;
        }
        let (h, final_ln) = ln_fwd(&self.store, self.layout.dec_final_ln, &x);
        Ok((h, DecCache { input_ids: input_ids.to_vec(), layer_caches, final_ln }))
    }

    fn decoder_bwd(
        &self,
        enc: &EncodedSequence<F>,
        cache: &DecCache<F>,
        grads: &mut GradStore<F>,
        dh: &Array2<F>,
    ) -> Array2<F> {
        let p = self.cfg.dropout;
        let mut d_enc = Array2::<F>::zeros(enc.states.dim());
        let mut dx = ln_bwd(&self.store, grads, self.layout.dec_final_ln, &cache.final_ln, dh);
        for (ids, c) in self.layout.dec_layers.iter().zip(&cache.layer_caches).rev() {
            // y = x2 + Drop(FFN(LN3(x2)))
            let mut df = dx.clone();
            dropout_bwd(&c.drop3, p, &mut df);
            let d_ln3_out = ffn_bwd(&self.store, grads, &ids.ffn, &c.ffn, &c.ln3_out, &df);
            let mut dx2 = &dx + &ln_bwd(&self.store, grads, ids.ln3, &c.ln3, &d_ln3_out);

            // x2 = x1 + Drop(CrossAttn(LN2(x1), enc))
            let mut dcr = dx2.clone();
            dropout_bwd(&c.drop2, p, &mut dcr);
            let (d_ln2_out, d_enc_part) = attn_bwd(
                &self.store,
                grads,
                &ids.cross_attn,
                &c.cross_attn,
                &c.ln2_out,
                &enc.states,
                self.cfg.heads,
                &dcr,
            );
            d_enc += &d_enc_part;
            let mut dx1 = &dx2 + &ln_bwd(&self.store, grads, ids.ln2, &c.ln2, &d_ln2_out);
            let _ = &mut dx2;

            // x1 = x + Drop(SelfAttn(LN1(x)))
            let mut da = dx1.clone();
            dropout_bwd(&c.drop1, p, &mut da);
            let (dq, dkv) = attn_bwd(
                &self.store,
                grads,
                &ids.self_attn,
                &c.self_attn,
                &c.ln1_out,
                &c.ln1_out,
                self.cfg.heads,
                &da,
            );
            let d_ln1_out = dq + dkv;
            dx1 += &ln_bwd(&self.store, grads, ids.ln1, &c.ln1, &d_ln1_out);
            dx = dx1;
        }
        embed_bwd(grads, self.layout.tok_emb, &cache.input_ids, &dx);
        d_enc
    }

    fn generator_logits(&self, h: &Array2<F>) -> Array2<F> {
        h.dot(&self.store.view2(self.layout.tok_emb).t())
    }

    /// Teacher-forced loss over an already-encoded source.
    ///
    /// Positions whose label is PAD are excluded from the mean; the loss is
    /// label-smoothed cross entropy with `eps` spread uniformly over the
    /// whole vocabulary. Returns the loss and per-position log-probs.
    pub fn forward_loss(
        &self,
        enc: &EncodedSequence<F>,
        target: &TargetSequence,
        eps: f64,
    ) -> Result<(f64, Array2<F>), ModelError> {
        let pass = self.forward_on_encoded(enc, target, eps)?;
        Ok((pass.loss, pass.log_probs))
    }

    fn forward_on_encoded(
        &self,
        enc: &EncodedSequence<F>,
        target: &TargetSequence,
        eps: f64,
    ) -> Result<EncodedPass<F>, ModelError> {
        validate_target(target)?;
        let input_ids = &target.tokens[..target.tokens.len() - 1];
        let labels = &target.tokens[1..];
        let (h, dec_cache) = self.decoder_fwd(enc, input_ids, None)?;
        let logits = self.generator_logits(&h);
        let (loss, log_probs, probs, n_valid) = smoothed_loss(&logits, labels, eps);
        Ok(EncodedPass {
            dec_cache,
            h,
            probs,
            labels: labels.to_vec(),
            n_valid,
            eps,
            loss,
            log_probs,
        })
    }

    /// Full forward for one training instance: encode the source, run the
    /// decoder, compute the smoothed loss.
    pub fn forward_instance(
        &self,
        source: &InstanceSource<F>,
        target: &TargetSequence,
        eps: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<InstancePass<F>, ModelError> {
        validate_target(target)?;
        let (enc, enc_cache) = match source {
            InstanceSource::Audio(feats) => {
                let (enc, c) = self.audio_encode_cached(feats, rng.as_deref_mut())?;
                (enc, EncCache::Audio(c))
            }
            InstanceSource::Text(ids) => {
                let (enc, c) = self.text_encode_cached(ids, rng.as_deref_mut())?;
                (enc, EncCache::Text(c))
            }
        };
        let input_ids = &target.tokens[..target.tokens.len() - 1];
        let labels = &target.tokens[1..];
        let (h, dec_cache) = self.decoder_fwd(&enc, input_ids, rng)?;
        let logits = self.generator_logits(&h);
        let (loss, log_probs, probs, n_valid) = smoothed_loss(&logits, labels, eps);
        Ok(InstancePass {
            enc,
            enc_cache,
            inner: EncodedPass {
                dec_cache,
                h,
                probs,
                labels: labels.to_vec(),
                n_valid,
                eps,
                loss,
                log_probs,
            },
        })
    }

    /// Reverse-mode gradients for one instance, accumulated into `grads`.
    pub fn backward_instance(&self, pass: &InstancePass<F>, grads: &mut GradStore<F>) {
        let p = &pass.inner;
        let (n, v) = p.probs.dim();
        let eps = F::from_f64(p.eps);
        let uniform = eps / F::from_f64(v as f64);
        let confident = F::one() - eps;
        let inv_valid = F::from_f64(1.0 / p.n_valid.max(1) as f64);

        // dlogits = (p - q) / n_valid on non-PAD positions.
        let mut dlogits = Array2::<F>::zeros((n, v));
        for i in 0..n {
            if p.labels[i] == PAD_ID {
                continue;
            }
            for j in 0..v {
                let mut q = uniform;
                if j as u32 == p.labels[i] {
                    q = q + confident;
                }
                dlogits[[i, j]] = (p.probs[[i, j]] - q) * inv_valid;
            }
        }

        // Generator (tied): logits = h . E^T.
        let emb = self.store.view2(self.layout.tok_emb);
        let dh = dlogits.dot(&emb);
        {
            let de = dlogits.t().dot(&p.h);
            let mut ge = grads.view2_mut(self.layout.tok_emb);
            ge += &de;
        }

        let d_enc = self.decoder_bwd(&pass.enc, &p.dec_cache, grads, &dh);
        match &pass.enc_cache {
            EncCache::Audio(c) => self.audio_backward(c, grads, &d_enc),
            EncCache::Text(c) => self.text_backward(c, grads, &d_enc),
        }
    }

    /// Log-probabilities of the next token given a decoding prefix.
    pub fn next_log_probs(
        &self,
        enc: &EncodedSequence<F>,
        prefix: &[u32],
    ) -> Result<Vec<f64>, ModelError> {
        let (h, _) = self.decoder_fwd(enc, prefix, None)?;
        let logits = self.generator_logits(&h);
        let last = logits.nrows() - 1;
        let row = logits.row(last);
        let mut max = F::neg_infinity();
        for &x in row.iter() {
            if x > max {
                max = x;
            }
        }
        let mut sum = F::zero();
        for &x in row.iter() {
            sum = sum + (x - max).exp();
        }
        let log_z = sum.to_f64().ln() + max.to_f64();
        Ok(row.iter().map(|&x| x.to_f64() - log_z).collect())
    }
}

fn validate_target(target: &TargetSequence) -> Result<(), ModelError> {
    if target.tokens.len() < 2 {
        return Err(ModelError::BadTarget("target needs at least BOS and EOS".into()));
    }
    let first = target.tokens[0];
    if first == PAD_ID || first == EOS_ID {
        return Err(ModelError::BadTarget("target must begin with a task BOS".into()));
    }
    if *target.tokens.last().unwrap() != EOS_ID {
        return Err(ModelError::BadTarget("target must end with EOS".into()));
    }
    Ok(())
}

/// Label-smoothed cross entropy. Returns (mean loss over non-PAD positions,
/// per-position log-probs, probs, n_valid).
fn smoothed_loss<F: Scalar>(
    logits: &Array2<F>,
    labels: &[u32],
    eps: f64,
) -> (f64, Array2<F>, Array2<F>, usize) {
    let (n, v) = logits.dim();
    debug_assert_eq!(n, labels.len());
    let mut log_probs = Array2::<F>::zeros((n, v));
    let mut probs = Array2::<F>::zeros((n, v));
    let uniform = eps / v as f64;
    let confident = 1.0 - eps;
    let mut total = 0.0f64;
    let mut n_valid = 0usize;
    for i in 0..n {
        let row = logits.row(i);
        let mut max = F::neg_infinity();
        for &x in row.iter() {
            if x > max {
                max = x;
            }
        }
        let mut sum = F::zero();
        for &x in row.iter() {
            sum = sum + (x - max).exp();
        }
        let log_z = F::from_f64(sum.to_f64().ln()) + max;
        let mut sum_logp = 0.0f64;
        for j in 0..v {
            let lp = row[j] - log_z;
            log_probs[[i, j]] = lp;
            probs[[i, j]] = lp.exp();
            sum_logp += lp.to_f64();
        }
        if labels[i] != PAD_ID {
            let gold_lp = log_probs[[i, labels[i] as usize]].to_f64();
            total += -(confident * gold_lp + uniform * sum_logp);
            n_valid += 1;
        }
    }
    let loss = if n_valid > 0 { total / n_valid as f64 } else { 0.0 };
    (loss, log_probs, probs, n_valid)
}

struct EncLayerCache<F: Scalar> {
    ln1: LnCache<F>,
    ln1_out: Array2<F>,
    attn: AttnCache<F>,
    drop1: DropoutCache,
    ln2: LnCache<F>,
    ln2_out: Array2<F>,
    ffn: FfnCache<F>,
    drop2: DropoutCache,
}

struct DecLayerCache<F: Scalar> {
    ln1: LnCache<F>,
    ln1_out: Array2<F>,
    self_attn: AttnCache<F>,
    drop1: DropoutCache,
    ln2: LnCache<F>,
    ln2_out: Array2<F>,
    cross_attn: AttnCache<F>,
    drop2: DropoutCache,
    ln3: LnCache<F>,
    ln3_out: Array2<F>,
    ffn: FfnCache<F>,
    drop3: DropoutCache,
}

struct AudioCache<F: Scalar> {
    c1_cache: ConvCache<F>,
    arg1: Vec<u8>,
    t_in: usize,
    t1: usize,
    c2_cache: ConvCache<F>,
    arg2: Vec<u8>,
    flat: Array2<F>,
    layer_caches: Vec<EncLayerCache<F>>,
    final_ln: LnCache<F>,
}

struct TextCache<F: Scalar> {
    ids: Vec<u32>,
    layer_caches: Vec<EncLayerCache<F>>,
    final_ln: LnCache<F>,
    ln_out: Array2<F>,
}

enum EncCache<F: Scalar> {
    Audio(AudioCache<F>),
    Text(TextCache<F>),
}

struct EncodedPass<F: Scalar> {
    dec_cache: DecCache<F>,
    h: Array2<F>,
    probs: Array2<F>,
    labels: Vec<u32>,
    n_valid: usize,
    eps: f64,
    pub loss: f64,
    pub log_probs: Array2<F>,
}

struct DecCache<F: Scalar> {
    input_ids: Vec<u32>,
    layer_caches: Vec<DecLayerCache<F>>,
    final_ln: LnCache<F>,
}

/// Everything needed to run the backward pass for one instance.
pub struct InstancePass<F: Scalar> {
    enc: EncodedSequence<F>,
    enc_cache: EncCache<F>,
    inner: EncodedPass<F>,
}

impl<F: Scalar> InstancePass<F> {
    pub fn loss(&self) -> f64 {
        self.inner.loss
    }

    pub fn log_probs(&self) -> &Array2<F> {
        &self.inner.log_probs
    }
}
