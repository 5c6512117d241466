//! Flat parameter storage. Every trainable tensor lives in one contiguous
//! arena with a name, a group tag, and a shape; layers hold `TensorId`
//! handles. This keeps the optimizer, checkpointing, freezing, and
//! finite-difference probing uniform, and makes weight tying literal: the
//! generator and the token embedding hold the same `TensorId`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::{derive_seed, rng_from_seed};

use super::Scalar;

/// Named parameter groups, each carrying a learning-rate multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    AudioCnn,
    AudioEncoder,
    TextEncoder,
    TextProjection,
    TokenEmbedding,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::AudioCnn,
        ParamGroup::AudioEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::TextProjection,
        ParamGroup::TokenEmbedding,
        ParamGroup::Decoder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::AudioCnn => "audio_cnn",
            ParamGroup::AudioEncoder => "audio_encoder",
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::TextProjection => "text_projection",
            ParamGroup::TokenEmbedding => "token_embedding",
            ParamGroup::Decoder => "decoder",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|g| g.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct TensorMeta {
    pub name: String,
    pub group: ParamGroup,
    pub offset: usize,
    /// Row-major; rank 1 (biases) or 2 (matrices).
    pub shape: Vec<usize>,
}

impl TensorMeta {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("tensor {} has unsupported rank", self.name),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layout {
    metas: Vec<TensorMeta>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl Layout {
    pub fn metas(&self) -> &[TensorMeta] {
        &self.metas
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn meta(&self, id: TensorId) -> &TensorMeta {
        &self.metas[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<TensorId> {
        self.by_name.get(name).map(|&i| TensorId(i))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
    GlorotUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

/// Registers tensors, then initializes them all from a seed.
pub struct StoreBuilder {
    metas: Vec<TensorMeta>,
    inits: Vec<Init>,
    total: usize,
}

impl StoreBuilder {
    pub fn new() -> Self {
        Self { metas: Vec::new(), inits: Vec::new(), total: 0 }
    }

    pub fn tensor(&mut self, name: &str, group: ParamGroup, shape: &[usize], init: Init) -> TensorId {
        let meta = TensorMeta {
            name: name.to_string(),
            group,
            offset: self.total,
            shape: shape.to_vec(),
        };
        self.total += meta.len();
        self.metas.push(meta);
        self.inits.push(init);
        TensorId(self.metas.len() - 1)
    }

    pub fn finish<F: Scalar>(self, seed: u64) -> ParamStore<F> {
        let by_name = self
            .metas
            .iter()
            .enumerate()
            .map(|(i, m)| (m.name.clone(), i))
            .collect();
        let layout = Arc::new(Layout { metas: self.metas, by_name, total: self.total });
        let mut data = vec![F::zero(); layout.total];
        for (meta, init) in layout.metas.iter().zip(&self.inits) {
            init_tensor(&mut data[meta.offset..meta.offset + meta.len()], *init, seed, &meta.name);
        }
        ParamStore {
            layout,
            data,
            multipliers: BTreeMap::new(),
            new_rows: HashMap::new(),
        }
    }
}

fn init_tensor<F: Scalar>(slot: &mut [F], init: Init, seed: u64, name: &str) {
    match init {
        Init::Zeros => slot.iter_mut().for_each(|v| *v = F::zero()),
        Init::Ones => slot.iter_mut().for_each(|v| *v = F::one()),
        Init::GlorotUniform { fan_in, fan_out } => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = rng_from_seed(derive_seed(seed, name));
            for v in slot.iter_mut() {
                *v = F::from_f64(rng.gen_range(-a..a));
            }
        }
    }
}

/// All trainable tensors plus per-group learning-rate multipliers and the
/// watermarks that mark freshly grown embedding rows.
#[derive(Debug, Clone)]
pub struct ParamStore<F: Scalar> {
    layout: Arc<Layout>,
    data: Vec<F>,
    /// Group -> learning-rate multiplier in [0, 1]; absent means 1.0.
    multipliers: BTreeMap<ParamGroup, f64>,
    /// Tensor index -> first row that counts as newly initialized (those
    /// rows always train at multiplier 1.0).
    new_rows: HashMap<usize, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn total_params(&self) -> usize {
        self.layout.total
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn slice(&self, id: TensorId) -> &[F] {
        let m = self.layout.meta(id);
        &self.data[m.offset..m.offset + m.len()]
    }

    pub fn slice_mut(&mut self, id: TensorId) -> &mut [F] {
        let m = self.layout.meta(id);
        let (o, l) = (m.offset, m.len());
        &mut self.data[o..o + l]
    }

    /// Rank-1 and rank-2 tensors both view as matrices (biases as 1 x n).
    pub fn view2(&self, id: TensorId) -> ArrayView2<'_, F> {
        let m = self.layout.meta(id);
        let (r, c) = m.rows_cols();
        ArrayView2::from_shape((r, c), self.slice(id)).expect("tensor view")
    }

    pub fn view2_mut(&mut self, id: TensorId) -> ArrayViewMut2<'_, F> {
        let m = self.layout.meta(id);
        let (r, c) = m.rows_cols();
        let (o, l) = (m.offset, m.len());
        ArrayViewMut2::from_shape((r, c), &mut self.data[o..o + l]).expect("tensor view")
    }

    pub fn multiplier(&self, g: ParamGroup) -> f64 {
        self.multipliers.get(&g).copied().unwrap_or(1.0)
    }

    pub fn set_multiplier(&mut self, g: ParamGroup, m: f64) {
        assert!((0.0..=1.0).contains(&m), "multiplier {m} out of [0,1]");
        self.multipliers.insert(g, m);
    }

    /// Effective learning-rate multiplier for a single flat parameter index
    /// inside a tensor: group multiplier, except newly grown rows which are
    /// always 1.0.
    pub fn effective_multiplier(&self, tensor_idx: usize, within: usize) -> f64 {
        let meta = &self.layout.metas[tensor_idx];
        if let Some(&first_new) = self.new_rows.get(&tensor_idx) {
            let (_, cols) = meta.rows_cols();
            if within / cols >= first_new {
                return 1.0;
            }
        }
        self.multiplier(meta.group)
    }

    pub fn first_new_row(&self, id: TensorId) -> Option<usize> {
        self.new_rows.get(&id.0).copied()
    }

    /// Grow a rank-2 tensor to `new_rows` rows (appending
    /// Glorot-initialized rows) and rebuild the arena. Existing values are
    /// preserved; the added rows are marked as newly initialized. Optimizer
    /// state must be created after any growth.
    pub fn grow_rows(&mut self, id: TensorId, new_rows: usize, seed: u64) {
        let old_meta = self.layout.meta(id).clone();
        assert_eq!(old_meta.shape.len(), 2, "can only grow matrices");
        let (old_r, cols) = (old_meta.shape[0], old_meta.shape[1]);
        assert!(new_rows >= old_r, "cannot shrink tensor {}", old_meta.name);
        if new_rows == old_r {
            return;
        }

        let mut metas = self.layout.metas.clone();
        metas[id.0].shape = vec![new_rows, cols];
        let mut offset = 0;
        for m in &mut metas {
            m.offset = offset;
            offset += m.len();
        }
        let by_name = metas
            .iter()
            .enumerate()
            .map(|(i, m)| (m.name.clone(), i))
            .collect();
        let new_layout = Arc::new(Layout { metas, by_name, total: offset });

        let mut data = vec![F::zero(); offset];
        for (i, new_meta) in new_layout.metas.iter().enumerate() {
            let old_meta = &self.layout.metas[i];
            let src = &self.data[old_meta.offset..old_meta.offset + old_meta.len()];
            data[new_meta.offset..new_meta.offset + old_meta.len()].copy_from_slice(src);
        }
        // Fresh rows get their own seeded init, keyed by the grown size so
        // repeated growth stays deterministic.
        let grown = new_layout.meta(id);
        let fresh = &mut data
            [grown.offset + old_r * cols..grown.offset + new_rows * cols];
        init_tensor(
            fresh,
            Init::GlorotUniform { fan_in: new_rows, fan_out: cols },
            seed,
            &format!("{}@grow{}", grown.name, new_rows),
        );

        // Keep the earliest watermark if this tensor grew before.
        let watermark = self.new_rows.get(&id.0).copied().unwrap_or(old_r);
        self.new_rows.insert(id.0, watermark);
        self.layout = new_layout;
        self.data = data;
    }

    /// Mark every current row of every tensor as pretrained (clears growth
    /// watermarks). Used when loading a checkpoint.
    pub fn clear_new_rows(&mut self) {
        self.new_rows.clear();
    }

    pub fn zero_grads(&self) -> GradStore<F> {
        GradStore { layout: Arc::clone(&self.layout), data: vec![F::zero(); self.layout.total] }
    }
}

/// Gradient arena with the same layout as its [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradStore<F: Scalar> {
    layout: Arc<Layout>,
    data: Vec<F>,
}

impl<F: Scalar> GradStore<F> {
    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn slice(&self, id: TensorId) -> &[F] {
        let m = self.layout.meta(id);
        &self.data[m.offset..m.offset + m.len()]
    }

    pub fn slice_mut(&mut self, id: TensorId) -> &mut [F] {
        let m = self.layout.meta(id);
        let (o, l) = (m.offset, m.len());
        &mut self.data[o..o + l]
    }

    pub fn view2_mut(&mut self, id: TensorId) -> ArrayViewMut2<'_, F> {
        let m = self.layout.meta(id);
        let (r, c) = m.rows_cols();
        let (o, l) = (m.offset, m.len());
        ArrayViewMut2::from_shape((r, c), &mut self.data[o..o + l]).expect("grad view")
    }

    /// Elementwise accumulate another gradient set.
    pub fn add_assign(&mut self, other: &GradStore<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_store(seed: u64) -> ParamStore<f64> {
        let mut b = StoreBuilder::new();
        b.tensor("emb", ParamGroup::TokenEmbedding, &[4, 3], Init::GlorotUniform { fan_in: 4, fan_out: 3 });
        b.tensor("w", ParamGroup::Decoder, &[3, 2], Init::GlorotUniform { fan_in: 3, fan_out: 2 });
        b.tensor("b", ParamGroup::Decoder, &[2], Init::Zeros);
        b.finish(seed)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = small_store(7);
        let b = small_store(7);
        let c = small_store(8);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn biases_start_at_zero() {
        let s = small_store(1);
        let id = s.layout().id_by_name("b").unwrap();
        assert!(s.slice(id).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grow_preserves_old_rows_and_marks_new_ones() {
        let mut s = small_store(3);
        let emb = s.layout().id_by_name("emb").unwrap();
        let w = s.layout().id_by_name("w").unwrap();
        let emb_before = s.slice(emb).to_vec();
        let w_before = s.slice(w).to_vec();

        s.grow_rows(emb, 6, 99);
        assert_eq!(s.layout().meta(emb).shape, vec![6, 3]);
        assert_eq!(&s.slice(emb)[..12], &emb_before[..]);
        assert_eq!(s.slice(w), &w_before[..]);
        assert_eq!(s.first_new_row(emb), Some(4));

        // Grown rows train at 1.0 even when the group is frozen.
        s.set_multiplier(ParamGroup::TokenEmbedding, 0.0);
        assert_eq!(s.effective_multiplier(emb.0, 3 * 3), 0.0); // row 3: pretrained
        assert_eq!(s.effective_multiplier(emb.0, 4 * 3), 1.0); // row 4: new
    }

    #[test]
    fn multiplier_defaults_to_one() {
        let s = small_store(3);
        assert_eq!(s.multiplier(ParamGroup::AudioCnn), 1.0);
    }
}
