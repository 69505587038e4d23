//! The full tagger and its ablation variants.
//!
//! Layer stack per sentence (`[channels × L]` activations):
//!
//! ```text
//! embed -> emb slot -> dropout
//!       -> conv2 (narrow ‖ wide kernels, concatenated) -> cnn slot -> dropout
//!       -> conv3 -> cnn slot -> dropout
//!       -> conv4 -> cnn slot -> dropout
//!       -> conv5 -> relu -> dropout -> shared linear -> logits [L × 3]
//! ```
//!
//! The emb slot is the residual square control (Ctrl family), a linear
//! control (DAN family) or nothing (DE-CNN). A cnn slot is the bottleneck
//! control (which ends in ReLU), a linear control followed by ReLU, or a plain
//! ReLU.
//!
//! Each sentence is processed at its own length, so zero padding at the
//! sentence boundary is the only padding any convolution sees.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::layers::{
    CnnCtrl, CnnCtrlCache, Conv1d, Conv1dCache, DoubleEmbedding, EmbCtrl, EmbCtrlCache, Group,
    GroupSet, Layer, LinearCtrl, min_abs, LinearCtrlCache, OutputCache, OutputLayer, Param,
};
use crate::parallel::{self, Execution};
use crate::seed::{self, Rng};
use crate::tensor::{
    activation, activation_backward, dropout, dropout_backward, softmax_cross_entropy,
    Activation, DropoutMask, Mode, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    DeCnn,
    Ctrl,
    CtrlMinus,
    CtrlMinusMinus,
    Dan,
    DanMinus,
    DanMinusMinus,
}

/// Kind of module sitting in each control slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlKind {
    None,
    Residual,
    Linear,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::DeCnn,
        Variant::Ctrl,
        Variant::CtrlMinus,
        Variant::CtrlMinusMinus,
        Variant::Dan,
        Variant::DanMinus,
        Variant::DanMinusMinus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DeCnn => "decnn",
            Variant::Ctrl => "ctrl",
            Variant::CtrlMinus => "ctrl-",
            Variant::CtrlMinusMinus => "ctrl--",
            Variant::Dan => "dan",
            Variant::DanMinus => "dan-",
            Variant::DanMinusMinus => "dan--",
        }
    }

    pub fn control(self) -> ControlKind {
        match self {
            Variant::DeCnn => ControlKind::None,
            Variant::Ctrl | Variant::CtrlMinus | Variant::CtrlMinusMinus => ControlKind::Residual,
            Variant::Dan | Variant::DanMinus | Variant::DanMinusMinus => ControlKind::Linear,
        }
    }

    /// Variants whose convolutions stay at their random initialization.
    pub fn frozen_cnn(self) -> bool {
        matches!(self, Variant::CtrlMinusMinus | Variant::DanMinusMinus)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s
            .to_ascii_lowercase()
            .replace("_minus", "-")
            .replace("minus", "-")
            .replace('_', "");
        let norm = norm.replace("de-cnn", "decnn");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub general_dim: usize,
    pub domain_dim: usize,
    /// Filters and kernel of the narrow layer-2 branch.
    pub narrow_filters: usize,
    pub narrow_kernel: usize,
    /// Filters and kernel of the wide layer-2 branch.
    pub wide_filters: usize,
    pub wide_kernel: usize,
    /// Channels and kernel of the upper convolutions (layers 3 and up).
    pub channels: usize,
    pub kernel: usize,
    pub upper_layers: usize,
    pub bottleneck: usize,
    pub labels: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Ctrl,
            vocab_size: 2,
            general_dim: 300,
            domain_dim: 100,
            narrow_filters: 128,
            narrow_kernel: 3,
            wide_filters: 128,
            wide_kernel: 5,
            channels: 256,
            kernel: 5,
            upper_layers: 3,
            bottleneck: 128,
            labels: 3,
            dropout: 0.55,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn embedding_width(&self) -> usize {
        self.general_dim + self.domain_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let dims = [
            ("vocab_size", self.vocab_size),
            ("general_dim", self.general_dim),
            ("domain_dim", self.domain_dim),
            ("narrow_filters", self.narrow_filters),
            ("wide_filters", self.wide_filters),
            ("channels", self.channels),
            ("upper_layers", self.upper_layers),
            ("bottleneck", self.bottleneck),
            ("labels", self.labels),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must cover the padding and unknown ids".into());
        }
        for (name, k) in [
            ("narrow_kernel", self.narrow_kernel),
            ("wide_kernel", self.wide_kernel),
            ("kernel", self.kernel),
        ] {
            if k % 2 == 0 {
                return fail(format!("{name} must be odd, got {k}"));
            }
        }
        if self.narrow_filters + self.wide_filters != self.channels {
            return fail(format!(
                "narrow_filters + wide_filters ({} + {}) must equal channels ({})",
                self.narrow_filters, self.wide_filters, self.channels
            ));
        }
        if self.variant.control() == ControlKind::Residual && self.bottleneck >= self.channels {
            return fail(format!(
                "bottleneck ({}) must be smaller than channels ({})",
                self.bottleneck, self.channels
            ));
        }
        crate::tensor::check_dropout_rate(self.dropout)
    }

    /// Key/value lines used for checkpoints and manifests.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("general_dim", self.general_dim.to_string()),
            ("domain_dim", self.domain_dim.to_string()),
            ("narrow_filters", self.narrow_filters.to_string()),
            ("narrow_kernel", self.narrow_kernel.to_string()),
            ("wide_filters", self.wide_filters.to_string()),
            ("wide_kernel", self.wide_kernel.to_string()),
            ("channels", self.channels.to_string()),
            ("kernel", self.kernel.to_string()),
            ("upper_layers", self.upper_layers.to_string()),
            ("bottleneck", self.bottleneck.to_string()),
            ("labels", self.labels.to_string()),
            ("dropout", self.dropout.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = ModelConfig::default();
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{k}`")))
        }
        for (k, v) in pairs {
            match k {
                "variant" => c.variant = v.parse()?,
                "vocab_size" => c.vocab_size = num(k, v)?,
                "general_dim" => c.general_dim = num(k, v)?,
                "domain_dim" => c.domain_dim = num(k, v)?,
                "narrow_filters" => c.narrow_filters = num(k, v)?,
                "narrow_kernel" => c.narrow_kernel = num(k, v)?,
                "wide_filters" => c.wide_filters = num(k, v)?,
                "wide_kernel" => c.wide_kernel = num(k, v)?,
                "channels" => c.channels = num(k, v)?,
                "kernel" => c.kernel = num(k, v)?,
                "upper_layers" => c.upper_layers = num(k, v)?,
                "bottleneck" => c.bottleneck = num(k, v)?,
                "labels" => c.labels = num(k, v)?,
                "dropout" => c.dropout = num(k, v)?,
                "seed" => c.seed = num(k, v)?,
                other => return Err(Error::Config(format!("unknown model config key `{other}`"))),
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum EmbSlot {
    Identity,
    Residual(EmbCtrl),
    Linear(LinearCtrl),
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
enum CnnSlot {
    Relu,
    Residual(CnnCtrl),
    Linear(LinearCtrl),
}

impl EmbSlot {
    fn params(&self) -> Vec<&Param> {
        match self {
            EmbSlot::Identity => vec![],
            EmbSlot::Residual(m) => m.params(),
            EmbSlot::Linear(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            EmbSlot::Identity => vec![],
            EmbSlot::Residual(m) => m.params_mut(),
            EmbSlot::Linear(m) => m.params_mut(),
        }
    }
}

impl CnnSlot {
    fn params(&self) -> Vec<&Param> {
        match self {
            CnnSlot::Relu => vec![],
            CnnSlot::Residual(m) => m.params(),
            CnnSlot::Linear(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            CnnSlot::Relu => vec![],
            CnnSlot::Residual(m) => m.params_mut(),
            CnnSlot::Linear(m) => m.params_mut(),
        }
    }
}

enum EmbSlotCache {
    Identity,
    Residual(EmbCtrlCache),
    Linear(LinearCtrlCache),
}

enum CnnSlotCache {
    Relu { x: Tensor, y: Tensor },
    Residual(CnnCtrlCache),
    Linear { lin: LinearCtrlCache, pre: Tensor, y: Tensor },
}

/// Everything the backward pass needs from one sentence's forward pass.
pub struct SentenceCache {
    emb_slot: EmbSlotCache,
    emb_drop: DropoutMask,
    narrow: Conv1dCache,
    wide: Conv1dCache,
    slots: Vec<(CnnSlotCache, DropoutMask)>,
    upper: Vec<Conv1dCache>,
    top_pre: Tensor,
    top_post: Tensor,
    top_drop: DropoutMask,
    output: OutputCache,
}

impl SentenceCache {
    /// Smallest distance of any ReLU input in the network from zero.
    pub fn relu_margin(&self) -> f64 {
        let slots = self.slots.iter().map(|(c, _)| match c {
            CnnSlotCache::Relu { x, .. } => min_abs(x),
            CnnSlotCache::Residual(c) => c.relu_margin(),
            CnnSlotCache::Linear { pre, .. } => min_abs(pre),
        });
        slots.fold(min_abs(&self.top_pre), f64::min)
    }
}

/// Per-parameter gradients in registry order; `None` for parameters the
/// active groups do not update.
pub type Gradients = Vec<Option<Tensor>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    embedding: DoubleEmbedding,
    emb_slot: EmbSlot,
    narrow: Conv1d,
    wide: Conv1d,
    slots: Vec<CnnSlot>,
    upper: Vec<Conv1d>,
    output: OutputLayer,
}

impl Model {
    /// Builds a model with all-zero embedding tables.
    pub fn build(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let emb = DoubleEmbedding::zeros(config.vocab_size, config.general_dim, config.domain_dim);
        Model::with_embedding(config, emb)
    }

    pub fn with_embedding(config: &ModelConfig, embedding: DoubleEmbedding) -> Result<Model> {
        config.validate()?;
        if embedding.vocab_size() != config.vocab_size
            || embedding.general_dim() != config.general_dim
            || embedding.domain_dim() != config.domain_dim
        {
            return Err(Error::Config(format!(
                "embedding tables [{} × {}+{}] do not match the config [{} × {}+{}]",
                embedding.vocab_size(),
                embedding.general_dim(),
                embedding.domain_dim(),
                config.vocab_size,
                config.general_dim,
                config.domain_dim
            )));
        }
        let c = config;
        let s = c.seed;
        let width = c.embedding_width();
        let emb_slot = match c.variant.control() {
            ControlKind::None => EmbSlot::Identity,
            ControlKind::Residual => EmbSlot::Residual(EmbCtrl::new("ctrl.emb", width)),
            ControlKind::Linear => EmbSlot::Linear(LinearCtrl::new("dan.emb", width)),
        };
        let narrow = Conv1d::new(&format!("conv2.k{}", c.narrow_kernel), width, c.narrow_filters, c.narrow_kernel, s)?;
        let wide = Conv1d::new(&format!("conv2.k{}", c.wide_kernel), width, c.wide_filters, c.wide_kernel, s)?;
        if narrow.w.name == wide.w.name {
            return Err(Error::Config("layer-2 kernels must differ".into()));
        }
        let mut slots = Vec::with_capacity(c.upper_layers);
        let mut upper = Vec::with_capacity(c.upper_layers);
        for i in 0..c.upper_layers {
            let layer = i + 2;
            slots.push(match c.variant.control() {
                ControlKind::None => CnnSlot::Relu,
                ControlKind::Residual => CnnSlot::Residual(CnnCtrl::new(
                    &format!("ctrl.l{layer}"),
                    c.channels,
                    c.bottleneck,
                    c.dropout,
                    s,
                )?),
                ControlKind::Linear => CnnSlot::Linear(LinearCtrl::new(&format!("dan.l{layer}"), c.channels)),
            });
            upper.push(Conv1d::new(&format!("conv{}", layer + 1), c.channels, c.channels, c.kernel, s)?);
        }
        let output = OutputLayer::new("fc", c.channels, c.labels, s);
        let mut model = Model {
            config: config.clone(),
            embedding,
            emb_slot,
            narrow,
            wide,
            slots,
            upper,
            output,
        };
        if c.variant.frozen_cnn() {
            for p in model.params_mut() {
                if p.group == Group::Cnn {
                    p.trainable = false;
                }
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &DoubleEmbedding {
        &self.embedding
    }

    /// All parameters in registry (layer) order.
    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.embedding.params();
        v.extend(self.emb_slot.params());
        v.extend(self.narrow.params());
        v.extend(self.wide.params());
        for (slot, conv) in self.slots.iter().zip(&self.upper) {
            v.extend(slot.params());
            v.extend(conv.params());
        }
        v.extend(self.output.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.embedding.params_mut();
        v.extend(self.emb_slot.params_mut());
        v.extend(self.narrow.params_mut());
        v.extend(self.wide.params_mut());
        for (slot, conv) in self.slots.iter_mut().zip(self.upper.iter_mut()) {
            v.extend(slot.params_mut());
            v.extend(conv.params_mut());
        }
        v.extend(self.output.params_mut());
        v
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    /// Parameter names per group; every group is present, possibly empty.
    pub fn param_groups(&self) -> BTreeMap<Group, Vec<String>> {
        let mut m: BTreeMap<Group, Vec<String>> =
            Group::ALL.iter().map(|&g| (g, Vec::new())).collect();
        for p in self.params() {
            m.entry(p.group).or_default().push(p.name.clone());
        }
        m
    }

    pub fn group_size(&self, group: Group) -> usize {
        self.params()
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies of all parameter values, for best-model bookkeeping.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != snapshot.len() {
            return Err(Error::Checkpoint(format!(
                "snapshot has {} tensors, model has {}",
                snapshot.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(snapshot) {
            if p.value.shape() != v.shape() {
                return Err(Error::TensorMismatch {
                    name: p.name.clone(),
                    msg: format!("shape {:?} vs {:?}", v.shape(), p.value.shape()),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Forward pass over one unpadded sentence, returning `[L × labels]`
    /// logits and the backward cache.
    pub fn forward_sentence(&self, ids: &[usize], mode: Mode, rng: &mut Rng) -> Result<(Tensor, SentenceCache)> {
        let rate = self.config.dropout;
        let x = self.embedding.embed(ids)?;
        let (x, emb_slot) = match &self.emb_slot {
            EmbSlot::Identity => (x, EmbSlotCache::Identity),
            EmbSlot::Residual(m) => {
                let (y, c) = m.forward(&x)?;
                (y, EmbSlotCache::Residual(c))
            }
            EmbSlot::Linear(m) => {
                let (y, c) = m.forward(&x)?;
                (y, EmbSlotCache::Linear(c))
            }
        };
        let (x, emb_drop) = dropout(&x, rate, mode, rng)?;
        let (a, narrow) = self.narrow.forward(&x)?;
        let (b, wide) = self.wide.forward(&x)?;
        let mut h = Tensor::concat_rows(&[&a, &b])?;

        let mut slots = Vec::with_capacity(self.slots.len());
        let mut upper = Vec::with_capacity(self.upper.len());
        for (slot, conv) in self.slots.iter().zip(&self.upper) {
            let (z, cache) = match slot {
                CnnSlot::Relu => {
                    let y = activation(Activation::Relu, &h);
                    (y.clone(), CnnSlotCache::Relu { x: h, y })
                }
                CnnSlot::Residual(m) => {
                    let (y, c) = m.forward(&h, mode, rng)?;
                    (y, CnnSlotCache::Residual(c))
                }
                CnnSlot::Linear(m) => {
                    let (pre, lin) = m.forward(&h)?;
                    let y = activation(Activation::Relu, &pre);
                    (y.clone(), CnnSlotCache::Linear { lin, pre, y })
                }
            };
            let (z, mask) = dropout(&z, rate, mode, rng)?;
            slots.push((cache, mask));
            let (next, cc) = conv.forward(&z)?;
            upper.push(cc);
            h = next;
        }
        let top_post = activation(Activation::Relu, &h);
        let (top, top_drop) = dropout(&top_post, rate, mode, rng)?;
        let (logits, output) = self.output.forward(&top)?;
        Ok((
            logits,
            SentenceCache {
                emb_slot,
                emb_drop,
                narrow,
                wide,
                slots,
                upper,
                top_pre: h,
                top_post,
                top_drop,
                output,
            },
        ))
    }

    /// Backward pass for one sentence. Only parameters updatable under
    /// `active` receive gradients, and input gradients are only propagated as
    /// far down as some updatable parameter needs them.
    pub fn backward_sentence(&self, cache: &SentenceCache, grad_logits: &Tensor, active: GroupSet) -> Result<Gradients> {
        let upd = |ps: Vec<&Param>| ps.iter().any(|p| p.is_updatable(active));
        // below[i]: some parameter strictly below stage i is updatable
        let emb_upd = upd(self.emb_slot.params());
        let conv2_upd = upd(self.narrow.params()) || upd(self.wide.params());
        let mut below_slot = Vec::with_capacity(self.slots.len());
        let mut below_conv = Vec::with_capacity(self.upper.len());
        let mut acc = emb_upd || conv2_upd;
        for (slot, conv) in self.slots.iter().zip(&self.upper) {
            below_slot.push(acc);
            acc |= upd(slot.params());
            below_conv.push(acc);
            acc |= upd(conv.params());
        }
        let below_output = acc;

        // collect per-stage grads top-down, then reverse into registry order
        let mut stages: Vec<Vec<Option<Tensor>>> = Vec::new();

        let (g, out_grads) = self.output.backward(&cache.output, grad_logits, active, below_output)?;
        stages.push(out_grads);
        let Some(g) = g else {
            return Ok(assemble(self, stages));
        };
        let g = dropout_backward(&cache.top_drop, &g)?;
        let mut g = activation_backward(Activation::Relu, &cache.top_pre, &cache.top_post, &g)?;

        for i in (0..self.upper.len()).rev() {
            let (dz, conv_grads) = self.upper[i].backward(&cache.upper[i], &g, active, below_conv[i])?;
            stages.push(conv_grads);
            let Some(dz) = dz else {
                return Ok(assemble(self, stages));
            };
            let (slot_cache, mask) = &cache.slots[i];
            let dz = dropout_backward(mask, &dz)?;
            let (dh, slot_grads) = match (&self.slots[i], slot_cache) {
                (CnnSlot::Relu, CnnSlotCache::Relu { x, y }) => (
                    below_slot[i]
                        .then(|| activation_backward(Activation::Relu, x, y, &dz))
                        .transpose()?,
                    vec![],
                ),
                (CnnSlot::Residual(m), CnnSlotCache::Residual(c)) => m.backward(c, &dz, active, below_slot[i])?,
                (CnnSlot::Linear(m), CnnSlotCache::Linear { lin, pre, y }) => {
                    let dpre = activation_backward(Activation::Relu, pre, y, &dz)?;
                    m.backward(lin, &dpre, active, below_slot[i])?
                }
                _ => unreachable!("slot cache matches its slot"),
            };
            stages.push(slot_grads);
            let Some(dh) = dh else {
                return Ok(assemble(self, stages));
            };
            g = dh;
        }

        // layer 2: split the concatenated gradient between the two branches
        let parts = g.split_rows(&[self.narrow.out_channels(), self.wide.out_channels()])?;
        let (dxa, wide_grads) = self.wide.backward(&cache.wide, &parts[1], active, emb_upd)?;
        let (dxb, narrow_grads) = self.narrow.backward(&cache.narrow, &parts[0], active, emb_upd)?;
        stages.push(wide_grads);
        stages.push(narrow_grads);
        if let (Some(mut dx), Some(dxb)) = (dxa, dxb) {
            dx.add_assign(&dxb)?;
            let dx = dropout_backward(&cache.emb_drop, &dx)?;
            let emb_grads = match (&self.emb_slot, &cache.emb_slot) {
                (EmbSlot::Residual(m), EmbSlotCache::Residual(c)) => m.backward(c, &dx, active, false)?.1,
                (EmbSlot::Linear(m), EmbSlotCache::Linear(c)) => m.backward(c, &dx, active, false)?.1,
                _ => vec![],
            };
            stages.push(emb_grads);
        }
        Ok(assemble(self, stages))
    }

    /// Logits for a padded batch as a `[B × L × labels]` tensor. Padded
    /// positions hold zeros. Dropout streams derive from `seed` and the row
    /// index, so the result does not depend on the execution mode.
    pub fn forward(&self, batch: &Batch, mode: Mode, seed: u64, exec: Execution) -> Result<Tensor> {
        let labels = self.config.labels;
        let rows: Vec<usize> = (0..batch.batch_size).collect();
        let outs = parallel::map_ordered(&rows, exec, |_, &r| {
            let (ids, _) = batch.row(r);
            let mut rng = seed::rng(seed::derive(seed, &[r as u64]));
            self.forward_sentence(ids, mode, &mut rng).map(|(l, _)| l)
        });
        let mut data = vec![0.0; batch.batch_size * batch.max_len.max(1) * labels];
        for (r, out) in outs.into_iter().enumerate() {
            let logits = out?;
            let off = r * batch.max_len * labels;
            data[off..off + logits.len()].copy_from_slice(logits.data());
        }
        Tensor::new(vec![batch.batch_size, batch.max_len.max(1), labels], data)
    }

    /// Token-averaged loss of a batch and, when `active` is `Some`, the
    /// gradient of that loss. Sentence results are reduced in row order.
    pub fn batch_loss(
        &self,
        batch: &Batch,
        mode: Mode,
        seed: u64,
        active: Option<GroupSet>,
        exec: Execution,
    ) -> Result<(f64, Option<Gradients>)> {
        let total = batch.tokens();
        if total == 0 {
            return Err(Error::Degenerate("batch has no tokens".into()));
        }
        let scale = 1.0 / total as f64;
        let rows: Vec<usize> = (0..batch.batch_size).collect();
        let init: Result<(f64, Option<Gradients>)> = Ok((0.0, None));
        parallel::map_fold_ordered(
            &rows,
            exec,
            init,
            |_, &r| -> Result<(f64, Option<Gradients>)> {
                let (ids, labels) = batch.row(r);
                let mut rng = seed::rng(seed::derive(seed, &[r as u64]));
                let (logits, cache) = self.forward_sentence(ids, mode, &mut rng)?;
                let mask = vec![1u8; ids.len()];
                let (mean, grad) = softmax_cross_entropy(&logits, labels, &mask)?;
                let n = ids.len() as f64;
                let grads = match active {
                    Some(active) => {
                        let mut g = grad;
                        let w = n * scale;
                        g.data_mut().iter_mut().for_each(|v| *v *= w);
                        Some(self.backward_sentence(&cache, &g, active)?)
                    }
                    None => None,
                };
                Ok((mean * n, grads))
            },
            |acc, item| {
                let (loss, grads) = acc?;
                let (l, g) = item?;
                let grads = match (grads, g) {
                    (None, g) => g,
                    (Some(mut a), Some(b)) => {
                        for (x, y) in a.iter_mut().zip(b) {
                            match (x.as_mut(), y) {
                                (Some(x), Some(y)) => x.add_assign(&y)?,
                                (None, Some(y)) => *x = Some(y),
                                _ => {}
                            }
                        }
                        Some(a)
                    }
                    (a, None) => a,
                };
                Ok((loss + l, grads))
            },
        )
        .map(|(loss, g)| (loss * scale, g))
    }

    /// Most likely label id at each position of one sentence (eval mode).
    pub fn predict_ids(&self, ids: &[usize]) -> Result<Vec<usize>> {
        let (logits, _) = self.forward_sentence(ids, Mode::Eval, &mut seed::rng(0))?;
        let c = self.config.labels;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Turns top-down stage gradients into registry order, padding unreached
/// stages with `None`.
fn assemble(model: &Model, mut stages: Vec<Vec<Option<Tensor>>>) -> Gradients {
    let n = model.params().len();
    stages.reverse();
    let mut flat: Vec<Option<Tensor>> = stages.into_iter().flatten().collect();
    // stages cover a suffix of the registry (top layers first)
    let mut out: Gradients = vec![None; n - flat.len()];
    out.append(&mut flat);
    out
}
