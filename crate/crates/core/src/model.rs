//! The recurrent network: parameters, state, one time step and the
//! per-sentence joint loss.
//!
//! ```text
//! s_t  = σ(W_ws w_{t-1} + W_ss s_{t-1} + W_vs v + b_s)      language context
//! u_t  = σ(W_wu w_{t-1} + W_uu u_{t-1} + b_u)               visual memory
//! ṽ_t  = σ(W_uv u_t + b_v)                                  reconstruction
//! P(w) = P(c(w) | s_t, u_t) · P(w | c(w), s_t, u_t)         class-factorized
//! ```
//!
//! `v` feeds only the lower half of `s` in the full model; `u` never reads
//! `v` or `s`, so the reconstruction path depends on the words alone.

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedSentence, WordClasses, EOS_ID};
use crate::error::{Error, Result};
use crate::numkit::{
    log_sum_exp, mix64, sigmoid, sigmoid_clip_scalar, softplus, DenseMatrix, SeededRng,
    DEFAULT_SIGMOID_CLIP,
};

pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain recurrent language model, no visual input.
    Rnn,
    /// Visual features feed the whole context layer.
    RnnIf,
    /// Visual features feed half the context layer, plus the recurrent visual memory.
    Full,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '+'], "_").as_str() {
            "rnn" => Ok(Variant::Rnn),
            "rnn_if" | "rnnif" | "if" => Ok(Variant::RnnIf),
            "full" => Ok(Variant::Full),
            other => Err(Error::InvalidInput(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Rnn => "rnn",
            Variant::RnnIf => "rnn_if",
            Variant::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    #[default]
    CrossEntropy,
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub class_count: usize,
    pub s_dim: usize,
    pub u_dim: usize,
    pub v_dim: usize,
    /// Longest n-gram used by the MaxEnt features; 0 disables them.
    pub maxent_order: usize,
    /// Entries per MaxEnt weight table (class table and word table).
    pub maxent_hash_size: usize,
    pub variant: Variant,
    pub recon_loss: ReconLoss,
    pub sigmoid_clip: f64,
}

impl ModelDims {
    pub fn new(classes: &WordClasses, v_dim: usize, variant: Variant) -> Self {
        Self {
            vocab_size: classes.vocab_size(),
            class_count: classes.class_count(),
            s_dim: 100,
            u_dim: 100,
            v_dim,
            maxent_order: 3,
            maxent_hash_size: 1 << 20,
            variant,
            recon_loss: ReconLoss::CrossEntropy,
            sigmoid_clip: DEFAULT_SIGMOID_CLIP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.class_count == 0 || self.class_count > self.vocab_size {
            return Err(Error::InvalidInput("invalid vocabulary/class sizes".into()));
        }
        if self.s_dim == 0 {
            return Err(Error::InvalidInput("s_dim must be positive".into()));
        }
        if self.variant == Variant::Full && (!self.s_dim.is_multiple_of(2) || self.u_dim == 0) {
            return Err(Error::InvalidInput(
                "full variant needs an even s_dim and a positive u_dim".into(),
            ));
        }
        if self.variant != Variant::Rnn && self.v_dim == 0 {
            return Err(Error::InvalidInput("visual variants need v_dim > 0".into()));
        }
        if self.maxent_order > 0 && self.maxent_hash_size == 0 {
            return Err(Error::InvalidInput(
                "MaxEnt enabled with an empty hash table".into(),
            ));
        }
        if !(self.sigmoid_clip > 0.0) {
            return Err(Error::InvalidInput("sigmoid clip must be positive".into()));
        }
        Ok(())
    }

    pub fn has_memory(&self) -> bool {
        self.variant == Variant::Full
    }

    pub fn uses_visual(&self) -> bool {
        self.variant != Variant::Rnn
    }

    /// Units of `u` actually allocated.
    pub fn active_u(&self) -> usize {
        if self.has_memory() {
            self.u_dim
        } else {
            0
        }
    }

    /// First row of `W_vs` held at zero (`s_dim` when nothing is masked).
    pub fn visual_mask_start(&self) -> usize {
        if self.variant == Variant::Full {
            self.s_dim / 2
        } else {
            self.s_dim
        }
    }

    fn maxent_tables(&self) -> usize {
        if self.maxent_order > 0 {
            self.maxent_hash_size
        } else {
            0
        }
    }
}

/// Parameter blocks, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    WordToS,
    SToS,
    VisualToS,
    BiasS,
    WordToU,
    UToU,
    BiasU,
    InitialU,
    SToClass,
    UToClass,
    BiasClass,
    SToWord,
    UToWord,
    BiasWord,
    UToRecon,
    BiasRecon,
    MaxEntClass,
    MaxEntWord,
}

impl Block {
    pub const ALL: [Block; 18] = [
        Block::WordToS,
        Block::SToS,
        Block::VisualToS,
        Block::BiasS,
        Block::WordToU,
        Block::UToU,
        Block::BiasU,
        Block::InitialU,
        Block::SToClass,
        Block::UToClass,
        Block::BiasClass,
        Block::SToWord,
        Block::UToWord,
        Block::BiasWord,
        Block::UToRecon,
        Block::BiasRecon,
        Block::MaxEntClass,
        Block::MaxEntWord,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::WordToS => "W_ws",
            Block::SToS => "W_ss",
            Block::VisualToS => "W_vs",
            Block::BiasS => "b_s",
            Block::WordToU => "W_wu",
            Block::UToU => "W_uu",
            Block::BiasU => "b_u",
            Block::InitialU => "u0",
            Block::SToClass => "W_sc",
            Block::UToClass => "W_uc",
            Block::BiasClass => "b_c",
            Block::SToWord => "W_sw",
            Block::UToWord => "W_uw",
            Block::BiasWord => "b_w",
            Block::UToRecon => "W_uv",
            Block::BiasRecon => "b_v",
            Block::MaxEntClass => "maxent_class",
            Block::MaxEntWord => "maxent_word",
        }
    }

    pub fn from_name(name: &str) -> Option<Block> {
        Block::ALL.into_iter().find(|b| b.name() == name)
    }

    /// Blocks updated after every word: everything feeding the word/class outputs.
    pub fn is_online(self) -> bool {
        matches!(
            self,
            Block::SToClass
                | Block::UToClass
                | Block::BiasClass
                | Block::SToWord
                | Block::UToWord
                | Block::BiasWord
                | Block::MaxEntClass
                | Block::MaxEntWord
        )
    }

    pub fn is_maxent(self) -> bool {
        matches!(self, Block::MaxEntClass | Block::MaxEntWord)
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }

    /// Weight matrices are randomly initialized; biases, `u0` and MaxEnt tables start at zero.
    fn is_random_init(self) -> bool {
        matches!(
            self,
            Block::WordToS
                | Block::SToS
                | Block::VisualToS
                | Block::WordToU
                | Block::UToU
                | Block::SToClass
                | Block::UToClass
                | Block::SToWord
                | Block::UToWord
                | Block::UToRecon
        )
    }

    /// Shape for the given dims; absent blocks are 0x0.
    pub fn shape(self, d: &ModelDims) -> (usize, usize) {
        let u = d.active_u();
        let v = if d.uses_visual() { d.v_dim } else { 0 };
        let me = d.maxent_tables();
        let shape = match self {
            Block::WordToS => (d.s_dim, d.vocab_size),
            Block::SToS => (d.s_dim, d.s_dim),
            Block::VisualToS => (d.s_dim, v),
            Block::BiasS => (d.s_dim, 1),
            Block::WordToU => (u, d.vocab_size),
            Block::UToU => (u, u),
            Block::BiasU | Block::InitialU => (u, 1),
            Block::SToClass => (d.class_count, d.s_dim),
            Block::UToClass => (d.class_count, u),
            Block::BiasClass => (d.class_count, 1),
            Block::SToWord => (d.vocab_size, d.s_dim),
            Block::UToWord => (d.vocab_size, u),
            Block::BiasWord => (d.vocab_size, 1),
            Block::UToRecon => (if u > 0 { d.v_dim } else { 0 }, u),
            Block::BiasRecon => (if u > 0 { d.v_dim } else { 0 }, 1),
            Block::MaxEntClass | Block::MaxEntWord => (me, 1),
        };
        if shape.0 == 0 || shape.1 == 0 {
            (0, 0)
        } else {
            shape
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    classes: WordClasses,
    blocks: Vec<DenseMatrix>,
}

impl std::ops::Index<Block> for ModelParams {
    type Output = DenseMatrix;

    fn index(&self, b: Block) -> &DenseMatrix {
        &self.blocks[b.index()]
    }
}

impl ModelParams {
    /// Random weights in `[-0.1, 0.1]`, zero biases, zero `u0`, zero MaxEnt
    /// weights. Masked rows of `W_vs` are zero.
    pub fn init(dims: ModelDims, classes: &WordClasses, rng: &mut SeededRng) -> Result<Self> {
        let mut p = Self::zeros(dims, classes)?;
        for b in Block::ALL {
            if b.is_random_init() {
                let (r, c) = b.shape(&p.dims);
                p.blocks[b.index()] = DenseMatrix::random_uniform(r, c, INIT_SCALE, rng);
            }
        }
        p.enforce_mask();
        Ok(p)
    }

    pub fn zeros(dims: ModelDims, classes: &WordClasses) -> Result<Self> {
        dims.validate()?;
        if classes.vocab_size() != dims.vocab_size || classes.class_count() != dims.class_count {
            return Err(Error::InvalidInput(
                "word classes do not match model dims".into(),
            ));
        }
        let blocks = Block::ALL
            .iter()
            .map(|b| {
                let (r, c) = b.shape(&dims);
                DenseMatrix::zeros(r, c)
            })
            .collect();
        Ok(Self {
            dims,
            classes: classes.clone(),
            blocks,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn classes(&self) -> &WordClasses {
        &self.classes
    }

    pub fn block(&self, b: Block) -> &DenseMatrix {
        &self.blocks[b.index()]
    }

    /// Direct mutable access. Callers that touch `W_vs` should call
    /// [`ModelParams::enforce_mask`] afterwards.
    pub fn block_mut(&mut self, b: Block) -> &mut DenseMatrix {
        &mut self.blocks[b.index()]
    }

    pub fn set_block(&mut self, b: Block, m: DenseMatrix) -> Result<()> {
        if m.shape() != b.shape(&self.dims) {
            return Err(Error::Shape(format!(
                "{}: got {:?}, expected {:?}",
                b.name(),
                m.shape(),
                b.shape(&self.dims)
            )));
        }
        self.blocks[b.index()] = m;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.as_slice().len()).sum()
    }

    pub fn enforce_mask(&mut self) {
        let start = self.dims.visual_mask_start();
        let m = &mut self.blocks[Block::VisualToS.index()];
        for i in start..m.rows() {
            m.row_mut(i).fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.as_slice().iter().all(|x| x.is_finite()))
    }

    fn clip(&self) -> f64 {
        self.dims.sigmoid_clip
    }

    /// Fresh state at a sentence boundary: `s = 0.5`, `u = σ(u0)`, no history.
    pub fn reset_state(&self) -> ModelState {
        let clip = self.clip();
        ModelState {
            s: vec![0.5; self.dims.s_dim],
            u: self[Block::InitialU]
                .as_slice()
                .iter()
                .map(|&z| sigmoid_clip_scalar(z, clip))
                .collect(),
            context: Vec::new(),
        }
    }

    fn check_inputs(&self, w_prev: usize, v: &[f64]) -> Result<()> {
        if w_prev >= self.dims.vocab_size {
            return Err(Error::InvalidInput(format!(
                "token id {w_prev} out of range for vocabulary of {}",
                self.dims.vocab_size
            )));
        }
        if self.dims.uses_visual() && v.len() != self.dims.v_dim {
            return Err(Error::Shape(format!(
                "feature dim {} does not match model v_dim {}",
                v.len(),
                self.dims.v_dim
            )));
        }
        Ok(())
    }

    /// Pre-activations of the next `s` and `u`.
    fn hidden_preactivations(
        &self,
        state: &ModelState,
        w_prev: usize,
        v: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut s_pre = self[Block::BiasS].as_slice().to_vec();
        self[Block::WordToS].add_column_to(w_prev, &mut s_pre);
        self[Block::SToS].gemv_acc(&state.s, &mut s_pre);
        if self.dims.uses_visual() {
            self[Block::VisualToS].gemv_acc(v, &mut s_pre);
        }
        let mut u_pre = self[Block::BiasU].as_slice().to_vec();
        if self.dims.has_memory() {
            self[Block::WordToU].add_column_to(w_prev, &mut u_pre);
            self[Block::UToU].gemv_acc(&state.u, &mut u_pre);
        }
        (s_pre, u_pre)
    }

    fn shifted_context(&self, context: &[usize], w_prev: usize) -> Vec<usize> {
        let keep = self.dims.maxent_order.saturating_sub(1);
        let mut ctx: Vec<usize> = context.to_vec();
        ctx.push(w_prev);
        let drop = ctx.len().saturating_sub(keep);
        ctx.drain(..drop);
        ctx
    }

    /// Reconstruction pre-activations `W_uv u + b_v`.
    pub(crate) fn recon_preactivation(&self, u: &[f64]) -> Vec<f64> {
        let mut z = self[Block::BiasRecon].as_slice().to_vec();
        self[Block::UToRecon].gemv_acc(u, &mut z);
        z
    }

    pub fn reconstruct(&self, u: &[f64]) -> Vec<f64> {
        let clip = self.clip();
        self.recon_preactivation(u)
            .into_iter()
            .map(|z| sigmoid_clip_scalar(z, clip))
            .collect()
    }

    /// One time step: consume `w_prev`, update the state and predict.
    pub fn step(
        &self,
        state: &ModelState,
        w_prev: usize,
        v: &[f64],
    ) -> Result<(ModelState, StepOutput)> {
        self.check_inputs(w_prev, v)?;
        let next = self.advance(state, w_prev, v);
        let word_dist = self.word_distribution(&next.s, &next.u, &next.context);
        let recon = if self.dims.has_memory() {
            self.reconstruct(&next.u)
        } else {
            Vec::new()
        };
        Ok((next, StepOutput { word_dist, recon }))
    }

    /// State update only (no output computation).
    pub fn advance(&self, state: &ModelState, w_prev: usize, v: &[f64]) -> ModelState {
        let clip = self.clip();
        let (mut s, mut u) = self.hidden_preactivations(state, w_prev, v);
        s.iter_mut()
            .for_each(|z| *z = sigmoid_clip_scalar(*z, clip));
        u.iter_mut()
            .for_each(|z| *z = sigmoid_clip_scalar(*z, clip));
        ModelState {
            s,
            u,
            context: self.shifted_context(&state.context, w_prev),
        }
    }

    /// Hash keys of the active MaxEnt n-gram features (orders 1..=maxent_order)
    /// for the given history (most recent token last).
    pub fn maxent_keys(&self, context: &[usize]) -> Vec<u64> {
        let mut keys = Vec::with_capacity(self.dims.maxent_order);
        for order in 1..=self.dims.maxent_order {
            let history = order - 1;
            if history > context.len() {
                break;
            }
            let mut h = mix64(order as u64);
            for &tok in context[context.len() - history..].iter().rev() {
                h = mix64(h ^ (tok as u64).wrapping_mul(0x9E37_79B9));
            }
            keys.push(h);
        }
        keys
    }

    pub(crate) fn maxent_slot(&self, key: u64, target: usize) -> usize {
        (key.wrapping_add(target as u64) % self.dims.maxent_hash_size as u64) as usize
    }

    pub(crate) fn class_logits(&self, s: &[f64], u: &[f64], keys: &[u64]) -> Vec<f64> {
        let mut z = self[Block::BiasClass].as_slice().to_vec();
        self[Block::SToClass].gemv_acc(s, &mut z);
        if self.dims.has_memory() {
            self[Block::UToClass].gemv_acc(u, &mut z);
        }
        let table = self[Block::MaxEntClass].as_slice();
        for &k in keys {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += table[self.maxent_slot(k, c)];
            }
        }
        z
    }

    /// Logits of the members of `class`, in member order.
    pub(crate) fn member_logits(
        &self,
        class: usize,
        s: &[f64],
        u: &[f64],
        keys: &[u64],
    ) -> Vec<f64> {
        let table = self[Block::MaxEntWord].as_slice();
        let sw = &self[Block::SToWord];
        let uw = &self[Block::UToWord];
        let bw = self[Block::BiasWord].as_slice();
        self.classes
            .members(class)
            .iter()
            .map(|&w| {
                let mut z = bw[w] + crate::numkit::dot(sw.row(w), s);
                if self.dims.has_memory() {
                    z += crate::numkit::dot(uw.row(w), u);
                }
                for &k in keys {
                    z += table[self.maxent_slot(k, w)];
                }
                z
            })
            .collect()
    }

    /// Full next-word distribution `P(w) = P(c(w)) · P(w | c(w))`.
    pub fn word_distribution(&self, s: &[f64], u: &[f64], context: &[usize]) -> Vec<f64> {
        let keys = self.maxent_keys(context);
        let class_logits = self.class_logits(s, u, &keys);
        let class_lse = log_sum_exp(&class_logits);
        let mut dist = vec![0.0; self.dims.vocab_size];
        for (c, &lc) in class_logits.iter().enumerate() {
            let log_pc = lc - class_lse;
            let member = self.member_logits(c, s, u, &keys);
            let lse = log_sum_exp(&member);
            for (&w, &lw) in self.classes.members(c).iter().zip(&member) {
                dist[w] = (log_pc + lw - lse).exp();
            }
        }
        dist
    }

    /// Reconstruction error of one step given pre-activations `z`.
    pub fn recon_error(&self, v: &[f64], z: &[f64]) -> f64 {
        let clip = self.clip();
        match self.dims.recon_loss {
            ReconLoss::CrossEntropy => v
                .iter()
                .zip(z)
                .map(|(&vi, &zi)| {
                    let zc = zi.clamp(-clip, clip);
                    vi * softplus(-zc) + (1.0 - vi) * softplus(zc)
                })
                .sum(),
            ReconLoss::SquaredError => v
                .iter()
                .zip(z)
                .map(|(&vi, &zi)| (sigmoid(zi.clamp(-clip, clip)) - vi).powi(2))
                .sum(),
        }
    }

    /// Runs the hidden layers over a sentence from a fresh state. Step `t`
    /// reads token `t-1` (`<eos>` at `t = 0`) and predicts token `t`.
    pub(crate) fn forward_hidden(
        &self,
        v: &[f64],
        sent: &EncodedSentence,
    ) -> Result<Vec<HiddenStep>> {
        if sent.ids.last() != Some(&EOS_ID) {
            return Err(Error::InvalidInput("sentence must end with <eos>".into()));
        }
        let clip = self.clip();
        let mut state = self.reset_state();
        let mut steps = Vec::with_capacity(sent.ids.len());
        for t in 0..sent.ids.len() {
            let input = if t == 0 { EOS_ID } else { sent.ids[t - 1] };
            self.check_inputs(input, v)?;
            let target = sent.ids[t];
            if target >= self.dims.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token id {target} out of range"
                )));
            }
            let (s_pre, u_pre) = self.hidden_preactivations(&state, input, v);
            let s: Vec<f64> = s_pre
                .iter()
                .map(|&z| sigmoid_clip_scalar(z, clip))
                .collect();
            let u: Vec<f64> = u_pre
                .iter()
                .map(|&z| sigmoid_clip_scalar(z, clip))
                .collect();
            let context = self.shifted_context(&state.context, input);
            let recon_pre = if self.dims.has_memory() {
                self.recon_preactivation(&u)
            } else {
                Vec::new()
            };
            let keys = self.maxent_keys(&context);
            steps.push(HiddenStep {
                input,
                target,
                s_pre,
                u_pre,
                s: s.clone(),
                u: u.clone(),
                recon_pre,
                keys,
            });
            state = ModelState { s, u, context };
        }
        Ok(steps)
    }

    /// Output-layer quantities for one step with the current weights.
    pub(crate) fn output_step(&self, h: &HiddenStep) -> OutputStep {
        let class = self.classes.class_of(h.target);
        let class_logits = self.class_logits(&h.s, &h.u, &h.keys);
        let class_lse = log_sum_exp(&class_logits);
        let class_probs: Vec<f64> = class_logits
            .iter()
            .map(|&z| (z - class_lse).exp())
            .collect();
        let member_logits = self.member_logits(class, &h.s, &h.u, &h.keys);
        let member_lse = log_sum_exp(&member_logits);
        let member_probs: Vec<f64> = member_logits
            .iter()
            .map(|&z| (z - member_lse).exp())
            .collect();
        let pos = self.classes.position_in_class(h.target);
        let word_nll = -(class_logits[class] - class_lse) - (member_logits[pos] - member_lse);
        OutputStep {
            class,
            target_pos: pos,
            class_probs,
            member_probs,
            word_nll,
        }
    }

    /// Joint loss over a sentence: Σ_t [-ln P(w_t|·) + λ · err(v, ṽ_t)].
    pub fn sentence_loss(
        &self,
        v: &[f64],
        sent: &EncodedSentence,
        lambda_recon: f64,
    ) -> Result<(StepLoss, Vec<StepLoss>)> {
        let hidden = self.forward_hidden(v, sent)?;
        let mut per_step = Vec::with_capacity(hidden.len());
        let mut total = StepLoss::default();
        for h in &hidden {
            let word_nll = self.output_step(h).word_nll;
            let recon_loss = if self.dims.has_memory() {
                self.recon_error(v, &h.recon_pre)
            } else {
                0.0
            };
            let step = StepLoss {
                word_nll,
                recon_loss,
                joint: word_nll + lambda_recon * recon_loss,
            };
            total.word_nll += step.word_nll;
            total.recon_loss += step.recon_loss;
            total.joint += step.joint;
            per_step.push(step);
        }
        Ok((total, per_step))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub s: Vec<f64>,
    pub u: Vec<f64>,
    /// Recent tokens for the MaxEnt features, most recent last.
    pub context: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub word_dist: Vec<f64>,
    /// ṽ_t; empty for variants without visual memory.
    pub recon: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLoss {
    pub word_nll: f64,
    pub recon_loss: f64,
    pub joint: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct HiddenStep {
    pub input: usize,
    pub target: usize,
    pub s_pre: Vec<f64>,
    pub u_pre: Vec<f64>,
    pub s: Vec<f64>,
    pub u: Vec<f64>,
    pub recon_pre: Vec<f64>,
    pub keys: Vec<u64>,
}

#[derive(Debug, Clone)]
pub(crate) struct OutputStep {
    pub class: usize,
    pub target_pos: usize,
    pub class_probs: Vec<f64>,
    pub member_probs: Vec<f64>,
    pub word_nll: f64,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode, ClassedVocabulary};

    pub(crate) fn toy_vocab(words: usize, classes: usize) -> ClassedVocabulary {
        let sent: Vec<String> = (0..words - 2)
            .flat_map(|i| std::iter::repeat_n(format!("w{i}"), words - i))
            .collect();
        build_vocab(&[sent], Some(classes), 1).unwrap()
    }

    fn small_dims(vocab: &ClassedVocabulary, variant: Variant, order: usize) -> ModelDims {
        ModelDims {
            s_dim: 8,
            u_dim: 6,
            maxent_order: order,
            maxent_hash_size: 97,
            ..ModelDims::new(vocab.classes(), 4, variant)
        }
    }

    fn random_params(
        variant: Variant,
        order: usize,
        seed: u64,
    ) -> (ClassedVocabulary, ModelParams) {
        let vocab = toy_vocab(12, 3);
        let mut rng = SeededRng::new(seed);
        let mut p = ModelParams::init(
            small_dims(&vocab, variant, order),
            vocab.classes(),
            &mut rng,
        )
        .unwrap();
        // nonzero biases, u0 and MaxEnt weights so every path is exercised
        for b in [
            Block::BiasS,
            Block::BiasU,
            Block::InitialU,
            Block::BiasClass,
            Block::BiasWord,
            Block::BiasRecon,
            Block::MaxEntClass,
            Block::MaxEntWord,
        ] {
            let (r, c) = p.block(b).shape();
            p.set_block(b, DenseMatrix::random_uniform(r, c, 0.5, &mut rng))
                .unwrap();
        }
        (vocab, p)
    }

    #[test]
    fn full_variant_masks_upper_half() {
        let (_, p) = random_params(Variant::Full, 3, 1);
        let w = p.block(Block::VisualToS);
        assert_eq!(w.shape(), (8, 4));
        for i in 4..8 {
            assert!(w.row(i).iter().all(|&x| x == 0.0));
        }
        assert!(w.row(0).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn init_deterministic_and_variant_blocks() {
        let vocab = toy_vocab(12, 3);
        let d = small_dims(&vocab, Variant::Rnn, 3);
        let a = ModelParams::init(d.clone(), vocab.classes(), &mut SeededRng::new(4)).unwrap();
        let b = ModelParams::init(d, vocab.classes(), &mut SeededRng::new(4)).unwrap();
        assert_eq!(a, b);
        for blk in [
            Block::VisualToS,
            Block::WordToU,
            Block::UToU,
            Block::UToRecon,
            Block::InitialU,
            Block::UToWord,
        ] {
            assert!(a.block(blk).is_empty(), "{}", blk.name());
        }
        let d = small_dims(&vocab, Variant::RnnIf, 3);
        let c = ModelParams::init(d, vocab.classes(), &mut SeededRng::new(4)).unwrap();
        assert_eq!(c.block(Block::VisualToS).shape(), (8, 4));
        assert!(c.block(Block::UToU).is_empty());
        assert!(c.block(Block::UToRecon).is_empty());
    }

    #[test]
    fn odd_s_dim_rejected_for_full() {
        let vocab = toy_vocab(12, 3);
        let d = ModelDims {
            s_dim: 7,
            ..small_dims(&vocab, Variant::Full, 3)
        };
        assert!(ModelParams::init(d, vocab.classes(), &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn reset_state_contract() {
        let vocab = toy_vocab(12, 3);
        let p = ModelParams::init(
            small_dims(&vocab, Variant::Full, 3),
            vocab.classes(),
            &mut SeededRng::new(2),
        )
        .unwrap();
        let s0 = p.reset_state();
        assert!(s0.u.iter().all(|&x| x == 0.5));
        assert!(s0.s.iter().all(|&x| x == 0.5));
        assert!(s0.context.is_empty());
        assert_eq!(s0, p.reset_state());
    }

    #[test]
    fn zero_weights_reconstruct_one_half() {
        let vocab = toy_vocab(12, 3);
        let p = ModelParams::zeros(small_dims(&vocab, Variant::Full, 3), vocab.classes()).unwrap();
        let (_, out) = p.step(&p.reset_state(), 3, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(out.recon.iter().all(|&x| x == 0.5));
        // uniform classes, uniform members
        let c = p.classes();
        for w in 0..12 {
            let expect = 1.0 / c.class_count() as f64 / c.members(c.class_of(w)).len() as f64;
            assert!((out.word_dist[w] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn visual_input_only_touches_s() {
        let (_, p) = random_params(Variant::Full, 3, 3);
        let st = p.reset_state();
        let (a, oa) = p.step(&st, 5, &[1.0, 0.0, 0.5, 0.2]).unwrap();
        let (b, ob) = p.step(&st, 5, &[0.0, 1.0, 0.1, 0.9]).unwrap();
        assert_ne!(a.s, b.s);
        assert_eq!(a.u, b.u);
        assert_eq!(oa.recon, ob.recon);
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let (_, p) = random_params(Variant::Full, 3, 3);
        let st = p.reset_state();
        assert!(p.step(&st, 12, &[0.0; 4]).is_err());
        assert!(p.step(&st, 1, &[0.0; 3]).is_err());
    }

    /// Straight-line re-evaluation of one step from the raw weights.
    #[test]
    fn step_matches_straight_line_formulas() {
        let (_, p) = random_params(Variant::Full, 3, 11);
        let v = [0.3, 0.9, 0.0, 1.0];
        let mut st = p.reset_state();
        st = p.advance(&st, 4, &v);
        let (next, out) = p.step(&st, 7, &v).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (ws, ss, vs, bs) = (
            p.block(Block::WordToS),
            p.block(Block::SToS),
            p.block(Block::VisualToS),
            p.block(Block::BiasS),
        );
        for i in 0..8 {
            let mut z = ws[(i, 7)] + bs[(i, 0)];
            for j in 0..8 {
                z += ss[(i, j)] * st.s[j];
            }
            for j in 0..4 {
                z += vs[(i, j)] * v[j];
            }
            assert!((next.s[i] - sig(z)).abs() < 1e-14);
        }
        let (wu, uu, bu) = (
            p.block(Block::WordToU),
            p.block(Block::UToU),
            p.block(Block::BiasU),
        );
        for i in 0..6 {
            let mut z = wu[(i, 7)] + bu[(i, 0)];
            for j in 0..6 {
                z += uu[(i, j)] * st.u[j];
            }
            assert!((next.u[i] - sig(z)).abs() < 1e-14);
        }
        let (uv, bv) = (p.block(Block::UToRecon), p.block(Block::BiasRecon));
        for i in 0..4 {
            let mut z = bv[(i, 0)];
            for j in 0..6 {
                z += uv[(i, j)] * next.u[j];
            }
            assert!((out.recon[i] - sig(z)).abs() < 1e-14);
        }
        assert_eq!(next.context, vec![4, 7]);
    }

    /// Brute force: exponentiate raw logits and normalize per class by hand.
    #[test]
    fn factorization_matches_brute_force() {
        let vocab = toy_vocab(5, 2);
        let mut rng = SeededRng::new(8);
        let dims = ModelDims {
            s_dim: 4,
            u_dim: 4,
            maxent_hash_size: 31,
            ..ModelDims::new(vocab.classes(), 3, Variant::Full)
        };
        let mut p = ModelParams::init(dims, vocab.classes(), &mut rng).unwrap();
        for b in [Block::MaxEntClass, Block::MaxEntWord, Block::BiasWord] {
            let (r, c) = p.block(b).shape();
            p.set_block(b, DenseMatrix::random_uniform(r, c, 1.0, &mut rng))
                .unwrap();
        }
        let s: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
        let u: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
        let ctx = vec![2, 3];
        let dist = p.word_distribution(&s, &u, &ctx);

        let keys = p.maxent_keys(&ctx);
        assert_eq!(keys.len(), 3);
        let cls = p.classes();
        let dotp = |m: &DenseMatrix, r: usize, x: &[f64]| {
            (0..x.len()).map(|j| m[(r, j)] * x[j]).sum::<f64>()
        };
        let class_logit = |c: usize| {
            let mut z = p.block(Block::BiasClass)[(c, 0)]
                + dotp(p.block(Block::SToClass), c, &s)
                + dotp(p.block(Block::UToClass), c, &u);
            for &k in &keys {
                z += p.block(Block::MaxEntClass)[((k.wrapping_add(c as u64) % 31) as usize, 0)];
            }
            z
        };
        let word_logit = |w: usize| {
            let mut z = p.block(Block::BiasWord)[(w, 0)]
                + dotp(p.block(Block::SToWord), w, &s)
                + dotp(p.block(Block::UToWord), w, &u);
            for &k in &keys {
                z += p.block(Block::MaxEntWord)[((k.wrapping_add(w as u64) % 31) as usize, 0)];
            }
            z
        };
        let zc: f64 = (0..cls.class_count()).map(|c| class_logit(c).exp()).sum();
        for w in 0..5 {
            let c = cls.class_of(w);
            let zw: f64 = cls.members(c).iter().map(|&m| word_logit(m).exp()).sum();
            let expect = class_logit(c).exp() / zc * word_logit(w).exp() / zw;
            assert!((dist[w] - expect).abs() < 1e-14, "w={w}");
        }
    }

    #[test]
    fn maxent_disabled_equals_plain_rnn() {
        let (_, with) = random_params(Variant::Full, 0, 21);
        let st = with.reset_state();
        let s = st.s.clone();
        let dist = with.word_distribution(&s, &st.u, &[3, 4]);
        let dist_no_ctx = with.word_distribution(&s, &st.u, &[]);
        assert_eq!(dist, dist_no_ctx);
        assert!(with.block(Block::MaxEntClass).is_empty());
    }

    #[test]
    fn minimal_sentence_has_one_term() {
        let (vocab, p) = random_params(Variant::Full, 3, 5);
        let sent = encode(&[], &vocab);
        let (total, steps) = p.sentence_loss(&[0.0, 1.0, 0.0, 1.0], &sent, 1.0).unwrap();
        assert_eq!(steps.len(), 1);
        assert!(total.word_nll > 0.0 && total.recon_loss > 0.0);
    }

    #[test]
    fn lambda_zero_drops_reconstruction() {
        let (vocab, p) = random_params(Variant::Full, 3, 6);
        let toks: Vec<String> = ["w0", "w3", "w1"].iter().map(|s| s.to_string()).collect();
        let sent = encode(&toks, &vocab);
        let (total, steps) = p.sentence_loss(&[0.2, 1.0, 0.0, 0.7], &sent, 0.0).unwrap();
        let nll: f64 = steps.iter().map(|s| s.word_nll).sum();
        assert!((total.joint - nll).abs() < 1e-12);
        let (with, _) = p.sentence_loss(&[0.2, 1.0, 0.0, 0.7], &sent, 2.0).unwrap();
        assert!((with.joint - (nll + 2.0 * total.recon_loss)).abs() < 1e-12);
    }

    #[test]
    fn loss_independent_of_previous_sentences() {
        let (vocab, p) = random_params(Variant::Full, 3, 7);
        let a = encode(&["w2".to_string(), "w5".to_string()], &vocab);
        let b = encode(&["w1".to_string()], &vocab);
        let v = [1.0, 0.0, 1.0, 0.0];
        let first = p.sentence_loss(&v, &a, 1.0).unwrap().0;
        p.sentence_loss(&v, &b, 1.0).unwrap();
        let again = p.sentence_loss(&v, &a, 1.0).unwrap().0;
        assert_eq!(first, again);
    }

    #[test]
    fn activations_stay_bounded_for_long_sentences() {
        let (_, mut p) = random_params(Variant::Full, 3, 9);
        // large recurrent weights push pre-activations into the clip range
        for b in [Block::SToS, Block::UToU] {
            for x in p.block_mut(b).as_mut_slice() {
                *x *= 400.0;
            }
        }
        let mut st = p.reset_state();
        for t in 0..2000 {
            st = p.advance(&st, 2 + t % 10, &[1.0, 1.0, 0.0, 0.0]);
            assert!(st.s.iter().chain(&st.u).all(|&x| x > 0.0 && x < 1.0));
        }
    }
}
