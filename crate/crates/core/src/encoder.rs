//! Frozen stand-in encoders, residual adapters, and prompt-conditioned
//! text features.
//!
//! The visual backbone is a stack of seeded residual feed-forward blocks.
//! Each block computes `h + FFN(h) + A_l(h)`, where `A_l` is the optional
//! bottleneck adapter for that layer. The text encoder mean-pools the prompt
//! tokens together with the class token, runs one frozen residual
//! feed-forward unit and L2-normalizes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SecaError};
use crate::numkernel::ops::{gelu, normalize_rows};
use crate::numkernel::{fnv_step, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub layers: usize,
    /// Adapter bottleneck width.
    pub width: usize,
    pub prompt_tokens: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_v: 64,
            d_t: 64,
            layers: 4,
            width: 16,
            prompt_tokens: 4,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("layers", self.layers),
            ("width", self.width),
            ("prompt_tokens", self.prompt_tokens),
        ] {
            if v == 0 {
                return Err(SecaError::InvalidConfig(format!("encoder.{name} must be >= 1")));
            }
        }
        if self.d_t < 2 || self.d_v < 2 {
            return Err(SecaError::InvalidConfig(
                "encoder.d_v and encoder.d_t must be >= 2 (layer normalization)".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("shape matches")
}

/// One residual feed-forward unit: `x -> W2 · gelu(W1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FeedForward {
    fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let hidden = 4 * d;
        FeedForward {
            w1: gaussian(rng, &[d, hidden], (1.0 / d as f64).sqrt()),
            b1: gaussian(rng, &[1, hidden], 0.1),
            w2: gaussian(rng, &[hidden, d], 0.5 / (hidden as f64).sqrt()),
            b2: gaussian(rng, &[1, d], 0.1),
        }
    }

    /// Rows of `h` through the unit (no residual).
    pub fn apply(&self, h: &Tensor) -> Tensor {
        let pre = h.matmul(&self.w1).add_row(&self.b1).map(gelu);
        pre.matmul(&self.w2).add_row(&self.b2)
    }

    fn apply_tape(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let w1 = g.constant(self.w1.clone())?;
        let b1 = g.constant(self.b1.clone())?;
        let w2 = g.constant(self.w2.clone())?;
        let b2 = g.constant(self.b2.clone())?;
        let pre = g.matmul(h, w1)?;
        let pre = g.add_row(pre, b1)?;
        let act = g.gelu(pre)?;
        let out = g.matmul(act, w2)?;
        g.add_row(out, b2)
    }

    fn checksum(&self, h: u64) -> u64 {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .fold(h, |h, t| fnv_step(h, t.checksum()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualBackbone {
    pub blocks: Vec<FeedForward>,
}

/// Bottleneck adapter `up · gelu(down · h + b_down) + b_up`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub down: Tensor,
    pub b_down: Tensor,
    pub up: Tensor,
    pub b_up: Tensor,
}

impl Adapter {
    pub fn apply(&self, h: &Tensor) -> Tensor {
        let mid = h.matmul(&self.down).add_row(&self.b_down).map(gelu);
        mid.matmul(&self.up).add_row(&self.b_up)
    }
}

/// One adapter per backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack {
    pub layers: Vec<Adapter>,
}

impl AdapterStack {
    /// Down-projections are seeded Gaussians; up-projections start at zero so
    /// the fresh stack leaves the backbone function unchanged.
    pub fn new(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, w) = (config.d_v, config.width);
        let layers = (0..config.layers)
            .map(|_| Adapter {
                down: gaussian(rng, &[d, w], (1.0 / d as f64).sqrt()),
                b_down: Tensor::zeros(&[1, w]),
                up: Tensor::zeros(&[w, d]),
                b_up: Tensor::zeros(&[1, d]),
            })
            .collect();
        AdapterStack { layers }
    }

    /// Flat view in a fixed order: per layer `down, b_down, up, b_up`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|a| [&a.down, &a.b_down, &a.up, &a.b_up])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|a| [&mut a.down, &mut a.b_down, &mut a.up, &mut a.b_up])
            .collect()
    }

    pub fn checksum(&self) -> u64 {
        self.tensors()
            .iter()
            .fold(0x5eca, |h, t| fnv_step(h, t.checksum()))
    }
}

/// Tape handles for a trainable adapter stack, in [`AdapterStack::tensors`] order.
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub vars: Vec<Var>,
}

impl AdapterVars {
    pub fn params(g: &mut Graph, stack: &AdapterStack) -> Result<Self> {
        let vars = stack
            .tensors()
            .into_iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterVars { vars })
    }

    pub fn constants(g: &mut Graph, stack: &AdapterStack) -> Result<Self> {
        let vars = stack
            .tensors()
            .into_iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdapterVars { vars })
    }

    fn layer(&self, l: usize) -> [Var; 4] {
        let v = &self.vars[4 * l..4 * l + 4];
        [v[0], v[1], v[2], v[3]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub unit: FeedForward,
}

/// Fixed `CLASS_y` embedding per class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTokenTable {
    pub tokens: Tensor,
}

impl ClassTokenTable {
    /// Seeded token table. When a superclass assignment is given, each
    /// token is `sqrt(rho) · center + sqrt(1 - rho) · noise`, so classes that
    /// share a superclass have correlated names.
    pub fn generate(
        num_classes: usize,
        d_t: usize,
        seed: u64,
        superclass: Option<&[usize]>,
        rho: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_c1a5);
        let tokens = match superclass {
            Some(sc) => {
                let groups = sc.iter().copied().max().map_or(0, |m| m + 1);
                let centers = gaussian(&mut rng, &[groups.max(1), d_t], 1.0);
                let noise = gaussian(&mut rng, &[num_classes, d_t], 1.0);
                let (a, b) = (rho.sqrt(), (1.0 - rho).max(0.0).sqrt());
                let mut t = Tensor::zeros(&[num_classes, d_t]);
                for k in 0..num_classes {
                    for j in 0..d_t {
                        t.set(k, j, a * centers.get(sc[k], j) + b * noise.get(k, j));
                    }
                }
                t
            }
            None => gaussian(&mut rng, &[num_classes, d_t], 1.0),
        };
        ClassTokenTable { tokens }
    }

    pub fn num_classes(&self) -> usize {
        self.tokens.rows()
    }
}

/// Everything that never trains: backbone, text encoder and class tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    pub config: EncoderConfig,
    pub backbone: VisualBackbone,
    pub text: TextEncoder,
    pub class_tokens: ClassTokenTable,
}

impl FrozenEncoder {
    pub fn new(config: EncoderConfig, class_tokens: ClassTokenTable) -> Result<Self> {
        config.validate()?;
        if class_tokens.tokens.cols() != config.d_t {
            return Err(SecaError::ShapeMismatch(format!(
                "class tokens have width {}, d_t is {}",
                class_tokens.tokens.cols(),
                config.d_t
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = (0..config.layers)
            .map(|_| FeedForward::random(&mut rng, config.d_v))
            .collect();
        let unit = FeedForward::random(&mut rng, config.d_t);
        Ok(FrozenEncoder {
            config,
            backbone: VisualBackbone { blocks },
            text: TextEncoder { unit },
            class_tokens,
        })
    }

    pub fn checksum(&self) -> u64 {
        let h = self
            .backbone
            .blocks
            .iter()
            .fold(0xf00d, |h, b| b.checksum(h));
        let h = self.text.unit.checksum(h);
        fnv_step(h, self.class_tokens.tokens.checksum())
    }

    fn check_adapters(&self, adapters: &AdapterStack) -> Result<()> {
        if adapters.layers.len() != self.backbone.blocks.len() {
            return Err(SecaError::ShapeMismatch(format!(
                "{} adapters for {} blocks",
                adapters.layers.len(),
                self.backbone.blocks.len()
            )));
        }
        Ok(())
    }

    /// Unit-norm visual features for a batch of inputs (rows of `xs`).
    pub fn visual_features(&self, xs: &Tensor, adapters: Option<&AdapterStack>) -> Result<Tensor> {
        if xs.cols() != self.config.d_v {
            return Err(SecaError::ShapeMismatch(format!(
                "input width {} but d_v is {}",
                xs.cols(),
                self.config.d_v
            )));
        }
        if let Some(a) = adapters {
            self.check_adapters(a)?;
        }
        let mut h = Tensor::matrix(xs.rows(), xs.cols(), xs.data().to_vec())?;
        for (l, block) in self.backbone.blocks.iter().enumerate() {
            let ffn = block.apply(&h);
            let mut next = h.zip_map(&ffn, |a, b| a + b);
            if let Some(stack) = adapters {
                let a = stack.layers[l].apply(&h);
                next = next.zip_map(&a, |x, y| x + y);
            }
            h = next;
        }
        if !h.is_finite() {
            return Err(SecaError::NonFinite("visual forward".into()));
        }
        normalize_rows(&h)
    }

    /// Single-input form of [`Self::visual_features`].
    pub fn visual_forward(&self, x: &[f64], adapters: Option<&AdapterStack>) -> Result<Vec<f64>> {
        let xs = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.visual_features(&xs, adapters)?.into_data())
    }

    /// Tape version of [`Self::visual_features`] with trainable (or constant)
    /// adapter handles.
    pub fn visual_features_tape(
        &self,
        g: &mut Graph,
        xs: &Tensor,
        adapters: Option<&AdapterVars>,
    ) -> Result<Var> {
        if xs.cols() != self.config.d_v {
            return Err(SecaError::ShapeMismatch(format!(
                "input width {} but d_v is {}",
                xs.cols(),
                self.config.d_v
            )));
        }
        let x = Tensor::matrix(xs.rows(), xs.cols(), xs.data().to_vec())?;
        let mut h = g.constant(x)?;
        for (l, block) in self.backbone.blocks.iter().enumerate() {
            let ffn = block.apply_tape(g, h)?;
            let mut next = g.add(h, ffn)?;
            if let Some(av) = adapters {
                let [down, b_down, up, b_up] = av.layer(l);
                let mid = g.matmul(h, down)?;
                let mid = g.add_row(mid, b_down)?;
                let mid = g.gelu(mid)?;
                let a = g.matmul(mid, up)?;
                let a = g.add_row(a, b_up)?;
                next = g.add(next, a)?;
            }
            h = next;
        }
        g.normalize_rows(h)
    }

    fn check_prompt(&self, prompt: &Tensor) -> Result<()> {
        if prompt.rows() != self.config.prompt_tokens || prompt.cols() != self.config.d_t {
            return Err(SecaError::ShapeMismatch(format!(
                "prompt {:?}, expected [{}, {}]",
                prompt.shape(),
                self.config.prompt_tokens,
                self.config.d_t
            )));
        }
        Ok(())
    }

    fn check_classes(&self, class_ids: &[usize]) -> Result<()> {
        let n = self.class_tokens.num_classes();
        match class_ids.iter().find(|&&c| c >= n) {
            Some(&c) => Err(SecaError::UnknownClass(c)),
            None => Ok(()),
        }
    }

    /// Unit-norm text features `F_T([P ; CLASS_y])`, one row per class id.
    pub fn text_features(&self, class_ids: &[usize], prompt: &Tensor) -> Result<Tensor> {
        self.check_prompt(prompt)?;
        self.check_classes(class_ids)?;
        let m = prompt.rows() as f64;
        let d = self.config.d_t;
        let mut pbar = vec![0.0; d];
        for i in 0..prompt.rows() {
            for (o, v) in pbar.iter_mut().zip(prompt.row(i)) {
                *o += v;
            }
        }
        let pbar: Vec<f64> = pbar.iter().map(|v| v / m * (m / (m + 1.0))).collect();
        let tokens = self.class_tokens.tokens.select_rows(class_ids);
        let pooled = tokens
            .map(|v| v * (1.0 / (m + 1.0)))
            .add_row(&Tensor::vector(pbar));
        let h = pooled.zip_map(&self.text.unit.apply(&pooled), |a, b| a + b);
        normalize_rows(&h)
    }

    pub fn text_forward(&self, class_id: usize, prompt: &Tensor) -> Result<Vec<f64>> {
        Ok(self.text_features(&[class_id], prompt)?.into_data())
    }

    /// Tape version of [`Self::text_features`]; the prompt may be a trainable
    /// leaf or a constant.
    pub fn text_features_tape(&self, g: &mut Graph, class_ids: &[usize], prompt: Var) -> Result<Var> {
        self.check_prompt(g.value(prompt))?;
        self.check_classes(class_ids)?;
        let m = g.value(prompt).rows() as f64;
        let pbar = g.mean_rows(prompt)?;
        let pbar = g.scale(pbar, m / (m + 1.0))?;
        let tokens = self
            .class_tokens
            .tokens
            .select_rows(class_ids)
            .map(|v| v * (1.0 / (m + 1.0)));
        let tokens = g.constant(tokens)?;
        let pooled = g.add_row(tokens, pbar)?;
        let ffn = self.text.unit.apply_tape(g, pooled)?;
        let h = g.add(pooled, ffn)?;
        g.normalize_rows(h)
    }
}

/// Cosine similarities between rows of `features` and rows of `classes`,
/// divided by `tau`.
pub fn clip_logits(features: &Tensor, classes: &Tensor, tau: f64) -> Result<Tensor> {
    if classes.rows() == 0 {
        return Err(SecaError::InvalidInput("empty class set".into()));
    }
    if !(tau > 0.0) {
        return Err(SecaError::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    let f = normalize_rows(features)?;
    let c = normalize_rows(classes)?;
    Ok(f.matmul_nt(&c).map(|v| v / tau))
}

/// Tape version of [`clip_logits`].
pub fn clip_logits_tape(g: &mut Graph, features: Var, classes: Var, tau: f64) -> Result<Var> {
    if g.value(classes).rows() == 0 {
        return Err(SecaError::InvalidInput("empty class set".into()));
    }
    if !(tau > 0.0) {
        return Err(SecaError::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    let f = g.normalize_rows(features)?;
    let c = g.normalize_rows(classes)?;
    let sims = g.matmul_nt(f, c)?;
    g.scale(sims, 1.0 / tau)
}

/// Prompts `P^1..P^s`; the last one is trainable while its task is active.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptBank {
    prompts: Vec<Tensor>,
    active: bool,
}

impl PromptBank {
    pub fn new() -> Self {
        PromptBank::default()
    }

    pub(crate) fn from_parts(prompts: Vec<Tensor>, active: bool) -> Self {
        PromptBank { prompts, active }
    }

    /// Starts a new task with a freshly drawn prompt.
    pub fn begin_task(&mut self, config: &EncoderConfig, rng: &mut ChaCha8Rng, init_std: f64) {
        self.prompts
            .push(gaussian(rng, &[config.prompt_tokens, config.d_t], init_std));
        self.active = true;
    }

    pub fn finish_task(&mut self) {
        self.active = false;
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Prompt of task `task` (1-based).
    pub fn get(&self, task: usize) -> Result<&Tensor> {
        task.checked_sub(1)
            .and_then(|i| self.prompts.get(i))
            .ok_or(SecaError::MissingPrompt(task))
    }

    pub fn all(&self) -> &[Tensor] {
        &self.prompts
    }

    pub fn active_mut(&mut self) -> Option<&mut Tensor> {
        if self.active {
            self.prompts.last_mut()
        } else {
            None
        }
    }

    /// Checksum over the prompts of completed tasks only.
    pub fn frozen_checksum(&self) -> u64 {
        let n = if self.active {
            self.prompts.len() - 1
        } else {
            self.prompts.len()
        };
        self.prompts[..n]
            .iter()
            .fold(0xbeef, |h, t| fnv_step(h, t.checksum()))
    }
}
