//! Adapter pool, text-queried relevance, instance-adaptive aggregation and
//! the distillation losses built on top of it.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{clip_logits_tape, gaussian, AdapterStack, FrozenEncoder, PromptBank};
use crate::error::{Result, SecaError};
use crate::numkernel::{fnv_step, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillStrategy {
    Seq,
    ClipKd,
    Vanilla,
    AvgKd,
    SgAkt,
}

impl DistillStrategy {
    pub const ALL: [DistillStrategy; 5] = [
        DistillStrategy::Seq,
        DistillStrategy::ClipKd,
        DistillStrategy::Vanilla,
        DistillStrategy::AvgKd,
        DistillStrategy::SgAkt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistillStrategy::Seq => "seq",
            DistillStrategy::ClipKd => "clip_kd",
            DistillStrategy::Vanilla => "vanilla",
            DistillStrategy::AvgKd => "avg_kd",
            DistillStrategy::SgAkt => "sg_akt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| SecaError::InvalidConfig(format!("unknown distillation strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub adapters: AdapterStack,
    pub utility: f64,
}

/// Frozen adapter snapshots with their utility scores. `max_size = None`
/// means unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPool {
    entries: Vec<PoolEntry>,
    max_size: Option<usize>,
}

impl AdapterPool {
    pub fn new(max_size: Option<usize>) -> Result<Self> {
        if max_size == Some(0) {
            return Err(SecaError::InvalidConfig("pool_max must be >= 1".into()));
        }
        Ok(AdapterPool {
            entries: Vec::new(),
            max_size,
        })
    }

    pub(crate) fn from_parts(entries: Vec<PoolEntry>, max_size: Option<usize>) -> Self {
        AdapterPool { entries, max_size }
    }

    pub fn max_size(&self) -> Option<usize> {
        self.max_size
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn utilities(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.utility).collect()
    }

    /// `U ← μ·U + (1 − μ)·ᾱ` per entry.
    pub fn update_utilities(&mut self, alpha_mean: &[f64], mu: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(SecaError::InvalidConfig(format!("momentum {mu} outside [0, 1]")));
        }
        if alpha_mean.len() != self.entries.len() {
            return Err(SecaError::ShapeMismatch(format!(
                "{} relevance means for a pool of {}",
                alpha_mean.len(),
                self.entries.len()
            )));
        }
        for (e, &a) in self.entries.iter_mut().zip(alpha_mean) {
            e.utility = mu * e.utility + (1.0 - mu) * a;
        }
        Ok(())
    }

    /// Inserts a frozen copy. A full pool first drops its highest-utility
    /// entry (lowest index on ties); the returned value is that index.
    /// The newcomer starts at `1 / max_size`, or `1 / len` when unbounded.
    pub fn admit_and_prune(&mut self, adapters: AdapterStack) -> Option<usize> {
        let mut removed = None;
        if let Some(max) = self.max_size {
            if self.entries.len() == max {
                let mut best = 0;
                for (i, e) in self.entries.iter().enumerate() {
                    if e.utility > self.entries[best].utility {
                        best = i;
                    }
                }
                self.entries.remove(best);
                removed = Some(best);
            }
        }
        self.entries.push(PoolEntry {
            adapters,
            utility: 0.0,
        });
        let denom = self.max_size.unwrap_or(self.entries.len());
        self.entries.last_mut().expect("just pushed").utility = 1.0 / denom as f64;
        removed
    }

    /// Digest of the pooled adapter weights (utilities excluded).
    pub fn checksum(&self) -> u64 {
        self.entries
            .iter()
            .fold(0x9001, |h, e| fnv_step(h, e.adapters.checksum()))
    }
}

/// Trainable maps into the shared relevance space: `W_S` is `d_T x d_V`,
/// `W_V` is `d_V x d_V`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticProjectors {
    pub w_s: Tensor,
    pub w_v: Tensor,
}

impl SemanticProjectors {
    pub fn random(d_t: usize, d_v: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        SemanticProjectors {
            w_s: gaussian(rng, &[d_t, d_v], std),
            w_v: gaussian(rng, &[d_v, d_v], std),
        }
    }

    pub fn zeros(d_t: usize, d_v: usize) -> Self {
        SemanticProjectors {
            w_s: Tensor::zeros(&[d_t, d_v]),
            w_v: Tensor::zeros(&[d_v, d_v]),
        }
    }
}

/// Features of `xs` under every pooled adapter stack, one `[n, d_V]` tensor
/// per entry.
pub fn pooled_views(enc: &FrozenEncoder, xs: &Tensor, pool: &AdapterPool) -> Result<Vec<Tensor>> {
    if pool.is_empty() {
        return Err(SecaError::EmptyPool);
    }
    pool.entries
        .iter()
        .map(|e| enc.visual_features(xs, Some(&e.adapters)))
        .collect()
}

/// Text features of each label under prompts `P^1..P^s`, one `[n, d_T]`
/// tensor per prompt.
pub fn semantic_vectors(
    enc: &FrozenEncoder,
    labels: &[usize],
    prompts: &PromptBank,
    s: usize,
) -> Result<Vec<Tensor>> {
    if s == 0 {
        return Err(SecaError::MissingPrompt(0));
    }
    (1..=s)
        .map(|i| enc.text_features(labels, prompts.get(i)?))
        .collect()
}

/// Relevance of each view, `[n, |P|]`: the mean over prompts of
/// `LN(S_i) W_S` dotted with `LN(V_p) W_V`.
pub fn relevance_tape(g: &mut Graph, semantic: &[Var], views: &[Var], w_s: Var, w_v: Var) -> Result<Var> {
    if semantic.is_empty() || views.is_empty() {
        return Err(SecaError::InvalidInput("relevance needs semantic vectors and views".into()));
    }
    let mut acc: Option<Var> = None;
    for &s in semantic {
        let ln = g.layernorm_rows(s)?;
        let proj = g.matmul(ln, w_s)?;
        acc = Some(match acc {
            None => proj,
            Some(a) => g.add(a, proj)?,
        });
    }
    let sbar = g.scale(acc.expect("non-empty"), 1.0 / semantic.len() as f64)?;
    let mut cols = Vec::with_capacity(views.len());
    for &v in views {
        let ln = g.layernorm_rows(v)?;
        let proj = g.matmul(ln, w_v)?;
        cols.push(g.row_dot(sbar, proj)?);
    }
    g.concat_cols(&cols)
}

/// `(weights, aggregate)` with `weights = softmax(λ α)` row-wise and
/// `aggregate = Σ_p weights[:, p] · V_p`.
pub fn aggregate_tape(g: &mut Graph, views: &[Var], alpha: Var, lambda: f64) -> Result<(Var, Var)> {
    if !(lambda >= 0.0) {
        return Err(SecaError::InvalidConfig(format!("aggregation scale must be >= 0, got {lambda}")));
    }
    if g.value(alpha).cols() != views.len() {
        return Err(SecaError::ShapeMismatch(format!(
            "{} relevance columns for {} views",
            g.value(alpha).cols(),
            views.len()
        )));
    }
    let scaled = g.scale(alpha, lambda)?;
    let w = g.softmax_rows(scaled, 1.0)?;
    let mut agg: Option<Var> = None;
    for (p, &v) in views.iter().enumerate() {
        let c = g.col(w, p)?;
        let term = g.scale_rows(v, c)?;
        agg = Some(match agg {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok((w, agg.expect("non-empty views")))
}

/// Softmax of the temperature-scaled cosine logits of `features` against
/// the class text features.
pub fn class_probs_tape(g: &mut Graph, features: Var, text: Var, tau: f64) -> Result<Var> {
    let logits = clip_logits_tape(g, features, text, tau)?;
    g.softmax_rows(logits, 1.0)
}

/// Cross-entropy of the aggregated feature against the class text features.
pub fn loss_agg_tape(g: &mut Graph, agg: Var, labels: &[usize], text: Var, tau: f64) -> Result<Var> {
    let logits = clip_logits_tape(g, agg, text, tau)?;
    g.cross_entropy_logits(logits, labels)
}

/// KL from the (stop-gradient) aggregated teacher to the student features,
/// both scored against the same text features at `tau_prime`.
pub fn loss_sgakt_tape(
    g: &mut Graph,
    agg: Var,
    student: Var,
    text: Var,
    tau_prime: f64,
    eps: f64,
) -> Result<Var> {
    if !(tau_prime > 0.0) {
        return Err(SecaError::InvalidConfig(format!(
            "distillation temperature must be positive, got {tau_prime}"
        )));
    }
    let teacher = {
        let mut tg = Graph::new();
        let a = tg.constant(g.value(agg).clone())?;
        let t = tg.constant(g.value(text).clone())?;
        let p = class_probs_tape(&mut tg, a, t, tau_prime)?;
        tg.value(p).clone()
    };
    let s = class_probs_tape(g, student, text, tau_prime)?;
    g.kl_rows(&teacher, s, eps)
}

/// Teacher for one strategy: aggregated feature and raw relevance (the
/// latter only for the full method; `None` for `Seq`).
pub struct Teacher {
    pub agg: Var,
    pub weights: Var,
    pub alpha: Var,
}

/// Builds the teacher branch. `views` must already be the strategy's
/// teacher views: pooled views for `SgAkt`/`AvgKd`, the previous snapshot
/// for `Vanilla`, adapter-free features for `ClipKd`. Non-adaptive
/// strategies use `α ≡ 0`, which makes their weights exactly uniform.
pub fn build_teacher(
    g: &mut Graph,
    strategy: DistillStrategy,
    views: &[Var],
    semantic: &[Var],
    projectors: Option<(Var, Var)>,
    lambda: f64,
) -> Result<Option<Teacher>> {
    if strategy == DistillStrategy::Seq || views.is_empty() {
        return Ok(None);
    }
    let n = g.value(views[0]).rows();
    let alpha = match (strategy, projectors) {
        (DistillStrategy::SgAkt, Some((w_s, w_v))) => relevance_tape(g, semantic, views, w_s, w_v)?,
        (DistillStrategy::SgAkt, None) => {
            return Err(SecaError::InvalidInput("sg_akt needs projectors".into()))
        }
        _ => g.constant(Tensor::zeros(&[n, views.len()]))?,
    };
    let (weights, agg) = aggregate_tape(g, views, alpha, lambda)?;
    Ok(Some(Teacher { agg, weights, alpha }))
}

/// Column means of a `[n, P]` relevance matrix.
pub fn batch_mean(alpha: &Tensor) -> Vec<f64> {
    let (n, p) = (alpha.rows(), alpha.cols());
    (0..p)
        .map(|j| (0..n).map(|i| alpha.get(i, j)).sum::<f64>() / n as f64)
        .collect()
}

fn constants(g: &mut Graph, ts: &[Tensor]) -> Result<Vec<Var>> {
    ts.iter().map(|t| g.constant(t.clone())).collect()
}

/// Value-level relevance scores, `[n, |P|]`.
pub fn relevance_scores(semantic: &[Tensor], views: &[Tensor], proj: &SemanticProjectors) -> Result<Tensor> {
    let mut g = Graph::new();
    let s = constants(&mut g, semantic)?;
    let v = constants(&mut g, views)?;
    let w_s = g.constant(proj.w_s.clone())?;
    let w_v = g.constant(proj.w_v.clone())?;
    let a = relevance_tape(&mut g, &s, &v, w_s, w_v)?;
    Ok(g.value(a).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceResult {
    pub alpha: Tensor,
    pub weights: Tensor,
    pub aggregated: Tensor,
}

/// Value-level aggregation of views under relevance `alpha`.
pub fn aggregate(views: &[Tensor], alpha: &Tensor, lambda: f64) -> Result<RelevanceResult> {
    if views.is_empty() {
        return Err(SecaError::EmptyPool);
    }
    let mut g = Graph::new();
    let v = constants(&mut g, views)?;
    let a = g.constant(alpha.clone())?;
    let (w, agg) = aggregate_tape(&mut g, &v, a, lambda)?;
    Ok(RelevanceResult {
        alpha: alpha.clone(),
        weights: g.value(w).clone(),
        aggregated: g.value(agg).clone(),
    })
}

/// Value-level aggregation loss (batch mean).
pub fn loss_agg(agg: &Tensor, labels: &[usize], text: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(agg.clone())?;
    let t = g.constant(text.clone())?;
    let l = loss_agg_tape(&mut g, a, labels, t, tau)?;
    Ok(g.scalar(l))
}

/// Value-level distillation loss (batch mean).
pub fn loss_sgakt(agg: &Tensor, student: &Tensor, text: &Tensor, tau_prime: f64, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(agg.clone())?;
    let s = g.constant(student.clone())?;
    let t = g.constant(text.clone())?;
    let l = loss_sgakt_tape(&mut g, a, s, t, tau_prime, eps)?;
    Ok(g.scalar(l))
}

/// Inputs shared by every distillation strategy.
#[derive(Clone, Copy)]
pub struct DistillInputs<'a> {
    pub student: &'a Tensor,
    pub text: &'a Tensor,
    /// Views under each pooled adapter.
    pub pool_views: &'a [Tensor],
    /// Adapter-free features.
    pub frozen: &'a Tensor,
    /// Features under the previous task's adapter snapshot, if any.
    pub previous: Option<&'a Tensor>,
    pub semantic: &'a [Tensor],
    pub projectors: &'a SemanticProjectors,
    pub lambda: f64,
    pub tau_prime: f64,
    pub eps: f64,
}

/// Distillation loss of one strategy. `Seq` and a `Vanilla` request
/// without a previous snapshot both give zero.
pub fn distill_variant(strategy: DistillStrategy, inp: &DistillInputs<'_>) -> Result<f64> {
    let views: Vec<Tensor> = match strategy {
        DistillStrategy::Seq => return Ok(0.0),
        DistillStrategy::ClipKd => vec![inp.frozen.clone()],
        DistillStrategy::Vanilla => match inp.previous {
            Some(p) => vec![p.clone()],
            None => return Ok(0.0),
        },
        DistillStrategy::AvgKd | DistillStrategy::SgAkt => {
            if inp.pool_views.is_empty() {
                return Err(SecaError::EmptyPool);
            }
            inp.pool_views.to_vec()
        }
    };
    let mut g = Graph::new();
    let v = constants(&mut g, &views)?;
    let s = constants(&mut g, inp.semantic)?;
    let w_s = g.constant(inp.projectors.w_s.clone())?;
    let w_v = g.constant(inp.projectors.w_v.clone())?;
    let teacher = build_teacher(&mut g, strategy, &v, &s, Some((w_s, w_v)), inp.lambda)?
        .expect("non-seq strategy with views");
    let student = g.constant(inp.student.clone())?;
    let text = g.constant(inp.text.clone())?;
    let l = loss_sgakt_tape(&mut g, teacher.agg, student, text, inp.tau_prime, inp.eps)?;
    Ok(g.scalar(l))
}
