//! Task-sequential training, hybrid inference and the evaluation protocol.

mod adam;
pub mod checkpoint;
mod config;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use adam::{Adam, Moments};
pub use config::{BetaSchedule, DataSource, PoolMax, RunConfig};

use crate::datastream::{gen_synthetic, load_feature_bank, LabeledSet, Task, TaskStream};
use crate::encoder::{clip_logits_tape, AdapterStack, AdapterVars, ClassTokenTable, FrozenEncoder, PromptBank};
use crate::error::{Result, SecaError};
use crate::numkernel::{Graph, Tensor, Var};
use crate::replay::ReplayStore;
use crate::sevpr::{
    affinity_matrix, affinity_tape, linear_logits_tape, loss_ce_v_tape, loss_reg_tape, refine_prototypes,
    refine_tape, AffinityModel, ClassifierVariant, LinearHead, PrototypeBank,
};
use crate::sgakt::{
    batch_mean, build_teacher, class_probs_tape, loss_agg_tape, loss_sgakt_tape, pooled_views, AdapterPool,
    DistillStrategy, SemanticProjectors,
};

const REPLAY_STREAM: u64 = 0x7e91_a4f3_0c2d_5b68;

/// Builds the task stream a config points at.
pub fn load_stream(config: &RunConfig) -> Result<TaskStream> {
    let stream = match &config.data {
        DataSource::Synthetic(spec) => gen_synthetic(spec)?,
        DataSource::FeatureBank { path, split } => load_feature_bank(path, split)?,
    };
    if stream.dim != config.encoder.d_v {
        return Err(SecaError::InvalidConfig(format!(
            "data has dimension {}, encoder.d_v is {}",
            stream.dim, config.encoder.d_v
        )));
    }
    Ok(stream)
}

/// Trainable tensor addressed by an optimizer update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamId {
    /// Index into [`AdapterStack::tensors`].
    Adapter(usize),
    /// Prompt of a task (1-based).
    Prompt(usize),
    ProjectorS,
    ProjectorV,
    Affinity,
    LinearW(usize),
    LinearB(usize),
}

impl ParamId {
    pub fn name(self) -> String {
        match self {
            ParamId::Adapter(k) => format!("adapter.{}.{}", k / 4, k % 4),
            ParamId::Prompt(s) => format!("prompt.{s}"),
            ParamId::ProjectorS => "w_s".into(),
            ParamId::ProjectorV => "w_v".into(),
            ParamId::Affinity => "h_proj".into(),
            ParamId::LinearW(b) => format!("linear.w.{b}"),
            ParamId::LinearB(b) => format!("linear.b.{b}"),
        }
    }
}

/// Values of every loss term for one batch. `kl` is unweighted; the total
/// adds it scaled by `beta`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce_text: f64,
    pub agg: f64,
    pub kl: f64,
    pub beta: f64,
    pub ce_visual: f64,
    pub reg: f64,
    pub replay_text: f64,
    pub replay_visual: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.ce_text
            + self.agg
            + self.beta * self.kl
            + self.ce_visual
            + self.reg
            + self.replay_text
            + self.replay_visual
    }

    fn accumulate(&mut self, o: &LossBreakdown, w: f64) {
        self.ce_text += w * o.ce_text;
        self.agg += w * o.agg;
        self.kl += w * o.kl;
        self.beta = o.beta;
        self.ce_visual += w * o.ce_visual;
        self.reg += w * o.reg;
        self.replay_text += w * o.replay_text;
        self.replay_visual += w * o.replay_visual;
        self.total += w * o.total;
    }
}

/// Per-task quantities fixed for the whole task: frozen teacher views,
/// old-prompt semantics, prototype tables and label positions.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub task: usize,
    pub classes: Vec<usize>,
    pub seen: Vec<usize>,
    pub train: LabeledSet,
    /// Position of each training label within `classes`.
    task_idx: Vec<usize>,
    /// Rows of `classes` within `seen`.
    task_in_seen: Vec<usize>,
    teacher_views: Vec<Tensor>,
    old_semantic: Vec<Tensor>,
    raw_seen: Option<Tensor>,
    snapshot_old: Option<Tensor>,
    fixed_task: Option<Tensor>,
    fixed_seen: Option<Tensor>,
    replay_active: bool,
}

impl TaskContext {
    pub fn replay_active(&self) -> bool {
        self.replay_active
    }
}

/// Outcome of one task of training.
#[derive(Debug, Clone, Serialize)]
pub struct TaskSummary {
    pub task: usize,
    pub steps: usize,
    /// Mean losses over the final epoch.
    pub final_losses: LossBreakdown,
    pub pool_size: usize,
    pub pool_removed: Option<usize>,
}

struct Forward {
    graph: Graph,
    total: Var,
    alpha: Option<Var>,
    params: Vec<(ParamId, Var)>,
    losses: LossBreakdown,
}

/// Complete learner state between optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: RunConfig,
    pub encoder: FrozenEncoder,
    pub prompts: PromptBank,
    pub adapters: AdapterStack,
    pub previous: Option<AdapterStack>,
    pub pool: AdapterPool,
    pub projectors: SemanticProjectors,
    pub affinity: AffinityModel,
    pub prototypes: PrototypeBank,
    pub linear: LinearHead,
    pub replay: ReplayStore,
    pub adam: Adam,
    /// Classes of each completed task, in order.
    pub task_classes: Vec<Vec<usize>>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) replay_rng: ChaCha8Rng,
}

fn class_probs(f: &Tensor, c: &Tensor, tau: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let fv = g.constant(f.clone())?;
    let cv = g.constant(c.clone())?;
    let p = class_probs_tape(&mut g, fv, cv, tau)?;
    Ok(g.value(p).clone())
}

fn positions(of: &[usize], within: &[usize]) -> Result<Vec<usize>> {
    of.iter()
        .map(|y| within.iter().position(|c| c == y).ok_or(SecaError::UnknownClass(*y)))
        .collect()
}

impl TrainState {
    pub fn new(config: RunConfig, stream: &TaskStream) -> Result<Self> {
        config.validate()?;
        if stream.dim != config.encoder.d_v {
            return Err(SecaError::InvalidConfig(format!(
                "data has dimension {}, encoder.d_v is {}",
                stream.dim, config.encoder.d_v
            )));
        }
        let rho = match &config.data {
            DataSource::Synthetic(spec) => spec.rho,
            DataSource::FeatureBank { .. } => 0.0,
        };
        let tokens = ClassTokenTable::generate(
            stream.num_classes,
            config.encoder.d_t,
            config.registry_seed(),
            stream.superclass.as_deref(),
            rho,
        );
        let encoder = FrozenEncoder::new(config.encoder.clone(), tokens)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let adapters = AdapterStack::new(&config.encoder, &mut rng);
        let projectors = SemanticProjectors::random(
            config.encoder.d_t,
            config.encoder.d_v,
            config.projector_init_std,
            &mut rng,
        );
        Ok(TrainState {
            encoder,
            prompts: PromptBank::new(),
            adapters,
            previous: None,
            pool: AdapterPool::new(config.pool_max.limit())?,
            projectors,
            affinity: AffinityModel::new(config.encoder.d_t, config.h_init_scale, config.gamma)?,
            prototypes: PrototypeBank::new(),
            linear: LinearHead::default(),
            replay: ReplayStore::new(config.full_covariance),
            adam: Adam::new(config.lr),
            task_classes: Vec::new(),
            rng,
            replay_rng: ChaCha8Rng::seed_from_u64(config.seed ^ REPLAY_STREAM),
            config,
        })
    }

    /// Classes of all completed tasks in introduction order.
    pub fn seen(&self) -> Vec<usize> {
        self.task_classes.concat()
    }

    pub fn tasks_done(&self) -> usize {
        self.task_classes.len()
    }

    /// Opens a task: draws its prompt, writes raw prototypes and freezes
    /// everything the batches of this task consult.
    pub fn begin_task(&mut self, task: &Task) -> Result<TaskContext> {
        if self.prompts.is_active() {
            return Err(SecaError::ProtocolViolation("a task is already in progress".into()));
        }
        let cfg = self.config.clone();
        let before = self.seen();
        if let Some(c) = task.classes.iter().find(|c| before.contains(c)) {
            return Err(SecaError::ProtocolViolation(format!(
                "class {c} already appeared in an earlier task"
            )));
        }
        if task.classes.is_empty() || task.train.is_empty() {
            return Err(SecaError::InvalidInput("task has no classes or no samples".into()));
        }
        if let Some(&c) = task.classes.iter().find(|&&c| c >= self.encoder.class_tokens.num_classes()) {
            return Err(SecaError::UnknownClass(c));
        }
        let task_idx = positions(&task.train.labels, &task.classes)?;
        let classes = task.classes.clone();
        let s = self.task_classes.len() + 1;
        let frozen = self.encoder.visual_features(&task.train.xs, None)?;
        self.prototypes.add_raw_features(&frozen, &task.train.labels, &classes)?;
        self.prompts.begin_task(&cfg.encoder, &mut self.rng, cfg.prompt_init_std);
        self.linear.grow(cfg.encoder.d_v, classes.len());
        if cfg.classifier == ClassifierVariant::CentroidAdapted {
            let adapted = self.encoder.visual_features(&task.train.xs, Some(&self.adapters))?;
            self.prototypes
                .set_adapted_centroids(&adapted, &task.train.labels, &classes)?;
        }
        let mut seen = before.clone();
        seen.extend(&classes);
        let task_in_seen = (before.len()..seen.len()).collect();

        let teacher_views = if s == 1 {
            Vec::new()
        } else {
            match cfg.distill {
                DistillStrategy::Seq => Vec::new(),
                DistillStrategy::SgAkt | DistillStrategy::AvgKd => {
                    pooled_views(&self.encoder, &task.train.xs, &self.pool)?
                }
                DistillStrategy::Vanilla => {
                    let prev = self.previous.as_ref().ok_or(SecaError::EmptyPool)?;
                    vec![self.encoder.visual_features(&task.train.xs, Some(prev))?]
                }
                DistillStrategy::ClipKd => vec![frozen.clone()],
            }
        };
        let mut old_semantic = Vec::new();
        if s > 1 && cfg.distill == DistillStrategy::SgAkt {
            for i in 1..s {
                let t = self.encoder.text_features(&classes, self.prompts.get(i)?)?;
                old_semantic.push(t.select_rows(&task_idx));
            }
        }
        let replay_active = cfg.replay && s > 1 && !self.replay.is_empty();
        let (raw_seen, snapshot_old) = if cfg.classifier == ClassifierVariant::Sevpr {
            let snap = if s > 1 {
                Some(self.prototypes.snapshot_matrix(&before)?)
            } else {
                None
            };
            (Some(self.prototypes.raw_matrix(&seen)?), snap)
        } else {
            (None, None)
        };
        let fixed = |cls: &[usize]| -> Result<Option<Tensor>> {
            match cfg.classifier {
                ClassifierVariant::CentroidClip => self.prototypes.raw_matrix(cls).map(Some),
                ClassifierVariant::CentroidAdapted => self.prototypes.adapted_matrix(cls).map(Some),
                _ => Ok(None),
            }
        };
        let fixed_task = fixed(&classes)?;
        let fixed_seen = if replay_active { fixed(&seen)? } else { None };
        Ok(TaskContext {
            task: s,
            classes,
            seen,
            train: task.train.clone(),
            task_idx,
            task_in_seen,
            teacher_views,
            old_semantic,
            raw_seen,
            snapshot_old,
            fixed_task,
            fixed_seen,
            replay_active,
        })
    }

    fn forward(
        &self,
        ctx: &TaskContext,
        batch: &[usize],
        replay: Option<&(Tensor, Vec<usize>)>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let s = ctx.task;
        let mut g = Graph::new();
        let mut params = Vec::new();
        let labels: Vec<usize> = batch.iter().map(|&i| ctx.task_idx[i]).collect();
        let xs = ctx.train.xs.select_rows(batch);

        let av = AdapterVars::params(&mut g, &self.adapters)?;
        params.extend(av.vars.iter().enumerate().map(|(k, &v)| (ParamId::Adapter(k), v)));
        let f = self.encoder.visual_features_tape(&mut g, &xs, Some(&av))?;
        let prompt = g.param(self.prompts.get(s)?.clone())?;
        params.push((ParamId::Prompt(s), prompt));

        if ctx.replay_active != replay.is_some() {
            return Err(SecaError::InvalidInput("pseudo batch must be given exactly when replay is active".into()));
        }
        let needs_seen = cfg.classifier == ClassifierVariant::Sevpr || ctx.replay_active;
        let text_seen = if needs_seen {
            Some(self.encoder.text_features_tape(&mut g, &ctx.seen, prompt)?)
        } else {
            None
        };
        let text_task = match text_seen {
            Some(t) => g.gather_rows(t, &ctx.task_in_seen)?,
            None => self.encoder.text_features_tape(&mut g, &ctx.classes, prompt)?,
        };
        // supervised terms score all seen classes under replay, the task's otherwise
        let (support_labels, text_support) = if ctx.replay_active {
            let l: Vec<usize> = labels.iter().map(|&k| ctx.task_in_seen[k]).collect();
            (l, text_seen.expect("computed under replay"))
        } else {
            (labels.clone(), text_task)
        };
        let logits = clip_logits_tape(&mut g, f, text_support, cfg.tau)?;
        let ce_text = g.cross_entropy_logits(logits, &support_labels)?;
        let mut terms = vec![ce_text];
        let mut losses = LossBreakdown {
            ce_text: g.scalar(ce_text),
            beta: cfg.beta.at(s),
            ..LossBreakdown::default()
        };

        let mut alpha = None;
        if s > 1 && !ctx.teacher_views.is_empty() {
            let views = ctx
                .teacher_views
                .iter()
                .map(|v| g.constant(v.select_rows(batch)))
                .collect::<Result<Vec<_>>>()?;
            let projectors = if cfg.distill == DistillStrategy::SgAkt {
                let w_s = g.param(self.projectors.w_s.clone())?;
                let w_v = g.param(self.projectors.w_v.clone())?;
                params.push((ParamId::ProjectorS, w_s));
                params.push((ParamId::ProjectorV, w_v));
                Some((w_s, w_v))
            } else {
                None
            };
            let mut semantic = Vec::new();
            if projectors.is_some() {
                for t in &ctx.old_semantic {
                    semantic.push(g.constant(t.select_rows(batch))?);
                }
                let current = g.value(text_task).select_rows(&labels);
                semantic.push(g.constant(current)?);
            }
            if let Some(teacher) = build_teacher(&mut g, cfg.distill, &views, &semantic, projectors, cfg.lambda)? {
                let agg = loss_agg_tape(&mut g, teacher.agg, &labels, text_task, cfg.tau)?;
                let kl = loss_sgakt_tape(&mut g, teacher.agg, f, text_task, cfg.tau_prime, cfg.kl_eps)?;
                losses.agg = g.scalar(agg);
                losses.kl = g.scalar(kl);
                let weighted = g.scale(kl, losses.beta)?;
                terms.push(agg);
                terms.push(weighted);
                if cfg.distill == DistillStrategy::SgAkt {
                    alpha = Some(teacher.alpha);
                }
            }
        }

        // visual branch; `seen_protos` is reused for pseudo features
        let mut seen_protos = None;
        let mut linear_blocks = Vec::new();
        let visual = match cfg.classifier {
            ClassifierVariant::OnlyText => None,
            ClassifierVariant::Sevpr => {
                let z = text_seen.expect("computed for the refined classifier");
                let h = g.param(self.affinity.h.clone())?;
                params.push((ParamId::Affinity, h));
                let m = affinity_tape(&mut g, z, h, cfg.gamma)?;
                let raw = g.constant(ctx.raw_seen.clone().expect("refined classifier has raw rows"))?;
                let refined = refine_tape(&mut g, m, raw)?;
                seen_protos = Some(refined);
                if let Some(snap) = &ctx.snapshot_old {
                    let reg = loss_reg_tape(&mut g, refined, snap)?;
                    losses.reg = g.scalar(reg);
                    terms.push(reg);
                }
                let protos = if ctx.replay_active {
                    refined
                } else {
                    g.gather_rows(refined, &ctx.task_in_seen)?
                };
                Some(loss_ce_v_tape(&mut g, f, protos, &support_labels, cfg.tau)?)
            }
            ClassifierVariant::CentroidClip | ClassifierVariant::CentroidAdapted => {
                let rows = match &ctx.fixed_seen {
                    Some(t) => t,
                    None => ctx.fixed_task.as_ref().expect("centroid rows"),
                };
                let protos = g.constant(rows.clone())?;
                seen_protos = Some(protos);
                Some(loss_ce_v_tape(&mut g, f, protos, &support_labels, cfg.tau)?)
            }
            ClassifierVariant::Linear => {
                let first = if ctx.replay_active { 0 } else { s - 1 };
                for b in first..s {
                    let (w, bias) = &self.linear.blocks[b];
                    let wv = g.param(w.clone())?;
                    let bv = g.param(bias.clone())?;
                    params.push((ParamId::LinearW(b), wv));
                    params.push((ParamId::LinearB(b), bv));
                    linear_blocks.push((wv, bv));
                }
                let logits = linear_logits_tape(&mut g, f, &linear_blocks)?;
                Some(g.cross_entropy_logits(logits, &support_labels)?)
            }
        };
        if let Some(v) = visual {
            losses.ce_visual = g.scalar(v);
            terms.push(v);
        }

        if let Some((pseudo, pseudo_labels)) = replay {
            let idx = positions(pseudo_labels, &ctx.seen)?;
            let pf = g.constant(pseudo.clone())?;
            let t_seen = text_seen.expect("computed under replay");
            let logits = clip_logits_tape(&mut g, pf, t_seen, cfg.tau)?;
            let rt = g.cross_entropy_logits(logits, &idx)?;
            losses.replay_text = g.scalar(rt);
            terms.push(rt);
            let rv = match cfg.classifier {
                ClassifierVariant::OnlyText => None,
                ClassifierVariant::Linear => {
                    let logits = linear_logits_tape(&mut g, pf, &linear_blocks)?;
                    Some(g.cross_entropy_logits(logits, &idx)?)
                }
                _ => {
                    let protos = seen_protos.expect("prototype rows over seen classes");
                    Some(loss_ce_v_tape(&mut g, pf, protos, &idx, cfg.tau)?)
                }
            };
            if let Some(rv) = rv {
                losses.replay_visual = g.scalar(rv);
                terms.push(rv);
            }
        }

        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        losses.total = g.scalar(total);
        if !losses.total.is_finite() {
            return Err(SecaError::NonFinite(format!("training loss at task {s}")));
        }
        Ok(Forward {
            graph: g,
            total,
            alpha,
            params,
            losses,
        })
    }

    fn draw_replay(&mut self, ctx: &TaskContext) -> Result<Option<(Tensor, Vec<usize>)>> {
        if !ctx.replay_active {
            return Ok(None);
        }
        let n = self.config.replay_batch();
        self.replay.sample_batch(n, &mut self.replay_rng).map(Some)
    }

    /// Loss terms of one batch without updating anything. `pseudo` must be
    /// given exactly when replay is active for this task.
    pub fn batch_losses(
        &self,
        ctx: &TaskContext,
        batch: &[usize],
        pseudo: Option<&(Tensor, Vec<usize>)>,
    ) -> Result<LossBreakdown> {
        Ok(self.forward(ctx, batch, pseudo)?.losses)
    }

    /// One optimizer step on the given training rows.
    pub fn step(&mut self, ctx: &TaskContext, batch: &[usize]) -> Result<LossBreakdown> {
        let pseudo = self.draw_replay(ctx)?;
        let fwd = self.forward(ctx, batch, pseudo.as_ref())?;
        let grads = fwd.graph.backward(fwd.total)?;
        for &(id, var) in &fwd.params {
            let grad = grads.wrt(var);
            self.apply_update(id, &grad)?;
        }
        if !self.pool.is_empty() {
            let mean = match fwd.alpha {
                Some(a) => batch_mean(fwd.graph.value(a)),
                None => vec![0.0; self.pool.len()],
            };
            self.pool.update_utilities(&mean, self.config.mu)?;
        }
        Ok(fwd.losses)
    }

    fn apply_update(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let name = id.name();
        let TrainState {
            adam,
            adapters,
            prompts,
            projectors,
            affinity,
            linear,
            ..
        } = self;
        let missing = || SecaError::InvalidInput(format!("no parameter {name}"));
        let target: &mut Tensor = match id {
            ParamId::Adapter(k) => adapters.tensors_mut().into_iter().nth(k).ok_or_else(missing)?,
            ParamId::Prompt(s) if s == prompts.len() => prompts.active_mut().ok_or_else(missing)?,
            ParamId::Prompt(_) => {
                return Err(SecaError::ProtocolViolation(format!("{name} is frozen")));
            }
            ParamId::ProjectorS => &mut projectors.w_s,
            ParamId::ProjectorV => &mut projectors.w_v,
            ParamId::Affinity => &mut affinity.h,
            ParamId::LinearW(b) => &mut linear.blocks.get_mut(b).ok_or_else(missing)?.0,
            ParamId::LinearB(b) => &mut linear.blocks.get_mut(b).ok_or_else(missing)?.1,
        };
        adam.step(&name, target, grad)
    }

    /// Closes a task: snapshots refined prototypes, freezes the prompt,
    /// admits the adapters to the pool and fits replay statistics.
    pub fn finish_task(&mut self, ctx: &TaskContext) -> Result<Option<usize>> {
        if !self.prompts.is_active() || ctx.task != self.task_classes.len() + 1 {
            return Err(SecaError::ProtocolViolation("no matching task in progress".into()));
        }
        if let Some(raw) = &ctx.raw_seen {
            let z = self.encoder.text_features(&ctx.seen, self.prompts.get(ctx.task)?)?;
            let m = affinity_matrix(&z, &self.affinity.h, self.affinity.gamma)?;
            let refined = refine_prototypes(&m, raw)?;
            self.prototypes.set_current(&ctx.seen, &refined)?;
            self.prototypes.snapshot_prototypes();
        }
        if self.config.replay {
            let feats = self.encoder.visual_features(&ctx.train.xs, Some(&self.adapters))?;
            self.replay.fit(&feats, &ctx.train.labels, &ctx.classes)?;
        }
        self.previous = Some(self.adapters.clone());
        let removed = self.pool.admit_and_prune(self.adapters.clone());
        self.prompts.finish_task();
        self.task_classes.push(ctx.classes.clone());
        Ok(removed)
    }

    /// Full training of one task.
    pub fn train_task(&mut self, task: &Task) -> Result<TaskSummary> {
        let ctx = self.begin_task(task)?;
        let n = ctx.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut steps = 0;
        let mut last = LossBreakdown::default();
        for _ in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            last = LossBreakdown::default();
            let batches = order.chunks(self.config.batch_size).count() as f64;
            for batch in order.chunks(self.config.batch_size) {
                let l = self.step(&ctx, batch)?;
                last.accumulate(&l, 1.0 / batches);
                steps += 1;
            }
        }
        let pool_removed = self.finish_task(&ctx)?;
        Ok(TaskSummary {
            task: ctx.task,
            steps,
            final_losses: last,
            pool_size: self.pool.len(),
            pool_removed,
        })
    }

    /// Text-side probabilities averaged over every stored prompt,
    /// `[n, |seen|]`, at the inference temperature.
    pub fn text_average(&self, feats: &Tensor) -> Result<Tensor> {
        let s = self.task_classes.len();
        if s == 0 {
            return Err(SecaError::ProtocolViolation("no task has been learned".into()));
        }
        let seen = self.seen();
        let mut sum = Tensor::zeros(&[feats.rows(), seen.len()]);
        for i in 1..=s {
            let t = self.encoder.text_features(&seen, self.prompts.get(i)?)?;
            sum.add_assign(&class_probs(feats, &t, self.config.tau_prime)?);
        }
        Ok(sum.map(|v| v / s as f64))
    }

    /// Visual-side probabilities of the configured classifier, `[n, |seen|]`.
    pub fn visual_probs(&self, feats: &Tensor) -> Result<Option<Tensor>> {
        let seen = self.seen();
        let tp = self.config.tau_prime;
        Ok(match self.config.classifier {
            ClassifierVariant::OnlyText => None,
            ClassifierVariant::Sevpr => Some(class_probs(feats, &self.prototypes.current_matrix(&seen)?, tp)?),
            ClassifierVariant::CentroidClip => Some(class_probs(feats, &self.prototypes.raw_matrix(&seen)?, tp)?),
            ClassifierVariant::CentroidAdapted => {
                Some(class_probs(feats, &self.prototypes.adapted_matrix(&seen)?, tp)?)
            }
            ClassifierVariant::Linear => {
                let mut g = Graph::new();
                let l = g.constant(self.linear.logits(feats)?)?;
                let p = g.softmax_rows(l, 1.0)?;
                Some(g.value(p).clone())
            }
        })
    }

    /// Hybrid scores over the seen classes (columns in introduction order).
    pub fn class_scores(&self, xs: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let feats = self.encoder.visual_features(xs, Some(&self.adapters))?;
        let mut scores = self.text_average(&feats)?;
        if let Some(v) = self.visual_probs(&feats)? {
            scores.add_assign(&v);
        }
        Ok((self.seen(), scores))
    }

    /// Predicted class ids; ties go to the lowest class id.
    pub fn predict(&self, xs: &Tensor) -> Result<Vec<usize>> {
        let (classes, scores) = self.class_scores(xs)?;
        Ok((0..scores.rows())
            .map(|i| {
                let row = scores.row(i);
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] || (row[j] == row[best] && classes[j] < classes[best]) {
                        best = j;
                    }
                }
                classes[best]
            })
            .collect())
    }
}

/// Accuracy after one task on the union of all test sets seen so far.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskMetric {
    pub task: usize,
    pub seen_classes: usize,
    /// Percent.
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub per_task: Vec<TaskMetric>,
    /// Accuracy after the final task.
    pub last: f64,
    /// Mean of the per-task accuracies.
    pub avg: f64,
}

impl Metrics {
    pub fn from_tasks(per_task: Vec<TaskMetric>) -> Result<Self> {
        let last = per_task
            .last()
            .ok_or_else(|| SecaError::InvalidInput("no task metrics".into()))?
            .acc;
        let avg = per_task.iter().map(|m| m.acc).sum::<f64>() / per_task.len() as f64;
        Ok(Metrics { per_task, last, avg })
    }
}

/// Percentage of matching predictions.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(SecaError::ShapeMismatch(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Test samples of tasks `1..=t` stacked in task order.
pub fn union_test(stream: &TaskStream, t: usize) -> Result<LabeledSet> {
    let tasks = stream
        .tasks
        .get(..t)
        .ok_or_else(|| SecaError::InvalidInput(format!("stream has {} tasks, asked for {t}", stream.tasks.len())))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for task in tasks {
        for i in 0..task.test.len() {
            rows.push(task.test.xs.row(i).to_vec());
        }
        labels.extend(&task.test.labels);
    }
    if rows.is_empty() {
        return Err(SecaError::InvalidInput("no test samples".into()));
    }
    Ok(LabeledSet {
        xs: Tensor::from_rows(&rows)?,
        labels,
    })
}

/// Scores a predictor under the protocol: after task `t` it is evaluated on
/// the union of test sets `1..=t`. `predict(t, set)` sees the model state
/// after training task `t`.
pub fn evaluate_protocol(
    stream: &TaskStream,
    mut predict: impl FnMut(usize, &LabeledSet) -> Result<Vec<usize>>,
) -> Result<Metrics> {
    let mut per_task = Vec::with_capacity(stream.tasks.len());
    for t in 1..=stream.tasks.len() {
        let test = union_test(stream, t)?;
        let pred = predict(t, &test)?;
        let seen_classes = stream.tasks[..t].iter().map(|k| k.classes.len()).sum();
        per_task.push(TaskMetric {
            task: t,
            seen_classes,
            acc: accuracy(&pred, &test.labels)?,
        });
    }
    Metrics::from_tasks(per_task)
}

/// Trains on every task of the stream, evaluating after each one.
/// `on_task` observes the state and summary after each task.
pub fn run_stream(
    config: RunConfig,
    stream: &TaskStream,
    mut on_task: impl FnMut(&TrainState, &TaskSummary, &TaskMetric),
) -> Result<(TrainState, Metrics)> {
    let mut state = TrainState::new(config, stream)?;
    let metrics = evaluate_protocol(stream, |t, test| {
        let summary = state.train_task(&stream.tasks[t - 1])?;
        let pred = state.predict(&test.xs)?;
        let metric = TaskMetric {
            task: t,
            seen_classes: state.seen().len(),
            acc: accuracy(&pred, &test.labels)?,
        };
        on_task(&state, &summary, &metric);
        Ok(pred)
    })?;
    Ok((state, metrics))
}
