//! The distillation objective and the training loops.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, mixup_partners, Example, Lexicon, UnigramTable};
use crate::error::{Error, Result};
use crate::losses::{inter_loss_var, pred_loss_var, MiContext, PredLossKind, PredTarget, Projection};
use crate::mapping::{build_mapping, emd_loss_var, MappingMatrix, MappingStrategy};
use crate::mi::critic::CriticPair;
use crate::nn::encoder::{EncoderConfig, EncoderModel, HeadKind, ModelInput};
use crate::nn::graph::{Graph, ParamVars, Var};
use crate::nn::optim::OptimState;
use crate::nn::tensor::{ParamSet, Tensor};
use crate::pipeline::config::DistillerConfig;
use crate::pipeline::data::{TaskData, TaskMeta};
use crate::pipeline::eval::{distillation_ratio, evaluate};
use crate::rng::{streams, RngStreams, StreamRng};

const GRAD_CLIP: f64 = 5.0;

/// Original inputs and targets of one minibatch, plus their augmented
/// counterparts when the policy is nonempty.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub x: Vec<ModelInput>,
    /// One-hot targets, one row per logit row.
    pub y: Tensor,
    pub x_hat: Option<Vec<ModelInput>>,
    /// Label distributions for `x_hat` (mixed when mixup is on).
    pub y_hat: Option<Tensor>,
}

impl PreparedBatch {
    /// Augmented inputs, or the originals when augmentation is off.
    pub fn inputs_hat(&self) -> &[ModelInput] {
        self.x_hat.as_deref().unwrap_or(&self.x)
    }
}

fn stack_rows(parts: &[Tensor], cols: usize) -> Tensor {
    let rows = parts.iter().map(Tensor::rows).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::matrix(rows, cols, data)
}

fn first_rows(t: &Tensor, n: usize) -> Tensor {
    Tensor::matrix(n, t.cols(), t.data()[..n * t.cols()].to_vec())
}

/// Builds the originals and, when the policy is nonempty, their augmented
/// counterparts: discrete operators per example, then mixup with a random
/// partner inside the batch (one λ per example).
pub fn prepare_batch(
    config: &DistillerConfig,
    examples: &[Example],
    n_classes: usize,
    lexicon: &Lexicon,
    unigram: Option<&UnigramTable>,
    rng: &mut StreamRng,
) -> Result<PreparedBatch> {
    if examples.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let x = examples.iter().map(|e| ModelInput::Tokens(e.tokens.clone())).collect();
    let onehots = examples.iter().map(|e| e.one_hot(n_classes)).collect::<Result<Vec<_>>>()?;
    let y = stack_rows(&onehots, n_classes);
    if config.aug.is_empty() {
        return Ok(PreparedBatch {
            x,
            y,
            x_hat: None,
            y_hat: None,
        });
    }
    let unigram = unigram.ok_or_else(|| Error::input("augmentation needs a unigram table"))?;
    let disc = examples
        .iter()
        .map(|e| apply_policy(&config.aug, e, lexicon, unigram, rng))
        .collect::<Result<Vec<_>>>()?;
    let disc_y = disc.iter().map(|e| e.one_hot(n_classes)).collect::<Result<Vec<_>>>()?;
    let (x_hat, y_hat) = if config.aug.has_mixup() {
        let partners = mixup_partners(disc.len(), rng);
        let mut xs = Vec::with_capacity(disc.len());
        let mut ys = Vec::with_capacity(disc.len());
        for (k, &p) in partners.iter().enumerate() {
            let lambda = config.aug.lambda.sample(rng)?;
            let n = disc[k].tokens.len().min(disc[p].tokens.len());
            let (ya, yb) = if disc_y[k].rows() == 1 {
                (disc_y[k].clone(), disc_y[p].clone())
            } else {
                (first_rows(&disc_y[k], n), first_rows(&disc_y[p], n))
            };
            let data = ya
                .data()
                .iter()
                .zip(yb.data())
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect();
            ys.push(Tensor::matrix(ya.rows(), n_classes, data));
            xs.push(ModelInput::Mixed {
                a: disc[k].tokens.clone(),
                b: disc[p].tokens.clone(),
                lambda,
            });
        }
        (xs, stack_rows(&ys, n_classes))
    } else {
        (
            disc.iter().map(|e| ModelInput::Tokens(e.tokens.clone())).collect(),
            stack_rows(&disc_y, n_classes),
        )
    };
    Ok(PreparedBatch {
        x,
        y,
        x_hat: Some(x_hat),
        y_hat: Some(y_hat),
    })
}

/// Student parameters together with the projections and critics trained
/// alongside it. Names: `student.*`, `proj{j}.w`, `critic.t{i}.s{j}.*`
/// (layers 1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub params: ParamSet,
    student_config: EncoderConfig,
    /// Fixed mapping for Skip/Last; `None` when EMD solves it per batch.
    pub mapping: Option<MappingMatrix>,
    /// Weighted `(teacher, student)` pairs that carry a loss.
    pairs: Vec<(usize, usize)>,
    critics: BTreeMap<(usize, usize), CriticPair>,
}

impl DistillState {
    pub fn new(config: &DistillerConfig, teacher: &EncoderConfig, student: EncoderModel) -> Result<Self> {
        let (m, n) = (teacher.n_layers, student.config.n_layers);
        let (h_t, h_s) = (teacher.h_units, student.config.h_units);
        let mut params = ParamSet::new();
        let student_config = student.config.clone();
        params.merge_prefixed("student.", student.params);
        let mut mapping = None;
        let mut pairs = Vec::new();
        let mut critics = BTreeMap::new();
        if config.inter_weight > 0.0 {
            if n > m {
                return Err(Error::config(format!("student has {n} layers, teacher only {m}")));
            }
            match config.mapping {
                MappingStrategy::Emd => {
                    pairs = (1..=n).flat_map(|j| (1..=m).map(move |i| (i, j))).collect();
                }
                s => {
                    let mm = build_mapping(s, m, n)?;
                    pairs = mm.pairs();
                    mapping = Some(mm);
                }
            }
            let streams = RngStreams::new(config.seed);
            let mut rng = streams.stream(streams::CRITIC_INIT);
            for j in 1..=n {
                if let Projection::Learned(w) = Projection::new(h_s, h_t, &mut rng) {
                    params.insert(format!("proj{j}.w"), w);
                }
            }
            if config.inter_loss.is_mi() {
                for &(i, j) in &pairs {
                    let mut c = CriticPair::new(config.critic, h_t, h_t, &mut rng)?;
                    params.merge_prefixed(&format!("critic.t{i}.s{j}."), std::mem::take(&mut c.params));
                    critics.insert((i, j), c);
                }
            }
        }
        Ok(Self {
            params,
            student_config,
            mapping,
            pairs,
            critics,
        })
    }

    /// The student as a standalone model.
    pub fn student(&self) -> EncoderModel {
        let mut p = self.params.clone();
        EncoderModel {
            config: self.student_config.clone(),
            params: p.split_prefixed("student."),
        }
    }

    /// `(teacher, student)` layer pairs that carry an intermediate loss.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

/// Unweighted value of each term that was evaluated (weight > 0).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// `Σ m_ij · l_ij` before the global intermediate weight.
    pub inter: Option<f64>,
    pub beta1: Option<f64>,
    pub gamma1: Option<f64>,
    pub beta2: Option<f64>,
    pub gamma2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub terms: ObjectiveTerms,
    /// The mapping used for this batch (solved transport for EMD).
    pub mapping: Option<MappingMatrix>,
}

struct TeacherView {
    logits: Tensor,
    hidden: Vec<Tensor>,
}

fn teacher_view(teacher: &EncoderModel, inputs: &[ModelInput]) -> Result<TeacherView> {
    let mut g = Graph::new();
    let pv = g.bind_frozen(&teacher.params);
    let out = teacher.forward(&mut g, &pv, inputs)?;
    Ok(TeacherView {
        logits: g.value(out.logits).clone(),
        hidden: out.hidden.iter().map(|&h| g.value(h).clone()).collect(),
    })
}

struct Recorded {
    total: Var,
    terms: [Option<Var>; 5],
    mapping: Option<MappingMatrix>,
}

fn record_objective(
    g: &mut Graph,
    config: &DistillerConfig,
    teacher: &EncoderModel,
    state: &DistillState,
    pv: &ParamVars,
    batch: &PreparedBatch,
) -> Result<Recorded> {
    let w = config.weights;
    let augmenting = batch.x_hat.is_some();
    if augmenting != !config.aug.is_empty() {
        return Err(Error::input("batch augmentation does not match the config"));
    }
    let inter_on = config.inter_weight > 0.0 && !state.pairs.is_empty();
    let student = EncoderModel {
        config: state.student_config.clone(),
        params: ParamSet::new(),
    };
    let spv = pv.scoped("student.");
    let need_x = w.beta1 > 0.0 || w.gamma1 > 0.0 || (inter_on && !augmenting);
    let need_hat = augmenting && (w.beta2 > 0.0 || w.gamma2 > 0.0 || inter_on);
    let out_x = if need_x { Some(student.forward(g, &spv, &batch.x)?) } else { None };
    let out_hat = if need_hat {
        Some(student.forward(g, &spv, batch.inputs_hat())?)
    } else {
        None
    };
    let t_x = if w.beta1 > 0.0 || (inter_on && !augmenting) {
        Some(teacher_view(teacher, &batch.x)?)
    } else {
        None
    };
    let t_hat = if augmenting && (w.beta2 > 0.0 || inter_on) {
        Some(teacher_view(teacher, batch.inputs_hat())?)
    } else {
        None
    };

    let mut terms: [Option<Var>; 5] = [None; 5];
    let mut mapping = state.mapping.clone();
    if inter_on {
        let (so, tv) = match (&out_hat, &t_hat) {
            (Some(o), Some(t)) => (o, t),
            _ => (out_x.as_ref().expect("recorded"), t_x.as_ref().expect("computed")),
        };
        let pair_loss = |g: &mut Graph, i: usize, j: usize| -> Result<Var> {
            let ht = g.constant(tv.hidden[i - 1].clone());
            let proj = pv.get(&format!("proj{j}.w")).ok();
            let cv = pv.scoped(&format!("critic.t{i}.s{j}."));
            let ctx = state.critics.get(&(i, j)).map(|c| MiContext {
                critic: c,
                critic_vars: &cv,
                segments: &so.segments,
            });
            inter_loss_var(g, config.inter_loss, so.hidden[j - 1], ht, proj, ctx.as_ref())
        };
        let inter = match &state.mapping {
            Some(mm) => {
                let mut parts = Vec::new();
                for &(i, j) in &state.pairs {
                    let l = pair_loss(g, i, j)?;
                    parts.push(g.scale(l, mm.weights.get(i - 1, j - 1)));
                }
                let stacked = g.concat_rows(&parts)?;
                g.sum(stacked)
            }
            None => {
                let (m, n) = (teacher.config.n_layers, state.student_config.n_layers);
                let mut costs = vec![Vec::with_capacity(n); m];
                for (i, row) in costs.iter_mut().enumerate() {
                    for j in 0..n {
                        row.push(pair_loss(g, i + 1, j + 1)?);
                    }
                }
                let (l, mm) = emd_loss_var(g, &costs)?;
                mapping = Some(mm);
                l
            }
        };
        terms[0] = Some(inter);
    }
    let kind = config.pred_loss;
    let pred = |g: &mut Graph, weight: f64, logits: Option<Var>, target: Option<PredTarget>| -> Result<Option<Var>> {
        if weight <= 0.0 {
            return Ok(None);
        }
        let (l, t) = (logits.expect("recorded"), target.expect("prepared"));
        Ok(Some(pred_loss_var(g, kind, l, &t)?))
    };
    terms[1] = pred(
        g,
        w.beta1,
        out_x.as_ref().map(|o| o.logits),
        t_x.as_ref().map(|t| PredTarget::TeacherLogits(t.logits.clone())),
    )?;
    terms[2] = pred(g, w.gamma1, out_x.as_ref().map(|o| o.logits), Some(PredTarget::Distribution(batch.y.clone())))?;
    if augmenting {
        terms[3] = pred(
            g,
            w.beta2,
            out_hat.as_ref().map(|o| o.logits),
            t_hat.as_ref().map(|t| PredTarget::TeacherLogits(t.logits.clone())),
        )?;
        terms[4] = pred(
            g,
            w.gamma2,
            out_hat.as_ref().map(|o| o.logits),
            batch.y_hat.clone().map(PredTarget::Distribution),
        )?;
    }
    let weights = [config.inter_weight, w.beta1, w.gamma1, w.beta2, w.gamma2];
    let mut parts = Vec::new();
    for (t, &wt) in terms.iter().zip(&weights) {
        if let Some(v) = t {
            parts.push(g.scale(*v, wt));
        }
    }
    let total = if parts.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let stacked = g.concat_rows(&parts)?;
        g.sum(stacked)
    };
    Ok(Recorded { total, terms, mapping })
}

/// Value of the distillation objective at the current parameters.
pub fn total_objective(
    config: &DistillerConfig,
    batch: &PreparedBatch,
    teacher: &EncoderModel,
    state: &DistillState,
) -> Result<Objective> {
    config.validate()?;
    let mut g = Graph::new();
    let pv = g.bind_frozen(&state.params);
    let r = record_objective(&mut g, config, teacher, state, &pv, batch)?;
    let val = |v: Option<Var>| v.map(|v| g.scalar_value(v));
    Ok(Objective {
        total: g.scalar_value(r.total),
        terms: ObjectiveTerms {
            inter: val(r.terms[0]),
            beta1: val(r.terms[1]),
            gamma1: val(r.terms[2]),
            beta2: val(r.terms[3]),
            gamma2: val(r.terms[4]),
        },
        mapping: r.mapping,
    })
}

/// One record per distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(default)]
    pub trial: usize,
    pub config: DistillerConfig,
    pub dataset_id: String,
    pub task_kind: HeadKind,
    pub teacher_score: f64,
    pub student_score: f64,
    pub distillation_ratio: f64,
    /// Seconds; left out of record files so they stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
    pub seed: u64,
    /// Error message of a failed run; its scores are then meaningless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.failed.is_none()
    }

    /// Copy without the wall-clock time.
    pub fn without_time(&self) -> Self {
        Self {
            wall_time: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: EncoderModel,
    pub record: RunRecord,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Student initialised from the config's shape on the model-init stream.
pub fn init_student(config: &DistillerConfig, meta: &TaskMeta) -> Result<EncoderModel> {
    let cfg = EncoderConfig::student(
        config.student.layers,
        config.student.width,
        meta.vocab_size,
        meta.n_classes,
        meta.kind,
    );
    let mut rng = RngStreams::new(config.seed).stream(streams::MODEL_INIT);
    EncoderModel::new(cfg, &mut rng)
}

fn check_compatible(model: &EncoderConfig, meta: &TaskMeta, who: &str) -> Result<()> {
    if model.vocab_size < meta.vocab_size || model.n_classes != meta.n_classes || model.head != meta.kind {
        return Err(Error::config(format!(
            "{who} (vocab {}, classes {}, {:?}) does not fit task '{}' (vocab {}, classes {}, {:?})",
            model.vocab_size, model.n_classes, model.head, meta.id, meta.vocab_size, meta.n_classes, meta.kind
        )));
    }
    Ok(())
}

/// Shuffled minibatches; with `min_two`, a trailing singleton joins the
/// previous batch so every batch has at least two sequences.
fn minibatches(n: usize, size: usize, min_two: bool, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(size).map(<[usize]>::to_vec).collect();
    if min_two && out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

fn unigram_for(config: &DistillerConfig, data: &TaskData) -> Result<Option<UnigramTable>> {
    if config.aug.is_empty() {
        return Ok(None);
    }
    Ok(Some(UnigramTable::from_corpus(data.train.iter().map(|e| e.tokens.as_slice()))?))
}

/// Minimises the distillation objective over `data.train`, jointly
/// updating the student, projections and critics with Adam.
pub fn distill(
    config: &DistillerConfig,
    data: &TaskData,
    teacher: &EncoderModel,
    student_init: EncoderModel,
) -> Result<DistillOutcome> {
    config.validate()?;
    check_compatible(&teacher.config, &data.meta, "teacher")?;
    check_compatible(&student_init.config, &data.meta, "student")?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::input(format!("task '{}' has an empty split", data.meta.id)));
    }
    let start = Instant::now();
    let mut state = DistillState::new(config, &teacher.config, student_init)?;
    let streams = RngStreams::new(config.seed);
    let mut order_rng = streams.stream(streams::DATA_ORDER);
    let mut aug_rng = streams.stream(streams::AUGMENTATION);
    let unigram = unigram_for(config, data)?;
    let mi_on = config.inter_loss.is_mi() && config.inter_weight > 0.0;
    if mi_on && data.train.len() < 2 {
        return Err(Error::input("MI-alpha needs at least two training examples"));
    }
    let mut opt = OptimState::new(config.learning_rate).with_clip(GRAD_CLIP);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in minibatches(data.train.len(), config.batch_size, mi_on, &mut order_rng) {
            let examples: Vec<Example> = idx.iter().map(|&i| data.train[i].clone()).collect();
            let batch = prepare_batch(
                config,
                &examples,
                data.meta.n_classes,
                &data.lexicon,
                unigram.as_ref(),
                &mut aug_rng,
            )?;
            let mut g = Graph::new();
            let pv = g.bind(&state.params);
            let r = record_objective(&mut g, config, teacher, &state, &pv, &batch)?;
            let loss = g.scalar_value(r.total);
            if !loss.is_finite() {
                return Err(Error::numeric(format!("training loss became {loss}")));
            }
            let grads = g.backward(r.total)?;
            grads.write_into(&mut state.params, &pv);
            opt.step(&mut state.params)?;
            sum += loss * idx.len() as f64;
            count += idx.len();
        }
        epoch_losses.push(sum / count as f64);
    }
    let student = state.student();
    let kind = data.meta.kind;
    let teacher_score = evaluate(teacher, &data.test, kind)?;
    let student_score = evaluate(&student, &data.test, kind)?;
    let record = RunRecord {
        trial: 0,
        config: config.clone(),
        dataset_id: data.meta.id.clone(),
        task_kind: kind,
        teacher_score,
        student_score,
        distillation_ratio: distillation_ratio(student_score, teacher_score)?,
        wall_time: Some(start.elapsed().as_secs_f64()),
        seed: config.seed,
        failed: None,
    };
    Ok(DistillOutcome {
        student,
        record,
        epoch_losses,
    })
}

/// Plain supervised training settings (teachers and baselines).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisedSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SupervisedSettings {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Cross-entropy on hard labels; returns the model and per-epoch losses.
pub fn train_supervised(
    mut model: EncoderModel,
    train: &[Example],
    settings: &SupervisedSettings,
) -> Result<(EncoderModel, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::input("empty training split"));
    }
    if settings.batch_size == 0 || !(settings.learning_rate > 0.0) {
        return Err(Error::config("batch_size and learning_rate must be positive"));
    }
    let mut rng = RngStreams::new(settings.seed).stream(streams::DATA_ORDER);
    let mut opt = OptimState::new(settings.learning_rate).with_clip(GRAD_CLIP);
    let mut losses = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in minibatches(train.len(), settings.batch_size, false, &mut rng) {
            let inputs: Vec<ModelInput> = idx.iter().map(|&i| ModelInput::Tokens(train[i].tokens.clone())).collect();
            let mut labels = Vec::new();
            for &i in &idx {
                match (&train[i].label, &train[i].tags) {
                    (Some(l), _) => labels.push(*l),
                    (None, Some(t)) => labels.extend(t),
                    _ => return Err(Error::input("example has no target")),
                }
            }
            let mut g = Graph::new();
            let pv = g.bind(&model.params);
            let out = model.forward(&mut g, &pv, &inputs)?;
            let loss = pred_loss_var(&mut g, PredLossKind::Ce, out.logits, &PredTarget::Hard(labels))?;
            let v = g.scalar_value(loss);
            if !v.is_finite() {
                return Err(Error::numeric(format!("training loss became {v}")));
            }
            g.backward(loss)?.write_into(&mut model.params, &pv);
            opt.step(&mut model.params)?;
            sum += v * idx.len() as f64;
            count += idx.len();
        }
        losses.push(sum / count as f64);
    }
    Ok((model, losses))
}

/// Trains the desk-scale teacher (4 layers, width 32) and returns it with
/// its held-out score.
pub fn train_teacher(data: &TaskData, settings: &SupervisedSettings) -> Result<(EncoderModel, f64)> {
    data.validate()?;
    let cfg = EncoderConfig::teacher(data.meta.vocab_size, data.meta.n_classes, data.meta.kind);
    let mut rng = RngStreams::new(settings.seed).stream(streams::MODEL_INIT);
    let model = EncoderModel::new(cfg, &mut rng)?;
    let (model, _) = train_supervised(model, &data.train, settings)?;
    let score = evaluate(&model, &data.test, data.meta.kind)?;
    Ok((model, score))
}
