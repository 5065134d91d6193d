//! Session training.
//!
//! The base session trains the extractor and the output head with
//! minibatch cross-entropy. Each incremental session freezes the
//! high-magnitude parameters, then runs episodes of the prototypical
//! quadruplet loss through the remaining ones, calibrating the prototype
//! bank after every step. New classes enter the bank at session end.

use serde::{Deserialize, Serialize};

use crate::bank::{compute_prototype, BankConfig, PrototypeBank};
use crate::config::RunConfig;
use crate::error::{config, contract, Error, Result};
use crate::eval::{self, Classifier, RunReport};
use crate::extractor::{
    self, cross_entropy_loss, select_freeze_mask, sgd_step, FreezeMask, Mlp, MlpGrads, OutputHead,
    SgdConfig,
};
use crate::linalg::{self, dist, log_sum_exp};
use crate::rng::{streams, Rng};
use crate::sampler::{sample_episode, Episode, EpisodeConfig, SessionDataset, SessionStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Margins {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Quadruplet,
    Triplet,
    Contrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// The full method: freeze mask, quadruplet episodes, calibrated bank.
    #[default]
    None,
    /// Cross-entropy fine-tuning of the whole network and head on each
    /// session, classified by the head.
    Finetune,
}

/// Everything that controls a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub seed: u64,
    /// Hidden layer widths between input and embedding.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub base_epochs: usize,
    pub batch_size: usize,
    pub base_sgd: SgdConfig,
    pub incremental_epochs: usize,
    pub episodes_per_epoch: usize,
    pub incremental_sgd: SgdConfig,
    pub episode: EpisodeConfig,
    pub margins: Margins,
    pub loss_mode: LossMode,
    /// Clamp both quadruplet terms at zero.
    pub hinge: bool,
    pub trainable_fraction: f64,
    pub bank: BankConfig,
    /// Calibrate once per query instead of once per episode.
    pub calibrate_per_query: bool,
    /// Classify against the mean of the stored copies instead of the newest.
    pub classify_avg_copies: bool,
    pub baseline: Baseline,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            seed: 0,
            hidden: vec![64, 64],
            embedding_dim: 32,
            base_epochs: 100,
            batch_size: 1024,
            base_sgd: SgdConfig {
                initial_lr: 0.5,
                milestones: Vec::new(),
                weight_decay: 1e-5,
            },
            incremental_epochs: 12,
            episodes_per_epoch: 10,
            incremental_sgd: SgdConfig {
                initial_lr: 0.1,
                milestones: [5, 7, 9, 11]
                    .iter()
                    .map(|&epoch| extractor::Milestone {
                        epoch,
                        multiplier: 0.2,
                    })
                    .collect(),
                weight_decay: 1e-5,
            },
            episode: EpisodeConfig::default(),
            margins: Margins::default(),
            loss_mode: LossMode::Quadruplet,
            hinge: true,
            trainable_fraction: 0.1,
            bank: BankConfig::default(),
            calibrate_per_query: false,
            classify_avg_copies: false,
            baseline: Baseline::None,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(config("layer widths must be positive"));
        }
        if self.batch_size == 0 || self.episodes_per_epoch == 0 {
            return Err(config("batch_size and episodes_per_epoch must be positive"));
        }
        if !(self.trainable_fraction > 0.0 && self.trainable_fraction <= 1.0) {
            return Err(config("trainable_fraction must lie in (0, 1]"));
        }
        if !(self.margins.alpha1.is_finite() && self.margins.alpha2.is_finite()) {
            return Err(config("margins must be finite"));
        }
        self.base_sgd.validate()?;
        self.incremental_sgd.validate()?;
        self.bank.validate()
    }

    pub fn classifier(&self) -> Classifier {
        match self.baseline {
            Baseline::Finetune => Classifier::Head,
            Baseline::None => Classifier::Ncm {
                average_copies: self.classify_avg_copies,
            },
        }
    }
}

/// Value of the embedding loss `g` for one query and one class triple, with
/// its gradient with respect to every argument.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadTerms {
    pub g: f64,
    pub grad_query: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
    pub grad_second_negative: Vec<f64>,
}

/// `(a − b)/‖a − b‖`, zero at coincidence.
fn unit_diff(a: &[f64], b: &[f64], d: f64) -> Vec<f64> {
    if d == 0.0 {
        return vec![0.0; a.len()];
    }
    a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
}

/// Quadruplet, triplet or contrastive embedding loss for a query `zq`
/// against the positive prototype and two negatives.
///
/// Quadruplet: `[d(zq,p) − d(zq,n) + α1]₊ + [d(zq,p) − d(n,nn) + α2]₊`;
/// triplet keeps only the first term; contrastive is
/// `d(zq,p)² + [α1 − d(zq,n)]₊²`. With `hinge = false` the two quadruplet
/// terms are used unclamped.
pub fn quadruplet_terms(
    zq: &[f64],
    positive: &[f64],
    negative: &[f64],
    second_negative: &[f64],
    margins: Margins,
    mode: LossMode,
    hinge: bool,
) -> Result<QuadTerms> {
    let m = zq.len();
    if positive.len() != m || negative.len() != m || second_negative.len() != m {
        return Err(contract("quadruplet_terms: dimension mismatch"));
    }
    let zero = || vec![0.0; m];
    let dp = dist(zq, positive);
    let dn = dist(zq, negative);
    let up = unit_diff(zq, positive, dp);
    let un = unit_diff(zq, negative, dn);
    let mut t = QuadTerms {
        g: 0.0,
        grad_query: zero(),
        grad_positive: zero(),
        grad_negative: zero(),
        grad_second_negative: zero(),
    };
    match mode {
        LossMode::Contrastive => {
            t.g = dp * dp;
            for k in 0..m {
                let gpos = 2.0 * (zq[k] - positive[k]);
                t.grad_query[k] += gpos;
                t.grad_positive[k] -= gpos;
            }
            let slack = margins.alpha1 - dn;
            if slack > 0.0 {
                t.g += slack * slack;
                for k in 0..m {
                    let gneg = -2.0 * slack * un[k];
                    t.grad_query[k] += gneg;
                    t.grad_negative[k] -= gneg;
                }
            }
        }
        LossMode::Quadruplet | LossMode::Triplet => {
            let active = |v: f64| !hinge || v > 0.0;
            let d1 = dp - dn + margins.alpha1;
            if active(d1) {
                t.g += d1;
                for k in 0..m {
                    t.grad_query[k] += up[k] - un[k];
                    t.grad_positive[k] -= up[k];
                    t.grad_negative[k] += un[k];
                }
            }
            if mode == LossMode::Quadruplet {
                let dnn = dist(negative, second_negative);
                let d2 = dp - dnn + margins.alpha2;
                if active(d2) {
                    t.g += d2;
                    let unn = unit_diff(negative, second_negative, dnn);
                    for k in 0..m {
                        t.grad_query[k] += up[k];
                        t.grad_positive[k] -= up[k];
                        t.grad_negative[k] -= unn[k];
                        t.grad_second_negative[k] += unn[k];
                    }
                }
            }
        }
    }
    Ok(t)
}

/// Loss settings shared by every query of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub margins: Margins,
    pub mode: LossMode,
    pub hinge: bool,
}

impl From<&TrainPlan> for LossSettings {
    fn from(p: &TrainPlan) -> Self {
        Self {
            margins: p.margins,
            mode: p.loss_mode,
            hinge: p.hinge,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeLoss {
    /// Mean `L_PQ` over the episode's queries.
    pub loss: f64,
    /// Smallest per-query `L_PQ`.
    pub min_query_loss: f64,
    pub grads: MlpGrads,
}

/// Per-query negative log-likelihood under the softmax over `−g` across the
/// episode's classes, with each class scored by its own prototype triple.
/// Returns `∂/∂zq` alongside the loss.
pub fn query_nll(zq: &[f64], target: usize, episode: &Episode, s: LossSettings) -> Result<(f64, Vec<f64>)> {
    let terms = episode
        .classes
        .iter()
        .map(|c| {
            quadruplet_terms(
                zq,
                &c.positive,
                &c.negative,
                &c.second_negative,
                s.margins,
                s.mode,
                s.hinge,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let neg_g: Vec<f64> = terms.iter().map(|t| -t.g).collect();
    let lse = log_sum_exp(&neg_g);
    let loss = terms[target].g + lse;
    let mut grad = terms[target].grad_query.clone();
    for (t, ng) in terms.iter().zip(&neg_g) {
        let p = (ng - lse).exp();
        linalg::add_assign_scaled(&mut grad, &t.grad_query, -p);
    }
    Ok((loss, grad))
}

/// Mean `L_PQ` over all `N^C · N_Q` queries of an episode and its gradient
/// with respect to the extractor parameters. Prototypes are constants.
pub fn episode_nll(
    episode: &Episode,
    data: &SessionDataset,
    mlp: &Mlp,
    settings: LossSettings,
) -> Result<EpisodeLoss> {
    let n_queries: usize = episode.classes.iter().map(|c| c.query.len()).sum();
    if n_queries == 0 {
        return Err(contract("episode has no queries"));
    }
    let scale = 1.0 / n_queries as f64;
    let mut grads = MlpGrads::zeros_like(mlp);
    let mut total = 0.0;
    let mut min_query_loss = f64::INFINITY;
    for (target, class) in episode.classes.iter().enumerate() {
        for &qi in &class.query {
            let (zq, cache) = mlp.forward_cached(&data.samples[qi].features)?;
            let (loss, gz) = query_nll(&zq, target, episode, settings)?;
            total += loss;
            min_query_loss = min_query_loss.min(loss);
            grads.add_scaled(&mlp.backward(&cache, &gz)?, scale);
        }
    }
    Ok(EpisodeLoss {
        loss: total * scale,
        min_query_loss,
        grads,
    })
}

/// Network, head, bank and the freeze mask of the current session.
#[derive(Debug, Clone)]
pub struct Learner {
    pub mlp: Mlp,
    pub head: OutputHead,
    pub bank: PrototypeBank,
    pub mask: FreezeMask,
}

impl Learner {
    /// Fresh network for `input_dim` features and a head sized for `classes`.
    pub fn init(input_dim: usize, classes: usize, plan: &TrainPlan) -> Result<Self> {
        let mut rng = Rng::new(plan.seed, streams::INIT);
        let mut dims = vec![input_dim];
        dims.extend(&plan.hidden);
        dims.push(plan.embedding_dim);
        let mlp = Mlp::init(&dims, &mut rng)?;
        let head = OutputHead::init(plan.embedding_dim, classes, &mut rng);
        let mask = FreezeMask::all_trainable(&mlp);
        Ok(Self {
            bank: PrototypeBank::new(plan.embedding_dim),
            mlp,
            head,
            mask,
        })
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward(x)
    }

    fn class_prototypes(&self, data: &SessionDataset) -> Result<Vec<(usize, Vec<f64>)>> {
        data.by_class()
            .into_iter()
            .filter(|(_, idx)| !idx.is_empty())
            .map(|(label, idx)| {
                let embs = idx
                    .iter()
                    .map(|&i| self.mlp.forward(&data.samples[i].features))
                    .collect::<Result<Vec<_>>>()?;
                Ok((label, compute_prototype(&embs)?))
            })
            .collect()
    }

    fn install_classes(&mut self, data: &SessionDataset, bank_cfg: &BankConfig) -> Result<()> {
        for (label, proto) in self.class_prototypes(data)? {
            self.bank.insert(label, data.session, proto, bank_cfg)?;
        }
        Ok(())
    }
}

/// Per-session training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session: usize,
    pub steps: usize,
    /// Mean loss over the last epoch.
    pub final_loss: f64,
    pub trainable_params: usize,
    pub classes_in_bank: usize,
}

fn ce_step(
    learner: &mut Learner,
    data: &SessionDataset,
    batch: &[usize],
    lr_epoch: usize,
    sgd: &SgdConfig,
) -> Result<f64> {
    let mut grads = MlpGrads::zeros_like(&learner.mlp);
    let mut head_grad = linalg::Matrix::zeros(learner.head.classes(), learner.mlp.embedding_dim());
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &i in batch {
        let s = &data.samples[i];
        let (z, cache) = learner.mlp.forward_cached(&s.features)?;
        let logits = learner.head.weights.matvec_unchecked(&z);
        let (loss, gl) = cross_entropy_loss(&logits, s.label)?;
        total += loss;
        let (gw, gz) = learner.head.backward(&z, &gl);
        head_grad.add_scaled(&gw, scale);
        grads.add_scaled(&learner.mlp.backward(&cache, &gz)?, scale);
    }
    let mean = total * scale;
    if !mean.is_finite() || !grads.is_finite() {
        return Ok(f64::NAN);
    }
    sgd_step(&mut learner.mlp, &grads, &learner.mask, lr_epoch, sgd)?;
    extractor::sgd_step_head(&mut learner.head, &head_grad, sgd.lr(lr_epoch), sgd.weight_decay);
    Ok(mean)
}

fn numerical(session: usize, epoch: usize, episode: usize, detail: &str) -> Error {
    log::error!("non-finite loss: session {session} epoch {epoch} episode {episode}: {detail}");
    Error::Numerical {
        session,
        epoch,
        episode,
        detail: detail.to_string(),
    }
}

/// Minibatch cross-entropy on the base session, then every base class's
/// prototype (mean embedding of all its training samples) becomes its first
/// copy and footprint.
pub fn run_base_session(data: &SessionDataset, learner: &mut Learner, plan: &TrainPlan) -> Result<SessionLog> {
    if let Some(s) = data.samples.iter().find(|s| s.label >= learner.head.classes()) {
        return Err(config(format!(
            "label {} exceeds the head capacity {}",
            s.label,
            learner.head.classes()
        )));
    }
    let mut rng = Rng::new(plan.seed, streams::BASE_BATCHES);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    let mut final_loss = 0.0;
    learner.mask = FreezeMask::all_trainable(&learner.mlp);
    for epoch in 0..plan.base_epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let batches: Vec<&[usize]> = order.chunks(plan.batch_size).collect();
        for (b, batch) in batches.iter().enumerate() {
            let loss = ce_step(learner, data, batch, epoch, &plan.base_sgd)?;
            if !loss.is_finite() {
                return Err(numerical(data.session, epoch, b, "cross-entropy"));
            }
            epoch_loss += loss;
            steps += 1;
        }
        final_loss = epoch_loss / batches.len().max(1) as f64;
    }
    if plan.baseline == Baseline::None {
        learner.install_classes(data, &plan.bank)?;
    }
    Ok(SessionLog {
        session: data.session,
        steps,
        final_loss,
        trainable_params: learner.mask.trainable_count(),
        classes_in_bank: learner.bank.len(),
    })
}

/// One incremental session: freeze mask at entry, then for every epoch and
/// episode sample → `L_PQ` → masked SGD → bank calibration. New classes are
/// installed from the final network at the end.
pub fn run_incremental_session(
    data: &SessionDataset,
    learner: &mut Learner,
    plan: &TrainPlan,
) -> Result<SessionLog> {
    if plan.baseline == Baseline::Finetune {
        return run_finetune_session(data, learner, plan);
    }
    if learner.bank.is_empty() {
        return Err(contract("incremental session needs an initialised bank"));
    }
    learner.mask = select_freeze_mask(&learner.mlp, plan.trainable_fraction)?;
    let mut rng = Rng::new(plan.seed, streams::EPISODES + data.session as u64);
    let settings = LossSettings::from(plan);
    let calibrations = if plan.calibrate_per_query {
        plan.episode.classes_per_episode * plan.episode.query
    } else {
        1
    };
    let mut steps = 0;
    let mut final_loss = 0.0;
    for epoch in 0..plan.incremental_epochs {
        learner.bank.begin_epoch();
        let mut epoch_loss = 0.0;
        for ep in 0..plan.episodes_per_epoch {
            let episode = sample_episode(data, &learner.mlp, &learner.bank, &mut rng, &plan.episode)?;
            let out = episode_nll(&episode, data, &learner.mlp, settings)?;
            if !out.loss.is_finite() || !out.grads.is_finite() {
                return Err(numerical(data.session, epoch, ep, "prototypical quadruplet"));
            }
            let floor = -(plan.episode.classes_per_episode as f64).ln();
            debug_assert!(!plan.hinge || out.min_query_loss >= floor - 1e-9);
            sgd_step(&mut learner.mlp, &out.grads, &learner.mask, epoch, &plan.incremental_sgd)?;
            for _ in 0..calibrations {
                learner.bank.calibrate_and_update(&plan.bank)?;
            }
            epoch_loss += out.loss;
            steps += 1;
        }
        final_loss = epoch_loss / plan.episodes_per_epoch as f64;
    }
    learner.install_classes(data, &plan.bank)?;
    Ok(SessionLog {
        session: data.session,
        steps,
        final_loss,
        trainable_params: learner.mask.trainable_count(),
        classes_in_bank: learner.bank.len(),
    })
}

fn run_finetune_session(data: &SessionDataset, learner: &mut Learner, plan: &TrainPlan) -> Result<SessionLog> {
    learner.mask = FreezeMask::all_trainable(&learner.mlp);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    let mut final_loss = 0.0;
    for epoch in 0..plan.incremental_epochs {
        let mut epoch_loss = 0.0;
        for ep in 0..plan.episodes_per_epoch {
            let loss = ce_step(learner, data, &all, epoch, &plan.base_sgd)?;
            if !loss.is_finite() {
                return Err(numerical(data.session, epoch, ep, "cross-entropy"));
            }
            epoch_loss += loss;
            steps += 1;
        }
        final_loss = epoch_loss / plan.episodes_per_epoch as f64;
    }
    Ok(SessionLog {
        session: data.session,
        steps,
        final_loss,
        trainable_params: learner.mask.trainable_count(),
        classes_in_bank: 0,
    })
}

/// Result of [`run_stream`]: the report and the final learner state.
pub struct RunOutcome {
    pub report: RunReport,
    pub learner: Learner,
}

/// Base session, then every incremental session; after each session `t` the
/// learner is scored on the test split of every session `i ≤ t`.
pub fn run_stream(stream: &SessionStream, run: &RunConfig) -> Result<RunOutcome> {
    let plan = &run.plan;
    plan.validate()?;
    stream.validate()?;
    let max_label = stream
        .train
        .iter()
        .flat_map(|s| s.labels.iter().copied())
        .max()
        .unwrap_or(0);
    let capacity = stream.total_classes().max(max_label + 1);
    let mut learner = Learner::init(stream.input_dim, capacity, plan)?;
    let classifier = plan.classifier();
    let mut rows = Vec::with_capacity(stream.sessions());
    let mut logs = Vec::with_capacity(stream.sessions());
    for (t, data) in stream.train.iter().enumerate() {
        let log = if t == 0 {
            run_base_session(data, &mut learner, plan)?
        } else {
            run_incremental_session(data, &mut learner, plan)?
        };
        log::info!(
            "session {}: {} steps, final loss {:.4}",
            log.session,
            log.steps,
            log.final_loss
        );
        logs.push(log);
        let seen: Vec<usize> = stream.train[..=t]
            .iter()
            .flat_map(|s| s.labels.iter().copied())
            .collect();
        rows.push(eval::session_accuracy(
            &learner,
            classifier,
            &seen,
            &stream.test[..=t],
        )?);
    }
    let sizes: Vec<usize> = stream.test.iter().map(|s| s.len()).collect();
    let report = RunReport::new(rows, &sizes, logs, learner.bank.memory_budget(), run.clone());
    Ok(RunOutcome { report, learner })
}
