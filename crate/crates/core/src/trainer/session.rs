use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    derive_seed, non_finite_term, Clock, Control, EpochRecord, ExperimentLog, LiveControls, RunSummary, SessionConfig,
    SessionState, TrainError,
};
use crate::data::{split, Dataset};
use crate::diffcore::{DiffError, Graph, OptimizerConfig, OptimizerState, Var};
use crate::guidance::{batch_class_stats, commit_layout, global_loss, GuidanceError, LossBreakdown, TargetLayout};
use crate::models::Backbone;
use crate::projection::{Projector, DEFAULT_HIDDEN};
use crate::snapshot::{LatentSnapshot, PointId, SnapshotPoint};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;

const STREAM_SPLIT: u64 = 1;
const STREAM_MODEL: u64 = 2;
const STREAM_PROJECTOR: u64 = 3;
const STREAM_SUBSAMPLE: u64 = 4;
const STREAM_SHUFFLE: u64 = 5;
const STREAM_DROPOUT: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// One training session: model, projector, optimizer, state machine and log.
pub struct Session {
    config: SessionConfig,
    dataset: Dataset,
    backbone: Backbone<f32>,
    projector: Projector<f32>,
    optimizer: OptimizerState<f32>,
    projector_optimizer: OptimizerState<f32>,
    live: LiveControls,
    state: SessionState,
    layout: Option<TargetLayout>,
    layouts_committed: u64,
    subsample: Vec<usize>,
    completed: u32,
    log: ExperimentLog,
    clock: Box<dyn Clock>,
}

impl core::fmt::Debug for Session {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Session")
            .field("state", &self.state)
            .field("completed", &self.completed)
            .field("layout", &self.layout.as_ref().map(|l| l.layout_id))
            .finish()
    }
}

/// Stratified pick of `m` indices from `pool`, largest-remainder quotas with
/// at least one point per present class.
fn stratified_subsample(pool: &[usize], labels: &[usize], m: usize, seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let n = pool.len();
    let m = m.min(n);
    let mut quotas: Vec<(usize, usize, f64)> = by_class
        .iter()
        .map(|(&c, members)| {
            let exact = m as f64 * members.len() as f64 / n as f64;
            let q = (libm::floor(exact) as usize).max(1).min(members.len());
            (c, q, exact - libm::floor(exact))
        })
        .collect();
    let mut total: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    for &k in order.iter().cycle().take(order.len() * 4) {
        if total >= m {
            break;
        }
        let cap = by_class[&quotas[k].0].len();
        if quotas[k].1 < cap {
            quotas[k].1 += 1;
            total += 1;
        }
    }
    while total > m {
        let k = (0..quotas.len()).max_by_key(|&k| (quotas[k].1, k)).expect("classes");
        quotas[k].1 -= 1;
        total -= 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(m);
    for (c, q, _) in quotas {
        let mut members = by_class[&c].clone();
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..q]);
    }
    out.sort_unstable();
    out
}

impl Session {
    /// Builds an idle session. The dataset is split with the config's
    /// fractions unless it already carries a split.
    pub fn new(config: SessionConfig, dataset: Dataset, clock: Box<dyn Clock>) -> Result<Self, TrainError> {
        config.validate()?;
        if dataset.input_shape() != config.model.input_shape.as_slice() {
            return Err(TrainError::InvalidConfig(format!(
                "model input shape {:?} does not match dataset {:?}",
                config.model.input_shape,
                dataset.input_shape()
            )));
        }
        if dataset.num_classes() != config.model.num_classes {
            return Err(TrainError::InvalidConfig(format!(
                "model has {} classes, dataset {}",
                config.model.num_classes,
                dataset.num_classes()
            )));
        }
        let dataset = match dataset.splits {
            Some(_) => dataset,
            None => {
                let fractions: Vec<f64> = config.split.iter().copied().filter(|f| *f > 0.0).collect();
                split(dataset, &fractions, derive_seed(config.seed, STREAM_SPLIT))?
            }
        };
        let splits = dataset.splits.as_ref().expect("split above");
        if splits.train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        if splits.val.is_empty() {
            return Err(TrainError::EmptySplit("validation"));
        }
        let m = config.snapshot_size.unwrap_or(1000).min(splits.val.len());
        let subsample =
            stratified_subsample(&splits.val, &dataset.labels, m, derive_seed(config.seed, STREAM_SUBSAMPLE));
        let backbone = Backbone::build(config.model.clone(), derive_seed(config.seed, STREAM_MODEL))?;
        let projector = Projector::init(
            backbone.latent_dim(),
            DEFAULT_HIDDEN,
            config.model.num_classes,
            derive_seed(config.seed, STREAM_PROJECTOR),
        )?;
        let projector_optimizer = OptimizerState::new(OptimizerConfig::adam(config.projector_lr));
        Ok(Session {
            optimizer: OptimizerState::new(config.optimizer),
            live: LiveControls { guidance: config.guidance, pause_requested: false, budget: None },
            log: ExperimentLog::new(config.clone()),
            config,
            dataset,
            backbone,
            projector,
            projector_optimizer,
            state: SessionState::Idle,
            layout: None,
            layouts_committed: 0,
            subsample,
            completed: 0,
            clock,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn live(&self) -> &LiveControls {
        &self.live
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn backbone(&self) -> &Backbone<f32> {
        &self.backbone
    }

    pub fn projector(&self) -> &Projector<f32> {
        &self.projector
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.optimizer
    }

    /// The active layout, if any.
    pub fn layout(&self) -> Option<&TargetLayout> {
        self.layout.as_ref()
    }

    pub fn completed_epochs(&self) -> u32 {
        self.completed
    }

    /// Dataset indices of the fixed snapshot subsample; these are the point ids.
    pub fn subsample(&self) -> &[usize] {
        &self.subsample
    }

    pub fn log(&self) -> &ExperimentLog {
        &self.log
    }

    pub fn into_log(self) -> ExperimentLog {
        self.log
    }

    pub fn control(&mut self, cmd: Control) -> Result<SessionState, TrainError> {
        let next = match (cmd, &self.state) {
            (Control::Resume, SessionState::Idle) => SessionState::Training { epoch: 1 },
            (Control::TrainN { epochs }, SessionState::Idle) if epochs > 0 => {
                self.live.budget = Some(epochs);
                SessionState::Training { epoch: 1 }
            }
            (Control::Resume | Control::SkipIntervention, SessionState::PausedAwaitingEdit { epoch }) => {
                SessionState::Training { epoch: epoch + 1 }
            }
            (Control::TrainN { epochs }, SessionState::PausedAwaitingEdit { epoch }) if epochs > 0 => {
                self.live.budget = Some(epochs);
                SessionState::Training { epoch: epoch + 1 }
            }
            _ => {
                self.live.apply(cmd, &self.state)?;
                self.state.clone()
            }
        };
        debug_assert!(self.state.can_move_to(&next));
        self.state = next;
        Ok(self.state.clone())
    }

    /// Turns edits over the current snapshot into the active layout and
    /// resumes training. Returns the new layout id.
    pub fn commit(&mut self, edits: &BTreeMap<PointId, [f32; 2]>, source: &str) -> Result<u64, TrainError> {
        let SessionState::PausedAwaitingEdit { epoch } = self.state else {
            return Err(TrainError::IllegalTransition { state: self.state.to_string(), command: "commit".into() });
        };
        if !self.config.guided() {
            return Err(TrainError::IllegalTransition {
                state: self.state.to_string(),
                command: "commit (baseline session)".into(),
            });
        }
        let snapshot = self.snapshot()?;
        let id = self.layouts_committed + 1;
        let layout = commit_layout(edits, &snapshot, source, id)?;
        self.layouts_committed = id;
        self.layout = Some(layout);
        self.state = SessionState::Training { epoch: epoch + 1 };
        Ok(id)
    }

    /// Runs the next epoch.
    pub fn advance(&mut self) -> Result<EpochRecord, TrainError> {
        self.advance_with(&mut |_, _| {})
    }

    /// Runs the next epoch, calling `between_batches` before every batch so
    /// live settings (alpha, lambda, pause requests) can change mid-epoch.
    pub fn advance_with(
        &mut self,
        between_batches: &mut dyn FnMut(&mut LiveControls, &SessionState),
    ) -> Result<EpochRecord, TrainError> {
        let SessionState::Training { epoch } = self.state else {
            let command = "advance".to_string();
            return Err(match &self.state {
                s if s.is_terminal() => TrainError::Ended(s.to_string()),
                s => TrainError::IllegalTransition { state: s.to_string(), command },
            });
        };
        match self.train_epoch(epoch, between_batches) {
            Ok(record) => {
                self.completed = epoch;
                self.log.records.push(record);
                self.state = self.after_epoch(epoch);
                if self.state == SessionState::Finished {
                    self.finish()?;
                }
                Ok(record)
            }
            Err(e) => {
                self.state = SessionState::Failed { reason: e.to_string() };
                self.log.summary = Some(self.summary(None));
                Err(e)
            }
        }
    }

    fn after_epoch(&mut self, epoch: u32) -> SessionState {
        if epoch >= self.config.epochs {
            return SessionState::Finished;
        }
        let intervene = self.config.guided() && self.config.intervention_epochs.contains(&epoch);
        let budget_spent = match self.live.budget {
            Some(b) if b <= 1 => true,
            Some(b) => {
                self.live.budget = Some(b - 1);
                false
            }
            None => false,
        };
        if intervene || budget_spent || self.live.pause_requested {
            self.live.pause_requested = false;
            self.live.budget = None;
            SessionState::PausedAwaitingEdit { epoch }
        } else {
            SessionState::Training { epoch: epoch + 1 }
        }
    }

    fn finish(&mut self) -> Result<(), TrainError> {
        let has_test = self.dataset.splits.as_ref().is_some_and(|s| !s.test.is_empty());
        let test = if has_test { Some(self.evaluate(Split::Test)?.accuracy) } else { None };
        self.log.summary = Some(self.summary(test));
        Ok(())
    }

    fn summary(&self, test_acc: Option<f64>) -> RunSummary {
        let (best_epoch, best_val_acc) = self.log.records.iter().fold((0, f64::NEG_INFINITY), |best, r| {
            if r.val_acc > best.1 {
                (r.epoch, r.val_acc)
            } else {
                best
            }
        });
        RunSummary {
            epochs_completed: self.completed,
            final_val_acc: self.log.final_accuracy().unwrap_or(0.0),
            best_val_acc: if best_epoch == 0 { 0.0 } else { best_val_acc },
            best_epoch,
            layouts_committed: self.layouts_committed,
            test_acc,
            final_state: self.state.to_string(),
        }
    }

    fn split_indices(&self, which: Split) -> &[usize] {
        let s = self.dataset.splits.as_ref().expect("sessions always hold a split");
        match which {
            Split::Train => &s.train,
            Split::Validation => &s.val,
            Split::Test => &s.test,
        }
    }

    /// Shuffled training order of `epoch`; differs between epochs, fixed by the seed.
    pub fn epoch_order(&self, epoch: u32) -> Vec<usize> {
        let mut order = self.split_indices(Split::Train).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STREAM_SHUFFLE));
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    fn train_epoch(
        &mut self,
        epoch: u32,
        between_batches: &mut dyn FnMut(&mut LiveControls, &SessionState),
    ) -> Result<EpochRecord, TrainError> {
        let started = self.clock.now_ms();
        let order = self.epoch_order(epoch);
        // layouts steer training only once pretraining is over
        let guided_epoch = self.config.guided() && epoch > self.config.pretrain_epochs;
        let active_layout = if guided_epoch { self.layout.clone() } else { None };
        let mut sums = LossBreakdown::default();
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            between_batches(&mut self.live, &self.state);
            let (inputs, labels) = self.dataset.batch(chunk);
            let dropout_seed =
                derive_seed(derive_seed(self.config.seed, STREAM_DROPOUT), ((epoch as u64) << 32) | b as u64);
            let mut g = Graph::new();
            let vars = self.backbone.params.bind(&mut g);
            let x = g.input(inputs);
            let out = self.backbone.forward_graph(&mut g, &vars, x, true, dropout_seed)?;
            let pvars: Vec<Var> = self.projector.params().iter().map(|(_, t)| g.input(t.clone())).collect();
            let p = self.projector.project_graph(&mut g, &pvars, out.latent)?;
            let sigma = self.projector.sigma_ref();
            let guidance = self.live.guidance;
            let (loss, breakdown) =
                match global_loss(&mut g, out.logits, &labels, p, active_layout.as_ref(), &guidance, sigma) {
                    // a batch with no layout class, or a single point, has no geometry to match
                    Err(GuidanceError::NoClassesInBatch | GuidanceError::TooFewPoints(_)) => {
                        global_loss(&mut g, out.logits, &labels, p, None, &guidance, sigma)?
                    }
                    other => other?,
                };
            if let Some(term) = non_finite_term(&breakdown) {
                return Err(TrainError::NonFinite { epoch, term: term.to_string() });
            }
            let grads = g.backward(loss)?.collect(&vars);
            match self.optimizer.step(&mut self.backbone.params, &grads) {
                Err(DiffError::NonFinite(_)) => {
                    return Err(TrainError::NonFinite { epoch, term: "gradient".to_string() })
                }
                other => other?,
            }
            if !self.projector.is_frozen() {
                let z = g.value(out.latent).clone();
                self.projector.epoch1_step(&z, &labels, &mut self.projector_optimizer)?;
            }
            let w = labels.len() as f64;
            sums.l_ce += w * breakdown.l_ce;
            sums.l_human += w * breakdown.l_human;
            sums.center_term += w * breakdown.center_term;
            sums.spread_term += w * breakdown.spread_term;
            sums.separation_term += w * breakdown.separation_term;
            sums.scale_model += w * breakdown.scale_model;
            sums.l_global += w * breakdown.l_global;
        }
        if !self.projector.is_frozen() {
            let (z, _) = self.forward_eval(&self.subsample)?;
            let reference = self.projector.project(&z)?;
            self.projector.freeze(&reference)?;
        }
        let metrics = self.evaluate(Split::Validation)?;
        if !metrics.loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, term: "val_loss".to_string() });
        }
        let n = order.len() as f64;
        Ok(EpochRecord {
            epoch,
            l_ce: sums.l_ce / n,
            l_human: sums.l_human / n,
            center: sums.center_term / n,
            spread: sums.spread_term / n,
            separation: sums.separation_term / n,
            scale_model: sums.scale_model / n,
            l_global: sums.l_global / n,
            val_acc: metrics.accuracy,
            val_loss: metrics.loss,
            layout_id: active_layout.map(|l| l.layout_id),
            wall_ms: self.clock.now_ms().saturating_sub(started),
        })
    }

    /// Eval-mode latents and logits of the given dataset rows.
    fn forward_eval(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>), TrainError> {
        let mut z = Vec::new();
        let mut logits = Vec::new();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (inputs, _) = self.dataset.batch(chunk);
            let (zc, lc) = self.backbone.forward_with_tap(&inputs, false, 0)?;
            z.extend_from_slice(zc.data());
            logits.extend_from_slice(lc.data());
        }
        let d = self.backbone.latent_dim();
        let c = self.config.model.num_classes;
        Ok((Tensor::new(vec![idx.len(), d], z)?, Tensor::new(vec![idx.len(), c], logits)?))
    }

    /// Accuracy and mean cross-entropy in eval mode.
    pub fn evaluate(&self, which: Split) -> Result<Metrics, TrainError> {
        let idx = self.split_indices(which);
        if idx.is_empty() {
            return Err(TrainError::EmptySplit(which.name()));
        }
        let (mut correct, mut loss) = (0usize, 0f64);
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (inputs, labels) = self.dataset.batch(chunk);
            let (_, logits) = self.backbone.forward_with_tap(&inputs, false, 0)?;
            correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
            let mut g = Graph::new();
            let lv = g.input(logits);
            let ce = g.softmax_cross_entropy(lv, &labels)?;
            loss += g.value(ce).item() as f64 * labels.len() as f64;
        }
        Ok(Metrics { accuracy: correct as f64 / idx.len() as f64, loss: loss / idx.len() as f64 })
    }

    /// Projection of the fixed validation subsample, with predictions and
    /// the latest metrics. Available once epoch 1 has completed.
    pub fn snapshot(&self) -> Result<LatentSnapshot, TrainError> {
        let Some(last) = self.log.records.last() else {
            return Err(TrainError::NoSnapshotYet);
        };
        if !self.projector.is_frozen() {
            return Err(TrainError::NoSnapshotYet);
        }
        let (z, logits) = self.forward_eval(&self.subsample)?;
        let positions = self.projector.project(&z)?;
        let predicted = argmax_rows(&logits);
        let labels: Vec<usize> = self.subsample.iter().map(|&i| self.dataset.labels[i]).collect();
        let points = self
            .subsample
            .iter()
            .enumerate()
            .map(|(k, &i)| SnapshotPoint {
                point_id: i as PointId,
                position: [positions.row(k)[0], positions.row(k)[1]],
                label: labels[k],
                predicted_label: predicted[k],
                misclassified: labels[k] != predicted[k],
            })
            .collect();
        Ok(LatentSnapshot {
            epoch: self.completed,
            points,
            class_stats: batch_class_stats(&positions, &labels)?,
            breakdown: last.breakdown(),
            val_accuracy: last.val_acc,
            val_loss: last.val_loss,
            layout_id: self.layout.as_ref().map(|l| l.layout_id),
        })
    }

    /// Names the failure reason, if any.
    pub fn failure(&self) -> Option<String> {
        match &self.state {
            SessionState::Failed { reason } => Some(reason.clone()),
            _ => None,
        }
    }
}

fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::models::BackboneSpec;
    use crate::strategies::Strategy;
    use crate::trainer::{drive, run, EditSource, Mode, ScriptedSource, SkipAll, ZeroClock};

    fn blobs() -> Dataset {
        gen_blobs(3, 100, 4, 2.0, 1.0, 11).unwrap()
    }

    fn config(mode: Mode) -> SessionConfig {
        let mut c = SessionConfig::new("blobs", BackboneSpec::default_mlp(4, 3), mode);
        c.epochs = 6;
        c.pretrain_epochs = 2;
        c.intervention_epochs = vec![2, 4];
        c.seed = 3;
        c
    }

    fn session(mode: Mode) -> Session {
        Session::new(config(mode), blobs(), Box::new(ZeroClock)).unwrap()
    }

    #[test]
    fn subsample_is_stratified_and_sized() {
        let labels: Vec<usize> = (0..100)
            .map(|i| {
                if i < 70 {
                    0
                } else if i < 95 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let pool: Vec<usize> = (0..100).collect();
        let s = stratified_subsample(&pool, &labels, 20, 1);
        assert_eq!(s.len(), 20);
        let count = |c| s.iter().filter(|&&i| labels[i] == c).count();
        assert_eq!((count(0), count(1), count(2)), (14, 5, 1));
        assert_eq!(stratified_subsample(&pool, &labels, 500, 1), pool);
    }

    #[test]
    fn batches_per_epoch_keep_partial_batch() {
        let s = session(Mode::Baseline);
        let n = s.split_indices(Split::Train).len();
        assert_eq!(n, 180);
        let sizes: Vec<usize> = s.epoch_order(1).chunks(32).map(|c| c.len()).collect();
        assert_eq!(sizes.len(), 6);
        assert_eq!(*sizes.last().unwrap(), 20);
    }

    #[test]
    fn epoch_shuffles_vary_by_epoch_only() {
        let a = session(Mode::Baseline);
        let b = session(Mode::Baseline);
        assert_ne!(a.epoch_order(1), a.epoch_order(2));
        assert_eq!(a.epoch_order(2), b.epoch_order(2));
    }

    #[test]
    fn state_machine_basics() {
        let mut s = session(Mode::Interactive);
        assert!(matches!(s.control(Control::SkipIntervention), Err(TrainError::IllegalTransition { .. })));
        assert_eq!(s.state(), &SessionState::Idle);
        assert!(s.snapshot().is_err());
        s.control(Control::Resume).unwrap();
        assert!(matches!(s.control(Control::Resume), Err(TrainError::IllegalTransition { .. })));
        s.advance().unwrap();
        s.advance().unwrap();
        assert_eq!(s.state(), &SessionState::PausedAwaitingEdit { epoch: 2 });
        let before = s.layout().cloned();
        s.control(Control::SkipIntervention).unwrap();
        assert_eq!(s.layout().cloned(), before);
        assert_eq!(s.state(), &SessionState::Training { epoch: 3 });
    }

    #[test]
    fn train_n_pauses_after_k_epochs() {
        let mut s = session(Mode::Baseline);
        s.control(Control::TrainN { epochs: 3 }).unwrap();
        for _ in 0..3 {
            s.advance().unwrap();
        }
        assert_eq!(s.state(), &SessionState::PausedAwaitingEdit { epoch: 3 });
        assert!(s.commit(&BTreeMap::new(), "human").is_err());
    }

    #[test]
    fn scripted_run_commits_at_each_intervention() {
        let log =
            run(config(Mode::Scripted { strategy: Strategy::study_analog() }), blobs(), None, Box::new(ZeroClock))
                .unwrap();
        assert_eq!(log.records.len(), 6);
        let ids: Vec<Option<u64>> = log.records.iter().map(|r| r.layout_id).collect();
        assert_eq!(ids, vec![None, None, Some(1), Some(1), Some(2), Some(2)]);
        assert!(log.records[2].l_human > 0.0);
        assert_eq!(log.summary.as_ref().unwrap().layouts_committed, 2);
    }

    #[test]
    fn skipping_everything_matches_baseline() {
        let base = run(config(Mode::Baseline), blobs(), None, Box::new(ZeroClock)).unwrap();
        let mut s = Session::new(config(Mode::Interactive), blobs(), Box::new(ZeroClock)).unwrap();
        drive(&mut s, &mut SkipAll, &mut ()).unwrap();
        assert_eq!(s.log().records, base.records);
        assert!(base.records.iter().all(|r| r.l_human == 0.0 && r.l_global == r.l_ce));
    }

    #[test]
    fn snapshot_contract() {
        let mut s = session(Mode::Interactive);
        s.control(Control::Resume).unwrap();
        s.advance().unwrap();
        s.advance().unwrap();
        let snap = s.snapshot().unwrap();
        assert_eq!(snap.points.len(), 60);
        let wrong = snap.points.iter().filter(|p| p.misclassified).count();
        assert!((wrong as f64 / 60.0 - (1.0 - snap.subsample_accuracy())).abs() < 1e-12);
        let mut copy = snap.clone();
        copy.points[0].position = [99.0, 99.0];
        assert_eq!(s.snapshot().unwrap(), snap);
        let mut src = ScriptedSource(Strategy::Compactness(0.5));
        let crate::trainer::Decision::Commit { edits, source } = src.decide(&snap).unwrap() else { panic!() };
        assert_eq!(s.commit(&edits, &source).unwrap(), 1);
        s.advance().unwrap();
        s.advance().unwrap();
        let later = s.snapshot().unwrap();
        let ids = |s: &LatentSnapshot| s.points.iter().map(|p| p.point_id).collect::<Vec<_>>();
        assert_eq!(ids(&snap), ids(&later));
    }

    #[test]
    fn projector_frozen_after_epoch_one() {
        let mut s = session(Mode::Scripted { strategy: Strategy::study_analog() });
        s.control(Control::Resume).unwrap();
        s.advance().unwrap();
        assert!(s.projector().is_frozen());
        let bytes = s.projector().param_bytes();
        let mut src = ScriptedSource(Strategy::study_analog());
        drive(&mut s, &mut src, &mut ()).unwrap();
        assert_eq!(s.projector().param_bytes(), bytes);
        assert_eq!(s.state(), &SessionState::Finished);
        assert!(matches!(s.advance(), Err(TrainError::Ended(_))));
    }

    #[test]
    fn alpha_one_turns_human_loss_off() {
        let mut s = session(Mode::Scripted { strategy: Strategy::study_analog() });
        s.control(Control::SetAlpha { value: 1.0 }).unwrap();
        s.control(Control::SetLambda { value: 0.0 }).unwrap();
        assert!(s.control(Control::SetAlpha { value: 1.5 }).is_err());
        let mut src = ScriptedSource(Strategy::study_analog());
        drive(&mut s, &mut src, &mut ()).unwrap();
        for r in &s.log().records {
            assert_eq!(r.l_global, r.l_ce, "epoch {}", r.epoch);
        }
    }

    #[test]
    fn evaluate_is_pure() {
        let s = session(Mode::Baseline);
        assert_eq!(s.evaluate(Split::Validation).unwrap(), s.evaluate(Split::Validation).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut c = config(Mode::Baseline);
        c.intervention_epochs = vec![1];
        assert!(c.validate().is_err());
        c.intervention_epochs = vec![4, 3];
        assert!(c.validate().is_err());
        c.intervention_epochs = vec![6];
        assert!(c.validate().is_err());
        c.intervention_epochs = vec![];
        c.pretrain_epochs = 7;
        assert!(c.validate().is_err());
        c.pretrain_epochs = 2;
        c.snapshot_size = Some(2);
        assert!(c.validate().is_err());
        c.snapshot_size = None;
        c.guidance.alpha = 1.5;
        assert!(c.validate().is_err());
    }
}
