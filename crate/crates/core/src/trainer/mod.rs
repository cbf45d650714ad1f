//! The epoch-wise interaction loop.
//!
//! A [`Session`] owns one backbone, its projector and optimizer state, and
//! moves through [`SessionState`] under [`Control`] commands and layout
//! commits. [`run`] drives a session to completion with an [`EditSource`]
//! answering every pause.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::diffcore::{DiffError, OptimizerConfig};
use crate::guidance::{GuidanceConfig, GuidanceError, LossBreakdown, TargetLayout};
use crate::models::{BackboneSpec, ModelError};
use crate::projection::ProjectionError;
use crate::snapshot::{LatentSnapshot, PointId};
use crate::strategies::{Strategy, StrategyError};

mod log;
mod session;

pub use log::{EpochRecord, ExperimentLog, RunSummary};
pub use session::{Metrics, Session, Split};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("`{command}` is not legal in state {state}")]
    IllegalTransition { state: String, command: String },
    #[error("non-finite {term} at epoch {epoch}")]
    NonFinite { epoch: u32, term: String },
    #[error("no snapshot before epoch 1 completes")]
    NoSnapshotYet,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("session already ended: {0}")]
    Ended(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Who answers the pauses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Mode {
    Interactive,
    Scripted {
        strategy: Strategy,
    },
    /// Guidance permanently off; configured interventions are ignored.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Free-form dataset reference echoed into logs (`blobs-hard`, `csv:PATH`, ...).
    pub dataset: String,
    pub model: BackboneSpec,
    pub optimizer: OptimizerConfig,
    pub guidance: GuidanceConfig,
    pub batch_size: usize,
    pub epochs: u32,
    pub pretrain_epochs: u32,
    pub intervention_epochs: Vec<u32>,
    pub seed: u64,
    /// `None` means `min(1000, validation size)`.
    pub snapshot_size: Option<usize>,
    pub mode: Mode,
    /// Train / validation / test fractions, used when the dataset carries no split.
    pub split: [f64; 3],
    /// Learning rate of the projector during epoch 1.
    pub projector_lr: f64,
}

impl SessionConfig {
    pub fn new(dataset: &str, model: BackboneSpec, mode: Mode) -> Self {
        SessionConfig {
            dataset: dataset.to_string(),
            model,
            optimizer: OptimizerConfig::default(),
            guidance: GuidanceConfig::default(),
            batch_size: 32,
            epochs: 45,
            pretrain_epochs: 25,
            intervention_epochs: alloc::vec![25, 30, 35, 40],
            seed: 0,
            snapshot_size: None,
            mode,
            split: [0.6, 0.2, 0.2],
            projector_lr: 1e-2,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 || self.pretrain_epochs == 0 || self.pretrain_epochs > self.epochs {
            return bad(format!("need 1 <= pretrain ({}) <= epochs ({})", self.pretrain_epochs, self.epochs));
        }
        if self.intervention_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("intervention epochs must be strictly increasing".into());
        }
        if let Some(e) = self.intervention_epochs.iter().find(|&&e| e < self.pretrain_epochs || e >= self.epochs) {
            return bad(format!("intervention epoch {e} outside [{}, {})", self.pretrain_epochs, self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(m) = self.snapshot_size {
            if m < self.model.num_classes {
                return bad(format!("snapshot size {m} below class count {}", self.model.num_classes));
            }
        }
        if self.split.iter().any(|f| !(*f >= 0.0)) || self.split[0] <= 0.0 || self.split[1] <= 0.0 {
            return bad(format!("bad split fractions {:?}", self.split));
        }
        if self.split.iter().sum::<f64>() > 1.0 + 1e-9 {
            return bad(format!("split fractions {:?} exceed 1", self.split));
        }
        if !(self.projector_lr > 0.0 && self.projector_lr.is_finite()) {
            return bad("projector_lr must be positive".into());
        }
        self.optimizer.validate().map_err(|m| TrainError::InvalidConfig(m.to_string()))?;
        self.guidance.validate()?;
        if let Mode::Scripted { strategy } = &self.mode {
            strategy.validate()?;
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn guided(&self) -> bool {
        !matches!(self.mode, Mode::Baseline)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    /// `epoch` is the epoch that runs next.
    Training {
        epoch: u32,
    },
    /// `epoch` is the epoch that just completed.
    PausedAwaitingEdit {
        epoch: u32,
    },
    Finished,
    Failed {
        reason: String,
    },
}

impl SessionState {
    pub fn name(&self) -> &'static str {
        match self {
            SessionState::Idle => "idle",
            SessionState::Training { .. } => "training",
            SessionState::PausedAwaitingEdit { .. } => "paused_awaiting_edit",
            SessionState::Finished => "finished",
            SessionState::Failed { .. } => "failed",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, SessionState::Finished | SessionState::Failed { .. })
    }

    /// Whether `self -> next` is one of the allowed moves.
    pub fn can_move_to(&self, next: &SessionState) -> bool {
        use SessionState::*;
        match (self, next) {
            (Failed { .. }, _) => self == next,
            (_, Failed { .. }) => true,
            (Idle, Idle) => true,
            (Idle, Training { epoch }) => *epoch == 1,
            (Training { epoch: a }, Training { epoch: b }) => b == a || *b == a + 1,
            (Training { epoch: a }, PausedAwaitingEdit { epoch: b }) => a == b,
            (Training { .. }, Finished) => true,
            (PausedAwaitingEdit { epoch: a }, PausedAwaitingEdit { epoch: b }) => a == b,
            (PausedAwaitingEdit { epoch: a }, Training { epoch: b }) => *b == a + 1,
            (Finished, Finished) => true,
            _ => false,
        }
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionState::Training { epoch } => write!(f, "training(epoch {epoch})"),
            SessionState::PausedAwaitingEdit { epoch } => write!(f, "paused_awaiting_edit(epoch {epoch})"),
            SessionState::Failed { reason } => write!(f, "failed({reason})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Control {
    Pause,
    Resume,
    SkipIntervention,
    SetAlpha { value: f64 },
    SetLambda { value: f64 },
    TrainN { epochs: u32 },
}

impl Control {
    pub fn name(&self) -> &'static str {
        match self {
            Control::Pause => "pause",
            Control::Resume => "resume",
            Control::SkipIntervention => "skip_intervention",
            Control::SetAlpha { .. } => "set_alpha",
            Control::SetLambda { .. } => "set_lambda",
            Control::TrainN { .. } => "train_n",
        }
    }
}

/// Settings a running epoch reads at every batch boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LiveControls {
    pub guidance: GuidanceConfig,
    pub pause_requested: bool,
    /// Epochs left before an automatic pause.
    pub budget: Option<u32>,
}

impl LiveControls {
    /// Applies the commands that are legal while an epoch is running.
    pub fn apply(&mut self, cmd: Control, state: &SessionState) -> Result<(), TrainError> {
        let illegal = || TrainError::IllegalTransition { state: state.to_string(), command: cmd.name().to_string() };
        if state.is_terminal() {
            return Err(illegal());
        }
        match cmd {
            Control::SetAlpha { value } => {
                let next = GuidanceConfig { alpha: value, ..self.guidance };
                next.validate()?;
                self.guidance = next;
            }
            Control::SetLambda { value } => {
                let next = GuidanceConfig { lambda: value, ..self.guidance };
                next.validate()?;
                self.guidance = next;
            }
            Control::Pause if matches!(state, SessionState::Training { .. }) => self.pause_requested = true,
            Control::TrainN { epochs: 0 } => {
                return Err(TrainError::InvalidConfig("train_n needs at least one epoch".into()))
            }
            Control::TrainN { epochs } if matches!(state, SessionState::Training { .. }) => self.budget = Some(epochs),
            _ => return Err(illegal()),
        }
        Ok(())
    }
}

/// Milliseconds since an arbitrary origin, for the `wall_ms` log field.
pub trait Clock: Send {
    fn now_ms(&self) -> u64;
}

/// Always reads zero; makes logs fully reproducible.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroClock;

impl Clock for ZeroClock {
    fn now_ms(&self) -> u64 {
        0
    }
}

/// Answer to a pause.
#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Commit { edits: BTreeMap<PointId, [f32; 2]>, source: String },
    Skip,
}

pub trait EditSource {
    fn decide(&mut self, snapshot: &LatentSnapshot) -> Result<Decision, TrainError>;
}

/// Applies a scripted strategy at every pause.
#[derive(Clone, Debug)]
pub struct ScriptedSource(pub Strategy);

impl EditSource for ScriptedSource {
    fn decide(&mut self, snapshot: &LatentSnapshot) -> Result<Decision, TrainError> {
        Ok(Decision::Commit { edits: self.0.apply(snapshot)?, source: self.0.to_string() })
    }
}

/// Skips every pause.
#[derive(Clone, Copy, Debug, Default)]
pub struct SkipAll;

impl EditSource for SkipAll {
    fn decide(&mut self, _: &LatentSnapshot) -> Result<Decision, TrainError> {
        Ok(Decision::Skip)
    }
}

/// Callbacks fired while [`drive`] runs a session.
pub trait Observer {
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    fn on_pause(&mut self, _snapshot: &LatentSnapshot) {}
    fn on_commit(&mut self, _layout: &TargetLayout) {}
}

impl Observer for () {}

/// Runs `session` until it finishes or fails, answering pauses from `source`.
pub fn drive(
    session: &mut Session,
    source: &mut dyn EditSource,
    observer: &mut dyn Observer,
) -> Result<(), TrainError> {
    if session.state() == &SessionState::Idle {
        session.control(Control::Resume)?;
    }
    loop {
        match session.state().clone() {
            SessionState::Training { .. } => {
                let record = session.advance()?;
                observer.on_epoch(&record);
            }
            SessionState::PausedAwaitingEdit { .. } => {
                let snapshot = session.snapshot()?;
                observer.on_pause(&snapshot);
                match source.decide(&snapshot)? {
                    Decision::Commit { edits, source } => {
                        session.commit(&edits, &source)?;
                        observer.on_commit(session.layout().expect("just committed"));
                    }
                    Decision::Skip => {
                        session.control(Control::SkipIntervention)?;
                    }
                }
            }
            SessionState::Finished => return Ok(()),
            SessionState::Failed { reason } => return Err(TrainError::Ended(reason)),
            SessionState::Idle => unreachable!("resumed above"),
        }
    }
}

/// One complete run. Scripted configs use their own strategy; interactive
/// configs need `source`, baseline configs never consult it.
pub fn run(
    config: SessionConfig,
    dataset: Dataset,
    source: Option<&mut dyn EditSource>,
    clock: Box<dyn Clock>,
) -> Result<ExperimentLog, TrainError> {
    let mut scripted = match &config.mode {
        Mode::Scripted { strategy } => Some(ScriptedSource(strategy.clone())),
        _ => None,
    };
    let mut skip = SkipAll;
    let mut session = Session::new(config, dataset, clock)?;
    let source: &mut dyn EditSource = match (scripted.as_mut(), source) {
        (Some(s), _) => s,
        (None, Some(s)) => s,
        (None, None) => &mut skip,
    };
    drive(&mut session, source, &mut ())?;
    Ok(session.into_log())
}

/// Non-finite values in a breakdown, named by the term that broke first.
pub(crate) fn non_finite_term(b: &LossBreakdown) -> Option<&'static str> {
    [
        ("l_ce", b.l_ce),
        ("center", b.center_term),
        ("spread", b.spread_term),
        ("separation", b.separation_term),
        ("scale_model", b.scale_model),
        ("l_global", b.l_global),
    ]
    .into_iter()
    .find(|(_, v)| !v.is_finite())
    .map(|(n, _)| n)
}

/// Mixes a seed with a stream tag.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(tag))
}
