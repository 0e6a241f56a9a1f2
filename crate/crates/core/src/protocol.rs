//! Study protocol: batch construction, training gate, self-consistency gate and
//! the per-participant session state machine.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::srcc;
use crate::dataset::{RatingEvent, TierName, ViewportSample, SCORE_MAX, SCORE_MIN};
use crate::rng;

pub const BATCH_IMAGES: usize = 25;
pub const MIN_SEPARATION: usize = 5;
pub const CONSISTENCY_SRCC: f64 = 0.9;
pub const MAX_BATCH_RETRIES: u8 = 1;
const ARRANGE_ATTEMPTS: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("{count} images is not a multiple of {BATCH_IMAGES} (strict batching)")]
    NotDivisible { count: usize },
    #[error("no images to batch")]
    NoImages,
    #[error("no tiers to batch")]
    NoTiers,
    #[error("duplicate image id {0}")]
    DuplicateImage(String),
    #[error("invalid batch {batch_id}: {message}")]
    InvalidBatch { batch_id: String, message: String },
    #[error("incomplete batch {batch_id}: {message}")]
    IncompleteBatch { batch_id: String, message: String },
    #[error("retry count {0} exceeds the single allowed retry")]
    RetryLimit(u8),
    #[error("invalid training item {image_id}: {message}")]
    InvalidTrainingItem { image_id: String, message: String },
    #[error("invalid value {0}: must be finite and in [1, 100]")]
    InvalidValue(f64),
    #[error("out of order: expected {expected}, got {got}")]
    OutOfOrder { expected: String, got: String },
    #[error("session is in phase {0:?}; {1}")]
    WrongPhase(Phase, &'static str),
    #[error("training file row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for ProtocolError {
    fn from(e: std::io::Error) -> Self {
        ProtocolError::Io(e.to_string())
    }
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Batches

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub image_id: String,
    /// 1 for the first presentation in the batch, 2 for the second.
    pub repetition: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub tier: TierName,
    pub slots: Vec<Slot>,
    pub seed: u64,
}

/// Separation demanded between the two presentations of an image. Batches of
/// fewer than [`MIN_SEPARATION`] images cannot reach it and get their size.
pub fn required_separation(n_images: usize) -> usize {
    MIN_SEPARATION.min(n_images)
}

fn min_gap(order: &[usize], n_images: usize) -> usize {
    let mut first = vec![usize::MAX; n_images];
    let mut gap = usize::MAX;
    for (pos, &img) in order.iter().enumerate() {
        if first[img] == usize::MAX {
            first[img] = pos;
        } else {
            gap = gap.min(pos - first[img]);
        }
    }
    gap
}

/// Seeded slot order: rejection over uniform shuffles, falling back to a
/// shuffled sequence repeated twice (gap exactly `n`) if no shuffle
/// qualifies within a bounded number of attempts.
fn arrange_slots(images: &[String], seed: u64) -> Vec<Slot> {
    let n = images.len();
    let need = required_separation(n);
    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..n).chain(0..n).collect();
    let mut found = false;
    for _ in 0..ARRANGE_ATTEMPTS {
        order.shuffle(&mut rng);
        if min_gap(&order, n) >= need {
            found = true;
            break;
        }
    }
    if !found {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        order = perm.iter().chain(perm.iter()).copied().collect();
    }
    let mut seen = vec![false; n];
    order
        .into_iter()
        .map(|i| {
            let repetition = if seen[i] { 2 } else { 1 };
            seen[i] = true;
            Slot {
                image_id: images[i].clone(),
                repetition,
            }
        })
        .collect()
}

impl Batch {
    pub fn new(batch_id: impl Into<String>, tier: TierName, images: &[String], seed: u64) -> Result<Self> {
        let batch_id = batch_id.into();
        if images.is_empty() {
            return Err(ProtocolError::InvalidBatch {
                batch_id,
                message: "no images".into(),
            });
        }
        let mut set = BTreeSet::new();
        for id in images {
            if !set.insert(id) {
                return Err(ProtocolError::DuplicateImage(id.clone()));
            }
        }
        Ok(Batch {
            slots: arrange_slots(images, seed),
            batch_id,
            tier,
            seed,
        })
    }

    /// Distinct images in order of first presentation.
    pub fn images(&self) -> Vec<&str> {
        self.slots
            .iter()
            .filter(|s| s.repetition == 1)
            .map(|s| s.image_id.as_str())
            .collect()
    }

    pub fn n_images(&self) -> usize {
        self.slots.len() / 2
    }

    /// Smallest slot distance between the two presentations of any image.
    pub fn min_separation(&self) -> usize {
        let mut first: BTreeMap<&str, usize> = BTreeMap::new();
        let mut gap = usize::MAX;
        for (pos, s) in self.slots.iter().enumerate() {
            match first.get(s.image_id.as_str()) {
                Some(&p) => gap = gap.min(pos - p),
                None => {
                    first.insert(&s.image_id, pos);
                }
            }
        }
        gap
    }

    /// The same images presented in a fresh order for retry `attempt`.
    pub fn reshuffled(&self, attempt: u8) -> Batch {
        let images: Vec<String> = self.images().into_iter().map(str::to_owned).collect();
        Batch {
            batch_id: self.batch_id.clone(),
            tier: self.tier,
            slots: arrange_slots(&images, rng::derive_seed(self.seed, attempt as u64)),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| ProtocolError::InvalidBatch {
            batch_id: self.batch_id.clone(),
            message,
        };
        let mut counts: BTreeMap<&str, [usize; 2]> = BTreeMap::new();
        for s in &self.slots {
            if !(1..=2).contains(&s.repetition) {
                return Err(fail(format!("repetition {} for {}", s.repetition, s.image_id)));
            }
            let c = counts.entry(&s.image_id).or_default();
            c[(s.repetition - 1) as usize] += 1;
            if s.repetition == 2 && c[0] == 0 {
                return Err(fail(format!("{} repetition 2 precedes repetition 1", s.image_id)));
            }
        }
        if counts.is_empty() || counts.len() > BATCH_IMAGES {
            return Err(fail(format!("{} distinct images", counts.len())));
        }
        if let Some((id, _)) = counts.iter().find(|(_, c)| **c != [1, 1]) {
            return Err(fail(format!("{id} is not presented exactly twice")));
        }
        let need = required_separation(counts.len());
        if self.min_separation() < need {
            return Err(fail(format!(
                "repetitions {} slots apart, need {need}",
                self.min_separation()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Image count must be a multiple of the batch size.
    Strict,
    /// Full batches plus one smaller final batch per tier.
    #[default]
    Uneven,
}

/// Builds every batch of a session. Per tier, the images are shuffled and cut
/// into groups of [`BATCH_IMAGES`]; the resulting batches across all tiers are
/// then shuffled into presentation order.
pub fn generate_batches(images: &[String], tiers: &[TierName], seed: u64, mode: BatchMode) -> Result<Vec<Batch>> {
    if images.is_empty() {
        return Err(ProtocolError::NoImages);
    }
    if tiers.is_empty() {
        return Err(ProtocolError::NoTiers);
    }
    let mut set = BTreeSet::new();
    for id in images {
        if !set.insert(id) {
            return Err(ProtocolError::DuplicateImage(id.clone()));
        }
    }
    if mode == BatchMode::Strict && images.len() % BATCH_IMAGES != 0 {
        return Err(ProtocolError::NotDivisible { count: images.len() });
    }
    let mut batches = Vec::new();
    for (ti, &tier) in tiers.iter().enumerate() {
        let mut ids = images.to_vec();
        ids.shuffle(&mut rng::stream(seed, ti as u64));
        for (j, group) in ids.chunks(BATCH_IMAGES).enumerate() {
            let batch_seed = rng::derive_seed(seed, ((ti as u64) << 32) | j as u64);
            batches.push(Batch::new(format!("{tier}-{j:02}"), tier, group, batch_seed)?);
        }
    }
    batches.shuffle(&mut rng::stream(seed, u32::MAX as u64));
    Ok(batches)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingItem {
    pub image_id: String,
    pub tier: TierName,
    pub lo: f64,
    pub hi: f64,
}

impl TrainingItem {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lo.is_finite()
            && self.hi.is_finite()
            && self.lo >= SCORE_MIN
            && self.hi <= SCORE_MAX
            && self.lo < self.hi;
        if ok {
            Ok(())
        } else {
            Err(ProtocolError::InvalidTrainingItem {
                image_id: self.image_id.clone(),
                message: format!("range [{}, {}] must satisfy 1 <= lo < hi <= 100", self.lo, self.hi),
            })
        }
    }
}

pub fn read_training<R: Read>(reader: R) -> Result<Vec<TrainingItem>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<TrainingItem>().enumerate() {
        let item = row.map_err(|e| ProtocolError::Row {
            row: i + 1,
            message: e.to_string(),
        })?;
        item.validate().map_err(|e| ProtocolError::Row {
            row: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn load_training(path: impl AsRef<Path>) -> Result<Vec<TrainingItem>> {
    read_training(std::fs::File::open(path)?)
}

pub fn write_training<W: Write>(writer: W, items: &[TrainingItem]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for item in items {
        w.serialize(item).map_err(|e| ProtocolError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum TrainingOutcome {
    Pass,
    Retry { lo: f64, hi: f64 },
}

/// Passes iff `lo <= value <= hi`.
pub fn training_gate(value: f64, item: &TrainingItem) -> TrainingOutcome {
    if item.lo <= value && value <= item.hi {
        TrainingOutcome::Pass
    } else {
        TrainingOutcome::Retry {
            lo: item.lo,
            hi: item.hi,
        }
    }
}

// ---------------------------------------------------------------------------
// Consistency

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyDecision {
    Accept,
    RequireRetry,
    AcceptAfterRetry,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCheck {
    /// `None` when a repetition vector is constant.
    pub srcc: Option<f64>,
    pub decision: ConsistencyDecision,
}

impl ConsistencyCheck {
    pub fn low_consistency(&self) -> bool {
        self.decision == ConsistencyDecision::AcceptAfterRetry
    }
}

/// SRCC between the first and second presentation scores of a complete
/// batch. An undefined SRCC (constant scores) does not pass the threshold.
pub fn consistency_gate(batch: &Batch, ratings: &[RatingEvent], retry_count: u8) -> Result<ConsistencyCheck> {
    if retry_count > MAX_BATCH_RETRIES {
        return Err(ProtocolError::RetryLimit(retry_count));
    }
    let fail = |message: String| ProtocolError::IncompleteBatch {
        batch_id: batch.batch_id.clone(),
        message,
    };
    if ratings.len() != batch.slots.len() {
        return Err(fail(format!("{} of {} slots rated", ratings.len(), batch.slots.len())));
    }
    let mut values: BTreeMap<(&str, u8), f64> = BTreeMap::new();
    for r in ratings {
        if r.tier != batch.tier {
            return Err(fail(format!("rating for tier {} in a {} batch", r.tier, batch.tier)));
        }
        if values.insert((r.image_id.as_str(), r.repetition), r.value).is_some() {
            return Err(fail(format!("{} repetition {} rated twice", r.image_id, r.repetition)));
        }
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for id in batch.images() {
        match (values.get(&(id, 1)), values.get(&(id, 2))) {
            (Some(&a), Some(&b)) => {
                first.push(a);
                second.push(b);
            }
            _ => return Err(fail(format!("{id} missing a repetition"))),
        }
    }
    let r = srcc(&first, &second).ok();
    let decision = match (r, retry_count) {
        (Some(v), _) if v >= CONSISTENCY_SRCC => ConsistencyDecision::Accept,
        (_, 0) => ConsistencyDecision::RequireRetry,
        _ => ConsistencyDecision::AcceptAfterRetry,
    };
    Ok(ConsistencyCheck { srcc: r, decision })
}

// ---------------------------------------------------------------------------
// Session

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    DeviceCheck,
    Training,
    Main,
    Done,
}

/// Entries of the per-session event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionEvent {
    Created {
        participant_id: String,
        training_items: usize,
        batches: Vec<String>,
    },
    DeviceCheck {
        passed: bool,
        detail: String,
    },
    PhaseChanged {
        from: Phase,
        to: Phase,
    },
    TrainingRating {
        image_id: String,
        tier: TierName,
        value: f64,
        lo: f64,
        hi: f64,
        passed: bool,
        submitted_at: u64,
    },
    /// Every main-phase rating, including those of a rejected attempt.
    Rating { attempt: u8, event: RatingEvent },
    BatchChecked {
        batch_id: String,
        attempt: u8,
        srcc: Option<f64>,
        decision: ConsistencyDecision,
        low_consistency: bool,
    },
}

/// What the participant should be shown next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum CurrentItem {
    DeviceCheck,
    Training {
        image_id: String,
        tier: TierName,
        index: usize,
        total: usize,
    },
    Main {
        batch_id: String,
        tier: TierName,
        image_id: String,
        slot: usize,
        slots: usize,
        batch_index: usize,
        batches: usize,
    },
    Done,
}

impl CurrentItem {
    pub fn image(&self) -> Option<(&str, TierName)> {
        match self {
            CurrentItem::Training { image_id, tier, .. } | CurrentItem::Main { image_id, tier, .. } => {
                Some((image_id, *tier))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub image_id: String,
    pub tier: TierName,
    /// When given, must name the current batch / slot.
    #[serde(default)]
    pub batch_id: Option<String>,
    #[serde(default)]
    pub slot: Option<usize>,
    pub value: f64,
    pub submitted_at: u64,
    #[serde(default)]
    pub viewport_trace: Vec<ViewportSample>,
    #[serde(default)]
    pub window_maximized: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum StepOutcome {
    TrainingPass,
    TrainingRetry { lo: f64, hi: f64 },
    Recorded,
    BatchAccepted { batch_id: String, srcc: Option<f64>, low_consistency: bool },
    BatchRetry { batch_id: String, srcc: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub outcome: StepOutcome,
    /// Ratings of a batch accepted by this step, in slot order.
    pub accepted: Vec<RatingEvent>,
    /// Log entries produced by this step.
    pub events: Vec<SessionEvent>,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Phase,
    pub training_done: usize,
    pub training_total: usize,
    pub batches_done: usize,
    pub batches_total: usize,
    pub slot: usize,
    pub slots: usize,
    pub retries_used: usize,
    pub accepted_ratings: usize,
}

/// One participant's walk through the study. All mutation goes through
/// [`Session::pass_device_check`], [`Session::fail_device_check`] and
/// [`Session::submit`]; nothing exposes previously submitted values.
#[derive(Debug, Clone)]
pub struct Session {
    participant_id: String,
    phase: Phase,
    training: Vec<TrainingItem>,
    training_pos: usize,
    batches: Vec<Batch>,
    batch_pos: usize,
    retry_counts: Vec<u8>,
    attempt: Vec<RatingEvent>,
    accepted_ratings: usize,
    log: Vec<SessionEvent>,
}

impl Session {
    pub fn new(participant_id: impl Into<String>, training: Vec<TrainingItem>, batches: Vec<Batch>) -> Result<Self> {
        for t in &training {
            t.validate()?;
        }
        for b in &batches {
            b.validate()?;
        }
        let participant_id = participant_id.into();
        let log = vec![SessionEvent::Created {
            participant_id: participant_id.clone(),
            training_items: training.len(),
            batches: batches.iter().map(|b| b.batch_id.clone()).collect(),
        }];
        Ok(Session {
            participant_id,
            phase: Phase::DeviceCheck,
            retry_counts: vec![0; batches.len()],
            training,
            training_pos: 0,
            batches,
            batch_pos: 0,
            attempt: Vec::new(),
            accepted_ratings: 0,
            log,
        })
    }

    pub fn participant_id(&self) -> &str {
        &self.participant_id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn log(&self) -> &[SessionEvent] {
        &self.log
    }

    pub fn retry_counts(&self) -> &[u8] {
        &self.retry_counts
    }

    fn advance(&mut self, events: &mut Vec<SessionEvent>) {
        let next = match self.phase {
            Phase::DeviceCheck if self.training_pos < self.training.len() => Phase::Training,
            Phase::DeviceCheck | Phase::Training if self.batch_pos < self.batches.len() => Phase::Main,
            Phase::Main if self.batch_pos < self.batches.len() => Phase::Main,
            _ => Phase::Done,
        };
        if next != self.phase {
            events.push(SessionEvent::PhaseChanged {
                from: self.phase,
                to: next,
            });
            self.phase = next;
        }
    }

    fn commit(&mut self, events: Vec<SessionEvent>) -> Vec<SessionEvent> {
        self.log.extend(events.iter().cloned());
        events
    }

    pub fn fail_device_check(&mut self, detail: impl Into<String>) -> Result<Vec<SessionEvent>> {
        if self.phase != Phase::DeviceCheck {
            return Err(ProtocolError::WrongPhase(self.phase, "device check already passed"));
        }
        Ok(self.commit(vec![SessionEvent::DeviceCheck {
            passed: false,
            detail: detail.into(),
        }]))
    }

    pub fn pass_device_check(&mut self, detail: impl Into<String>) -> Result<Vec<SessionEvent>> {
        if self.phase != Phase::DeviceCheck {
            return Err(ProtocolError::WrongPhase(self.phase, "device check already passed"));
        }
        let mut events = vec![SessionEvent::DeviceCheck {
            passed: true,
            detail: detail.into(),
        }];
        self.advance(&mut events);
        Ok(self.commit(events))
    }

    pub fn current(&self) -> CurrentItem {
        match self.phase {
            Phase::DeviceCheck => CurrentItem::DeviceCheck,
            Phase::Training => {
                let t = &self.training[self.training_pos];
                CurrentItem::Training {
                    image_id: t.image_id.clone(),
                    tier: t.tier,
                    index: self.training_pos,
                    total: self.training.len(),
                }
            }
            Phase::Main => {
                let b = &self.batches[self.batch_pos];
                let slot = self.attempt.len();
                CurrentItem::Main {
                    batch_id: b.batch_id.clone(),
                    tier: b.tier,
                    image_id: b.slots[slot].image_id.clone(),
                    slot,
                    slots: b.slots.len(),
                    batch_index: self.batch_pos,
                    batches: self.batches.len(),
                }
            }
            Phase::Done => CurrentItem::Done,
        }
    }

    pub fn progress(&self) -> Progress {
        let (slot, slots) = match self.phase {
            Phase::Main => (self.attempt.len(), self.batches[self.batch_pos].slots.len()),
            _ => (0, 0),
        };
        Progress {
            phase: self.phase,
            training_done: self.training_pos,
            training_total: self.training.len(),
            batches_done: self.batch_pos,
            batches_total: self.batches.len(),
            slot,
            slots,
            retries_used: self.retry_counts.iter().map(|&c| c as usize).sum(),
            accepted_ratings: self.accepted_ratings,
        }
    }

    /// Whether `image_id` at `tier` is what the participant is currently shown.
    pub fn is_current_image(&self, image_id: &str, tier: TierName) -> bool {
        self.current().image() == Some((image_id, tier))
    }

    pub fn submit(&mut self, sub: Submission) -> Result<Step> {
        if !sub.value.is_finite() || !(SCORE_MIN..=SCORE_MAX).contains(&sub.value) {
            return Err(ProtocolError::InvalidValue(sub.value));
        }
        let current = self.current();
        let Some((image, tier)) = current.image() else {
            return Err(ProtocolError::WrongPhase(self.phase, "no item awaits a rating"));
        };
        if image != sub.image_id || tier != sub.tier {
            return Err(ProtocolError::OutOfOrder {
                expected: format!("{image}@{tier}"),
                got: format!("{}@{}", sub.image_id, sub.tier),
            });
        }
        if let CurrentItem::Main { batch_id, slot, .. } = &current {
            if sub.batch_id.as_ref().is_some_and(|b| b != batch_id) || sub.slot.is_some_and(|s| s != *slot) {
                return Err(ProtocolError::OutOfOrder {
                    expected: format!("{batch_id}#{slot}"),
                    got: format!(
                        "{}#{}",
                        sub.batch_id.as_deref().unwrap_or(batch_id),
                        sub.slot.unwrap_or(*slot)
                    ),
                });
            }
        }
        match self.phase {
            Phase::Training => Ok(self.submit_training(sub)),
            _ => Ok(self.submit_main(sub)),
        }
    }

    fn submit_training(&mut self, sub: Submission) -> Step {
        let item = &self.training[self.training_pos];
        let outcome = training_gate(sub.value, item);
        let mut events = vec![SessionEvent::TrainingRating {
            image_id: sub.image_id,
            tier: sub.tier,
            value: sub.value,
            lo: item.lo,
            hi: item.hi,
            passed: outcome == TrainingOutcome::Pass,
            submitted_at: sub.submitted_at,
        }];
        let outcome = match outcome {
            TrainingOutcome::Pass => {
                self.training_pos += 1;
                if self.training_pos == self.training.len() {
                    self.advance(&mut events);
                }
                StepOutcome::TrainingPass
            }
            TrainingOutcome::Retry { lo, hi } => StepOutcome::TrainingRetry { lo, hi },
        };
        Step {
            outcome,
            accepted: Vec::new(),
            events: self.commit(events),
            phase: self.phase,
        }
    }

    fn submit_main(&mut self, sub: Submission) -> Step {
        let b = &self.batches[self.batch_pos];
        let slot = &b.slots[self.attempt.len()];
        let attempt = self.retry_counts[self.batch_pos];
        let event = RatingEvent {
            participant_id: self.participant_id.clone(),
            image_id: sub.image_id,
            tier: sub.tier,
            batch_id: b.batch_id.clone(),
            repetition: slot.repetition,
            value: sub.value,
            submitted_at: sub.submitted_at,
            viewport_trace: sub.viewport_trace,
            window_maximized: sub.window_maximized,
        };
        let mut events = vec![SessionEvent::Rating {
            attempt,
            event: event.clone(),
        }];
        self.attempt.push(event);
        if self.attempt.len() < b.slots.len() {
            return Step {
                outcome: StepOutcome::Recorded,
                accepted: Vec::new(),
                events: self.commit(events),
                phase: self.phase,
            };
        }
        let check = consistency_gate(b, &self.attempt, attempt).expect("session keeps batches complete and ordered");
        let batch_id = b.batch_id.clone();
        events.push(SessionEvent::BatchChecked {
            batch_id: batch_id.clone(),
            attempt,
            srcc: check.srcc,
            decision: check.decision,
            low_consistency: check.low_consistency(),
        });
        let mut accepted = Vec::new();
        let outcome = match check.decision {
            ConsistencyDecision::RequireRetry => {
                self.retry_counts[self.batch_pos] += 1;
                let fresh = self.batches[self.batch_pos].reshuffled(self.retry_counts[self.batch_pos]);
                self.batches[self.batch_pos] = fresh;
                self.attempt.clear();
                StepOutcome::BatchRetry {
                    batch_id,
                    srcc: check.srcc,
                }
            }
            _ => {
                accepted = std::mem::take(&mut self.attempt);
                self.accepted_ratings += accepted.len();
                self.batch_pos += 1;
                self.advance(&mut events);
                StepOutcome::BatchAccepted {
                    batch_id,
                    srcc: check.srcc,
                    low_consistency: check.low_consistency(),
                }
            }
        };
        Step {
            outcome,
            accepted,
            events: self.commit(events),
            phase: self.phase,
        }
    }
}
