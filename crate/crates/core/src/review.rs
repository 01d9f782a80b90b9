//! Event-sourced review sessions: verification, reclassification,
//! rejection, audit log and final export.
//!
//! A session directory holds `initial.json` (the fused detections) and
//! `events.ndjson` (one [`AuditEvent`] per line). The current state is always
//! the fold of the event log over the initial states.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detfuse::{ClassScores, DebrisClass, FeatureView, Footprint, FusedDetection};
use crate::error::{Error, Result};

pub const INITIAL_FILE: &str = "initial.json";
pub const EVENTS_FILE: &str = "events.ndjson";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReviewState {
    #[default]
    Unverified,
    Verified,
    Reclassified,
    Rejected,
}

/// Current class and review state of one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionState {
    pub class: DebrisClass,
    pub state: ReviewState,
    /// State to return to on restore.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before_reject: Option<ReviewState>,
}

impl DetectionState {
    pub fn initial(det: &FusedDetection) -> Self {
        Self {
            class: det.class,
            state: det.state,
            before_reject: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Action {
    Verify,
    /// `from` lists the previous class of each id, in id order.
    Reclassify {
        to: DebrisClass,
        from: Vec<DebrisClass>,
    },
    Reject,
    Restore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    /// RFC 3339, UTC.
    pub timestamp: String,
    pub actor: String,
    pub action: Action,
    pub ids: Vec<u32>,
}

/// An operator request before it becomes an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Verify,
    Reclassify(DebrisClass),
    Reject,
    Restore,
}

/// Axis-aligned rectangle in embedding space; bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.x_min..=self.x_max).contains(&p[0]) && (self.y_min..=self.y_max).contains(&p[1])
    }
}

/// Contents of `initial.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInit {
    pub detections: Vec<FusedDetection>,
    /// Frame images used for thumbnails.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_dir: Option<PathBuf>,
}

/// One line of the final export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub id: u32,
    pub frame_id: String,
    pub t: f64,
    pub bbox: [f64; 4],
    pub class: DebrisClass,
    pub detector_class: DebrisClass,
    pub state: ReviewState,
    pub scores: ClassScores,
    pub footprint: Option<Footprint>,
}

pub type States = BTreeMap<u32, DetectionState>;

pub fn initial_states(detections: &[FusedDetection]) -> Result<States> {
    let mut states = States::new();
    for d in detections {
        if states.insert(d.id, DetectionState::initial(d)).is_some() {
            return Err(Error::Invalid(format!("duplicate detection id {}", d.id)));
        }
    }
    Ok(states)
}

fn check_ids(states: &States, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Precondition("no detection ids given".into()));
    }
    match ids.iter().find(|id| !states.contains_key(id)) {
        Some(id) => Err(Error::UnknownDetection(*id)),
        None => Ok(()),
    }
}

fn check_not_rejected(states: &States, ids: &[u32]) -> Result<()> {
    match ids.iter().find(|id| states[id].state == ReviewState::Rejected) {
        Some(id) => Err(Error::Precondition(format!("detection {id} is rejected"))),
        None => Ok(()),
    }
}

/// Applies one event to `states`. Validation happens before any change, so
/// an error leaves `states` untouched.
pub fn apply_event(states: &mut States, event: &AuditEvent) -> Result<()> {
    check_ids(states, &event.ids)?;
    match &event.action {
        Action::Verify => {
            check_not_rejected(states, &event.ids)?;
            for id in &event.ids {
                states.get_mut(id).expect("checked").state = ReviewState::Verified;
            }
        }
        Action::Reclassify { to, from } => {
            check_not_rejected(states, &event.ids)?;
            if from.len() != event.ids.len() {
                return Err(Error::Invalid(format!(
                    "event {}: {} previous classes for {} ids",
                    event.seq,
                    from.len(),
                    event.ids.len()
                )));
            }
            for id in &event.ids {
                let s = states.get_mut(id).expect("checked");
                s.state = if s.class == *to {
                    ReviewState::Verified
                } else {
                    ReviewState::Reclassified
                };
                s.class = *to;
            }
        }
        Action::Reject => {
            for id in &event.ids {
                let s = states.get_mut(id).expect("checked");
                if s.state != ReviewState::Rejected {
                    s.before_reject = Some(s.state);
                    s.state = ReviewState::Rejected;
                }
            }
        }
        Action::Restore => {
            for id in &event.ids {
                let s = states.get_mut(id).expect("checked");
                if let Some(prev) = s.before_reject.take() {
                    s.state = prev;
                }
            }
        }
    }
    Ok(())
}

/// Folds `events` over the initial states, checking sequence density.
pub fn replay(detections: &[FusedDetection], events: &[AuditEvent]) -> Result<States> {
    let mut states = initial_states(detections)?;
    for (i, e) in events.iter().enumerate() {
        if e.seq != i as u64 + 1 {
            return Err(Error::Invalid(format!(
                "event sequence gap: expected {}, found {}",
                i + 1,
                e.seq
            )));
        }
        apply_event(&mut states, e)?;
    }
    Ok(states)
}

fn normalize_ids(ids: &[u32]) -> Vec<u32> {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids
}

#[derive(Debug)]
struct EventStore {
    dir: PathBuf,
    file: File,
}

impl EventStore {
    fn append(&mut self, event: &AuditEvent) -> Result<()> {
        let path = self.dir.join(EVENTS_FILE);
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io(&path, e))
    }
}

/// A review session: initial detections, the audit log and the folded state.
#[derive(Debug)]
pub struct ReviewSession {
    pub id: String,
    pub view: FeatureView,
    init: SessionInit,
    states: States,
    log: Vec<AuditEvent>,
    store: Option<EventStore>,
}

impl ReviewSession {
    /// Session held in memory only.
    pub fn in_memory(id: impl Into<String>, detections: Vec<FusedDetection>) -> Result<Self> {
        let states = initial_states(&detections)?;
        Ok(Self {
            id: id.into(),
            view: FeatureView::default(),
            init: SessionInit {
                detections,
                frames_dir: None,
            },
            states,
            log: Vec::new(),
            store: None,
        })
    }

    /// Creates a new session directory. Fails if one already exists there.
    pub fn create(dir: &Path, init: SessionInit) -> Result<Self> {
        let initial = dir.join(INITIAL_FILE);
        if initial.exists() {
            return Err(Error::Precondition(format!(
                "{} already holds a session",
                dir.display()
            )));
        }
        let states = initial_states(&init.detections)?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(&initial, serde_json::to_vec_pretty(&init)?).map_err(|e| Error::io(&initial, e))?;
        let events = dir.join(EVENTS_FILE);
        let file = File::create(&events).map_err(|e| Error::io(&events, e))?;
        Ok(Self {
            id: session_id(dir),
            view: FeatureView::default(),
            init,
            states,
            log: Vec::new(),
            store: Some(EventStore {
                dir: dir.to_path_buf(),
                file,
            }),
        })
    }

    /// Opens a session directory and replays its log.
    pub fn open(dir: &Path) -> Result<Self> {
        let init = load_init(dir)?;
        let log = load_events(dir)?;
        let states = replay(&init.detections, &log)?;
        let events = dir.join(EVENTS_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&events)
            .map_err(|e| Error::io(&events, e))?;
        Ok(Self {
            id: session_id(dir),
            view: FeatureView::default(),
            init,
            states,
            log,
            store: Some(EventStore {
                dir: dir.to_path_buf(),
                file,
            }),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.store.as_ref().map(|s| s.dir.as_path())
    }

    pub fn frames_dir(&self) -> Option<&Path> {
        self.init.frames_dir.as_deref()
    }

    pub fn initial(&self) -> &[FusedDetection] {
        &self.init.detections
    }

    pub fn states(&self) -> &States {
        &self.states
    }

    pub fn state(&self, id: u32) -> Option<&DetectionState> {
        self.states.get(&id)
    }

    pub fn log(&self) -> &[AuditEvent] {
        &self.log
    }

    pub fn len(&self) -> usize {
        self.init.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.init.detections.is_empty()
    }

    pub fn detection(&self, id: u32) -> Option<&FusedDetection> {
        self.init.detections.iter().find(|d| d.id == id)
    }

    /// Detections with their current class and state.
    pub fn detections(&self) -> Vec<FusedDetection> {
        self.init
            .detections
            .iter()
            .map(|d| {
                let s = self.states[&d.id];
                FusedDetection {
                    class: s.class,
                    state: s.state,
                    ..d.clone()
                }
            })
            .collect()
    }

    /// Validates `command`, appends its event durably, then applies it.
    /// On error nothing is logged and no state changes.
    pub fn execute(&mut self, command: Command, ids: &[u32], actor: &str) -> Result<&AuditEvent> {
        let ids = normalize_ids(ids);
        check_ids(&self.states, &ids)?;
        let action = match command {
            Command::Verify => Action::Verify,
            Command::Reclassify(to) => Action::Reclassify {
                to,
                from: ids.iter().map(|id| self.states[id].class).collect(),
            },
            Command::Reject => Action::Reject,
            Command::Restore => Action::Restore,
        };
        let event = AuditEvent {
            seq: self.log.len() as u64 + 1,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            actor: actor.to_string(),
            action,
            ids,
        };
        let mut next = self.states.clone();
        apply_event(&mut next, &event)?;
        if let Some(store) = &mut self.store {
            store.append(&event)?;
        }
        self.states = next;
        self.log.push(event);
        Ok(self.log.last().expect("just pushed"))
    }

    pub fn verify(&mut self, ids: &[u32], actor: &str) -> Result<&AuditEvent> {
        self.execute(Command::Verify, ids, actor)
    }

    pub fn reclassify(&mut self, ids: &[u32], class: DebrisClass, actor: &str) -> Result<&AuditEvent> {
        self.execute(Command::Reclassify(class), ids, actor)
    }

    pub fn reject(&mut self, ids: &[u32], actor: &str) -> Result<&AuditEvent> {
        self.execute(Command::Reject, ids, actor)
    }

    pub fn restore(&mut self, ids: &[u32], actor: &str) -> Result<&AuditEvent> {
        self.execute(Command::Restore, ids, actor)
    }

    /// Ids whose embedding point lies in `rect`, ascending.
    pub fn select_region(&self, rect: &Rect) -> Vec<u32> {
        select_region(&self.init.detections, rect)
    }

    pub fn rejected_count(&self) -> usize {
        self.states
            .values()
            .filter(|s| s.state == ReviewState::Rejected)
            .count()
    }

    /// All non-rejected detections with their current class, by id.
    pub fn export_final(&self) -> Vec<ExportRecord> {
        export_records(&self.init.detections, &self.states)
    }
}

pub fn select_region(detections: &[FusedDetection], rect: &Rect) -> Vec<u32> {
    let mut ids: Vec<u32> = detections
        .iter()
        .filter(|d| rect.contains(d.embedding))
        .map(|d| d.id)
        .collect();
    ids.sort_unstable();
    ids
}

pub fn export_records(detections: &[FusedDetection], states: &States) -> Vec<ExportRecord> {
    let mut out: Vec<ExportRecord> = detections
        .iter()
        .filter_map(|d| {
            let s = states.get(&d.id)?;
            (s.state != ReviewState::Rejected).then(|| ExportRecord {
                id: d.id,
                frame_id: d.raw.frame_id.clone(),
                t: d.raw.t,
                bbox: d.raw.bbox,
                class: s.class,
                detector_class: d.raw.class,
                state: s.state,
                scores: d.raw.scores,
                footprint: d.footprint,
            })
        })
        .collect();
    out.sort_by_key(|r| r.id);
    out
}

fn session_id(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "session".into())
}

pub fn load_init(dir: &Path) -> Result<SessionInit> {
    let path = dir.join(INITIAL_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::CorruptFile {
        path: path.clone(),
        reason: e.to_string(),
    })
}

/// Reads the event log. A final line without a newline is a write cut short
/// by a crash and is ignored.
pub fn load_events(dir: &Path) -> Result<Vec<AuditEvent>> {
    let path = dir.join(EVENTS_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    if complete.len() < text.len() {
        log::warn!("{}: ignoring incomplete trailing record", path.display());
    }
    complete
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::CorruptFile {
                path: path.clone(),
                reason: format!("event {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Export computed straight from a session directory, without opening it for
/// writing.
pub fn export_session_dir(dir: &Path) -> Result<Vec<ExportRecord>> {
    let init = load_init(dir)?;
    let states = replay(&init.detections, &load_events(dir)?)?;
    Ok(export_records(&init.detections, &states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detfuse::{FeatureVector, RawDetection, FEATURE_LEN};

    pub(crate) fn detection(id: u32, class: DebrisClass, embedding: [f64; 2]) -> FusedDetection {
        let mut scores = [0.0; 7];
        scores[class.index()] = 0.8;
        FusedDetection {
            id,
            raw: RawDetection {
                frame_id: format!("{id}.0"),
                t: id as f64,
                bbox: [1.0, 2.0, 3.0, 4.0],
                scores: ClassScores(scores),
                mask: None,
                class,
            },
            features: FeatureVector(vec![0.0; FEATURE_LEN]),
            footprint: Some(Footprint {
                x: id as f64,
                y: 0.0,
                radius: 0.1,
            }),
            spectral_covered: false,
            class,
            state: ReviewState::Unverified,
            embedding,
        }
    }

    fn session(n: u32) -> ReviewSession {
        let dets = (1..=n)
            .map(|i| detection(i, DebrisClass::Bottle, [i as f64 / n as f64 * 2.0 - 1.0, 0.0]))
            .collect();
        ReviewSession::in_memory("s", dets).unwrap()
    }

    #[test]
    fn reclassify_updates_class_and_logs_once() {
        let mut s = session(3);
        s.reclassify(&[1], DebrisClass::Tire, "op").unwrap();
        assert_eq!(s.state(1).unwrap().class, DebrisClass::Tire);
        assert_eq!(s.state(1).unwrap().state, ReviewState::Reclassified);
        assert_eq!(s.log().len(), 1);
        assert_eq!(
            s.log()[0].action,
            Action::Reclassify {
                to: DebrisClass::Tire,
                from: vec![DebrisClass::Bottle]
            }
        );
    }

    #[test]
    fn reclassify_to_same_class_verifies() {
        let mut s = session(2);
        s.reclassify(&[2], DebrisClass::Bottle, "op").unwrap();
        assert_eq!(s.state(2).unwrap().state, ReviewState::Verified);
    }

    #[test]
    fn batch_with_unknown_id_changes_nothing() {
        let mut s = session(3);
        let before = s.states().clone();
        let err = s.reclassify(&[1, 99], DebrisClass::Tire, "op").unwrap_err();
        assert!(matches!(err, Error::UnknownDetection(99)));
        assert_eq!(s.states(), &before);
        assert!(s.log().is_empty());
    }

    #[test]
    fn rejected_detections_cannot_be_reclassified() {
        let mut s = session(3);
        s.reject(&[2], "op").unwrap();
        assert!(s.reclassify(&[1, 2], DebrisClass::Tire, "op").is_err());
        assert!(s.verify(&[2], "op").is_err());
        assert_eq!(s.log().len(), 1);
        assert_eq!(s.state(1).unwrap().class, DebrisClass::Bottle);
    }

    #[test]
    fn reject_then_export_omits_detection() {
        let mut s = session(4);
        s.reject(&[3], "op").unwrap();
        let ids: Vec<u32> = s.export_final().iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![1, 2, 4]);
    }

    #[test]
    fn reject_restore_round_trips() {
        let mut s = session(3);
        s.reclassify(&[1], DebrisClass::Metal, "op").unwrap();
        let before = s.states().clone();
        s.reject(&[1, 2], "op").unwrap();
        s.restore(&[1, 2], "op").unwrap();
        assert_eq!(s.states(), &before);
    }

    #[test]
    fn double_reject_is_logged_no_op() {
        let mut s = session(2);
        s.reject(&[1], "op").unwrap();
        let after_first = s.states().clone();
        s.reject(&[1], "op").unwrap();
        assert_eq!(s.states(), &after_first);
        assert_eq!(s.log().len(), 2);
        s.restore(&[1], "op").unwrap();
        assert_eq!(s.state(1).unwrap().state, ReviewState::Unverified);
    }

    #[test]
    fn fresh_export_is_everything_unverified() {
        let s = session(5);
        let e = s.export_final();
        assert_eq!(e.len(), 5);
        assert!(e.iter().all(|r| r.state == ReviewState::Unverified));
    }

    #[test]
    fn ten_with_three_rejected_exports_seven() {
        let mut s = session(10);
        s.reject(&[2, 5, 9], "op").unwrap();
        assert_eq!(s.export_final().len(), 7);
        assert_eq!(s.rejected_count(), 3);
    }

    #[test]
    fn region_selection() {
        let s = session(4);
        let all = Rect {
            x_min: -1.0,
            y_min: -1.0,
            x_max: 1.0,
            y_max: 1.0,
        };
        assert_eq!(s.select_region(&all), vec![1, 2, 3, 4]);
        let point = Rect {
            x_min: 0.3,
            y_min: 0.3,
            x_max: 0.3,
            y_max: 0.3,
        };
        assert!(s.select_region(&point).is_empty());
        // embeddings at -0.5, 0, 0.5, 1 -> left half keeps x <= 0
        let left = Rect {
            x_min: -1.0,
            y_min: -1.0,
            x_max: 0.0,
            y_max: 1.0,
        };
        let brute: Vec<u32> = s
            .initial()
            .iter()
            .filter(|d| d.embedding[0] <= 0.0)
            .map(|d| d.id)
            .collect();
        assert_eq!(s.select_region(&left), brute);
        assert_eq!(brute, vec![1, 2]);
    }

    #[test]
    fn sequence_numbers_are_dense() {
        let mut s = session(3);
        s.verify(&[1], "a").unwrap();
        let _ = s.verify(&[7], "a");
        s.reject(&[3, 3, 2], "b").unwrap();
        let seqs: Vec<u64> = s.log().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2]);
        assert_eq!(s.log()[1].ids, vec![2, 3]);
    }

    #[test]
    fn replay_rejects_gaps() {
        let mut s = session(2);
        s.verify(&[1], "a").unwrap();
        let mut log = s.log().to_vec();
        log[0].seq = 2;
        assert!(replay(s.initial(), &log).is_err());
    }

    #[test]
    fn persisted_session_reopens_to_same_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1");
        let dets: Vec<_> = (1..=4).map(|i| detection(i, DebrisClass::Plastic, [0.0, 0.0])).collect();
        let mut s = ReviewSession::create(
            &path,
            SessionInit {
                detections: dets,
                frames_dir: None,
            },
        )
        .unwrap();
        s.reclassify(&[1, 2], DebrisClass::Anchor, "op").unwrap();
        s.reject(&[4], "op").unwrap();
        let export = s.export_final();
        let states = s.states().clone();
        drop(s);

        let reopened = ReviewSession::open(&path).unwrap();
        assert_eq!(reopened.states(), &states);
        assert_eq!(reopened.export_final(), export);
        assert_eq!(export_session_dir(&path).unwrap(), export);
        assert!(ReviewSession::create(
            &path,
            SessionInit {
                detections: vec![],
                frames_dir: None
            }
        )
        .is_err());
    }

    #[test]
    fn torn_last_event_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s");
        let mut s = ReviewSession::create(
            &path,
            SessionInit {
                detections: vec![detection(1, DebrisClass::Tire, [0.0, 0.0])],
                frames_dir: None,
            },
        )
        .unwrap();
        s.verify(&[1], "op").unwrap();
        drop(s);
        let mut f = OpenOptions::new().append(true).open(path.join(EVENTS_FILE)).unwrap();
        f.write_all(b"{\"seq\":2,\"time").unwrap();
        let s = ReviewSession::open(&path).unwrap();
        assert_eq!(s.log().len(), 1);
    }
}
