//! The annotation cycle over an embedded SQLite store.
//!
//! Every task write bumps the task version and appends a full snapshot to
//! the audit table, which triggers keep append-only.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, TryLockError};

use chickface::dataset::{ChickRecord, DatasetManifest, FrameRecord, Gender, ManifestCrop, Quality};
use chickface::detection::{detect_face, yolo_line, DetectorConfig, FaceDetector};
use chickface::geometry::{BoundingBox, KeypointSet};
use chickface::keypoints::{train_keypoint_model, HeatmapModel, KeypointModelConfig};
use chickface::parallel::Execution;
use chickface::pipeline::{keypoint_sample, locate_keypoints};
use rusqlite::{params, Connection, OptionalExtension, Row};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ServiceError};
use crate::model::*;

pub const SCHEMA_VERSION: i64 = 1;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS chicks (chick_id TEXT PRIMARY KEY, gender TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS frames (
    frame_id TEXT PRIMARY KEY,
    chick_id TEXT NOT NULL REFERENCES chicks(chick_id),
    view_index INTEGER NOT NULL,
    image_ref TEXT NOT NULL,
    image_path TEXT NOT NULL,
    quality TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS rounds (
    round INTEGER PRIMARY KEY,
    detector_version TEXT NOT NULL,
    keypoints_version TEXT NOT NULL,
    keypoints_path TEXT,
    created_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS tasks (
    task_id TEXT PRIMARY KEY,
    frame_id TEXT NOT NULL UNIQUE REFERENCES frames(frame_id),
    status TEXT NOT NULL,
    round INTEGER NOT NULL,
    origin TEXT NOT NULL,
    draft_box TEXT,
    draft_keypoints TEXT,
    revised_box TEXT,
    revised_keypoints TEXT,
    editor TEXT,
    claimed_by TEXT,
    version INTEGER NOT NULL,
    queue_seq INTEGER NOT NULL,
    resolved_round INTEGER,
    created_at INTEGER NOT NULL,
    updated_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS audit (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    subject TEXT NOT NULL,
    action TEXT NOT NULL,
    editor TEXT,
    at INTEGER NOT NULL,
    snapshot TEXT NOT NULL
);
CREATE TRIGGER IF NOT EXISTS audit_no_update BEFORE UPDATE ON audit
BEGIN SELECT RAISE(ABORT, 'audit log is append-only'); END;
CREATE TRIGGER IF NOT EXISTS audit_no_delete BEFORE DELETE ON audit
BEGIN SELECT RAISE(ABORT, 'audit log is append-only'); END;
";

/// Unix milliseconds.
pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0)
    })
}

/// Models used to draft annotations.
pub struct Drafter<'a> {
    pub detector: &'a dyn FaceDetector,
    pub detector_cfg: &'a DetectorConfig,
    /// Without a keypoint model drafts carry only the box.
    pub keypoints: Option<&'a dyn HeatmapModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub frame_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub round: AnnotationRound,
    pub rejected: Vec<Rejection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposeOutcome {
    pub tasks: Vec<AnnotationTask>,
    pub skipped: Vec<Rejection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvanceConfig {
    pub keypoints: KeypointModelConfig,
    pub epochs: usize,
    pub seed: u64,
    /// Identity of the detector that consumes the exported boxes.
    pub detector_ref: String,
    pub models_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AdvanceOutcome {
    Advanced { round: AnnotationRound, keypoints_path: String },
    NoNewData { round: i64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: i64,
    pub subject: String,
    pub action: String,
    pub editor: Option<String>,
    pub at: i64,
    pub snapshot: serde_json::Value,
}

pub struct Service {
    conn: Mutex<Connection>,
    clock: Clock,
    training: Mutex<()>,
}

fn json<T: Serialize>(v: &Option<T>) -> Result<Option<String>> {
    v.as_ref().map(|v| serde_json::to_string(v)).transpose().map_err(Into::into)
}

fn from_json<T: for<'de> Deserialize<'de>>(s: Option<String>) -> rusqlite::Result<Option<T>> {
    s.map(|s| {
        serde_json::from_str(&s).map_err(|e| rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, Box::new(e)))
    })
    .transpose()
}

fn task_from_row(row: &Row) -> rusqlite::Result<AnnotationTask> {
    let status: String = row.get("status")?;
    let origin: String = row.get("origin")?;
    let bad = |what: String| rusqlite::Error::FromSqlConversionFailure(0, rusqlite::types::Type::Text, what.into());
    Ok(AnnotationTask {
        task_id: row.get("task_id")?,
        frame_id: row.get("frame_id")?,
        status: TaskStatus::parse(&status).ok_or_else(|| bad(format!("status `{status}`")))?,
        round: row.get("round")?,
        origin: match origin.as_str() {
            "seed" => TaskOrigin::Seed,
            "model" => TaskOrigin::Model,
            other => return Err(bad(format!("origin `{other}`"))),
        },
        draft_box: from_json(row.get("draft_box")?)?,
        draft_keypoints: from_json(row.get("draft_keypoints")?)?,
        revised_box: from_json(row.get("revised_box")?)?,
        revised_keypoints: from_json(row.get("revised_keypoints")?)?,
        editor: row.get("editor")?,
        version: row.get("version")?,
        created_at: row.get("created_at")?,
        updated_at: row.get("updated_at")?,
    })
}

fn quality_str(q: Quality) -> &'static str {
    match q {
        Quality::Unreviewed => "unreviewed",
        Quality::Accepted => "accepted",
        Quality::Rejected => "rejected",
    }
}

fn parse_quality(s: &str) -> Quality {
    match s {
        "accepted" => Quality::Accepted,
        "rejected" => Quality::Rejected,
        _ => Quality::Unreviewed,
    }
}

fn origin_str(o: TaskOrigin) -> &'static str {
    match o {
        TaskOrigin::Seed => "seed",
        TaskOrigin::Model => "model",
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Box and keypoints must lie inside the `width x height` frame.
pub fn validate_geometry(bbox: &BoundingBox, kps: &KeypointSet, width: u32, height: u32) -> Result<()> {
    bbox.validate().map_err(|e| ServiceError::InvalidGeometry(e.to_string()))?;
    let frame = BoundingBox { x: 0.0, y: 0.0, w: width as f64, h: height as f64 };
    if !frame.contains_box(bbox, 1e-9) {
        return Err(ServiceError::InvalidGeometry(format!("box {bbox:?} leaves the {width}x{height} frame")));
    }
    kps.validate(width as f64, height as f64).map_err(|e| ServiceError::InvalidGeometry(e.to_string()))
}

struct Tx<'a> {
    tx: rusqlite::Transaction<'a>,
    now: i64,
}

impl Tx<'_> {
    fn task_by_frame(&self, frame_id: &str) -> Result<Option<AnnotationTask>> {
        Ok(self.tx.query_row("SELECT * FROM tasks WHERE frame_id = ?1", [frame_id], task_from_row).optional()?)
    }

    fn task(&self, task_id: &str) -> Result<AnnotationTask> {
        self.tx
            .query_row("SELECT * FROM tasks WHERE task_id = ?1", [task_id], task_from_row)
            .optional()?
            .ok_or_else(|| ServiceError::UnknownTask(task_id.to_string()))
    }

    fn frame(&self, frame_id: &str) -> Result<(String, String)> {
        self.tx
            .query_row("SELECT image_path, chick_id FROM frames WHERE frame_id = ?1", [frame_id], |r| Ok((r.get(0)?, r.get(1)?)))
            .optional()?
            .ok_or_else(|| ServiceError::UnknownFrame(frame_id.to_string()))
    }

    fn current_round(&self) -> Result<Option<i64>> {
        Ok(self.tx.query_row("SELECT MAX(round) FROM rounds", [], |r| r.get(0))?)
    }

    fn next_queue_seq(&self) -> Result<i64> {
        Ok(self.tx.query_row("SELECT COALESCE(MAX(queue_seq), 0) + 1 FROM tasks", [], |r| r.get(0))?)
    }

    fn audit(&self, subject: &str, action: &str, editor: Option<&str>, snapshot: &impl Serialize) -> Result<()> {
        self.tx.execute(
            "INSERT INTO audit (subject, action, editor, at, snapshot) VALUES (?1, ?2, ?3, ?4, ?5)",
            params![subject, action, editor, self.now, serde_json::to_string(snapshot)?],
        )?;
        Ok(())
    }

    /// Inserts or replaces the task row and logs the new state.
    fn write_task(&self, task: &AnnotationTask, action: &str, resolved_round: Option<i64>, new_queue_slot: bool) -> Result<()> {
        let queue_seq = if new_queue_slot {
            self.next_queue_seq()?
        } else {
            self.tx
                .query_row("SELECT queue_seq FROM tasks WHERE task_id = ?1", [&task.task_id], |r| r.get(0))
                .optional()?
                .unwrap_or(0)
        };
        self.tx.execute(
            "INSERT OR REPLACE INTO tasks (task_id, frame_id, status, round, origin, draft_box, draft_keypoints,
                revised_box, revised_keypoints, editor, claimed_by, version, queue_seq, resolved_round, created_at, updated_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, NULL, ?11, ?12, ?13, ?14, ?15)",
            params![
                task.task_id,
                task.frame_id,
                task.status.as_str(),
                task.round,
                origin_str(task.origin),
                json(&task.draft_box)?,
                json(&task.draft_keypoints)?,
                json(&task.revised_box)?,
                json(&task.revised_keypoints)?,
                task.editor,
                task.version,
                queue_seq,
                resolved_round,
                task.created_at,
                task.updated_at,
            ],
        )?;
        self.audit(&task.task_id, action, task.editor.as_deref(), task)
    }

    fn set_frame_quality(&self, frame_id: &str, q: Quality) -> Result<()> {
        self.tx.execute("UPDATE frames SET quality = ?1 WHERE frame_id = ?2", params![quality_str(q), frame_id])?;
        Ok(())
    }

    fn round(&self, round: i64) -> Result<AnnotationRound> {
        let (detector, keypoints): (String, String) = self
            .tx
            .query_row("SELECT detector_version, keypoints_version FROM rounds WHERE round = ?1", [round], |r| Ok((r.get(0)?, r.get(1)?)))
            .optional()?
            .ok_or_else(|| ServiceError::BadRequest(format!("no round {round}")))?;
        let mut counts = RoundCounts::default();
        let mut stmt = self.tx.prepare("SELECT origin, status, COUNT(*) FROM tasks WHERE round = ?1 GROUP BY origin, status")?;
        let rows = stmt.query_map([round], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, i64>(2)?)))?;
        for row in rows {
            let (origin, status, n) = row?;
            let n = n as u64;
            match origin.as_str() {
                "seed" => counts.seeded += n,
                _ => counts.predicted += n,
            }
            match TaskStatus::parse(&status) {
                Some(TaskStatus::Revised) => counts.revised += n,
                Some(TaskStatus::Accepted) => counts.accepted += n,
                Some(TaskStatus::RejectedQuality) => counts.rejected += n,
                _ => {}
            }
        }
        Ok(AnnotationRound { round, model_versions: ModelVersions { detector, keypoints }, counts })
    }
}

impl Service {
    pub fn open(path: &Path) -> Result<Service> {
        Self::with_connection(Connection::open(path)?, system_clock())
    }

    pub fn open_in_memory() -> Result<Service> {
        Self::with_connection(Connection::open_in_memory()?, system_clock())
    }

    pub fn with_connection(conn: Connection, clock: Clock) -> Result<Service> {
        conn.execute_batch("PRAGMA foreign_keys = ON;")?;
        conn.execute_batch(SCHEMA)?;
        let found: Option<String> = conn.query_row("SELECT value FROM meta WHERE key = 'schema_version'", [], |r| r.get(0)).optional()?;
        match found {
            None => {
                conn.execute("INSERT INTO meta (key, value) VALUES ('schema_version', ?1)", [SCHEMA_VERSION.to_string()])?;
            }
            Some(v) if v == SCHEMA_VERSION.to_string() => {}
            Some(v) => return Err(ServiceError::BadRequest(format!("store schema version {v}, expected {SCHEMA_VERSION}"))),
        }
        Ok(Service { conn: Mutex::new(conn), clock, training: Mutex::new(()) })
    }

    fn lock(&self) -> MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` in one transaction, committed only on success.
    fn write<T>(&self, f: impl FnOnce(&Tx) -> Result<T>) -> Result<T> {
        let mut conn = self.lock();
        let tx = Tx { tx: conn.transaction()?, now: (self.clock)() };
        let out = f(&tx)?;
        tx.tx.commit()?;
        Ok(out)
    }

    /// Registers chicks and frames; image refs are resolved against `root`.
    /// Re-importing is idempotent and keeps existing quality flags.
    pub fn import_manifest(&self, manifest: &DatasetManifest, root: &Path) -> Result<usize> {
        manifest.validate()?;
        self.write(|tx| {
            for c in &manifest.chicks {
                tx.tx.execute("INSERT OR IGNORE INTO chicks (chick_id, gender) VALUES (?1, ?2)", params![c.chick_id, c.gender.as_str()])?;
            }
            for f in &manifest.frames {
                let path = root.join(&f.image_ref);
                tx.tx.execute(
                    "INSERT OR IGNORE INTO frames (frame_id, chick_id, view_index, image_ref, image_path, quality) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                    params![f.frame_id, f.chick_id, f.view_index, f.image_ref, path.to_string_lossy(), quality_str(f.quality)],
                )?;
            }
            Ok(manifest.frames.len())
        })
    }

    fn image_size(path: &str) -> Result<(u32, u32)> {
        image::image_dimensions(path).map_err(|e| ServiceError::Pipeline(e.into()))
    }

    /// Stores manual labels as accepted round-0 tasks. Invalid or conflicting
    /// labels are listed, the rest are kept.
    pub fn seed_round(&self, annotations: &[ManualAnnotation], editor: Option<&str>) -> Result<SeedOutcome> {
        self.write(|tx| {
            if tx.current_round()?.is_none() {
                tx.tx.execute(
                    "INSERT INTO rounds (round, detector_version, keypoints_version, keypoints_path, created_at) VALUES (0, 'manual', 'manual', NULL, ?1)",
                    [tx.now],
                )?;
                tx.audit("round:0", "open", editor, &ModelVersions { detector: "manual".into(), keypoints: "manual".into() })?;
            }
            let mut rejected = Vec::new();
            for a in annotations {
                let reject = |reason: String| Rejection { frame_id: a.frame_id.clone(), reason };
                let path = match tx.frame(&a.frame_id) {
                    Ok((p, _)) => p,
                    Err(e) => {
                        rejected.push(reject(e.to_string()));
                        continue;
                    }
                };
                let (w, h) = Self::image_size(&path)?;
                if let Err(e) = validate_geometry(&a.bbox, &a.keypoints, w, h) {
                    rejected.push(reject(e.to_string()));
                    continue;
                }
                let existing = tx.task_by_frame(&a.frame_id)?;
                if let Some(t) = &existing {
                    let same = t.origin == TaskOrigin::Seed && t.revised_box == Some(a.bbox) && t.revised_keypoints == Some(a.keypoints);
                    if t.status == TaskStatus::Accepted && same {
                        continue;
                    }
                }
                let from = existing.as_ref().map_or(TaskStatus::Unlabeled, |t| t.status);
                let status = match transition(from, TaskEvent::Seed) {
                    Ok(s) => s,
                    Err(e) => {
                        rejected.push(reject(e.to_string()));
                        continue;
                    }
                };
                let task = AnnotationTask {
                    task_id: AnnotationTask::task_id_for(&a.frame_id),
                    frame_id: a.frame_id.clone(),
                    status,
                    round: 0,
                    origin: TaskOrigin::Seed,
                    draft_box: None,
                    draft_keypoints: None,
                    revised_box: Some(a.bbox),
                    revised_keypoints: Some(a.keypoints),
                    editor: editor.map(str::to_string),
                    version: 1,
                    created_at: tx.now,
                    updated_at: tx.now,
                };
                let current = tx.current_round()?.unwrap_or(0);
                tx.write_task(&task, "seed", Some(current), true)?;
                tx.set_frame_quality(&a.frame_id, Quality::Accepted)?;
            }
            Ok(SeedOutcome { round: tx.round(0)?, rejected })
        })
    }

    /// Drafts boxes and keypoints for unlabeled (or still predicted) frames in
    /// the current round. Frames without a detected face get empty drafts.
    pub fn propose(&self, frame_ids: &[String], drafter: &Drafter, exec: Execution) -> Result<ProposeOutcome> {
        let round = {
            let conn = self.lock();
            conn.query_row("SELECT MAX(round) FROM rounds", [], |r| r.get::<_, Option<i64>>(0))?
        };
        let round = match round {
            Some(r) if r >= 1 => r,
            _ => return Err(ServiceError::BadRequest("round 0 holds manual seeds only; advance a round before proposing".into())),
        };
        // inference runs outside the store lock
        let paths: Vec<Result<(String, String)>> = {
            let conn = self.lock();
            frame_ids
                .iter()
                .map(|id| {
                    conn.query_row("SELECT image_path FROM frames WHERE frame_id = ?1", [id], |r| r.get::<_, String>(0))
                        .optional()?
                        .map(|p| (id.clone(), p))
                        .ok_or_else(|| ServiceError::UnknownFrame(id.clone()))
                })
                .collect()
        };
        let drafts = exec.map(&paths, |p| -> Result<(String, Option<BoundingBox>, Option<KeypointSet>)> {
            let (id, path) = p.as_ref().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
            let img = image::open(path).map_err(|e| ServiceError::Pipeline(e.into()))?.to_rgb8();
            let det = detect_face(&img, drafter.detector_cfg, drafter.detector)?;
            let Some(det) = det else { return Ok((id.clone(), None, None)) };
            let kps = match drafter.keypoints {
                Some(m) => Some(locate_keypoints(&img, &det.bbox, m)?),
                None => None,
            };
            Ok((id.clone(), Some(det.bbox), kps))
        });
        self.write(|tx| {
            let mut tasks = Vec::new();
            let mut skipped = Vec::new();
            for (d, id) in drafts.into_iter().zip(frame_ids) {
                let (frame_id, draft_box, draft_keypoints) = match d {
                    Ok(v) => v,
                    Err(e) => {
                        skipped.push(Rejection { frame_id: id.clone(), reason: e.to_string() });
                        continue;
                    }
                };
                let existing = tx.task_by_frame(&frame_id)?;
                let from = existing.as_ref().map_or(TaskStatus::Unlabeled, |t| t.status);
                if let Err(e) = transition(from, TaskEvent::Propose) {
                    skipped.push(Rejection { frame_id, reason: e.to_string() });
                    continue;
                }
                let task = AnnotationTask {
                    task_id: AnnotationTask::task_id_for(&frame_id),
                    frame_id,
                    status: TaskStatus::Predicted,
                    round,
                    origin: TaskOrigin::Model,
                    draft_box,
                    draft_keypoints,
                    revised_box: None,
                    revised_keypoints: None,
                    editor: None,
                    version: existing.as_ref().map_or(1, |t| t.version + 1),
                    created_at: existing.as_ref().map_or(tx.now, |t| t.created_at),
                    updated_at: tx.now,
                };
                tx.write_task(&task, "propose", None, true)?;
                tasks.push(task);
            }
            Ok(ProposeOutcome { tasks, skipped })
        })
    }

    pub fn task(&self, task_id: &str) -> Result<AnnotationTask> {
        let conn = self.lock();
        conn.query_row("SELECT * FROM tasks WHERE task_id = ?1", [task_id], task_from_row)
            .optional()?
            .ok_or_else(|| ServiceError::UnknownTask(task_id.to_string()))
    }

    /// Claims the oldest predicted task not claimed by someone else.
    pub fn next_task(&self, editor: &str) -> Result<Option<AnnotationTask>> {
        self.write(|tx| {
            let task = tx
                .tx
                .query_row(
                    "SELECT * FROM tasks WHERE status = 'predicted' AND (claimed_by IS NULL OR claimed_by = ?1)
                     ORDER BY queue_seq LIMIT 1",
                    [editor],
                    task_from_row,
                )
                .optional()?;
            if let Some(t) = &task {
                tx.tx.execute("UPDATE tasks SET claimed_by = ?1 WHERE task_id = ?2", params![editor, t.task_id])?;
            }
            Ok(task)
        })
    }

    /// Applies a human decision. Unchanged geometry accepts the task, changed
    /// geometry revises it, a quality rejection retires the frame.
    pub fn submit_correction(&self, task_id: &str, c: &Correction) -> Result<AnnotationTask> {
        self.write(|tx| {
            let task = match tx.task(task_id) {
                Err(ServiceError::UnknownTask(_)) if task_id.strip_prefix("task-").is_some_and(|f| tx.frame(f).is_ok()) => {
                    let event = if c.quality == SubmitQuality::Rejected { TaskEvent::Reject } else { TaskEvent::Revise };
                    return Err(ServiceError::IllegalTransition { from: TaskStatus::Unlabeled, event });
                }
                other => other?,
            };
            let (shown_box, shown_kps) = match task.status {
                TaskStatus::Revised => (task.revised_box, task.revised_keypoints),
                _ => (task.draft_box, task.draft_keypoints),
            };
            let event = match c.quality {
                SubmitQuality::Rejected => TaskEvent::Reject,
                SubmitQuality::Ok if c.revised_box == shown_box && c.revised_keypoints == shown_kps => TaskEvent::Accept,
                SubmitQuality::Ok => TaskEvent::Revise,
            };
            let status = transition(task.status, event)?;
            if c.version != task.version {
                return Err(ServiceError::VersionConflict { current: task.version, submitted: c.version });
            }
            let (frame_path, chick_id) = tx.frame(&task.frame_id)?;
            let (revised_box, revised_keypoints) = if event == TaskEvent::Reject {
                (None, None)
            } else {
                let (Some(b), Some(k)) = (c.revised_box, c.revised_keypoints) else {
                    return Err(ServiceError::InvalidGeometry("a box and seven keypoints are required".into()));
                };
                let (w, h) = Self::image_size(&frame_path)?;
                validate_geometry(&b, &k, w, h)?;
                (Some(b), Some(k))
            };
            let updated = AnnotationTask {
                status,
                revised_box,
                revised_keypoints,
                editor: c.editor.clone().or(task.editor.clone()),
                version: task.version + 1,
                updated_at: tx.now,
                ..task
            };
            let current = tx.current_round()?.unwrap_or(0);
            let resolved = status.is_ground_truth().then_some(current);
            let action = match event {
                TaskEvent::Accept => "accept",
                TaskEvent::Reject => "reject_quality",
                _ => "revise",
            };
            tx.write_task(&updated, action, resolved, false)?;
            tx.set_frame_quality(&updated.frame_id, if event == TaskEvent::Reject { Quality::Rejected } else { Quality::Accepted })?;
            if let Some(g) = c.gender_confirmation {
                let old: String = tx.tx.query_row("SELECT gender FROM chicks WHERE chick_id = ?1", [&chick_id], |r| r.get(0))?;
                if old != g.as_str() {
                    tx.tx.execute("UPDATE chicks SET gender = ?1 WHERE chick_id = ?2", params![g.as_str(), chick_id])?;
                    let rec = ChickRecord { chick_id: chick_id.clone(), gender: g };
                    tx.audit(&format!("chick:{chick_id}"), "gender", updated.editor.as_deref(), &rec)?;
                }
            }
            Ok(updated)
        })
    }

    pub fn rounds(&self) -> Result<Vec<AnnotationRound>> {
        self.write(|tx| {
            let ids: Vec<i64> = {
                let mut stmt = tx.tx.prepare("SELECT round FROM rounds ORDER BY round")?;
                let rows = stmt.query_map([], |r| r.get(0))?;
                rows.collect::<rusqlite::Result<_>>()?
            };
            ids.into_iter().map(|r| tx.round(r)).collect()
        })
    }

    /// Opens the next round with externally trained models.
    pub fn open_round(&self, versions: &ModelVersions, keypoints_path: Option<&Path>) -> Result<AnnotationRound> {
        self.write(|tx| {
            let Some(current) = tx.current_round()? else {
                return Err(ServiceError::BadRequest("seed round 0 first".into()));
            };
            let next = current + 1;
            tx.tx.execute(
                "INSERT INTO rounds (round, detector_version, keypoints_version, keypoints_path, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
                params![next, versions.detector, versions.keypoints, keypoints_path.map(|p| p.to_string_lossy().to_string()), tx.now],
            )?;
            tx.audit(&format!("round:{next}"), "open", None, versions)?;
            tx.round(next)
        })
    }

    pub fn current_round(&self) -> Result<Option<i64>> {
        Ok(self.lock().query_row("SELECT MAX(round) FROM rounds", [], |r| r.get(0))?)
    }

    /// Path of the keypoint model registered for the newest round, if any.
    pub fn latest_keypoint_model(&self) -> Result<Option<PathBuf>> {
        let p: Option<String> = self
            .lock()
            .query_row("SELECT keypoints_path FROM rounds ORDER BY round DESC LIMIT 1", [], |r| r.get(0))
            .optional()?
            .flatten();
        Ok(p.map(PathBuf::from))
    }

    pub fn frame_image(&self, frame_id: &str) -> Result<PathBuf> {
        let p: Option<String> = self
            .lock()
            .query_row("SELECT image_path FROM frames WHERE frame_id = ?1", [frame_id], |r| r.get(0))
            .optional()?;
        p.map(PathBuf::from).ok_or_else(|| ServiceError::UnknownFrame(frame_id.to_string()))
    }

    pub fn audit_len(&self) -> Result<usize> {
        Ok(self.lock().query_row("SELECT COUNT(*) FROM audit", [], |r| r.get::<_, i64>(0))? as usize)
    }

    pub fn audit_log(&self) -> Result<Vec<AuditEntry>> {
        let conn = self.lock();
        let mut stmt = conn.prepare("SELECT seq, subject, action, editor, at, snapshot FROM audit ORDER BY seq")?;
        let rows = stmt.query_map([], |r| {
            let snap: String = r.get(5)?;
            Ok(AuditEntry {
                seq: r.get(0)?,
                subject: r.get(1)?,
                action: r.get(2)?,
                editor: r.get(3)?,
                at: r.get(4)?,
                snapshot: serde_json::from_str(&snap)
                    .map_err(|e| rusqlite::Error::FromSqlConversionFailure(5, rusqlite::types::Type::Text, Box::new(e)))?,
            })
        })?;
        Ok(rows.collect::<rusqlite::Result<_>>()?)
    }

    /// Raw access for maintenance and tests.
    pub fn with_connection_mut<T>(&self, f: impl FnOnce(&mut Connection) -> T) -> T {
        f(&mut self.lock())
    }

    /// The frames table as a manifest, with current quality flags and the
    /// image refs as imported.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        let conn = self.lock();
        let mut stmt = conn.prepare("SELECT chick_id, gender FROM chicks ORDER BY chick_id")?;
        let chicks = stmt
            .query_map([], |r| {
                let g: String = r.get(1)?;
                Ok(ChickRecord { chick_id: r.get(0)?, gender: Gender::parse(&g).unwrap_or(Gender::Female) })
            })?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        let mut stmt = conn.prepare("SELECT frame_id, chick_id, view_index, image_ref, quality FROM frames ORDER BY frame_id")?;
        let frames = stmt
            .query_map([], |r| {
                let q: String = r.get(4)?;
                Ok(FrameRecord { frame_id: r.get(0)?, chick_id: r.get(1)?, view_index: r.get(2)?, image_ref: r.get(3)?, quality: parse_quality(&q) })
            })?
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(DatasetManifest { chicks, frames, crop_kind: ManifestCrop::None })
    }

    /// Ground-truth tasks (revised or accepted) of the given rounds, ordered
    /// by frame id.
    pub fn ground_truth(&self, rounds: Option<&[i64]>) -> Result<Vec<AnnotationTask>> {
        let conn = self.lock();
        let mut stmt = conn.prepare("SELECT * FROM tasks WHERE status IN ('revised', 'accepted') ORDER BY frame_id")?;
        let all = stmt.query_map([], task_from_row)?.collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(all.into_iter().filter(|t| rounds.is_none_or(|r| r.contains(&t.round))).collect())
    }

    /// Deterministic zip of LabelMe JSON, detector label lines and a
    /// manifest slice for the ground truth of `rounds` (all when `None`).
    pub fn export_ground_truth(&self, rounds: Option<&[i64]>) -> Result<Vec<u8>> {
        let tasks = self.ground_truth(rounds)?;
        let manifest = self.manifest()?;
        crate::export::bundle(&tasks, &manifest, |id| Self::image_size(&self.frame_image(id)?.to_string_lossy()))
    }

    /// Retrains on all accumulated ground truth and opens the next round.
    /// Returns `NoNewData` (and logs a warning) when nothing was revised or
    /// accepted since the current round opened. At most one retraining runs
    /// at a time; a concurrent call fails with `Busy`.
    pub fn advance_round(&self, cfg: &AdvanceConfig, exec: Execution) -> Result<AdvanceOutcome> {
        let _guard = match self.training.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(ServiceError::Busy),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let (current, fresh) = {
            let conn = self.lock();
            let current: Option<i64> = conn.query_row("SELECT MAX(round) FROM rounds", [], |r| r.get(0))?;
            let Some(current) = current else {
                return Err(ServiceError::BadRequest("no round to advance; seed round 0 first".into()));
            };
            let fresh: i64 = conn.query_row(
                "SELECT COUNT(*) FROM tasks WHERE resolved_round = ?1 AND status IN ('revised', 'accepted')",
                [current],
                |r| r.get(0),
            )?;
            (current, fresh)
        };
        if fresh == 0 {
            log::warn!("round {current} has no new revisions; not advancing");
            return Ok(AdvanceOutcome::NoNewData { round: current });
        }

        let truth = self.ground_truth(None)?;
        let paths: BTreeMap<String, PathBuf> = truth
            .iter()
            .map(|t| Ok((t.frame_id.clone(), self.frame_image(&t.frame_id)?)))
            .collect::<Result<_>>()?;
        let samples = exec
            .map(&truth, |t| -> Result<_> {
                let img = image::open(&paths[&t.frame_id]).map_err(|e| ServiceError::Pipeline(e.into()))?.to_rgb8();
                let (b, k) = (t.revised_box.expect("ground truth has a box"), t.revised_keypoints.expect("ground truth has keypoints"));
                Ok(keypoint_sample(&img, &b, &k)?)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let (model, _) = train_keypoint_model(&samples, &cfg.keypoints, cfg.epochs, cfg.seed, exec)?;
        let bytes = model.to_bytes()?;
        let keypoints_version = sha256_hex(&bytes);

        // the detector is trained elsewhere from the exported boxes; its
        // version identifies that training set
        let mut det_labels = format!("{}\n", cfg.detector_ref);
        for t in &truth {
            let b = t.revised_box.expect("ground truth has a box");
            let (w, h) = Self::image_size(&paths[&t.frame_id].to_string_lossy())?;
            det_labels.push_str(&format!("{} {}\n", t.frame_id, yolo_line(&b, w, h, 0)));
        }
        let detector_version = sha256_hex(det_labels.as_bytes());

        let next = current + 1;
        std::fs::create_dir_all(&cfg.models_dir)?;
        let kp_path = cfg.models_dir.join(format!("keypoints-r{next}.safetensors"));
        std::fs::write(&kp_path, &bytes)?;
        std::fs::write(cfg.models_dir.join(format!("detector-r{next}.txt")), &det_labels)?;
        let versions = ModelVersions { detector: detector_version, keypoints: keypoints_version };
        let kp_str = kp_path.to_string_lossy().to_string();
        let round = self.write(|tx| {
            tx.tx.execute(
                "INSERT INTO rounds (round, detector_version, keypoints_version, keypoints_path, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
                params![next, versions.detector, versions.keypoints, kp_str, tx.now],
            )?;
            tx.audit(&format!("round:{next}"), "open", None, &versions)?;
            tx.round(next)
        })?;
        Ok(AdvanceOutcome::Advanced { round, keypoints_path: kp_str })
    }
}
