use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use rusqlite::{params, Connection, OptionalExtension, Transaction};

use super::gallery::resolve_with;
use super::{
    Dangling, Entity, EntityKind, EntityRef, ListFilter, Payload, Session, SessionStatus, Store,
    StoreError,
};
use crate::engine::Message;
use crate::schema::{
    validate, validate_agent, validate_memory, validate_model, validate_skill,
    validate_workflow_def, AgentSpec, Issue, MemorySpec, ModelConfig, RefLookup, Severity,
    SkillSpec, ValidationReport,
};

pub const DB_FILE_NAME: &str = "agentloom.db";

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS entities (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    kind TEXT NOT NULL,
    id TEXT NOT NULL,
    payload TEXT NOT NULL,
    tags TEXT NOT NULL,
    created_at TEXT NOT NULL,
    updated_at TEXT NOT NULL,
    UNIQUE (kind, id)
);
CREATE TABLE IF NOT EXISTS refs (
    from_kind TEXT NOT NULL,
    from_id TEXT NOT NULL,
    to_kind TEXT NOT NULL,
    to_id TEXT NOT NULL,
    PRIMARY KEY (from_kind, from_id, to_kind, to_id)
);
CREATE INDEX IF NOT EXISTS refs_to ON refs (to_kind, to_id);
CREATE TABLE IF NOT EXISTS session_state (
    id TEXT PRIMARY KEY,
    status TEXT NOT NULL,
    note TEXT
);
CREATE TABLE IF NOT EXISTS messages (
    session_id TEXT NOT NULL,
    seq INTEGER NOT NULL,
    id TEXT NOT NULL,
    body TEXT NOT NULL,
    PRIMARY KEY (session_id, seq)
);
";

/// Single-file SQLite store. Session working directories live next to the
/// database under `sessions/<id>/scratch`.
pub struct SqliteStore {
    conn: Mutex<Connection>,
    path: PathBuf,
    data_dir: PathBuf,
}

impl std::fmt::Debug for SqliteStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SqliteStore").field("path", &self.path).finish()
    }
}

fn db_err(e: rusqlite::Error) -> StoreError {
    StoreError::Database(e.to_string())
}

fn ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Nanos, true)
}

fn parse_ts(s: &str) -> Result<DateTime<Utc>, StoreError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| StoreError::Database(format!("bad timestamp `{s}`: {e}")))
}

fn status_from_str(s: &str) -> SessionStatus {
    match s {
        "running" => SessionStatus::Running,
        "awaiting_human" => SessionStatus::AwaitingHuman,
        _ => SessionStatus::Idle,
    }
}

/// Session → workflow links neither block deletes nor cascade.
fn is_weak(from: EntityKind, to: EntityKind) -> bool {
    from == EntityKind::Session && to == EntityKind::Workflow
}

impl SqliteStore {
    /// Opens (creating if needed) the database at `path`. Sessions left
    /// `running` by a previous process are reset to `idle` with a note.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let open_err = |message: String| StoreError::Open {
            path: path.display().to_string(),
            message,
        };
        let data_dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&data_dir).map_err(|e| open_err(e.to_string()))?;
        let conn = Connection::open(&path).map_err(|e| open_err(e.to_string()))?;
        conn.busy_timeout(std::time::Duration::from_secs(5))
            .map_err(|e| open_err(e.to_string()))?;
        conn.pragma_update(None, "journal_mode", "WAL")
            .map_err(|e| open_err(e.to_string()))?;
        conn.pragma_update(None, "synchronous", "NORMAL")
            .map_err(|e| open_err(e.to_string()))?;
        conn.execute_batch(SCHEMA).map_err(|e| open_err(e.to_string()))?;

        let note = format!(
            "recovered at {}: the previous run was interrupted by a restart",
            ts(Utc::now())
        );
        let swept = conn
            .execute(
                "UPDATE session_state SET status = 'idle', note = ?1 WHERE status = 'running'",
                params![note],
            )
            .map_err(|e| open_err(e.to_string()))?;
        if swept > 0 {
            tracing::warn!(sessions = swept, "reset sessions left running by a previous process");
        }
        Ok(SqliteStore {
            conn: Mutex::new(conn),
            path,
            data_dir,
        })
    }

    /// Opens `<dir>/agentloom.db`.
    pub fn open_in(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open(dir.as_ref().join(DB_FILE_NAME))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn session_dir(&self, session_id: &str) -> PathBuf {
        self.data_dir.join("sessions").join(session_id)
    }

    fn with_tx<T>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T, StoreError>) -> Result<T, StoreError> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let tx = conn.transaction().map_err(db_err)?;
        let out = f(&tx)?;
        tx.commit().map_err(db_err)?;
        Ok(out)
    }
}

struct Row {
    kind: String,
    id: String,
    payload: String,
    tags: String,
    created_at: String,
    updated_at: String,
}

fn to_entity(conn: &Connection, row: Row) -> Result<Entity, StoreError> {
    let corrupt = |message: String| StoreError::Corrupt {
        kind: row.kind.clone(),
        id: row.id.clone(),
        message,
    };
    let value = serde_json::json!({"kind": row.kind, "payload": serde_json::from_str::<serde_json::Value>(&row.payload).map_err(|e| corrupt(e.to_string()))?});
    let mut payload: Payload = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    if let Payload::Session(s) = &mut payload {
        let state: Option<(String, Option<String>)> = conn
            .query_row(
                "SELECT status, note FROM session_state WHERE id = ?1",
                params![row.id],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()
            .map_err(db_err)?;
        if let Some((status, note)) = state {
            s.status = status_from_str(&status);
            s.note = note;
        }
        let mut stmt = conn
            .prepare_cached("SELECT id FROM messages WHERE session_id = ?1 ORDER BY seq")
            .map_err(db_err)?;
        s.message_refs = stmt
            .query_map(params![row.id], |r| r.get(0))
            .map_err(db_err)?
            .collect::<Result<_, _>>()
            .map_err(db_err)?;
    }
    Ok(Entity {
        id: row.id.clone(),
        payload,
        created_at: parse_ts(&row.created_at)?,
        updated_at: parse_ts(&row.updated_at)?,
        tags: serde_json::from_str(&row.tags).map_err(|e| corrupt(e.to_string()))?,
    })
}

fn load(conn: &Connection, kind: EntityKind, id: &str) -> Result<Option<Entity>, StoreError> {
    let row = conn
        .query_row(
            "SELECT kind, id, payload, tags, created_at, updated_at FROM entities WHERE kind = ?1 AND id = ?2",
            params![kind.as_str(), id],
            |r| {
                Ok(Row {
                    kind: r.get(0)?,
                    id: r.get(1)?,
                    payload: r.get(2)?,
                    tags: r.get(3)?,
                    created_at: r.get(4)?,
                    updated_at: r.get(5)?,
                })
            },
        )
        .optional()
        .map_err(db_err)?;
    row.map(|row| to_entity(conn, row)).transpose()
}

fn get(conn: &Connection, kind: EntityKind, id: &str) -> Result<Entity, StoreError> {
    load(conn, kind, id)?.ok_or_else(|| StoreError::NotFound {
        kind,
        id: id.to_string(),
    })
}

struct TxLookup<'c>(&'c Connection);

impl TxLookup<'_> {
    fn payload(&self, kind: EntityKind, id: &str) -> Option<Payload> {
        load(self.0, kind, id).ok().flatten().map(|e| e.payload)
    }
}

impl RefLookup for TxLookup<'_> {
    fn model(&self, id: &str) -> Option<ModelConfig> {
        match self.payload(EntityKind::Model, id)? {
            Payload::Model(m) => Some(m),
            _ => None,
        }
    }
    fn skill(&self, id: &str) -> Option<SkillSpec> {
        match self.payload(EntityKind::Skill, id)? {
            Payload::Skill(s) => Some(s),
            _ => None,
        }
    }
    fn memory(&self, id: &str) -> Option<MemorySpec> {
        match self.payload(EntityKind::Memory, id)? {
            Payload::Memory(m) => Some(m),
            _ => None,
        }
    }
    fn agent(&self, id: &str) -> Option<AgentSpec> {
        match self.payload(EntityKind::Agent, id)? {
            Payload::Agent(a) => Some(a),
            _ => None,
        }
    }
}

fn strong_referrers(conn: &Connection, kind: EntityKind, id: &str) -> Result<Vec<EntityRef>, StoreError> {
    let mut stmt = conn
        .prepare_cached(
            "SELECT from_kind, from_id FROM refs WHERE to_kind = ?1 AND to_id = ?2 ORDER BY from_kind, from_id",
        )
        .map_err(db_err)?;
    let rows: Vec<(String, String)> = stmt
        .query_map(params![kind.as_str(), id], |r| Ok((r.get(0)?, r.get(1)?)))
        .map_err(db_err)?
        .collect::<Result<_, _>>()
        .map_err(db_err)?;
    Ok(rows
        .into_iter()
        .filter_map(|(k, id)| k.parse().ok().map(|kind| EntityRef { kind, id }))
        .filter(|r: &EntityRef| !is_weak(r.kind, kind))
        .collect())
}

/// Validates `payload` against the committed state. `self_id` is set for
/// updates.
fn check(conn: &Connection, payload: &Payload, self_id: Option<&str>) -> Result<(), StoreError> {
    let lookup = TxLookup(conn);
    let mut issues: Vec<Issue> = match payload {
        Payload::Model(m) => validate_model(m, ""),
        Payload::Skill(s) => validate_skill(s, ""),
        Payload::Memory(m) => validate_memory(m, ""),
        Payload::Agent(a) => {
            let mut issues = validate_agent(a, "", &lookup);
            if let (Some(id), true) = (self_id, a.is_group()) {
                let in_group = strong_referrers(conn, EntityKind::Agent, id)?
                    .iter()
                    .any(|r| r.kind == EntityKind::Agent);
                if in_group {
                    issues.push(Issue {
                        severity: Severity::Error,
                        path: "type".into(),
                        message: "a member of a group chat cannot become a group chat".into(),
                    });
                }
            }
            issues
        }
        Payload::Workflow(w) => {
            let mut issues = validate_workflow_def(w, "", &lookup);
            if issues.iter().all(|i| i.severity != Severity::Error) {
                let spec = resolve_with(&|kind, id| get(conn, kind, id), w.clone())?;
                issues.extend(validate(&spec).issues.into_iter().filter(|i| i.severity == Severity::Error));
            }
            issues
        }
        Payload::Session(s) => {
            if load(conn, EntityKind::Workflow, &s.workflow_ref)?.is_none() {
                vec![Issue {
                    severity: Severity::Error,
                    path: "workflow_ref".into(),
                    message: format!("workflow `{}` does not exist", s.workflow_ref),
                }]
            } else {
                Vec::new()
            }
        }
    };
    issues.retain(|i| i.severity == Severity::Error);
    if issues.is_empty() {
        Ok(())
    } else {
        Err(StoreError::Invalid {
            kind: payload.kind(),
            report: ValidationReport::from_issues(issues),
        })
    }
}

fn write_refs(conn: &Connection, payload: &Payload, id: &str) -> Result<(), StoreError> {
    let kind = payload.kind().as_str();
    conn.execute("DELETE FROM refs WHERE from_kind = ?1 AND from_id = ?2", params![kind, id])
        .map_err(db_err)?;
    for r in payload.references() {
        conn.execute(
            "INSERT OR IGNORE INTO refs (from_kind, from_id, to_kind, to_id) VALUES (?1, ?2, ?3, ?4)",
            params![kind, id, r.kind.as_str(), r.id],
        )
        .map_err(db_err)?;
    }
    Ok(())
}

/// What is persisted for a payload: store-maintained session fields are
/// stripped.
fn stored_json(payload: &Payload) -> String {
    let mut payload = payload.clone();
    if let Payload::Session(s) = &mut payload {
        s.status = SessionStatus::Idle;
        s.message_refs.clear();
        s.note = None;
    }
    payload.payload_json().to_string()
}

impl Store for SqliteStore {
    fn create(&self, mut payload: Payload, tags: Vec<String>) -> Result<Entity, StoreError> {
        let id = uuid::Uuid::new_v4().to_string();
        payload.set_id(&id);
        if let Payload::Session(s) = &mut payload {
            let workdir = self.session_dir(&id).join(crate::tools::SCRATCH_DIR);
            std::fs::create_dir_all(&workdir)
                .map_err(|e| StoreError::Database(format!("cannot create {}: {e}", workdir.display())))?;
            s.workdir = workdir.display().to_string();
        }
        self.with_tx(|tx| {
            check(tx, &payload, None)?;
            let now = ts(Utc::now());
            let kind = payload.kind();
            tx.execute(
                "INSERT INTO entities (kind, id, payload, tags, created_at, updated_at) VALUES (?1, ?2, ?3, ?4, ?5, ?5)",
                params![kind.as_str(), id, stored_json(&payload), serde_json::to_string(&tags).unwrap(), now],
            )
            .map_err(db_err)?;
            if kind == EntityKind::Session {
                tx.execute(
                    "INSERT INTO session_state (id, status, note) VALUES (?1, 'idle', NULL)",
                    params![id],
                )
                .map_err(db_err)?;
            }
            write_refs(tx, &payload, &id)?;
            get(tx, kind, &id)
        })
    }

    fn get(&self, kind: EntityKind, id: &str) -> Result<Entity, StoreError> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        get(&conn, kind, id)
    }

    fn list(&self, kind: EntityKind, filter: &ListFilter) -> Result<Vec<Entity>, StoreError> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut stmt = conn
            .prepare_cached(
                "SELECT kind, id, payload, tags, created_at, updated_at FROM entities WHERE kind = ?1 ORDER BY created_at DESC, seq DESC",
            )
            .map_err(db_err)?;
        let rows: Vec<Row> = stmt
            .query_map(params![kind.as_str()], |r| {
                Ok(Row {
                    kind: r.get(0)?,
                    id: r.get(1)?,
                    payload: r.get(2)?,
                    tags: r.get(3)?,
                    created_at: r.get(4)?,
                    updated_at: r.get(5)?,
                })
            })
            .map_err(db_err)?
            .collect::<Result<_, _>>()
            .map_err(db_err)?;
        let mut out = Vec::with_capacity(rows.len());
        for row in rows {
            let entity = to_entity(&conn, row)?;
            if let Some(tag) = &filter.tag {
                if !entity.tags.contains(tag) {
                    continue;
                }
            }
            if let Some(wf) = &filter.workflow_ref {
                if entity.as_session().is_none_or(|s| &s.workflow_ref != wf) {
                    continue;
                }
            }
            out.push(entity);
        }
        Ok(out)
    }

    fn update(&self, id: &str, mut payload: Payload, tags: Option<Vec<String>>) -> Result<Entity, StoreError> {
        let kind = payload.kind();
        payload.set_id(id);
        self.with_tx(|tx| {
            let current = get(tx, kind, id)?;
            if let (Payload::Session(new), Payload::Session(old)) = (&mut payload, &current.payload) {
                new.workdir = old.workdir.clone();
            }
            check(tx, &payload, Some(id))?;
            let updated = Utc::now().max(current.updated_at + chrono::Duration::microseconds(1));
            let tags = tags.unwrap_or(current.tags);
            tx.execute(
                "UPDATE entities SET payload = ?1, tags = ?2, updated_at = ?3 WHERE kind = ?4 AND id = ?5",
                params![
                    stored_json(&payload),
                    serde_json::to_string(&tags).unwrap(),
                    ts(updated),
                    kind.as_str(),
                    id
                ],
            )
            .map_err(db_err)?;
            write_refs(tx, &payload, id)?;
            get(tx, kind, id)
        })
    }

    fn delete(&self, kind: EntityKind, id: &str, force: bool) -> Result<Vec<EntityRef>, StoreError> {
        let deleted = self.with_tx(|tx| {
            get(tx, kind, id)?;
            let direct = strong_referrers(tx, kind, id)?;
            if !direct.is_empty() && !force {
                let names: Vec<String> = direct.iter().map(ToString::to_string).collect();
                return Err(StoreError::Conflict {
                    message: format!("{kind} `{id}` is referenced by {}", names.join(", ")),
                    referrers: direct,
                });
            }
            let root = EntityRef {
                kind,
                id: id.to_string(),
            };
            let mut order = vec![root.clone()];
            let mut seen: BTreeSet<EntityRef> = BTreeSet::from([root]);
            let mut i = 0;
            while i < order.len() {
                let cur = order[i].clone();
                for r in strong_referrers(tx, cur.kind, &cur.id)? {
                    if seen.insert(r.clone()) {
                        order.push(r);
                    }
                }
                i += 1;
            }
            for r in &order {
                tx.execute(
                    "DELETE FROM entities WHERE kind = ?1 AND id = ?2",
                    params![r.kind.as_str(), r.id],
                )
                .map_err(db_err)?;
                tx.execute(
                    "DELETE FROM refs WHERE from_kind = ?1 AND from_id = ?2",
                    params![r.kind.as_str(), r.id],
                )
                .map_err(db_err)?;
                if r.kind == EntityKind::Session {
                    tx.execute("DELETE FROM session_state WHERE id = ?1", params![r.id])
                        .map_err(db_err)?;
                    tx.execute("DELETE FROM messages WHERE session_id = ?1", params![r.id])
                        .map_err(db_err)?;
                }
            }
            Ok(order)
        })?;
        for r in deleted.iter().filter(|r| r.kind == EntityKind::Session) {
            let dir = self.session_dir(&r.id);
            if dir.exists() {
                if let Err(e) = std::fs::remove_dir_all(&dir) {
                    tracing::warn!(session = %r.id, error = %e, "could not remove session directory");
                }
            }
        }
        Ok(deleted)
    }

    fn referrers(&self, kind: EntityKind, id: &str) -> Result<Vec<EntityRef>, StoreError> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        strong_referrers(&conn, kind, id)
    }

    fn append_message(&self, session_id: &str, message: &Message) -> Result<(), StoreError> {
        let body = serde_json::to_string(message).expect("messages serialize");
        self.with_tx(|tx| {
            session_status(tx, session_id)?;
            tx.execute(
                "INSERT INTO messages (session_id, seq, id, body)
                 VALUES (?1, (SELECT COALESCE(MAX(seq), 0) + 1 FROM messages WHERE session_id = ?1), ?2, ?3)",
                params![session_id, message.id, body],
            )
            .map_err(db_err)?;
            Ok(())
        })
    }

    fn load_history(&self, session_id: &str) -> Result<Vec<Message>, StoreError> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        session_status(&conn, session_id)?;
        let mut stmt = conn
            .prepare_cached("SELECT id, body FROM messages WHERE session_id = ?1 ORDER BY seq")
            .map_err(db_err)?;
        let rows: Vec<(String, String)> = stmt
            .query_map(params![session_id], |r| Ok((r.get(0)?, r.get(1)?)))
            .map_err(db_err)?
            .collect::<Result<_, _>>()
            .map_err(db_err)?;
        rows.into_iter()
            .map(|(id, body)| {
                serde_json::from_str(&body).map_err(|e| StoreError::Corrupt {
                    kind: "message".into(),
                    id,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    fn begin_run(&self, session_id: &str) -> Result<Session, StoreError> {
        self.with_tx(|tx| {
            if session_status(tx, session_id)? == SessionStatus::Running {
                return Err(StoreError::Conflict {
                    message: format!("session `{session_id}` is already running"),
                    referrers: Vec::new(),
                });
            }
            tx.execute(
                "UPDATE session_state SET status = 'running', note = NULL WHERE id = ?1",
                params![session_id],
            )
            .map_err(db_err)?;
            match get(tx, EntityKind::Session, session_id)?.payload {
                Payload::Session(s) => Ok(s),
                _ => unreachable!("session rows hold sessions"),
            }
        })
    }

    fn end_run(&self, session_id: &str, status: SessionStatus) -> Result<(), StoreError> {
        self.with_tx(|tx| {
            session_status(tx, session_id)?;
            tx.execute(
                "UPDATE session_state SET status = ?1 WHERE id = ?2",
                params![status.as_str(), session_id],
            )
            .map_err(db_err)?;
            Ok(())
        })
    }

    fn audit(&self) -> Result<Vec<Dangling>, StoreError> {
        let conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut stmt = conn
            .prepare("SELECT kind, id, payload FROM entities ORDER BY seq")
            .map_err(db_err)?;
        let rows: Vec<(String, String, String)> = stmt
            .query_map([], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))
            .map_err(db_err)?
            .collect::<Result<_, _>>()
            .map_err(db_err)?;
        let mut dangling = Vec::new();
        for (kind, id, payload) in rows {
            let value = serde_json::json!({"kind": kind, "payload": serde_json::from_str::<serde_json::Value>(&payload).unwrap_or_default()});
            let payload: Payload = serde_json::from_value(value).map_err(|e| StoreError::Corrupt {
                kind: kind.clone(),
                id: id.clone(),
                message: e.to_string(),
            })?;
            let from = EntityRef {
                kind: payload.kind(),
                id,
            };
            for to in payload.references() {
                if is_weak(from.kind, to.kind) {
                    continue;
                }
                if load(&conn, to.kind, &to.id)?.is_none() {
                    dangling.push(Dangling {
                        from: from.clone(),
                        to,
                    });
                }
            }
        }
        Ok(dangling)
    }
}

fn session_status(conn: &Connection, session_id: &str) -> Result<SessionStatus, StoreError> {
    let status: Option<String> = conn
        .query_row(
            "SELECT status FROM session_state WHERE id = ?1",
            params![session_id],
            |r| r.get(0),
        )
        .optional()
        .map_err(db_err)?;
    status
        .map(|s| status_from_str(&s))
        .ok_or_else(|| StoreError::NotFound {
            kind: EntityKind::Session,
            id: session_id.to_string(),
        })
}
