//! The training loop.
//!
//! Each sample runs through nine stages: render the student prompt from the
//! current store, sample the group, let the teacher solve, condense every
//! trajectory, filter the teacher, balance the group, critique and apply the
//! resulting updates, record self-reported usage, and compress when a
//! budget is exceeded. Samples are processed one at a time; a batch only
//! decides when a checkpoint is written.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use futures::future::join_all;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::RunConfig;
use crate::critique::{compress_via_teacher, critique_and_update, CritiqueError};
use crate::dataset::Sample;
use crate::gateway::{ChatResponse, GatewayError, ModelClient, ModelRole, TokenLedger};
use crate::prompts::{CritiqueInput, PromptError, PromptLibrary};
use crate::store::{CompressionAction, ExperienceId, ExperienceStore, StoreError, UpdateAction};
use crate::trajectory::{
    condense, extract_answer, filter_teacher, partition_balance, CondenseError, RawTrajectory, Source, Trajectory,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub ts: u64,
    pub stage: String,
    pub sample_id: Option<String>,
    pub detail: Value,
}

/// Append-only event log. `ts` is the record's sequence number, so logs of
/// identical runs are byte-identical.
#[derive(Debug, Default)]
pub struct EventLog {
    events: Vec<Event>,
    file: Option<File>,
    write_error: Option<String>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `path`, keeping only its first `keep` records. A fresh log is
    /// `keep = 0`.
    pub fn open(path: &Path, keep: usize) -> std::io::Result<Self> {
        let mut events = Vec::new();
        if keep > 0 {
            let reader = BufReader::new(File::open(path)?);
            for line in reader.lines().take(keep) {
                let event: Event = serde_json::from_str(&line?)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                events.push(event);
            }
            if events.len() < keep {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    format!("event log has {} records, checkpoint expects {keep}", events.len()),
                ));
            }
        }
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        for e in &events {
            writeln!(file, "{}", serde_json::to_string(e).expect("event serializes"))?;
        }
        Ok(Self {
            events,
            file: Some(file),
            write_error: None,
        })
    }

    pub fn append(&mut self, stage: &str, sample_id: Option<&str>, detail: Value) {
        let event = Event {
            ts: self.events.len() as u64,
            stage: stage.to_string(),
            sample_id: sample_id.map(str::to_string),
            detail,
        };
        if let Some(file) = &mut self.file {
            let line = serde_json::to_string(&event).expect("event serializes");
            if let Err(e) = writeln!(file, "{line}") {
                self.write_error.get_or_insert(e.to_string());
            }
        }
        self.events.push(event);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn sync(&mut self) -> Result<(), String> {
        if let Some(e) = self.write_error.take() {
            return Err(e);
        }
        if let Some(file) = &mut self.file {
            file.flush().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

fn used_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bused\b\s*:?\s*(.*)$").expect("valid regex"))
}

fn id_token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b[Ee](\d+)\b").expect("valid regex"))
}

/// Experience ids from the last `Used:` line of a student reply.
///
/// `Used: [E1, E3]` is the expected form. Any other line mentioning "used"
/// is scanned for `E{n}` tokens with a warning; no such line gives an empty
/// list with a warning.
pub fn collect_used_ids(response: &str) -> (Vec<ExperienceId>, Option<String>) {
    static STRICT: OnceLock<Regex> = OnceLock::new();
    let strict = STRICT.get_or_init(|| Regex::new(r"(?i)^\W*used\W*:\s*\[([^\]]*)\]\W*$").expect("valid regex"));

    let scan = |text: &str| {
        let mut seen = HashSet::new();
        id_token_re()
            .captures_iter(text)
            .filter_map(|c| c[1].parse::<u64>().ok().map(ExperienceId))
            .filter(|id| seen.insert(*id))
            .collect::<Vec<_>>()
    };
    if let Some(c) = response.lines().rev().find_map(|l| strict.captures(l.trim())) {
        return (scan(&c[1]), None);
    }
    match response
        .lines()
        .rev()
        .find_map(|l| used_line_re().captures(l).map(|c| (l, c)))
    {
        Some((line, c)) => {
            let tail = c.get(1).map_or("", |m| m.as_str());
            (
                scan(tail),
                Some(format!("malformed `Used:` line {:?}; scanned for ids", line.trim())),
            )
        }
        None => (Vec::new(), Some("no `Used:` line in reply".into())),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCounts {
    pub add: u64,
    pub modify: u64,
    pub delete: u64,
    pub none: u64,
}

impl ActionCounts {
    fn count(&mut self, action: &UpdateAction) {
        match action {
            UpdateAction::Add { .. } => self.add += 1,
            UpdateAction::Modify { .. } => self.modify += 1,
            UpdateAction::Delete { .. } => self.delete += 1,
            UpdateAction::None => self.none += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochStats {
    pub processed: u64,
    pub skipped: u64,
    pub actions: ActionCounts,
    pub compressions: u64,
}

/// Everything a run carries between samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub store: ExperienceStore,
    pub ledger: TokenLedger,
    /// Samples started so far; the store's step counter follows it.
    pub step: u64,
    pub epochs: Vec<EpochStats>,
}

impl RunState {
    pub fn new(store: ExperienceStore) -> Self {
        Self {
            store,
            ledger: TokenLedger::default(),
            step: 0,
            epochs: Vec::new(),
        }
    }

    fn epoch_mut(&mut self, epoch: usize) -> &mut EpochStats {
        if self.epochs.len() <= epoch {
            self.epochs.resize(epoch + 1, EpochStats::default());
        }
        &mut self.epochs[epoch]
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Critique(#[from] CritiqueError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no student produced any text")]
    NoTrajectories,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot resume: {0}")]
    Resume(String),
}

/// How one compression pass restored the budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionPath {
    /// The teacher's actions followed by top-R selection.
    Teacher,
    /// Teacher unusable; top-R selection alone.
    RetainOnly,
    /// Even top-R overflowed the token budget; R was lowered until it fit.
    ReducedRetention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub path: CompressionPath,
    pub retain_top: usize,
    pub teacher_actions: Vec<CompressionAction>,
    pub warnings: Vec<String>,
    pub items_before: usize,
    pub items_after: usize,
    pub tokens_before: u64,
    pub tokens_after: u64,
}

/// Models, prompts and configuration for one run.
#[derive(Debug, Clone)]
pub struct Engine {
    pub config: RunConfig,
    pub student: ModelClient,
    pub teacher: ModelClient,
    pub prompts: PromptLibrary,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from `state.json` in the run directory.
    pub resume: bool,
    /// Stop after this many batches in this invocation.
    pub max_batches: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    run_id: String,
    config_checksum: String,
    next: Cursor,
    store_file: String,
    events_written: usize,
    ledger: TokenLedger,
    step: u64,
    epochs: Vec<EpochStats>,
    compressions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub completed: bool,
    pub samples_processed: u64,
    pub samples_skipped: u64,
    pub compressions: u64,
    pub epochs: Vec<EpochStats>,
    pub ledger: TokenLedger,
    pub prompts_checksum: String,
    pub store_checksum: String,
    pub final_store: ExperienceStore,
}

fn record(ledger: &mut TokenLedger, response: &ChatResponse, role: ModelRole) {
    ledger.record(response, role);
}

fn ids_json(ids: &[ExperienceId]) -> Value {
    json!(ids.iter().map(ToString::to_string).collect::<Vec<_>>())
}

fn checksum_of(value: &Value) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

impl Engine {
    pub fn new(config: RunConfig, student: ModelClient, teacher: ModelClient, prompts: PromptLibrary) -> Self {
        Self {
            config,
            student,
            teacher,
            prompts,
        }
    }

    /// Runs the nine stages for one sample. The store is replaced only if
    /// every stage succeeds; tokens spent are booked either way.
    pub async fn process_sample(
        &self,
        sample: &Sample,
        state: &mut RunState,
        log: &mut EventLog,
    ) -> Result<Option<CompressionReport>, SampleError> {
        let sid = Some(sample.id.as_str());
        state.step += 1;
        let step = state.step;
        let mut store = state.store.clone();
        store.advance_to(step)?;

        // (1) student context from the current store
        let serialized = store.serialize();
        let prompt = self.prompts.build_student_prompt(sample, &serialized)?;
        let included: HashSet<ExperienceId> = prompt.experience_ids_included.iter().copied().collect();

        // (2) N student trajectories and (3) the teacher's own attempt, concurrently
        let student_req = self.student.request(prompt.messages.clone());
        let teacher_prompt = self.prompts.build_teacher_solve_prompt(sample)?;
        let teacher_req = self.teacher.request(teacher_prompt.messages);
        let (slots, teacher_result) = futures::join!(
            self.student
                .gateway
                .sample_parallel(&student_req, self.config.group_size),
            self.teacher.gateway.complete(&teacher_req),
        );
        let mut raws = Vec::new();
        let mut failures = Vec::new();
        let mut replies = Vec::new();
        if let Ok(slots) = &slots {
            for (slot, result) in slots.iter().enumerate() {
                match result {
                    Ok(resp) => {
                        record(&mut state.ledger, resp, ModelRole::Student);
                        let text = resp.first_text();
                        if text.trim().is_empty() {
                            failures.push(json!({"slot": slot, "error": "empty completion"}));
                        } else {
                            raws.push(RawTrajectory::new(text, Source::Student, slot));
                            replies.push(text.to_string());
                        }
                    }
                    Err(e) => failures.push(json!({"slot": slot, "error": e.to_string()})),
                }
            }
        }
        if let Ok(resp) = &teacher_result {
            record(&mut state.ledger, resp, ModelRole::Teacher);
        }
        let answers: Vec<Value> = raws
            .iter()
            .map(|r| extract_answer(&r.full_text).map_or(Value::Null, |a| json!(a.canonical_text)))
            .collect();
        log.append(
            "student_sampling",
            sid,
            json!({
                "experience_ids": ids_json(&prompt.experience_ids_included),
                "slots": raws.iter().map(|r| r.slot_index).collect::<Vec<_>>(),
                "answers": answers,
                "failures": failures,
            }),
        );
        slots?;
        if raws.is_empty() {
            return Err(SampleError::NoTrajectories);
        }
        let teacher_resp = teacher_result?;
        let teacher_raw = RawTrajectory::new(teacher_resp.first_text(), Source::Teacher, 0);
        log.append(
            "teacher_solve",
            sid,
            json!({ "answer": extract_answer(&teacher_raw.full_text).ok().map(|a| a.canonical_text) }),
        );

        // (4) condensation, each trajectory by the model that wrote it
        let student_jobs = raws
            .iter()
            .map(|raw| condense(raw, sample, &self.student, &self.prompts));
        let (student_condensed, teacher_condensed) = futures::join!(
            join_all(student_jobs),
            condense(&teacher_raw, sample, &self.teacher, &self.prompts),
        );
        let mut degraded = Vec::new();
        let mut condense_warnings = Vec::new();
        let mut unwrap_condensed = |raw: &RawTrajectory,
                                    result: Result<(Trajectory, ChatResponse), CondenseError>,
                                    role: ModelRole,
                                    ledger: &mut TokenLedger|
         -> Trajectory {
            match result {
                Ok((traj, resp)) => {
                    record(ledger, &resp, role);
                    traj
                }
                Err(e) => {
                    condense_warnings.push(format!("{role} slot {}: {e}", raw.slot_index));
                    Trajectory::degraded(raw)
                }
            }
        };
        let students: Vec<Trajectory> = raws
            .iter()
            .zip(student_condensed)
            .map(|(raw, r)| unwrap_condensed(raw, r, ModelRole::Student, &mut state.ledger))
            .collect();
        let teacher_traj = unwrap_condensed(&teacher_raw, teacher_condensed, ModelRole::Teacher, &mut state.ledger);
        for t in students.iter().chain(std::iter::once(&teacher_traj)) {
            if t.degraded {
                degraded.push(json!({"source": t.source, "slot": t.slot_index}));
            }
        }
        log.append(
            "condense",
            sid,
            json!({ "degraded": degraded, "warnings": condense_warnings }),
        );

        // (5) teacher filter
        let verdict = filter_teacher(&teacher_traj, &sample.gold);
        log.append("teacher_filter", sid, json!({ "verdict": verdict }));

        // (6) balance
        let partition = partition_balance(students, &sample.gold);
        log.append(
            "partition",
            sid,
            json!({
                "positives": partition.positives.iter().map(|t| t.slot_index).collect::<Vec<_>>(),
                "negatives": partition.negatives.iter().map(|t| t.slot_index).collect::<Vec<_>>(),
                "dropped": partition.dropped,
            }),
        );

        // (7) critique and update
        let input = CritiqueInput {
            problem: sample,
            positives: &partition.positives,
            negatives: &partition.negatives,
            teacher: &teacher_traj,
            teacher_verdict: verdict,
            store: &store,
        };
        let (envelope, critique_resp) = critique_and_update(&input, &self.teacher, &self.prompts).await?;
        record(&mut state.ledger, &critique_resp, ModelRole::Teacher);
        let mut updated = store.clone();
        for action in &envelope.parsed_actions {
            updated.apply_update(action)?;
        }
        store = updated;
        log.append(
            "update",
            sid,
            json!({
                "actions": envelope.parsed_actions,
                "warnings": envelope.parse_warnings,
                "items": store.len(),
                "tokens": store.token_length(),
            }),
        );

        // (8) self-reported usage
        if self.config.usage_recording.training {
            let mut reported = Vec::new();
            let mut seen = HashSet::new();
            let mut outside_prompt = Vec::new();
            let mut warnings = Vec::new();
            for (raw, reply) in raws.iter().zip(&replies) {
                let (ids, warning) = collect_used_ids(reply);
                if let Some(w) = warning {
                    warnings.push(format!("slot {}: {w}", raw.slot_index));
                }
                for id in ids {
                    if !included.contains(&id) {
                        outside_prompt.push(id);
                    } else if seen.insert(id) {
                        reported.push(id);
                    }
                }
            }
            let usage = store.record_usage(&reported, step)?;
            log.append(
                "usage",
                sid,
                json!({
                    "reported": ids_json(&reported),
                    "incremented": ids_json(&usage.incremented),
                    "unknown": ids_json(&usage.unknown),
                    "not_in_prompt": ids_json(&outside_prompt),
                    "warnings": warnings,
                }),
            );
        }

        // (9) compression
        let mut compression = None;
        if store.needs_compression() {
            let report = self.compress(&mut store, &mut state.ledger).await;
            log.append(
                "compression",
                sid,
                serde_json::to_value(&report).expect("report serializes"),
            );
            compression = Some(report);
        }

        let stats = state.epochs.last_mut();
        if let Some(stats) = stats {
            for action in &envelope.parsed_actions {
                stats.actions.count(action);
            }
        }
        state.store = store;
        Ok(compression)
    }

    pub async fn compress(&self, store: &mut ExperienceStore, ledger: &mut TokenLedger) -> CompressionReport {
        compress_store(store, &self.teacher, &self.prompts, self.config.word_cap, ledger).await
    }

    pub fn run_dir(&self) -> PathBuf {
        self.config.checkpoint_dir.join(&self.config.run_id)
    }

    fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// Trains over `dataset`, checkpointing after every batch into
    /// `{checkpoint_dir}/{run_id}/`.
    pub async fn train(&self, dataset: &[Sample], options: TrainOptions) -> Result<RunReport, TrainError> {
        if dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let dir = self.run_dir();
        let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(&dir).map_err(io)?;
        let echo = self.config.echo();
        let config_checksum = checksum_of(&echo);
        let events_path = dir.join("events.jsonl");
        let state_path = dir.join("state.json");

        let (mut state, mut cursor, mut compressions, mut log) = if options.resume && state_path.exists() {
            let text = std::fs::read_to_string(&state_path).map_err(io)?;
            let ck: Checkpoint =
                serde_json::from_str(&text).map_err(|e| TrainError::Resume(format!("state.json: {e}")))?;
            if ck.config_checksum != config_checksum {
                return Err(TrainError::Resume(
                    "configuration differs from the checkpointed run".into(),
                ));
            }
            let store = ExperienceStore::restore(&dir.join(&ck.store_file))?;
            let log = EventLog::open(&events_path, ck.events_written).map_err(io)?;
            tracing::info!(epoch = ck.next.epoch, batch = ck.next.batch, "resuming");
            let state = RunState {
                store,
                ledger: ck.ledger,
                step: ck.step,
                epochs: ck.epochs,
            };
            (state, ck.next, ck.compressions, log)
        } else {
            let mut log = EventLog::open(&events_path, 0).map_err(io)?;
            log.append(
                "run_start",
                None,
                json!({
                    "config": echo,
                    "prompts_checksum": self.prompts.checksum(),
                    "dataset_size": dataset.len(),
                }),
            );
            let store = ExperienceStore::new(self.config.budgets);
            (RunState::new(store), Cursor { epoch: 0, batch: 0 }, 0, log)
        };

        let batches_per_epoch = dataset.len().div_ceil(self.config.batch_size);
        let mut batches_run = 0;
        let mut halted = false;
        while cursor.epoch < self.config.epochs {
            if options.max_batches.is_some_and(|m| batches_run >= m) {
                halted = true;
                break;
            }
            let order = self.epoch_order(dataset.len(), cursor.epoch);
            if cursor.batch == 0 {
                state.epoch_mut(cursor.epoch);
                let ids: Vec<&str> = order.iter().map(|&i| dataset[i].id.as_str()).collect();
                log.append("epoch_start", None, json!({ "epoch": cursor.epoch + 1, "order": ids }));
            }
            state.epoch_mut(cursor.epoch);
            let start = cursor.batch * self.config.batch_size;
            let end = (start + self.config.batch_size).min(dataset.len());
            for &index in &order[start..end] {
                let sample = &dataset[index];
                if self.run_sample(sample, &mut state, &mut log).await? {
                    compressions += 1;
                }
            }

            let store_file = format!("epoch{}_batch{}.json", cursor.epoch + 1, cursor.batch + 1);
            state.store.persist(&dir.join(&store_file))?;
            log.append(
                "checkpoint",
                None,
                json!({ "epoch": cursor.epoch + 1, "batch": cursor.batch + 1, "store": store_file, "items": state.store.len() }),
            );
            cursor.batch += 1;
            if cursor.batch == batches_per_epoch {
                cursor = Cursor {
                    epoch: cursor.epoch + 1,
                    batch: 0,
                };
            }
            if cursor.epoch == self.config.epochs {
                log.append(
                    "run_end",
                    None,
                    json!({ "items": state.store.len(), "store_checksum": state.store.checksum() }),
                );
            }
            log.sync()
                .map_err(|e| TrainError::Io(format!("{}: {e}", events_path.display())))?;
            let ck = Checkpoint {
                run_id: self.config.run_id.clone(),
                config_checksum: config_checksum.clone(),
                next: cursor,
                store_file,
                events_written: log.len(),
                ledger: state.ledger,
                step: state.step,
                epochs: state.epochs.clone(),
                compressions,
            };
            let tmp = state_path.with_extension("json.tmp");
            let body = serde_json::to_string_pretty(&ck).expect("checkpoint serializes") + "\n";
            std::fs::write(&tmp, body).map_err(io)?;
            std::fs::rename(&tmp, &state_path).map_err(io)?;
            batches_run += 1;
        }

        let completed = !halted;
        if completed {
            state.store.persist(&dir.join("final_store.json"))?;
        }
        let report = RunReport {
            run_id: self.config.run_id.clone(),
            completed,
            samples_processed: state.epochs.iter().map(|e| e.processed).sum(),
            samples_skipped: state.epochs.iter().map(|e| e.skipped).sum(),
            compressions,
            epochs: state.epochs.clone(),
            ledger: state.ledger,
            prompts_checksum: self.prompts.checksum(),
            store_checksum: state.store.checksum(),
            final_store: state.store,
        };
        if completed {
            let body = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            std::fs::write(dir.join("report.json"), body).map_err(io)?;
        }
        Ok(report)
    }

    /// One sample with retries. Returns whether a compression ran.
    async fn run_sample(&self, sample: &Sample, state: &mut RunState, log: &mut EventLog) -> Result<bool, TrainError> {
        let attempts = self.config.sample_retries + 1;
        for attempt in 1..=attempts {
            match self.process_sample(sample, state, log).await {
                Ok(compression) => {
                    let stats = state.epochs.last_mut().expect("epoch stats exist");
                    stats.processed += 1;
                    if compression.is_some() {
                        stats.compressions += 1;
                    }
                    log.append("sample_done", Some(&sample.id), json!({ "items": state.store.len() }));
                    return Ok(compression.is_some());
                }
                Err(SampleError::Store(e @ StoreError::Io { .. })) => return Err(e.into()),
                Err(e) => {
                    tracing::warn!(sample = %sample.id, attempt, error = %e, "sample failed");
                    log.append(
                        "sample_failed",
                        Some(&sample.id),
                        json!({ "attempt": attempt, "error": e.to_string() }),
                    );
                }
            }
        }
        state.epochs.last_mut().expect("epoch stats exist").skipped += 1;
        log.append("sample_skipped", Some(&sample.id), json!({ "attempts": attempts }));
        Ok(false)
    }
}

/// One compression pass that always ends within budgets: the teacher's
/// batch first, then selection alone, then selection with a smaller R.
pub async fn compress_store(
    store: &mut ExperienceStore,
    teacher: &ModelClient,
    prompts: &PromptLibrary,
    word_cap: usize,
    ledger: &mut TokenLedger,
) -> CompressionReport {
    let items_before = store.len();
    let tokens_before = store.token_length();
    let retain = store.budgets.retain_top.min(store.budgets.item_budget);
    let mut warnings = Vec::new();
    let mut teacher_actions = Vec::new();

    if !store.is_empty() {
        match compress_via_teacher(store, teacher, prompts, word_cap).await {
            Ok((envelope, resp)) => {
                record(ledger, &resp, ModelRole::Teacher);
                warnings.extend(envelope.parse_warnings);
                teacher_actions = envelope.parsed_actions;
            }
            Err(e) => warnings.push(format!("teacher compression failed: {e}")),
        }
    }

    let path = 'select: {
        if !teacher_actions.is_empty() {
            match store.apply_compression(&teacher_actions, retain) {
                Ok(_) => break 'select (CompressionPath::Teacher, retain),
                Err(e) => warnings.push(format!("teacher batch rejected: {e}")),
            }
        }
        match store.apply_compression(&[], retain) {
            Ok(_) => break 'select (CompressionPath::RetainOnly, retain),
            Err(e) => warnings.push(format!("top-{retain} selection over budget: {e}")),
        }
        // selecting zero items always fits, so this loop always breaks
        let mut r = retain;
        while store.apply_compression(&[], r).is_err() {
            r -= 1;
        }
        (CompressionPath::ReducedRetention, r)
    };
    CompressionReport {
        path: path.0,
        retain_top: path.1,
        teacher_actions,
        warnings,
        items_before,
        items_after: store.len(),
        tokens_before,
        tokens_after: store.token_length(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn used_ids_strict_form() {
        assert_eq!(
            collect_used_ids("… Answer: B\nUsed: [E1, E3]"),
            (vec![ExperienceId(1), ExperienceId(3)], None)
        );
        assert_eq!(collect_used_ids("Answer: B\nUsed: []"), (vec![], None));
        assert_eq!(collect_used_ids("**Used:** [E2]").0, vec![ExperienceId(2)]);
    }

    #[test]
    fn used_ids_fallback_scan() {
        let (ids, warning) = collect_used_ids("Answer: B\nUsed E1 E3");
        assert_eq!(ids, vec![ExperienceId(1), ExperienceId(3)]);
        assert!(warning.is_some());
        let (ids, warning) = collect_used_ids("Answer: B\nUsed: E4, e4 and E5");
        assert_eq!(ids, vec![ExperienceId(4), ExperienceId(5)]);
        assert!(warning.is_some());
    }

    #[test]
    fn used_ids_missing_line() {
        let (ids, warning) = collect_used_ids("Answer: B");
        assert!(ids.is_empty());
        assert!(warning.is_some());
    }

    #[test]
    fn last_used_line_wins() {
        assert_eq!(
            collect_used_ids("Used: [E1]\nOn reflection\nUsed: [E2]").0,
            vec![ExperienceId(2)]
        );
    }
}
