//! Content-addressed persistence: image blobs named by SHA-256, a
//! line-delimited JSON trajectory log, per-episode event logs, and a
//! manifest kept in lockstep with every append.
//!
//! Layout under the store root:
//!
//! ```text
//! blobs/<first 2 hex chars>/<full digest>
//! trajectories.jsonl
//! instances.jsonl
//! manifest.json
//! events/<trajectory id>.jsonl
//! store.lock            (held by the single writer)
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{
    InstanceSource, Termination, Trajectory, TrajectoryStep, VQAInstance, ValidationError,
    SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("empty blob")]
    EmptyBlob,
    #[error("blob {digest} not found")]
    MissingBlob { digest: String },
    #[error(
        "store is locked by another writer ({path}); remove the lock file if that writer is gone"
    )]
    Locked { path: PathBuf },
    #[error("corrupt record at offset {offset}: {reason}")]
    CorruptRecord { offset: u64, reason: String },
    #[error(
        "record at offset {offset} has schema version {found}, this reader supports <= {supported}"
    )]
    SchemaVersion {
        offset: u64,
        found: u32,
        supported: u32,
    },
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What to do when the trajectory log contains an unreadable line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptPolicy {
    #[default]
    FailFast,
    SkipWithReport,
}

#[derive(Debug, Clone, Default)]
pub struct StoreOptions {
    pub corrupt_policy: CorruptPolicy,
}

/// Wire record: exactly the documented fields, in this order.
#[derive(Debug, Serialize, Deserialize)]
struct StoredTrajectory {
    schema_version: u32,
    id: String,
    instance_id: String,
    steps: Vec<StoredStep>,
    final_answer: Option<String>,
    termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcript_ref: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredStep {
    t: u32,
    image_hash: String,
    reasoning: String,
    action: Option<crate::types::EditRequest>,
    edit_failed: bool,
}

impl From<&Trajectory> for StoredTrajectory {
    fn from(t: &Trajectory) -> Self {
        StoredTrajectory {
            schema_version: SCHEMA_VERSION,
            id: t.id.clone(),
            instance_id: t.instance_id.clone(),
            steps: t
                .steps
                .iter()
                .map(|s| StoredStep {
                    t: s.t,
                    image_hash: s.image_hash.clone(),
                    reasoning: s.reasoning.clone(),
                    action: s.action.clone(),
                    edit_failed: s.edit_failed,
                })
                .collect(),
            final_answer: t.final_answer.clone(),
            termination: t.termination,
            transcript_ref: t.transcript_ref.clone(),
        }
    }
}

impl From<StoredTrajectory> for Trajectory {
    fn from(r: StoredTrajectory) -> Self {
        Trajectory {
            id: r.id,
            instance_id: r.instance_id,
            steps: r
                .steps
                .into_iter()
                .map(|s| TrajectoryStep {
                    t: s.t,
                    image_hash: s.image_hash,
                    reasoning: s.reasoning,
                    action: s.action,
                    edit_failed: s.edit_failed,
                })
                .collect(),
            final_answer: r.final_answer,
            termination: r.termination,
            transcript_ref: r.transcript_ref,
        }
    }
}

/// Aggregate counters over the store, recomputable by rescanning the files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub total_trajectories: u64,
    /// Distinct image hashes referenced by stored trajectories.
    pub total_images: u64,
    pub by_source: BTreeMap<String, u64>,
    pub by_discipline: BTreeMap<String, u64>,
    pub by_termination: BTreeMap<String, u64>,
    /// SHA-256 of the trajectory log bytes.
    pub trajectory_file_digest: String,
}

impl Manifest {
    fn empty() -> Self {
        Manifest {
            schema_version: SCHEMA_VERSION,
            total_trajectories: 0,
            total_images: 0,
            by_source: BTreeMap::new(),
            by_discipline: BTreeMap::new(),
            by_termination: BTreeMap::new(),
            trajectory_file_digest: hex::encode(Sha256::digest(b"")),
        }
    }
}

/// Lock file guard; removed on drop.
struct WriterLock {
    path: PathBuf,
}

impl WriterLock {
    fn acquire(path: PathBuf) -> Result<Self, StoreError> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WriterLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(StoreError::Locked { path })
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct WriterState {
    log: File,
    /// Running hash of the trajectory log; cloned and finalized per append.
    hasher: Sha256,
    record_count: u64,
    image_hashes: HashSet<String>,
    by_source: BTreeMap<String, u64>,
    by_discipline: BTreeMap<String, u64>,
    by_termination: BTreeMap<String, u64>,
}

/// Content-addressed store. One writer per store directory (file lock);
/// any number of concurrent readers.
pub struct Store {
    root: PathBuf,
    options: StoreOptions,
    writer: Option<Mutex<WriterState>>,
    instances: Mutex<HashMap<String, (InstanceSource, Option<String>)>>,
    _lock: Option<WriterLock>,
}

#[derive(Debug, Clone)]
pub struct CorruptionReport {
    pub offset: u64,
    pub reason: String,
}

#[derive(Debug, Default, Clone)]
pub struct TrajectoryFilter {
    pub termination: Option<Termination>,
    pub instance_id: Option<String>,
}

impl TrajectoryFilter {
    pub fn all() -> Self {
        TrajectoryFilter::default()
    }

    pub fn matches(&self, t: &Trajectory) -> bool {
        if let Some(term) = self.termination {
            if t.termination != term {
                return false;
            }
        }
        if let Some(ref id) = self.instance_id {
            if &t.instance_id != id {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub trajectories: Vec<Trajectory>,
    pub corruptions: Vec<CorruptionReport>,
}

impl Store {
    /// Opens (creating if needed) a store for reading and writing. Rebuilds
    /// the manifest from the files, so a crash between an append and a
    /// manifest write heals here.
    pub fn open(root: impl Into<PathBuf>, options: StoreOptions) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("blobs"))?;
        fs::create_dir_all(root.join("events"))?;
        let lock = WriterLock::acquire(root.join("store.lock"))?;

        let mut store = Store {
            root,
            options,
            writer: None,
            instances: Mutex::new(HashMap::new()),
            _lock: Some(lock),
        };
        store.load_instances()?;

        let log_path = store.trajectory_log_path();
        let mut hasher = Sha256::new();
        let mut record_count = 0u64;
        let mut image_hashes = HashSet::new();
        let mut by_source = BTreeMap::new();
        let mut by_discipline = BTreeMap::new();
        let mut by_termination = BTreeMap::new();
        if log_path.exists() {
            let bytes = fs::read(&log_path)?;
            hasher.update(&bytes);
            let instances = store.instances.lock().expect("instance map");
            for (offset, line) in bytes.split(|b| *b == b'\n').enumerate() {
                if line.is_empty() {
                    continue;
                }
                match parse_record(line, offset as u64) {
                    Ok(t) => {
                        record_count += 1;
                        for h in t.image_hashes() {
                            image_hashes.insert(h.to_string());
                        }
                        tally(
                            &t,
                            &instances,
                            &mut by_source,
                            &mut by_discipline,
                            &mut by_termination,
                        );
                    }
                    Err(e) => match store.options.corrupt_policy {
                        CorruptPolicy::FailFast => return Err(e),
                        CorruptPolicy::SkipWithReport => continue,
                    },
                }
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?;
        store.writer = Some(Mutex::new(WriterState {
            log,
            hasher,
            record_count,
            image_hashes,
            by_source,
            by_discipline,
            by_termination,
        }));
        store.write_manifest()?;
        Ok(store)
    }

    /// Read-only view; takes no lock and never writes.
    pub fn open_read_only(
        root: impl Into<PathBuf>,
        options: StoreOptions,
    ) -> Result<Self, StoreError> {
        let root = root.into();
        let mut store = Store {
            root,
            options,
            writer: None,
            instances: Mutex::new(HashMap::new()),
            _lock: None,
        };
        store.load_instances()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn trajectory_log_path(&self) -> PathBuf {
        self.root.join("trajectories.jsonl")
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn instances_path(&self) -> PathBuf {
        self.root.join("instances.jsonl")
    }

    fn blob_path(&self, digest: &str) -> PathBuf {
        self.root.join("blobs").join(&digest[..2]).join(digest)
    }

    fn load_instances(&mut self) -> Result<(), StoreError> {
        let path = self.instances_path();
        if !path.exists() {
            return Ok(());
        }
        let reader = BufReader::new(File::open(path)?);
        let mut map = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let inst: VQAInstance =
                serde_json::from_str(&line).map_err(|e| StoreError::CorruptRecord {
                    offset: i as u64,
                    reason: format!("instances.jsonl: {e}"),
                })?;
            map.insert(inst.id.clone(), (inst.source, inst.discipline.clone()));
        }
        self.instances = Mutex::new(map);
        Ok(())
    }

    /// Stores image bytes under their SHA-256 digest. Idempotent: identical
    /// bytes map to the same path and nothing is rewritten.
    pub fn put_image(&self, bytes: &[u8]) -> Result<String, StoreError> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyBlob);
        }
        let digest = hex::encode(Sha256::digest(bytes));
        let path = self.blob_path(&digest);
        if path.exists() {
            return Ok(digest);
        }
        let dir = path.parent().expect("blob dir");
        fs::create_dir_all(dir)?;
        // Write-then-rename keeps concurrent putters of the same bytes safe.
        let tmp = dir.join(format!(".tmp-{}-{}", std::process::id(), digest));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(digest)
    }

    pub fn has_blob(&self, digest: &str) -> bool {
        digest.len() > 2 && self.blob_path(digest).exists()
    }

    pub fn get_blob(&self, digest: &str) -> Result<Vec<u8>, StoreError> {
        if digest.len() <= 2 {
            return Err(StoreError::MissingBlob {
                digest: digest.to_string(),
            });
        }
        fs::read(self.blob_path(digest)).map_err(|_| StoreError::MissingBlob {
            digest: digest.to_string(),
        })
    }

    /// Registers an instance so manifest counters can attribute trajectories
    /// to a source and discipline.
    pub fn put_instance(&self, instance: &VQAInstance) -> Result<(), StoreError> {
        instance.validate()?;
        let mut map = self.instances.lock().expect("instance map");
        if map.contains_key(&instance.id) {
            return Ok(());
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.instances_path())?;
        let line = serde_json::to_string(instance).expect("instance serializes");
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
        file.sync_data()?;
        map.insert(
            instance.id.clone(),
            (instance.source, instance.discipline.clone()),
        );
        Ok(())
    }

    pub fn instance_count(&self) -> usize {
        self.instances.lock().expect("instance map").len()
    }

    /// Reads the full instance records back from disk, in insertion order.
    pub fn read_instances(&self) -> Result<Vec<VQAInstance>, StoreError> {
        let path = self.instances_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let inst: VQAInstance =
                serde_json::from_str(&line).map_err(|e| StoreError::CorruptRecord {
                    offset: i as u64,
                    reason: format!("instances.jsonl: {e}"),
                })?;
            out.push(inst);
        }
        Ok(out)
    }

    /// Appends one validated trajectory and updates the manifest in the same
    /// critical section. Returns the record offset (records so far).
    pub fn append_trajectory(&self, t: &Trajectory) -> Result<u64, StoreError> {
        t.validate()?;
        let writer = self
            .writer
            .as_ref()
            .expect("append_trajectory requires a read-write store");
        let record = StoredTrajectory::from(t);
        let mut line = serde_json::to_string(&record).expect("trajectory serializes");
        line.push('\n');

        let offset;
        {
            let mut state = writer.lock().expect("writer state");
            state.log.write_all(line.as_bytes())?;
            state.log.sync_data()?;
            state.hasher.update(line.as_bytes());
            offset = state.record_count;
            state.record_count += 1;
            for h in t.image_hashes() {
                state.image_hashes.insert(h.to_string());
            }
            let instances = self.instances.lock().expect("instance map");
            let state = &mut *state;
            tally(
                t,
                &instances,
                &mut state.by_source,
                &mut state.by_discipline,
                &mut state.by_termination,
            );
        }
        self.write_manifest()?;
        Ok(offset)
    }

    /// Loads matching trajectories in append order. Under the skip policy,
    /// unreadable lines become corruption reports and the scan continues;
    /// fail-fast surfaces the first one as an error.
    pub fn load_all(&self, filter: &TrajectoryFilter) -> Result<LoadOutcome, StoreError> {
        let mut outcome = LoadOutcome::default();
        let path = self.trajectory_log_path();
        if !path.exists() {
            return Ok(outcome);
        }
        let reader = BufReader::new(File::open(path)?);
        for (offset, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match parse_record(line.as_bytes(), offset as u64) {
                Ok(t) => {
                    if filter.matches(&t) {
                        outcome.trajectories.push(t);
                    }
                }
                Err(e) => match self.options.corrupt_policy {
                    CorruptPolicy::FailFast => return Err(e),
                    CorruptPolicy::SkipWithReport => outcome.corruptions.push(CorruptionReport {
                        offset: offset as u64,
                        reason: e.to_string(),
                    }),
                },
            }
        }
        Ok(outcome)
    }

    fn current_manifest(&self) -> Manifest {
        match &self.writer {
            Some(writer) => {
                let state = writer.lock().expect("writer state");
                Manifest {
                    schema_version: SCHEMA_VERSION,
                    total_trajectories: state.record_count,
                    total_images: state.image_hashes.len() as u64,
                    by_source: state.by_source.clone(),
                    by_discipline: state.by_discipline.clone(),
                    by_termination: state.by_termination.clone(),
                    trajectory_file_digest: hex::encode(state.hasher.clone().finalize()),
                }
            }
            None => Manifest::empty(),
        }
    }

    fn write_manifest(&self) -> Result<(), StoreError> {
        let manifest = self.current_manifest();
        let tmp = self.root.join(".manifest.tmp");
        fs::write(
            &tmp,
            serde_json::to_vec_pretty(&manifest).expect("manifest"),
        )?;
        fs::rename(&tmp, self.manifest_path())?;
        Ok(())
    }

    pub fn read_manifest(&self) -> Result<Manifest, StoreError> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(Manifest::empty());
        }
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| StoreError::CorruptRecord {
            offset: 0,
            reason: format!("manifest.json: {e}"),
        })
    }

    /// Recomputes the manifest by rescanning the files on disk; used to
    /// check that incremental counters never drift.
    pub fn rescan_manifest(&self) -> Result<Manifest, StoreError> {
        let mut manifest = Manifest::empty();
        let path = self.trajectory_log_path();
        if !path.exists() {
            return Ok(manifest);
        }
        let bytes = fs::read(&path)?;
        manifest.trajectory_file_digest = hex::encode(Sha256::digest(&bytes));
        let instances = self.instances.lock().expect("instance map");
        let mut images = HashSet::new();
        for (offset, line) in bytes.split(|b| *b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            match parse_record(line, offset as u64) {
                Ok(t) => {
                    manifest.total_trajectories += 1;
                    for h in t.image_hashes() {
                        images.insert(h.to_string());
                    }
                    tally(
                        &t,
                        &instances,
                        &mut manifest.by_source,
                        &mut manifest.by_discipline,
                        &mut manifest.by_termination,
                    );
                }
                Err(e) => match self.options.corrupt_policy {
                    CorruptPolicy::FailFast => return Err(e),
                    CorruptPolicy::SkipWithReport => continue,
                },
            }
        }
        manifest.total_images = images.len() as u64;
        Ok(manifest)
    }

    /// Writes a per-episode event log (pre-serialized JSON lines).
    pub fn write_event_log(&self, trajectory_id: &str, lines: &[String]) -> Result<(), StoreError> {
        let path = self
            .root
            .join("events")
            .join(format!("{trajectory_id}.jsonl"));
        let mut file = File::create(path)?;
        for line in lines {
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_event_log(&self, trajectory_id: &str) -> Result<Vec<String>, StoreError> {
        let path = self
            .root
            .join("events")
            .join(format!("{trajectory_id}.jsonl"));
        let reader = BufReader::new(File::open(path)?);
        Ok(reader
            .lines()
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|l| !l.trim().is_empty())
            .collect())
    }
}

fn tally(
    t: &Trajectory,
    instances: &HashMap<String, (InstanceSource, Option<String>)>,
    by_source: &mut BTreeMap<String, u64>,
    by_discipline: &mut BTreeMap<String, u64>,
    by_termination: &mut BTreeMap<String, u64>,
) {
    let (source, discipline) = match instances.get(&t.instance_id) {
        Some((s, d)) => (
            s.as_str().to_string(),
            d.clone().unwrap_or_else(|| "none".into()),
        ),
        None => ("unknown".to_string(), "none".to_string()),
    };
    *by_source.entry(source).or_insert(0) += 1;
    *by_discipline.entry(discipline).or_insert(0) += 1;
    *by_termination
        .entry(t.termination.as_str().to_string())
        .or_insert(0) += 1;
}

fn parse_record(line: &[u8], offset: u64) -> Result<Trajectory, StoreError> {
    // Peek at the version first so a newer schema is reported as such
    // rather than as an arbitrary parse failure.
    #[derive(Deserialize)]
    struct VersionProbe {
        schema_version: u32,
    }
    let probe: VersionProbe =
        serde_json::from_slice(line).map_err(|e| StoreError::CorruptRecord {
            offset,
            reason: e.to_string(),
        })?;
    if probe.schema_version > SCHEMA_VERSION {
        return Err(StoreError::SchemaVersion {
            offset,
            found: probe.schema_version,
            supported: SCHEMA_VERSION,
        });
    }
    let record: StoredTrajectory =
        serde_json::from_slice(line).map_err(|e| StoreError::CorruptRecord {
            offset,
            reason: e.to_string(),
        })?;
    Ok(record.into())
}
