//! Job records and their on-disk journal.
//!
//! The journal is a JSON-lines file; each line is a full job record and the
//! last line for an id wins. Reopening marks interrupted jobs failed and
//! hands back the ids still queued.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const JOURNAL: &str = "jobs.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Pretrain,
    Finetune,
    Sample,
    Interpolate,
    Edit,
    Evaluate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    fn rank(self) -> u8 {
        match self {
            Self::Queued => 0,
            Self::Running => 1,
            Self::Done | Self::Failed => 2,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 2
    }
}

/// Body of `POST /sketch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchRequest {
    pub raster: Vec<f64>,
    #[serde(default)]
    pub target_class: Option<usize>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub guidance_scale: Option<f64>,
}

/// Body of `POST /interpolate`. Latent ids are `<job id>/<index>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    pub a: String,
    pub b: String,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum JobInput {
    Sketch(SketchRequest),
    Interpolate(InterpolateRequest),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub config_hash: String,
    pub input: JobInput,
    /// Relative to the store directory.
    #[serde(default)]
    pub results: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub error: Option<String>,
}

struct Inner {
    jobs: BTreeMap<String, Job>,
    next: u64,
    journal: File,
}

pub struct JobStore {
    dir: PathBuf,
    inner: Mutex<Inner>,
}

fn job_number(id: &str) -> Option<u64> {
    id.strip_prefix('j')?.parse().ok()
}

impl JobStore {
    /// Opens or creates the store in `dir`. Returns the store and the ids of
    /// jobs that were queued when it was last closed, oldest first.
    pub fn open(dir: &Path) -> Result<(Self, Vec<String>), CliError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(JOURNAL);
        let mut jobs = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            // drop a torn final write left by a crash
            let complete = text.rfind('\n').map_or(0, |i| i + 1);
            if complete < text.len() {
                OpenOptions::new().write(true).open(&path)?.set_len(complete as u64)?;
            }
            for (i, line) in text[..complete].lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let job: Job = serde_json::from_str(line)
                    .map_err(|e| CliError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
                jobs.insert(job.id.clone(), job);
            }
        }
        let next = jobs.keys().filter_map(|id| job_number(id)).max().map_or(1, |m| m + 1);
        let journal = OpenOptions::new().create(true).append(true).open(&path)?;
        let store = Self {
            dir: dir.to_path_buf(),
            inner: Mutex::new(Inner { jobs, next, journal }),
        };
        let mut queued = Vec::new();
        let ids: Vec<(String, JobStatus)> = {
            let inner = store.inner.lock().expect("job store lock");
            inner.jobs.values().map(|j| (j.id.clone(), j.status)).collect()
        };
        for (id, status) in ids {
            match status {
                JobStatus::Running => {
                    store.update(&id, |j| {
                        j.status = JobStatus::Failed;
                        j.error = Some("interrupted by a service restart".into());
                    })?;
                }
                JobStatus::Queued => queued.push(id),
                _ => {}
            }
        }
        queued.sort_by_key(|id| job_number(id));
        Ok((store, queued))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.dir.join("jobs").join(id)
    }

    fn append(inner: &mut Inner, job: &Job) -> Result<(), CliError> {
        let mut line = serde_json::to_string(job).map_err(|e| CliError::Config(e.to_string()))?;
        line.push('\n');
        inner.journal.write_all(line.as_bytes())?;
        inner.journal.sync_data()?;
        Ok(())
    }

    pub fn create(&self, kind: JobKind, input: JobInput, config_hash: &str) -> Result<Job, CliError> {
        let mut inner = self.inner.lock().expect("job store lock");
        let job = Job {
            id: format!("j{:06}", inner.next),
            kind,
            status: JobStatus::Queued,
            config_hash: config_hash.to_string(),
            input,
            results: BTreeMap::new(),
            error: None,
        };
        Self::append(&mut inner, &job)?;
        inner.next += 1;
        inner.jobs.insert(job.id.clone(), job.clone());
        Ok(job)
    }

    /// Applies `f` and journals the result. Status may only move forward and
    /// a job has results exactly when it is done.
    pub fn update(&self, id: &str, f: impl FnOnce(&mut Job)) -> Result<Job, CliError> {
        let mut inner = self.inner.lock().expect("job store lock");
        let old = inner
            .jobs
            .get(id)
            .ok_or_else(|| CliError::Usage(format!("unknown job {id}")))?;
        let mut job = old.clone();
        f(&mut job);
        if job.id != old.id || job.status.rank() < old.status.rank() || (old.status.is_terminal() && job.status != old.status) {
            return Err(CliError::Usage(format!(
                "job {id}: illegal transition {:?} -> {:?}",
                old.status, job.status
            )));
        }
        if (job.status == JobStatus::Done) == job.results.is_empty() {
            return Err(CliError::Usage(format!("job {id}: results must be present exactly when done")));
        }
        Self::append(&mut inner, &job)?;
        inner.jobs.insert(id.to_string(), job.clone());
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Option<Job> {
        self.inner.lock().expect("job store lock").jobs.get(id).cloned()
    }

    pub fn list(&self) -> Vec<Job> {
        self.inner.lock().expect("job store lock").jobs.values().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input() -> JobInput {
        JobInput::Sketch(SketchRequest {
            raster: vec![0.0; 4],
            target_class: Some(1),
            lambda: None,
            guidance_scale: None,
        })
    }

    #[test]
    fn transitions_only_move_forward() {
        let dir = tempfile::tempdir().unwrap();
        let (store, queued) = JobStore::open(dir.path()).unwrap();
        assert!(queued.is_empty());
        let job = store.create(JobKind::Finetune, input(), "h").unwrap();
        store.update(&job.id, |j| j.status = JobStatus::Running).unwrap();
        assert!(store.update(&job.id, |j| j.status = JobStatus::Queued).is_err());
        assert!(store.update(&job.id, |j| j.status = JobStatus::Done).is_err(), "done without results");
        store
            .update(&job.id, |j| {
                j.status = JobStatus::Done;
                j.results.insert("samples".into(), "x".into());
            })
            .unwrap();
        assert!(store.update(&job.id, |j| j.status = JobStatus::Failed).is_err());
        assert!(store.update("nope", |_| {}).is_err());
    }

    #[test]
    fn reopen_fails_running_and_requeues_queued() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b, c);
        {
            let (store, _) = JobStore::open(dir.path()).unwrap();
            a = store.create(JobKind::Finetune, input(), "h").unwrap().id;
            b = store.create(JobKind::Finetune, input(), "h").unwrap().id;
            c = store.create(JobKind::Finetune, input(), "h").unwrap().id;
            store.update(&a, |j| j.status = JobStatus::Running).unwrap();
            store
                .update(&a, |j| {
                    j.status = JobStatus::Done;
                    j.results.insert("samples".into(), "a".into());
                })
                .unwrap();
            store.update(&b, |j| j.status = JobStatus::Running).unwrap();
        }
        // simulate a torn write at crash time
        let mut f = OpenOptions::new().append(true).open(dir.path().join(JOURNAL)).unwrap();
        f.write_all(b"{\"id\":\"j0").unwrap();
        drop(f);

        let (store, queued) = JobStore::open(dir.path()).unwrap();
        assert_eq!(queued, vec![c.clone()]);
        assert_eq!(store.get(&a).unwrap().status, JobStatus::Done);
        let failed = store.get(&b).unwrap();
        assert_eq!(failed.status, JobStatus::Failed);
        assert!(failed.error.is_some());
        assert_eq!(store.get(&c).unwrap().status, JobStatus::Queued);
        let d = store.create(JobKind::Interpolate, input(), "h").unwrap();
        assert_eq!(d.id, "j000004");
    }

    #[test]
    fn corrupt_journal_line_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(JOURNAL), "garbage\n{}\n").unwrap();
        assert!(JobStore::open(dir.path()).is_err());
    }
}
