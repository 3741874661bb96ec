//! Line-delimited run index. Every status change appends one record under an
//! exclusive file lock; the latest record of a run id is its current state.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Running,
    Done,
    Failed,
}

impl Status {
    fn rank(self) -> u8 {
        match self {
            Status::Pending => 0,
            Status::Running => 1,
            Status::Done | Status::Failed => 2,
        }
    }

    pub fn is_final(self) -> bool {
        self.rank() == 2
    }

    /// Within one attempt statuses only move forward: pending → running → done | failed.
    pub fn can_become(self, next: Status) -> bool {
        next.rank() > self.rank() || (self.is_final() && next == Status::Pending)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub status: Status,
    pub out_dir: PathBuf,
    /// Seconds since the Unix epoch.
    pub created: f64,
    pub updated: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub struct Registry {
    path: PathBuf,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl Registry {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(Self { path: path.to_path_buf() })
    }

    fn parse(reader: impl BufRead) -> Result<Vec<Entry>> {
        let mut out = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).with_context(|| format!("registry line {}", n + 1))?);
        }
        Ok(out)
    }

    /// Every record in append order.
    pub fn history(&self) -> Result<Vec<Entry>> {
        match fs::File::open(&self.path) {
            Ok(f) => Self::parse(BufReader::new(f)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e).with_context(|| format!("reading {}", self.path.display())),
        }
    }

    pub fn latest(&self, run_id: &str) -> Result<Option<Entry>> {
        Ok(self.history()?.into_iter().rev().find(|e| e.run_id == run_id))
    }

    /// Moves `run_id` to `status`, checking the transition against the latest
    /// record while holding the lock.
    pub fn transition(
        &self,
        run_id: &str,
        command: &str,
        config_hash: &str,
        out_dir: &Path,
        status: Status,
        error: Option<String>,
    ) -> Result<Entry> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&self.path)
            .with_context(|| format!("opening {}", self.path.display()))?;
        file.lock().context("locking the run registry")?;
        file.seek(SeekFrom::Start(0))?;
        let prev = Self::parse(BufReader::new(&file))?
            .into_iter()
            .rev()
            .find(|e| e.run_id == run_id);
        if let Some(p) = &prev {
            if !p.status.can_become(status) {
                bail!("run {run_id}: status cannot move from {:?} to {:?}", p.status, status);
            }
        } else if status != Status::Pending {
            bail!("run {run_id}: a new run must start as pending");
        }
        let t = now();
        let created = match &prev {
            Some(p) if status != Status::Pending => p.created,
            _ => t,
        };
        let entry = Entry {
            run_id: run_id.to_string(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            status,
            out_dir: out_dir.to_path_buf(),
            created,
            updated: t,
            error,
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.flush()?;
        file.unlock()?;
        Ok(entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions_are_monotone() {
        use Status::*;
        assert!(Pending.can_become(Running));
        assert!(Running.can_become(Done));
        assert!(Running.can_become(Failed));
        assert!(Pending.can_become(Failed));
        assert!(!Running.can_become(Pending));
        assert!(!Done.can_become(Running));
        assert!(!Done.can_become(Failed));
        // a forced rerun opens a new attempt
        assert!(Done.can_become(Pending));
        assert!(Failed.can_become(Pending));
    }

    #[test]
    fn latest_record_wins() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(&dir.path().join("registry.jsonl")).unwrap();
        let out = dir.path().join("run");
        assert!(reg.transition("a", "pretrain", "h", &out, Status::Running, None).is_err());
        reg.transition("a", "pretrain", "h", &out, Status::Pending, None).unwrap();
        reg.transition("a", "pretrain", "h", &out, Status::Running, None).unwrap();
        assert!(reg.transition("a", "pretrain", "h", &out, Status::Pending, None).is_err());
        reg.transition("b", "eval", "g", &out, Status::Pending, None).unwrap();
        let done = reg.transition("a", "pretrain", "h", &out, Status::Done, None).unwrap();
        let latest = reg.latest("a").unwrap().unwrap();
        assert_eq!(latest, done);
        assert_eq!(reg.latest("b").unwrap().unwrap().status, Status::Pending);
        assert_eq!(reg.history().unwrap().len(), 4);
        assert!(reg.latest("zzz").unwrap().is_none());
    }
}
