//! File-backed project directories.
//!
//! A project directory is self-contained:
//!
//! ```text
//! <dir>/events.jsonl      hash-chained event log (source of truth)
//! <dir>/transcript.jsonl  recorded model responses, one per line
//! <dir>/setup.json        pending setup written by `init` (optional)
//! <dir>/dataset.jsonl     pending dataset written by `ingest` (optional)
//! ```

use std::fs::{self, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{create_codebook, Criterion, PromptTemplate};
use crate::corpus::ingest;
use crate::gateway::{GatewayError, Transcript, TranscriptEntry};
use crate::protocol::{Engine, EngineError, EventLog, ProjectConfig, ProjectSetup};
use crate::simulation::PromptSpec;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Dataset text uploaded with a project definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetUpload {
    pub id: String,
    #[serde(default)]
    pub source: String,
    /// One `{"id", "text", "meta"?}` object per line.
    pub jsonl: String,
}

/// Everything needed to start a project, in one serializable document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSpec {
    pub config: ProjectConfig,
    #[serde(default)]
    pub codebook: Option<Vec<Criterion>>,
    #[serde(default)]
    pub prompt: Option<PromptSpec>,
    #[serde(default)]
    pub dataset: Option<DatasetUpload>,
    #[serde(default)]
    pub transcript: Vec<TranscriptEntry>,
}

impl ProjectSpec {
    pub fn setup(&self) -> Result<ProjectSetup, EngineError> {
        let dataset = match &self.dataset {
            Some(d) => Some(ingest(&d.id, &d.source, d.jsonl.as_bytes())?),
            None => None,
        };
        let codebook = match &self.codebook {
            Some(c) => Some(create_codebook(c.clone())?),
            None => None,
        };
        let prompt = match &self.prompt {
            Some(p) => Some(PromptTemplate::new(&p.text, p.slots.clone(), self.config.task_kind)?),
            None => None,
        };
        Ok(ProjectSetup { config: self.config.clone(), dataset, codebook, prompt })
    }

    pub fn transcript(&self) -> Transcript {
        let mut t = Transcript::new();
        for e in &self.transcript {
            t.insert(e.clone());
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectDir {
    path: PathBuf,
}

impl ProjectDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn events_path(&self) -> PathBuf {
        self.path.join("events.jsonl")
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.path.join("transcript.jsonl")
    }

    pub fn setup_path(&self) -> PathBuf {
        self.path.join("setup.json")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.path.join("dataset.jsonl")
    }

    pub fn is_started(&self) -> bool {
        self.events_path().exists()
    }

    pub fn create_dir(&self) -> Result<(), StoreError> {
        fs::create_dir_all(&self.path).map_err(io(&self.path))
    }

    /// Replays the event log; `None` when the project has not started.
    pub fn load_engine(&self) -> Result<Option<Engine>, StoreError> {
        let path = self.events_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let log = EventLog::from_jsonl(&text)?;
        Ok(Some(Engine::from_events(log.events().to_vec())?))
    }

    /// Writes the whole event log, replacing any existing file.
    pub fn write_events(&self, engine: &Engine) -> Result<(), StoreError> {
        self.create_dir()?;
        let path = self.events_path();
        fs::write(&path, engine.log().to_jsonl()).map_err(io(&path))
    }

    /// Appends events after the first `persisted`; returns the new count.
    pub fn append_events(&self, engine: &Engine, persisted: usize) -> Result<usize, StoreError> {
        let events = engine.events();
        if events.len() <= persisted {
            return Ok(events.len());
        }
        let path = self.events_path();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io(&path))?;
        let mut buf = String::new();
        for e in &events[persisted..] {
            buf.push_str(&serde_json::to_string(e).expect("events serialize"));
            buf.push('\n');
        }
        file.write_all(buf.as_bytes()).map_err(io(&path))?;
        file.sync_data().map_err(io(&path))?;
        Ok(events.len())
    }

    /// Empty when no transcript file exists.
    pub fn load_transcript(&self) -> Result<Transcript, StoreError> {
        let path = self.transcript_path();
        if !path.exists() {
            return Ok(Transcript::new());
        }
        let file = fs::File::open(&path).map_err(io(&path))?;
        Ok(Transcript::read_jsonl(BufReader::new(file))?)
    }

    pub fn save_transcript(&self, transcript: &Transcript) -> Result<(), StoreError> {
        self.create_dir()?;
        let path = self.transcript_path();
        let mut buf = Vec::new();
        transcript.write_jsonl(&mut buf)?;
        fs::write(&path, buf).map_err(io(&path))
    }

    pub fn load_spec(&self) -> Result<Option<ProjectSpec>, StoreError> {
        let path = self.setup_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| StoreError::Format { path, reason: e.to_string() })
    }

    pub fn save_spec(&self, spec: &ProjectSpec) -> Result<(), StoreError> {
        self.create_dir()?;
        let path = self.setup_path();
        let text = serde_json::to_string_pretty(spec).expect("spec serializes");
        fs::write(&path, text + "\n").map_err(io(&path))
    }

    /// Starts a project from `spec`, writing the event log and transcript.
    pub fn start(&self, spec: &ProjectSpec, actor: &str) -> Result<Engine, StoreError> {
        if self.is_started() {
            return Err(StoreError::Engine(EngineError::InvalidConfig(format!(
                "{} already holds a started project",
                self.path.display()
            ))));
        }
        let engine = Engine::start_project(spec.setup()?, actor)?;
        let mut transcript = self.load_transcript()?;
        for e in &spec.transcript {
            transcript.insert(e.clone());
        }
        self.save_transcript(&transcript)?;
        self.write_events(&engine)?;
        Ok(engine)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::probe_generation;

    fn spec() -> ProjectSpec {
        let f = probe_generation();
        ProjectSpec {
            config: f.config.clone(),
            codebook: Some(f.codebook.clone()),
            prompt: Some(f.prompt.clone()),
            dataset: Some(DatasetUpload { id: f.dataset_id.clone(), source: "fixture".into(), jsonl: f.dataset_jsonl.clone() }),
            transcript: f.transcript.clone(),
        }
    }

    #[test]
    fn start_then_reload() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = ProjectDir::new(tmp.path().join("p"));
        let engine = dir.start(&spec(), "lead").unwrap();
        let loaded = dir.load_engine().unwrap().unwrap();
        assert_eq!(loaded.state_hash(), engine.state_hash());
        assert_eq!(dir.load_transcript().unwrap().len(), spec().transcript().len());
        assert!(matches!(dir.start(&spec(), "lead"), Err(StoreError::Engine(_))));
    }

    #[test]
    fn missing_pieces_are_incomplete() {
        let mut s = spec();
        s.dataset = None;
        assert!(matches!(s.setup().and_then(|s| Engine::start_project(s, "x")), Err(EngineError::Incomplete(_))));
    }
}
