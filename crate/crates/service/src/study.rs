//! Study material loaded from the data directory.
//!
//! ```text
//! tokens.txt           one participant token per line, optionally followed
//!                      by a participant id (default p001, p002, ...)
//! training.csv         image_id,tier,lo,hi
//! pyramids/index.csv   image_id,tier,width,height,file
//! study.json           optional {seed, tiers, batch_mode, images}
//! sessions.jsonl       written: session event log
//! ratings.jsonl        written: accepted rating events
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use xres_core::dataset::TierName;
use xres_core::protocol::{generate_batches, load_training, Batch, BatchMode, TrainingItem};
use xres_core::rng;
use xres_core::store::{self, IndexEntry};

use crate::ServiceError;

pub const TOKENS_FILE: &str = "tokens.txt";
pub const TRAINING_FILE: &str = "training.csv";
pub const PYRAMID_DIR: &str = "pyramids";
pub const STUDY_FILE: &str = "study.json";
pub const SESSIONS_LOG: &str = "sessions.jsonl";
pub const RATINGS_LOG: &str = "ratings.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub seed: u64,
    pub tiers: Vec<TierName>,
    pub batch_mode: BatchMode,
    /// Main-phase images; defaults to every indexed image available at all
    /// tiers that is not a training image.
    pub images: Option<Vec<String>>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            seed: 0,
            tiers: TierName::ALL.to_vec(),
            batch_mode: BatchMode::Uneven,
            images: None,
        }
    }
}

#[derive(Debug)]
pub struct Participant {
    pub token: String,
    pub id: String,
    pub index: usize,
}

#[derive(Debug)]
pub struct Study {
    pub dir: PathBuf,
    pub config: StudyConfig,
    pub participants: BTreeMap<String, Participant>,
    pub training: Vec<TrainingItem>,
    pub images: BTreeMap<(String, TierName), IndexEntry>,
    pub main_images: Vec<String>,
}

fn bad(m: impl Into<String>) -> ServiceError {
    ServiceError::Study(m.into())
}

impl Study {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let dir = dir.as_ref().to_path_buf();
        let config: StudyConfig = match fs::read(dir.join(STUDY_FILE)) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| bad(format!("{STUDY_FILE}: {e}")))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => StudyConfig::default(),
            Err(e) => return Err(e.into()),
        };
        let mut participants = BTreeMap::new();
        let tokens = fs::read_to_string(dir.join(TOKENS_FILE))?;
        for line in tokens.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let mut parts = line.split_whitespace();
            let token = parts.next().unwrap_or_default().to_string();
            let index = participants.len();
            let id = parts.next().map(str::to_string).unwrap_or_else(|| format!("p{:03}", index + 1));
            if participants.insert(token.clone(), Participant { token, id, index }).is_some() {
                return Err(bad(format!("duplicate token on line {}", index + 1)));
            }
        }
        let training = load_training(dir.join(TRAINING_FILE)).map_err(|e| bad(format!("{TRAINING_FILE}: {e}")))?;
        let images: BTreeMap<(String, TierName), IndexEntry> = store::read_index(&dir.join(PYRAMID_DIR))
            .map_err(|e| bad(format!("pyramid index: {e}")))?
            .into_iter()
            .map(|e| ((e.image_id.clone(), e.tier), e))
            .collect();
        for t in &training {
            if !images.contains_key(&(t.image_id.clone(), t.tier)) {
                return Err(bad(format!("training image {}@{} is not in the pyramid index", t.image_id, t.tier)));
            }
        }
        let main_images = match &config.images {
            Some(list) => {
                for id in list {
                    if let Some(t) = config.tiers.iter().find(|&&t| !images.contains_key(&(id.clone(), t))) {
                        return Err(bad(format!("study image {id} has no {t} tier")));
                    }
                }
                list.clone()
            }
            None => {
                let training_ids: BTreeSet<&str> = training.iter().map(|t| t.image_id.as_str()).collect();
                let ids: BTreeSet<&str> = images.keys().map(|(id, _)| id.as_str()).collect();
                ids.into_iter()
                    .filter(|id| !training_ids.contains(id))
                    .filter(|id| config.tiers.iter().all(|&t| images.contains_key(&(id.to_string(), t))))
                    .map(str::to_string)
                    .collect()
            }
        };
        Ok(Study {
            dir,
            config,
            participants,
            training,
            images,
            main_images,
        })
    }

    /// Each participant gets an independent batch order.
    pub fn batches_for(&self, participant: &Participant) -> Result<Vec<Batch>, ServiceError> {
        let seed = rng::derive_seed(self.config.seed, participant.index as u64);
        Ok(generate_batches(&self.main_images, &self.config.tiers, seed, self.config.batch_mode)?)
    }

    pub fn image_path(&self, image_id: &str, tier: TierName) -> Option<(PathBuf, &IndexEntry)> {
        self.images
            .get(&(image_id.to_string(), tier))
            .map(|e| (self.dir.join(PYRAMID_DIR).join(&e.file), e))
    }
}

/// Append-only JSON-lines files; each record is written with one call.
#[derive(Debug)]
pub struct Journal {
    sessions: Mutex<File>,
    ratings: Mutex<File>,
}

impl Journal {
    pub fn open(dir: &Path) -> Result<Self, ServiceError> {
        let open = |name: &str| OpenOptions::new().create(true).append(true).open(dir.join(name));
        Ok(Journal {
            sessions: Mutex::new(open(SESSIONS_LOG)?),
            ratings: Mutex::new(open(RATINGS_LOG)?),
        })
    }

    fn append<T: Serialize>(file: &Mutex<File>, records: &[T]) -> Result<(), ServiceError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let mut f = file.lock().expect("journal lock");
        f.write_all(&buf)?;
        f.flush()?;
        Ok(())
    }

    pub fn sessions<T: Serialize>(&self, records: &[T]) -> Result<(), ServiceError> {
        Self::append(&self.sessions, records)
    }

    pub fn ratings<T: Serialize>(&self, records: &[T]) -> Result<(), ServiceError> {
        Self::append(&self.ratings, records)
    }
}
