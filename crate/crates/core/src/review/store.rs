use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::consensus::{compute_consensus, Consensus, ConsensusRecord, CuratorRuling};
use super::session::{Decision, ReviewEvent, ReviewSession};
use super::{DescriptionSet, ReviewCatalog};
use crate::digest;
use crate::error::{Error, Result};
use crate::synth::GradingLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelatedCluster {
    pub cluster: usize,
    pub probability: f64,
}

/// Clusters sharing the queried cluster's most probable grading label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossReference {
    pub cluster: usize,
    pub label: Option<GradingLabel>,
    pub probability: Option<f64>,
    pub related: Vec<RelatedCluster>,
}

/// Sessions and curator rulings backed by one NDJSON log per session
/// (`sessions/<id>.ndjson`) and per round (`curator/<round>.ndjson`).
/// Every accepted mutation is appended before it becomes visible.
#[derive(Debug)]
pub struct ReviewStore {
    root: PathBuf,
    catalog: ReviewCatalog,
    sessions: BTreeMap<String, ReviewSession>,
    rulings: BTreeMap<String, Vec<CuratorRuling>>,
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{kind} must be 1-64 characters of [A-Za-z0-9_-], got {name:?}"
        )))
    }
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Corrupt {
                path: path.to_owned(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

fn logs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "ndjson") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl ReviewStore {
    /// Opens (creating if needed) the store under `root` and replays every
    /// log against `catalog`.
    pub fn open(root: &Path, catalog: ReviewCatalog) -> Result<Self> {
        catalog.validate()?;
        let sessions_dir = root.join("sessions");
        let curator_dir = root.join("curator");
        for d in [&sessions_dir, &curator_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let mut sessions = BTreeMap::new();
        for path in logs_in(&sessions_dir)? {
            let events: Vec<ReviewEvent> = read_lines(&path)?;
            let s = ReviewSession::replay(&events, &catalog).map_err(|e| Error::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            sessions.insert(s.session_id.clone(), s);
        }
        let mut rulings = BTreeMap::new();
        for path in logs_in(&curator_dir)? {
            let round = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
            rulings.insert(round, read_lines(&path)?);
        }
        Ok(Self {
            root: root.to_owned(),
            catalog,
            sessions,
            rulings,
        })
    }

    pub fn catalog(&self) -> &ReviewCatalog {
        &self.catalog
    }

    pub fn sessions(&self) -> impl Iterator<Item = &ReviewSession> {
        self.sessions.values()
    }

    pub fn session(&self, id: &str) -> Result<&ReviewSession> {
        self.sessions
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    fn session_log(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.ndjson"))
    }

    fn round_sessions(&self, round: &str) -> Vec<&ReviewSession> {
        self.sessions.values().filter(|s| s.round == round).collect()
    }

    /// Starts the single session of `team_id` in `round`; a round admits
    /// two teams. Without a seed, one is derived from the ids.
    pub fn create_session(&mut self, team_id: &str, round: &str, seed: Option<u64>) -> Result<&ReviewSession> {
        check_name("team id", team_id)?;
        check_name("round", round)?;
        let existing = self.round_sessions(round);
        if existing.iter().any(|s| s.team_id == team_id) {
            return Err(Error::Protocol(format!("team {team_id} already has a session in round {round}")));
        }
        if existing.len() >= 2 {
            return Err(Error::Protocol(format!("round {round} already has two teams")));
        }
        let id = format!("{round}.{team_id}");
        let seed = seed.unwrap_or_else(|| {
            let h = digest::sha256(id.as_bytes());
            u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
        });
        let session = ReviewSession::create(&id, team_id, round, seed, &self.catalog)?;
        let path = self.session_log(&id);
        if path.exists() {
            return Err(Error::Protocol(format!("session log {} already exists", path.display())));
        }
        append_line(&path, &session.events[0])?;
        self.sessions.insert(id.clone(), session);
        Ok(&self.sessions[&id])
    }

    /// Applies `op` to a copy of the session and commits it once the new
    /// event is durable.
    fn mutate<T>(&mut self, id: &str, op: impl FnOnce(&mut ReviewSession, &ReviewCatalog) -> Result<T>) -> Result<T> {
        let mut draft = self.session(id)?.clone();
        let before = draft.events.len();
        let out = op(&mut draft, &self.catalog)?;
        let path = self.session_log(id);
        for e in &draft.events[before..] {
            append_line(&path, e)?;
        }
        self.sessions.insert(id.to_owned(), draft);
        Ok(out)
    }

    pub fn reveal_initial(&mut self, id: &str, cluster: usize) -> Result<Vec<String>> {
        self.mutate(id, |s, c| s.reveal_initial(c, cluster))
    }

    pub fn submit_descriptions(&mut self, id: &str, cluster: usize, d: DescriptionSet) -> Result<()> {
        self.mutate(id, |s, c| s.submit_descriptions(c, cluster, d))
    }

    pub fn reveal_validation(&mut self, id: &str, cluster: usize) -> Result<Vec<String>> {
        self.mutate(id, |s, c| s.reveal_validation(c, cluster))
    }

    pub fn finalize(&mut self, id: &str, cluster: usize, decision: Decision) -> Result<DescriptionSet> {
        self.mutate(id, |s, c| s.finalize(c, cluster, decision))
    }

    pub fn consensus(&self, round: &str) -> Result<Vec<ConsensusRecord>> {
        let sessions = self.round_sessions(round);
        let rulings = self.rulings.get(round).map_or(&[][..], Vec::as_slice);
        compute_consensus(&sessions, rulings)
    }

    /// Records a curator decision; later rulings on a cluster supersede
    /// earlier ones.
    pub fn rule(&mut self, round: &str, ruling: CuratorRuling) -> Result<Vec<ConsensusRecord>> {
        check_name("round", round)?;
        let records = self.consensus(round)?;
        let record = records
            .get(ruling.cluster)
            .ok_or_else(|| Error::NotFound(format!("cluster {}", ruling.cluster)))?;
        if ruling.consensus == Consensus::Pending {
            return Err(Error::Protocol("a ruling must resolve the cluster".into()));
        }
        if record.team_a_final.heterogeneous && record.team_b_final.heterogeneous {
            return Err(Error::Protocol(format!(
                "cluster {} is heterogeneous by both teams and takes no ruling",
                ruling.cluster
            )));
        }
        let path = self.root.join("curator").join(format!("{round}.ndjson"));
        append_line(&path, &ruling)?;
        self.rulings.entry(round.to_owned()).or_default().push(ruling);
        self.consensus(round)
    }

    /// Clusters whose argmax grading label (lowest label index on ties)
    /// matches that of `cluster`.
    pub fn cross_reference(&self, cluster: usize) -> Result<CrossReference> {
        if cluster >= self.catalog.k() {
            return Err(Error::NotFound(format!("cluster {cluster}")));
        }
        let Some(matrix) = &self.catalog.conditional else {
            return Err(Error::MissingStep {
                what: "cluster-by-grading matrix".into(),
                step: "stats".into(),
            });
        };
        let argmax = |c: usize| -> Option<(usize, f64)> {
            let row = matrix.rows[c].as_ref()?;
            let mut best = (0, row[0]);
            for (i, &p) in row.iter().enumerate() {
                if p > best.1 {
                    best = (i, p);
                }
            }
            Some(best)
        };
        let Some((label, p)) = argmax(cluster) else {
            return Ok(CrossReference {
                cluster,
                label: None,
                probability: None,
                related: Vec::new(),
            });
        };
        let related = (0..self.catalog.k())
            .filter(|&c| c != cluster)
            .filter_map(|c| argmax(c).filter(|&(l, _)| l == label).map(|(_, q)| RelatedCluster { cluster: c, probability: q }))
            .collect();
        Ok(CrossReference {
            cluster,
            label: Some(matrix.labels[label]),
            probability: Some(p),
            related,
        })
    }
}
