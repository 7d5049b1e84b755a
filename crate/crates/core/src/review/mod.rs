//! Two-team cluster review protocol: staged reveals, ranked descriptions,
//! validation on unseen images and cross-team consensus, persisted as
//! append-only NDJSON event logs.

mod consensus;
mod session;
mod store;

pub use consensus::{compute_consensus, normalize_term, Consensus, ConsensusRecord, CuratorRuling};
pub use session::{ClusterReview, Decision, ReviewEvent, ReviewSession, Stage};
pub use store::{CrossReference, ReviewStore};

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cluster::ConditionalMatrix;
use crate::error::{Error, Result};
use crate::rng;

/// Images shown per reveal when the cluster is large enough.
pub const REVEAL_SIZE: usize = 10;
/// Images and distinct patients a cluster needs for full-size,
/// distinct-patient reveals.
pub const MIN_CLUSTER_IMAGES: usize = 20;
pub const MAX_TERMS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub image_id: String,
    pub patient_id: String,
}

/// Read-only inputs of a review round: members of each VA-ordered cluster
/// and, optionally, the cluster-by-grading conditional matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewCatalog {
    pub clusters: Vec<Vec<Member>>,
    pub conditional: Option<ConditionalMatrix>,
}

impl ReviewCatalog {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::invalid("review catalog has no clusters"));
        }
        let mut seen = HashSet::new();
        for m in self.clusters.iter().flatten() {
            if m.image_id.is_empty() || m.patient_id.is_empty() {
                return Err(Error::invalid("catalog member with empty id"));
            }
            if !seen.insert(m.image_id.as_str()) {
                return Err(Error::invalid(format!("image {} is in more than one cluster", m.image_id)));
            }
        }
        if let Some(c) = &self.conditional {
            if c.rows.len() != self.k() {
                return Err(Error::Shape {
                    expected: format!("{} conditional rows", self.k()),
                    actual: c.rows.len().to_string(),
                });
            }
        }
        Ok(())
    }

    /// Images per reveal: full size for clusters meeting the minimum,
    /// otherwise `min(10, floor(n/2))` so both stages fit.
    pub fn reveal_size(&self, cluster: usize) -> usize {
        let members = &self.clusters[cluster];
        if is_full_size(members) {
            REVEAL_SIZE
        } else {
            REVEAL_SIZE.min(members.len() / 2)
        }
    }
}

fn distinct_patients(members: &[Member]) -> usize {
    members.iter().map(|m| m.patient_id.as_str()).collect::<HashSet<_>>().len()
}

fn is_full_size(members: &[Member]) -> bool {
    members.len() >= MIN_CLUSTER_IMAGES && distinct_patients(members) >= MIN_CLUSTER_IMAGES
}

/// Draws `size` images from `members` minus `exclude`: a shuffled pass
/// takes one image per unseen patient, then, only if that falls short,
/// repeats patients. Deterministic in `(seed, label, cluster)`.
pub fn draw_reveal(
    members: &[Member],
    exclude: &[String],
    size: usize,
    seed: u64,
    label: &str,
    cluster: usize,
) -> Vec<String> {
    let excluded: HashSet<&str> = exclude.iter().map(String::as_str).collect();
    let mut pool: Vec<&Member> = members.iter().filter(|m| !excluded.contains(m.image_id.as_str())).collect();
    pool.shuffle(&mut rng::derive(seed, label, cluster as u64));
    let mut patients = HashSet::new();
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::with_capacity(size);
    for (i, m) in pool.iter().enumerate() {
        if out.len() == size {
            break;
        }
        if patients.insert(m.patient_id.as_str()) {
            taken[i] = true;
            out.push(m.image_id.clone());
        }
    }
    if out.len() < size {
        log::warn!(
            "cluster {cluster}: only {} distinct patients available for a {size}-image reveal",
            out.len()
        );
        for (i, m) in pool.iter().enumerate() {
            if out.len() == size {
                break;
            }
            if !taken[i] {
                out.push(m.image_id.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedTerm {
    /// 1 is the most prevalent feature.
    pub rank: u8,
    pub term: String,
}

/// Up to three ranked feature terms, or the heterogeneous flag alone.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DescriptionSet {
    #[serde(default)]
    pub terms: Vec<RankedTerm>,
    #[serde(default)]
    pub heterogeneous: bool,
}

impl DescriptionSet {
    pub fn heterogeneous() -> Self {
        Self {
            terms: Vec::new(),
            heterogeneous: true,
        }
    }

    /// Terms in ranks 1, 2, 3 order.
    pub fn ranked(terms: &[&str]) -> Self {
        Self {
            terms: terms
                .iter()
                .enumerate()
                .map(|(i, t)| RankedTerm {
                    rank: i as u8 + 1,
                    term: (*t).to_owned(),
                })
                .collect(),
            heterogeneous: false,
        }
    }

    /// Checks the 1-3 terms XOR heterogeneous rule and returns the set
    /// with terms sorted by rank.
    pub fn validated(&self) -> Result<Self> {
        if self.heterogeneous {
            if !self.terms.is_empty() {
                return Err(Error::invalid("a heterogeneous cluster takes no terms"));
            }
            return Ok(self.clone());
        }
        if self.terms.is_empty() {
            return Err(Error::invalid(
                "a description needs 1 to 3 ranked terms or the heterogeneous flag",
            ));
        }
        if self.terms.len() > MAX_TERMS {
            return Err(Error::Invalid(format!(
                "at most {MAX_TERMS} ranked terms are allowed, got {}",
                self.terms.len()
            )));
        }
        let mut ranks = HashSet::new();
        for t in &self.terms {
            if !(1..=MAX_TERMS as u8).contains(&t.rank) {
                return Err(Error::Invalid(format!("rank {} is outside 1..={MAX_TERMS}", t.rank)));
            }
            if !ranks.insert(t.rank) {
                return Err(Error::Invalid(format!("rank {} is used twice", t.rank)));
            }
            if t.term.trim().is_empty() {
                return Err(Error::invalid("terms must be non-empty"));
            }
        }
        let mut out = self.clone();
        out.terms.sort_by_key(|t| t.rank);
        Ok(out)
    }

    pub fn top_term(&self) -> Option<&str> {
        self.terms.iter().min_by_key(|t| t.rank).map(|t| t.term.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn members(n_images: usize, n_patients: usize) -> Vec<Member> {
        (0..n_images)
            .map(|i| Member {
                image_id: format!("img{i}"),
                patient_id: format!("p{}", i % n_patients),
            })
            .collect()
    }

    #[test]
    fn description_rules() {
        assert!(DescriptionSet::ranked(&["a", "b", "c"]).validated().is_ok());
        let err = DescriptionSet::ranked(&["a", "b", "c", "d"]).validated().unwrap_err();
        assert!(err.to_string().contains("at most 3"));
        assert!(DescriptionSet::default().validated().is_err());
        assert!(DescriptionSet::heterogeneous().validated().is_ok());
        let mut both = DescriptionSet::ranked(&["a"]);
        both.heterogeneous = true;
        assert!(both.validated().is_err());
        assert!(DescriptionSet::ranked(&["  "]).validated().is_err());
        let dup = DescriptionSet {
            terms: vec![
                RankedTerm { rank: 1, term: "a".into() },
                RankedTerm { rank: 1, term: "b".into() },
            ],
            heterogeneous: false,
        };
        assert!(dup.validated().is_err());
        let unordered = DescriptionSet {
            terms: vec![
                RankedTerm { rank: 2, term: "b".into() },
                RankedTerm { rank: 1, term: "a".into() },
            ],
            heterogeneous: false,
        };
        assert_eq!(unordered.validated().unwrap().terms[0].term, "a");
        assert_eq!(unordered.top_term(), Some("a"));
    }

    #[test]
    fn reveal_is_distinct_patients_and_deterministic() {
        let m = members(60, 30);
        let a = draw_reveal(&m, &[], 10, 5, "initial", 2);
        assert_eq!(a, draw_reveal(&m, &[], 10, 5, "initial", 2));
        let patients: HashSet<_> = a
            .iter()
            .map(|id| &m.iter().find(|x| &x.image_id == id).unwrap().patient_id)
            .collect();
        assert_eq!(patients.len(), 10);
    }

    #[test]
    fn reveal_sizes() {
        let catalog = ReviewCatalog {
            clusters: vec![members(20, 20), members(19, 19), members(40, 5), members(3, 3)],
            conditional: None,
        };
        assert_eq!(catalog.reveal_size(0), 10);
        assert_eq!(catalog.reveal_size(1), 9);
        assert_eq!(catalog.reveal_size(2), 10);
        assert_eq!(catalog.reveal_size(3), 1);
    }
}
