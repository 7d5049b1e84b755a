use serde::{Deserialize, Serialize};

use super::{DescriptionSet, ReviewSession};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consensus {
    Agree,
    Disagree,
    Heterogeneous,
    /// Top-ranked terms differ and no curator has ruled yet.
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuratorRuling {
    pub cluster: usize,
    pub consensus: Consensus,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusRecord {
    pub cluster: usize,
    pub team_a: String,
    pub team_b: String,
    pub team_a_final: DescriptionSet,
    pub team_b_final: DescriptionSet,
    pub consensus: Consensus,
    pub curator_note: Option<String>,
}

/// Case-folds and collapses internal whitespace.
pub fn normalize_term(term: &str) -> String {
    term.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn automatic(a: &DescriptionSet, b: &DescriptionSet) -> Consensus {
    if a.heterogeneous && b.heterogeneous {
        return Consensus::Heterogeneous;
    }
    match (a.top_term(), b.top_term()) {
        (Some(x), Some(y)) if normalize_term(x) == normalize_term(y) => Consensus::Agree,
        _ => Consensus::Pending,
    }
}

/// One record per cluster for a round with exactly two finalized teams,
/// ordered by team id. A curator ruling overrides the automatic outcome
/// except when both teams flagged the cluster heterogeneous.
pub fn compute_consensus(sessions: &[&ReviewSession], rulings: &[CuratorRuling]) -> Result<Vec<ConsensusRecord>> {
    if sessions.len() != 2 {
        return Err(Error::Protocol(format!(
            "consensus needs two team sessions, found {}",
            sessions.len()
        )));
    }
    let (a, b) = if sessions[0].team_id <= sessions[1].team_id {
        (sessions[0], sessions[1])
    } else {
        (sessions[1], sessions[0])
    };
    if a.clusters.len() != b.clusters.len() {
        return Err(Error::Protocol("team sessions cover different cluster sets".into()));
    }
    for s in [a, b] {
        if let Some(c) = s.next_cluster() {
            return Err(Error::Protocol(format!(
                "team {} has not finalized cluster {c}",
                s.team_id
            )));
        }
    }
    Ok((0..a.clusters.len())
        .map(|c| {
            let fa = a.clusters[c].final_descriptions.clone().expect("finalized");
            let fb = b.clusters[c].final_descriptions.clone().expect("finalized");
            let auto = automatic(&fa, &fb);
            let ruling = rulings.iter().rev().find(|r| r.cluster == c);
            let (consensus, curator_note) = match ruling {
                Some(r) if auto != Consensus::Heterogeneous => (r.consensus, Some(r.note.clone())),
                _ => (auto, None),
            };
            ConsensusRecord {
                cluster: c,
                team_a: a.team_id.clone(),
                team_b: b.team_id.clone(),
                team_a_final: fa,
                team_b_final: fb,
                consensus,
                curator_note,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_term("  Large   Drusen "), "large drusen");
    }

    #[test]
    fn automatic_cases() {
        let d = |t: &str| DescriptionSet::ranked(&[t]);
        assert_eq!(automatic(&d("large drusen"), &d("Large  drusen")), Consensus::Agree);
        assert_eq!(automatic(&d("subretinal fluid"), &d("intraretinal fluid")), Consensus::Pending);
        let h = DescriptionSet::heterogeneous();
        assert_eq!(automatic(&h, &h), Consensus::Heterogeneous);
        assert_eq!(automatic(&h, &d("x")), Consensus::Pending);
    }
}
