use serde::{Deserialize, Serialize};

use super::{draw_reveal, DescriptionSet, ReviewCatalog};
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;

/// Per-cluster interview stage; only ever advances by one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    InitialReveal,
    Describing,
    ValidationReveal,
    /// Validation images shown, awaiting the team's decision.
    AwaitingDecision,
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Confirm,
    Revise { descriptions: DescriptionSet },
    Heterogeneous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ReviewEvent {
    Created {
        session_id: String,
        team_id: String,
        round: String,
        seed: u64,
        cluster_order: Vec<usize>,
    },
    InitialRevealed {
        cluster: usize,
        image_ids: Vec<String>,
    },
    DescriptionsSubmitted {
        cluster: usize,
        descriptions: DescriptionSet,
    },
    ValidationRevealed {
        cluster: usize,
        image_ids: Vec<String>,
    },
    Finalized {
        cluster: usize,
        decision: Decision,
        descriptions: DescriptionSet,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterReview {
    pub cluster: usize,
    pub stage: Stage,
    pub initial: Vec<String>,
    pub submitted: Option<DescriptionSet>,
    pub validation: Vec<String>,
    pub decision: Option<Decision>,
    pub final_descriptions: Option<DescriptionSet>,
    /// Submissions superseded by a revision, oldest first.
    pub archived: Vec<DescriptionSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub session_id: String,
    pub team_id: String,
    pub round: String,
    pub seed: u64,
    pub cluster_order: Vec<usize>,
    pub clusters: Vec<ClusterReview>,
    pub events: Vec<ReviewEvent>,
}

impl ReviewSession {
    /// New session with a seed-shuffled cluster order.
    pub fn create(session_id: &str, team_id: &str, round: &str, seed: u64, catalog: &ReviewCatalog) -> Result<Self> {
        catalog.validate()?;
        let mut order: Vec<usize> = (0..catalog.k()).collect();
        order.shuffle(&mut rng::derive(seed, "review-order", 0));
        let created = ReviewEvent::Created {
            session_id: session_id.to_owned(),
            team_id: team_id.to_owned(),
            round: round.to_owned(),
            seed,
            cluster_order: order,
        };
        Self::replay(std::slice::from_ref(&created), catalog)
    }

    /// Rebuilds a session from its event log, re-checking every transition
    /// and every recorded reveal against the catalog.
    pub fn replay(events: &[ReviewEvent], catalog: &ReviewCatalog) -> Result<Self> {
        let Some(ReviewEvent::Created {
            session_id,
            team_id,
            round,
            seed,
            cluster_order,
        }) = events.first()
        else {
            return Err(Error::Protocol("event log must start with a created event".into()));
        };
        let k = catalog.k();
        let mut sorted = cluster_order.clone();
        sorted.sort_unstable();
        if sorted != (0..k).collect::<Vec<_>>() {
            return Err(Error::Protocol(format!("cluster order is not a permutation of 0..{k}")));
        }
        let mut session = ReviewSession {
            session_id: session_id.clone(),
            team_id: team_id.clone(),
            round: round.clone(),
            seed: *seed,
            cluster_order: cluster_order.clone(),
            clusters: (0..k)
                .map(|cluster| ClusterReview {
                    cluster,
                    stage: Stage::InitialReveal,
                    initial: Vec::new(),
                    submitted: None,
                    validation: Vec::new(),
                    decision: None,
                    final_descriptions: None,
                    archived: Vec::new(),
                })
                .collect(),
            events: vec![events[0].clone()],
        };
        for e in &events[1..] {
            session.apply(e, catalog)?;
        }
        Ok(session)
    }

    pub fn cluster(&self, cluster: usize) -> Result<&ClusterReview> {
        self.clusters
            .get(cluster)
            .ok_or_else(|| Error::NotFound(format!("cluster {cluster}")))
    }

    /// First cluster in session order that is not finalized.
    pub fn next_cluster(&self) -> Option<usize> {
        self.cluster_order
            .iter()
            .copied()
            .find(|&c| self.clusters[c].stage != Stage::Finalized)
    }

    pub fn is_complete(&self) -> bool {
        self.next_cluster().is_none()
    }

    fn expect_stage(&self, cluster: usize, stage: Stage) -> Result<()> {
        let current = self.cluster(cluster)?.stage;
        if current != stage {
            return Err(Error::Protocol(format!(
                "cluster {cluster} is at stage {current:?}, not {stage:?}"
            )));
        }
        Ok(())
    }

    fn initial_draw(&self, catalog: &ReviewCatalog, cluster: usize) -> Result<Vec<String>> {
        let size = catalog.reveal_size(cluster);
        if size == 0 {
            return Err(Error::Protocol(format!(
                "cluster {cluster} has {} images, too few to review",
                catalog.clusters[cluster].len()
            )));
        }
        Ok(draw_reveal(&catalog.clusters[cluster], &[], size, self.seed, "reveal-initial", cluster))
    }

    fn validation_draw(&self, catalog: &ReviewCatalog, cluster: usize) -> Vec<String> {
        let size = catalog.reveal_size(cluster);
        draw_reveal(
            &catalog.clusters[cluster],
            &self.clusters[cluster].initial,
            size,
            self.seed,
            "reveal-validation",
            cluster,
        )
    }

    /// Validates `event` against the current state and applies it.
    pub fn apply(&mut self, event: &ReviewEvent, catalog: &ReviewCatalog) -> Result<()> {
        match event {
            ReviewEvent::Created { .. } => {
                return Err(Error::Protocol("session already created".into()));
            }
            ReviewEvent::InitialRevealed { cluster, image_ids } => {
                let c = *cluster;
                self.expect_stage(c, Stage::InitialReveal)?;
                if *image_ids != self.initial_draw(catalog, c)? {
                    return Err(Error::Protocol(format!("recorded initial reveal of cluster {c} does not replay")));
                }
                let state = &mut self.clusters[c];
                state.initial = image_ids.clone();
                state.stage = Stage::Describing;
            }
            ReviewEvent::DescriptionsSubmitted { cluster, descriptions } => {
                let c = *cluster;
                self.expect_stage(c, Stage::Describing)?;
                let d = descriptions.validated()?;
                let state = &mut self.clusters[c];
                state.submitted = Some(d);
                state.stage = Stage::ValidationReveal;
            }
            ReviewEvent::ValidationRevealed { cluster, image_ids } => {
                let c = *cluster;
                self.expect_stage(c, Stage::ValidationReveal)?;
                if *image_ids != self.validation_draw(catalog, c) {
                    return Err(Error::Protocol(format!(
                        "recorded validation reveal of cluster {c} does not replay"
                    )));
                }
                let state = &mut self.clusters[c];
                state.validation = image_ids.clone();
                state.stage = Stage::AwaitingDecision;
            }
            ReviewEvent::Finalized {
                cluster,
                decision,
                descriptions,
            } => {
                let c = *cluster;
                self.expect_stage(c, Stage::AwaitingDecision)?;
                let state = &mut self.clusters[c];
                let submitted = state.submitted.clone().expect("describing precedes validation");
                let expected = match decision {
                    Decision::Confirm => submitted.clone(),
                    Decision::Revise { descriptions } => descriptions.validated()?,
                    Decision::Heterogeneous => DescriptionSet::heterogeneous(),
                };
                if *descriptions != expected {
                    return Err(Error::Protocol(format!("final descriptions of cluster {c} do not match the decision")));
                }
                if matches!(decision, Decision::Revise { .. }) {
                    state.archived.push(submitted);
                }
                state.decision = Some(decision.clone());
                state.final_descriptions = Some(expected);
                state.stage = Stage::Finalized;
            }
        }
        self.events.push(event.clone());
        Ok(())
    }

    pub fn reveal_initial(&mut self, catalog: &ReviewCatalog, cluster: usize) -> Result<Vec<String>> {
        self.expect_stage(cluster, Stage::InitialReveal)?;
        let image_ids = self.initial_draw(catalog, cluster)?;
        self.apply(
            &ReviewEvent::InitialRevealed {
                cluster,
                image_ids: image_ids.clone(),
            },
            catalog,
        )?;
        Ok(image_ids)
    }

    pub fn submit_descriptions(
        &mut self,
        catalog: &ReviewCatalog,
        cluster: usize,
        descriptions: DescriptionSet,
    ) -> Result<()> {
        self.apply(&ReviewEvent::DescriptionsSubmitted { cluster, descriptions }, catalog)
    }

    pub fn reveal_validation(&mut self, catalog: &ReviewCatalog, cluster: usize) -> Result<Vec<String>> {
        self.expect_stage(cluster, Stage::ValidationReveal)?;
        let image_ids = self.validation_draw(catalog, cluster);
        self.apply(
            &ReviewEvent::ValidationRevealed {
                cluster,
                image_ids: image_ids.clone(),
            },
            catalog,
        )?;
        Ok(image_ids)
    }

    pub fn finalize(&mut self, catalog: &ReviewCatalog, cluster: usize, decision: Decision) -> Result<DescriptionSet> {
        self.expect_stage(cluster, Stage::AwaitingDecision)?;
        let descriptions = match &decision {
            Decision::Confirm => self.clusters[cluster].submitted.clone().expect("submitted before validation"),
            Decision::Revise { descriptions } => descriptions.validated()?,
            Decision::Heterogeneous => DescriptionSet::heterogeneous(),
        };
        self.apply(
            &ReviewEvent::Finalized {
                cluster,
                decision,
                descriptions: descriptions.clone(),
            },
            catalog,
        )?;
        Ok(descriptions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::review::Member;

    fn catalog() -> ReviewCatalog {
        let cluster = |c: usize, n: usize| {
            (0..n)
                .map(|i| Member {
                    image_id: format!("c{c}i{i}"),
                    patient_id: format!("c{c}p{i}"),
                })
                .collect()
        };
        ReviewCatalog {
            clusters: vec![cluster(0, 20), cluster(1, 30)],
            conditional: None,
        }
    }

    #[test]
    fn full_walkthrough_and_replay() {
        let cat = catalog();
        let mut s = ReviewSession::create("r1.a", "a", "r1", 11, &cat).unwrap();
        let first = s.reveal_initial(&cat, 0).unwrap();
        assert_eq!(first.len(), 10);
        assert!(s.reveal_initial(&cat, 0).is_err());
        s.submit_descriptions(&cat, 0, DescriptionSet::ranked(&["large drusen"])).unwrap();
        let second = s.reveal_validation(&cat, 0).unwrap();
        let mut all: Vec<_> = first.iter().chain(&second).cloned().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 20);
        let fin = s
            .finalize(
                &cat,
                0,
                Decision::Revise {
                    descriptions: DescriptionSet::ranked(&["drusen", "fluid"]),
                },
            )
            .unwrap();
        assert_eq!(fin.terms.len(), 2);
        assert_eq!(s.clusters[0].archived, vec![DescriptionSet::ranked(&["large drusen"])]);
        let again = ReviewSession::replay(&s.events, &cat).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn tampered_reveal_is_rejected_on_replay() {
        let cat = catalog();
        let mut s = ReviewSession::create("r1.a", "a", "r1", 11, &cat).unwrap();
        s.reveal_initial(&cat, 1).unwrap();
        let mut events = s.events.clone();
        if let ReviewEvent::InitialRevealed { image_ids, .. } = &mut events[1] {
            image_ids.swap(0, 1);
        }
        assert!(ReviewSession::replay(&events, &cat).is_err());
    }
}
