use std::collections::HashSet;

use biomarker_core::review::{
    Consensus, CuratorRuling, Decision, DescriptionSet, Member, ReviewCatalog, ReviewSession, ReviewStore, Stage,
};
use proptest::prelude::*;

fn catalog(sizes: &[(usize, usize)]) -> ReviewCatalog {
    ReviewCatalog {
        clusters: sizes
            .iter()
            .enumerate()
            .map(|(c, &(n, patients))| {
                (0..n)
                    .map(|i| Member {
                        image_id: format!("c{c}_i{i}"),
                        patient_id: format!("c{c}_p{}", i % patients),
                    })
                    .collect()
            })
            .collect(),
        conditional: None,
    }
}

fn patient_of<'a>(cat: &'a ReviewCatalog, cluster: usize, id: &str) -> &'a str {
    &cat.clusters[cluster].iter().find(|m| m.image_id == id).unwrap().patient_id
}

fn run_cluster(store: &mut ReviewStore, id: &str, cluster: usize, d: DescriptionSet, decision: Decision) {
    store.reveal_initial(id, cluster).unwrap();
    store.submit_descriptions(id, cluster, d).unwrap();
    store.reveal_validation(id, cluster).unwrap();
    store.finalize(id, cluster, decision).unwrap();
}

#[test]
fn state_survives_reopen_and_consensus_partitions() {
    let dir = tempfile::tempdir().unwrap();
    let cat = catalog(&[(25, 25), (30, 30), (12, 12)]);
    let mut store = ReviewStore::open(dir.path(), cat.clone()).unwrap();
    let a = store.create_session("team-a", "round1", Some(1)).unwrap().session_id.clone();
    let b = store.create_session("team-b", "round1", Some(2)).unwrap().session_id.clone();
    assert!(store.create_session("team-a", "round1", None).is_err());
    assert!(store.create_session("team-c", "round1", None).is_err());
    assert!(store.consensus("round1").is_err());

    run_cluster(&mut store, &a, 0, DescriptionSet::ranked(&["Large drusen", "DLS"]), Decision::Confirm);
    run_cluster(&mut store, &b, 0, DescriptionSet::ranked(&["large  drusen"]), Decision::Confirm);
    run_cluster(&mut store, &a, 1, DescriptionSet::ranked(&["subretinal fluid"]), Decision::Confirm);
    run_cluster(&mut store, &b, 1, DescriptionSet::ranked(&["intraretinal fluid"]), Decision::Confirm);
    run_cluster(&mut store, &a, 2, DescriptionSet::heterogeneous(), Decision::Heterogeneous);
    // Partial progress on the last cluster must persist across a reopen.
    store.reveal_initial(&b, 2).unwrap();

    let before = store.session(&b).unwrap().clone();
    drop(store);
    let mut store = ReviewStore::open(dir.path(), cat).unwrap();
    assert_eq!(store.session(&b).unwrap(), &before);
    assert_eq!(store.session(&b).unwrap().clusters[2].stage, Stage::Describing);
    store.submit_descriptions(&b, 2, DescriptionSet::heterogeneous()).unwrap();
    store.reveal_validation(&b, 2).unwrap();
    store.finalize(&b, 2, Decision::Heterogeneous).unwrap();

    let records = store.consensus("round1").unwrap();
    let kinds: Vec<_> = records.iter().map(|r| r.consensus).collect();
    assert_eq!(kinds, vec![Consensus::Agree, Consensus::Pending, Consensus::Heterogeneous]);

    let ruled = store
        .rule("round1", CuratorRuling { cluster: 1, consensus: Consensus::Disagree, note: "different compartments".into() })
        .unwrap();
    assert_eq!(ruled[1].consensus, Consensus::Disagree);
    assert!(store
        .rule("round1", CuratorRuling { cluster: 2, consensus: Consensus::Agree, note: String::new() })
        .is_err());
    drop(store);
    let store = ReviewStore::open(dir.path(), catalog(&[(25, 25), (30, 30), (12, 12)])).unwrap();
    assert_eq!(store.consensus("round1").unwrap()[1].curator_note.as_deref(), Some("different compartments"));
}

#[test]
fn exactly_twenty_images_split_into_complementary_reveals() {
    let cat = catalog(&[(20, 20)]);
    let mut s = ReviewSession::create("r.t", "t", "r", 3, &cat).unwrap();
    let first = s.reveal_initial(&cat, 0).unwrap();
    s.submit_descriptions(&cat, 0, DescriptionSet::ranked(&["x"])).unwrap();
    let second = s.reveal_validation(&cat, 0).unwrap();
    let union: HashSet<_> = first.iter().chain(&second).collect();
    assert_eq!(union.len(), 20);
}

#[derive(Debug, Clone, Copy)]
enum Action {
    RevealInitial,
    Submit,
    RevealValidation,
    Finalize,
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        Just(Action::RevealInitial),
        Just(Action::Submit),
        Just(Action::RevealValidation),
        Just(Action::Finalize),
    ]
}

fn required(a: Action) -> Stage {
    match a {
        Action::RevealInitial => Stage::InitialReveal,
        Action::Submit => Stage::Describing,
        Action::RevealValidation => Stage::ValidationReveal,
        Action::Finalize => Stage::AwaitingDecision,
    }
}

fn successor(s: Stage) -> Stage {
    match s {
        Stage::InitialReveal => Stage::Describing,
        Stage::Describing => Stage::ValidationReveal,
        Stage::ValidationReveal => Stage::AwaitingDecision,
        Stage::AwaitingDecision | Stage::Finalized => Stage::Finalized,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stage_machine_accepts_only_legal_transitions(
        seed in any::<u64>(),
        actions in prop::collection::vec((action(), 0usize..3), 0..60),
    ) {
        let cat = catalog(&[(24, 24), (15, 6), (40, 12)]);
        let mut s = ReviewSession::create("r.t", "t", "r", seed, &cat).unwrap();
        let mut model = [Stage::InitialReveal; 3];
        for (a, c) in actions {
            let before = s.clusters[c].stage;
            let ok = match a {
                Action::RevealInitial => s.reveal_initial(&cat, c).is_ok(),
                Action::Submit => s.submit_descriptions(&cat, c, DescriptionSet::ranked(&["t"])).is_ok(),
                Action::RevealValidation => s.reveal_validation(&cat, c).is_ok(),
                Action::Finalize => s.finalize(&cat, c, Decision::Confirm).is_ok(),
            };
            prop_assert_eq!(ok, model[c] == required(a));
            if ok {
                model[c] = successor(model[c]);
                prop_assert_eq!(s.clusters[c].stage, successor(before));
            } else {
                prop_assert_eq!(s.clusters[c].stage, before);
            }
        }
        prop_assert_eq!(ReviewSession::replay(&s.events, &cat).unwrap(), s);
    }

    #[test]
    fn reveals_are_distinct_patient_and_disjoint(
        seed in any::<u64>(),
        n in 20usize..80,
        extra_patients in 0usize..40,
    ) {
        let patients = (20 + extra_patients).min(n);
        let cat = catalog(&[(n, patients)]);
        let mut s = ReviewSession::create("r.t", "t", "r", seed, &cat).unwrap();
        let first = s.reveal_initial(&cat, 0).unwrap();
        prop_assert_eq!(first.len(), 10);
        let ps: HashSet<_> = first.iter().map(|id| patient_of(&cat, 0, id)).collect();
        prop_assert_eq!(ps.len(), 10);
        s.submit_descriptions(&cat, 0, DescriptionSet::heterogeneous()).unwrap();
        let second = s.reveal_validation(&cat, 0).unwrap();
        prop_assert_eq!(second.len(), 10);
        let a: HashSet<_> = first.iter().collect();
        prop_assert!(second.iter().all(|id| !a.contains(id)));
        let mut again = ReviewSession::create("r.t", "t", "r", seed, &cat).unwrap();
        prop_assert_eq!(again.reveal_initial(&cat, 0).unwrap(), first);
    }
}
