//! Property tests over the datastore: structural round-trips for generated
//! trajectories and manifest/rescan agreement.

use curator_core::datastore::{Store, StoreOptions, TrajectoryFilter};
use curator_core::types::{EditRequest, Termination, Trajectory, TrajectoryStep};
use proptest::prelude::*;

fn arb_instruction() -> impl Strategy<Value = String> {
    "[a-zA-Z][a-zA-Z0-9 ,'-]{0,30}[a-zA-Z0-9]".prop_map(|s| s)
}

fn arb_reasoning() -> impl Strategy<Value = String> {
    // Includes unicode and newlines; serialization must not care.
    proptest::string::string_regex("[\\PC&&[^\\\\\"]]{0,60}").unwrap()
}

prop_compose! {
    fn arb_trajectory(tag: &'static str)(
        idx in 0u32..1_000_000,
        n_edits in 0usize..4,
        edit_flags in proptest::collection::vec(any::<bool>(), 4),
        reasonings in proptest::collection::vec(arb_reasoning(), 5),
        instructions in proptest::collection::vec(arb_instruction(), 4),
        answered in any::<bool>(),
        final_action in any::<bool>(),
        answer in "[a-zA-Z0-9][a-zA-Z0-9 ./-]{0,15}",
        transcript_ref in proptest::option::of("[a-z0-9]{8}"),
    ) -> Trajectory {
        let mut steps = Vec::new();
        let mut image = 0usize;
        for i in 0..n_edits {
            let failed = edit_flags[i];
            steps.push(TrajectoryStep {
                t: i as u32,
                image_hash: format!("img-{idx}-{image}"),
                reasoning: reasonings[i].clone(),
                action: Some(EditRequest::new(instructions[i].clone()).expect("non-empty")),
                edit_failed: failed,
            });
            if !failed {
                image += 1;
            }
        }
        let final_t = n_edits as u32;
        steps.push(TrajectoryStep {
            t: final_t,
            image_hash: format!("img-{idx}-{image}"),
            reasoning: reasonings[4].clone(),
            action: if !answered && final_action {
                Some(EditRequest::new("one more edit").expect("non-empty"))
            } else {
                None
            },
            edit_failed: false,
        });
        Trajectory {
            id: format!("{tag}-{idx}"),
            instance_id: format!("inst-{}", idx % 17),
            steps,
            final_answer: answered.then(|| answer.clone()),
            termination: if answered { Termination::Answered } else { Termination::MaxSteps },
            transcript_ref,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn append_then_load_preserves_structure(
        trajectories in proptest::collection::vec(arb_trajectory("rt"), 1..12)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
        let mut accepted = Vec::new();
        for (i, mut t) in trajectories.into_iter().enumerate() {
            t.id = format!("{}-{i}", t.id);
            prop_assert!(t.validate().is_ok(), "generator must produce valid trajectories");
            store.append_trajectory(&t).unwrap();
            accepted.push(t);
        }
        let loaded = store.load_all(&TrajectoryFilter::all()).unwrap();
        prop_assert_eq!(loaded.trajectories, accepted);
        prop_assert!(loaded.corruptions.is_empty());
    }

    #[test]
    fn manifest_equals_rescan_after_appends(
        trajectories in proptest::collection::vec(arb_trajectory("mf"), 1..10)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
        for (i, mut t) in trajectories.into_iter().enumerate() {
            t.id = format!("{}-{i}", t.id);
            store.append_trajectory(&t).unwrap();
        }
        let manifest = store.read_manifest().unwrap();
        let rescan = store.rescan_manifest().unwrap();
        prop_assert_eq!(manifest, rescan);
    }

    #[test]
    fn digests_are_pure_functions_of_bytes(bytes in proptest::collection::vec(any::<u8>(), 1..200)) {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let store_a = Store::open(dir_a.path(), StoreOptions::default()).unwrap();
        let store_b = Store::open(dir_b.path(), StoreOptions::default()).unwrap();
        let d1 = store_a.put_image(&bytes).unwrap();
        let d2 = store_b.put_image(&bytes).unwrap();
        prop_assert_eq!(&d1, &d2);
        prop_assert_eq!(store_a.get_blob(&d1).unwrap(), bytes);
    }
}
