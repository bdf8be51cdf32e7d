use proptest::prelude::*;
use ted_core::eval::mean_at_k;
use ted_core::gateway::{ChatResponse, Usage};
use ted_core::store::{parse_serialized, select_top, Budgets};
use ted_core::trajectory::{answers_equal, extract_answer, Answer};
use ted_core::{CompressionAction, ExperienceId, ExperienceStore, ModelRole, TokenLedger, UpdateAction};

#[derive(Debug, Clone)]
enum Op {
    Add(String),
    Modify(usize, String),
    Delete(usize),
    Use(Vec<usize>),
    Merge(usize, usize, String),
    Select(usize),
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,8}"
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..8).prop_map(|w| w.join(" "))
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => text().prop_map(Op::Add),
        1 => (any::<usize>(), text()).prop_map(|(i, t)| Op::Modify(i, t)),
        1 => any::<usize>().prop_map(Op::Delete),
        2 => prop::collection::vec(any::<usize>(), 0..4).prop_map(Op::Use),
        1 => (any::<usize>(), any::<usize>(), text()).prop_map(|(a, b, t)| Op::Merge(a, b, t)),
        1 => (1usize..6).prop_map(Op::Select),
    ]
}

fn pick(store: &ExperienceStore, i: usize) -> Option<ExperienceId> {
    let ids = store.ids();
    (!ids.is_empty()).then(|| ids[i % ids.len()])
}

fn budgets() -> Budgets {
    Budgets {
        token_budget: 1_000_000,
        item_budget: 1000,
        retain_top: 1000,
    }
}

/// Replays `ops`, skipping any that do not apply.
fn replay(ops: &[Op]) -> ExperienceStore {
    let mut s = ExperienceStore::new(budgets());
    for (step, op) in ops.iter().enumerate() {
        let step = step as u64 + 1;
        match op {
            Op::Add(t) => s.apply_update(&UpdateAction::Add { text: t.clone() }).unwrap(),
            Op::Modify(i, t) => {
                if let Some(id) = pick(&s, *i) {
                    s.apply_update(&UpdateAction::Modify { id, text: t.clone() }).unwrap();
                }
            }
            Op::Delete(i) => {
                if let Some(id) = pick(&s, *i) {
                    s.apply_update(&UpdateAction::Delete { id }).unwrap();
                }
            }
            Op::Use(picks) => {
                let ids: Vec<_> = picks.iter().filter_map(|&i| pick(&s, i)).collect();
                s.record_usage(&ids, step).unwrap();
            }
            Op::Merge(a, b, t) => {
                if let (Some(x), Some(y)) = (pick(&s, *a), pick(&s, *b)) {
                    if x != y {
                        let merge = CompressionAction::Merge {
                            ids: vec![x, y],
                            text: t.clone(),
                        };
                        s.apply_compression(&[merge], 1000).unwrap();
                    }
                }
            }
            Op::Select(r) => {
                s.apply_compression(&[], *r).unwrap();
            }
        }
    }
    s
}

proptest! {
    #[test]
    fn replay_is_deterministic(ops in prop::collection::vec(op(), 0..40)) {
        prop_assert_eq!(replay(&ops).to_json(), replay(&ops).to_json());
    }

    #[test]
    fn persist_restore_round_trip(ops in prop::collection::vec(op(), 0..40)) {
        let s = replay(&ops);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.json");
        s.persist(&path).unwrap();
        let back = ExperienceStore::restore(&path).unwrap();
        prop_assert_eq!(back.checksum(), s.checksum());
        prop_assert_eq!(back, s);
    }

    #[test]
    fn serialize_parse_round_trip(ops in prop::collection::vec(op(), 0..40)) {
        let s = replay(&ops);
        let rendered = s.serialize();
        let parsed = parse_serialized(&rendered.text);
        let expected: Vec<(ExperienceId, String)> = s.items.iter().map(|i| (i.id, i.text.clone())).collect();
        prop_assert_eq!(parsed, expected);
        prop_assert_eq!(rendered.ids, s.ids());
    }

    #[test]
    fn ids_are_strictly_increasing(ops in prop::collection::vec(op(), 0..40)) {
        let s = replay(&ops);
        prop_assert!(s.items.iter().all(|i| i.id.0 < s.next_id));
    }

    #[test]
    fn answer_equality_is_an_equivalence(a in "[ A-Da-d(). ]{0,6}", b in "[ A-Da-d(). ]{0,6}", c in "[ A-Da-d(). ]{0,6}") {
        let (a, b, c) = (Answer::new(&a), Answer::new(&b), Answer::new(&c));
        prop_assert!(answers_equal(&a, &a));
        prop_assert_eq!(answers_equal(&a, &b), answers_equal(&b, &a));
        if answers_equal(&a, &b) && answers_equal(&b, &c) {
            prop_assert!(answers_equal(&a, &c));
        }
    }

    #[test]
    fn extracting_a_rendered_answer_is_identity(letter in "[A-E]", prefix in "[a-z ,.]{0,40}") {
        let text = format!("{prefix}\nAnswer: {letter}");
        let got = extract_answer(&text).unwrap();
        prop_assert!(answers_equal(&got, &Answer::new(&letter)));
        prop_assert_eq!(got.canonical_text, Answer::new(&letter).canonical_text);
    }

    #[test]
    fn mean_at_k_equals_flat_mean(rows in 1usize..30, k in 1usize..8, seed in prop::collection::vec(0u8..2, 240)) {
        let m: Vec<Vec<u8>> = (0..rows).map(|r| (0..k).map(|c| seed[(r * k + c) % seed.len()]).collect()).collect();
        let flat: f64 = m.iter().flatten().map(|&v| f64::from(v)).sum::<f64>() / (rows * k) as f64;
        prop_assert!((mean_at_k(&m).unwrap() - flat).abs() < 1e-12);
    }

    #[test]
    fn ledger_fold_equals_sum(calls in prop::collection::vec((any::<bool>(), 0u64..1_000_000, 0u64..1_000_000), 0..50)) {
        let mut ledger = TokenLedger::default();
        let (mut sp, mut sc, mut tp, mut tc) = (0, 0, 0, 0);
        for &(student, p, c) in &calls {
            let resp = ChatResponse {
                completions: vec![String::new()],
                usage: Usage { prompt_tokens: p, completion_tokens: c },
                usage_estimated: false,
                backend_id: "x".into(),
                attempts: 1,
            };
            let role = if student { sp += p; sc += c; ModelRole::Student } else { tp += p; tc += c; ModelRole::Teacher };
            ledger = ledger.accumulate(&resp, role);
        }
        let s = ledger.get(ModelRole::Student);
        let t = ledger.get(ModelRole::Teacher);
        prop_assert_eq!((s.prompt_tokens, s.completion_tokens, t.prompt_tokens, t.completion_tokens), (sp, sc, tp, tc));
        prop_assert_eq!(ledger.total(), sp + sc + tp + tc);
    }

    #[test]
    fn top_r_matches_brute_force(usages in prop::collection::vec(0u64..5, 0..25), r in 0usize..30) {
        let mut s = ExperienceStore::new(budgets());
        for (i, &u) in usages.iter().enumerate() {
            s.apply_update(&UpdateAction::Add { text: format!("item {i}") }).unwrap();
            s.items[i].usage_count = u;
        }
        // an item survives iff fewer than r items outrank it
        let beats = |a: &ted_core::ExperienceItem, b: &ted_core::ExperienceItem| {
            a.utility() > b.utility() || (a.utility() == b.utility() && a.id < b.id)
        };
        let mut expected: Vec<ExperienceId> = s
            .items
            .iter()
            .filter(|x| s.items.iter().filter(|y| beats(y, x)).count() < r)
            .map(|x| x.id)
            .collect();
        let mut got = select_top(&s.items, r);
        got.sort();
        expected.sort();
        prop_assert_eq!(got, expected);
    }
}
