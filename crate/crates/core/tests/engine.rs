use hexplain::engine::{builtin_ids, load_builtin, GameSpec, TerminalCause, GENERIC_FAILURE};
use hexplain::grammar::canonicalize;
use proptest::prelude::*;

/// Plays `picks` as indices into the valid action set, with index
/// `usize::MAX` standing for an unparseable input.
fn play(spec: &GameSpec, picks: &[usize]) -> Vec<(String, hexplain::engine::Observation)> {
    let (mut s, obs) = spec.reset(0);
    let mut out = vec![(String::new(), obs)];
    for &p in picks {
        let valid: Vec<String> = spec.valid_actions(&s).into_iter().collect();
        let action = if p == usize::MAX || valid.is_empty() {
            "xyzzy".to_string()
        } else {
            valid[p % valid.len()].clone()
        };
        let (next, obs, done) = spec.step(&s, &action);
        s = next;
        out.push((action, obs));
        if done {
            break;
        }
    }
    out
}

fn picks() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(prop_oneof![9 => 0usize..50, 1 => Just(usize::MAX)], 0..40)
}

fn game() -> impl Strategy<Value = &'static str> {
    prop::sample::select(builtin_ids().collect::<Vec<_>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replays_are_identical(id in game(), picks in picks()) {
        let spec = load_builtin(id).unwrap();
        prop_assert_eq!(play(&spec, &picks), play(&spec, &picks));
    }

    #[test]
    fn score_is_the_sum_of_rewards(id in game(), picks in picks()) {
        let spec = load_builtin(id).unwrap();
        let run = play(&spec, &picks);
        let total: i64 = run.iter().map(|(_, o)| o.reward).sum();
        prop_assert_eq!(total, run.last().unwrap().1.total_score);
        prop_assert!(total >= 0 && total <= spec.max_score);
    }

    #[test]
    fn valid_actions_are_sound_and_canonical(id in game(), picks in picks()) {
        let spec = load_builtin(id).unwrap();
        let (mut s, _) = spec.reset(0);
        for p in picks {
            let valid: Vec<String> = spec.valid_actions(&s).into_iter().collect();
            if s.done {
                prop_assert!(valid.is_empty());
                break;
            }
            for a in &valid {
                let parsed = spec.grammar.parse_action(a);
                prop_assert_eq!(parsed.map(|i| i.canonical_text), Some(a.clone()));
                prop_assert_eq!(canonicalize(a), a.clone());
                let (_, obs, _) = spec.step(&s, a);
                prop_assert_ne!(obs.feedback.as_str(), GENERIC_FAILURE);
            }
            if valid.is_empty() {
                break;
            }
            s = spec.step(&s, &valid[p % valid.len()]).0;
        }
    }

    #[test]
    fn unparseable_input_changes_nothing_but_the_clock(id in game(), picks in picks(), junk in "[a-z]{3,8} [a-z]{9,12}") {
        let spec = load_builtin(id).unwrap();
        let (mut s, _) = spec.reset(0);
        for p in picks.into_iter().take(10) {
            let valid: Vec<String> = spec.valid_actions(&s).into_iter().collect();
            if valid.is_empty() {
                break;
            }
            s = spec.step(&s, &valid[p % valid.len()]).0;
        }
        let (next, obs, _) = spec.step(&s, &junk);
        if !s.done {
            prop_assert_eq!(obs.feedback.as_str(), GENERIC_FAILURE);
            prop_assert_eq!(obs.reward, 0);
            prop_assert_eq!(next.step_index, s.step_index + 1);
            prop_assert_eq!(hexplain::engine::EnvState { step_index: 0, ..next }, hexplain::engine::EnvState { step_index: 0, ..s });
        }
    }
}

#[test]
fn walkthroughs_reach_the_maximum() {
    for id in builtin_ids() {
        let spec = load_builtin(id).unwrap();
        let (mut s, _) = spec.reset(0);
        for (i, a) in spec.walkthrough.iter().enumerate() {
            let (next, _, done) = spec.step(&s, a);
            s = next;
            assert_eq!(done, i + 1 == spec.walkthrough.len(), "{id}: {a}");
        }
        assert_eq!(s.score, spec.max_score, "{id}");
        assert_eq!(spec.terminal_cause(&s), Some(TerminalCause::Goal));
        assert!(spec.valid_actions(&s).is_empty());
    }
}

#[test]
fn lanternquest_fixture_behaviour() {
    let spec = load_builtin("lanternquest").unwrap();
    assert_eq!(spec.max_score, 30);
    let (s, _) = spec.reset(0);
    let valid = spec.valid_actions(&s);
    assert!(valid.contains("go east"));
    assert!(!valid.contains("open chest"));

    let (s, _, _) = spec.step(&s, "go east");
    let (s, obs, _) = spec.step(&s, "take lamp");
    assert!(s.inventory.contains("lamp"));
    assert_eq!(obs.reward, 0);
    let (same, obs, done) = spec.step(&s, "go north");
    assert_eq!(obs.feedback, "You can't go that way.");
    assert!(!done);
    assert_eq!(same.room, s.room);

    let (s, _) = spec.reset(0);
    let (s, _, _) = spec.step(&s, "go east");
    let (s, _, done) = spec.step(&s, "go down");
    assert!(done && s.death);
    assert_eq!(spec.terminal_cause(&s), Some(TerminalCause::Death));
}

#[test]
fn twokeys_has_two_routes() {
    let spec = load_builtin("twokeys").unwrap();
    let tools: Vec<&str> = spec
        .walkthrough
        .iter()
        .filter_map(|a| a.strip_prefix("take "))
        .collect();
    assert_eq!(tools.len(), 1);
    let other = if tools[0] == "key" { "crowbar" } else { "key" };
    // The other tool opens the strongbox too.
    let alt: Vec<String> = spec.walkthrough.iter().map(|a| a.replace(tools[0], other)).collect();
    let (mut s, _) = spec.reset(0);
    let mut trace = Vec::new();
    for a in plan_for(&spec, &alt) {
        let (next, obs, _) = spec.step(&s, &a);
        trace.push((a, obs.feedback));
        s = next;
    }
    assert_eq!(s.score, spec.max_score, "{trace:?}");
}

/// Replaces movement steps that no longer apply with a breadth-first
/// route to the room where the next non-movement action works.
fn plan_for(spec: &GameSpec, actions: &[String]) -> Vec<String> {
    use std::collections::{BTreeSet, VecDeque};
    let (mut s, _) = spec.reset(0);
    let mut out = Vec::new();
    for a in actions.iter().filter(|a| !a.starts_with("go ")) {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([(s.clone(), Vec::<String>::new())]);
        let mut found = None;
        while let Some((state, path)) = queue.pop_front() {
            if spec.valid_actions(&state).contains(a) {
                found = Some((state, path));
                break;
            }
            for m in spec.valid_actions(&state).into_iter().filter(|m| m.starts_with("go ")) {
                let (next, _, done) = spec.step(&state, &m);
                if !done && seen.insert(next.room.clone()) {
                    let mut p = path.clone();
                    p.push(m);
                    queue.push_back((next, p));
                }
            }
        }
        let (state, path) = found.unwrap_or_else(|| panic!("no route to `{a}`"));
        out.extend(path);
        out.push(a.clone());
        s = spec.step(&state, a).0;
    }
    out
}
