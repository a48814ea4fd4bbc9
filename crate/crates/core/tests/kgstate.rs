use std::collections::BTreeSet;

use hexplain::engine::{builtin_ids, load_builtin};
use hexplain::kgstate::{partition, triple_to_text, Category, KgTracker, KnowledgeGraph, Plurality, Triple};
use proptest::prelude::*;

fn t(s: &str, r: &str, o: &str) -> Triple {
    Triple::new(s, r, o).unwrap()
}

/// Graphs seen along a random play, one per observation.
fn graphs(id: &str, picks: &[usize]) -> Vec<KnowledgeGraph> {
    let spec = load_builtin(id).unwrap();
    let (mut s, obs) = spec.reset(0);
    let mut tracker = KgTracker::new(&spec);
    tracker.observe(&obs, 0);
    let mut out = vec![tracker.graph().clone()];
    for (i, &p) in picks.iter().enumerate() {
        let valid: Vec<String> = spec.valid_actions(&s).into_iter().collect();
        if valid.is_empty() {
            break;
        }
        let (next, obs, _) = spec.step(&s, &valid[p % valid.len()]);
        s = next;
        tracker.observe(&obs, i as u32 + 1);
        out.push(tracker.graph().clone());
    }
    out
}

fn check_graph(g: &KnowledgeGraph, plurality: &Plurality) -> Result<(), TestCaseError> {
    let parts = partition(g);
    prop_assert_eq!(parts.total_len(), g.len());
    let mut union = BTreeSet::new();
    for (c, view) in parts.iter() {
        for x in view.iter() {
            prop_assert_eq!(x.category, c);
            prop_assert!(union.insert(x.clone()), "partitions overlap");
        }
    }
    prop_assert_eq!(&union, g.triples());
    let texts: BTreeSet<String> = g.iter().map(|x| triple_to_text(x, plurality)).collect();
    prop_assert_eq!(texts.len(), g.len(), "rendering is not injective");
    let index = g.entity_index();
    for x in g.iter() {
        prop_assert_eq!(Some(x.category), Category::of(&x.subject, &x.relation));
        prop_assert_eq!(Triple::from_tsv(&x.to_tsv()), Ok(x.clone()));
        for e in [&x.subject, &x.object] {
            prop_assert!(index[e.as_str()].contains(&x));
        }
    }
    for (e, ts) in &index {
        prop_assert!(ts.iter().all(|x| x.touches(e)));
    }
    prop_assert_eq!(index.len(), g.entities().len());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reachable_graphs_are_well_formed(
        id in prop::sample::select(builtin_ids().collect::<Vec<_>>()),
        picks in prop::collection::vec(0usize..50, 0..40),
    ) {
        let plurality = Plurality::for_game(&load_builtin(id).unwrap());
        let gs = graphs(id, &picks);
        let mut global = KnowledgeGraph::new();
        let mut last = 0;
        for g in &gs {
            check_graph(g, &plurality)?;
            global.union_with(g);
            prop_assert!(global.len() >= last);
            last = global.len();
        }
        check_graph(&global, &plurality)?;
    }
}

#[test]
fn lanternquest_walkthrough_partition_matches_hand_count() {
    let spec = load_builtin("lanternquest").unwrap();
    let (mut s, obs) = spec.reset(0);
    let mut tracker = KgTracker::new(&spec);
    tracker.observe(&obs, 0);
    for (i, a) in spec.walkthrough.iter().enumerate() {
        let (next, obs, _) = spec.step(&s, a);
        s = next;
        tracker.observe(&obs, i as u32 + 1);
    }
    let parts = partition(tracker.graph());
    // atr: lamp, key, chest, leaflet interactable plus the open chest.
    // inv: lamp and key. obj: leaflet and chest, never taken. loc: one per
    // exit used (east, down, up, west, north).
    let sizes: Vec<usize> = Category::ALL.iter().map(|&c| parts.get(c).len()).collect();
    assert_eq!(sizes, [5, 2, 2, 5]);
    assert!(parts.inv.contains(&t("player", "has", "lamp")));
    assert!(!parts.obj.contains(&t("lamp", "in", "house")));
    assert!(parts.loc.contains(&t("cellar", "down", "house")));
}

#[test]
fn dropping_retracts_inventory_and_places_the_item() {
    let spec = load_builtin("eggtree").unwrap();
    let (mut s, obs) = spec.reset(0);
    let mut tracker = KgTracker::new(&spec);
    tracker.observe(&obs, 0);
    let mut snapshots = Vec::new();
    for (i, a) in ["climb tree", "take egg", "drop egg"].iter().enumerate() {
        let (next, obs, _) = spec.step(&s, a);
        s = next;
        tracker.observe(&obs, i as u32 + 1);
        snapshots.push(tracker.graph().clone());
    }
    let has = t("player", "has", "egg");
    let placed = t("egg", "in", "treetop");
    assert!(snapshots[0].contains(&placed));
    assert!(snapshots[1].contains(&has) && !snapshots[1].contains(&placed));
    assert!(!snapshots[2].contains(&has) && snapshots[2].contains(&placed));
    assert_eq!(snapshots[2].step_added(&placed), Some(3));
}

#[test]
fn rendering_follows_number_and_category() {
    let plural = Plurality::new([("trees".to_string(), true)].into());
    assert_eq!(triple_to_text(&t("egg", "is", "interactable"), &plural), "egg is interactable");
    assert_eq!(triple_to_text(&t("trees", "is", "interactable"), &plural), "trees are interactable");
    assert_eq!(triple_to_text(&t("forest", "north", "house"), &plural), "forest is in the north of house");
    assert_eq!(triple_to_text(&t("tree", "in", "forest"), &plural), "tree is in forest");
    let g = KnowledgeGraph::from_triples([t("egg", "is", "interactable"), t("player", "has", "lamp")], 0);
    let p = partition(&g);
    assert_eq!((p.atr.len(), p.inv.len(), p.obj.len(), p.loc.len()), (1, 1, 0, 0));
    assert_eq!(partition(&KnowledgeGraph::new()).total_len(), 0);
}
