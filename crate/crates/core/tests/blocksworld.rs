use std::collections::BTreeSet;

use mtplan_core::blocksworld::*;
use proptest::prelude::*;

/// Sum of unsigned Lah numbers: sets of nonempty ordered lists.
fn lah_total(n: u64) -> u64 {
    let fact = |k: u64| (1..=k).product::<u64>();
    let binom = |a: u64, b: u64| fact(a) / (fact(b) * fact(a - b));
    (1..=n).map(|k| binom(n - 1, k - 1) * fact(n) / fact(k)).sum()
}

#[test]
fn state_counts_match_lah_numbers() {
    let counts: Vec<usize> = (1..=5).map(|b| enumerate_states(b).unwrap().len()).collect();
    assert_eq!(counts, vec![1, 3, 13, 73, 501]);
    for b in 1..=6 {
        assert_eq!(enumerate_states(b).unwrap().len() as u64, lah_total(b as u64));
    }
}

#[test]
fn states_are_sorted_and_distinct() {
    let states = enumerate_states(4).unwrap();
    assert!(states.windows(2).all(|w| w[0] < w[1]));
    assert!(states.iter().all(|s| s.blocks() == 4));
}

/// `on[b]`: `None` for the table, `Some(c)` when `b` sits on `c`.
fn to_on(s: &BlockState, blocks: usize) -> Vec<Option<usize>> {
    let mut on = vec![None; blocks];
    for t in &s.towers {
        for w in t.windows(2) {
            on[w[1]] = Some(w[0]);
        }
    }
    on
}

fn from_on(on: &[Option<usize>]) -> BlockState {
    let blocks = on.len();
    let mut towers = Vec::new();
    for bottom in (0..blocks).filter(|&b| on[b].is_none()) {
        let mut tower = vec![bottom];
        while let Some(above) = (0..blocks).find(|&c| on[c] == Some(*tower.last().unwrap())) {
            tower.push(above);
        }
        towers.push(tower);
    }
    BlockState::new(towers, blocks).unwrap()
}

#[test]
fn edges_match_move_generator_oracle() {
    let start = std::time::Instant::now();
    let sg = build_state_graph(4).unwrap();
    assert_eq!(sg.states.len(), 73);
    let mut oracle = BTreeSet::new();
    for (u, s) in sg.states.iter().enumerate() {
        let on = to_on(s, 4);
        let clear = |b: usize| !on.contains(&Some(b));
        for x in (0..4).filter(|&x| clear(x)) {
            let targets = std::iter::once(None).chain((0..4).filter(|&z| z != x && clear(z)).map(Some));
            for dest in targets {
                if dest == on[x] {
                    continue;
                }
                let mut next = on.clone();
                next[x] = dest;
                oracle.insert((u, sg.index_of(&from_on(&next)).unwrap()));
            }
        }
    }
    let edges: BTreeSet<(usize, usize)> = sg.graph.edges().iter().copied().collect();
    assert_eq!(edges, oracle);
    for &(u, v) in &edges {
        assert!(edges.contains(&(v, u)));
    }
    assert!(start.elapsed().as_secs() < 5);
}

#[test]
fn dataset_paths_are_valid_and_acyclic() {
    let sg = build_state_graph(4).unwrap();
    let cfg = BlocksworldConfig {
        n_per_length: 50,
        test_paths: 300,
        seed: 3,
        ..Default::default()
    };
    let ds = build_blocksworld_dataset(&sg.graph, &cfg).unwrap();
    assert_eq!(ds.train.len(), sg.graph.edge_count() + 5 * 50);
    assert_eq!(ds.test.len(), 300);
    for p in ds.train.iter().chain(&ds.test) {
        assert!(p.is_valid_in(&sg.graph));
        let distinct: BTreeSet<_> = p.nodes.iter().collect();
        assert_eq!(distinct.len(), p.nodes.len());
    }
    for len in 2..=6 {
        let n = ds.train.iter().filter(|p| p.nodes.len() == len + 1).count();
        assert!(n >= 50);
    }
    assert!(ds.test.iter().all(|p| (3..=7).contains(&p.nodes.len())));
    assert_eq!(sg.graph.node_count(), 73);
}

#[test]
fn test_set_is_shared_across_train_sizes() {
    let sg = build_state_graph(4).unwrap();
    let small = BlocksworldConfig {
        n_per_length: 100,
        test_paths: 200,
        seed: 8,
        ..Default::default()
    };
    let large = BlocksworldConfig {
        n_per_length: 400,
        ..small
    };
    let a = build_blocksworld_dataset(&sg.graph, &small).unwrap();
    let b = build_blocksworld_dataset(&sg.graph, &large).unwrap();
    assert_eq!(a.test, b.test);
    assert_ne!(a.train.len(), b.train.len());
    assert_eq!(a, build_blocksworld_dataset(&sg.graph, &small).unwrap());
}

#[test]
fn states_json_lists_towers() {
    let sg = build_state_graph(2).unwrap();
    let v: serde_json::Value = serde_json::from_str(&sg.states_json()).unwrap();
    assert_eq!(v["blocks"], 2);
    assert_eq!(v["states"][1], serde_json::json!([[0, 1]]));
    let dir = tempfile::tempdir().unwrap();
    sg.save(dir.path()).unwrap();
    assert!(dir.path().join("states.json").exists());
    assert!(dir.path().join("graph.json").exists());
}

proptest! {
    /// Any spelling of a configuration (tower order shuffled) canonicalizes
    /// to the same state, and distinct configurations stay distinct.
    #[test]
    fn canonicalization_is_injective(
        perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        cuts in proptest::collection::vec(any::<bool>(), 4),
        rotate in 0usize..5,
    ) {
        let mut towers: Vec<Vec<usize>> = vec![vec![perm[0]]];
        for (i, &b) in perm[1..].iter().enumerate() {
            if cuts[i] { towers.push(vec![b]) } else { towers.last_mut().unwrap().push(b) }
        }
        let s = BlockState::new(towers.clone(), 5).unwrap();
        let r = rotate % towers.len();
        towers.rotate_left(r);
        let shuffled = BlockState::new(towers, 5).unwrap();
        prop_assert_eq!(&s, &shuffled);
        prop_assert_eq!(BlockState::new(s.towers.clone(), 5).unwrap(), s.clone());
        let states = enumerate_states(5).unwrap();
        prop_assert!(states.binary_search(&s).is_ok());
        prop_assert_eq!(from_on(&to_on(&s, 5)), s);
    }
}
