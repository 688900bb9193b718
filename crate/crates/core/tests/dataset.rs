use stgnpp::dataset::*;
use stgnpp::synthgen::{simulate, CongestionEvent, RoadGraph, Scenario, TrafficStateWindow};
use stgnpp::Error;

fn flat_states(n_links: usize, n_slots: usize) -> TrafficStateWindow {
    TrafficStateWindow {
        n_links,
        n_slots,
        speeds: vec![50.0; n_links * n_slots],
        condition: vec![0; n_links * n_slots],
        free_flow: vec![50.0; n_links],
    }
}

fn two_link(events: Vec<Vec<CongestionEvent>>, n_slots: usize, window: usize) -> Dataset {
    let graph = RoadGraph::from_edges(2, &[(0, 1), (1, 0)]).unwrap();
    Dataset::new(graph, events, flat_states(2, n_slots), window, SplitFractions::default()).unwrap()
}

#[test]
fn splits_partition_the_horizon() {
    let sim = simulate(Scenario::Homogeneous, 3, 3.0, 1).unwrap();
    let ds = Dataset::from_simulation(&sim, 72, SplitFractions::default()).unwrap();
    let n = sim.states.n_slots;
    assert_eq!(n, 864);
    let (tr, va, te) = (ds.split_range(Split::Train), ds.split_range(Split::Validation), ds.split_range(Split::Test));
    assert_eq!(tr, (0, 518));
    assert_eq!(va, (518, 691));
    assert_eq!(te, (691, 864));
    for (split, (a, b)) in [(Split::Train, tr), (Split::Validation, va), (Split::Test, te)] {
        let ends = ds.window_ends(split);
        assert!(!ends.is_empty());
        assert_eq!(ends[0], a + 72);
        assert!(ends.iter().all(|&e| e - 72 >= a && e <= b));
        assert!(ends.windows(2).all(|w| w[1] - w[0] == WINDOW_STRIDE));
        assert!(ends.last().unwrap() + WINDOW_STRIDE > b);
    }
}

#[test]
fn sample_layout_matches_events() {
    // Window of 24 slots (120 minutes) ending at slot 36 covers [60, 180) minutes.
    let events = vec![
        vec![
            CongestionEvent::new(0, 50.0, 20.0),
            CongestionEvent::new(0, 75.0, 10.0),
            CongestionEvent::new(0, 135.0, 60.0),
            CongestionEvent::new(0, 200.0, 5.0),
        ],
        vec![CongestionEvent::new(1, 179.0, 3.0)],
    ];
    let ds = two_link(events, 200, 24);
    let s = ds.sample(36).unwrap();
    assert_eq!(s.end_minutes(), 180.0);
    assert_eq!(s.states.n_slots, 24);
    assert_eq!(s.events[0].len(), 2);
    let b = &s.batch;
    assert_eq!((b.n_links, b.l_max), (2, 2));
    b.validate().unwrap();
    assert_eq!(b.mask, vec![true, true, true, false]);
    assert_eq!(b.inter_event, vec![0.0, 1.0, 0.0, 0.0]);
    // Durations are cut at the window end; targets keep the full length.
    assert_eq!(b.durations, vec![10.0, 45.0, 1.0, 0.0]);
    assert_eq!(b.target_durations, vec![10.0, 60.0, 3.0, 0.0]);
    assert_eq!(b.time_of_day[0], 15);
    assert_eq!(b.time_of_day[1], 27);
    // Slots relative to the window start (slot 12).
    assert_eq!(s.indexes[0][0].slots, vec![3, 4]);
    assert_eq!(s.indexes[0][1].slots, (15..24).collect::<Vec<_>>());
    assert_eq!(s.indexes[1][0].slots, vec![23]);
    // Link 0 continues at 200 min, past the window; link 1 never does.
    assert_eq!(b.next_gap, vec![Some(65.0 / 60.0), None]);
    assert_eq!(b.next_duration, vec![5.0, 0.0]);
    assert_eq!(b.transitions(), vec![(0, 0), (0, 1)]);
    assert_eq!(b.transition_target(0, 0), (1.0, 60.0));
    assert_eq!(b.transition_target(0, 1), (65.0 / 60.0, 5.0));
    assert!(ds.sample(10).is_err());
    assert!(ds.sample(201).is_err());
}

#[test]
fn crossing_transition_stops_at_the_split_end() {
    // Train covers slots [0, 120), i.e. minutes [0, 600).
    let events = vec![
        vec![CongestionEvent::new(0, 500.0, 5.0), CongestionEvent::new(0, 610.0, 5.0)],
        vec![
            CongestionEvent::new(1, 450.0, 5.0),
            CongestionEvent::new(1, 530.0, 5.0),
            CongestionEvent::new(1, 590.0, 5.0),
        ],
    ];
    let ds = two_link(events, 200, 24);
    assert_eq!(ds.containing_split_end(96), 120);
    assert_eq!(ds.containing_split_end(119), 120);
    assert_eq!(ds.containing_split_end(120), 160);
    // Window [420, 540) min: link 0 continues only in validation.
    let b = ds.sample(108).unwrap().batch;
    assert_eq!(b.next_gap, vec![None, Some(1.0)]);
    assert_eq!(b.transitions(), vec![(1, 0), (1, 1)]);
    let b = ds.sample(120).unwrap().batch;
    assert_eq!(b.next_gap, vec![None, None]);
    assert_eq!(b.transitions(), vec![(1, 0)]);
}

#[test]
fn next_event_respects_horizon() {
    let events = vec![
        vec![CongestionEvent::new(0, 10.0, 1.0), CongestionEvent::new(0, 2000.0, 1.0)],
        vec![],
    ];
    let ds = two_link(events, 600, 12);
    assert_eq!(ds.next_event(0, 0.0).unwrap().t_occ, 10.0);
    assert_eq!(ds.next_event(0, 10.0).unwrap().t_occ, 10.0);
    assert_eq!(ds.next_event(0, 600.0).unwrap().t_occ, 2000.0);
    assert!(ds.next_event(0, 500.0).is_none());
    assert!(ds.next_event(1, 0.0).is_none());
}

#[test]
fn split_statistics_stay_inside_the_split() {
    // Train covers slots [0, 60), i.e. minutes [0, 300).
    let events = vec![
        vec![
            CongestionEvent::new(0, 10.0, 5.0),
            CongestionEvent::new(0, 70.0, 10.0),
            CongestionEvent::new(0, 190.0, 15.0),
            CongestionEvent::new(0, 310.0, 1.0),
        ],
        vec![CongestionEvent::new(1, 20.0, 30.0)],
    ];
    let ds = two_link(events, 100, 12);
    let (gaps, durs) = ds.split_statistics(Split::Train);
    assert_eq!(gaps, vec![vec![1.0, 2.0], vec![]]);
    assert_eq!(durs, vec![vec![5.0, 10.0, 15.0], vec![30.0]]);
}

#[test]
fn inconsistent_inputs_are_rejected() {
    let graph = RoadGraph::from_edges(2, &[(0, 1)]).unwrap();
    let err = Dataset::new(graph.clone(), vec![vec![]], flat_states(2, 10), 4, SplitFractions::default());
    assert!(matches!(err, Err(Error::Data(_))));
    let bad = SplitFractions { train: 0.5, validation: 0.2, test: 0.2 };
    let err = Dataset::new(graph.clone(), vec![vec![], vec![]], flat_states(2, 10), 4, bad);
    assert!(matches!(err, Err(Error::Param(_))));
    let overlapping = vec![vec![CongestionEvent::new(0, 0.0, 10.0), CongestionEvent::new(0, 5.0, 1.0)], vec![]];
    let err = Dataset::new(graph, overlapping, flat_states(2, 10), 4, SplitFractions::default());
    assert!(matches!(err, Err(Error::Data(_))));
}
