use std::collections::BTreeSet;

use scroll::embed_store::EmbeddingTable;
use scroll::schedule::{apply, build_schedule, Schedule, ScheduleKind, ScheduleSpec};
use scroll::ScrollError;

fn labels(k: usize, per_class: usize) -> Vec<u32> {
    (0..k * per_class).map(|i| (i / per_class) as u32).collect()
}

fn table(labels: &[u32], k: usize) -> EmbeddingTable {
    let vectors: Vec<f32> = (0..labels.len()).map(|i| i as f32 + 1.0).collect();
    EmbeddingTable::new(1, vectors, labels.to_vec(), k).unwrap()
}

fn batch_classes(s: &Schedule, labels: &[u32]) -> Vec<BTreeSet<u32>> {
    s.batches().map(|b| b.iter().map(|&i| labels[i]).collect()).collect()
}

#[test]
fn identity_schedule() {
    let s = Schedule::identity(5).unwrap();
    assert_eq!(s.permutation(), &[0, 1, 2, 3, 4]);
    assert_eq!(s.bounds(), &[0, 5]);
    assert_eq!(s.batch_count(), 1);
}

#[test]
fn schedule_rejects_non_bijection_and_bad_bounds() {
    assert!(Schedule::new(vec![0, 0, 1], vec![0, 3]).is_err());
    assert!(Schedule::new(vec![0, 1, 2], vec![0, 2]).is_err());
    assert!(Schedule::new(vec![0, 1, 2], vec![0, 2, 2, 3]).is_err());
    assert!(Schedule::new(vec![0, 1, 2], vec![1, 3]).is_err());
}

#[test]
fn class_split_two_per_batch() {
    let l = labels(10, 4);
    let s = build_schedule(&ScheduleSpec::new(ScheduleKind::ClassSplit { classes_per_batch: 2 }, 7), &l).unwrap();
    assert_eq!(s.batch_count(), 5);
    let classes = batch_classes(&s, &l);
    let mut all = BTreeSet::new();
    for c in &classes {
        assert_eq!(c.len(), 2);
        assert!(c.is_disjoint(&all));
        all.extend(c);
    }
    assert_eq!(all.len(), 10);
}

#[test]
fn class_split_remainder_batch() {
    let l = labels(10, 3);
    let s = build_schedule(&ScheduleSpec::new(ScheduleKind::ClassSplit { classes_per_batch: 3 }, 1), &l).unwrap();
    let sizes: Vec<usize> = batch_classes(&s, &l).iter().map(|c| c.len()).collect();
    assert_eq!(sizes, vec![3, 3, 3, 1]);
}

#[test]
fn class_split_too_many_classes_is_error() {
    let l = labels(3, 2);
    let spec = ScheduleSpec::new(ScheduleKind::ClassSplit { classes_per_batch: 4 }, 0);
    assert!(matches!(build_schedule(&spec, &l), Err(ScrollError::Spec(_))));
}

#[test]
fn gaussian_small_sigma_keeps_classes_contiguous() {
    let l = labels(5, 20);
    let spec = ScheduleSpec::new(
        ScheduleKind::Gaussian {
            sigma: 1e-3,
            peak_spacing: None,
            batch_size: 1,
        },
        4,
    );
    let s = build_schedule(&spec, &l).unwrap();
    let seq: Vec<u32> = s.permutation().iter().map(|&i| l[i]).collect();
    let switches = seq.windows(2).filter(|w| w[0] != w[1]).count();
    assert_eq!(switches, 4, "sequence {seq:?}");
}

#[test]
fn gaussian_large_sigma_interleaves() {
    let l = labels(5, 20);
    let spec = ScheduleSpec::new(
        ScheduleKind::Gaussian {
            sigma: 10.0,
            peak_spacing: None,
            batch_size: 1,
        },
        4,
    );
    let s = build_schedule(&spec, &l).unwrap();
    let seq: Vec<u32> = s.permutation().iter().map(|&i| l[i]).collect();
    let switches = seq.windows(2).filter(|w| w[0] != w[1]).count();
    assert!(switches > 20);
}

#[test]
fn explicit_reverse_permutation() {
    let l = labels(2, 3);
    let spec = ScheduleSpec::new(
        ScheduleKind::Explicit {
            permutation: vec![5, 4, 3, 2, 1, 0],
            bounds: vec![0, 2, 6],
        },
        0,
    );
    let s = build_schedule(&spec, &l).unwrap();
    assert_eq!(s.batch(0), &[5, 4]);
    assert_eq!(s.batch(1), &[3, 2, 1, 0]);
}

#[test]
fn schedule_spec_json_round_trip() {
    let spec = ScheduleSpec::new(
        ScheduleKind::Gaussian {
            sigma: 0.2,
            peak_spacing: Some(0.1),
            batch_size: 4,
        },
        11,
    );
    let text = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<ScheduleSpec>(&text).unwrap(), spec);
    let parsed: ScheduleSpec = serde_json::from_str(r#"{"kind":"class_split","classes_per_batch":2}"#).unwrap();
    assert_eq!(parsed, ScheduleSpec::new(ScheduleKind::ClassSplit { classes_per_batch: 2 }, 0));
}

#[test]
fn stream_is_consumed_once() {
    let l = labels(2, 2);
    let t = table(&l, 2);
    let s = build_schedule(&ScheduleSpec::new(ScheduleKind::RandomIid { batch_size: 1 }, 3), &l).unwrap();
    let mut stream = apply(&s, &t).unwrap();
    let first = stream.fetch(0).unwrap();
    assert_eq!(first.indices(), s.batch(0));
    assert!(matches!(
        stream.fetch(0),
        Err(ScrollError::StreamReaccess { requested: 0, cursor: 1 })
    ));
    assert!(matches!(stream.fetch(2), Err(ScrollError::Spec(_))));
    stream.fetch(1).unwrap();
    stream.fetch(2).unwrap();
    stream.fetch(3).unwrap();
    assert!(matches!(stream.fetch(4), Err(ScrollError::OutOfRange { .. })));
    assert!(stream.next().is_none());
}

#[test]
fn stream_yields_rows_in_schedule_order() {
    let l = labels(3, 2);
    let t = table(&l, 3);
    let s = build_schedule(&ScheduleSpec::new(ScheduleKind::RandomIid { batch_size: 4 }, 8), &l).unwrap();
    let seen: Vec<(usize, f32, usize)> = apply(&s, &t)
        .unwrap()
        .flat_map(|b| b.samples().map(|(i, x, y)| (i, x[0], y)).collect::<Vec<_>>())
        .collect();
    let expected: Vec<(usize, f32, usize)> =
        s.permutation().iter().map(|&i| (i, i as f32 + 1.0, l[i] as usize)).collect();
    assert_eq!(seen, expected);
}

#[test]
fn apply_rejects_length_mismatch() {
    let l = labels(2, 2);
    let t = table(&l, 2);
    let s = Schedule::identity(3).unwrap();
    assert!(apply(&s, &t).is_err());
}
