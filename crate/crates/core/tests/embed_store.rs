use std::collections::BTreeMap;
use std::fs;

use scroll::embed_store::{
    encode_binary, load_embeddings, load_embeddings_with_mapping, normalize, save_embeddings, synthesize,
    EmbeddingTable, SyntheticSpec, TableFormat,
};
use scroll::ScrollError;

fn table(dim: usize, rows: &[&[f32]], labels: &[u32], k: usize) -> EmbeddingTable {
    let vectors: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    EmbeddingTable::new(dim, vectors, labels.to_vec(), k).unwrap()
}

#[test]
fn normalize_three_four_five() {
    let t = table(2, &[&[3.0, 4.0]], &[0], 1);
    let n = normalize(&t).unwrap();
    assert_eq!(n.row(0), &[0.6, 0.8]);
    assert!(n.is_normalized());
}

#[test]
fn normalize_is_idempotent() {
    let t = table(3, &[&[1.0, 2.0, 3.0], &[-0.3, 0.7, 5.0], &[1e-3, 0.0, 0.0]], &[0, 1, 0], 2);
    let once = normalize(&t).unwrap();
    let twice = normalize(&once).unwrap();
    assert_eq!(once, twice);
}

#[test]
fn normalize_rejects_zero_row() {
    let t = table(2, &[&[1.0, 0.0], &[0.0, 0.0]], &[0, 1], 2);
    match normalize(&t) {
        Err(ScrollError::Degenerate { row, .. }) => assert_eq!(row, 1),
        other => panic!("expected degenerate row error, got {other:?}"),
    }
}

#[test]
fn table_rejects_missing_class_and_bad_label() {
    assert!(EmbeddingTable::new(1, vec![1.0, 1.0], vec![0, 0], 2).is_err());
    assert!(EmbeddingTable::new(1, vec![1.0, 1.0], vec![0, 2], 2).is_err());
    assert!(EmbeddingTable::new(1, vec![f32::NAN, 1.0], vec![0, 1], 2).is_err());
}

#[test]
fn binary_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.scrl");
    let t = table(2, &[&[0.1, -0.2], &[1e-7, 3.5]], &[1, 0], 2);
    save_embeddings(&t, &path, TableFormat::Binary).unwrap();
    let back = load_embeddings(&path, TableFormat::Binary).unwrap();
    assert_eq!(back.table, t);
    assert_eq!(back.original_labels, vec![0, 1]);
}

#[test]
fn truncated_binary_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.scrl");
    let t = table(2, &[&[0.1, -0.2], &[1.0, 3.5]], &[1, 0], 2);
    let bytes = encode_binary(&t);
    // header is 18 bytes, then 4 floats, then 2 labels
    fs::write(&path, &bytes[..18 + 4 * 3 + 1]).unwrap();
    match load_embeddings(&path, TableFormat::Binary) {
        Err(ScrollError::Format { unit, offset, .. }) => {
            assert_eq!(unit, "byte");
            assert_eq!(offset, 18 + 4 * 3);
        }
        other => panic!("expected format error, got {other:?}"),
    }
    fs::write(&path, [&bytes[..], &[0u8]].concat()).unwrap();
    assert!(matches!(
        load_embeddings(&path, TableFormat::Binary),
        Err(ScrollError::Format { offset, .. }) if offset == bytes.len() as u64
    ));
}

#[test]
fn csv_labels_are_remapped_in_ascending_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    fs::write(&path, "f0,f1,label\n1,0,7\n0,1,3\n1,1,7\n").unwrap();
    let loaded = load_embeddings(&path, TableFormat::Csv).unwrap();
    assert_eq!(loaded.table.labels(), &[1, 0, 1]);
    assert_eq!(loaded.table.class_count(), 2);
    assert_eq!(loaded.label_mapping(), BTreeMap::from([(3, 0), (7, 1)]));

    let test_path = dir.path().join("test.csv");
    fs::write(&test_path, "f0,f1,label\n1,0,3\n0,1,7\n").unwrap();
    let test = load_embeddings_with_mapping(&test_path, TableFormat::Csv, &loaded.label_mapping()).unwrap();
    assert_eq!(test.labels(), &[0, 1]);

    fs::write(&test_path, "f0,f1,label\n1,0,5\n").unwrap();
    assert!(load_embeddings_with_mapping(&test_path, TableFormat::Csv, &loaded.label_mapping()).is_err());
}

#[test]
fn csv_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    fs::write(&path, "f0,f1,label\n1,0,0\n0,x,1\n").unwrap();
    match load_embeddings(&path, TableFormat::Csv) {
        Err(ScrollError::Format { unit, offset, .. }) => {
            assert_eq!(unit, "line");
            assert_eq!(offset, 3);
        }
        other => panic!("expected format error, got {other:?}"),
    }
    fs::write(&path, "a,b,label\n1,0,0\n").unwrap();
    assert!(matches!(
        load_embeddings(&path, TableFormat::Csv),
        Err(ScrollError::Format { offset: 1, .. })
    ));
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let t = table(3, &[&[0.25, -1.5, 3.0], &[0.1, 0.2, 0.3]], &[0, 1], 2);
    save_embeddings(&t, &path, TableFormat::Csv).unwrap();
    let back = load_embeddings(&path, TableFormat::Csv).unwrap();
    assert_eq!(back.table, t);
}

#[test]
fn synthesize_is_deterministic() {
    let mut spec = SyntheticSpec::new(5, 16, 20, 9);
    spec.cluster_spread = 0.2;
    spec.shift_strength = 0.1;
    assert_eq!(synthesize(&spec).unwrap(), synthesize(&spec).unwrap());
    spec.seed = 10;
    let other = synthesize(&spec).unwrap();
    spec.seed = 9;
    assert_ne!(synthesize(&spec).unwrap().0, other.0);
}

#[test]
fn zero_spread_rows_equal_class_mean() {
    let spec = SyntheticSpec::new(2, 8, 50, 1);
    let (train, _) = synthesize(&spec).unwrap();
    for class in 0..2 {
        let rows = train.class_indices(class);
        assert_eq!(rows.len(), 50);
        for &i in &rows {
            assert_eq!(train.row(i), train.row(rows[0]));
        }
        let norm: f64 = train.row(rows[0]).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
}

#[test]
fn tight_clusters_are_nearest_mean_separable() {
    let mut spec = SyntheticSpec::new(10, 64, 100, 3);
    spec.cluster_spread = 0.05;
    let (train, test) = synthesize(&spec).unwrap();
    let means: Vec<Vec<f64>> = (0..10).map(|c| train.class_mean(c)).collect();
    for i in 0..test.len() {
        let x = test.row_f64(i);
        let nearest = (0..10)
            .min_by(|&a, &b| {
                let da: f64 = x.iter().zip(&means[a]).map(|(p, q)| (p - q).powi(2)).sum();
                let db: f64 = x.iter().zip(&means[b]).map(|(p, q)| (p - q).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(nearest, test.label(i));
    }
}

#[test]
fn synthetic_spec_validation() {
    let mut spec = SyntheticSpec::new(1, 8, 10, 0);
    assert!(synthesize(&spec).is_err());
    spec.class_count = 3;
    spec.cluster_spread = -1.0;
    assert!(synthesize(&spec).is_err());
}
