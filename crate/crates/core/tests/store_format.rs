mod common;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stepframe::embeddings::{load_store, nearest_neighbor, normalize_rows, save_store, similarity, EmbeddingError, MAGIC};
use stepframe::{EmbeddingStore, EntryId, StoreKind};

fn frames(n: usize, seed: u64) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n).map(|_| common::gaussian_unit(&mut rng, 8)).collect();
    common::unit_store(StoreKind::Frame, (0..n).map(|t| EntryId::frame("clip", t as f64)).collect(), rows)
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frames.shte");
    let store = frames(30, 1);
    save_store(&store, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], &MAGIC);
    assert_eq!(bytes[17], 1);
    assert_eq!(load_store(&path).unwrap(), store);
}

#[test]
fn header_layout_is_little_endian() {
    let store = EmbeddingStore::from_rows(StoreKind::Text, vec![EntryId::text("é")], vec![vec![2.0, 0.0, 0.0]]).unwrap();
    let b = store.to_bytes();
    assert_eq!(&b[4..8], &[1, 0, 0, 0]);
    assert_eq!(b[8], 1);
    assert_eq!(&b[9..13], &[3, 0, 0, 0]);
    assert_eq!(&b[13..17], &[1, 0, 0, 0]);
    assert_eq!(b[17], 0);
    assert_eq!(&b[18..20], &[2, 0]);
    assert_eq!(&b[20..22], "é".as_bytes());
    assert_eq!(&b[22..26], &2.0f32.to_le_bytes());
    assert_eq!(b.len(), 34);
}

#[test]
fn normalized_flag_is_checked_on_load() {
    let store = EmbeddingStore::from_rows(StoreKind::Text, vec![EntryId::text("a")], vec![vec![3.0, 4.0]]).unwrap();
    assert!(!store.is_normalized());
    let mut b = store.to_bytes();
    b[17] = 1;
    assert!(matches!(EmbeddingStore::from_bytes(&b), Err(EmbeddingError::NormOutOfTolerance { row: 0, .. })));
    let unit = normalize_rows(&store).unwrap();
    assert!(unit.is_normalized());
    assert_eq!(unit.row(0), &[0.6, 0.8]);
}

#[test]
fn ids_must_match_the_store_kind() {
    let err = EmbeddingStore::from_rows(StoreKind::Scene, vec![EntryId::text("a")], vec![vec![1.0]]).unwrap_err();
    assert!(matches!(err, EmbeddingError::KindMismatch { .. }));
    let ids = vec![EntryId::frame("v", 1.0), EntryId::frame("v", 1.0)];
    let err = EmbeddingStore::from_rows(StoreKind::Frame, ids, vec![vec![1.0], vec![1.0]]).unwrap_err();
    assert!(matches!(err, EmbeddingError::DuplicateId(_)));
}

#[test]
fn non_finite_values_are_rejected() {
    let err = EmbeddingStore::from_rows(StoreKind::Text, vec![EntryId::text("a")], vec![vec![f32::NAN]]).unwrap_err();
    assert!(matches!(err, EmbeddingError::NonFinite(0)));
}

#[test]
fn similarity_needs_unit_rows() {
    let raw = EmbeddingStore::from_rows(StoreKind::Text, vec![EntryId::text("a")], vec![vec![3.0, 4.0]]).unwrap();
    assert!(matches!(similarity(&raw, &raw), Err(EmbeddingError::NotNormalized)));
    let unit = normalize_rows(&raw).unwrap();
    let sim = similarity(&unit, &unit).unwrap();
    assert!((sim.get(0, 0) - 1.0).abs() < 1e-6);
}

#[test]
fn nearest_neighbour_skips_excluded_ids() {
    let g = frames(20, 4);
    let q = g.row(5).to_vec();
    let (id, score) = nearest_neighbor(&q, &g, &HashSet::new()).unwrap();
    assert_eq!(id, EntryId::frame("clip", 5.0));
    assert!((score - 1.0).abs() < 1e-9);
    let (id, _) = nearest_neighbor(&q, &g, &HashSet::from([EntryId::frame("clip", 5.0)])).unwrap();
    assert_ne!(id, EntryId::frame("clip", 5.0));
    let all: HashSet<EntryId> = g.ids().iter().cloned().collect();
    assert!(matches!(nearest_neighbor(&q, &g, &all), Err(EmbeddingError::EmptyGallery)));
}

#[test]
fn nearest_neighbour_ties_go_to_the_smallest_id() {
    let ids = vec![EntryId::frame("b", 1.0), EntryId::frame("a", 2.0), EntryId::frame("a", 1.0)];
    let g = EmbeddingStore::from_rows(StoreKind::Scene, ids, vec![vec![1.0, 0.0]; 3]).unwrap();
    let (id, _) = nearest_neighbor(&[1.0, 0.0], &g, &HashSet::new()).unwrap();
    assert_eq!(id, EntryId::frame("a", 1.0));
}

#[test]
fn select_keeps_requested_order() {
    let g = frames(10, 2);
    let pick = vec![EntryId::frame("clip", 7.0), EntryId::frame("clip", 2.0)];
    let s = g.select(&pick).unwrap();
    assert_eq!(s.ids(), pick.as_slice());
    assert_eq!(s.row(0), g.row(7));
    assert!(matches!(g.select(&[EntryId::frame("clip", 99.0)]), Err(EmbeddingError::UnknownId(_))));
}
