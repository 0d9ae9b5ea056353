use curbsight_core::numerics::{cosine_similarity, dot, lora_merge, norm, Matrix, Vector};
use curbsight_core::retrieval::{query_text, TextChunk, TextStore};
use proptest::prelude::*;

fn arb_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn chunk(id: &str) -> TextChunk {
    TextChunk { chunk_id: id.into(), source_doc: "doc".into(), locator: "§".into(), body: format!("body of {id}") }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cosine_is_bounded_and_matches_definition(a in arb_vec(16), b in arb_vec(16)) {
        let (a, b) = (Vector::new(a).unwrap(), Vector::new(b).unwrap());
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        let direct = dot(&a, &b).unwrap() / (norm(&a) * norm(&b));
        prop_assert!((c - direct.clamp(-1.0, 1.0)).abs() < 1e-12);
        prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.scaled(-1.0).unwrap();
        prop_assert!((cosine_similarity(&neg, &b).unwrap() + c).abs() < 1e-12);
    }

    #[test]
    fn lora_merge_is_additive(
        (w, a, b, b2) in (1usize..12, 1usize..12, 1usize..5).prop_flat_map(|(m, n, r)| {
            (arb_matrix(m, n), arb_matrix(m, r), arb_matrix(r, n), arb_matrix(r, n))
        })
    ) {
        // W + A(B1 + B2) = (W + A·B1) + A·B2
        let sum = Matrix::new(b.rows(), b.cols(), b.values().iter().zip(b2.values()).map(|(x, y)| x + y).collect()).unwrap();
        let direct = lora_merge(&w, &a, &sum).unwrap();
        let stepwise = lora_merge(&lora_merge(&w, &a, &b).unwrap(), &a, &b2).unwrap();
        for (x, y) in direct.values().iter().zip(stepwise.values()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert_eq!(direct.shape(), w.shape());
    }

    #[test]
    fn search_matches_sorted_scan(vectors in prop::collection::vec(arb_vec(6), 1..40), q in arb_vec(6), k in 1usize..50) {
        let mut store = TextStore::new(6).unwrap();
        for (i, v) in vectors.iter().enumerate() {
            store.insert(chunk(&format!("c{i:02}")), &Vector::new(v.clone()).unwrap()).unwrap();
        }
        let qv = Vector::new(q).unwrap();
        let hits = query_text(&store, &qv, k).unwrap();
        prop_assert_eq!(hits.len(), k.min(vectors.len()));
        // Scores come from the stored single-precision copy.
        let mut scan: Vec<(String, f64)> = (0..vectors.len())
            .map(|i| {
                let id = format!("c{i:02}");
                let stored = Vector::from_f32(store.embedding(&id).unwrap()).unwrap();
                (id, cosine_similarity(&qv, &stored).unwrap())
            })
            .collect();
        scan.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        for (h, (id, s)) in hits.iter().zip(&scan) {
            prop_assert!((h.score - s).abs() < 1e-12, "{} {} vs {} {}", h.id, h.score, id, s);
        }
        prop_assert!(hits.windows(2).all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id)));
    }
}

#[test]
fn save_load_preserves_embeddings_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let mut store = TextStore::new(3).unwrap();
    let v = Vector::new(vec![0.1, 1.0 / 3.0, -2.5e-7]).unwrap();
    store.insert(chunk("a"), &v).unwrap();
    store.insert(chunk("b"), &Vector::new(vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
    store.save(&path).unwrap();
    let back = TextStore::load(&path).unwrap();
    assert_eq!(back.len(), 2);
    for id in ["a", "b"] {
        let x: Vec<u32> = store.embedding(id).unwrap().iter().map(|f| f.to_bits()).collect();
        let y: Vec<u32> = back.embedding(id).unwrap().iter().map(|f| f.to_bits()).collect();
        assert_eq!(x, y);
        assert_eq!(store.get(id), back.get(id));
    }
    // Saving again gives the same bytes.
    let again = dir.path().join("t.jsonl");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn store_rejects_duplicates_and_wrong_dimensions() {
    let mut store = TextStore::new(2).unwrap();
    let v = Vector::new(vec![1.0, 2.0]).unwrap();
    store.insert(chunk("a"), &v).unwrap();
    assert!(store.insert(chunk("a"), &v).is_err());
    assert!(store.insert(chunk("b"), &Vector::new(vec![1.0, 2.0, 3.0]).unwrap()).is_err());
    assert!(query_text(&store, &Vector::new(vec![1.0]).unwrap(), 1).is_err());
    store.upsert(chunk("a"), &Vector::new(vec![0.0, 1.0]).unwrap()).unwrap();
    assert_eq!(store.len(), 1);
    assert_eq!(store.embedding("a").unwrap(), &[0.0, 1.0]);
    assert!(TextStore::new(0).is_err());
}
