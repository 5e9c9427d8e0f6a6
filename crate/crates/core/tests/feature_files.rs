use phrasecap::bilinear::{load_features, BilinearError};
use phrasecap::FeatureStore;
use proptest::prelude::*;

#[test]
fn reads_exporter_style_output() {
    // Python repr floats, scientific notation and a trailing newline.
    let text = "n 4\n1000268201_693b08cb0e.jpg 0.0 1e-05 -0.25 3.5\nimg_2 -0.0 2.220446049250313e-16 7 0.1\n";
    let store = load_features(text.as_bytes()).unwrap();
    assert_eq!(store.dim(), 4);
    assert_eq!(store.len(), 2);
    assert_eq!(
        store.get("1000268201_693b08cb0e.jpg").unwrap(),
        &[0.0, 1e-5, -0.25, 3.5]
    );
    assert_eq!(store.get("img_2").unwrap()[1], f64::EPSILON);
}

#[test]
fn rejects_vectors_that_disagree_with_header() {
    let err = load_features("n 3\na 1 2\n".as_bytes()).unwrap_err();
    assert!(
        matches!(err, BilinearError::MalformedFeatures { line: 2, .. }),
        "{err}"
    );
}

#[test]
fn rejects_missing_header() {
    assert!(load_features("a 1 2 3\n".as_bytes()).is_err());
}

proptest! {
    #[test]
    fn write_then_load_is_exact(
        rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 5), 1..8),
    ) {
        let mut store = FeatureStore::new(5);
        for (i, z) in rows.iter().enumerate() {
            store.insert(format!("image{i}"), z.clone()).unwrap();
        }
        let mut bytes = Vec::new();
        store.write(&mut bytes).unwrap();
        let back = load_features(&bytes[..]).unwrap();
        prop_assert_eq!(back.dim(), 5);
        for (i, z) in rows.iter().enumerate() {
            let got = back.get(&format!("image{i}")).unwrap();
            prop_assert!(got.iter().zip(z).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }
}
