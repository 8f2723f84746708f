mod common;

use eigenmerge::ckptio::{CheckpointReader, Tensor};
use eigenmerge::taskvec::{
    apply_task_vector, apply_task_vector_to_file, derive_schema, extract_task_vector, read_vector,
    write_vector, FlatVector, ParamFilter,
};
use eigenmerge::{Checkpoint, Error, PROVENANCE_KEY};
use proptest::prelude::*;

/// Values on a 1/64 grid with small magnitude, so sums and differences are exact in f64.
fn dyadic(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-4096i32..4096).prop_map(|k| f64::from(k) / 64.0), len)
}

fn model(w: Vec<f64>, b: Vec<f64>, frozen: f64) -> Checkpoint {
    Checkpoint::from_entries([
        (
            "layer.w".to_string(),
            Tensor::from_f64(vec![3, 4], w).unwrap(),
        ),
        ("layer.b".to_string(), Tensor::from_f64(vec![4], b).unwrap()),
        (
            "frozen.emb".to_string(),
            Tensor::from_f64(vec![2], vec![frozen; 2]).unwrap(),
        ),
    ])
    .unwrap()
}

fn trainable() -> ParamFilter {
    ParamFilter::new(["layer.*"], Vec::<String>::new())
}

proptest! {
    #[test]
    fn apply_inverts_extract(pw in dyadic(12), pb in dyadic(4), fw in dyadic(12), fb in dyadic(4)) {
        let pre = model(pw, pb, 0.5);
        let ft = model(fw, fb, 0.5);
        let schema = derive_schema(&pre, &trainable()).unwrap();
        let tau = extract_task_vector(&ft, &pre, &schema).unwrap();
        let back = apply_task_vector(&pre, &tau, 1.0, &schema).unwrap();
        for (name, t) in &ft.tensors {
            prop_assert_eq!(back.get(name).unwrap().to_f64_vec(), t.to_f64_vec());
        }
    }

    #[test]
    fn extraction_is_linear_in_alpha(pw in dyadic(12), pb in dyadic(4), tw in dyadic(12), tb in dyadic(4), k in -8i32..=8) {
        let pre = model(pw, pb, 0.0);
        let schema = derive_schema(&pre, &trainable()).unwrap();
        let tau = FlatVector::new([tw, tb].concat(), schema.fingerprint());
        let alpha = f64::from(k) / 4.0;
        let edited = apply_task_vector(&pre, &tau, alpha, &schema).unwrap();
        let got = extract_task_vector(&edited, &pre, &schema).unwrap();
        prop_assert_eq!(got.values, tau.scaled(alpha).values);
    }
}

#[test]
fn schema_orders_by_name_and_skips_excluded() {
    let pre = model(vec![0.0; 12], vec![0.0; 4], 0.0);
    let schema = derive_schema(&pre, &trainable()).unwrap();
    let names: Vec<&str> = schema.entries().iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["layer.b", "layer.w"]);
    assert_eq!(schema.total_dim(), 16);
    assert_eq!(schema.entry("layer.w").unwrap().range(), 4..16);

    let none = ParamFilter::new(["layer.*"], ["layer.*"]);
    assert!(matches!(
        derive_schema(&pre, &none),
        Err(Error::InvalidArgument(_))
    ));
    let bad = ParamFilter::new(["layer.[w"], Vec::<String>::new());
    assert_eq!(derive_schema(&pre, &bad).unwrap_err().exit_code(), 2);
}

#[test]
fn fingerprint_depends_on_the_schema_only() {
    let a = model(vec![1.0; 12], vec![2.0; 4], 0.0);
    let b = model(vec![3.0; 12], vec![4.0; 4], 9.0);
    let sa = derive_schema(&a, &trainable()).unwrap();
    let sb = derive_schema(&b, &trainable()).unwrap();
    assert_eq!(sa.fingerprint(), sb.fingerprint());
    let all = derive_schema(&a, &ParamFilter::all()).unwrap();
    assert_ne!(all.fingerprint(), sa.fingerprint());

    let tau = FlatVector::zeros(all.total_dim(), all.fingerprint());
    assert!(matches!(
        apply_task_vector(&a, &tau, 1.0, &sa),
        Err(Error::DimMismatch { .. } | Error::FingerprintMismatch { .. })
    ));
}

#[test]
fn mismatched_shapes_and_non_finite_values_are_rejected() {
    let pre = model(vec![0.0; 12], vec![0.0; 4], 0.0);
    let schema = derive_schema(&pre, &trainable()).unwrap();

    let mut reshaped = pre.clone();
    reshaped.tensors.insert(
        "layer.w".into(),
        Tensor::from_f64(vec![4, 3], vec![0.0; 12]).unwrap(),
    );
    assert!(matches!(
        extract_task_vector(&reshaped, &pre, &schema),
        Err(Error::ShapeMismatch { .. })
    ));

    let mut missing = pre.clone();
    missing.tensors.remove("layer.b");
    assert!(matches!(
        extract_task_vector(&missing, &pre, &schema),
        Err(Error::MissingTensor(_))
    ));

    let mut nan = model(vec![0.0; 12], vec![0.0; 4], 0.0);
    nan.tensors.insert(
        "layer.b".into(),
        Tensor::from_f64(vec![4], vec![0.0, f64::NAN, 0.0, 0.0]).unwrap(),
    );
    let err = extract_task_vector(&nan, &pre, &schema).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn f32_checkpoints_keep_their_dtype() {
    let pre = Checkpoint::from_entries([(
        "w".to_string(),
        Tensor::from_f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap(),
    )])
    .unwrap();
    let ft = Checkpoint::from_entries([(
        "w".to_string(),
        Tensor::from_f32(vec![3], vec![1.5, 1.75, 3.0]).unwrap(),
    )])
    .unwrap();
    let schema = derive_schema(&pre, &ParamFilter::all()).unwrap();
    let tau = extract_task_vector(&ft, &pre, &schema).unwrap();
    assert_eq!(tau.values, vec![0.5, -0.25, 0.0]);
    let back = apply_task_vector(&pre, &tau, 1.0, &schema).unwrap();
    assert_eq!(back.get("w").unwrap().dtype(), eigenmerge::DType::F32);
    assert_eq!(back.get("w").unwrap().to_f64_vec(), vec![1.5, 1.75, 3.0]);
}

#[test]
fn vectors_and_streamed_checkpoints_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let pre = model((0..12).map(f64::from).collect(), vec![1.0; 4], 7.0);
    let schema = derive_schema(&pre, &trainable()).unwrap();
    let tau = FlatVector::new(
        (0..16).map(|i| f64::from(i) / 8.0).collect(),
        schema.fingerprint(),
    );

    let vpath = dir.path().join("tau.evv");
    write_vector(&tau, &vpath).unwrap();
    assert_eq!(read_vector(&vpath).unwrap(), tau);

    let cpath = dir.path().join("edited.evc");
    apply_task_vector_to_file(&pre, &tau, 2.0, &schema, &cpath).unwrap();
    let streamed = CheckpointReader::open(&cpath).unwrap();
    let in_memory = apply_task_vector(&pre, &tau, 2.0, &schema).unwrap();
    assert_eq!(streamed.read_all().unwrap(), in_memory);
    assert_eq!(
        in_memory.get("frozen.emb").unwrap().to_f64_vec(),
        vec![7.0, 7.0]
    );
    let record: serde_json::Value =
        serde_json::from_str(&in_memory.metadata[PROVENANCE_KEY]).unwrap();
    assert_eq!(record["op"], "apply_task_vector");
}
