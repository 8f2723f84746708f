mod common;

use eigenmerge::ckptio::{
    diff_schemas, from_bytes, read_checkpoint, to_canonical_bytes, write_checkpoint,
    CheckpointReader, Tensor,
};
use eigenmerge::{Checkpoint, Error};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonical_bytes_survive_a_decode(seed in any::<u64>(), max in 1usize..=50) {
        let ckpt = common::random_checkpoint(&mut common::rng(seed), max);
        let bytes = to_canonical_bytes(&ckpt).unwrap();
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(to_canonical_bytes(&back).unwrap(), bytes);
        prop_assert_eq!(back.infos(), ckpt.infos());
        prop_assert_eq!(&back.metadata, &ckpt.metadata);
    }

    #[test]
    fn any_truncation_is_rejected(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let ckpt = common::random_checkpoint(&mut common::rng(seed), 5);
        let bytes = to_canonical_bytes(&ckpt).unwrap();
        let keep = ((bytes.len() as f64) * cut) as usize;
        prop_assume!(keep < bytes.len());
        prop_assert!(from_bytes(&bytes[..keep]).is_err());
    }
}

#[test]
fn file_round_trip_matches_memory_image() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = common::rng(11);
    for i in 0..20 {
        let ckpt = common::random_checkpoint(&mut rng, 12);
        let path = dir.path().join(format!("c{i}.evc"));
        write_checkpoint(&ckpt, &path).unwrap();
        let on_disk = std::fs::read(&path).unwrap();
        assert_eq!(on_disk, to_canonical_bytes(&ckpt).unwrap());

        let reader = CheckpointReader::open(&path).unwrap();
        for (name, tensor) in &ckpt.tensors {
            let t = reader.read_tensor(name).unwrap();
            assert_eq!(t.shape(), tensor.shape());
            assert_eq!(t.dtype(), tensor.dtype());
        }
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(to_canonical_bytes(&back).unwrap(), on_disk);
    }
}

fn splice_header(bytes: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
    let h = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + h]).unwrap();
    edit(&mut header);
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..4].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[12 + h..]);
    out
}

fn two_tensor_image() -> Vec<u8> {
    let ckpt = Checkpoint::from_entries([
        (
            "a".to_string(),
            Tensor::from_f64(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        ),
        (
            "b".to_string(),
            Tensor::from_f32(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap(),
        ),
    ])
    .unwrap();
    to_canonical_bytes(&ckpt).unwrap()
}

#[test]
fn malformed_headers_are_format_errors() {
    let good = two_tensor_image();
    assert!(from_bytes(&good).is_ok());

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let overlapping = splice_header(&good, |h| h["tensors"]["b"]["offset"] = 16.into());
    let wrong_nbytes = splice_header(&good, |h| h["tensors"]["b"]["nbytes"] = 12.into());
    let unknown_dtype = splice_header(&good, |h| h["tensors"]["a"]["dtype"] = "f16".into());
    let past_end = splice_header(&good, |h| h["tensors"]["b"]["offset"] = 4096.into());
    let duplicate = {
        let h = u64::from_le_bytes(good[4..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&good[12..12 + h]).unwrap();
        let entry = text
            .split("\"a\":")
            .nth(1)
            .unwrap()
            .split('}')
            .next()
            .unwrap();
        let doubled = text.replacen("\"a\":", &format!("\"a\":{entry}}},\"a\":"), 1);
        [
            &good[..4],
            &(doubled.len() as u64).to_le_bytes()[..],
            doubled.as_bytes(),
            &good[12 + h..],
        ]
        .concat()
    };

    for (what, bytes) in [
        ("bad magic", bad_magic),
        ("truncated", good[..good.len() - 3].to_vec()),
        ("preamble only", good[..8].to_vec()),
        ("overlapping offsets", overlapping),
        ("nbytes disagrees with shape", wrong_nbytes),
        ("unknown dtype", unknown_dtype),
        ("offset past end", past_end),
        ("duplicate tensor name", duplicate),
    ] {
        match from_bytes(&bytes) {
            Err(e) => assert_eq!(e.exit_code(), 3, "{what}: {e}"),
            Ok(_) => panic!("{what} was accepted"),
        }
    }
}

#[test]
fn unknown_file_is_an_io_error() {
    let err = read_checkpoint("/nonexistent/x.evc").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn schema_diff_reports_each_kind_of_change() {
    let a = Checkpoint::from_entries([
        (
            "same".to_string(),
            Tensor::from_f64(vec![2], vec![0.0; 2]).unwrap(),
        ),
        (
            "reshaped".to_string(),
            Tensor::from_f64(vec![4], vec![0.0; 4]).unwrap(),
        ),
        (
            "only_a".to_string(),
            Tensor::from_f64(vec![1], vec![0.0]).unwrap(),
        ),
    ])
    .unwrap();
    let b = Checkpoint::from_entries([
        (
            "same".to_string(),
            Tensor::from_f64(vec![2], vec![1.0; 2]).unwrap(),
        ),
        (
            "reshaped".to_string(),
            Tensor::from_f64(vec![2, 2], vec![0.0; 4]).unwrap(),
        ),
        (
            "only_b".to_string(),
            Tensor::from_f32(vec![1], vec![0.0]).unwrap(),
        ),
    ])
    .unwrap();
    let report = diff_schemas(&a, &b);
    assert_eq!(report.only_in_a, vec!["only_a".to_string()]);
    assert_eq!(report.only_in_b, vec!["only_b".to_string()]);
    assert_eq!(report.mismatches.len(), 1);
    assert!(diff_schemas(&a, &a).is_empty());
}
