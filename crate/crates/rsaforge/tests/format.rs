use proptest::prelude::*;
use rsaforge::format::{
    decode_archive, decode_tensor, encode_archive, encode_tensor, FormatError,
};
use rsaforge_core::Tensor;

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..6, 1..=4).prop_flat_map(|shape| {
        let len: usize = shape.iter().product();
        prop::collection::vec(-1e6f32..1e6, len)
            .prop_map(move |data| Tensor::new(&shape, data).unwrap())
    })
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn tensor_round_trip_is_bitwise(t in tensor_strategy(), name in "[a-z0-9._]{0,40}") {
        let (n, back) = decode_tensor(&encode_tensor(&name, &t).unwrap()).unwrap();
        prop_assert_eq!(n, name);
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn archive_round_trip_keeps_order(ts in prop::collection::vec(tensor_strategy(), 0..5)) {
        let names: Vec<String> = (0..ts.len()).map(|i| format!("t{}", ts.len() - i)).collect();
        let bytes = encode_archive(names.iter().map(String::as_str).zip(&ts)).unwrap();
        let back = decode_archive(&bytes).unwrap();
        prop_assert_eq!(back.len(), ts.len());
        for ((n, b), (name, t)) in back.iter().zip(names.iter().zip(&ts)) {
            prop_assert_eq!(n, name);
            prop_assert_eq!(bits(b), bits(t));
        }
    }

    #[test]
    fn every_truncation_is_reported(cut in 0usize..80) {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_tensor("x", &t).unwrap();
        prop_assume!(cut < bytes.len());
        let err = decode_tensor(&bytes[..cut]).unwrap_err();
        let truncated = matches!(err, FormatError::Truncated { actual, .. } if actual == cut);
        prop_assert!(truncated, "{:?}", err);
    }
}

#[test]
fn size_follows_field_layout() {
    let data: Vec<f32> = (0..60).map(|i| i as f32 * 0.5 - 7.0).collect();
    let t = Tensor::new(&[3, 4, 5], data).unwrap();
    let name = "stage1";
    let bytes = encode_tensor(name, &t).unwrap();
    // magic, version, name length, name, ndim, three dims, 60 floats
    let fields = [4, 4, 4, name.len(), 4, 3 * 4, 60 * 4];
    assert_eq!(bytes.len(), fields.iter().sum::<usize>());
    assert_eq!(bytes.len(), 16 + name.len() + 12 + 240);
    assert_eq!(&bytes[..4], b"RDMT");
    assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    assert_eq!(&bytes[8..12], &6u32.to_le_bytes());
    assert_eq!(&bytes[12..18], b"stage1");
    assert_eq!(&bytes[18..22], &3u32.to_le_bytes());
    assert_eq!(&bytes[22..26], &3u32.to_le_bytes());
    assert_eq!(&bytes[30..34], &5u32.to_le_bytes());
    assert_eq!(&bytes[34..38], &(-7.0f32).to_le_bytes());
}

#[test]
fn truncated_payload_names_both_sizes() {
    let t = Tensor::new(&[3, 4, 5], vec![0.25; 60]).unwrap();
    let bytes = encode_tensor("acts", &t).unwrap();
    let cut = bytes.len() - 10;
    assert_eq!(
        decode_tensor(&bytes[..cut]).unwrap_err(),
        FormatError::Truncated {
            expected: bytes.len(),
            actual: cut
        }
    );
    let msg = decode_tensor(&bytes[..cut]).unwrap_err().to_string();
    assert!(msg.contains(&bytes.len().to_string()) && msg.contains(&cut.to_string()), "{msg}");
}

#[test]
fn bad_magic_and_version() {
    let t = Tensor::new(&[1], vec![0.0]).unwrap();
    let mut bytes = encode_tensor("", &t).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    assert_eq!(
        decode_tensor(&bytes).unwrap_err(),
        FormatError::BadMagic {
            found: *b"XXXX",
            expected: *b"RDMT"
        }
    );
    let mut bytes = encode_tensor("", &t).unwrap();
    bytes[4] = 2;
    assert_eq!(decode_tensor(&bytes).unwrap_err(), FormatError::UnsupportedVersion(2));
    // an archive is not a tensor record
    let archive = encode_archive([("a", &t)]).unwrap();
    assert!(matches!(decode_tensor(&archive), Err(FormatError::BadMagic { .. })));
}

#[test]
fn non_finite_values_are_rejected_with_index() {
    let t = Tensor::new(&[4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let mut bytes = encode_tensor("w", &t).unwrap();
    let at = bytes.len() - 8;
    bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    assert_eq!(
        decode_tensor(&bytes).unwrap_err(),
        FormatError::NonFinite {
            name: "w".into(),
            index: 2
        }
    );
    bytes[at..at + 4].copy_from_slice(&f32::NEG_INFINITY.to_le_bytes());
    assert!(matches!(decode_tensor(&bytes), Err(FormatError::NonFinite { index: 2, .. })));
}

#[test]
fn structural_errors() {
    let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    let mut bytes = encode_tensor("t", &t).unwrap();
    bytes.push(0);
    assert_eq!(decode_tensor(&bytes).unwrap_err(), FormatError::TrailingBytes(1));

    let dup = encode_archive([("a", &t), ("a", &t)]).unwrap_err();
    assert_eq!(dup, FormatError::DuplicateName("a".into()));

    // a zero dimension is not a valid shape
    let mut bytes = encode_tensor("t", &t).unwrap();
    bytes[17..21].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(decode_tensor(&bytes), Err(FormatError::BadShape(_))));

    let long = "n".repeat(256);
    assert_eq!(encode_tensor(&long, &t).unwrap_err(), FormatError::NameTooLong(256));
}
