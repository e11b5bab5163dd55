use afa::container::{decode, encode, MAGIC};
use afa::pnm::{decode_image, decode_labels, encode_image, encode_labels};
use afa::FormatError;
use afa_core::{LabelImage, RgbImage, Tensor};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
        let len: usize = shape.iter().product();
        proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), len)
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #[test]
    fn container_round_trip_is_bit_exact(t in tensor()) {
        let back = decode(&encode(&t)).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn every_proper_prefix_is_rejected(t in tensor(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&t);
        let cut = cut.index(bytes.len());
        prop_assert!(decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn decoding_arbitrary_bytes_never_panics(mut bytes in proptest::collection::vec(any::<u8>(), 0..64), keep_magic in any::<bool>()) {
        if keep_magic && bytes.len() >= 8 {
            bytes[..8].copy_from_slice(&MAGIC);
        }
        let _ = decode(&bytes);
        let _ = decode_labels(&bytes, Some(21));
        let _ = decode_image(&bytes);
    }

    #[test]
    fn label_images_round_trip(h in 1usize..6, w in 1usize..6, seed in proptest::collection::vec(any::<u8>(), 36)) {
        let labels = LabelImage::new(h, w, seed[..h * w].to_vec()).unwrap();
        prop_assert_eq!(decode_labels(&encode_labels(&labels), None).unwrap(), labels);
    }

    #[test]
    fn eight_bit_images_round_trip(h in 1usize..5, w in 1usize..5, levels in proptest::collection::vec(any::<u8>(), 48)) {
        let px = (0..h * w)
            .map(|i| [0, 1, 2].map(|c| f32::from(levels[i * 3 + c]) / 255.0))
            .collect();
        let img = RgbImage::new(h, w, px).unwrap();
        prop_assert_eq!(decode_image(&encode_image(&img)).unwrap(), img);
    }
}

#[test]
fn container_error_kinds() {
    let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
    let bytes = encode(&t);
    assert!(matches!(
        decode(b"NOTATEN\x01\x01"),
        Err(FormatError::BadMagic)
    ));
    assert!(matches!(
        decode(&bytes[..bytes.len() - 4]),
        Err(FormatError::Truncated {
            expected: 49,
            actual: 45
        })
    ));
    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 3]);
    assert!(matches!(
        decode(&long),
        Err(FormatError::TrailingData { extra: 3 })
    ));
    let mut rank0 = MAGIC.to_vec();
    rank0.push(0);
    assert!(matches!(decode(&rank0), Err(FormatError::EmptyShape)));
    let mut nan = bytes;
    let at = nan.len() - 4;
    nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(
        decode(&nan),
        Err(FormatError::NonFinite { index: 5 })
    ));
}
