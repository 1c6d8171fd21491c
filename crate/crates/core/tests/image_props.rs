use proptest::prelude::*;
use rsaforge_core::image::{bilinear_resize, normalize_image};
use rsaforge_core::Tensor;

fn image() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-5.0f32..5.0, c * h * w)
            .prop_map(move |data| Tensor::new(&[c, h, w], data).unwrap())
    })
}

proptest! {
    #[test]
    fn resize_to_same_size_is_identity(img in image()) {
        let s = img.shape().to_vec();
        prop_assert_eq!(bilinear_resize(&img, s[1], s[2]).unwrap(), img);
    }

    #[test]
    fn resize_stays_within_input_range(img in image(), oh in 1usize..12, ow in 1usize..12) {
        let out = bilinear_resize(&img, oh, ow).unwrap();
        prop_assert_eq!(out.shape(), &[img.shape()[0], oh, ow][..]);
        let plane = img.shape()[1] * img.shape()[2];
        for (c, chunk) in img.data().chunks(plane).enumerate() {
            let lo = chunk.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = chunk.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            for &v in &out.data()[c * oh * ow..(c + 1) * oh * ow] {
                prop_assert!(v >= lo && v <= hi, "{} outside [{}, {}]", v, lo, hi);
            }
        }
    }

    #[test]
    fn constant_image_stays_constant(h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12) {
        let img = Tensor::full(&[2, h, w], 7.0).unwrap();
        let out = bilinear_resize(&img, oh, ow).unwrap();
        prop_assert!(out.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn normalization_inverts(
        data in prop::collection::vec(0.0f32..1.0, 3 * 4 * 5),
        mean in prop::array::uniform3(0.0f32..1.0),
        std in prop::array::uniform3(0.05f32..2.0),
    ) {
        let img = Tensor::new(&[3, 4, 5], data).unwrap();
        let out = normalize_image(&img, mean, std).unwrap();
        for (k, (&x, &y)) in img.data().iter().zip(out.data()).enumerate() {
            let c = k / 20;
            prop_assert!((y * std[c] + mean[c] - x).abs() <= 1e-6);
        }
    }
}

#[test]
fn rejects_non_positive_std() {
    let img = Tensor::zeros(&[3, 2, 2]).unwrap();
    assert!(normalize_image(&img, [0.0; 3], [1.0, 0.0, 1.0]).is_err());
}
