use proptest::prelude::*;
use roadfuse_tensor::{ConvSpec, Tensor};

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 12), axis in 0usize..2) {
        let y = Tensor::<f64>::from_vec(&[3, 4], vals).unwrap().softmax(axis).unwrap();
        let (outer, len, stride) = if axis == 0 { (4, 3, 4) } else { (3, 4, 1) };
        for o in 0..outer {
            let base = if axis == 0 { o } else { o * 4 };
            let s: f64 = (0..len).map(|j| y.data()[base + j * stride]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn conv_and_resize_extents_follow_formula(
        h in 3usize..12, w in 3usize..12, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, pad in 0usize..3, oh in 1usize..20, ow in 1usize..20,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let spec = ConvSpec::new(2, 3, k).stride(stride).padding(pad).bias(false);
        let x = Tensor::<f32>::ones(&[1, 2, h, w]);
        let y = x.conv2d(&spec, &Tensor::ones(&spec.weight_shape()), None).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
        let r = x.bilinear_resize(oh, ow).unwrap();
        prop_assert_eq!(r.shape(), &[1, 2, oh, ow]);
    }
}
