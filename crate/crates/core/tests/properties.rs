use posediff_core::metrics::{auc, joint_errors, mpjpe, p_mpjpe, pck, procrustes_align, Alignment};
use posediff_core::tensor::Tensor;
use proptest::prelude::*;

const J: usize = 6;

fn pose() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-500.0f64..500.0, J * 3).prop_map(|v| Tensor::from_vec(vec![J, 3], v).unwrap())
}

fn rms(pred: &Tensor, gt: &Tensor) -> f64 {
    let e = joint_errors(pred, gt).unwrap();
    (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt()
}

proptest! {
    #[test]
    fn alignment_is_a_least_squares_fit(pred in pose(), gt in pose()) {
        let sim = rms(&procrustes_align(&pred, &gt, Alignment::Similarity).unwrap(), &gt);
        let rigid = rms(&procrustes_align(&pred, &gt, Alignment::Rigid).unwrap(), &gt);
        prop_assert!(sim <= rigid + 1e-9);
        prop_assert!(rigid <= rms(&pred, &gt) + 1e-9);
    }

    #[test]
    fn aligned_error_never_exceeds_raw(pred in pose(), gt in pose()) {
        let raw = mpjpe(&pred, &gt).unwrap();
        prop_assert!(p_mpjpe(&pred, &gt, Alignment::Similarity).unwrap() <= raw + 1e-9);
    }

    #[test]
    fn mpjpe_is_symmetric_and_zero_on_itself(a in pose(), b in pose()) {
        prop_assert_eq!(mpjpe(&a, &b).unwrap(), mpjpe(&b, &a).unwrap());
        prop_assert_eq!(mpjpe(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn pck_is_monotone_and_bounds_auc(pred in pose(), gt in pose(), t in 0.0f64..300.0, dt in 0.0f64..100.0) {
        let lo = pck(&pred, &gt, t).unwrap();
        prop_assert!(lo <= pck(&pred, &gt, t + dt).unwrap());
        let a = auc(&pred, &gt).unwrap();
        prop_assert!(pck(&pred, &gt, 0.0).unwrap() <= a && a <= pck(&pred, &gt, 150.0).unwrap());
    }
}
