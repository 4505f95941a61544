use proptest::prelude::*;

use mvmesh::geometry::{procrustes_align, rotate_points, Rotation};
use mvmesh::losses::{mpjpe, pa_mpjpe};
use mvmesh::model::{AlignmentMode, FusionVariant};
use mvmesh::tensor::Matrix;
use mvmesh::train::TrainConfig;

fn points(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, n * 3).prop_map(move |v| Matrix::from_vec(n, 3, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trips(
        lr in 1e-6f64..1.0,
        epochs in 0usize..500,
        seed in any::<u64>(),
        mu in 0.0f64..2.0,
        smooth in any::<bool>(),
        fusion in prop::sample::select(FusionVariant::ALL),
        alignment in prop::sample::select(AlignmentMode::ALL),
        n_views in 1usize..=4,
    ) {
        let c = TrainConfig { lr, epochs, seed, mu, smooth_loss: smooth, fusion_variant: fusion, alignment, n_views, ..TrainConfig::default() };
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn procrustes_undoes_similarity(
        x in points(10),
        w in prop::array::uniform3(-3.0f64..3.0),
        s in 0.2f64..4.0,
        t in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let r = Rotation::from_axis_angle(w);
        let rx = rotate_points(&r, &x);
        let y = Matrix::from_fn(10, 3, |i, c| s * rx[(i, c)] + t[c]);
        let sim = procrustes_align(&x, &y).unwrap();
        prop_assert!(sim.aligned.max_abs_diff(&y) < 1e-7);
        prop_assert!(pa_mpjpe(&x, &y).unwrap() < 1e-7);
    }

    #[test]
    fn alignment_never_hurts(p in points(14), q in points(14)) {
        prop_assert!(pa_mpjpe(&p, &q).unwrap() <= mpjpe(&p, &q) + 1e-12);
    }
}
