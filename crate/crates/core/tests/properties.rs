use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scoreaug::checkpoint::Checkpoint;
use scoreaug::dataset::EmpiricalDataset;
use scoreaug::model::NetConfig;
use scoreaug::transforms::{apply_transform, build_operator, sample_params, AugKind, AugmentationConfig, AugmentationParams, ImageShape};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e3..1e3f64, -1e-200..1e-200f64, Just(0.0), Just(-0.0), Just(f64::MAX), Just(f64::MIN_POSITIVE)]
}

fn points() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6, 1usize..10).prop_flat_map(|(d, n)| prop::collection::vec(prop::collection::vec(finite(), d), n))
}

fn all_kinds() -> Vec<AugKind> {
    vec![AugKind::Identity, AugKind::Brightness, AugKind::Translation, AugKind::Cutout, AugKind::Rotation]
}

proptest! {
    #[test]
    fn dataset_files_round_trip_bit_exactly(pts in points()) {
        let ds = EmpiricalDataset::new(pts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.txt");
        ds.save(&path).unwrap();
        let back = EmpiricalDataset::load(&path).unwrap();
        for (a, b) in ds.points().iter().flatten().zip(back.points().iter().flatten()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back.len(), ds.len());
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), width in 1usize..8, cond in 0usize..4) {
        let config = NetConfig { data_dim: 3, cond_dim: cond, noise_embed_dim: 4, hidden: vec![width, width + 1] };
        let p = config.param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..p).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect::<Vec<_>>();
        let c = Checkpoint { config, sigma_data: 0.5, theta: draw(), ema_theta: draw(), adam_step: seed % 1000, adam_m: draw(), adam_v: draw() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        c.save(&path).unwrap();
        prop_assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }

    #[test]
    fn operators_match_direct_application_and_adjoint(seed in any::<u64>(), size in 2usize..7) {
        let shape = ImageShape::new(size, size, 1);
        let cfg = AugmentationConfig::new(shape, all_kinds());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = sample_params(&mut rng, &cfg).unwrap();
        let op = build_operator(&params, shape).unwrap();
        let d = shape.dim();
        let x: Vec<f64> = (0..d).map(|i| ((i as u64 ^ seed) % 97) as f64 / 97.0 - 0.5).collect();
        let y: Vec<f64> = (0..d).map(|i| ((i as u64 * 31 + seed) % 89) as f64 / 89.0 - 0.5).collect();
        prop_assert_eq!(op.apply(&x), apply_transform(&params, shape, &x).unwrap());
        let lhs: f64 = op.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(op.adjoint(&y)).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn params_notation_round_trips(seed in any::<u64>()) {
        let cfg = AugmentationConfig::new(ImageShape::new(8, 8, 1), all_kinds());
        let params = sample_params(&mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        prop_assert_eq!(AugmentationParams::parse(&params.to_string()).unwrap(), params);
    }
}
