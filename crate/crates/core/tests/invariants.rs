//! Property-based checks of the structural invariants the rest of the code
//! leans on: transforms that must invert each other, distributions that must
//! normalize, corruption masks that must respect their coverage contract,
//! and schedules that must stay inside their declared range.

use dabformer_core::gabor;
use dabformer_core::graph::Graph;
use dabformer_core::harness::{
    corrupt, epoch_order, read_image, stream_rng, write_image, CorruptionSpec,
};
use dabformer_core::losses::psnr;
use dabformer_core::model::ModelConfig;
use dabformer_core::optim::cosine_lr;
use dabformer_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn filled(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn haar_analysis_inverts_and_preserves_energy(
        seed in 0u64..1_000_000,
        c in 1usize..3,
        h2 in 1usize..7,
        w2 in 1usize..7,
    ) {
        let x = filled(&[1, c, 2 * h2, 2 * w2], seed, -2.0, 2.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), false);
        let bands = g.dwt2_stacked(v).unwrap();
        let back = g.idwt2_stacked(bands).unwrap();
        prop_assert!(max_abs_diff(g.val(back), &x) <= 1e-12);

        let ex: f64 = x.data().iter().map(|v| v * v).sum();
        let eb: f64 = g.val(bands).data().iter().map(|v| v * v).sum();
        prop_assert!((ex - eb).abs() <= 1e-9 * ex.max(1.0));
    }

    #[test]
    fn fourier_analysis_inverts(
        seed in 0u64..1_000_000,
        c in 1usize..3,
        h in 2usize..9,
        w in 2usize..11,
    ) {
        let x = filled(&[1, c, h, w], seed, -2.0, 2.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), false);
        let spec = g.rfft2_stacked(v).unwrap();
        let back = g.irfft2_stacked(spec, w).unwrap();
        prop_assert!(max_abs_diff(g.val(back), &x) <= 1e-10);
    }

    #[test]
    fn softmax_rows_normalize_and_ignore_shifts(
        seed in 0u64..1_000_000,
        shift in -5.0f64..5.0,
        rows in 1usize..5,
        cols in 2usize..9,
    ) {
        let x = filled(&[1, 1, rows, cols], seed, -4.0, 4.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), false);
        let s = g.softmax(v, 3).unwrap();
        for r in 0..rows {
            let row: f64 = (0..cols).map(|j| g.val(s).at4(0, 0, r, j)).sum();
            prop_assert!((row - 1.0).abs() <= 1e-12);
        }
        for val in g.val(s).data() {
            prop_assert!(*val > 0.0 && *val <= 1.0);
        }

        let shifted = g.add_scalar(v, shift).unwrap();
        let s2 = g.softmax(shifted, 3).unwrap();
        prop_assert!(max_abs_diff(g.val(s), g.val(s2)) <= 1e-12);
    }

    #[test]
    fn pixel_shuffle_round_trips(
        seed in 0u64..1_000_000,
        c in 1usize..3,
        h in 1usize..5,
        w in 1usize..5,
        r in 2usize..4,
    ) {
        let x = filled(&[1, c * r * r, h, w], seed, -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), false);
        let up = g.pixel_shuffle(v, r).unwrap();
        let down = g.pixel_unshuffle(up, r).unwrap();
        prop_assert_eq!(g.val(down).data(), x.data());
    }

    #[test]
    fn patch_split_round_trips(
        seed in 0u64..1_000_000,
        b in 1usize..3,
        c in 1usize..3,
        gh in 1usize..4,
        gw in 1usize..4,
        p in 1usize..4,
    ) {
        let x = filled(&[b, c, gh * p, gw * p], seed, -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), false);
        let patches = g.patch_split(v, p).unwrap();
        let merged = g.patch_merge(patches, gh, gw).unwrap();
        prop_assert_eq!(g.val(merged).data(), x.data());
    }

    #[test]
    fn cosine_schedule_stays_inside_its_range_and_never_rises(
        lr_init in 1e-5f64..1e-2,
        floor_frac in 1e-4f64..0.9,
        n in 2usize..400,
    ) {
        let lr_min = lr_init * floor_frac;
        let mut prev = f64::INFINITY;
        for t in 0..=n {
            let lr = cosine_lr(t, n, lr_init, lr_min);
            prop_assert!(lr <= lr_init + 1e-15 && lr >= lr_min - 1e-15);
            prop_assert!(lr <= prev + 1e-15);
            prev = lr;
        }
        prop_assert!((cosine_lr(0, n, lr_init, lr_min) - lr_init).abs() <= 1e-15);
        prop_assert!((cosine_lr(n, n, lr_init, lr_min) - lr_min).abs() <= 1e-15);
    }

    #[test]
    fn shuffled_epoch_order_is_a_permutation(
        n in 1usize..200,
        seed in 0u64..1_000_000,
        epoch in 0u64..50,
    ) {
        let order = epoch_order(n, seed, epoch);
        let again = epoch_order(n, seed, epoch);
        prop_assert_eq!(&order, &again);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn gabor_kernels_stay_bounded_by_their_envelope(
        lambda in 0.1f64..8.0,
        theta in 0.0f64..std::f64::consts::PI,
    ) {
        let vals = gabor::kernel_values(lambda, theta, 0.0, 2.0 * std::f64::consts::PI, 0.5, 7);
        for v in vals {
            prop_assert!(v.is_finite() && v.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn stream_rng_is_deterministic_per_step(
        seed in 0u64..1_000_000,
        iter in 0u64..1_000_000,
    ) {
        let a = stream_rng(seed, iter).next_u64();
        let b = stream_rng(seed, iter).next_u64();
        prop_assert_eq!(a, b);
        let c = stream_rng(seed, iter.wrapping_add(1)).next_u64();
        prop_assert_ne!(a, c);
    }

    #[test]
    fn config_fingerprints_separate_different_seeds(
        sa in 0u64..1_000_000,
        delta in 1u64..1_000_000,
    ) {
        let mut a = ModelConfig::tiny();
        a.seed = sa;
        let mut b = ModelConfig::tiny();
        b.seed = sa + delta;
        prop_assert_eq!(a.fingerprint(), a.fingerprint());
        prop_assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn peak_signal_noise_ratio_is_symmetric(
        seed in 0u64..1_000_000,
    ) {
        let a = filled(&[1, 3, 6, 6], seed, 0.0, 1.0);
        let b = filled(&[1, 3, 6, 6], seed ^ 0xabcd, 0.0, 1.0);
        let ab = psnr(&a, &b).unwrap();
        let ba = psnr(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(psnr(&a, &a).unwrap().is_infinite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn corruption_respects_coverage_and_leaves_the_rest_untouched(
        seed in 0u64..1_000_000,
        rain in any::<bool>(),
        lo100 in 10u32..30,
    ) {
        let lo = lo100 as f64 / 100.0;
        let hi = lo + 0.15;
        let spec = if rain {
            CorruptionSpec::rain_streaks(lo, hi, 8, 16, 75.0)
        } else {
            CorruptionSpec::noise_blocks(lo, hi, 4, 8)
        };
        let clean = filled(&[1, 3, 32, 32], seed, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let pair = corrupt(&clean, &spec, &mut rng).unwrap();

        let mask = &pair.mask;
        let total = 32.0 * 32.0;
        let covered: f64 = mask.data().iter().sum();
        prop_assert!(covered / total >= lo - 1e-12);
        prop_assert!(covered / total <= hi + 1e-12);
        for v in mask.data() {
            prop_assert!(*v == 0.0 || *v == 1.0);
        }
        for ch in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    if mask.at4(0, 0, y, x) == 0.0 {
                        let c = clean.at4(0, ch, y, x);
                        let k = pair.corrupted.at4(0, ch, y, x);
                        prop_assert!(c.to_bits() == k.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn image_files_round_trip_to_quantization_accuracy(
        seed in 0u64..1_000_000,
        h in 4usize..10,
        w in 4usize..10,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.ppm");
        let t = filled(&[1, 3, h, w], seed, 0.0, 1.0);
        write_image(&path, &t).unwrap();
        let back = read_image(&path).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(max_abs_diff(&back, &t) <= 0.5 / 255.0 + 1e-12);
    }
}
