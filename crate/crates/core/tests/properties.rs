use esrkit::blocks::{build_reference_span, fuse_graph};
use esrkit::losses::{self, affinity_distill_loss, fft2};
use esrkit::metrics::{psnr, PsnrMode};
use esrkit::profiler::{count_flops, FlopConvention};
use esrkit::reparam::random_rep_block;
use esrkit::scoring::{metric_score, rank, Baseline, MetricRecord, ScoreWeights};
use esrkit::tensor::{conv2d, conv2d_oracle, pixel_shuffle, pixel_unshuffle, scale, ConvSpec};
use esrkit::{Shape, Tensor, Tensor64};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn rand_t(seed: u64, shape: Shape) -> Tensor {
    Tensor::random_uniform(shape, &mut StdRng::seed_from_u64(seed), -1.0, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fused_block_matches_branches(seed in any::<u64>(), cin in 1usize..9, cout in 1usize..9, h in 1usize..10, w in 1usize..10) {
        let mut rng = StdRng::seed_from_u64(seed);
        let block64 = random_rep_block::<f64, _>(&mut rng, cin, cout).unwrap();
        let x = Tensor64::random_uniform(Shape::new(1, cin, h, w), &mut rng, -1.0, 1.0);
        let fused = block64.fuse().unwrap();
        let d = block64.forward(&x).unwrap().max_abs_diff(&conv2d(&x, &fused).unwrap()).unwrap();
        prop_assert!(d <= 1e-10, "f64 diff {d}");

        let block32 = block64.cast::<f32>();
        let x32 = x.cast::<f32>();
        let d = block32.forward(&x32).unwrap().max_abs_diff(&conv2d(&x32, &block32.fuse().unwrap()).unwrap()).unwrap();
        prop_assert!(d <= 1e-4, "f32 diff {d}");
    }

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = StdRng::seed_from_u64(seed);
        let spec: ConvSpec<f64> = ConvSpec::same(Tensor64::random_uniform(Shape::new(3, 2, 3, 3), &mut rng, -1.0, 1.0), None);
        let x = Tensor64::random_uniform(Shape::new(1, 2, 5, 6), &mut rng, -1.0, 1.0);
        let y = Tensor64::random_uniform(Shape::new(1, 2, 5, 6), &mut rng, -1.0, 1.0);
        let mix = Tensor64::from_fn(x.shape(), |n, c, i, j| a * x.at(n, c, i, j) + b * y.at(n, c, i, j));
        let lhs = conv2d(&mix, &spec).unwrap();
        let (cx, cy) = (conv2d(&x, &spec).unwrap(), conv2d(&y, &spec).unwrap());
        let rhs = Tensor64::from_fn(cx.shape(), |n, c, i, j| a * cx.at(n, c, i, j) + b * cy.at(n, c, i, j));
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
    }

    #[test]
    fn strided_grouped_conv_matches_oracle(seed in any::<u64>(), g in 1usize..4, cpg in 1usize..4, opg in 1usize..3,
                                           k in 1usize..4, s in 1usize..3, p in 0usize..3, d in 1usize..3) {
        let mut rng = StdRng::seed_from_u64(seed);
        let span = d * (k - 1) + 1;
        let (h, w) = (span + 3, span + 5);
        let spec = ConvSpec::new(Tensor::random_uniform(Shape::new(g * opg, cpg, k, k), &mut rng, -1.0, 1.0), Some(vec![0.25; g * opg]))
            .with_groups(g).with_stride((s, s)).with_padding((p, p)).with_dilation((d, d));
        let x = Tensor::random_uniform(Shape::new(2, g * cpg, h, w), &mut rng, -1.0, 1.0);
        let diff = conv2d(&x, &spec).unwrap().max_abs_diff(&conv2d_oracle(&x, &spec).unwrap()).unwrap();
        prop_assert!(diff <= 1e-5);
    }

    #[test]
    fn shuffle_round_trips(seed in any::<u64>(), c in 1usize..4, r in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let x = rand_t(seed, Shape::new(1, c * r * r, h, w));
        let y = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(1, c, h * r, w * r));
        prop_assert_eq!(pixel_unshuffle(&y, r).unwrap(), x);
    }

    #[test]
    fn psnr_is_symmetric(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let a = Tensor::random_uniform(Shape::new(1, 3, 12, 12), &mut rng, 0.0, 255.0);
        let b = Tensor::random_uniform(Shape::new(1, 3, 12, 12), &mut rng, 0.0, 255.0);
        let (p, q) = (psnr(&a, &b, 4, PsnrMode::Quantized).unwrap(), psnr(&b, &a, 4, PsnrMode::Quantized).unwrap());
        prop_assert!(p == q);
        prop_assert!(p >= 0.0);
    }

    #[test]
    fn losses_are_nonnegative_and_symmetric(seed in any::<u64>()) {
        let a = rand_t(seed, Shape::new(1, 2, 5, 4));
        let b = rand_t(seed ^ 1, Shape::new(1, 2, 5, 4));
        let all = |x: &Tensor, y: &Tensor| [
            losses::l1(x, y).unwrap(),
            losses::mse(x, y).unwrap(),
            losses::charbonnier(x, y, 1e-3).unwrap(),
            losses::fft_freq_loss(x, y, 0.1).unwrap(),
            losses::dct_loss(x, y).unwrap(),
            losses::edge_loss(x, y, 3).unwrap(),
        ];
        let (ab, ba) = (all(&a, &b), all(&b, &a));
        for (u, v) in ab.iter().zip(&ba) {
            prop_assert!(*u >= 0.0);
            prop_assert!((u - v).abs() <= 1e-12 * u.max(1.0));
        }
    }

    #[test]
    fn parseval(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let x: Vec<f64> = rand_t(seed, Shape::new(1, 1, h, w)).data().iter().map(|&v| v as f64).collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spec: f64 = fft2(&x, h, w).iter().map(|z| z.norm_sqr()).sum::<f64>() / (h * w) as f64;
        prop_assert!((energy - spec).abs() <= 1e-4 * energy.max(1e-12));
    }

    #[test]
    fn affinity_ignores_feature_scale(seed in any::<u64>(), k in 0.1f64..10.0) {
        let s = vec![rand_t(seed, Shape::new(1, 3, 3, 4))];
        let t: Vec<Tensor> = s.iter().map(|f| scale(f, k)).collect();
        prop_assert!(affinity_distill_loss(&s, &t).unwrap() <= 1e-6);
    }

    #[test]
    fn metric_score_increasing(a in 0.01f64..100.0, b in 0.01f64..100.0, base in 0.1f64..50.0) {
        let (sa, sb) = (metric_score(a, base).unwrap(), metric_score(b, base).unwrap());
        prop_assert_eq!(a < b, sa < sb);
        prop_assert_eq!(metric_score(base, base).unwrap(), 2f64.exp());
    }

    #[test]
    fn rank_invariant_under_common_scaling(seed in any::<u64>(), k in 0.2f64..5.0) {
        let mut rng = StdRng::seed_from_u64(seed);
        use rand::Rng;
        let records: Vec<MetricRecord> = (0..8).map(|i| {
            let rt = rng.random_range(5.0..40.0);
            MetricRecord {
                team: format!("t{i}"), psnr_val: 27.0, psnr_test: 27.1,
                runtime_val: rt, runtime_test: rt, runtime_avg: None,
                params: rng.random_range(0.05..0.5), flops: rng.random_range(5.0..30.0),
            }
        }).collect();
        let scaled: Vec<MetricRecord> = records.iter().map(|r| MetricRecord {
            runtime_val: r.runtime_val * k, runtime_test: r.runtime_test * k,
            params: r.params * k, flops: r.flops * k, ..r.clone()
        }).collect();
        let b = Baseline::default();
        let bs = Baseline { runtime: b.runtime * k, params: b.params * k, flops: b.flops * k, ..b };
        let order = |rs: &[MetricRecord], base: &Baseline| -> Vec<String> {
            rank(rs, base, ScoreWeights::default()).unwrap().into_iter().map(|r| r.team).collect()
        };
        prop_assert_eq!(order(&records, &b), order(&scaled, &bs));
    }
}

#[test]
fn flops_scale_with_area() {
    // every fused conv is same-padded
    let g = fuse_graph(&build_reference_span(8, 2, 2).unwrap()).unwrap();
    let c = FlopConvention::default();
    let base = count_flops(&g, (16, 16), c).unwrap();
    for (h, w) in [(32, 16), (16, 48), (64, 64)] {
        assert_eq!(count_flops(&g, (h, w), c).unwrap() * 256, base * (h * w) as u64);
    }
}

#[test]
fn flops_ignore_weight_values() {
    let g = build_reference_span(8, 2, 2).unwrap();
    let mut cfg = esrkit::blocks::SpanConfig::new(8, 2, 2);
    cfg.seed = 99;
    let other = cfg.build().unwrap();
    assert_ne!(g, other);
    let c = FlopConvention::default();
    assert_eq!(count_flops(&g, (20, 20), c).unwrap(), count_flops(&other, (20, 20), c).unwrap());
}
