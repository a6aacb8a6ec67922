use jsnorm::norm::{bn_forward, ln_forward, reference};
use jsnorm::shrinkage::{js_shrink, js_shrink_toward, rescale_lambda, FactorRegime};
use jsnorm::tensor::sum_squares;
use jsnorm::train::Histogram;
use jsnorm::{Axis, NormParams, ShrinkKind, ShrinkPolicy, Tensor};
use proptest::prelude::*;

fn tensor_strategy(max: usize) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max, 1..=max, 1..=max).prop_flat_map(|(n, c, h, w)| {
        prop::collection::vec(-10.0f64..10.0, n * c * h * w)
            .prop_map(move |data| Tensor::from_vec([n, c, h, w], data).unwrap())
    })
}

fn theta_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..40)
}

fn naive_mean(x: &Tensor, axes: &[Axis], keep: [usize; 4]) -> f64 {
    let [n, c, h, w] = x.shape();
    let mut sum = 0.0;
    let mut count = 0;
    for a in 0..n {
        for b in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let idx = [a, b, i, j];
                    if Axis::ALL
                        .iter()
                        .all(|ax| axes.contains(ax) || idx[ax.index()] == keep[ax.index()])
                    {
                        sum += x.at(a, b, i, j);
                        count += 1;
                    }
                }
            }
        }
    }
    sum / count as f64
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduce_mean_matches_naive(x in tensor_strategy(4), mask in 1u8..16) {
        let axes: Vec<Axis> = Axis::ALL.iter().copied().filter(|a| mask & (1 << a.index()) != 0).collect();
        let m = x.reduce_mean(&axes).unwrap();
        let [n, c, h, w] = m.shape();
        for a in 0..n { for b in 0..c { for i in 0..h { for j in 0..w {
            prop_assert!(close(m.at(a, b, i, j), naive_mean(&x, &axes, [a, b, i, j]), 1e-12));
        }}}}
        let v = x.reduce_var(&axes, &m).unwrap();
        prop_assert!(v.data().iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn affine_round_trips(x in tensor_strategy(3), scale in 0.5f64..3.0, shift in -2.0f64..2.0) {
        let c = x.c();
        let y = x.broadcast_affine(&vec![scale; c], &vec![shift; c], Axis::C).unwrap();
        let back = y.broadcast_affine(&vec![1.0 / scale; c], &vec![-shift / scale; c], Axis::C).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn shrinkage_is_collinear_and_bounded(theta in theta_strategy(), sigma2 in 0.0f64..4.0) {
        let plain = js_shrink(&theta, sigma2, &ShrinkPolicy::default()).unwrap();
        let pos = js_shrink(&theta, sigma2, &ShrinkPolicy::positive_part()).unwrap();
        prop_assert!(plain.factor <= 1.0);
        prop_assert!((0.0..=1.0).contains(&pos.factor));
        if plain.factor > 0.0 {
            prop_assert_eq!(pos.factor, plain.factor);
        } else {
            prop_assert!(pos.regime != FactorRegime::Active);
        }
        for (v, t) in plain.values.iter().zip(&theta) {
            prop_assert!(close(*v, plain.factor * t, 1e-12));
        }
        if theta.len() < 3 {
            prop_assert_eq!(&plain.values, &theta);
        }
    }

    #[test]
    fn shrinkage_toward_origin_is_bitwise_identical(theta in theta_strategy(), sigma2 in 0.0f64..4.0) {
        for kind in [ShrinkKind::JsPlain, ShrinkKind::JsPositivePart, ShrinkKind::None] {
            let p = ShrinkPolicy::new(kind);
            let a = js_shrink(&theta, sigma2, &p).unwrap();
            let b = js_shrink_toward(&theta, sigma2, &vec![0.0; theta.len()], &p).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn larger_variance_shrinks_more(theta in prop::collection::vec(-5.0f64..5.0, 3..20), s in 0.0f64..2.0, extra in 0.0f64..2.0) {
        prop_assume!(sum_squares(&theta) > 1e-6);
        let p = ShrinkPolicy::default();
        let a = js_shrink(&theta, s, &p).unwrap();
        let b = js_shrink(&theta, s + extra, &p).unwrap();
        prop_assert!(b.factor <= a.factor);
    }

    #[test]
    fn penalty_rescaling_identity(lo in 0.0f64..1.0, loss in 0.0f64..10.0, psum in 1e-6f64..1e3) {
        let lambda = rescale_lambda(lo, loss, psum).unwrap();
        let lhs = lambda * psum;
        let rhs = lo * loss;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn shrunk_mean_norm_never_grows(x in tensor_strategy(4)) {
        prop_assume!(x.n() * x.h() * x.w() >= 2);
        let params = NormParams::new(x.c());
        let (_, cache) = bn_forward(&x, &params, &ShrinkPolicy::default()).unwrap();
        prop_assert!(sum_squares(&cache.mu_js) <= sum_squares(&cache.mu_b) * (1.0 + 1e-12));
        prop_assert!(cache.var_js.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn degenerate_configs_match_reference(x in tensor_strategy(4)) {
        prop_assume!(x.n() * x.h() * x.w() >= 2);
        let params = NormParams::new(x.c());
        let (js, _) = bn_forward(&x, &params, &ShrinkPolicy::none()).unwrap();
        let (plain, _) = reference::batch_norm(&x, &params).unwrap();
        prop_assert_eq!(js.data(), plain.data());
        if x.c() < 3 {
            let (js, _) = bn_forward(&x, &params, &ShrinkPolicy::default()).unwrap();
            prop_assert_eq!(js.data(), plain.data());
        }
    }

    #[test]
    fn batch_norm_is_permutation_equivariant(x in tensor_strategy(4), rot in 0usize..4) {
        prop_assume!(x.n() * x.h() * x.w() >= 2);
        let n = x.n();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let params = NormParams::new(x.c());
        let p = ShrinkPolicy::default();
        let (y, _) = bn_forward(&x, &params, &p).unwrap();
        let (yp, _) = bn_forward(&x.gather_samples(&order), &params, &p).unwrap();
        for (a, b) in y.gather_samples(&order).data().iter().zip(yp.data()) {
            prop_assert!(close(*a, *b, 1e-10));
        }
    }

    #[test]
    fn layer_norm_samples_are_independent(x in tensor_strategy(4)) {
        prop_assume!(x.h() * x.w() >= 2);
        let params = NormParams::new(x.c());
        let p = ShrinkPolicy::default();
        let (y, _) = ln_forward(&x, &params, &p).unwrap();
        for s in 0..x.n() {
            let (alone, _) = ln_forward(&x.slice_samples(s..s + 1).unwrap(), &params, &p).unwrap();
            let part = y.slice_samples(s..s + 1).unwrap();
            prop_assert_eq!(alone.data(), part.data());
        }
    }

    #[test]
    fn histogram_conserves_mass(values in prop::collection::vec(-3.0f64..3.0, 1..50), bins in 1usize..12) {
        let h = Histogram::build(&values, bins).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<usize>(), values.len());
        prop_assert_eq!(h.edges.len(), bins + 1);
        prop_assert!(h.edges.windows(2).all(|e| e[0] < e[1]));
    }
}
