use proptest::prelude::*;

use pmoe_core::data::Sample;
use pmoe_core::model::{forward_cnn, forward_pmoe, init_params, top_l_select, Arch, Mode};
use pmoe_core::training::{batch_loss, grad_router_joint, sgd_step, GradientBuffer};
use pmoe_core::Rng;

fn sample(n: usize, d: usize, label: i32, rng: &mut Rng) -> Sample {
    Sample {
        patches: (0..n).flat_map(|_| rng.unit_vector(d)).collect(),
        dim: d,
        label,
        disc_index: 0,
    }
}

fn shape() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    // (k, neurons per expert, d, n, l)
    (1usize..4, 1usize..4, 2usize..9, 3usize..9).prop_flat_map(|(k, mpe, d, n)| (Just(k), Just(mpe), Just(d), Just(n), 1..=n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cnn_equivalence(seed in any::<u64>(), m in 1usize..6, d in 2usize..9, n in 3usize..9) {
        let init = Rng::new(seed);
        let moe = init_params(&Arch::pmoe(Mode::Separate, 1, m, d, n, n), &init).unwrap();
        let cnn = init_params(&Arch::cnn(m, d, n), &init).unwrap();
        let x = sample(n, d, 1, &mut Rng::new(seed ^ 1));
        let a = forward_pmoe(&moe, &x).unwrap().0;
        let b = forward_cnn(&cnn, &x).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn routing_is_deterministic_and_normalized((k, mpe, d, n, l) in shape(), seed in any::<u64>(), joint in any::<bool>()) {
        let mode = if joint { Mode::Joint } else { Mode::Separate };
        let mut rng = Rng::new(seed);
        let mut p = init_params(&Arch::pmoe(mode, k, k * mpe, d, n, l), &rng.fork("init")).unwrap();
        p.gating_kernels = rng.normal_vec(k * d, 1.0);
        let x = sample(n, d, 1, &mut rng);
        let (f1, r1) = forward_pmoe(&p, &x).unwrap();
        let (f2, r2) = forward_pmoe(&p, &x).unwrap();
        prop_assert_eq!(f1.to_bits(), f2.to_bits());
        prop_assert_eq!(&r1, &r2);
        for e in &r1.experts {
            prop_assert_eq!(e.indices.len(), l);
            prop_assert!(e.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(e.indices.iter().all(|&j| j < n));
            if joint {
                prop_assert!((e.gates.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(e.gates.iter().all(|&g| g > 0.0 && g <= 1.0));
            } else {
                prop_assert!(e.gates.iter().all(|&g| g == 1.0));
            }
        }
    }

    #[test]
    fn permutation_equivariance((k, mpe, d, n, l) in shape(), seed in any::<u64>(), joint in any::<bool>()) {
        let mode = if joint { Mode::Joint } else { Mode::Separate };
        let mut rng = Rng::new(seed);
        let mut p = init_params(&Arch::pmoe(mode, k, k * mpe, d, n, l), &rng.fork("init")).unwrap();
        p.gating_kernels = rng.normal_vec(k * d, 1.0);
        let x = sample(n, d, 1, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let mut y = x.clone();
        for (new, &old) in perm.iter().enumerate() {
            y.patches[new * d..(new + 1) * d].copy_from_slice(x.patch(old));
        }
        let (fx, rx) = forward_pmoe(&p, &x).unwrap();
        let (fy, ry) = forward_pmoe(&p, &y).unwrap();
        prop_assert!((fx - fy).abs() < 1e-12 * (1.0 + fx.abs()));
        for (ex, ey) in rx.experts.iter().zip(&ry.experts) {
            let mut mapped: Vec<usize> = ey.indices.iter().map(|&j| perm[j]).collect();
            mapped.sort_unstable();
            prop_assert_eq!(&mapped, &ex.indices);
        }
    }

    #[test]
    fn score_is_linear_in_output_weights((k, mpe, d, n, l) in shape(), seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let a = init_params(&Arch::pmoe(Mode::Joint, k, k * mpe, d, n, l), &rng.fork("a")).unwrap();
        let mut b = a.clone();
        b.output_weights = rng.normal_vec(a.output_weights.len(), 1.0);
        let mut mix = a.clone();
        for i in 0..mix.output_weights.len() {
            mix.output_weights[i] = a.output_weights[i] + alpha * b.output_weights[i];
        }
        let x = sample(n, d, 1, &mut rng);
        let fa = forward_pmoe(&a, &x).unwrap().0;
        let fb = forward_pmoe(&b, &x).unwrap().0;
        let fm = forward_pmoe(&mix, &x).unwrap().0;
        prop_assert!((fm - (fa + alpha * fb)).abs() < 1e-10);
    }

    #[test]
    fn top_l_matches_sorting(values in prop::collection::vec(-5i32..5, 1..12), l_frac in 0.0f64..1.0) {
        let g: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let l = 1 + ((g.len() - 1) as f64 * l_frac) as usize;
        let sel = top_l_select(&g, l).unwrap();
        prop_assert_eq!(sel.len(), l);
        let worst_in = sel.iter().map(|&j| g[j]).fold(f64::INFINITY, f64::min);
        for j in 0..g.len() {
            if !sel.contains(&j) {
                prop_assert!(g[j] <= worst_in);
                if g[j] == worst_in {
                    // ties go to smaller indices
                    prop_assert!(sel.iter().filter(|&&i| g[i] == worst_in).all(|&i| i < j));
                }
            }
        }
    }

    #[test]
    fn sgd_never_touches_output_weights((k, mpe, d, n, l) in shape(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut p = init_params(&Arch::pmoe(Mode::Joint, k, k * mpe, d, n, l), &rng.fork("p")).unwrap();
        let before = p.output_weights.clone();
        let xs: Vec<Sample> = (0..3).map(|i| sample(n, d, if i % 2 == 0 { 1 } else { -1 }, &mut rng)).collect();
        let refs: Vec<&Sample> = xs.iter().collect();
        let g = grad_router_joint(&p, &refs).unwrap();
        prop_assert!(g.is_finite());
        sgd_step(&mut p, &g, 0.3).unwrap();
        prop_assert_eq!(&p.output_weights, &before);
        let zero = GradientBuffer::zeros(&p, true);
        let snapshot = p.clone();
        sgd_step(&mut p, &zero, 0.3).unwrap();
        prop_assert_eq!(p, snapshot);
    }

    #[test]
    fn loss_is_finite_and_positive((k, mpe, d, n, l) in shape(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = init_params(&Arch::pmoe(Mode::Joint, k, k * mpe, d, n, l), &rng.fork("p")).unwrap();
        let xs: Vec<Sample> = (0..4).map(|i| sample(n, d, if i % 2 == 0 { 1 } else { -1 }, &mut rng)).collect();
        let refs: Vec<&Sample> = xs.iter().collect();
        let loss = batch_loss(&p, &refs).unwrap();
        prop_assert!(loss.is_finite() && loss > 0.0);
    }
}
