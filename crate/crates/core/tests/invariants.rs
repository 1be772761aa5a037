use proptest::prelude::*;
use seedcd_core::data::{generate_pair, shift_second, DatasetConfig, Split};
use seedcd_core::exchange::{build_permutation, registry, Axis, ExchangeMask};
use seedcd_core::harness::ExperimentConfig;
use seedcd_core::info::{bayes_risk, dpi_audit, mutual_information, random_joint, FusionMap, JointDistribution};
use seedcd_core::metrics::{Confusion, ErrorMap};
use seedcd_core::tensor::Tensor;

fn mask_strategy(max_m: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), 1..=max_m)
}

/// Sign of the permutation read off a 0/1 matrix by cycle counting.
fn cycle_sign(p: &[i64], n: usize) -> i8 {
    let target: Vec<usize> = (0..n).map(|r| (0..n).find(|&c| p[r * n + c] == 1).unwrap()).collect();
    let mut seen = vec![false; n];
    let mut sign = 1i8;
    for s in 0..n {
        let mut len = 0;
        let mut i = s;
        while !seen[i] {
            seen[i] = true;
            i = target[i];
            len += 1;
        }
        if len > 0 && len % 2 == 0 {
            sign = -sign;
        }
    }
    sign
}

fn mi_oracle(j: &JointDistribution) -> f64 {
    let (nz, ny) = (j.z_alphabet().len(), j.y_alphabet().len());
    let pz: Vec<f64> = (0..nz).map(|z| (0..ny).map(|y| j.p(z, y)).sum()).collect();
    let py: Vec<f64> = (0..ny).map(|y| (0..nz).map(|z| j.p(z, y)).sum()).collect();
    let mut mi = 0.0;
    for z in 0..nz {
        for y in 0..ny {
            let p = j.p(z, y);
            if p > 0.0 {
                mi += p * (p / (pz[z] * py[y])).log2();
            }
        }
    }
    mi
}

fn pyramid(seed: u64, shapes: &[[usize; 3]]) -> Vec<Tensor> {
    shapes
        .iter()
        .enumerate()
        .map(|(l, s)| Tensor::from_fn(s, |i| ((seed as f64) * 0.37 + (l * 1000 + i) as f64 * 0.113).sin()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn swap_matrix_is_orthogonal_with_parity_sign(eps in mask_strategy(24)) {
        let mask = ExchangeMask::new(eps.clone(), Axis::Channel, 0);
        let op = build_permutation(&mask);
        let n = 2 * eps.len();
        let p = op.matrix();
        for r in 0..n {
            for c in 0..n {
                let dot: i64 = (0..n).map(|k| p[k * n + r] * p[k * n + c]).sum();
                prop_assert_eq!(dot, i64::from(r == c));
            }
        }
        let swaps = eps.iter().filter(|&&e| e).count();
        prop_assert_eq!(cycle_sign(p, n), if swaps % 2 == 0 { 1 } else { -1 });
    }

    #[test]
    fn exchange_is_an_involution_and_commutes_with_time_swap(
        seed in any::<u64>(),
        axis in prop::sample::select(Axis::ALL.to_vec()),
        dims in prop::collection::vec((1usize..=4, 1usize..=4, 1usize..=4), 1..=3),
        bits in prop::collection::vec(any::<bool>(), 16),
    ) {
        let shapes: Vec<[usize; 3]> = dims.iter().map(|&(c, h, w)| [c, h, w]).collect();
        let a = pyramid(seed, &shapes);
        let b = pyramid(seed ^ 0xABCD, &shapes);
        let ex = registry().for_axis(axis);
        let masks: Vec<ExchangeMask> = ex
            .mask_lengths(&shapes)
            .into_iter()
            .enumerate()
            .map(|(l, m)| ExchangeMask::new((0..m).map(|i| bits[(i + l) % 16]).collect(), axis, l))
            .collect();
        let (a1, b1) = ex.apply(&a, &b, &masks).unwrap();
        let (a2, b2) = ex.apply(&a1, &b1, &masks).unwrap();
        for l in 0..shapes.len() {
            prop_assert!(a2[l].bit_eq(&a[l]) && b2[l].bit_eq(&b[l]));
        }
        let (b3, a3) = ex.apply(&b, &a, &masks).unwrap();
        for l in 0..shapes.len() {
            prop_assert!(a3[l].bit_eq(&a1[l]) && b3[l].bit_eq(&b1[l]));
        }
    }

    #[test]
    fn permutation_keeps_information_and_fusions_obey_dpi(seed in any::<u64>(), m in 1usize..=2, k in 2i64..=3) {
        let j = random_joint(seed, 0, m, k, 2);
        let mi = mutual_information(&j);
        prop_assert!((mi - mi_oracle(&j)).abs() <= 1e-12);
        let eps: Vec<bool> = (0..m).map(|i| seed >> i & 1 == 1).collect();
        let rep = dpi_audit(&j, &FusionMap::Permutation(ExchangeMask::new(eps, Axis::Channel, 0))).unwrap();
        prop_assert!((rep.mi_after - mi).abs() <= 1e-12);
        prop_assert!((rep.risk_after - bayes_risk(&j)).abs() <= 1e-12);
        for f in [FusionMap::Add, FusionMap::Subtract, FusionMap::ConcatReduce(1 + (seed as usize) % (2 * m - 1))] {
            let r = dpi_audit(&j, &f).unwrap();
            prop_assert!(r.mi_after <= mi + 1e-12, "{}", r.fusion);
            prop_assert!(r.risk_after >= r.risk_before - 1e-12, "{}", r.fusion);
        }
    }

    #[test]
    fn error_map_histogram_reconciles(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..=64)) {
        let n = bits.len();
        let pred = Tensor::new(vec![1, 1, n], bits.iter().map(|b| f64::from(u8::from(b.0))).collect()).unwrap();
        let target = Tensor::new(vec![1, 1, n], bits.iter().map(|b| f64::from(u8::from(b.1))).collect()).unwrap();
        let mut hand = Confusion::default();
        for &(p, t) in &bits {
            hand.record(p, t);
        }
        prop_assert_eq!(Confusion::from_maps(&pred, &target).unwrap(), hand);
        prop_assert_eq!(ErrorMap::render(&pred, &target).unwrap().histogram().unwrap(), hand);
        let s = hand.scores();
        for v in [s.oa, s.iou, s.f1, s.prec, s.rec] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_are_reproducible_and_shift_keeps_labels(seed in any::<u64>(), index in 0u64..64, n in 0usize..=4) {
        let cfg = DatasetConfig { seed, ..DatasetConfig::default() };
        let s = generate_pair(&cfg, Split::Train, index).unwrap();
        prop_assert!(s.bit_eq(&generate_pair(&cfg, Split::Train, index).unwrap()));
        let shifted = shift_second(&s, n).unwrap();
        prop_assert!(shifted.image_a.bit_eq(&s.image_a));
        prop_assert!(shifted.mask.bit_eq(&s.mask));
        if n == 0 {
            prop_assert!(shifted.image_b.bit_eq(&s.image_b));
        }
    }

    #[test]
    fn config_round_trips_through_its_canonical_form(seed in any::<u64>(), epochs in 1usize..100, p in 0.0f64..=1.0) {
        let mut cfg = ExperimentConfig::default().with_seed(seed);
        cfg.epochs = epochs;
        cfg.arch.exchange = Some(seedcd_core::exchange::ExchangeSpec::bernoulli(Axis::Channel, p, seed));
        let back = ExperimentConfig::parse(&cfg.canonical()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back.canonical(), cfg.canonical());
    }
}
