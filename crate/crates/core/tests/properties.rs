use coattn_core::attention::{build_block_circulant, build_circulant, compact_attend, AttentionKind, AttentionParams, AttentionWorkspace};
use coattn_core::data::{abs_percentile, clip_percentile, parse_amat, to_amat, DatasetBundle, Split};
use coattn_core::gconv::{act_on_feature, group_conv, lift_conv, FeatureMap, GConvParams};
use coattn_core::group::{act_on_input, cyclic_shift, matmul, permutation_matrix, permute_vector};
use coattn_core::model::{build_model, ArchName, ArchSpec};
use coattn_core::tensor::{conv2d, rotate90, softmax};
use coattn_core::{GroupSpec, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn specs() -> impl Strategy<Value = GroupSpec> {
    prop_oneof![Just(GroupSpec::p4()), Just(GroupSpec::p4m())]
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[test]
fn softmax_sums_to_one_on_ten_thousand_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..10_000 {
        let n = 1 + i % 16;
        let scale = if i % 2 == 0 { 1e3 } else { 1.0 };
        let x = Tensor::rand_uniform(&[n], -scale, scale, &mut rng);
        let s = softmax(&x).unwrap();
        assert!((s.sum() - 1.0).abs() <= 1e-12);
        assert!(s.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-1e3f64..1e3, 1..32)) {
        let s = softmax(&Tensor::from_vec(x)).unwrap();
        prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn four_quarter_turns_are_identity(n in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Tensor::randn(&[n, n], 1.0, &mut rng);
        let mut q = p.clone();
        for k in 1..=4 {
            q = rotate90(&q, 1).unwrap();
            prop_assert_eq!(sorted(q.data()), sorted(p.data()));
            if k == 4 {
                prop_assert_eq!(&q, &p);
            }
        }
    }

    #[test]
    fn cyclic_shift_group_law(x in prop::collection::vec(-5.0f64..5.0, 1..10), i in -20i64..20, j in -20i64..20) {
        let x = Tensor::from_vec(x);
        let two = cyclic_shift(&cyclic_shift(&x, i).unwrap(), j).unwrap();
        prop_assert_eq!(two, cyclic_shift(&x, i + j).unwrap());
    }

    #[test]
    fn conv_of_finite_inputs_is_finite(seed in any::<u64>(), pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, 5, 5], 1e3, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 1e3, &mut rng);
        prop_assert!(conv2d(&x, &w, pad).unwrap().is_finite());
    }

    #[test]
    fn feature_action_is_a_homomorphism(spec in specs(), a in 0usize..8, b in 0usize..8, seed in any::<u64>()) {
        let n = spec.group_size();
        let (g, h) = (spec.element(a % n), spec.element(b % n));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = FeatureMap::new(Tensor::randn(&[2, n, 2, 4, 4], 1.0, &mut rng), spec.clone()).unwrap();
        let lhs = act_on_feature(g, &act_on_feature(h, &x).unwrap()).unwrap();
        let rhs = act_on_feature(spec.compose(g, h), &x).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn permutation_representation_is_faithful(spec in specs()) {
        let mats: Vec<Tensor> = spec.elements().into_iter().map(|g| permutation_matrix(g, &spec).unwrap()).collect();
        for (i, a) in mats.iter().enumerate() {
            for b in &mats[i + 1..] {
                prop_assert!(a != b);
            }
        }
    }

    #[test]
    fn circulant_attention_is_shift_equivariant(
        n in prop_oneof![Just(4usize), Just(8usize)],
        seed in any::<u64>(),
    ) {
        let spec = GroupSpec::rot(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Tensor::randn(&[n], 1.0, &mut rng);
        let x = Tensor::randn(&[n], 1.0, &mut rng);
        let a = build_circulant(&c).unwrap();
        let y = compact_attend(&x, &a).unwrap();
        for g in spec.elements() {
            let lhs = compact_attend(&Tensor::from_vec(permute_vector(g, x.data(), &spec)), &a).unwrap();
            let rhs = permute_vector(g, y.data(), &spec);
            for (l, r) in lhs.data().iter().zip(&rhs) {
                prop_assert!((l - r).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn block_circulant_commutes_with_dihedral_permutations(seed in any::<u64>()) {
        let spec = GroupSpec::p4m();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = build_block_circulant(&Tensor::randn(&[4], 1.0, &mut rng), &Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        for g in spec.elements() {
            let p = permutation_matrix(g, &spec).unwrap();
            prop_assert!(matmul(&p, &a).unwrap().max_abs_diff(&matmul(&a, &p).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn perturbed_circulant_breaks_commutation(seed in any::<u64>(), i in 0usize..4, j in 0usize..4) {
        prop_assume!(i != j);
        let spec = GroupSpec::p4();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = build_circulant(&Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        a.set(&[i, j], a.get(&[i, j]) + 1e-2);
        let worst = spec
            .elements()
            .into_iter()
            .map(|g| {
                let p = permutation_matrix(g, &spec).unwrap();
                matmul(&p, &a).unwrap().max_abs_diff(&matmul(&a, &p).unwrap())
            })
            .fold(0.0, f64::max);
        prop_assert!(worst > 1e-3);
    }

    #[test]
    fn attention_normaliser_sums_to_one(x in prop::collection::vec(-50.0f64..50.0, 4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[4, 4], 3.0, &mut rng);
        let ws = AttentionWorkspace::compute(&x, a.data());
        prop_assert!((ws.a_tilde.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn scaled_identity_keeps_the_peak(x in prop::collection::vec(0.01f64..10.0, 2..9), alpha in 0.1f64..5.0) {
        let n = x.len();
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            a.set(&[i, i], alpha);
        }
        let xt = Tensor::from_vec(x.clone());
        let y = compact_attend(&xt, &a).unwrap();
        let am = |v: &[f64]| (0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b });
        let k = am(&x);
        prop_assert_eq!(am(y.data()), k);
        prop_assert_eq!(y.data()[k], x[k]);
    }

    #[test]
    fn structured_params_count(r in 1usize..6) {
        let c = AttentionParams::init(AttentionKind::Circulant, 2 * r, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = AttentionParams::init(AttentionKind::BlockCirculant, 2 * r, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = AttentionParams::init(AttentionKind::Full, 2 * r, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(c.param_count(), 2 * r);
        prop_assert_eq!(b.param_count(), 2 * r);
        prop_assert_eq!(f.param_count(), 4 * r * r);
    }

    #[test]
    fn lifting_and_group_convolution_are_equivariant(spec in specs(), gi in 0usize..8, seed in any::<u64>(), side in 3usize..8) {
        let n = spec.group_size();
        let g = spec.element(gi % n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lift = GConvParams::new(Tensor::randn(&[2, 1, 1, 3, 3], 1.0, &mut rng), Tensor::randn(&[2], 1.0, &mut rng)).unwrap();
        let img = Tensor::randn(&[1, 1, 1, side, side], 1.0, &mut rng);
        let x = FeatureMap::new(img.clone(), GroupSpec::trans()).unwrap();
        let gx = FeatureMap::new(act_on_input(g, &img, &spec).unwrap(), GroupSpec::trans()).unwrap();
        let y = lift_conv(&x, &lift, &spec, 1).unwrap();
        let lhs = lift_conv(&gx, &lift, &spec, 1).unwrap();
        prop_assert!(lhs.data().max_abs_diff(act_on_feature(g, &y).unwrap().data()) <= 1e-10);

        let gc = GConvParams::new(Tensor::randn(&[2, 2, n, 3, 3], 1.0, &mut rng), Tensor::randn(&[2], 1.0, &mut rng)).unwrap();
        let z = group_conv(&y, &gc, 1).unwrap();
        let lhs = group_conv(&act_on_feature(g, &y).unwrap(), &gc, 1).unwrap();
        prop_assert!(lhs.data().max_abs_diff(act_on_feature(g, &z).unwrap().data()) <= 1e-10);
    }

    #[test]
    fn clipping_bounds_magnitudes(v in prop::collection::vec(-10.0f64..10.0, 784), p in 1.0f64..100.0) {
        let b = DatasetBundle::new(Tensor::new(vec![1, 1, 28, 28], v.clone()).unwrap(), vec![0], Split::Train).unwrap();
        let (c, t) = clip_percentile(&b, p).unwrap();
        prop_assert_eq!(t, abs_percentile(&v, p).unwrap());
        prop_assert!(c.images.data().iter().all(|x| x.abs() <= t));
        let (same, _) = clip_percentile(&b, 100.0).unwrap();
        prop_assert_eq!(same, b);
    }

    #[test]
    fn amat_round_trip(seed in any::<u64>(), label in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DatasetBundle::new(Tensor::rand_uniform(&[1, 1, 28, 28], 0.0, 1.0, &mut rng), vec![label], Split::Full).unwrap();
        let back = parse_amat(&to_amat(&b)).unwrap();
        prop_assert_eq!(back, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn attended_parameter_delta_matches_formula(w in 1usize..5, layers in 1usize..4) {
        for (base, att, per) in [(ArchName::P4Cnn, ArchName::AP4Cnn, 4), (ArchName::P4mCnn, ArchName::AP4mCnn, 8)] {
            let shape = |name: ArchName| {
                let mut a = ArchSpec::desk(name);
                a.widths = vec![w; layers];
                a.attention = vec![name.attention(); layers];
                a.pool_after = vec![];
                a
            };
            let delta = build_model(&shape(att), 0).unwrap().param_count() - build_model(&shape(base), 0).unwrap().param_count();
            prop_assert_eq!(delta, layers * w * per);
        }
    }
}
