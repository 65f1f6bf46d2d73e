use patchconv::autodiff::gradcheck::check_graph_fn;
use patchconv::verify::{check_primitive, run_gradcheck, VerifyConfig, PRIMITIVES};
use patchconv::{Graph, Padding, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_passes_several_seeds() {
    for seed in 100..105 {
        for name in PRIMITIVES {
            let err = check_primitive(name, seed, 1e-5, None).unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn suite_report_structure() {
    let report = run_gradcheck(&VerifyConfig {
        seeds: 1,
        include_model: false,
        ..VerifyConfig::default()
    })
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.checks.len(), PRIMITIVES.len() + 2);
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, h, w, co) = (2, 5, 4, 3);
    let x = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut rng);
    let k = Tensor::<f64>::randn(&[co, c, 3, 3], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[co], 1.0, &mut rng);
    let mut g = Graph::new();
    let (xv, kv, bv) = (g.leaf(&x), g.leaf(&k), g.leaf(&b));
    let y = g.conv2d(xv, kv, bv, Padding::Same).unwrap();
    let got = g.value(y).to_vec();
    for o in 0..co {
        for i in 0..h {
            for j in 0..w {
                let mut acc = b.data()[o];
                for ci in 0..c {
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            acc += k.data()[((o * c + ci) * 3 + di) * 3 + dj]
                                * x.data()[(ci * h + ii as usize) * w + jj as usize];
                        }
                    }
                }
                assert!((got[(o * h + i) * w + j] - acc).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradients_on_random_shapes(c in 1usize..3, h in 2usize..6, w in 2usize..6, co in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            Tensor::<f64>::randn(&[c, h, w], 1.0, &mut rng),
            Tensor::<f64>::randn(&[co, c, 3, 3], 1.0, &mut rng),
            Tensor::<f64>::randn(&[co], 1.0, &mut rng),
        ];
        let err = check_graph_fn(&inputs, |g, v| g.conv2d(v[0], v[1], v[2], Padding::Same), 1e-5, None).unwrap();
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn gradients_accumulate_over_reuse(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[n], 1.0, &mut rng).with_grad();
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let y = g.add(xv, xv).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        prop_assert!(grads.get(xv).unwrap().iter().all(|&d| d == 2.0));
    }

    #[test]
    fn softmax_is_a_distribution(v in proptest::collection::vec(-30.0f64..30.0, 1..10)) {
        let x = Tensor::new(&[v.len()], v).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let p = g.softmax(xv).unwrap();
        let total: f64 = g.value(p).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.value(p).iter().all(|&q| q >= 0.0));
    }
}
