use proptest::prelude::*;
use restt::grad::{backward, finite_diff_grad, loss_and_grad, Loss};
use restt::meanfield::{predict, ModelKind};
use restt::model::{decode_checkpoint, encode_checkpoint};
use restt::oracle::expand;
use restt::{forward, init_params, Preset, Topology};

fn inputs(dims: &[usize], vals: &[f64]) -> Vec<Vec<f64>> {
    let mut it = vals.iter().cycle();
    dims.iter().map(|&d| (0..d).map(|_| *it.next().unwrap()).collect()).collect()
}

fn arb_topology() -> impl Strategy<Value = Topology> {
    (
        prop::collection::vec(1usize..=3, 2..=5),
        1usize..=4,
        1usize..=3,
        prop::sample::select(vec![Preset::GeneralRestt, Preset::PlainTt, Preset::FullyConnected]),
        any::<u64>(),
    )
        .prop_map(|(dims, r, o, preset, flags)| {
            let n = dims.len();
            let mut t = Topology::preset(preset, dims, r, o).unwrap();
            if preset == Preset::GeneralRestt {
                for l in 1..n - 1 {
                    t.set_identity_skip(l, flags >> l & 1 == 1).unwrap();
                }
            }
            t
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn expansion_matches_forward(topo in arb_topology(), seed in 0u64..1000, vals in prop::collection::vec(-1.0f64..1.0, 16)) {
        let p = init_params(&topo, 0.5, seed).unwrap();
        let x = inputs(&topo.input_dims, &vals);
        let (y, _) = forward(&p, &topo, &x).unwrap();
        let z = expand(&p, &topo).unwrap().evaluate(&x).unwrap();
        for (a, b) in y.iter().zip(&z) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn backward_matches_finite_differences(topo in arb_topology(), seed in 0u64..1000, vals in prop::collection::vec(-1.0f64..1.0, 16)) {
        let p = init_params(&topo, 0.5, seed).unwrap();
        let x = inputs(&topo.input_dims, &vals);
        let target = vec![0.25; topo.output_dim];
        let (y, trace) = forward(&p, &topo, &x).unwrap();
        let (_, up) = loss_and_grad(&y, &target, Loss::Mse).unwrap();
        let g = backward(&p, &topo, &trace, &up).unwrap().params.flat();
        let fd = finite_diff_grad(&p, &topo, &x, |o| loss_and_grad(o, &target, Loss::Mse).unwrap().0, 1e-5)
            .unwrap().params.flat();
        let scale = fd.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
        for (a, b) in g.iter().zip(&fd) {
            prop_assert!((a - b).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn forward_is_linear_in_each_node_input(topo in arb_topology(), seed in 0u64..1000, vals in prop::collection::vec(-1.0f64..1.0, 16), k in 0usize..5, c in -3.0f64..3.0) {
        let p = init_params(&topo, 0.5, seed).unwrap();
        let k = k % topo.n_nodes();
        let x = inputs(&topo.input_dims, &vals);
        let mut scaled = x.clone();
        scaled[k].iter_mut().for_each(|v| *v *= c);
        let mut zero = x.clone();
        zero[k].iter_mut().for_each(|v| *v = 0.0);
        let (y0, _) = forward(&p, &topo, &zero).unwrap();
        let (y1, _) = forward(&p, &topo, &x).unwrap();
        let (yc, _) = forward(&p, &topo, &scaled).unwrap();
        // Affine in x(k): y(c x) = y(0) + c (y(x) - y(0)).
        for ((a, b), z) in yc.iter().zip(&y1).zip(&y0) {
            prop_assert!((a - (z + c * (b - z))).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn checkpoint_roundtrip(topo in arb_topology(), seed in 0u64..1000) {
        let p = init_params(&topo, 0.5, seed).unwrap();
        let (t2, p2) = decode_checkpoint(&encode_checkpoint(&topo, &p)).unwrap();
        prop_assert_eq!(t2, topo);
        prop_assert_eq!(p2, p);
    }

    #[test]
    fn restt_signal_grows_through_middle_layers(n in 2usize..30, sigma in 1e-4f64..2.0) {
        let topo = Topology::uniform(Preset::GeneralRestt, n, 2, 4, 1).unwrap();
        let stats = predict(&topo, sigma, &vec![1.0; n]).unwrap();
        prop_assert_eq!(ModelKind::of(&topo).unwrap(), ModelKind::Restt);
        for l in 1..n - 1 {
            prop_assert!(stats.q[l] > stats.q[l - 1]);
        }
    }
}

#[test]
fn restt_without_skips_or_branches_is_plain_tt() {
    let mut r = Topology::uniform(Preset::GeneralRestt, 4, 2, 3, 2).unwrap();
    for l in 1..4 {
        if l < 3 {
            r.set_identity_skip(l, false).unwrap();
        }
        r.set_linear_branch(l, false).unwrap();
    }
    r.set_final_linear(false).unwrap();
    let t = Topology::uniform(Preset::PlainTt, 4, 2, 3, 2).unwrap();
    let pt = init_params(&t, 1.0, 5).unwrap();
    let x = vec![vec![0.3, -0.7], vec![1.0, 0.2], vec![-0.4, 0.9], vec![0.5, 0.5]];
    let mut pr = init_params(&r, 1.0, 5).unwrap();
    pr.first.clone_from(&pt.first);
    pr.chain.clone_from(&pt.chain);
    let (a, _) = forward(&pt, &t, &x).unwrap();
    let (b, _) = forward(&pr, &r, &x).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-14);
    }
}
