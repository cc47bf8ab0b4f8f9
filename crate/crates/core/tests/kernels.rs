use proptest::prelude::*;
use trevsnn_core::par::set_parallel;
use trevsnn_core::tensor::*;

fn det(shape: &[usize], salt: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as f64 + salt) * 0.6180339887).sin())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_adjoints(
        n in 1usize..3, ci in 1usize..4, co in 1usize..4,
        h in 3usize..8, w in 3usize..8, k in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, salt in 0.0f64..10.0,
    ) {
        let x = det(&[n, ci, h, w], salt);
        let wt = det(&[co, ci, k, k], salt + 3.0);
        let y = conv2d(&x, &wt, stride, pad).unwrap();
        let g = det(y.shape(), salt + 7.0);
        let dx = conv2d_backward_input(&g, &wt, (h, w), stride, pad).unwrap();
        let dw = conv2d_backward_weight(&x, &g, (k, k), stride, pad).unwrap();
        let lhs = y.dot(&g).unwrap();
        prop_assert!(close(lhs, x.dot(&dx).unwrap()));
        prop_assert!(close(lhs, wt.dot(&dw).unwrap()));
    }

    #[test]
    fn dwconv_adjoints_and_grouped_equivalence(
        n in 1usize..3, c in 1usize..4, h in 3usize..8, w in 3usize..8,
        k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..3, salt in 0.0f64..10.0,
    ) {
        let pad = k / 2;
        let x = det(&[n, c, h, w], salt);
        let wt = det(&[c, 1, k, k], salt + 1.0);
        let y = dwconv2d(&x, &wt, stride, pad).unwrap();
        let g = det(y.shape(), salt + 2.0);
        let dx = dwconv2d_backward_input(&g, &wt, (h, w), stride, pad).unwrap();
        let dw = dwconv2d_backward_weight(&x, &g, (k, k), stride, pad).unwrap();
        let lhs = y.dot(&g).unwrap();
        prop_assert!(close(lhs, x.dot(&dx).unwrap()));
        prop_assert!(close(lhs, wt.dot(&dw).unwrap()));

        let full = Tensor::from_fn(&[c, c, k, k], |i| {
            let (o, rest) = (i / (c * k * k), i % (c * k * k));
            let (ic, kk) = (rest / (k * k), rest % (k * k));
            if o == ic { wt.data()[o * k * k + kk] } else { 0.0 }
        });
        let dense = conv2d(&x, &full, stride, pad).unwrap();
        prop_assert!(dense.max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn pwconv_matches_dense_and_is_adjoint(
        n in 1usize..3, ci in 1usize..5, co in 1usize..5,
        h in 1usize..7, w in 1usize..7, stride in 1usize..3, salt in 0.0f64..10.0,
    ) {
        let x = det(&[n, ci, h, w], salt);
        let wt = det(&[co, ci, 1, 1], salt + 4.0);
        let y = pwconv2d_strided(&x, &wt, stride).unwrap();
        prop_assert!(y.max_abs_diff(&conv2d(&x, &wt, stride, 0).unwrap()).unwrap() < 1e-12);
        let g = det(y.shape(), salt + 5.0);
        let dx = pwconv2d_backward_input(&g, &wt, (h, w), stride).unwrap();
        let dw = pwconv2d_backward_weight(&x, &g, stride).unwrap();
        let lhs = y.dot(&g).unwrap();
        prop_assert!(close(lhs, x.dot(&dx).unwrap()));
        prop_assert!(close(lhs, wt.dot(&dw).unwrap()));
    }

    #[test]
    fn linear_and_pool_adjoints(n in 1usize..4, f in 1usize..6, o in 1usize..6, h in 1usize..5, salt in 0.0f64..10.0) {
        let x = det(&[n, f], salt);
        let wt = det(&[o, f], salt + 1.0);
        let y = linear(&x, &wt).unwrap();
        let g = det(y.shape(), salt + 2.0);
        let lhs = y.dot(&g).unwrap();
        prop_assert!(close(lhs, x.dot(&linear_backward_input(&g, &wt).unwrap()).unwrap()));
        prop_assert!(close(lhs, wt.dot(&linear_backward_weight(&x, &g).unwrap()).unwrap()));

        let m = det(&[n, f, h, h + 1], salt);
        let p = global_avg_pool(&m).unwrap();
        let gp = det(p.shape(), salt + 3.0);
        prop_assert!(close(p.dot(&gp).unwrap(), m.dot(&global_avg_pool_backward(&gp, h, h + 1).unwrap()).unwrap()));
    }

    #[test]
    fn alignment_adjoints(
        n in 1usize..3, c in prop::sample::select(vec![2usize, 4]), mult in 1usize..4,
        h in 1usize..9, oh in 1usize..9, salt in 0.0f64..10.0,
    ) {
        let x = det(&[n, c, h, h], salt);
        let r = resize_nearest(&x, oh, oh).unwrap();
        let g = det(r.shape(), salt + 1.0);
        prop_assert!(close(r.dot(&g).unwrap(), x.dot(&resize_nearest_backward(&g, h, h).unwrap()).unwrap()));

        for cout in [c * mult, c / 2] {
            if cout == 0 { continue; }
            let a = channel_align(&x, cout).unwrap();
            let ga = det(a.shape(), salt + 2.0);
            let back = channel_align_backward(&ga, c).unwrap();
            prop_assert!(close(a.dot(&ga).unwrap(), x.dot(&back).unwrap()));
        }
    }

    #[test]
    fn resize_round_trip_on_integer_upsampling(h in 1usize..6, k in 1usize..4, salt in 0.0f64..5.0) {
        let x = det(&[1, 2, h, h], salt);
        let up = resize_nearest(&x, h * k, h * k).unwrap();
        prop_assert_eq!(resize_nearest(&up, h, h).unwrap(), x);
    }
}

#[test]
fn parallel_and_sequential_paths_are_bit_identical() {
    let x = Tensor::from_fn(&[4, 6, 12, 12], |i| ((i as f32) * 0.37).sin());
    let w = Tensor::from_fn(&[8, 6, 3, 3], |i| ((i as f32) * 0.11).cos());
    let dw = Tensor::from_fn(&[6, 1, 5, 5], |i| ((i as f32) * 0.23).cos());
    let pw = Tensor::from_fn(&[6, 6, 1, 1], |i| ((i as f32) * 0.71).sin());
    let run = || {
        let a = conv2d(&x, &w, 1, 1).unwrap();
        let b = dwconv2d(&x, &dw, 1, 2).unwrap();
        let c = pwconv2d_strided(&x, &pw, 2).unwrap();
        let g = conv2d_backward_weight(&x, &a, (3, 3), 1, 1).unwrap();
        let d = dwconv2d_backward_input(&b, &dw, (12, 12), 1, 2).unwrap();
        let e = pwconv2d_backward_weight(&x, &c, 2).unwrap();
        (a, b, c, g, d, e)
    };
    set_parallel(true);
    let p = run();
    set_parallel(false);
    let s = run();
    set_parallel(true);
    assert_eq!(p, s);
}
