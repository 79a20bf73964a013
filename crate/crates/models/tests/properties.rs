use hsib_models::{count_params, ArchSpec, ModelGraph, ModelKind};
use hsib_tensor::RngState;
use proptest::prelude::*;

/// Parameter count written out from the layer stack, independent of the
/// crate's own accounting: conv c_in*c_out*k^d + c_out, fc d_in*d_out + d_out.
fn closed_form(s: &ArchSpec) -> usize {
    let fc = |i: usize, o: usize| i * o + o;
    let [f1, f2] = s.filters;
    let [k1, k2] = s.kernels;
    let (convs, flat) = match s.kind {
        ModelKind::Mlp => (0, s.in_channels),
        ModelKind::Cnn1d => {
            let len = ((s.in_channels - k1 + 1) / 2 - k2 + 1) / 2;
            (f1 * k1 + f1 + f1 * f2 * k2 + f2, f2 * len)
        }
        ModelKind::Cnn2d => {
            let side = (s.patch - k1 + 1 - k2 + 1) / 2;
            (
                s.in_channels * f1 * k1 * k1 + f1 + f1 * f2 * k2 * k2 + f2,
                f2 * side * side,
            )
        }
    };
    convs + fc(flat, s.hidden) + fc(s.hidden, s.classes)
}

fn arb_spec() -> impl Strategy<Value = ArchSpec> {
    (
        0..3usize,
        1..5usize,
        1..5usize,
        1..5usize,
        1..4usize,
        1..4usize,
        1..9usize,
        2..7usize,
        0..4usize,
    )
        .prop_map(|(kind, c, f1, f2, k1, k2, hidden, classes, extra)| {
            let kind = [ModelKind::Mlp, ModelKind::Cnn1d, ModelKind::Cnn2d][kind];
            // smallest extent that survives both convs and the pools
            let (in_channels, patch) = match kind {
                ModelKind::Mlp => (c, 1),
                ModelKind::Cnn1d => (k1 + 2 * (k2 + 1) + 2 * extra, 1),
                ModelKind::Cnn2d => (c, (k1 + k2) | 1),
            };
            let patch = if kind == ModelKind::Cnn2d {
                patch + 2 * extra
            } else {
                patch
            };
            ArchSpec {
                kind,
                in_channels,
                filters: [f1, f2],
                kernels: [k1, k2],
                hidden,
                classes,
                patch,
            }
        })
}

fn input(m: &ModelGraph<f64>, n: usize, seed: u64) -> Vec<f64> {
    let mut r = RngState::new(seed);
    let len: usize = m.input_shape(n).iter().product();
    (0..len).map(|_| r.normal()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn param_count_matches_closed_form(spec in arb_spec()) {
        let m = ModelGraph::<f64>::build(&spec, &mut RngState::new(0)).unwrap();
        let c = count_params(&m);
        prop_assert_eq!(c.total, closed_form(&spec));
        prop_assert_eq!(spec.total_params().unwrap(), c.total);
    }

    #[test]
    fn logits_are_n_by_k(spec in arb_spec(), n in 1..5usize) {
        let mut m = ModelGraph::<f64>::build(&spec, &mut RngState::new(1)).unwrap();
        m.set_training(false);
        let x = input(&m, n, 2);
        prop_assert_eq!(m.logits(&x, n).unwrap().len(), n * spec.classes);
    }

    #[test]
    fn eval_is_deterministic_and_per_sample(spec in arb_spec(), n in 2..5usize) {
        let mut m = ModelGraph::<f64>::build(&spec, &mut RngState::new(3)).unwrap();
        m.set_training(false);
        let x = input(&m, n, 4);
        let a = m.logits(&x, n).unwrap();
        prop_assert_eq!(&a, &m.logits(&x, n).unwrap());
        // reversing the batch reverses the output rows
        let per = x.len() / n;
        let rev: Vec<f64> = x.chunks(per).rev().flatten().copied().collect();
        let b = m.logits(&rev, n).unwrap();
        let k = spec.classes;
        for (ra, rb) in a.chunks(k).zip(b.chunks(k).rev()) {
            for (u, v) in ra.iter().zip(rb) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()), "{} vs {}", u, v);
            }
        }
    }
}

#[test]
fn closed_form_reproduces_the_benchmark_counts() {
    assert_eq!(closed_form(&ArchSpec::cnn2d(16)), 426_866);
    assert_eq!(closed_form(&ArchSpec::cnn2d_widths(16, 15, 30, 30)), 49_321);
    assert_eq!(closed_form(&ArchSpec::cnn2d_widths(16, 10, 20, 20)), 25_386);
    assert_eq!(closed_form(&ArchSpec::cnn2d_widths(16, 5, 10, 10)), 8_951);
}
