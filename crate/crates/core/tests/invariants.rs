//! Property tests for the contracts the unit suites check only pointwise:
//! linearity, symmetry, algebraic laws, round-trips, and quantization
//! bounds, over randomized inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use socprob_core::convlstm::{cell_forward_traced, ConvLstmCell, LstmState};
use socprob_core::evaluation::{ade, fde};
use socprob_core::prob_map::{
    argmax_decode, compose_max, encode_frame, gaussian_map, EncodeOptions, GaussianParams,
    GridSpec, ProbMap,
};
use socprob_core::tensor::{
    adam_step, conv2d, conv2d_backward_bias, conv2d_backward_input, conv2d_backward_kernels,
    finite_diff_grad, max_relative_error, sigmoid_scalar, AdamParams, AdamState, Tensor,
};
use socprob_core::training::{
    l2_loss, make_training_pair, prepare_scene, TrainConfig, DEFAULT_MARGIN_FRAC,
};
use socprob_core::trajectory::{build_samples, parse_dataset, scene_to_tsv, Scene, Trajectory};
use socprob_core::WorldPoint;

fn tensor_in(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let len: usize = shape.iter().product();
    proptest::collection::vec(lo..hi, len)
        .prop_map(move |data| Tensor::from_vec(&shape, data).unwrap())
}

/// Exactly representable coordinates: integer multiples of 1/256 keep
/// sums and differences exact in f64, so invariances can be asserted
/// bitwise.
fn dyadic() -> impl Strategy<Value = f64> {
    (-(1i64 << 18)..(1i64 << 18)).prop_map(|n| n as f64 / 256.0)
}

fn zip_map(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_is_linear(
        (x, y, kernels) in (1usize..=2, 1usize..=2, 2usize..=4, 2usize..=4).prop_flat_map(
            |(ci, co, h, w)| {
                (
                    tensor_in(vec![ci, h, w], -2.0, 2.0),
                    tensor_in(vec![ci, h, w], -2.0, 2.0),
                    tensor_in(vec![co, ci, 3, 3], -1.0, 1.0),
                )
            },
        ),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
    ) {
        let bias = Tensor::<f64>::zeros(&[kernels.shape()[0]]);
        let mixed = zip_map(&x, &y, |xv, yv| a * xv + b * yv);
        let lhs = conv2d(&mixed, &kernels, &bias, 1).unwrap();
        let cx = conv2d(&x, &kernels, &bias, 1).unwrap();
        let cy = conv2d(&y, &kernels, &bias, 1).unwrap();
        let rhs = zip_map(&cx, &cy, |xv, yv| a * xv + b * yv);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() <= 1e-12 * (1.0 + l.abs().max(r.abs())));
        }
    }

    #[test]
    fn sigmoid_halves_split_exactly(xs in proptest::collection::vec(-30.0..30.0f64, 1..32)) {
        for &x in &xs {
            let s = sigmoid_scalar(x) + sigmoid_scalar(-x);
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        let t = Tensor::from_vec(&[xs.len()], xs.clone()).unwrap();
        let pos = t.sigmoid();
        let neg = t.map(|v| -v).sigmoid();
        for (p, n) in pos.data().iter().zip(neg.data()) {
            prop_assert!((p + n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_lr_freezes_params_but_moments_move(
        param in tensor_in(vec![2, 3], -1.0, 1.0),
        grad in tensor_in(vec![2, 3], 0.1, 1.0),
        sign in proptest::bool::ANY,
    ) {
        let grad = if sign { grad.map(|v| -v) } else { grad };
        let mut frozen = param.clone();
        let mut state = AdamState::new(&[2, 3]);
        let hp = AdamParams::with_lr(0.0f64);
        adam_step("p", &mut frozen, &grad, &mut state, &hp).unwrap();
        prop_assert_eq!(&frozen, &param);
        prop_assert_eq!(state.step(), 1);
        let (m, v) = state.moments();
        prop_assert!(m.data().iter().any(|&x| x != 0.0));
        prop_assert!(v.data().iter().all(|&x| x >= 0.0));
        prop_assert!(v.data().iter().any(|&x| x > 0.0));

        // A zero gradient moves nothing either, regardless of lr.
        let mut still = param.clone();
        let mut state = AdamState::new(&[2, 3]);
        let hp = AdamParams::with_lr(0.05f64);
        adam_step("p", &mut still, &param.zeros_like(), &mut state, &hp).unwrap();
        prop_assert_eq!(&still, &param);
    }

    #[test]
    fn metrics_are_translation_invariant_and_symmetric(
        (pred, truth) in (1usize..=2, 1usize..=5).prop_flat_map(|(peds, len)| {
            let track = || proptest::collection::vec((dyadic(), dyadic()), len..=len);
            (
                proptest::collection::vec(track(), peds..=peds),
                proptest::collection::vec(track(), peds..=peds),
            )
        }),
        shift in ((-(1i64 << 16)..(1i64 << 16)), (-(1i64 << 16)..(1i64 << 16))),
    ) {
        let to_points = |tracks: &[Vec<(f64, f64)>]| -> Vec<Vec<WorldPoint>> {
            tracks
                .iter()
                .map(|t| t.iter().map(|&(x, y)| WorldPoint::new(x, y)).collect())
                .collect()
        };
        let (sx, sy) = (shift.0 as f64 / 256.0, shift.1 as f64 / 256.0);
        let translate = |tracks: &[Vec<WorldPoint>]| -> Vec<Vec<WorldPoint>> {
            tracks
                .iter()
                .map(|t| t.iter().map(|p| WorldPoint::new(p.x + sx, p.y + sy)).collect())
                .collect()
        };
        let p = to_points(&pred);
        let t = to_points(&truth);
        let (pt, tt) = (translate(&p), translate(&t));
        prop_assert_eq!(ade(&p, &t).unwrap(), ade(&pt, &tt).unwrap());
        prop_assert_eq!(fde(&p, &t).unwrap(), fde(&pt, &tt).unwrap());
        prop_assert_eq!(ade(&p, &t).unwrap(), ade(&t, &p).unwrap());
        prop_assert_eq!(fde(&p, &t).unwrap(), fde(&t, &p).unwrap());
        prop_assert!(ade(&p, &t).unwrap() >= 0.0 && fde(&p, &t).unwrap() >= 0.0);
    }

    #[test]
    fn compose_max_is_a_semilattice(
        maps in proptest::collection::vec(tensor_in(vec![1, 5, 5], 0.0, 1.0), 3..=3),
    ) {
        let spec = GridSpec::new(5, 5, WorldPoint::new(0.0, 0.0), 0.5).unwrap();
        let m: Vec<ProbMap<f64>> = maps
            .into_iter()
            .map(|t| ProbMap::from_tensor(&spec, t).unwrap())
            .collect();
        let pair = |a: &ProbMap<f64>, b: &ProbMap<f64>| {
            compose_max(&spec, &[a.clone(), b.clone()]).unwrap()
        };
        prop_assert_eq!(pair(&m[0], &m[1]), pair(&m[1], &m[0]));
        prop_assert_eq!(pair(&m[0], &m[0]), m[0].clone());
        let left = pair(&pair(&m[0], &m[1]), &m[2]);
        let right = pair(&m[0], &pair(&m[1], &m[2]));
        prop_assert_eq!(&left, &right);
        prop_assert_eq!(left, compose_max(&spec, &m).unwrap());
    }

    #[test]
    fn encoded_maps_stay_in_unit_range(
        positions in proptest::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 1..=4),
        sigma_target in 0.05..0.5f64,
        sigma_other in 0.05..0.6f64,
        integrate in proptest::bool::ANY,
    ) {
        let spec = GridSpec::new(12, 12, WorldPoint::new(-1.5, -1.5), 0.25).unwrap();
        let roster: Vec<(i64, WorldPoint)> = positions
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (i as i64 + 1, WorldPoint::new(x, y)))
            .collect();
        let opts = EncodeOptions {
            sigma_target,
            sigma_other,
            integrate_neighbors: integrate,
        };
        let map = encode_frame::<f64>(&roster, 1, &spec, &opts).unwrap();
        for &v in map.tensor().data() {
            prop_assert!(v.is_finite() && (0.0..=1.0).contains(&v), "value {v}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gaussian_maps_shift_with_their_center(
        (w, h) in (5usize..=10, 5usize..=10),
        (col, row) in (1usize..=3, 1usize..=3),
        (kx, ky) in (0usize..=3, 0usize..=3),
        frac in prop_oneof![Just(0.0), Just(0.25), Just(0.5)],
        sigma in 0.1..1.0f64,
    ) {
        let cell = 0.25;
        let spec = GridSpec::new(w, h, WorldPoint::new(-0.75, 0.5), cell).unwrap();
        let center = |c: usize, r: usize| -> (f64, f64) {
            (
                -0.75 + (c as f64 + frac) * cell,
                0.5 + (r as f64 + frac) * cell,
            )
        };
        let (x0, y0) = center(col, row);
        let (x1, y1) = center(col + kx, row + ky);
        let base: ProbMap<f64> =
            gaussian_map(&GaussianParams::new(x0, y0, sigma, sigma, 0.0).unwrap(), &spec);
        let moved: ProbMap<f64> =
            gaussian_map(&GaussianParams::new(x1, y1, sigma, sigma, 0.0).unwrap(), &spec);
        for r in 0..h - ky {
            for c in 0..w - kx {
                prop_assert_eq!(base.value(r, c), moved.value(r + ky, c + kx));
            }
        }
    }

    #[test]
    fn argmax_decode_errs_by_at_most_half_a_cell_diagonal(
        px in 0.0..1.0f64,
        py in 0.0..1.0f64,
        sigma in 0.05..0.15f64,
    ) {
        let cell = 0.2;
        let spec = GridSpec::new(10, 10, WorldPoint::new(0.0, 0.0), cell).unwrap();
        // Keep the target at least 3 sigma plus a cell inside the border.
        let margin = 3.0 * sigma + cell;
        let extent = 10.0 * cell;
        let p = WorldPoint::new(
            margin + px * (extent - 2.0 * margin),
            margin + py * (extent - 2.0 * margin),
        );
        let opts = EncodeOptions {
            sigma_target: sigma,
            sigma_other: 0.3,
            integrate_neighbors: true,
        };
        let map = encode_frame::<f64>(&[(1, p)], 1, &spec, &opts).unwrap();
        let decoded = argmax_decode(&map);
        prop_assert!(
            decoded.distance(&p) <= cell * core::f64::consts::SQRT_2 / 2.0 + 1e-9,
            "decoded {decoded:?} from {p:?}"
        );
    }

    #[test]
    fn windows_are_unique_and_contiguous(
        lens in proptest::collection::vec(1usize..=12, 1..=4),
        obs in 1usize..=3,
        pred in 1usize..=3,
        stride in 1usize..=3,
    ) {
        let trajectories: Vec<Trajectory> = lens
            .iter()
            .enumerate()
            .map(|(i, &len)| Trajectory {
                id: i as i64 + 1,
                start_step: i as i64,
                positions: (0..len)
                    .map(|s| WorldPoint::new(i as f64 + s as f64 * 0.5, s as f64 * 0.25))
                    .collect(),
            })
            .collect();
        let scene = Scene::new("prop", trajectories, 0, 10).unwrap();
        let samples = build_samples(&scene, obs, pred, stride).unwrap();

        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            prop_assert!(seen.insert((s.target_id, s.start_step)), "duplicate window");
        }

        let total = obs + pred;
        let mut expected = 0usize;
        for &len in &lens {
            if len >= total {
                expected += (len - total) / stride + 1;
            }
        }
        prop_assert_eq!(samples.len(), expected);

        for s in &samples {
            let track = scene
                .trajectories()
                .iter()
                .find(|t| t.id == s.target_id)
                .unwrap();
            for (j, p) in s.observed.iter().chain(&s.future).enumerate() {
                let at = track.position_at_step(s.start_step + j as i64).unwrap();
                prop_assert_eq!(*p, at);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tsv_round_trip_reproduces_the_scene(
        raw in proptest::collection::vec(
            (0i64..=4, 2usize..=6, proptest::collection::vec((-8_000_000i64..8_000_000, -8_000_000i64..8_000_000), 6)),
            1..=3,
        ),
        base in 0i64..=20,
        stride in 1i64..=10,
    ) {
        let trajectories: Vec<Trajectory> = raw
            .iter()
            .enumerate()
            .map(|(i, (start, len, coords))| Trajectory {
                id: i as i64 + 1,
                // Anchor at least one trajectory at step zero so the
                // parser's inferred base matches the constructed one.
                start_step: if i == 0 { 0 } else { *start },
                positions: coords
                    .iter()
                    .take(*len)
                    .map(|&(x, y)| WorldPoint::new(x as f64 / 1000.0, y as f64 / 1000.0))
                    .collect(),
            })
            .collect();
        let scene = Scene::new("prop", trajectories, base, stride).unwrap();
        let parsed = parse_dataset("prop", &scene_to_tsv(&scene)).unwrap();
        prop_assert_eq!(parsed, scene);
    }

    #[test]
    fn hidden_state_is_bounded_after_any_step(
        seed in proptest::num::u64::ANY,
        x in tensor_in(vec![1, 4, 4], -3.0, 3.0),
        hcur in tensor_in(vec![2, 4, 4], -0.999, 0.999),
        ccur in tensor_in(vec![2, 4, 4], -3.0, 3.0),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = ConvLstmCell::<f64>::init(1, 2, 3, 4, 4, &mut rng);
        let state = LstmState { h: hcur, c: ccur.clone() };
        let (next, acts) = cell_forward_traced(&x, &state, &cell).unwrap();
        for &v in next.h.data() {
            prop_assert!(v > -1.0 && v < 1.0, "h escaped: {v}");
        }
        // c' = f*c + i*g with |g| < 1 bounds the state growth per step.
        for (((&cn, &cp), &i), &f) in acts
            .c_new
            .data()
            .iter()
            .zip(ccur.data())
            .zip(acts.i.data())
            .zip(acts.f.data())
        {
            prop_assert!(cn.abs() <= f * cp.abs() + i + 1e-12);
            prop_assert!(cn.is_finite());
        }
    }

    #[test]
    fn training_pairs_are_pure_and_loss_nonnegative(
        speed in 0.05..0.3f64,
        heading in 0.0..6.28f64,
    ) {
        let positions: Vec<WorldPoint> = (0..6)
            .map(|s| {
                WorldPoint::new(
                    2.0 + heading.cos() * speed * s as f64,
                    2.0 + heading.sin() * speed * s as f64,
                )
            })
            .collect();
        let walker = Trajectory { id: 1, start_step: 0, positions };
        let scene = Scene::new("pure", vec![walker], 0, 10).unwrap();
        let cfg = TrainConfig {
            grid_width: 8,
            grid_height: 8,
            obs_len: 2,
            pred_len: 2,
            hidden_channels: vec![2],
            ..TrainConfig::default()
        };
        let data = prepare_scene(&scene, &cfg, DEFAULT_MARGIN_FRAC, 1).unwrap();
        let (in_a, tgt_a) =
            make_training_pair::<f64>(&data.samples[0], &cfg, &data.spec).unwrap();
        let (in_b, tgt_b) =
            make_training_pair::<f64>(&data.samples[0], &cfg, &data.spec).unwrap();
        prop_assert_eq!(&in_a, &in_b);
        prop_assert_eq!(&tgt_a, &tgt_b);
        prop_assert!(l2_loss(&in_a[0], &tgt_a[0]).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn conv_gradients_match_finite_differences(
        x in tensor_in(vec![2, 3, 3], -1.5, 1.5),
        kernels in tensor_in(vec![2, 2, 3, 3], -0.8, 0.8),
        bias in tensor_in(vec![2], -0.5, 0.5),
    ) {
        // Scalar composite: sum of sigmoid over a padded convolution.
        let loss = |xt: &Tensor<f64>, kt: &Tensor<f64>, bt: &Tensor<f64>| -> f64 {
            conv2d(xt, kt, bt, 1).unwrap().sigmoid().data().iter().sum()
        };
        let pre = conv2d(&x, &kernels, &bias, 1).unwrap();
        let act = pre.sigmoid();
        let dpre = act.map(|s| s * (1.0 - s));
        let dx = conv2d_backward_input(&kernels, &dpre, (3, 3), 1).unwrap();
        let dk = conv2d_backward_kernels(&x, &dpre, 3, 1).unwrap();
        let db = conv2d_backward_bias(&dpre).unwrap();

        let fd_x = finite_diff_grad(|t| Ok(loss(t, &kernels, &bias)), &x, 1e-5).unwrap();
        let fd_k = finite_diff_grad(|t| Ok(loss(&x, t, &bias)), &kernels, 1e-5).unwrap();
        let fd_b = finite_diff_grad(|t| Ok(loss(&x, &kernels, t)), &bias, 1e-5).unwrap();

        prop_assert!(max_relative_error(&dx, &fd_x, 1e-6).unwrap() < 1e-4);
        prop_assert!(max_relative_error(&dk, &fd_k, 1e-6).unwrap() < 1e-4);
        prop_assert!(max_relative_error(&db, &fd_b, 1e-6).unwrap() < 1e-4);
    }
}
