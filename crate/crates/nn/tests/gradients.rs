use obsr_nn::layers::{relu, relu_backward, sigmoid, sigmoid_backward};
use obsr_nn::loss::{cross_entropy, hybrid_geo_loss, l1, smooth_l1};
use obsr_nn::{
    grad_check, Dense, GradCheckConfig, Lstm, MultiHeadAttention, NnError, ParamId, ParamStore,
    Result, Tensor2,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// `Σ r ⊙ y` for a fixed random `r`, so `dL/dy = r`.
fn project(y: &Tensor2, r: &Tensor2) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn dense_layer_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "d", 4, 3, &mut rng);
    let x_id = store.add("x", random(5, 4, &mut rng));
    let r = random(5, 3, &mut rng);
    let report = grad_check(
        &mut store,
        |s| {
            let x = s.value(x_id).clone();
            let y = dense.forward(s, &x)?;
            let dx = dense.backward(s, &x, &r)?;
            s.accumulate_grad(x_id, &dx)?;
            Ok(project(&y, &r))
        },
        GradCheckConfig::with_tol(1e-6),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn activations_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let x_id = store.add("x", random(4, 6, &mut rng));
    let r1 = random(4, 6, &mut rng);
    let r2 = random(4, 6, &mut rng);
    let report = grad_check(
        &mut store,
        |s| {
            let x = s.value(x_id).clone();
            let a = relu(&x);
            let b = sigmoid(&x);
            let mut dx = relu_backward(&x, &r1)?;
            dx.add_assign(&sigmoid_backward(&b, &r2)?)?;
            s.accumulate_grad(x_id, &dx)?;
            Ok(project(&a, &r1) + project(&b, &r2))
        },
        GradCheckConfig::with_tol(1e-6),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    // Errors kept away from the kinks at 0 (L1) and ±1 (smooth L1).
    let target = random(3, 4, &mut rng);
    let offsets = Tensor2::from_fn(3, 4, |r, c| {
        let mag = 0.2 + 0.25 * ((r * 4 + c) % 7) as f64;
        let mag = if (mag - 1.0).abs() < 0.1 { 1.4 } else { mag };
        if (r + c) % 2 == 0 {
            mag
        } else {
            -mag
        }
    });
    let mut p0 = target.clone();
    p0.add_assign(&offsets).unwrap();
    let p_id = store.add("pred", p0);
    let logits_id = store.add("logits", random(5, 6, &mut rng));
    let classes = [0usize, 5, 2, 2, 3];
    let targets: Vec<Option<usize>> = vec![Some(0), Some(5), None, Some(2), Some(3)];
    let costs = Tensor2::from_fn(5, 6, |r, c| if c == r % 6 { 0.0 } else { 5.0 + (c as f64) * 0.3 });
    let report = grad_check(
        &mut store,
        |s| {
            let p = s.value(p_id).clone();
            let (a, ga) = smooth_l1(&p, &target)?;
            let (b, gb) = l1(&p, &target)?;
            let mut g = ga;
            g.add_assign(&gb)?;
            s.accumulate_grad(p_id, &g)?;
            let logits = s.value(logits_id).clone();
            let (c, gc) = cross_entropy(&logits, &classes)?;
            let (d, gd) = hybrid_geo_loss(&logits, &targets, Some(&costs), 0.7)?;
            let mut gl = gc;
            gl.add_assign(&gd)?;
            s.accumulate_grad(logits_id, &gl)?;
            Ok(a + b + c + d)
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

fn lstm_loss(
    s: &mut ParamStore,
    lstm: &Lstm,
    xs_ids: &[ParamId],
    rs: &[Tensor2],
) -> Result<f64> {
    let xs: Vec<Tensor2> = xs_ids.iter().map(|&id| s.value(id).clone()).collect();
    let (outs, cache) = lstm.forward_seq(s, &xs)?;
    let loss = outs.iter().zip(rs).map(|(o, r)| project(o, r)).sum();
    let dxs = lstm.backward_seq(s, &cache, rs)?;
    for (id, dx) in xs_ids.iter().zip(&dxs) {
        s.accumulate_grad(*id, dx)?;
    }
    Ok(loss)
}

#[test]
fn lstm_bptt_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, "lstm", 3, 4, 2, &mut rng);
    let xs: Vec<ParamId> = (0..3)
        .map(|t| store.add(format!("x{t}"), random(2, 3, &mut rng)))
        .collect();
    let rs: Vec<Tensor2> = (0..3).map(|_| random(2, 4, &mut rng)).collect();
    let report = grad_check(
        &mut store,
        |s| lstm_loss(s, &lstm, &xs, &rs),
        GradCheckConfig::with_tol(1e-5),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for causal in [false, true] {
        let mut store = ParamStore::new();
        let att = MultiHeadAttention::new(&mut store, "att", 4, 2, causal, &mut rng).unwrap();
        let x_id = store.add("x", random(6, 4, &mut rng));
        let r = random(6, 4, &mut rng);
        let report = grad_check(
            &mut store,
            |s| {
                let x = s.value(x_id).clone();
                let (y, cache) = att.forward(s, &x, 3, Some(&[3, 2]))?;
                let dx = att.backward(s, &cache, &r)?;
                s.accumulate_grad(x_id, &dx)?;
                Ok(project(&y, &r))
            },
            GradCheckConfig::with_tol(1e-5),
        )
        .unwrap();
        assert!(report.passed(), "causal={causal}: {report:?}");
    }
}

#[test]
fn corrupted_gradient_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "d", 3, 2, &mut rng);
    let x = random(4, 3, &mut rng);
    let r = random(4, 2, &mut rng);
    let report = grad_check(
        &mut store,
        |s| {
            let y = dense.forward(s, &x)?;
            let mut dy = r.clone();
            dy.scale_in_place(1.01);
            dense.backward(s, &x, &dy)?;
            Ok(project(&y, &r))
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed());
}

#[test]
fn linear_model_is_exact_to_rounding() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "d", 3, 1, &mut rng);
    let x = random(8, 3, &mut rng);
    let y = random(8, 1, &mut rng);
    let report = grad_check(
        &mut store,
        |s| {
            let pred = dense.forward(s, &x)?;
            let (loss, g) = obsr_nn::loss::mse(&pred, &y)?;
            dense.backward(s, &x, &g)?;
            Ok(loss)
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-8, "{report:?}");
}

#[test]
fn nondeterministic_model_is_rejected() {
    let mut store = ParamStore::new();
    store.add("w", Tensor2::zeros(1, 1));
    let mut calls = 0.0;
    let err = grad_check(
        &mut store,
        |_| {
            calls += 1.0;
            Ok(calls)
        },
        GradCheckConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, NnError::NonDeterministicModel { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_shapes_pass(seed in any::<u64>(), batch in 1usize..4, input in 1usize..5, hidden in 1usize..4, steps in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "lstm", input, hidden, 2, &mut rng);
        let dense = Dense::new(&mut store, "head", hidden, 2, &mut rng);
        let xs: Vec<ParamId> = (0..steps).map(|t| store.add(format!("x{t}"), random(batch, input, &mut rng))).collect();
        let r = random(batch, 2, &mut rng);
        let report = grad_check(&mut store, |s| {
            let inputs: Vec<Tensor2> = xs.iter().map(|&id| s.value(id).clone()).collect();
            let (outs, cache) = lstm.forward_seq(s, &inputs)?;
            let last = outs.last().unwrap().clone();
            let y = dense.forward(s, &last)?;
            let dlast = dense.backward(s, &last, &r)?;
            let mut d_outs: Vec<Tensor2> = outs.iter().map(|o| Tensor2::zeros(o.rows(), o.cols())).collect();
            *d_outs.last_mut().unwrap() = dlast;
            let dxs = lstm.backward_seq(s, &cache, &d_outs)?;
            for (id, dx) in xs.iter().zip(&dxs) {
                s.accumulate_grad(*id, dx)?;
            }
            Ok(project(&y, &r))
        }, GradCheckConfig::default()).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }
}
