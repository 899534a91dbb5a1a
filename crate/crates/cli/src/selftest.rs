//! The invariant suite behind `obsr selftest`: fourteen end-to-end checks,
//! each against its own reference computation or closed form.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use obsr_core::baselines::{
    train_hmp, train_intensity_model, train_region_regressor, train_tte, RegionTaskInstance, SeqTask,
    SequenceTaskInstance,
};
use obsr_core::embed::{
    contextual_count_embed, count_embed, default_tag_filter, ingest_feature_counts, tagged_points, CceMode,
    FeatureCountTable,
};
use obsr_core::hexgrid::{cell_of, CellId, GeoPoint};
use obsr_core::metrics::{
    avg_haversine, dtw, dtw_haversine, haversine, r2, regression_metrics, SEQ_ACC,
};
use obsr_core::regionize::{aggregate_intensity, multi_resolution, TargetKind};
use obsr_core::splitter::{
    assign_points, segment_xy, split_points, split_regions, split_trajectories, SplitConfig, StratSource,
    DEFAULT_TARGET_FRACTION,
};
use obsr_core::synthdata::{coordinate_embeddings, embedding_task, generate, Link, SynthKind, SynthSpec};
use obsr_core::trajprep::{
    decode_directions, encode_directions, hexify, interpolate_gaps, is_contiguous, prepare, GapConfig,
};
use obsr_nn::layers::{relu, relu_backward, sigmoid, sigmoid_backward};
use obsr_nn::loss::{cross_entropy, hybrid_geo_loss, l1, smooth_l1};
use obsr_nn::{
    grad_check, AdamConfig, Dense, GradCheckConfig, Lstm, LstmLayer, MultiHeadAttention, ParamId, ParamStore,
    Tensor2, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::artifacts::{histogram, verify_manifest, RunManifest};
use crate::bundled::bundled;
use crate::config::Task;
use crate::oracles;
use crate::pipeline::Pipeline;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.seconds,
            self.detail
        )
    }
}

type Check = fn() -> anyhow::Result<(bool, String)>;

struct Criterion {
    id: u8,
    title: &'static str,
    budget_s: Option<f64>,
    check: Check,
}

const CRITERIA: [Criterion; 14] = [
    Criterion { id: 1, title: "split correctness", budget_s: Some(30.0), check: split_correctness },
    Criterion { id: 2, title: "split determinism", budget_s: None, check: split_determinism },
    Criterion { id: 3, title: "grid contract", budget_s: Some(10.0), check: grid_contract },
    Criterion { id: 4, title: "trajectory preparation", budget_s: None, check: trajectory_preparation },
    Criterion { id: 5, title: "metric oracles", budget_s: None, check: metric_oracles },
    Criterion { id: 6, title: "gradient fidelity", budget_s: Some(60.0), check: gradient_fidelity },
    Criterion { id: 7, title: "adam first step", budget_s: None, check: adam_first_step },
    Criterion { id: 8, title: "regression recoverability", budget_s: Some(60.0), check: regression_recoverability },
    Criterion { id: 9, title: "intensity head bound", budget_s: None, check: intensity_head },
    Criterion { id: 10, title: "mobility learnability", budget_s: Some(180.0), check: mobility_learnability },
    Criterion { id: 11, title: "travel time learnability", budget_s: Some(120.0), check: travel_time_learnability },
    Criterion { id: 12, title: "embedder algebra", budget_s: None, check: embedder_algebra },
    Criterion { id: 13, title: "multi-resolution structure", budget_s: None, check: multi_resolution_structure },
    Criterion { id: 14, title: "end-to-end smoke", budget_s: Some(600.0), check: end_to_end_smoke },
];

pub fn criterion_ids() -> Vec<u8> {
    CRITERIA.iter().map(|c| c.id).collect()
}

pub fn title(id: u8) -> Option<&'static str> {
    CRITERIA.iter().find(|c| c.id == id).map(|c| c.title)
}

/// Run one criterion. Errors and blown runtime budgets count as failures.
pub fn run_criterion(id: u8) -> Option<Outcome> {
    let c = CRITERIA.iter().find(|c| c.id == id)?;
    let start = Instant::now();
    let result = (c.check)();
    let seconds = start.elapsed().as_secs_f64();
    let (mut passed, mut detail) = match result {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e:#}")),
    };
    if let Some(b) = c.budget_s {
        if seconds >= b {
            passed = false;
            detail.push_str(&format!("; over the {b:.0}s budget"));
        }
    }
    Some(Outcome {
        id,
        title: c.title,
        passed,
        detail,
        seconds,
    })
}

fn center() -> GeoPoint {
    obsr_core::synthdata::default_center()
}

// ---- 1, 2: splitting ----

fn split_correctness() -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked_buckets = 0;
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let n = rng.gen_range(100..=5000);
        let (kind, strat) = if i % 2 == 0 {
            (SynthKind::LinearPriceField, StratSource::Target)
        } else {
            (SynthKind::ClusteredIntensity, StratSource::PointCount)
        };
        let mut spec = SynthSpec::new(kind, n, i);
        spec.params.noise_sigma = 3.0;
        let points = generate(&spec)?.points().context("points")?;
        let mut cfg = SplitConfig::new(9, strat);
        cfg.seed = i;
        let m = split_points(&points, &cfg)?;
        let train: BTreeSet<CellId> = m.train_cells()?.into_iter().collect();
        let test: BTreeSet<CellId> = m.test_cells()?.into_iter().collect();
        ensure!(train.is_disjoint(&test), "dataset {i}: a cell is on both sides");
        let (tr, te, none) = assign_points(&points, &m)?;
        ensure!(none.is_empty(), "dataset {i}: {} points on neither side", none.len());
        ensure!(tr.len() + te.len() == points.len(), "dataset {i}: points lost");
        for p in &tr {
            ensure!(train.contains(&cell_of(p.point, 9)?), "dataset {i}: train point outside train cells");
        }
        for p in &te {
            ensure!(test.contains(&cell_of(p.point, 9)?), "dataset {i}: test point outside test cells");
        }
        let sizes: usize = m.bucket_report.iter().map(|b| b.size).sum();
        ensure!(sizes == train.len() + test.len(), "dataset {i}: bucket sizes do not cover the cells");
        for b in m.bucket_report.iter().filter(|b| b.size >= 20) {
            let got = b.test as f64 / b.size as f64;
            worst = worst.max((got - cfg.test_fraction).abs());
            checked_buckets += 1;
        }
    }
    Ok((
        worst <= 0.05,
        format!("50 datasets, {checked_buckets} buckets with >= 20 cells, worst fraction error {worst:.4}"),
    ))
}

fn split_determinism() -> anyhow::Result<(bool, String)> {
    let mut spec = SynthSpec::new(SynthKind::LinearPriceField, 3000, 5);
    spec.params.noise_sigma = 2.0;
    let points = generate(&spec)?.points().context("points")?;
    let mut cfg = SplitConfig::new(9, StratSource::Target);
    cfg.seed = 42;
    let reference = split_points(&points, &cfg)?.to_json()?;
    for _ in 0..3 {
        ensure!(split_points(&points, &cfg)?.to_json()? == reference, "repeat run differs");
    }
    for threads in [1, 4, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        let json = pool.install(|| split_points(&points, &cfg))?.to_json()?;
        ensure!(json == reference, "{threads} threads differ");
    }
    Ok((true, "3 repeats and 1/4/8 threads byte-identical".into()))
}

// ---- 3, 4: grid and trajectories ----

fn grid_contract() -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pool = cell_of(center(), 9)?.disk(20);
    for _ in 0..200 {
        let a = pool[rng.gen_range(0..pool.len())];
        let dist = oracles::bfs(a, 10);
        let cells: Vec<CellId> = dist.keys().copied().collect();
        let b = cells[rng.gen_range(0..cells.len())];
        let d = dist[&b];
        ensure!(a.grid_distance(b)? == d && b.grid_distance(a)? == d, "distance {a}->{b}");
        let path = a.grid_path(b)?;
        ensure!(path.len() == d as usize + 1, "path length {a}->{b}");
        ensure!(path[0] == a && path[path.len() - 1] == b, "path endpoints {a}->{b}");
        ensure!(path.len() == 1 || is_contiguous(&path), "path not contiguous {a}->{b}");
        let k = rng.gen_range(0..=10);
        let disk: BTreeSet<CellId> = a.disk(k).into_iter().collect();
        let want: BTreeSet<CellId> = dist.iter().filter(|(_, &x)| x <= k).map(|(c, _)| *c).collect();
        ensure!(disk == want, "disk {a} k={k}");
        let ring: BTreeSet<CellId> = a.ring(k)?.into_iter().collect();
        let want: BTreeSet<CellId> = dist.iter().filter(|(_, &x)| x == k).map(|(c, _)| *c).collect();
        ensure!(ring == want, "ring {a} k={k}");
    }
    Ok((true, "200 pairs agree with breadth-first search".into()))
}

fn trajectory_preparation() -> anyhow::Result<(bool, String)> {
    let mut spec = SynthSpec::new(SynthKind::GappyWalks, 100, 4);
    spec.params.gap_rate = 0.3;
    spec.params.walk_length = 30;
    spec.params.min_walk_length = Some(5);
    let walks = generate(&spec)?.trajectories().context("walks")?;
    let mut inserted = 0;
    for w in &walks {
        let h = hexify(w, 9)?;
        let extra: u32 = h
            .cells
            .windows(2)
            .map(|p| p[0].grid_distance(p[1]).map(|d| d - 1))
            .sum::<Result<u32, _>>()?;
        let out = interpolate_gaps(&h, GapConfig::default())?;
        ensure!(out.len() == 1, "{}: split unexpectedly", w.id);
        let o = &out[0];
        ensure!(is_contiguous(&o.cells), "{}: not contiguous", w.id);
        ensure!(o.cells.len() == h.cells.len() + extra as usize, "{}: length law", w.id);
        let again = interpolate_gaps(o, GapConfig::default())?;
        ensure!(again.len() == 1 && again[0].cells == o.cells, "{}: not idempotent", w.id);
        inserted += extra;
    }
    let mut spec = SynthSpec::new(SynthKind::RandomWalks, 500, 5);
    spec.params.walk_length = 40;
    spec.params.min_walk_length = Some(2);
    let walks = generate(&spec)?.trajectories().context("walks")?;
    let (hex, _) = prepare(&walks, 9, GapConfig::default())?;
    for h in &hex {
        let labels = encode_directions(&h.cells)?;
        ensure!(decode_directions(h.cells[0], &labels)? == h.cells, "{}: round trip", h.id);
    }
    Ok((
        true,
        format!("100 gappy walks ({inserted} cells spliced), {} walks round-tripped", hex.len()),
    ))
}

// ---- 5: metrics ----

fn metric_oracles() -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let disk = cell_of(center(), 9)?.disk(5);
    let seq = |rng: &mut ChaCha8Rng| -> Vec<CellId> {
        let n = rng.gen_range(1..=6);
        (0..n).map(|_| disk[rng.gen_range(0..disk.len())]).collect()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let (a, b) = (seq(&mut rng), seq(&mut rng));
        let pa: Vec<GeoPoint> = a.iter().map(|c| c.centroid()).collect();
        let pb: Vec<GeoPoint> = b.iter().map(|c| c.centroid()).collect();
        let fast = dtw(&pa, &pb, haversine);
        let slow = oracles::dtw_recursive(&pa, &pb);
        worst = worst.max((fast - slow).abs() / slow.max(1.0));
        ensure!(
            avg_haversine(&a, &b, 1)? == dtw_haversine(&a, &b, 1)?,
            "k=1 average and DTW differ"
        );
    }
    ensure!(worst <= 1e-9, "DTW relative error {worst:e}");
    let eq = haversine(GeoPoint::new(0.0, 0.0)?, GeoPoint::new(0.0, 1.0)?);
    ensure!((eq - 111_195.0).abs() / 111_195.0 <= 1e-3, "one degree = {eq} m");
    let r = regression_metrics(&[2.0, 4.0], &[3.0, 3.0])?;
    ensure!((r.get("mape").context("mape")? - 37.5).abs() < 1e-9, "MAPE fixture");
    let smape = 100.0 * (1.0 / 2.5 + 1.0 / 3.5) / 2.0;
    ensure!((r.get("smape").context("smape")? - smape).abs() < 1e-9, "sMAPE fixture");
    ensure!((r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0])? - 0.5).abs() < 1e-9, "R2 fixture");
    ensure!(r2(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0])?.abs() < 1e-9, "R2 mean fixture");
    Ok((true, format!("300 DTW pairs, worst relative error {worst:.1e}; 1 deg = {eq:.1} m")))
}

// ---- 6, 7: numerical kernel ----

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// `Σ r ⊙ y`, so that `dL/dy = r`.
fn project(y: &Tensor2, r: &Tensor2) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn gradient_fidelity() -> anyhow::Result<(bool, String)> {
    let cfg = GradCheckConfig::default();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let batch = rng.gen_range(1..5);
        let din = rng.gen_range(1..6);
        let dout = rng.gen_range(1..5);

        let mut s = ParamStore::new();
        let dense = Dense::new(&mut s, "d", din, dout, &mut rng);
        let x = s.add("x", random(batch, din, &mut rng));
        let r = random(batch, dout, &mut rng);
        let rep = grad_check(
            &mut s,
            |s| {
                let xv = s.value(x).clone();
                let y = dense.forward(s, &xv)?;
                let dx = dense.backward(s, &xv, &r)?;
                s.accumulate_grad(x, &dx)?;
                Ok(project(&y, &r))
            },
            cfg,
        )?;
        record("dense", rep.max_rel_err());

        // Inputs kept off the ReLU kink at zero.
        let mut s = ParamStore::new();
        let xv = Tensor2::from_fn(batch, din, |_, _| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        });
        let x = s.add("x", xv);
        let (r1, r2v) = (random(batch, din, &mut rng), random(batch, din, &mut rng));
        let rep = grad_check(
            &mut s,
            |s| {
                let xv = s.value(x).clone();
                let dx = relu_backward(&xv, &r1)?;
                s.accumulate_grad(x, &dx)?;
                Ok(project(&relu(&xv), &r1))
            },
            cfg,
        )?;
        record("relu", rep.max_rel_err());
        let rep = grad_check(
            &mut s,
            |s| {
                let xv = s.value(x).clone();
                let y = sigmoid(&xv);
                let dx = sigmoid_backward(&y, &r2v)?;
                s.accumulate_grad(x, &dx)?;
                Ok(project(&y, &r2v))
            },
            cfg,
        )?;
        record("sigmoid", rep.max_rel_err());

        let hidden = rng.gen_range(1..5);
        let mut s = ParamStore::new();
        let layer = LstmLayer::new(&mut s, "cell", din, hidden, &mut rng);
        let x = s.add("x", random(batch, din, &mut rng));
        let h = s.add("h", random(batch, hidden, &mut rng));
        let c = s.add("c", random(batch, hidden, &mut rng));
        let (rh, rc) = (random(batch, hidden, &mut rng), random(batch, hidden, &mut rng));
        let rep = grad_check(
            &mut s,
            |s| {
                let (xv, hv, cv) = (s.value(x).clone(), s.value(h).clone(), s.value(c).clone());
                let (h2, c2, cache) = layer.step(s, &xv, &hv, &cv)?;
                let (dx, dh, dc) = layer.step_backward(s, &cache, &rh, &rc)?;
                s.accumulate_grad(x, &dx)?;
                s.accumulate_grad(h, &dh)?;
                s.accumulate_grad(c, &dc)?;
                Ok(project(&h2, &rh) + project(&c2, &rc))
            },
            cfg,
        )?;
        record("lstm step", rep.max_rel_err());

        let steps = rng.gen_range(1..4);
        let mut s = ParamStore::new();
        let lstm = Lstm::new(&mut s, "lstm", din, hidden, 2, &mut rng);
        let xs: Vec<ParamId> = (0..steps).map(|t| s.add(format!("x{t}"), random(batch, din, &mut rng))).collect();
        let rs: Vec<Tensor2> = (0..steps).map(|_| random(batch, hidden, &mut rng)).collect();
        let rep = grad_check(
            &mut s,
            |s| {
                let inputs: Vec<Tensor2> = xs.iter().map(|&id| s.value(id).clone()).collect();
                let (outs, cache) = lstm.forward_seq(s, &inputs)?;
                let loss = outs.iter().zip(&rs).map(|(o, r)| project(o, r)).sum();
                let dxs = lstm.backward_seq(s, &cache, &rs)?;
                for (id, dx) in xs.iter().zip(&dxs) {
                    s.accumulate_grad(*id, dx)?;
                }
                Ok(loss)
            },
            cfg,
        )?;
        record("lstm sequence", rep.max_rel_err());

        let heads = rng.gen_range(1..3);
        let dim = heads * rng.gen_range(1..4);
        let len = rng.gen_range(1..4);
        let n_seq = rng.gen_range(1..3);
        for causal in [false, true] {
            let mut s = ParamStore::new();
            let att = MultiHeadAttention::new(&mut s, "att", dim, heads, causal, &mut rng)?;
            let x = s.add("x", random(n_seq * len, dim, &mut rng));
            let r = random(n_seq * len, dim, &mut rng);
            let lens: Vec<usize> = (0..n_seq).map(|_| rng.gen_range(1..=len)).collect();
            let rep = grad_check(
                &mut s,
                |s| {
                    let xv = s.value(x).clone();
                    let (y, cache) = att.forward(s, &xv, len, Some(lens.as_slice()))?;
                    let dx = att.backward(s, &cache, &r)?;
                    s.accumulate_grad(x, &dx)?;
                    Ok(project(&y, &r))
                },
                cfg,
            )?;
            record("attention", rep.max_rel_err());
        }

        // Errors kept away from the L1 kink at 0 and the smooth L1 knee at ±1.
        let target = random(batch, dout, &mut rng);
        let pred = Tensor2::from_fn(batch, dout, |i, j| {
            let mag = [0.3, 0.6, 1.5, 2.2][(i + j) % 4];
            target.get(i, j) + if (i * 3 + j) % 2 == 0 { mag } else { -mag }
        });
        let mut s = ParamStore::new();
        let p = s.add("pred", pred);
        let logits = s.add("logits", random(batch, 6, &mut rng));
        let classes: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..6)).collect();
        let masked: Vec<Option<usize>> = classes.iter().enumerate().map(|(i, c)| (i % 3 != 2).then_some(*c)).collect();
        let costs = Tensor2::from_fn(batch, 6, |_, _| rng.gen_range(0.0..8.0));
        for (name, which) in [("smooth l1", 0), ("l1", 1), ("cross entropy", 2), ("hybrid loss", 3)] {
            let rep = grad_check(
                &mut s,
                |s| {
                    let (loss, g, id) = match which {
                        0 => {
                            let (l, g) = smooth_l1(s.value(p), &target)?;
                            (l, g, p)
                        }
                        1 => {
                            let (l, g) = l1(s.value(p), &target)?;
                            (l, g, p)
                        }
                        2 => {
                            let (l, g) = cross_entropy(s.value(logits), &classes)?;
                            (l, g, logits)
                        }
                        _ => {
                            let (l, g) = hybrid_geo_loss(s.value(logits), &masked, Some(&costs), 0.7)?;
                            (l, g, logits)
                        }
                    };
                    s.accumulate_grad(id, &g)?;
                    Ok(loss)
                },
                cfg,
            )?;
            record(name, rep.max_rel_err());
        }
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((max <= cfg.tol, format!("max relative error per check: {detail}")))
}

fn adam_first_step() -> anyhow::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lr = 1e-3;
    let g: Vec<f64> = (0..64)
        .map(|_| {
            let mag = 10f64.powf(rng.gen_range(-3.0..1.0));
            if rng.gen_bool(0.5) { mag } else { -mag }
        })
        .collect();
    let mut s = ParamStore::new();
    let w0: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = s.add("w", Tensor2::from_vec(1, 64, w0.clone())?);
    s.zero_grads();
    s.accumulate_grad(w, &Tensor2::from_vec(1, 64, g.clone())?)?;
    s.adam_step(&AdamConfig::with_lr(lr))?;
    let worst = s
        .value(w)
        .data()
        .iter()
        .zip(&w0)
        .zip(&g)
        .map(|((after, before), gi)| ((after - before) + lr * gi.signum()).abs())
        .fold(0.0, f64::max);
    ensure!(worst <= 1e-6, "first step deviates from -lr*sign(g) by {worst:e}");

    let mut s = ParamStore::new();
    let w = s.add("w", Tensor2::zeros(1, 1));
    let cfg = AdamConfig::with_lr(0.1);
    for _ in 0..200 {
        s.zero_grads();
        let v = s.value(w).get(0, 0);
        s.accumulate_grad(w, &Tensor2::filled(1, 1, 2.0 * (v - 3.0)))?;
        s.adam_step(&cfg)?;
    }
    let end = s.value(w).get(0, 0);
    Ok((
        (end - 3.0).abs() < 0.05,
        format!("first-step error {worst:.1e}; quadratic ends at w = {end:.4}"),
    ))
}

// ---- 8, 9: region baselines ----

fn region_instance(link: Link, n: usize, sigma: f64, seed: u64) -> anyhow::Result<RegionTaskInstance> {
    let task = embedding_task(n, 5, sigma, link, 9, seed)?;
    let manifest = split_regions(&task.targets, &SplitConfig::new(9, StratSource::Target))?;
    Ok(RegionTaskInstance::new(task.embeddings, task.targets, manifest)?)
}

fn regression_recoverability() -> anyhow::Result<(bool, String)> {
    let inst = region_instance(Link::Identity, 100, 0.01, 8)?;
    let (_, report) = train_region_regressor(&inst, &TrainConfig::regression())?;
    let rmse = report.get("rmse").context("rmse")?;
    // Reference: ordinary least squares on the same train cells.
    let fit = |cells: &[CellId]| -> (Vec<Vec<f64>>, Vec<f64>) {
        let x = cells.iter().map(|c| inst.raw_features(*c)).collect();
        let y = cells.iter().map(|c| inst.targets.target(*c).unwrap_or(0.0)).collect();
        (x, y)
    };
    let (xtr, ytr) = fit(inst.train_cells());
    let (xte, yte) = fit(inst.test_cells());
    let w = oracles::least_squares(&xtr, &ytr).context("singular design")?;
    let yhat: Vec<f64> = xte.iter().map(|x| oracles::predict_linear(&w, x)).collect();
    let linear = oracles::rmse(&yte, &yhat);
    Ok((
        rmse < 0.03,
        format!("MLP test RMSE {rmse:.4} (needs < 0.03); linear least-squares RMSE {linear:.4}"),
    ))
}

fn intensity_head() -> anyhow::Result<(bool, String)> {
    let inst = region_instance(Link::Sigmoid, 300, 0.0, 12)?;
    let (model, report) = train_intensity_model(&inst, &TrainConfig::intensity())?;
    let preds = model.predict_cells(&inst, inst.test_cells())?;
    ensure!(preds.iter().all(|&p| p > 0.0 && p < 1.0), "prediction outside (0, 1)");
    let r2v = report.get("r2").context("r2")?;

    let spec = SynthSpec::new(SynthKind::ClusteredIntensity, 20000, 9);
    let points = generate(&spec)?.points().context("points")?;
    let ds = aggregate_intensity(&points, 9)?;
    let emb = coordinate_embeddings(&ds.cells(), spec.center);
    let manifest = split_regions(&ds, &SplitConfig::new(9, StratSource::Target))?;
    let skewed = RegionTaskInstance::new(emb, ds, manifest)?;
    let (model, _) = train_intensity_model(&skewed, &TrainConfig::intensity())?;
    let test = skewed.test_cells();
    let preds = model.predict_cells(&skewed, test)?;
    ensure!(preds.iter().all(|&p| p > 0.0 && p < 1.0), "skewed prediction outside (0, 1)");
    let targets: Vec<f64> = test.iter().map(|c| skewed.targets.target(*c).unwrap_or(0.0)).collect();
    let (sp, st) = (oracles::std_dev(&preds), oracles::std_dev(&targets));
    Ok((
        r2v > 0.8 && sp < st,
        format!("sigmoid-linear R2 {r2v:.3}; skewed targets: prediction std {sp:.4} vs target std {st:.4}"),
    ))
}

// ---- 10, 11: sequence baselines ----

fn walk_instance(kind: SynthKind, n: usize, lens: (usize, usize), task: SeqTask, seed: u64) -> anyhow::Result<SequenceTaskInstance> {
    let mut spec = SynthSpec::new(kind, n, seed);
    spec.params.min_walk_length = Some(lens.0);
    spec.params.walk_length = lens.1;
    spec.params.cadence_s = 30.0;
    if kind == SynthKind::ConstantDirectionWalks {
        spec.params.direction = Some(2);
    }
    let walks = generate(&spec)?.trajectories().context("walks")?;
    let (hex, _) = prepare(&walks, 9, GapConfig::default())?;
    let segs = hex
        .iter()
        .map(|h| segment_xy(h, DEFAULT_TARGET_FRACTION))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = split_trajectories(&hex, &SplitConfig::new(9, StratSource::Length))?;
    let cells = cell_of(spec.center, 9)?.disk(70);
    Ok(SequenceTaskInstance::new(segs, coordinate_embeddings(&cells, spec.center), manifest, task)?)
}

fn mobility_learnability() -> anyhow::Result<(bool, String)> {
    let inst = walk_instance(SynthKind::ConstantDirectionWalks, 120, (20, 40), SeqTask::Hmp, 10)?;
    let (_, reports) = train_hmp(&inst, &TrainConfig::hmp())?;
    let acc = reports[0].get(SEQ_ACC).context("accuracy")?;
    Ok((acc >= 95.0, format!("sequence accuracy@1 {acc:.2}% after 10 epochs")))
}

fn travel_time_learnability() -> anyhow::Result<(bool, String)> {
    let inst = walk_instance(SynthKind::RandomWalks, 200, (5, 20), SeqTask::Tte, 11)?;
    let (_, report) = train_tte(&inst, &TrainConfig::tte())?;
    let mape = report.get("mape").context("mape")?;
    // Reference: duration is exactly linear in the number of input steps.
    let xy = |it: &mut dyn Iterator<Item = &obsr_core::splitter::SegmentedTrajectory>| -> (Vec<Vec<f64>>, Vec<f64>) {
        it.map(|t| (vec![t.x.cells.len() as f64], t.x.duration_s)).unzip()
    };
    let (xtr, ytr) = xy(&mut inst.train_set());
    let (xte, yte) = xy(&mut inst.test_set());
    let w = oracles::least_squares(&xtr, &ytr).context("singular design")?;
    let yhat: Vec<f64> = xte.iter().map(|x| oracles::predict_linear(&w, x)).collect();
    let linear = regression_metrics(&yte, &yhat)?.get("mape").unwrap_or(f64::NAN);
    Ok((
        mape < 10.0,
        format!("test MAPE {mape:.2}% after 50 epochs; linear-in-length reference {linear:.2}%"),
    ))
}

// ---- 12, 13: embedders and resolutions ----

fn embedder_algebra() -> anyhow::Result<(bool, String)> {
    let spec = SynthSpec::new(SynthKind::PoiFeatures, 5000, 12);
    let points = generate(&spec)?.points().context("points")?;
    let records = tagged_points(&points, "tag");
    let filter = default_tag_filter();
    let table = ingest_feature_counts(&records, 9, &filter)?;
    let accepted: BTreeSet<&str> = filter.iter().map(String::as_str).collect();
    let expected = records.iter().filter(|(_, t)| accepted.contains(t.as_str())).count() as u64;
    let total: u64 = table.totals().iter().sum();
    ensure!(total == expected, "count conservation: {total} counted, {expected} tagged");

    let mut cells: Vec<CellId> = table.counts.keys().copied().collect();
    cells.extend(cell_of(center(), 9)?.disk(3));
    cells.sort();
    cells.dedup();
    let ce = count_embed(&table, &cells)?;
    for mode in [CceMode::Concat, CceMode::Squashed] {
        let cce = contextual_count_embed(&table, &cells, 0, mode)?;
        ensure!(cce.vectors == ce.vectors, "k=0 {mode:?} differs from CE");
    }

    let base = [1u64, 2, 3];
    let origin = cell_of(center(), 9)?;
    let uniform = FeatureCountTable {
        resolution: 9,
        vocabulary: vec!["a=1".into(), "b=2".into(), "c=3".into()],
        counts: origin.disk(8).into_iter().map(|c| (c, base.to_vec())).collect(),
    };
    let inner = origin.disk(5);
    let k = 2;
    let tiled: Vec<f64> = base.iter().map(|&v| v as f64).cycle().take(base.len() * (k + 1)).collect();
    let m = contextual_count_embed(&uniform, &inner, k as u32, CceMode::Concat)?;
    ensure!(m.vectors.values().all(|v| *v == tiled), "uniform field is not tiled");
    Ok((
        true,
        format!("{total} features conserved; CCE k=0 equals CE on {} cells; uniform field tiles {}x", cells.len(), k + 1),
    ))
}

fn multi_resolution_structure() -> anyhow::Result<(bool, String)> {
    let res = [8u8, 9, 10];
    let mut spec = SynthSpec::new(SynthKind::LinearPriceField, 20000, 13);
    spec.params.noise_sigma = 2.0;
    let points = generate(&spec)?.points().context("points")?;
    let by_res = multi_resolution(&points, &res, TargetKind::MeanValue)?;
    let all: Vec<f64> = by_res.values().flat_map(|d| d.targets()).collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = 20;
    let counts = |r: u8| -> anyhow::Result<Vec<u64>> {
        Ok(histogram(&by_res[&r].targets(), bins, Some((lo, hi)))?.iter().map(|b| b.count).collect())
    };
    let w1 = oracles::wasserstein_hist(&counts(8)?, &counts(10)?, (hi - lo) / bins as f64) / (hi - lo);

    let spec = SynthSpec::new(SynthKind::ClusteredIntensity, 20000, 14);
    let points = generate(&spec)?.points().context("points")?;
    let by_res = multi_resolution(&points, &res, TargetKind::Intensity)?;
    let medians: Vec<f64> = res.iter().map(|r| oracles::median(&by_res[r].targets())).collect();
    let falling = medians.windows(2).all(|w| w[1] < w[0]);
    let low_mass = |r: u8| -> anyhow::Result<f64> {
        let h = histogram(&by_res[&r].targets(), 10, Some((0.0, 1.0)))?;
        Ok(h[0].count as f64 / by_res[&r].len() as f64)
    };
    let (m8, m10) = (low_mass(8)?, low_mass(10)?);
    Ok((
        w1 < 0.1 && falling && m10 > m8,
        format!(
            "mean-value W1(res 8, res 10) = {w1:.4} of range; intensity medians {:.2e} > {:.2e} > {:.2e}; mass in lowest decile {m8:.2} -> {m10:.2}",
            medians[0], medians[1], medians[2]
        ),
    ))
}

// ---- 14: pipeline ----

fn end_to_end_smoke() -> anyhow::Result<(bool, String)> {
    let tmp = tempfile::tempdir()?;
    let mut notes = Vec::new();
    for task in Task::ALL {
        let cfg = bundled(task)?;
        let out = tmp.path().join(task.name());
        let p = Pipeline::new(cfg.clone(), &out);
        let first = p.run()?;
        check_report_shape(&cfg, &first.report)?;
        let metrics = std::fs::read_dir(&out)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("res"))
            .flat_map(|d| std::fs::read_dir(d.path()).into_iter().flatten().filter_map(|e| e.ok()))
            .filter(|e| e.file_name().to_string_lossy().starts_with("metrics_"))
            .count();
        ensure!(
            metrics == cfg.resolutions.len() * cfg.embedders.len(),
            "{}: {metrics} metric reports",
            task.name()
        );
        let second = p.run()?;
        ensure!(second.timing.previous_manifest_matched == Some(true), "{}: rerun manifest differs", task.name());
        ensure!(verify_manifest(&out, &RunManifest::read(&out)?)?.is_empty(), "{}: hash mismatch", task.name());
        notes.push(format!(
            "{} {:.0}s+{:.0}s",
            task.name(),
            first.timing.total_seconds,
            second.timing.total_seconds
        ));
    }
    Ok((true, format!("all five tasks rerun hash-identically ({})", notes.join(", "))))
}

fn check_report_shape(cfg: &crate::config::PipelineConfig, md: &str) -> anyhow::Result<()> {
    let layout = obsr_core::metrics::layout_for(cfg.task.name()).context("layout")?;
    let header = md.lines().find(|l| l.starts_with("| Metric")).context("no table")?;
    for r in &cfg.resolutions {
        for e in &cfg.embedders {
            let col = format!("Res {r} {}", e.display_name());
            ensure!(header.contains(&col), "missing column {col}");
        }
    }
    let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Metric")).collect();
    let per = if layout.per_k { cfg.ks.len() } else { 1 };
    if rows.len() != layout.rows.len() * per {
        bail!("{} rows, expected {}", rows.len(), layout.rows.len() * per);
    }
    for spec in &layout.rows {
        ensure!(rows.iter().any(|r| r.starts_with(&format!("| {} |", spec.label))), "missing row {}", spec.label);
    }
    if layout.per_k {
        for k in &cfg.ks {
            ensure!(rows.iter().any(|r| r.ends_with(&format!(" {k} |"))), "missing k={k}");
        }
    }
    Ok(())
}
