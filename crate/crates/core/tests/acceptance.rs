//! Acceptance suite (custom harness). Criteria run in order and each prints
//! one PASS/FAIL line; the process exits non-zero if any criterion failed.
//!
//! The desk-scale run (criteria 7 and 8) and its repeat (criterion 9) take
//! 40 to 50 minutes on one core.

mod common;

use common::{gradient_check, mini_config};
use followup_ft::adaptation::{
    classify_pixels, detection_weight_map, segmentation_weight_map, PixelOutcome, SliceCount, SlicePool, Weighting,
};
use followup_ft::evaluation::{
    avd, cohort_csv, detection_metrics, dice, hd95, lesion_size_split, mc_dropout_uncertainty, CohortRow,
};
use followup_ft::experiment::{
    evaluate_features, finetune_variants, same_trunk, score_prediction, summarize, summary_table, Experiment, RunConfig,
    UncertaintyOptions, Variant, BASE_MODEL,
};
use followup_ft::inference::{exam_features, predict_volume};
use followup_ft::network::checkpoint::to_bytes;
use followup_ft::network::{build_network, compute_receptive_field, FeatureMap, Mode, NetworkConfig, NetworkParams};
use followup_ft::phantom::{generate_cohort, generate_patient, PhantomConfig};
use followup_ft::postprocess::{connected_components, morph_close_3d, morph_open_plus_2d, Task};
use followup_ft::training::train_base;
use followup_ft::{Mask, MultiSequenceExam};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Instant;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

struct Suite {
    failed: Vec<String>,
}

impl Suite {
    /// Runs one criterion; exceeding `limit_s` counts as a failure.
    fn check<R>(&mut self, id: &str, limit_s: f64, f: impl FnOnce() -> (Verdict, R)) -> R {
        let t = Instant::now();
        let (v, r) = f();
        let secs = t.elapsed().as_secs_f64();
        let pass = v.pass && secs <= limit_s;
        println!("{} [{id}] {} ({secs:.1} s, limit {limit_s:.0} s)", if pass { "PASS" } else { "FAIL" }, v.detail);
        if !pass {
            self.failed.push(id.to_string());
        }
        r
    }
}

// ---------------------------------------------------------------- fixtures

fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 5,
        network: NetworkConfig { n_kernels: 4, head_kernels: 8, ..Default::default() },
        ..Default::default()
    };
    cfg.training.patch_size = 32;
    cfg.adaptation.iterations = 5;
    cfg.phantom = tiny_phantom();
    cfg
}

fn tiny_phantom() -> PhantomConfig {
    PhantomConfig {
        shape: [8, 56, 56],
        organ_semi_axes: [3.5, 24.0, 25.0],
        lesions_per_patient: (2, 3),
        lesion_radius_mm: (3.0, 5.0),
        seed: 9,
        ..Default::default()
    }
}

fn tiny_exam(seed: u64) -> MultiSequenceExam<f32> {
    generate_patient(&tiny_phantom(), "tiny", seed, false).unwrap().study.baseline
}

fn random_mask(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Mask {
    let n = shape.iter().product::<usize>();
    let density = rng.random_range(0.05..0.6);
    let data = (0..n).map(|_| u8::from(rng.random_bool(density))).collect();
    Mask::from_vec(shape, [1.0; 3], data).unwrap()
}

fn random_shape(rng: &mut ChaCha8Rng) -> [usize; 3] {
    [rng.random_range(1..17), rng.random_range(1..17), rng.random_range(1..17)]
}

// ---------------------------------------------------------------- oracles

fn neighbours26(shape: [usize; 3], p: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if (dz, dy, dx) == (0, 0, 0) {
                    continue;
                }
                let q = [p[0] as i64 + dz, p[1] as i64 + dy, p[2] as i64 + dx];
                if (0..3).all(|k| q[k] >= 0 && q[k] < shape[k] as i64) {
                    out.push([q[0] as usize, q[1] as usize, q[2] as usize]);
                }
            }
        }
    }
    out
}

/// Breadth-first flood fill; objects as sorted voxel sets.
fn flood_fill(m: &Mask) -> Vec<BTreeSet<usize>> {
    let shape = m.shape();
    let mut seen = vec![false; m.len()];
    let mut objects = Vec::new();
    for start in 0..m.len() {
        if m.data()[start] == 0 || seen[start] {
            continue;
        }
        let mut obj = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            obj.insert(i);
            for q in neighbours26(shape, m.coords(i)) {
                let j = m.index(q[0], q[1], q[2]);
                if m.data()[j] != 0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        objects.push(obj);
    }
    objects
}

fn label_sets(labels: &[u32]) -> BTreeSet<BTreeSet<usize>> {
    let mut by: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            by.entry(l).or_default().insert(i);
        }
    }
    by.into_values().collect()
}

fn overlaps(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> bool {
    !a.is_disjoint(b)
}

/// `(tpr, fpc, precision, f1)` from pairwise object intersections.
fn detection_oracle(pred: &Mask, truth: &Mask) -> (Option<f64>, usize, Option<f64>, f64) {
    let (ps, ts) = (flood_fill(pred), flood_fill(truth));
    let det = ts.iter().filter(|t| ps.iter().any(|p| overlaps(p, t))).count();
    let att = ps.iter().filter(|p| ts.iter().any(|t| overlaps(p, t))).count();
    let tpr = (!ts.is_empty()).then(|| det as f64 / ts.len() as f64);
    let precision = (!ps.is_empty()).then(|| att as f64 / ps.len() as f64);
    let (r, p) = (tpr.unwrap_or(0.0), precision.unwrap_or(0.0));
    let f1 = if r + p > 0.0 { 2.0 * r * p / (r + p) } else { 0.0 };
    (tpr, ps.len() - att, precision, f1)
}

fn foreground(m: &Mask, p: [i64; 3]) -> bool {
    let s = m.shape();
    (0..3).all(|k| p[k] >= 0 && p[k] < s[k] as i64) && m.get(p[0] as usize, p[1] as usize, p[2] as usize) != 0
}

fn cube_offsets() -> Vec<[i64; 3]> {
    let mut v = Vec::new();
    for a in -1..=1 {
        for b in -1..=1 {
            for c in -1..=1 {
                v.push([a, b, c]);
            }
        }
    }
    v
}

fn shifted(p: [i64; 3], d: [i64; 3]) -> [i64; 3] {
    [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
}

/// Closing by the 3x3x3 cube on the zero-extended grid.
fn close_oracle(m: &Mask) -> Vec<u8> {
    let cube = cube_offsets();
    let dilated = |p: [i64; 3]| cube.iter().any(|&d| foreground(m, shifted(p, d)));
    (0..m.len())
        .map(|i| {
            let c = m.coords(i);
            let p = [c[0] as i64, c[1] as i64, c[2] as i64];
            u8::from(cube.iter().all(|&d| dilated(shifted(p, d))))
        })
        .collect()
}

/// Slice-wise opening by the plus; pixels outside the slice are background.
fn open_oracle(m: &Mask) -> Vec<u8> {
    let plus = [[0, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
    let s = m.shape();
    let inside = |p: [i64; 3]| (1..3).all(|k| p[k] >= 0 && p[k] < s[k] as i64);
    let eroded = |p: [i64; 3]| plus.iter().all(|&d| foreground(m, shifted(p, d)));
    (0..m.len())
        .map(|i| {
            let c = m.coords(i);
            let p = [c[0] as i64, c[1] as i64, c[2] as i64];
            u8::from(plus.iter().any(|&d| {
                let q = shifted(p, d);
                inside(q) && eroded(q)
            }))
        })
        .collect()
}

/// Rule table: (in pred, in truth, own object overlaps the other mask).
fn outcome_oracle(pred: &Mask, truth: &Mask) -> Vec<PixelOutcome> {
    let (ps, ts) = (flood_fill(pred), flood_fill(truth));
    (0..pred.len())
        .map(|i| {
            let in_p = pred.data()[i] != 0;
            let in_t = truth.data()[i] != 0;
            match (in_p, in_t) {
                (true, true) => PixelOutcome::Tp,
                (false, false) => PixelOutcome::Tn,
                (false, true) => {
                    let t = ts.iter().find(|t| t.contains(&i)).unwrap();
                    if ps.iter().any(|p| overlaps(p, t)) {
                        PixelOutcome::FnDetected
                    } else {
                        PixelOutcome::FnMissed
                    }
                }
                (true, false) => {
                    let p = ps.iter().find(|p| p.contains(&i)).unwrap();
                    if ts.iter().any(|t| overlaps(p, t)) {
                        PixelOutcome::FpAttached
                    } else {
                        PixelOutcome::FpObject
                    }
                }
            }
        })
        .collect()
}

fn weight_table(o: PixelOutcome) -> (f32, f32) {
    match o {
        PixelOutcome::Tn => (1.0, 1.0),
        PixelOutcome::Tp => (2.0, 2.0),
        PixelOutcome::FnDetected => (0.0, 5.0),
        PixelOutcome::FnMissed => (5.0, 5.0),
        PixelOutcome::FpAttached => (0.0, 5.0),
        PixelOutcome::FpObject => (1.0, 5.0),
    }
}

/// Exhaustive symmetric 95th-percentile distance between face-boundary voxels.
fn hd95_oracle(a: &Mask, b: &Mask) -> f64 {
    let boundary = |m: &Mask| -> Vec<[i64; 3]> {
        let faces = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
        (0..m.len())
            .filter(|&i| m.data()[i] != 0)
            .map(|i| {
                let c = m.coords(i);
                [c[0] as i64, c[1] as i64, c[2] as i64]
            })
            .filter(|&p| faces.iter().any(|&d| !foreground(m, shifted(p, d))))
            .collect()
    };
    let sp = a.spacing();
    let (ba, bb) = (boundary(a), boundary(b));
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        let mut d: Vec<f64> = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| (0..3).map(|k| ((p[k] - q[k]) as f64 * sp[k]).powi(2)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(f64::total_cmp);
        let rank = (0.95 * d.len() as f64).ceil().max(1.0) as usize;
        d[rank - 1]
    };
    directed(&ba, &bb).max(directed(&bb, &ba))
}

// ---------------------------------------------------------------- criteria

fn receptive_field() -> Verdict {
    let analytic = compute_receptive_field(&NetworkConfig::default().dilation_schedule);
    let cfg = NetworkConfig { n_kernels: 6, head_kernels: 6, ..Default::default() };
    let params = build_network::<f64>(&cfg, 3).unwrap();
    let size = 133;
    let c = 66;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = |ch: usize, rng: &mut ChaCha8Rng| {
        FeatureMap::from_vec(1, size, size, ch, (0..size * size * ch).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let (a, b) = (input(cfg.in_channels_a, &mut rng), input(cfg.in_channels_b, &mut rng));
    let run = |a: &FeatureMap<f64>, b: &FeatureMap<f64>| {
        let out = params.forward(a, b, Mode::Infer, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        out.at(0, c, c, 1)
    };
    let reference = run(&a, &b);
    let mut radius = 0;
    for r in 1..=65i64 {
        let offsets = [(r, 0), (-r, 0), (0, r), (0, -r), (r, r), (-r, -r), (r, -r), (-r, r), (r, r / 2), (-r / 3, r)];
        let changed = offsets.iter().any(|&(dy, dx)| {
            let (y, x) = ((c as i64 + dy) as usize, (c as i64 + dx) as usize);
            [0usize, 1].iter().any(|&path| {
                let (mut a2, mut b2) = (a.clone(), b.clone());
                let m = if path == 0 { &mut a2 } else { &mut b2 };
                let i = (y * size + x) * m.c;
                m.data[i] += 1.0;
                run(&a2, &b2) != reference
            })
        });
        if changed {
            radius = r;
        }
    }
    Verdict::new(analytic == 123 && radius == 61, format!("receptive field {analytic}, empirical radius {radius}"))
}

fn gradients() -> Verdict {
    let samples = gradient_check(&mini_config(), 6, 150, 1e-5, 17);
    let worst = samples.iter().map(|s| s.rel_err()).fold(0.0, f64::max);
    Verdict::new(samples.len() >= 100 && worst < 1e-3, format!("gradient check: {} coordinates, worst relative error {worst:.2e}", samples.len()))
}

/// Fine-tunes a tiny base over several variants; returns checkpoint bytes.
fn freezing() -> (Verdict, Vec<Vec<u8>>) {
    let cfg = tiny_run_config();
    let mut tcfg = cfg.base_training();
    tcfg.iterations = 3;
    let base = train_base(&cfg.network, &tcfg, &[tiny_exam(1), tiny_exam(2)]).unwrap().params;
    let variants: Vec<Variant> = [
        (SliceCount::Count(1), Weighting::None),
        (SliceCount::All, Weighting::Detection),
        (SliceCount::Count(2), Weighting::Segmentation),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (n, w))| Variant::new(format!("v{i}"), n, SlicePool::AllOrganSlices, w, cfg.adaptation.iterations))
    .collect();
    let tuned = finetune_variants(&cfg, &base, &tiny_exam(3), &variants).unwrap();
    let heads_differ = |p: &NetworkParams<f32>| {
        [p.head_hidden_index(), p.head_output_index()].iter().any(|&i| p.layers()[i] != base.layers()[i])
    };
    let frozen = tuned.iter().all(|t| same_trunk(&base, &t.params));
    let moved = tuned.iter().all(|t| heads_differ(&t.params));
    let mut bytes = vec![to_bytes(&base).unwrap()];
    bytes.extend(tuned.iter().map(|t| to_bytes(&t.params).unwrap()));
    (
        Verdict::new(
            frozen && moved,
            format!("freezing: {} fine-tunes, trunk bit-identical {frozen}, head changed {moved}", tuned.len()),
        ),
        bytes,
    )
}

fn oracles() -> Verdict {
    const N: usize = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut bad = Vec::new();
    for k in 0..N {
        let shape = random_shape(&mut rng);
        let (a, b) = (random_mask(&mut rng, shape), random_mask(&mut rng, shape));

        let cc = connected_components(&a);
        let oracle: BTreeSet<BTreeSet<usize>> = flood_fill(&a).into_iter().collect();
        if label_sets(&cc.labels) != oracle || cc.len() != oracle.len() {
            bad.push(format!("components #{k}"));
        }

        let r = detection_metrics(&connected_components(&a), &connected_components(&b)).unwrap();
        if (r.tpr, r.fpc, r.precision, r.f1) != detection_oracle(&a, &b) {
            bad.push(format!("detection #{k}"));
        }

        if morph_close_3d(&a).data() != close_oracle(&a).as_slice() {
            bad.push(format!("closing #{k}"));
        }
        if morph_open_plus_2d(&a).data() != open_oracle(&a).as_slice() {
            bad.push(format!("opening #{k}"));
        }

        let outcomes = classify_pixels(&a, &b).unwrap();
        let expected = outcome_oracle(&a, &b);
        if outcomes.data() != expected.as_slice() {
            bad.push(format!("outcomes #{k}"));
        }
        let (det, seg) = (detection_weight_map::<f32>(&outcomes), segmentation_weight_map::<f32>(&outcomes));
        let ok = expected.iter().enumerate().all(|(i, &o)| (det.data()[i], seg.data()[i]) == weight_table(o));
        if !ok {
            bad.push(format!("weights #{k}"));
        }
    }
    Verdict::new(
        bad.is_empty(),
        format!("oracles: {N} instances each of components, detection, closing, opening, outcomes, weights; mismatches {bad:?}"),
    )
}

fn mask_of(shape: [usize; 3], spacing: [f64; 3], ones: &[usize]) -> Mask {
    let mut data = vec![0u8; shape.iter().product()];
    for &i in ones {
        data[i] = 1;
    }
    Mask::from_vec(shape, spacing, data).unwrap()
}

fn metric_fixtures() -> Verdict {
    let tol = 1e-9;
    let close = |a: f64, b: f64| (a - b).abs() <= tol;
    let s = [1, 1, 20];
    let sp = [1.0; 3];
    let mut failures = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let x = mask_of(s, sp, &[0, 1, 2, 3, 4, 5]);
    let y = mask_of(s, sp, &[3, 4, 5, 6]);
    expect("dice identical", close(dice(&x, &x).unwrap(), 1.0));
    expect("dice disjoint", close(dice(&x, &mask_of(s, sp, &[10, 11])).unwrap(), 0.0));
    expect("dice 6/4/3", close(dice(&x, &y).unwrap(), 0.6));

    let big = [1, 20, 20];
    let v110 = mask_of(big, sp, &(0..110).collect::<Vec<_>>());
    let v100 = mask_of(big, sp, &(200..300).collect::<Vec<_>>());
    let v100b = mask_of(big, sp, &(0..100).map(|i| 2 * i + 1).collect::<Vec<_>>());
    let v50 = mask_of(big, sp, &(0..50).collect::<Vec<_>>());
    let empty = mask_of(big, sp, &[]);
    expect("avd 110 vs 100", avd(&v110, &v100).unwrap().is_some_and(|v| close(v, 10.0)));
    expect("avd equal volumes", avd(&v100b, &v100).unwrap().is_some_and(|v| close(v, 0.0)));
    expect("avd empty vs 50", avd(&empty, &v50).unwrap().is_some_and(|v| close(v, 100.0)));

    expect("hd95 identical", hd95(&x, &x).unwrap().is_some_and(|v| close(v, 0.0)));
    let p = mask_of(s, sp, &[4]);
    let q = mask_of(s, sp, &[7]);
    expect("hd95 3 voxels apart", hd95(&p, &q).unwrap().is_some_and(|v| close(v, 3.0)));

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut n_random = 0;
    while n_random < 100 {
        let shape = [rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9)];
        let spacing = [rng.random_range(0.5..3.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        let a = random_mask(&mut rng, shape);
        let b = random_mask(&mut rng, shape);
        let (a, b) = (Mask::from_vec(shape, spacing, a.into_vec()).unwrap(), Mask::from_vec(shape, spacing, b.into_vec()).unwrap());
        if a.count() == 0 || b.count() == 0 {
            continue;
        }
        n_random += 1;
        let got = hd95(&a, &b).unwrap().unwrap();
        expect("hd95 random", close(got, hd95_oracle(&a, &b)));
    }
    Verdict::new(failures.is_empty(), format!("metric fixtures: 8 worked examples and {n_random} random hd95 cases; failures {failures:?}"))
}

fn mc_dropout() -> Verdict {
    let exam = tiny_exam(4);
    let sd_of = |rate: f64| {
        let cfg = NetworkConfig { n_kernels: 4, head_kernels: 8, dropout_rate: rate, ..Default::default() };
        let params = build_network::<f32>(&cfg, 6).unwrap();
        mc_dropout_uncertainty(&params, &exam, 25, Task::Detection, 8, None).unwrap().sd
    };
    let off = sd_of(0.0);
    let on = sd_of(0.2);
    let zero = off.data().iter().all(|&v| v == 0.0);
    let max = on.data().iter().copied().fold(0.0f32, f32::max);
    let in_range = on.data().iter().chain(off.data()).all(|&v| (0.0..=0.5).contains(&v));
    Verdict::new(zero && max > 0.0 && in_range, format!("MC dropout: rate 0 all-zero {zero}, rate 0.2 max SD {max:.4}, within [0, 0.5] {in_range}"))
}

// ---------------------------------------------------------------- desk run

struct DeskRun {
    base: NetworkParams<f32>,
    checkpoints: Vec<Vec<u8>>,
    rows: Vec<CohortRow>,
    csv: String,
}

const ALL: &str = "all_slices";
const ONE: &str = "1_slice";
const TWO: &str = "2_slices";

/// Base training, then for every test patient the slice-count variants, all
/// scored on the follow-up with features shared through the frozen trunk.
/// MC dropout runs for the base model and the all-slices model.
fn desk_run(cfg: &RunConfig) -> DeskRun {
    let cohort = generate_cohort(&cfg.phantom, cfg.cohort.n_train, cfg.cohort.n_test, cfg.phantom.seed).unwrap();
    let base = train_base(&cfg.network, &cfg.base_training(), &cohort.train_exams()).unwrap().params;
    let variants = Experiment::SlicesSweep.variants(cfg);
    let unc = UncertaintyOptions { task: cfg.postprocess.task, n_repeats: cfg.uncertainty.n_repeats, seed: cfg.seed };
    let mut checkpoints = vec![to_bytes(&base).unwrap()];
    let mut rows = Vec::new();
    for p in &cohort.test {
        let study = &p.study;
        let tuned = finetune_variants(cfg, &base, &study.baseline, &variants).unwrap();
        let feats = exam_features(&base, &study.followup, cfg.inference.tile).unwrap();
        rows.push(evaluate_features(BASE_MODEL, &base, &feats, &study.followup, Some(unc)).unwrap().row(&study.patient_id));
        for t in &tuned {
            assert!(same_trunk(&base, &t.params), "{}: trunk changed", t.variant.label);
            let u = (t.variant.label == ALL).then_some(unc);
            let e = evaluate_features(&t.variant.label, &t.params, &feats, &study.followup, u).unwrap();
            rows.push(e.row(&study.patient_id));
            checkpoints.push(to_bytes(&t.params).unwrap());
        }
    }
    let csv = cohort_csv(&rows).unwrap();
    DeskRun { base, checkpoints, rows, csv }
}

fn by_model<'a>(rows: &'a [CohortRow], model: &str) -> Vec<&'a CohortRow> {
    rows.iter().filter(|r| r.model == model).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional(run: &DeskRun) -> Verdict {
    let (base, tuned) = (by_model(&run.rows, BASE_MODEL), by_model(&run.rows, ALL));
    let n = base.len();
    let dice_gain = mean(tuned.iter().map(|r| r.dice.unwrap())) - mean(base.iter().map(|r| r.dice.unwrap()));
    let improved = base.iter().zip(&tuned).filter(|(b, t)| t.dice.unwrap() > b.dice.unwrap()).count();
    let pairs: Vec<(f64, f64)> = base.iter().zip(&tuned).filter_map(|(b, t)| Some((b.tpr?, t.tpr?))).collect();
    let (tpr_base, tpr_tuned) = (mean(pairs.iter().map(|p| p.0)), mean(pairs.iter().map(|p| p.1)));
    let calmer = base
        .iter()
        .zip(&tuned)
        .filter(|(b, t)| matches!((b.uncertainty, t.uncertainty), (Some(x), Some(y)) if y < x))
        .count();
    let a = dice_gain >= 0.02 && improved as f64 >= 0.7 * n as f64;
    let b = tpr_tuned >= tpr_base;
    let c = calmer as f64 >= 0.6 * n as f64;
    Verdict::new(
        a && b && c,
        format!(
            "desk run: Dice gain {dice_gain:+.3}, improved {improved}/{n}; TPR {tpr_base:.3} -> {tpr_tuned:.3}; uncertainty lower {calmer}/{n}"
        ),
    )
}

fn slice_counts(run: &DeskRun) -> Verdict {
    let m = |label| mean(by_model(&run.rows, label).iter().map(|r| r.dice.unwrap()));
    let (all, one, two) = (m(ALL), m(ONE), m(TWO));
    let (d1, d2) = ((one - all).abs(), (two - all).abs());
    Verdict::new(
        d1 <= 0.03 && d2 <= 0.03,
        format!("slice selection: Dice all {all:.3}, 1 slice {one:.3} (diff {d1:.3}), 2 slices {two:.3} (diff {d2:.3})"),
    )
}

/// Base-model Dice on the training exams against the test follow-ups, with
/// and without domain shift, plus the lesion-size split of detections.
fn phantom_preconditions(cfg: &RunConfig, run: &DeskRun) -> Verdict {
    let cohort = generate_cohort(&cfg.phantom, cfg.cohort.n_train, cfg.cohort.n_test, cfg.phantom.seed).unwrap();
    let dice_on = |exam: &MultiSequenceExam<f32>| {
        let probs = predict_volume(&run.base, exam, cfg.inference.tile).unwrap();
        score_prediction(&probs, exam).unwrap()
    };
    let train = mean(cohort.train.iter().map(|p| dice_on(&p.study.baseline).1.dice));
    let shifted = mean(by_model(&run.rows, BASE_MODEL).iter().map(|r| r.dice.unwrap()));

    let mut control_cfg = cfg.phantom.clone();
    control_cfg.domain_shift = 0.0;
    let control = generate_cohort(&control_cfg, cfg.cohort.n_train, cfg.cohort.n_test, cfg.phantom.seed).unwrap();
    let unshifted = mean(control.test.iter().map(|p| dice_on(&p.study.followup).1.dice));

    let (mut small, mut large) = ((0, 0), (0, 0));
    for p in &cohort.test {
        let split = lesion_size_split(&dice_on(&p.study.followup).0, 1.0);
        small = (small.0 + split.small.n_detected, small.1 + split.small.n);
        large = (large.0 + split.large.n_detected, large.1 + split.large.n);
    }
    let rate = |s: (usize, usize)| s.0 as f64 / s.1.max(1) as f64;
    let ok = train - shifted >= 0.05 && (train - unshifted).abs() < 0.05 && rate(small) <= rate(large);
    Verdict::new(
        ok,
        format!(
            "phantom: base Dice train {train:.3}, shifted test {shifted:.3}, unshifted test {unshifted:.3}; TPR small {}/{} large {}/{}",
            small.0, small.1, large.0, large.1
        ),
    )
}

fn main() -> std::process::ExitCode {
    let mut s = Suite { failed: Vec::new() };
    s.check("1", 60.0, || (receptive_field(), ()));
    s.check("2", 120.0, || (gradients(), ()));
    let frozen = s.check("3", 60.0, freezing);
    s.check("4", 300.0, || (oracles(), ()));
    s.check("5", 60.0, || (metric_fixtures(), ()));
    s.check("6", 120.0, || (mc_dropout(), ()));

    let cfg = RunConfig::desk_scale();
    let run = s.check("7", 2700.0, || {
        let run = desk_run(&cfg);
        (directional(&run), run)
    });
    println!("{}", summary_table(&summarize(&run.rows)));
    s.check("8", 1.0, || (slice_counts(&run), ()));
    s.check("7-pre", 300.0, || (phantom_preconditions(&cfg, &run), ()));

    s.check("9", 3600.0, || {
        let frozen_again = freezing().1;
        let again = desk_run(&cfg);
        let same_tiny = frozen == frozen_again;
        let same_ckpt = run.checkpoints == again.checkpoints;
        let same_csv = run.csv == again.csv;
        (
            Verdict::new(
                same_tiny && same_ckpt && same_csv,
                format!(
                    "determinism: freezing checkpoints {same_tiny}, desk checkpoints ({}) {same_ckpt}, cohort CSV {same_csv}",
                    run.checkpoints.len()
                ),
            ),
            (),
        )
    });

    if s.failed.is_empty() {
        println!("acceptance: all criteria passed");
        std::process::ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {:?}", s.failed);
        std::process::ExitCode::FAILURE
    }
}
