//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 7 compare trained models against each other. Their lines
//! report the measured direction; a FAIL there does not fail the binary,
//! since it is a finding about the method on this benchmark rather than a
//! defect. Every other FAIL exits non-zero.

use std::collections::BTreeSet;
use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use plreg_core::autodiff::{softmax, Axis, Graph, Tensor};
use plreg_core::checks::{run_suite, SuiteOptions};
use plreg_core::eval::{hungarian, partial_separability, CostMatrix};
use plreg_core::experiment::{parse_config_str, run, run_seed, sweep, SeedResult, SweepAxis, SWEEP_W_P1};
use plreg_core::losses::{lreg_from_assignment, loss_lreg, loss_p1, loss_p1_with_mask, loss_p2};
use plreg_core::model::{BundleShape, LinearLayer, ModelBundle};
use plreg_core::protocols::{
    features_tensor, generate, generate_test, make_cil_schedule, make_gcd_split, make_mdg_gcd_split,
    CilStyle, Sample, SyntheticSpec,
};
use plreg_core::trainer::{train_gcd, TrainConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget_s: u64) -> bool {
    elapsed <= Duration::from_secs(budget_s)
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut *rng);
            scale * v
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

fn small_bundle(input: usize, dim: usize, k: usize, seed: u64) -> ModelBundle {
    let shape = BundleShape {
        input_dim: input,
        dim,
        num_classes: k,
        depth: 1,
    };
    ModelBundle::init(shape, seed).unwrap()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let results = run_suite(&SuiteOptions::default()).unwrap();
    let elapsed = t.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failing: Vec<_> = results.iter().filter(|r| !r.passed() || r.instances < 20).map(|r| r.name).collect();
    outcome(
        failing.is_empty() && within(elapsed, 30),
        format!(
            "{} checks x 20 instances, worst {} at {:.2e}, {:.1}s{}",
            results.len(),
            worst.name,
            worst.max_rel_error,
            elapsed.as_secs_f64(),
            if failing.is_empty() { String::new() } else { format!(", failing {failing:?}") }
        ),
    )
}

fn loss_oracles() -> Outcome {
    let mut m = small_bundle(3, 4, 3, 7);
    m.partial_cls = LinearLayer::zeros(4, 1);
    let mut g = Graph::new();
    let b = m.bind(&mut g);
    let z = g.constant(Tensor::from_rows(&[[0.3, -1.0, 2.0, 0.5], [1.0, 1.0, -2.0, 0.1], [0.0, 4.0, 1.0, -3.0]]).unwrap());
    let p1_v = loss_p1(&mut g, &b, z).unwrap();
        let p1 = g.scalar(p1_v);

    let mask = g.constant(Tensor::row_vector(&[0.5, 0.5]));
    let p2_v = loss_p2(&mut g, mask).unwrap();
        let p2 = g.scalar(p2_v);

    let lreg: Vec<f64> = [
        [[1.0, 0.0], [0.0, 1.0]],
        [[0.5, 0.5], [0.5, 0.5]],
        [[1.0, 1.0], [0.0, 0.0]],
    ]
    .iter()
    .map(|a| {
        let mut g = Graph::new();
        let av = g.constant(Tensor::from_rows(a).unwrap());
        let l = lreg_from_assignment(&mut g, av).unwrap();
        g.scalar(l)
    })
    .collect();

    let ok = (p1 - LN_2).abs() <= 1e-9
        && (p2 - 0.346574).abs() <= 1e-6
        && (p2 - LN_2 / 2.0).abs() <= 1e-9
        && (lreg[0] + LN_2).abs() <= 1e-9
        && lreg[1].abs() <= 1e-9
        && lreg[2].abs() <= 1e-9;
    outcome(
        ok,
        format!("L_P1 {p1:.9}, L_P2 {p2:.9}, L-Reg {:.9} / {:.1e} / {:.1e}", lreg[0], lreg[1], lreg[2]),
    )
}

fn bounds() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = Vec::new();
    for i in 0..1000 {
        let b = rng.random_range(1..=6);
        let dim = rng.random_range(2..=8);
        let k = rng.random_range(2..=6);
        let scale = [0.1, 1.0, 10.0][i % 3];

        let mut g = Graph::new();
        let raw = g.constant(randn(&mut rng, b, dim, scale));
        let m = g.sigmoid(raw);
        let p2_v = loss_p2(&mut g, m).unwrap();
        let p2 = g.scalar(p2_v);
        if !(0.0..=(dim as f64).ln()).contains(&p2) {
            violations.push(format!("L_P2 {p2} (dim {dim})"));
        }

        let bundle = small_bundle(dim, dim, k, rng.random());
        let bm = bundle.bind(&mut g);
        let z = g.constant(randn(&mut rng, b, dim, scale));
        let mask = g.constant(Tensor::new(b, dim, (0..b * dim).map(|_| rng.random()).collect()).unwrap());
        let p1_v = loss_p1_with_mask(&mut g, &bm, z, mask).unwrap();
        let p1 = g.scalar(p1_v);
        if !(p1 >= 0.0) {
            violations.push(format!("L_P1 {p1}"));
        }

        let yhat = g.constant(softmax(&randn(&mut rng, b, k, scale), Axis::Cols));
        let zin = g.constant(randn(&mut rng, b, dim, scale));
        let l_v = loss_lreg(&mut g, yhat, zin).unwrap();
        let l = g.scalar(l_v);
        let lnk = (k as f64).ln();
        if !(-lnk..=lnk).contains(&l) {
            violations.push(format!("L-Reg {l} (K {k})"));
        }
    }
    let elapsed = t.elapsed();
    outcome(
        violations.is_empty() && within(elapsed, 10),
        format!("1000 inputs, {} violations, {:.2}s{}", violations.len(), elapsed.as_secs_f64(), first_of(&violations)),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn hungarian_optimality() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=7);
        // integer costs keep every sum exact
        let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(-20..=50) as f64).collect();
        let m = CostMatrix::new(n, cost.clone()).unwrap();
        let brute = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let a = hungarian(&m);
        let mut cols = a.perm.clone();
        cols.sort_unstable();
        if a.total != brute || m.total(&a.perm) != brute || cols != (0..n).collect::<Vec<_>>() {
            mismatches += 1;
        }
    }
    let elapsed = t.elapsed();
    outcome(
        mismatches == 0 && within(elapsed, 10),
        format!("200 matrices n in [2,7], {mismatches} mismatches, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn sample_key(s: &Sample) -> (Vec<u64>, usize, usize) {
    (s.features.iter().map(|v| v.to_bits()).collect(), s.class_id, s.domain_id)
}

fn keys<'a>(it: impl Iterator<Item = &'a Sample>) -> Vec<(Vec<u64>, usize, usize)> {
    let mut k: Vec<_> = it.map(sample_key).collect();
    k.sort();
    k
}

fn protocol_bookkeeping() -> Outcome {
    let mut problems: Vec<String> = Vec::new();
    let mut note = |seed: u64, what: &str| problems.push(format!("seed {seed}: {what}"));
    for seed in 0..50u64 {
        let spec = SyntheticSpec {
            seed,
            samples_per_class: 20,
            num_domains: 3,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let known: BTreeSet<usize> = (0..spec.num_known).collect();

        let split = make_gcd_split(&data, spec.num_known, spec.num_classes, seed).unwrap();
        if !split.labeled.iter().all(|s| known.contains(&s.class_id) && s.labeled) {
            note(seed, "labeled sample outside the known classes");
        }
        if split.unlabeled.iter().any(|s| s.labeled) {
            note(seed, "unlabeled sample flagged labeled");
        }
        if keys(split.labeled.iter().chain(&split.unlabeled)) != keys(data.iter()) {
            note(seed, "labeled + unlabeled is not a partition of the data");
        }
        let unlabeled_classes: BTreeSet<usize> = split.unlabeled.iter().map(|s| s.class_id).collect();
        if !(spec.num_known..spec.num_classes).all(|c| unlabeled_classes.contains(&c)) {
            note(seed, "a novel class is missing from the unlabeled pool");
        }

        let held = (seed % 3) as usize;
        let mdg = make_mdg_gcd_split(&data, spec.num_known, spec.num_classes, 3, held, seed).unwrap();
        if mdg.test.is_empty() || mdg.test.iter().any(|s| s.domain_id != held) {
            note(seed, "test set is not exactly the held-out domain");
        }
        if mdg.labeled.iter().chain(&mdg.unlabeled).any(|s| s.domain_id == held) {
            note(seed, "held-out domain leaked into training");
        }
        if keys(mdg.labeled.iter().chain(&mdg.unlabeled).chain(&mdg.test)) != keys(data.iter()) {
            note(seed, "mDG split loses or duplicates samples");
        }

        for style in [CilStyle::Ordered, CilStyle::Shuffled] {
            let cil_spec = SyntheticSpec {
                seed,
                samples_per_class: 100,
                imbalance_ratio: 0.01,
                ..Default::default()
            };
            let sched = make_cil_schedule(&cil_spec, 5, style, seed).unwrap();
            let mut all: Vec<usize> = sched.sessions.iter().flat_map(|s| s.classes.clone()).collect();
            all.sort_unstable();
            if all != (0..cil_spec.num_classes).collect::<Vec<_>>() || sched.sessions.len() != 6 {
                note(seed, "CIL sessions are not a disjoint cover of the classes");
            }
            if style == CilStyle::Ordered {
                let counts: Vec<usize> = sched.sessions.iter().flat_map(|s| s.counts.clone()).collect();
                if counts.windows(2).any(|w| w[0] < w[1]) || counts.iter().any(|&c| c < 1) {
                    note(seed, "ordered long-tail counts increase or hit zero");
                }
            }
        }

        let lt = SyntheticSpec {
            num_classes: 5,
            num_known: 2,
            samples_per_class: 100,
            imbalance_ratio: 0.01,
            seed,
            ..Default::default()
        };
        if lt.class_counts() != [100, 32, 10, 3, 1] {
            note(seed, "long-tail counts differ from [100, 32, 10, 3, 1]");
        }
        let lt_data = generate(&lt).unwrap();
        let mut per_class = [0usize; 5];
        for s in &lt_data {
            per_class[s.class_id] += 1;
        }
        if per_class != [100, 32, 10, 3, 1] {
            note(seed, "generated long-tail pool has the wrong class sizes");
        }
    }
    outcome(
        problems.is_empty(),
        format!("50 seeds, {} violations{}", problems.len(), first_of(&problems)),
    )
}

// Synthetic GCD benchmark: 10 classes, 5 known, dim 32.
const GCD_COMMON: &str = r#""task": "gcd", "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
    "model": {"dim": 32}, "optim": {"lr": 0.01, "epochs": 100, "batch_size": 128}, "head_input": "raw""#;
// chosen on seeds 100-109, disjoint from the seeds scored here
const GCD_PLREG_WEIGHTS: (f64, f64, f64) = (0.6, 0.13, 0.0054);

fn gcd_variant(partial_logic: bool, w: (f64, f64, f64)) -> String {
    format!(
        r#"{{{GCD_COMMON}, "partial_logic": {partial_logic},
            "weights": {{"w_p1": {}, "w_p2": {}, "w_lreg": {}}}}}"#,
        w.0, w.1, w.2
    )
}

/// Seed means of (all, known, unknown) accuracy.
fn mean_accuracies(text: &str) -> [f64; 3] {
    let cfg = parse_config_str(text).unwrap();
    let mut acc = [0.0; 3];
    for &s in &cfg.seeds {
        let v = run_seed(&cfg, s).unwrap().summary();
        for i in 0..3 {
            acc[i] += v[i] / cfg.seeds.len() as f64;
        }
    }
    acc
}

fn directional_gcd() -> Outcome {
    let t = Instant::now();
    let (wp1, wp2, wl) = GCD_PLREG_WEIGHTS;
    let base = mean_accuracies(&gcd_variant(false, (0.0, 0.0, 0.0)));
    let lreg = mean_accuracies(&gcd_variant(false, (0.0, 0.0, wl)));
    let pl = mean_accuracies(&gcd_variant(true, (wp1, wp2, wl)));
    let elapsed = t.elapsed();
    let (d_base, d_lreg) = (100.0 * (pl[2] - base[2]), 100.0 * (pl[2] - lreg[2]));
    let ordering = if pl[2] >= lreg[2] { "PL >= L-Reg" } else { "PL < L-Reg" };
    let show = |a: [f64; 3]| format!("{:.1}/{:.1}/{:.1}", 100.0 * a[0], 100.0 * a[1], 100.0 * a[2]);
    outcome(
        d_base >= 2.0 && d_lreg >= -1.0 && within(elapsed, 300),
        format!(
            "unknown acc PL-base {d_base:+.1}, PL-LReg {d_lreg:+.1} ({ordering}); all/known/unknown over 10 seeds: base {}, L-Reg {}, PL-Reg {}; {:.0}s",
            show(base),
            show(lreg),
            show(pl),
            elapsed.as_secs_f64()
        ),
    )
}

const CIL_COMMON: &str = r#""task": "cil", "seeds": [0, 1, 2, 3, 4], "sessions": 5, "style": "ordered",
    "spec": {"samples_per_class": 100, "imbalance_ratio": 0.01}, "optim": {"epochs": 50}"#;

fn directional_cil() -> Outcome {
    let t = Instant::now();
    let base_cfg = parse_config_str(&format!(
        r#"{{{CIL_COMMON}, "partial_logic": false, "weights": {{"w_p1": 0, "w_p2": 0, "w_lreg": 0}}}}"#
    ))
    .unwrap();
    let pl_cfg = parse_config_str(&format!(
        r#"{{{CIL_COMMON}, "preset": "table8_cifar100_ordered", "head_input": "raw"}}"#
    ))
    .unwrap();
    let (mut base, mut pl) = (0.0, 0.0);
    let (mut pairs, mut differing) = (0, 0);
    for &seed in &pl_cfg.seeds {
        if let SeedResult::Cil { metrics, .. } = run_seed(&base_cfg, seed).unwrap() {
            base += metrics.average / 5.0;
        }
        if let SeedResult::Cil { metrics, masks, .. } = run_seed(&pl_cfg, seed).unwrap() {
            pl += metrics.average / 5.0;
            for i in 0..masks.len() {
                for j in i + 1..masks.len() {
                    pairs += 1;
                    differing += usize::from(masks[i].hamming(&masks[j]) > 0);
                }
            }
        }
    }
    let elapsed = t.elapsed();
    let frac = differing as f64 / pairs as f64;
    let a = pairs > 0 && frac >= 0.9;
    let b = pl >= base;
    outcome(
        a && b && within(elapsed, 300),
        format!(
            "(a) {differing}/{pairs} session pairs with distinct masks [{}]; (b) avg acc PL-Reg {:.2} vs baseline {:.2} [{}], {:.1}s",
            if a { "ok" } else { "fail" },
            100.0 * pl,
            100.0 * base,
            if b { "ok" } else { "fail" },
            elapsed.as_secs_f64()
        ),
    )
}

fn separability() -> Outcome {
    let (wp1, wp2, wl) = GCD_PLREG_WEIGHTS;
    let mut worst = 1.0f64;
    for seed in 0..3u64 {
        let spec = SyntheticSpec {
            seed,
            ..Default::default()
        };
        let data = generate(&spec).unwrap();
        let split = make_gcd_split(&data, spec.num_known, spec.num_classes, seed).unwrap();
        let cfg = TrainConfig {
            weights: plreg_core::losses::LossWeights::new(wp1, wp2, wl).unwrap(),
            optim: plreg_core::trainer::OptimConfig {
                lr: 1e-2,
                epochs: 100,
                seed,
                ..Default::default()
            },
            ..Default::default()
        };
        let bundle = small_bundle(spec.input_dim(), 32, spec.num_classes, seed);
        let out = train_gcd(&split, bundle, &cfg).unwrap();
        let held_out = generate_test(&spec);
        let refs: Vec<&Sample> = held_out.iter().collect();
        worst = worst.min(partial_separability(&out.bundle, &features_tensor(&refs)).unwrap());
    }
    outcome(worst > 0.95, format!("worst held-out separability over 3 runs {worst:.4}"))
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let text = |dir: &std::path::Path| {
        format!(
            r#"{{"task": "gcd", "seeds": [0, 1], "preset": "table4_cub",
                "optim": {{"epochs": 20}}, "output_dir": {:?}}}"#,
            dir.display().to_string()
        )
    };
    run(&parse_config_str(&text(a.path())).unwrap()).unwrap();
    run(&parse_config_str(&text(b.path())).unwrap()).unwrap();
    let ma = std::fs::read(a.path().join("metrics.csv")).unwrap();
    let mb = std::fs::read(b.path().join("metrics.csv")).unwrap();
    outcome(ma == mb && !ma.is_empty(), format!("metrics.csv {} bytes, identical: {}", ma.len(), ma == mb))
}

fn sweep_machinery() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"{{"task": "cil", "seeds": [0, 1], "preset": "table8_imagenet_subset_ordered",
            "spec": {{"samples_per_class": 40, "imbalance_ratio": 0.01}},
            "optim": {{"epochs": 5}}, "output_dir": {:?}}}"#,
        dir.path().display().to_string()
    );
    let cfg = parse_config_str(&text).unwrap();
    let rows = sweep(&cfg, SweepAxis::WP1, &SWEEP_W_P1).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    let records: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let means: Vec<&csv::StringRecord> = records.iter().filter(|r| &r[0] == "mean").collect();
    let mean_values: Vec<f64> = means.iter().map(|r| r[2].parse().unwrap()).collect();
    let well_formed = header[..4] == ["kind", "axis", "value", "seed"]
        && records.len() == 3 * 2 + 3
        && records.iter().all(|r| r.len() == header.len() && &r[1] == "w_p1")
        && records
            .iter()
            .all(|r| r.iter().skip(4).all(|v| v.parse::<f64>().is_ok_and(|x| (0.0..=1.0).contains(&x))))
        && mean_values == SWEEP_W_P1
        && rows.len() == records.len();
    outcome(
        well_formed,
        format!("{} rows, summary values {mean_values:?}, header {}", records.len(), header.join(",")),
    )
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, bool, fn() -> Outcome); 10] = [
        (1, "gradient correctness", false, gradients),
        (2, "loss oracles", false, loss_oracles),
        (3, "bounds fuzzing", false, bounds),
        (4, "Hungarian optimality", false, hungarian_optimality),
        (5, "protocol bookkeeping", false, protocol_bookkeeping),
        (6, "directional GCD", true, directional_gcd),
        (7, "directional CIL", true, directional_cil),
        (8, "defined/undefined separability", false, separability),
        (9, "determinism", false, determinism),
        (10, "sweep machinery", false, sweep_machinery),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut hard_failures = 0;
    for (id, name, directional, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str()) || *p == id.to_string()) {
            continue;
        }
        let o = f();
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {status} {name}: {}", o.detail);
        if !o.passed && !directional {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn first_of(v: &[String]) -> String {
    v.first().map(|s| format!(", first: {s}")).unwrap_or_default()
}
