//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::time::{Duration, Instant};

use otcil::alignment::{prepare_class_texts, sinkhorn, ClassAlignment, ClassTexts, LocalConfig};
use otcil::checkpoint::encode_engine;
use otcil::corpus::{generate_synthetic, ClassAttributeSet, EmbeddingBundle, SyntheticSpec, TokenEmbeddings};
use otcil::evaluator::{
    curve_csv, forgetting_measure, matrix_csv, report_csv, report_json, AccuracyMatrix, InferenceConfig, Mode,
    Predictor, SessionReport,
};
use otcil::linalg::Matrix;
use otcil::pipeline::{run, RunOptions, RunResult};
use otcil::projectors::{Branch, Projector, ProjectorStack};
use otcil::rng::{self, rng_from_seed, EngineRng};
use otcil::trainer::{global_loss, local_loss, TrainerConfig};
use otcil::EngineState;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn uniform(r: &mut EngineRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng::uniform_f64(r)
}

fn random_cost(r: &mut EngineRng, k: usize, n: usize) -> Matrix {
    Matrix::from_vec(k, n, (0..k * n).map(|_| uniform(r, 0.0, 2.0)).collect()).unwrap()
}

fn marginal_violation(plan: &Matrix) -> f64 {
    let (k, n) = (plan.rows(), plan.cols());
    let mut worst: f64 = 0.0;
    for i in 0..k {
        let s: f64 = (0..n).map(|j| plan[(i, j)]).sum();
        worst = worst.max((s - 1.0 / k as f64).abs());
    }
    for j in 0..n {
        let s: f64 = (0..k).map(|i| plan[(i, j)]).sum();
        worst = worst.max((s - 1.0 / n as f64).abs());
    }
    worst
}

fn ac1() -> Outcome {
    let mut r = rng_from_seed(101);
    let costs: Vec<Matrix> = (0..1000).map(|_| random_cost(&mut r, 8, 5)).collect();
    let start = Instant::now();
    let mut worst_violation: f64 = 0.0;
    let mut worst_iters = 0;
    let mut min_entry = f64::INFINITY;
    let mut failures = 0;
    for c in &costs {
        match sinkhorn(c, 0.1, 1e-6, 100) {
            Ok(p) => {
                let v = marginal_violation(&p.plan);
                worst_violation = worst_violation.max(v);
                worst_iters = worst_iters.max(p.iterations);
                min_entry = p.plan.as_slice().iter().copied().fold(min_entry, f64::min);
                if !p.converged || v > 1e-6 {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    let elapsed = start.elapsed();
    let pass = failures == 0 && min_entry >= 0.0 && worst_iters <= 100 && elapsed < Duration::from_secs(2);
    outcome(
        pass,
        format!(
            "1000 plans, max violation {worst_violation:.2e}, min entry {min_entry:.2e}, max iterations {worst_iters}, {failures} failures, {elapsed:.2?}"
        ),
    )
}

/// Log-domain scaling vectors, stopped on the same marginal rule as the engine.
fn oracle_sinkhorn(cost: &Matrix, lambda: f64, tol: f64, max_iter: usize) -> Vec<Vec<f64>> {
    let (k, n) = (cost.rows(), cost.cols());
    let log_kernel: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..n).map(|j| -cost[(i, j)] / lambda).collect())
        .collect();
    let lse = |xs: &[f64]| {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let (log_a, log_b) = (-(k as f64).ln(), -(n as f64).ln());
    let mut log_u = vec![0.0; k];
    let mut log_v = vec![0.0; n];
    let mut plan = vec![vec![0.0; n]; k];
    for _ in 0..max_iter {
        for i in 0..k {
            let terms: Vec<f64> = (0..n).map(|j| log_kernel[i][j] + log_v[j]).collect();
            log_u[i] = log_a - lse(&terms);
        }
        for j in 0..n {
            let terms: Vec<f64> = (0..k).map(|i| log_kernel[i][j] + log_u[i]).collect();
            log_v[j] = log_b - lse(&terms);
        }
        plan = (0..k)
            .map(|i| (0..n).map(|j| (log_u[i] + log_kernel[i][j] + log_v[j]).exp()).collect())
            .collect();
        let rows = plan.iter().map(|r| (r.iter().sum::<f64>() - 1.0 / k as f64).abs());
        let cols = (0..n).map(|j| (plan.iter().map(|r| r[j]).sum::<f64>() - 1.0 / n as f64).abs());
        if rows.chain(cols).fold(0.0, f64::max) <= tol {
            break;
        }
    }
    plan
}

fn ac2() -> Outcome {
    let mut r = rng_from_seed(202);
    let mut costs = vec![Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap()];
    for size in [2, 3] {
        costs.extend((0..50).map(|_| random_cost(&mut r, size, size)));
    }
    let mut worst: f64 = 0.0;
    for c in &costs {
        let engine = match sinkhorn(c, 0.1, 1e-9, 1000) {
            Ok(p) => p.plan,
            Err(e) => return outcome(false, format!("engine error {e}")),
        };
        let oracle = oracle_sinkhorn(c, 0.1, 1e-9, 1000);
        for (i, row) in oracle.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((engine[(i, j)] - v).abs());
            }
        }
    }
    outcome(
        worst <= 1e-8,
        format!("{} costs (2x2 and 3x3), max entry difference {worst:.2e}", costs.len()),
    )
}

fn random_vec(r: &mut EngineRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng::standard_normal(r)).collect()
}

/// A two-task stack: a frozen first projector and a random trainable second.
fn random_stack(r: &mut EngineRng, branch: Branch, d: usize) -> ProjectorStack {
    let mut projectors = Vec::new();
    for task in 1..=2u32 {
        let mut w = Matrix::identity(d);
        for x in w.as_mut_slice() {
            *x += 0.3 * rng::standard_normal(r);
        }
        if task == 2 {
            w = Matrix::from_vec(d, d, w.as_slice().iter().map(|x| 0.2 * x).collect()).unwrap();
        }
        projectors.push(Projector {
            weight: w,
            bias: random_vec(r, d).into_iter().map(|x| 0.1 * x).collect(),
            task_index: task,
            frozen: task == 1,
        });
    }
    ProjectorStack::from_parts(branch, d, projectors).unwrap()
}

fn perturbed(stack: &ProjectorStack, index: usize, delta: f64) -> ProjectorStack {
    let mut s = stack.clone();
    let p = s.trainable_mut().unwrap();
    let d2 = p.weight.rows() * p.weight.cols();
    if index < d2 {
        p.weight.as_mut_slice()[index] += delta;
    } else {
        p.bias[index - d2] += delta;
    }
    s
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn ce(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln() - logits[y]
}

fn global_oracle(
    vis: &ProjectorStack,
    txt: &ProjectorStack,
    feats: &[Vec<f64>],
    labels: &[usize],
    eos: &[Vec<f64>],
    tau: f64,
) -> f64 {
    let e: Vec<Vec<f64>> = eos.iter().map(|x| txt.adapt_feature(x).unwrap()).collect();
    let mut total = 0.0;
    for (f, &y) in feats.iter().zip(labels) {
        let v = vis.adapt_feature(f).unwrap();
        let logits: Vec<f64> = e.iter().map(|t| cos(&v, t) / tau).collect();
        total += ce(&logits, y);
    }
    total / feats.len() as f64
}

/// Local loss with selection and plan held at the given forward values.
fn local_oracle(
    vis: &ProjectorStack,
    txt: &ProjectorStack,
    images: &[TokenEmbeddings],
    labels: &[usize],
    raw_attrs: &[Matrix],
    frozen: &[Vec<ClassAlignment>],
    temperature: f64,
) -> f64 {
    let attrs: Vec<Matrix> = raw_attrs.iter().map(|a| txt.adapt_batch(a).unwrap()).collect();
    let mut total = 0.0;
    for ((img, &y), per_class) in images.iter().zip(labels).zip(frozen) {
        let patches = vis.adapt_batch(&img.patches).unwrap();
        let logits: Vec<f64> = per_class
            .iter()
            .zip(&attrs)
            .map(|(al, a)| {
                let mut sigma = 0.0;
                for (row, &m) in al.selected.indices.iter().enumerate() {
                    for n in 0..a.rows() {
                        sigma += al.weights[(row, n)] * cos(patches.row(m), a.row(n));
                    }
                }
                sigma / temperature
            })
            .collect();
        total += ce(&logits, y);
    }
    total / images.len() as f64
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn flatten(w: &Matrix, b: &[f64]) -> Vec<f64> {
    w.as_slice().iter().chain(b).copied().collect()
}

fn ac3() -> Outcome {
    let start = Instant::now();
    let (d, m, k, n, c, batch) = (8, 6, 3, 2, 3, 4);
    let h = 1e-4;
    let tau = TrainerConfig::default().tau;
    let mut r = rng_from_seed(303);

    let vg = random_stack(&mut r, Branch::VisualGlobal, d);
    let tg = random_stack(&mut r, Branch::TextualGlobal, d);
    let feats: Vec<Vec<f64>> = (0..batch).map(|_| random_vec(&mut r, d)).collect();
    let eos: Vec<Vec<f64>> = (0..c).map(|_| random_vec(&mut r, d)).collect();
    let labels: Vec<usize> = (0..batch).map(|i| i % c).collect();
    let frefs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
    let erefs: Vec<&[f64]> = eos.iter().map(Vec::as_slice).collect();
    let g = global_loss(&vg, &tg, &frefs, &labels, &erefs, tau).unwrap();

    let mut worst_global: f64 = 0.0;
    for (stack, grad, is_visual) in [(&vg, &g.visual, true), (&tg, &g.textual, false)] {
        for (idx, a) in flatten(&grad.weight, &grad.bias).into_iter().enumerate() {
            let f = |delta: f64| {
                let s = perturbed(stack, idx, delta);
                if is_visual {
                    global_oracle(&s, &tg, &feats, &labels, &eos, tau)
                } else {
                    global_oracle(&vg, &s, &feats, &labels, &eos, tau)
                }
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            worst_global = worst_global.max(relative_error(a, numeric));
        }
    }

    let vl = random_stack(&mut r, Branch::VisualLocal, d);
    let tl = random_stack(&mut r, Branch::TextualLocal, d);
    let images: Vec<TokenEmbeddings> = (0..batch)
        .map(|i| TokenEmbeddings {
            image_id: format!("img{i}"),
            label: (i % c) as u32,
            cls: random_vec(&mut r, d),
            patches: Matrix::from_vec(m, d, random_vec(&mut r, m * d)).unwrap(),
        })
        .collect();
    let classes: Vec<ClassAttributeSet> = (0..c)
        .map(|ci| ClassAttributeSet {
            class_id: ci as u32,
            class_name: format!("class{ci}"),
            attribute_texts: vec!["a".into(), "b".into()],
            attribute_embeddings: Matrix::from_vec(n, d, random_vec(&mut r, n * d)).unwrap(),
            eos_embedding: random_vec(&mut r, d),
        })
        .collect();
    let cfg = LocalConfig {
        k,
        n,
        ..LocalConfig::default()
    };
    let texts: Vec<ClassTexts> = classes
        .iter()
        .map(|cl| prepare_class_texts(cl, &[0, 1], &tl).unwrap())
        .collect();
    let image_refs: Vec<&TokenEmbeddings> = images.iter().collect();
    let l = local_loss(&vl, &image_refs, &labels, &texts, &cfg).unwrap();
    let raw: Vec<Matrix> = classes.iter().map(|cl| cl.attribute_embeddings.clone()).collect();

    let mut worst_local: f64 = 0.0;
    for (stack, grad, is_visual) in [(&vl, &l.visual, true), (&tl, &l.textual, false)] {
        for (idx, a) in flatten(&grad.weight, &grad.bias).into_iter().enumerate() {
            let f = |delta: f64| {
                let s = perturbed(stack, idx, delta);
                if is_visual {
                    local_oracle(&s, &tl, &images, &labels, &raw, &l.alignments, cfg.temperature)
                } else {
                    local_oracle(&vl, &s, &images, &labels, &raw, &l.alignments, cfg.temperature)
                }
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            worst_local = worst_local.max(relative_error(a, numeric));
        }
    }
    let elapsed = start.elapsed();
    let params = 4 * (d * d + d);
    outcome(
        worst_global < 1e-4 && worst_local < 1e-4 && elapsed < Duration::from_secs(10),
        format!("{params} parameters, max relative error L_g {worst_global:.2e}, L_l {worst_local:.2e}, {elapsed:.2?}"),
    )
}

const SEEDS: [u64; 3] = [1993, 1994, 1995];

fn ablation_bundle(seed: u64) -> EmbeddingBundle {
    generate_synthetic(
        &SyntheticSpec {
            num_classes: 20,
            per_class: 50,
            dim: 16,
            patches: 16,
            attributes_per_class: 5,
            noise_scale: 0.3,
        },
        seed,
    )
    .unwrap()
}

fn ablation_options(seed: u64, mode: Mode, replay: bool) -> RunOptions {
    RunOptions {
        trainer: TrainerConfig {
            seed,
            replay,
            ..TrainerConfig::default()
        },
        base_size: 0,
        increment: 4,
        mode,
    }
}

struct Ablation {
    full: Vec<RunResult>,
    naive: Vec<RunResult>,
    global: Vec<RunResult>,
    zero_shot: Vec<RunResult>,
    no_replay: Vec<RunResult>,
    session_one: Vec<Vec<u8>>,
    elapsed: Duration,
}

fn run_ablation() -> Ablation {
    let start = Instant::now();
    let mut a = Ablation {
        full: Vec::new(),
        naive: Vec::new(),
        global: Vec::new(),
        zero_shot: Vec::new(),
        no_replay: Vec::new(),
        session_one: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for seed in SEEDS {
        let bundle = ablation_bundle(seed);
        let mut snapshot = Vec::new();
        let full = run(
            &bundle,
            &ablation_options(seed, Mode::Full, true),
            None,
            |state, log| {
                if log.session == 1 {
                    snapshot = state.stacks().iter().flat_map(|s| s.snapshot()).collect();
                }
                Ok(())
            },
        )
        .unwrap();
        a.full.push(full);
        a.session_one.push(snapshot);
        let go = |mode, replay| run(&bundle, &ablation_options(seed, mode, replay), None, |_, _| Ok(())).unwrap();
        a.naive.push(go(Mode::NaiveMatch, true));
        a.global.push(go(Mode::GlobalOnly, true));
        a.zero_shot.push(go(Mode::ZeroShot, true));
        a.no_replay.push(go(Mode::GlobalOnly, false));
    }
    a.elapsed = start.elapsed();
    a
}

fn mean(runs: &[RunResult], f: impl Fn(&SessionReport) -> f64) -> f64 {
    runs.iter().map(|r| f(&r.report)).sum::<f64>() / runs.len() as f64
}

fn ac4(a: &Ablation) -> Outcome {
    let last = |runs: &[RunResult]| mean(runs, |r| r.last);
    let (full, naive, global, zs) = (last(&a.full), last(&a.naive), last(&a.global), last(&a.zero_shot));
    let pass = full >= naive
        && naive >= global
        && global >= zs
        && full - global >= 2.0
        && a.elapsed < Duration::from_secs(180);
    outcome(
        pass,
        format!(
            "mean A_B full {full:.2} >= naive_match {naive:.2} >= global_only {global:.2} >= zero_shot {zs:.2}; full - global_only = {:.2}; {:.1?} for 15 runs",
            full - global,
            a.elapsed
        ),
    )
}

fn ac5(a: &Ablation) -> Outcome {
    let forgetting = |runs: &[RunResult]| mean(runs, |r| r.forgetting.unwrap());
    let (full, no_replay) = (forgetting(&a.full), forgetting(&a.no_replay));
    outcome(
        no_replay - full >= 1.0,
        format!(
            "mean F_B full {full:.2}, global_only without replay {no_replay:.2}, gap {:.2}",
            no_replay - full
        ),
    )
}

fn ac6(a: &Ablation) -> Outcome {
    let mut equal = 0;
    for (run, snapshot) in a.full.iter().zip(&a.session_one) {
        let now: Vec<u8> = run
            .state
            .stacks()
            .iter()
            .flat_map(|s| s.truncated(1).snapshot())
            .collect();
        if &now == snapshot {
            equal += 1;
        }
    }
    outcome(
        equal == a.full.len(),
        format!(
            "{equal}/{} runs with byte-identical session-1 projectors after 5 sessions",
            a.full.len()
        ),
    )
}

fn ac7() -> Outcome {
    let m = |rows: &[&[f64]]| AccuracyMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap();
    let f2 = forgetting_measure(&m(&[&[100.0], &[90.0, 80.0]])).unwrap();
    let f3 = forgetting_measure(&m(&[&[80.0], &[90.0, 70.0], &[85.0, 60.0, 50.0]])).unwrap();
    let flat = forgetting_measure(&m(&[&[55.0], &[55.0, 55.0]])).unwrap();

    let mut r = rng_from_seed(707);
    let mut identities = true;
    for b_total in 1..=8 {
        let rows: Vec<Vec<f64>> = (1..=b_total)
            .map(|l| (0..l).map(|_| uniform(&mut r, 0.0, 100.0)).collect())
            .collect();
        let acc: Vec<f64> = (0..b_total).map(|_| uniform(&mut r, 0.0, 100.0)).collect();
        let matrix = AccuracyMatrix::from_rows(rows).unwrap();
        let report = SessionReport::new(Mode::Full, 0.2, acc.clone(), &matrix).unwrap();
        let expected = acc.iter().sum::<f64>() / acc.len() as f64;
        identities &= report.average == expected && report.last == acc[b_total - 1];
        identities &= (b_total == 1) == report.forgetting.is_none();
    }
    outcome(
        f2 == 10.0 && f3 == 7.5 && flat == 0.0 && identities,
        format!("F_2 = {f2}, F_3 = {f3}, constant matrix {flat}, mean/last identities hold: {identities}"),
    )
}

fn artifacts(run: &RunResult) -> Vec<u8> {
    let mut out = encode_engine(&run.state, b"acceptance");
    out.extend(report_json(&run.report, &run.matrix).unwrap().into_bytes());
    out.extend(report_csv(&run.report).into_bytes());
    out.extend(curve_csv(&run.report).into_bytes());
    out.extend(matrix_csv(&run.matrix).into_bytes());
    for log in &run.logs {
        out.extend(log.to_jsonl().unwrap().into_bytes());
    }
    out
}

fn ac8(a: &Ablation) -> Outcome {
    let seed = SEEDS[0];
    let again = run(
        &ablation_bundle(seed),
        &ablation_options(seed, Mode::Full, true),
        None,
        |_, _| Ok(()),
    )
    .unwrap();
    let (x, y) = (artifacts(&a.full[0]), artifacts(&again));
    outcome(
        x == y,
        format!(
            "checkpoint, reports and logs of two runs: {} bytes, identical: {}",
            x.len(),
            x == y
        ),
    )
}

fn ac9(state: &EngineState, bundle: &EmbeddingBundle) -> Outcome {
    let cfg = InferenceConfig {
        beta: 0.0,
        ..InferenceConfig::default()
    };
    let classes = state.seen_classes();
    let full = Predictor::new(state, bundle, &classes, Mode::Full, &cfg).unwrap();
    let global = Predictor::new(state, bundle, &classes, Mode::GlobalOnly, &cfg).unwrap();
    let mut r = rng_from_seed(909);
    let d = state.dim();
    let mut mismatches = 0;
    for i in 0..1000 {
        let image = TokenEmbeddings {
            image_id: format!("random{i}"),
            label: 0,
            cls: random_vec(&mut r, d),
            patches: Matrix::from_vec(16, d, random_vec(&mut r, 16 * d)).unwrap(),
        };
        let (a, b) = (full.predict(&image).unwrap(), global.predict(&image).unwrap());
        if a.fused != b.fused || a.global != b.global || a.class_id != b.class_id {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("1000 random inputs, {mismatches} logit mismatches"),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{name} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("AC-1", ac1());
    report("AC-2", ac2());
    report("AC-3", ac3());
    let ablation = run_ablation();
    report("AC-4", ac4(&ablation));
    report("AC-5", ac5(&ablation));
    report("AC-6", ac6(&ablation));
    report("AC-7", ac7());
    report("AC-8", ac8(&ablation));
    report("AC-9", ac9(&ablation.full[0].state, &ablation_bundle(SEEDS[0])));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
