//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any criterion fails.
//!
//! Run with `cargo test -p gase-cli --test acceptance --release`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use gase::baselines::{brute_force_optimal, nearest_neighbor};
use gase::checkpoint;
use gase::decoder::{precompute, rollout, step_log_probs, DecodeMode, DecoderState};
use gase::encoder::{encode, EncodeOptions};
use gase::instances::{parse_cvrplib, Solution, VrpInstance};
use gase::model::{ModelConfig, ModelParams, NormMode, ProblemBatch};
use gase::numkernel::Tape;
use gase::trainer::{actor_pass, evaluate, paired_ttest, surrogate_loss, LogRecord, LOG_FILE};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FEASIBILITY_ROLLOUTS: usize = 10_000;
const FEASIBILITY_BUDGET_S: f64 = 300.0;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_DENOM_FLOOR: f64 = 1e-6;
const GRAD_PARAMS: usize = 50;
const DENSE_TOL: f64 = 1e-6;
const MASK_STATES: usize = 1000;
const MASK_SUM_TOL: f64 = 1e-6;
const ORACLE_GAP_MAX: f64 = 0.10;
const ORACLE_SET: usize = 200;
const PROGRESS_MIN_REDUCTION: f64 = 0.15;
const PROGRESS_BUDGET_S: f64 = 4.0 * 3600.0;
const TTEST_SAMPLES: usize = 20;
const TTEST_TOL: f64 = 1e-6;
const A_N32_K5_OPTIMUM: f64 = 784.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/cvrplib")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["gase"];
    argv.extend_from_slice(args);
    gase_cli::run(argv)
}

fn read_log(dir: &Path) -> Vec<LogRecord> {
    std::fs::read_to_string(dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn epoch_vals(log: &[LogRecord]) -> Vec<(usize, f64)> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Epoch { epoch, val_actor, .. } => Some((*epoch, *val_actor)),
            _ => None,
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn feasibility_sweep() -> Outcome {
    let start = Instant::now();
    let p = ModelParams::<f32>::init(&ModelConfig::default(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut feasible = 0;
    let batch_size = 500;
    for round in 0..FEASIBILITY_ROLLOUTS / batch_size {
        let set: Vec<VrpInstance> = (0..batch_size)
            .map(|i| VrpInstance::generate_random(20, (round * batch_size + i) as u64).unwrap())
            .collect();
        let refs: Vec<&VrpInstance> = set.iter().collect();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let batch = ProblemBatch::new(&refs).unwrap();
        let k = p.config.neighbors_for(20);
        let enc = encode(&mut tape, &p, &bound, &batch, EncodeOptions { neighbors: k, mode: NormMode::Train, keep_attention: false })
            .unwrap();
        let out = rollout(&mut tape, &p, &bound, &enc, &batch, DecodeMode::Sample(&mut rng), false).unwrap();
        feasible += set.iter().zip(&out.solutions).filter(|(i, sol)| i.validate(sol).is_feasible()).count();
    }
    let t = start.elapsed().as_secs_f64();
    outcome(
        feasible == FEASIBILITY_ROLLOUTS && t <= FEASIBILITY_BUDGET_S,
        format!("{feasible}/{FEASIBILITY_ROLLOUTS} feasible in {t:.1}s (budget {FEASIBILITY_BUDGET_S}s)"),
    )
}

fn gradient_check() -> Outcome {
    let cfg = ModelConfig { d_model: 16, layers: 2, heads: 2, ..Default::default() };
    let p = ModelParams::<f64>::init(&cfg, 3).unwrap();
    let set: Vec<VrpInstance> = (0..4).map(|s| VrpInstance::generate_random_with_capacity(6, 15.0, 40 + s).unwrap()).collect();
    let refs: Vec<&VrpInstance> = set.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pass = actor_pass(&p, &refs, DecodeMode::Sample(&mut rng)).unwrap();
    let actions: Vec<Vec<usize>> = pass.rollout.solutions.iter().map(|s| s.sequence.clone()).collect();
    let adv: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, grads) = surrogate_loss(&p, &refs, &actions, &adv).unwrap();

    let mut coords: Vec<(String, usize)> =
        p.tensors.iter().flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.clone(), i))).collect();
    coords.shuffle(&mut rng);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (name, i) in coords.into_iter().take(GRAD_PARAMS) {
        let loss_at = |delta: f64| {
            let mut q = p.clone();
            q.tensors.get_mut(&name).unwrap().data_mut()[i] += delta;
            surrogate_loss(&q, &refs, &actions, &adv).unwrap().0
        };
        let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let analytic = grads[&name].data()[i];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(GRAD_DENOM_FLOOR);
        if rel > worst {
            worst = rel;
            worst_at = format!("{name}[{i}]");
        }
    }
    outcome(worst <= GRAD_REL_TOL, format!("worst relative error {worst:.2e} at {worst_at} over {GRAD_PARAMS} parameters"))
}

fn dense_equivalence() -> Outcome {
    let cfg = ModelConfig { d_model: 16, layers: 3, heads: 2, neighbor_rate: 1.0, ..Default::default() };
    let p = ModelParams::<f64>::init(&cfg, 8).unwrap();
    let mut worst = 0.0f64;
    for n in [5, 10, 20] {
        let set: Vec<VrpInstance> = (0..3).map(|s| VrpInstance::generate_random_with_capacity(n, 30.0, s).unwrap()).collect();
        let refs: Vec<&VrpInstance> = set.iter().collect();
        for mode in [NormMode::Train, NormMode::Eval] {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, false);
            let batch = ProblemBatch::new(&refs).unwrap();
            let out = encode(&mut tape, &p, &bound, &batch, EncodeOptions { neighbors: n, mode, keep_attention: true }).unwrap();
            let o = common::encode(&p, &refs, n, mode);
            worst = worst.max(common::max_abs_diff(tape.value(out.nodes).data(), &common::flatten(&o.nodes)));
            for (a, b) in out.attention.iter().zip(&o.attention) {
                worst = worst.max(common::max_abs_diff(a.data(), &common::flatten(b)));
            }
        }
    }
    outcome(worst <= DENSE_TOL, format!("max deviation {worst:.2e} from the unfiltered oracle (tolerance {DENSE_TOL:.0e})"))
}

fn masked_softmax_law() -> Outcome {
    let p = ModelParams::<f64>::init(&ModelConfig { d_model: 32, layers: 2, heads: 4, ..Default::default() }, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let per_batch = 20;
    let mut leaked = 0usize;
    let mut worst_sum = 0.0f64;
    let mut states_seen = 0;
    for b in 0..MASK_STATES / per_batch {
        let set: Vec<VrpInstance> =
            (0..per_batch).map(|i| VrpInstance::generate_random(20, 10_000 + (b * per_batch + i) as u64).unwrap()).collect();
        let refs: Vec<&VrpInstance> = set.iter().collect();
        let states: Vec<DecoderState> = set
            .iter()
            .map(|inst| {
                let mut st = DecoderState::new(inst);
                let stop = rng.gen_range(0..=2 * inst.n_customers());
                while st.t <= stop && !st.is_done() {
                    let options: Vec<usize> = (0..inst.n_nodes()).filter(|&j| st.decoding_mask()[j]).collect();
                    st.step(*options.choose(&mut rng).unwrap()).unwrap();
                }
                st
            })
            .collect();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let batch = ProblemBatch::new(&refs).unwrap();
        let enc = encode(&mut tape, &p, &bound, &batch, EncodeOptions { neighbors: 10, mode: NormMode::Eval, keep_attention: false })
            .unwrap();
        let cache = precompute(&mut tape, &p, &bound, &enc).unwrap();
        let (logp, mask) = step_log_probs(&mut tape, &p, &bound, &cache, &states).unwrap();
        let probs: Vec<f64> = tape.value(logp).data().iter().map(|l| l.exp()).collect();
        for (i, st) in states.iter().enumerate() {
            let row = &probs[i * 21..(i + 1) * 21];
            let m = &mask[i * 21..(i + 1) * 21];
            let feasible = if st.is_done() { st.decoding_mask() } else { st.feasible() };
            leaked += (0..21).filter(|&j| !feasible[j] && row[j] != 0.0).count();
            leaked += (0..21).filter(|&j| m[j] != feasible[j]).count();
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            states_seen += 1;
        }
    }
    outcome(
        leaked == 0 && worst_sum <= MASK_SUM_TOL,
        format!("{states_seen} states: {leaked} infeasible entries with mass, max |sum - 1| = {worst_sum:.1e}"),
    )
}

fn held_out(n: usize, capacity: f64, count: usize, seed: u64) -> Vec<VrpInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| VrpInstance::random_with(n, capacity, &mut rng).unwrap()).collect()
}

fn oracle_gap(run_dir: &Path) -> Outcome {
    let ck = checkpoint::load(&run_dir.join("latest.gase")).unwrap();
    let set = held_out(8, 15.0, ORACLE_SET, 0x5eed);
    let model = evaluate(&ck.actor, &set, 1).unwrap();
    let exact: Vec<f64> = set.iter().map(|i| brute_force_optimal(i).unwrap().best_length).collect();
    let nn: Vec<f64> = set.iter().map(|i| nearest_neighbor(i).length).collect();
    let gap = mean(&model.lengths) / mean(&exact) - 1.0;
    let nn_gap = mean(&nn) / mean(&exact) - 1.0;
    outcome(
        gap <= ORACLE_GAP_MAX,
        format!(
            "greedy {:.4} vs exact {:.4}: gap {:.2}% (max {:.0}%); nearest neighbour {:.4}, gap {:.2}%",
            mean(&model.lengths),
            mean(&exact),
            100.0 * gap,
            100.0 * ORACLE_GAP_MAX,
            mean(&nn),
            100.0 * nn_gap
        ),
    )
}

fn training_progress(scratch: &Path) -> Outcome {
    let dir = scratch.join("desk20");
    let start = Instant::now();
    let code = cli(&["train", "--preset", "desk", "--n", "20", "--quiet", "--out-dir", s(&dir)]);
    let t = start.elapsed().as_secs_f64();
    if code != 0 {
        return outcome(false, format!("train exited with {code}"));
    }
    let vals = epoch_vals(&read_log(&dir));
    let (first, last) = (vals[0].1, vals[vals.len() - 1].1);
    let ck = checkpoint::load(&dir.join("latest.gase")).unwrap();
    let val = ck.config.validation_set().unwrap();
    let nn = mean(&val.iter().map(|i| nearest_neighbor(i).length).collect::<Vec<_>>());
    let reduction = 1.0 - last / first;
    outcome(
        reduction >= PROGRESS_MIN_REDUCTION && last < nn && t <= PROGRESS_BUDGET_S,
        format!(
            "validation {first:.4} -> {last:.4} ({:.1}% reduction, need {:.0}%); nearest neighbour {nn:.4}; {t:.0}s",
            100.0 * reduction,
            100.0 * PROGRESS_MIN_REDUCTION
        ),
    )
}

/// Student-t lower tail by Simpson integration of the density.
fn t_cdf(t: f64, df: usize) -> f64 {
    let nu = df as f64;
    // log gamma at halves by the recurrence from gamma(1/2) and gamma(1)
    let lgamma_half = |k: usize| {
        let (mut x, mut acc) = if k.is_multiple_of(2) { (1.0, 0.0) } else { (0.5, 0.5 * std::f64::consts::PI.ln()) };
        while x < k as f64 / 2.0 {
            acc += x.ln();
            x += 1.0;
        }
        acc
    };
    let log_c = lgamma_half(df + 1) - lgamma_half(df) - 0.5 * (nu * std::f64::consts::PI).ln();
    let density = |x: f64| (log_c - 0.5 * (nu + 1.0) * (1.0 + x * x / nu).ln()).exp();
    let steps = 200_000;
    let a = t.abs();
    let h = a / steps as f64;
    let mut sum = density(0.0) + density(a);
    for i in 1..steps {
        sum += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let half = sum * h / 3.0;
    if t >= 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}

fn ttest_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..TTEST_SAMPLES {
        let n = rng.gen_range(5..60);
        let shift = rng.gen_range(-0.5..0.5);
        let base: Vec<f64> = (0..n).map(|_| rng.gen_range(5.0..9.0)).collect();
        let actor: Vec<f64> = base.iter().map(|b| b + shift + rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f64> = actor.iter().zip(&base).map(|(a, b)| a - b).collect();
        let m = mean(&d);
        let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let want = t_cdf(m / (sd / (n as f64).sqrt()), n - 1);
        let got = paired_ttest(&actor, &base).unwrap().p;
        worst = worst.max((got - want).abs());
    }
    outcome(worst <= TTEST_TOL, format!("max |dp| {worst:.1e} over {TTEST_SAMPLES} paired samples"))
}

fn cvrplib_round_trip(scratch: &Path) -> Outcome {
    let text = std::fs::read_to_string(data_dir().join("A-n32-k5.vrp")).unwrap();
    let inst = parse_cvrplib(&text).unwrap();
    let routes: [&[usize]; 5] = [
        &[21, 31, 19, 17, 13, 7, 26],
        &[12, 1, 16, 30],
        &[27, 24],
        &[29, 18, 8, 9, 22, 15, 10, 25, 5, 20],
        &[14, 28, 11, 4, 23, 3, 2, 6],
    ];
    let mut seq = vec![0];
    for r in routes {
        seq.extend_from_slice(r);
        seq.push(0);
    }
    let sol = Solution::from_sequence(&inst, seq.clone()).unwrap();
    let feasible = inst.validate(&sol).is_feasible();
    let length = inst.reported_length(&seq).unwrap();
    let parsed = inst.n_customers() == 31 && inst.known_optimum() == Some(A_N32_K5_OPTIMUM);

    // smoke-trained 50- and 100-node checkpoints over the bundled library
    let mut trained = true;
    for (n, cap) in [("50", "40"), ("100", "50")] {
        let dir = scratch.join(format!("gen{n}"));
        trained &= cli(&[
            "train", "--n", n, "--capacity", cap, "--epochs", "1", "--steps", "4", "--batch", "8", "--val-size", "8", "--quiet",
            "--out-dir", s(&dir),
        ]) == 0;
    }
    let out = scratch.join("generalization");
    let evaluated = trained
        && cli(&[
            "evaluate",
            "--checkpoint",
            s(&scratch.join("gen50/latest.gase")),
            "--large-checkpoint",
            s(&scratch.join("gen100/latest.gase")),
            "--cvrplib",
            s(&data_dir()),
            "--nn",
            "--out-dir",
            s(&out),
        ]) == 0;
    let avg_row = std::fs::read_to_string(out.join("table.txt"))
        .ok()
        .and_then(|t| t.lines().find(|l| l.starts_with("Average Gap")).map(|l| l.split_whitespace().collect::<Vec<_>>().join(" ")));
    outcome(
        parsed && feasible && length == A_N32_K5_OPTIMUM && evaluated && avg_row.is_some(),
        format!(
            "A-n32-k5: {} customers, optimum route feasible={feasible}, length {length}; table row \"{}\"",
            inst.n_customers(),
            avg_row.unwrap_or_else(|| "missing".into())
        ),
    )
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let same_log = std::fs::read(a.join(LOG_FILE)).unwrap() == std::fs::read(b.join(LOG_FILE)).unwrap();
    let mut files = 0;
    let mut same_ck = true;
    for e in std::fs::read_dir(a).unwrap() {
        let path = e.unwrap().path();
        if path.extension().is_some_and(|x| x == "gase") {
            files += 1;
            same_ck &= std::fs::read(&path).unwrap() == std::fs::read(b.join(path.file_name().unwrap())).unwrap();
        }
    }
    let ck = checkpoint::load(&a.join("latest.gase")).unwrap();
    let set = held_out(8, 15.0, 50, 0xbeef);
    let before = evaluate(&ck.actor, &set, 1).unwrap();
    let copy = a.join("resaved.gase");
    checkpoint::save(&copy, &ck).unwrap();
    let reloaded = checkpoint::load(&copy).unwrap();
    let after = evaluate(&reloaded.actor, &set, 1).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same_rollout = before.solutions == after.solutions && bits(&before.lengths) == bits(&after.lengths);
    outcome(
        same_log && same_ck && files > 0 && same_rollout,
        format!("log identical={same_log}, {files} checkpoints identical={same_ck}, reloaded greedy rollout identical={same_rollout}"),
    )
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let root = scratch.path();
    let desk8 = |name: &str| {
        let dir = root.join(name);
        let code = cli(&["train", "--preset", "desk", "--n", "8", "--capacity", "15", "--seed", "7", "--quiet", "--out-dir", s(&dir)]);
        assert_eq!(code, 0, "desk training on n=8 failed");
        dir
    };

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        println!("criterion {id} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    report(1, "feasibility sweep", feasibility_sweep());
    report(2, "gradient check", gradient_check());
    report(3, "dense equivalence", dense_equivalence());
    report(4, "masked softmax", masked_softmax_law());
    let run_a = desk8("desk8_a");
    report(5, "oracle gap n=8", oracle_gap(&run_a));
    report(6, "desk training progress", training_progress(root));
    report(7, "t-test oracle", ttest_oracle());
    report(8, "CVRPLIB round trip", cvrplib_round_trip(root));
    let run_b = desk8("desk8_b");
    report(9, "determinism", determinism(&run_a, &run_b));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
