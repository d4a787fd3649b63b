use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use gase::baselines::nearest_neighbor;
use gase::checkpoint::{self, Checkpoint};
use gase::instances::{default_capacity, parse_cvrplib, read_instance_set, write_instance_set, Solution, VrpInstance};
use gase::trainer::{evaluate, train_from, DirSink, LogRecord, Preset, TrainConfig, TrainSink, TrainState, LOG_FILE};

use crate::args::{EvaluateArgs, GenerateArgs, PresetArg, SolveArgs, TrainArgs};
use crate::manifest::{sidecar, RunManifest, MANIFEST_FILE};
use crate::report::{self, InstanceRecord, LibraryRecord, TimingRecord, MODEL_METHOD, NN_METHOD};
use crate::{svg, CliError};

/// Largest CVRPLIB customer count routed to the primary checkpoint.
pub const SMALL_MODEL_MAX: usize = 50;

/// Text printed to stdout on success.
#[derive(Clone, Debug, Default)]
pub struct CmdOutput {
    pub text: String,
}

fn json<T: serde::Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Internal(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn read_set(path: &Path) -> Result<Vec<VrpInstance>, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_instance_set(BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn read_vrp(path: &Path) -> Result<VrpInstance, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut inst = parse_cvrplib(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if inst.name.is_none() {
        inst.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    }
    Ok(inst)
}

/// Deterministic set of `count` instances drawn from one seeded stream.
pub fn generate_set(n: usize, count: usize, capacity: f64, seed: u64) -> Result<Vec<VrpInstance>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| VrpInstance::random_with(n, capacity, &mut rng).map_err(CliError::from)).collect()
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<CmdOutput, CliError> {
    let start = Instant::now();
    if a.count == 0 {
        return Err(CliError::Argument("--count 0 would write an empty set".into()));
    }
    let capacity = a
        .capacity
        .or_else(|| default_capacity(a.n))
        .ok_or_else(|| CliError::Argument(format!("no default capacity for n={}; pass --capacity", a.n)))?;
    let set = generate_set(a.n, a.count, capacity, a.seed)?;
    let f = File::create(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    write_instance_set(BufWriter::new(f), &set).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;

    let mut m = RunManifest::new("generate");
    m.config = serde_json::json!({ "n": a.n, "count": a.count, "capacity": capacity, "seed": a.seed });
    m.seed = Some(a.seed);
    m.outputs.push(a.out.clone());
    m.timings.insert("total_s".into(), start.elapsed().as_secs_f64());
    m.write(&sidecar(&a.out))?;
    Ok(CmdOutput { text: format!("wrote {} instances (n={}, capacity={capacity}) to {}\n", a.count, a.n, a.out.display()) })
}

/// Keys accepted in a `--config` TOML file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub preset: Option<Preset>,
    pub n: Option<usize>,
    pub capacity: Option<f64>,
    pub k_rate: Option<f64>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub d_model: Option<usize>,
    pub epochs: Option<usize>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub lr_decay: Option<f64>,
    pub alpha: Option<f64>,
    pub val_size: Option<usize>,
    pub max_grad_norm: Option<f64>,
    pub seed: Option<u64>,
}

impl TrainFile {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Flags override the config file, which overrides the preset.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let f = match &a.config {
        Some(p) => TrainFile::read(p)?,
        None => TrainFile::default(),
    };
    let preset = match a.preset {
        Some(PresetArg::Paper) => Preset::Paper,
        Some(PresetArg::Desk) => Preset::Desk,
        None => f.preset.unwrap_or(Preset::Desk),
    };
    let n = a.n.or(f.n).unwrap_or(20);
    let mut cfg = TrainConfig::preset(preset, n, a.capacity.or(f.capacity))?;
    macro_rules! set {
        ($field:expr, $name:ident) => {
            if let Some(v) = a.$name.or(f.$name) {
                $field = v;
            }
        };
    }
    set!(cfg.model.neighbor_rate, k_rate);
    set!(cfg.model.layers, layers);
    set!(cfg.model.heads, heads);
    set!(cfg.model.d_model, d_model);
    set!(cfg.epochs, epochs);
    set!(cfg.steps_per_epoch, steps);
    set!(cfg.batch_size, batch);
    set!(cfg.lr, lr);
    set!(cfg.lr_decay, lr_decay);
    set!(cfg.alpha, alpha);
    set!(cfg.val_size, val_size);
    set!(cfg.max_grad_norm, max_grad_norm);
    set!(cfg.seed, seed);
    cfg.validate()?;
    Ok(cfg)
}

/// Writes to the run directory and echoes epoch summaries to stderr.
struct ProgressSink {
    inner: DirSink,
    quiet: bool,
}

impl TrainSink for ProgressSink {
    fn record(&mut self, record: &LogRecord) -> Result<(), gase::trainer::TrainError> {
        if let LogRecord::Epoch { epoch, val_actor, val_baseline, p_value, baseline_updated, .. } = record {
            if !self.quiet {
                let mark = if *baseline_updated { " baseline updated" } else { "" };
                eprintln!("epoch {epoch}: val actor {val_actor:.4} baseline {val_baseline:.4} p={p_value:.3e}{mark}");
            }
        }
        self.inner.record(record)
    }

    fn epoch_end(&mut self, state: &TrainState) -> Result<(), gase::trainer::TrainError> {
        self.inner.epoch_end(state)
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<CmdOutput, CliError> {
    let start = Instant::now();
    let (state, sink) = match &a.resume {
        Some(path) => {
            let changed = a.preset.is_some()
                || a.config.is_some()
                || a.n.is_some()
                || a.capacity.is_some()
                || a.k_rate.is_some()
                || a.layers.is_some()
                || a.heads.is_some()
                || a.d_model.is_some()
                || a.steps.is_some()
                || a.batch.is_some()
                || a.lr.is_some()
                || a.lr_decay.is_some()
                || a.alpha.is_some()
                || a.val_size.is_some()
                || a.max_grad_norm.is_some()
                || a.seed.is_some();
            if changed {
                return Err(CliError::Argument("--resume keeps the saved configuration; only --epochs may change".into()));
            }
            let mut state = checkpoint::load(path)?.into_state()?;
            if let Some(e) = a.epochs {
                if e < state.epoch {
                    return Err(CliError::Argument(format!("--epochs {e} is below the saved epoch {}", state.epoch)));
                }
                state.config.epochs = e;
            }
            state.config.validate()?;
            (state, DirSink::append(&a.out_dir)?)
        }
        None => {
            let cfg = resolve_train_config(a)?;
            (TrainState::new(&cfg)?, DirSink::create(&a.out_dir)?)
        }
    };
    let first_epoch = state.epoch;
    let mut sink = ProgressSink { inner: sink, quiet: a.quiet };
    let state = train_from(state, &mut sink)?;
    drop(sink);

    let cfg = &state.config;
    let mut m = RunManifest::new("train");
    m.config = json(cfg)?;
    m.seed = Some(cfg.seed);
    m.inputs.extend(a.config.iter().cloned());
    m.inputs.extend(a.resume.iter().cloned());
    m.outputs.push(a.out_dir.join(LOG_FILE));
    m.outputs.extend((first_epoch + 1..=state.epoch).map(|e| DirSink::checkpoint_path(&a.out_dir, e)));
    m.outputs.push(a.out_dir.join("latest.gase"));
    m.timings.insert("train_s".into(), start.elapsed().as_secs_f64());
    m.write(&a.out_dir.join(MANIFEST_FILE))?;
    Ok(CmdOutput {
        text: format!(
            "trained {} epochs (n={}, K={}), checkpoints in {}\n",
            state.epoch - first_epoch,
            cfg.n,
            cfg.neighbors(),
            a.out_dir.display()
        ),
    })
}

fn workers(a: Option<usize>) -> Result<usize, CliError> {
    match a {
        Some(0) => Err(CliError::Argument("--workers must be positive".into())),
        Some(w) => Ok(w),
        None => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

pub fn load_model(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(checkpoint::load(path)?)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<CmdOutput, CliError> {
    let workers = workers(a.workers)?;
    create_dir(&a.out_dir)?;
    let mut m = RunManifest::new("evaluate");
    m.inputs.push(a.checkpoint.clone());
    m.config = serde_json::json!({ "mode": "greedy", "workers": workers, "nn": a.nn });
    let text = match (&a.instances, &a.cvrplib) {
        (Some(set), _) => evaluate_set(a, set, workers, &mut m)?,
        (None, Some(dir)) => evaluate_library(a, dir, workers, &mut m)?,
        (None, None) => return Err(CliError::Argument("pass --instances or --cvrplib".into())),
    };
    let table = a.out_dir.join(report::TABLE_FILE);
    std::fs::write(&table, &text).map_err(|e| CliError::io(&table, e))?;
    m.outputs.push(table);
    m.write(&a.out_dir.join(MANIFEST_FILE))?;
    Ok(CmdOutput { text })
}

fn evaluate_set(a: &EvaluateArgs, set_path: &Path, workers: usize, m: &mut RunManifest) -> Result<String, CliError> {
    let ck = load_model(&a.checkpoint)?;
    let set = read_set(set_path)?;
    m.inputs.push(set_path.to_path_buf());
    if set.is_empty() {
        return Err(CliError::Data(format!("{}: empty instance set", set_path.display())));
    }
    let refs = match &a.refs {
        Some(p) => {
            m.inputs.push(p.clone());
            let r = report::read_refs(p)?;
            if r.len() != set.len() {
                return Err(CliError::Data(format!("{} has {} references for {} instances", p.display(), r.len(), set.len())));
            }
            Some(r)
        }
        None => None,
    };
    let reference = |i: usize| refs.as_ref().map(|r| r[i]);

    let res = evaluate(&ck.actor, &set, workers)?;
    let mut records: Vec<InstanceRecord> = res
        .lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| InstanceRecord {
            index: i,
            method: MODEL_METHOD.into(),
            length: l,
            reference: reference(i),
            gap_pct: report::gap_pct(l, reference(i)),
        })
        .collect();
    let mut timings =
        vec![TimingRecord { method: MODEL_METHOD.into(), instances: set.len(), wall_time_s: res.wall_time.as_secs_f64() }];
    if a.nn {
        let start = Instant::now();
        let sols: Vec<Solution> = set.iter().map(nearest_neighbor).collect();
        timings.push(TimingRecord { method: NN_METHOD.into(), instances: set.len(), wall_time_s: start.elapsed().as_secs_f64() });
        records.extend(sols.iter().enumerate().map(|(i, s)| InstanceRecord {
            index: i,
            method: NN_METHOD.into(),
            length: s.length,
            reference: reference(i),
            gap_pct: report::gap_pct(s.length, reference(i)),
        }));
    }
    let per = a.out_dir.join(report::PER_INSTANCE_FILE);
    let tim = a.out_dir.join(report::TIMING_FILE);
    report::write_csv(&per, &records)?;
    report::write_csv(&tim, &timings)?;
    m.outputs.extend([per.clone(), tim.clone()]);
    for t in &timings {
        m.timings.insert(format!("{}_s", t.method), t.wall_time_s);
    }

    let rows = report::set_rows(&report::read_csv(&per)?, &report::read_csv(&tim)?);
    Ok(report::render_set_table(&rows))
}

fn evaluate_library(a: &EvaluateArgs, dir: &Path, workers: usize, m: &mut RunManifest) -> Result<String, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("vrp")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no .vrp files", dir.display())));
    }
    let insts: Vec<VrpInstance> = files.iter().map(|p| read_vrp(p)).collect::<Result<_, _>>()?;
    m.inputs.push(dir.to_path_buf());
    let small = load_model(&a.checkpoint)?;
    let large = if insts.iter().any(|i| i.n_customers() > SMALL_MODEL_MAX) {
        let p = a.large_checkpoint.as_ref().ok_or_else(|| {
            CliError::Argument(format!("files with more than {SMALL_MODEL_MAX} customers need --large-checkpoint"))
        })?;
        m.inputs.push(p.clone());
        Some(load_model(p)?)
    } else {
        None
    };

    let mut records = Vec::new();
    let mut model_time = 0.0;
    let mut nn_time = 0.0;
    for inst in &insts {
        let ck = match &large {
            Some(l) if inst.n_customers() > SMALL_MODEL_MAX => l,
            _ => &small,
        };
        let res = evaluate(&ck.actor, std::slice::from_ref(inst), workers)?;
        model_time += res.wall_time.as_secs_f64();
        let name = inst.name.clone().unwrap_or_default();
        let opt = inst.known_optimum();
        let mut push = |method: &str, sol: &Solution| -> Result<(), CliError> {
            let length = inst.reported_length(&sol.sequence)?;
            records.push(LibraryRecord {
                instance: name.clone(),
                customers: inst.n_customers(),
                method: method.into(),
                length,
                optimum: opt,
                gap_pct: report::gap_pct(length, opt),
            });
            Ok(())
        };
        push(MODEL_METHOD, &res.solutions[0])?;
        if a.nn {
            let start = Instant::now();
            let sol = nearest_neighbor(inst);
            nn_time += start.elapsed().as_secs_f64();
            push(NN_METHOD, &sol)?;
        }
    }
    let per = a.out_dir.join(report::PER_INSTANCE_FILE);
    report::write_csv(&per, &records)?;
    m.outputs.push(per.clone());
    m.timings.insert(format!("{MODEL_METHOD}_s"), model_time);
    if a.nn {
        m.timings.insert(format!("{NN_METHOD}_s"), nn_time);
    }

    let (methods, rows, avg) = report::library_rows(&report::read_csv(&per)?);
    Ok(report::render_library_table(&methods, &rows, &avg))
}

/// Route listing with each length recomputed from the instance.
pub fn route_listing(inst: &VrpInstance, sol: &Solution) -> Result<String, CliError> {
    let report = inst.validate(sol);
    if !report.is_feasible() {
        return Err(CliError::Internal(format!("decoded solution is infeasible: {:?}", report.violations)));
    }
    let mut text = String::new();
    let mut total = 0.0;
    for (r, route) in sol.routes().iter().enumerate() {
        let mut seq = vec![0];
        seq.extend_from_slice(route);
        seq.push(0);
        let len = inst.tour_length(&seq)?;
        total += len;
        let load: f64 = route.iter().map(|&c| inst.demands()[c]).sum();
        let nodes: Vec<String> = seq.iter().map(|v| v.to_string()).collect();
        text += &format!("route {}: {}  load {}/{}  length {:.4}\n", r + 1, nodes.join(" "), load, inst.capacity(), len);
    }
    let whole = inst.tour_length(&sol.sequence)?;
    if (whole - total).abs() > 1e-9 * whole.max(1.0) || (whole - sol.length).abs() > 1e-6 * whole.max(1.0) {
        return Err(CliError::Internal(format!("route lengths {total} disagree with tour length {whole}")));
    }
    text += &format!("total length {whole:.4}\n");
    if inst.is_cvrplib() {
        text += &format!("total length (CVRPLIB rounding) {}\n", inst.reported_length(&sol.sequence)?);
        if let Some(opt) = inst.known_optimum() {
            text += &format!("known optimum {opt}\n");
        }
    }
    Ok(text)
}

pub fn cmd_solve(a: &SolveArgs) -> Result<CmdOutput, CliError> {
    let ck = load_model(&a.checkpoint)?;
    let mut m = RunManifest::new("solve");
    m.inputs.push(a.checkpoint.clone());
    let inst = match (&a.vrp, &a.instances) {
        (Some(p), _) => {
            m.inputs.push(p.clone());
            read_vrp(p)?
        }
        (None, Some(p)) => {
            m.inputs.push(p.clone());
            let mut set = read_set(p)?;
            if a.index >= set.len() {
                return Err(CliError::Argument(format!("--index {} out of range for {} instances", a.index, set.len())));
            }
            set.swap_remove(a.index)
        }
        (None, None) => return Err(CliError::Argument("pass --vrp or --instances".into())),
    };
    let res = evaluate(&ck.actor, std::slice::from_ref(&inst), 1)?;
    let sol = &res.solutions[0];
    let text = route_listing(&inst, sol)?;
    if let Some(plot) = &a.plot {
        std::fs::write(plot, svg::render(&inst, sol)).map_err(|e| CliError::io(plot, e))?;
        m.config = serde_json::json!({ "index": a.index });
        m.outputs.push(plot.clone());
        m.timings.insert("solve_s".into(), res.wall_time.as_secs_f64());
        m.write(&sidecar(plot))?;
    }
    Ok(CmdOutput { text })
}
