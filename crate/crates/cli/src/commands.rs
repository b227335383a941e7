use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use mns_core::dataset::{load_idx, load_subsets, locate, DataConfig, DataSource, Dataset};
use mns_core::experiments::{
    csv_writer, export_history, export_improvement, export_power, export_results, fingerprint, improvement_factor,
    mean_hidden_input, power_sweep, run_cells, ExportFormat, RunResult, SweepConfig, SweepResult, SCHEMA_VERSION,
};
use mns_core::network::{init_weights, Network, NetworkSpec};
use mns_core::soa::PowerVector;
use mns_core::training::{
    gradient_check, random_instance, train, write_history_csv, TrainConfig, GRAD_REL_TOL,
};
use mns_core::{Error, Result, N_CLASSES};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::FileConfig;
use crate::{Cli, Command, DataArgs, GradcheckCmd, InspectCmd, PowerCmd, SweepCmd, TrainArgs, TrainCmd, EXIT_NUMERIC};

struct Ctx {
    file: FileConfig,
    out: PathBuf,
    data_dir: PathBuf,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

pub fn run(cli: &Cli) -> Result<u8> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        out: cli.out.clone().or_else(|| file.output_dir.clone()).unwrap_or_else(|| "runs".into()),
        data_dir: cli.data_dir.clone().or_else(|| file.data_dir.clone()).unwrap_or_else(|| "data".into()),
        verbose: cli.verbose,
        file,
    };
    match &cli.command {
        Command::Train(cmd) => cmd_train(&ctx, cmd),
        Command::Sweep(cmd) => cmd_sweep(&ctx, cmd),
        Command::Gradcheck(cmd) => cmd_gradcheck(&ctx, cmd),
        Command::Power(cmd) => cmd_power(&ctx, cmd),
        Command::InspectData(cmd) => cmd_inspect(&ctx, cmd),
    }
}

fn data_config(base: &DataConfig, args: &DataArgs) -> DataConfig {
    let mut c = base.clone();
    if let Some(d) = args.dataset {
        c.dataset = d;
    }
    if let Some(k) = args.train_size {
        c.train_size = Some(k);
    }
    if let Some(k) = args.test_size {
        c.test_size = Some(k);
    }
    if let Some(s) = args.subset_seed {
        c.subset_seed = s;
    }
    if let Some(s) = args.input_scale {
        c.input_scale = s;
    }
    c
}

fn train_config(base: &TrainConfig, args: &TrainArgs) -> TrainConfig {
    let mut c = *base;
    if let Some(v) = args.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    c
}

fn run_dir(ctx: &Ctx, fp: &str) -> Result<PathBuf> {
    let dir = ctx.out.join(fp);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Writes through a temporary file so readers never see a partial document.
fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Timestamps and wall times: the only nondeterministic output of a command.
fn write_meta(dir: &Path, command: &str, started: f64, timings: serde_json::Value) -> Result<()> {
    write_json_atomic(
        &dir.join("meta.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix": started,
            "finished_unix": unix_now(),
            "timings": timings,
        }),
    )
}

#[derive(Debug, Serialize)]
struct TrainResultRow {
    schema_version: u32,
    dataset: &'static str,
    channels: usize,
    g_ss_db: f64,
    p_sat: f64,
    algorithm: &'static str,
    seed: u64,
    epochs: usize,
    final_loss: f64,
    final_accuracy: f64,
}

fn cmd_train(ctx: &Ctx, cmd: &TrainCmd) -> Result<u8> {
    let started = unix_now();
    let file = &ctx.file;
    let data = data_config(&file.data, &cmd.data);
    let mut net_cfg = file.network.clone();
    if let Some(v) = cmd.channels {
        net_cfg.channels = v;
    }
    if let Some(v) = cmd.g_ss_db {
        net_cfg.g_ss_db = v;
    }
    if let Some(v) = cmd.p_sat {
        net_cfg.p_sat = v;
    }
    if let Some(v) = cmd.hidden_size {
        net_cfg.hidden_size = v;
    }
    if let Some(v) = cmd.seed {
        net_cfg.seed = v;
    }
    let mut train_cfg = train_config(&file.train, &cmd.train);
    if let Some(a) = cmd.algorithm {
        train_cfg.algorithm = a;
    }
    if let Some(s) = cmd.shuffle_seed {
        train_cfg.seed = s;
    }
    train_cfg.validate()?;
    if data.input_scale <= 0.0 {
        return Err(Error::InvalidConfig("input_scale must be positive".into()));
    }

    let (train_set, test_set) = load_subsets(&ctx.data_dir, &data)?;
    let spec = NetworkSpec::new(
        vec![train_set.input_dim(), net_cfg.hidden_size, N_CLASSES],
        net_cfg.channels,
        net_cfg.g_ss_db,
        net_cfg.p_sat,
    )?;
    let fp = fingerprint(&("train", &data, &spec, &net_cfg.seed, &train_cfg))?;
    let dir = run_dir(ctx, &fp)?;
    ctx.log(format!(
        "training {}-{}-{} with {} channels at {} dB ({}), {} epochs -> {}",
        spec.input_size(),
        net_cfg.hidden_size,
        N_CLASSES,
        spec.mns_channels,
        spec.g_ss_db,
        train_cfg.algorithm,
        train_cfg.epochs,
        dir.display()
    ));

    let clock = Instant::now();
    let net = init_weights(&spec, net_cfg.seed)?;
    let outcome = train(net, &train_set, &test_set, &train_cfg)?;
    let wall = clock.elapsed().as_secs_f64();

    outcome.network.save(&dir.join("checkpoint.json"))?;
    write_history_csv(&outcome.history, &dir.join("history.csv"))?;
    let last = outcome.history.last();
    let results_path = dir.join("results.csv");
    let mut w = csv_writer(&results_path)?;
    w.serialize(TrainResultRow {
        schema_version: SCHEMA_VERSION,
        dataset: data.dataset.as_str(),
        channels: spec.mns_channels,
        g_ss_db: spec.g_ss_db,
        p_sat: spec.p_sat,
        algorithm: train_cfg.algorithm.as_str(),
        seed: net_cfg.seed,
        epochs: train_cfg.epochs,
        final_loss: last.map_or(f64::NAN, |r| r.loss),
        final_accuracy: last.map_or(f64::NAN, |r| r.accuracy),
    })?;
    w.flush().map_err(|e| Error::io(&results_path, e))?;
    write_json_atomic(
        &dir.join("manifest.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": "train",
            "fingerprint": fp,
            "data": data,
            "network": spec,
            "init_seed": net_cfg.seed,
            "train": train_cfg,
            "train_samples": train_set.len(),
            "test_samples": test_set.len(),
        }),
    )?;
    write_meta(&dir, "train", started, json!({ "train_s": wall }))?;

    if let Some(r) = last {
        println!("epochs {}  loss {:.6}  test accuracy {:.4}", r.epoch, r.loss, r.accuracy);
    }
    println!("{}", dir.display());
    Ok(0)
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepManifest {
    schema_version: u32,
    command: String,
    fingerprint: String,
    config: SweepConfig,
    data: DataConfig,
    /// Finished cells, in plan order.
    completed: Vec<RunResult>,
}

fn sweep_config(ctx: &Ctx, cmd: &SweepCmd) -> SweepConfig {
    let mut c = ctx.file.sweep_config();
    c.train = train_config(&c.train, &cmd.train);
    if let Some(v) = &cmd.g_ss_list {
        c.g_ss_list = v.clone();
    }
    if let Some(v) = &cmd.channels_list {
        c.channels_list = v.clone();
    }
    if let Some(v) = &cmd.algorithms {
        c.algorithms = v.clone();
    }
    if let Some(v) = cmd.repeats {
        c.repeats = v;
    }
    if let Some(v) = cmd.seed_base {
        c.seed_base = v;
    }
    if let Some(v) = cmd.p_sat {
        c.p_sat = v;
    }
    if let Some(d) = cmd.data.dataset {
        c.dataset = d;
    }
    c
}

fn load_manifest(path: &Path, fp: &str) -> Result<Vec<RunResult>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: SweepManifest = serde_json::from_str(&text)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion(manifest.schema_version));
    }
    if manifest.fingerprint != fp {
        return Err(Error::InvalidConfig(format!(
            "{} belongs to a different sweep ({})",
            path.display(),
            manifest.fingerprint
        )));
    }
    Ok(manifest.completed)
}

fn cmd_sweep(ctx: &Ctx, cmd: &SweepCmd) -> Result<u8> {
    let started = unix_now();
    let config = sweep_config(ctx, cmd);
    config.validate()?;
    let mut data = data_config(&ctx.file.data, &cmd.data);
    data.dataset = config.dataset;
    let fp = fingerprint(&("sweep", &config, &data))?;
    let dir = ctx.out.join(&fp);
    let manifest_path = dir.join("manifest.json");
    let plan = config.plan();
    let done = load_manifest(&manifest_path, &fp)?;
    let done_labels: BTreeMap<String, ()> = done.iter().map(|r| (r.cell.label(), ())).collect();
    let pending: Vec<_> = plan.iter().filter(|c| !done_labels.contains_key(&c.label())).copied().collect();

    if cmd.dry_run {
        println!("{} cells ({} done, {} pending) -> {}", plan.len(), plan.len() - pending.len(), pending.len(), dir.display());
        for cell in &plan {
            let state = if done_labels.contains_key(&cell.label()) { "done" } else { "pending" };
            println!("{}  seed={}  {state}", cell.label(), cell.seed(config.seed_base));
        }
        return Ok(0);
    }

    let (train_set, test_set) = load_subsets(&ctx.data_dir, &data)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    ctx.log(format!(
        "sweep {}: {} cells, {} already done, {} train / {} test samples",
        fp,
        plan.len(),
        done.len(),
        train_set.len(),
        test_set.len()
    ));

    let manifest = Mutex::new(SweepManifest {
        schema_version: SCHEMA_VERSION,
        command: "sweep".into(),
        fingerprint: fp.clone(),
        config: config.clone(),
        data: data.clone(),
        completed: done,
    });
    write_json_atomic(&manifest_path, &*manifest.lock().unwrap())?;
    let timings = Mutex::new(BTreeMap::new());
    let position: BTreeMap<String, usize> = plan.iter().enumerate().map(|(i, c)| (c.label(), i)).collect();
    let jobs = cmd.jobs.unwrap_or(0);
    run_cells(&config, &pending, &train_set, &test_set, jobs, |run| {
        timings.lock().unwrap().insert(run.cell.label(), run.wall_time_s);
        let mut m = manifest.lock().unwrap();
        m.completed.push(RunResult {
            wall_time_s: 0.0,
            ..run.clone()
        });
        m.completed.sort_by_key(|r| position[&r.cell.label()]);
        ctx.log(format!(
            "[{}/{}] {}  accuracy {:.4}",
            m.completed.len(),
            plan.len(),
            run.cell.label(),
            run.final_accuracy
        ));
        write_json_atomic(&manifest_path, &*m)
    })?;

    let runs = manifest.into_inner().unwrap().completed;
    let result = SweepResult::assemble(config.clone(), runs)?;
    export_results(&result, &dir.join("results.csv"), ExportFormat::Csv)?;
    export_results(&result, &dir.join("results.json"), ExportFormat::Json)?;
    export_history(&result, &dir.join("history.csv"))?;
    export_improvement(&result, &dir.join("improvement.csv"))?;
    write_meta(&dir, "sweep", started, json!({ "cells_s": timings.into_inner().unwrap() }))?;

    print_sweep_summary(&result);
    println!("{}", dir.display());
    Ok(0)
}

fn print_sweep_summary(result: &SweepResult) {
    println!("{:>8} {:>8} {:>12} {:>5} {:>9} {:>9} {:>9}", "g_ss_db", "channels", "algorithm", "runs", "accuracy", "train_dev", "acc_dev");
    for a in result.aggregates() {
        println!(
            "{:>8} {:>8} {:>12} {:>5} {:>9.4} {:>9.4} {:>9.4}",
            a.g_ss_db,
            a.channels,
            a.algorithm.as_str(),
            a.runs,
            a.mean_accuracy,
            a.deviation.training_deviation,
            a.deviation.accuracy_deviation
        );
    }
    for &n in &result.config.channels_list {
        if let Ok(f) = improvement_factor(result, n) {
            println!("improvement factor, {n} channels: {:+.4}", f);
        }
    }
}

fn cmd_gradcheck(ctx: &Ctx, cmd: &GradcheckCmd) -> Result<u8> {
    let mut c = ctx.file.gradcheck.clone();
    if let Some(v) = cmd.algorithm {
        c.algorithm = v;
    }
    if let Some(v) = cmd.channels {
        c.channels = v;
    }
    if let Some(v) = cmd.g_ss_db {
        c.g_ss_db = v;
    }
    if let Some(v) = cmd.p_sat {
        c.p_sat = v;
    }
    if let Some(v) = &cmd.layer_sizes {
        c.layer_sizes = v.clone();
    }
    if let Some(v) = cmd.instances {
        c.instances = v;
    }
    if let Some(v) = cmd.seed {
        c.seed = v;
    }
    if c.instances == 0 {
        return Err(Error::InvalidConfig("instances must be at least 1".into()));
    }

    let mut worst: f64 = 0.0;
    let mut failing = 0;
    for i in 0..c.instances as u64 {
        let (net, input, expected) = random_instance(&c.layer_sizes, c.channels, c.g_ss_db, c.p_sat, c.seed + i)?;
        let err = gradient_check(&net, &input, &expected, c.algorithm)?;
        if err > GRAD_REL_TOL {
            failing += 1;
        }
        worst = worst.max(err);
    }
    println!(
        "{} backprop, layers {:?}, {} channels, {} dB: max relative error {:.3e} over {} instances ({} above {:.0e})",
        c.algorithm, c.layer_sizes, c.channels, c.g_ss_db, worst, c.instances, failing, GRAD_REL_TOL
    );
    if failing == 0 {
        println!("PASS");
        Ok(0)
    } else {
        println!("FAIL");
        Ok(EXIT_NUMERIC)
    }
}

fn cmd_power(ctx: &Ctx, cmd: &PowerCmd) -> Result<u8> {
    let started = unix_now();
    let mut c = ctx.file.power.clone();
    if let Some(v) = &cmd.channels_list {
        c.channels_list = v.clone();
    }
    if let Some(v) = cmd.g_ss_db {
        c.g_ss_db = v;
    }
    if let Some(v) = cmd.p_sat {
        c.p_sat = v;
    }
    if let Some(v) = cmd.eta_quantum {
        c.eta_quantum = v;
    }
    if let Some(v) = cmd.insertion_loss {
        c.insertion_loss = v;
    }
    if let Some(v) = cmd.operating_power {
        c.operating_power = v;
    }
    let power_cfg = c.power_config();
    power_cfg.validate()?;
    if c.channels_list.is_empty() {
        return Err(Error::InvalidConfig("channels_list must be nonempty".into()));
    }

    let (operating, source) = match &cmd.checkpoint {
        Some(path) => {
            let net = Network::load(path)?;
            let data = data_config(&ctx.file.data, &cmd.data);
            let (_, test_set) = load_subsets(&ctx.data_dir, &data)?;
            let mean = mean_hidden_input(&net, &test_set)?;
            let mean = if cmd.uniform {
                let m = mean.total() / mean.len() as f64;
                PowerVector::new(vec![m; mean.len()])?
            } else {
                mean
            };
            (mean, json!({ "checkpoint": path, "uniform": cmd.uniform, "data": data }))
        }
        None => (
            PowerVector::new(vec![c.operating_power; c.layer_neurons])?,
            json!({ "operating_power": c.operating_power }),
        ),
    };
    let reports = power_sweep(&power_cfg, c.g_ss_db, c.p_sat, &c.channels_list, &operating)?;

    let fp = fingerprint(&(
        "power",
        &power_cfg,
        &c.channels_list,
        c.g_ss_db,
        c.p_sat,
        operating.as_slice(),
    ))?;
    let dir = run_dir(ctx, &fp)?;
    export_power(&reports, &dir.join("power.csv"), ExportFormat::Csv)?;
    export_power(&reports, &dir.join("power.json"), ExportFormat::Json)?;
    write_json_atomic(
        &dir.join("manifest.json"),
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": "power",
            "fingerprint": fp,
            "power": power_cfg,
            "channels_list": c.channels_list,
            "g_ss_db": c.g_ss_db,
            "p_sat": c.p_sat,
            "operating_point": source,
            "mean_operating_power": operating.total() / operating.len() as f64,
        }),
    )?;
    write_meta(&dir, "power", started, json!({}))?;

    println!(
        "{:>8} {:>7} {:>12} {:>12} {:>12} {:>9}",
        "channels", "devices", "soa_power", "laser_power", "total_power", "soa_share"
    );
    for r in &reports {
        println!(
            "{:>8} {:>7} {:>12.6} {:>12.6} {:>12.6} {:>9.4}",
            r.channels, r.devices, r.soa_power, r.laser_power, r.total_power, r.soa_share
        );
    }
    println!("{}", dir.display());
    Ok(0)
}

fn describe(name: &str, data: &Dataset) {
    let counts = data.class_counts();
    println!(
        "{name}: {} samples, {} inputs, mean input power {:.5}",
        data.len(),
        data.input_dim(),
        data.mean_input_power()
    );
    println!(
        "  class counts: {}",
        counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
    );
}

fn cmd_inspect(ctx: &Ctx, cmd: &InspectCmd) -> Result<u8> {
    let data = data_config(&ctx.file.data, &cmd.data);
    match locate(&ctx.data_dir, data.dataset)? {
        DataSource::Split { train, test } => {
            println!("{} train: {} / {}", data.dataset.as_str(), train.0.display(), train.1.display());
            println!("{} test:  {} / {}", data.dataset.as_str(), test.0.display(), test.1.display());
        }
        DataSource::Pooled { pool } => {
            let full = load_idx(&pool.0, &pool.1)?.with_input_scale(data.input_scale)?;
            println!("{} pool: {} / {}", data.dataset.as_str(), pool.0.display(), pool.1.display());
            describe("pool", &full);
        }
    }
    let (train_set, test_set) = load_subsets(&ctx.data_dir, &data)?;
    describe("train subset", &train_set);
    describe("test subset", &test_set);
    Ok(0)
}
