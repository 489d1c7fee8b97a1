use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use zonefuse::channel::{calibrate, AntennaPattern};
use zonefuse::eval::{
    accuracy, prepare_runs, prepare_series, recall, Calibration, CellKey, ScaleOrder, SweepGrid, SweepOptions,
    TrainedPipeline,
};
use zonefuse::features::Spread;
use zonefuse::model::{load_ground_truth, load_scenario, read_measurements, GroundTruthTrack, MeasurementSeries};
use zonefuse::pf::{self, position_rmse};
use zonefuse::synth::{default_scenario, generate_dataset, Dataset};
use zonefuse::{Scenario, ScalerKind, ZoneLabel};

use crate::manifest::{write_atomic, RunManifest};
use crate::{
    CalibrationArg, Cli, Command, EvaluateArgs, GridArgs, LocalizeArgs, PatternArg, PipelineArgs, PredictArgs,
    ScenarioArg, SimulateArgs, TrainArgs,
};

/// 2 for IO problems, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|cause| {
        cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<zonefuse::Error>().is_some_and(|e| e.is_io())
    });
    if io {
        2
    } else {
        1
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Localize(a) => localize(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Predict(a) => predict(cli, a),
    }
}

fn scenario_of(arg: &ScenarioArg) -> Result<(Scenario, Option<PathBuf>)> {
    match &arg.scenario {
        Some(path) => Ok((load_scenario(path)?, Some(path.clone()))),
        None => Ok((default_scenario(), None)),
    }
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// `estimates.csv` → `estimates.csv.manifest.json`.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn load_series(path: &Path, scenario: &Scenario) -> Result<MeasurementSeries> {
    let file = File::open(path).map_err(|e| zonefuse::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(read_measurements(file, &scenario.sensors, scenario.tick_interval_s)?)
}

fn load_truth(path: &Path, scenario: &Scenario, series: &MeasurementSeries) -> Result<GroundTruthTrack> {
    let mut truth = load_ground_truth(path, &scenario.zone)?;
    truth.tick_interval_s = scenario.tick_interval_s;
    truth.check_aligned(series)?;
    Ok(truth)
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let (scenario, scenario_path) = scenario_of(&args.scenario)?;
    let seed = cli.seed.unwrap_or(0);
    let dir = out_path(cli, "dataset");
    let mut manifest = RunManifest::new("simulate", seed, cli.jobs, &scenario);
    manifest.inputs.extend(scenario_path);

    let dataset = manifest.time("generate", || generate_dataset(&scenario, seed))?;
    let written = manifest.time("write", || dataset.save(&dir))?;
    for run in &dataset.runs {
        println!(
            "run {}: {} ticks, {} round trips",
            run.id,
            run.measurements.frames.len(),
            dataset.manifest.runs[run.id].round_trips
        );
    }
    manifest.outputs = written;
    manifest.write(&dir.join("run_manifest.json"))?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn rmse(errors: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = errors.fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    (n > 0).then(|| (sum / n as f64).sqrt())
}

fn localize(cli: &Cli, args: &LocalizeArgs) -> Result<()> {
    let (mut scenario, scenario_path) = scenario_of(&args.scenario)?;
    if args.pattern == PatternArg::Omni {
        scenario.channel.pattern = AntennaPattern::omnidirectional();
    }
    let seed = cli.seed.unwrap_or(scenario.filter.seed);
    let out = out_path(cli, "estimates.csv");
    let mut manifest = RunManifest::new("localize", seed, cli.jobs, &scenario);
    manifest.inputs.extend(scenario_path);
    manifest.inputs.push(args.measurements.clone());

    let series = load_series(&args.measurements, &scenario)?;
    let truth = match &args.truth {
        Some(path) => {
            manifest.inputs.push(path.clone());
            Some(load_truth(path, &scenario, &series)?)
        }
        None => None,
    };
    let array = if args.calibrate {
        calibrate(&series, &scenario.sensors, scenario.channel.floor_percentile)?
    } else {
        scenario.sensors.clone()
    };
    let model = pf::SensorModel::new(array, scenario.channel.clone(), scenario.transmitter);
    let config = scenario.filter.clone().with_seed(seed);
    let track = manifest.time("filter", || pf::run(&series, &model, &config))?;
    track.save_csv(&out)?;
    manifest.outputs.push(out.clone());

    let degenerate = track.estimates.iter().filter(|e| e.degenerate).count();
    if degenerate > 0 {
        log::warn!("{degenerate} ticks fell back to uniform weights");
    }
    if let Some(truth) = truth {
        let total = position_rmse(&track, &truth, args.burn_in)?;
        println!("position rmse {total:.3} m (after {} ticks)", args.burn_in);
        manifest.note("position_rmse_m", total);
        let pairs: Vec<_> = track
            .estimates
            .iter()
            .zip(&truth.samples)
            .skip(args.burn_in)
            .collect();
        for label in ZoneLabel::ALL {
            let seg = rmse(
                pairs
                    .iter()
                    .filter(|(_, t)| t.label == label)
                    .map(|(e, t)| e.mean.p_x - t.state.p_x),
            );
            if let Some(v) = seg {
                let n = pairs.iter().filter(|(_, t)| t.label == label).count();
                println!("  {:<10} {n:>6} ticks  rmse {v:.3} m", label_name(label));
                manifest.note(&format!("position_rmse_{}_m", label_name(label)), v);
            }
        }
        let tick = scenario.tick_interval_s;
        if let Some(v) = rmse(pairs.iter().map(|(e, t)| (e.mean.v_x - t.state.v_x) / tick)) {
            println!("velocity rmse {v:.3} m/s");
            manifest.note("velocity_rmse_mps", v);
        }
    }
    manifest.write(&sidecar(&out))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn label_name(label: ZoneLabel) -> &'static str {
    match label {
        ZoneLabel::Outside => "outside",
        ZoneLabel::Transition => "transition",
        ZoneLabel::Inside => "inside",
    }
}

fn calibration_of(arg: CalibrationArg) -> Calibration {
    match arg {
        CalibrationArg::None => Calibration::None,
        CalibrationArg::PerRun => Calibration::PerRun,
        CalibrationArg::Global => Calibration::Global,
    }
}

fn sweep_options(cli: &Cli, p: &PipelineArgs) -> Result<SweepOptions> {
    if p.train_stride < 1 {
        bail!("--train-stride must be >= 1");
    }
    Ok(SweepOptions {
        master_seed: cli.seed.unwrap_or(0),
        train_stride: p.train_stride,
        scale_order: if p.scale_after_window {
            ScaleOrder::AfterWindow
        } else {
            ScaleOrder::BeforeWindow
        },
        spread: if p.std_dev { Spread::StdDev } else { Spread::Variance },
        ..SweepOptions::default()
    })
}

fn grid_of(args: &GridArgs) -> SweepGrid {
    let mut grid = SweepGrid::default();
    if !args.classifier.is_empty() {
        grid.classifiers = args.classifier.clone();
    }
    if !args.scaler.is_empty() {
        grid.scalers = args.scaler.clone();
    } else if args.robust {
        grid.scalers.push(ScalerKind::Robust);
    }
    if !args.features.is_empty() {
        grid.feature_sets = args.features.clone();
    }
    if !args.memory.is_empty() {
        grid.memories = args.memory.clone();
    }
    if !args.source.is_empty() {
        grid.sources = args.source.clone();
    }
    grid
}

fn load_dataset(dir: &Path, scenario: &Scenario) -> Result<Dataset> {
    let dataset = Dataset::load(dir, scenario)?;
    if dataset.manifest.scenario_hash != scenario.hash() {
        log::warn!("dataset in {} was generated from a different scenario", dir.display());
    }
    Ok(dataset)
}

fn evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let (scenario, scenario_path) = scenario_of(&args.scenario)?;
    let mut opts = sweep_options(cli, &args.pipeline)?;
    opts.keep_predictions = args.dump_predictions;
    let grid = grid_of(&args.grid);
    let dir = out_path(cli, "report");
    let mut manifest = RunManifest::new("evaluate", opts.master_seed, cli.jobs, &scenario);
    manifest.inputs.extend(scenario_path);
    manifest.inputs.push(args.dataset.clone());

    let dataset = load_dataset(&args.dataset, &scenario)?;
    let runs = manifest.time("filter", || {
        prepare_runs(&dataset.runs, &scenario, calibration_of(args.pipeline.calibrate))
    })?;
    let n_cells = grid.cells().len();
    log::info!("sweeping {n_cells} cells");
    let report = manifest.time("sweep", || zonefuse::run_sweep(&runs, &grid, &opts))?;

    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut csv_bytes = Vec::new();
    report.write_csv(&mut csv_bytes)?;
    let csv_path = dir.join("sweep.csv");
    write_atomic(&csv_path, &csv_bytes)?;
    let json_path = dir.join("sweep.json");
    write_atomic(&json_path, report.to_json().as_bytes())?;
    manifest.outputs.extend([csv_path, json_path]);

    if args.dump_predictions {
        let pred_dir = dir.join("predictions");
        std::fs::create_dir_all(&pred_dir).with_context(|| format!("creating {}", pred_dir.display()))?;
        for cell in report.cells.iter().filter(|c| c.failure.is_none()) {
            let path = pred_dir.join(format!("{}.csv", cell.key.label().replace('/', "_")));
            dump_predictions(&path, cell, &runs)?;
            manifest.outputs.push(path);
        }
    }

    println!("{:<4} {:<9} {:<12} {:<9} {:>4} {:>8}", "clf", "scaler", "features", "source", "N*", "acc");
    for b in &report.best {
        println!(
            "{:<4} {:<9} {:<12} {:<9} {:>4} {:>8.4}",
            b.classifier.name(),
            b.scaler.name(),
            b.features.name(),
            b.source.name(),
            b.memory,
            b.mean_acc
        );
    }
    manifest.note("cells", n_cells);
    let failures = report.failures();
    manifest.note("failed_cells", failures.len());
    manifest.write(&dir.join("run_manifest.json"))?;
    println!("wrote {}", dir.display());

    if !failures.is_empty() {
        for f in &failures {
            eprintln!("failed: {}: {}", f.key.label(), f.failure.as_deref().unwrap_or(""));
        }
        return Err(anyhow!("{} of {n_cells} cells failed", failures.len()));
    }
    Ok(())
}

fn dump_predictions(path: &Path, cell: &zonefuse::eval::CellResult, runs: &[zonefuse::eval::PreparedRun]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["train", "test", "tick", "label", "predicted"])?;
    for e in &cell.evaluations {
        let Some(pred) = &e.predictions else { continue };
        let run = runs.iter().find(|r| r.id == e.test).expect("evaluated run exists");
        let train = e.train.map(|i| i.to_string()).join("-");
        for ((est, truth), p) in run.estimates.estimates.iter().zip(&run.labels).zip(pred) {
            w.write_record([
                train.clone(),
                e.test.to_string(),
                est.tick.to_string(),
                truth.index().to_string(),
                p.index().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let (scenario, scenario_path) = scenario_of(&args.scenario)?;
    let opts = sweep_options(cli, &args.pipeline)?;
    let out = out_path(cli, "model.json");
    let mut manifest = RunManifest::new("train", opts.master_seed, cli.jobs, &scenario);
    manifest.inputs.extend(scenario_path);
    manifest.inputs.push(args.dataset.clone());

    let dataset = load_dataset(&args.dataset, &scenario)?;
    for id in &args.runs {
        if !dataset.runs.iter().any(|r| r.id == *id) {
            bail!("no run {id} in {}", args.dataset.display());
        }
    }
    let chosen: Vec<_> = dataset
        .runs
        .iter()
        .filter(|r| args.runs.contains(&r.id))
        .cloned()
        .collect();
    let runs = manifest.time("filter", || {
        prepare_runs(&chosen, &scenario, calibration_of(args.pipeline.calibrate))
    })?;
    let key = CellKey {
        classifier: args.classifier,
        scaler: args.scaler,
        features: args.features,
        memory: args.memory,
        source: args.source,
    };
    let refs: Vec<_> = runs.iter().collect();
    let pipeline = manifest.time("train", || TrainedPipeline::fit(&refs, key, &opts, opts.master_seed))?;
    write_atomic(&out, pipeline.to_json().as_bytes())?;
    manifest.outputs.push(out.clone());
    manifest.write(&sidecar(&out))?;
    println!("trained {} on runs {:?}; wrote {}", key.label(), args.runs, out.display());
    Ok(())
}

fn predict(cli: &Cli, args: &PredictArgs) -> Result<()> {
    let (scenario, scenario_path) = scenario_of(&args.scenario)?;
    let seed = cli.seed.unwrap_or(scenario.filter.seed);
    let out = out_path(cli, "predictions.csv");
    let mut manifest = RunManifest::new("predict", seed, cli.jobs, &scenario);
    manifest.inputs.extend(scenario_path);
    manifest.inputs.extend([args.model.clone(), args.measurements.clone()]);

    let text = std::fs::read_to_string(&args.model).with_context(|| format!("reading {}", args.model.display()))?;
    let pipeline = TrainedPipeline::from_json(&text)?;
    let series = load_series(&args.measurements, &scenario)?;
    let truth = match &args.truth {
        Some(path) => {
            manifest.inputs.push(path.clone());
            Some(load_truth(path, &scenario, &series)?)
        }
        None => None,
    };
    let run = manifest.time("filter", || {
        prepare_series(0, &series, truth.as_ref(), &scenario, scenario.sensors.clone(), seed)
    })?;
    let labels = manifest.time("predict", || pipeline.predict(&run))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tick", "label"])?;
    for (frame, label) in series.frames.iter().zip(&labels) {
        w.write_record([frame.tick.to_string(), label.index().to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("{e}"))?;
    write_atomic(&out, &bytes)?;
    manifest.outputs.push(out.clone());

    if truth.is_some() {
        let acc = accuracy(&labels, &run.labels)?;
        let mut confusion = [[0u64; 3]; 3];
        for (p, t) in labels.iter().zip(&run.labels) {
            confusion[t.index()][p.index()] += 1;
        }
        println!("accuracy {acc:.4}");
        manifest.note("accuracy", acc);
        for label in ZoneLabel::ALL {
            if let Some(r) = recall(&confusion, label) {
                println!("  {:<10} recall {r:.4}", label_name(label));
            }
        }
    }
    manifest.write(&sidecar(&out))?;
    println!("wrote {}", out.display());
    Ok(())
}
