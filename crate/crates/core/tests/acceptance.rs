//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to the
//! real stdout (bypassing capture) and then asserts. Tests are serialized so
//! the runtime limits are measured on an otherwise idle process.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zonefuse::channel::{rssi_log_likelihood, AntennaPattern, ChannelParams};
use zonefuse::classify::{DecisionTree, KnnModel, KnnParams, SvmModel, SvmParams};
use zonefuse::eval::{prepare_runs, Calibration, CellKey, PreparedRun, DEFAULT_MEMORIES};
use zonefuse::features::{fit_scaler, yeo_johnson};
use zonefuse::pf::{self, position_rmse, ParticleSet};
use zonefuse::synth::{default_scenario, sensor_model, simulate_trajectory, synthesize_rssi};
use zonefuse::{
    generate_dataset, run_sweep, Algorithm, CarState, FeatureSet, FilterConfig, Frame, Matrix, Resampling,
    ScalerKind, Sensor, SensorArray, SensorModel, Source, SweepGrid, SweepOptions, SweepReport,
    ZoneLabel,
};

const DATASET_SEED: u64 = 7;
const FULL_GRID_LIMIT_S: f64 = 600.0;
const RESTRICTED_GRID_LIMIT_S: f64 = 60.0;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {id:>2} {:<4} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

struct Prepared {
    runs: Vec<PreparedRun>,
    seconds: f64,
}

fn prepared() -> &'static Prepared {
    static DATA: OnceLock<Prepared> = OnceLock::new();
    DATA.get_or_init(|| {
        let start = Instant::now();
        let scenario = default_scenario();
        let ds = generate_dataset(&scenario, DATASET_SEED).unwrap();
        let runs = prepare_runs(&ds.runs, &scenario, Calibration::None).unwrap();
        Prepared {
            runs,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

struct Timed {
    report: SweepReport,
    seconds: f64,
}

fn full_grid() -> &'static Timed {
    static FULL: OnceLock<Timed> = OnceLock::new();
    FULL.get_or_init(|| {
        let data = prepared();
        let start = Instant::now();
        let report = run_sweep(&data.runs, &SweepGrid::default(), &SweepOptions::default()).unwrap();
        Timed {
            report,
            seconds: data.seconds + start.elapsed().as_secs_f64(),
        }
    })
}

fn restricted_grid() -> SweepGrid {
    SweepGrid {
        classifiers: vec![Algorithm::Svm],
        scalers: vec![ScalerKind::Standard],
        feature_sets: FeatureSet::ALL.to_vec(),
        memories: DEFAULT_MEMORIES.to_vec(),
        sources: vec![Source::FilterEstimates],
    }
}

// Independent forward model: received power in milliwatts, then back to dBm.
fn band_gain_db(pattern: &AntennaPattern, alpha: f64) -> f64 {
    let bands = pattern.bands();
    bands
        .iter()
        .find(|b| alpha < b.angle_max_rad)
        .unwrap_or(bands.last().unwrap())
        .gain_db
}

fn linear_mean_dbm(p: &[f64; 3], sensor: &Sensor, channel: &ChannelParams) -> f64 {
    let (dx, dy, dz) = (p[0] - sensor.position[0], p[1] - sensor.position[1], p[2] - sensor.position[2]);
    let lateral = (dy * dy + dz * dz).sqrt();
    let d = (dx * dx + lateral * lateral).sqrt();
    let alpha = lateral.atan2(dx);
    let mw = 10f64.powf(sensor.ref_power_dbm / 10.0)
        * d.powf(-channel.pathloss_exponent)
        * 10f64.powf(band_gain_db(&channel.pattern, alpha) / 10.0);
    let floor_mw = 10f64.powf(sensor.floor_dbm / 10.0);
    10.0 * mw.max(floor_mw).log10()
}

fn density(x: f64, mean: f64, variance: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * variance)).exp() / (2.0 * PI * variance).sqrt()
}

#[test]
fn c01_likelihood_matches_linear_domain_evaluation() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let channel = ChannelParams::default();
    let mut worst = 0.0f64;
    for i in 0..100 {
        let sensor = Sensor {
            id: i,
            position: [rng.random_range(-15.0..15.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0)],
            ref_power_dbm: rng.random_range(-60.0..-30.0),
            floor_dbm: rng.random_range(-100.0..-70.0),
        };
        let p = [rng.random_range(-20.0..20.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0)];
        let rx: f64 = rng.random_range(-100.0..-30.0);
        let got = rssi_log_likelihood(rx, &p, &sensor, &channel).unwrap().exp();
        let want = density(rx, linear_mean_dbm(&p, &sensor, &channel), channel.likelihood_variance);
        worst = worst.max(((got - want) / want).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && secs < 1.0;
    report(1, "likelihood oracle", pass, &format!("max relative error {worst:.2e}, {secs:.3} s"));
    assert!(pass);
}

#[test]
fn c02_fusion_weights_match_brute_force_product() {
    let _g = serial();
    let sensors = vec![
        Sensor {
            id: 1,
            position: [-3.0, 1.5, 0.0],
            ref_power_dbm: -45.0,
            floor_dbm: -80.0,
        },
        Sensor {
            id: 2,
            position: [4.0, -1.5, 0.5],
            ref_power_dbm: -50.0,
            floor_dbm: -80.0,
        },
    ];
    let model = SensorModel::new(
        SensorArray::new(sensors.clone()).unwrap(),
        ChannelParams::default(),
        Default::default(),
    );
    let states = vec![CarState::new(-5.0, 1.0), CarState::new(0.5, 0.0), CarState::new(6.0, -1.0)];
    let prior = [0.2, 0.5, 0.3];
    let mut set = ParticleSet::from_parts(states.clone(), prior.iter().map(|w: &f64| w.ln()).collect(), 0);
    let mut frame = Frame::new(0);
    frame.readings.insert(1, Some(-58.0));
    frame.readings.insert(2, Some(-63.5));
    pf::update(&mut set, &frame, &model).unwrap();

    let raw: Vec<f64> = states
        .iter()
        .zip(prior)
        .map(|(s, w)| {
            let p = [s.p_x, 0.0, 0.0];
            w * density(-58.0, linear_mean_dbm(&p, &sensors[0], &model.channel), 9.0)
                * density(-63.5, linear_mean_dbm(&p, &sensors[1], &model.channel), 9.0)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let worst = set
        .weights()
        .iter()
        .zip(&raw)
        .map(|(got, r)| (got - r / total).abs())
        .fold(0.0, f64::max);
    let pass = worst <= 1e-12;
    report(2, "fusion oracle", pass, &format!("max weight difference {worst:.2e}"));
    assert!(pass);
}

struct FilterRun {
    directional: f64,
    omni: f64,
}

fn filter_runs() -> &'static (Vec<FilterRun>, f64) {
    static RUNS: OnceLock<(Vec<FilterRun>, f64)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let mut scenario = default_scenario();
        scenario.trajectory.n_round_trips = 2;
        let mut omni = scenario.clone();
        omni.channel.pattern = AntennaPattern::omnidirectional();
        let out = (0..20u64)
            .map(|seed| {
                let truth =
                    simulate_trajectory(&scenario.trajectory, &scenario.zone, scenario.tick_interval_s, seed).unwrap();
                let series = synthesize_rssi(
                    &truth,
                    &scenario.sensors,
                    &scenario.channel,
                    &scenario.transmitter,
                    &scenario.noise,
                    seed + 100,
                )
                .unwrap();
                let config = scenario.filter.clone().with_seed(seed);
                let d = pf::run(&series, &sensor_model(&scenario), &config).unwrap();
                let o = pf::run(&series, &sensor_model(&omni), &config).unwrap();
                FilterRun {
                    directional: position_rmse(&d, &truth, 20).unwrap(),
                    omni: position_rmse(&o, &truth, 20).unwrap(),
                }
            })
            .collect();
        (out, start.elapsed().as_secs_f64())
    })
}

#[test]
fn c03_filter_accuracy_on_default_scenario() {
    let _g = serial();
    let (runs, secs) = filter_runs();
    let mut rmse: Vec<f64> = runs.iter().map(|r| r.directional).collect();
    rmse.sort_by(f64::total_cmp);
    let median = (rmse[9] + rmse[10]) / 2.0;
    // Half the time covers the omnidirectional companion runs used by criterion 4.
    let own = secs / 2.0;
    let pass = median <= 1.5 && own < 30.0;
    report(3, "filter accuracy", pass, &format!("median rmse {median:.3} m over 20 seeds, {own:.1} s"));
    assert!(pass);
}

#[test]
fn c04_directional_pattern_beats_omnidirectional() {
    let _g = serial();
    let (runs, _) = filter_runs();
    let wins = runs.iter().filter(|r| r.directional < r.omni).count();
    let pass = wins >= 18;
    report(4, "directional vs omni", pass, &format!("directional better on {wins}/20 seeds"));
    assert!(pass);
}

// Survival function of chi-square with four degrees of freedom.
fn chi2_sf_4(x: f64) -> f64 {
    (-x / 2.0).exp() * (1.0 + x / 2.0)
}

#[test]
fn c05_multinomial_resampling_is_unbiased() {
    let _g = serial();
    let w: [f64; 5] = [0.05, 0.1, 0.15, 0.3, 0.4];
    let n = w.len();
    let config = FilterConfig {
        n_particles: n,
        resampling: Resampling::Multinomial,
        ..FilterConfig::default()
    };
    let repeats = 10_000;
    let mut set = ParticleSet::from_parts(
        (0..n).map(|i| CarState::new(i as f64, 0.0)).collect(),
        vec![0.0; n],
        42,
    );
    let mut counts = [0u64; 5];
    for _ in 0..repeats {
        set.states = (0..n).map(|i| CarState::new(i as f64, 0.0)).collect();
        set.log_weights = w.iter().map(|x| x.ln()).collect();
        pf::resample(&mut set, &config);
        for s in &set.states {
            counts[s.p_x as usize] += 1;
        }
    }
    let draws = (repeats * n) as f64;
    let mut max_z = 0.0f64;
    let mut chi2 = 0.0;
    for i in 0..n {
        let expected = draws * w[i];
        let se = (draws * w[i] * (1.0 - w[i])).sqrt();
        max_z = max_z.max((counts[i] as f64 - expected).abs() / se);
        chi2 += (counts[i] as f64 - expected).powi(2) / expected;
    }
    let p = chi2_sf_4(chi2);
    let pass = max_z < 4.0 && p > 0.001;
    report(5, "resampling unbiasedness", pass, &format!("max |z| {max_z:.2}, chi-square p {p:.3}"));
    assert!(pass);
}

fn best_acc(report: &SweepReport, c: Algorithm, s: ScalerKind, f: FeatureSet, src: Source) -> (f64, usize) {
    let b = report.best_for(c, s, f, src).expect("cell present");
    (b.mean_acc, b.memory)
}

#[test]
fn c06_feature_set_ordering_for_svm_standard() {
    let _g = serial();
    let data = prepared();
    let start = Instant::now();
    let restricted = run_sweep(&data.runs, &restricted_grid(), &SweepOptions::default()).unwrap();
    let restricted_s = data.seconds + start.elapsed().as_secs_f64();
    let full = full_grid();

    let acc = |f| best_acc(&restricted, Algorithm::Svm, ScalerKind::Standard, f, Source::FilterEstimates);
    let (pos, pos_var, pos_var_vel) = (acc(FeatureSet::Pos), acc(FeatureSet::PosVar), acc(FeatureSet::PosVarVel));
    let ordered = pos.0 < pos_var.0 && pos_var.0 <= pos_var_vel.0 + 0.005;
    let consistent = restricted.cells.iter().all(|c| full.report.cell(&c.key) == Some(c));
    let pass = ordered && consistent && full.seconds < FULL_GRID_LIMIT_S && restricted_s < RESTRICTED_GRID_LIMIT_S;
    report(
        6,
        "feature-set ordering",
        pass,
        &format!(
            "pos {:.4} (N={}), pos_var {:.4} (N={}), pos_var_vel {:.4} (N={}); full grid {:.0} s, restricted {:.1} s{}",
            pos.0,
            pos.1,
            pos_var.0,
            pos_var.1,
            pos_var_vel.0,
            pos_var_vel.1,
            full.seconds,
            restricted_s,
            if consistent { "" } else { "; restricted cells differ from full grid" }
        ),
    );
    assert!(pass);
}

#[test]
fn c07_filtered_features_beat_raw_rssi() {
    let _g = serial();
    let full = &full_grid().report;
    let mut pass = true;
    let mut detail = Vec::new();
    for c in Algorithm::ALL {
        let best = |src: Source, sets: &[FeatureSet]| {
            full.best
                .iter()
                .filter(|b| b.classifier == c && b.source == src && sets.contains(&b.features))
                .max_by(|a, b| a.mean_acc.total_cmp(&b.mean_acc))
                .expect("cells present")
        };
        let filtered = best(Source::FilterEstimates, &FeatureSet::ALL);
        let raw = best(Source::RawRssi, &FeatureSet::ALL);
        pass &= filtered.mean_acc >= raw.mean_acc;
        detail.push(format!(
            "{} filtered {:.4} ({}/{}/N={}) raw {:.4} ({}/N={})",
            c.name(),
            filtered.mean_acc,
            filtered.scaler.name(),
            filtered.features.name(),
            filtered.memory,
            raw.mean_acc,
            raw.scaler.name(),
            raw.memory
        ));
    }
    report(7, "filtered vs raw", pass, &detail.join("; "));
    assert!(pass);
}

#[test]
fn c08_longer_memory_improves_transition_recall() {
    let _g = serial();
    let full = &full_grid().report;
    let mut pass = true;
    let mut detail = Vec::new();
    for scaler in [ScalerKind::Standard, ScalerKind::Power] {
        for features in FeatureSet::ALL {
            for source in [Source::FilterEstimates, Source::RawRssi] {
                if source == Source::RawRssi && features != FeatureSet::Pos {
                    continue;
                }
                let recall = |memory| {
                    let key = CellKey {
                        classifier: Algorithm::Svm,
                        scaler,
                        features,
                        memory,
                        source,
                    };
                    full.cell(&key).and_then(|c| c.recall(ZoneLabel::Transition)).unwrap_or(f64::NAN)
                };
                let (r3, r16) = (recall(3), recall(16));
                let ok = r16 > r3;
                pass &= ok;
                let what = if source == Source::RawRssi { "raw" } else { features.name() };
                detail.push(format!("{}/{what} {r3:.3}->{r16:.3}{}", scaler.name(), if ok { "" } else { "!" }));
            }
        }
    }
    report(8, "memory length", pass, &format!("transition recall N=3->16: {}", detail.join(", ")));
    assert!(pass);
}

#[test]
fn c09_scaler_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows = Matrix::new(
        500,
        3,
        (0..1500)
            .map(|i| match i % 3 {
                0 => rng.random_range(-5.0..5.0),
                1 => 1e3 + rng.random_range(0.0..1.0f64).powi(3) * 50.0,
                _ => rng.random_range(0.0..1.0f64).ln(),
            })
            .collect(),
    );
    let scaled = fit_scaler(ScalerKind::Standard, &rows).unwrap().apply(&rows).unwrap();
    let mut worst = 0.0f64;
    for j in 0..3 {
        let col = scaled.column(j);
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        worst = worst.max(mean.abs()).max((std - 1.0).abs());
    }
    let grid: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.025).collect();
    let identity = grid.iter().all(|&x| (yeo_johnson(x, 1.0) - x).abs() <= 1e-12 * x.abs().max(1.0));
    let monotone = [-2.0, 0.0, 1.0, 2.0, 4.0]
        .iter()
        .all(|&l| grid.windows(2).all(|w| yeo_johnson(w[0], l) < yeo_johnson(w[1], l)));
    let pass = worst <= 1e-9 && identity && monotone;
    report(
        9,
        "scaler oracles",
        pass,
        &format!("standard moments off by {worst:.1e}, identity {identity}, monotone {monotone}"),
    );
    assert!(pass);
}

#[test]
fn c10_classifier_sanity() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 300;
    let rows = Matrix::new(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect());
    let labels: Vec<ZoneLabel> = (0..n).map(|_| ZoneLabel::from_index(rng.random_range(0..3)).unwrap()).collect();
    let acc = |pred: &[ZoneLabel], truth: &[ZoneLabel]| {
        pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
    };

    let knn = KnnModel::fit(&rows, &labels, &KnnParams { k: 1 }).unwrap();
    let knn_acc = acc(&knn.predict(&rows), &labels);
    let tree = DecisionTree::fit(&rows, &labels, 3);
    let tree_acc = acc(&rows.iter_rows().map(|r| tree.predict_one(r)).collect::<Vec<_>>(), &labels);

    let mut blob = Vec::new();
    let mut blob_labels = Vec::new();
    for i in 0..120 {
        let class = i % 3;
        let (cx, cy) = [(0.0, 0.0), (6.0, 0.0), (0.0, 6.0)][class];
        blob.push(cx + rng.random_range(-1.0..1.0));
        blob.push(cy + rng.random_range(-1.0..1.0));
        blob_labels.push(ZoneLabel::from_index(class).unwrap());
    }
    let blob = Matrix::new(120, 2, blob);
    let params = SvmParams::default();
    let svm = SvmModel::fit(&blob, &blob_labels, &params).unwrap();
    let svm_acc = acc(&svm.predict(&blob), &blob_labels);
    let dual_ok = svm.machines.iter().all(|m| {
        m.converged
            && m.coef.iter().all(|a| a.abs() <= params.c + 1e-6)
            && m.coef.iter().sum::<f64>().abs() <= 1e-6
    });

    let pass = knn_acc == 1.0 && tree_acc == 1.0 && svm_acc == 1.0 && dual_ok;
    report(
        10,
        "classifier sanity",
        pass,
        &format!("knn {knn_acc}, tree {tree_acc}, svm {svm_acc}, dual constraints {dual_ok}"),
    );
    assert!(pass);
}

#[test]
fn c11_pipeline_is_deterministic_across_thread_counts() {
    let _g = serial();
    let scenario = default_scenario();
    let grid = SweepGrid {
        classifiers: Algorithm::ALL.to_vec(),
        scalers: vec![ScalerKind::Power],
        feature_sets: vec![FeatureSet::PosVarVel],
        memories: vec![1, 4],
        sources: vec![Source::FilterEstimates, Source::RawRssi],
    };
    let pipeline = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let ds = generate_dataset(&scenario, 3).unwrap();
            let runs = prepare_runs(&ds.runs, &scenario, Calibration::PerRun).unwrap();
            let sweep = run_sweep(&runs, &grid, &SweepOptions::default()).unwrap();
            let mut csv = Vec::new();
            sweep.write_csv(&mut csv).unwrap();
            (ds, runs, sweep.to_json(), csv)
        })
    };
    let a = pipeline(1);
    let b = pipeline(1);
    let c = pipeline(3);
    let same = |x: &(zonefuse::Dataset, Vec<PreparedRun>, String, Vec<u8>)| [x.0 == a.0, x.1 == a.1, x.2 == a.2, x.3 == a.3];
    let (rerun, threaded) = (same(&b), same(&c));
    let pass = rerun.iter().chain(&threaded).all(|&s| s);
    report(
        11,
        "determinism",
        pass,
        &format!("dataset/estimates/report/csv identical on rerun {rerun:?}, with 3 threads {threaded:?}"),
    );
    assert!(pass);
}
