use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rvafm::checkpoint::{encode, load_checkpoint, peek_manifest, save_checkpoint};
use rvafm::config::RunConfig;
use rvafm::data::{export_sample, generate_split, Split};
use rvafm::fusion::{fuse_rvafm, verify_equivalence, FusionCounts};
use rvafm::model::ModelParams;
use rvafm::rvafm::{Ablation, Mode};
use rvafm::train::{evaluate, prepare, train, EpochRecord, Prepared, TrainOutcome};
use rvafm::{DType, Real};

use crate::reports::{write_csv, write_json, BenchReport, EvalReport, FuseReport, SweepRow, TrainReport};
use crate::{Cli, Command, Failure, SweepAxis};

const RUN_CONFIG: &str = "run_config.toml";

pub fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train => train_cmd(cli),
        Command::Fuse { checkpoint, trials } => fuse_cmd(cli, checkpoint.as_deref(), *trials),
        Command::Eval { checkpoint, split } => eval_cmd(cli, checkpoint.as_deref(), (*split).into()),
        Command::Bench { checkpoint, rounds, images } => bench_cmd(cli, checkpoint.as_deref(), *rounds, *images),
        Command::Sweep { axis, values } => sweep_cmd(cli, *axis, values),
        Command::GenData => gen_data_cmd(cli),
    }
}

/// The run configuration: `--config` if given, else the one saved next to
/// `beside` by `train`, else the defaults; command-line overrides last.
fn load_config(cli: &Cli, beside: Option<&Path>) -> Result<RunConfig, Failure> {
    let saved = beside.map(|d| d.join(RUN_CONFIG)).filter(|p| p.is_file());
    let mut cfg = match (&cli.config, saved) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) => RunConfig::load(&p)?,
        (None, None) => RunConfig::default(),
    };
    cfg.apply(&cli.overrides())?;
    Ok(cfg)
}

fn guard(paths: &[&Path], force: bool) -> Result<(), Failure> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Failure::Usage(format!("{} already exists; pass --force to overwrite", p.display()))),
        None => Ok(()),
    }
}

fn checkpoint_path(cli: &Cli, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| cli.out.join("model.ckpt"), Path::to_path_buf)
}

fn split_size(cfg: &RunConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.data.train_size,
        Split::Val => cfg.data.val_size,
        Split::Test => cfg.data.test_size,
    }
}

fn load_split<T: Real>(
    cfg: &RunConfig,
    model: &ModelParams<T>,
    split: Split,
    limit: Option<usize>,
) -> Result<Vec<Prepared<T>>, Failure> {
    if cfg.data.synth.alphabet() != model.alphabet {
        return Err(Failure::Usage("the data configuration's alphabet differs from the model's".into()));
    }
    let size = limit.map_or(split_size(cfg, split), |l| l.min(split_size(cfg, split)));
    let samples = generate_split(&cfg.data.synth, split, size)?;
    Ok(prepare(&samples, &model.alphabet, &cfg.preprocess, model.downsampling())?)
}

struct Fitted<T> {
    model: ModelParams<T>,
    curve: Vec<EpochRecord>,
    outcome: Option<TrainOutcome>,
    diverged: Option<String>,
}

fn fit<T: Real>(cfg: &RunConfig, label: &str) -> Result<Fitted<T>, Failure> {
    let mut model = ModelParams::<T>::init(&cfg.model_config()?, cfg.seed)?;
    let train_set = load_split(cfg, &model, Split::Train, None)?;
    let val = load_split(cfg, &model, Split::Val, None)?;
    let tc = cfg.train_config();
    let mut curve = Vec::new();
    let result = train(&mut model, &train_set, &val, &tc, cfg.seed, &mut curve, |r| {
        eprintln!(
            "{label}epoch {:>3}/{}  loss {:8.3}  val CER {:.4}  WER {:.4}  halt {:.2}",
            r.epoch, tc.epochs, r.train_loss, r.val_cer, r.val_wer, r.val_halt_accuracy
        );
    });
    match result {
        Ok(o) => Ok(Fitted { model, curve, outcome: Some(o), diverged: None }),
        Err(e @ rvafm::Error::Divergence { .. }) => {
            Ok(Fitted { model, curve, outcome: None, diverged: Some(e.to_string()) })
        }
        Err(e) => Err(e.into()),
    }
}

fn train_cmd(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli, None)?;
    match cfg.train.dtype {
        DType::Float32 => train_typed::<f32>(cli, &cfg),
        DType::Float64 => train_typed::<f64>(cli, &cfg),
    }
}

fn train_typed<T: Real>(cli: &Cli, cfg: &RunConfig) -> Result<(), Failure> {
    let out = &cli.out;
    let (ckpt, report, curve_csv, saved_cfg) =
        (out.join("model.ckpt"), out.join("report.json"), out.join("loss_curve.csv"), out.join(RUN_CONFIG));
    guard(&[&ckpt, &report, &curve_csv], cli.force)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(&saved_cfg, cfg.to_toml())?;
    let f = fit::<T>(cfg, "")?;
    save_checkpoint(&f.model, &ckpt)?;
    write_csv(&curve_csv, &f.curve)?;
    let o = f.outcome.as_ref();
    write_json(
        &report,
        &TrainReport {
            dtype: T::DTYPE,
            seed: cfg.seed,
            config: cfg.clone(),
            params: f.model.counts(),
            epochs: f.curve.clone(),
            best_val_cer: o.map(|o| o.best_val_cer),
            best_val_wer: o.map(|o| o.best_val_wer),
            final_train_loss: o.map(|o| o.final_train_loss),
            diverged: f.diverged.clone(),
        },
    )?;
    if let Some(reason) = f.diverged {
        return Err(Failure::Divergence(format!("{reason}; last good model saved to {}", ckpt.display())));
    }
    let o = o.expect("no divergence means an outcome");
    println!(
        "trained {} parameters; best val CER {:.4}, final loss {:.4}; wrote {}",
        f.model.counts().total,
        o.best_val_cer,
        o.final_train_loss,
        ckpt.display()
    );
    Ok(())
}

fn checkpoint_dtype(path: &Path) -> Result<DType, Failure> {
    Ok(peek_manifest(path)?.dtype)
}

/// Tolerance of the exact check, done in float64 whatever the checkpoint.
const EXACT_TOLERANCE: f64 = 1e-12;

fn native_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::Float32 => 1e-5,
        DType::Float64 => EXACT_TOLERANCE,
    }
}

fn fuse_cmd(cli: &Cli, checkpoint: Option<&Path>, trials: usize) -> Result<(), Failure> {
    let path = checkpoint_path(cli, checkpoint);
    match checkpoint_dtype(&path)? {
        DType::Float32 => fuse_typed::<f32>(cli, &path, trials),
        DType::Float64 => fuse_typed::<f64>(cli, &path, trials),
    }
}

fn fuse_typed<T: Real>(cli: &Cli, path: &Path, trials: usize) -> Result<(), Failure> {
    let (fused_path, report_path) = (cli.out.join("fused.ckpt"), cli.out.join("fuse_report.json"));
    guard(&[&fused_path, &report_path], cli.force)?;
    let multi: ModelParams<T> = load_checkpoint(path)?;
    let fused = multi.fused()?;
    let seed = cli.seed.unwrap_or(0);
    let wide = multi.rvafm.cast::<f64>()?;
    let exact = verify_equivalence(&wide, &fuse_rvafm(&wide)?, trials, EXACT_TOLERANCE, seed)?;
    let native = verify_equivalence(&multi.rvafm, &fused.rvafm, trials, native_tolerance(T::DTYPE), seed)?;
    let bytes = encode(&fused)?;
    let report = FuseReport {
        dtype: T::DTYPE,
        nsl: multi.rvafm.config.nsl,
        pass: exact.pass && native.halt_step_mismatches == 0,
        exact,
        native,
        counts: FusionCounts::of(&multi.rvafm, &fused.rvafm),
        params_multi: multi.counts(),
        params_fused: fused.counts(),
        checkpoint_bytes_multi: encode(&multi)?.len(),
        checkpoint_bytes_fused: bytes.len(),
    };
    std::fs::create_dir_all(&cli.out)?;
    write_json(&report_path, &report)?;
    let (ex, na) = (&report.exact, &report.native);
    if !report.pass {
        return Err(Failure::Verification(format!(
            "fused rollouts differ: float64 max relative difference {:.3e} (tolerance {EXACT_TOLERANCE:.0e}), \
             {} halt-step mismatches in {}",
            ex.max_rel_diff,
            ex.halt_step_mismatches + na.halt_step_mismatches,
            T::DTYPE
        )));
    }
    std::fs::write(&fused_path, bytes)?;
    println!(
        "fused {} -> {} parameters; {} rollouts agree to {:.3e} in float64, {:.3e} in {}; wrote {}",
        report.params_multi.total,
        report.params_fused.total,
        ex.trials,
        ex.max_rel_diff,
        na.max_rel_diff,
        T::DTYPE,
        fused_path.display()
    );
    Ok(())
}

fn eval_cmd(cli: &Cli, checkpoint: Option<&Path>, split: Split) -> Result<(), Failure> {
    let path = checkpoint_path(cli, checkpoint);
    match checkpoint_dtype(&path)? {
        DType::Float32 => eval_typed::<f32>(cli, &path, split),
        DType::Float64 => eval_typed::<f64>(cli, &path, split),
    }
}

fn eval_typed<T: Real>(cli: &Cli, path: &Path, split: Split) -> Result<(), Failure> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let json = cli.out.join(format!("eval_{stem}_{}.json", split.name()));
    let csv = cli.out.join(format!("eval_{stem}_{}.csv", split.name()));
    guard(&[&json, &csv], cli.force)?;
    let model: ModelParams<T> = load_checkpoint(path)?;
    let cfg = load_config(cli, path.parent())?;
    let data = load_split(&cfg, &model, split, None)?;
    let report = EvalReport::new(split.name(), evaluate(&model, &data)?);
    std::fs::create_dir_all(&cli.out)?;
    write_json(&json, &report)?;
    write_csv(&csv, &report.results)?;
    println!(
        "{} {}: CER {:.4}  WER {:.4}  halt accuracy {:.3} over {} samples",
        stem, report.split, report.cer, report.wer, report.halt_accuracy, report.samples
    );
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn bench_cmd(cli: &Cli, checkpoint: Option<&Path>, rounds: usize, images: usize) -> Result<(), Failure> {
    let path = checkpoint_path(cli, checkpoint);
    match checkpoint_dtype(&path)? {
        DType::Float32 => bench_typed::<f32>(cli, &path, rounds, images),
        DType::Float64 => bench_typed::<f64>(cli, &path, rounds, images),
    }
}

fn bench_typed<T: Real>(cli: &Cli, path: &Path, rounds: usize, images: usize) -> Result<(), Failure> {
    if rounds == 0 || images == 0 {
        return Err(Failure::Usage("--rounds and --images must be positive".into()));
    }
    let report_path = cli.out.join("bench_report.json");
    guard(&[&report_path], cli.force)?;
    let multi: ModelParams<T> = load_checkpoint(path)?;
    if multi.mode() == Mode::InferenceFused {
        return Err(Failure::Usage("bench needs the multi-branch checkpoint; it fuses a copy itself".into()));
    }
    let fused = multi.fused()?;
    let cfg = load_config(cli, path.parent())?;
    let data = load_split(&cfg, &multi, Split::Test, Some(images))?;
    let time = |m: &ModelParams<T>, x: &Prepared<T>| -> Result<f64, Failure> {
        let t0 = Instant::now();
        black_box(m.recognize(black_box(&x.image))?);
        Ok(t0.elapsed().as_secs_f64() * 1e3)
    };
    for x in &data {
        time(&multi, x)?;
        time(&fused, x)?;
    }
    let (mut tm, mut tf) = (Vec::new(), Vec::new());
    for round in 0..rounds {
        for (i, x) in data.iter().enumerate() {
            if (round + i) % 2 == 0 {
                tm.push(time(&multi, x)?);
                tf.push(time(&fused, x)?);
            } else {
                tf.push(time(&fused, x)?);
                tm.push(time(&multi, x)?);
            }
        }
    }
    let (mm, fm) = (median(tm), median(tf));
    let counts = FusionCounts::of(&multi.rvafm, &fused.rvafm);
    let nsl = multi.rvafm.config.nsl;
    let size_pass = counts.fusable_multi == nsl * counts.fusable_fused;
    let report = BenchReport {
        dtype: T::DTYPE,
        nsl,
        images: data.len(),
        rounds,
        multi_median_ms: mm,
        fused_median_ms: fm,
        speedup: mm / fm,
        latency_pass: mm / fm >= 1.0,
        fusable_multi: counts.fusable_multi,
        fusable_fused: counts.fusable_fused,
        size_pass,
        checkpoint_bytes_multi: encode(&multi)?.len(),
        checkpoint_bytes_fused: encode(&fused)?.len(),
        pass: size_pass && mm / fm >= 1.0,
    };
    std::fs::create_dir_all(&cli.out)?;
    write_json(&report_path, &report)?;
    println!(
        "median forward: multi-branch {mm:.3} ms, fused {fm:.3} ms ({:.3}x); fused attention layers hold {}/{} parameters",
        report.speedup, counts.fusable_fused, counts.fusable_multi
    );
    if !report.pass {
        return Err(Failure::Verification(format!(
            "bench check failed: latency ratio {:.3} (need >= 1), exact 1/{nsl} size {}",
            report.speedup, size_pass
        )));
    }
    Ok(())
}

fn apply_axis(cfg: &mut RunConfig, axis: SweepAxis, value: &str) -> Result<(), Failure> {
    let bad = |what: &str| Failure::Usage(format!("{value:?} is not a valid {what}"));
    match axis {
        SweepAxis::Nsl => cfg.model.nsl = value.parse().map_err(|_| bad("branch count"))?,
        SweepAxis::CU => cfg.model.c_u = value.parse().map_err(|_| bad("width"))?,
        SweepAxis::Ablate => cfg.model.ablate = value.parse::<Ablation>().map_err(|_| bad("ablation"))?,
    }
    Ok(cfg.validate()?)
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Nsl => "nsl",
        SweepAxis::CU => "c_u",
        SweepAxis::Ablate => "ablate",
    }
}

fn sweep_cmd(cli: &Cli, axis: SweepAxis, values: &[String]) -> Result<(), Failure> {
    let csv = cli.out.join("sweep.csv");
    guard(&[&csv], cli.force)?;
    let base = load_config(cli, None)?;
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, axis, v)?;
        configs.push(cfg);
    }
    let mut rows = Vec::with_capacity(values.len());
    for (v, cfg) in values.iter().zip(&configs) {
        let label = format!("[{}={v}] ", axis_name(axis));
        rows.push(match cfg.train.dtype {
            DType::Float32 => sweep_point::<f32>(cfg, axis, v, &label)?,
            DType::Float64 => sweep_point::<f64>(cfg, axis, v, &label)?,
        });
    }
    std::fs::create_dir_all(&cli.out)?;
    write_csv(&csv, &rows)?;
    for r in &rows {
        println!(
            "{}={:<10} params {:>7} -> {:>7}  test CER {}",
            r.axis,
            r.value,
            r.params_train,
            r.params_fused,
            r.test_cer.map_or("diverged".into(), |c| format!("{c:.4}"))
        );
    }
    Ok(())
}

fn sweep_point<T: Real>(cfg: &RunConfig, axis: SweepAxis, value: &str, label: &str) -> Result<SweepRow, Failure> {
    let f = fit::<T>(cfg, label)?;
    let fused = f.model.fused()?;
    let test = if f.diverged.is_none() {
        let data = load_split(cfg, &fused, Split::Test, None)?;
        Some(evaluate(&fused, &data)?)
    } else {
        None
    };
    let o = f.outcome.as_ref();
    Ok(SweepRow {
        axis: axis_name(axis).into(),
        value: value.into(),
        params_train: f.model.counts().total,
        params_fused: fused.counts().total,
        best_val_cer: o.map(|o| o.best_val_cer),
        test_cer: test.as_ref().map(|e| e.rates.cer),
        test_wer: test.as_ref().map(|e| e.rates.wer),
        test_halt_accuracy: test.as_ref().map(|e| e.halt_accuracy),
        final_train_loss: o.map(|o| o.final_train_loss),
        diverged: f.diverged.is_some(),
    })
}

fn gen_data_cmd(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli, None)?;
    let root = cli.out.join("data");
    let mut total = 0;
    for split in [Split::Train, Split::Val, Split::Test] {
        let dir = root.join(split.name());
        guard(&[&dir], cli.force)?;
        std::fs::create_dir_all(&dir)?;
        for s in generate_split(&cfg.data.synth, split, split_size(&cfg, split))? {
            export_sample(&dir, split, &s)?;
            total += 1;
        }
    }
    println!("wrote {total} samples under {}", root.display());
    Ok(())
}
