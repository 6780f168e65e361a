//! `formant` — generate synthetic corpora, train the tracker, run it, score
//! predictions, and export plot data, all driven by one TOML config.
//!
//! Exit codes: 0 success, 1 validation problem (bad flags, config, or
//! inputs), 2 runtime failure. Directory outputs are built in a temporary
//! sibling and renamed into place only on success.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use formant_core::baseline::lpc_track;
use formant_core::config::RunConfig;
use formant_core::data::{
    load_manifest, save_annotation_csv, save_manifest_csv, to_train_samples, Manifest,
    ManifestRecord, Split,
};
use formant_core::dsp::{read_wav, spectrogram, write_wav};
use formant_core::error::Error;
use formant_core::eval::{vowel_polygon, write_polygon_csv, EvalReport, VowelMeasurement};
use formant_core::inference::{aggregate_heatmaps, read_track_csv, track, write_track_csv};
use formant_core::model::{checkpoint, FormantModel};
use formant_core::synth::{generate_corpus, Cohort};
use formant_core::train::{Trainer, TrainSample};
use formant_core::quantizer::FormantTrack;

#[derive(Parser)]
#[command(name = "formant", version, about = "Formant tracking toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override single config keys, e.g. --set train.batch_size=16.
    #[arg(long, global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Shorthand for --set train.seed=N and --set synth.seed=N.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Shorthand for --set runtime.workers=N.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect the configuration.
    Config(ConfigArgs),
    /// Generate a synthetic vowel corpus with exact ground truth.
    Synth(SynthArgs),
    /// Train the tracker on a manifest.
    Train(TrainArgs),
    /// Track formants with a trained checkpoint.
    Track(TrackArgs),
    /// Score prediction CSVs against a gold manifest.
    Eval(EvalArgs),
    /// Track formants with the classical LPC estimator.
    Baseline(BaselineArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Print the complete default configuration as TOML.
    #[arg(long)]
    print_defaults: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output corpus directory (must not exist yet).
    #[arg(long)]
    out: PathBuf,
    /// Number of utterances; overrides synth.count.
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated cohorts, e.g. men,women,children.
    #[arg(long)]
    cohorts: Option<String>,
    /// Fraction of each cohort routed to the test split.
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest; its `train` split is used.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for metrics.csv and model.ckpt.
    #[arg(long)]
    out: PathBuf,
    /// Optional probe manifest (all entries) for per-epoch MAE logging;
    /// falls back to the training manifest's `test` split.
    #[arg(long)]
    probe_manifest: Option<PathBuf>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single input wav.
    #[arg(long, conflicts_with = "manifest")]
    wav: Option<PathBuf>,
    /// Manifest: every entry is tracked.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for `<id>.csv` tracks.
    #[arg(long)]
    out: PathBuf,
    /// Also dump the aggregated heatmap per utterance as CSV.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of prediction CSVs named `<id>.csv`.
    #[arg(long)]
    pred: PathBuf,
    /// Gold manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for report.txt / report.csv.
    #[arg(long)]
    out: PathBuf,
    /// Also export per-(group, vowel) mean F1/F2 polygons.
    #[arg(long)]
    polygons: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, conflicts_with = "manifest")]
    wav: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, anything else is a
            // validation failure.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::EmptyInput
        | Error::InvalidArgument(_)
        | Error::InvalidConfig(_)
        | Error::InvalidSynthSpec(_)
        | Error::UnsupportedAudio(_)
        | Error::FrequencyOutOfRange { .. }
        | Error::BinOutOfRange { .. }
        | Error::UtteranceTooShort { .. }
        | Error::ManifestEntry { .. }
        | Error::Parse { .. } => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
        overrides.push(format!("synth.seed={seed}"));
    }
    if let Some(workers) = cli.workers {
        overrides.push(format!("runtime.workers={workers}"));
    }
    let config = match &cli.config {
        Some(path) => RunConfig::load(path, &overrides)?,
        None => RunConfig::from_toml("", &overrides)?,
    };

    match cli.command {
        Command::Config(args) => cmd_config(args),
        Command::Synth(args) => cmd_synth(args, &config),
        Command::Train(args) => cmd_train(args, &config),
        Command::Track(args) => cmd_track(args, &config),
        Command::Eval(args) => cmd_eval(args, &config),
        Command::Baseline(args) => cmd_baseline(args, &config),
    }
}

fn cmd_config(args: ConfigArgs) -> Result<(), Error> {
    if args.print_defaults {
        print!("{}", RunConfig::print_defaults());
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "nothing to do; try --print-defaults".into(),
        ))
    }
}

/// Builds `out` inside a temporary sibling directory, renaming on success.
fn atomic_dir(out: &Path, build: impl FnOnce(&Path) -> Result<(), Error>) -> Result<(), Error> {
    if out.exists() {
        return Err(Error::InvalidArgument(format!(
            "output directory {} already exists",
            out.display()
        )));
    }
    let parent = out.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(
        ".{}.tmp-{}",
        out.file_name().map(|s| s.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let result = build(&tmp);
    match result {
        Ok(()) => std::fs::rename(&tmp, out).map_err(|e| Error::io(out, e)),
        Err(e) => {
            let _ = std::fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn cmd_synth(args: SynthArgs, config: &RunConfig) -> Result<(), Error> {
    let mut synth_cfg = config.synth.clone();
    if let Some(n) = args.n {
        synth_cfg.count = n;
    }
    if let Some(cohorts) = &args.cohorts {
        synth_cfg.cohorts = cohorts
            .split(',')
            .map(Cohort::parse)
            .collect::<Result<_, _>>()?;
    }
    if synth_cfg.count == 0 {
        return Err(Error::InvalidArgument("corpus size must be > 0".into()));
    }
    if !(0.0..=1.0).contains(&args.test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must be in [0, 1], got {}",
            args.test_fraction
        )));
    }

    let corpus = generate_corpus(
        synth_cfg.count,
        &synth_cfg.cohorts,
        &synth_cfg.params,
        &config.signal,
        synth_cfg.seed,
    )?;

    // Seeded per-cohort test assignment keeps splits reproducible.
    let is_test = formant_core::synth::assign_test_split(&corpus, args.test_fraction, synth_cfg.seed);

    atomic_dir(&args.out, |tmp| {
        let mut rows = Vec::with_capacity(corpus.len());
        for (i, u) in corpus.iter().enumerate() {
            let wav = format!("{}.wav", u.id);
            let ann = format!("{}.csv", u.id);
            write_wav(&tmp.join(&wav), &u.waveform)?;
            save_annotation_csv(&tmp.join(&ann), &u.track, None)?;
            rows.push(ManifestRecord {
                id: u.id.clone(),
                audio_path: wav,
                annotation_path: ann,
                group: u.cohort.label().to_string(),
                vowel: String::new(),
                split: if is_test[i] { Split::Test } else { Split::Train },
            });
        }
        save_manifest_csv(&tmp.join("manifest.csv"), &rows)
    })?;
    println!("{}", args.out.join("manifest.csv").display());
    Ok(())
}

fn cmd_train(args: TrainArgs, config: &RunConfig) -> Result<(), Error> {
    let manifest = load_manifest(&args.manifest, &config.signal)?;
    let train_set = to_train_samples(&manifest, Split::Train, &config.signal)?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument(
            "manifest has no utterances in the train split".into(),
        ));
    }
    let probe_set: Vec<TrainSample> = match &args.probe_manifest {
        Some(path) => {
            let probe = load_manifest(path, &config.signal)?;
            let mut all = to_train_samples(&probe, Split::Train, &config.signal)?;
            all.extend(to_train_samples(&probe, Split::Test, &config.signal)?);
            all
        }
        None => to_train_samples(&manifest, Split::Test, &config.signal)?,
    };

    let mut trainer = match &args.resume {
        Some(ckpt) => Trainer::<f32>::resume(ckpt, config.train.clone())?,
        None => {
            let model = FormantModel::<f32>::new(
                config.encoder.clone(),
                config.decoder.clone(),
                config.bins.num_bins,
                config.train.seed,
            )?;
            Trainer::new(model, config.train.clone(), config.signal, config.bins)?
        }
    };

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    trainer.run(&train_set, &probe_set, Some(&args.out), |m| {
        let mae = m
            .probe_mae_hz
            .iter()
            .map(|v| {
                if v.is_finite() {
                    format!("{v:.1}")
                } else {
                    "-".to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("/");
        println!(
            "epoch {:>4}  lr {:.1e}  loss {:.4}  probe MAE Hz {}",
            m.epoch, m.lr, m.train_loss, mae
        );
    })?;
    println!("{}", args.out.join("model.ckpt").display());
    Ok(())
}

/// Resolves the utterance list for track/baseline: one wav or a manifest.
fn input_list(
    wav: &Option<PathBuf>,
    manifest: &Option<PathBuf>,
    config: &RunConfig,
) -> Result<Vec<(String, PathBuf)>, Error> {
    match (wav, manifest) {
        (Some(w), None) => {
            let id = w
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "utterance".into());
            Ok(vec![(id, w.clone())])
        }
        (None, Some(m)) => {
            let manifest = load_manifest(m, &config.signal)?;
            Ok(manifest
                .entries
                .iter()
                .map(|e| (e.id.clone(), e.audio_path.clone()))
                .collect())
        }
        _ => Err(Error::InvalidArgument(
            "exactly one of --wav or --manifest is required".into(),
        )),
    }
}

fn cmd_track(args: TrackArgs, config: &RunConfig) -> Result<(), Error> {
    let inputs = input_list(&args.wav, &args.manifest, config)?;
    let loaded = checkpoint::load::<f32>(&args.checkpoint)?;
    let signal = loaded.signal;
    let bins = loaded.bin_spec;
    atomic_dir(&args.out, |tmp| {
        run_over_inputs(&inputs, config.runtime.workers, |id, path| {
            let mut model = loaded.model.clone();
            let w = read_wav(path, signal.sample_rate)?;
            let spec = spectrogram(&w, &signal)?;
            let (result, heatmaps) = track(&mut model, &spec, &bins)?;
            write_track_csv(&tmp.join(format!("{id}.csv")), &result, &signal.geometry, signal.sample_rate)?;
            if args.heatmaps {
                write_matrix_csv(
                    &tmp.join(format!("{id}.heatmap.csv")),
                    &aggregate_heatmaps(&heatmaps),
                )?;
            }
            Ok(())
        })
    })?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_baseline(args: BaselineArgs, config: &RunConfig) -> Result<(), Error> {
    let inputs = input_list(&args.wav, &args.manifest, config)?;
    atomic_dir(&args.out, |tmp| {
        run_over_inputs(&inputs, config.runtime.workers, |id, path| {
            let w = read_wav(path, config.signal.sample_rate)?;
            let result = lpc_track(&w, &config.signal, &config.lpc, 3)?;
            write_track_csv(
                &tmp.join(format!("{id}.csv")),
                &result,
                &config.signal.geometry,
                config.signal.sample_rate,
            )
        })
    })?;
    println!("{}", args.out.display());
    Ok(())
}

/// Fans per-utterance work out to `workers` scoped threads.
fn run_over_inputs(
    inputs: &[(String, PathBuf)],
    workers: usize,
    job: impl Fn(&str, &Path) -> Result<(), Error> + Sync,
) -> Result<(), Error> {
    if workers <= 1 || inputs.len() <= 1 {
        for (id, path) in inputs {
            job(id, path)?;
        }
        return Ok(());
    }
    let chunk = inputs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for part in inputs.chunks(chunk) {
            let job = &job;
            handles.push(scope.spawn(move || {
                for (id, path) in part {
                    job(id, path)?;
                }
                Ok::<(), Error>(())
            }));
        }
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    })
}

fn write_matrix_csv(path: &Path, m: &formant_core::ndarray::Array2<f32>) -> Result<(), Error> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for row in m.rows() {
        let line = row
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, config: &RunConfig) -> Result<(), Error> {
    let manifest: Manifest = load_manifest(&args.manifest, &config.signal)?;
    // Every gold utterance needs its prediction before any scoring starts.
    let mut preds: Vec<(String, FormantTrack)> = Vec::new();
    for e in &manifest.entries {
        let path = args.pred.join(format!("{}.csv", e.id));
        if !path.exists() {
            return Err(Error::ManifestEntry {
                id: e.id.clone(),
                reason: format!("missing prediction file {}", path.display()),
            });
        }
        preds.push((e.id.clone(), read_track_csv(&path, 3)?));
    }

    let mut report = EvalReport::new(3);
    for (e, (_, pred)) in manifest.entries.iter().zip(&preds) {
        if pred.num_frames() != e.track.num_frames() {
            return Err(Error::ManifestEntry {
                id: e.id.clone(),
                reason: format!(
                    "prediction has {} frames, gold has {}",
                    pred.num_frames(),
                    e.track.num_frames()
                ),
            });
        }
        if let Some(seg) = &e.segmentation {
            report.add_tracking(pred, &e.track, seg)?;
            report.add_transitions(pred, &e.track, seg)?;
        }
        // Estimation protocol: average the prediction over the vowel span
        // and compare against the per-utterance gold value.
        let interval = vowel_interval(e);
        if let Some((start, end)) = interval {
            let gold_points = mean_gold_points(&e.track, start, end);
            if gold_points.iter().any(|g| g.is_some()) {
                report.add_estimation(pred, &gold_points, (start, end))?;
            }
        }
    }

    atomic_dir(&args.out, |tmp| {
        std::fs::write(tmp.join("report.txt"), report.render_text())
            .map_err(|e| Error::io(tmp, e))?;
        report.write_csv(&tmp.join("report.csv"))?;
        if args.polygons {
            let measurements: Vec<VowelMeasurement<'_>> = manifest
                .entries
                .iter()
                .zip(&preds)
                .filter_map(|(e, (_, pred))| {
                    Some(VowelMeasurement {
                        track: pred,
                        vowel: e.vowel_label.as_deref()?,
                        group: e.group.as_deref()?,
                        interval: vowel_interval(e),
                    })
                })
                .collect();
            write_polygon_csv(&tmp.join("polygons.csv"), &vowel_polygon(&measurements))?;
            let gold_measurements: Vec<VowelMeasurement<'_>> = manifest
                .entries
                .iter()
                .filter_map(|e| {
                    Some(VowelMeasurement {
                        track: &e.track,
                        vowel: e.vowel_label.as_deref()?,
                        group: e.group.as_deref()?,
                        interval: vowel_interval(e),
                    })
                })
                .collect();
            write_polygon_csv(
                &tmp.join("polygons_gold.csv"),
                &vowel_polygon(&gold_measurements),
            )?;
        }
        Ok(())
    })?;
    print!("{}", report.render_text());
    println!("{}", args.out.display());
    Ok(())
}

/// The vowel span of an utterance: its first vowel interval when segmented,
/// otherwise the whole utterance for single-vowel corpora.
fn vowel_interval(e: &formant_core::data::AnnotatedUtterance) -> Option<(usize, usize)> {
    match &e.segmentation {
        Some(seg) => seg
            .intervals
            .iter()
            .find(|(_, _, c)| *c == formant_core::eval::BroadClass::Vowel)
            .map(|&(s, t, _)| (s, t)),
        None => Some((0, e.track.num_frames())),
    }
}

fn mean_gold_points(track: &FormantTrack, start: usize, end: usize) -> Vec<Option<f64>> {
    (0..track.num_formants())
        .map(|j| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for t in start..end.min(track.num_frames()) {
                if track.valid[(t, j)] {
                    sum += track.values[(t, j)];
                    n += 1;
                }
            }
            (n > 0).then(|| sum / n as f64)
        })
        .collect()
}
