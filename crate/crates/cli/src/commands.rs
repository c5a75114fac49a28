//! Command implementations. Each returns the exit code on success; errors
//! map to exit codes in [`crate::run`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pecl_core::checkpoint::Checkpoint;
use pecl_core::config::{FusionMode, Precision};
use pecl_core::datakit::{
    load_records, reference_like_manifest, synth_generate, write_manifest, write_splits, write_synth, Dataset,
    FeatureAlphabet, ProtocolSplit, MANIFEST_FILE,
};
use pecl_core::gradcheck::{model_grad_check, GradCheckReport};
use pecl_core::metrics::{kappa_calibration, AnnotatorTable, CalibrationReport};
use pecl_core::train::{evaluate, train, EvalReport, TrainOptions, TrainingLog};
use pecl_core::{Error, ParamReport, PeclModel, Result, Scalar};
use serde::{Deserialize, Serialize};

use crate::experiment::{dataset_dir, DataSource, ExperimentConfig};
use crate::sweep::{run_sweep, SweepReport};
use crate::{Command, EvalArgs, Format, GradcheckArgs, KappaArgs, ParamsArgs, RunArgs, SweepArgs, SynthArgs};
use crate::{EXIT_NUMERICAL, EXIT_OK};

pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

/// Final metrics of one split, as written by `train` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub seed: u64,
    pub split: String,
    pub n_train: usize,
    pub n_test: usize,
    pub score_weight: f64,
    pub metrics: EvalReport,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamsOutput {
    pub seed: u64,
    pub report: ParamReport,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutput {
    pub seed: u64,
    pub corrupted: bool,
    pub report: GradCheckReport,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSummary {
    pub name: String,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitReport {
    pub seed: u64,
    pub n_records: usize,
    pub splits: Vec<SplitSummary>,
    pub warnings: Vec<String>,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct KappaOutput {
    pub files: Vec<PathBuf>,
    pub alphabet: String,
    pub report: CalibrationReport,
}

/// Everything one training split produces.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub log: TrainingLog,
    pub metrics: SplitMetrics,
    pub checkpoint: Checkpoint,
}

pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Params(a) => cmd_params(&a, out),
        Command::Split(a) => cmd_split(&a, out),
        Command::Kappa(a) => cmd_kappa(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
    }
}

/// Preset, then config file, then flags.
pub fn resolve(args: &RunArgs, default_preset: &str) -> Result<ExperimentConfig> {
    let preset = args.preset.as_deref().unwrap_or(default_preset);
    let mut exp = ExperimentConfig::load(preset, args.config.as_deref())?;
    if let Some(p) = &args.preset {
        if *p != exp.preset {
            return Err(Error::Config(format!(
                "--preset {p} conflicts with preset {} named in the config file",
                exp.preset
            )));
        }
    }
    if let Some(s) = args.seed {
        exp.seed = s;
    }
    if let Some(o) = &args.out {
        exp.out = o.clone();
    }
    if let Some(d) = &args.data {
        exp.data = DataSource::Dir { path: d.clone() };
    }
    if let Some(n) = args.clips {
        match &mut exp.data {
            DataSource::Synth { spec } => spec.n_clips = n,
            DataSource::Dir { .. } => {
                return Err(Error::Config("--clips applies only to generated data, not --data".into()))
            }
        }
    }
    let m = &mut exp.model;
    if let Some(f) = args.fusion {
        m.fusion = f.into();
    }
    if let Some(p) = args.protocol {
        exp.protocol = p.into();
    }
    if let Some(s) = args.multitask {
        m.multitask = s == crate::Switch::On;
    }
    if let Some(a) = args.adapter {
        m.adapter = a.into();
    }
    if let Some(p) = args.placement {
        m.placement = p.into();
    }
    if let Some(n) = args.pavf_count {
        m.num_pavf = n;
    }
    if let Some(n) = args.layers {
        m.num_layers = n;
    }
    if let Some(n) = args.epochs {
        m.optim.epochs = n;
    }
    if args.mixed_subjects {
        exp.subject_disjoint = false;
    }
    if args.cross_gender {
        exp.cross_gender = true;
    }
    if args.wall_time {
        exp.record_wall_time = true;
    }
    exp.model.validate()?;
    Ok(exp)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn header(seed: u64, exp: &ExperimentConfig) -> Result<String> {
    Ok(format!("seed {seed}\nconfig {}\n", serde_json::to_string(exp)?))
}

fn aux_names(ds: &Dataset) -> Vec<String> {
    ds.alphabet.names().into_iter().map(String::from).collect()
}

/// Trains a fresh model on one split and evaluates it on the split's test set
/// after every epoch. Progress lines go to stderr when `verbose`.
pub fn train_split(exp: &ExperimentConfig, ds: &Dataset, split: &ProtocolSplit, verbose: bool) -> Result<SplitOutcome> {
    match exp.model.precision {
        Precision::F32 => train_split_as::<f32>(exp, ds, split, verbose),
        Precision::F64 => train_split_as::<f64>(exp, ds, split, verbose),
    }
}

fn train_split_as<T: Scalar>(
    exp: &ExperimentConfig,
    ds: &Dataset,
    split: &ProtocolSplit,
    verbose: bool,
) -> Result<SplitOutcome> {
    let mut model = PeclModel::<T>::build(&exp.model, exp.model_seed())?;
    let train_set = ds.subset(&split.train)?;
    let test_set = ds.subset(&split.test)?;
    let opts = TrainOptions { record_wall_time: exp.record_wall_time, aux_names: aux_names(ds) };
    let name = split.name.clone();
    let (log, _) = train(&mut model, &train_set, Some(&test_set), exp.train_seed(), &opts, |r| {
        if verbose {
            let acc = r.metrics.as_ref().map_or(f64::NAN, |m| m.fused.acc);
            eprintln!("[{name}] epoch {:>3}  loss {:.4}  test acc {:.4}", r.epoch, r.loss, acc);
        }
    })?;
    let metrics = match log.epochs.last().and_then(|r| r.metrics.clone()) {
        Some(m) => m,
        None => evaluate(&model, &test_set, exp.model.fusion, exp.model.score_weight, &opts.aux_names)?,
    };
    Ok(SplitOutcome {
        log,
        metrics: SplitMetrics {
            seed: exp.seed,
            split: split.name.clone(),
            n_train: train_set.len(),
            n_test: test_set.len(),
            score_weight: exp.model.score_weight,
            metrics,
            experiment: exp.clone(),
        },
        checkpoint: Checkpoint::from_model(&model),
    })
}

pub fn cmd_train(args: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let mut exp = resolve(args, "desk")?;
    let ds = exp.load_data()?;
    let (splits, warnings) = exp.splits(&ds)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    create_dir(&exp.out)?;
    write_json(&exp.out.join(EXPERIMENT_FILE), &exp)?;
    write_splits(&exp.out.join(SPLITS_FILE), &splits)?;
    let mut text = header(exp.seed, &exp)?;
    for split in &splits {
        let r = train_split(&exp, &ds, split, true)?;
        let dir = exp.out.join(&split.name);
        create_dir(&dir)?;
        r.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        let log_path = dir.join(TRAIN_LOG_FILE);
        fs::write(&log_path, r.log.to_jsonl()?).map_err(|e| Error::io(&log_path, e))?;
        write_json(&dir.join(METRICS_FILE), &r.metrics)?;
        text.push_str(&format!(
            "split {} (train {}, test {})\n{}",
            split.name,
            r.metrics.n_train,
            r.metrics.n_test,
            r.metrics.metrics.to_text()
        ));
    }
    emit(out, &text)?;
    Ok(EXIT_OK)
}

/// The experiment file written next to a checkpoint's split directory.
fn experiment_beside(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.parent()?.join(EXPERIMENT_FILE);
    p.is_file().then_some(p)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let mut run = args.run.clone();
    // Here --fusion selects the evaluation mode, not the model.
    let fusion = run.fusion.take().map(FusionMode::from);
    if run.config.is_none() {
        run.config = experiment_beside(&args.checkpoint);
    }
    let mut exp = resolve(&run, "desk")?;
    let ds = exp.load_data()?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    ckpt.ensure_config(&exp.model)?;
    let (splits, _) = exp.splits(&ds)?;
    let wanted = args.split.clone().or_else(|| {
        let dir = args.checkpoint.parent()?.file_name()?.to_str()?.to_string();
        splits.iter().any(|s| s.name == dir).then_some(dir)
    });
    let split = match wanted {
        Some(name) => splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("protocol {:?} has no split named {name}", exp.protocol)))?,
        None if splits.len() == 1 => &splits[0],
        None => return Err(Error::Config("several splits; choose one with --split".into())),
    };
    let fusion = fusion.unwrap_or(exp.model.fusion);
    let weight = args.score_weight.unwrap_or(exp.model.score_weight);
    let test_set = ds.subset(&split.test)?;
    let names = aux_names(&ds);
    let metrics = match exp.model.precision {
        Precision::F32 => evaluate(&ckpt.to_model::<f32>()?, &test_set, fusion, weight, &names)?,
        Precision::F64 => evaluate(&ckpt.to_model::<f64>()?, &test_set, fusion, weight, &names)?,
    };
    let report = SplitMetrics {
        seed: exp.seed,
        split: split.name.clone(),
        n_train: split.train.len(),
        n_test: test_set.len(),
        score_weight: weight,
        metrics,
        experiment: exp.clone(),
    };
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&report)? + "\n",
        Format::Text => format!(
            "{}split {} (test {})\n{}",
            header(exp.seed, &exp)?,
            report.split,
            report.n_test,
            report.metrics.to_text()
        ),
    };
    emit(out, &text)?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let mut exp = resolve(&args.run, "micro")?;
    exp.model.precision = Precision::F64;
    let report = model_grad_check(&exp.model, exp.model_seed(), args.corrupt_gradient)?;
    let passed = report.passed;
    let output = GradcheckOutput { seed: exp.seed, corrupted: args.corrupt_gradient, report, experiment: exp };
    if let Some(dir) = &args.run.out {
        create_dir(dir)?;
        write_json(&dir.join("gradcheck.json"), &output)?;
    }
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&output)? + "\n",
        Format::Text => header(output.seed, &output.experiment)? + &output.report.to_text(),
    };
    emit(out, &text)?;
    if passed {
        Ok(EXIT_OK)
    } else {
        eprintln!("error: gradient check failed (max rel. err {:.3e})", output.report.max_rel_err);
        Ok(EXIT_NUMERICAL)
    }
}

pub fn params_output(exp: &ExperimentConfig) -> Result<ParamsOutput> {
    // Counting does not depend on precision; f32 halves the memory of the paper preset.
    let model = PeclModel::<f32>::build(&exp.model, exp.model_seed())?;
    Ok(ParamsOutput { seed: exp.seed, report: model.param_report(), experiment: exp.clone() })
}

pub fn cmd_params(args: &ParamsArgs, out: &mut dyn Write) -> Result<i32> {
    let exp = resolve(&args.run, "desk")?;
    let output = params_output(&exp)?;
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&output)? + "\n",
        Format::Text => header(output.seed, &exp)? + &output.report.to_text(),
    };
    emit(out, &text)?;
    Ok(EXIT_OK)
}

pub fn cmd_split(args: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let exp = resolve(args, "desk")?;
    // Splitting needs only the records, so a bare manifest suffices.
    let (records, alphabet) = match &exp.data {
        DataSource::Dir { path } => load_records(&dataset_dir(path))?,
        DataSource::Synth { spec } => {
            let clips = synth_generate(spec, &exp.model, exp.data_seed())?;
            (clips.into_iter().map(|c| c.record).collect(), FeatureAlphabet::preset(&spec.alphabet)?)
        }
    };
    let ds = Dataset { records, samples: Vec::new(), alphabet };
    let (splits, warnings) = exp.splits(&ds)?;
    create_dir(&exp.out)?;
    write_splits(&exp.out.join(SPLITS_FILE), &splits)?;
    let report = SplitReport {
        seed: exp.seed,
        n_records: ds.records.len(),
        splits: splits
            .iter()
            .map(|s| SplitSummary { name: s.name.clone(), n_train: s.train.len(), n_test: s.test.len() })
            .collect(),
        warnings,
        experiment: exp.clone(),
    };
    write_json(&exp.out.join("split_report.json"), &report)?;
    let mut text = header(exp.seed, &exp)?;
    for s in &report.splits {
        text.push_str(&format!("{:<12} train {:>5}  test {:>5}\n", s.name, s.n_train, s.n_test));
    }
    for w in &report.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    emit(out, &text)?;
    Ok(EXIT_OK)
}

pub fn cmd_kappa(args: &KappaArgs, out: &mut dyn Write) -> Result<i32> {
    let tables: Vec<AnnotatorTable> = args.tables.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let alphabet = FeatureAlphabet::preset(&args.alphabet)?;
    let report = kappa_calibration(&tables, &alphabet.groups())?;
    let output = KappaOutput { files: args.tables.clone(), alphabet: alphabet.name.clone(), report };
    if let Some(path) = &args.out {
        write_json(path, &output)?;
    }
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&output)? + "\n",
        Format::Text => output.report.to_text(),
    };
    emit(out, &text)?;
    Ok(EXIT_OK)
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let exp = resolve(&args.run, "desk")?;
    create_dir(&exp.out)?;
    if args.reference_manifest {
        let records = reference_like_manifest(exp.data_seed());
        write_manifest(&exp.out.join(MANIFEST_FILE), &records)?;
        emit(out, &format!("wrote {} records to {}\n", records.len(), exp.out.display()))?;
        return Ok(EXIT_OK);
    }
    let DataSource::Synth { spec } = &exp.data else {
        return Err(Error::Config("synth needs a generated data source, not --data".into()));
    };
    let clips = synth_generate(spec, &exp.model, exp.data_seed())?;
    write_synth(&exp.out, &clips, spec, exp.data_seed())?;
    write_json(&exp.out.join(EXPERIMENT_FILE), &exp)?;
    emit(out, &format!("wrote {} clips to {}\n", clips.len(), exp.out.display()))?;
    Ok(EXIT_OK)
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<i32> {
    let mut exp = resolve(&args.run, "desk")?;
    let ds = exp.load_data()?;
    let report: SweepReport = run_sweep(&exp, &ds, &args.axes, true)?;
    create_dir(&exp.out)?;
    write_json(&exp.out.join("sweep.json"), &report)?;
    let table = report.to_text();
    let path = exp.out.join("sweep.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    emit(out, &(header(exp.seed, &exp)? + &table))?;
    Ok(EXIT_OK)
}
