//! The five CLI commands. Each writes its artifacts under the output
//! directory and returns a summary for the caller to print.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ptl_core::data::{cifar_read_all, synth_generate, BatchPlan, Dataset, SynthSpec};
use ptl_core::network::{Mode, Network, NetworkConfig};
use ptl_core::training::{
    cell_suite, evaluate, fit, network_suite, primitive_suite, train_epoch, BatchEvent, Evaluation, FitOptions,
    GradCheck, GradCheckReport, Observer, Sgd, SgdConfig, TrainReport,
};
use ptl_core::{DType, Float};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, RunConfig, Split};
use crate::error::{CliError, Result};

/// Fault factor applied to the configured op for the negative-control run.
pub const FAULT_FACTOR: f64 = 1.05;

/// A parsed command line.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub config: RunConfig,
    pub init: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub out: PathBuf,
}

impl Invocation {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            init: None,
            teacher: None,
            out: out.into(),
        }
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        Ok(self.out.join(name))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Train and held-out datasets described by the config.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let spec = SynthSpec {
                classes: cfg.network.classes,
                per_class: cfg.synth_per_class,
                channels: cfg.network.in_channels,
                resolution: cfg.network.resolution,
                noise_std: cfg.synth_noise_std,
                seed: cfg.data_seed,
                variant: cfg.synth_variant,
            };
            let train = synth_generate(&spec).map_err(|e| CliError::Data(e.to_string()))?;
            let eval = synth_generate(&SynthSpec {
                per_class: cfg.synth_eval_per_class,
                seed: cfg.data_seed.wrapping_add(1),
                ..spec
            })
            .map_err(|e| CliError::Data(e.to_string()))?;
            Ok((train, eval))
        }
        DatasetKind::Cifar => {
            let dir = cfg
                .cifar_dir
                .as_ref()
                .ok_or_else(|| CliError::Config("cifar_dir: required when dataset = cifar".into()))?;
            let train_files: Vec<PathBuf> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            if train_files.is_empty() {
                return Err(CliError::Data(format!("no data_batch_*.bin files in {}", dir.display())));
            }
            let read = |paths: &[PathBuf]| {
                let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
                cifar_read_all(&refs).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
            };
            let limit = |d: Dataset, n: usize| {
                if n == 0 {
                    Ok(d)
                } else {
                    d.take(n).map_err(|e| CliError::Data(e.to_string()))
                }
            };
            let train = limit(read(&train_files)?, cfg.train_limit)?;
            let test = limit(read(&[dir.join("test_batch.bin")])?, cfg.test_limit)?;
            Ok((train, test))
        }
    }
}

fn check_input(net: &NetworkConfig, d: &Dataset) -> Result<()> {
    if d.resolution() != net.resolution || d.channels() != net.in_channels {
        return Err(CliError::Data(format!(
            "{}: images are {}x{}x{}, network expects {}x{}x{}",
            d.name(),
            d.channels(),
            d.resolution(),
            d.resolution(),
            net.in_channels,
            net.resolution,
            net.resolution
        )));
    }
    if d.classes() > net.classes {
        return Err(CliError::Data(format!(
            "{}: {} classes, network predicts {}",
            d.name(),
            d.classes(),
            net.classes
        )));
    }
    Ok(())
}

fn load_echo(ckpt: &Checkpoint) -> Result<RunConfig> {
    RunConfig::parse(&ckpt.config).map_err(|e| CliError::Load(format!("config echo: {e}")))
}

fn checkpoint_dtype(ckpt: &Checkpoint, echo: &RunConfig) -> DType {
    ckpt.manifest.first().map(|e| e.dtype).unwrap_or(echo.dtype)
}

/// Rebuilds the network a checkpoint was saved from.
pub fn network_from_checkpoint<T: Float>(ckpt: &Checkpoint) -> Result<Network<T>> {
    let echo = load_echo(ckpt)?;
    let mut net = Network::new(&echo.network, echo.seed)?;
    ckpt.apply_to(&mut net.store)?;
    Ok(net)
}

macro_rules! dispatch {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub report: TrainReport,
}

/// Trains from scratch or from `--init`, then saves `model.bcnv` and `metrics.csv`.
pub fn cmd_train(inv: &Invocation) -> Result<TrainOutcome> {
    dispatch!(inv.config.dtype, train_impl(inv))
}

fn train_impl<T: Float>(inv: &Invocation) -> Result<TrainOutcome> {
    let cfg = &inv.config;
    let (train, eval) = load_datasets(cfg)?;
    check_input(&cfg.network, &train)?;
    let mut net = Network::<T>::new(&cfg.network, cfg.seed)?;
    if let Some(path) = &inv.init {
        Checkpoint::load(path)?.apply_to(&mut net.store)?;
    }
    let mut opt = Sgd::new(cfg.optimizer, &net.store)?;
    let fo = FitOptions {
        epochs: cfg.epochs,
        train: cfg.train_options(),
        timing: cfg.timing,
    };
    let report = fit(&mut net, None, &train, Some(&eval), &mut opt, &fo, &mut ())?;
    let checkpoint = inv.out_file("model.bcnv")?;
    Checkpoint::from_store(&cfg.to_text(), &net.store).save(&checkpoint)?;
    let metrics = inv.out_file("metrics.csv")?;
    write_text(&metrics, &report.to_csv())?;
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub evaluation: Evaluation,
    pub csv: PathBuf,
}

pub const EVAL_HEADER: &str = "class,correct,total,accuracy";

/// Evaluates the `--init` checkpoint in eval mode on the configured split and
/// writes per-class accuracy to `eval.csv`.
pub fn cmd_eval(inv: &Invocation) -> Result<EvalOutcome> {
    let path = inv
        .init
        .as_ref()
        .ok_or_else(|| CliError::Config("--init: eval needs a checkpoint".into()))?;
    let ckpt = Checkpoint::load(path)?;
    let echo = load_echo(&ckpt)?;
    dispatch!(checkpoint_dtype(&ckpt, &echo), eval_impl(inv, &ckpt))
}

fn eval_impl<T: Float>(inv: &Invocation, ckpt: &Checkpoint) -> Result<EvalOutcome> {
    let mut net = network_from_checkpoint::<T>(ckpt)?;
    net.set_mode(Mode::Eval);
    let (train, test) = load_datasets(&inv.config)?;
    let data = match inv.config.eval_split {
        Split::Train => train,
        Split::Test => test,
    };
    check_input(net.config(), &data)?;
    let evaluation = evaluate(&net, &data, inv.config.batch_size)?;
    if !net.states_are_zero() {
        return Err(CliError::Core(ptl_core::Error::State("cell states changed during evaluation".into())));
    }
    let mut text = format!("{EVAL_HEADER}\n");
    for k in 0..evaluation.total.len() {
        let _ = writeln!(
            text,
            "{k},{},{},{:.6}",
            evaluation.correct[k],
            evaluation.total[k],
            evaluation.class_accuracy(k)
        );
    }
    let _ = writeln!(
        text,
        "all,{},{},{:.6}",
        evaluation.correct.iter().sum::<usize>(),
        evaluation.total.iter().sum::<usize>(),
        evaluation.accuracy()
    );
    let csv = inv.out_file("eval.csv")?;
    write_text(&csv, &text)?;
    Ok(EvalOutcome { evaluation, csv })
}

#[derive(Clone, Debug)]
pub struct DistillRun {
    pub lambda: f64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub report: TrainReport,
}

/// Trains a backbone student against the frozen `--teacher`. With `lambdas`
/// set, runs one student per value and suffixes every file with `_lambda{v}`.
pub fn cmd_distill(inv: &Invocation) -> Result<Vec<DistillRun>> {
    dispatch!(inv.config.dtype, distill_impl(inv))
}

fn distill_impl<T: Float>(inv: &Invocation) -> Result<Vec<DistillRun>> {
    let cfg = &inv.config;
    let teacher_path = inv
        .teacher
        .as_ref()
        .or(cfg.teacher.as_ref())
        .ok_or_else(|| CliError::Config("teacher: distill needs a teacher checkpoint".into()))?;
    let mut teacher = network_from_checkpoint::<T>(&Checkpoint::load(teacher_path)?)?;
    teacher.set_mode(Mode::Eval);
    let student_cfg = cfg.network.backbone();
    let tc = teacher.config();
    if tc.feature_dim != student_cfg.feature_dim {
        return Err(CliError::Config(format!(
            "feature_dim: teacher feature has {} channels, student {}",
            tc.feature_dim, student_cfg.feature_dim
        )));
    }
    if tc.resolution != student_cfg.resolution || tc.in_channels != student_cfg.in_channels {
        return Err(CliError::Config("resolution: teacher and student inputs differ".into()));
    }

    let (train, eval) = load_datasets(cfg)?;
    check_input(&student_cfg, &train)?;
    let init = inv.init.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    let sweep = !cfg.lambdas.is_empty();
    let lambdas = if sweep { cfg.lambdas.clone() } else { vec![cfg.lambda] };
    let fo = FitOptions {
        epochs: cfg.epochs,
        train: cfg.train_options(),
        timing: cfg.timing,
    };

    let mut runs = Vec::new();
    for lambda in lambdas {
        let mut student = Network::<T>::new(&student_cfg, cfg.seed)?;
        if let Some(ckpt) = &init {
            ckpt.apply_to(&mut student.store)?;
        }
        let mut opt = Sgd::new(cfg.optimizer, &student.store)?;
        let report = fit(&mut student, Some((&teacher, lambda)), &train, Some(&eval), &mut opt, &fo, &mut ())?;
        let suffix = if sweep { format!("_lambda{lambda}") } else { String::new() };
        let echo = RunConfig {
            network: student_cfg.clone(),
            lambda,
            lambdas: Vec::new(),
            ..cfg.clone()
        };
        let checkpoint = inv.out_file(&format!("student{suffix}.bcnv"))?;
        Checkpoint::from_store(&echo.to_text(), &student.store).save(&checkpoint)?;
        let metrics = inv.out_file(&format!("metrics{suffix}.csv"))?;
        write_text(&metrics, &report.to_csv())?;
        runs.push(DistillRun {
            lambda,
            checkpoint,
            metrics,
            report,
        });
    }
    Ok(runs)
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    /// `(suite, report)` rows in run order.
    pub rows: Vec<(&'static str, GradCheckReport)>,
    pub csv: PathBuf,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|(_, r)| r.passed())
    }

    pub fn failures(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter(|(_, r)| !r.passed())
            .map(|(s, r)| format!("{s}/{}", r.label))
            .collect()
    }
}

pub const GRADCHECK_HEADER: &str = "suite,name,probes,non_smooth,unresolved,max_rel_error,tolerance,passed";

/// Finite-difference checks in 64-bit over every primitive, both cell
/// versions and the configured network (one row per layer class). The report
/// is written even when a check fails.
pub fn cmd_gradcheck(inv: &Invocation) -> Result<GradcheckOutcome> {
    let cfg = &inv.config;
    let check = GradCheck {
        fault: cfg.gradcheck_fault.map(|k| (k, FAULT_FACTOR)),
        ..GradCheck::default()
    };
    let mut rows = Vec::new();
    rows.extend(primitive_suite(&check)?.into_iter().map(|r| ("primitive", r)));
    rows.extend(cell_suite(&check)?.into_iter().map(|r| ("cell", r)));
    rows.extend(network_suite(&check, &cfg.network, cfg.seed)?.into_iter().map(|r| ("network", r)));
    let mut text = format!("{GRADCHECK_HEADER}\n");
    for (suite, r) in &rows {
        let _ = writeln!(
            text,
            "{suite},{},{},{},{},{:.3e},{:e},{}",
            r.label,
            r.probes,
            r.non_smooth,
            r.unresolved,
            r.max_rel_error,
            r.tolerance,
            r.passed()
        );
    }
    let csv = inv.out_file("gradcheck.csv")?;
    write_text(&csv, &text)?;
    Ok(GradcheckOutcome { rows, csv })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateRow {
    pub batch: usize,
    pub cell: String,
    pub state: &'static str,
    pub l2: f64,
    pub mean: f64,
}

pub const STATE_HEADER: &str = "batch,cell,state,l2,mean";

/// Per-cell per-batch L2 norm and mean of every stored state during one
/// probe epoch over the training split. Train mode runs the epoch loop with
/// a zero learning rate, so parameters stay fixed while states evolve.
pub fn cmd_inspect_state(inv: &Invocation) -> Result<(Vec<StateRow>, PathBuf)> {
    match &inv.init {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let echo = load_echo(&ckpt)?;
            dispatch!(checkpoint_dtype(&ckpt, &echo), inspect_impl(inv, Some(&ckpt)))
        }
        None => dispatch!(inv.config.dtype, inspect_impl(inv, None)),
    }
}

fn cell_name(i: usize) -> String {
    if i == 0 {
        "stem.cell".into()
    } else {
        format!("pair{}.cell", i - 1)
    }
}

fn state_rows<T: Float>(batch: usize, net: &Network<T>, rows: &mut Vec<StateRow>) {
    for (i, s) in net.states().iter().enumerate() {
        let tensors = std::iter::once(("c", &s.c)).chain(s.h.as_ref().map(|h| ("h", h)));
        for (state, t) in tensors {
            let l2 = t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            let mean = t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64;
            rows.push(StateRow {
                batch,
                cell: cell_name(i),
                state,
                l2,
                mean,
            });
        }
    }
}

struct StateRecorder(Vec<StateRow>);

impl<T: Float> Observer<T> for StateRecorder {
    fn batch_end(&mut self, e: &BatchEvent<'_, T>) {
        state_rows(e.batch, e.network, &mut self.0);
    }
}

fn inspect_impl<T: Float>(inv: &Invocation, ckpt: Option<&Checkpoint>) -> Result<(Vec<StateRow>, PathBuf)> {
    let cfg = &inv.config;
    let mut net = match ckpt {
        Some(c) => network_from_checkpoint::<T>(c)?,
        None => Network::<T>::new(&cfg.network, cfg.seed)?,
    };
    let (train, _) = load_datasets(cfg)?;
    check_input(net.config(), &train)?;
    let rows = match cfg.inspect_mode {
        Mode::Train => {
            net.set_mode(Mode::Train);
            let mut opt = Sgd::new(
                SgdConfig {
                    lr0: 0.0,
                    ..cfg.optimizer
                },
                &net.store,
            )?;
            let mut rec = StateRecorder(Vec::new());
            train_epoch(&mut net, &train, &mut opt, &cfg.train_options(), 0, &mut rec)?;
            rec.0
        }
        Mode::Eval => {
            net.set_mode(Mode::Eval);
            let mut rows = Vec::new();
            let plan = BatchPlan::new(cfg.seed, cfg.batch_size)?;
            for (b, idx) in plan.batches(train.len(), 0).iter().enumerate() {
                let (x, _) = train.gather::<T>(idx)?;
                net.forward(&x)?;
                state_rows(b, &net, &mut rows);
            }
            rows
        }
    };
    let mut text = format!("{STATE_HEADER}\n");
    for r in &rows {
        let _ = writeln!(text, "{},{},{},{:e},{:e}", r.batch, r.cell, r.state, r.l2, r.mean);
    }
    let csv = inv.out_file("state.csv")?;
    write_text(&csv, &text)?;
    Ok((rows, csv))
}
