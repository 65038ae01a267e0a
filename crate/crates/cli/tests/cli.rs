//! Config parsing, checkpoint persistence and the five commands.

use std::path::Path;
use std::process::Command;

use ptl_cli::checkpoint::{checksum, Checkpoint, MAGIC};
use ptl_cli::commands::{
    cmd_distill, cmd_eval, cmd_gradcheck, cmd_inspect_state, cmd_train, load_datasets, network_from_checkpoint,
    Invocation, EVAL_HEADER, STATE_HEADER,
};
use ptl_cli::config::{RunConfig, KEYS};
use ptl_cli::CliError;
use ptl_core::cells::cell_forward;
use ptl_core::network::{Mode, Network};
use ptl_core::training::TrainReport;

const SMALL: &str = "\
# small topology for fast tests
resolution = 8
stem_channels = 2
block_channels = 4,6
block_strides = 1,2
cell_channels = 3,3
feature_dim = 6
hidden_dim = 8
classes = 3
synth_per_class = 8
synth_eval_per_class = 4
batch_size = 6
epochs = 2
";

/// The small config with `extra` lines overriding its keys.
fn small(extra: &str) -> RunConfig {
    let mut cfg = RunConfig::parse(SMALL).unwrap();
    for line in extra.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').unwrap();
        cfg.set(k.trim(), v.trim()).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

fn inv(cfg: RunConfig, out: &Path) -> Invocation {
    Invocation::new(cfg, out)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

// ---- config ----

#[test]
fn empty_config_is_the_default() {
    assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    assert_eq!(RunConfig::parse("# only a comment\n\n").unwrap(), RunConfig::default());
}

#[test]
fn canonical_text_round_trips() {
    let mut cfg = small("cells = v2\nlambdas = 0,0.3,1\nteacher = /tmp/t.bcnv\ngradcheck_fault = tanh\ndtype = f64\n");
    cfg.synth_noise_std = 0.125;
    let text = cfg.to_text();
    assert_eq!(text.lines().count(), KEYS.len());
    assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
}

#[test]
fn config_errors_name_the_field() {
    let cases = [
        ("bogus = 1", "unknown key `bogus`"),
        ("lr = fast", "lr"),
        ("seed = 1\nseed = 2", "duplicate key `seed`"),
        ("no equals sign", "line 1"),
        ("block_strides = 1,2", "block_strides"),
        ("lambda = 1.5", "lambda"),
        ("lambdas = 0.5,2", "lambdas"),
        ("momentum = 1", "momentum"),
        ("batch_size = 0", "batch_size"),
        ("kernel = 4", "kernel"),
        ("dataset = cifar", "cifar_dir"),
        ("dataset = cifar\ncifar_dir = /x", "resolution"),
        ("augment = yes", "augment"),
        ("cells = v3", "cells"),
        ("gradcheck_fault = warp", "gradcheck_fault"),
    ];
    for (text, needle) in cases {
        let err = RunConfig::parse(text).unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "{text}");
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains(needle), "{text}: {err}");
    }
}

// ---- checkpoint ----

fn sample_checkpoint() -> Checkpoint {
    let net = Network::<f32>::new(&small("").network, 3).unwrap();
    Checkpoint::from_store("seed = 3\n", &net.store)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bcnv");
    let b = dir.path().join("b.bcnv");
    let ckpt = sample_checkpoint();
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ckpt);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[..6], MAGIC);
    let tail = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    assert_eq!(tail, checksum(&ckpt.payload));
}

#[test]
fn checkpoint_values_survive_exactly_in_both_precisions() {
    let net = Network::<f64>::new(&small("").network, 5).unwrap();
    let ckpt = Checkpoint::from_bytes(&Checkpoint::from_store("", &net.store).to_bytes()).unwrap();
    let mut other = Network::<f64>::new(&small("").network, 6).unwrap();
    ckpt.apply_to(&mut other.store).unwrap();
    assert!(net.store.tensors().iter().zip(other.store.tensors()).all(|(a, b)| a.bit_eq(b)));
    let payload: usize = ckpt.manifest.iter().map(|e| e.byte_len()).sum();
    assert_eq!(payload, net.store.scalar_count() * 8);
}

#[test]
fn corrupted_checkpoints_are_refused() {
    let bytes = sample_checkpoint().to_bytes();
    let mut flipped = bytes.clone();
    let mid = bytes.len() - 20;
    flipped[mid] ^= 0x40;
    let err = Checkpoint::from_bytes(&flipped).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    assert_eq!(err.exit_code(), 4);

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());

    // A manifest that no longer matches the payload length.
    let mut ckpt = sample_checkpoint();
    ckpt.manifest[0].shape[0] += 1;
    assert!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap_err().to_string().contains("manifest"));
}

#[test]
fn topology_mismatch_lists_every_tensor() {
    let ckpt = sample_checkpoint();
    let mut other = Network::<f32>::new(&small("hidden_dim = 9\ncells = none").network, 0).unwrap();
    let err = ckpt.apply_to(&mut other.store).unwrap_err().to_string();
    assert!(err.contains("head.fc1.weight"), "{err}");
    assert!(err.contains("head.fc2.weight"), "{err}");
    assert!(err.contains("stem.cell"), "{err}");
}

#[test]
fn interrupted_save_leaves_previous_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bcnv");
    sample_checkpoint().save(&path).unwrap();
    let before = std::fs::read(&path).unwrap();
    // Saving into a missing directory fails before touching anything.
    assert!(sample_checkpoint().save(&dir.path().join("missing/m.bcnv")).is_err());
    assert_eq!(std::fs::read(&path).unwrap(), before);
    let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(leftovers, 1);
}

// ---- train ----

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("epochs = 0\nseed = 11");
    let out = cmd_train(&inv(cfg.clone(), dir.path())).unwrap();
    assert_eq!(read(&out.metrics), format!("{}\n", TrainReport::CSV_HEADER));
    let fresh = Network::<f32>::new(&cfg.network, 11).unwrap();
    let ckpt = Checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(ckpt, Checkpoint::from_store(&cfg.to_text(), &fresh.store));
}

#[test]
fn saved_model_evaluates_like_the_in_memory_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("cells = v2");
    let out = cmd_train(&inv(cfg.clone(), dir.path())).unwrap();
    let loaded = network_from_checkpoint::<f32>(&Checkpoint::load(&out.checkpoint).unwrap()).unwrap();

    // Re-run the same training in memory.
    let (train, eval) = load_datasets(&cfg).unwrap();
    let mut net = Network::<f32>::new(&cfg.network, cfg.seed).unwrap();
    let mut opt = ptl_core::training::Sgd::new(cfg.optimizer, &net.store).unwrap();
    let fo = ptl_core::training::FitOptions {
        epochs: cfg.epochs,
        train: cfg.train_options(),
        timing: false,
    };
    ptl_core::training::fit(&mut net, None, &train, Some(&eval), &mut opt, &fo, &mut ()).unwrap();
    let (x, _) = eval.gather::<f32>(&(0..eval.len()).collect::<Vec<_>>()).unwrap();
    assert!(net.predict(&x).unwrap().0.bit_eq(&loaded.predict(&x).unwrap().0));
}

#[test]
fn fine_tuning_chain_is_reproducible() {
    let run = |root: &Path| {
        let a = root.join("a");
        let b = root.join("b");
        let first = cmd_train(&inv(small("cells = v1\nseed = 4"), &a)).unwrap();
        let mut second = inv(small("cells = v1\nseed = 5\nsynth_variant = 1\ndata_seed = 9"), &b);
        second.init = Some(first.checkpoint.clone());
        let second = cmd_train(&second).unwrap();
        (
            read(&first.metrics),
            read(&second.metrics),
            std::fs::read(&second.checkpoint).unwrap(),
        )
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let r1 = run(d1.path());
    assert_eq!(r1, run(d2.path()));
    assert_eq!(r1.1.lines().count(), 3);
}

#[test]
fn init_with_other_topology_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let first = cmd_train(&inv(small("epochs = 0"), &dir.path().join("a"))).unwrap();
    let mut next = inv(small("epochs = 0\ncells = none"), &dir.path().join("b"));
    next.init = Some(first.checkpoint);
    let err = cmd_train(&next).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(err.to_string().contains("topology mismatch"), "{err}");
}

// ---- eval ----

fn trained(extra: &str, dir: &Path) -> std::path::PathBuf {
    cmd_train(&inv(small(extra), dir)).unwrap().checkpoint
}

#[test]
fn eval_report_is_independent_of_batch_size() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained("cells = v1", &dir.path().join("t"));
    let mut reports = Vec::new();
    for bs in [1, 5, 32] {
        let mut i = inv(small(&format!("batch_size = {bs}")), &dir.path().join(format!("e{bs}")));
        i.init = Some(ckpt.clone());
        reports.push(read(&cmd_eval(&i).unwrap().csv));
    }
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
    assert!(reports[0].starts_with(EVAL_HEADER));
    assert_eq!(reports[0].lines().count(), 1 + 3 + 1);
}

#[test]
fn converged_model_is_perfect_on_noise_free_training_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        synth_noise_std: 0.0,
        epochs: 4,
        eval_split: ptl_cli::config::Split::Train,
        network: ptl_core::network::NetworkConfig::default().backbone(),
        ..RunConfig::default()
    };
    let ckpt = cmd_train(&inv(cfg.clone(), &dir.path().join("t"))).unwrap().checkpoint;
    let mut i = inv(cfg, &dir.path().join("e"));
    i.init = Some(ckpt);
    let out = cmd_eval(&i).unwrap();
    assert_eq!(out.evaluation.accuracy(), 1.0, "{}", read(&out.csv));
}

#[test]
fn random_init_scores_near_chance() {
    // K = 3, n = 300: the binomial 99% band around 1/3 is 2.576 * sqrt(p(1-p)/n) ~ 0.070.
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let extra = format!("epochs = 0\nseed = {seed}\nsynth_eval_per_class = 100");
        let ckpt = trained(&extra, &dir.path().join(format!("t{seed}")));
        let mut i = inv(small(&extra), &dir.path().join(format!("e{seed}")));
        i.init = Some(ckpt);
        let acc = cmd_eval(&i).unwrap().evaluation.accuracy();
        let band = 2.576 * ((1.0 / 3.0) * (2.0 / 3.0) / 300.0f64).sqrt();
        assert!((acc - 1.0 / 3.0).abs() <= band, "seed {seed}: {acc}");
    }
}

#[test]
fn eval_refuses_a_corrupted_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained("epochs = 0", &dir.path().join("t"));
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 9] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let mut i = inv(small(""), &dir.path().join("e"));
    i.init = Some(ckpt);
    assert_eq!(cmd_eval(&i).unwrap_err().exit_code(), 4);
    i.init = None;
    assert_eq!(cmd_eval(&i).unwrap_err().exit_code(), 2);
}

// ---- distill ----

const STUDENT: &str = "cells = none\n";

#[test]
fn zero_lambda_distillation_equals_student_training() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = trained("cells = v1", &dir.path().join("teacher"));
    let plain = cmd_train(&inv(small(&format!("{STUDENT}lambda = 0")), &dir.path().join("plain"))).unwrap();
    let mut d = inv(small("cells = v1\nlambda = 0"), &dir.path().join("distill"));
    d.teacher = Some(teacher);
    let runs = cmd_distill(&d).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(read(&runs[0].metrics), read(&plain.metrics));
    let a = Checkpoint::load(&runs[0].checkpoint).unwrap();
    let b = Checkpoint::load(&plain.checkpoint).unwrap();
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.payload, b.payload);
}

#[test]
fn student_checkpoint_holds_no_teacher_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_path = trained("cells = v2\nepochs = 1", &dir.path().join("teacher"));
    let teacher = Checkpoint::load(&teacher_path).unwrap();
    let mut d = inv(small("epochs = 1"), &dir.path().join("distill"));
    d.teacher = Some(teacher_path);
    let student = Checkpoint::load(&cmd_distill(&d).unwrap()[0].checkpoint).unwrap();
    let backbone = Network::<f32>::new(&small("").network.backbone(), 0).unwrap();
    let names: Vec<&str> = student.manifest.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, backbone.store.names().iter().map(String::as_str).collect::<Vec<_>>());
    assert!(names.iter().all(|n| !n.contains("cell") && !n.contains("fuse") && !n.contains("fusion")));
    assert!(student.manifest.len() < teacher.manifest.len());
}

#[test]
fn lambda_sweep_emits_one_report_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let teacher = trained("cells = v1\nepochs = 1", &dir.path().join("teacher"));
    let mut d = inv(small("epochs = 1\nlambdas = 0,0.3,0.5,0.8,1"), &dir.path().join("sweep"));
    d.teacher = Some(teacher);
    let runs = cmd_distill(&d).unwrap();
    assert_eq!(runs.iter().map(|r| r.lambda).collect::<Vec<_>>(), vec![0.0, 0.3, 0.5, 0.8, 1.0]);
    for r in &runs {
        assert!(r.metrics.file_name().unwrap().to_str().unwrap().contains(&format!("_lambda{}", r.lambda)));
        assert_eq!(read(&r.metrics).lines().count(), 2);
        assert!(r.report.rows().iter().all(|row| row.loss.is_finite()));
    }
}

#[test]
fn distill_checks_teacher_and_feature_extent() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cmd_distill(&inv(small(""), dir.path())).unwrap_err().exit_code(), 2);
    let teacher = trained("cells = v1\nepochs = 0\nfeature_dim = 5", &dir.path().join("teacher"));
    let mut d = inv(small(""), &dir.path().join("distill"));
    d.teacher = Some(teacher);
    let err = cmd_distill(&d).unwrap_err();
    assert!(err.to_string().contains("feature_dim"), "{err}");
}

// ---- gradcheck ----

#[test]
fn gradcheck_reports_every_layer_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_gradcheck(&inv(small("cells = v2"), dir.path())).unwrap();
    assert!(out.passed(), "{:?}", out.failures());
    let text = read(&out.csv);
    for class in ["conv block", "stem cell", "pair cell", "fuse", "fusion", "head"] {
        assert!(text.contains(&format!("network,{class},")), "{class}");
    }
    assert!(text.contains("primitive,conv_transpose2d,"));
    assert!(text.contains("cell,bconv_cell_v2,"));
}

#[test]
fn gradcheck_catches_a_corrupted_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_gradcheck(&inv(small("gradcheck_fault = conv2d"), dir.path())).unwrap();
    assert!(!out.passed());
    assert!(out.failures().iter().any(|f| f == "primitive/conv2d"));
}

// ---- inspect-state ----

#[test]
fn inspect_in_eval_mode_reports_zero_states() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, csv) = cmd_inspect_state(&inv(small("cells = v2\ninspect_mode = eval"), dir.path())).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.l2 == 0.0 && r.mean == 0.0));
    assert!(read(&csv).starts_with(STATE_HEADER));
    assert!(rows.iter().any(|r| r.state == "h"));
}

#[test]
fn first_train_batch_matches_a_fresh_cell_and_norms_vary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("cells = v1\nseed = 3");
    let (rows, _) = cmd_inspect_state(&inv(cfg.clone(), dir.path())).unwrap();
    let stem: Vec<f64> = rows.iter().filter(|r| r.cell == "stem.cell").map(|r| r.l2).collect();
    assert_eq!(stem.len(), 4); // 24 samples in batches of 6
    assert!(stem.windows(2).any(|w| (w[0] - w[1]).abs() > 1e-6));

    // Fresh stem cell on the first batch, from zero state.
    let (train, _) = load_datasets(&cfg).unwrap();
    let order = ptl_core::data::BatchPlan::new(cfg.seed, cfg.batch_size).unwrap().batches(train.len(), 0);
    let (x, _) = train.gather::<f32>(&order[0]).unwrap();
    let net = Network::<f32>::new(&cfg.network, cfg.seed).unwrap();
    let ptl = net.ptl.as_ref().unwrap();
    let mut g = ptl_core::Graph::new();
    let p = net.store.bind(&mut g, false);
    let xi = g.constant(x);
    let fused = ptl.stem_fuse.forward(&mut g, &p, xi).unwrap();
    let fused = g.value(fused).clone();
    let zero = net.states()[0].clone();
    let (_, state) = cell_forward(&fused, &zero, &ptl.stem_cell, &net.store).unwrap();
    let l2 = state.c.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    assert!((l2 - stem[0]).abs() <= 1e-6 * l2.max(1.0), "{l2} vs {}", stem[0]);
}

#[test]
fn inspect_of_backbone_has_no_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, _) = cmd_inspect_state(&inv(small("cells = none"), dir.path())).unwrap();
    assert!(rows.is_empty());
}

// ---- binary ----

fn ptl(args: &[&str], dir: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ptl")).args(args).current_dir(dir).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.cfg"), SMALL).unwrap();
    std::fs::write(d.join("bad.cfg"), "lr = -1\n").unwrap();
    std::fs::write(d.join("cifar.cfg"), "dataset = cifar\ncifar_dir = nowhere\nresolution = 32\nclasses = 10\n").unwrap();
    std::fs::write(d.join("fault.cfg"), format!("{SMALL}gradcheck_fault = tanh\n")).unwrap();

    assert_eq!(ptl(&["train", "--config", "small.cfg", "--out", "run"], d).0, 0);
    assert!(d.join("run/model.bcnv").exists() && d.join("run/metrics.csv").exists());
    assert_eq!(ptl(&["eval", "--config", "small.cfg", "--init", "run/model.bcnv", "--out", "ev"], d).0, 0);
    assert_eq!(ptl(&["eval", "--config", "small.cfg", "--checkpoint", "run/model.bcnv", "--out", "ev"], d).0, 0);

    let (code, err) = ptl(&["train", "--config", "bad.cfg"], d);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("lr"));
    assert_eq!(ptl(&["train", "--config", "missing.cfg"], d).0, 2);
    assert_eq!(ptl(&["train", "--dtype", "f16"], d).0, 2);
    assert_eq!(ptl(&["train", "--config", "cifar.cfg"], d).0, 3);

    let mut bytes = std::fs::read(d.join("run/model.bcnv")).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    std::fs::write(d.join("broken.bcnv"), bytes).unwrap();
    assert_eq!(ptl(&["eval", "--config", "small.cfg", "--init", "broken.bcnv"], d).0, 4);

    assert_eq!(ptl(&["gradcheck", "--config", "fault.cfg", "--out", "gc"], d).0, 5);
    assert!(read(&d.join("gc/gradcheck.csv")).contains("false"));
}

#[test]
fn seed_and_dtype_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.cfg"), format!("{SMALL}epochs = 0\n").replace("epochs = 2\n", "")).unwrap();
    assert_eq!(ptl(&["train", "--config", "small.cfg", "--seed", "9", "--dtype", "f64", "--out", "o"], d).0, 0);
    let ckpt = Checkpoint::load(&d.join("o/model.bcnv")).unwrap();
    assert!(ckpt.manifest.iter().all(|e| e.dtype == ptl_core::DType::F64));
    let echo = RunConfig::parse(&ckpt.config).unwrap();
    assert_eq!(echo.seed, 9);
    let net = network_from_checkpoint::<f64>(&ckpt).unwrap();
    let fresh = Network::<f64>::new(&echo.network, 9).unwrap();
    assert!(net.store.tensors().iter().zip(fresh.store.tensors()).all(|(a, b)| a.bit_eq(b)));
    assert_eq!(net.mode(), Mode::Train);
}

#[test]
fn metrics_csv_is_reproducible_byte_for_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small("cells = v2\naugment = true\nstate_backprop = true");
    let ra = cmd_train(&inv(cfg.clone(), a.path())).unwrap();
    let rb = cmd_train(&inv(cfg, b.path())).unwrap();
    assert_eq!(read(&ra.metrics), read(&rb.metrics));
    assert_eq!(std::fs::read(&ra.checkpoint).unwrap(), std::fs::read(&rb.checkpoint).unwrap());
    let csv = read(&ra.metrics);
    assert!(!csv.contains('\r'));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0.000")));
}
