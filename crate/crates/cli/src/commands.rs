//! Phase implementations behind the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use tpkd_core::container::Checkpoint;
use tpkd_core::data::{
    corrupt, gen_synthetic, load_dataset, load_pi_dataset, save_dataset, save_pi_dataset,
    CorruptionLevel, Dataset, ModelData, PiDataset, Split,
};
use tpkd_core::distill::{
    train_student, train_teacher, FeatureTransfer, StudentOptions, TrainHyper, TrainOutcome,
};
use tpkd_core::error::Error;
use tpkd_core::metrics::{evaluate, linear_cka, pearson_patch_profile, EvalReport};
use tpkd_core::nn::graph::Graph;
use tpkd_core::nn::model::{InputKind, Model};
use tpkd_core::topology::batch_extract;
use tpkd_core::distill::similarity_map;

use crate::config::ExperimentConfig;
use crate::manifest::{hash_str, RunManifest};
use crate::{CliError, CliResult};

/// Training roles selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Role {
    Teacher1,
    Teacher2,
    Scratch,
    StudentKd,
    StudentBase,
    StudentAnn,
    StudentTpkd,
    StudentTpkdNoorth,
}

impl Role {
    pub fn name(&self) -> &'static str {
        match self {
            Role::Teacher1 => "teacher1",
            Role::Teacher2 => "teacher2",
            Role::Scratch => "scratch",
            Role::StudentKd => "student-kd",
            Role::StudentBase => "student-base",
            Role::StudentAnn => "student-ann",
            Role::StudentTpkd => "student-tpkd",
            Role::StudentTpkdNoorth => "student-tpkd-noorth",
        }
    }

    pub fn is_student(&self) -> bool {
        !matches!(self, Role::Teacher1 | Role::Teacher2)
    }
}

fn require(path: PathBuf) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact(path))
    }
}

struct Phase<'a> {
    cfg: &'a ExperimentConfig,
    manifest: RunManifest,
    config_hash: String,
    force: bool,
}

impl<'a> Phase<'a> {
    fn new(cfg: &'a ExperimentConfig, force: bool) -> Self {
        Phase {
            manifest: RunManifest::load(&cfg.out_dir),
            config_hash: hash_str(&cfg.canonical_json()),
            cfg,
            force,
        }
    }

    /// Run `body` unless the phase is already up to date. Returns the wall
    /// time in milliseconds when the phase actually ran.
    fn run<F>(&mut self, name: &str, inputs: &[PathBuf], outputs: &[PathBuf], body: F) -> CliResult<Option<u128>>
    where
        F: FnOnce() -> CliResult<()>,
    {
        if !self.force && self.manifest.is_up_to_date(name, &self.config_hash) {
            println!("{name}: up to date");
            return Ok(None);
        }
        let start = Instant::now();
        body()?;
        let wall_ms = start.elapsed().as_millis();
        self.manifest
            .record(name, &self.config_hash, wall_ms, inputs, outputs)?;
        self.manifest.save(&self.cfg.out_dir)?;
        println!("{name}: done in {wall_ms} ms");
        Ok(Some(wall_ms))
    }
}

/// Generate the train/val/test splits.
pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> CliResult<()> {
    let outputs = [
        cfg.data_path("train"),
        cfg.data_path("val"),
        cfg.data_path("test"),
    ];
    let mut phase = Phase::new(cfg, force);
    phase.run("gen-data", &[], &outputs, || {
        let d = &cfg.data;
        let specs = [
            ("train", Split::Train, d.train_per_class, d.seed),
            ("val", Split::Val, d.val_per_class, d.seed + 1),
            ("test", Split::Test, d.test_per_class, d.seed + 2),
        ];
        for (name, split, per_class, seed) in specs {
            let ds = gen_synthetic(d.classes, per_class, d.channels, d.length, seed)?
                .with_split(split);
            save_dataset(&ds, &cfg.data_path(name))?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Extract persistence images for every split, aligned index-for-index.
pub fn cmd_extract_pi(cfg: &ExperimentConfig, force: bool) -> CliResult<()> {
    let inputs = [
        require(cfg.data_path("train"))?,
        require(cfg.data_path("val"))?,
        require(cfg.data_path("test"))?,
    ];
    let outputs = [
        cfg.pi_path("train"),
        cfg.pi_path("val"),
        cfg.pi_path("test"),
    ];
    let mut phase = Phase::new(cfg, force);
    if let Some(wall_ms) = phase.run("extract-pi", &inputs, &outputs, || {
        for name in ["train", "val", "test"] {
            let ds = load_dataset(&cfg.data_path(name))?;
            let images = batch_extract(&ds.windows, &cfg.pi)?;
            let pi = PiDataset {
                labels: ds.labels(),
                classes: ds.classes,
                split: ds.split,
                generator_seed: ds.meta.generator_seed,
                images,
            };
            save_pi_dataset(&pi, &cfg.pi_path(name))?;
        }
        Ok(())
    })? {
        println!("extract-pi wall time recorded: {wall_ms} ms");
    }
    Ok(())
}

fn hyper(cfg: &ExperimentConfig) -> TrainHyper {
    TrainHyper {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        momentum: cfg.optim.momentum,
        weight_decay: cfg.optim.weight_decay,
    }
}

fn save_outcome(cfg: &ExperimentConfig, name: &str, out: &TrainOutcome) -> CliResult<Vec<PathBuf>> {
    let best = cfg.ckpt_path(&format!("{name}.best"));
    let final_ = cfg.ckpt_path(&format!("{name}.final"));
    let hist = cfg.history_path(name);
    out.best.save(&best)?;
    out.final_model.save(&final_)?;
    out.history.write_csv(&hist)?;
    Ok(vec![best, final_, hist])
}

fn student_options(cfg: &ExperimentConfig, role: Role) -> StudentOptions {
    let mut options = StudentOptions {
        cfg: cfg.distill.clone(),
        feature: FeatureTransfer::None,
        single_teacher: false,
    };
    match role {
        Role::StudentKd => options.single_teacher = true,
        Role::StudentBase | Role::StudentAnn => {}
        Role::StudentTpkd => options.feature = FeatureTransfer::OrthogonalPatchGram,
        Role::StudentTpkdNoorth => options.feature = FeatureTransfer::MergedMapMse,
        _ => unreachable!("teacher roles handled separately"),
    }
    options
}

fn role_anneals(cfg: &ExperimentConfig, role: Role) -> bool {
    match role {
        Role::StudentAnn => true,
        Role::StudentTpkd | Role::StudentTpkdNoorth => cfg.distill.anneal,
        _ => false,
    }
}

fn needs_pi(role: Role) -> bool {
    !matches!(role, Role::StudentKd | Role::Scratch)
}

/// Train one role. Teachers train once (first seed); student roles train
/// once per configured seed.
pub fn cmd_train(cfg: &ExperimentConfig, role: Role, force: bool) -> CliResult<()> {
    let series_sched = &cfg.schedules.series;
    let h = hyper(cfg);
    match role {
        Role::Teacher1 => {
            let inputs = [require(cfg.data_path("train"))?, require(cfg.data_path("val"))?];
            let mut phase = Phase::new(cfg, force);
            phase.run("train-teacher1", &inputs, &train_outputs(cfg, "teacher1"), || {
                let train = load_dataset(&cfg.data_path("train"))?;
                let val = load_dataset(&cfg.data_path("val"))?;
                let out = train_teacher(
                    &ModelData::Series(&train),
                    &ModelData::Series(&val),
                    &cfg.teacher1,
                    series_sched,
                    &h,
                    cfg.seeds[0],
                )?;
                println!(
                    "teacher1: best val acc {:.4} at epoch {}",
                    out.best_val_acc, out.best_epoch
                );
                save_outcome(cfg, "teacher1", &out)?;
                Ok(())
            })?;
        }
        Role::Teacher2 => {
            let inputs = [require(cfg.pi_path("train"))?, require(cfg.pi_path("val"))?];
            let mut phase = Phase::new(cfg, force);
            phase.run("train-teacher2", &inputs, &train_outputs(cfg, "teacher2"), || {
                let train = load_pi_dataset(&cfg.pi_path("train"))?;
                let val = load_pi_dataset(&cfg.pi_path("val"))?;
                let out = train_teacher(
                    &ModelData::Images(&train),
                    &ModelData::Images(&val),
                    &cfg.teacher2,
                    &cfg.schedules.image,
                    &h,
                    cfg.seeds[0],
                )?;
                println!(
                    "teacher2: best val acc {:.4} at epoch {}",
                    out.best_val_acc, out.best_epoch
                );
                save_outcome(cfg, "teacher2", &out)?;
                Ok(())
            })?;
        }
        Role::Scratch => {
            for &seed in &cfg.seeds {
                let name = format!("scratch-s{seed}");
                let inputs = [require(cfg.data_path("train"))?, require(cfg.data_path("val"))?];
                let mut phase = Phase::new(cfg, force);
                phase.run(&format!("train-{name}"), &inputs, &train_outputs(cfg, &name), || {
                    let train = load_dataset(&cfg.data_path("train"))?;
                    let val = load_dataset(&cfg.data_path("val"))?;
                    let out = train_teacher(
                        &ModelData::Series(&train),
                        &ModelData::Series(&val),
                        &cfg.student,
                        &cfg.schedules.student,
                        &h,
                        seed,
                    )?;
                    println!("{name}: best val acc {:.4}", out.best_val_acc);
                    save_outcome(cfg, &name, &out)?;
                    Ok(())
                })?;
            }
        }
        student => {
            let t1_path = require(cfg.ckpt_path("teacher1.best"))?;
            let needs_second = !matches!(student, Role::StudentKd);
            let t2_path = if needs_second {
                Some(require(cfg.ckpt_path("teacher2.best"))?)
            } else {
                None
            };
            for &seed in &cfg.seeds {
                let name = format!("{}-s{seed}", student.name());
                let mut inputs = vec![
                    require(cfg.data_path("train"))?,
                    require(cfg.data_path("val"))?,
                    t1_path.clone(),
                ];
                if let Some(p) = &t2_path {
                    inputs.push(p.clone());
                }
                if needs_pi(student) {
                    inputs.push(require(cfg.pi_path("train"))?);
                }
                let scratch_path = if role_anneals(cfg, student) {
                    let p = require(cfg.ckpt_path(&format!("scratch-s{seed}.final")))?;
                    inputs.push(p.clone());
                    Some(p)
                } else {
                    None
                };
                let mut phase = Phase::new(cfg, force);
                phase.run(&format!("train-{name}"), &inputs, &train_outputs(cfg, &name), || {
                    let train = load_dataset(&cfg.data_path("train"))?;
                    let val = load_dataset(&cfg.data_path("val"))?;
                    let pi_train = if needs_pi(student) {
                        Some(load_pi_dataset(&cfg.pi_path("train"))?)
                    } else {
                        None
                    };
                    let teacher1 = Model::load(&t1_path)?;
                    let teacher2 = match &t2_path {
                        Some(p) => Some(Model::load(p)?),
                        None => None,
                    };
                    let scratch = match &scratch_path {
                        Some(p) => Some(Checkpoint::load(p)?),
                        None => None,
                    };
                    let out = train_student(
                        &train,
                        pi_train.as_ref(),
                        &val,
                        &teacher1,
                        teacher2.as_ref(),
                        &cfg.student,
                        scratch.as_ref(),
                        &student_options(cfg, student),
                        &cfg.schedules.student,
                        &h,
                        seed,
                    )?;
                    println!("{name}: best val acc {:.4}", out.best_val_acc);
                    save_outcome(cfg, &name, &out)?;
                    Ok(())
                })?;
            }
        }
    }
    Ok(())
}

fn train_outputs(cfg: &ExperimentConfig, name: &str) -> Vec<PathBuf> {
    vec![
        cfg.ckpt_path(&format!("{name}.best")),
        cfg.ckpt_path(&format!("{name}.final")),
        cfg.history_path(name),
    ]
}

#[derive(Debug, Serialize)]
pub struct EvalDocument {
    pub checkpoint: String,
    pub corruption_level: usize,
    pub corruption: CorruptionLevel,
    pub corruption_seed: u64,
    pub report: EvalReport,
}

/// Evaluate a checkpoint on the (optionally corrupted) test split and write
/// a JSON report.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    corruption_level: usize,
    corruption_seed: u64,
    out_path: Option<&Path>,
) -> CliResult<EvalDocument> {
    let ckpt_path = require(ckpt.to_path_buf())?;
    let level = CorruptionLevel::numbered(corruption_level)
        .ok_or_else(|| Error::Config(format!("corruption level {corruption_level} not in 0..=3")))?;
    let model = Model::load(&ckpt_path)?;
    let test = load_dataset(&require(cfg.data_path("test"))?)?;
    let corrupted: Dataset = corrupt(&test, level, corruption_seed)?;

    let report = match model.spec.input_kind {
        InputKind::Series1d => evaluate(&model, &ModelData::Series(&corrupted))?,
        InputKind::Image2d => {
            // image models see persistence images extracted from the
            // corrupted series
            let images = batch_extract(&corrupted.windows, &cfg.pi)?;
            let pi = PiDataset {
                labels: corrupted.labels(),
                classes: corrupted.classes,
                split: corrupted.split,
                generator_seed: corrupted.meta.generator_seed,
                images,
            };
            evaluate(&model, &ModelData::Images(&pi))?
        }
    };
    let shown_ckpt = ckpt_path
        .strip_prefix(&cfg.out_dir)
        .unwrap_or(&ckpt_path)
        .display()
        .to_string();
    let doc = EvalDocument {
        checkpoint: shown_ckpt,
        corruption_level,
        corruption: level,
        corruption_seed,
        report,
    };
    let stem = ckpt_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "model".into());
    let default_path = cfg
        .out_dir
        .join("eval")
        .join(format!("{stem}-c{corruption_level}.json"));
    let path = out_path.map(Path::to_path_buf).unwrap_or(default_path);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::Io)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(&doc).expect("report serializes"))
        .map_err(Error::Io)?;
    println!(
        "eval {}: level {} accuracy {:.4} ece {:.4} nll {:.4} -> {}",
        stem,
        corruption_level,
        doc.report.accuracy,
        doc.report.ece,
        doc.report.nll,
        path.display()
    );
    Ok(doc)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub model: String,
    pub samples: usize,
    pub total_ms: f64,
    pub per_sample_ms: f64,
}

/// Per-sample inference latency (batch size 1) for teacher1, the
/// teacher2 pipeline (persistence-image extraction plus 2-D model), and the
/// student, over the test split.
pub fn cmd_bench(cfg: &ExperimentConfig, student_ckpt: Option<&Path>) -> CliResult<Vec<BenchRow>> {
    let test = load_dataset(&require(cfg.data_path("test"))?)?;
    let teacher1 = Model::load(&require(cfg.ckpt_path("teacher1.best"))?)?;
    let teacher2 = Model::load(&require(cfg.ckpt_path("teacher2.best"))?)?;
    let student_path = match student_ckpt {
        Some(p) => require(p.to_path_buf())?,
        None => require(cfg.ckpt_path(&format!("student-tpkd-s{}.best", cfg.seeds[0])))?,
    };
    let student = Model::load(&student_path)?;

    let series = ModelData::Series(&test);
    let n = test.len();
    let single_series = |model: &Model| -> CliResult<f64> {
        let start = Instant::now();
        for i in 0..n {
            let (shape, values, _) = series.gather(&[i]);
            let g = Graph::inference();
            let input = g.tensor(shape, values);
            let _ = model.forward_eval(&g, &input, &[])?;
        }
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };

    let t1_ms = single_series(&teacher1)?;
    let student_ms = single_series(&student)?;
    let t2_ms = {
        let start = Instant::now();
        for w in &test.windows {
            let imgs = batch_extract(std::slice::from_ref(w), &cfg.pi)?;
            let img = &imgs[0];
            let g = Graph::inference();
            let input = g.tensor(
                vec![1, img.channels, img.resolution, img.resolution],
                img.pixels.clone(),
            );
            let _ = teacher2.forward_eval(&g, &input, &[])?;
        }
        Ok::<f64, CliError>(start.elapsed().as_secs_f64() * 1e3)
    }?;

    let mk = |model: &str, total_ms: f64| BenchRow {
        model: model.to_string(),
        samples: n,
        total_ms,
        per_sample_ms: if n == 0 { 0.0 } else { total_ms / n as f64 },
    };
    let rows = vec![
        mk("teacher1-series", t1_ms),
        mk("teacher2-pi-pipeline", t2_ms),
        mk("student-series", student_ms),
    ];

    let path = cfg.out_dir.join("bench").join("timings.csv");
    std::fs::create_dir_all(path.parent().unwrap()).map_err(Error::Io)?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Config(e.to_string()))?;
    w.write_record(["model", "samples", "total_ms", "per_sample_ms"])
        .map_err(|e| Error::Config(e.to_string()))?;
    for r in &rows {
        w.write_record([
            r.model.clone(),
            r.samples.to_string(),
            format!("{:.3}", r.total_ms),
            format!("{:.5}", r.per_sample_ms),
        ])
        .map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush().map_err(Error::Io)?;
    for r in &rows {
        println!(
            "{:>22}: {} samples, {:.1} ms total, {:.4} ms/sample",
            r.model, r.samples, r.total_ms, r.per_sample_ms
        );
    }
    println!("bench table -> {}", path.display());
    Ok(rows)
}

/// Patch-Pearson histograms and layer-pair CKA matrices for external
/// plotting.
pub fn cmd_analyze(cfg: &ExperimentConfig, student_ckpt: Option<&Path>) -> CliResult<()> {
    const PEARSON_BINS: usize = 20;
    let test = load_dataset(&require(cfg.data_path("test"))?)?;
    let pi_test = load_pi_dataset(&require(cfg.pi_path("test"))?)?;
    let teacher1 = Model::load(&require(cfg.ckpt_path("teacher1.best"))?)?;
    let teacher2 = Model::load(&require(cfg.ckpt_path("teacher2.best"))?)?;
    let student_path = match student_ckpt {
        Some(p) => require(p.to_path_buf())?,
        None => require(cfg.ckpt_path(&format!("student-tpkd-s{}.best", cfg.seeds[0])))?,
    };
    let student = Model::load(&student_path)?;

    let b = cfg.batch_size.min(test.len());
    if b < 2 {
        return Err(Error::BatchTooSmall(b).into());
    }
    let b = b - b % cfg.distill.k;
    let indices: Vec<usize> = (0..b).collect();
    let stages: Vec<usize> = (0..cfg.student.stages).collect();

    let g = Graph::inference();
    let (series_shape, series_values, _) = ModelData::Series(&test).gather(&indices);
    let series_in = g.tensor(series_shape, series_values);
    let (pi_shape, pi_values, _) = ModelData::Images(&pi_test).gather(&indices);
    let pi_in = g.tensor(pi_shape, pi_values);
    let (_, t1_acts) = teacher1.forward_eval(&g, &series_in, &stages)?;
    let (_, t2_acts) = teacher2.forward_eval(&g, &pi_in, &stages)?;
    let (_, s_acts) = student.forward_eval(&g, &series_in, &stages)?;

    let dir = cfg.out_dir.join("analyze");
    std::fs::create_dir_all(&dir).map_err(Error::Io)?;

    for &stage in &stages {
        let g1 = similarity_map(&t1_acts[&stage])?;
        let g2 = similarity_map(&t2_acts[&stage])?;
        let merged = tpkd_core::distill::merge_maps(&g1, &g2, cfg.distill.alpha)?;
        let gs = similarity_map(&s_acts[&stage])?;
        let profiles = BTreeMap::from([
            ("teacher1", pearson_patch_profile(&g1, cfg.distill.k, PEARSON_BINS)?),
            ("teacher2", pearson_patch_profile(&g2, cfg.distill.k, PEARSON_BINS)?),
            ("merged", pearson_patch_profile(&merged, cfg.distill.k, PEARSON_BINS)?),
            ("student", pearson_patch_profile(&gs, cfg.distill.k, PEARSON_BINS)?),
        ]);
        let path = dir.join(format!("pearson-stage{stage}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Config(e.to_string()))?;
        let mut header = vec!["bin_lo".to_string(), "bin_hi".to_string()];
        header.extend(profiles.keys().map(|k| k.to_string()));
        w.write_record(&header).map_err(|e| Error::Config(e.to_string()))?;
        for bin in 0..PEARSON_BINS {
            let lo = -1.0 + 2.0 * bin as f64 / PEARSON_BINS as f64;
            let hi = lo + 2.0 / PEARSON_BINS as f64;
            let mut row = vec![format!("{lo:.2}"), format!("{hi:.2}")];
            row.extend(profiles.values().map(|p| p.histogram[bin].to_string()));
            w.write_record(&row).map_err(|e| Error::Config(e.to_string()))?;
        }
        w.flush().map_err(Error::Io)?;
        println!("pearson profiles (stage {stage}) -> {}", path.display());
    }

    for (name, acts) in [("teacher1", &t1_acts), ("teacher2", &t2_acts)] {
        let path = dir.join(format!("cka-{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Config(e.to_string()))?;
        let mut header = vec!["student_stage".to_string()];
        header.extend(stages.iter().map(|s| format!("{name}_stage{s}")));
        w.write_record(&header).map_err(|e| Error::Config(e.to_string()))?;
        for &ss in &stages {
            let mut row = vec![ss.to_string()];
            for &ts in &stages {
                let cka = linear_cka(&s_acts[&ss], &acts[&ts])?;
                row.push(format!("{cka:.6}"));
            }
            w.write_record(&row).map_err(|e| Error::Config(e.to_string()))?;
        }
        w.flush().map_err(Error::Io)?;
        println!("cka matrix vs {name} -> {}", path.display());
    }
    Ok(())
}
