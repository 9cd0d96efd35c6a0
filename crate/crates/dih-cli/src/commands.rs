//! The six pipeline commands: generate data, train the teacher, fit the
//! heads, distill a student, analyze the cohort, run the ablation grid.
//!
//! Every command is deterministic under an identical resolved config:
//! reruns produce byte-identical files. Checkpoints written by earlier
//! phases are read-only inputs to later ones.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use dih_core::analysis::{ablation_run, capacity_ratio, head_stats, venn_counts, AblationMask};
use dih_core::checkpoint::{load_cohort, load_network, network_to_bytes, save_cohort, save_network};
use dih_core::cohort::{fit_heads, Cohort, HeadFitMetrics};
use dih_core::data::{export_csv, load_dataset, make_blobs, make_spirals, save_dataset, Dataset};
use dih_core::net::Network;
use dih_core::par;
use dih_core::train::{train, Mode, RunMetrics, TeachSource};

use crate::config::{DatasetSpec, ExperimentConfig};

/// Command failures, ordered by exit code: usage 2, file 3, contract 4,
/// integrity 5.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    File(String),
    Contract(String),
    Integrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::File(_) => 3,
            CliError::Contract(_) => 4,
            CliError::Integrity(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::File(m) => write!(f, "file error: {m}"),
            CliError::Contract(m) => write!(f, "contract error: {m}"),
            CliError::Integrity(m) => write!(f, "integrity error: {m}"),
        }
    }
}

impl From<dih_core::Error> for CliError {
    fn from(e: dih_core::Error) -> Self {
        use dih_core::Error::*;
        match e {
            Io(_) | MalformedHeader(_) | ChecksumMismatch { .. } | UnsupportedVersion(_) => {
                CliError::File(e.to_string())
            }
            Integrity(_) => CliError::Integrity(e.to_string()),
            Dimension { .. } | Contract(_) | State(_) => CliError::Contract(e.to_string()),
        }
    }
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

type CmdResult = Result<(), CliError>;

pub struct Workspace {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl Workspace {
    pub fn new(config: ExperimentConfig) -> Self {
        let out_dir = PathBuf::from(&config.out_dir);
        Workspace { config, out_dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> CmdResult {
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::File(format!("cannot create {}: {e}", self.out_dir.display())))
    }

    fn freeze_config(&self, command: &str, mode: Mode) -> CmdResult {
        let path = self.path(&format!("config_{command}.resolved.txt"));
        fs::write(&path, self.config.to_text(mode))
            .map_err(|e| CliError::File(format!("cannot write {}: {e}", path.display())))?;
        Ok(())
    }

    fn require(&self, name: &str, produced_by: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if !path.exists() {
            return Err(CliError::File(format!(
                "missing {}: run `{produced_by}` first",
                path.display()
            )));
        }
        Ok(path)
    }

    fn load_split(&self, name: &str) -> Result<Dataset, CliError> {
        let path = self.require(name, "gen-data")?;
        Ok(load_dataset(&path)?)
    }

    fn build_student(&self, input_dim: usize, classes: usize) -> Result<Network, CliError> {
        Ok(Network::from_dims(
            input_dim,
            &self.config.student.hidden,
            classes,
            self.config.student.activation,
            self.config.student.residual,
            vec![],
        )?)
    }

    fn write(&self, name: &str, contents: &str) -> CmdResult {
        let path = self.path(name);
        fs::write(&path, contents)
            .map_err(|e| CliError::File(format!("cannot write {}: {e}", path.display())))
    }
}

pub fn cmd_gen_data(ws: &Workspace, csv: bool) -> CmdResult {
    ws.ensure_out_dir()?;
    ws.freeze_config("gen_data", Mode::Ce)?;
    let (train_ds, test_ds) = match ws.config.dataset {
        DatasetSpec::Blobs { classes, per_class, dim, spread, seed } => {
            make_blobs(classes, per_class, dim, spread, seed)?
        }
        DatasetSpec::Spirals { classes, per_class, noise, seed } => {
            make_spirals(classes, per_class, noise, seed)?
        }
    };
    save_dataset(ws.path("train.ds"), &train_ds)?;
    save_dataset(ws.path("test.ds"), &test_ds)?;

    let mut manifest = String::new();
    match ws.config.dataset {
        DatasetSpec::Blobs { classes, per_class, dim, spread, seed } => {
            writeln!(manifest, "generator = blobs").unwrap();
            writeln!(manifest, "classes = {classes}").unwrap();
            writeln!(manifest, "per_class = {per_class}").unwrap();
            writeln!(manifest, "dim = {dim}").unwrap();
            writeln!(manifest, "spread = {spread}").unwrap();
            writeln!(manifest, "seed = {seed}").unwrap();
        }
        DatasetSpec::Spirals { classes, per_class, noise, seed } => {
            writeln!(manifest, "generator = spirals").unwrap();
            writeln!(manifest, "classes = {classes}").unwrap();
            writeln!(manifest, "per_class = {per_class}").unwrap();
            writeln!(manifest, "noise = {noise}").unwrap();
            writeln!(manifest, "seed = {seed}").unwrap();
        }
    }
    writeln!(manifest, "train_samples = {}", train_ds.len()).unwrap();
    writeln!(manifest, "test_samples = {}", test_ds.len()).unwrap();
    ws.write("manifest.txt", &manifest)?;

    if csv {
        export_csv(ws.path("train.csv"), &train_ds)?;
        export_csv(ws.path("test.csv"), &test_ds)?;
    }
    println!(
        "wrote {} ({} samples) and {} ({} samples)",
        ws.path("train.ds").display(),
        train_ds.len(),
        ws.path("test.ds").display(),
        test_ds.len()
    );
    Ok(())
}

fn metrics_csv(metrics: &RunMetrics) -> String {
    metrics.to_csv()
}

pub fn cmd_train_teacher(ws: &Workspace) -> CmdResult {
    ws.ensure_out_dir()?;
    ws.freeze_config("train_teacher", Mode::Ce)?;
    let train_ds = ws.load_split("train.ds")?;
    let test_ds = ws.load_split("test.ds")?;

    let teacher = Network::from_dims(
        train_ds.dim(),
        &ws.config.teacher.hidden,
        train_ds.num_classes(),
        ws.config.teacher.activation,
        ws.config.teacher.residual,
        ws.config.teacher.mounts.clone(),
    )?
    .init_params(ws.config.train_teacher.seed);

    let mut config = ws.config.train_teacher.clone();
    config.mode = Mode::Ce;
    let (teacher, metrics) = train(teacher, TeachSource::None, &train_ds, &test_ds, &config)?;

    save_network(ws.path("teacher.ckpt"), &teacher)?;
    ws.write("teacher_metrics.csv", &metrics_csv(&metrics))?;
    println!(
        "teacher: {} params, final test accuracy {:.2}% ({:.1}s)",
        teacher.param_count().total,
        metrics.final_test_acc,
        metrics.wall_time_secs
    );
    Ok(())
}

fn heads_metrics_csv(metrics: &HeadFitMetrics, k: usize) -> String {
    let mut out = String::from("epoch,lr,joint_loss");
    for j in 0..k {
        write!(out, ",head_{}_train_acc", j + 1).unwrap();
    }
    out.push('\n');
    for e in &metrics.epochs {
        write!(out, "{},{},{}", e.epoch, e.lr, e.joint_loss).unwrap();
        for acc in &e.head_train_acc {
            write!(out, ",{acc}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn cmd_fit_heads(ws: &Workspace) -> CmdResult {
    ws.ensure_out_dir()?;
    ws.freeze_config("fit_heads", Mode::Ce)?;
    let train_ds = ws.load_split("train.ds")?;
    let teacher_path = ws.require("teacher.ckpt", "train-teacher")?;
    let teacher_bytes_before = fs::read(&teacher_path)
        .map_err(|e| CliError::File(format!("cannot read {}: {e}", teacher_path.display())))?;
    let teacher = load_network(&teacher_path)?;

    let cohort = Cohort::attach_heads(teacher, ws.config.heads.activation, ws.config.heads.seed)?;
    let k = cohort.heads().len();
    let mut config = ws.config.train_heads.clone();
    config.mode = Mode::Ce;
    let (cohort, metrics) = fit_heads(cohort, &train_ds, &config)?;

    // Bug trap: the backbone must come out byte-identical.
    let teacher_bytes_after = network_to_bytes(cohort.teacher());
    if teacher_bytes_after != teacher_bytes_before {
        return Err(CliError::Integrity(
            "teacher backbone changed during head fitting".into(),
        ));
    }
    println!("backbone byte-equality: OK ({} bytes)", teacher_bytes_before.len());

    save_cohort(ws.path("cohort.ckpt"), &cohort)?;
    ws.write("heads_metrics.csv", &heads_metrics_csv(&metrics, k))?;
    if let Some(last) = metrics.epochs.last() {
        println!("fitted {k} heads; final train accuracies {:?}", last.head_train_acc);
    } else {
        println!("fitted {k} heads (no training epochs)");
    }
    Ok(())
}

pub fn cmd_distill(ws: &Workspace, mode: Mode) -> CmdResult {
    ws.ensure_out_dir()?;
    ws.freeze_config("distill", mode)?;
    let train_ds = ws.load_split("train.ds")?;
    let test_ds = ws.load_split("test.ds")?;

    // Prerequisites by mode; CE ignores any teacher material even if present.
    let teacher: Option<Network> = match mode {
        Mode::Kd => Some(load_network(ws.require("teacher.ckpt", "train-teacher")?)?),
        _ => None,
    };
    let cohort: Option<Cohort> = match mode {
        Mode::Dih | Mode::Ensemble => {
            Some(load_cohort(ws.require("cohort.ckpt", "fit-heads")?)?)
        }
        _ => None,
    };

    let seeds = &ws.config.seeds;
    let results: Vec<Result<(u64, RunMetrics), CliError>> = par::map_slice(seeds, |&seed| {
        let student = ws
            .build_student(train_ds.dim(), train_ds.num_classes())?
            .init_params(seed);
        let mut config = ws.config.train_student.clone();
        config.seed = seed;
        config.mode = mode;
        let source = match mode {
            Mode::Ce => TeachSource::None,
            Mode::Kd => TeachSource::Teacher(teacher.as_ref().expect("loaded for KD")),
            Mode::Dih | Mode::Ensemble => {
                TeachSource::Cohort(cohort.as_ref().expect("loaded for cohort modes"))
            }
        };
        let (student, metrics) = train(student, source, &train_ds, &test_ds, &config)?;
        save_network(ws.path(&format!("student_{}_seed{}.ckpt", mode.as_str(), seed)), &student)?;
        Ok((seed, metrics))
    });

    let mut finals = Vec::with_capacity(seeds.len());
    for result in results {
        let (seed, metrics) = result?;
        ws.write(
            &format!("metrics_{}_seed{}.csv", mode.as_str(), seed),
            &metrics_csv(&metrics),
        )?;
        println!("seed {seed}: final test accuracy {:.2}%", metrics.final_test_acc);
        finals.push(metrics.final_test_acc);
    }

    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    let min = finals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut summary = String::from("mode,seeds,mean_final_test_acc,min,max,range\n");
    writeln!(
        summary,
        "{},{},{},{},{},{}",
        mode.as_str(),
        finals.len(),
        mean,
        min,
        max,
        max - min
    )
    .unwrap();
    ws.write(&format!("summary_{}.csv", mode.as_str()), &summary)?;
    println!(
        "{} over {} seeds: mean {:.2}% (range {:.2})",
        mode.as_str(),
        finals.len(),
        mean,
        max - min
    );
    Ok(())
}

pub fn cmd_analyze(ws: &Workspace) -> CmdResult {
    ws.ensure_out_dir()?;
    ws.freeze_config("analyze", Mode::Ce)?;
    let train_ds = ws.load_split("train.ds")?;
    let cohort = load_cohort(ws.require("cohort.ckpt", "fit-heads")?)?;
    let size = cohort.size();
    let member_name = |j: usize| {
        if j + 1 == size {
            "main".to_string()
        } else {
            format!("head_{}", j + 1)
        }
    };

    let stats = head_stats(&cohort, &train_ds, ws.config.train_student.tau)?;
    let mut table = String::from("member,avg_entropy");
    for q in 0..size {
        write!(table, ",kl_vs_{}", member_name(q)).unwrap();
    }
    table.push('\n');
    for p in 0..size {
        write!(table, "{},{}", member_name(p), stats.avg_entropy[p]).unwrap();
        for q in 0..size {
            write!(table, ",{}", stats.kl_matrix[p][q]).unwrap();
        }
        table.push('\n');
    }
    ws.write("head_stats.csv", &table)?;

    let venn = venn_counts(&cohort, &train_ds)?;
    let mut listing = String::from("region");
    for j in 0..size {
        write!(listing, ",{}", member_name(j)).unwrap();
    }
    listing.push_str(",count\n");
    for (region, &count) in venn.region_counts.iter().enumerate() {
        write!(listing, "{region}").unwrap();
        for j in 0..size {
            write!(listing, ",{}", (region >> j) & 1).unwrap();
        }
        writeln!(listing, ",{count}").unwrap();
    }
    ws.write("venn.csv", &listing)?;

    // Capacity ratio of the configured pair, for the summary line.
    let student = ws.build_student(train_ds.dim(), train_ds.num_classes())?;
    let ratio = capacity_ratio(cohort.teacher(), &student)?;
    println!(
        "cohort of {size}: entropy range [{:.4}, {:.4}], capacity ratio {:.2}",
        stats.avg_entropy.iter().cloned().fold(f64::INFINITY, f64::min),
        stats.avg_entropy.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ratio
    );
    println!("wrote {} and {}", ws.path("head_stats.csv").display(), ws.path("venn.csv").display());
    Ok(())
}

pub fn cmd_ablate(ws: &Workspace, masks_arg: Option<&str>) -> CmdResult {
    ws.ensure_out_dir()?;
    ws.freeze_config("ablate", Mode::Dih)?;
    let train_ds = ws.load_split("train.ds")?;
    let test_ds = ws.load_split("test.ds")?;
    let cohort = load_cohort(ws.require("cohort.ckpt", "fit-heads")?)?;
    let size = cohort.size();

    let masks: Vec<AblationMask> = match masks_arg {
        Some(raw) => raw
            .split(',')
            .map(|s| AblationMask::parse(s.trim()).map_err(CliError::from))
            .collect::<Result<_, _>>()?,
        None => {
            if size > 8 {
                return Err(CliError::Usage(format!(
                    "full grid over {size} members is too large; pass --masks"
                )));
            }
            AblationMask::full_grid(size)
        }
    };
    if let Some(bad) = masks.iter().find(|m| m.len() != size) {
        return Err(CliError::Usage(format!(
            "mask {} has {} bits for a cohort of {size}",
            bad.csv_cells(),
            bad.len()
        )));
    }

    let student_template = ws.build_student(train_ds.dim(), train_ds.num_classes())?;
    let mut config = ws.config.train_student.clone();
    config.mode = Mode::Dih;
    let runs = ablation_run(&cohort, &student_template, &train_ds, &test_ds, &config, &masks)?;

    let mut table = String::new();
    for j in 0..size {
        if j + 1 == size {
            table.push_str("main,");
        } else {
            write!(table, "head_{},", j + 1).unwrap();
        }
    }
    table.push_str("accuracy\n");
    for run in &runs {
        writeln!(table, "{},{}", run.mask.csv_cells(), run.accuracy).unwrap();
        let bits: String =
            run.mask.bits().iter().map(|&b| if b { '1' } else { '0' }).collect();
        save_network(ws.path(&format!("student_mask_{bits}.ckpt")), &run.student)?;
    }
    ws.write("ablation.csv", &table)?;
    println!("ablation grid: {} rows over {} members", runs.len(), size);
    Ok(())
}

