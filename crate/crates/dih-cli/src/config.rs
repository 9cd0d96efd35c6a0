//! Sectioned key-value experiment configuration.
//!
//! A single plain-text file drives the whole pipeline: dataset generator,
//! teacher and student architectures, head settings, one training recipe
//! per phase, and the output directory. Flags override individual fields;
//! the resolved configuration (overrides applied) is re-serialized into
//! every run directory for provenance.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use dih_core::distill::{BlendWeight, Temperature};
use dih_core::net::Activation;
use dih_core::train::{Mode, TrainConfig};

/// A usage-class error: malformed or inconsistent configuration, named by
/// field.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type CResult<T> = Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs { classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64 },
    Spirals { classes: usize, per_class: usize, noise: f64, seed: u64 },
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Blobs { classes, .. } | DatasetSpec::Spirals { classes, .. } => *classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub residual: bool,
    pub mounts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    pub activation: Activation,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub teacher: ArchSpec,
    pub student: ArchSpec,
    pub heads: HeadSpec,
    pub train_teacher: TrainConfig,
    pub train_heads: TrainConfig,
    pub train_student: TrainConfig,
    pub out_dir: String,
    pub seeds: Vec<u64>,
}

fn parse_sections(text: &str) -> CResult<BTreeMap<String, BTreeMap<String, String>>> {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(ConfigError(format!("line {}: unterminated section header", lineno + 1)));
            }
            let name = line[1..line.len() - 1].trim().to_string();
            if sections.contains_key(&name) {
                return Err(ConfigError(format!("line {}: duplicate section [{name}]", lineno + 1)));
            }
            sections.insert(name.clone(), BTreeMap::new());
            current = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError(format!("line {}: expected 'key = value'", lineno + 1)));
        };
        let Some(section) = &current else {
            return Err(ConfigError(format!("line {}: key before any section", lineno + 1)));
        };
        let key = key.trim().to_string();
        let entry = sections.get_mut(section).expect("section exists");
        if entry.contains_key(&key) {
            return Err(ConfigError(format!("line {}: duplicate key {key}", lineno + 1)));
        }
        entry.insert(key, value.trim().to_string());
    }
    Ok(sections)
}

struct Section<'a> {
    name: &'a str,
    entries: &'a BTreeMap<String, String>,
}

impl<'a> Section<'a> {
    fn get(&self, key: &str) -> CResult<&'a str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ConfigError(format!("[{}] is missing key {key}", self.name)))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> CResult<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| ConfigError(format!("[{}] {key} = {raw:?} is not valid", self.name)))
    }

    fn parse_list(&self, key: &str) -> CResult<Vec<usize>> {
        let raw = self.get(key)?;
        parse_usize_list(raw)
            .map_err(|e| ConfigError(format!("[{}] {key} = {raw:?}: {e}", self.name)))
    }

    fn activation(&self, key: &str) -> CResult<Activation> {
        match self.get(key)? {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(ConfigError(format!(
                "[{}] {key} = {other:?} must be relu or identity",
                self.name
            ))),
        }
    }

    fn check_keys(&self, allowed: &[&str]) -> CResult<()> {
        for key in self.entries.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ConfigError(format!("[{}] has unknown key {key}", self.name)));
            }
        }
        Ok(())
    }
}

pub fn parse_usize_list(raw: &str) -> Result<Vec<usize>, String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(vec![]);
    }
    raw.split(',')
        .map(|v| v.trim().parse().map_err(|_| format!("{v:?} is not an integer")))
        .collect()
}

pub fn parse_u64_list(raw: &str) -> Result<Vec<u64>, String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(vec![]);
    }
    raw.split(',')
        .map(|v| v.trim().parse().map_err(|_| format!("{v:?} is not an integer")))
        .collect()
}

const TRAIN_KEYS: [&str; 10] = [
    "alpha",
    "tau",
    "lr0",
    "momentum",
    "weight_decay",
    "epochs",
    "batch_size",
    "lr_step_every",
    "lr_gamma",
    "seed",
];

fn parse_train(section: &Section, mode: Mode) -> CResult<TrainConfig> {
    section.check_keys(&TRAIN_KEYS)?;
    let alpha = BlendWeight::new(section.parse("alpha")?)
        .map_err(|e| ConfigError(format!("[{}] alpha: {e}", section.name)))?;
    let tau = Temperature::new(section.parse("tau")?)
        .map_err(|e| ConfigError(format!("[{}] tau: {e}", section.name)))?;
    let config = TrainConfig {
        alpha,
        tau,
        lr0: section.parse("lr0")?,
        momentum: section.parse("momentum")?,
        weight_decay: section.parse("weight_decay")?,
        epochs: section.parse("epochs")?,
        batch_size: section.parse("batch_size")?,
        lr_step_every: section.parse("lr_step_every")?,
        lr_gamma: section.parse("lr_gamma")?,
        seed: section.parse("seed")?,
        mode,
    };
    config
        .validate()
        .map_err(|e| ConfigError(format!("[{}]: {e}", section.name)))?;
    Ok(config)
}

fn parse_arch(section: &Section, with_mounts: bool) -> CResult<ArchSpec> {
    if with_mounts {
        section.check_keys(&["hidden", "activation", "residual", "mounts"])?;
    } else {
        section.check_keys(&["hidden", "activation", "residual"])?;
    }
    Ok(ArchSpec {
        hidden: section.parse_list("hidden")?,
        activation: section.activation("activation")?,
        residual: section.parse("residual")?,
        mounts: if with_mounts { section.parse_list("mounts")? } else { vec![] },
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CResult<Self> {
        let sections = parse_sections(text)?;
        let required = [
            "dataset",
            "teacher",
            "student",
            "heads",
            "train.teacher",
            "train.heads",
            "train.student",
            "output",
        ];
        for name in required {
            if !sections.contains_key(name) {
                return Err(ConfigError(format!("missing section [{name}]")));
            }
        }
        for name in sections.keys() {
            if !required.contains(&name.as_str()) {
                return Err(ConfigError(format!("unknown section [{name}]")));
            }
        }
        let section = |name: &'static str| Section { name, entries: &sections[name] };

        let ds = section("dataset");
        let dataset = match ds.get("kind")? {
            "blobs" => {
                ds.check_keys(&["kind", "classes", "per_class", "dim", "spread", "seed"])?;
                DatasetSpec::Blobs {
                    classes: ds.parse("classes")?,
                    per_class: ds.parse("per_class")?,
                    dim: ds.parse("dim")?,
                    spread: ds.parse("spread")?,
                    seed: ds.parse("seed")?,
                }
            }
            "spirals" => {
                ds.check_keys(&["kind", "classes", "per_class", "noise", "seed"])?;
                DatasetSpec::Spirals {
                    classes: ds.parse("classes")?,
                    per_class: ds.parse("per_class")?,
                    noise: ds.parse("noise")?,
                    seed: ds.parse("seed")?,
                }
            }
            other => {
                return Err(ConfigError(format!(
                    "[dataset] kind = {other:?} must be blobs or spirals"
                )))
            }
        };
        if dataset.classes() < 2 {
            return Err(ConfigError("[dataset] classes must be at least 2".into()));
        }

        let heads_section = section("heads");
        heads_section.check_keys(&["activation", "seed"])?;
        let heads = HeadSpec {
            activation: heads_section.activation("activation")?,
            seed: heads_section.parse("seed")?,
        };

        let output = section("output");
        output.check_keys(&["dir", "seeds"])?;
        let seeds = parse_u64_list(output.get("seeds")?)
            .map_err(|e| ConfigError(format!("[output] seeds: {e}")))?;
        if seeds.is_empty() {
            return Err(ConfigError("[output] seeds must list at least one seed".into()));
        }

        let config = ExperimentConfig {
            dataset,
            teacher: parse_arch(&section("teacher"), true)?,
            student: parse_arch(&section("student"), false)?,
            heads,
            train_teacher: parse_train(&section("train.teacher"), Mode::Ce)?,
            train_heads: parse_train(&section("train.heads"), Mode::Ce)?,
            train_student: parse_train(&section("train.student"), Mode::Dih)?,
            out_dir: output.get("dir")?.to_string(),
            seeds,
        };
        config.validate()?;
        Ok(config)
    }

    /// Structural consistency beyond per-field ranges: mounts must name
    /// valid teacher blocks.
    pub fn validate(&self) -> CResult<()> {
        for pair in self.teacher.mounts.windows(2) {
            if pair[0] >= pair[1] {
                return Err(ConfigError(format!(
                    "[teacher] mounts must be strictly increasing, got {:?}",
                    self.teacher.mounts
                )));
            }
        }
        if let Some(&last) = self.teacher.mounts.last() {
            if last >= self.teacher.hidden.len() {
                return Err(ConfigError(format!(
                    "[teacher] mount {last} out of range for {} blocks",
                    self.teacher.hidden.len()
                )));
            }
        }
        Ok(())
    }

    /// Canonical re-serialization; written into run directories after
    /// overrides are applied.
    pub fn to_text(&self, mode: Mode) -> String {
        let mut out = String::new();
        out.push_str("[dataset]\n");
        match &self.dataset {
            DatasetSpec::Blobs { classes, per_class, dim, spread, seed } => {
                writeln!(out, "kind = blobs").unwrap();
                writeln!(out, "classes = {classes}").unwrap();
                writeln!(out, "per_class = {per_class}").unwrap();
                writeln!(out, "dim = {dim}").unwrap();
                writeln!(out, "spread = {spread}").unwrap();
                writeln!(out, "seed = {seed}").unwrap();
            }
            DatasetSpec::Spirals { classes, per_class, noise, seed } => {
                writeln!(out, "kind = spirals").unwrap();
                writeln!(out, "classes = {classes}").unwrap();
                writeln!(out, "per_class = {per_class}").unwrap();
                writeln!(out, "noise = {noise}").unwrap();
                writeln!(out, "seed = {seed}").unwrap();
            }
        }
        let arch = |out: &mut String, name: &str, spec: &ArchSpec, with_mounts: bool| {
            writeln!(out, "\n[{name}]").unwrap();
            writeln!(out, "hidden = {}", join(&spec.hidden)).unwrap();
            writeln!(out, "activation = {}", activation_name(spec.activation)).unwrap();
            writeln!(out, "residual = {}", spec.residual).unwrap();
            if with_mounts {
                writeln!(out, "mounts = {}", join(&spec.mounts)).unwrap();
            }
        };
        arch(&mut out, "teacher", &self.teacher, true);
        arch(&mut out, "student", &self.student, false);
        writeln!(out, "\n[heads]").unwrap();
        writeln!(out, "activation = {}", activation_name(self.heads.activation)).unwrap();
        writeln!(out, "seed = {}", self.heads.seed).unwrap();
        let train = |out: &mut String, name: &str, c: &TrainConfig| {
            writeln!(out, "\n[{name}]").unwrap();
            writeln!(out, "alpha = {}", c.alpha.get()).unwrap();
            writeln!(out, "tau = {}", c.tau.get()).unwrap();
            writeln!(out, "lr0 = {}", c.lr0).unwrap();
            writeln!(out, "momentum = {}", c.momentum).unwrap();
            writeln!(out, "weight_decay = {}", c.weight_decay).unwrap();
            writeln!(out, "epochs = {}", c.epochs).unwrap();
            writeln!(out, "batch_size = {}", c.batch_size).unwrap();
            writeln!(out, "lr_step_every = {}", c.lr_step_every).unwrap();
            writeln!(out, "lr_gamma = {}", c.lr_gamma).unwrap();
            writeln!(out, "seed = {}", c.seed).unwrap();
        };
        train(&mut out, "train.teacher", &self.train_teacher);
        train(&mut out, "train.heads", &self.train_heads);
        train(&mut out, "train.student", &self.train_student);
        writeln!(out, "\n[output]").unwrap();
        writeln!(out, "dir = {}", self.out_dir).unwrap();
        writeln!(
            out,
            "seeds = {}",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        )
        .unwrap();
        writeln!(out, "\n# resolved for mode = {}", mode.as_str()).unwrap();
        out
    }
}

fn join(list: &[usize]) -> String {
    list.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Identity => "identity",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const SAMPLE: &str = r#"
[dataset]
kind = spirals
classes = 3
per_class = 50
noise = 0.05
seed = 7

[teacher]
hidden = 12,12,12
activation = relu
residual = true
mounts = 0,1

[student]
hidden = 6
activation = relu
residual = false

[heads]
activation = identity
seed = 99

[train.teacher]
alpha = 0.1
tau = 2
lr0 = 0.02
momentum = 0.9
weight_decay = 0.0005
epochs = 10
batch_size = 16
lr_step_every = 60
lr_gamma = 0.2
seed = 1

[train.heads]
alpha = 0.1
tau = 2
lr0 = 0.02
momentum = 0.9
weight_decay = 0.0005
epochs = 5
batch_size = 16
lr_step_every = 60
lr_gamma = 0.2
seed = 2

[train.student]
alpha = 0.3
tau = 2
lr0 = 0.03
momentum = 0.9
weight_decay = 0.0005
epochs = 8
batch_size = 16
lr_step_every = 60
lr_gamma = 0.2
seed = 3

[output]
dir = runs/sample
seeds = 1,2,3
"#;

    #[test]
    fn sample_parses() {
        let config = ExperimentConfig::parse(SAMPLE).unwrap();
        assert_eq!(config.dataset.classes(), 3);
        assert_eq!(config.teacher.hidden, vec![12, 12, 12]);
        assert_eq!(config.teacher.mounts, vec![0, 1]);
        assert_eq!(config.seeds, vec![1, 2, 3]);
        assert_eq!(config.train_student.epochs, 8);
    }

    #[test]
    fn resolved_text_round_trips() {
        let config = ExperimentConfig::parse(SAMPLE).unwrap();
        let text = config.to_text(Mode::Dih);
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back.teacher.hidden, config.teacher.hidden);
        assert_eq!(back.train_student.lr0, config.train_student.lr0);
        assert_eq!(back.out_dir, config.out_dir);
    }

    #[test]
    fn unknown_key_is_named() {
        let bad = SAMPLE.replace("noise = 0.05", "noise = 0.05\nwobble = 3");
        let err = ExperimentConfig::parse(&bad).unwrap_err();
        assert!(err.0.contains("wobble"), "{}", err.0);
    }

    #[test]
    fn invalid_mounts_rejected() {
        let bad = SAMPLE.replace("mounts = 0,1", "mounts = 0,5");
        let err = ExperimentConfig::parse(&bad).unwrap_err();
        assert!(err.0.contains("mount"), "{}", err.0);
    }

    #[test]
    fn bad_alpha_is_usage_error() {
        let bad = SAMPLE.replace("alpha = 0.3", "alpha = 1.5");
        assert!(ExperimentConfig::parse(&bad).is_err());
    }
}
