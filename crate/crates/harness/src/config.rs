//! Run configuration, read from and written back to TOML.

use std::path::{Path, PathBuf};

use affiner::affiner::{AffinerParts, Method};
use affiner::backbone::ArchConfig;
use affiner::diffusion::{SamplerConfig, SamplerKind, Schedule};
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use crate::data::{Family, ImageSet, Mixture};
use crate::experiment::OptimSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Pretrain,
    Adapt,
    Sample,
    Ablate,
    Count,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Adapt => "adapt",
            Command::Sample => "sample",
            Command::Ablate => "ablate",
            Command::Count => "count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> anyhow::Result<Schedule> {
        Ok(Schedule::linear(self.steps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    /// Only `adam` is supported.
    pub kind: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let d = OptimSpec::default();
        Self {
            kind: "adam".into(),
            lr: d.lr,
            beta1: d.beta1,
            beta2: d.beta2,
        }
    }
}

impl OptimizerSpec {
    pub fn build(&self) -> anyhow::Result<OptimSpec> {
        if self.kind != "adam" {
            bail!("unsupported optimizer `{}` (only `adam`)", self.kind);
        }
        Ok(OptimSpec {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    /// `ddim` or `ddpm`.
    pub kind: String,
    pub steps: usize,
    pub eta: f64,
    pub guidance: Option<f64>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: "ddim".into(),
            steps: 50,
            eta: 0.0,
            guidance: None,
        }
    }
}

impl SamplerSpec {
    pub fn build(&self, seed: u64) -> anyhow::Result<SamplerConfig> {
        let kind = match self.kind.as_str() {
            "ddim" => SamplerKind::Ddim { eta: self.eta },
            "ddpm" => SamplerKind::Ddpm,
            other => bail!("unknown sampler `{other}` (expected ddim or ddpm)"),
        };
        Ok(SamplerConfig {
            kind,
            steps: self.steps,
            guidance: self.guidance,
            seed,
        })
    }
}

/// Named mixtures or explicit parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MixtureSpec {
    Named(String),
    Explicit(Mixture),
}

impl MixtureSpec {
    pub fn build(&self) -> anyhow::Result<Mixture> {
        match self {
            MixtureSpec::Named(n) => match n.as_str() {
                "source" => Ok(Mixture::source()),
                "target" => Ok(Mixture::target()),
                other => bail!("unknown mixture `{other}` (expected source, target, or explicit means/covs)"),
            },
            MixtureSpec::Explicit(m) => {
                if m.means.is_empty() || m.means.len() != m.covs.len() {
                    bail!("mixture needs one covariance per mean");
                }
                Ok(m.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    #[serde(rename = "gaussian-mixture-2d")]
    GaussianMixture2d { mixture: MixtureSpec },
    ProceduralImages { size: usize, families: Vec<Family> },
    PairedConditional { size: usize, families: Vec<Family> },
}

/// A dataset ready to draw from.
#[derive(Debug, Clone)]
pub enum Dataset {
    Points(Mixture),
    Images { set: ImageSet, paired: bool },
}

impl DatasetSpec {
    pub fn build(&self) -> anyhow::Result<Dataset> {
        Ok(match self {
            DatasetSpec::GaussianMixture2d { mixture } => Dataset::Points(mixture.build()?),
            DatasetSpec::ProceduralImages { size, families } | DatasetSpec::PairedConditional { size, families } => {
                if families.is_empty() {
                    bail!("image dataset needs at least one family");
                }
                Dataset::Images {
                    set: ImageSet::new(*size, families.clone()),
                    paired: matches!(self, DatasetSpec::PairedConditional { .. }),
                }
            }
        })
    }
}

/// One adaptation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub dataset: DatasetSpec,
    /// New classes appended after the unconditional row.
    #[serde(default)]
    pub new_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    /// Preset name (`dit_toy`, `dit_xl`, `point_set`, `cnn_toy`) or path to an arch file.
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Affiner branch rank; defaults to the architecture's rank rule.
    #[serde(default)]
    pub d_rank: Option<usize>,
    #[serde(default)]
    pub mask_ratio: f64,
    /// `affiner`, `lora`, or `bias-only`.
    #[serde(default = "default_method")]
    pub method: String,
    /// `full`, `b-only`, `a-only`, or `branch-only`.
    #[serde(default = "default_parts")]
    pub parts: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub adapter: Option<PathBuf>,
    /// Samples to draw (sample) or evaluate on (pretrain, adapt, ablate).
    #[serde(default = "default_count")]
    pub count: usize,
    /// Class to sample; defaults to the unconditional row.
    #[serde(default)]
    pub class: Option<usize>,
    /// Ablation rank sweep.
    #[serde(default)]
    pub d_sweep: Vec<usize>,
    /// Ablation variants; defaults to all four part masks plus LoRA.
    #[serde(default)]
    pub variants: Vec<String>,
    /// Also run the adaptation protocol on this second architecture and report both.
    #[serde(default)]
    pub compare_arch: Option<String>,
    #[serde(default)]
    pub pretrain_steps: Option<usize>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    /// Pretraining data; also the reference set when sampling.
    #[serde(default = "default_dataset")]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

fn default_arch() -> String {
    "point_set".into()
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/out")
}
fn default_steps() -> usize {
    1000
}
fn default_batch() -> usize {
    16
}
fn default_method() -> String {
    "affiner".into()
}
fn default_parts() -> String {
    "full".into()
}
fn default_count() -> usize {
    1000
}
fn default_dataset() -> DatasetSpec {
    DatasetSpec::GaussianMixture2d {
        mixture: MixtureSpec::Named("source".into()),
    }
}

impl RunConfig {
    /// Defaults for a command, as if the file held only `command = ...`.
    pub fn new(command: Command) -> Self {
        toml::from_str(&format!("command = \"{}\"", command.name())).expect("defaults parse")
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn arch_config(&self) -> anyhow::Result<ArchConfig> {
        resolve_arch(&self.arch)
    }

    pub fn rank(&self, arch: &ArchConfig) -> usize {
        self.d_rank.unwrap_or_else(|| arch.default_rank())
    }

    pub fn method(&self, arch: &ArchConfig) -> anyhow::Result<Method> {
        parse_method(&self.method, self.rank(arch))
    }

    pub fn parts(&self) -> anyhow::Result<AffinerParts> {
        AffinerParts::from_name(&self.parts).with_context(|| format!("unknown parts `{}`", self.parts))
    }

    /// Tasks to adapt; a config without a task list adapts to the shifted mixture under the name `target`.
    pub fn task_list(&self) -> Vec<TaskSpec> {
        if self.tasks.is_empty() {
            vec![TaskSpec {
                name: "target".into(),
                dataset: DatasetSpec::GaussianMixture2d {
                    mixture: MixtureSpec::Named("target".into()),
                },
                new_classes: 0,
            }]
        } else {
            self.tasks.clone()
        }
    }
}

pub fn parse_method(name: &str, rank: usize) -> anyhow::Result<Method> {
    Ok(match name {
        "affiner" => Method::Affiner { rank },
        "lora" => Method::Lora { rank },
        "bias-only" => Method::BiasOnly,
        other => bail!("unknown method `{other}` (expected affiner, lora, bias-only)"),
    })
}

/// A preset name or a path to an architecture file.
pub fn resolve_arch(name: &str) -> anyhow::Result<ArchConfig> {
    Ok(match name {
        "dit_toy" => ArchConfig::dit_toy(),
        "dit_xl" => ArchConfig::dit_xl(),
        "point_set" => ArchConfig::point_set(),
        "cnn_toy" => ArchConfig::cnn_toy(),
        path => ArchConfig::load(Path::new(path))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse("command = \"adapt\"").unwrap();
        assert_eq!(c.command, Command::Adapt);
        assert_eq!(c.optimizer.lr, 1e-3);
        assert_eq!(c.schedule, ScheduleSpec::default());
        assert_eq!(c.task_list().len(), 1);
        assert_eq!(c, RunConfig::new(Command::Adapt));
    }

    #[test]
    fn round_trip() {
        let text = r#"
            command = "adapt"
            arch = "point_set"
            seed = 3
            d_rank = 1
            [optimizer]
            lr = 3e-3
            [sampler]
            kind = "ddpm"
            steps = 100
            guidance = 2.0
            [[tasks]]
            name = "shifted"
            dataset = { kind = "gaussian-mixture-2d", mixture = "target" }
            [[tasks]]
            name = "custom"
            dataset = { kind = "gaussian-mixture-2d", mixture = { means = [[0.0, 1.0]], covs = [[[1.0, 0.0], [0.0, 1.0]]] } }
            [[tasks]]
            name = "shapes"
            new_classes = 2
            dataset = { kind = "paired-conditional", size = 16, families = ["disk", "ring"] }
        "#;
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.tasks.len(), 3);
        assert_eq!(c.tasks[2].new_classes, 2);
        assert!(matches!(c.tasks[1].dataset.build().unwrap(), Dataset::Points(_)));
        assert!(matches!(c.tasks[2].dataset.build().unwrap(), Dataset::Images { paired: true, .. }));
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.sampler.build(1).unwrap().kind, SamplerKind::Ddpm);
    }

    #[test]
    fn errors_name_the_problem() {
        assert!(RunConfig::parse("command = \"fly\"").is_err());
        assert!(RunConfig::parse("command = \"count\"\nbogus = 1").is_err());
        let mut c = RunConfig::new(Command::Adapt);
        c.method = "dora".into();
        assert!(c.method(&ArchConfig::point_set()).is_err());
        c.optimizer.kind = "sgd".into();
        assert!(c.optimizer.build().is_err());
        let bad = MixtureSpec::Named("nope".into());
        assert!(bad.build().is_err());
    }

    #[test]
    fn rank_defaults_to_rule() {
        let c = RunConfig::new(Command::Count);
        assert_eq!(c.rank(&ArchConfig::dit_xl()), 64);
    }
}
