//! Experiment configuration: presets, TOML files, flag overrides, validation.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use ntk_features::entk::{Collapse, EvalSet, KernelSpec};
use ntk_features::io::sha256_hex;
use ntk_features::models::{ImportanceSpec, LayerSelection, ModelParams};
use ntk_features::training::{init_params, ArchSpec, EarlyStop, OptimizerKind, TrainConfig};

/// Rejected before any computation; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    TmsDense,
    TmsSparse,
    ModaddP29,
    ModaddSmall,
}

impl Preset {
    fn source(self) -> &'static str {
        match self {
            Preset::TmsDense => include_str!("../presets/tms-dense.toml"),
            Preset::TmsSparse => include_str!("../presets/tms-sparse.toml"),
            Preset::ModaddP29 => include_str!("../presets/modadd-p29.toml"),
            Preset::ModaddSmall => include_str!("../presets/modadd-small.toml"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Tms,
    Modadd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisStep {
    Cliffs,
    Heatmaps,
    Disentangle,
    TimeSeries,
}

/// How a cliff eigenspace is chosen for rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CliffChoice {
    /// The nominal size: `4⌊p/2⌋` per cliff.
    Fixed,
    /// Whatever `detect_cliffs` reports.
    Detected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TmsSection {
    pub n: usize,
    pub m: usize,
    pub samples: usize,
    pub sparsity: f64,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModaddSection {
    pub p: usize,
    pub n_hid: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// 0 keeps only the first and last checkpoints.
    pub checkpoint_every: usize,
    /// 0 disables early stopping.
    pub early_stop_window: usize,
    pub early_stop_min_improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    /// `collapse/layers[/beta=x][/center|/nocenter][/eval=full|train|test]`
    pub specs: Vec<String>,
    pub dense_cap: usize,
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub steps: Vec<AnalysisStep>,
    pub cliff_ratio: f64,
    pub cliff_floor: f64,
    pub first_cliff: CliffChoice,
    pub second_cliff: CliffChoice,
    pub offset: usize,
    pub reconstruction_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tms: Option<TmsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modadd: Option<ModaddSection>,
    pub training: TrainingSection,
    pub kernels: KernelSection,
    pub analysis: AnalysisSection,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
}

/// Deep merge: tables combine key by key, anything else is replaced.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_toml(src: &str, origin: &str) -> Result<toml::Value, ConfigError> {
    src.parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| ConfigError(format!("{origin}: {e}")))
}

impl ExperimentConfig {
    /// Layers a config file over a preset (or over the experiment's default
    /// preset), applies flag overrides and validates the result.
    pub fn resolve(
        preset: Option<Preset>,
        file: Option<&Path>,
        overrides: &Overrides,
    ) -> Result<Self, ConfigError> {
        let user = match file {
            Some(path) => {
                let src = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
                Some(parse_toml(&src, &path.display().to_string())?)
            }
            None => None,
        };
        let base_preset = match (preset, &user) {
            (Some(p), _) => p,
            (None, Some(u)) => match u.get("experiment").and_then(|v| v.as_str()) {
                Some("tms") => Preset::TmsDense,
                Some("modadd") => Preset::ModaddP29,
                Some(other) => return invalid(format!("unknown experiment {other:?}")),
                None => return invalid("config file must set `experiment`"),
            },
            (None, None) => return invalid("pass --config or --preset"),
        };
        let mut value = parse_toml(base_preset.source(), "preset")?;
        if let Some(u) = user {
            let switches = u.get("experiment") != value.get("experiment");
            if switches {
                // The other experiment's model section would otherwise linger.
                if let toml::Value::Table(t) = &mut value {
                    t.remove("tms");
                    t.remove("modadd");
                }
            }
            merge(&mut value, u);
        }
        let mut cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        if let Some(e) = overrides.epochs {
            cfg.training.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (self.experiment, &self.tms, &self.modadd) {
            (Experiment::Tms, Some(t), None) => {
                if t.n == 0 || t.m == 0 || t.samples == 0 {
                    return invalid("tms: n, m and samples must be positive");
                }
                if !(0.0..1.0).contains(&t.sparsity) {
                    return invalid(format!(
                        "tms: sparsity must lie in [0, 1), got {}",
                        t.sparsity
                    ));
                }
                ImportanceSpec::new(t.importance).map_err(|e| ConfigError(e.to_string()))?;
            }
            (Experiment::Modadd, None, Some(m)) => {
                if m.p < 3 || m.n_hid == 0 {
                    return invalid("modadd: need p ≥ 3 and n_hid ≥ 1");
                }
                if !(m.alpha > 0.0 && m.alpha < 1.0) {
                    return invalid(format!("modadd: alpha must lie in (0, 1), got {}", m.alpha));
                }
            }
            (e, _, _) => {
                return invalid(format!(
                    "experiment {e:?} needs exactly its own [{}] section",
                    if e == Experiment::Tms {
                        "tms"
                    } else {
                        "modadd"
                    }
                ))
            }
        }
        self.train_config()
            .validate()
            .map_err(|e| ConfigError(format!("training: {e}")))?;

        let k = &self.kernels;
        if k.specs.is_empty() || k.dense_cap == 0 || k.top_k == 0 {
            return invalid("kernels: need at least one spec and positive dense_cap, top_k");
        }
        let probe: ModelParams<f64> = init_params(self.arch(), 0);
        let n_classes = match self.arch() {
            ArchSpec::Tms { n, .. } => n,
            ArchSpec::Modmlp { p, .. } => p,
        };
        for s in &k.specs {
            let spec = self.parse_spec(s)?;
            spec.validate(&probe, n_classes)
                .map_err(|e| ConfigError(format!("kernel spec {s:?}: {e}")))?;
        }
        let labels: Vec<String> = k.specs.iter().map(|s| spec_label(s)).collect();
        if (1..labels.len()).any(|i| labels[..i].contains(&labels[i])) {
            return invalid("kernels: duplicate spec");
        }

        let a = &self.analysis;
        if !(a.cliff_ratio > 1.0) || !(a.cliff_floor > 0.0) {
            return invalid("analysis: need cliff_ratio > 1 and cliff_floor > 0");
        }
        if !(a.reconstruction_threshold > 0.0) {
            return invalid("analysis: reconstruction_threshold must be positive");
        }
        for step in &a.steps {
            let ok = match (self.experiment, step) {
                (_, AnalysisStep::Cliffs | AnalysisStep::Heatmaps) => true,
                (Experiment::Modadd, _) => true,
                (Experiment::Tms, _) => false,
            };
            if !ok {
                return invalid(format!("analysis step {step:?} is not defined for tms"));
            }
        }
        if let Some(m) = &self.modadd {
            let h = m.p / 2;
            if a.offset >= 2 * h {
                return invalid(format!(
                    "analysis: offset {} leaves nothing to rotate",
                    a.offset
                ));
            }
            let time = a.steps.contains(&AnalysisStep::TimeSeries)
                || a.steps.contains(&AnalysisStep::Disentangle);
            if time && self.training.checkpoint_every == 0 {
                return invalid("time series and disentangle need checkpoint_every > 0");
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchSpec {
        match (&self.tms, &self.modadd) {
            (Some(t), _) => ArchSpec::Tms { m: t.m, n: t.n },
            (_, Some(m)) => ArchSpec::Modmlp {
                p: m.p,
                n_hid: m.n_hid,
            },
            _ => unreachable!("validated"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        let mut epochs: Vec<usize> = if t.checkpoint_every == 0 {
            vec![0]
        } else {
            (0..=t.epochs).step_by(t.checkpoint_every).collect()
        };
        if epochs.last() != Some(&t.epochs) {
            epochs.push(t.epochs);
        }
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            optimizer: t.optimizer,
            weight_decay: t.weight_decay,
            betas: t.betas,
            eps: t.eps,
            seed: self.seed,
            checkpoint_epochs: epochs,
            early_stop: (t.early_stop_window > 0).then_some(EarlyStop {
                window: t.early_stop_window,
                min_improvement: t.early_stop_min_improvement,
            }),
            ..TrainConfig::tms_default()
        }
    }

    pub fn importance(&self) -> ImportanceSpec {
        ImportanceSpec {
            base: self.tms.as_ref().map_or(0.8, |t| t.importance),
        }
    }

    /// Parses one `[kernels] specs` entry on top of the experiment default.
    pub fn parse_spec(&self, s: &str) -> Result<KernelSpec, ConfigError> {
        let bad = |why: &str| ConfigError(format!("kernel spec {s:?}: {why}"));
        let mut spec = match self.experiment {
            Experiment::Tms => KernelSpec::tms_default(),
            Experiment::Modadd => KernelSpec::modadd_default(),
        };
        spec.importance = self.importance();
        let mut parts = s.split('/');
        spec.collapse = match parts.next().unwrap_or("") {
            "class_trace" => Collapse::ClassTrace,
            "flattened" => Collapse::Flattened,
            c => match c.strip_prefix("per_class=") {
                Some(k) => Collapse::PerClass(k.parse().map_err(|_| bad("bad class index"))?),
                None => {
                    return Err(bad(
                        "collapse must be class_trace, flattened or per_class=K",
                    ))
                }
            },
        };
        spec.layers = parts
            .next()
            .ok_or_else(|| bad("missing layer selection"))?
            .parse::<LayerSelection>()
            .map_err(|e| bad(&e.to_string()))?;
        for opt in parts {
            match opt.split_once('=') {
                Some(("beta", v)) => spec.beta = v.parse().map_err(|_| bad("bad beta"))?,
                Some(("eval", "full")) => spec.eval_set = EvalSet::Full,
                Some(("eval", "train")) => spec.eval_set = EvalSet::Train,
                Some(("eval", "test")) => spec.eval_set = EvalSet::Test,
                None if opt == "center" => spec.center = true,
                None if opt == "nocenter" => spec.center = false,
                _ => return Err(bad(&format!("unknown option {opt:?}"))),
            }
        }
        Ok(spec)
    }

    pub fn specs(&self) -> Vec<(String, KernelSpec)> {
        self.kernels
            .specs
            .iter()
            .map(|s| (spec_label(s), self.parse_spec(s).expect("validated")))
            .collect()
    }

    /// Hash of everything that affects results (the output directory does not).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serialises"))
    }

    /// Hash of the fields that determine the training run.
    pub fn training_hash(&self) -> String {
        let key = (
            self.experiment,
            self.seed,
            &self.tms,
            &self.modadd,
            &self.training,
        );
        sha256_hex(&serde_json::to_vec(&key).expect("config serialises"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// File-name-safe form of a spec string.
pub fn spec_label(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect::<String>()
        .replace("beta-", "beta")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(src: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), src).unwrap();
        f
    }

    #[test]
    fn presets_validate_and_carry_reference_sizes() {
        for p in [
            Preset::TmsDense,
            Preset::TmsSparse,
            Preset::ModaddP29,
            Preset::ModaddSmall,
        ] {
            ExperimentConfig::resolve(Some(p), None, &Overrides::default()).unwrap();
        }
        let t =
            ExperimentConfig::resolve(Some(Preset::TmsDense), None, &Overrides::default()).unwrap();
        let tms = t.tms.unwrap();
        assert_eq!((tms.n, tms.samples, tms.importance), (50, 500, 0.8));
        let m = ExperimentConfig::resolve(Some(Preset::ModaddP29), None, &Overrides::default())
            .unwrap();
        let ma = m.modadd.unwrap();
        assert_eq!((ma.p, ma.n_hid, ma.alpha), (29, 512, 0.7));
    }

    #[test]
    fn file_overrides_preset_and_flags_override_file() {
        let f = write("experiment = \"modadd\"\n[modadd]\np = 7\n[training]\nepochs = 3\n");
        let o = Overrides {
            seed: Some(9),
            ..Default::default()
        };
        let c = ExperimentConfig::resolve(None, Some(f.path()), &o).unwrap();
        assert_eq!(c.modadd.as_ref().unwrap().p, 7);
        assert_eq!(c.modadd.as_ref().unwrap().n_hid, 512);
        assert_eq!((c.training.epochs, c.seed), (3, 9));
        assert_eq!(c.train_config().checkpoint_epochs, vec![0, 3]);
    }

    #[test]
    fn switching_experiment_drops_the_other_section() {
        let f = write("experiment = \"tms\"\n[tms]\nn = 4\nm = 2\nsamples = 10\nsparsity = 0.5\nimportance = 0.9\n[kernels]\nspecs = [\"flattened/all\"]\n[analysis]\nsteps = [\"cliffs\"]\n");
        let c = ExperimentConfig::resolve(
            Some(Preset::ModaddSmall),
            Some(f.path()),
            &Overrides::default(),
        )
        .unwrap();
        assert!(c.modadd.is_none());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for src in [
            "experiment = \"modadd\"\n[modadd]\nalpha = 1.5\n",
            "experiment = \"modadd\"\n[training]\nlr = -1.0\n",
            "experiment = \"modadd\"\n[kernels]\nspecs = [\"diagonal/all\"]\n",
            "experiment = \"modadd\"\n[kernels]\nspecs = [\"class_trace/layer3\"]\n",
            "experiment = \"modadd\"\n[analysis]\nsteps = [\"plots\"]\n",
            "experiment = \"modadd\"\ntypo = 1\n",
            "experiment = \"tms\"\n[analysis]\nsteps = [\"disentangle\"]\n",
            "experiment = \"tms\"\n[kernels]\nspecs = [\"per_class=99/all\"]\n",
            "experiment = \"graph\"\n",
            "not toml",
        ] {
            let f = write(src);
            assert!(
                ExperimentConfig::resolve(None, Some(f.path()), &Overrides::default()).is_err(),
                "{src}"
            );
        }
    }

    #[test]
    fn spec_strings() {
        let c =
            ExperimentConfig::resolve(Some(Preset::TmsDense), None, &Overrides::default()).unwrap();
        let s = c
            .parse_spec("flattened/all/beta=0.3/center/eval=full")
            .unwrap();
        assert_eq!(s.collapse, Collapse::Flattened);
        assert_eq!((s.beta, s.center, s.eval_set), (0.3, true, EvalSet::Full));
        assert_eq!(
            spec_label("flattened/all/beta=0.3"),
            "flattened-all-beta0.3"
        );
        assert_eq!(
            c.parse_spec("per_class=3/1").unwrap().collapse,
            Collapse::PerClass(3)
        );
    }

    #[test]
    fn hash_ignores_output_directory() {
        let a = ExperimentConfig::resolve(Some(Preset::ModaddSmall), None, &Overrides::default())
            .unwrap();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.training_hash(), b.training_hash());
    }
}
