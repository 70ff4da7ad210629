//! Run configuration: one JSON file per run, with flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use posedepth::adversarial::{discriminator_spec, AdvConfig};
use posedepth::generator::GeneratorSpecs;
use posedepth::io::json_hash;
use posedepth::net::MlpSpec;
use posedepth::refiner::{InputSource, LossPolicy, RefinerMode};
use posedepth::skeleton::SkeletonTopology;
use posedepth::synth::{CameraModel, SynthConfig};
use posedepth::train::TrainConfig;

/// Epoch budget and optimizer settings of one training stage; the seed comes
/// from the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    /// Head architectures; sized from the topology when absent.
    pub specs: Option<GeneratorSpecs>,
    pub train: TrainSection,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            specs: None,
            train: TrainSection {
                epochs: 10,
                batch_size: 64,
                learning_rate: 1e-3,
                max_grad_norm: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerSection {
    pub base_spec: Option<MlpSpec>,
    pub final_spec: Option<MlpSpec>,
    pub loss: LossPolicy,
    pub train: TrainSection,
    pub source: InputSource,
}

impl Default for RefinerSection {
    fn default() -> Self {
        Self {
            base_spec: None,
            final_spec: None,
            loss: LossPolicy::default(),
            train: TrainSection {
                epochs: 10,
                batch_size: 64,
                learning_rate: 1e-3,
                max_grad_norm: Some(2.0),
            },
            source: InputSource::Corrupted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialSection {
    pub lambda_adv: f64,
    pub d_steps_per_g_step: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub g_learning_rate: f64,
    pub d_learning_rate: f64,
    pub discriminator: Option<MlpSpec>,
}

impl Default for AdversarialSection {
    fn default() -> Self {
        let d = AdvConfig::for_topology(&SkeletonTopology::h36m());
        Self {
            lambda_adv: d.lambda_adv,
            d_steps_per_g_step: d.d_steps_per_g_step,
            epochs: d.epochs,
            batch_size: d.batch_size,
            g_learning_rate: d.g_learning_rate,
            d_learning_rate: d.d_learning_rate,
            discriminator: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random stream of the run; also overrides `synth.seed`.
    pub seed: u64,
    /// Topology JSON, relative to the config file; built-in H36M when absent.
    #[serde(default)]
    pub topology: Option<PathBuf>,
    #[serde(default)]
    pub camera: CameraModel,
    #[serde(default)]
    pub synth: SynthConfig,
    /// Size of the out-of-domain evaluation set.
    #[serde(default = "default_ood_count")]
    pub ood_count: usize,
    #[serde(default)]
    pub generator: GeneratorSection,
    #[serde(default)]
    pub refiner: RefinerSection,
    #[serde(default)]
    pub adversarial: AdversarialSection,
    /// Output directory, relative to the config file.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_ood_count() -> usize {
    2000
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            topology: None,
            camera: CameraModel::default(),
            synth: SynthConfig::default(),
            ood_count: default_ood_count(),
            generator: GeneratorSection::default(),
            refiner: RefinerSection::default(),
            adversarial: AdversarialSection::default(),
            out_dir: default_out_dir(),
        }
    }

    /// Parses a config; errors name the file, the field path and the line.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            anyhow!("{}: field `{path}`: {inner}", origin.display())
        })
    }
}

/// Command-line overrides of config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// A loaded config with paths resolved and derived objects built.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: RunConfig,
    pub topo: SkeletonTopology,
    pub out_dir: PathBuf,
    /// Hash of everything that affects results; the output location is excluded.
    pub hash: String,
}

impl Run {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = RunConfig::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::from_config(cfg, &base, overrides)
    }

    /// Resolves relative paths in `cfg` against `base`.
    pub fn from_config(mut cfg: RunConfig, base: &Path, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        cfg.synth.seed = cfg.seed;
        let topo = match &cfg.topology {
            Some(p) => {
                let full = base.join(p);
                let text = fs::read_to_string(&full).with_context(|| format!("reading topology {}", full.display()))?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize(de).map_err(|e| {
                    let field = e.path().to_string();
                    anyhow!("{}: field `{field}`: {}", full.display(), e.into_inner())
                })?
            }
            None => SkeletonTopology::h36m(),
        };
        let out_dir = match &overrides.out {
            Some(o) => o.clone(),
            None => base.join(&cfg.out_dir),
        };
        let run = Self {
            hash: config_hash(&cfg, &topo)?,
            cfg,
            topo,
            out_dir,
        };
        run.validate()?;
        Ok(run)
    }

    fn validate(&self) -> Result<()> {
        self.cfg.synth.validate(&self.topo)?;
        self.cfg.camera.validate()?;
        self.generator_specs().validate(&self.topo)?;
        self.adv_config().validate()?;
        self.cfg.refiner.loss.validate()?;
        for mode in [RefinerMode::Base, RefinerMode::Final] {
            let spec = self.refiner_spec(mode);
            if spec.input_dim != mode.input_dim(&self.topo) || spec.output_dim != 3 * self.topo.num_joints() {
                bail!("refiner.{}_spec has the wrong input or output size", mode_name(mode));
            }
            spec.validate()?;
        }
        self.cfg.generator.train.with_seed(self.cfg.seed).validate()?;
        self.cfg.refiner.train.with_seed(self.cfg.seed).validate()?;
        if self.cfg.ood_count == 0 {
            bail!("ood_count must be at least 1");
        }
        Ok(())
    }

    pub fn generator_specs(&self) -> GeneratorSpecs {
        self.cfg
            .generator
            .specs
            .clone()
            .unwrap_or_else(|| GeneratorSpecs::for_topology(&self.topo))
    }

    pub fn refiner_spec(&self, mode: RefinerMode) -> MlpSpec {
        let given = match mode {
            RefinerMode::Base => &self.cfg.refiner.base_spec,
            RefinerMode::Final => &self.cfg.refiner.final_spec,
        };
        given.clone().unwrap_or_else(|| mode.default_spec(&self.topo))
    }

    pub fn adv_config(&self) -> AdvConfig {
        let a = &self.cfg.adversarial;
        AdvConfig {
            lambda_adv: a.lambda_adv,
            d_steps_per_g_step: a.d_steps_per_g_step,
            epochs: a.epochs,
            batch_size: a.batch_size,
            g_learning_rate: a.g_learning_rate,
            d_learning_rate: a.d_learning_rate,
            seed: self.cfg.seed,
            discriminator: a.discriminator.clone().unwrap_or_else(|| discriminator_spec(&self.topo)),
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub fn mode_name(mode: RefinerMode) -> &'static str {
    match mode {
        RefinerMode::Base => "base",
        RefinerMode::Final => "final",
    }
}

fn config_hash(cfg: &RunConfig, topo: &SkeletonTopology) -> Result<String> {
    let mut keyed = cfg.clone();
    keyed.out_dir = PathBuf::new();
    keyed.topology = None;
    Ok(json_hash(&(keyed, topo.content_hash()))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::parse("{}", Path::new("c.json")).unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn errors_name_field_and_line() {
        let text = "{\n  \"seed\": 1,\n  \"refiner\": {\n    \"train\": {\"epochs\": \"ten\"}\n  }\n}";
        let err = RunConfig::parse(text, Path::new("c.json")).unwrap_err().to_string();
        assert!(err.contains("refiner.train.epochs"), "{err}");
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = RunConfig::parse("{\"seed\": 1, \"sed\": 2}", Path::new("c.json"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("sed"), "{err}");
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::with_seed(3);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&text, Path::new("c.json")).unwrap(), cfg);
    }

    #[test]
    fn hash_ignores_output_location_but_not_seed() {
        let base = Path::new(".");
        let a = Run::from_config(RunConfig::with_seed(1), base, &Overrides::default()).unwrap();
        let moved = Overrides {
            out: Some(PathBuf::from("elsewhere")),
            ..Overrides::default()
        };
        let b = Run::from_config(RunConfig::with_seed(1), base, &moved).unwrap();
        assert_eq!(a.hash, b.hash);
        let reseeded = Overrides {
            seed: Some(2),
            ..Overrides::default()
        };
        let c = Run::from_config(RunConfig::with_seed(1), base, &reseeded).unwrap();
        assert_ne!(a.hash, c.hash);
        assert_eq!(c.cfg.synth.seed, 2);
    }

    #[test]
    fn missing_topology_file_reported() {
        let mut cfg = RunConfig::with_seed(1);
        cfg.topology = Some(PathBuf::from("nope.json"));
        let err = Run::from_config(cfg, Path::new("."), &Overrides::default()).unwrap_err();
        assert!(format!("{err:#}").contains("nope.json"));
    }
}
