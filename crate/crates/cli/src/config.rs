//! The declarative run configuration and the provenance record written next
//! to every output.

use std::path::{Path, PathBuf};

use cofm_core::advprior::PriorConfig;
use cofm_core::flowgen::{ConditionConfig, FlowTrainConfig};
use cofm_core::nnet::TrainConfig;
use cofm_core::pipeline::GenerateConfig;
use cofm_core::stabsim::RefineConfig;
use cofm_core::strategy::StrategyTrainConfig;
use cofm_core::synthdata::EpisodeParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{internal, invalid, CliResult};

/// Contact guidance weight of generated runs. The contact loss is averaged
/// over every active anchor of the sequence, so the library default of 0.1
/// hardly moves the wrists.
pub const RUN_GUIDANCE_WEIGHT: f64 = 20.0;

/// Refinement budget of the simulation hook inside generation.
pub const RUN_HOOK_BUDGET: usize = 160;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub episodes: usize,
    pub test_episodes: usize,
    pub validation_episodes: usize,
    pub episode: EpisodeParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            episodes: 200,
            test_episodes: 50,
            validation_episodes: 10,
            episode: EpisodeParams {
                frames: 16,
                frame_rate: 8.0,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorStage {
    /// Training episodes whose +Contact generations serve as fakes.
    pub fakes: usize,
    pub config: PriorConfig,
}

impl Default for PriorStage {
    fn default() -> Self {
        PriorStage {
            fakes: 100,
            config: PriorConfig::default(),
        }
    }
}

/// Everything a run depends on besides its input files. Nested seeds are
/// overwritten from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub flow: FlowTrainConfig,
    pub strategy: StrategyTrainConfig,
    pub prior: PriorStage,
    pub generate: GenerateConfig,
    /// Settings of the standalone `refine` command.
    pub refine: RefineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut strategy = StrategyTrainConfig::default();
        strategy.denoiser.train.epochs = 100;
        let mut generate = GenerateConfig::default();
        generate.contact.gamma_guid = RUN_GUIDANCE_WEIGHT;
        generate.refine.budget = RUN_HOOK_BUDGET;
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            flow: FlowTrainConfig {
                train: TrainConfig {
                    learning_rate: 1e-3,
                    batch_size: 10,
                    epochs: 20,
                    cycle_steps: 400,
                    min_lr_ratio: 0.05,
                    ..Default::default()
                },
                hidden: vec![256, 256, 256],
                condition: ConditionConfig { bps_dim: 64, bps_seed: 0 },
                bps_dropout: 0.3,
                anchor_dropout: 0.3,
                ..Default::default()
            },
            strategy,
            prior: PriorStage::default(),
            generate,
            refine: RefineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Sets `seed` and every seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.flow.train.seed = seed;
        self.strategy.affordance.train.seed = seed;
        self.strategy.denoiser.train.seed = seed;
        self.prior.config.train.seed = seed;
        self.generate.refine.cma.seed = seed;
        self.refine.cma.seed = seed;
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        self.flow.validate().map_err(invalid)?;
        self.strategy.affordance.train.validate().map_err(invalid)?;
        self.strategy.denoiser.validate().map_err(invalid)?;
        self.prior.config.validate().map_err(invalid)?;
        self.generate.contact.validate().map_err(invalid)?;
        self.generate.refine.validate().map_err(invalid)?;
        self.refine.validate().map_err(invalid)?;
        if self.generate.steps == 0 {
            return Err(invalid("generate.steps must be at least 1"));
        }
        if !(self.generate.prior_weight.is_finite() && self.generate.prior_weight >= 0.0) {
            return Err(invalid("generate.prior_weight must be finite and non-negative"));
        }
        let e = &self.data.episode;
        if e.frames < 2 || !(e.frame_rate.is_finite() && e.frame_rate > 0.0) {
            return Err(invalid("data.episode needs at least 2 frames and a positive frame rate"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        Ok(cfg.clone().with_seed(cfg.seed))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

/// Hex SHA-256 of `blob <len>\0<bytes>`, the object hashing scheme of git
/// with a stronger digest.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a file, or of a directory as the hash of its sorted
/// `name hash` listing.
pub fn path_hash(path: &Path) -> CliResult<String> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| invalid(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| !is_run_record(p))
            .collect();
        entries.sort();
        let mut listing = String::new();
        for p in entries {
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            listing.push_str(&format!("{name} {}\n", path_hash(&p)?));
        }
        Ok(content_hash(listing.as_bytes()))
    } else {
        let bytes = std::fs::read(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Ok(content_hash(&bytes))
    }
}

fn is_run_record(p: &Path) -> bool {
    p.file_name()
        .map(|n| n.to_string_lossy().ends_with(RECORD_SUFFIX))
        .unwrap_or(false)
}

pub const RECORD_SUFFIX: &str = ".run.toml";

/// Where the run record of `out` goes: `<out>/<command>.run.toml` for a
/// directory, `<out>.run.toml` next to a file.
pub fn record_path(out: &Path, command: &str) -> PathBuf {
    if out.is_dir() {
        out.join(format!("{command}{RECORD_SUFFIX}"))
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(RECORD_SUFFIX);
        PathBuf::from(s)
    }
}

/// Writes the run record of `out`: the exact configuration followed by a
/// `[provenance]` table with the config hash, the hash of every input and
/// the hash of the output itself.
pub fn echo_run(out: &Path, command: &str, cfg: &RunConfig, inputs: &[(&str, &Path)]) -> CliResult<PathBuf> {
    let config = cfg.to_toml();
    let mut table = toml::Table::new();
    table.insert("command".into(), command.into());
    table.insert("config_hash".into(), content_hash(config.as_bytes()).into());
    table.insert("output_hash".into(), path_hash(out)?.into());
    let mut hashes = toml::Table::new();
    for (name, path) in inputs {
        hashes.insert((*name).into(), path_hash(path)?.into());
    }
    table.insert("inputs".into(), toml::Value::Table(hashes));
    let mut wrapper = toml::Table::new();
    wrapper.insert("provenance".into(), toml::Value::Table(table));
    let text = format!("{config}\n{}", toml::to_string(&wrapper).map_err(internal)?);
    let path = record_path(out, command);
    std::fs::write(&path, text).map_err(|e| internal(format!("{}: {e}", path.display())))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default().with_seed(7);
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_documents_fill_defaults_and_propagate_the_seed() {
        let cfg = RunConfig::from_toml("seed = 3\n[flow.train]\nepochs = 5\n").unwrap();
        assert_eq!(cfg.flow.train.epochs, 5);
        assert_eq!(cfg.flow.train.seed, 3);
        assert_eq!(cfg.generate.refine.cma.seed, 3);
        assert_eq!(cfg.data.episodes, 200);
    }

    #[test]
    fn bad_values_are_validation_errors() {
        let mut cfg = RunConfig::default();
        cfg.generate.prior_weight = -1.0;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        assert_eq!(RunConfig::from_toml("seed = \"x\"").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn hashes_follow_git_blob_framing() {
        // `printf 'hello\n' | git hash-object --stdin` uses the same framing
        // with SHA-1; here the digest is SHA-256 of "blob 6\0hello\n"
        let mut h = Sha256::new();
        h.update(b"blob 6\0hello\n");
        assert_eq!(content_hash(b"hello\n"), hex(&h.finalize()));
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }

    #[test]
    fn run_record_holds_config_and_input_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.bin");
        std::fs::write(&input, b"abc").unwrap();
        let cfg = RunConfig::default();
        let path = echo_run(dir.path(), "synth", &cfg, &[("in.bin", &input)]).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let doc: toml::Table = text.parse().unwrap();
        let prov = doc["provenance"].as_table().unwrap();
        assert_eq!(prov["inputs"]["in.bin"].as_str().unwrap(), content_hash(b"abc"));
        assert_eq!(prov["config_hash"].as_str().unwrap(), content_hash(cfg.to_toml().as_bytes()));
        // the record itself does not change the directory hash
        let before = path_hash(dir.path()).unwrap();
        assert_eq!(prov["output_hash"].as_str().unwrap(), before);
        echo_run(dir.path(), "eval", &cfg, &[]).unwrap();
        assert_eq!(path_hash(dir.path()).unwrap(), before);
        // file outputs get a sibling record
        assert_eq!(record_path(&input, "synth"), dir.path().join("in.bin.run.toml"));
    }
}
