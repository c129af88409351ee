//! Run configuration: one TOML file with a section per pipeline stage.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub ingest: IngestConfig,
    pub build: BuildConfig,
    pub fit: FitConfig,
    pub score: ScoreConfig,
    pub metrics: MetricsConfig,
    pub regress: RegressConfig,
    pub synth: crate::synth::SynthConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory holding papers.jsonl, authors.jsonl, citations.jsonl, names.tsv.
    pub data_dir: PathBuf,
    /// Directory for all stage outputs and the run manifest.
    pub out_dir: PathBuf,
    /// Snapshot/model cache; overridden by NOVSCOPE_CACHE_DIR.
    pub cache_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            cache_dir: None,
        }
    }
}

impl PathsConfig {
    pub fn cache_dir(&self) -> PathBuf {
        if let Ok(dir) = std::env::var("NOVSCOPE_CACHE_DIR") {
            return PathBuf::from(dir);
        }
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("cache"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Genderize-style count above which a name assignment is trusted.
    pub name_count_threshold: u64,
    /// Probability above which a name assignment is trusted.
    pub name_prob_threshold: f64,
    /// Career ages above this are treated as disambiguation errors.
    pub career_age_cap: i32,
    /// Department size counts the focal paper itself.
    pub dept_size_includes_focal: bool,
    /// Women field share uses years <= publication year (inclusive).
    pub women_share_inclusive: bool,
    /// Fraction of malformed lines tolerated before the file is rejected.
    pub max_malformed_frac: f64,
    pub min_year: Option<i32>,
    pub max_year: Option<i32>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            name_count_threshold: 100,
            name_prob_threshold: 0.90,
            career_age_cap: 60,
            dept_size_includes_focal: true,
            women_share_inclusive: true,
            max_malformed_frac: 0.10,
            min_year: None,
            max_year: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    /// Nodes seen fewer times than this across the history window collapse into RARE.
    pub min_node_freq: u32,
    /// Hyperedges larger than this are subsampled (seeded by paper id).
    pub max_edge_size: usize,
    pub subsample_seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            min_node_freq: 5,
            max_edge_size: 32,
            subsample_seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub dim: usize,
    pub max_epochs: usize,
    /// Relative objective improvement below which fitting stops.
    pub tolerance: f64,
    /// Negative samples drawn per positive combination.
    pub negative_ratio: u32,
    pub seed: u64,
    /// Std of the Normal(0, s^2) logit initialization.
    pub init_std: f64,
    /// Training history: all years <= t ("cumulative") or a sliding window of N years.
    pub history_years: Option<u32>,
    /// Warm-start each year's model from the nearest earlier fitted year.
    pub warm_start: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            dim: 25,
            max_epochs: 500,
            tolerance: 1e-6,
            negative_ratio: 5,
            seed: 7,
            init_std: 0.1,
            history_years: None,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    /// Years between the publication-time and follow-up embeddings.
    pub horizon: i32,
    pub threads: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            horizon: 2,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub disruption_windows: Vec<i32>,
    pub two_step_min: usize,
    pub forward_horizon: i32,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            disruption_windows: vec![5, 3],
            two_step_min: 5,
            forward_horizon: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RegressConfig {
    /// Model spec files (JSON), run in order by `regress` and `report`.
    pub spec_files: Vec<PathBuf>,
    /// Baseline level for publication-year dummies.
    pub baseline_year: i32,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::validation(format!("bad config: {e}")))
    }

    /// Hash of the full config, used to key caches and stamp outputs.
    pub fn hash(&self) -> String {
        let canon = toml::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}
