//! The flat TOML training config and its resolution into library types.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use motiondiff::diffusion::{GuidanceConfig, TrainConfig, DEFAULT_GUIDANCE_WEIGHT, DEFAULT_P_UNCOND};
use motiondiff::schedule::{ScheduleKind, DEFAULT_COSINE_OFFSET};
use motiondiff::text::{load_embedding_table, TextEncoderSpec, DEFAULT_TEXT_DIM};

/// Every key is optional on disk so missing ones can be reported together;
/// [`TrainFile::resolve`] fills defaults and rejects what has none.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub schedule: Option<String>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub cosine_offset: Option<f64>,
    pub diffusion_steps: Option<usize>,
    pub seq_len: Option<usize>,
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub p_uncond: Option<f64>,
    pub w: Option<f64>,
    pub text_dim: Option<usize>,
    pub text_seed: Option<u64>,
    pub text_table: Option<PathBuf>,
    pub embed_dim: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub levels: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub config: TrainConfig,
    /// The input file with every default filled in and paths made absolute
    /// relative to the config's directory.
    pub resolved: TrainFile,
}

fn anchor(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl TrainFile {
    pub fn parse(src: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(src)?)
    }

    /// Apply defaults, anchor relative paths at `base`, and validate. Every
    /// problem found is reported in one error.
    pub fn resolve(&self, base: &Path) -> motiondiff::Result<TrainRun> {
        let mut problems = Vec::new();
        let dataset = self.dataset.as_deref().map(|p| anchor(base, p));
        let out_dir = self.out_dir.as_deref().map(|p| anchor(base, p));
        match &dataset {
            None => problems.push("dataset is required".to_string()),
            Some(p) if !p.is_file() => problems.push(format!("dataset {} does not exist", p.display())),
            _ => {}
        }
        if out_dir.is_none() {
            problems.push("out_dir is required".into());
        }
        if self.seed.is_none() {
            problems.push("seed is required".into());
        }
        if self.seq_len.is_none() {
            problems.push("seq_len is required".into());
        }

        let schedule_name = self.schedule.clone().unwrap_or_else(|| "cosine".into());
        let beta_start = self.beta_start.unwrap_or(1e-4);
        let beta_end = self.beta_end.unwrap_or(0.02);
        let cosine_offset = self.cosine_offset.unwrap_or(DEFAULT_COSINE_OFFSET);
        let schedule = match schedule_name.as_str() {
            "cosine" => ScheduleKind::Cosine {
                offset: cosine_offset,
            },
            "linear" => ScheduleKind::Linear { beta_start, beta_end },
            other => {
                problems.push(format!(
                    "schedule must be \"cosine\" or \"linear\", got {other:?}"
                ));
                ScheduleKind::Cosine {
                    offset: cosine_offset,
                }
            }
        };

        let text_table = self.text_table.as_deref().map(|p| anchor(base, p));
        let text_seed = self.text_seed.unwrap_or(0);
        let text_encoder = match &text_table {
            Some(path) => match load_embedding_table(path) {
                Ok(table) => {
                    let table_dim = table.dim().unwrap_or(0);
                    if let Some(d) = self.text_dim.filter(|d| *d != table_dim) {
                        problems.push(format!(
                            "text_dim {d} but table {} has width {table_dim}",
                            path.display()
                        ));
                    }
                    TextEncoderSpec::Table {
                        dim: table_dim,
                        path: path.clone(),
                    }
                }
                Err(e) => {
                    problems.push(format!("text_table: {e}"));
                    TextEncoderSpec::HashedBow {
                        dim: DEFAULT_TEXT_DIM,
                        seed: text_seed,
                    }
                }
            },
            None => TextEncoderSpec::HashedBow {
                dim: self.text_dim.unwrap_or(DEFAULT_TEXT_DIM),
                seed: text_seed,
            },
        };

        let defaults = TrainConfig::new(self.seq_len.unwrap_or(0), self.seed.unwrap_or(0));
        let config = TrainConfig {
            schedule,
            diffusion_steps: self.diffusion_steps.unwrap_or(defaults.diffusion_steps),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            steps: self.steps.unwrap_or(defaults.steps),
            lr: self.lr.unwrap_or(defaults.lr),
            guidance: GuidanceConfig {
                w: self.w.unwrap_or(DEFAULT_GUIDANCE_WEIGHT),
                p_uncond: self.p_uncond.unwrap_or(DEFAULT_P_UNCOND),
            },
            text_encoder: text_encoder.clone(),
            embed_dim: self.embed_dim.unwrap_or(defaults.embed_dim),
            hidden: self.hidden.clone().unwrap_or(defaults.hidden.clone()),
            levels: self.levels.unwrap_or(defaults.levels),
            ..defaults
        };
        if self.seq_len.is_some() {
            problems.extend(config.problems());
        }
        if !problems.is_empty() {
            return Err(motiondiff::Error::InvalidConfig(problems));
        }

        let resolved = TrainFile {
            dataset: dataset.clone(),
            out_dir: out_dir.clone(),
            seed: Some(config.seed),
            schedule: Some(schedule_name),
            beta_start: Some(beta_start),
            beta_end: Some(beta_end),
            cosine_offset: Some(cosine_offset),
            diffusion_steps: Some(config.diffusion_steps),
            seq_len: Some(config.seq_len),
            batch_size: Some(config.batch_size),
            steps: Some(config.steps),
            lr: Some(config.lr),
            p_uncond: Some(config.guidance.p_uncond),
            w: Some(config.guidance.w),
            text_dim: Some(text_encoder.dim()),
            text_seed: Some(text_seed),
            text_table,
            embed_dim: Some(config.embed_dim),
            hidden: Some(config.hidden.clone()),
            levels: Some(config.levels),
        };
        Ok(TrainRun {
            dataset: dataset.expect("checked above"),
            out_dir: out_dir.expect("checked above"),
            config,
            resolved,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(TrainFile::parse("seed = 1\nlearning_rate = 0.1\n").is_err());
    }

    #[test]
    fn all_problems_reported_together() {
        let file = TrainFile::parse("schedule = \"quadratic\"\n").unwrap();
        match file.resolve(Path::new("/nonexistent")) {
            Err(motiondiff::Error::InvalidConfig(p)) => {
                assert_eq!(p.len(), 5, "{p:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_listed() {
        let dir = std::env::temp_dir();
        let manifest = dir.join("motiondiff-config-test-manifest.jsonl");
        std::fs::write(&manifest, "").unwrap();
        let file = TrainFile {
            dataset: Some(manifest.clone()),
            out_dir: Some("out".into()),
            seed: Some(1),
            seq_len: Some(16),
            lr: Some(-1.0),
            batch_size: Some(0),
            p_uncond: Some(1.0),
            ..Default::default()
        };
        match file.resolve(&dir) {
            Err(motiondiff::Error::InvalidConfig(p)) => assert_eq!(p.len(), 3, "{p:?}"),
            other => panic!("{other:?}"),
        }
        std::fs::remove_file(manifest).unwrap();
    }
}
