//! Pipeline configuration and its flat `key = value` text format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Neighbors per prompt in the similarity graph.
    pub knn_k: usize,
    /// Minimum rank-biased overlap for an edge to survive.
    pub rbo_threshold: f64,
    pub rbo_persistence: f64,
    /// Rank offset in reciprocal-rank fusion.
    pub rrf_epsilon: f64,
    pub leiden_iterations: usize,
    pub leiden_resolution: f64,
    /// Required share of members whose top model is in the candidate set.
    pub coverage_threshold: f64,
    pub min_cluster_size: usize,
    /// Weight of the prompt-level estimate against the task-level median.
    pub alpha: f64,
    pub classifier_threshold: f64,
    pub model_embed_dim: usize,
    pub adapter_hidden_dim: usize,
    pub prompt_proj_dim: usize,
    /// Width of the classifier's matching space; 0 means "same as the
    /// description embedding".
    pub classifier_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub classifier_epochs: usize,
    pub base_epochs: usize,
    pub adapter_epochs: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            knn_k: 5,
            rbo_threshold: 0.4,
            rbo_persistence: 0.7,
            rrf_epsilon: 60.0,
            leiden_iterations: 3,
            leiden_resolution: 1.0,
            coverage_threshold: 0.8,
            min_cluster_size: 5,
            alpha: 0.5,
            classifier_threshold: 0.5,
            model_embed_dim: 32,
            adapter_hidden_dim: 64,
            prompt_proj_dim: 32,
            classifier_dim: 0,
            learning_rate: 1e-3,
            batch_size: 8,
            classifier_epochs: 300,
            base_epochs: 30,
            adapter_epochs: 60,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::invalid(format!("config: {what}")));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.knn_k == 0 {
            return bad("knn_k must be positive");
        }
        if !unit(self.rbo_threshold) {
            return bad("rbo_threshold must be in [0, 1]");
        }
        if !(self.rbo_persistence > 0.0 && self.rbo_persistence < 1.0) {
            return bad("rbo_persistence must be in (0, 1)");
        }
        if !(self.rrf_epsilon.is_finite() && self.rrf_epsilon > 0.0) {
            return bad("rrf_epsilon must be positive");
        }
        if self.leiden_iterations == 0 {
            return bad("leiden_iterations must be positive");
        }
        if !(self.leiden_resolution.is_finite() && self.leiden_resolution > 0.0) {
            return bad("leiden_resolution must be positive");
        }
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return bad("coverage_threshold must be in (0, 1]");
        }
        if self.min_cluster_size == 0 {
            return bad("min_cluster_size must be positive");
        }
        if !unit(self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if !(self.classifier_threshold > 0.0 && self.classifier_threshold < 1.0) {
            return bad("classifier_threshold must be in (0, 1)");
        }
        if self.model_embed_dim == 0 || self.adapter_hidden_dim == 0 || self.prompt_proj_dim == 0
        {
            return bad("model_embed_dim, adapter_hidden_dim and prompt_proj_dim must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse().map_err(|e| match e {
            Error::Record {
                line,
                field,
                message,
                ..
            } => Error::Record {
                path: path.into(),
                line,
                field,
                message,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for PipelineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "knn_k = {}", self.knn_k)?;
        writeln!(f, "rbo_threshold = {}", self.rbo_threshold)?;
        writeln!(f, "rbo_persistence = {}", self.rbo_persistence)?;
        writeln!(f, "rrf_epsilon = {}", self.rrf_epsilon)?;
        writeln!(f, "leiden_iterations = {}", self.leiden_iterations)?;
        writeln!(f, "leiden_resolution = {}", self.leiden_resolution)?;
        writeln!(f, "coverage_threshold = {}", self.coverage_threshold)?;
        writeln!(f, "min_cluster_size = {}", self.min_cluster_size)?;
        writeln!(f, "alpha = {}", self.alpha)?;
        writeln!(f, "classifier_threshold = {}", self.classifier_threshold)?;
        writeln!(f, "model_embed_dim = {}", self.model_embed_dim)?;
        writeln!(f, "adapter_hidden_dim = {}", self.adapter_hidden_dim)?;
        writeln!(f, "prompt_proj_dim = {}", self.prompt_proj_dim)?;
        writeln!(f, "classifier_dim = {}", self.classifier_dim)?;
        writeln!(f, "learning_rate = {}", self.learning_rate)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "classifier_epochs = {}", self.classifier_epochs)?;
        writeln!(f, "base_epochs = {}", self.base_epochs)?;
        writeln!(f, "adapter_epochs = {}", self.adapter_epochs)?;
        writeln!(f, "seed = {}", self.seed)
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Record {
        path: "<config>".into(),
        line,
        field: key.into(),
        message: e.to_string(),
    })
}

/// Parses `key = value` lines; `#` starts a comment. Unset keys keep defaults.
impl FromStr for PipelineConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Record {
                path: "<config>".into(),
                line: line_no,
                field: line.into(),
                message: "expected key = value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let p = line_no;
            match key {
                "knn_k" => cfg.knn_k = parse_value(p, key, value)?,
                "rbo_threshold" => cfg.rbo_threshold = parse_value(p, key, value)?,
                "rbo_persistence" => cfg.rbo_persistence = parse_value(p, key, value)?,
                "rrf_epsilon" => cfg.rrf_epsilon = parse_value(p, key, value)?,
                "leiden_iterations" => cfg.leiden_iterations = parse_value(p, key, value)?,
                "leiden_resolution" => cfg.leiden_resolution = parse_value(p, key, value)?,
                "coverage_threshold" => cfg.coverage_threshold = parse_value(p, key, value)?,
                "min_cluster_size" => cfg.min_cluster_size = parse_value(p, key, value)?,
                "alpha" => cfg.alpha = parse_value(p, key, value)?,
                "classifier_threshold" => cfg.classifier_threshold = parse_value(p, key, value)?,
                "model_embed_dim" => cfg.model_embed_dim = parse_value(p, key, value)?,
                "adapter_hidden_dim" => cfg.adapter_hidden_dim = parse_value(p, key, value)?,
                "prompt_proj_dim" => cfg.prompt_proj_dim = parse_value(p, key, value)?,
                "classifier_dim" => cfg.classifier_dim = parse_value(p, key, value)?,
                "learning_rate" => cfg.learning_rate = parse_value(p, key, value)?,
                "batch_size" => cfg.batch_size = parse_value(p, key, value)?,
                "classifier_epochs" => cfg.classifier_epochs = parse_value(p, key, value)?,
                "base_epochs" => cfg.base_epochs = parse_value(p, key, value)?,
                "adapter_epochs" => cfg.adapter_epochs = parse_value(p, key, value)?,
                "seed" => cfg.seed = parse_value(p, key, value)?,
                other => {
                    return Err(Error::Record {
                        path: "<config>".into(),
                        line: line_no,
                        field: other.into(),
                        message: "unknown key".into(),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back: PipelineConfig = cfg.to_string().parse().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn awkward_floats_round_trip_exactly() {
        let cfg = PipelineConfig {
            rbo_threshold: 0.1 + 0.2,
            learning_rate: 3.0e-7,
            alpha: 1.0 / 3.0,
            seed: u64::MAX,
            ..Default::default()
        };
        let back: PipelineConfig = cfg.to_string().parse().unwrap();
        assert_eq!(back.rbo_threshold.to_bits(), cfg.rbo_threshold.to_bits());
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_keep_defaults() {
        let cfg: PipelineConfig = "# tuned\nknn_k = 7\nalpha=0.25\n".parse().unwrap();
        assert_eq!(cfg.knn_k, 7);
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.rbo_threshold, 0.4);
    }

    #[test]
    fn rejects_unknown_keys_and_out_of_range_values() {
        assert!("bogus = 1".parse::<PipelineConfig>().is_err());
        assert!("alpha = 1.5".parse::<PipelineConfig>().is_err());
        assert!("rbo_persistence = 1.0".parse::<PipelineConfig>().is_err());
        assert!("knn_k = -1".parse::<PipelineConfig>().is_err());
        assert!("knn_k".parse::<PipelineConfig>().is_err());
    }
}
