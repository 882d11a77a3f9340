//! Experiment configuration: plain TOML with the ground-truth model inline.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// `y = W y + v` with `v ~ N(0, noise_std² I)`; `W` row-major.
    Linear {
        adjacency: Vec<Vec<f64>>,
        noise_std: f64,
    },
    /// Three-node nonlinear feedback model with cubic coupling `k1` and
    /// inverse gain `k2`.
    Nonlinear { k1: f64, k2: f64 },
}

impl ModelConfig {
    pub fn n_nodes(&self) -> usize {
        match self {
            ModelConfig::Linear { adjacency, .. } => adjacency.len(),
            ModelConfig::Nonlinear { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KernelConfig {
    pub bandwidth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DictionaryConfig {
    pub count: usize,
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
}

/// Where the step-size stability bound comes from when `step_size_scale`
/// is used: the exact feature covariance of the moment engine, or a
/// feature second moment estimated from presampled signals (the only
/// trustworthy choice when the input distribution is far from Gaussian).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundSource {
    #[default]
    Theory,
    Empirical,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    /// node whose incoming edges are estimated, 1-based
    pub node: usize,
    pub seed: u64,
    pub runs: usize,
    pub horizon: usize,
    #[serde(default)]
    pub reg_weight: f64,
    /// explicit step size; exclusive with `step_size_scale`
    #[serde(default)]
    pub step_size: Option<f64>,
    /// step size as a fraction of the stability bound `2/λ_max`
    #[serde(default)]
    pub step_size_scale: Option<f64>,
    #[serde(default)]
    pub bound_source: BoundSource,
    /// true: the update uses the exact derivative covariances; false: the
    /// sequential estimate with `forgetting`
    #[serde(default = "default_true")]
    pub exact_cov: bool,
    #[serde(default = "default_forgetting")]
    pub forgetting: f64,
    /// draws used to fit the input second moment when no closed form
    /// exists, and to estimate the empirical step-size bound
    #[serde(default = "default_presample")]
    pub presample: usize,
}

fn default_true() -> bool {
    true
}

fn default_forgetting() -> f64 {
    0.99
}

fn default_presample() -> usize {
    1_000_000
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub kernel: KernelConfig,
    pub dictionary: DictionaryConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.model.n_nodes();
        if n < 2 {
            return Err(Error::InvalidParam("model needs at least 2 nodes".into()));
        }
        if let ModelConfig::Linear { adjacency, .. } = &self.model {
            if adjacency.iter().any(|r| r.len() != n) {
                return Err(Error::InvalidParam("adjacency is not square".into()));
            }
        }
        if !(self.kernel.bandwidth > 0.0) {
            return Err(Error::InvalidParam("kernel bandwidth must be > 0".into()));
        }
        if self.dictionary.count == 0 {
            return Err(Error::InvalidParam("dictionary count must be >= 1".into()));
        }
        if !(self.dictionary.lo < self.dictionary.hi) {
            return Err(Error::InvalidParam("dictionary bounds reversed".into()));
        }
        let r = &self.run;
        if r.node == 0 || r.node > n {
            return Err(Error::InvalidParam(format!(
                "node {} out of 1..={n}",
                r.node
            )));
        }
        if r.runs == 0 || r.horizon == 0 {
            return Err(Error::InvalidParam(
                "need runs >= 1 and horizon >= 1".into(),
            ));
        }
        if !(r.reg_weight >= 0.0) {
            return Err(Error::InvalidParam("reg_weight must be >= 0".into()));
        }
        match (r.step_size, r.step_size_scale) {
            (Some(s), None) if s > 0.0 => {}
            (None, Some(c)) if c > 0.0 => {}
            _ => {
                return Err(Error::InvalidParam(
                    "set exactly one of step_size / step_size_scale, positive".into(),
                ))
            }
        }
        if !(0.0..1.0).contains(&r.forgetting) {
            return Err(Error::InvalidParam("forgetting must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// The five-node linear validation setup: binary feedback adjacency,
/// noise std 0.05, unit-bandwidth kernel, six dictionary atoms on
/// `[-1, 1]^4`, node 1, one hundred runs.
pub fn linear_five_node() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::Linear {
            adjacency: vec![
                vec![0., 1., 0., 1., 1.],
                vec![1., 0., 1., 0., 1.],
                vec![1., 0., 0., 1., 0.],
                vec![0., 1., 1., 0., 1.],
                vec![1., 0., 1., 1., 0.],
            ],
            noise_std: 0.05,
        },
        kernel: KernelConfig { bandwidth: 1.0 },
        dictionary: DictionaryConfig {
            count: 6,
            lo: -1.0,
            hi: 1.0,
            seed: 1,
        },
        run: RunConfig {
            node: 1,
            seed: 42,
            runs: 100,
            horizon: 5000,
            reg_weight: 0.0,
            step_size: None,
            step_size_scale: Some(0.9),
            bound_source: BoundSource::Theory,
            exact_cov: true,
            forgetting: 0.99,
            presample: 1_000_000,
        },
    }
}

/// The three-node nonlinear validation setup: cubic feedback coupling,
/// unit-bandwidth kernel, four dictionary atoms on `[-1, 1]^2`, node 1.
/// The input second moment has no closed form, so the step-size bound
/// defaults to the empirical source.
pub fn nonlinear_three_node() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig::Nonlinear {
            k1: 8000.0,
            k2: 27.0,
        },
        kernel: KernelConfig { bandwidth: 1.0 },
        dictionary: DictionaryConfig {
            count: 4,
            lo: -1.0,
            hi: 1.0,
            seed: 1,
        },
        run: RunConfig {
            node: 1,
            seed: 42,
            runs: 100,
            horizon: 5000,
            reg_weight: 0.0,
            step_size: None,
            step_size_scale: Some(0.2),
            bound_source: BoundSource::Empirical,
            exact_cov: true,
            forgetting: 0.99,
            presample: 1_000_000,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let cfg = linear_five_node();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        let cfg2 = nonlinear_three_node();
        assert_eq!(cfg2, ExperimentConfig::from_toml(&cfg2.to_toml()).unwrap());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = linear_five_node();
        cfg.run.node = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = linear_five_node();
        cfg.run.step_size = Some(0.1); // both set
        assert!(cfg.validate().is_err());
        let mut cfg = linear_five_node();
        cfg.run.step_size_scale = None; // neither set
        assert!(cfg.validate().is_err());
        let mut cfg = linear_five_node();
        cfg.run.runs = 0;
        assert!(cfg.validate().is_err());
        if let ModelConfig::Linear { adjacency, .. } = &mut cfg.model {
            adjacency[0].pop();
        }
        cfg.run.runs = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parses_handwritten_toml() {
        let text = r#"
            [model]
            kind = "linear"
            adjacency = [[0.0, 1.0], [1.0, 0.0]]
            noise_std = 1.0

            [kernel]
            bandwidth = 0.5

            [dictionary]
            count = 3
            lo = -1.0
            hi = 1.0
            seed = 7

            [run]
            node = 2
            seed = 9
            runs = 4
            horizon = 100
            step_size = 0.05
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.run.node, 2);
        assert!(cfg.run.exact_cov);
        assert_eq!(cfg.run.forgetting, 0.99);
        assert_eq!(cfg.run.bound_source, BoundSource::Theory);
    }
}
