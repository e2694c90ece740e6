use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Output classes: background and lesion.
pub const N_CLASSES: usize = 2;

pub const HEAD_HIDDEN: &str = "head.conv1";
pub const HEAD_OUTPUT: &str = "head.conv2";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel_size: (usize, usize),
    pub n_kernels: usize,
    pub dilation: usize,
    pub has_bn: bool,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    A,
    B,
}

impl Pathway {
    pub fn tag(self) -> &'static str {
        match self {
            Pathway::A => "a",
            Pathway::B => "b",
        }
    }
}

/// Dual-pathway dilated fully convolutional network.
///
/// Each pathway is a stack of 3x3 convolutions (BN + ReLU) split into
/// blocks; the last feature map of every block of both pathways is
/// concatenated and fed to two 1x1 head convolutions (hidden + softmax).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels_a: usize,
    pub in_channels_b: usize,
    /// Kernels per pathway layer.
    pub n_kernels: usize,
    /// One dilation per pathway layer.
    pub dilation_schedule: Vec<usize>,
    /// Consecutive layer counts per block; sums to the schedule length.
    pub block_sizes: Vec<usize>,
    /// Kernels of the hidden 1x1 head layer.
    pub head_kernels: usize,
    pub dropout_rate: f64,
    pub bn_epsilon: f64,
    /// Running-statistics decay: `running = m * running + (1 - m) * batch`.
    pub bn_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels_a: 2,
            in_channels_b: 1,
            n_kernels: 64,
            dilation_schedule: vec![1, 1, 2, 2, 4, 4, 8, 8, 16, 8, 4, 2, 1],
            block_sizes: vec![2, 2, 2, 3, 4],
            head_kernels: 128,
            dropout_rate: 0.2,
            bn_epsilon: 1e-3,
            bn_momentum: 0.99,
        }
    }
}

/// `1 + sum(2 * d)` for stride-1 3x3 convolutions; 1x1 layers add nothing.
pub fn compute_receptive_field(schedule: &[usize]) -> usize {
    1 + schedule.iter().map(|d| 2 * d).sum::<usize>()
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels_a == 0 || self.in_channels_b == 0 {
            return bad("input channel counts must be >= 1".into());
        }
        if self.n_kernels == 0 || self.head_kernels == 0 {
            return bad("kernel counts must be >= 1".into());
        }
        if self.dilation_schedule.is_empty() {
            return bad("dilation_schedule is empty".into());
        }
        if let Some(d) = self.dilation_schedule.iter().find(|&&d| d == 0) {
            return bad(format!("dilation {d} must be >= 1"));
        }
        if self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return bad(format!("block_sizes {:?} must be non-empty and positive", self.block_sizes));
        }
        let total: usize = self.block_sizes.iter().sum();
        if total != self.dilation_schedule.len() {
            return bad(format!(
                "block_sizes sum to {total} but dilation_schedule has {} layers",
                self.dilation_schedule.len()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_epsilon must be > 0 and bn_momentum in [0, 1)".into());
        }
        Ok(())
    }

    pub fn layers_per_pathway(&self) -> usize {
        self.dilation_schedule.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.block_sizes.len()
    }

    /// Pathway layer indices whose outputs are tapped for the head.
    pub fn block_tails(&self) -> Vec<usize> {
        self.block_sizes
            .iter()
            .scan(0, |acc, &s| {
                *acc += s;
                Some(*acc - 1)
            })
            .collect()
    }

    /// Channels of the concatenated head input.
    pub fn feature_width(&self) -> usize {
        2 * self.n_blocks() * self.n_kernels
    }

    pub fn receptive_field(&self) -> usize {
        compute_receptive_field(&self.dilation_schedule)
    }

    /// Largest L-infinity offset at which an input pixel can reach an output pixel.
    pub fn receptive_radius(&self) -> usize {
        (self.receptive_field() - 1) / 2
    }

    pub fn in_channels(&self, p: Pathway) -> usize {
        match p {
            Pathway::A => self.in_channels_a,
            Pathway::B => self.in_channels_b,
        }
    }

    pub fn pathway_layers(&self) -> Vec<LayerSpec> {
        self.dilation_schedule
            .iter()
            .map(|&dilation| LayerSpec {
                kernel_size: (3, 3),
                n_kernels: self.n_kernels,
                dilation,
                has_bn: true,
                activation: Activation::Relu,
            })
            .collect()
    }

    pub fn head_layers(&self) -> [LayerSpec; 2] {
        [
            LayerSpec {
                kernel_size: (1, 1),
                n_kernels: self.head_kernels,
                dilation: 1,
                has_bn: true,
                activation: Activation::Relu,
            },
            LayerSpec {
                kernel_size: (1, 1),
                n_kernels: N_CLASSES,
                dilation: 1,
                has_bn: false,
                activation: Activation::Softmax,
            },
        ]
    }

    pub fn pathway_layer_name(p: Pathway, i: usize) -> String {
        format!("{}.conv{:02}", p.tag(), i + 1)
    }

    /// All layer names in parameter order: pathway A, pathway B, head.
    pub fn layer_names(&self) -> Vec<String> {
        let l = self.layers_per_pathway();
        [Pathway::A, Pathway::B]
            .into_iter()
            .flat_map(|p| (0..l).map(move |i| Self::pathway_layer_name(p, i)))
            .chain([HEAD_HIDDEN.to_string(), HEAD_OUTPUT.to_string()])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.layers_per_pathway(), 13);
        assert_eq!(cfg.dilation_schedule.iter().filter(|&&d| d == 1).count(), 3);
        assert_eq!(cfg.dilation_schedule[..2], [1, 1]);
        assert_eq!(cfg.n_blocks(), 5);
        assert_eq!(cfg.feature_width(), 640);
        assert_eq!(cfg.block_tails(), vec![1, 3, 5, 8, 12]);
        assert_eq!(cfg.layer_names().len(), 28);
        assert_eq!(cfg.layer_names()[13], "b.conv01");
    }

    #[test]
    fn receptive_field_arithmetic() {
        assert_eq!(compute_receptive_field(&NetworkConfig::default().dilation_schedule), 123);
        assert_eq!(compute_receptive_field(&[1]), 3);
        assert_eq!(compute_receptive_field(&[1, 1]), 5);
        assert_eq!(NetworkConfig::default().receptive_radius(), 61);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = NetworkConfig { block_sizes: vec![2, 2], ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = NetworkConfig { dilation_schedule: vec![0; 13], ..Default::default() };
        assert!(c.validate().is_err());
        c = NetworkConfig { dropout_rate: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
        c = NetworkConfig { in_channels_b: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}
