use super::config::{NetworkConfig, Pathway, HEAD_HIDDEN, HEAD_OUTPUT};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn identity(c: usize) -> Self {
        Self {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
        }
    }
}

/// Convolution (square kernel, zero 'same' padding), optional batch norm
/// and optional ReLU.
///
/// `weight` is a `(kernel * kernel * in_channels) x out_channels` row-major
/// matrix whose rows are ordered `(ky, kx, c_in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub name: String,
    pub kernel: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub bn: Option<BatchNorm<T>>,
    pub relu: bool,
    pub trainable: bool,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kernel, self.kernel, self.in_channels, self.out_channels]
    }

    /// Learnable scalars (weights, biases, BN scale and shift).
    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len() + self.bn.as_ref().map_or(0, |b| 2 * b.gamma.len())
    }
}

/// Parameters of the whole network together with the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    config: NetworkConfig,
    layers: Vec<ConvLayer<T>>,
}

/// He-uniform initialisation; every layer starts trainable.
pub fn build_network<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(2 * cfg.layers_per_pathway() + 2);
    let mut push = |name: String, kernel: usize, dilation: usize, cin: usize, cout: usize, bn: bool, relu: bool| {
        let fan_in = kernel * kernel * cin;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..fan_in * cout).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        layers.push(ConvLayer {
            name,
            kernel,
            dilation,
            in_channels: cin,
            out_channels: cout,
            weight,
            bias: vec![T::zero(); cout],
            bn: bn.then(|| BatchNorm::identity(cout)),
            relu,
            trainable: true,
        });
    };
    for p in [Pathway::A, Pathway::B] {
        let mut cin = cfg.in_channels(p);
        for (i, spec) in cfg.pathway_layers().iter().enumerate() {
            push(NetworkConfig::pathway_layer_name(p, i), 3, spec.dilation, cin, spec.n_kernels, true, true);
            cin = spec.n_kernels;
        }
    }
    let [h1, h2] = cfg.head_layers();
    push(HEAD_HIDDEN.into(), 1, 1, cfg.feature_width(), h1.n_kernels, true, true);
    push(HEAD_OUTPUT.into(), 1, 1, h1.n_kernels, h2.n_kernels, false, false);
    Ok(NetworkParams { config: cfg.clone(), layers })
}

impl<T: Scalar> NetworkParams<T> {
    pub(crate) fn from_parts(config: NetworkConfig, layers: Vec<ConvLayer<T>>) -> Result<Self> {
        let reference = build_network::<T>(&config, 0)?;
        if reference.layers.len() != layers.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} layers, found {}",
                reference.layers.len(),
                layers.len()
            )));
        }
        for (r, l) in reference.layers.iter().zip(&layers) {
            let same = r.name == l.name
                && r.weight.len() == l.weight.len()
                && r.bias.len() == l.bias.len()
                && r.bn.as_ref().map(|b| b.gamma.len()) == l.bn.as_ref().map(|b| b.gamma.len())
                && (r.kernel, r.dilation, r.in_channels, r.out_channels)
                    == (l.kernel, l.dilation, l.in_channels, l.out_channels);
            if !same {
                return Err(Error::Checkpoint(format!("layer {} does not match the configuration", l.name)));
            }
            if let Some(bn) = &l.bn {
                if bn.running_var.iter().any(|v| !(*v > T::zero())) {
                    return Err(Error::Checkpoint(format!("layer {} has a non-positive running variance", l.name)));
                }
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Result<&ConvLayer<T>> {
        self.layers.iter().find(|l| l.name == name).ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Index of pathway layer `i` in [`Self::layers`].
    pub fn pathway_index(&self, p: Pathway, i: usize) -> usize {
        match p {
            Pathway::A => i,
            Pathway::B => self.config.layers_per_pathway() + i,
        }
    }

    pub fn head_hidden_index(&self) -> usize {
        2 * self.config.layers_per_pathway()
    }

    pub fn head_output_index(&self) -> usize {
        2 * self.config.layers_per_pathway() + 1
    }

    /// Flags exactly the named layers trainable. Tensor values are untouched.
    pub fn set_trainable<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        let wanted: BTreeSet<&str> = names.iter().map(|s| s.as_ref()).collect();
        for n in &wanted {
            self.layer(n)?;
        }
        for l in &mut self.layers {
            l.trainable = wanted.contains(l.name.as_str());
        }
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.layers.iter().filter(|l| l.trainable).map(|l| l.name.as_str()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::parameter_count).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| ConvLayer {
                name: l.name.clone(),
                kernel: l.kernel,
                dilation: l.dilation,
                in_channels: l.in_channels,
                out_channels: l.out_channels,
                weight: cv(&l.weight),
                bias: cv(&l.bias),
                bn: l.bn.as_ref().map(|b| BatchNorm {
                    gamma: cv(&b.gamma),
                    beta: cv(&b.beta),
                    running_mean: cv(&b.running_mean),
                    running_var: cv(&b.running_var),
                }),
                relu: l.relu,
                trainable: l.trainable,
            })
            .collect();
        NetworkParams { config: self.config.clone(), layers }
    }
}
