#![allow(dead_code)]

use followup_ft::network::{build_network, FeatureMap, NetworkConfig, NetworkParams};
use followup_ft::training::{cross_entropy_logit_grad, weighted_cross_entropy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradSample {
    pub coord: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// Relative error with a 1e-7 floor on the magnitude, so coordinates whose
    /// true gradient is zero (biases feeding batch norm) compare absolutely.
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-7)
    }
}

fn tensor_mut(p: &mut NetworkParams<f64>, layer: usize, kind: usize) -> &mut Vec<f64> {
    let l = &mut p.layers_mut()[layer];
    match kind {
        0 => &mut l.weight,
        1 => &mut l.bias,
        2 => &mut l.bn.as_mut().unwrap().gamma,
        _ => &mut l.bn.as_mut().unwrap().beta,
    }
}

/// Compares backprop against central differences (step `h`) at `n` random
/// coordinates, in train mode with dropout masks fixed by re-seeding.
pub fn gradient_check(cfg: &NetworkConfig, size: usize, n: usize, h: f64, seed: u64) -> Vec<GradSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = build_network::<f64>(cfg, seed).unwrap();
    let batch = 2;
    let pix = batch * size * size;
    let rand_map = |rng: &mut ChaCha8Rng, c: usize| {
        FeatureMap::from_vec(batch, size, size, c, (0..pix * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    };
    let a = rand_map(&mut rng, cfg.in_channels_a);
    let b = rand_map(&mut rng, cfg.in_channels_b);
    let labels: Vec<u8> = (0..pix).map(|_| rng.random_range(0..2)).collect();
    let weights: Vec<f64> = (0..pix).map(|_| [0.0, 1.0, 2.0, 5.0][rng.random_range(0..4)]).collect();
    let drop_seed: u64 = rng.random();
    let loss = |p: &NetworkParams<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
        let c = p.forward_train(&a, &b, true, &mut r).unwrap();
        weighted_cross_entropy(&c.probs.data, &labels, &weights).unwrap()
    };
    let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
    let cache = params.forward_train(&a, &b, true, &mut r).unwrap();
    let dl = cross_entropy_logit_grad(&cache.probs.data, &labels, &weights).unwrap();
    let grads = params.backward(&cache, &dl).unwrap();

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let li = rng.random_range(0..params.layers().len());
        let has_bn = params.layers()[li].bn.is_some();
        let kind = rng.random_range(0..if has_bn { 4 } else { 2 });
        let g = grads.layers[li].as_ref().unwrap();
        let gt = match kind {
            0 => &g.weight,
            1 => &g.bias,
            2 => g.gamma.as_ref().unwrap(),
            _ => g.beta.as_ref().unwrap(),
        };
        let e = rng.random_range(0..gt.len());
        let mut up = params.clone();
        tensor_mut(&mut up, li, kind)[e] += h;
        let mut dn = params.clone();
        tensor_mut(&mut dn, li, kind)[e] -= h;
        let numeric = (loss(&up) - loss(&dn)) / (2.0 * h);
        let name = ["weight", "bias", "gamma", "beta"][kind];
        out.push(GradSample { coord: format!("{}/{name}[{e}]", params.layers()[li].name), analytic: gt[e], numeric });
    }
    out
}

/// One 3x3 layer per pathway followed by the two head layers.
pub fn mini_config() -> NetworkConfig {
    NetworkConfig {
        n_kernels: 3,
        head_kernels: 4,
        dilation_schedule: vec![1],
        block_sizes: vec![1],
        ..Default::default()
    }
}
