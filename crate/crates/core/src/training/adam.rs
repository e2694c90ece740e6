use crate::network::{ConvLayer, Gradients, LayerGrads, NetworkParams};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment buffers of one tensor.
type Moments<T> = (Vec<T>, Vec<T>);

/// First and second moments for every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    moments: Vec<Option<Vec<Moments<T>>>>,
}

fn layer_tensors<T>(l: &mut ConvLayer<T>) -> Vec<&mut Vec<T>> {
    let mut v = vec![&mut l.weight, &mut l.bias];
    if let Some(bn) = l.bn.as_mut() {
        v.push(&mut bn.gamma);
        v.push(&mut bn.beta);
    }
    v
}

fn grad_tensors<T>(g: &LayerGrads<T>) -> Vec<&Vec<T>> {
    let mut v = vec![&g.weight, &g.bias];
    v.extend(g.gamma.as_ref());
    v.extend(g.beta.as_ref());
    v
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments for the currently trainable layers of `params`.
    pub fn new(params: &NetworkParams<T>) -> Self {
        let moments = params
            .layers()
            .iter()
            .map(|l| {
                l.trainable.then(|| {
                    let mut sizes = vec![l.weight.len(), l.bias.len()];
                    if let Some(bn) = &l.bn {
                        sizes.extend([bn.gamma.len(), bn.beta.len()]);
                    }
                    sizes.into_iter().map(|n| (vec![T::zero(); n], vec![T::zero(); n])).collect()
                })
            })
            .collect();
        Self { step: 0, moments }
    }

    /// One bias-corrected Adam update of every trainable tensor that has a gradient.
    pub fn update(&mut self, params: &mut NetworkParams<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let (ob1, ob2) = (T::lit(1.0 - BETA1), T::lit(1.0 - BETA2));
        // lr * mhat / (sqrt(vhat) + eps) with the corrections folded into step size and epsilon.
        let step_size = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(EPSILON * c2.sqrt());
        for ((layer, g), mom) in params.layers_mut().iter_mut().zip(&grads.layers).zip(&mut self.moments) {
            let (Some(g), Some(mom), true) = (g, mom.as_mut(), layer.trainable) else { continue };
            for ((p, g), (m, v)) in layer_tensors(layer).into_iter().zip(grad_tensors(g)).zip(mom.iter_mut()) {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + ob1 * g[i];
                    v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                    p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, NetworkConfig, HEAD_LAYERS};

    fn tiny() -> NetworkConfig {
        NetworkConfig { n_kernels: 3, head_kernels: 4, dilation_schedule: vec![1, 2], block_sizes: vec![2], ..Default::default() }
    }

    fn zero_grads(p: &NetworkParams<f64>) -> Gradients<f64> {
        Gradients {
            layers: p
                .layers()
                .iter()
                .map(|l| {
                    Some(LayerGrads {
                        weight: vec![0.0; l.weight.len()],
                        bias: vec![0.0; l.bias.len()],
                        gamma: l.bn.as_ref().map(|b| vec![0.0; b.gamma.len()]),
                        beta: l.bn.as_ref().map(|b| vec![0.0; b.beta.len()]),
                    })
                })
                .collect(),
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = build_network::<f64>(&tiny(), 1).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(&p);
        let g = zero_grads(&p);
        for _ in 0..5 {
            adam.update(&mut p, &g, 1e-4);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn frozen_layers_never_move() {
        let mut p = build_network::<f64>(&tiny(), 1).unwrap();
        p.set_trainable::<&str>(&[]).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(&p);
        let mut g = zero_grads(&p);
        for lg in g.layers.iter_mut().flatten() {
            lg.weight.iter_mut().for_each(|w| *w = 1.0);
        }
        adam.update(&mut p, &g, 1e-2);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = build_network::<f64>(&tiny(), 1).unwrap();
        p.set_trainable(&HEAD_LAYERS).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(&p);
        let mut g = zero_grads(&p);
        let i2 = p.head_output_index();
        g.layers[i2].as_mut().unwrap().bias[0] = 0.3;
        adam.update(&mut p, &g, 1e-3);
        let moved = before.layers()[i2].bias[0] - p.layers()[i2].bias[0];
        assert!((moved - 1e-3).abs() < 1e-9, "{moved}");
    }
}
