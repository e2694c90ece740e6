use super::config::{Pathway, N_CLASSES};
use super::layers::{BatchStats, LayerCache, LayerGrads};
use super::params::NetworkParams;
use super::tensor::FeatureMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Trainable layers normalise with batch statistics.
    Train,
    /// Every layer normalises with running statistics.
    Infer,
}

/// Activations retained by [`NetworkParams::forward_train`].
pub struct ForwardCache<T> {
    layers: Vec<Option<LayerCache<T>>>,
    stats: Vec<Option<BatchStats>>,
    drop_features: Option<Vec<T>>,
    drop_hidden: Option<Vec<T>>,
    pub probs: FeatureMap<T>,
}

/// Parameter gradients, aligned with [`NetworkParams::layers`]; `None` for frozen layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<LayerGrads<T>>>,
}

fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    // Drop when a uniform 32-bit word falls below rate * 2^32.
    let cut = (rate * 4_294_967_296.0).round().min(u32::MAX as f64) as u32;
    (0..len).map(|_| if rng.next_u32() < cut { T::zero() } else { keep }).collect()
}

fn apply_mask<T: Scalar>(v: &mut [T], mask: &[T]) {
    for (a, &m) in v.iter_mut().zip(mask) {
        *a *= m;
    }
}

/// In-place softmax over consecutive groups of `c` values.
pub fn softmax_rows<T: Scalar>(logits: &mut [T], c: usize) {
    for row in logits.chunks_exact_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

impl<T: Scalar> NetworkParams<T> {
    fn check_inputs(&self, a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<()> {
        let cfg = self.config();
        if a.c != cfg.in_channels_a || b.c != cfg.in_channels_b {
            return Err(Error::Shape(format!(
                "inputs carry {}+{} channels, network expects {}+{}",
                a.c, b.c, cfg.in_channels_a, cfg.in_channels_b
            )));
        }
        if (a.n, a.h, a.w) != (b.n, b.h, b.w) || a.rows() == 0 {
            return Err(Error::Shape("pathway inputs must share a non-empty batch and spatial size".into()));
        }
        Ok(())
    }

    fn lowest_trainable(&self, p: Pathway) -> Option<usize> {
        (0..self.config().layers_per_pathway()).find(|&i| self.layers()[self.pathway_index(p, i)].trainable)
    }

    /// Runs both pathways and concatenates the block tails.
    fn run_pathways(
        &self,
        a: &FeatureMap<T>,
        b: &FeatureMap<T>,
        mode: Mode,
        keep: bool,
        caches: &mut [Option<LayerCache<T>>],
        stats: &mut [Option<BatchStats>],
    ) -> FeatureMap<T> {
        let cfg = self.config();
        let k = cfg.n_kernels;
        let width = cfg.feature_width();
        let tails = cfg.block_tails();
        let mut feats = FeatureMap::zeros(a.n, a.h, a.w, width);
        for (pi, (p, input)) in [(Pathway::A, a), (Pathway::B, b)].into_iter().enumerate() {
            let lo = if keep { self.lowest_trainable(p) } else { None };
            let mut x = input.clone();
            for i in 0..cfg.layers_per_pathway() {
                let idx = self.pathway_index(p, i);
                let layer = &self.layers()[idx];
                let batch = mode == Mode::Train && layer.trainable;
                let out = layer.forward(x, batch, cfg.bn_epsilon, lo.is_some_and(|lo| i >= lo));
                caches[idx] = out.cache;
                stats[idx] = out.stats;
                x = out.y;
                if let Some(t) = tails.iter().position(|&t| t == i) {
                    let off = (pi * tails.len() + t) * k;
                    for (dst, src) in feats.data.chunks_exact_mut(width).zip(x.data.chunks_exact(k)) {
                        dst[off..off + k].copy_from_slice(src);
                    }
                }
            }
        }
        feats
    }

    /// Head on precomputed features: dropout, hidden 1x1, dropout, output 1x1, softmax.
    #[allow(clippy::too_many_arguments)]
    fn run_head<R: Rng + ?Sized>(
        &self,
        mut feats: FeatureMap<T>,
        mode: Mode,
        dropout_on: bool,
        rng: &mut R,
        keep: bool,
        caches: &mut [Option<LayerCache<T>>],
        stats: &mut [Option<BatchStats>],
    ) -> (FeatureMap<T>, Option<Vec<T>>, Option<Vec<T>>) {
        let cfg = self.config();
        let rate = cfg.dropout_rate;
        let use_drop = dropout_on && rate > 0.0;
        let m1 = use_drop.then(|| dropout_mask(feats.data.len(), rate, rng));
        if let Some(m) = &m1 {
            apply_mask(&mut feats.data, m);
        }
        let (i1, i2) = (self.head_hidden_index(), self.head_output_index());
        let l1 = &self.layers()[i1];
        let out = l1.forward(feats, mode == Mode::Train && l1.trainable, cfg.bn_epsilon, keep);
        caches[i1] = out.cache;
        stats[i1] = out.stats;
        let mut hidden = out.y;
        let m2 = use_drop.then(|| dropout_mask(hidden.data.len(), rate, rng));
        if let Some(m) = &m2 {
            apply_mask(&mut hidden.data, m);
        }
        let l2 = &self.layers()[i2];
        let out = l2.forward(hidden, false, cfg.bn_epsilon, keep);
        caches[i2] = out.cache;
        let mut probs = out.y;
        softmax_rows(&mut probs.data, N_CLASSES);
        (probs, m1, m2)
    }

    /// Per-pixel class probabilities (`n, h, w, 2`).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        a: &FeatureMap<T>,
        b: &FeatureMap<T>,
        mode: Mode,
        dropout_on: bool,
        rng: &mut R,
    ) -> Result<FeatureMap<T>> {
        self.check_inputs(a, b)?;
        let n = self.layers().len();
        let (mut caches, mut stats) = (empty(n), empty(n));
        let feats = self.run_pathways(a, b, mode, false, &mut caches, &mut stats);
        Ok(self.run_head(feats, mode, dropout_on, rng, false, &mut caches, &mut stats).0)
    }

    /// Concatenated block-tail features with running statistics throughout.
    pub fn features(&self, a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_inputs(a, b)?;
        let n = self.layers().len();
        let (mut caches, mut stats) = (empty(n), empty(n));
        Ok(self.run_pathways(a, b, Mode::Infer, false, &mut caches, &mut stats))
    }

    /// Inference-mode head applied to features from [`Self::features`];
    /// any row subset of a feature map is a valid input.
    pub fn head_forward<R: Rng + ?Sized>(&self, feats: FeatureMap<T>, dropout_on: bool, rng: &mut R) -> Result<FeatureMap<T>> {
        if feats.c != self.config().feature_width() {
            return Err(Error::Shape(format!(
                "features carry {} channels, head expects {}",
                feats.c,
                self.config().feature_width()
            )));
        }
        let n = self.layers().len();
        let (mut caches, mut stats) = (empty(n), empty(n));
        Ok(self.run_head(feats, Mode::Infer, dropout_on, rng, false, &mut caches, &mut stats).0)
    }

    /// Train-mode forward that keeps whatever [`Self::backward`] needs.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        a: &FeatureMap<T>,
        b: &FeatureMap<T>,
        dropout_on: bool,
        rng: &mut R,
    ) -> Result<ForwardCache<T>> {
        self.check_inputs(a, b)?;
        let n = self.layers().len();
        let (mut caches, mut stats) = (empty(n), empty(n));
        let feats = self.run_pathways(a, b, Mode::Train, true, &mut caches, &mut stats);
        let (probs, drop_features, drop_hidden) =
            self.run_head(feats, Mode::Train, dropout_on, rng, true, &mut caches, &mut stats);
        Ok(ForwardCache { layers: caches, stats, drop_features, drop_hidden, probs })
    }

    /// Gradients of the loss for trainable layers, given `dlogits`
    /// (gradient with respect to the pre-softmax output, `rows x 2`).
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> Result<Gradients<T>> {
        if dlogits.len() != cache.probs.data.len() {
            return Err(Error::Shape("logit gradient does not match the forward output".into()));
        }
        let cfg = self.config();
        let layers = self.layers();
        let mut grads: Vec<Option<LayerGrads<T>>> = vec![None; layers.len()];
        let (i1, i2) = (self.head_hidden_index(), self.head_output_index());
        let lows = [self.lowest_trainable(Pathway::A), self.lowest_trainable(Pathway::B)];
        let any_path = lows.iter().any(Option::is_some);
        let need_hidden = any_path || layers[i1].trainable;

        let c2 = cache.layers[i2].as_ref().expect("head output cache");
        let (g2, dh) = layers[i2].backward(c2, dlogits.to_vec(), need_hidden);
        grads[i2] = g2;
        let Some(mut dh) = dh else {
            return Ok(Gradients { layers: grads });
        };
        if let Some(m) = &cache.drop_hidden {
            apply_mask(&mut dh, m);
        }
        let c1 = cache.layers[i1].as_ref().expect("head hidden cache");
        let (g1, df) = layers[i1].backward(c1, dh, any_path);
        grads[i1] = g1;
        let Some(mut df) = df else {
            return Ok(Gradients { layers: grads });
        };
        if let Some(m) = &cache.drop_features {
            apply_mask(&mut df, m);
        }

        let k = cfg.n_kernels;
        let width = cfg.feature_width();
        let tails = cfg.block_tails();
        for (pi, p) in [Pathway::A, Pathway::B].into_iter().enumerate() {
            let Some(lo) = lows[pi] else { continue };
            let mut carry: Option<Vec<T>> = None;
            for i in (lo..cfg.layers_per_pathway()).rev() {
                let idx = self.pathway_index(p, i);
                let lc = cache.layers[idx].as_ref().expect("pathway cache");
                let rows = lc.input.rows();
                let mut g = carry.take().unwrap_or_else(|| vec![T::zero(); rows * k]);
                if let Some(t) = tails.iter().position(|&t| t == i) {
                    let off = (pi * tails.len() + t) * k;
                    for (dst, src) in g.chunks_exact_mut(k).zip(df.chunks_exact(width)) {
                        for (d, &s) in dst.iter_mut().zip(&src[off..off + k]) {
                            *d += s;
                        }
                    }
                }
                let (gl, dx) = layers[idx].backward(lc, g, i > lo);
                grads[idx] = gl;
                carry = dx;
            }
        }
        Ok(Gradients { layers: grads })
    }

    /// Folds the batch statistics of a train-mode pass into the running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let m = self.config().bn_momentum;
        for (layer, st) in self.layers_mut().iter_mut().zip(&cache.stats) {
            let (Some(bn), Some(st)) = (layer.bn.as_mut(), st) else { continue };
            for c in 0..bn.running_mean.len() {
                bn.running_mean[c] = T::lit(m * bn.running_mean[c].as_f64() + (1.0 - m) * st.mean[c]);
                bn.running_var[c] = T::lit(m * bn.running_var[c].as_f64() + (1.0 - m) * st.var[c]);
            }
        }
    }
}

fn empty<V>(n: usize) -> Vec<Option<V>> {
    (0..n).map(|_| None).collect()
}
