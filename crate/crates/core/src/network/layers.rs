use super::params::ConvLayer;
use super::tensor::FeatureMap;
use crate::linalg::{gemm, MatMut, MatRef};
use crate::scalar::Scalar;

/// Layout for tap-wise convolution. Each image is zero-padded by `p` on
/// every side; outputs are produced on an `h x wp` grid whose columns past
/// `w` are scratch. With that layout every kernel tap reads the padded input
/// at a constant row offset, so one GEMM per tap replaces an unrolled
/// column matrix.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PadGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d: usize,
    pub p: usize,
    pub wp: usize,
    /// Elements per padded image.
    pub img: usize,
}

impl PadGeom {
    pub fn new(n: usize, h: usize, w: usize, c: usize, k: usize, d: usize) -> Self {
        let p = (k / 2) * d;
        let wp = w + 2 * p;
        Self { n, h, w, c, d, p, wp, img: (h + 2 * p) * wp * c }
    }

    /// Buffer length, including the tail that keeps the last image's tap views in bounds.
    pub fn len(&self) -> usize {
        self.n * self.img + 2 * self.p * self.c
    }

    /// Offset of tap `(ky, kx)` relative to the start of an image.
    pub fn tap(&self, ky: usize, kx: usize) -> usize {
        (ky * self.d * self.wp + kx * self.d) * self.c
    }

    /// Output rows per image on the scratch grid.
    pub fn grid_rows(&self) -> usize {
        self.h * self.wp
    }
}

pub(crate) fn pad_input<T: Scalar>(x: &FeatureMap<T>, g: &PadGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.len()];
    let row = g.w * g.c;
    for b in 0..g.n {
        let img = x.image(b);
        for y in 0..g.h {
            let dst = b * g.img + ((y + g.p) * g.wp + g.p) * g.c;
            out[dst..dst + row].copy_from_slice(&img[y * row..(y + 1) * row]);
        }
    }
    out
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub(crate) struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f64>,
}

pub(crate) struct Normalized<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch: bool,
}

/// What backward needs from one layer's forward pass.
pub(crate) struct LayerCache<T> {
    pub input: FeatureMap<T>,
    /// Padded input, kept for trainable spatial layers.
    pub padded: Option<Vec<T>>,
    pub output: Vec<T>,
    pub norm: Option<Normalized<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

pub(crate) struct LayerOutput<T> {
    pub y: FeatureMap<T>,
    pub cache: Option<LayerCache<T>>,
    pub stats: Option<BatchStats>,
}

/// Rows per partial sum kept in `T` before folding into f64.
const BLOCK: usize = 64;

fn channel_sums<T: Scalar>(v: &[T], c: usize) -> Vec<f64> {
    let mut s = vec![0.0f64; c];
    let mut part = vec![T::zero(); c];
    for block in v.chunks(BLOCK * c) {
        part.fill(T::zero());
        for row in block.chunks_exact(c) {
            for (a, &x) in part.iter_mut().zip(row) {
                *a += x;
            }
        }
        for (a, &p) in s.iter_mut().zip(&part) {
            *a += p.as_f64();
        }
    }
    s
}

fn centred_squares<T: Scalar>(v: &[T], mean: &[f64]) -> Vec<f64> {
    let c = mean.len();
    let m: Vec<T> = mean.iter().map(|&x| T::lit(x)).collect();
    let mut s = vec![0.0f64; c];
    let mut part = vec![T::zero(); c];
    for block in v.chunks(BLOCK * c) {
        part.fill(T::zero());
        for row in block.chunks_exact(c) {
            for ((a, &x), &mu) in part.iter_mut().zip(row).zip(&m) {
                let d = x - mu;
                *a += d * d;
            }
        }
        for (a, &p) in s.iter_mut().zip(&part) {
            *a += p.as_f64();
        }
    }
    s
}

fn products_sums<T: Scalar>(a: &[T], b: &[T], c: usize) -> Vec<f64> {
    let mut s = vec![0.0f64; c];
    let mut part = vec![T::zero(); c];
    for (ba, bb) in a.chunks(BLOCK * c).zip(b.chunks(BLOCK * c)) {
        part.fill(T::zero());
        for (ra, rb) in ba.chunks_exact(c).zip(bb.chunks_exact(c)) {
            for ((p, &x), &y) in part.iter_mut().zip(ra).zip(rb) {
                *p += x * y;
            }
        }
        for (a, &p) in s.iter_mut().zip(&part) {
            *a += p.as_f64();
        }
    }
    s
}

impl<T: Scalar> ConvLayer<T> {
    fn weight_tap(&self, ky: usize, kx: usize) -> MatRef<'_, T> {
        let (c, o) = (self.in_channels, self.out_channels);
        MatRef::new(&self.weight[(ky * self.kernel + kx) * c * o..][..c * o], c, o)
    }

    fn linear(&self, x: &FeatureMap<T>, keep_padded: bool) -> (Vec<T>, Option<Vec<T>>) {
        let rows = x.rows();
        let cout = self.out_channels;
        if self.kernel == 1 {
            let mut z: Vec<T> = Vec::with_capacity(rows * cout);
            for _ in 0..rows {
                z.extend_from_slice(&self.bias);
            }
            let w = MatRef::new(&self.weight, self.fan_in(), cout);
            gemm(T::one(), MatRef::new(&x.data, rows, x.c), w, T::one(), MatMut::new(&mut z, rows, cout));
            return (z, None);
        }
        let g = PadGeom::new(x.n, x.h, x.w, x.c, self.kernel, self.dilation);
        let xp = pad_input(x, &g);
        let gr = g.grid_rows();
        let mut grid = vec![T::zero(); gr * cout];
        let mut z = Vec::with_capacity(rows * cout);
        for b in 0..g.n {
            for row in grid.chunks_exact_mut(cout) {
                row.copy_from_slice(&self.bias);
            }
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let a = MatRef::new(&xp[b * g.img + g.tap(ky, kx)..], gr, g.c);
                    gemm(T::one(), a, self.weight_tap(ky, kx), T::one(), MatMut::new(&mut grid, gr, cout));
                }
            }
            for y in 0..g.h {
                z.extend_from_slice(&grid[y * g.wp * cout..(y * g.wp + g.w) * cout]);
            }
        }
        (z, keep_padded.then_some(xp))
    }

    /// Convolution, normalisation and activation. `batch` selects batch
    /// statistics over running ones; `keep` retains what backward needs.
    pub(crate) fn forward(&self, x: FeatureMap<T>, batch: bool, eps: f64, keep: bool) -> LayerOutput<T> {
        debug_assert_eq!(x.c, self.in_channels);
        let cout = self.out_channels;
        let rows = x.rows();
        let (mut z, padded) = self.linear(&x, keep && self.trainable);
        let mut norm = None;
        let mut stats = None;
        if let Some(bn) = &self.bn {
            let (mean, inv_std): (Vec<f64>, Vec<f64>) = if batch {
                let mean: Vec<f64> = channel_sums(&z, cout).into_iter().map(|s| s / rows as f64).collect();
                let ss = centred_squares(&z, &mean);
                let var: Vec<f64> = ss.iter().map(|s| s / rows as f64).collect();
                let inv = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let unbiased = ss.iter().map(|s| if rows > 1 { s / (rows - 1) as f64 } else { 0.0 }).collect();
                stats = Some(BatchStats { mean: mean.clone(), var: unbiased });
                (mean, inv)
            } else {
                (
                    bn.running_mean.iter().map(|m| m.as_f64()).collect(),
                    bn.running_var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect(),
                )
            };
            let mean: Vec<T> = mean.into_iter().map(T::lit).collect();
            let inv: Vec<T> = inv_std.into_iter().map(T::lit).collect();
            let shift: Vec<T> = bn.beta.iter().zip(&bn.gamma).zip(&mean).zip(&inv).map(|(((&b, &g), &m), &i)| b - g * m * i).collect();
            let scale: Vec<T> = bn.gamma.iter().zip(&inv).map(|(&g, &i)| g * i).collect();
            let mut xhat = Vec::new();
            if keep {
                xhat = vec![T::zero(); z.len()];
                for (xrow, zrow) in xhat.chunks_exact_mut(cout).zip(z.chunks_exact(cout)) {
                    for (((o, &v), &m), &i) in xrow.iter_mut().zip(zrow).zip(&mean).zip(&inv) {
                        *o = (v - m) * i;
                    }
                }
            }
            for row in z.chunks_exact_mut(cout) {
                for ((v, &a), &b) in row.iter_mut().zip(&scale).zip(&shift) {
                    *v = *v * a + b;
                }
            }
            if keep {
                norm = Some(Normalized { xhat, inv_std: inv, batch });
            }
        }
        if self.relu {
            for v in &mut z {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        let y = FeatureMap { n: x.n, h: x.h, w: x.w, c: cout, data: z };
        let cache = keep.then(|| LayerCache { output: y.data.clone(), input: x, padded, norm });
        LayerOutput { y, cache, stats }
    }

    /// Back-propagates `g` (gradient at this layer's output). Returns the
    /// parameter gradients when the layer is trainable and the input
    /// gradient when `need_dx`.
    pub(crate) fn backward(&self, cache: &LayerCache<T>, mut g: Vec<T>, need_dx: bool) -> (Option<LayerGrads<T>>, Option<Vec<T>>) {
        let cout = self.out_channels;
        let x = &cache.input;
        let rows = x.rows();
        if self.relu {
            for (gi, &y) in g.iter_mut().zip(&cache.output) {
                if y <= T::zero() {
                    *gi = T::zero();
                }
            }
        }
        let mut dgamma = None;
        let mut dbeta = None;
        if let (Some(bn), Some(nc)) = (&self.bn, &cache.norm) {
            let sg = channel_sums(&g, cout);
            let sgx = products_sums(&g, &nc.xhat, cout);
            if self.trainable {
                dgamma = Some(sgx.iter().map(|&v| T::lit(v)).collect());
                dbeta = Some(sg.iter().map(|&v| T::lit(v)).collect());
            }
            let scale: Vec<T> = bn.gamma.iter().zip(&nc.inv_std).map(|(&ga, &is)| ga * is).collect();
            if nc.batch {
                let n = rows as f64;
                let mg: Vec<T> = sg.iter().map(|&s| T::lit(s / n)).collect();
                let mgx: Vec<T> = sgx.iter().map(|&s| T::lit(s / n)).collect();
                for (grow, xrow) in g.chunks_exact_mut(cout).zip(nc.xhat.chunks_exact(cout)) {
                    for ((((gv, &xv), &s), &m), &mx) in grow.iter_mut().zip(xrow).zip(&scale).zip(&mg).zip(&mgx) {
                        *gv = s * (*gv - m - xv * mx);
                    }
                }
            } else {
                for grow in g.chunks_exact_mut(cout) {
                    for (gv, &s) in grow.iter_mut().zip(&scale) {
                        *gv *= s;
                    }
                }
            }
        }
        let dz = g;
        let fan_in = self.fan_in();
        if self.kernel == 1 {
            let grads = self.trainable.then(|| {
                let bias = channel_sums(&dz, cout).into_iter().map(T::lit).collect();
                let mut weight = vec![T::zero(); fan_in * cout];
                gemm(
                    T::one(),
                    MatRef::new(&x.data, rows, fan_in).t(),
                    MatRef::new(&dz, rows, cout),
                    T::zero(),
                    MatMut::new(&mut weight, fan_in, cout),
                );
                LayerGrads { weight, bias, gamma: dgamma, beta: dbeta }
            });
            let dx = need_dx.then(|| {
                let mut dxv = vec![T::zero(); rows * fan_in];
                gemm(
                    T::one(),
                    MatRef::new(&dz, rows, cout),
                    MatRef::new(&self.weight, fan_in, cout).t(),
                    T::zero(),
                    MatMut::new(&mut dxv, rows, fan_in),
                );
                dxv
            });
            return (grads, dx);
        }
        let g = PadGeom::new(x.n, x.h, x.w, x.c, self.kernel, self.dilation);
        let gr = g.grid_rows();
        let padded_owned;
        let xp: &[T] = match (&cache.padded, self.trainable) {
            (Some(p), _) => p,
            (None, true) => {
                padded_owned = pad_input(x, &g);
                &padded_owned
            }
            (None, false) => &[],
        };
        let mut weight = if self.trainable { vec![T::zero(); fan_in * cout] } else { Vec::new() };
        let mut dxp = if need_dx { vec![T::zero(); g.len()] } else { Vec::new() };
        // Output gradient on the scratch grid; scratch columns stay zero.
        let mut grid = vec![T::zero(); gr * cout];
        for b in 0..g.n {
            for y in 0..g.h {
                let src = ((b * g.h + y) * g.w) * cout;
                grid[y * g.wp * cout..(y * g.wp + g.w) * cout].copy_from_slice(&dz[src..src + g.w * cout]);
            }
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let off = b * g.img + g.tap(ky, kx);
                    if self.trainable {
                        let blk = (ky * self.kernel + kx) * g.c * cout;
                        gemm(
                            T::one(),
                            MatRef::new(&xp[off..], gr, g.c).t(),
                            MatRef::new(&grid, gr, cout),
                            T::one(),
                            MatMut::new(&mut weight[blk..blk + g.c * cout], g.c, cout),
                        );
                    }
                    if need_dx {
                        gemm(
                            T::one(),
                            MatRef::new(&grid, gr, cout),
                            self.weight_tap(ky, kx).t(),
                            T::one(),
                            MatMut::new(&mut dxp[off..], gr, g.c),
                        );
                    }
                }
            }
        }
        let grads = self.trainable.then(|| {
            let bias = channel_sums(&dz, cout).into_iter().map(T::lit).collect();
            LayerGrads { weight, bias, gamma: dgamma, beta: dbeta }
        });
        let dx = need_dx.then(|| {
            let row = g.w * g.c;
            let mut out = Vec::with_capacity(rows * g.c);
            for b in 0..g.n {
                for y in 0..g.h {
                    let src = b * g.img + ((y + g.p) * g.wp + g.p) * g.c;
                    out.extend_from_slice(&dxp[src..src + row]);
                }
            }
            out
        });
        (grads, dx)
    }
}
