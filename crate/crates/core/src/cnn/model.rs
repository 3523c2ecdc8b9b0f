//! Convolutional classifier: conv/ReLU/max-pool stages, one dense unit,
//! sigmoid output (1 = malicious).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::metrics::{bce_from_logit, sigmoid};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::imaging::{GreyImage, IMAGE_DIM};
use crate::scalar::Scalar;

/// Layer configuration. Every conv stage is `kernel x kernel`, stride 1,
/// no padding, ReLU, then `pool x pool` max pooling with stride `pool`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub kernel: usize,
    pub pool: usize,
    pub filters: Vec<usize>,
}

impl Architecture {
    /// Three conv stages with 16/32/64 filters of 3x3 and 2x2 pooling.
    pub fn reference() -> Self {
        Self {
            input_dim: IMAGE_DIM,
            kernel: 3,
            pool: 2,
            filters: vec![16, 32, 64],
        }
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(Layout::new(self)?.total)
    }

    /// Size of the flattened feature vector feeding the dense layer.
    pub fn dense_inputs(&self) -> Result<usize> {
        Ok(Layout::new(self)?.dense_in)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub side_in: usize,
    pub side_conv: usize,
    pub side_pool: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvGeom {
    fn ckk(&self, k: usize) -> usize {
        self.in_ch * k * k
    }

    fn plane(&self) -> usize {
        self.side_conv * self.side_conv
    }
}

/// Offsets of every parameter block in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub convs: Vec<ConvGeom>,
    pub dense_in: usize,
    pub dense_w: usize,
    pub dense_b: usize,
    pub total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Result<Self> {
        let bad = |why: String| Error::InvalidConfig(format!("architecture {arch:?}: {why}"));
        if arch.kernel == 0 || arch.pool == 0 || arch.filters.is_empty() || arch.filters.contains(&0) {
            return Err(bad("kernel, pool and filter counts must be positive".into()));
        }
        let mut convs = Vec::with_capacity(arch.filters.len());
        let (mut side, mut ch, mut off) = (arch.input_dim, 1usize, 0usize);
        for &out_ch in &arch.filters {
            if side < arch.kernel {
                return Err(bad(format!("feature map of side {side} is smaller than the kernel")));
            }
            let side_conv = side - arch.kernel + 1;
            let side_pool = side_conv / arch.pool;
            if side_pool == 0 {
                return Err(bad("pooling collapses the feature map".into()));
            }
            let w_off = off;
            off += out_ch * ch * arch.kernel * arch.kernel;
            let b_off = off;
            off += out_ch;
            convs.push(ConvGeom {
                in_ch: ch,
                out_ch,
                side_in: side,
                side_conv,
                side_pool,
                w_off,
                b_off,
            });
            side = side_pool;
            ch = out_ch;
        }
        let dense_in = ch * side * side;
        let dense_w = off;
        let dense_b = off + dense_in;
        Ok(Self {
            convs,
            dense_in,
            dense_w,
            dense_b,
            total: dense_b + 1,
        })
    }
}

#[derive(Debug, Default)]
struct StageCache<S> {
    cols: Vec<S>,
    act: Vec<S>,
    pooled: Vec<S>,
    argmax: Vec<u32>,
}

/// Reusable buffers for forward and backward passes.
#[derive(Debug, Default)]
pub struct Workspace<S> {
    stages: Vec<StageCache<S>>,
    grad_a: Vec<S>,
    grad_act: Vec<S>,
    grad_cols: Vec<S>,
}

impl<S: Scalar> Workspace<S> {
    pub fn new() -> Self {
        Self {
            stages: Vec::new(),
            grad_a: Vec::new(),
            grad_act: Vec::new(),
            grad_cols: Vec::new(),
        }
    }
}

/// Score, loss and optional input gradient for one image.
#[derive(Debug, Clone)]
pub struct Evaluation<S> {
    pub logit: S,
    pub score: S,
    pub loss: S,
    pub input_gradient: Option<Tensor<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<S> {
    arch: Architecture,
    layout: Layout,
    params: Vec<S>,
    pub seed: u64,
    pub epochs_trained: usize,
}

impl<S: Scalar> CnnModel<S> {
    /// All parameters zero; every input scores exactly 0.5.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        let layout = Layout::new(&arch)?;
        Ok(Self {
            params: vec![S::zero(); layout.total],
            arch,
            layout,
            seed: 0,
            epochs_trained: 0,
        })
    }

    /// Seeded He-uniform initialisation, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        m.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = m.arch.kernel;
        for g in m.layout.convs.clone() {
            let limit = (6.0 / (g.in_ch * k * k) as f64).sqrt();
            for p in &mut m.params[g.w_off..g.b_off] {
                *p = S::of(rng.gen_range(-limit..limit));
            }
        }
        let limit = (6.0 / m.layout.dense_in as f64).sqrt();
        let (w, b) = (m.layout.dense_w, m.layout.dense_b);
        for p in &mut m.params[w..b] {
            *p = S::of(rng.gen_range(-limit..limit));
        }
        Ok(m)
    }

    pub fn from_params(arch: Architecture, params: Vec<S>) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        if params.len() != m.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", m.params.len()),
                found: format!("{}", params.len()),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<T: Scalar>(&self) -> CnnModel<T> {
        CnnModel {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&p| T::of(p.as_f64())).collect(),
            seed: self.seed,
            epochs_trained: self.epochs_trained,
        }
    }

    fn check_input(&self, image: &GreyImage<S>) -> Result<()> {
        let d = self.arch.input_dim;
        if image.width() != d || image.height() != d {
            return Err(Error::ShapeMismatch {
                expected: format!("{d}x{d} image"),
                found: format!("{}x{}", image.width(), image.height()),
            });
        }
        Ok(())
    }

    /// Probability that the image is malicious.
    pub fn forward(&self, image: &GreyImage<S>) -> Result<S> {
        Ok(sigmoid(self.logit(image)?))
    }

    pub fn logit(&self, image: &GreyImage<S>) -> Result<S> {
        self.check_input(image)?;
        Ok(self.forward_cached(image.pixels(), &mut Workspace::new()))
    }

    /// Exact gradient of `BCE(forward(x), target)` with respect to every pixel.
    pub fn input_gradient(&self, image: &GreyImage<S>, target: u8) -> Result<Tensor<S>> {
        let eval = self.evaluate(image, target, true, &mut Workspace::new())?;
        Ok(eval.input_gradient.expect("requested"))
    }

    /// One forward pass, plus the input gradient when `with_gradient`.
    pub fn evaluate(
        &self,
        image: &GreyImage<S>,
        target: u8,
        with_gradient: bool,
        ws: &mut Workspace<S>,
    ) -> Result<Evaluation<S>> {
        self.check_input(image)?;
        let y = target_value::<S>(target)?;
        let logit = self.forward_cached(image.pixels(), ws);
        let score = sigmoid(logit);
        let input_gradient = with_gradient.then(|| {
            let data = self.backward(ws, score - y, None, true).expect("input gradient");
            let d = self.arch.input_dim;
            Tensor::new(vec![d, d], data).expect("input-shaped gradient")
        });
        Ok(Evaluation {
            logit,
            score,
            loss: bce_from_logit(logit, y),
            input_gradient,
        })
    }

    /// Adds the parameter gradient of the BCE loss for one sample to `grad`
    /// and returns the logit.
    pub fn accumulate_param_gradient(
        &self,
        pixels: &[S],
        target: u8,
        grad: &mut [S],
        ws: &mut Workspace<S>,
    ) -> Result<S> {
        let d = self.arch.input_dim;
        if pixels.len() != d * d {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixels", d * d),
                found: format!("{}", pixels.len()),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient entries", self.params.len()),
                found: format!("{}", grad.len()),
            });
        }
        let y = target_value::<S>(target)?;
        let logit = self.forward_cached(pixels, ws);
        self.backward(ws, sigmoid(logit) - y, Some(grad), false);
        Ok(logit)
    }

    /// Logit for raw pixels; used by batch scoring.
    pub fn logit_pixels(&self, pixels: &[S], ws: &mut Workspace<S>) -> S {
        assert_eq!(pixels.len(), self.arch.input_dim * self.arch.input_dim);
        self.forward_cached(pixels, ws)
    }

    fn forward_cached(&self, input: &[S], ws: &mut Workspace<S>) -> S {
        let k = self.arch.kernel;
        let p = self.arch.pool;
        ws.stages.resize_with(self.layout.convs.len(), StageCache::default);
        for (l, g) in self.layout.convs.iter().enumerate() {
            let (done, rest) = ws.stages.split_at_mut(l);
            let src: &[S] = if l == 0 { input } else { &done[l - 1].pooled };
            let cache = &mut rest[0];
            im2col(src, g.in_ch, g.side_in, g.side_in, k, &mut cache.cols);
            conv_forward(
                &self.params[g.w_off..g.b_off],
                &self.params[g.b_off..g.b_off + g.out_ch],
                &cache.cols,
                g.out_ch,
                g.ckk(k),
                g.plane(),
                &mut cache.act,
            );
            relu_inplace(&mut cache.act);
            maxpool_forward(
                &cache.act,
                g.out_ch,
                g.side_conv,
                g.side_conv,
                p,
                &mut cache.pooled,
                &mut cache.argmax,
            );
        }
        let features = &ws.stages.last().expect("at least one stage").pooled;
        let w = &self.params[self.layout.dense_w..self.layout.dense_b];
        let dot: S = w.iter().zip(features).map(|(&a, &b)| a * b).sum();
        dot + self.params[self.layout.dense_b]
    }

    /// Backpropagates `dlogit` through the cached pass.
    fn backward(
        &self,
        ws: &mut Workspace<S>,
        dlogit: S,
        mut grad: Option<&mut [S]>,
        want_input: bool,
    ) -> Option<Vec<S>> {
        let k = self.arch.kernel;
        let lay = &self.layout;
        let features = &ws.stages.last().expect("forward ran").pooled;
        let dense_w = &self.params[lay.dense_w..lay.dense_b];
        if let Some(g) = grad.as_deref_mut() {
            for (gw, &a) in g[lay.dense_w..lay.dense_b].iter_mut().zip(features) {
                *gw += dlogit * a;
            }
            g[lay.dense_b] += dlogit;
        }
        ws.grad_a.clear();
        ws.grad_a.extend(dense_w.iter().map(|&w| dlogit * w));

        for (l, g) in lay.convs.iter().enumerate().rev() {
            let cache = &ws.stages[l];
            ws.grad_act.resize(g.out_ch * g.plane(), S::zero());
            maxpool_backward(&ws.grad_a, &cache.argmax, &mut ws.grad_act);
            for (ga, &a) in ws.grad_act.iter_mut().zip(&cache.act) {
                if a <= S::zero() {
                    *ga = S::zero();
                }
            }
            let need_cols = l > 0 || want_input;
            let param_grads = grad.as_deref_mut().map(|gr| {
                let (w, b) = gr[g.w_off..g.b_off + g.out_ch].split_at_mut(g.b_off - g.w_off);
                (w, b)
            });
            conv_backward(
                &self.params[g.w_off..g.b_off],
                &cache.cols,
                &ws.grad_act,
                g.out_ch,
                g.ckk(k),
                g.plane(),
                param_grads,
                need_cols.then_some(&mut ws.grad_cols),
            );
            if need_cols {
                ws.grad_a.resize(g.in_ch * g.side_in * g.side_in, S::zero());
                col2im(&ws.grad_cols, g.in_ch, g.side_in, g.side_in, k, &mut ws.grad_a);
            }
        }
        want_input.then(|| ws.grad_a.clone())
    }
}

impl CnnModel<f64> {
    /// Reference architecture with seeded initialisation.
    pub fn reference(seed: u64) -> Self {
        Self::init(Architecture::reference(), seed).expect("reference architecture is consistent")
    }
}

fn target_value<S: Scalar>(target: u8) -> Result<S> {
    match target {
        0 => Ok(S::zero()),
        1 => Ok(S::one()),
        t => Err(Error::InvalidTarget(t)),
    }
}
