//! Configurable 3D U-Net.
//!
//! Each resolution level of the encoder holds two conv blocks
//! (3×3×3 conv → batch norm → ReLU) followed by 2×2×2 max pooling. Each
//! decoder level up-samples with a 2×2×2 transposed convolution, concatenates
//! the matching encoder output and applies two more conv blocks. A 1×1×1
//! projection produces the logits. With four levels that is eight encoder
//! convolutions and ten decoder layers (three up-convolutions, six conv
//! blocks, one projection).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::ops::{conv, norm, pointwise, pool, upconv};
use crate::params::{Gradients, ParamEntry, ParamKind, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of resolution levels, including the bottleneck.
    pub levels: usize,
    /// Feature channels at full resolution; doubles per level.
    pub base_width: usize,
    /// Weight of the old value when updating running norm statistics.
    #[serde(default = "default_momentum")]
    pub norm_momentum: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl UNetConfig {
    /// One intensity channel in, background plus 13 organs out.
    pub fn coarse() -> Self {
        Self {
            in_channels: 1,
            out_channels: 14,
            levels: 4,
            base_width: 8,
            norm_momentum: default_momentum(),
        }
    }

    /// Intensity and prior channels in, background/organ out.
    pub fn refine() -> Self {
        Self {
            in_channels: 2,
            out_channels: 2,
            ..Self::coarse()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(NnError::InvalidConfig("channel counts must be >= 1".into()));
        }
        if self.levels == 0 || self.base_width == 0 {
            return Err(NnError::InvalidConfig("levels and base_width must be >= 1".into()));
        }
        if self.levels > 8 {
            return Err(NnError::InvalidConfig("at most 8 levels are supported".into()));
        }
        if !(0.0..1.0).contains(&self.norm_momentum) {
            return Err(NnError::InvalidConfig("norm_momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; parameters are not touched.
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    weight: usize,
    bias: usize,
    scale: usize,
    shift: usize,
    mean: usize,
    var: usize,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone, Copy)]
struct UpIdx {
    weight: usize,
    bias: usize,
    cout: usize,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, ParamKind)>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) -> usize {
        self.specs.push((name, shape, kind));
        self.specs.len() - 1
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) -> BlockIdx {
        BlockIdx {
            weight: self.push(
                format!("{prefix}.conv.weight"),
                vec![cout, cin, 3, 3, 3],
                ParamKind::Weight { fan_in: cin * 27 },
            ),
            bias: self.push(format!("{prefix}.conv.bias"), vec![cout], ParamKind::Bias),
            scale: self.push(format!("{prefix}.norm.scale"), vec![cout], ParamKind::NormScale),
            shift: self.push(format!("{prefix}.norm.shift"), vec![cout], ParamKind::NormShift),
            mean: self.push(
                format!("{prefix}.norm.running_mean"),
                vec![cout],
                ParamKind::RunningMean,
            ),
            var: self.push(format!("{prefix}.norm.running_var"), vec![cout], ParamKind::RunningVar),
            cin,
            cout,
        }
    }
}

/// Network topology with the parameter indices of every layer.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    specs: Vec<(String, Vec<usize>, ParamKind)>,
    enc: Vec<[BlockIdx; 2]>,
    /// `dec[l]` up-samples from level `l + 1` to level `l`.
    dec: Vec<(UpIdx, [BlockIdx; 2])>,
    head: (usize, usize),
}

#[derive(Debug, Clone)]
struct BlockTrace<T> {
    input: Tensor<T>,
    norm: norm::NormCache<T>,
}

/// Activations recorded by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    enc: Vec<[BlockTrace<T>; 2]>,
    pool_argmax: Vec<Vec<u8>>,
    up_input: Vec<Tensor<T>>,
    dec: Vec<[BlockTrace<T>; 2]>,
    head_input: Tensor<T>,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = LayoutBuilder { specs: Vec::new() };
        let levels = config.levels;
        let mut enc = Vec::with_capacity(levels);
        let mut cin = config.in_channels;
        for l in 0..levels {
            let w = config.width(l);
            let a = b.block(&format!("enc{l}.a"), cin, w);
            let bb = b.block(&format!("enc{l}.b"), w, w);
            enc.push([a, bb]);
            cin = w;
        }
        let mut dec: Vec<(UpIdx, [BlockIdx; 2])> = Vec::with_capacity(levels.saturating_sub(1));
        for l in 0..levels - 1 {
            let (wi, wo) = (config.width(l + 1), config.width(l));
            let up = UpIdx {
                weight: b.push(
                    format!("dec{l}.up.weight"),
                    vec![wi, wo, 2, 2, 2],
                    ParamKind::Weight { fan_in: wi },
                ),
                bias: b.push(format!("dec{l}.up.bias"), vec![wo], ParamKind::Bias),

                cout: wo,
            };
            let a = b.block(&format!("dec{l}.a"), 2 * wo, wo);
            let bb = b.block(&format!("dec{l}.b"), wo, wo);
            dec.push((up, [a, bb]));
        }
        let w0 = config.width(0);
        let head = (
            b.push(
                "head.weight".into(),
                vec![config.out_channels, w0],
                ParamKind::Weight { fan_in: w0 },
            ),
            b.push("head.bias".into(), vec![config.out_channels], ParamKind::Bias),
        );
        Ok(Self {
            config,
            specs: b.specs,
            enc,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Parameter names, shapes and kinds in storage order.
    pub fn param_specs(&self) -> impl Iterator<Item = (&str, &[usize], ParamKind)> {
        self.specs.iter().map(|(n, s, k)| (n.as_str(), s.as_slice(), *k))
    }

    /// He-scaled normal kernels, zero biases, unit norm scale, zero shift.
    pub fn init_params<T: Scalar, R: Rng>(&self, rng: &mut R) -> ParamSet<T> {
        let entries = self
            .specs
            .iter()
            .map(|(name, shape, kind)| {
                let len: usize = shape.iter().product();
                let data = match kind {
                    ParamKind::Weight { fan_in } => {
                        let dist = Normal::new(0.0, (2.0 / *fan_in as f64).sqrt()).expect("positive std");
                        (0..len).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
                    }
                    ParamKind::NormScale | ParamKind::RunningVar => vec![T::one(); len],
                    ParamKind::Bias | ParamKind::NormShift | ParamKind::RunningMean => {
                        vec![T::zero(); len]
                    }
                };
                ParamEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    kind: *kind,
                    data,
                }
            })
            .collect();
        ParamSet::new(entries).expect("layout shapes are consistent")
    }

    /// Checks that `params` has exactly this network's layout.
    pub fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(NnError::Shape(format!(
                "expected {} parameter arrays, got {}",
                self.specs.len(),
                params.len()
            )));
        }
        for (e, (name, shape, _)) in params.entries().iter().zip(&self.specs) {
            if &e.name != name || &e.shape != shape {
                return Err(NnError::Shape(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    e.name, e.shape
                )));
            }
        }
        Ok(())
    }

    fn check_input<T: Scalar>(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels() != self.config.in_channels {
            return Err(NnError::Shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels,
                input.channels()
            )));
        }
        let m = self.config.size_multiple();
        if input.batch() == 0 || input.spatial().iter().any(|&d| d == 0 || d % m != 0) {
            return Err(NnError::Shape(format!(
                "input dims {:?} must be positive multiples of {m}",
                input.spatial()
            )));
        }
        Ok(())
    }

    /// Runs the network. In [`Mode::Train`] running statistics are updated and
    /// a trace for [`UNet::backward`] is returned.
    pub fn forward<T: Scalar>(
        &self,
        params: &mut ParamSet<T>,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Option<Trace<T>>)> {
        match mode {
            Mode::Train => self.forward_train(params, input).map(|(y, t)| (y, Some(t))),
            Mode::Eval => self.forward_eval(params, input).map(|y| (y, None)),
        }
    }

    /// Inference pass using running statistics; `params` is not modified.
    pub fn forward_eval<T: Scalar>(&self, params: &ParamSet<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        self.check_params(params)?;
        let block = |b: &BlockIdx, x: &Tensor<T>| -> Result<Tensor<T>> {
            let y = conv::forward(x, params.data(b.weight), Some(params.data(b.bias)), b.cout)?;
            Ok(norm::forward_eval(
                &y,
                params.data(b.scale),
                params.data(b.shift),
                params.data(b.mean),
                params.data(b.var),
            ))
        };
        let levels = self.config.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut x = input.clone();
        for (l, [a, b]) in self.enc.iter().enumerate() {
            let h = block(a, &x)?;
            let h = block(b, &h)?;
            if l + 1 < levels {
                x = pool::forward(&h)?.0;
            }
            skips.push(h);
        }
        let mut cur = skips.pop().expect("at least one level");
        for l in (0..levels - 1).rev() {
            let (up, [a, b]) = &self.dec[l];
            let u = upconv::forward(&cur, params.data(up.weight), params.data(up.bias), up.cout)?;
            let skip = skips.pop().expect("skip for every decoder level");
            let cat = Tensor::concat_channels(&u, &skip)?;
            drop(u);
            let h = block(a, &cat)?;
            cur = block(b, &h)?;
        }
        pointwise::forward(
            &cur,
            params.data(self.head.0),
            params.data(self.head.1),
            self.config.out_channels,
        )
    }

    fn block_train<T: Scalar>(&self, b: &BlockIdx, params: &mut ParamSet<T>, x: Tensor<T>) -> Result<BlockTrace<T>> {
        let y = conv::forward(&x, params.data(b.weight), Some(params.data(b.bias)), b.cout)?;
        let gamma = params.data(b.scale).to_vec();
        let beta = params.data(b.shift).to_vec();
        let mut rm = params.data(b.mean).to_vec();
        let mut rv = params.data(b.var).to_vec();
        let cache = norm::forward_train(&y, &gamma, &beta, &mut rm, &mut rv, self.config.norm_momentum);
        params.data_mut(b.mean).copy_from_slice(&rm);
        params.data_mut(b.var).copy_from_slice(&rv);
        Ok(BlockTrace { input: x, norm: cache })
    }

    pub fn forward_train<T: Scalar>(
        &self,
        params: &mut ParamSet<T>,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(input)?;
        self.check_params(params)?;
        let levels = self.config.levels;
        let mut enc = Vec::with_capacity(levels);
        let mut pool_argmax = Vec::with_capacity(levels - 1);
        let mut x = input.clone();
        for (l, [a, b]) in self.enc.iter().enumerate() {
            let ta = self.block_train(a, params, x)?;
            let tb = self.block_train(b, params, ta.norm.out.clone())?;
            if l + 1 < levels {
                let (p, arg) = pool::forward(&tb.norm.out)?;
                pool_argmax.push(arg);
                x = p;
            } else {
                x = Tensor::zeros(0, 0, [0, 0, 0]);
            }
            enc.push([ta, tb]);
        }
        let mut cur = enc[levels - 1][1].norm.out.clone();
        let mut up_input = vec![Tensor::zeros(0, 0, [0, 0, 0]); levels - 1];
        let mut dec: Vec<Option<[BlockTrace<T>; 2]>> = (0..levels - 1).map(|_| None).collect();
        for l in (0..levels - 1).rev() {
            let (up, [a, b]) = self.dec[l];
            let u = upconv::forward(&cur, params.data(up.weight), params.data(up.bias), up.cout)?;
            let cat = Tensor::concat_channels(&u, &enc[l][1].norm.out)?;
            let ta = self.block_train(&a, params, cat)?;
            let tb = self.block_train(&b, params, ta.norm.out.clone())?;
            up_input[l] = cur;
            cur = tb.norm.out.clone();
            dec[l] = Some([ta, tb]);
        }
        let logits = pointwise::forward(
            &cur,
            params.data(self.head.0),
            params.data(self.head.1),
            self.config.out_channels,
        )?;
        Ok((
            logits,
            Trace {
                enc,
                pool_argmax,
                up_input,
                dec: dec.into_iter().map(|d| d.expect("filled")).collect(),
                head_input: cur,
            },
        ))
    }

    /// Back-propagates through one conv block; returns the input gradient
    /// unless `need_input` is false.
    fn block_backward<T: Scalar>(
        &self,
        b: &BlockIdx,
        params: &ParamSet<T>,
        trace: &BlockTrace<T>,
        grad: &Tensor<T>,
        grads: &mut Gradients<T>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let (g, dgamma, dbeta) = norm::backward(&trace.norm, params.data(b.scale), grad);
        grads.set(b.scale, dgamma);
        grads.set(b.shift, dbeta);
        let (dw, db) = conv::backward_params(&trace.input, &g)?;
        grads.set(b.weight, dw);
        grads.set(b.bias, db);
        if need_input {
            Ok(Some(conv::backward_data(&g, params.data(b.weight), b.cin)?))
        } else {
            Ok(None)
        }
    }

    /// Gradients of a scalar loss with respect to every trainable parameter,
    /// given its gradient at the logits and the trace of the forward pass.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        trace: &Trace<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<Gradients<T>> {
        self.check_params(params)?;
        if grad_logits.channels() != self.config.out_channels
            || grad_logits.spatial() != trace.head_input.spatial()
            || grad_logits.batch() != trace.head_input.batch()
        {
            return Err(NnError::Shape("logit gradient does not match the trace".into()));
        }
        let levels = self.config.levels;
        let mut grads = Gradients::zeros_like(params);
        let (mut g, dw, db) = pointwise::backward(&trace.head_input, params.data(self.head.0), grad_logits)?;
        grads.set(self.head.0, dw);
        grads.set(self.head.1, db);

        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        for l in 0..levels - 1 {
            let (up, [a, b]) = self.dec[l];
            let [ta, tb] = &trace.dec[l];
            let gb = self
                .block_backward(&b, params, tb, &g, &mut grads, true)?
                .expect("input grad");
            let gcat = self
                .block_backward(&a, params, ta, &gb, &mut grads, true)?
                .expect("input grad");
            let (gup, gskip) = gcat.split_channels(up.cout);
            skip_grads[l] = Some(gskip);
            let (gin, dw, db) = upconv::backward(&trace.up_input[l], params.data(up.weight), &gup)?;
            grads.set(up.weight, dw);
            grads.set(up.bias, db);
            g = gin;
        }

        // g is now the gradient at the bottleneck output
        for l in (0..levels).rev() {
            let [a, b] = self.enc[l];
            let [ta, tb] = &trace.enc[l];
            if let Some(s) = skip_grads[l].take() {
                if l + 1 < levels {
                    let mut total = pool::backward(&g, &trace.pool_argmax[l], tb.norm.out.spatial());
                    for (t, &v) in total.data_mut().iter_mut().zip(s.data()) {
                        *t = *t + v;
                    }
                    g = total;
                }
            }
            let ga = self
                .block_backward(&b, params, tb, &g, &mut grads, true)?
                .expect("input grad");
            match self.block_backward(&a, params, ta, &ga, &mut grads, l > 0)? {
                Some(gin) => g = gin,
                None => break,
            }
        }
        Ok(grads)
    }
}
