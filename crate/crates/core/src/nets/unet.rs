use crate::real::Real;

use super::layers::{
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, Conv2d, ConvCache, GroupNorm,
    LayoutBuilder, NormCache, UpConv,
};
use super::tensor::Tensor;
use super::{Head, UNetConfig};

/// Logit magnitude beyond which the unit-squash head saturates. Keeps the
/// output strictly inside (0, 1) even in single precision.
const LOGIT_CLAMP: f64 = 15.0;

/// Two 3x3 convolutions, each followed by optional group norm and ReLU.
#[derive(Debug, Clone)]
struct Block {
    conv1: Conv2d,
    norm1: Option<GroupNorm>,
    conv2: Conv2d,
    norm2: Option<GroupNorm>,
}

struct BlockCache<T> {
    conv1: ConvCache<T>,
    norm1: Option<NormCache<T>>,
    act1: Tensor<T>,
    conv2: ConvCache<T>,
    norm2: Option<NormCache<T>>,
    act2: Tensor<T>,
}

impl Block {
    fn new(layout: &mut LayoutBuilder, name: &str, cin: usize, cout: usize, groups: usize) -> Self {
        let conv1 = Conv2d::new(layout, &format!("{name}.conv1"), cin, cout, 3);
        let norm1 = (groups > 0).then(|| GroupNorm::new(layout, &format!("{name}.norm1"), cout, groups));
        let conv2 = Conv2d::new(layout, &format!("{name}.conv2"), cout, cout, 3);
        let norm2 = (groups > 0).then(|| GroupNorm::new(layout, &format!("{name}.norm2"), cout, groups));
        Self {
            conv1,
            norm1,
            conv2,
            norm2,
        }
    }

    fn forward<T: Real>(&self, p: &[T], x: &Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let (y, conv1) = self.conv1.forward(p, x);
        let (y, norm1) = match &self.norm1 {
            Some(n) => {
                let (y, c) = n.forward(p, y);
                (y, Some(c))
            }
            None => (y, None),
        };
        let act1 = relu_forward(y);
        let (y, conv2) = self.conv2.forward(p, &act1);
        let (y, norm2) = match &self.norm2 {
            Some(n) => {
                let (y, c) = n.forward(p, y);
                (y, Some(c))
            }
            None => (y, None),
        };
        let act2 = relu_forward(y);
        let out = act2.clone();
        (
            out,
            BlockCache {
                conv1,
                norm1,
                act1,
                conv2,
                norm2,
                act2,
            },
        )
    }

    fn backward<T: Real>(
        &self,
        p: &[T],
        mut grads: Option<&mut [T]>,
        cache: BlockCache<T>,
        dy: Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let mut d = relu_backward(&cache.act2, dy);
        if let (Some(n), Some(c)) = (&self.norm2, cache.norm2) {
            d = n.backward(p, grads.as_deref_mut(), c, d);
        }
        let d = self
            .conv2
            .backward(p, grads.as_deref_mut(), cache.conv2, &d, true)
            .expect("input grad requested");
        let mut d = relu_backward(&cache.act1, d);
        if let (Some(n), Some(c)) = (&self.norm1, cache.norm1) {
            d = n.backward(p, grads.as_deref_mut(), c, d);
        }
        self.conv1
            .backward(p, grads, cache.conv1, &d, need_input_grad)
    }
}

/// Encoder–decoder with same-size skip connections.
#[derive(Debug, Clone)]
pub(crate) struct UNet {
    pub config: UNetConfig,
    encoders: Vec<Block>,
    bottleneck: Block,
    ups: Vec<UpConv>,
    decoders: Vec<Block>,
    head: Conv2d,
}

/// Activations retained by a forward pass for the matching backward pass.
pub struct Tape<T> {
    encoders: Vec<BlockCache<T>>,
    skip_channels: Vec<usize>,
    pools: Vec<(Vec<u32>, usize, usize)>,
    bottleneck: BlockCache<T>,
    ups: Vec<Tensor<T>>,
    decoders: Vec<BlockCache<T>>,
    head: ConvCache<T>,
    logits: Tensor<T>,
    output: Tensor<T>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn into_output(self) -> Tensor<T> {
        self.output
    }
}

impl UNet {
    pub fn new(config: UNetConfig, layout: &mut LayoutBuilder) -> Self {
        let b = config.base_channels;
        let g = config.norm_groups;
        let width = |level: usize| b << level;
        let mut encoders = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let cin = if level == 0 { config.in_channels } else { width(level - 1) };
            encoders.push(Block::new(layout, &format!("enc{level}"), cin, width(level), g));
        }
        let bottleneck = Block::new(
            layout,
            "bottleneck",
            width(config.depth - 1),
            width(config.depth),
            g,
        );
        let mut ups = Vec::with_capacity(config.depth);
        let mut decoders = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            ups.push(UpConv::new(layout, &format!("up{level}"), width(level + 1), width(level)));
            decoders.push(Block::new(
                layout,
                &format!("dec{level}"),
                2 * width(level),
                width(level),
                g,
            ));
        }
        // The head is allocated last so both variants share the backbone init stream.
        let head = Conv2d::new(layout, "head", b, config.out_channels, 1);
        Self {
            config,
            encoders,
            bottleneck,
            ups,
            decoders,
            head,
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], input: &Tensor<T>) -> Tape<T> {
        let mut x = input.clone();
        let mut encoders = Vec::with_capacity(self.config.depth);
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut pools = Vec::with_capacity(self.config.depth);
        for enc in &self.encoders {
            let (s, cache) = enc.forward(p, &x);
            let (pooled, idx) = maxpool_forward(&s);
            pools.push((idx, s.height, s.width));
            encoders.push(cache);
            skips.push(s);
            x = pooled;
        }
        let (mut x, bottleneck) = self.bottleneck.forward(p, &x);
        let mut ups = Vec::with_capacity(self.config.depth);
        let mut decoders = Vec::with_capacity(self.config.depth);
        let mut skip_channels = vec![0; self.config.depth];
        // ups/decoders are stored deepest-first.
        for (k, (up, dec)) in self.ups.iter().zip(&self.decoders).enumerate() {
            let level = self.config.depth - 1 - k;
            let (u, up_in) = up.forward(p, &x);
            ups.push(up_in);
            let skip = &skips[level];
            skip_channels[level] = skip.channels;
            let (y, cache) = dec.forward(p, &skip.concat(&u));
            decoders.push(cache);
            x = y;
        }
        let (mut logits, head) = self.head.forward(p, &x);
        let output = match self.config.head {
            Head::UnitSquash => {
                let lim = T::lit(LOGIT_CLAMP);
                for z in logits.data.iter_mut() {
                    *z = z.max(-lim).min(lim);
                }
                let mut out = logits.clone();
                for v in out.data.iter_mut() {
                    *v = T::one() / (T::one() + (-*v).exp());
                }
                out
            }
            Head::ClassProbs => softmax_channels(&logits),
        };
        Tape {
            encoders,
            skip_channels,
            pools,
            bottleneck,
            ups,
            decoders,
            head,
            logits,
            output,
        }
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        mut grads: Option<&mut [T]>,
        tape: Tape<T>,
        d_output: &Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let Tape {
            encoders,
            skip_channels,
            pools,
            bottleneck,
            ups,
            decoders,
            head,
            logits,
            output,
        } = tape;
        let mut dz = d_output.clone();
        match self.config.head {
            Head::UnitSquash => {
                let lim = T::lit(LOGIT_CLAMP);
                for ((d, &s), &z) in dz.data.iter_mut().zip(&output.data).zip(&logits.data) {
                    *d = if z.abs() >= lim {
                        T::zero()
                    } else {
                        *d * s * (T::one() - s)
                    };
                }
            }
            Head::ClassProbs => {
                let plane = output.plane();
                let c = output.channels;
                for i in 0..plane {
                    let mut dot = T::zero();
                    for k in 0..c {
                        dot += output.data[k * plane + i] * d_output.data[k * plane + i];
                    }
                    for k in 0..c {
                        let idx = k * plane + i;
                        dz.data[idx] = output.data[idx] * (d_output.data[idx] - dot);
                    }
                }
            }
        }
        let mut dx = self
            .head
            .backward(p, grads.as_deref_mut(), head, &dz, true)
            .expect("input grad requested");
        let depth = self.config.depth;
        let mut dskips: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        let iter = self
            .ups
            .iter()
            .zip(&self.decoders)
            .zip(ups.into_iter().zip(decoders))
            .enumerate()
            .collect::<Vec<_>>();
        for (k, ((up, dec), (up_in, dec_cache))) in iter.into_iter().rev() {
            let level = depth - 1 - k;
            let dcat = dec
                .backward(p, grads.as_deref_mut(), dec_cache, dx, true)
                .expect("input grad requested");
            let (ds, du) = dcat.split(skip_channels[level]);
            dskips[level] = Some(ds);
            dx = up.backward(p, grads.as_deref_mut(), up_in, &du);
        }
        dx = self
            .bottleneck
            .backward(p, grads.as_deref_mut(), bottleneck, dx, true)
            .expect("input grad requested");
        for (level, (enc, cache)) in self.encoders.iter().zip(encoders).enumerate().rev() {
            let (idx, h, w) = &pools[level];
            let mut ds = maxpool_backward(idx, &dx, *h, *w);
            ds.add_assign(dskips[level].as_ref().expect("decoder visited every level"));
            let want = level > 0 || need_input_grad;
            match enc.backward(p, grads.as_deref_mut(), cache, ds, want) {
                Some(d) => dx = d,
                None => return None,
            }
        }
        Some(dx)
    }
}

/// Per-pixel normalised exponential over the channel axis.
pub(crate) fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let plane = logits.plane();
    let c = logits.channels;
    let mut out = logits.clone();
    for i in 0..plane {
        let mut m = T::neg_infinity();
        for k in 0..c {
            m = m.max(logits.data[k * plane + i]);
        }
        let mut sum = T::zero();
        for k in 0..c {
            let e = (logits.data[k * plane + i] - m).exp();
            out.data[k * plane + i] = e;
            sum += e;
        }
        for k in 0..c {
            out.data[k * plane + i] /= sum;
        }
    }
    out
}
