use super::config::{norm_groups_for, UNetConfig};
use crate::error::{shape_err, Result};
use crate::nn::{
    avg_pool, avg_pool_backward, concat_channels, silu, silu_backward, split_channels, upsample_backward,
    upsample_nearest, Conv2d, GroupNorm, Linear, Param, Parameterized,
};
use crate::rng::{keyed_rng, Domain};
use crate::tensor::{Real, Tensor};

/// Sinusoidal embedding of integer timesteps, `[n, dim, 1, 1]`.
pub fn timestep_embedding<S: Real>(t: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = Tensor::zeros([t.len(), dim, 1, 1]);
    for (i, &step) in t.iter().enumerate() {
        let row = out.item_mut(i);
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let a = step as f64 * freq;
            row[k] = S::of(a.sin());
            row[half + k] = S::of(a.cos());
        }
    }
    out
}

fn add_channel_bias<S: Real>(x: &mut Tensor<S>, bias: &Tensor<S>) {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    for i in 0..n {
        let b = bias.item(i);
        for (ch, chunk) in x.item_mut(i).chunks_mut(plane).enumerate().take(c) {
            chunk.iter_mut().for_each(|v| *v += b[ch]);
        }
    }
}

fn channel_sums<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for i in 0..n {
        let sums: Vec<S> = x.item(i).chunks(plane).map(|p| p.iter().copied().sum()).collect();
        out.item_mut(i).copy_from_slice(&sums);
    }
    out
}

/// GN, SiLU, 3x3 conv (plus a per-channel time shift), GN, SiLU, 3x3 conv,
/// added to an identity or 1x1 skip.
#[derive(Clone, Debug)]
pub struct ResBlock<S> {
    pub norm1: GroupNorm<S>,
    pub conv1: Conv2d<S>,
    pub time_proj: Linear<S>,
    pub norm2: GroupNorm<S>,
    pub conv2: Conv2d<S>,
    pub skip: Option<Conv2d<S>>,
}

#[derive(Clone, Debug)]
struct ResCache<S> {
    x: Tensor<S>,
    n1: Tensor<S>,
    a1: Tensor<S>,
    h1: Tensor<S>,
    n2: Tensor<S>,
    a2: Tensor<S>,
}

impl<S: Real> ResBlock<S> {
    fn new(cfg: &UNetConfig, cin: usize, cout: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let gn = |c| GroupNorm::new(c, norm_groups_for(c, cfg.norm_groups, cfg.norm_scope), cfg.norm_scope);
        Self {
            norm1: gn(cin),
            conv1: Conv2d::new(cin, cout, 3, rng),
            time_proj: Linear::new(cfg.time_embed_dim, cout, rng),
            norm2: gn(cout),
            conv2: Conv2d::new(cout, cout, 3, rng),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, rng)),
        }
    }

    fn run(&self, x: &Tensor<S>, st: &Tensor<S>) -> (Tensor<S>, ResCache<S>) {
        let n1 = self.norm1.forward(x);
        let a1 = silu(&n1);
        let mut h1 = self.conv1.forward(&a1);
        add_channel_bias(&mut h1, &self.time_proj.forward(st));
        let n2 = self.norm2.forward(&h1);
        let a2 = silu(&n2);
        let mut y = self.conv2.forward(&a2);
        match &self.skip {
            Some(s) => y.add_assign(&s.forward(x)),
            None => y.add_assign(x),
        }
        let cache = ResCache {
            x: x.clone(),
            n1,
            a1,
            h1,
            n2,
            a2,
        };
        (y, cache)
    }

    /// Returns `(dx, d_silu_temb)`.
    fn backward(&mut self, c: &ResCache<S>, st: &Tensor<S>, dy: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        let da2 = self.conv2.backward(&c.a2, dy);
        let dn2 = silu_backward(&c.n2, &da2);
        let dh1 = self.norm2.backward(&c.h1, &dn2);
        let dst = self.time_proj.backward(st, &channel_sums(&dh1));
        let da1 = self.conv1.backward(&c.a1, &dh1);
        let dn1 = silu_backward(&c.n1, &da1);
        let mut dx = self.norm1.backward(&c.x, &dn1);
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(&c.x, dy)),
            None => dx.add_assign(dy),
        }
        (dx, dst)
    }
}

impl<S: Real> Parameterized<S> for ResBlock<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.norm1.visit(f);
        self.conv1.visit(f);
        self.time_proj.visit(f);
        self.norm2.visit(f);
        self.conv2.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.norm1.visit_mut(f);
        self.conv1.visit_mut(f);
        self.time_proj.visit_mut(f);
        self.norm2.visit_mut(f);
        self.conv2.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

#[derive(Clone, Debug)]
struct Level<S> {
    blocks: Vec<ResBlock<S>>,
    factor: usize,
}

/// Activations kept by [`Denoiser::forward_train`].
#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    x: Tensor<S>,
    sin: Tensor<S>,
    t1: Tensor<S>,
    ta: Tensor<S>,
    temb: Tensor<S>,
    st: Tensor<S>,
    down: Vec<Vec<ResCache<S>>>,
    up: Vec<Vec<ResCache<S>>>,
    up_split: Vec<usize>,
    out_in: Tensor<S>,
    out_n: Tensor<S>,
    out_a: Tensor<S>,
}

/// Construction switches.
#[derive(Clone, Copy, Debug)]
pub struct InitOptions {
    /// Zero the last convolution so a fresh model predicts zero noise.
    pub zero_output: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self { zero_output: true }
    }
}

/// Time-conditioned noise-prediction U-Net built from a [`UNetConfig`].
#[derive(Clone, Debug)]
pub struct Denoiser<S = f32> {
    config: UNetConfig,
    time1: Linear<S>,
    time2: Linear<S>,
    in_conv: Conv2d<S>,
    down: Vec<Level<S>>,
    up: Vec<Level<S>>,
    out_norm: GroupNorm<S>,
    out_conv: Conv2d<S>,
}

impl<S: Real> Denoiser<S> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        Self::with_options(config, seed, InitOptions::default())
    }

    pub fn with_options(config: UNetConfig, seed: u64, opts: InitOptions) -> Result<Self> {
        config.validate()?;
        let rng = &mut keyed_rng(seed, Domain::Init, 0, 0);
        let e = config.time_embed_dim;
        let time1 = Linear::new(e, e, rng);
        let time2 = Linear::new(e, e, rng);
        let in_conv = Conv2d::new(config.in_channels, config.base_channels, 3, rng);

        let mut ch = config.base_channels;
        let mut skip_ch = Vec::new();
        let mut down = Vec::new();
        for d in &config.down_blocks {
            let mut blocks = Vec::new();
            for b in 0..config.res_blocks {
                blocks.push(ResBlock::new(&config, if b == 0 { ch } else { d.channels }, d.channels, rng));
            }
            ch = d.channels;
            skip_ch.push(ch);
            down.push(Level {
                blocks,
                factor: d.pool_stride,
            });
        }
        let mut up = Vec::new();
        for u in &config.up_blocks {
            let skip = skip_ch.pop().expect("mirrored skip");
            let mut blocks = Vec::new();
            for b in 0..config.res_blocks {
                let cin = if b == 0 { ch + skip } else { u.channels };
                blocks.push(ResBlock::new(&config, cin, u.channels, rng));
            }
            ch = u.channels;
            up.push(Level {
                blocks,
                factor: u.upsample,
            });
        }
        let g = norm_groups_for(ch, config.norm_groups, config.norm_scope);
        let out_norm = GroupNorm::new(ch, g, config.norm_scope);
        let out_conv = if opts.zero_output {
            Conv2d::zeroed(ch, config.in_channels, 3)
        } else {
            Conv2d::new(ch, config.in_channels, 3, rng)
        };
        Ok(Self {
            config,
            time1,
            time2,
            in_conv,
            down,
            up,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<S>, t: &[usize]) -> Result<()> {
        let [n, c, h, w] = x.shape();
        let r = self.config.input_resolution;
        if c != self.config.in_channels {
            return Err(shape_err(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h != r || w != r {
            return Err(shape_err(format!("expected {r}x{r} input, got {h}x{w}")));
        }
        if t.len() != n {
            return Err(shape_err(format!("{} timesteps for batch of {n}", t.len())));
        }
        Ok(())
    }

    /// Predicted noise, same shape as `x`.
    pub fn forward(&self, x: &Tensor<S>, t: &[usize]) -> Result<Tensor<S>> {
        Ok(self.forward_train(x, t)?.0)
    }

    /// Forward pass that also returns the activations needed by
    /// [`Self::backward`].
    pub fn forward_train(&self, x: &Tensor<S>, t: &[usize]) -> Result<(Tensor<S>, ForwardCache<S>)> {
        self.check_input(x, t)?;
        let sin = timestep_embedding::<S>(t, self.config.time_embed_dim);
        let t1 = self.time1.forward(&sin);
        let ta = silu(&t1);
        let temb = self.time2.forward(&ta);
        let st = silu(&temb);

        let mut h = self.in_conv.forward(x);
        let mut skips = Vec::with_capacity(self.down.len());
        let mut down_c = Vec::with_capacity(self.down.len());
        for level in &self.down {
            let mut caches = Vec::with_capacity(level.blocks.len());
            for b in &level.blocks {
                let (y, c) = b.run(&h, &st);
                h = y;
                caches.push(c);
            }
            down_c.push(caches);
            skips.push(h.clone());
            h = avg_pool(&h, level.factor);
        }
        let mut up_c = Vec::with_capacity(self.up.len());
        let mut up_split = Vec::with_capacity(self.up.len());
        for level in &self.up {
            let u = upsample_nearest(&h, level.factor);
            up_split.push(u.channels());
            h = concat_channels(&u, &skips.pop().expect("mirrored skip"));
            let mut caches = Vec::with_capacity(level.blocks.len());
            for b in &level.blocks {
                let (y, c) = b.run(&h, &st);
                h = y;
                caches.push(c);
            }
            up_c.push(caches);
        }
        let out_n = self.out_norm.forward(&h);
        let out_a = silu(&out_n);
        let y = self.out_conv.forward(&out_a);
        let cache = ForwardCache {
            x: x.clone(),
            sin,
            t1,
            ta,
            temb,
            st,
            down: down_c,
            up: up_c,
            up_split,
            out_in: h,
            out_n,
            out_a,
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients for upstream gradient `dy` and
    /// returns the input gradient.
    pub fn backward(&mut self, cache: &ForwardCache<S>, dy: &Tensor<S>) -> Tensor<S> {
        let st = &cache.st;
        let mut dst = Tensor::zeros(st.shape());
        let doa = self.out_conv.backward(&cache.out_a, dy);
        let don = silu_backward(&cache.out_n, &doa);
        let mut dh = self.out_norm.backward(&cache.out_in, &don);

        let levels = self.down.len();
        let mut dskips: Vec<Option<Tensor<S>>> = vec![None; levels];
        for i in (0..self.up.len()).rev() {
            let level = &mut self.up[i];
            for (b, c) in level.blocks.iter_mut().zip(&cache.up[i]).rev() {
                let (dx, ds) = b.backward(c, st, &dh);
                dst.add_assign(&ds);
                dh = dx;
            }
            let (du, dskip) = split_channels(&dh, cache.up_split[i]);
            dskips[levels - 1 - i] = Some(dskip);
            dh = upsample_backward(&du, level.factor);
        }
        for i in (0..levels).rev() {
            let level = &mut self.down[i];
            dh = avg_pool_backward(&dh, level.factor);
            dh.add_assign(dskips[i].as_ref().expect("skip gradient"));
            for (b, c) in level.blocks.iter_mut().zip(&cache.down[i]).rev() {
                let (dx, ds) = b.backward(c, st, &dh);
                dst.add_assign(&ds);
                dh = dx;
            }
        }
        let dx = self.in_conv.backward(&cache.x, &dh);

        let dtemb = silu_backward(&cache.temb, &dst);
        let dta = self.time2.backward(&cache.ta, &dtemb);
        let dt1 = silu_backward(&cache.t1, &dta);
        self.time1.backward(&cache.sin, &dt1);
        dx
    }

    /// Same weights in another precision.
    pub fn cast<T: Real>(&self) -> Denoiser<T> {
        let mut out = Denoiser::<T>::with_options(self.config.clone(), 0, InitOptions { zero_output: true })
            .expect("config already validated");
        let values: Vec<T> = self.flat_values().into_iter().map(|v| T::of(v.as_f64())).collect();
        assert!(out.load_flat(&values));
        out
    }
}

impl<S: Real> Parameterized<S> for Denoiser<S> {
    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.time1.visit(f);
        self.time2.visit(f);
        self.in_conv.visit(f);
        for l in self.down.iter().chain(&self.up) {
            for b in &l.blocks {
                b.visit(f);
            }
        }
        self.out_norm.visit(f);
        self.out_conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.time1.visit_mut(f);
        self.time2.visit_mut(f);
        self.in_conv.visit_mut(f);
        for l in self.down.iter_mut().chain(self.up.iter_mut()) {
            for b in &mut l.blocks {
                b.visit_mut(f);
            }
        }
        self.out_norm.visit_mut(f);
        self.out_conv.visit_mut(f);
    }
}
