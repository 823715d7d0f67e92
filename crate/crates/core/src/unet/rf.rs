use serde::Serialize;

use super::config::UNetConfig;

/// Exact 1-D input footprint of every feature index at one layer.
///
/// Feature `i` depends on input positions
/// `[jump*i + lo[i % P], jump*i + hi[i % P]]` (on an unbounded line), with
/// `P = lo.len()`. Strided pooling followed by upsampling makes the
/// footprint depend on the phase `i % P`, hence the per-phase offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Footprint {
    jump: usize,
    lo: Vec<isize>,
    hi: Vec<isize>,
}

impl Default for Footprint {
    fn default() -> Self {
        Self::identity()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Footprint {
    pub fn identity() -> Self {
        Self {
            jump: 1,
            lo: vec![0],
            hi: vec![0],
        }
    }

    pub fn jump(&self) -> usize {
        self.jump
    }

    pub fn period(&self) -> usize {
        self.lo.len()
    }

    fn at(&self, i: isize) -> (isize, isize) {
        let p = i.rem_euclid(self.period() as isize) as usize;
        let base = self.jump as isize * i;
        (base + self.lo[p], base + self.hi[p])
    }

    /// Input interval `[lo, hi]` feeding feature index `i`.
    pub fn interval(&self, i: isize) -> (isize, isize) {
        self.at(i)
    }

    /// Stride-1 convolution with odd `kernel`, same padding.
    pub fn conv(&self, kernel: usize) -> Self {
        let r = (kernel / 2) as isize;
        let j = self.jump as isize;
        let (lo, hi) = (0..self.period() as isize)
            .map(|phi| {
                let lo = (-r..=r).map(|d| self.at(phi + d).0).min().unwrap() - j * phi;
                let hi = (-r..=r).map(|d| self.at(phi + d).1).max().unwrap() - j * phi;
                (lo, hi)
            })
            .unzip();
        Self { jump: self.jump, lo, hi }.reduced()
    }

    /// Non-overlapping average pool with window and stride `k`.
    pub fn pool(&self, k: usize) -> Self {
        let jump = self.jump * k;
        let (lo, hi) = (0..self.period() as isize)
            .map(|phi| {
                let first = k as isize * phi;
                let base = jump as isize * phi;
                let lo = (0..k as isize).map(|e| self.at(first + e).0).min().unwrap() - base;
                let hi = (0..k as isize).map(|e| self.at(first + e).1).max().unwrap() - base;
                (lo, hi)
            })
            .unzip();
        Self { jump, lo, hi }.reduced()
    }

    /// Nearest-neighbour upsampling by `k`; `k` must divide the jump.
    pub fn upsample(&self, k: usize) -> Self {
        assert!(self.jump.is_multiple_of(k), "upsample factor {k} does not divide jump {}", self.jump);
        let jump = self.jump / k;
        let period = self.period() * k;
        let (lo, hi) = (0..period as isize)
            .map(|phi| {
                let (l, h) = self.at(phi.div_euclid(k as isize));
                let base = jump as isize * phi;
                (l - base, h - base)
            })
            .unzip();
        Self { jump, lo, hi }.reduced()
    }

    /// Footprint of a channel concatenation or sum of two branches.
    pub fn union(&self, other: &Self) -> Self {
        assert_eq!(self.jump, other.jump, "branches must share a resolution");
        let (pa, pb) = (self.period(), other.period());
        let period = pa / gcd(pa, pb) * pb;
        let (lo, hi) = (0..period)
            .map(|phi| {
                (
                    self.lo[phi % pa].min(other.lo[phi % pb]),
                    self.hi[phi % pa].max(other.hi[phi % pb]),
                )
            })
            .unzip();
        Self {
            jump: self.jump,
            lo,
            hi,
        }
        .reduced()
    }

    fn reduced(mut self) -> Self {
        let p = self.period();
        for q in (1..p).filter(|q| p.is_multiple_of(*q)) {
            if (0..p).all(|i| self.lo[i] == self.lo[i % q] && self.hi[i] == self.hi[i % q]) {
                self.lo.truncate(q);
                self.hi.truncate(q);
                break;
            }
        }
        self
    }

    /// Widest input span of a single feature.
    pub fn span(&self) -> usize {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l + 1) as usize)
            .max()
            .unwrap()
    }

    /// Side of the smallest odd centred window containing every footprint.
    /// Only meaningful at unit jump.
    pub fn centred_size(&self) -> usize {
        let reach = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (-l).max(*h))
            .max()
            .unwrap()
            .max(0);
        2 * reach as usize + 1
    }
}

/// One traced layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub layer: String,
    pub jump: usize,
    /// Input span of one feature at this layer.
    pub span: usize,
}

/// Incremental receptive-field accounting.
#[derive(Clone, Debug, Default)]
pub struct RfTracer {
    fp: Footprint,
    trace: Vec<TraceEntry>,
}

impl RfTracer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_footprint(fp: Footprint) -> Self {
        Self { fp, trace: Vec::new() }
    }

    fn record(&mut self, layer: String) {
        self.trace.push(TraceEntry {
            layer,
            jump: self.fp.jump,
            span: self.fp.span(),
        });
    }

    pub fn conv(&mut self, kernel: usize, label: impl Into<String>) -> &mut Self {
        self.fp = self.fp.conv(kernel);
        self.record(label.into());
        self
    }

    pub fn pool(&mut self, k: usize, label: impl Into<String>) -> &mut Self {
        self.fp = self.fp.pool(k);
        self.record(label.into());
        self
    }

    pub fn upsample(&mut self, k: usize, label: impl Into<String>) -> &mut Self {
        self.fp = self.fp.upsample(k);
        self.record(label.into());
        self
    }

    pub fn merge(&mut self, other: &Footprint, label: impl Into<String>) -> &mut Self {
        self.fp = self.fp.union(other);
        self.record(label.into());
        self
    }

    pub fn footprint(&self) -> &Footprint {
        &self.fp
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    /// Current receptive field side. Requires unit jump.
    pub fn receptive_field(&self) -> usize {
        assert_eq!(self.fp.jump, 1, "receptive field is defined at input resolution");
        self.fp.centred_size()
    }
}

/// Receptive-field analysis of a full network.
#[derive(Clone, Debug)]
pub struct RfReport {
    /// Side of the square input window that contains the footprint of every
    /// output pixel.
    pub rf: usize,
    pub footprint: Footprint,
    pub trace: Vec<TraceEntry>,
}

impl RfReport {
    /// Inclusive input box `(row_lo, row_hi, col_lo, col_hi)` influencing
    /// output pixel `(row, col)`, clipped to a `size x size` image.
    pub fn input_box(&self, row: usize, col: usize, size: usize) -> (usize, usize, usize, usize) {
        let clip = |(l, h): (isize, isize)| (l.max(0) as usize, h.min(size as isize - 1) as usize);
        let (r0, r1) = clip(self.footprint.interval(row as isize));
        let (c0, c1) = clip(self.footprint.interval(col as isize));
        (r0, r1, c0, c1)
    }
}

fn trace_res_block(t: &mut RfTracer, label: &str) {
    let input = t.footprint().clone();
    t.conv(3, format!("{label}.conv1")).conv(3, format!("{label}.conv2"));
    t.merge(&input, format!("{label}.residual"));
}

/// Traces the exact layer sequence of [`super::Denoiser`] built from `cfg`.
pub fn receptive_field(cfg: &UNetConfig) -> RfReport {
    let mut t = RfTracer::new();
    t.conv(3, "in_conv");
    let mut skips = Vec::with_capacity(cfg.down_blocks.len());
    for (i, d) in cfg.down_blocks.iter().enumerate() {
        for b in 0..cfg.res_blocks {
            trace_res_block(&mut t, &format!("down{i}.res{b}"));
        }
        skips.push(t.footprint().clone());
        t.pool(d.pool_stride, format!("down{i}.pool"));
    }
    for (i, u) in cfg.up_blocks.iter().enumerate() {
        t.upsample(u.upsample, format!("up{i}.upsample"));
        let skip = skips.pop().expect("mirrored skip");
        t.merge(&skip, format!("up{i}.concat"));
        for b in 0..cfg.res_blocks {
            trace_res_block(&mut t, &format!("up{i}.res{b}"));
        }
    }
    t.conv(3, "out_conv");
    RfReport {
        rf: t.receptive_field(),
        footprint: t.footprint().clone(),
        trace: t.trace().to_vec(),
    }
}
