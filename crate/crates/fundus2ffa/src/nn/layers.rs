//! Layers with hand-written backward passes. Each layer caches whatever its
//! backward needs during forward; `backward` consumes the cache, accumulates
//! parameter gradients and returns the gradient with respect to its input.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Param, Tensor};

pub trait Layer {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor;
    fn backward(&mut self, grad_out: &Tensor) -> Tensor;
    fn visit_params(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Param)) {}
}

#[inline]
fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

// Four-lane unrolled dot product; long contiguous reductions are the hot
// path of every convolution.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    let (a4, a_tail) = a.split_at(chunks * 4);
    let (b4, b_tail) = b.split_at(chunks * 4);
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a_tail.iter().zip(b_tail) {
        s += x * y;
    }
    s
}

#[inline]
fn chunk4(s: &[f64]) -> (impl Iterator<Item = [f64; 4]> + '_, &[f64]) {
    let it = s.chunks_exact(4);
    let rem = it.remainder();
    (it.map(|c| [c[0], c[1], c[2], c[3]]), rem)
}

// Dots one vector against four rows in a single pass, so each loaded
// element of `x` feeds four FMA chains instead of re-streaming the rows.
#[inline]
fn dot4(w0: &[f64], w1: &[f64], w2: &[f64], w3: &[f64], x: &[f64]) -> [f64; 4] {
    let mut acc = [[0.0f64; 4]; 4];
    let (x4, x_rem) = chunk4(x);
    let (w04, _) = chunk4(w0);
    let (w14, _) = chunk4(w1);
    let (w24, _) = chunk4(w2);
    let (w34, _) = chunk4(w3);
    for ((((cx, c0), c1), c2), c3) in x4.zip(w04).zip(w14).zip(w24).zip(w34) {
        for lane in 0..4 {
            acc[0][lane] += c0[lane] * cx[lane];
            acc[1][lane] += c1[lane] * cx[lane];
            acc[2][lane] += c2[lane] * cx[lane];
            acc[3][lane] += c3[lane] * cx[lane];
        }
    }
    let mut out = [0.0f64; 4];
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = (a[0] + a[1]) + (a[2] + a[3]);
    }
    let base = x.len() - x_rem.len();
    for (j, &xv) in x_rem.iter().enumerate() {
        out[0] += w0[base + j] * xv;
        out[1] += w1[base + j] * xv;
        out[2] += w2[base + j] * xv;
        out[3] += w3[base + j] * xv;
    }
    out
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

// y += a0*x0 + a1*x1 + a2*x2 + a3*x3 in one sweep over y.
#[inline]
fn axpy4(y: &mut [f64], a: [f64; 4], x0: &[f64], x1: &[f64], x2: &[f64], x3: &[f64]) {
    let n = y.len();
    let chunks = n / 4;
    {
        let y4 = y[..4 * chunks].chunks_exact_mut(4);
        let (x04, _) = chunk4(x0);
        let (x14, _) = chunk4(x1);
        let (x24, _) = chunk4(x2);
        let (x34, _) = chunk4(x3);
        for ((((cy, c0), c1), c2), c3) in y4.zip(x04).zip(x14).zip(x24).zip(x34) {
            for lane in 0..4 {
                cy[lane] += a[0] * c0[lane] + a[1] * c1[lane] + a[2] * c2[lane] + a[3] * c3[lane];
            }
        }
    }
    for j in 4 * chunks..n {
        y[j] += a[0] * x0[j] + a[1] * x1[j] + a[2] * x2[j] + a[3] * x3[j];
    }
}

/// 2D convolution with square kernel, zero padding, no dilation.
/// Weights are `[out_ch, in_ch, k, k]`, initialized N(0, 0.02); bias zero.
///
/// Forward lowers the input to an im2col matrix of shape
/// `[positions, in_ch*k*k]` whose row layout matches the flattened weight
/// layout, so the convolution and both backward contractions are plain
/// dot/axpy passes over contiguous rows.
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Param,
    cols: Option<(Vec<f64>, (usize, usize))>, // im2col matrix + input h,w
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        let dist = Normal::new(0.0, 0.02).unwrap();
        let wdata: Vec<f64> = (0..out_ch * in_ch * k * k)
            .map(|_| dist.sample(rng))
            .collect();
        Conv2d {
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            weight: Param::new(Tensor::from_vec(&[out_ch, in_ch, k, k], wdata)),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            cols: None,
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_dim(h, self.k, self.stride, self.pad),
            conv_out_dim(w, self.k, self.stride, self.pad),
        )
    }

}

impl Conv2d {
    // Lowers the input into rows of (ic, ky, kx) taps, one row per output
    // position. Out-of-bounds taps are zeros. Row entry order matches the
    // flattened weight layout.
    fn im2col(&self, x: &Tensor, h_out: usize, w_out: usize) -> Vec<f64> {
        let (_, h_in, w_in) = x.dims3();
        let k = self.k;
        let s = self.stride;
        let p = self.pad as isize;
        let ick = self.in_ch * k * k;
        let mut cols = vec![0.0f64; h_out * w_out * ick];
        let xs = x.data();
        for oy in 0..h_out {
            for ox in 0..w_out {
                let row = &mut cols[(oy * w_out + ox) * ick..(oy * w_out + ox + 1) * ick];
                let ix0 = (ox * s) as isize - p;
                // Clip the kx tap range once per position.
                let kx_lo = (-ix0).max(0) as usize;
                let kx_hi = k.min((w_in as isize - ix0).max(0) as usize);
                if kx_lo >= kx_hi {
                    continue;
                }
                for ic in 0..self.in_ch {
                    let iplane = &xs[ic * h_in * w_in..(ic + 1) * h_in * w_in];
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h_in as isize {
                            continue;
                        }
                        let irow = &iplane[iy as usize * w_in..(iy as usize + 1) * w_in];
                        let src0 = (ix0 + kx_lo as isize) as usize;
                        let dst = &mut row[(ic * k + ky) * k + kx_lo..(ic * k + ky) * k + kx_hi];
                        dst.copy_from_slice(&irow[src0..src0 + (kx_hi - kx_lo)]);
                    }
                }
            }
        }
        cols
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let (c_in, h_in, w_in) = x.dims3();
        assert_eq!(c_in, self.in_ch, "conv input channels");
        let (h_out, w_out) = self.out_shape(h_in, w_in);
        let positions = h_out * w_out;
        let ick = self.in_ch * self.k * self.k;
        let cols = self.im2col(x, h_out, w_out);

        let mut out = Tensor::zeros(&[self.out_ch, h_out, w_out]);
        let od = out.data_mut();
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        // Blocks of four output channels share one pass over the column
        // matrix; otherwise the big layers re-stream it per channel.
        let mut oc = 0;
        while oc + 4 <= self.out_ch {
            let (w0, w1, w2, w3) = (
                &w[oc * ick..(oc + 1) * ick],
                &w[(oc + 1) * ick..(oc + 2) * ick],
                &w[(oc + 2) * ick..(oc + 3) * ick],
                &w[(oc + 3) * ick..(oc + 4) * ick],
            );
            for p in 0..positions {
                let col = &cols[p * ick..(p + 1) * ick];
                let sums = dot4(w0, w1, w2, w3, col);
                for lane in 0..4 {
                    od[(oc + lane) * positions + p] = b[oc + lane] + sums[lane];
                }
            }
            oc += 4;
        }
        for oc in oc..self.out_ch {
            let wrow = &w[oc * ick..(oc + 1) * ick];
            let oplane = &mut od[oc * positions..(oc + 1) * positions];
            let bias = b[oc];
            for (p, o) in oplane.iter_mut().enumerate() {
                *o = bias + dot(wrow, &cols[p * ick..(p + 1) * ick]);
            }
        }
        self.cols = Some((cols, (h_in, w_in)));
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (cols, (h_in, w_in)) = self.cols.take().expect("conv backward without forward");
        let (_, h_out, w_out) = grad_out.dims3();
        let positions = h_out * w_out;
        let k = self.k;
        let s = self.stride;
        let p = self.pad as isize;
        let ick = self.in_ch * k * k;
        let go = grad_out.data();

        // Bias and weight gradients. Four-channel blocks amortize the
        // column-matrix traffic the same way the forward pass does.
        {
            let gb = self.bias.grad.data_mut();
            let gw = self.weight.grad.data_mut();
            for oc in 0..self.out_ch {
                gb[oc] += go[oc * positions..(oc + 1) * positions].iter().sum::<f64>();
            }
            let mut oc = 0;
            while oc + 4 <= self.out_ch {
                let (head, rest) = gw[oc * ick..].split_at_mut(ick);
                let (r1, rest) = rest.split_at_mut(ick);
                let (r2, r3full) = rest.split_at_mut(ick);
                let r3 = &mut r3full[..ick];
                for pos in 0..positions {
                    let col = &cols[pos * ick..(pos + 1) * ick];
                    let gs = [
                        go[oc * positions + pos],
                        go[(oc + 1) * positions + pos],
                        go[(oc + 2) * positions + pos],
                        go[(oc + 3) * positions + pos],
                    ];
                    axpy(head, gs[0], col);
                    axpy(r1, gs[1], col);
                    axpy(r2, gs[2], col);
                    axpy(r3, gs[3], col);
                }
                oc += 4;
            }
            for oc in oc..self.out_ch {
                let gplane = &go[oc * positions..(oc + 1) * positions];
                let gwrow = &mut gw[oc * ick..(oc + 1) * ick];
                for (pos, &g) in gplane.iter().enumerate() {
                    if g != 0.0 {
                        axpy(gwrow, g, &cols[pos * ick..(pos + 1) * ick]);
                    }
                }
            }
        }

        // Input gradient: accumulate gradient rows in column space, then
        // scatter back (the transpose of im2col).
        let mut gcols = vec![0.0f64; positions * ick];
        {
            let w = self.weight.value.data();
            let mut oc = 0;
            while oc + 4 <= self.out_ch {
                let (w0, w1, w2, w3) = (
                    &w[oc * ick..(oc + 1) * ick],
                    &w[(oc + 1) * ick..(oc + 2) * ick],
                    &w[(oc + 2) * ick..(oc + 3) * ick],
                    &w[(oc + 3) * ick..(oc + 4) * ick],
                );
                for pos in 0..positions {
                    let gs = [
                        go[oc * positions + pos],
                        go[(oc + 1) * positions + pos],
                        go[(oc + 2) * positions + pos],
                        go[(oc + 3) * positions + pos],
                    ];
                    axpy4(&mut gcols[pos * ick..(pos + 1) * ick], gs, w0, w1, w2, w3);
                }
                oc += 4;
            }
            for oc in oc..self.out_ch {
                let gplane = &go[oc * positions..(oc + 1) * positions];
                let wrow = &w[oc * ick..(oc + 1) * ick];
                for (pos, &g) in gplane.iter().enumerate() {
                    if g != 0.0 {
                        axpy(&mut gcols[pos * ick..(pos + 1) * ick], g, wrow);
                    }
                }
            }
        }
        let mut gin = Tensor::zeros(&[self.in_ch, h_in, w_in]);
        let gi = gin.data_mut();
        for oy in 0..h_out {
            for ox in 0..w_out {
                let row = &gcols[(oy * w_out + ox) * ick..(oy * w_out + ox + 1) * ick];
                let ix0 = (ox * s) as isize - p;
                let kx_lo = (-ix0).max(0) as usize;
                let kx_hi = k.min((w_in as isize - ix0).max(0) as usize);
                if kx_lo >= kx_hi {
                    continue;
                }
                for ic in 0..self.in_ch {
                    let giplane = &mut gi[ic * h_in * w_in..(ic + 1) * h_in * w_in];
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h_in as isize {
                            continue;
                        }
                        let girow =
                            &mut giplane[iy as usize * w_in..(iy as usize + 1) * w_in];
                        let dst0 = (ix0 + kx_lo as isize) as usize;
                        let src = &row[(ic * k + ky) * k + kx_lo..(ic * k + ky) * k + kx_hi];
                        for (d, &v) in girow[dst0..dst0 + (kx_hi - kx_lo)].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
        gin
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Per-channel normalization over the spatial dimensions with learnable
/// scale and shift. The stable choice under batch-size-1 training.
pub struct InstanceNorm2d {
    pub ch: usize,
    pub eps: f64,
    pub gamma: Param,
    pub beta: Param,
    cache: Option<(Tensor, Vec<f64>)>, // (xhat, inv_std per channel)
}

impl InstanceNorm2d {
    pub fn new(ch: usize) -> InstanceNorm2d {
        InstanceNorm2d {
            ch,
            eps: 1e-5,
            gamma: Param::new(Tensor::from_vec(&[ch], vec![1.0; ch])),
            beta: Param::new(Tensor::zeros(&[ch])),
            cache: None,
        }
    }
}

impl Layer for InstanceNorm2d {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let (c, h, w) = x.dims3();
        assert_eq!(c, self.ch, "instance norm channels");
        let n = (h * w) as f64;
        let mut out = Tensor::zeros(&[c, h, w]);
        let mut xhat = Tensor::zeros(&[c, h, w]);
        let mut inv_stds = vec![0.0; c];
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        for ci in 0..c {
            let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
            let mean = plane.iter().sum::<f64>() / n;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            inv_stds[ci] = inv_std;
            let xh = &mut xhat.data_mut()[ci * h * w..(ci + 1) * h * w];
            let op = &mut out.data_mut()[ci * h * w..(ci + 1) * h * w];
            for i in 0..plane.len() {
                let v = (plane[i] - mean) * inv_std;
                xh[i] = v;
                op[i] = g[ci] * v + b[ci];
            }
        }
        self.cache = Some((xhat, inv_stds));
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (xhat, inv_stds) = self.cache.take().expect("norm backward without forward");
        let (c, h, w) = grad_out.dims3();
        let n = (h * w) as f64;
        let mut gin = Tensor::zeros(&[c, h, w]);
        let g = self.gamma.value.data();
        for ci in 0..c {
            let go = &grad_out.data()[ci * h * w..(ci + 1) * h * w];
            let xh = &xhat.data()[ci * h * w..(ci + 1) * h * w];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..go.len() {
                sum_g += go[i];
                sum_gx += go[i] * xh[i];
            }
            self.beta.grad.data_mut()[ci] += sum_g;
            self.gamma.grad.data_mut()[ci] += sum_gx;
            let mean_g = sum_g / n;
            let mean_gx = sum_gx / n;
            let scale = g[ci] * inv_stds[ci];
            let gi = &mut gin.data_mut()[ci * h * w..(ci + 1) * h * w];
            for i in 0..go.len() {
                gi[i] = scale * (go[i] - mean_g - xh[i] * mean_gx);
            }
        }
        gin
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Relu {
        Relu { mask: None }
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let mut out = x.clone();
        let mask = out
            .data_mut()
            .iter_mut()
            .map(|v| {
                let keep = *v > 0.0;
                if !keep {
                    *v = 0.0;
                }
                keep
            })
            .collect();
        self.mask = Some(mask);
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without forward");
        let mut gin = grad_out.clone();
        for (g, keep) in gin.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        gin
    }
}

pub struct LeakyRelu {
    pub slope: f64,
    mask: Option<Vec<bool>>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> LeakyRelu {
        LeakyRelu { slope, mask: None }
    }
}

impl Layer for LeakyRelu {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let mut out = x.clone();
        let slope = self.slope;
        let mask = out
            .data_mut()
            .iter_mut()
            .map(|v| {
                let keep = *v > 0.0;
                if !keep {
                    *v *= slope;
                }
                keep
            })
            .collect();
        self.mask = Some(mask);
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("leaky relu backward without forward");
        let mut gin = grad_out.clone();
        for (g, keep) in gin.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g *= self.slope;
            }
        }
        gin
    }
}

/// Tanh followed by the affine remap from [-1,1] to [0,1].
pub struct TanhUnit {
    tanh_out: Option<Tensor>,
}

impl TanhUnit {
    pub fn new() -> TanhUnit {
        TanhUnit { tanh_out: None }
    }
}

impl Layer for TanhUnit {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let mut t = x.clone();
        for v in t.data_mut() {
            *v = v.tanh();
        }
        let mut out = t.clone();
        for v in out.data_mut() {
            *v = (*v + 1.0) * 0.5;
        }
        self.tanh_out = Some(t);
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let t = self.tanh_out.take().expect("tanh backward without forward");
        let mut gin = grad_out.clone();
        for (g, &tv) in gin.data_mut().iter_mut().zip(t.data()) {
            *g *= 0.5 * (1.0 - tv * tv);
        }
        gin
    }
}

/// Remaps a [0,1] image to the centered [-1,1] range the networks expect.
pub struct CenterInput;

impl Layer for CenterInput {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let mut out = x.clone();
        for v in out.data_mut() {
            *v = 2.0 * *v - 1.0;
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut gin = grad_out.clone();
        for v in gin.data_mut() {
            *v *= 2.0;
        }
        gin
    }
}

/// Mirror padding (edge not repeated) on both spatial axes.
pub struct ReflectPad2d {
    pub pad: usize,
    in_hw: Option<(usize, usize)>,
}

impl ReflectPad2d {
    pub fn new(pad: usize) -> ReflectPad2d {
        ReflectPad2d { pad, in_hw: None }
    }
}

#[inline]
fn mirror(t: isize, n: usize) -> usize {
    let n = n as isize;
    let mut t = t;
    if t < 0 {
        t = -t;
    }
    if t >= n {
        t = 2 * (n - 1) - t;
    }
    t as usize
}

impl Layer for ReflectPad2d {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let (c, h, w) = x.dims3();
        let p = self.pad;
        let (ho, wo) = (h + 2 * p, w + 2 * p);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        for ci in 0..c {
            let ip = &x.data()[ci * h * w..(ci + 1) * h * w];
            let op = &mut out.data_mut()[ci * ho * wo..(ci + 1) * ho * wo];
            for oy in 0..ho {
                let sy = mirror(oy as isize - p as isize, h);
                for ox in 0..wo {
                    let sx = mirror(ox as isize - p as isize, w);
                    op[oy * wo + ox] = ip[sy * w + sx];
                }
            }
        }
        self.in_hw = Some((h, w));
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (h, w) = self.in_hw.take().expect("pad backward without forward");
        let (c, ho, wo) = grad_out.dims3();
        let p = self.pad;
        let mut gin = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            let gp = &grad_out.data()[ci * ho * wo..(ci + 1) * ho * wo];
            let gi = &mut gin.data_mut()[ci * h * w..(ci + 1) * h * w];
            for oy in 0..ho {
                let sy = mirror(oy as isize - p as isize, h);
                for ox in 0..wo {
                    let sx = mirror(ox as isize - p as isize, w);
                    gi[sy * w + sx] += gp[oy * wo + ox];
                }
            }
        }
        gin
    }
}

/// Nearest-neighbor 2x upsampling.
pub struct Upsample2x;

impl Layer for Upsample2x {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let (c, h, w) = x.dims3();
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        for ci in 0..c {
            let ip = &x.data()[ci * h * w..(ci + 1) * h * w];
            let op = &mut out.data_mut()[ci * 4 * h * w..(ci + 1) * 4 * h * w];
            for y in 0..h {
                for x0 in 0..w {
                    let v = ip[y * w + x0];
                    let base = 2 * y * 2 * w + 2 * x0;
                    op[base] = v;
                    op[base + 1] = v;
                    op[base + 2 * w] = v;
                    op[base + 2 * w + 1] = v;
                }
            }
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (c, ho, wo) = grad_out.dims3();
        let (h, w) = (ho / 2, wo / 2);
        let mut gin = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            let gp = &grad_out.data()[ci * ho * wo..(ci + 1) * ho * wo];
            let gi = &mut gin.data_mut()[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                for x0 in 0..w {
                    let base = 2 * y * wo + 2 * x0;
                    gi[y * w + x0] = gp[base] + gp[base + 1] + gp[base + wo] + gp[base + wo + 1];
                }
            }
        }
        gin
    }
}

/// 2x2 max pooling with stride 2; gradient routes to the argmax
/// (first occurrence on ties, row-major).
pub struct MaxPool2x2 {
    argmax: Option<(Vec<usize>, (usize, usize, usize))>,
}

impl MaxPool2x2 {
    pub fn new() -> MaxPool2x2 {
        MaxPool2x2 { argmax: None }
    }
}

impl Layer for MaxPool2x2 {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Tensor {
        let (c, h, w) = x.dims3();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        let mut argmax = vec![0usize; c * ho * wo];
        for ci in 0..c {
            let ip = &x.data()[ci * h * w..(ci + 1) * h * w];
            let op = &mut out.data_mut()[ci * ho * wo..(ci + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (2 * oy + dy) * w + 2 * ox + dx;
                            if ip[idx] > best {
                                best = ip[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    op[oy * wo + ox] = best;
                    argmax[ci * ho * wo + oy * wo + ox] = ci * h * w + best_idx;
                }
            }
        }
        self.argmax = Some((argmax, (c, h, w)));
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (argmax, (c, h, w)) = self.argmax.take().expect("pool backward without forward");
        let mut gin = Tensor::zeros(&[c, h, w]);
        for (i, &src) in argmax.iter().enumerate() {
            gin.data_mut()[src] += grad_out.data()[i];
        }
        gin
    }
}

/// Inverted dropout with an owned seeded RNG; identity when not training.
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Dropout {
        Dropout { p, rng, mask: None }
    }
}

impl Layer for Dropout {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        if !train || self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| {
                if rand::Rng::random::<f64>(&mut self.rng) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = x.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        match self.mask.take() {
            None => grad_out.clone(),
            Some(mask) => {
                let mut gin = grad_out.clone();
                for (g, &m) in gin.data_mut().iter_mut().zip(&mask) {
                    *g *= m;
                }
                gin
            }
        }
    }
}

/// Named chain of layers; backward runs in reverse order.
pub struct Sequential {
    pub layers: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Sequential {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut cur = x.clone();
        for (_, layer) in &mut self.layers {
            cur = layer.forward(&cur, train);
        }
        cur
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut cur = grad_out.clone();
        for (_, layer) in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (name, layer) in &mut self.layers {
            let child = if prefix.is_empty() {
                name.clone()
            } else {
                format!("{prefix}.{name}")
            };
            layer.visit_params(&child, f);
        }
    }
}

/// Residual connection around a branch: `y = x + branch(x)`.
pub struct ResidualBlock {
    pub branch: Sequential,
}

impl Layer for ResidualBlock {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut out = self.branch.forward(x, train);
        for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
            *o += v;
        }
        out
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut gin = self.branch.backward(grad_out);
        for (g, &v) in gin.data_mut().iter_mut().zip(grad_out.data()) {
            *g += v;
        }
        gin
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.branch.visit_params(prefix, f);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        Tensor::from_vec(shape, data)
    }

    // Scalar objective: weighted sum of the layer output; generic enough to
    // exercise every output path.
    fn objective(out: &Tensor, probe: &[f64]) -> f64 {
        out.data().iter().zip(probe).map(|(a, b)| a * b).sum()
    }

    fn grad_check_input<L: Layer>(layer: &mut L, x: &Tensor, tol: f64, seed: u64) {
        let mut r = rng(seed);
        let out = layer.forward(x, true);
        let probe: Vec<f64> = (0..out.len()).map(|_| r.random::<f64>() - 0.5).collect();
        let gout = Tensor::from_vec(out.shape(), probe.clone());
        let gin = layer.backward(&gout);

        let eps = 1e-6;
        for i in (0..x.len()).step_by((x.len() / 24).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let fp = objective(&layer.forward(&xp, true), &probe);
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fm = objective(&layer.forward(&xm, true), &probe);
            let num = (fp - fm) / (2.0 * eps);
            let ana = gin.data()[i];
            let denom = ana.abs().max(num.abs()).max(1e-6);
            assert!(
                ((ana - num) / denom).abs() < tol,
                "input grad mismatch at {i}: analytic {ana}, numeric {num}"
            );
        }
    }

    #[test]
    fn conv_output_size_arithmetic() {
        let mut r = rng(1);
        let conv = Conv2d::new(1, 1, 4, 2, 1, &mut r);
        assert_eq!(conv.out_shape(256, 256), (128, 128));
        let conv = Conv2d::new(1, 1, 4, 1, 1, &mut r);
        assert_eq!(conv.out_shape(32, 32), (31, 31));
        let conv = Conv2d::new(1, 1, 7, 1, 0, &mut r);
        assert_eq!(conv.out_shape(70, 70), (64, 64));
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut r = rng(2);
        let mut conv = Conv2d::new(1, 1, 3, 1, 1, &mut r);
        conv.weight.value.fill(0.0);
        conv.weight.value.data_mut()[4] = 1.0; // center tap
        conv.bias.value.fill(0.0);
        let x = random_tensor(&[1, 6, 6], &mut r);
        let y = conv.forward(&x, false);
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn conv_input_gradient_matches_fd() {
        let mut r = rng(3);
        let mut conv = Conv2d::new(2, 3, 3, 1, 1, &mut r);
        let x = random_tensor(&[2, 7, 7], &mut r);
        grad_check_input(&mut conv, &x, 1e-5, 30);

        let mut strided = Conv2d::new(2, 3, 4, 2, 1, &mut r);
        let x = random_tensor(&[2, 8, 8], &mut r);
        grad_check_input(&mut strided, &x, 1e-5, 31);
    }

    #[test]
    fn conv_param_gradients_match_fd() {
        let mut r = rng(4);
        let mut conv = Conv2d::new(2, 2, 3, 2, 1, &mut r);
        let x = random_tensor(&[2, 9, 9], &mut r);
        let out = conv.forward(&x, true);
        let probe: Vec<f64> = (0..out.len()).map(|_| r.random::<f64>() - 0.5).collect();
        conv.backward(&Tensor::from_vec(out.shape(), probe.clone()));

        let eps = 1e-6;
        let wlen = conv.weight.value.len();
        for i in 0..wlen {
            let orig = conv.weight.value.data()[i];
            conv.weight.value.data_mut()[i] = orig + eps;
            let fp = objective(&conv.forward(&x, true), &probe);
            conv.weight.value.data_mut()[i] = orig - eps;
            let fm = objective(&conv.forward(&x, true), &probe);
            conv.weight.value.data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * eps);
            let ana = conv.weight.grad.data()[i];
            assert!(
                (ana - num).abs() < 1e-6 * ana.abs().max(num.abs()).max(1.0),
                "weight grad {i}: {ana} vs {num}"
            );
        }
        // Bias gradient is the per-channel sum of the probe.
        for oc in 0..2 {
            let expect: f64 = probe[oc * 25..(oc + 1) * 25].iter().sum();
            assert!((conv.bias.grad.data()[oc] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_gradcheck_and_stats() {
        let mut r = rng(5);
        let mut norm = InstanceNorm2d::new(2);
        norm.gamma.value.data_mut()[0] = 1.3;
        norm.beta.value.data_mut()[1] = -0.4;
        let x = random_tensor(&[2, 6, 6], &mut r);
        let y = norm.forward(&x, true);
        // Per-channel output stats: mean beta, std gamma.
        let plane = &y.data()[0..36];
        let mean = plane.iter().sum::<f64>() / 36.0;
        assert!(mean.abs() < 1e-10);
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 36.0;
        assert!((var.sqrt() - 1.3).abs() < 1e-3);
        grad_check_input(&mut norm, &x, 1e-4, 50);
    }

    #[test]
    fn activation_gradchecks() {
        let mut r = rng(6);
        // Offset away from the kink so finite differences stay valid.
        let mut x = random_tensor(&[1, 5, 5], &mut r);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        grad_check_input(&mut Relu::new(), &x, 1e-6, 60);
        grad_check_input(&mut LeakyRelu::new(0.2), &x, 1e-6, 61);
        grad_check_input(&mut TanhUnit::new(), &x, 1e-6, 62);
        grad_check_input(&mut CenterInput, &x, 1e-6, 63);
    }

    #[test]
    fn structural_layer_gradchecks() {
        let mut r = rng(7);
        let x = random_tensor(&[2, 6, 6], &mut r);
        grad_check_input(&mut ReflectPad2d::new(2), &x, 1e-6, 70);
        grad_check_input(&mut Upsample2x, &x, 1e-6, 71);
        grad_check_input(&mut MaxPool2x2::new(), &x, 1e-6, 72);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect());
        let mut pad = ReflectPad2d::new(1);
        let y = pad.forward(&x, false);
        assert_eq!(y.shape(), &[1, 5, 5]);
        // Row holding the original top row: mirrored as 2,1,2,3,2.
        assert_eq!(y.data()[5..10], [2.0, 1.0, 2.0, 3.0, 2.0]);
        // Padded corner reflects both axes: (row 1, col 1) of the source.
        assert_eq!(y.data()[0], 5.0);
    }

    #[test]
    fn residual_block_with_zero_branch_is_identity() {
        let mut r = rng(8);
        let mut branch = Sequential::new();
        let mut conv = Conv2d::new(1, 1, 3, 1, 1, &mut r);
        conv.weight.value.fill(0.0);
        branch.push("conv", conv);
        branch.push("norm", InstanceNorm2d::new(1));
        branch.push("relu", Relu::new());
        let mut block = ResidualBlock { branch };
        let x = random_tensor(&[1, 6, 6], &mut r);
        let y = block.forward(&x, false);
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn residual_block_gradcheck() {
        let mut r = rng(9);
        let mut branch = Sequential::new();
        branch.push("conv", Conv2d::new(2, 2, 3, 1, 1, &mut r));
        branch.push("norm", InstanceNorm2d::new(2));
        branch.push("relu", Relu::new());
        let mut block = ResidualBlock { branch };
        let x = random_tensor(&[2, 5, 5], &mut r);
        grad_check_input(&mut block, &x, 1e-4, 90);
    }

    #[test]
    fn dropout_eval_identity_train_scales() {
        let mut d = Dropout::new(0.5, rng(10));
        let x = Tensor::from_vec(&[1, 1, 8], vec![1.0; 8]);
        let y = d.forward(&x, false);
        assert_eq!(y.data(), x.data());
        let y = d.forward(&x, true);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn sequential_param_names_are_prefixed() {
        let mut r = rng(11);
        let mut seq = Sequential::new();
        seq.push("stem", Conv2d::new(1, 2, 3, 1, 1, &mut r));
        seq.push("norm", InstanceNorm2d::new(2));
        let mut names = Vec::new();
        seq.visit_params("g", &mut |name, _| names.push(name));
        assert_eq!(
            names,
            vec!["g.stem.weight", "g.stem.bias", "g.norm.gamma", "g.norm.beta"]
        );
    }
}
