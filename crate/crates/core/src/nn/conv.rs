use super::linear::Linear;
use super::{relu_backward, relu_inplace, Init, ParamsBuilder};

/// 3x3 convolution, padding 1, over a CHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

const K: usize = 3;
const PAD: isize = 1;

impl Conv2d {
    pub fn alloc(
        builder: &mut ParamsBuilder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        (h_in, w_in): (usize, usize),
    ) -> Self {
        let w = builder.alloc(&format!("{name}.weight"), &[c_out, c_in, K, K], Init::he(c_in * K * K));
        let b = builder.alloc(&format!("{name}.bias"), &[c_out], Init::Zeros);
        let h_out = (h_in + 2 * PAD as usize - K) / stride + 1;
        let w_out = (w_in + 2 * PAD as usize - K) / stride + 1;
        Conv2d {
            w,
            b,
            c_in,
            c_out,
            stride,
            h_in,
            w_in,
            h_out,
            w_out,
        }
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }

    /// Valid kernel offsets and input coordinates for one output coordinate.
    #[inline]
    fn taps(&self, o: usize, limit: usize) -> impl Iterator<Item = (usize, usize)> {
        let base = (o * self.stride) as isize - PAD;
        (0..K).filter_map(move |k| {
            let i = base + k as isize;
            (i >= 0 && (i as usize) < limit).then_some((k, i as usize))
        })
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        let kk = K * K;
        let plane = self.h_in * self.w_in;
        for oc in 0..self.c_out {
            let bias = p[self.b + oc];
            let wbase = self.w + oc * self.c_in * kk;
            for oy in 0..self.h_out {
                for ox in 0..self.w_out {
                    let mut acc = bias;
                    for (ky, iy) in self.taps(oy, self.h_in) {
                        for (kx, ix) in self.taps(ox, self.w_in) {
                            let mut wi = wbase + ky * K + kx;
                            let mut xi = iy * self.w_in + ix;
                            for _ in 0..self.c_in {
                                acc += p[wi] * x[xi];
                                wi += kk;
                                xi += plane;
                            }
                        }
                    }
                    y[(oc * self.h_out + oy) * self.w_out + ox] = acc;
                }
            }
        }
    }

    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], mut dx: Option<&mut [f64]>) {
        let kk = K * K;
        let plane = self.h_in * self.w_in;
        for oc in 0..self.c_out {
            let wbase = self.w + oc * self.c_in * kk;
            for oy in 0..self.h_out {
                for ox in 0..self.w_out {
                    let d = dy[(oc * self.h_out + oy) * self.w_out + ox];
                    if d == 0.0 {
                        continue;
                    }
                    g[self.b + oc] += d;
                    for (ky, iy) in self.taps(oy, self.h_in) {
                        for (kx, ix) in self.taps(ox, self.w_in) {
                            let mut wi = wbase + ky * K + kx;
                            let mut xi = iy * self.w_in + ix;
                            for _ in 0..self.c_in {
                                g[wi] += d * x[xi];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += d * p[wi];
                                }
                                wi += kk;
                                xi += plane;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stack of stride-2 ReLU conv blocks, optional 2x2 average pool, then a
/// linear projection to `out_dim`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvEncoder {
    pub convs: Vec<Conv2d>,
    pub pool: bool,
    pub fc: Linear,
    pub out_dim: usize,
}

/// Activations kept from [`ConvEncoder::forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct EncoderCache {
    /// `acts[0]` is the input; `acts[i + 1]` the post-ReLU output of conv `i`.
    acts: Vec<Vec<f64>>,
    pooled: Vec<f64>,
}

impl ConvEncoder {
    pub fn alloc(
        builder: &mut ParamsBuilder<'_>,
        name: &str,
        input: (usize, usize, usize),
        channels: &[usize],
        pool: bool,
        out_dim: usize,
    ) -> Self {
        let (mut c, mut h, mut w) = input;
        let mut convs = Vec::with_capacity(channels.len());
        for (i, &co) in channels.iter().enumerate() {
            let conv = Conv2d::alloc(builder, &format!("{name}.conv{i}"), c, co, 2, (h, w));
            c = co;
            h = conv.h_out;
            w = conv.w_out;
            convs.push(conv);
        }
        if pool {
            h /= 2;
            w /= 2;
        }
        let flat = c * h * w;
        let fc = Linear::alloc(builder, &format!("{name}.fc"), flat, out_dim, Init::lecun(flat));
        ConvEncoder {
            convs,
            pool,
            fc,
            out_dim,
        }
    }

    fn last_shape(&self) -> (usize, usize, usize) {
        let last = self.convs.last().expect("encoder has at least one conv");
        (last.c_out, last.h_out, last.w_out)
    }

    pub fn forward(&self, p: &[f64], image: &[f64], cache: &mut EncoderCache, out: &mut [f64]) {
        cache.acts.clear();
        cache.acts.push(image.to_vec());
        for conv in &self.convs {
            let mut y = vec![0.0; conv.out_len()];
            conv.forward(p, cache.acts.last().expect("input pushed"), &mut y);
            relu_inplace(&mut y);
            cache.acts.push(y);
        }
        let last = cache.acts.last().expect("conv outputs");
        if self.pool {
            let (c, h, w) = self.last_shape();
            cache.pooled = avg_pool2(last, c, h, w);
            self.fc.forward(p, &cache.pooled, out);
        } else {
            self.fc.forward(p, last, out);
        }
    }

    pub fn backward(&self, p: &[f64], cache: &EncoderCache, dout: &[f64], g: &mut [f64]) {
        let last = cache.acts.last().expect("forward was run");
        let mut dact = vec![0.0; last.len()];
        if self.pool {
            let (c, h, w) = self.last_shape();
            let mut dpool = vec![0.0; cache.pooled.len()];
            self.fc.backward(p, &cache.pooled, dout, g, Some(&mut dpool));
            avg_pool2_backward(&dpool, c, h, w, &mut dact);
        } else {
            self.fc.backward(p, last, dout, g, Some(&mut dact));
        }
        for (i, conv) in self.convs.iter().enumerate().rev() {
            relu_backward(&cache.acts[i + 1], &mut dact);
            if i == 0 {
                conv.backward(p, &cache.acts[0], &dact, g, None);
            } else {
                let mut dx = vec![0.0; conv.in_len()];
                conv.backward(p, &cache.acts[i], &dact, g, Some(&mut dx));
                dact = dx;
            }
        }
    }
}

fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += x[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                    }
                }
                y[(ch * ho + oy) * wo + ox] = 0.25 * s;
            }
        }
    }
    y
}

fn avg_pool2_backward(dy: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let d = 0.25 * dy[(ch * ho + oy) * wo + ox];
                for ddy in 0..2 {
                    let row = (ch * h + 2 * oy + ddy) * w + 2 * ox;
                    dx[row] += d;
                    dx[row + 1] += d;
                }
            }
        }
    }
}
