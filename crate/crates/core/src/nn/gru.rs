use super::linear::Linear;
use super::loss::sigmoid;
use super::{Init, ParamsBuilder};

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(Wz x + bz + Uz h + cz)
/// r  = sigmoid(Wr x + br + Ur h + cr)
/// n  = tanh(Wn x + bn + r * (Un h + cn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCell {
    /// Input projection, rows ordered `[z, r, n]`.
    pub wx: Linear,
    /// Recurrent projection, rows ordered `[z, r, n]`.
    pub wh: Linear,
    pub hidden: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GruCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    /// `Un h + cn`, needed for the reset-gate gradient.
    hn: Vec<f64>,
}

impl GruCell {
    pub fn alloc(builder: &mut ParamsBuilder<'_>, name: &str, input: usize, hidden: usize) -> Self {
        let wx = Linear::alloc(builder, &format!("{name}.wx"), input, 3 * hidden, Init::lecun(input));
        let wh = Linear::alloc(builder, &format!("{name}.wh"), hidden, 3 * hidden, Init::lecun(hidden));
        GruCell { wx, wh, hidden }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], h_prev: &[f64], h_out: &mut [f64]) -> GruCache {
        let hd = self.hidden;
        let mut ax = vec![0.0; 3 * hd];
        let mut ah = vec![0.0; 3 * hd];
        self.wx.forward(p, x, &mut ax);
        self.wh.forward(p, h_prev, &mut ah);
        let mut cache = GruCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z: vec![0.0; hd],
            r: vec![0.0; hd],
            n: vec![0.0; hd],
            hn: ah[2 * hd..].to_vec(),
        };
        for j in 0..hd {
            let z = sigmoid(ax[j] + ah[j]);
            let r = sigmoid(ax[hd + j] + ah[hd + j]);
            let n = (ax[2 * hd + j] + r * ah[2 * hd + j]).tanh();
            h_out[j] = (1.0 - z) * n + z * h_prev[j];
            cache.z[j] = z;
            cache.r[j] = r;
            cache.n[j] = n;
        }
        cache
    }

    /// Back-propagates `dh` (gradient w.r.t. the new state). Returns the
    /// gradient w.r.t. the previous state and adds the input gradient to `dx`.
    pub fn backward(&self, p: &[f64], cache: &GruCache, dh: &[f64], g: &mut [f64], dx: Option<&mut [f64]>) -> Vec<f64> {
        let hd = self.hidden;
        let mut dax = vec![0.0; 3 * hd];
        let mut dah = vec![0.0; 3 * hd];
        let mut dh_prev = vec![0.0; hd];
        for j in 0..hd {
            let (z, r, n) = (cache.z[j], cache.r[j], cache.n[j]);
            let d = dh[j];
            let dn_pre = d * (1.0 - z) * (1.0 - n * n);
            let dz_pre = d * (cache.h_prev[j] - n) * z * (1.0 - z);
            let dr_pre = dn_pre * cache.hn[j] * r * (1.0 - r);
            dh_prev[j] = d * z;
            dax[j] = dz_pre;
            dax[hd + j] = dr_pre;
            dax[2 * hd + j] = dn_pre;
            dah[j] = dz_pre;
            dah[hd + j] = dr_pre;
            dah[2 * hd + j] = dn_pre * r;
        }
        self.wx.backward(p, &cache.x, &dax, g, dx);
        self.wh.backward(p, &cache.h_prev, &dah, g, Some(&mut dh_prev));
        dh_prev
    }
}
