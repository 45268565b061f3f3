/// Affine map `y = W x + b` with `W` stored row-major `[out][in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn alloc(builder: &mut super::ParamsBuilder<'_>, name: &str, n_in: usize, n_out: usize, init: super::Init) -> Self {
        let w = builder.alloc(&format!("{name}.weight"), &[n_out, n_in], init);
        let b = builder.alloc(&format!("{name}.bias"), &[n_out], super::Init::Zeros);
        Linear { w, b, n_in, n_out }
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_in);
        debug_assert_eq!(y.len(), self.n_out);
        let w = &p[self.w..self.w + self.n_in * self.n_out];
        let b = &p[self.b..self.b + self.n_out];
        for (o, (yo, row)) in y.iter_mut().zip(w.chunks_exact(self.n_in)).enumerate() {
            *yo = b[o] + dot(row, x);
        }
    }

    /// Accumulates parameter gradients into `g` and, when requested, the
    /// input gradient into `dx`.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], g: &mut [f64], dx: Option<&mut [f64]>) {
        {
            let gw = &mut g[self.w..self.w + self.n_in * self.n_out];
            for (row, &d) in gw.chunks_exact_mut(self.n_in).zip(dy) {
                if d != 0.0 {
                    axpy(d, x, row);
                }
            }
        }
        for (gb, &d) in g[self.b..self.b + self.n_out].iter_mut().zip(dy) {
            *gb += d;
        }
        if let Some(dx) = dx {
            let w = &p[self.w..self.w + self.n_in * self.n_out];
            for (row, &d) in w.chunks_exact(self.n_in).zip(dy) {
                if d != 0.0 {
                    axpy(d, row, dx);
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
