//! Separable align-corners bilinear resampling of grid-shaped maps.
//!
//! Output pixel `(r, c)` samples the source at
//! `(r·(h_src−1)/(h_dst−1), c·(w_src−1)/(w_dst−1))`, so the four corner
//! pixels coincide with the four corner source cells. The operator is stored
//! as two sparse interpolation matrices, which makes the adjoint (needed for
//! backpropagation) a simple scatter.

#[derive(Debug, Clone, PartialEq)]
pub struct Bilinear {
    src: (usize, usize),
    dst: (usize, usize),
    /// Per destination row: (lower source row, upper source row, upper weight).
    row_taps: Vec<(usize, usize, f64)>,
    col_taps: Vec<(usize, usize, f64)>,
}

fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            // Exact rational position i·(src−1)/(dst−1), split into integer
            // and fractional parts without accumulating rounding.
            let num = i * (src - 1);
            let den = dst - 1;
            let lo = num / den;
            let rem = num % den;
            if rem == 0 {
                (lo, lo, 0.0)
            } else {
                (lo, lo + 1, rem as f64 / den as f64)
            }
        })
        .collect()
}

impl Bilinear {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        assert!(src.0 > 0 && src.1 > 0 && dst.0 > 0 && dst.1 > 0, "empty grid");
        Bilinear {
            src,
            dst,
            row_taps: taps(src.0, dst.0),
            col_taps: taps(src.1, dst.1),
        }
    }

    pub fn src(&self) -> (usize, usize) {
        self.src
    }

    pub fn dst(&self) -> (usize, usize) {
        self.dst
    }

    /// Upsamples a channel-interleaved map `[h_src][w_src][n]` to
    /// `[h_dst][w_dst][n]`.
    pub fn forward(&self, src: &[f64], n: usize) -> Vec<f64> {
        let (hs, ws) = self.src;
        let (hd, wd) = self.dst;
        assert_eq!(src.len(), hs * ws * n);
        // Rows first: [hd][ws][n].
        let mut tmp = vec![0.0; hd * ws * n];
        for (r, &(lo, hi, f)) in self.row_taps.iter().enumerate() {
            for c in 0..ws {
                for k in 0..n {
                    let a = src[(lo * ws + c) * n + k];
                    let b = src[(hi * ws + c) * n + k];
                    tmp[(r * ws + c) * n + k] = a + f * (b - a);
                }
            }
        }
        let mut out = vec![0.0; hd * wd * n];
        for r in 0..hd {
            for (c, &(lo, hi, f)) in self.col_taps.iter().enumerate() {
                for k in 0..n {
                    let a = tmp[(r * ws + lo) * n + k];
                    let b = tmp[(r * ws + hi) * n + k];
                    out[(r * wd + c) * n + k] = a + f * (b - a);
                }
            }
        }
        out
    }

    /// Adjoint of [`forward`](Self::forward): maps a gradient on the
    /// destination grid back onto the source grid.
    pub fn adjoint(&self, dst: &[f64], n: usize) -> Vec<f64> {
        let (hs, ws) = self.src;
        let (hd, wd) = self.dst;
        assert_eq!(dst.len(), hd * wd * n);
        let mut tmp = vec![0.0; hd * ws * n];
        for r in 0..hd {
            for (c, &(lo, hi, f)) in self.col_taps.iter().enumerate() {
                for k in 0..n {
                    let g = dst[(r * wd + c) * n + k];
                    tmp[(r * ws + lo) * n + k] += (1.0 - f) * g;
                    tmp[(r * ws + hi) * n + k] += f * g;
                }
            }
        }
        let mut out = vec![0.0; hs * ws * n];
        for (r, &(lo, hi, f)) in self.row_taps.iter().enumerate() {
            for c in 0..ws {
                for k in 0..n {
                    let g = tmp[(r * ws + c) * n + k];
                    out[(lo * ws + c) * n + k] += (1.0 - f) * g;
                    out[(hi * ws + c) * n + k] += f * g;
                }
            }
        }
        out
    }
}
