//! Gaussian pairwise weights over a local window.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{CrfParams, CrfWeights};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Primitive};
use crate::tensor::Tensor;

pub const APPEARANCE: usize = 0;
pub const SMOOTHNESS: usize = 1;

/// Pairwise kernel values `k_l(i, j)` for every pixel `i` and every window
/// offset `j - i`, the zero offset excluded. Neighbors that fall outside
/// the image have weight zero.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    height: usize,
    width: usize,
    window: usize,
    offsets: Vec<(isize, isize)>,
    /// `weights[l][o * H * W + i]`.
    weights: [Vec<f64>; 2],
    /// `sums[l][i] = sum_j k_l(i, j)`.
    sums: [Vec<f64>; 2],
}

impl KernelBank {
    /// Builds a bank from an explicit pair function. `f(i, j)` receives
    /// `(row, col)` positions and must be symmetric.
    pub fn from_fn(
        height: usize,
        width: usize,
        window: usize,
        f: impl Fn((usize, usize), (usize, usize)) -> [f64; 2],
    ) -> Result<Self> {
        if window % 2 == 0 {
            return Err(Error::InvalidParameter(alloc::format!("window must be odd, got {window}")));
        }
        let r = (window / 2) as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|&o| o != (0, 0))
            .collect();
        let hw = height * width;
        let mut weights = [vec![0.0; offsets.len() * hw], vec![0.0; offsets.len() * hw]];
        for (o, &(dy, dx)) in offsets.iter().enumerate() {
            for y in 0..height {
                let ny = y as isize + dy;
                if ny < 0 || ny >= height as isize {
                    continue;
                }
                for x in 0..width {
                    let nx = x as isize + dx;
                    if nx < 0 || nx >= width as isize {
                        continue;
                    }
                    let k = f((y, x), (ny as usize, nx as usize));
                    if k.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        return Err(Error::InvalidParameter(alloc::format!(
                            "kernel value {k:?} at ({y}, {x}) must be finite and non-negative"
                        )));
                    }
                    for l in 0..2 {
                        weights[l][o * hw + y * width + x] = k[l];
                    }
                }
            }
        }
        let mut bank = Self {
            height,
            width,
            window,
            offsets,
            weights,
            sums: [vec![0.0; hw], vec![0.0; hw]],
        };
        bank.check_symmetry()?;
        for l in 0..2 {
            let mut s = vec![0.0; hw];
            for o in 0..bank.offsets.len() {
                for (acc, w) in s.iter_mut().zip(&bank.weights[l][o * hw..(o + 1) * hw]) {
                    *acc += w;
                }
            }
            bank.sums[l] = s;
        }
        Ok(bank)
    }

    fn check_symmetry(&self) -> Result<()> {
        let hw = self.height * self.width;
        for (o, &(dy, dx)) in self.offsets.iter().enumerate() {
            let back = self.offset_index(-dy, -dx);
            for y in 0..self.height {
                for x in 0..self.width {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= self.height as isize || nx >= self.width as isize {
                        continue;
                    }
                    let j = ny as usize * self.width + nx as usize;
                    for l in 0..2 {
                        let a = self.weights[l][o * hw + y * self.width + x];
                        let b = self.weights[l][back * hw + j];
                        if libm::fabs(a - b) > 1e-12 {
                            return Err(Error::InvalidParameter(alloc::format!(
                                "kernel {l} not symmetric at ({y}, {x}) offset ({dy}, {dx}): {a} vs {b}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn offset_index(&self, dy: isize, dx: isize) -> usize {
        let r = (self.window / 2) as isize;
        let raw = ((dy + r) * self.window as isize + dx + r) as usize;
        // The zero offset is skipped in the list.
        let center = (self.window * self.window) / 2;
        if raw > center {
            raw - 1
        } else {
            raw
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    /// Stored weight of kernel `l` from pixel `(y, x)` to `(y + dy, x + dx)`.
    pub fn weight(&self, l: usize, (y, x): (usize, usize), (dy, dx): (isize, isize)) -> f64 {
        if (dy, dx) == (0, 0) {
            return 0.0;
        }
        let r = (self.window / 2) as isize;
        if dy.abs() > r || dx.abs() > r {
            return 0.0;
        }
        let o = self.offset_index(dy, dx);
        self.weights[l][o * self.pixels() + y * self.width + x]
    }

    /// `sum_j k_l(i, j)` per pixel.
    pub fn sums(&self, l: usize) -> &[f64] {
        &self.sums[l]
    }

    /// Combined weight `w_ij = b1 k1_ij + b2 k2_ij` at offset index `o`.
    pub(crate) fn combined(&self, beta: [f64; 2], o: usize, i: usize) -> f64 {
        let hw = self.pixels();
        beta[0] * self.weights[0][o * hw + i] + beta[1] * self.weights[1][o * hw + i]
    }

    /// Per-pixel `(sum_l b_l sum_j k_l(i, j))`.
    pub fn degree(&self, beta: [f64; 2]) -> Vec<f64> {
        self.sums[0]
            .iter()
            .zip(&self.sums[1])
            .map(|(a, b)| beta[0] * a + beta[1] * b)
            .collect()
    }

    /// Messages `m_l(i) = sum_j k_l(i, j) d_j` for both kernels.
    pub fn messages(&self, d: &[f64]) -> [Vec<f64>; 2] {
        let (h, w, hw) = (self.height, self.width, self.pixels());
        debug_assert_eq!(d.len(), hw);
        let mut out = [vec![0.0; hw], vec![0.0; hw]];
        for (o, &(dy, dx)) in self.offsets.iter().enumerate() {
            let (y0, y1) = (0.max(-dy) as usize, (h as isize).min(h as isize - dy).max(0) as usize);
            let (x0, x1) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx).max(0) as usize);
            if x0 >= x1 {
                continue;
            }
            for l in 0..2 {
                let wl = &self.weights[l][o * hw..(o + 1) * hw];
                let ml = &mut out[l];
                for y in y0..y1 {
                    let row = y * w;
                    let nrow = (y as isize + dy) as usize * w;
                    let start = (nrow as isize + dx + x0 as isize) as usize;
                    let src = &d[start..start + (x1 - x0)];
                    let wr = &wl[row + x0..row + x1];
                    for ((m, &wv), &dv) in ml[row + x0..row + x1].iter_mut().zip(wr).zip(src) {
                        *m += wv * dv;
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`messages`](Self::messages): `grad_d[j] = sum_l sum_i k_l(i, j) g_l[i]`.
    pub fn messages_adjoint(&self, g: [&[f64]; 2]) -> Vec<f64> {
        let (h, w, hw) = (self.height, self.width, self.pixels());
        let mut out = vec![0.0; hw];
        for (o, &(dy, dx)) in self.offsets.iter().enumerate() {
            let (y0, y1) = (0.max(-dy) as usize, (h as isize).min(h as isize - dy).max(0) as usize);
            let (x0, x1) = (0.max(-dx) as usize, (w as isize).min(w as isize - dx).max(0) as usize);
            if x0 >= x1 {
                continue;
            }
            for l in 0..2 {
                let wl = &self.weights[l][o * hw..(o + 1) * hw];
                for y in y0..y1 {
                    let row = y * w;
                    let nrow = (y as isize + dy) as usize * w;
                    let start = (nrow as isize + dx + x0 as isize) as usize;
                    let dst = &mut out[start..start + (x1 - x0)];
                    let wr = &wl[row + x0..row + x1];
                    let gr = &g[l][row + x0..row + x1];
                    for ((o_, &wv), &gv) in dst.iter_mut().zip(wr).zip(gr) {
                        *o_ += wv * gv;
                    }
                }
            }
        }
        out
    }

    /// Applies `[(a1 + a2) I + L]` to `d`.
    pub fn system_apply(&self, weights: &CrfWeights, d: &[f64]) -> Vec<f64> {
        let [m1, m2] = self.messages(d);
        let deg = self.degree(weights.beta);
        let a = weights.alpha_sum();
        (0..d.len())
            .map(|i| (a + deg[i]) * d[i] - weights.beta[0] * m1[i] - weights.beta[1] * m2[i])
            .collect()
    }
}

/// Appearance and smoothness kernels from an image with values in `[0, 1]`:
///
/// ```text
/// k1 = exp(-|p_i - p_j|^2 / (2 ta^2) - |I_i - I_j|^2 / (2 tb^2))
/// k2 = exp(-|p_i - p_j|^2 / (2 tg^2))
/// ```
///
/// `image` is `[1, C, H, W]` or `[C, H, W]`.
pub fn build_kernels(image: &Tensor, params: &CrfParams) -> Result<KernelBank> {
    params.validate()?;
    let (c, h, w) = match image.shape() {
        &[1, c, h, w] | &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::InvalidShape {
                op: "build_kernels",
                reason: alloc::format!("expected [1, C, H, W] or [C, H, W], got {other:?}"),
            })
        }
    };
    if params.window > h || params.window > w {
        return Err(Error::WindowTooLarge {
            window: params.window,
            height: h,
            width: w,
        });
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidParameter("image intensities must lie in [0, 1]".into()));
    }
    let px = image.data();
    let b = params.bandwidths;
    let (ta, tb, tg) = (
        2.0 * b.theta_alpha * b.theta_alpha,
        2.0 * b.theta_beta * b.theta_beta,
        2.0 * b.theta_gamma * b.theta_gamma,
    );
    KernelBank::from_fn(h, w, params.window, |(y, x), (ny, nx)| {
        let dy = y as f64 - ny as f64;
        let dx = x as f64 - nx as f64;
        let pos = dy * dy + dx * dx;
        let mut col = 0.0;
        for ch in 0..c {
            let diff = px[(ch * h + y) * w + x] - px[(ch * h + ny) * w + nx];
            col += diff * diff;
        }
        [libm::exp(-pos / ta - col / tb), libm::exp(-pos / tg)]
    })
}

/// Message passing on the tape: `[N, 1, H, W]` in, `[N, 2, H, W]` out
/// (channel `l` holds kernel `l`), one bank per sample.
struct MessagePass {
    banks: Vec<Arc<KernelBank>>,
}

impl MessagePass {
    fn check(&self, d: &Tensor) -> Result<[usize; 4]> {
        let [n, c, h, w] = d.dims4("message_pass")?;
        if c != 1 || n != self.banks.len() {
            return Err(Error::ShapeMismatch {
                op: "message_pass",
                expected: vec![self.banks.len(), 1, h, w],
                found: d.shape().to_vec(),
            });
        }
        for b in &self.banks {
            if (b.height(), b.width()) != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "message_pass",
                    expected: vec![n, 1, b.height(), b.width()],
                    found: d.shape().to_vec(),
                });
            }
        }
        Ok([n, c, h, w])
    }
}

impl Primitive for MessagePass {
    fn name(&self) -> &'static str {
        "message_pass"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let [n, _, h, w] = self.check(inputs[0])?;
        let hw = h * w;
        let mut out = Vec::with_capacity(2 * n * hw);
        for (s, bank) in self.banks.iter().enumerate() {
            let [m1, m2] = bank.messages(&inputs[0].data()[s * hw..(s + 1) * hw]);
            out.extend(m1);
            out.extend(m2);
        }
        Tensor::new(&[n, 2, h, w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let [n, _, h, w] = self.check(inputs[0])?;
        let hw = h * w;
        let g = grad.data();
        let mut out = Vec::with_capacity(n * hw);
        for (s, bank) in self.banks.iter().enumerate() {
            let base = s * 2 * hw;
            out.extend(bank.messages_adjoint([&g[base..base + hw], &g[base + hw..base + 2 * hw]]));
        }
        Ok(vec![Some(Tensor::new(&[n, 1, h, w], out)?)])
    }
}

pub fn message_pass_node(g: &mut Graph, d: NodeId, banks: &[Arc<KernelBank>]) -> Result<NodeId> {
    g.apply(
        Box::new(MessagePass {
            banks: banks.to_vec(),
        }),
        &[d],
    )
}

/// Per-sample kernel sums as a constant `[N, 2, H, W]` tensor.
pub(crate) fn sums_tensor(banks: &[Arc<KernelBank>]) -> Result<Tensor> {
    let first = banks.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(banks.len() * 2 * h * w);
    for b in banks {
        data.extend_from_slice(b.sums(0));
        data.extend_from_slice(b.sums(1));
    }
    Tensor::new(&[banks.len(), 2, h, w], data)
}
