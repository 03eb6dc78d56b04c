//! Horizontal bilinear view synthesis.
//!
//! `warp(source, d, dir)` samples `source` at `(x + dir * d(x, y), y)`.
//! Synthesizing the right view from the left image uses
//! [`Direction::Forward`] (`+1`): `right(x) = left(x + d(x))`.
//!
//! Sample coordinates are clamped to `[0, W - 1]`. Inside that range the
//! derivative with respect to `d` is the slope of the linear piece the
//! sample falls on; at an exact integer coordinate the piece to the left
//! is used, and in the clamped region the derivative is zero.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Primitive};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Sample at `x + d`.
    Forward,
    /// Sample at `x - d`.
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }
}

/// Per-pixel horizontal shift in pixels, shape `[N, 1, H, W]`, values in `[0, d_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap(Tensor);

impl DisparityMap {
    pub fn new(t: Tensor, d_max: f64) -> Result<Self> {
        let [_, c, _, _] = t.dims4("disparity")?;
        if c != 1 {
            return Err(Error::InvalidShape {
                op: "disparity",
                reason: alloc::format!("expected one channel, got {c}"),
            });
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=d_max).contains(*v)) {
            return Err(Error::InvalidParameter(alloc::format!(
                "disparity {v} outside [0, {d_max}]"
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Where one output pixel samples from.
#[derive(Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    t: f64,
    /// Whether `d` influences the sample (false in the clamped region).
    live: bool,
}

fn tap(x: usize, shift: f64, width: usize) -> Tap {
    let last = (width - 1) as f64;
    let u = x as f64 + shift;
    if u <= 0.0 {
        return Tap {
            x0: 0,
            x1: 0,
            t: 0.0,
            live: false,
        };
    }
    if u >= last {
        // u == last is reached from the left piece when width > 1.
        let live = u == last && width > 1;
        return Tap {
            x0: width - 1,
            x1: width - 1,
            t: 0.0,
            live,
        };
    }
    let x0 = libm::floor(u) as usize;
    Tap {
        x0,
        x1: x0 + 1,
        t: u - x0 as f64,
        live: true,
    }
}

fn check_shapes(source: &Tensor, disparity: &Tensor) -> Result<[usize; 4]> {
    let [n, c, h, w] = source.dims4("warp")?;
    disparity.expect_shape("warp", &[n, 1, h, w])?;
    Ok([n, c, h, w])
}

pub fn warp(source: &Tensor, disparity: &Tensor, dir: Direction) -> Result<Tensor> {
    let [n, c, h, w] = check_shapes(source, disparity)?;
    let (s, d) = (source.data(), disparity.data());
    let sign = dir.sign();
    let mut out = vec![0.0; s.len()];
    for ni in 0..n {
        for y in 0..h {
            let drow = &d[(ni * h + y) * w..][..w];
            for x in 0..w {
                let tp = tap(x, sign * drow[x], w);
                for ci in 0..c {
                    let row = ((ni * c + ci) * h + y) * w;
                    out[row + x] = if tp.t == 0.0 {
                        s[row + tp.x0]
                    } else {
                        (1.0 - tp.t) * s[row + tp.x0] + tp.t * s[row + tp.x1]
                    };
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Gradients of `warp` for the source image and the disparity map.
pub fn warp_backward(
    source: &Tensor,
    disparity: &Tensor,
    dir: Direction,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = check_shapes(source, disparity)?;
    grad.expect_shape("warp", source.shape())?;
    let (s, d, g) = (source.data(), disparity.data(), grad.data());
    let sign = dir.sign();
    let mut gs = vec![0.0; s.len()];
    let mut gd = vec![0.0; d.len()];
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let di = (ni * h + y) * w + x;
                let tp = tap(x, sign * d[di], w);
                let mut acc = 0.0;
                for ci in 0..c {
                    let row = ((ni * c + ci) * h + y) * w;
                    let gv = g[row + x];
                    gs[row + tp.x0] += (1.0 - tp.t) * gv;
                    gs[row + tp.x1] += tp.t * gv;
                    if tp.live {
                        // Left piece at integer coordinates.
                        let slope = if tp.t == 0.0 {
                            s[row + tp.x0] - s[row + tp.x0 - 1]
                        } else {
                            s[row + tp.x1] - s[row + tp.x0]
                        };
                        acc += slope * gv;
                    }
                }
                gd[di] = sign * acc;
            }
        }
    }
    Ok((Tensor::new(source.shape(), gs)?, Tensor::new(disparity.shape(), gd)?))
}

struct WarpOp {
    dir: Direction,
}

impl Primitive for WarpOp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        warp(inputs[0], inputs[1], self.dir)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (gs, gd) = warp_backward(inputs[0], inputs[1], self.dir, grad)?;
        Ok(vec![Some(gs), Some(gd)])
    }
}

/// Differentiable warp on the tape.
pub fn warp_node(g: &mut Graph, source: NodeId, disparity: NodeId, dir: Direction) -> Result<NodeId> {
    g.apply(Box::new(WarpOp { dir }), &[source, disparity])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::Rng;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_disparity_is_identity() {
        let mut rng = Rng::new(1);
        let src = Tensor::rand_uniform(&[2, 3, 4, 7], 0.0, 1.0, &mut rng);
        let d = Tensor::zeros(&[2, 1, 4, 7]);
        for dir in [Direction::Forward, Direction::Backward] {
            assert_eq!(warp(&src, &d, dir).unwrap(), src);
        }
    }

    #[test]
    fn integer_shift_clamps_at_edge() {
        let out = warp(&row(&[10.0, 20.0, 30.0]), &row(&[1.0; 3]), Direction::Forward).unwrap();
        assert_eq!(out.data(), &[20.0, 30.0, 30.0]);
        let out = warp(&row(&[10.0, 20.0, 30.0]), &row(&[1.0; 3]), Direction::Backward).unwrap();
        assert_eq!(out.data(), &[10.0, 10.0, 20.0]);
    }

    #[test]
    fn half_pixel_interpolates() {
        let out = warp(&row(&[10.0, 20.0, 30.0]), &row(&[0.5; 3]), Direction::Forward).unwrap();
        assert_eq!(out.data(), &[15.0, 25.0, 30.0]);
    }

    #[test]
    fn shape_mismatch() {
        let src = Tensor::zeros(&[1, 3, 2, 4]);
        assert!(warp(&src, &Tensor::zeros(&[1, 1, 2, 3]), Direction::Forward).is_err());
    }

    #[test]
    fn left_piece_at_integer_samples() {
        let src = row(&[1.0, 4.0, 9.0]);
        let d = row(&[1.0, 0.0, 0.0]);
        let (_, gd) = warp_backward(&src, &d, Direction::Forward, &row(&[1.0, 1.0, 1.0])).unwrap();
        // x=0 samples u=1 -> slope 4-1; x=1 samples u=1 -> 3; x=2 samples u=2 -> 9-4.
        assert_eq!(gd.data(), &[3.0, 3.0, 5.0]);
        // Clamped samples carry no disparity gradient.
        let (_, gd) = warp_backward(&src, &row(&[5.0; 3]), Direction::Forward, &row(&[1.0; 3])).unwrap();
        assert_eq!(gd.data(), &[0.0; 3]);
    }

    #[test]
    fn disparity_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let (h, w) = (3, 9);
        let src = Tensor::rand_uniform(&[1, 2, h, w], 0.0, 1.0, &mut rng);
        // Keep samples at least 0.1 px away from integer coordinates.
        let d: Vec<f64> = (0..h * w)
            .map(|_| rng.below(3) as f64 + rng.uniform_range(0.1, 0.9))
            .collect();
        let d = Tensor::new(&[1, 1, h, w], d).unwrap();
        let r = grad_check(
            |g, x| warp_node(g, x[0], x[1], Direction::Forward),
            &[src, d],
            1e-4,
            &mut rng,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{:?}", r.per_input);
    }
}
