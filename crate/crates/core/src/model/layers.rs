//! Convolution kernels over `(F, W, H, channels)` row-major activations.
//!
//! Spatial convolutions run per frame with circular padding; temporal
//! convolutions run per pixel with zero padding at the first and last frame.
//! Weights are stored tap-major: `[tap][out][in]`.

#[derive(Debug, Clone, Copy)]
pub(crate) struct Grid {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
}

impl Grid {
    pub fn pixels(&self) -> usize {
        self.frames * self.width * self.height
    }

    #[inline]
    fn pixel(&self, f: usize, w: usize, h: usize) -> usize {
        (f * self.width + w) * self.height + h
    }

    #[inline]
    fn wrap(x: usize, dx: usize, pad: usize, n: usize) -> usize {
        (x + dx + n * (pad / n + 1) - pad) % n
    }
}

#[inline]
fn matvec_acc(out: &mut [f64], weight: &[f64], input: &[f64]) {
    let cin = input.len();
    for (o, row) in out.iter_mut().zip(weight.chunks_exact(cin)) {
        let mut acc = 0.0;
        for (wv, iv) in row.iter().zip(input) {
            acc += wv * iv;
        }
        *o += acc;
    }
}

/// `input += Wᵀ · grad_out` for a single tap.
#[inline]
fn matvec_t_acc(input_grad: &mut [f64], weight: &[f64], grad_out: &[f64]) {
    let cin = input_grad.len();
    for (&g, row) in grad_out.iter().zip(weight.chunks_exact(cin)) {
        if g == 0.0 {
            continue;
        }
        for (d, wv) in input_grad.iter_mut().zip(row) {
            *d += g * wv;
        }
    }
}

#[inline]
fn outer_acc(weight_grad: &mut [f64], grad_out: &[f64], input: &[f64]) {
    let cin = input.len();
    for (&g, row) in grad_out.iter().zip(weight_grad.chunks_exact_mut(cin)) {
        if g == 0.0 {
            continue;
        }
        for (d, iv) in row.iter_mut().zip(input) {
            *d += g * iv;
        }
    }
}

pub(crate) fn spatial_forward(
    grid: Grid,
    input: &[f64],
    cin: usize,
    weight: &[f64],
    kernel: usize,
    cout: usize,
) -> Vec<f64> {
    let pad = kernel / 2;
    let mut out = vec![0.0; grid.pixels() * cout];
    for f in 0..grid.frames {
        for x in 0..grid.width {
            for y in 0..grid.height {
                let p = grid.pixel(f, x, y);
                let out_px = &mut out[p * cout..(p + 1) * cout];
                for dx in 0..kernel {
                    let sx = Grid::wrap(x, dx, pad, grid.width);
                    for dy in 0..kernel {
                        let sy = Grid::wrap(y, dy, pad, grid.height);
                        let q = grid.pixel(f, sx, sy);
                        let tap = dx * kernel + dy;
                        matvec_acc(
                            out_px,
                            &weight[tap * cout * cin..(tap + 1) * cout * cin],
                            &input[q * cin..(q + 1) * cin],
                        );
                    }
                }
            }
        }
    }
    out
}

/// Gradient with respect to the input of [`spatial_forward`].
pub(crate) fn spatial_backward_input(
    grid: Grid,
    grad_out: &[f64],
    cout: usize,
    weight: &[f64],
    kernel: usize,
    cin: usize,
) -> Vec<f64> {
    let pad = kernel / 2;
    let mut grad_in = vec![0.0; grid.pixels() * cin];
    for f in 0..grid.frames {
        for x in 0..grid.width {
            for y in 0..grid.height {
                let p = grid.pixel(f, x, y);
                let g = &grad_out[p * cout..(p + 1) * cout];
                for dx in 0..kernel {
                    let sx = Grid::wrap(x, dx, pad, grid.width);
                    for dy in 0..kernel {
                        let sy = Grid::wrap(y, dy, pad, grid.height);
                        let q = grid.pixel(f, sx, sy);
                        let tap = dx * kernel + dy;
                        matvec_t_acc(
                            &mut grad_in[q * cin..(q + 1) * cin],
                            &weight[tap * cout * cin..(tap + 1) * cout * cin],
                            g,
                        );
                    }
                }
            }
        }
    }
    grad_in
}

/// Accumulates the weight gradient of [`spatial_forward`] into `weight_grad`.
pub(crate) fn spatial_backward_weight(
    grid: Grid,
    grad_out: &[f64],
    cout: usize,
    input: &[f64],
    cin: usize,
    kernel: usize,
    weight_grad: &mut [f64],
) {
    let pad = kernel / 2;
    for f in 0..grid.frames {
        for x in 0..grid.width {
            for y in 0..grid.height {
                let p = grid.pixel(f, x, y);
                let g = &grad_out[p * cout..(p + 1) * cout];
                for dx in 0..kernel {
                    let sx = Grid::wrap(x, dx, pad, grid.width);
                    for dy in 0..kernel {
                        let sy = Grid::wrap(y, dy, pad, grid.height);
                        let q = grid.pixel(f, sx, sy);
                        let tap = dx * kernel + dy;
                        outer_acc(
                            &mut weight_grad[tap * cout * cin..(tap + 1) * cout * cin],
                            g,
                            &input[q * cin..(q + 1) * cin],
                        );
                    }
                }
            }
        }
    }
}

pub(crate) fn temporal_forward(
    grid: Grid,
    input: &[f64],
    channels: usize,
    weight: &[f64],
    kernel: usize,
) -> Vec<f64> {
    let pad = kernel / 2;
    let block = channels * channels;
    let mut out = vec![0.0; grid.pixels() * channels];
    for f in 0..grid.frames {
        for dt in 0..kernel {
            let Some(sf) = (f + dt).checked_sub(pad).filter(|&s| s < grid.frames) else {
                continue;
            };
            let wt = &weight[dt * block..(dt + 1) * block];
            for x in 0..grid.width {
                for y in 0..grid.height {
                    let p = grid.pixel(f, x, y);
                    let q = grid.pixel(sf, x, y);
                    matvec_acc(
                        &mut out[p * channels..(p + 1) * channels],
                        wt,
                        &input[q * channels..(q + 1) * channels],
                    );
                }
            }
        }
    }
    out
}

pub(crate) fn temporal_backward_input(
    grid: Grid,
    grad_out: &[f64],
    channels: usize,
    weight: &[f64],
    kernel: usize,
) -> Vec<f64> {
    let pad = kernel / 2;
    let block = channels * channels;
    let mut grad_in = vec![0.0; grid.pixels() * channels];
    for f in 0..grid.frames {
        for dt in 0..kernel {
            let Some(sf) = (f + dt).checked_sub(pad).filter(|&s| s < grid.frames) else {
                continue;
            };
            let wt = &weight[dt * block..(dt + 1) * block];
            for x in 0..grid.width {
                for y in 0..grid.height {
                    let p = grid.pixel(f, x, y);
                    let q = grid.pixel(sf, x, y);
                    matvec_t_acc(
                        &mut grad_in[q * channels..(q + 1) * channels],
                        wt,
                        &grad_out[p * channels..(p + 1) * channels],
                    );
                }
            }
        }
    }
    grad_in
}

pub(crate) fn temporal_backward_weight(
    grid: Grid,
    grad_out: &[f64],
    input: &[f64],
    channels: usize,
    kernel: usize,
    weight_grad: &mut [f64],
) {
    let pad = kernel / 2;
    let block = channels * channels;
    for f in 0..grid.frames {
        for dt in 0..kernel {
            let Some(sf) = (f + dt).checked_sub(pad).filter(|&s| s < grid.frames) else {
                continue;
            };
            let wg = &mut weight_grad[dt * block..(dt + 1) * block];
            for x in 0..grid.width {
                for y in 0..grid.height {
                    let p = grid.pixel(f, x, y);
                    let q = grid.pixel(sf, x, y);
                    outer_acc(
                        wg,
                        &grad_out[p * channels..(p + 1) * channels],
                        &input[q * channels..(q + 1) * channels],
                    );
                }
            }
        }
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_is_circular() {
        assert_eq!(Grid::wrap(0, 0, 1, 5), 4);
        assert_eq!(Grid::wrap(4, 2, 1, 5), 0);
        assert_eq!(Grid::wrap(0, 0, 1, 1), 0);
        assert_eq!(Grid::wrap(0, 0, 2, 1), 0);
    }

    #[test]
    fn spatial_adjoint_identity() {
        // <conv(x), g> == <x, convᵀ(g)>
        let grid = Grid {
            frames: 2,
            width: 3,
            height: 4,
        };
        let (cin, cout, k) = (2, 3, 3);
        let x: Vec<f64> = (0..grid.pixels() * cin).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..k * k * cout * cin).map(|i| (i as f64 * 0.11).cos()).collect();
        let g: Vec<f64> = (0..grid.pixels() * cout).map(|i| (i as f64 * 0.23).sin()).collect();
        let y = spatial_forward(grid, &x, cin, &w, k, cout);
        let xt = spatial_backward_input(grid, &g, cout, &w, k, cin);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn temporal_adjoint_identity() {
        let grid = Grid {
            frames: 4,
            width: 2,
            height: 2,
        };
        let (c, k) = (3, 3);
        let x: Vec<f64> = (0..grid.pixels() * c).map(|i| (i as f64 * 0.29).sin()).collect();
        let w: Vec<f64> = (0..k * c * c).map(|i| (i as f64 * 0.7).cos()).collect();
        let g: Vec<f64> = (0..grid.pixels() * c).map(|i| (i as f64 * 0.13).cos()).collect();
        let y = temporal_forward(grid, &x, c, &w, k);
        let xt = temporal_backward_input(grid, &g, c, &w, k);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn silu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
