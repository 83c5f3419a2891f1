//! Image quality metrics and the photometric training loss.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) with zero padding and the
//! usual constants `C1 = 0.01²`, `C2 = 0.03²`, averaged over every pixel and
//! channel.

use crate::error::{Error, Result};
use crate::img::Image;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable "same" Gaussian filter with zero padding on one channel plane.
fn blur(src: &[f64], width: usize, height: usize, win: &[f64; WINDOW], tmp: &mut Vec<f64>, out: &mut Vec<f64>) {
    let half = (WINDOW / 2) as isize;
    tmp.clear();
    tmp.resize(width * height, 0.0);
    out.clear();
    out.resize(width * height, 0.0);
    // Valid taps for output index i along an axis of length len.
    let taps = |i: usize, len: usize| {
        let lo = (half - i as isize).max(0) as usize;
        let hi = (len as isize - i as isize + half).min(WINDOW as isize) as usize;
        (lo, hi)
    };
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let (lo, hi) = taps(x, width);
            let base = x + lo - half as usize;
            let mut acc = 0.0;
            for (wk, v) in win[lo..hi].iter().zip(&row[base..]) {
                acc += wk * v;
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut acc = vec![0.0; width];
    for y in 0..height {
        let (lo, hi) = taps(y, height);
        acc.iter_mut().for_each(|a| *a = 0.0);
        for k in lo..hi {
            let wk = win[k];
            let yy = y + k - half as usize;
            for (a, v) in acc.iter_mut().zip(&tmp[yy * width..(yy + 1) * width]) {
                *a += wk * v;
            }
        }
        out[y * width..(y + 1) * width].copy_from_slice(&acc);
    }
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

/// Mean SSIM and, if requested, its gradient w.r.t. `x`.
pub fn ssim_with_grad(x: &Image, y: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_shapes(x, y)?;
    let (w, h) = (x.width, x.height);
    let n = w * h;
    let win = window();
    let norm = 1.0 / (3 * n) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    let mut tmp = Vec::new();
    let (mut mu_x, mut mu_y, mut e_xx, mut e_yy, mut e_xy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ch in 0..3 {
        let xc = channel(x, ch);
        let yc = channel(y, ch);
        let xx: Vec<f64> = xc.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = yc.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xc.iter().zip(&yc).map(|(a, b)| a * b).collect();
        blur(&xc, w, h, &win, &mut tmp, &mut mu_x);
        blur(&yc, w, h, &win, &mut tmp, &mut mu_y);
        blur(&xx, w, h, &win, &mut tmp, &mut e_xx);
        blur(&yy, w, h, &win, &mut tmp, &mut e_yy);
        blur(&xy, w, h, &win, &mut tmp, &mut e_xy);

        let mut d_mu = vec![0.0; if want_grad { n } else { 0 }];
        let mut d_exx = d_mu.clone();
        let mut d_exy = d_mu.clone();
        for p in 0..n {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let sxx = e_xx[p] - mx * mx;
            let syy = e_yy[p] - my * my;
            let sxy = e_xy[p] - mx * my;
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = sxx + syy + C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                d_mu[p] = norm * s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2);
                d_exx[p] = -norm * s / b2;
                d_exy[p] = norm * 2.0 * s / a2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let mut b_mu = Vec::new();
            let mut b_exx = Vec::new();
            let mut b_exy = Vec::new();
            blur(&d_mu, w, h, &win, &mut tmp, &mut b_mu);
            blur(&d_exx, w, h, &win, &mut tmp, &mut b_exx);
            blur(&d_exy, w, h, &win, &mut tmp, &mut b_exy);
            for p in 0..n {
                g.data[p * 3 + ch] = b_mu[p] + 2.0 * xc[p] * b_exx[p] + yc[p] * b_exy[p];
            }
        }
    }
    Ok((total * norm, grad))
}

pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    Ok(ssim_with_grad(x, y, false)?.0)
}

pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    check_shapes(x, y)?;
    let sum: f64 = x.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.data.len() as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; `f64::INFINITY` when identical.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    let m = mse(x, y)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Training loss `(1 - lambda) * L1 + lambda * (1 - SSIM)` with its gradient
/// w.r.t. the rendered image. The L1 subgradient at zero is zero.
pub fn photometric_loss(render: &Image, target: &Image, lambda_dssim: f64) -> Result<(f64, Image)> {
    check_shapes(render, target)?;
    let count = render.data.len() as f64;
    let mut grad = Image::new(render.width, render.height);
    let mut l1 = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&render.data).zip(&target.data) {
        let d = r - t;
        l1 += d.abs();
        *g = (1.0 - lambda_dssim) * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / count;
    }
    l1 /= count;
    if lambda_dssim == 0.0 {
        return Ok(((1.0 - lambda_dssim) * l1, grad));
    }
    let (s, sg) = ssim_with_grad(render, target, true)?;
    let sg = sg.expect("gradient requested");
    for (g, d) in grad.data.iter_mut().zip(&sg.data) {
        *g -= lambda_dssim * d;
    }
    Ok(((1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - s), grad))
}
