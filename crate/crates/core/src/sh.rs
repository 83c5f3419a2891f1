//! Real spherical harmonics up to degree 3 (the basis used by common splat viewers).

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Number of coefficients per color channel for `degree`.
pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Converts an RGB value to the DC coefficient producing it.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / SH_C0
}

pub fn dc_to_rgb(dc: f64) -> f64 {
    dc * SH_C0 + 0.5
}

/// Basis values for `dir` (assumed unit) and, optionally, their gradients
/// w.r.t. the unnormalized components `(x, y, z)`.
pub fn basis(degree: usize, dir: &Vector3<f64>, out: &mut [f64], grad: Option<&mut [Vector3<f64>]>) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let n = coeff_count(degree);
    out[0] = SH_C0;
    let mut g_local = [Vector3::zeros(); 16];
    if degree >= 1 {
        out[1] = -SH_C1 * y;
        out[2] = SH_C1 * z;
        out[3] = -SH_C1 * x;
        g_local[1] = Vector3::new(0.0, -SH_C1, 0.0);
        g_local[2] = Vector3::new(0.0, 0.0, SH_C1);
        g_local[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = SH_C2[0] * x * y;
        out[5] = SH_C2[1] * y * z;
        out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        out[7] = SH_C2[3] * x * z;
        out[8] = SH_C2[4] * (xx - yy);
        g_local[4] = SH_C2[0] * Vector3::new(y, x, 0.0);
        g_local[5] = SH_C2[1] * Vector3::new(0.0, z, y);
        g_local[6] = SH_C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
        g_local[7] = SH_C2[3] * Vector3::new(z, 0.0, x);
        g_local[8] = SH_C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[9] = SH_C3[0] * y * (3.0 * xx - yy);
        out[10] = SH_C3[1] * x * y * z;
        out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        out[14] = SH_C3[5] * z * (xx - yy);
        out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        g_local[9] = SH_C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
        g_local[10] = SH_C3[1] * Vector3::new(y * z, x * z, x * y);
        g_local[11] = SH_C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
        g_local[12] = SH_C3[3] * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
        g_local[13] = SH_C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
        g_local[14] = SH_C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
        g_local[15] = SH_C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
    }
    if let Some(g) = grad {
        g[..n].copy_from_slice(&g_local[..n]);
    }
}

/// View-dependent color before clamping: `sum_k coeff[k] * Y_k(dir) + 0.5`.
/// `coeffs` is laid out coefficient-major with three channels per coefficient.
pub fn eval_color(degree: usize, coeffs: &[f64], dir: &Vector3<f64>) -> [f64; 3] {
    let mut y = [0.0; 16];
    basis(degree, dir, &mut y, None);
    let mut rgb = [0.5; 3];
    for k in 0..coeff_count(degree) {
        for ch in 0..3 {
            rgb[ch] += coeffs[k * 3 + ch] * y[k];
        }
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dc_round_trip() {
        for v in [0.0, 0.25, 0.9] {
            assert_relative_eq!(dc_to_rgb(rgb_to_dc(v)), v, epsilon = 1e-15);
        }
    }

    #[test]
    fn basis_gradients_match_finite_differences() {
        let dir = Vector3::new(0.3, -0.5, 0.7);
        let mut g = [Vector3::zeros(); 16];
        let mut v = [0.0; 16];
        basis(3, &dir, &mut v, Some(&mut g));
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = dir;
            let mut m = dir;
            p[axis] += h;
            m[axis] -= h;
            let mut vp = [0.0; 16];
            let mut vm = [0.0; 16];
            basis(3, &p, &mut vp, None);
            basis(3, &m, &mut vm, None);
            for k in 0..16 {
                let fd = (vp[k] - vm[k]) / (2.0 * h);
                assert_relative_eq!(g[k][axis], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn degree_zero_is_constant() {
        let coeffs = [rgb_to_dc(0.2), rgb_to_dc(0.4), rgb_to_dc(0.6)];
        let c = eval_color(0, &coeffs, &Vector3::new(0.0, 1.0, 0.0));
        assert_relative_eq!(c[0], 0.2, epsilon = 1e-15);
        assert_relative_eq!(c[2], 0.6, epsilon = 1e-15);
    }
}
