//! Axis-angle rotations (Rodrigues) on row-major 3x3 matrices, with their
//! vector-Jacobian products.

pub type Mat3 = [f64; 9];
pub type Vec3 = [f64; 3];

pub const IDENTITY: Mat3 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

/// Below this angle `sin(θ)/θ` and `(1 - cos θ)/θ²` switch to their series.
pub const SMALL_ANGLE: f64 = 1e-7;
/// Below this angle the derivative coefficients switch to their series; the
/// closed forms lose digits to cancellation well before `SMALL_ANGLE`.
const SMALL_ANGLE_DERIV: f64 = 1e-2;

/// Coefficients of `R = I + a[w]x + b[w]x^2` and of their derivatives divided by θ.
#[derive(Clone, Copy, Debug)]
struct Coeffs {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

fn coeffs(theta_sq: f64) -> Coeffs {
    let theta = theta_sq.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        let half = 0.5 * theta;
        let sinc_half = half.sin() / half;
        (theta.sin() / theta, 0.5 * sinc_half * sinc_half)
    };
    let (c, d) = if theta < SMALL_ANGLE_DERIV {
        let t4 = theta_sq * theta_sq;
        (
            -1.0 / 3.0 + theta_sq / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + theta_sq / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, co) = theta.sin_cos();
        let half_sin = (0.5 * theta).sin();
        let one_minus_cos = 2.0 * half_sin * half_sin;
        let t3 = theta_sq * theta;
        ((theta * co - s) / t3, (theta * s - 2.0 * one_minus_cos) / (t3 * theta))
    };
    Coeffs { a, b, c, d }
}

#[inline]
pub fn skew(w: &Vec3) -> Mat3 {
    [0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0]
}

#[inline]
pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
        }
    }
    out
}

#[inline]
pub fn mat_vec(r: &Mat3, v: &Vec3) -> Vec3 {
    [
        r[0] * v[0] + r[1] * v[1] + r[2] * v[2],
        r[3] * v[0] + r[4] * v[1] + r[5] * v[2],
        r[6] * v[0] + r[7] * v[1] + r[8] * v[2],
    ]
}

#[inline]
pub fn mat_t_vec(r: &Mat3, v: &Vec3) -> Vec3 {
    [
        r[0] * v[0] + r[3] * v[1] + r[6] * v[2],
        r[1] * v[0] + r[4] * v[1] + r[7] * v[2],
        r[2] * v[0] + r[5] * v[1] + r[8] * v[2],
    ]
}

pub fn transpose(r: &Mat3) -> Mat3 {
    [r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]]
}

/// Rotation matrix for the axis-angle vector `w` (angle = |w|).
pub fn rodrigues(w: &Vec3) -> Mat3 {
    let theta_sq = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let k = coeffs(theta_sq);
    let s = skew(w);
    let s2 = mat_mul(&s, &s);
    let mut r = IDENTITY;
    for i in 0..9 {
        r[i] += k.a * s[i] + k.b * s2[i];
    }
    r
}

/// Gradient of `<g, rodrigues(w)>` with respect to `w`.
pub fn rodrigues_vjp(w: &Vec3, g: &Mat3) -> Vec3 {
    let theta_sq = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let k = coeffs(theta_sq);
    let s = skew(w);
    let s2 = mat_mul(&s, &s);
    let dot = |a: &Mat3, b: &Mat3| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let g_s = dot(g, &s);
    let g_s2 = dot(g, &s2);
    let mut out = [0.0; 3];
    for (axis, slot) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[axis] = 1.0;
        let ke = skew(&e);
        let sym_a = mat_mul(&ke, &s);
        let sym_b = mat_mul(&s, &ke);
        let mut sym = [0.0; 9];
        for i in 0..9 {
            sym[i] = sym_a[i] + sym_b[i];
        }
        *slot = k.a * dot(g, &ke) + k.b * dot(g, &sym) + w[axis] * (k.c * g_s + k.d * g_s2);
    }
    out
}

/// Axis-angle vector of a rotation matrix (inverse of [`rodrigues`] for angles < π).
pub fn log(r: &Mat3) -> Vec3 {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::new(
        r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8],
    ));
    let v = rot.scaled_axis();
    [v.x, v.y, v.z]
}

/// Rotation angle of `r` in radians.
pub fn angle(r: &Mat3) -> f64 {
    let tr = r[0] + r[4] + r[8];
    ((tr - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_vjp(w: &Vec3, g: &Mat3, h: f64) -> Vec3 {
        let mut out = [0.0; 3];
        for k in 0..3 {
            let mut wp = *w;
            let mut wm = *w;
            wp[k] += h;
            wm[k] -= h;
            let rp = rodrigues(&wp);
            let rm = rodrigues(&wm);
            out[k] = (0..9).map(|i| g[i] * (rp[i] - rm[i])).sum::<f64>() / (2.0 * h);
        }
        out
    }

    #[test]
    fn matches_nalgebra_rotation() {
        let w = [0.3, -1.2, 0.7];
        let r = rodrigues(&w);
        let reference = nalgebra::Rotation3::from_scaled_axis(nalgebra::Vector3::new(w[0], w[1], w[2]));
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[3 * i + j] - reference[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_vector_is_identity() {
        assert_eq!(rodrigues(&[0.0; 3]), IDENTITY);
    }

    #[test]
    fn vjp_matches_finite_differences_across_angle_regimes() {
        let g = [0.3, -0.1, 0.8, 1.1, -0.7, 0.2, 0.05, 0.9, -0.4];
        for scale in [1e-9, 1e-6, 1e-4, 1e-2, 0.5, 2.5] {
            let w = [0.6 * scale, -0.3 * scale, 0.74 * scale];
            let a = rodrigues_vjp(&w, &g);
            let b = fd_vjp(&w, &g, 1e-6);
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-8, "scale {scale}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn log_inverts_rodrigues() {
        let w = [0.2, 0.4, -0.9];
        let back = log(&rodrigues(&w));
        for k in 0..3 {
            assert!((back[k] - w[k]).abs() < 1e-12);
        }
    }
}
