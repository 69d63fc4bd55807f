//! Quaternion helpers. Quaternions are `[w, x, y, z]`, Hamilton product,
//! right-handed frames.

use nalgebra::{Matrix3, Vector3};

pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_dot(a: &Quat, b: &Quat) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

pub fn quat_scale(q: &Quat, s: f64) -> Quat {
    [q[0] * s, q[1] * s, q[2] * s, q[3] * s]
}

pub fn quat_add(a: &Quat, b: &Quat) -> Quat {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

/// Returns `None` when the norm is below `1e-12`.
pub fn quat_normalize(q: &Quat) -> Option<Quat> {
    let n = quat_norm(q);
    (n > 1e-12).then(|| quat_scale(q, 1.0 / n))
}

pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn quat_conj(q: &Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

pub fn quat_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Quat {
    let a = axis.normalize();
    let (s, c) = (0.5 * angle).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

/// Rotation angle in radians between two unit quaternions (sign-agnostic).
pub fn quat_angle_between(a: &Quat, b: &Quat) -> f64 {
    let d = quat_dot(a, b).abs().min(1.0);
    2.0 * d.acos()
}

/// Rotation matrix of a unit quaternion. The input is not renormalised.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Shepperd's method; returns the representative with `w >= 0`.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Quat {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let q = quat_normalize(&q).unwrap_or(QUAT_IDENTITY);
    if q[0] < 0.0 {
        quat_scale(&q, -1.0)
    } else {
        q
    }
}

/// Pulls `dL/dR` back onto the quaternion entries of [`quat_to_matrix`]
/// (the unnormalised polynomial form).
pub fn quat_to_matrix_vjp(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    // dR(r,c)/d(w,x,y,z), row-major
    let d: [[f64; 4]; 9] = [
        [0.0, 0.0, -4.0 * y, -4.0 * z],
        [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w],
        [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x],
        [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w],
        [0.0, -4.0 * x, 0.0, -4.0 * z],
        [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y],
        [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
        [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
        [0.0, -4.0 * x, -4.0 * y, 0.0],
    ];
    let mut out = [0.0; 4];
    for (k, dk) in d.iter().enumerate() {
        let gk = g[(k / 3, k % 3)];
        if gk != 0.0 {
            for j in 0..4 {
                out[j] += gk * dk[j];
            }
        }
    }
    out
}

/// Vector-Jacobian product of `q / |q|` at `q`.
pub fn normalize_vjp(q: &Quat, g: &Quat) -> Quat {
    let n = quat_norm(q);
    let u = quat_scale(q, 1.0 / n);
    let d = quat_dot(&u, g);
    [
        (g[0] - u[0] * d) / n,
        (g[1] - u[1] * d) / n,
        (g[2] - u[2] * d) / n,
        (g[3] - u[3] * d) / n,
    ]
}

/// Matrix `L(a)` with `a ⊗ b = L(a) b`.
pub fn quat_left_matrix(a: &Quat) -> [[f64; 4]; 4] {
    let [w, x, y, z] = *a;
    [[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]]
}

/// Matrix `R(b)` with `a ⊗ b = R(b) a`.
pub fn quat_right_matrix(b: &Quat) -> [[f64; 4]; 4] {
    let [w, x, y, z] = *b;
    [[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]]
}

pub fn mat4x4_t_vec(m: &[[f64; 4]; 4], v: &Quat) -> Quat {
    let mut out = [0.0; 4];
    for (r, row) in m.iter().enumerate() {
        for c in 0..4 {
            out[c] += row[c] * v[r];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_matrix_vjp(q: &Quat, g: &Matrix3<f64>) -> Quat {
        let eps = 1e-6;
        let mut out = [0.0; 4];
        for j in 0..4 {
            let mut qp = *q;
            let mut qm = *q;
            qp[j] += eps;
            qm[j] -= eps;
            let fp = quat_to_matrix(&qp).component_mul(g).sum();
            let fm = quat_to_matrix(&qm).component_mul(g).sum();
            out[j] = (fp - fm) / (2.0 * eps);
        }
        out
    }

    #[test]
    fn matrix_vjp_matches_central_differences() {
        let q = quat_normalize(&[0.3, -0.5, 0.7, 0.2]).unwrap();
        let g = Matrix3::new(0.1, -0.4, 0.9, 1.3, 0.2, -0.7, 0.5, 0.6, -1.1);
        let a = quat_to_matrix_vjp(&q, &g);
        let f = fd_matrix_vjp(&q, &g);
        for j in 0..4 {
            assert!((a[j] - f[j]).abs() < 1e-7, "{a:?} vs {f:?}");
        }
    }

    #[test]
    fn hamilton_product_matches_matrix_composition() {
        let a = quat_normalize(&[0.9, 0.1, -0.3, 0.2]).unwrap();
        let b = quat_normalize(&[0.2, 0.8, 0.1, -0.4]).unwrap();
        let lhs = quat_to_matrix(&quat_mul(&a, &b));
        let rhs = quat_to_matrix(&a) * quat_to_matrix(&b);
        assert!((lhs - rhs).abs().max() < 1e-12);
        let l = quat_left_matrix(&a);
        let r = quat_right_matrix(&b);
        let ab = quat_mul(&a, &b);
        for i in 0..4 {
            let via_l: f64 = (0..4).map(|j| l[i][j] * b[j]).sum();
            let via_r: f64 = (0..4).map(|j| r[i][j] * a[j]).sum();
            assert!((via_l - ab[i]).abs() < 1e-12);
            assert!((via_r - ab[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_quat_roundtrip() {
        for q in [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.5, 0.5, -0.5, 0.5],
        ] {
            let back = matrix_to_quat(&quat_to_matrix(&q));
            assert!(quat_angle_between(&q, &back) < 1e-7);
        }
    }
}
