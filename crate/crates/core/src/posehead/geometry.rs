//! Small fixed-size rotation helpers.

use crate::scalar::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

pub fn identity<T: Scalar>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn mat_mul<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut c = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn mat_vec<T: Scalar>(a: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose<T: Scalar>(a: &Mat3<T>) -> Mat3<T> {
    let mut t = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn skew<T: Scalar>(v: &Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    [[z, -v[2], v[1]], [v[2], z, -v[0]], [-v[1], v[0], z]]
}

pub fn cross<T: Scalar>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm<T: Scalar>(v: &Vec3<T>) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn add<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>, sb: T) -> Mat3<T> {
    let mut c = *a;
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] += sb * b[i][j];
        }
    }
    c
}

/// Rotation by `angle` about the unit vector `axis`.
pub fn axis_rotation<T: Scalar>(axis: &Vec3<T>, angle: T) -> Mat3<T> {
    let k = skew(axis);
    let k2 = mat_mul(&k, &k);
    add(&add(&identity(), &k, angle.sin()), &k2, T::one() - angle.cos())
}

/// Derivative of [`axis_rotation`] with respect to the angle.
pub fn axis_rotation_derivative<T: Scalar>(axis: &Vec3<T>, angle: T) -> Mat3<T> {
    let k = skew(axis);
    let k2 = mat_mul(&k, &k);
    let mut d = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d[i][j] = angle.cos() * k[i][j] + angle.sin() * k2[i][j];
        }
    }
    d
}

fn small_angle<T: Scalar>() -> T {
    T::lit(1e-6)
}

/// Axis-angle vector to rotation matrix.
pub fn rodrigues<T: Scalar>(v: &Vec3<T>) -> Mat3<T> {
    let theta = norm(v);
    if theta < small_angle() {
        let k = skew(v);
        let k2 = mat_mul(&k, &k);
        return add(&add(&identity(), &k, T::one()), &k2, T::half());
    }
    let axis = [v[0] / theta, v[1] / theta, v[2] / theta];
    axis_rotation(&axis, theta)
}

/// `dR/dv_i` for each component of the axis-angle vector:
/// `(v_i [v]x + [v x ((I - R) e_i)]x) R / |v|^2`, with `[e_i]x` near zero.
pub fn rodrigues_jacobian<T: Scalar>(v: &Vec3<T>) -> [Mat3<T>; 3] {
    let theta = norm(v);
    let z = T::zero();
    let basis = |i: usize| -> Vec3<T> {
        let mut e = [z; 3];
        e[i] = T::one();
        e
    };
    if theta < small_angle() {
        return [skew(&basis(0)), skew(&basis(1)), skew(&basis(2))];
    }
    let r = rodrigues(v);
    let vx = skew(v);
    let theta2 = theta * theta;
    let mut out = [[[z; 3]; 3]; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let e = basis(i);
        let re = mat_vec(&r, &e);
        let ime = [e[0] - re[0], e[1] - re[1], e[2] - re[2]];
        let w = cross(v, &ime);
        let mut m = skew(&w);
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] = (m[a][b] + v[i] * vx[a][b]) / theta2;
            }
        }
        *slot = mat_mul(&m, &r);
    }
    out
}

/// Inverse of [`rodrigues`]: rotation matrix to an axis-angle vector with
/// angle in `[0, pi]`.
pub fn rotation_log(r: &Mat3<f64>) -> Vec3<f64> {
    let cos = ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let vee = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if angle < 1e-7 {
        return [vee[0] / 2.0, vee[1] / 2.0, vee[2] / 2.0];
    }
    if std::f64::consts::PI - angle < 1e-4 {
        // R + I = 2 a a^T near a half turn; take its largest column.
        let cols: Vec<Vec3<f64>> = (0..3).map(|j| [r[0][j], r[1][j], r[2][j]]).collect();
        let mut best = [0.0; 3];
        let mut best_norm = -1.0;
        for (j, c) in cols.iter().enumerate() {
            let mut v = *c;
            v[j] += 1.0;
            let n = norm(&v);
            if n > best_norm {
                best_norm = n;
                best = v;
            }
        }
        let mut axis = [best[0] / best_norm, best[1] / best_norm, best[2] / best_norm];
        // Resolve the sign with the antisymmetric part when it is informative.
        let dot = axis[0] * vee[0] + axis[1] * vee[1] + axis[2] * vee[2];
        if dot < 0.0 {
            axis = [-axis[0], -axis[1], -axis[2]];
        }
        return [axis[0] * angle, axis[1] * angle, axis[2] * angle];
    }
    let k = angle / (2.0 * angle.sin());
    [vee[0] * k, vee[1] * k, vee[2] * k]
}
