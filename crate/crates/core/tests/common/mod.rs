//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::HashMap;

/// Dense tableau simplex (Bland's rule) for
/// `max Σ v_c q_c  s.t.  Σ w_c q_c ≤ budget, 0 ≤ q_c ≤ 1`.
pub fn lp_box_knapsack(v: &[f64], w: &[f64], budget: f64) -> Vec<f64> {
    let n = v.len();
    let rows = n + 1;
    let cols = 2 * n + 1; // q, then one slack per row
    let mut t = vec![vec![0.0f64; cols + 1]; rows + 1];
    for j in 0..n {
        t[0][j] = w[j];
        t[j + 1][j] = 1.0;
        t[j + 1][n + 1 + j] = 1.0;
        t[j + 1][cols] = 1.0;
        t[rows][j] = -v[j];
    }
    t[0][n] = 1.0;
    t[0][cols] = budget;
    let mut basis: Vec<usize> = (n..cols).collect();

    while let Some(enter) = (0..cols).find(|&j| t[rows][j] < -1e-13) {
        let mut leave: Option<usize> = None;
        for i in 0..rows {
            if t[i][enter] > 1e-13 {
                let ratio = t[i][cols] / t[i][enter];
                leave = match leave {
                    None => Some(i),
                    Some(l) => {
                        let best = t[l][cols] / t[l][enter];
                        if ratio < best - 1e-15 || (ratio <= best + 1e-15 && basis[i] < basis[l]) {
                            Some(i)
                        } else {
                            Some(l)
                        }
                    }
                };
            }
        }
        let l = leave.expect("bounded LP");
        let p = t[l][enter];
        t[l].iter_mut().for_each(|x| *x /= p);
        let pivot_row = t[l].clone();
        for (i, row) in t.iter_mut().enumerate() {
            if i != l && row[enter] != 0.0 {
                let f = row[enter];
                for (x, y) in row.iter_mut().zip(&pivot_row) {
                    *x -= f * y;
                }
            }
        }
        basis[l] = enter;
    }
    let mut q = vec![0.0; n];
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            q[b] = t[i][cols];
        }
    }
    q
}

/// The budgeted query as a linear program over the eligible channels.
pub fn lp_query(m: &[f32], epsilon: f64, rho_ratio: f64) -> Vec<f64> {
    let eligible: Vec<usize> = (0..m.len()).filter(|&c| m[c] > rho_ratio as f32).collect();
    let v: Vec<f64> = eligible.iter().map(|&c| m[c] as f64).collect();
    let w: Vec<f64> = eligible.iter().map(|&c| 1.0 - m[c] as f64).collect();
    let sol = lp_box_knapsack(&v, &w, epsilon);
    let mut q = vec![0.0; m.len()];
    for (&c, x) in eligible.iter().zip(sol) {
        q[c] = x;
    }
    q
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sa: f64 = ra.values().map(|&v| choose2(v)).sum();
    let sb: f64 = rb.values().map(|&v| choose2(v)).sum();
    let expected = sa * sb / choose2(a.len() as f64);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Best spherical partition of a handful of rows by brute force. For a fixed
/// partition the optimal centroids are the normalized member sums, so the
/// objective is `Σ_k ‖Σ_{i∈k} x̂_i‖`.
pub fn exhaustive_spherical(rows: &[Vec<f64>], k: usize) -> (Vec<usize>, f64) {
    let n = rows.len();
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let dim = rows[0].len();
    let mut labels = vec![0usize; n];
    let mut best = (labels.clone(), f64::NEG_INFINITY);
    loop {
        let mut sums = vec![vec![0.0; dim]; k];
        for (i, &l) in labels.iter().enumerate() {
            for (s, v) in sums[l].iter_mut().zip(&unit[i]) {
                *s += v;
            }
        }
        let obj: f64 = sums.iter().map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
        if obj > best.1 + 1e-12 {
            best = (labels.clone(), obj);
        }
        // odometer
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// CIELAB from sRGB with the RGB→XYZ matrix derived from the primaries'
/// chromaticities and the D65 white point, using the κ/ε form of the
/// lightness function.
pub fn lab_from_primaries(rgb: [f64; 3]) -> [f64; 3] {
    let xy = [(0.64, 0.33), (0.30, 0.60), (0.15, 0.06)];
    let white_xy = (0.3127, 0.3290);
    let to_xyz = |(x, y): (f64, f64)| [x / y, 1.0, (1.0 - x - y) / y];
    let p: Vec<[f64; 3]> = xy.iter().map(|&c| to_xyz(c)).collect();
    let white = to_xyz(white_xy);
    // solve P · s = white with P's columns = primaries
    let pm = [
        [p[0][0], p[1][0], p[2][0]],
        [p[0][1], p[1][1], p[2][1]],
        [p[0][2], p[1][2], p[2][2]],
    ];
    let s = solve3(pm, white);
    let lin = rgb.map(|c| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    });
    let xyz: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| pm[i][j] * s[j] * lin[j]).sum());
    let kappa = 24389.0 / 27.0;
    let eps = 216.0 / 24389.0;
    let f = |t: f64| if t > eps { t.cbrt() } else { (kappa * t + 16.0) / 116.0 };
    let [fx, fy, fz] = std::array::from_fn(|i| f(xyz[i] / white[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    std::array::from_fn(|col| {
        let mut m = a;
        for r in 0..3 {
            m[r][col] = b[r];
        }
        det(m) / d
    })
}

pub type Mat = Vec<Vec<f64>>;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let m = b[0].len();
    (0..n)
        .map(|i| (0..m).map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

fn identity(n: usize) -> Mat {
    (0..n)
        .map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect())
        .collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .zip(identity(n))
        .map(|(r, e)| r.iter().copied().chain(e).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        m[col].iter_mut().for_each(|x| *x /= p);
        let prow = m[col].clone();
        for (i, row) in m.iter_mut().enumerate() {
            if i != col {
                let f = row[col];
                row.iter_mut().zip(&prow).for_each(|(x, y)| *x -= f * y);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Principal square root of a matrix with positive spectrum, by the
/// Denman–Beavers iteration.
pub fn sqrtm_db(a: &Mat) -> Mat {
    let n = a.len();
    let mut y = a.clone();
    let mut z = identity(n);
    for _ in 0..100 {
        let yi = invert(&y);
        let zi = invert(&z);
        let ny: Mat = (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect())
            .collect();
        let nz: Mat = (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect())
            .collect();
        let delta: f64 = ny
            .iter()
            .flatten()
            .zip(y.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .sum();
        y = ny;
        z = nz;
        if delta < 1e-14 {
            break;
        }
    }
    y
}

/// `‖μ₁−μ₂‖² + tr Σ₁ + tr Σ₂ − 2 tr (Σ₁Σ₂)^½` via a non-symmetric square root.
pub fn frechet_oracle(mu1: &[f64], s1: &Mat, mu2: &[f64], s2: &Mat) -> f64 {
    let mean: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr = |m: &Mat| (0..m.len()).map(|i| m[i][i]).sum::<f64>();
    let root = sqrtm_db(&matmul(s1, s2));
    mean + tr(s1) + tr(s2) - 2.0 * tr(&root)
}

pub fn fixture(name: &str) -> Vec<u8> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
