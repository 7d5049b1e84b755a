//! Lasso (coordinate descent) and linear epsilon-SVR (dual coordinate
//! descent). Both standardize inputs internally and report coefficients in
//! the caller's input space.

/// `y = intercept + weights . x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

struct Standardized {
    z: Vec<Vec<f64>>,
    mean: Vec<f64>,
    /// Zero marks a constant column, which is left out of the fit.
    scale: Vec<f64>,
}

fn standardize(x: &[Vec<f64>]) -> Standardized {
    let n = x.len() as f64;
    let d = x.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for row in x {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut sd = vec![0.0; d];
    for row in x {
        for j in 0..d {
            sd[j] += (row[j] - mean[j]).powi(2) / n;
        }
    }
    let scale: Vec<f64> = sd
        .iter()
        .map(|&v| if v.sqrt() > 1e-12 { v.sqrt() } else { 0.0 })
        .collect();
    let z = x
        .iter()
        .map(|row| {
            (0..d)
                .map(|j| if scale[j] > 0.0 { (row[j] - mean[j]) / scale[j] } else { 0.0 })
                .collect()
        })
        .collect();
    Standardized { z, mean, scale }
}

fn unstandardize(s: &Standardized, w: &[f64], intercept: f64) -> LinearFit {
    let weights: Vec<f64> = w
        .iter()
        .zip(&s.scale)
        .map(|(w, &sc)| if sc > 0.0 { w / sc } else { 0.0 })
        .collect();
    let shift: f64 = weights.iter().zip(&s.mean).map(|(w, m)| w * m).sum();
    LinearFit {
        weights,
        intercept: intercept - shift,
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Minimizes `(1/2n) |y - b - Zw|^2 + alpha |w|_1` over standardized `Z`.
pub fn lasso(x: &[Vec<f64>], y: &[f64], alpha: f64, max_epochs: usize, tol: f64) -> LinearFit {
    let n = y.len();
    let s = standardize(x);
    let d = s.mean.len();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut r: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut w = vec![0.0; d];
    // Column norms are 1 after standardization, except dropped columns.
    for _ in 0..max_epochs {
        let mut max_delta: f64 = 0.0;
        let mut max_w: f64 = 0.0;
        for j in 0..d {
            if s.scale[j] == 0.0 {
                continue;
            }
            let rho = s.z.iter().zip(&r).map(|(row, ri)| row[j] * ri).sum::<f64>() / n as f64 + w[j];
            let new = soft_threshold(rho, alpha);
            let delta = new - w[j];
            if delta != 0.0 {
                for (row, ri) in s.z.iter().zip(r.iter_mut()) {
                    *ri -= row[j] * delta;
                }
                w[j] = new;
            }
            max_delta = max_delta.max(delta.abs());
            max_w = max_w.max(new.abs());
        }
        if max_delta <= tol * max_w.max(1.0) {
            break;
        }
    }
    unstandardize(&s, &w, y_mean)
}

/// Linear SVR with the epsilon-insensitive L1 loss,
/// `min 1/2 |w|^2 + C sum max(0, |y - w.z - b| - eps)`, solved in the dual.
/// Targets are centred first; the bias is a regularized constant column.
pub fn linear_svr(x: &[Vec<f64>], y: &[f64], c: f64, epsilon: f64, max_epochs: usize, tol: f64) -> LinearFit {
    let n = y.len();
    let s = standardize(x);
    let d = s.mean.len();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    // Augmented weight: d feature weights then the bias weight.
    let mut w = vec![0.0; d + 1];
    let mut beta = vec![0.0; n];
    let q: Vec<f64> = s.z.iter().map(|row| row.iter().map(|v| v * v).sum::<f64>() + 1.0).collect();
    for _ in 0..max_epochs {
        let mut max_violation: f64 = 0.0;
        for i in 0..n {
            let row = &s.z[i];
            let g = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d] - yc[i];
            let gp = g + epsilon;
            let gn = g - epsilon;
            let qi = q[i];
            let b = beta[i];
            // Projected-gradient violation of the optimality conditions.
            let violation = if b == 0.0 {
                if gp < 0.0 {
                    -gp
                } else if gn > 0.0 {
                    gn
                } else {
                    0.0
                }
            } else if b >= c {
                if gp < 0.0 { -gp } else { 0.0 }
            } else if b <= -c {
                if gn > 0.0 { gn } else { 0.0 }
            } else if b > 0.0 {
                gp.abs()
            } else {
                gn.abs()
            };
            max_violation = max_violation.max(violation);
            let step = if gp < qi * b {
                -gp / qi
            } else if gn > qi * b {
                -gn / qi
            } else {
                -b
            };
            let new = (b + step).clamp(-c, c);
            let delta = new - b;
            if delta != 0.0 {
                for (wj, zj) in w.iter_mut().zip(row) {
                    *wj += delta * zj;
                }
                w[d] += delta;
                beta[i] = new;
            }
        }
        if max_violation < tol {
            break;
        }
    }
    unstandardize(&s, &w[..d], y_mean + w[d])
}
