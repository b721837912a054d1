//! Gauss-Hermite rules for expectations under a univariate Gaussian.

use std::sync::OnceLock;

/// Number of nodes used for every activation expectation.
pub const GH_NODES: usize = 20;

/// Nodes and weights for `int exp(-x^2) f(x) dx`, computed once by Newton
/// iteration on the Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Standard-normal rule: `E[f(z)] ~= sum_i w_i f(z_i)` for `z ~ N(0, 1)`.
pub fn standard_normal_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let (x, w) = gauss_hermite(GH_NODES);
        let s2 = std::f64::consts::SQRT_2;
        let norm = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = x.iter().zip(&w).map(|(x, w)| (x * s2, w / norm)).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.into_iter().unzip()
    })
}

/// `E[f(a)]` for `a ~ N(mean, var)`.
pub fn expect<F: FnMut(f64) -> f64>(mean: f64, var: f64, mut f: F) -> f64 {
    let (z, w) = standard_normal_rule();
    let sd = var.max(0.0).sqrt();
    z.iter().zip(w).map(|(z, w)| w * f(mean + sd * z)).sum()
}
