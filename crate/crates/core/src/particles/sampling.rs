use std::f64::consts::PI;

use crate::mesh::Point;

// Sources of particle `i`: every other particle of its own domain, then `extra`.
fn sources<'a>(own: &'a [Point], extra: &'a [Point], i: usize) -> impl Iterator<Item = &'a Point> {
    own.iter()
        .enumerate()
        .filter(move |(j, _)| *j != i)
        .map(|(_, p)| p)
        .chain(extra)
}

/// `log p(x_i)` for an isotropic Gaussian kernel of width `sigma`, or `None`
/// when particle `i` has nothing to interact with.
pub fn log_kernel_density(own: &[Point], extra: &[Point], i: usize, sigma: f64) -> Option<f64> {
    let m = own.len() - 1 + extra.len();
    if m == 0 {
        return None;
    }
    let x = own[i];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let exps: Vec<f64> = sources(own, extra, i).map(|y| -(x - y).norm_squared() * inv).collect();
    let top = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exps.iter().map(|e| (e - top).exp()).sum();
    let norm = (m as f64).ln() + 1.5 * (2.0 * PI * sigma * sigma).ln();
    Some(top + sum.ln() - norm)
}

/// `p(x_i) = 1/(M' (2 pi sigma^2)^(3/2)) * sum_s exp(-|x_i - y_s|^2 / (2 sigma^2))`
/// over the `M'` interaction sources of particle `i`.
///
/// # Panics
/// If particle `i` has no interaction sources.
pub fn kernel_density(own: &[Point], extra: &[Point], i: usize, sigma: f64) -> f64 {
    log_kernel_density(own, extra, i, sigma)
        .expect("kernel density needs at least one other particle")
        .exp()
}

/// `log p` for every particle of a domain; particles with an empty
/// interaction set contribute 0.
pub fn domain_log_densities(own: &[Point], extra: &[Point], sigma: &[f64]) -> Vec<f64> {
    (0..own.len())
        .map(|i| log_kernel_density(own, extra, i, sigma[i]).unwrap_or(0.0))
        .collect()
}

/// Mean log density over a domain's particles; the negative of its sampling entropy.
pub fn domain_sampling_energy(own: &[Point], extra: &[Point], sigma: &[f64]) -> f64 {
    if own.is_empty() {
        return 0.0;
    }
    domain_log_densities(own, extra, sigma).iter().sum::<f64>() / own.len() as f64
}

/// Gradient of [`domain_sampling_energy`] with respect to each of the domain's
/// own particles, bandwidths held fixed. `extra` sources are constants.
pub fn domain_sampling_gradient(own: &[Point], extra: &[Point], sigma: &[f64]) -> Vec<Point> {
    let m = own.len();
    let mut grad = vec![Point::zeros(); m];
    if m == 0 || m - 1 + extra.len() == 0 {
        return grad;
    }
    let mut w = Vec::with_capacity(m - 1 + extra.len());
    for a in 0..m {
        let x = own[a];
        let s2 = sigma[a] * sigma[a];
        w.clear();
        w.extend(sources(own, extra, a).map(|y| -(x - y).norm_squared() / (2.0 * s2)));
        let top = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for e in w.iter_mut() {
            *e = (*e - top).exp();
            total += *e;
        }
        for (k, y) in sources(own, extra, a).enumerate() {
            let f = (x - y) * (w[k] / (total * s2));
            grad[a] -= f;
            // the other end of the pair, if it belongs to this domain
            let b = if k < a { Some(k) } else if k + 1 < m { Some(k + 1) } else { None };
            if let Some(b) = b {
                grad[b] += f;
            }
        }
    }
    let inv_m = 1.0 / m as f64;
    for g in &mut grad {
        *g *= inv_m;
    }
    grad
}

/// Distance from particle `i` to its `k`-th nearest interaction source
/// (`k` capped at the number of sources), clamped to `[1e-4, diameter]`.
/// A particle with no sources gets `diameter`.
pub fn estimate_sigma(own: &[Point], extra: &[Point], i: usize, k: usize, diameter: f64) -> f64 {
    let x = own[i];
    let mut d: Vec<f64> = sources(own, extra, i).map(|y| (x - y).norm()).collect();
    let upper = diameter.max(1e-4);
    if d.is_empty() {
        return upper;
    }
    let k = k.clamp(1, d.len());
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    kth.clamp(1e-4, upper)
}
