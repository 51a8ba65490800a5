//! Regularizers with Bregman proximal maps under the quartic kernel.
//!
//! For separable and norm-shrinkage penalties the stationarity system
//! `t z + tau s = p`, `t = |z|^2 + 1` decouples: Euclidean shrinkage of `p`
//! followed by division by the root of `t^3 - t^2 = |w|^2`. The total
//! variation penalty instead solves a scalar fixed point in `t` wrapping an
//! exact Euclidean TV prox.

use nalgebra::{DMatrix, DVector};

use crate::kernel::{solve_scale_cubic, Kernel};
use crate::{Error, Result};

/// Discrete activity fingerprint of an iterate: which entries, blocks or
/// jumps are live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SupportPattern {
    /// Whole space (zero regularizer).
    Full,
    /// Nonzero coordinate indices.
    Indices(Vec<usize>),
    /// Active block indices.
    Blocks(Vec<usize>),
    /// Nonzero forward-difference positions.
    Jumps(Vec<usize>),
}

impl SupportPattern {
    pub fn len(&self) -> usize {
        match self {
            SupportPattern::Full => 0,
            SupportPattern::Indices(v) | SupportPattern::Blocks(v) | SupportPattern::Jumps(v) => {
                v.len()
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// FNV-1a over the pattern tag and indices; stable across runs and
    /// platforms so traces containing it stay byte-reproducible.
    pub fn fingerprint(&self) -> u64 {
        let (tag, ids): (u64, &[usize]) = match self {
            SupportPattern::Full => (0, &[]),
            SupportPattern::Indices(v) => (1, v),
            SupportPattern::Blocks(v) => (2, v),
            SupportPattern::Jumps(v) => (3, v),
        };
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for b in tag.to_le_bytes() {
            eat(b);
        }
        for &i in ids {
            for b in (i as u64).to_le_bytes() {
                eat(b);
            }
        }
        h
    }
}

/// Magnitude threshold below which an entry counts as zero.
pub fn default_support_eps(x: &DVector<f64>) -> f64 {
    1e-8 * (1.0 + x.amax())
}

/// Convex penalty `G = lambda * R` with a Bregman proximal map under the
/// quartic kernel and an active-manifold descriptor.
#[derive(Debug, Clone)]
pub enum Regularizer {
    Zero,
    L1 { lambda: f64 },
    GroupL1 { lambda: f64, blocks: Vec<Vec<usize>> },
    Tv { lambda: f64 },
}

/// Consecutive aligned blocks of equal size partitioning `0..n`.
pub fn aligned_blocks(n: usize, block_size: usize) -> Result<Vec<Vec<usize>>> {
    if block_size == 0 || n % block_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "block size {block_size} does not partition dimension {n}"
        )));
    }
    Ok((0..n / block_size)
        .map(|b| (b * block_size..(b + 1) * block_size).collect())
        .collect())
}

impl Regularizer {
    pub fn l1(lambda: f64) -> Self {
        assert!(lambda >= 0.0);
        Regularizer::L1 { lambda }
    }

    pub fn tv(lambda: f64) -> Self {
        assert!(lambda >= 0.0);
        Regularizer::Tv { lambda }
    }

    pub fn group_l1(lambda: f64, blocks: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        assert!(lambda >= 0.0);
        let mut seen = vec![false; n];
        for block in &blocks {
            for &i in block {
                if i >= n || seen[i] {
                    return Err(Error::InvalidArgument(
                        "blocks must partition the coordinates without overlap".into(),
                    ));
                }
                seen[i] = true;
            }
        }
        if !seen.iter().all(|s| *s) {
            return Err(Error::InvalidArgument(
                "blocks must cover every coordinate".into(),
            ));
        }
        Ok(Regularizer::GroupL1 { lambda, blocks })
    }

    pub fn lambda(&self) -> f64 {
        match self {
            Regularizer::Zero => 0.0,
            Regularizer::L1 { lambda }
            | Regularizer::GroupL1 { lambda, .. }
            | Regularizer::Tv { lambda } => *lambda,
        }
    }

    /// Locally polyhedral penalties have zero Riemannian curvature along
    /// their active manifold; the group norm does not.
    pub fn is_polyhedral(&self) -> bool {
        !matches!(self, Regularizer::GroupL1 { .. })
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            Regularizer::Zero => 0.0,
            Regularizer::L1 { lambda } => lambda * x.iter().map(|v| v.abs()).sum::<f64>(),
            Regularizer::GroupL1 { lambda, blocks } => {
                lambda
                    * blocks
                        .iter()
                        .map(|b| b.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt())
                        .sum::<f64>()
            }
            Regularizer::Tv { lambda } => {
                lambda
                    * (1..x.len())
                        .map(|i| (x[i] - x[i - 1]).abs())
                        .sum::<f64>()
            }
        }
    }

    /// Bregman proximal map: the unique `z` with
    /// `grad psi(z) + tau * dR(z) ∋ p`, where `tau = gamma * lambda`.
    pub fn dprox(&self, kernel: &Kernel, p: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
        assert!(tau >= 0.0, "prox weight must be nonnegative");
        if tau == 0.0 || matches!(self, Regularizer::Zero) {
            return Ok(kernel.grad_inverse(p));
        }
        assert!(
            kernel.is_quartic(),
            "D-prox formulas are derived for the quartic kernel"
        );
        match self {
            Regularizer::Zero => unreachable!(),
            Regularizer::L1 { .. } => {
                let w = p.map(|v| soft_threshold(v, tau));
                let t = solve_scale_cubic(w.norm_squared())?;
                Ok(w / t)
            }
            Regularizer::GroupL1 { blocks, .. } => {
                let mut w = DVector::zeros(p.len());
                for block in blocks {
                    let norm = block.iter().map(|&i| p[i] * p[i]).sum::<f64>().sqrt();
                    if norm > tau {
                        let shrink = 1.0 - tau / norm;
                        for &i in block {
                            w[i] = shrink * p[i];
                        }
                    }
                }
                let t = solve_scale_cubic(w.norm_squared())?;
                Ok(w / t)
            }
            Regularizer::Tv { .. } => tv_dprox(p, tau),
        }
    }

    /// First-order residual of the D-prox inclusion at `z`; near zero
    /// certifies optimality (exact subdifferential membership for the
    /// shipped penalties).
    pub fn dprox_residual(
        &self,
        kernel: &Kernel,
        p: &DVector<f64>,
        tau: f64,
        z: &DVector<f64>,
    ) -> f64 {
        if tau == 0.0 || matches!(self, Regularizer::Zero) {
            return (kernel.grad(z) - p).norm() / (1.0 + p.norm());
        }
        let t = z.norm_squared() + 1.0;
        let s = (p - z * t) / tau;
        let eps = default_support_eps(z);
        match self {
            Regularizer::Zero => unreachable!(),
            Regularizer::L1 { .. } => {
                let mut res = 0.0_f64;
                for i in 0..z.len() {
                    if z[i].abs() > eps {
                        res = res.max((s[i] - z[i].signum()).abs());
                    } else {
                        res = res.max((s[i].abs() - 1.0).max(0.0));
                    }
                }
                res
            }
            Regularizer::GroupL1 { blocks, .. } => {
                let mut res = 0.0_f64;
                for block in blocks {
                    let znorm = block.iter().map(|&i| z[i] * z[i]).sum::<f64>().sqrt();
                    let snorm = block.iter().map(|&i| s[i] * s[i]).sum::<f64>().sqrt();
                    if znorm > eps {
                        let mismatch = block
                            .iter()
                            .map(|&i| (s[i] - z[i] / znorm).powi(2))
                            .sum::<f64>()
                            .sqrt();
                        res = res.max(mismatch);
                    } else {
                        res = res.max((snorm - 1.0).max(0.0));
                    }
                }
                res
            }
            Regularizer::Tv { .. } => {
                // Recover the dual variable from D^T u = s by cumulative sums.
                let n = z.len();
                let mut res = 0.0_f64;
                let mut u = vec![0.0; n - 1];
                u[0] = -s[0];
                for j in 1..n - 1 {
                    u[j] = u[j - 1] - s[j];
                }
                res = res.max((u[n - 2] - s[n - 1]).abs());
                for i in 0..n - 1 {
                    let jump = z[i + 1] - z[i];
                    if jump.abs() > eps {
                        res = res.max((u[i] - jump.signum()).abs());
                    } else {
                        res = res.max((u[i].abs() - 1.0).max(0.0));
                    }
                }
                res
            }
        }
    }

    /// Discrete activity pattern of `x` at threshold `eps`.
    pub fn support_of(&self, x: &DVector<f64>, eps: f64) -> SupportPattern {
        match self {
            Regularizer::Zero => SupportPattern::Full,
            Regularizer::L1 { .. } => SupportPattern::Indices(
                (0..x.len()).filter(|&i| x[i].abs() > eps).collect(),
            ),
            Regularizer::GroupL1 { blocks, .. } => SupportPattern::Blocks(
                (0..blocks.len())
                    .filter(|&b| {
                        blocks[b]
                            .iter()
                            .map(|&i| x[i] * x[i])
                            .sum::<f64>()
                            .sqrt()
                            > eps
                    })
                    .collect(),
            ),
            Regularizer::Tv { .. } => SupportPattern::Jumps(
                (0..x.len().saturating_sub(1))
                    .filter(|&i| (x[i + 1] - x[i]).abs() > eps)
                    .collect(),
            ),
        }
    }

    /// Orthogonal projector onto the tangent space of the active manifold
    /// at `x`: a coordinate (block) mask for separable penalties, and for
    /// TV the projector onto piecewise-constant vectors over the segments
    /// delimited by the jump set.
    pub fn tangent_projector(&self, x: &DVector<f64>, eps: f64) -> DMatrix<f64> {
        let n = x.len();
        match self.support_of(x, eps) {
            SupportPattern::Full => DMatrix::identity(n, n),
            SupportPattern::Indices(ids) => {
                let mut p = DMatrix::zeros(n, n);
                for i in ids {
                    p[(i, i)] = 1.0;
                }
                p
            }
            SupportPattern::Blocks(active) => {
                let Regularizer::GroupL1 { blocks, .. } = self else {
                    unreachable!()
                };
                let mut p = DMatrix::zeros(n, n);
                for b in active {
                    for &i in &blocks[b] {
                        p[(i, i)] = 1.0;
                    }
                }
                p
            }
            SupportPattern::Jumps(jumps) => {
                // Null space of the non-jump difference rows: constant on
                // each maximal segment, one normalized indicator per segment.
                let mut p = DMatrix::zeros(n, n);
                let mut start = 0usize;
                let mut boundaries: Vec<usize> = jumps.iter().map(|&j| j + 1).collect();
                boundaries.push(n);
                for end in boundaries {
                    let len = (end - start) as f64;
                    for i in start..end {
                        for j in start..end {
                            p[(i, j)] = 1.0 / len;
                        }
                    }
                    start = end;
                }
                p
            }
        }
    }

    /// Nondegeneracy margin at a critical point: how deep `-grad` sits in
    /// the relative interior of `lambda * dR(x)`. Values below 1 certify
    /// strict complementarity; `None` when the penalty has no inactive part
    /// (zero regularizer, or every coordinate active).
    pub fn nd_margin(&self, x: &DVector<f64>, grad: &DVector<f64>, eps: f64) -> Option<f64> {
        let lambda = self.lambda();
        if lambda == 0.0 {
            return None;
        }
        match self {
            Regularizer::Zero => None,
            Regularizer::L1 { .. } => {
                let mut worst: Option<f64> = None;
                for i in 0..x.len() {
                    if x[i].abs() <= eps {
                        let m = grad[i].abs() / lambda;
                        worst = Some(worst.map_or(m, |w: f64| w.max(m)));
                    }
                }
                worst
            }
            Regularizer::GroupL1 { blocks, .. } => {
                let mut worst: Option<f64> = None;
                for block in blocks {
                    let znorm = block.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt();
                    if znorm <= eps {
                        let gnorm = block.iter().map(|&i| grad[i] * grad[i]).sum::<f64>().sqrt();
                        let m = gnorm / lambda;
                        worst = Some(worst.map_or(m, |w: f64| w.max(m)));
                    }
                }
                worst
            }
            Regularizer::Tv { .. } => {
                // -grad = lambda D^T u; walk the cumulative sums and take
                // the largest |u| over non-jump positions.
                let n = x.len();
                if n < 2 {
                    return None;
                }
                let g = grad / -lambda;
                let mut u = vec![0.0; n - 1];
                u[0] = -g[0];
                for j in 1..n - 1 {
                    u[j] = u[j - 1] - g[j];
                }
                let mut worst: Option<f64> = None;
                for i in 0..n - 1 {
                    if (x[i + 1] - x[i]).abs() <= eps {
                        worst = Some(worst.map_or(u[i].abs(), |w: f64| w.max(u[i].abs())));
                    }
                }
                worst
            }
        }
    }

    /// Riemannian curvature correction `gamma * P_T hess(G|_M) P_T` entering
    /// the local linearization. Zero for polyhedral penalties; the group
    /// norm contributes `lambda * (Id - z z^T/|z|^2)/|z|` per active block.
    pub fn local_curvature(&self, x: &DVector<f64>, gamma: f64, eps: f64) -> DMatrix<f64> {
        let n = x.len();
        match self {
            Regularizer::GroupL1 { lambda, blocks } => {
                let mut u = DMatrix::zeros(n, n);
                for block in blocks {
                    let znorm = block.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt();
                    if znorm > eps {
                        for (r, &i) in block.iter().enumerate() {
                            for (c, &j) in block.iter().enumerate() {
                                let kron = if r == c { 1.0 } else { 0.0 };
                                u[(i, j)] = gamma * lambda * (kron - x[i] * x[j] / (znorm * znorm))
                                    / znorm;
                            }
                        }
                    }
                }
                u
            }
            _ => DMatrix::zeros(n, n),
        }
    }
}

fn soft_threshold(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Exact Euclidean 1-D total-variation prox
/// `argmin_z mu |Dz|_1 + |z - w|^2 / 2` by the direct taut-string sweep
/// (single forward pass maintaining the lower and upper string).
pub fn tv_prox_1d(w: &DVector<f64>, mu: f64) -> DVector<f64> {
    let n = w.len();
    if mu <= 0.0 || n <= 1 {
        return w.clone();
    }
    let y = w.as_slice();
    let mut x = vec![0.0_f64; n];
    let lam = mu;

    let mut k = 0usize; // current sample
    let mut k0 = 0usize; // first unresolved sample
    let mut kminus = 0usize; // last sample fixing the lower string
    let mut kplus = 0usize; // last sample fixing the upper string
    let mut vmin = y[0] - lam;
    let mut vmax = y[0] + lam;
    let mut umin = lam;
    let mut umax = -lam;

    loop {
        while k == n - 1 {
            if umin < 0.0 {
                // Lower string breaks: flush a segment at vmin.
                loop {
                    x[k0] = vmin;
                    k0 += 1;
                    if k0 > kminus {
                        break;
                    }
                }
                k = k0;
                kminus = k0;
                vmin = y[k];
                umin = lam;
                umax = y[k] + lam - vmax;
            } else if umax > 0.0 {
                // Upper string breaks: flush a segment at vmax.
                loop {
                    x[k0] = vmax;
                    k0 += 1;
                    if k0 > kplus {
                        break;
                    }
                }
                k = k0;
                kplus = k0;
                vmax = y[k];
                umax = -lam;
                umin = y[k] - lam - vmin;
            } else {
                // Strings meet: the tail is one constant segment.
                let level = vmin + umin / (k - k0 + 1) as f64;
                for xi in x.iter_mut().skip(k0) {
                    *xi = level;
                }
                return DVector::from_vec(x);
            }
        }
        umin += y[k + 1] - vmin;
        umax += y[k + 1] - vmax;
        if umin < -lam {
            // Negative jump confirmed at kminus.
            loop {
                x[k0] = vmin;
                k0 += 1;
                if k0 > kminus {
                    break;
                }
            }
            k = k0;
            kminus = k0;
            kplus = k0;
            vmin = y[k];
            vmax = y[k] + 2.0 * lam;
            umin = lam;
            umax = -lam;
        } else if umax > lam {
            // Positive jump confirmed at kplus.
            loop {
                x[k0] = vmax;
                k0 += 1;
                if k0 > kplus {
                    break;
                }
            }
            k = k0;
            kminus = k0;
            kplus = k0;
            vmin = y[k] - 2.0 * lam;
            vmax = y[k];
            umin = lam;
            umax = -lam;
        } else {
            k += 1;
            if umin >= lam {
                vmin += (umin - lam) / (k - k0 + 1) as f64;
                umin = lam;
                kminus = k;
            }
            if umax <= -lam {
                vmax += (umax + lam) / (k - k0 + 1) as f64;
                umax = -lam;
                kplus = k;
            }
        }
    }
}

/// TV D-prox under the quartic kernel: solves the scalar fixed point
/// `t = |z(t)|^2 + 1` with `z(t) = tv_prox_1d(p/t, tau/t)` by bisection.
fn tv_dprox(p: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
    let t_hi = solve_scale_cubic(p.norm_squared())? + 1.0;
    let eval = |t: f64| -> (f64, DVector<f64>) {
        let z = tv_prox_1d(&(p / t), tau / t);
        (t - z.norm_squared() - 1.0, z)
    };
    let (h_lo, z_lo) = eval(1.0);
    if h_lo >= -1e-12 {
        return Ok(z_lo);
    }
    let (h_hi, _) = eval(t_hi);
    if h_hi < 0.0 {
        // h(t_hi) >= t_hi - |p|^2/t_hi^2 - 1 > 0 by construction.
        return Err(Error::Numerical(format!(
            "TV prox bracket failed: h({t_hi}) = {h_hi}"
        )));
    }
    let mut lo = 1.0;
    let mut hi = t_hi;
    let mut evals: Vec<(f64, f64)> = vec![(1.0, z_lo.norm_squared())];
    let mut best = z_lo;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (h, z) = eval(mid);
        evals.push((mid, z.norm_squared()));
        best = z;
        if h.abs() <= 1e-12 {
            break;
        }
        if h < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    // The scalar reduction relies on |z(t)| being nonincreasing in t;
    // verify on the collected evaluations.
    evals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for pair in evals.windows(2) {
        if pair[1].1 > pair[0].1 + 1e-9 * (1.0 + pair[0].1) {
            return Err(Error::Numerical(
                "TV prox scalar reduction: |z(t)| not monotone in t".into(),
            ));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec(entries: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(entries)
    }

    /// Projected gradient on the dual box QP, independent of the sweep in
    /// `tv_prox_1d`.
    fn tv_prox_dual_oracle(w: &DVector<f64>, mu: f64, iters: usize) -> DVector<f64> {
        let n = w.len();
        if n <= 1 || mu == 0.0 {
            return w.clone();
        }
        let mut u = vec![0.0_f64; n - 1];
        let step = 0.25; // 1 / lambda_max(D D^T), lambda_max <= 4
        for _ in 0..iters {
            // z = w - D^T u
            let mut z = w.clone();
            for i in 0..n - 1 {
                z[i] += u[i];
                z[i + 1] -= u[i];
            }
            for i in 0..n - 1 {
                u[i] = (u[i] + step * (z[i + 1] - z[i])).clamp(-mu, mu);
            }
        }
        let mut z = w.clone();
        for i in 0..n - 1 {
            z[i] += u[i];
            z[i + 1] -= u[i];
        }
        z
    }

    /// KKT residual of the Euclidean TV prox; zero iff `z` is the exact
    /// minimizer.
    fn tv_kkt_residual(w: &DVector<f64>, mu: f64, z: &DVector<f64>) -> f64 {
        let n = w.len();
        let g: Vec<f64> = (0..n).map(|i| (w[i] - z[i]) / mu).collect();
        let mut u = vec![0.0; n - 1];
        u[0] = -g[0];
        for j in 1..n - 1 {
            u[j] = u[j - 1] - g[j];
        }
        let mut res: f64 = (u[n - 2] - g[n - 1]).abs();
        for i in 0..n - 1 {
            let jump = z[i + 1] - z[i];
            if jump.abs() > 1e-10 {
                res = res.max((u[i] - jump.signum()).abs());
            } else {
                res = res.max((u[i].abs() - 1.0).max(0.0));
            }
        }
        res
    }

    #[test]
    fn tv_prox_trivial() {
        let w = vec(&[0.3, -1.0, 2.0]);
        assert_eq!(tv_prox_1d(&w, 0.0), w);
        let c = vec(&[0.7, 0.7, 0.7, 0.7]);
        assert_eq!(tv_prox_1d(&c, 0.5), c);
        // Saturating weight flattens to the mean.
        let w = vec(&[1.0, -2.0, 3.0, 0.5]);
        let z = tv_prox_1d(&w, 100.0);
        let mean = w.sum() / 4.0;
        for zi in z.iter() {
            assert!((zi - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_prox_matches_dual_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = DVector::from_fn(6, |_, _| 2.0 * (rng.random::<f64>() - 0.5));
        let z = tv_prox_1d(&w, 0.4);
        let oracle = tv_prox_dual_oracle(&w, 0.4, 100_000);
        assert!(
            (&z - &oracle).amax() <= 1e-8,
            "sweep {z:?} vs dual oracle {oracle:?}"
        );
    }

    #[test]
    fn tv_prox_kkt_exactness_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for trial in 0..2000 {
            let n = 2 + (trial % 40);
            let w = DVector::from_fn(n, |_, _| 4.0 * (rng.random::<f64>() - 0.5));
            let mu = match trial % 4 {
                0 => 1e-3,
                1 => 0.1,
                2 => 1.0,
                _ => 10.0,
            };
            let z = tv_prox_1d(&w, mu);
            let res = tv_kkt_residual(&w, mu, &z);
            assert!(res <= 1e-9, "KKT residual {res} at n={n}, mu={mu}");
        }
    }

    #[test]
    fn l1_dprox_cases() {
        let reg = Regularizer::l1(1.0);
        let kernel = Kernel::quartic(2);
        assert_eq!(
            reg.dprox(&kernel, &vec(&[0.0, 0.0]), 1.0).unwrap(),
            vec(&[0.0, 0.0])
        );
        // tau = 0 falls back to the kernel inverse; |p| = 2 halves.
        let p = vec(&[2.0, 0.0]);
        assert_eq!(reg.dprox(&kernel, &p, 0.0).unwrap(), vec(&[1.0, 0.0]));
        // soft((3, 0.5), 1) = (2, 0); t^3 - t^2 = 4 gives t = 2.
        let z = reg.dprox(&kernel, &vec(&[3.0, 0.5]), 1.0).unwrap();
        assert!((&z - vec(&[1.0, 0.0])).amax() < 1e-12);
        assert!(reg.dprox_residual(&kernel, &vec(&[3.0, 0.5]), 1.0, &z) <= 1e-10);
    }

    #[test]
    fn l1_dprox_optimality_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let reg = Regularizer::l1(1.0);
        let kernel = Kernel::quartic(5);
        for _ in 0..500 {
            let p = DVector::from_fn(5, |_, _| 6.0 * (rng.random::<f64>() - 0.5));
            let tau = rng.random::<f64>();
            let z = reg.dprox(&kernel, &p, tau).unwrap();
            assert!(
                reg.dprox_residual(&kernel, &p, tau, &z) <= 1e-10,
                "inclusion violated"
            );
        }
    }

    #[test]
    fn group_dprox_cases() {
        let kernel = Kernel::quartic(4);
        let blocks = aligned_blocks(4, 2).unwrap();
        let reg = Regularizer::group_l1(0.7, blocks, 4).unwrap();
        assert_eq!(
            reg.dprox(&kernel, &vec(&[0.0; 4]), 1.0).unwrap(),
            vec(&[0.0; 4])
        );
        // Singleton blocks degenerate to the scalar soft threshold.
        let singleton = aligned_blocks(3, 1).unwrap();
        let g1 = Regularizer::group_l1(1.0, singleton, 3).unwrap();
        let l1 = Regularizer::l1(1.0);
        let k3 = Kernel::quartic(3);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..50 {
            let p = DVector::from_fn(3, |_, _| 5.0 * (rng.random::<f64>() - 0.5));
            let tau = rng.random::<f64>();
            let a = g1.dprox(&k3, &p, tau).unwrap();
            let b = l1.dprox(&k3, &p, tau).unwrap();
            assert!((a - b).amax() < 1e-14);
        }
        // Residual check on the block form.
        for _ in 0..200 {
            let p = DVector::from_fn(4, |_, _| 4.0 * (rng.random::<f64>() - 0.5));
            let z = reg.dprox(&kernel, &p, 0.3).unwrap();
            assert!(reg.dprox_residual(&kernel, &p, 0.3, &z) <= 1e-10);
        }
        assert!(Regularizer::group_l1(1.0, vec![vec![0, 1], vec![1, 2]], 3).is_err());
        assert!(Regularizer::group_l1(1.0, vec![vec![0, 1]], 3).is_err());
    }

    #[test]
    fn tv_dprox_cases() {
        let kernel = Kernel::quartic(4);
        let reg = Regularizer::tv(1.0);
        // Constant p with |p| = 2: inner prox leaves p/t alone, so this is
        // the plain gradient inversion.
        let p = DVector::from_element(4, 1.0);
        let z = reg.dprox(&kernel, &p, 0.5).unwrap();
        assert!((&z - &p / 2.0).amax() < 1e-10);
        assert_eq!(reg.dprox(&kernel, &p, 0.0).unwrap(), kernel.grad_inverse(&p));

        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..300 {
            let p = DVector::from_fn(5, |_, _| 6.0 * (rng.random::<f64>() - 0.5));
            let tau = 0.01 + rng.random::<f64>();
            let k5 = Kernel::quartic(5);
            let z = reg.dprox(&k5, &p, tau).unwrap();
            let res = reg.dprox_residual(&k5, &p, tau, &z);
            assert!(res <= 1e-8, "TV D-prox residual {res}");
        }
    }

    #[test]
    fn firm_nonexpansiveness_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let kernel = Kernel::quartic(6);
        let blocks = aligned_blocks(6, 2).unwrap();
        let regs = vec![
            Regularizer::l1(1.0),
            Regularizer::group_l1(1.0, blocks, 6).unwrap(),
            Regularizer::tv(1.0),
        ];
        for reg in regs {
            for _ in 0..500 {
                let p = DVector::from_fn(6, |_, _| 8.0 * (rng.random::<f64>() - 0.5));
                let q = DVector::from_fn(6, |_, _| 8.0 * (rng.random::<f64>() - 0.5));
                let tau = 0.5;
                let jp = reg.dprox(&kernel, &p, tau).unwrap();
                let jq = reg.dprox(&kernel, &q, tau).unwrap();
                let lhs = (&jp - &jq).dot(&(&p - &q));
                let rhs = (&jp - &jq).norm_squared();
                assert!(lhs >= rhs - 1e-10, "firm nonexpansiveness violated");
            }
        }
    }

    #[test]
    fn support_patterns() {
        let l1 = Regularizer::l1(1.0);
        let x = vec(&[1.0, 0.0, -2.0]);
        assert_eq!(
            l1.support_of(&x, 1e-9),
            SupportPattern::Indices(vec![0, 2])
        );
        assert_eq!(
            l1.support_of(&vec(&[0.0, 0.0]), 1e-9),
            SupportPattern::Indices(vec![])
        );
        let tv = Regularizer::tv(1.0);
        let pc = vec(&[1.0, 1.0, 3.0, 3.0, 0.0]);
        assert_eq!(tv.support_of(&pc, 1e-9), SupportPattern::Jumps(vec![1, 3]));
        // Equal patterns, equal fingerprints; different patterns differ.
        assert_eq!(
            l1.support_of(&x, 1e-9).fingerprint(),
            SupportPattern::Indices(vec![0, 2]).fingerprint()
        );
        assert_ne!(
            SupportPattern::Indices(vec![0, 2]).fingerprint(),
            SupportPattern::Jumps(vec![0, 2]).fingerprint()
        );
    }

    #[test]
    fn tangent_projectors() {
        let l1 = Regularizer::l1(1.0);
        let e1 = vec(&[1.0, 0.0, 0.0]);
        let p = l1.tangent_projector(&e1, 1e-9);
        assert_eq!(p, DMatrix::from_diagonal(&vec(&[1.0, 0.0, 0.0])));

        let tv = Regularizer::tv(1.0);
        let c = DVector::from_element(4, 2.5);
        let p = tv.tangent_projector(&c, 1e-9);
        assert!((p - DMatrix::from_element(4, 4, 0.25)).amax() < 1e-12);

        // Projector identities on a random sparse point.
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut x = DVector::zeros(8);
        for i in [1usize, 4, 6] {
            x[i] = rng.random::<f64>() + 0.5;
        }
        for reg in [Regularizer::l1(1.0), Regularizer::tv(1.0)] {
            let p = reg.tangent_projector(&x, 1e-9);
            assert!(((&p * &p) - &p).amax() < 1e-12, "not idempotent");
            assert!((&p - p.transpose()).amax() < 1e-12, "not symmetric");
            assert!((&p * &x - &x).amax() < 1e-12, "x not fixed");
        }
    }

    #[test]
    fn pattern_stable_under_tiny_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let reg = Regularizer::l1(1.0);
        let kernel = Kernel::quartic(5);
        for _ in 0..100 {
            let p = DVector::from_fn(5, |_, _| 4.0 * (rng.random::<f64>() - 0.5));
            let z = reg.dprox(&kernel, &p, 0.3).unwrap();
            let zp = reg
                .dprox(&kernel, &(&p + DVector::from_element(5, 1e-13)), 0.3)
                .unwrap();
            let eps = default_support_eps(&z);
            assert_eq!(
                reg.support_of(&z, eps).fingerprint(),
                reg.support_of(&zp, eps).fingerprint()
            );
        }
    }

    #[test]
    fn nd_margin_l1() {
        let reg = Regularizer::l1(0.5);
        let x = vec(&[1.0, 0.0, 0.0]);
        let grad = vec(&[-0.5, 0.2, -0.1]);
        // off-support |g|/lambda: max(0.4, 0.2) = 0.4
        let m = reg.nd_margin(&x, &grad, 1e-9).unwrap();
        assert!((m - 0.4).abs() < 1e-12);
    }
}
