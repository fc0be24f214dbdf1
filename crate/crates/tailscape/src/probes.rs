//! Loss-geometry diagnostics: Hessian-vector products by central
//! differences, dominant-eigenvalue power iteration, Hutchinson trace
//! estimation with Rademacher probes, filter-normalized 2-D landscape
//! grids, class-vs-batch gradient similarity, and the convergence-floor
//! experiment on a noisy strongly convex quadratic.
//!
//! The Hessian probes are generic over a gradient closure so quadratic
//! oracles can exercise them directly; thin wrappers bind them to a
//! network and batch.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::net::Network;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

// ── Hessian-vector products ─────────────────────────────────────────────────

/// Hessian-vector product by central differences of the gradient:
/// `(grad(theta + h v_hat) - grad(theta - h v_hat)) / (2h) * ||v||` with
/// `h = 1e-4 (1 + ||theta||)`. Exact on quadratics up to rounding.
pub fn hvp_with<G>(grad_fn: G, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if v.len() != theta.len() {
        return Err(Error::DimensionMismatch { expected: theta.len(), got: v.len() });
    }
    let v_norm = norm(v);
    if v_norm == 0.0 {
        return Err(Error::InvalidProbe("zero direction".into()));
    }
    let h = 1e-4 * (1.0 + norm(theta));
    let up: Vec<f64> =
        theta.iter().zip(v).map(|(&t, &vi)| t + h * (vi / v_norm)).collect();
    let down: Vec<f64> =
        theta.iter().zip(v).map(|(&t, &vi)| t - h * (vi / v_norm)).collect();
    let g_up = grad_fn(&up)?;
    let g_down = grad_fn(&down)?;
    Ok(g_up
        .iter()
        .zip(&g_down)
        .map(|(&a, &b)| (a - b) / (2.0 * h) * v_norm)
        .collect())
}

/// Net-bound [`hvp_with`] on the batch's mean cross-entropy.
pub fn hvp(net: &Network, theta: &[f64], batch: &[&Sample], v: &[f64]) -> Result<Vec<f64>> {
    hvp_with(|p| net.loss_and_grad(p, batch, None).map(|(_, g)| g), theta, v)
}

/// Dominant-magnitude Hessian eigenvalue by power iteration on [`hvp_with`],
/// reported as the Rayleigh quotient at convergence
/// (`|delta| < 1e-6` relative) or after `iters` iterations.
pub fn lambda_max_with<G>(grad_fn: G, theta: &[f64], iters: usize, seed: u64) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if iters == 0 {
        return Err(Error::InvalidProbe("power iteration needs iters >= 1".into()));
    }
    let d = theta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = norm(&v);
    for x in &mut v {
        *x /= n;
    }
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = hvp_with(&grad_fn, theta, &v)?;
        let w_norm = norm(&w);
        let next = dot(&v, &w);
        if w_norm < 1e-12 {
            // Effectively zero curvature along every probed direction.
            return Ok(0.0);
        }
        let converged = (next - lambda).abs() <= 1e-6 * next.abs().max(1.0);
        lambda = next;
        if converged {
            break;
        }
        for (vi, &wi) in v.iter_mut().zip(&w) {
            *vi = wi / w_norm;
        }
    }
    Ok(lambda)
}

/// Net-bound [`lambda_max_with`].
pub fn lambda_max(
    net: &Network,
    theta: &[f64],
    batch: &[&Sample],
    iters: usize,
    seed: u64,
) -> Result<f64> {
    lambda_max_with(|p| net.loss_and_grad(p, batch, None).map(|(_, g)| g), theta, iters, seed)
}

/// Hutchinson trace estimate: mean of `<v, H v>` over `probes_n` seeded
/// Rademacher draws.
pub fn hessian_trace_with<G>(grad_fn: G, theta: &[f64], probes_n: usize, seed: u64) -> Result<f64>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if probes_n == 0 {
        return Err(Error::InvalidProbe("trace estimation needs probes_n >= 1".into()));
    }
    let d = theta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..probes_n {
        let v: Vec<f64> =
            (0..d).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        let w = hvp_with(&grad_fn, theta, &v)?;
        acc += dot(&v, &w);
    }
    Ok(acc / probes_n as f64)
}

/// Net-bound [`hessian_trace_with`].
pub fn hessian_trace(
    net: &Network,
    theta: &[f64],
    batch: &[&Sample],
    probes_n: usize,
    seed: u64,
) -> Result<f64> {
    hessian_trace_with(
        |p| net.loss_and_grad(p, batch, None).map(|(_, g)| g),
        theta,
        probes_n,
        seed,
    )
}

// ── Loss landscape ──────────────────────────────────────────────────────────

/// 2-D loss grid around a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    /// `values[i][j]` is the loss at offset `(coords[i], coords[j])` along
    /// the two directions.
    pub values: Vec<Vec<f64>>,
    pub coords: Vec<f64>,
    pub span: f64,
    pub resolution: usize,
}

impl LandscapeGrid {
    pub fn center(&self) -> f64 {
        let c = self.resolution / 2;
        self.values[c][c]
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 3 {
        return Err(Error::InvalidProbe(format!(
            "landscape resolution must be >= 3, got {resolution}"
        )));
    }
    if resolution % 2 == 0 {
        return Err(Error::InvalidProbe(format!(
            "landscape resolution must be odd so the grid has an exact center, got {resolution}"
        )));
    }
    Ok(())
}

/// Evaluate the grid with caller-provided directions. The center cell
/// evaluates `loss_fn(theta)` directly (no zero offsets are added).
pub fn landscape_grid_with_directions<L>(
    loss_fn: L,
    theta: &[f64],
    dir_a: &[f64],
    dir_b: &[f64],
    resolution: usize,
    span: f64,
) -> Result<LandscapeGrid>
where
    L: Fn(&[f64]) -> Result<f64>,
{
    check_resolution(resolution)?;
    if dir_a.len() != theta.len() || dir_b.len() != theta.len() {
        return Err(Error::DimensionMismatch { expected: theta.len(), got: dir_a.len() });
    }
    if !(span.is_finite() && span > 0.0) {
        return Err(Error::InvalidProbe("span must be positive".into()));
    }
    let n = resolution;
    let coords: Vec<f64> =
        (0..n).map(|i| span * (2.0 * i as f64 / (n - 1) as f64 - 1.0)).collect();
    let center = n / 2;
    let mut values = vec![vec![0.0; n]; n];
    let mut point = vec![0.0; theta.len()];
    for i in 0..n {
        for j in 0..n {
            if i == center && j == center {
                values[i][j] = loss_fn(theta)?;
                continue;
            }
            let (a, b) = (coords[i], coords[j]);
            for (k, p) in point.iter_mut().enumerate() {
                *p = theta[k] + a * dir_a[k] + b * dir_b[k];
            }
            values[i][j] = loss_fn(&point)?;
        }
    }
    Ok(LandscapeGrid { values, coords, span, resolution })
}

/// Seeded random directions, filter-normalized per parameter block (each
/// layer's weights and biases are rescaled to the matching block norm of
/// `theta`).
pub fn filter_normalized_directions(
    net: &Network,
    theta: &[f64],
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |stream: u64| -> Vec<f64> {
        rng.set_stream(stream);
        let mut dir: Vec<f64> =
            (0..theta.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for block in net.param_blocks() {
            let theta_norm = norm(&theta[block.clone()]);
            let dir_norm = norm(&dir[block.clone()]);
            let scale = if dir_norm > 0.0 { theta_norm / dir_norm } else { 0.0 };
            for x in &mut dir[block] {
                *x *= scale;
            }
        }
        dir
    };
    (draw(1), draw(2))
}

/// Net-bound landscape grid with filter-normalized random directions.
pub fn landscape_grid(
    net: &Network,
    theta: &[f64],
    batch: &[&Sample],
    resolution: usize,
    span: f64,
    seed: u64,
) -> Result<LandscapeGrid> {
    let (da, db) = filter_normalized_directions(net, theta, seed);
    landscape_grid_with_directions(
        |p| net.loss(p, batch),
        theta,
        &da,
        &db,
        resolution,
        span,
    )
}

// ── Gradient similarity ─────────────────────────────────────────────────────

/// Cosine similarity between each class's mean gradient and the whole-batch
/// gradient; 0 when either norm is below 1e-12. The per-class-to-batch
/// reconstruction identity is re-verified internally.
pub fn gradient_similarity(
    net: &Network,
    theta: &[f64],
    batch: &[&Sample],
) -> Result<BTreeMap<usize, f64>> {
    let (_, batch_grad) = net.loss_and_grad(theta, batch, None)?;
    let per_class = net.per_class_grads(theta, batch)?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in batch {
        *counts.entry(s.label).or_insert(0) += 1;
    }
    // Reconstruction identity underlies every similarity value.
    let mut recon = vec![0.0; batch_grad.len()];
    for (class, grad) in &per_class {
        let w = counts[class] as f64 / batch.len() as f64;
        for (r, &g) in recon.iter_mut().zip(grad) {
            *r += w * g;
        }
    }
    let err: f64 =
        recon.iter().zip(&batch_grad).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if err > 1e-9 * (1.0 + norm(&batch_grad)) {
        return Err(Error::NumericalAbort(format!(
            "per-class gradient reconstruction identity violated: residual {err:e}"
        )));
    }
    let batch_norm = norm(&batch_grad);
    let mut sims = BTreeMap::new();
    for (class, grad) in &per_class {
        let class_norm = norm(grad);
        let sim = if batch_norm < 1e-12 || class_norm < 1e-12 {
            0.0
        } else {
            dot(grad, &batch_grad) / (class_norm * batch_norm)
        };
        sims.insert(*class, sim);
    }
    Ok(sims)
}

// ── Convergence floor ───────────────────────────────────────────────────────

/// Noisy strongly convex quadratic used by the floor experiment. The data
/// term has Hessian `diag(hessian_diag)` and the preservation term
/// `lambda * diag(fisher_diag)`, both anchored at the origin, mixed with a
/// fixed `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFloorSpec {
    pub hessian_diag: Vec<f64>,
    pub fisher_diag: Vec<f64>,
    pub alpha: f64,
    pub lambda: f64,
    pub noise_std: f64,
}

impl QuadraticFloorSpec {
    /// Modestly conditioned default problem.
    pub fn well_conditioned(dim: usize, noise_std: f64) -> Self {
        let hessian_diag = (0..dim)
            .map(|i| 0.5 + 1.5 * i as f64 / (dim.max(2) - 1) as f64)
            .collect();
        Self {
            hessian_diag,
            fisher_diag: vec![1.0; dim],
            alpha: 0.75,
            lambda: 0.5,
            noise_std,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hessian_diag.is_empty() {
            return Err(Error::InvalidProbe("empty quadratic".into()));
        }
        if self.hessian_diag.iter().any(|&h| !(h.is_finite() && h > 0.0)) {
            return Err(Error::InvalidProbe(
                "quadratic must be positive definite (all Hessian entries > 0)".into(),
            ));
        }
        if self.fisher_diag.len() != self.hessian_diag.len()
            || self.fisher_diag.iter().any(|&f| !(f.is_finite() && f >= 0.0))
        {
            return Err(Error::InvalidProbe("fisher diagonal must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.lambda >= 0.0) || !(self.noise_std >= 0.0)
        {
            return Err(Error::InvalidProbe("bad alpha / lambda / noise".into()));
        }
        Ok(())
    }

    /// Total objective `alpha/2 theta' A theta + (1-alpha) lambda/2 theta' F theta`.
    pub fn objective(&self, theta: &[f64]) -> f64 {
        let data: f64 =
            theta.iter().zip(&self.hessian_diag).map(|(&t, &h)| 0.5 * h * t * t).sum();
        let pen: f64 =
            theta.iter().zip(&self.fisher_diag).map(|(&t, &f)| 0.5 * self.lambda * f * t * t).sum();
        self.alpha * data + (1.0 - self.alpha) * pen
    }
}

/// Run the sharpness + preservation update on the noisy quadratic and
/// return the mean final optimality gap over `seeds`.
///
/// Each step draws gradient noise, perturbs the parameters by `rho` along
/// the noisy gradient direction, and descends the mixed objective with
/// learning rate `eta`. The optimum value is zero, so the gap is the final
/// objective itself.
pub fn convergence_floor(
    spec: &QuadraticFloorSpec,
    eta: f64,
    rho: f64,
    steps: usize,
    seeds: &[u64],
) -> Result<f64> {
    spec.validate()?;
    if !(eta.is_finite() && eta > 0.0) || !(rho.is_finite() && rho >= 0.0) {
        return Err(Error::InvalidProbe("eta must be > 0 and rho >= 0".into()));
    }
    if steps == 0 || seeds.is_empty() {
        return Err(Error::InvalidProbe("need steps >= 1 and at least one seed".into()));
    }
    let d = spec.hessian_diag.len();
    let mut total_gap = 0.0;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![1.0; d];
        let mut noise = vec![0.0; d];
        let mut noisy_grad = vec![0.0; d];
        for _ in 0..steps {
            for n in &mut noise {
                *n = spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
            for i in 0..d {
                noisy_grad[i] = spec.hessian_diag[i] * theta[i] + noise[i];
            }
            let g_norm = norm(&noisy_grad);
            // Perturbed evaluation point: ||eps|| = rho along the noisy
            // gradient direction (skipped if the gradient vanishes).
            let scale = if rho > 0.0 && g_norm > 1e-12 { rho / g_norm } else { 0.0 };
            for i in 0..d {
                let perturbed = theta[i] + scale * noisy_grad[i];
                let data_grad = spec.hessian_diag[i] * perturbed + noise[i];
                let pen_grad = spec.lambda * spec.fisher_diag[i] * theta[i];
                let step_grad = spec.alpha * data_grad + (1.0 - spec.alpha) * pen_grad;
                theta[i] -= eta * step_grad;
            }
        }
        total_gap += spec.objective(&theta);
    }
    Ok(total_gap / seeds.len() as f64)
}
