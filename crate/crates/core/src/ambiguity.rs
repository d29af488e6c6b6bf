//! Within-group ambiguity: per-group radii, latent-ball projection, the inner
//! maximization over the latent ball, and exact oracles used to validate the
//! surrogate at small scale.
//!
//! Latent balls use the Euclidean norm. The inter-group radius is infinite,
//! so the group weights range over the whole simplex.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, HdroError, Result};
use crate::linalg;
use crate::model::ModelParams;

/// Default latent step multiplier: `eta_z = 10 * eps_g`.
pub const DEFAULT_ETA_Z_FACTOR: f64 = 10.0;

/// Sup-oracle grids use `eps / GRID_DIVISIONS` as their step.
pub const GRID_DIVISIONS: i64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityConfig {
    /// Global scale `eps`.
    pub epsilon: f64,
    /// `eps_g = eps / sqrt(n_g)`.
    pub per_group_radius: Vec<f64>,
    pub inner_steps: usize,
    /// Fixed latent step; `None` means `10 * eps_g` per group.
    pub eta_z: Option<f64>,
}

impl AmbiguityConfig {
    /// Inter-group radius. Group weights are unconstrained on the simplex.
    pub const RHO: f64 = f64::INFINITY;

    pub fn new(epsilon: f64, group_sizes: &[usize]) -> Result<Self> {
        let per_group_radius = group_sizes
            .iter()
            .map(|&n| radius(epsilon, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            epsilon,
            per_group_radius,
            inner_steps: 1,
            eta_z: None,
        })
    }

    pub fn with_inner_steps(mut self, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(HdroError::param("inner_steps", "must be at least 1"));
        }
        self.inner_steps = steps;
        Ok(self)
    }

    pub fn with_eta_z(mut self, eta_z: Option<f64>) -> Result<Self> {
        if let Some(eta) = eta_z {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(HdroError::param("eta_z", format!("must be positive, got {eta}")));
            }
        }
        self.eta_z = eta_z;
        Ok(self)
    }

    /// Same radii scaled to zero (the plain group DRO ambiguity set).
    pub fn without_perturbation(&self) -> Self {
        Self {
            epsilon: 0.0,
            per_group_radius: vec![0.0; self.per_group_radius.len()],
            inner_steps: self.inner_steps,
            eta_z: self.eta_z,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.per_group_radius.len()
    }

    pub fn radius_of(&self, group: usize) -> f64 {
        self.per_group_radius[group]
    }

    pub fn eta_z_for(&self, group: usize) -> f64 {
        self.eta_z
            .unwrap_or(DEFAULT_ETA_Z_FACTOR * self.per_group_radius[group])
    }
}

/// `eps / sqrt(n_g)`.
pub fn radius(epsilon: f64, group_size: usize) -> Result<f64> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(HdroError::param("epsilon", format!("must be >= 0, got {epsilon}")));
    }
    if group_size == 0 {
        return Err(HdroError::param("n_g", "group size must be positive"));
    }
    Ok(epsilon / (group_size as f64).sqrt())
}

/// Euclidean projection of `z_prime` onto the ball of radius `eps` around `center`.
pub fn project_ball(z_prime: &[f64], center: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps >= 0.0) {
        return Err(HdroError::param("eps", format!("must be >= 0, got {eps}")));
    }
    check_len("projection center", z_prime.len(), center.len())?;
    let diff = linalg::sub(z_prime, center);
    let dist = linalg::norm(&diff);
    if dist <= eps {
        return Ok(z_prime.to_vec());
    }
    let scale = eps / dist;
    Ok(center.iter().zip(&diff).map(|(c, d)| c + scale * d).collect())
}

/// Projected gradient ascent on the last-layer loss inside the ball
/// `||z' - z|| <= eps_g`, starting from `z`.
///
/// With `steps = 1` this is exactly the single ascent step. For more steps the
/// best iterate is returned, so the loss never drops below `loss(z)`.
pub fn inner_maximize(
    theta: &ModelParams,
    z: &[f64],
    y: usize,
    eps_g: f64,
    steps: usize,
    eta_z: f64,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(HdroError::param("steps", "must be at least 1"));
    }
    if !(eps_g >= 0.0) {
        return Err(HdroError::param("eps_g", format!("must be >= 0, got {eps_g}")));
    }
    check_len("latent", theta.latent_dim(), z.len())?;
    if eps_g == 0.0 {
        return Ok(z.to_vec());
    }
    if !(eta_z > 0.0) {
        return Err(HdroError::param("eta_z", format!("must be positive, got {eta_z}")));
    }
    let mut current = z.to_vec();
    if steps == 1 {
        let g = theta.grad_wrt_latent(&current, y)?;
        linalg::axpy(eta_z, &g, &mut current);
        return project_ball(&current, z, eps_g);
    }
    let mut best = current.clone();
    let mut best_loss = theta.loss_at_latent(z, y)?;
    for _ in 0..steps {
        let g = theta.grad_wrt_latent(&current, y)?;
        linalg::axpy(eta_z, &g, &mut current);
        current = project_ball(&current, z, eps_g)?;
        let loss = theta.loss_at_latent(&current, y)?;
        if loss >= best_loss {
            best_loss = loss;
            best.clone_from(&current);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallSup {
    pub value: f64,
    pub argmax: Vec<f64>,
}

const SPHERE_ASCENT_ITERS: usize = 5000;
const RANDOM_STARTS: usize = 8;

/// Supremum of the last-layer loss over the closed ball of radius `eps`
/// around `z`, by multi-start ascent on the sphere.
///
/// The loss is convex in the latent, so the supremum sits on the sphere, and
/// the update `u <- grad / ||grad||` (the linearization maximizer) never
/// decreases it. Starts: the gradient at `z`, the signed coordinate axes and
/// a few seeded random directions.
pub fn ball_supremum(theta: &ModelParams, z: &[f64], y: usize, eps: f64) -> Result<BallSup> {
    if !(eps >= 0.0) {
        return Err(HdroError::param("eps", format!("must be >= 0, got {eps}")));
    }
    let base = theta.loss_at_latent(z, y)?;
    let mut best = BallSup {
        value: base,
        argmax: z.to_vec(),
    };
    if eps == 0.0 {
        return Ok(best);
    }
    let dim = z.len();
    let mut starts = Vec::new();
    let g0 = theta.grad_wrt_latent(z, y)?;
    if linalg::norm(&g0) > 0.0 {
        starts.push(g0);
    }
    for i in 0..dim.min(16) {
        for sign in [1.0, -1.0] {
            let mut e = vec![0.0; dim];
            e[i] = sign;
            starts.push(e);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..RANDOM_STARTS {
        starts.push((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    for start in starts {
        let candidate = sphere_ascent(theta, z, y, eps, &start)?;
        if candidate.value > best.value {
            best = candidate;
        }
    }
    Ok(best)
}

fn point_on_sphere(z: &[f64], eps: f64, u: &[f64]) -> Vec<f64> {
    z.iter().zip(u).map(|(a, b)| a + eps * b).collect()
}

fn sphere_ascent(theta: &ModelParams, z: &[f64], y: usize, eps: f64, start: &[f64]) -> Result<BallSup> {
    let n0 = linalg::norm(start);
    let mut u: Vec<f64> = start.iter().map(|v| v / n0).collect();
    let mut point = point_on_sphere(z, eps, &u);
    let mut value = theta.loss_at_latent(&point, y)?;
    for _ in 0..SPHERE_ASCENT_ITERS {
        let g = theta.grad_wrt_latent(&point, y)?;
        let gn = linalg::norm(&g);
        if gn == 0.0 {
            break;
        }
        let next_u: Vec<f64> = g.iter().map(|v| v / gn).collect();
        let next_point = point_on_sphere(z, eps, &next_u);
        let next_value = theta.loss_at_latent(&next_point, y)?;
        if next_value < value {
            break;
        }
        let moved = linalg::distance(&next_u, &u);
        u = next_u;
        point = next_point;
        value = next_value;
        if moved < 1e-14 {
            break;
        }
    }
    Ok(BallSup { value, argmax: point })
}

/// Closed-form ball supremum for a two-class last layer:
/// `softplus(s + eps * ||w_other - w_y||)` with `s = logit_other - logit_y`.
pub fn binary_robust_loss(theta: &ModelParams, z: &[f64], y: usize, eps: f64) -> Result<BallSup> {
    if theta.num_classes() != 2 {
        return Err(HdroError::UnsupportedDiagnostic(format!(
            "closed-form robust loss needs 2 classes, model has {}",
            theta.num_classes()
        )));
    }
    if y > 1 {
        return Err(HdroError::param("label", format!("{y} >= 2")));
    }
    let logits = theta.logits_at(z)?;
    let other = 1 - y;
    let d = linalg::sub(theta.output.row(other), theta.output.row(y));
    let dn = linalg::norm(&d);
    let s = logits[other] - logits[y];
    let argmax = if dn > 0.0 {
        z.iter().zip(&d).map(|(a, b)| a + eps * b / dn).collect()
    } else {
        z.to_vec()
    };
    Ok(BallSup {
        value: linalg::softplus(s + eps * dn),
        argmax,
    })
}

/// Brute-force supremum over the circle of radius `eps` around a 2-D latent:
/// a 7200-point angular grid, then golden-section refinement of the best
/// bracket.
pub fn ball_max_brute_force_2d(theta: &ModelParams, z: &[f64], y: usize, eps: f64) -> Result<BallSup> {
    if z.len() != 2 {
        return Err(HdroError::UnsupportedInstance(format!(
            "angular brute force needs a 2-D latent, got {}",
            z.len()
        )));
    }
    const GRID: usize = 7200;
    let at = |phi: f64| -> Result<(f64, Vec<f64>)> {
        let p = vec![z[0] + eps * phi.cos(), z[1] + eps * phi.sin()];
        Ok((theta.loss_at_latent(&p, y)?, p))
    };
    let step = 2.0 * std::f64::consts::PI / GRID as f64;
    let mut best_k = 0;
    let mut best_v = f64::NEG_INFINITY;
    for k in 0..GRID {
        let v = at(k as f64 * step)?.0;
        if v > best_v {
            best_v = v;
            best_k = k;
        }
    }
    let (mut a, mut b) = ((best_k as f64 - 1.0) * step, (best_k as f64 + 1.0) * step);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - ratio * (b - a);
        let d = a + ratio * (b - a);
        if at(c)?.0 >= at(d)?.0 {
            b = d;
        } else {
            a = c;
        }
    }
    let (value, argmax) = at(0.5 * (a + b))?;
    let base = theta.loss_at_latent(z, y)?;
    if base > value {
        return Ok(BallSup {
            value: base,
            argmax: z.to_vec(),
        });
    }
    Ok(BallSup { value, argmax })
}

/// `|sup_ball loss - (loss(z) + eps * ||grad_z loss||)|`, the remainder of the
/// first-order expansion of the ball supremum (the Euclidean norm is self-dual).
pub fn taylor_gap(theta: &ModelParams, z: &[f64], y: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(HdroError::param("eps", format!("must be positive, got {eps}")));
    }
    let sup = ball_supremum(theta, z, y, eps)?.value;
    let base = theta.loss_at_latent(z, y)?;
    let g = theta.grad_wrt_latent(z, y)?;
    Ok((sup - (base + eps * linalg::norm(&g))).abs())
}

/// Finite latent distribution with labels, used by the small-scale oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    atoms: Vec<Atom>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub z: Vec<f64>,
    pub label: usize,
    pub mass: f64,
}

impl DiscreteDist {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(HdroError::param("atoms", "distribution needs at least one atom"));
        }
        let dim = atoms[0].z.len();
        for a in &atoms {
            check_len("atom latent", dim, a.z.len())?;
            if !(a.mass > 0.0) || !a.z.iter().all(|v| v.is_finite()) {
                return Err(HdroError::param("atoms", "masses must be positive and latents finite"));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.mass).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(HdroError::param("atoms", format!("masses sum to {total}, not 1")));
        }
        Ok(Self { atoms })
    }

    /// Empirical measure with mass `1/N` on each point.
    pub fn uniform(points: Vec<(Vec<f64>, usize)>) -> Result<Self> {
        let n = points.len() as f64;
        Self::new(
            points
                .into_iter()
                .map(|(z, label)| Atom {
                    z,
                    label,
                    mass: 1.0 / n,
                })
                .collect(),
        )
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].z.len()
    }

    fn is_equal_mass(&self) -> bool {
        let target = 1.0 / self.len() as f64;
        self.atoms.iter().all(|a| (a.mass - target).abs() <= 1e-12)
    }

    pub fn expected_loss(&self, theta: &ModelParams) -> Result<f64> {
        self.atoms
            .iter()
            .map(|a| theta.loss_at_latent(&a.z, a.label).map(|l| a.mass * l))
            .sum()
    }
}

/// Largest support handled by the bottleneck oracle.
pub const MAX_ORACLE_SUPPORT: usize = 8;

/// Semantic transport cost: latent distance when labels agree, infinite otherwise.
pub fn semantic_cost(a: &Atom, b: &Atom) -> f64 {
    if a.label == b.label {
        linalg::distance(&a.z, &b.z)
    } else {
        f64::INFINITY
    }
}

/// Exact `W_inf(P, Q)` for equal-mass empirical measures of the same support
/// size: the bottleneck value of the best perfect matching under the semantic
/// cost. Binary search over the sorted distinct costs, with augmenting-path
/// bipartite matching as the feasibility test.
pub fn w_infty_exact(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    let n = p.len();
    if n != q.len() {
        return Err(HdroError::UnsupportedInstance(format!(
            "support sizes differ ({n} vs {})",
            q.len()
        )));
    }
    if n > MAX_ORACLE_SUPPORT {
        return Err(HdroError::UnsupportedInstance(format!(
            "support size {n} exceeds {MAX_ORACLE_SUPPORT}"
        )));
    }
    if !p.is_equal_mass() || !q.is_equal_mass() {
        return Err(HdroError::UnsupportedInstance("masses are not uniform".into()));
    }
    check_len("atom latent", p.dim(), q.dim())?;
    let cost: Vec<Vec<f64>> = p
        .atoms()
        .iter()
        .map(|a| q.atoms().iter().map(|b| semantic_cost(a, b)).collect())
        .collect();
    let mut levels: Vec<f64> = cost.iter().flatten().copied().filter(|c| c.is_finite()).collect();
    levels.sort_by(|a, b| a.total_cmp(b));
    levels.dedup();
    let feasible = |threshold: f64| has_perfect_matching(&cost, threshold);
    match levels.last() {
        None => return Ok(f64::INFINITY),
        Some(&top) if !feasible(top) => return Ok(f64::INFINITY),
        _ => {}
    }
    let (mut lo, mut hi) = (0usize, levels.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(levels[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(levels[lo])
}

fn has_perfect_matching(cost: &[Vec<f64>], threshold: f64) -> bool {
    let n = cost.len();
    let mut match_of_right: Vec<Option<usize>> = vec![None; n];
    fn augment(
        left: usize,
        cost: &[Vec<f64>],
        threshold: f64,
        seen: &mut [bool],
        match_of_right: &mut [Option<usize>],
    ) -> bool {
        for right in 0..cost.len() {
            if cost[left][right] <= threshold && !seen[right] {
                seen[right] = true;
                let free = match match_of_right[right] {
                    None => true,
                    Some(other) => augment(other, cost, threshold, seen, match_of_right),
                };
                if free {
                    match_of_right[right] = Some(left);
                    return true;
                }
            }
        }
        false
    }
    (0..n).all(|left| {
        let mut seen = vec![false; n];
        augment(left, cost, threshold, &mut seen, &mut match_of_right)
    })
}

/// Pointwise versus distributional robust risk at oracle scale.
#[derive(Debug, Clone, Serialize)]
pub struct RiskCheck {
    /// `E_P[sup_{||z'-z|| <= eps} loss(z')]`.
    pub pointwise: f64,
    /// `max E_Q[loss]` over grid-displaced `Q` with `W_inf(Q, P) <= eps`.
    pub distributional: f64,
    pub grid_step: f64,
    /// `W_inf` between the maximizing `Q` and `P`, from the bottleneck oracle.
    pub maximizer_distance: f64,
}

impl RiskCheck {
    pub fn discrepancy(&self) -> f64 {
        (self.pointwise - self.distributional).abs()
    }
}

pub const MAX_RISK_CHECK_SUPPORT: usize = 6;

/// Checks that the worst-case risk over the `W_inf` ball equals the expected
/// pointwise ball supremum.
///
/// The pointwise side uses [`ball_supremum`]. The distributional side searches
/// over measures `Q` whose atoms are displaced on a grid of step `eps / 100`
/// inside their balls (plus a ring on each sphere), by coordinate ascent on the full expectation `E_Q`,
/// and confirms `W_inf(Q, P) <= eps` with [`w_infty_exact`].
pub fn robust_risk_check(p: &DiscreteDist, theta: &ModelParams, eps: f64) -> Result<RiskCheck> {
    if p.len() > MAX_RISK_CHECK_SUPPORT || p.dim() > 2 {
        return Err(HdroError::UnsupportedInstance(format!(
            "risk check needs support <= {MAX_RISK_CHECK_SUPPORT} and latent dim <= 2, got {} and {}",
            p.len(),
            p.dim()
        )));
    }
    if !p.is_equal_mass() {
        return Err(HdroError::UnsupportedInstance("masses are not uniform".into()));
    }
    if !(eps >= 0.0) {
        return Err(HdroError::param("eps", format!("must be >= 0, got {eps}")));
    }
    let pointwise: f64 = p
        .atoms()
        .iter()
        .map(|a| ball_supremum(theta, &a.z, a.label, eps).map(|s| a.mass * s.value))
        .sum::<Result<f64>>()?;
    if eps == 0.0 {
        return Ok(RiskCheck {
            pointwise,
            distributional: p.expected_loss(theta)?,
            grid_step: 0.0,
            maximizer_distance: 0.0,
        });
    }
    let step = eps / GRID_DIVISIONS as f64;
    let offsets = ball_grid(p.dim(), step);
    let mut q = p.clone();
    let mut best = q.expected_loss(theta)?;
    for _sweep in 0..3 {
        let mut improved = false;
        for i in 0..q.len() {
            let origin = p.atoms()[i].z.clone();
            let mut best_z = q.atoms[i].z.clone();
            for off in &offsets {
                let candidate: Vec<f64> = origin.iter().zip(off).map(|(a, b)| a + b).collect();
                q.atoms[i].z = candidate;
                let value = q.expected_loss(theta)?;
                if value > best {
                    best = value;
                    best_z.clone_from(&q.atoms[i].z);
                    improved = true;
                }
            }
            q.atoms[i].z = best_z;
        }
        if !improved {
            break;
        }
    }
    let maximizer_distance = w_infty_exact(&q, p)?;
    Ok(RiskCheck {
        pointwise,
        distributional: best,
        grid_step: step,
        maximizer_distance,
    })
}

/// Integer lattice offsets of spacing `step` inside the radius-`100 * step`
/// ball; in 2-D also a ring of points on the sphere itself, where the maximum
/// lives and where the lattice alone falls short by up to half a step.
fn ball_grid(dim: usize, step: f64) -> Vec<Vec<f64>> {
    let r = GRID_DIVISIONS;
    let mut out = Vec::new();
    match dim {
        1 => {
            for i in -r..=r {
                out.push(vec![i as f64 * step]);
            }
        }
        2 => {
            for i in -r..=r {
                for j in -r..=r {
                    if i * i + j * j <= r * r {
                        out.push(vec![i as f64 * step, j as f64 * step]);
                    }
                }
            }
            let radius = r as f64 * step;
            let ring = 8 * r;
            for k in 0..ring {
                let phi = std::f64::consts::TAU * k as f64 / ring as f64;
                out.push(vec![radius * phi.cos(), radius * phi.sin()]);
            }
        }
        _ => unreachable!("grid oracle is limited to 1-D and 2-D latents"),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_model(w0: [f64; 2], w1: [f64; 2], b: [f64; 2]) -> ModelParams {
        let mut m = ModelParams::linear_zeros(2, 2);
        m.output.weights = vec![w0[0], w0[1], w1[0], w1[1]];
        m.output.bias = b.to_vec();
        m
    }

    #[test]
    fn radius_formula() {
        assert_eq!(radius(1.0, 4).unwrap(), 0.5);
        for n in [1, 7, 1000] {
            assert_eq!(radius(0.0, n).unwrap(), 0.0);
        }
        assert!(radius(1.0, 0).is_err());
        assert!(radius(-1.0, 3).is_err());
        let n_min = 1200usize;
        let eps = 96.0 / 255.0 * (n_min as f64).sqrt();
        assert!((radius(eps, n_min).unwrap() - 96.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn radii_shrink_with_group_size() {
        let cfg = AmbiguityConfig::new(2.0, &[400, 100, 25, 1600]).unwrap();
        assert_eq!(cfg.per_group_radius, vec![0.1, 0.2, 0.4, 0.05]);
        assert_eq!(cfg.eta_z_for(2), 4.0);
        assert!(AmbiguityConfig::new(0.0, &[3, 5])
            .unwrap()
            .per_group_radius
            .iter()
            .all(|&r| r == 0.0));
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_ball(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), vec![1.0, 2.0]);
        let p = project_ball(&[3.0, 4.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert!(project_ball(&[1.0], &[0.0], -0.1).is_err());
    }

    #[test]
    fn degenerate_ball_keeps_latent() {
        let m = binary_model([0.0, 1.0], [1.0, 0.0], [0.0, 0.0]);
        assert_eq!(
            inner_maximize(&m, &[0.4, -0.2], 1, 0.0, 1, 1.0).unwrap(),
            vec![0.4, -0.2]
        );
    }

    #[test]
    fn one_step_reaches_boundary_against_the_label() {
        // binary logistic with w = (1, 0): class-1 logit is z0, class-0 logit 0
        let m = binary_model([0.0, 0.0], [1.0, 0.0], [0.0, 0.0]);
        let z = inner_maximize(&m, &[0.0, 0.0], 1, 0.5, 1, 1e6).unwrap();
        assert!((z[0] + 0.5).abs() < 1e-15 && z[1].abs() < 1e-15);
    }

    #[test]
    fn multi_step_never_decreases_loss() {
        let mut m = ModelParams::linear_zeros(2, 3);
        m.output.weights = vec![1.0, -2.0, 0.5, 0.3, -1.0, 2.0];
        let z = [0.2, -0.1];
        let base = m.loss_at_latent(&z, 1).unwrap();
        for steps in 1..6 {
            let zp = inner_maximize(&m, &z, 1, 0.7, steps, 5.0).unwrap();
            assert!(linalg::distance(&zp, &z) <= 0.7 + 1e-12);
            assert!(m.loss_at_latent(&zp, 1).unwrap() >= base - 1e-12);
        }
    }

    #[test]
    fn binary_closed_form_matches_ascent() {
        let m = binary_model([0.3, -0.7], [1.1, 0.4], [0.2, -0.1]);
        for y in 0..2 {
            let a = binary_robust_loss(&m, &[0.5, 0.25], y, 0.3).unwrap();
            let b = ball_supremum(&m, &[0.5, 0.25], y, 0.3).unwrap();
            assert!((a.value - b.value).abs() < 1e-14);
        }
    }

    #[test]
    fn w_infty_basic_cases() {
        let p = DiscreteDist::uniform(vec![(vec![0.0], 0)]).unwrap();
        let q = DiscreteDist::uniform(vec![(vec![1.0], 0)]).unwrap();
        assert_eq!(w_infty_exact(&p, &p).unwrap(), 0.0);
        assert_eq!(w_infty_exact(&p, &q).unwrap(), 1.0);
        let r = DiscreteDist::uniform(vec![(vec![0.0], 1)]).unwrap();
        assert_eq!(w_infty_exact(&p, &r).unwrap(), f64::INFINITY);
    }

    #[test]
    fn w_infty_uses_the_best_matching() {
        let p = DiscreteDist::uniform(vec![(vec![0.0], 0), (vec![3.0], 0)]).unwrap();
        let q = DiscreteDist::uniform(vec![(vec![0.0], 0), (vec![6.0], 0)]).unwrap();
        assert_eq!(w_infty_exact(&p, &q).unwrap(), 3.0);
        let q2 = DiscreteDist::uniform(vec![(vec![2.0], 0), (vec![1.0], 0)]).unwrap();
        // identity pairing costs (2, 2); the swap costs (1, 1)
        assert_eq!(w_infty_exact(&p, &q2).unwrap(), 1.0);
    }

    #[test]
    fn w_infty_rejects_out_of_scope_inputs() {
        let p = DiscreteDist::uniform(vec![(vec![0.0], 0)]).unwrap();
        let q = DiscreteDist::uniform(vec![(vec![0.0], 0), (vec![1.0], 0)]).unwrap();
        assert!(matches!(w_infty_exact(&p, &q), Err(HdroError::UnsupportedInstance(_))));
        let skew = DiscreteDist::new(vec![
            Atom {
                z: vec![0.0],
                label: 0,
                mass: 0.25,
            },
            Atom {
                z: vec![1.0],
                label: 0,
                mass: 0.75,
            },
        ])
        .unwrap();
        assert!(w_infty_exact(&skew, &q).is_err());
    }

    #[test]
    fn risk_check_degenerate_radius() {
        let m = binary_model([0.2, 0.1], [-0.4, 0.9], [0.0, 0.3]);
        let p = DiscreteDist::uniform(vec![(vec![0.1, 0.2], 0), (vec![-0.3, 0.5], 1)]).unwrap();
        let r = robust_risk_check(&p, &m, 0.0).unwrap();
        let expected = p.expected_loss(&m).unwrap();
        assert_eq!(r.pointwise, expected);
        assert_eq!(r.distributional, expected);
    }

    #[test]
    fn taylor_gap_vanishes_with_radius() {
        let m = binary_model([0.5, -1.0], [-0.2, 0.8], [0.1, 0.0]);
        let big = taylor_gap(&m, &[0.3, 0.3], 0, 0.4).unwrap();
        let tiny = taylor_gap(&m, &[0.3, 0.3], 0, 1e-4).unwrap();
        assert!(tiny < 1e-7 && tiny < big);
        assert!(taylor_gap(&m, &[0.3, 0.3], 0, 0.0).is_err());
    }
}
