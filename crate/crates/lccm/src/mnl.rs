//! Numerically stable multinomial-logit primitives.
//!
//! Unavailable alternatives are encoded as −∞ utility, so consideration-set
//! restriction and data availability share one mechanism. All normalizations
//! go through max-shifted [`log_sum_exp`]. Per-observation terms are reduced
//! in observation order, so sequential results are bit-reproducible.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};

/// log Σ exp(vᵢ) computed with a max shift. Entries may be −∞ (masked);
/// the result is −∞ iff every entry is.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp".into()));
    }
    Ok(lse(values))
}

#[inline]
fn lse(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log choice probabilities `u_k − lse(u)` over available alternatives;
/// unavailable entries come back as −∞. Errors if nothing is available.
pub fn mnl_log_probs(utilities: &[f64], availability: &[bool]) -> Result<Vec<f64>> {
    if utilities.len() != availability.len() {
        return Err(Error::Dimension {
            expected: utilities.len(),
            actual: availability.len(),
            context: "availability mask vs utilities".into(),
        });
    }
    if !availability.iter().any(|&a| a) {
        return Err(Error::NoAvailableAlternative(0));
    }
    let masked: Vec<f64> = utilities
        .iter()
        .zip(availability)
        .map(|(&u, &a)| if a { u } else { f64::NEG_INFINITY })
        .collect();
    let denom = lse(&masked);
    Ok(masked.into_iter().map(|u| u - denom).collect())
}

/// A weighted block of choice observations sharing one parameter vector.
///
/// The design carries one covariate row per (observation, alternative). When
/// every observation faces the same alternatives with the same covariates
/// (tract choice), the `Shared` form stores the design once.
#[derive(Debug, Clone)]
pub enum BlockDesign {
    /// `[observation, alternative, parameter]`, with a per-observation mask.
    PerObservation {
        design: Array3<f64>,
        availability: Array2<bool>,
    },
    /// `[alternative, parameter]` shared by all observations, one mask.
    Shared {
        design: Array2<f64>,
        availability: Vec<bool>,
    },
}

#[derive(Debug, Clone)]
pub struct ChoiceBlock {
    pub design: BlockDesign,
    /// Chosen alternative index per observation.
    pub choices: Vec<usize>,
    /// Non-negative observation weights.
    pub weights: Vec<f64>,
}

impl ChoiceBlock {
    pub fn new(design: BlockDesign, choices: Vec<usize>, weights: Vec<f64>) -> Result<ChoiceBlock> {
        let block = ChoiceBlock {
            design,
            choices,
            weights,
        };
        block.check()?;
        Ok(block)
    }

    fn check(&self) -> Result<()> {
        let n = self.choices.len();
        if self.weights.len() != n {
            return Err(Error::Dimension {
                expected: n,
                actual: self.weights.len(),
                context: "weights vs choices".into(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Spec("weights must be finite and non-negative".into()));
        }
        match &self.design {
            BlockDesign::PerObservation {
                design,
                availability,
            } => {
                let (obs, alts, _) = design.dim();
                if obs != n {
                    return Err(Error::Dimension {
                        expected: n,
                        actual: obs,
                        context: "design observations vs choices".into(),
                    });
                }
                if availability.dim() != (obs, alts) {
                    return Err(Error::Dimension {
                        expected: obs * alts,
                        actual: availability.len(),
                        context: "availability vs design".into(),
                    });
                }
                for (i, &choice) in self.choices.iter().enumerate() {
                    if choice >= alts || !availability[(i, choice)] {
                        return Err(Error::NoAvailableAlternative(i));
                    }
                    if !availability.row(i).iter().any(|&a| a) {
                        return Err(Error::NoAvailableAlternative(i));
                    }
                }
            }
            BlockDesign::Shared {
                design,
                availability,
            } => {
                let alts = design.nrows();
                if availability.len() != alts {
                    return Err(Error::Dimension {
                        expected: alts,
                        actual: availability.len(),
                        context: "availability vs design".into(),
                    });
                }
                if n > 0 && !availability.iter().any(|&a| a) {
                    return Err(Error::NoAvailableAlternative(0));
                }
                for (i, &choice) in self.choices.iter().enumerate() {
                    if choice >= alts || !availability[choice] {
                        return Err(Error::NoAvailableAlternative(i));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_observations(&self) -> usize {
        self.choices.len()
    }

    pub fn n_params(&self) -> usize {
        match &self.design {
            BlockDesign::PerObservation { design, .. } => design.dim().2,
            BlockDesign::Shared { design, .. } => design.ncols(),
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Dimension {
                expected: self.n_params(),
                actual: params.len(),
                context: "parameters vs design width".into(),
            });
        }
        Ok(())
    }
}

/// Σ over observations of `weight · log P(chosen)`.
pub fn mnl_weighted_loglik(block: &ChoiceBlock, params: &[f64]) -> Result<f64> {
    block.check_params(params)?;
    match &block.design {
        BlockDesign::PerObservation {
            design,
            availability,
        } => {
            let (_, n_alts, n_params) = design.dim();
            let d = design.as_slice().expect("standard layout");
            let a = availability.as_slice().expect("standard layout");
            let mut total = 0.0;
            let mut utilities = vec![0.0; n_alts];
            for (i, (&choice, &w)) in block.choices.iter().zip(&block.weights).enumerate() {
                if w == 0.0 {
                    continue;
                }
                fill_utilities(
                    &d[i * n_alts * n_params..(i + 1) * n_alts * n_params],
                    &a[i * n_alts..(i + 1) * n_alts],
                    params,
                    &mut utilities,
                );
                total += w * (utilities[choice] - lse(&utilities));
            }
            Ok(total)
        }
        BlockDesign::Shared {
            design,
            availability,
        } => {
            if block.choices.is_empty() {
                return Ok(0.0);
            }
            let mut utilities = vec![0.0; design.nrows()];
            fill_utilities(
                design.as_slice().expect("standard layout"),
                availability,
                params,
                &mut utilities,
            );
            let denom = lse(&utilities);
            let mut total = 0.0;
            for (&choice, &w) in block.choices.iter().zip(&block.weights) {
                if w == 0.0 {
                    continue;
                }
                total += w * (utilities[choice] - denom);
            }
            Ok(total)
        }
    }
}

/// Analytic score Σ weight · (x_chosen − Σ_k P_k x_k), length = parameter count.
pub fn mnl_weighted_grad(block: &ChoiceBlock, params: &[f64]) -> Result<Array1<f64>> {
    block.check_params(params)?;
    let n_params = block.n_params();
    let mut grad = Array1::zeros(n_params);
    let g = grad.as_slice_mut().expect("contiguous");
    match &block.design {
        BlockDesign::PerObservation {
            design,
            availability,
        } => {
            let (_, n_alts, _) = design.dim();
            let d = design.as_slice().expect("standard layout");
            let a = availability.as_slice().expect("standard layout");
            let mut utilities = vec![0.0; n_alts];
            for (i, (&choice, &w)) in block.choices.iter().zip(&block.weights).enumerate() {
                if w == 0.0 {
                    continue;
                }
                let rows = &d[i * n_alts * n_params..(i + 1) * n_alts * n_params];
                fill_utilities(rows, &a[i * n_alts..(i + 1) * n_alts], params, &mut utilities);
                let denom = lse(&utilities);
                for (k, &u) in utilities.iter().enumerate() {
                    if u == f64::NEG_INFINITY {
                        continue;
                    }
                    let prob = (u - denom).exp();
                    let coef = w * (if k == choice { 1.0 } else { 0.0 } - prob);
                    let row = &rows[k * n_params..(k + 1) * n_params];
                    for (gj, xj) in g.iter_mut().zip(row) {
                        *gj += coef * xj;
                    }
                }
            }
        }
        BlockDesign::Shared {
            design,
            availability,
        } => {
            if block.choices.is_empty() {
                return Ok(grad);
            }
            let n_alts = design.nrows();
            let d = design.as_slice().expect("standard layout");
            let mut utilities = vec![0.0; n_alts];
            fill_utilities(d, availability, params, &mut utilities);
            let denom = lse(&utilities);
            // grad = Σ_i w_i x_{c_i} − (Σ_i w_i) Σ_k P_k x_k
            let mut chosen_weight = vec![0.0; n_alts];
            let mut total_weight = 0.0;
            for (&choice, &w) in block.choices.iter().zip(&block.weights) {
                chosen_weight[choice] += w;
                total_weight += w;
            }
            for (k, &u) in utilities.iter().enumerate() {
                let prob = if u == f64::NEG_INFINITY { 0.0 } else { (u - denom).exp() };
                let coef = chosen_weight[k] - total_weight * prob;
                if coef != 0.0 {
                    let row = &d[k * n_params..(k + 1) * n_params];
                    for (gj, xj) in g.iter_mut().zip(row) {
                        *gj += coef * xj;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Masked utilities from a contiguous `[alt × param]` design slice.
#[inline]
pub(crate) fn fill_utilities(rows: &[f64], availability: &[bool], params: &[f64], out: &mut [f64]) {
    let p = params.len();
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = if availability[k] {
            rows[k * p..(k + 1) * p]
                .iter()
                .zip(params)
                .map(|(x, t)| x * t)
                .sum()
        } else {
            f64::NEG_INFINITY
        };
    }
}

/// Controls for the quasi-Newton maximizer.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MnlControls {
    /// Convergence on the gradient ∞-norm.
    pub gtol: f64,
    pub max_iterations: usize,
    /// ‖θ‖∞ beyond which a still-improving fit is flagged as separated.
    pub separation_norm: f64,
}

impl Default for MnlControls {
    fn default() -> Self {
        MnlControls {
            gtol: 1e-6,
            max_iterations: 500,
            separation_norm: 50.0,
        }
    }
}

/// Outcome of a weighted-MNL maximization.
#[derive(Debug, Clone)]
pub struct MnlFit {
    pub params: Array1<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Parameters diverged past the norm threshold while the log-likelihood
    /// kept improving; reported, not failed.
    pub separation: bool,
}

/// Maximize the weighted MNL log-likelihood by BFGS ascent with a
/// backtracking line search satisfying sufficient increase. Returns when the
/// gradient ∞-norm falls below `gtol` or the iteration cap is reached.
///
/// Internally the search runs in column-scaled coordinates (each design
/// column normalized to unit root-mean-square) with the usual scaled
/// initial inverse Hessian; convergence is still judged on the unscaled
/// gradient.
pub fn fit_weighted_mnl(
    block: &ChoiceBlock,
    init: &[f64],
    controls: &MnlControls,
) -> Result<MnlFit> {
    block.check_params(init)?;
    let n = init.len();
    let scale = column_scales(block);

    // Work in θ' = σ ⊙ θ. Utilities are unchanged; ∂LL/∂θ' = ∂LL/∂θ ⊘ σ.
    let to_unscaled = |scaled: &Array1<f64>| -> Array1<f64> {
        Array1::from_iter(scaled.iter().zip(&scale).map(|(v, s)| v / s))
    };
    let mut theta_s = Array1::from_iter(init.iter().zip(&scale).map(|(v, s)| v * s));
    let mut theta = to_unscaled(&theta_s);
    let mut loglik = mnl_weighted_loglik(block, theta.as_slice().unwrap())?;
    if !loglik.is_finite() {
        return Err(Error::NonFiniteLoglik);
    }
    let eval_grad = |t: &Array1<f64>| -> Result<(Array1<f64>, Array1<f64>)> {
        let raw = mnl_weighted_grad(block, t.as_slice().unwrap())?;
        let scaled = Array1::from_iter(raw.iter().zip(&scale).map(|(g, s)| g / s));
        Ok((raw, scaled))
    };
    let (mut grad_raw, mut grad_s) = eval_grad(&theta)?;

    // Inverse Hessian approximation of the negated objective in scaled space.
    let mut h_inv = Array2::<f64>::eye(n);
    let mut first_update = true;
    let mut separation = false;

    for iteration in 0..controls.max_iterations {
        let gnorm = grad_raw.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if gnorm <= controls.gtol {
            return Ok(MnlFit {
                params: theta,
                loglik,
                converged: true,
                iterations: iteration,
                separation,
            });
        }

        let mut direction = h_inv.dot(&grad_s);
        let mut slope = direction.dot(&grad_s);
        let dnorm = direction.dot(&direction).sqrt();
        if !(slope > 1e-12 * gnorm * dnorm) || !slope.is_finite() {
            // Degenerate or descent direction; restart from steepest ascent.
            h_inv = Array2::eye(n);
            first_update = true;
            direction = grad_s.clone();
            slope = direction.dot(&grad_s);
        }

        let Some(found) = wolfe_search(block, &theta_s, &direction, loglik, slope, &to_unscaled, &eval_grad)?
        else {
            // The log-likelihood is at its floating-point ceiling. Residual
            // gradient is polished with curvature steps accepted on
            // gradient-norm decrease; the objective only moves at ulp level.
            let mut polish_theta_s = theta_s.clone();
            let mut polish_raw = grad_raw.clone();
            let mut polish_s = grad_s.clone();
            let mut polish_iters = iteration;
            for _ in 0..40 {
                let gnorm = polish_raw.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
                if gnorm <= controls.gtol {
                    break;
                }
                let candidate_s = &polish_theta_s + &h_inv.dot(&polish_s);
                let candidate = to_unscaled(&candidate_s);
                let (raw, scaled) = eval_grad(&candidate)?;
                let new_norm = raw.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
                if !new_norm.is_finite() || new_norm >= gnorm {
                    break;
                }
                polish_theta_s = candidate_s;
                polish_raw = raw;
                polish_s = scaled;
                polish_iters += 1;
            }
            let final_theta = to_unscaled(&polish_theta_s);
            let final_loglik = mnl_weighted_loglik(block, final_theta.as_slice().unwrap())?;
            let gnorm = polish_raw.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
            return Ok(MnlFit {
                params: final_theta,
                loglik: final_loglik,
                converged: gnorm <= controls.gtol,
                iterations: polish_iters,
                separation,
            });
        };
        let LinePoint {
            theta_s: new_theta_s,
            theta: new_theta,
            value: new_loglik,
            grad_raw: new_grad_raw,
            grad_s: new_grad_s,
        } = found;

        let s = &new_theta_s - &theta_s;
        // Curvature for the negated objective: y = g_old − g_new.
        let y = &grad_s - &new_grad_s;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.dot(&s).sqrt() * y.dot(&y).sqrt() {
            if first_update {
                // Scale the initial approximation to the first observed
                // curvature before updating.
                let gamma = sy / y.dot(&y);
                if gamma.is_finite() && gamma > 0.0 {
                    h_inv = Array2::eye(n) * gamma;
                }
                first_update = false;
            }
            bfgs_update(&mut h_inv, &s, &y, sy);
        }

        let improving = new_loglik > loglik;
        theta_s = new_theta_s;
        theta = new_theta;
        loglik = new_loglik;
        grad_raw = new_grad_raw;
        grad_s = new_grad_s;
        let tnorm = theta.iter().fold(0.0_f64, |m, t| m.max(t.abs()));
        if improving && tnorm > controls.separation_norm {
            separation = true;
        }
    }

    let gnorm = grad_raw.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    Ok(MnlFit {
        params: theta,
        loglik,
        converged: gnorm <= controls.gtol,
        iterations: controls.max_iterations,
        separation,
    })
}

struct LinePoint {
    theta_s: Array1<f64>,
    theta: Array1<f64>,
    value: f64,
    grad_raw: Array1<f64>,
    grad_s: Array1<f64>,
}

/// Strong-Wolfe line search for ascent (Nocedal & Wright algorithms 3.5/3.6
/// adapted for maximization): sufficient increase with c1 = 1e-4 and the
/// curvature condition |φ'(α)| ≤ 0.9 φ'(0). Returns `None` when no
/// measurable improvement exists along the direction.
#[allow(clippy::too_many_arguments)]
fn wolfe_search(
    block: &ChoiceBlock,
    theta_s: &Array1<f64>,
    direction: &Array1<f64>,
    value_0: f64,
    slope_0: f64,
    to_unscaled: &dyn Fn(&Array1<f64>) -> Array1<f64>,
    eval_grad: &dyn Fn(&Array1<f64>) -> Result<(Array1<f64>, Array1<f64>)>,
) -> Result<Option<LinePoint>> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let probe = |alpha: f64| -> Result<(LinePoint, f64)> {
        let candidate_s = theta_s + &(alpha * direction);
        let candidate = to_unscaled(&candidate_s);
        let value = mnl_weighted_loglik(block, candidate.as_slice().unwrap())?;
        let (grad_raw, grad_s) = eval_grad(&candidate)?;
        let slope = grad_s.dot(direction);
        Ok((
            LinePoint {
                theta_s: candidate_s,
                theta: candidate,
                value,
                grad_raw,
                grad_s,
            },
            slope,
        ))
    };
    let sufficient = |alpha: f64, value: f64| value.is_finite() && value >= value_0 + C1 * alpha * slope_0;
    // Improvement below additive float noise cannot be bracketed.
    let noise = 1e-13 * (1.0 + value_0.abs());

    let mut alpha_prev = 0.0_f64;
    let mut value_prev = value_0;
    let mut alpha = 1.0_f64;
    let mut bracket: Option<(f64, f64, f64)> = None; // (lo, value_lo, hi)
    for i in 0..20 {
        let (point, slope) = probe(alpha)?;
        if !sufficient(alpha, point.value) || (i > 0 && point.value <= value_prev) {
            bracket = Some((alpha_prev, value_prev, alpha));
            break;
        }
        if slope.abs() <= C2 * slope_0 {
            return Ok(Some(point));
        }
        if slope <= 0.0 {
            bracket = Some((alpha, point.value, alpha_prev));
            break;
        }
        alpha_prev = alpha;
        value_prev = point.value;
        alpha *= 2.0;
    }
    let Some((mut lo, mut value_lo, mut hi)) = bracket else {
        // Extrapolation kept satisfying both tests without triggering the
        // curvature condition; accept the furthest point probed.
        let (point, _) = probe(alpha_prev)?;
        return Ok(Some(point));
    };

    // Zoom by bisection.
    let mut best: Option<LinePoint> = None;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let (point, slope) = probe(mid)?;
        if !sufficient(mid, point.value) || point.value <= value_lo {
            hi = mid;
            continue;
        }
        if slope.abs() <= C2 * slope_0 {
            return Ok(Some(point));
        }
        if slope * (hi - lo) <= 0.0 {
            hi = lo;
        }
        lo = mid;
        value_lo = point.value;
        best = Some(point);
        if (hi - lo).abs() * slope_0 < noise {
            break;
        }
    }
    if let Some(point) = best {
        if point.value > value_0 + noise {
            return Ok(Some(point));
        }
    }
    // Fall back to the lower bracket end if it genuinely improves.
    if lo > 0.0 && value_lo > value_0 + noise {
        let (point, _) = probe(lo)?;
        return Ok(Some(point));
    }
    Ok(None)
}

/// Root-mean-square of each design column over available alternatives,
/// floored away from zero.
fn column_scales(block: &ChoiceBlock) -> Vec<f64> {
    let p = block.n_params();
    let mut sum_sq = vec![0.0; p];
    let mut count = 0usize;
    match &block.design {
        BlockDesign::PerObservation {
            design,
            availability,
        } => {
            let (obs, alts, _) = design.dim();
            for i in 0..obs {
                for k in 0..alts {
                    if !availability[(i, k)] {
                        continue;
                    }
                    count += 1;
                    for (j, s) in sum_sq.iter_mut().enumerate() {
                        let v = design[(i, k, j)];
                        *s += v * v;
                    }
                }
            }
        }
        BlockDesign::Shared {
            design,
            availability,
        } => {
            for k in 0..design.nrows() {
                if !availability[k] {
                    continue;
                }
                count += 1;
                for (j, s) in sum_sq.iter_mut().enumerate() {
                    let v = design[(k, j)];
                    *s += v * v;
                }
            }
        }
    }
    sum_sq
        .into_iter()
        .map(|s| {
            let rms = (s / count.max(1) as f64).sqrt();
            if rms > 1e-12 {
                rms
            } else {
                1.0
            }
        })
        .collect()
}

/// Sherman–Morrison form of the inverse-Hessian BFGS update.
fn bfgs_update(h_inv: &mut Array2<f64>, s: &Array1<f64>, y: &Array1<f64>, sy: f64) {
    let rho = 1.0 / sy;
    let hy = h_inv.dot(y);
    let yhy = y.dot(&hy);
    let n = s.len();
    for i in 0..n {
        for j in 0..n {
            h_inv[(i, j)] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (s[i] * hy[j] + hy[i] * s[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lse_matches_ln2() {
        assert_abs_diff_eq!(log_sum_exp(&[0.0, 0.0]).unwrap(), 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn lse_is_stable_at_large_magnitudes() {
        let v = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert_abs_diff_eq!(v, 1000.0 + 2.0_f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn lse_ignores_masked_entries() {
        assert_eq!(log_sum_exp(&[0.0, f64::NEG_INFINITY]).unwrap(), 0.0);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn lse_rejects_empty_input() {
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn log_probs_symmetric() {
        let lp = mnl_log_probs(&[0.0, 0.0, 0.0], &[true, true, true]).unwrap();
        for p in lp {
            assert_abs_diff_eq!(p.exp(), 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_probs_analytic_two_thirds() {
        let lp = mnl_log_probs(&[0.0, 2.0_f64.ln()], &[true, true]).unwrap();
        assert_abs_diff_eq!(lp[0].exp(), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lp[1].exp(), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn single_available_alternative_is_certain() {
        let lp = mnl_log_probs(&[123.0, -4.0], &[false, true]).unwrap();
        assert_eq!(lp[0], f64::NEG_INFINITY);
        assert_eq!(lp[1], 0.0);
    }

    #[test]
    fn no_available_alternative_is_an_error() {
        assert!(mnl_log_probs(&[0.0, 0.0], &[false, false]).is_err());
    }

    fn random_block(rng: &mut ChaCha8Rng, n_obs: usize, n_alts: usize, n_params: usize) -> ChoiceBlock {
        let design = Array3::from_shape_fn((n_obs, n_alts, n_params), |_| rng.gen_range(-1.0..1.0));
        let mut availability = Array2::from_elem((n_obs, n_alts), true);
        let mut choices = Vec::with_capacity(n_obs);
        for i in 0..n_obs {
            // Mask one alternative sometimes, never the chosen one.
            if n_alts > 2 && rng.gen_bool(0.3) {
                let masked = rng.gen_range(0..n_alts);
                availability[(i, masked)] = false;
            }
            let choice = loop {
                let c = rng.gen_range(0..n_alts);
                if availability[(i, c)] {
                    break c;
                }
            };
            choices.push(choice);
        }
        let weights = (0..n_obs).map(|_| rng.gen_range(0.0..2.0)).collect();
        ChoiceBlock::new(BlockDesign::PerObservation { design, availability }, choices, weights)
            .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_loglik() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block = random_block(&mut rng, 6, 3, 2);
        block.weights = vec![0.0; 6];
        assert_eq!(mnl_weighted_loglik(&block, &[0.3, -0.2]).unwrap(), 0.0);
    }

    #[test]
    fn equal_utilities_one_obs_gives_ln_half() {
        let design = Array3::zeros((1, 2, 1));
        let block = ChoiceBlock::new(
            BlockDesign::PerObservation {
                design,
                availability: Array2::from_elem((1, 2), true),
            },
            vec![0],
            vec![1.0],
        )
        .unwrap();
        assert_abs_diff_eq!(
            mnl_weighted_loglik(&block, &[0.7]).unwrap(),
            0.5_f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn loglik_matches_naive_per_observation_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = random_block(&mut rng, 5, 4, 3);
        let params = [0.4, -0.6, 0.1];
        let fast = mnl_weighted_loglik(&block, &params).unwrap();

        // Naive oracle: per-observation softmax by direct exponentiation.
        let BlockDesign::PerObservation { design, availability } = &block.design else {
            unreachable!()
        };
        let mut slow = 0.0;
        for i in 0..5 {
            let utilities: Vec<f64> = (0..4)
                .map(|k| (0..3).map(|j| design[(i, k, j)] * params[j]).sum())
                .collect();
            let denom: f64 = (0..4)
                .filter(|&k| availability[(i, k)])
                .map(|k| utilities[k].exp())
                .sum();
            slow += block.weights[i] * (utilities[block.choices[i]].exp() / denom).ln();
        }
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-10);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let block = random_block(&mut rng, 8, 3, 4);
            let params: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let grad = mnl_weighted_grad(&block, &params).unwrap();
            let step = 1e-5;
            let mut max_ref: f64 = 1.0;
            for g in &grad {
                max_ref = max_ref.max(g.abs());
            }
            for j in 0..4 {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus[j] += step;
                minus[j] -= step;
                let fd = (mnl_weighted_loglik(&block, &plus).unwrap()
                    - mnl_weighted_loglik(&block, &minus).unwrap())
                    / (2.0 * step);
                assert!(
                    (grad[j] - fd).abs() <= 1e-6 * max_ref,
                    "component {j}: analytic {} vs fd {fd}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn gradient_zero_for_balanced_symmetric_block() {
        // Two alternatives, antisymmetric design, one observation choosing
        // each: the score at zero cancels exactly.
        let design = ndarray::Array3::from_shape_vec(
            (2, 2, 1),
            vec![1.0, -1.0, 1.0, -1.0],
        )
        .unwrap();
        let block = ChoiceBlock::new(
            BlockDesign::PerObservation {
                design,
                availability: Array2::from_elem((2, 2), true),
            },
            vec![0, 1],
            vec![1.0, 1.0],
        )
        .unwrap();
        let grad = mnl_weighted_grad(&block, &[0.0]).unwrap();
        assert_eq!(grad[0], 0.0);
    }

    #[test]
    fn gradient_vanishes_at_fitted_maximizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = random_block(&mut rng, 40, 3, 2);
        let fit = fit_weighted_mnl(&block, &[0.0, 0.0], &MnlControls::default()).unwrap();
        assert!(fit.converged);
        let grad = mnl_weighted_grad(&block, fit.params.as_slice().unwrap()).unwrap();
        for g in &grad {
            assert!(g.abs() <= 1e-6, "gradient component {g}");
        }
    }

    /// Draw choices from known parameters and refit; n = 10 000 pins the
    /// estimate within 0.05 of the truth.
    #[test]
    fn fit_recovers_generating_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = [0.8, -0.5];
        let n_obs = 10_000;
        let n_alts = 3;
        let design =
            Array3::from_shape_fn((n_obs, n_alts, 2), |_| rng.gen_range(-1.0..1.0_f64));
        let availability = Array2::from_elem((n_obs, n_alts), true);
        let mut choices = Vec::with_capacity(n_obs);
        for i in 0..n_obs {
            let utilities: Vec<f64> = (0..n_alts)
                .map(|k| (0..2).map(|j| design[(i, k, j)] * truth[j]).sum())
                .collect();
            let lp = mnl_log_probs(&utilities, &[true; 3]).unwrap();
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut chosen = n_alts - 1;
            for (k, l) in lp.iter().enumerate() {
                cum += l.exp();
                if u < cum {
                    chosen = k;
                    break;
                }
            }
            choices.push(chosen);
        }
        let block = ChoiceBlock::new(
            BlockDesign::PerObservation { design, availability },
            choices,
            vec![1.0; n_obs],
        )
        .unwrap();
        let fit = fit_weighted_mnl(&block, &[0.0, 0.0], &MnlControls::default()).unwrap();
        assert!(fit.converged);
        for (est, tru) in fit.params.iter().zip(&truth) {
            assert!((est - tru).abs() < 0.05, "estimated {est} vs true {tru}");
        }
    }

    #[test]
    fn perfect_separation_is_flagged() {
        // Binary choice perfectly predicted by the sign of x. The small
        // covariate scale drives the coefficient far past the norm threshold
        // while the log-likelihood keeps improving.
        let n_obs = 30;
        let mut design = Array3::zeros((n_obs, 2, 1));
        let mut choices = Vec::new();
        for i in 0..n_obs {
            let x = if i % 2 == 0 { 0.25 } else { -0.25 };
            design[(i, 1, 0)] = x;
            choices.push(if x > 0.0 { 1 } else { 0 });
        }
        let block = ChoiceBlock::new(
            BlockDesign::PerObservation {
                design,
                availability: Array2::from_elem((n_obs, 2), true),
            },
            choices,
            vec![1.0; n_obs],
        )
        .unwrap();
        let fit = fit_weighted_mnl(&block, &[0.0], &MnlControls::default()).unwrap();
        assert!(fit.separation, "separated block must raise the report");
    }

    #[test]
    fn init_at_maximizer_converges_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = random_block(&mut rng, 50, 3, 2);
        let first = fit_weighted_mnl(&block, &[0.0, 0.0], &MnlControls::default()).unwrap();
        let second =
            fit_weighted_mnl(&block, first.params.as_slice().unwrap(), &MnlControls::default())
                .unwrap();
        assert!(second.converged);
        assert!(second.iterations <= 2, "iterations: {}", second.iterations);
    }

    #[test]
    fn shared_design_agrees_with_per_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let shared = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let availability = vec![true, true, false, true];
        let choices = vec![0usize, 1, 3, 0, 1];
        let weights = vec![1.0, 0.5, 2.0, 0.0, 1.5];
        let n_obs = choices.len();
        let expanded = Array3::from_shape_fn((n_obs, 4, 2), |(_, k, j)| shared[(k, j)]);
        let avail2 = Array2::from_shape_fn((n_obs, 4), |(_, k)| availability[k]);
        let a = ChoiceBlock::new(
            BlockDesign::Shared {
                design: shared,
                availability,
            },
            choices.clone(),
            weights.clone(),
        )
        .unwrap();
        let b = ChoiceBlock::new(
            BlockDesign::PerObservation {
                design: expanded,
                availability: avail2,
            },
            choices,
            weights,
        )
        .unwrap();
        let params = [0.3, -0.7];
        assert_abs_diff_eq!(
            mnl_weighted_loglik(&a, &params).unwrap(),
            mnl_weighted_loglik(&b, &params).unwrap(),
            epsilon = 1e-12
        );
        let ga = mnl_weighted_grad(&a, &params).unwrap();
        let gb = mnl_weighted_grad(&b, &params).unwrap();
        assert_abs_diff_eq!(ga[0], gb[0], epsilon = 1e-12);
        assert_abs_diff_eq!(ga[1], gb[1], epsilon = 1e-12);
    }

    #[test]
    fn chosen_unavailable_is_rejected() {
        let design = Array3::zeros((1, 2, 1));
        let mut availability = Array2::from_elem((1, 2), true);
        availability[(0, 0)] = false;
        let err = ChoiceBlock::new(
            BlockDesign::PerObservation { design, availability },
            vec![0],
            vec![1.0],
        );
        assert!(err.is_err());
    }

    #[test]
    fn concavity_midpoint_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let block = random_block(&mut rng, 10, 3, 3);
            let t1: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t2: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mid: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| 0.5 * (a + b)).collect();
            let l1 = mnl_weighted_loglik(&block, &t1).unwrap();
            let l2 = mnl_weighted_loglik(&block, &t2).unwrap();
            let lm = mnl_weighted_loglik(&block, &mid).unwrap();
            assert!(lm >= 0.5 * l1 + 0.5 * l2 - 1e-10);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Adding a constant to every available utility leaves log
            /// probabilities unchanged.
            #[test]
            fn translation_invariance(
                u in proptest::collection::vec(-20.0..20.0_f64, 2..6),
                shift in -30.0..30.0_f64,
            ) {
                let avail = vec![true; u.len()];
                let base = mnl_log_probs(&u, &avail).unwrap();
                let shifted: Vec<f64> = u.iter().map(|v| v + shift).collect();
                let moved = mnl_log_probs(&shifted, &avail).unwrap();
                for (a, b) in base.iter().zip(&moved) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            /// Probabilities over available alternatives sum to one.
            #[test]
            fn probabilities_normalize(
                u in proptest::collection::vec(-30.0..30.0_f64, 2..6),
                mask_index in 0usize..6,
            ) {
                let mut avail = vec![true; u.len()];
                if mask_index < u.len() - 1 {
                    avail[mask_index] = false;
                }
                let lp = mnl_log_probs(&u, &avail).unwrap();
                let total: f64 = lp.iter().filter(|p| p.is_finite()).map(|p| p.exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_dimension_mismatch_is_an_error() {
        let design = Array3::zeros((1, 2, 2));
        let block = ChoiceBlock::new(
            BlockDesign::PerObservation {
                design,
                availability: Array2::from_elem((1, 2), true),
            },
            vec![0],
            vec![1.0],
        )
        .unwrap();
        assert!(mnl_weighted_loglik(&block, &[0.0]).is_err());
        assert!(mnl_weighted_grad(&block, &[0.0, 0.0, 0.0]).is_err());
        let _ = array![0.0]; // keep ndarray macro import exercised
    }
}
