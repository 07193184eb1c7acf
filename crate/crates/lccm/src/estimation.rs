//! EM estimation of latent class choice models.
//!
//! The two single-level sub-models (individual classes with mode choice,
//! household classes with neighbourhood choice) share one EM loop: the
//! E-step computes posterior class weights, the M-step re-fits the
//! membership model and every class-specific choice model as weighted MNLs
//! warm-started at the previous parameters. Warm starts plus ascent-only
//! line searches make each M-step non-decreasing, hence the whole trace
//! monotone up to floating-point noise.
//!
//! The three-step pipeline fits the mode sub-model, the neighbourhood
//! sub-model, and then re-estimates the conditional individual membership
//! against the full hierarchical likelihood with everything else held fixed.

use std::ops::Range;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::config::{
    build_layout, ClassLevel, ColumnUniverse, InitStrategy, LayoutKind, ModelSpec, ParamVector,
    ParameterLayout, seed_parameters,
};
use crate::data::{IndexedDataset, Purpose};
use crate::error::{Error, Result};
use crate::likelihood::{
    HierEvaluator, Parallelism, PosteriorMatrix, build_mode_caches, build_nbhd_caches,
    covariate_matrix, membership_log_probs,
};
use crate::mnl::{BlockDesign, ChoiceBlock, MnlControls, fit_weighted_mnl, mnl_weighted_grad, mnl_weighted_loglik};

/// Outer-loop controls. Tolerances are fixed defaults, overridable per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmControls {
    pub max_iterations: usize,
    /// Stop when |ΔLL| / max(1, |LL|) falls below this.
    pub loglik_rel_tol: f64,
    /// Stop when the parameter ∞-norm change falls below this.
    pub param_abs_tol: f64,
    /// Number of seeded initializations for multi-start.
    pub starts: usize,
    pub seed: u64,
    /// Random starts draw uniform(−scale, +scale) entries.
    pub init_scale: f64,
    pub inner: MnlControls,
    pub parallelism: Parallelism,
}

impl Default for EmControls {
    fn default() -> Self {
        EmControls {
            max_iterations: 1000,
            loglik_rel_tol: 1e-8,
            param_abs_tol: 1e-6,
            starts: 20,
            seed: 0,
            init_scale: 0.5,
            inner: MnlControls::default(),
            parallelism: Parallelism::Sequential,
        }
    }
}

/// The estimable sub-models of the sequential pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubModel {
    /// Individual classes, unconditional membership, per-purpose mode choice.
    ModeLccm,
    /// Household classes, membership, neighbourhood choice.
    NeighbourhoodLccm,
    /// Conditional individual membership (γ) against the full likelihood.
    ConditionalMembership,
}

impl SubModel {
    pub fn name(self) -> &'static str {
        match self {
            SubModel::ModeLccm => "mode",
            SubModel::NeighbourhoodLccm => "neighbourhood",
            SubModel::ConditionalMembership => "conditional_membership",
        }
    }
}

/// A converged (or capped) estimation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub sub_model: SubModel,
    /// The spec the result is expressed against (classes may have been
    /// relabeled by canonicalization).
    pub spec: ModelSpec,
    pub layout: ParameterLayout,
    pub params: ParamVector,
    /// Observed log-likelihood at the start of each EM iteration plus the
    /// final value; non-decreasing within 1e-9 per step.
    pub trace: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    /// Units × classes posterior at the final parameters (units are persons
    /// for the mode and conditional sub-models, households otherwise).
    pub posteriors: Array2<f64>,
    /// Mean posterior per class.
    pub class_shares: Vec<f64>,
    /// Original 1-based class label at each (possibly relabeled) position.
    pub class_labels: Vec<usize>,
    /// Choice observations backing the fit (tours or households).
    pub n_observations: usize,
    pub std_errors: Option<Vec<Option<f64>>>,
    pub t_stats: Option<Vec<Option<f64>>>,
    pub warnings: Vec<String>,
    /// Seed of the winning start and the final log-likelihood of every start.
    pub start_seed: u64,
    pub start_logliks: Vec<f64>,
    /// For conditional fits: the full-model layout and parameters (α, β, λ
    /// fixed, γ estimated).
    pub full_model: Option<(ParameterLayout, ParamVector)>,
}

impl FitResult {
    pub fn n_parameters(&self) -> usize {
        self.layout.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_shares.len()
    }
}

/// Derive the k-th start seed from the run seed (splitmix-style mixing).
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut x = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

// ---------------------------------------------------------------------------
// Single-level latent class problems
// ---------------------------------------------------------------------------

/// A class-specific choice block template: fixed design, choices, and the
/// unit backing each observation; weights are filled from posteriors each
/// iteration.
struct ComponentTemplate {
    block: ChoiceBlock,
    /// Unit (person or household) index per observation.
    unit_of_obs: Vec<usize>,
    /// Flat parameter range of this block.
    range: Range<usize>,
}

struct MembershipTemplate {
    block: ChoiceBlock,
    unit_of_obs: Vec<usize>,
    class_of_obs: Vec<usize>,
    range: Range<usize>,
}

pub(crate) struct SingleLevelProblem<'a> {
    pub idx: &'a IndexedDataset,
    pub spec: ModelSpec,
    pub layout: ParameterLayout,
    pub level: ClassLevel,
    /// Units × (1 + covariates) membership design.
    membership_design: Array2<f64>,
    membership_template: Option<MembershipTemplate>,
    /// Per class, the component blocks (two per class for the mode model,
    /// one per class for the neighbourhood model).
    components: Vec<Vec<ComponentTemplate>>,
    /// Structural −∞ mask: log f(unit | class) contributions independent of
    /// parameters (consideration-set exclusions).
    exclusions: Array2<bool>,
    mode_caches: Option<Vec<Vec<crate::likelihood::ModePurposeCache>>>,
    nbhd_caches: Option<Vec<crate::likelihood::NbhdClassCache>>,
    tour_positions: Option<Vec<Vec<Vec<usize>>>>,
    n_units: usize,
    n_classes: usize,
    n_choice_observations: usize,
}

impl<'a> SingleLevelProblem<'a> {
    pub fn new(sub_model: SubModel, idx: &'a IndexedDataset, spec: &ModelSpec) -> Result<Self> {
        let universe = ColumnUniverse::from_dataset(&idx.data);
        let spec = spec.resolve(&universe)?;
        match sub_model {
            SubModel::ModeLccm => {
                let layout = build_layout(&spec, &universe, LayoutKind::ModeSubModel)?;
                Self::mode_problem(idx, spec, layout)
            }
            SubModel::NeighbourhoodLccm => {
                let layout = build_layout(&spec, &universe, LayoutKind::NeighbourhoodSubModel)?;
                Self::neighbourhood_problem(idx, spec, layout)
            }
            SubModel::ConditionalMembership => Err(Error::Spec(
                "conditional membership is estimated by fit_conditional_membership".into(),
            )),
        }
    }

    fn mode_problem(
        idx: &'a IndexedDataset,
        spec: ModelSpec,
        layout: ParameterLayout,
    ) -> Result<Self> {
        let ds = &idx.data;
        let n_units = ds.n_persons();
        let n_classes = spec.individual_classes;
        let membership_design = covariate_matrix(
            n_units,
            &ds.person_columns,
            &spec.individual_membership_variables,
            |i, c| ds.persons[i].covariates[c],
        )?;
        let caches = build_mode_caches(idx, &spec, &layout);

        let mut tour_positions = Vec::with_capacity(2);
        for purpose in Purpose::ALL {
            let tour_rows = &caches[purpose.index()][0].tour_rows;
            let mut position_of_row = vec![usize::MAX; ds.n_tours()];
            for (pos, &row) in tour_rows.iter().enumerate() {
                position_of_row[row] = pos;
            }
            let per_person: Vec<Vec<usize>> = (0..n_units)
                .map(|n| {
                    idx.tours_of(n, purpose)
                        .iter()
                        .map(|&row| position_of_row[row])
                        .collect()
                })
                .collect();
            tour_positions.push(per_person);
        }

        // Structural exclusions: a person whose chosen mode leaves the class
        // consideration set on any tour is impossible under that class.
        let mut exclusions = Array2::from_elem((n_units, n_classes), false);
        for s in 0..n_classes {
            for purpose in Purpose::ALL {
                let cache = &caches[purpose.index()][s];
                for (pos, &ok) in cache.chosen_in_set.iter().enumerate() {
                    if !ok {
                        let row = cache.tour_rows[pos];
                        let n = idx.person_row(&ds.tours[row].person_id).expect("indexed");
                        exclusions[(n, s)] = true;
                    }
                }
            }
        }

        // Component templates: per class, one block per purpose, keeping only
        // tours whose chosen mode the class considers.
        let mut components = Vec::with_capacity(n_classes);
        for s in 0..n_classes {
            let mut blocks = Vec::new();
            for purpose in Purpose::ALL {
                let range = layout.lambda[purpose.index()][s].clone();
                if range.is_empty() {
                    continue;
                }
                let cache = &caches[purpose.index()][s];
                let kept: Vec<usize> = (0..cache.chosen.len())
                    .filter(|&i| cache.chosen_in_set[i])
                    .collect();
                let width = range.len();
                let mut design = Array3::zeros((kept.len(), 5, width));
                let mut availability = Array2::from_elem((kept.len(), 5), false);
                let mut choices = Vec::with_capacity(kept.len());
                let mut unit_of_obs = Vec::with_capacity(kept.len());
                for (o, &i) in kept.iter().enumerate() {
                    for k in 0..5 {
                        availability[(o, k)] = cache.availability[(i, k)];
                        for j in 0..width {
                            design[(o, k, j)] = cache.design[(i, k, j)];
                        }
                    }
                    choices.push(cache.chosen[i]);
                    let row = cache.tour_rows[i];
                    unit_of_obs.push(idx.person_row(&ds.tours[row].person_id).expect("indexed"));
                }
                let block = ChoiceBlock::new(
                    BlockDesign::PerObservation {
                        design,
                        availability,
                    },
                    choices,
                    vec![0.0; kept.len()],
                )?;
                blocks.push(ComponentTemplate {
                    block,
                    unit_of_obs,
                    range,
                });
            }
            components.push(blocks);
        }

        let membership_template = membership_template(
            &membership_design,
            n_classes,
            layout.gamma[0].clone(),
        );

        Ok(SingleLevelProblem {
            idx,
            spec,
            layout,
            level: ClassLevel::Individual,
            membership_design,
            membership_template,
            components,
            exclusions,
            mode_caches: Some(caches),
            nbhd_caches: None,
            tour_positions: Some(tour_positions),
            n_units,
            n_classes,
            n_choice_observations: ds.n_tours(),
        })
    }

    fn neighbourhood_problem(
        idx: &'a IndexedDataset,
        spec: ModelSpec,
        layout: ParameterLayout,
    ) -> Result<Self> {
        let ds = &idx.data;
        let n_units = ds.n_households();
        let n_classes = spec.household_classes;
        let membership_design = covariate_matrix(
            n_units,
            &ds.household_columns,
            &spec.household_membership_variables,
            |i, c| ds.households[i].covariates[c],
        )?;
        let caches = build_nbhd_caches(idx, &spec)?;

        let mut exclusions = Array2::from_elem((n_units, n_classes), false);
        for r in 0..n_classes {
            for h in 0..n_units {
                if caches[r].chosen_pos[h].is_none() {
                    exclusions[(h, r)] = true;
                }
            }
        }

        let mut components = Vec::with_capacity(n_classes);
        for r in 0..n_classes {
            let range = layout.beta[r].clone();
            let cache = &caches[r];
            let mut blocks = Vec::new();
            if !range.is_empty() {
                let kept: Vec<usize> =
                    (0..n_units).filter(|&h| cache.chosen_pos[h].is_some()).collect();
                let choices: Vec<usize> =
                    kept.iter().map(|&h| cache.chosen_pos[h].unwrap()).collect();
                let block = ChoiceBlock::new(
                    BlockDesign::Shared {
                        design: cache.design.clone(),
                        availability: vec![true; cache.design.nrows()],
                    },
                    choices,
                    vec![0.0; kept.len()],
                )?;
                blocks.push(ComponentTemplate {
                    block,
                    unit_of_obs: kept,
                    range,
                });
            }
            components.push(blocks);
        }

        let membership_template =
            membership_template(&membership_design, n_classes, layout.alpha.clone());

        Ok(SingleLevelProblem {
            idx,
            spec,
            layout,
            level: ClassLevel::Household,
            membership_design,
            membership_template,
            components,
            exclusions,
            mode_caches: None,
            nbhd_caches: Some(caches),
            tour_positions: None,
            n_units,
            n_classes,
            n_choice_observations: n_units,
        })
    }

    /// Units × classes matrix of log membership priors.
    fn membership_logliks(&self, theta: &ParamVector) -> Array2<f64> {
        let coefs = match self.level {
            ClassLevel::Individual => self.layout.individual_membership(theta, None),
            ClassLevel::Household => self.layout.household_membership(theta),
        };
        let mut m = Array2::zeros((self.n_units, self.n_classes));
        for u in 0..self.n_units {
            m.row_mut(u)
                .assign(&membership_log_probs(self.membership_design.row(u), &coefs));
        }
        m
    }

    /// Units × classes matrix of log f(unit | class).
    fn component_logliks(&self, theta: &ParamVector) -> Array2<f64> {
        let mut f = Array2::zeros((self.n_units, self.n_classes));
        match self.level {
            ClassLevel::Individual => {
                let caches = self.mode_caches.as_ref().unwrap();
                let positions = self.tour_positions.as_ref().unwrap();
                for s in 0..self.n_classes {
                    for purpose in Purpose::ALL {
                        let cache = &caches[purpose.index()][s];
                        let lambda = self.layout.lambda_coefs(theta, purpose, s + 1);
                        for n in 0..self.n_units {
                            let mut acc = f[(n, s)];
                            for &pos in &positions[purpose.index()][n] {
                                acc += crate::likelihood::tour_log_prob(cache, pos, lambda);
                            }
                            f[(n, s)] = acc;
                        }
                    }
                }
            }
            ClassLevel::Household => {
                let caches = self.nbhd_caches.as_ref().unwrap();
                for r in 0..self.n_classes {
                    let cache = &caches[r];
                    let beta = self.layout.beta_coefs(theta, r + 1);
                    let utilities = cache.design.dot(&ndarray::ArrayView1::from(beta));
                    let denom = crate::likelihood::lse_slice(utilities.as_slice().unwrap());
                    for h in 0..self.n_units {
                        f[(h, r)] = match cache.chosen_pos[h] {
                            Some(pos) => utilities[pos] - denom,
                            None => f64::NEG_INFINITY,
                        };
                    }
                }
            }
        }
        // Exclusions are already −∞ through the caches; the mask documents them.
        debug_assert!(self
            .exclusions
            .indexed_iter()
            .all(|((u, c), &ex)| !ex || f[(u, c)] == f64::NEG_INFINITY));
        f
    }

    /// Observed log-likelihood and posterior matrix at `theta`.
    fn e_step(&self, theta: &ParamVector) -> Result<(f64, Array2<f64>)> {
        let mut joint = self.membership_logliks(theta);
        joint += &self.component_logliks(theta);
        let mut posterior = Array2::zeros((self.n_units, self.n_classes));
        let mut total = 0.0;
        for u in 0..self.n_units {
            let row = joint.row(u);
            let denom = crate::likelihood::lse_slice(row.as_slice().unwrap());
            if !denom.is_finite() {
                return Err(Error::NonFiniteLoglik);
            }
            total += denom;
            for c in 0..self.n_classes {
                posterior[(u, c)] = (row[c] - denom).exp();
            }
        }
        Ok((total, posterior))
    }

    /// One M-step: weighted-MNL re-fits of the membership model and every
    /// class component, warm-started at `theta`. Returns the new parameters
    /// and any separation or decrease warnings.
    fn m_step(
        &self,
        posterior: &Array2<f64>,
        theta: &ParamVector,
        inner: &MnlControls,
        warnings: &mut Vec<String>,
    ) -> Result<ParamVector> {
        let mut new_values = theta.as_array().clone();

        if let Some(t) = &self.membership_template {
            let mut block = t.block.clone();
            for (o, w) in block.weights.iter_mut().enumerate() {
                *w = posterior[(t.unit_of_obs[o], t.class_of_obs[o])];
            }
            let init: Vec<f64> = theta.as_slice()[t.range.clone()].to_vec();
            let before = mnl_weighted_loglik(&block, &init)?;
            let fit = fit_weighted_mnl(&block, &init, inner)?;
            if fit.loglik < before - 1e-9 {
                warnings.push(format!(
                    "membership M-step decreased its objective by {:.3e}",
                    before - fit.loglik
                ));
            }
            if fit.separation {
                warnings.push("membership parameters near a separation boundary".into());
            }
            for (j, v) in fit.params.iter().enumerate() {
                new_values[t.range.start + j] = *v;
            }
        }

        for (c, blocks) in self.components.iter().enumerate() {
            for t in blocks {
                let mut block = t.block.clone();
                for (o, w) in block.weights.iter_mut().enumerate() {
                    *w = posterior[(t.unit_of_obs[o], c)];
                }
                let init: Vec<f64> = theta.as_slice()[t.range.clone()].to_vec();
                let before = mnl_weighted_loglik(&block, &init)?;
                let t_fit = std::time::Instant::now();
                let fit = fit_weighted_mnl(&block, &init, inner)?;
                if std::env::var_os("LCCM_TRACE_EM").is_some() {
                    let mass: f64 = block.weights.iter().sum();
                    eprintln!(
                        "  class {} block ({} obs, {} params, mass {:.2}): {} iters, conv {}, sep {}, {:?}",
                        c + 1,
                        block.n_observations(),
                        block.n_params(),
                        mass,
                        fit.iterations,
                        fit.converged,
                        fit.separation,
                        t_fit.elapsed()
                    );
                }
                if fit.loglik < before - 1e-9 {
                    warnings.push(format!(
                        "class {} M-step decreased its objective by {:.3e}",
                        c + 1,
                        before - fit.loglik
                    ));
                }
                if fit.separation {
                    warnings.push(format!(
                        "class {} choice parameters near a separation boundary",
                        c + 1
                    ));
                }
                for (j, v) in fit.params.iter().enumerate() {
                    new_values[t.range.start + j] = *v;
                }
            }
        }

        ParamVector::new(new_values, &self.layout)
    }

    /// Analytic gradient of the observed log-likelihood (Fisher identity):
    /// membership score plus posterior-weighted component scores.
    pub(crate) fn observed_grad(&self, theta: &ParamVector) -> Result<Array1<f64>> {
        let (_, posterior) = self.e_step(theta)?;
        let mut grad = Array1::zeros(self.layout.len());

        let coefs = match self.level {
            ClassLevel::Individual => self.layout.individual_membership(theta, None),
            ClassLevel::Household => self.layout.household_membership(theta),
        };
        let range = match self.level {
            ClassLevel::Individual => self.layout.gamma[0].clone(),
            ClassLevel::Household => self.layout.alpha.clone(),
        };
        if !range.is_empty() {
            let width = self.membership_design.ncols();
            for u in 0..self.n_units {
                let lp = membership_log_probs(self.membership_design.row(u), &coefs);
                for c in 1..self.n_classes {
                    let resid = posterior[(u, c)] - lp[c].exp();
                    let offset = range.start + (c - 1) * width;
                    for j in 0..width {
                        grad[offset + j] += resid * self.membership_design[(u, j)];
                    }
                }
            }
        }

        for (c, blocks) in self.components.iter().enumerate() {
            for t in blocks {
                let mut block = t.block.clone();
                for (o, w) in block.weights.iter_mut().enumerate() {
                    *w = posterior[(t.unit_of_obs[o], c)];
                }
                let slice: Vec<f64> = theta.as_slice()[t.range.clone()].to_vec();
                let g = mnl_weighted_grad(&block, &slice)?;
                for (j, v) in g.iter().enumerate() {
                    grad[t.range.start + j] += *v;
                }
            }
        }
        Ok(grad)
    }

    pub(crate) fn observed_loglik(&self, theta: &ParamVector) -> Result<f64> {
        Ok(self.e_step(theta)?.0)
    }
}

/// Pseudo-observation block for a membership MNL: unit u contributes one
/// observation per class c with weight w_uc and chosen alternative c.
fn membership_template(
    design: &Array2<f64>,
    classes: usize,
    range: Range<usize>,
) -> Option<MembershipTemplate> {
    if range.is_empty() || classes < 2 {
        return None;
    }
    let units = design.nrows();
    let width = design.ncols();
    let n_params = (classes - 1) * width;
    debug_assert_eq!(n_params, range.len());
    let n_obs = units * classes;
    let mut pseudo = Array3::zeros((n_obs, classes, n_params));
    let mut choices = Vec::with_capacity(n_obs);
    let mut unit_of_obs = Vec::with_capacity(n_obs);
    let mut class_of_obs = Vec::with_capacity(n_obs);
    for u in 0..units {
        for c in 0..classes {
            let o = u * classes + c;
            for alt in 1..classes {
                let offset = (alt - 1) * width;
                for j in 0..width {
                    pseudo[(o, alt, offset + j)] = design[(u, j)];
                }
            }
            choices.push(c);
            unit_of_obs.push(u);
            class_of_obs.push(c);
        }
    }
    let block = ChoiceBlock::new(
        BlockDesign::PerObservation {
            design: pseudo,
            availability: Array2::from_elem((n_obs, classes), true),
        },
        choices,
        vec![0.0; n_obs],
    )
    .expect("membership pseudo block is structurally valid");
    Some(MembershipTemplate {
        block,
        unit_of_obs,
        class_of_obs,
        range,
    })
}

// ---------------------------------------------------------------------------
// EM outer loop
// ---------------------------------------------------------------------------

/// Alternate E-steps and weighted-MNL M-steps from `init` until the
/// log-likelihood or parameter change falls below tolerance.
pub fn em_fit(
    sub_model: SubModel,
    idx: &IndexedDataset,
    spec: &ModelSpec,
    init: &ParamVector,
    controls: &EmControls,
) -> Result<FitResult> {
    let problem = SingleLevelProblem::new(sub_model, idx, spec)?;
    em_fit_problem(sub_model, &problem, init, controls)
}

fn em_fit_problem(
    sub_model: SubModel,
    problem: &SingleLevelProblem,
    init: &ParamVector,
    controls: &EmControls,
) -> Result<FitResult> {
    if init.len() != problem.layout.len() {
        return Err(Error::Dimension {
            expected: problem.layout.len(),
            actual: init.len(),
            context: "initial parameters vs sub-model layout".into(),
        });
    }
    let mut warnings = Vec::new();
    let mut theta = init.clone();
    let (mut loglik, mut posterior) = problem.e_step(&theta)?;
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut degenerate_reported = vec![false; problem.n_classes];

    // One class: a single concave weighted-MNL fit reaches the maximizer.
    let max_iterations = if problem.n_classes == 1 {
        1
    } else {
        controls.max_iterations
    };

    let trace_em = std::env::var_os("LCCM_TRACE_EM").is_some();
    for iteration in 0..max_iterations {
        for c in 0..problem.n_classes {
            let mass: f64 = posterior.column(c).sum();
            if mass < 1e-8 && !degenerate_reported[c] {
                warnings.push(format!("class {} posterior mass vanished", c + 1));
                degenerate_reported[c] = true;
            }
        }

        let started = std::time::Instant::now();
        let new_theta = problem.m_step(&posterior, &theta, &controls.inner, &mut warnings)?;
        if trace_em {
            eprintln!(
                "em iter {iteration}: ll {loglik:.6}, m-step {:?}",
                started.elapsed()
            );
        }
        let (new_loglik, new_posterior) = problem.e_step(&new_theta)?;
        trace.push(new_loglik);
        if new_loglik < loglik - 1e-9 {
            warnings.push(format!(
                "EM iteration decreased the log-likelihood by {:.3e}",
                loglik - new_loglik
            ));
        }

        let param_delta = theta
            .as_array()
            .iter()
            .zip(new_theta.as_array())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        let rel = (new_loglik - loglik).abs() / loglik.abs().max(1.0);
        theta = new_theta;
        posterior = new_posterior;
        loglik = new_loglik;
        if rel <= controls.loglik_rel_tol || param_delta <= controls.param_abs_tol {
            converged = true;
            break;
        }
    }
    if problem.n_classes == 1 {
        converged = true;
    }

    let class_shares: Vec<f64> = (0..problem.n_classes)
        .map(|c| posterior.column(c).sum() / problem.n_units as f64)
        .collect();

    Ok(FitResult {
        sub_model,
        spec: problem.spec.clone(),
        layout: problem.layout.clone(),
        params: theta,
        trace,
        loglik,
        converged,
        posteriors: posterior,
        class_shares,
        class_labels: (1..=problem.n_classes).collect(),
        n_observations: problem.n_choice_observations,
        std_errors: None,
        t_stats: None,
        warnings,
        start_seed: controls.seed,
        start_logliks: vec![loglik],
        full_model: None,
    })
}

// ---------------------------------------------------------------------------
// Conditional membership (step 3)
// ---------------------------------------------------------------------------

/// Fixed first-stage estimates entering the conditional-membership fit.
#[derive(Debug, Clone)]
pub struct FixedStages {
    /// Full-model layout the fixed blocks are laid out against.
    pub layout: ParameterLayout,
    /// Full parameter vector with α, β, λ filled (γ entries are the
    /// starting values and are overwritten).
    pub params: ParamVector,
}

/// Maximize the full hierarchical likelihood over γ only, holding α, β, λ
/// fixed. EM over the joint (household, individual) posterior; the M-step
/// re-fits one membership MNL per household class with joint weights.
pub fn fit_conditional_membership(
    idx: &IndexedDataset,
    spec: &ModelSpec,
    fixed: &FixedStages,
    init_gamma: &ParamVector,
    controls: &EmControls,
) -> Result<FitResult> {
    let universe = ColumnUniverse::from_dataset(&idx.data);
    let spec = spec.resolve(&universe)?;
    let gamma_layout = build_layout(&spec, &universe, LayoutKind::ConditionalMembership)?;
    if init_gamma.len() != gamma_layout.len() {
        return Err(Error::Dimension {
            expected: gamma_layout.len(),
            actual: init_gamma.len(),
            context: "initial γ vs conditional layout".into(),
        });
    }

    let evaluator = HierEvaluator::with_layout(
        idx,
        spec.clone(),
        fixed.layout.clone(),
        controls.parallelism,
    )?;
    let full_layout = evaluator.layout().clone();
    let mut full = fixed.params.clone();
    write_gamma(&mut full, &full_layout, init_gamma, &gamma_layout);
    let fixed_snapshot = snapshot_non_gamma(&full, &full_layout);

    let w = covariate_matrix(
        idx.data.n_persons(),
        &idx.data.person_columns,
        &spec.individual_membership_variables,
        |i, c| idx.data.persons[i].covariates[c],
    )?;
    let r_count = spec.household_classes;
    let s_count = spec.individual_classes;
    let width = 1 + spec.individual_membership_variables.len();

    let mut warnings = Vec::new();
    let mut loglik = evaluator.full_loglik(&full)?;
    if !loglik.is_finite() {
        return Err(Error::NonFiniteLoglik);
    }
    let mut trace = vec![loglik];
    let mut converged = s_count == 1 || gamma_layout.is_empty();

    if !converged {
        let template = membership_template(&w, s_count, 0..(s_count - 1) * width)
            .expect("two or more individual classes");
        for _ in 0..controls.max_iterations {
            let post = evaluator.posteriors(&full)?;
            let mut new_full = full.clone();
            for r in 0..r_count {
                // Joint weight of pseudo-observation (person n, class s):
                // w_hr of the person's household times w_{s|r}.
                let mut block = template.block.clone();
                for (o, wgt) in block.weights.iter_mut().enumerate() {
                    let n = template.unit_of_obs[o];
                    let s = template.class_of_obs[o];
                    let h = idx.household_of(n);
                    *wgt = post.household[(h, r)] * post.person_given_household[r][(n, s)];
                }
                let range = full_layout.gamma[r].clone();
                let init: Vec<f64> = full.as_slice()[range.clone()].to_vec();
                let before = mnl_weighted_loglik(&block, &init)?;
                let fit = fit_weighted_mnl(&block, &init, &controls.inner)?;
                if fit.loglik < before - 1e-9 {
                    warnings.push(format!(
                        "γ M-step for household class {} decreased its objective",
                        r + 1
                    ));
                }
                if fit.separation {
                    warnings.push(format!(
                        "γ parameters for household class {} near a separation boundary",
                        r + 1
                    ));
                }
                let mut values = new_full.as_array().clone();
                for (j, v) in fit.params.iter().enumerate() {
                    values[range.start + j] = *v;
                }
                new_full = ParamVector::new(values, &full_layout)?;
            }

            let new_loglik = evaluator.full_loglik(&new_full)?;
            trace.push(new_loglik);
            if new_loglik < loglik - 1e-9 {
                warnings.push(format!(
                    "conditional EM decreased the log-likelihood by {:.3e}",
                    loglik - new_loglik
                ));
            }
            let param_delta = full
                .as_array()
                .iter()
                .zip(new_full.as_array())
                .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            let rel = (new_loglik - loglik).abs() / loglik.abs().max(1.0);
            full = new_full;
            loglik = new_loglik;
            if rel <= controls.loglik_rel_tol || param_delta <= controls.param_abs_tol {
                converged = true;
                break;
            }
        }
    }

    debug_assert_eq!(
        snapshot_non_gamma(&full, &full_layout),
        fixed_snapshot,
        "fixed blocks must stay bit-identical"
    );

    let post = evaluator.posteriors(&full)?;
    let gamma_params = extract_gamma(&full, &full_layout, &gamma_layout);
    let class_shares: Vec<f64> = (0..s_count)
        .map(|s| post.person_marginal.column(s).sum() / idx.data.n_persons() as f64)
        .collect();

    Ok(FitResult {
        sub_model: SubModel::ConditionalMembership,
        spec,
        layout: gamma_layout,
        params: gamma_params,
        trace,
        loglik,
        converged,
        posteriors: post.person_marginal.clone(),
        class_shares,
        class_labels: (1..=s_count).collect(),
        n_observations: idx.data.n_persons(),
        std_errors: None,
        t_stats: None,
        warnings,
        start_seed: controls.seed,
        start_logliks: vec![loglik],
        full_model: Some((full_layout, full)),
    })
}

fn write_gamma(
    full: &mut ParamVector,
    full_layout: &ParameterLayout,
    gamma: &ParamVector,
    gamma_layout: &ParameterLayout,
) {
    let mut values = full.as_array().clone();
    for (r, range) in gamma_layout.gamma.iter().enumerate() {
        let target = full_layout.gamma[r].clone();
        debug_assert_eq!(range.len(), target.len());
        for (j, src) in range.clone().enumerate() {
            values[target.start + j] = gamma.as_array()[src];
        }
    }
    *full = ParamVector {
        values,
    };
}

fn extract_gamma(
    full: &ParamVector,
    full_layout: &ParameterLayout,
    gamma_layout: &ParameterLayout,
) -> ParamVector {
    let mut values = Array1::zeros(gamma_layout.len());
    for (r, range) in gamma_layout.gamma.iter().enumerate() {
        let source = full_layout.gamma[r].clone();
        for (j, dst) in range.clone().enumerate() {
            values[dst] = full.as_array()[source.start + j];
        }
    }
    ParamVector { values }
}

fn snapshot_non_gamma(theta: &ParamVector, layout: &ParameterLayout) -> Vec<u64> {
    let in_gamma = |i: usize| layout.gamma.iter().any(|r| r.contains(&i));
    theta
        .as_array()
        .iter()
        .enumerate()
        .filter(|(i, _)| !in_gamma(*i))
        .map(|(_, v)| v.to_bits())
        .collect()
}

// ---------------------------------------------------------------------------
// Multi-start
// ---------------------------------------------------------------------------

/// Run a fit from explicitly provided initializations and keep the highest
/// final log-likelihood. Failed starts are recorded; all failing is an error.
pub fn multi_start_with<F>(
    fit: F,
    inits: &[(ParamVector, u64)],
) -> Result<FitResult>
where
    F: Fn(&ParamVector, u64) -> Result<FitResult>,
{
    let mut best: Option<FitResult> = None;
    let mut finals = Vec::with_capacity(inits.len());
    let mut failures = 0;
    for (init, seed) in inits {
        match fit(init, *seed) {
            Ok(result) => {
                finals.push(result.loglik);
                let better = best
                    .as_ref()
                    .map(|b| result.loglik > b.loglik)
                    .unwrap_or(true);
                if better {
                    let mut r = result;
                    r.start_seed = *seed;
                    best = Some(r);
                }
            }
            Err(_) => {
                failures += 1;
                finals.push(f64::NEG_INFINITY);
            }
        }
    }
    let mut best = best.ok_or(Error::AllStartsFailed(failures))?;
    best.start_logliks = finals;
    Ok(best)
}

/// Run `controls.starts` seeded random initializations of a fit and return
/// the best result.
pub fn multi_start<F>(
    fit: F,
    layout: &ParameterLayout,
    controls: &EmControls,
) -> Result<FitResult>
where
    F: Fn(&ParamVector, u64) -> Result<FitResult>,
{
    let inits: Vec<(ParamVector, u64)> = (0..controls.starts.max(1) as u64)
        .map(|k| {
            let seed = derive_seed(controls.seed, k);
            (
                seed_parameters(layout, InitStrategy::Random { scale: controls.init_scale }, seed),
                seed,
            )
        })
        .collect();
    multi_start_with(fit, &inits)
}

// ---------------------------------------------------------------------------
// Canonicalization
// ---------------------------------------------------------------------------

/// Relabel classes by descending prior share (ties broken by the first
/// parameter of each class block), re-normalizing membership blocks against
/// the new base class. The log-likelihood is unchanged.
pub fn canonicalize_classes(fit: &FitResult) -> Result<FitResult> {
    match fit.sub_model {
        SubModel::ModeLccm | SubModel::NeighbourhoodLccm => {}
        SubModel::ConditionalMembership => {
            // Class labels are inherited from the first two steps; nothing to
            // reorder here.
            return Ok(fit.clone());
        }
    }
    let c_count = fit.n_classes();
    let level = match fit.sub_model {
        SubModel::ModeLccm => ClassLevel::Individual,
        _ => ClassLevel::Household,
    };

    // Tie-break key: the first component parameter of the class, else 0.
    let first_param = |c: usize| -> f64 {
        let range = match level {
            ClassLevel::Individual => fit.layout.lambda[0][c].clone(),
            ClassLevel::Household => fit.layout.beta[c].clone(),
        };
        range.clone().next().map(|i| fit.params.as_array()[i]).unwrap_or(0.0)
    };
    let mut order: Vec<usize> = (0..c_count).collect();
    order.sort_by(|&a, &b| {
        fit.class_shares[b]
            .partial_cmp(&fit.class_shares[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                first_param(a)
                    .partial_cmp(&first_param(b))
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
    });

    permuted_fit(fit, &order, level)
}

/// Apply a class permutation to a single-level fit: `order[new] = old`.
pub(crate) fn permuted_fit(
    fit: &FitResult,
    order: &[usize],
    level: ClassLevel,
) -> Result<FitResult> {
    let c_count = fit.n_classes();
    if order.len() != c_count {
        return Err(Error::ClassCountMismatch {
            expected: c_count,
            actual: order.len(),
        });
    }

    // Permute the spec's per-class structure.
    let mut spec = fit.spec.clone();
    match level {
        ClassLevel::Individual => {
            spec.mode_classes = order.iter().map(|&c| fit.spec.mode_classes[c].clone()).collect();
        }
        ClassLevel::Household => {
            spec.neighbourhood_classes = order
                .iter()
                .map(|&c| fit.spec.neighbourhood_classes[c].clone())
                .collect();
        }
    }
    let universe = layout_universe(fit);
    let layout = build_layout(&spec, &universe, fit.layout.kind)?;
    let mut params = ParamVector::zeros(&layout);

    // Membership: permute the full coefficient matrix, then re-anchor on the
    // new base class.
    let (old_membership, membership_range, width) = match level {
        ClassLevel::Individual => (
            fit.layout.individual_membership(&fit.params, None),
            layout.gamma[0].clone(),
            fit.layout.individual_membership_width,
        ),
        ClassLevel::Household => (
            fit.layout.household_membership(&fit.params),
            layout.alpha.clone(),
            fit.layout.household_membership_width,
        ),
    };
    if !membership_range.is_empty() {
        let mut values = params.as_array().clone();
        let base_row: Vec<f64> = (0..width).map(|j| old_membership[(order[0], j)]).collect();
        let mut k = membership_range.start;
        for new_class in 1..c_count {
            for j in 0..width {
                values[k] = old_membership[(order[new_class], j)] - base_row[j];
                k += 1;
            }
        }
        params = ParamVector::new(values, &layout)?;
    }

    // Component blocks move wholesale.
    let mut values = params.as_array().clone();
    match level {
        ClassLevel::Individual => {
            for purpose in Purpose::ALL {
                for new_class in 0..c_count {
                    let src = fit.layout.lambda[purpose.index()][order[new_class]].clone();
                    let dst = layout.lambda[purpose.index()][new_class].clone();
                    debug_assert_eq!(src.len(), dst.len());
                    for (j, s) in src.enumerate() {
                        values[dst.start + j] = fit.params.as_array()[s];
                    }
                }
            }
        }
        ClassLevel::Household => {
            for new_class in 0..c_count {
                let src = fit.layout.beta[order[new_class]].clone();
                let dst = layout.beta[new_class].clone();
                debug_assert_eq!(src.len(), dst.len());
                for (j, s) in src.enumerate() {
                    values[dst.start + j] = fit.params.as_array()[s];
                }
            }
        }
    }
    let params = ParamVector::new(values, &layout)?;

    let mut posteriors = Array2::zeros(fit.posteriors.dim());
    for u in 0..fit.posteriors.nrows() {
        for (new_class, &old_class) in order.iter().enumerate() {
            posteriors[(u, new_class)] = fit.posteriors[(u, old_class)];
        }
    }
    let class_shares: Vec<f64> = order.iter().map(|&c| fit.class_shares[c]).collect();
    let class_labels: Vec<usize> = order.iter().map(|&c| fit.class_labels[c]).collect();

    Ok(FitResult {
        sub_model: fit.sub_model,
        spec,
        layout,
        params,
        trace: fit.trace.clone(),
        loglik: fit.loglik,
        converged: fit.converged,
        posteriors,
        class_shares,
        class_labels,
        n_observations: fit.n_observations,
        // Standard errors are layout-specific; recompute after relabeling.
        std_errors: None,
        t_stats: None,
        warnings: fit.warnings.clone(),
        start_seed: fit.start_seed,
        start_logliks: fit.start_logliks.clone(),
        full_model: None,
    })
}

/// Column universe sufficient to rebuild a fit's layout: resolved specs carry
/// their variable lists, so only the names already present are needed.
fn layout_universe(fit: &FitResult) -> ColumnUniverse {
    let mut universe = ColumnUniverse {
        household_columns: fit.spec.household_membership_variables.clone(),
        person_columns: fit.spec.individual_membership_variables.clone(),
        ..Default::default()
    };
    for class in &fit.spec.neighbourhood_classes {
        if let Some(vars) = &class.variables {
            for v in vars {
                if !universe.neighbourhood_columns.contains(v) {
                    universe.neighbourhood_columns.push(v.clone());
                }
            }
        }
        if let crate::config::TractConsideration::Tracts(list) = &class.consideration {
            for t in list {
                if !universe.tract_ids.contains(t) {
                    universe.tract_ids.push(t.clone());
                }
            }
        }
    }
    universe
}

// ---------------------------------------------------------------------------
// Three-step pipeline
// ---------------------------------------------------------------------------

/// Result of the sequential three-step estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThreeStepFit {
    pub mode: FitResult,
    pub neighbourhood: FitResult,
    pub conditional: FitResult,
    /// Spec with both class levels in canonical order.
    pub spec: ModelSpec,
    pub full_layout: ParameterLayout,
    pub full_params: ParamVector,
    /// The full hierarchical log-likelihood at the assembled parameters.
    pub combined_loglik: f64,
    pub posteriors: PosteriorMatrix,
    pub converged: bool,
}

/// Fit the mode sub-model, the neighbourhood sub-model (both multi-start and
/// canonicalized), then the conditional membership. The two sub-model fits
/// are independent of each other; only the third step depends on both.
pub fn three_step_fit(
    idx: &IndexedDataset,
    spec: &ModelSpec,
    controls: &EmControls,
) -> Result<ThreeStepFit> {
    let universe = ColumnUniverse::from_dataset(&idx.data);
    let spec = spec.resolve(&universe)?;

    let mode_problem = SingleLevelProblem::new(SubModel::ModeLccm, idx, &spec)?;
    let mode_fit = multi_start(
        |init, seed| {
            let mut c = controls.clone();
            c.seed = seed;
            em_fit_problem(SubModel::ModeLccm, &mode_problem, init, &c)
        },
        &mode_problem.layout,
        controls,
    )?;
    let mode_fit = canonicalize_classes(&mode_fit)?;

    let nbhd_problem = SingleLevelProblem::new(SubModel::NeighbourhoodLccm, idx, &spec)?;
    let nbhd_fit = multi_start(
        |init, seed| {
            let mut c = controls.clone();
            c.seed = seed;
            em_fit_problem(SubModel::NeighbourhoodLccm, &nbhd_problem, init, &c)
        },
        &nbhd_problem.layout,
        controls,
    )?;
    let nbhd_fit = canonicalize_classes(&nbhd_fit)?;

    assemble_and_condition(idx, &spec, mode_fit, nbhd_fit, controls)
}

/// Merge the canonical sub-model fits into the full layout, seed γ from the
/// unconditional membership, and run step 3.
pub fn assemble_and_condition(
    idx: &IndexedDataset,
    spec: &ModelSpec,
    mode_fit: FitResult,
    nbhd_fit: FitResult,
    controls: &EmControls,
) -> Result<ThreeStepFit> {
    let universe = ColumnUniverse::from_dataset(&idx.data);
    let mut merged = spec.resolve(&universe)?;
    merged.mode_classes = mode_fit.spec.mode_classes.clone();
    merged.neighbourhood_classes = nbhd_fit.spec.neighbourhood_classes.clone();

    let full_layout = build_layout(&merged, &universe, LayoutKind::Full)?;
    let mut values = Array1::zeros(full_layout.len());

    copy_range(
        &mut values,
        full_layout.alpha.clone(),
        nbhd_fit.params.as_slice(),
        nbhd_fit.layout.alpha.clone(),
    );
    for r in 0..merged.household_classes {
        copy_range(
            &mut values,
            full_layout.beta[r].clone(),
            nbhd_fit.params.as_slice(),
            nbhd_fit.layout.beta[r].clone(),
        );
    }
    for purpose in Purpose::ALL {
        for s in 0..merged.individual_classes {
            copy_range(
                &mut values,
                full_layout.lambda[purpose.index()][s].clone(),
                mode_fit.params.as_slice(),
                mode_fit.layout.lambda[purpose.index()][s].clone(),
            );
        }
    }
    // γ starts as the unconditional membership replicated per household class.
    for r in 0..merged.household_classes {
        copy_range(
            &mut values,
            full_layout.gamma[r].clone(),
            mode_fit.params.as_slice(),
            mode_fit.layout.gamma[0].clone(),
        );
    }
    let full_params = ParamVector::new(values, &full_layout)?;

    let gamma_layout = build_layout(&merged, &universe, LayoutKind::ConditionalMembership)?;
    let init_gamma = extract_gamma(&full_params, &full_layout, &gamma_layout);
    let fixed = FixedStages {
        layout: full_layout.clone(),
        params: full_params,
    };
    let conditional = fit_conditional_membership(idx, &merged, &fixed, &init_gamma, controls)?;

    let (final_layout, final_params) = conditional
        .full_model
        .clone()
        .expect("conditional fit carries the full model");
    let evaluator = HierEvaluator::with_layout(
        idx,
        merged.clone(),
        final_layout.clone(),
        controls.parallelism,
    )?;
    let combined_loglik = evaluator.full_loglik(&final_params)?;
    let posteriors = evaluator.posteriors(&final_params)?;
    let converged = mode_fit.converged && nbhd_fit.converged && conditional.converged;

    Ok(ThreeStepFit {
        mode: mode_fit,
        neighbourhood: nbhd_fit,
        conditional,
        spec: merged,
        full_layout: final_layout,
        full_params: final_params,
        combined_loglik,
        posteriors,
        converged,
    })
}

fn copy_range(target: &mut Array1<f64>, dst: Range<usize>, source: &[f64], src: Range<usize>) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.zip(src) {
        target[d] = source[s];
    }
}

// ---------------------------------------------------------------------------
// Standard errors
// ---------------------------------------------------------------------------

/// Per-parameter standard errors and t-statistics from the numerical Hessian
/// of the sub-model's observed log-likelihood. Entries are absent when the
/// Hessian is not invertible or a parameter sits at a separation boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Inference {
    pub std_errors: Vec<Option<f64>>,
    pub t_stats: Vec<Option<f64>>,
    pub hessian_ok: bool,
}

/// Compute standard errors for a fitted sub-model. The Hessian comes from
/// central differences of the analytic gradient with step 1e-5·max(1, |θ|);
/// SE = sqrt(diag((−H)⁻¹)); t = θ̂ / SE. Sequential two-step SEs ignore
/// first-stage estimation error, which is noted in the emitted reports.
pub fn standard_errors(
    fit: &FitResult,
    idx: &IndexedDataset,
    controls: &EmControls,
) -> Result<Inference> {
    let theta = &fit.params;
    let n = theta.len();
    if n == 0 {
        return Ok(Inference {
            std_errors: Vec::new(),
            t_stats: Vec::new(),
            hessian_ok: true,
        });
    }

    let grad_fn: Box<dyn Fn(&ParamVector) -> Result<Array1<f64>>> = match fit.sub_model {
        SubModel::ModeLccm | SubModel::NeighbourhoodLccm => {
            let problem = SingleLevelProblem::new(fit.sub_model, idx, &fit.spec)?;
            Box::new(move |t: &ParamVector| problem.observed_grad(t))
        }
        SubModel::ConditionalMembership => {
            let (full_layout, full_params) = fit
                .full_model
                .clone()
                .ok_or_else(|| Error::Spec("conditional fit lacks its full model".into()))?;
            let universe = ColumnUniverse::from_dataset(&idx.data);
            let spec = fit.spec.resolve(&universe)?;
            let gamma_layout = fit.layout.clone();
            let idx_ref = idx;
            let parallelism = controls.parallelism;
            Box::new(move |gamma: &ParamVector| {
                conditional_grad(
                    idx_ref,
                    &spec,
                    &full_layout,
                    &full_params,
                    &gamma_layout,
                    gamma,
                    parallelism,
                )
            })
        }
    };

    // Central differences of the gradient, column by column.
    let mut hessian = Array2::zeros((n, n));
    let base = theta.as_array().clone();
    for i in 0..n {
        let step = 1e-5 * base[i].abs().max(1.0);
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += step;
        minus[i] -= step;
        let gp = grad_fn(&ParamVector { values: plus })?;
        let gm = grad_fn(&ParamVector { values: minus })?;
        for j in 0..n {
            hessian[(i, j)] = (gp[j] - gm[j]) / (2.0 * step);
        }
    }
    // Symmetrize and negate: −H should be positive definite at a maximum.
    let mut neg_h = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            neg_h[(i, j)] = -0.5 * (hessian[(i, j)] + hessian[(j, i)]);
        }
    }

    let diag = cholesky(&neg_h).map(|l| inverse_diagonal(&l));
    let hessian_ok = diag.is_some();
    let mut std_errors = vec![None; n];
    let mut t_stats = vec![None; n];
    if let Some(diag) = diag {
        for i in 0..n {
            let at_boundary = base[i].abs() >= controls.inner.separation_norm;
            if !at_boundary && diag[i] > 0.0 {
                let se = diag[i].sqrt();
                std_errors[i] = Some(se);
                t_stats[i] = Some(base[i] / se);
            }
        }
    }
    Ok(Inference {
        std_errors,
        t_stats,
        hessian_ok,
    })
}

/// ∂LL/∂γ of the full likelihood with α, β, λ fixed, via the joint
/// posteriors: Σ_h w_hr Σ_n (w_{s|r} − P(g_s|r)) w_n per household class.
fn conditional_grad(
    idx: &IndexedDataset,
    spec: &ModelSpec,
    full_layout: &ParameterLayout,
    full_params: &ParamVector,
    gamma_layout: &ParameterLayout,
    gamma: &ParamVector,
    parallelism: Parallelism,
) -> Result<Array1<f64>> {
    let evaluator = HierEvaluator::with_layout(idx, spec.clone(), full_layout.clone(), parallelism)?;
    let mut full = full_params.clone();
    write_gamma(&mut full, full_layout, gamma, gamma_layout);
    let post = evaluator.posteriors(&full)?;

    let w = covariate_matrix(
        idx.data.n_persons(),
        &idx.data.person_columns,
        &spec.individual_membership_variables,
        |i, c| idx.data.persons[i].covariates[c],
    )?;
    let s_count = spec.individual_classes;
    let width = w.ncols();
    let mut grad = Array1::zeros(gamma_layout.len());
    for (r, range) in gamma_layout.gamma.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let coefs = full_layout.individual_membership(&full, Some(r + 1));
        for n in 0..idx.data.n_persons() {
            let h = idx.household_of(n);
            let w_hr = post.household[(h, r)];
            if w_hr == 0.0 {
                continue;
            }
            let lp = membership_log_probs(w.row(n), &coefs);
            for s in 1..s_count {
                let resid = w_hr * (post.person_given_household[r][(n, s)] - lp[s].exp());
                let offset = range.start + (s - 1) * width;
                for j in 0..width {
                    grad[offset + j] += resid * w[(n, j)];
                }
            }
        }
    }
    Ok(grad)
}

/// Dense lower-triangular Cholesky; `None` when the matrix is not positive
/// definite.
fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Diagonal of A⁻¹ given the Cholesky factor of A, via unit-vector solves.
fn inverse_diagonal(l: &Array2<f64>) -> Vec<f64> {
    let n = l.nrows();
    let mut diag = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut x = vec![0.0; n];
    for col in 0..n {
        for i in 0..n {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                sum -= l[(i, k)] * y[k];
            }
            y[i] = sum / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in (i + 1)..n {
                sum -= l[(k, i)] * x[k];
            }
            x[i] = sum / l[(i, i)];
        }
        diag[col] = x[col];
    }
    diag
}

#[cfg(test)]
pub(crate) fn assert_trace_monotone(trace: &[f64]) {
    for w in trace.windows(2) {
        assert!(
            w[1] >= w[0] - 1e-9,
            "EM trace decreased: {} -> {}",
            w[0],
            w[1]
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::index_dataset;
    use crate::synth::fixtures::{
        hier_two_by_two_truth, mode_two_class_truth, one_class_truth,
    };
    use crate::synth::{canonical_truth, recovery_report_parts, simulate_population};
    use approx::assert_abs_diff_eq;

    fn controls(seed: u64, starts: usize) -> EmControls {
        EmControls {
            starts,
            seed,
            ..EmControls::default()
        }
    }

    #[test]
    fn one_class_em_is_a_single_mnl_fit() {
        let truth = one_class_truth(3, 300);
        let (ds, _) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let layout = {
            let universe = ColumnUniverse::from_dataset(&ds);
            build_layout(&truth.model, &universe, LayoutKind::ModeSubModel).unwrap()
        };
        let init = seed_parameters(&layout, InitStrategy::Zeros, 0);
        let fit = em_fit(SubModel::ModeLccm, &idx, &truth.model, &init, &controls(1, 1)).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.trace.len(), 2);
        assert_trace_monotone(&fit.trace);
        assert_eq!(fit.class_shares, vec![1.0]);
        // The maximizer of a concave problem: zero score.
        let problem = SingleLevelProblem::new(SubModel::ModeLccm, &idx, &truth.model).unwrap();
        let grad = problem.observed_grad(&fit.params).unwrap();
        for g in &grad {
            assert!(g.abs() < 1e-4, "score component {g}");
        }
    }

    /// λ recovery within 0.1 on two-class synthetic mode data.
    #[test]
    fn two_class_mode_em_recovers_lambda() {
        let truth = mode_two_class_truth(11, 2000); // ~3000 persons
        let (ds, labels) = simulate_population(&truth).unwrap();
        assert!(ds.n_persons() >= 2500);
        let idx = index_dataset(&ds).unwrap();
        let problem = SingleLevelProblem::new(SubModel::ModeLccm, &idx, &truth.model).unwrap();
        let c = controls(11, 4);
        let fit = multi_start(
            |init, seed| {
                let mut cc = c.clone();
                cc.seed = seed;
                em_fit_problem(SubModel::ModeLccm, &problem, init, &cc)
            },
            &problem.layout,
            &c,
        )
        .unwrap();
        assert!(fit.converged);
        assert_trace_monotone(&fit.trace);
        let fit = canonicalize_classes(&fit).unwrap();

        let canon = canonical_truth(&truth, &labels).unwrap();
        for purpose in Purpose::ALL {
            for s in 1..=2 {
                let estimated = fit.layout.lambda_coefs(&fit.params, purpose, s);
                let true_vals = canon.layout.lambda_coefs(&canon.params, purpose, s);
                for (e, t) in estimated.iter().zip(true_vals) {
                    assert!(
                        (e - t).abs() < 0.1,
                        "{purpose} class {s}: estimated {e} vs true {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn em_from_maximizer_stops_immediately() {
        let truth = mode_two_class_truth(19, 250);
        let (ds, _) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let problem = SingleLevelProblem::new(SubModel::ModeLccm, &idx, &truth.model).unwrap();
        let c = controls(19, 1);
        let init = seed_parameters(&problem.layout, InitStrategy::Random { scale: 0.5 }, 5);
        let first = em_fit_problem(SubModel::ModeLccm, &problem, &init, &c).unwrap();
        let again = em_fit_problem(SubModel::ModeLccm, &problem, &first.params, &c).unwrap();
        assert!(again.converged);
        assert!(again.trace.len() <= 2, "trace: {:?}", again.trace);
        let delta = (again.trace[again.trace.len() - 1] - again.trace[0]).abs();
        assert!(delta <= 1e-8 * again.trace[0].abs().max(1.0));
    }

    #[test]
    fn multi_start_single_equals_single_fit() {
        let truth = mode_two_class_truth(23, 200);
        let (ds, _) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let problem = SingleLevelProblem::new(SubModel::ModeLccm, &idx, &truth.model).unwrap();
        let c = controls(23, 1);
        let best = multi_start(
            |init, seed| {
                let mut cc = c.clone();
                cc.seed = seed;
                em_fit_problem(SubModel::ModeLccm, &problem, init, &cc)
            },
            &problem.layout,
            &c,
        )
        .unwrap();
        let seed0 = derive_seed(23, 0);
        let single = em_fit_problem(
            SubModel::ModeLccm,
            &problem,
            &seed_parameters(&problem.layout, InitStrategy::Random { scale: 0.5 }, seed0),
            &controls(seed0, 1),
        )
        .unwrap();
        assert_eq!(best.params, single.params);
        assert_eq!(best.loglik, single.loglik);
        assert_eq!(best.start_logliks.len(), 1);
    }

    #[test]
    fn multi_start_on_concave_problem_agrees_across_starts() {
        let truth = one_class_truth(29, 250);
        let (ds, _) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let problem = SingleLevelProblem::new(SubModel::ModeLccm, &idx, &truth.model).unwrap();
        let c = controls(29, 5);
        let best = multi_start(
            |init, seed| {
                let mut cc = c.clone();
                cc.seed = seed;
                em_fit_problem(SubModel::ModeLccm, &problem, init, &cc)
            },
            &problem.layout,
            &c,
        )
        .unwrap();
        assert_eq!(best.start_logliks.len(), 5);
        for ll in &best.start_logliks {
            assert!((ll - best.loglik).abs() < 1e-6, "{ll} vs {}", best.loglik);
        }
    }

    #[test]
    fn multi_start_best_two_agree_on_mixture() {
        let truth = mode_two_class_truth(31, 900);
        let (ds, _) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let problem = SingleLevelProblem::new(SubModel::ModeLccm, &idx, &truth.model).unwrap();
        let c = controls(31, 10);
        let best = multi_start(
            |init, seed| {
                let mut cc = c.clone();
                cc.seed = seed;
                em_fit_problem(SubModel::ModeLccm, &problem, init, &cc)
            },
            &problem.layout,
            &c,
        )
        .unwrap();
        let mut finals = best.start_logliks.clone();
        finals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(
            (finals[0] - finals[1]).abs() < 1e-4,
            "best two starts disagree: {} vs {}",
            finals[0],
            finals[1]
        );
    }

    #[test]
    fn canonicalize_orders_identity_and_involution() {
        let truth = mode_two_class_truth(37, 700);
        let (ds, _) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let problem = SingleLevelProblem::new(SubModel::ModeLccm, &idx, &truth.model).unwrap();
        let c = controls(37, 3);
        let fit = multi_start(
            |init, seed| {
                let mut cc = c.clone();
                cc.seed = seed;
                em_fit_problem(SubModel::ModeLccm, &problem, init, &cc)
            },
            &problem.layout,
            &c,
        )
        .unwrap();
        let canonical = canonicalize_classes(&fit).unwrap();
        // Shares descend.
        for w in canonical.class_shares.windows(2) {
            assert!(w[0] >= w[1]);
        }
        // Already-ordered input: identity.
        let again = canonicalize_classes(&canonical).unwrap();
        assert_eq!(again.class_labels, canonical.class_labels);
        assert_eq!(again.params, canonical.params);

        // Swap, then canonicalize: original ordering restored.
        let swapped = permuted_fit(&canonical, &[1, 0], ClassLevel::Individual).unwrap();
        let restored = canonicalize_classes(&swapped).unwrap();
        for (a, b) in restored
            .params
            .as_array()
            .iter()
            .zip(canonical.params.as_array())
        {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // Log-likelihood untouched by relabeling.
        assert_eq!(restored.loglik, canonical.loglik);
        let problem_restored =
            SingleLevelProblem::new(SubModel::ModeLccm, &idx, &restored.spec).unwrap();
        let ll = problem_restored.observed_loglik(&restored.params).unwrap();
        assert_abs_diff_eq!(ll, canonical.loglik, epsilon = 1e-9);
    }

    #[test]
    fn conditional_with_one_household_class_matches_unconditional() {
        let truth = mode_two_class_truth(41, 600);
        let (ds, _) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let c = controls(41, 3);
        let result = three_step_fit(&idx, &truth.model, &c).unwrap();
        assert!(result.converged);
        // With R = 1, γ is exactly the unconditional membership block: the
        // mode-step membership is already its maximizer, so step 3 must not
        // move the likelihood and the blocks must agree.
        let gamma = result
            .conditional
            .full_model
            .as_ref()
            .map(|(layout, params)| {
                layout.individual_membership(params, Some(1))
            })
            .unwrap();
        let unconditional = result.mode.layout.individual_membership(&result.mode.params, None);
        for (a, b) in gamma.iter().zip(unconditional.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        assert_trace_monotone(&result.conditional.trace);
    }

    #[test]
    fn conditional_gamma_tracks_household_class() {
        let truth = hier_two_by_two_truth(43, 700);
        let (ds, _) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let c = controls(43, 4);
        let result = three_step_fit(&idx, &truth.model, &c).unwrap();
        let (layout, params) = result.conditional.full_model.as_ref().unwrap();
        let g1 = layout.individual_membership(params, Some(1));
        let g2 = layout.individual_membership(params, Some(2));
        let max_diff = g1
            .iter()
            .zip(g2.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(
            max_diff > 0.5,
            "γ blocks should differ strongly across household classes, max diff {max_diff}"
        );

        // The conditional fit improves on any household-independent γ.
        let mut flat = params.clone();
        let mut values = flat.as_array().clone();
        let block: Vec<f64> = params.as_slice()[layout.gamma[0].clone()].to_vec();
        for r in 1..result.spec.household_classes {
            let range = layout.gamma[r].clone();
            for (j, v) in block.iter().enumerate() {
                values[range.start + j] = *v;
            }
        }
        flat = ParamVector::new(values, layout).unwrap();
        let evaluator = HierEvaluator::with_layout(
            &idx,
            result.spec.clone(),
            layout.clone(),
            Parallelism::Sequential,
        )
        .unwrap();
        let flat_ll = evaluator.full_loglik(&flat).unwrap();
        assert!(
            result.combined_loglik > flat_ll + 1e-6,
            "conditional {} vs flat {}",
            result.combined_loglik,
            flat_ll
        );
    }

    #[test]
    fn degenerate_three_step_equals_flat_mnl_maximizers() {
        let truth = one_class_truth(47, 250);
        let (ds, _) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let c = controls(47, 2);
        let result = three_step_fit(&idx, &truth.model, &c).unwrap();
        assert!(result.converged);
        // R = S = 1: the combined value is the sum of the two flat MNL fits.
        assert_abs_diff_eq!(
            result.combined_loglik,
            result.mode.loglik + result.neighbourhood.loglik,
            epsilon = 1e-8
        );
    }

    #[test]
    fn three_step_beats_truth_gamma_given_fixed_stages() {
        let truth = hier_two_by_two_truth(23, 500);
        let (ds, labels) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let c = controls(23, 4);
        let result = three_step_fit(&idx, &truth.model, &c).unwrap();

        // Write the canonical true γ into the fitted α̂, β̂, λ̂ and compare.
        let canon = canonical_truth(&truth, &labels).unwrap();
        let (layout, params) = result.conditional.full_model.as_ref().unwrap();
        let mut values = params.as_array().clone();
        for r in 0..result.spec.household_classes {
            let dst = layout.gamma[r].clone();
            let src = canon.layout.gamma[r].clone();
            for (j, s) in src.enumerate() {
                values[dst.start + j] = canon.params.as_array()[s];
            }
        }
        let with_true_gamma = ParamVector::new(values, layout).unwrap();
        let evaluator = HierEvaluator::with_layout(
            &idx,
            result.spec.clone(),
            layout.clone(),
            Parallelism::Sequential,
        )
        .unwrap();
        let truth_gamma_ll = evaluator.full_loglik(&with_true_gamma).unwrap();
        assert!(
            result.combined_loglik >= truth_gamma_ll - 1e-6,
            "fitted γ {} vs true γ {}",
            result.combined_loglik,
            truth_gamma_ll
        );
    }

    #[test]
    fn three_step_is_deterministic() {
        let truth = hier_two_by_two_truth(53, 150);
        let (ds, _) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let c = controls(53, 2);
        let a = three_step_fit(&idx, &truth.model, &c).unwrap();
        let b = three_step_fit(&idx, &truth.model, &c).unwrap();
        assert_eq!(a.full_params, b.full_params);
        assert_eq!(a.combined_loglik, b.combined_loglik);
        assert_eq!(a.mode.trace, b.mode.trace);
    }

    #[test]
    fn recovery_metrics_match_independent_recomputation() {
        let truth = hier_two_by_two_truth(59, 400);
        let (ds, labels) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let c = controls(59, 3);
        let fit = three_step_fit(&idx, &truth.model, &c).unwrap();
        let report =
            recovery_report_parts(&truth, &labels, &fit.full_layout, &fit.full_params, &fit.posteriors)
                .unwrap();

        // Independent recomputation of the label accuracy.
        let canon = canonical_truth(&truth, &labels).unwrap();
        let mut hits = 0;
        for (h, &label) in labels.household_class.iter().enumerate() {
            let canonical_position = canon
                .household_order
                .iter()
                .position(|&old| old == label - 1)
                .unwrap();
            let row = fit.posteriors.household.row(h);
            let modal = (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            if modal == canonical_position {
                hits += 1;
            }
        }
        let accuracy = hits as f64 / labels.household_class.len() as f64;
        assert_abs_diff_eq!(report.household_label_accuracy, accuracy, epsilon = 1e-12);

        // Independent recomputation of a block error.
        let max_beta_err = canon
            .layout
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.block, crate::config::ParamBlock::Neighbourhood { .. }))
            .map(|(i, n)| {
                let j = fit.full_layout.flat_index(n).unwrap();
                (canon.params.as_array()[i] - fit.full_params.as_array()[j]).abs()
            })
            .fold(0.0_f64, f64::max);
        assert_abs_diff_eq!(
            report.block_max_abs_error["beta"],
            max_beta_err,
            epsilon = 1e-12
        );
    }

    #[test]
    fn null_t_statistic_is_small_in_most_replications() {
        let mut small_t = 0;
        for rep in 0..20 {
            let truth = one_class_truth(1000 + rep, 260);
            let (ds, _) = simulate_population(&truth).unwrap();
            let idx = index_dataset(&ds).unwrap();
            let c = controls(rep, 1);
            let problem = SingleLevelProblem::new(SubModel::ModeLccm, &idx, &truth.model).unwrap();
            let init = seed_parameters(&problem.layout, InitStrategy::Zeros, 0);
            let fit = em_fit_problem(SubModel::ModeLccm, &problem, &init, &c).unwrap();
            let inference = standard_errors(&fit, &idx, &c).unwrap();
            assert!(inference.hessian_ok);
            // asc_public_transit is truly zero in this design (mandatory).
            let name = crate::config::ParamName {
                block: crate::config::ParamBlock::Mode {
                    purpose: Purpose::Mandatory,
                    class: 1,
                },
                variable: "asc_public_transit".into(),
            };
            let i = fit.layout.flat_index(&name).unwrap();
            let t = inference.t_stats[i].unwrap();
            if t.abs() < 2.0 {
                small_t += 1;
            }
        }
        assert!(small_t >= 18, "only {small_t}/20 replications had |t| < 2");
    }

    #[test]
    fn standard_errors_shrink_with_sample_size() {
        let c = controls(3, 1);
        let fit_at = |households: usize| {
            let truth = one_class_truth(777, households);
            let (ds, _) = simulate_population(&truth).unwrap();
            let idx = index_dataset(&ds).unwrap();
            let problem = SingleLevelProblem::new(SubModel::ModeLccm, &idx, &truth.model).unwrap();
            let init = seed_parameters(&problem.layout, InitStrategy::Zeros, 0);
            let fit = em_fit_problem(SubModel::ModeLccm, &problem, &init, &c).unwrap();
            let inference = standard_errors(&fit, &idx, &c).unwrap();
            inference
                .std_errors
                .iter()
                .map(|se| se.unwrap())
                .collect::<Vec<f64>>()
        };
        let se_small = fit_at(400);
        let se_large = fit_at(800);
        let mean_ratio: f64 = se_large
            .iter()
            .zip(&se_small)
            .map(|(l, s)| l / s)
            .sum::<f64>()
            / se_small.len() as f64;
        let expected = std::f64::consts::FRAC_1_SQRT_2;
        assert!(
            (mean_ratio - expected).abs() / expected < 0.15,
            "mean SE ratio {mean_ratio} vs {expected}"
        );
    }

    #[test]
    fn separated_parameter_gets_no_standard_error() {
        // A deterministic class membership: persons with age above the median
        // always belong to class 2 by construction of disjoint mode sets.
        let truth = mode_two_class_truth(61, 300);
        let (ds, _) = simulate_population(&truth).unwrap();
        let idx = index_dataset(&ds).unwrap();
        let problem = SingleLevelProblem::new(SubModel::ModeLccm, &idx, &truth.model).unwrap();
        let c = controls(61, 2);
        let fit = multi_start(
            |init, seed| {
                let mut cc = c.clone();
                cc.seed = seed;
                em_fit_problem(SubModel::ModeLccm, &problem, init, &cc)
            },
            &problem.layout,
            &c,
        )
        .unwrap();
        // Force one parameter to the separation boundary and confirm it is
        // flagged rather than given a spurious SE.
        let mut forced = fit.clone();
        let mut values = forced.params.as_array().clone();
        values[0] = 75.0;
        forced.params = ParamVector::new(values, &forced.layout).unwrap();
        let inference = standard_errors(&forced, &idx, &c).unwrap();
        assert!(inference.std_errors[0].is_none());
        assert!(inference.t_stats[0].is_none());
    }
}
