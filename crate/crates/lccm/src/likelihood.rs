//! The hierarchical likelihood: household-class membership, class-specific
//! neighbourhood choice, individual-class membership conditional on the
//! household class, class-specific mode choice per tour purpose, and their
//! mixture.
//!
//! For household h with members n = 1..N_h the likelihood contribution is
//!
//! ```text
//! Σ_r P(q_hr) f_y(y_h | r) Π_n Σ_s f_m(m_hn | s) P(g_hns | q_hr)
//! ```
//!
//! Every mixing sum is evaluated in log space through `log_sum_exp`; the
//! products over tours would underflow in linear space. Unavailable
//! alternatives and consideration-set exclusions both appear as −∞ utility.
//! A chosen alternative outside a class's consideration set makes that class
//! impossible (−∞), which also covers tours whose effective choice set under
//! the class would be empty.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ColumnUniverse, LayoutKind, ModeEntry, ModelSpec, ParamVector, ParameterLayout, TractConsideration};
use crate::data::{IndexedDataset, Mode, Purpose};
use crate::error::{Error, Result};
use crate::mnl::log_sum_exp;

/// Execution mode for the per-household and per-tour loops. Sequential runs
/// are bit-reproducible; parallel runs reduce in a fixed order per item and
/// agree with sequential results to at least 1e-10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Parallelism {
    #[default]
    Sequential,
    Parallel,
}

/// E-step weights: household posteriors over r, person posteriors over s for
/// each r, and marginal person posteriors. Rows are normalized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorMatrix {
    /// H × R.
    pub household: Array2<f64>,
    /// Per household class r: persons × S.
    pub person_given_household: Vec<Array2<f64>>,
    /// Persons × S, `Σ_r w_hr · w_s|r`.
    pub person_marginal: Array2<f64>,
}

/// Multinomial-logit log membership probabilities with the first class as
/// base. `coefs` is classes × covariate width with row 0 fixed at zero.
pub fn membership_log_probs(covariates: ArrayView1<f64>, coefs: &Array2<f64>) -> Array1<f64> {
    let classes = coefs.nrows();
    let mut utilities = Array1::zeros(classes);
    for c in 0..classes {
        utilities[c] = coefs.row(c).dot(&covariates);
    }
    let denom = log_sum_exp(utilities.as_slice().unwrap()).expect("classes >= 1");
    utilities.mapv_inplace(|u| u - denom);
    utilities
}

pub(crate) struct NbhdClassCache {
    /// |J_r| × p_r design over the class consideration set.
    pub design: Array2<f64>,
    /// Position of each household's chosen tract within J_r, if considered.
    pub chosen_pos: Vec<Option<usize>>,
    /// Tract table rows making up J_r, in table order.
    pub tract_rows: Vec<usize>,
}

pub(crate) struct ModePurposeCache {
    /// Tours of this purpose × 5 × p_ds.
    pub design: Array3<f64>,
    /// Data availability intersected with the class consideration set.
    pub availability: Array2<bool>,
    pub chosen: Vec<usize>,
    /// Chosen mode lies inside the class consideration set.
    pub chosen_in_set: Vec<bool>,
    /// Original tour rows, aligned with the arrays above.
    pub tour_rows: Vec<usize>,
}

/// Covariate matrix with a leading constant column: rows × (1 + |vars|).
pub(crate) fn covariate_matrix(
    rows: usize,
    columns: &[String],
    variables: &[String],
    value: impl Fn(usize, usize) -> f64,
) -> Result<Array2<f64>> {
    let col_indices: Vec<usize> = variables
        .iter()
        .map(|v| {
            columns.iter().position(|c| c == v).ok_or_else(|| Error::UnknownVariable {
                name: v.clone(),
                valid: columns.to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    let mut m = Array2::zeros((rows, 1 + variables.len()));
    for i in 0..rows {
        m[(i, 0)] = 1.0;
        for (j, &c) in col_indices.iter().enumerate() {
            m[(i, 1 + j)] = value(i, c);
        }
    }
    Ok(m)
}

pub(crate) fn build_nbhd_caches(
    idx: &IndexedDataset,
    spec: &ModelSpec,
) -> Result<Vec<NbhdClassCache>> {
    let ds = &idx.data;
    let mut caches = Vec::with_capacity(spec.household_classes);
    for class in &spec.neighbourhood_classes {
        let tract_rows: Vec<usize> = match &class.consideration {
            TractConsideration::All => (0..ds.n_tracts()).collect(),
            TractConsideration::Tracts(list) => {
                let mut rows: Vec<usize> = list
                    .iter()
                    .map(|id| {
                        idx.tract_row(id).ok_or_else(|| Error::UnknownVariable {
                            name: id.clone(),
                            valid: ds.neighbourhoods.iter().map(|n| n.tract_id.clone()).collect(),
                        })
                    })
                    .collect::<Result<_>>()?;
                rows.sort_unstable();
                rows.dedup();
                rows
            }
        };
        if tract_rows.is_empty() {
            return Err(Error::EmptyInput("neighbourhood consideration set".into()));
        }
        let variables = class
            .variables
            .as_ref()
            .ok_or_else(|| Error::Spec("neighbourhood variables unresolved".into()))?;
        let col_indices: Vec<usize> = variables
            .iter()
            .map(|v| {
                ds.neighbourhood_columns
                    .iter()
                    .position(|c| c == v)
                    .ok_or_else(|| Error::UnknownVariable {
                        name: v.clone(),
                        valid: ds.neighbourhood_columns.clone(),
                    })
            })
            .collect::<Result<_>>()?;
        let mut design = Array2::zeros((tract_rows.len(), col_indices.len()));
        for (j, &row) in tract_rows.iter().enumerate() {
            for (k, &c) in col_indices.iter().enumerate() {
                design[(j, k)] = idx.attribute_matrix()[(row, c)];
            }
        }
        let chosen_pos: Vec<Option<usize>> = (0..ds.n_households())
            .map(|h| {
                let chosen_row = idx.chosen_tract_of(h);
                tract_rows.iter().position(|&r| r == chosen_row)
            })
            .collect();
        caches.push(NbhdClassCache {
            design,
            chosen_pos,
            tract_rows,
        });
    }
    Ok(caches)
}

pub(crate) fn build_mode_caches(
    idx: &IndexedDataset,
    spec: &ModelSpec,
    layout: &ParameterLayout,
) -> Vec<Vec<ModePurposeCache>> {
    let ds = &idx.data;
    let mut caches = Vec::with_capacity(2);
    for purpose in Purpose::ALL {
        let tour_rows: Vec<usize> = ds
            .tours
            .iter()
            .enumerate()
            .filter(|(_, t)| t.purpose == purpose)
            .map(|(i, _)| i)
            .collect();
        let mut per_class = Vec::with_capacity(spec.individual_classes);
        for s in 1..=spec.individual_classes {
            let class_spec = spec.mode_classes[s - 1].purpose(purpose);
            let entries = &layout.mode_entries[purpose.index()][s - 1];
            let width = entries.len();
            let mut design = Array3::zeros((tour_rows.len(), 5, width));
            let mut availability = Array2::from_elem((tour_rows.len(), 5), false);
            let mut chosen = Vec::with_capacity(tour_rows.len());
            let mut chosen_in_set = Vec::with_capacity(tour_rows.len());
            for (i, &row) in tour_rows.iter().enumerate() {
                let tour = &ds.tours[row];
                for mode in Mode::ALL {
                    let k = mode.index();
                    let alt = &tour.alternatives[k];
                    availability[(i, k)] = alt.available && class_spec.consideration.contains(&mode);
                    for (j, entry) in entries.iter().enumerate() {
                        design[(i, k, j)] = match entry {
                            ModeEntry::Asc(m) => {
                                if *m == mode {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            ModeEntry::Time => alt.time,
                            ModeEntry::Cost => alt.cost,
                        };
                    }
                }
                let c = tour.chosen_mode.index();
                chosen.push(c);
                chosen_in_set.push(availability[(i, c)]);
            }
            per_class.push(ModePurposeCache {
                design,
                availability,
                chosen,
                chosen_in_set,
                tour_rows: tour_rows.clone(),
            });
        }
        caches.push(per_class);
    }
    caches
}

/// Precomputed evaluator for the full hierarchical likelihood and its
/// posteriors. Immutable; per-household terms may be computed concurrently.
pub struct HierEvaluator<'a> {
    idx: &'a IndexedDataset,
    spec: ModelSpec,
    layout: ParameterLayout,
    /// Households × (1 + |z|).
    z: Array2<f64>,
    /// Persons × (1 + |w|).
    w: Array2<f64>,
    nbhd: Vec<NbhdClassCache>,
    /// `[purpose][class]`.
    mode: Vec<Vec<ModePurposeCache>>,
    /// Per purpose, per person: positions into the purpose tour arrays.
    tour_positions: Vec<Vec<Vec<usize>>>,
    parallelism: Parallelism,
}

impl<'a> HierEvaluator<'a> {
    pub fn new(idx: &'a IndexedDataset, spec: &ModelSpec, parallelism: Parallelism) -> Result<Self> {
        let universe = ColumnUniverse::from_dataset(&idx.data);
        let spec = spec.resolve(&universe)?;
        let layout = crate::config::build_layout(&spec, &universe, LayoutKind::Full)?;
        Self::with_layout(idx, spec, layout, parallelism)
    }

    pub(crate) fn with_layout(
        idx: &'a IndexedDataset,
        spec: ModelSpec,
        layout: ParameterLayout,
        parallelism: Parallelism,
    ) -> Result<Self> {
        let ds = &idx.data;
        let z = covariate_matrix(
            ds.n_households(),
            &ds.household_columns,
            &spec.household_membership_variables,
            |i, c| ds.households[i].covariates[c],
        )?;
        let w = covariate_matrix(
            ds.n_persons(),
            &ds.person_columns,
            &spec.individual_membership_variables,
            |i, c| ds.persons[i].covariates[c],
        )?;
        let nbhd = build_nbhd_caches(idx, &spec)?;
        let mode = build_mode_caches(idx, &spec, &layout);

        let mut tour_positions = Vec::with_capacity(2);
        for purpose in Purpose::ALL {
            let tour_rows = &mode[purpose.index()][0].tour_rows;
            let mut position_of_row = vec![usize::MAX; ds.n_tours()];
            for (pos, &row) in tour_rows.iter().enumerate() {
                position_of_row[row] = pos;
            }
            let per_person: Vec<Vec<usize>> = (0..ds.n_persons())
                .map(|n| {
                    idx.tours_of(n, purpose)
                        .iter()
                        .map(|&row| position_of_row[row])
                        .collect()
                })
                .collect();
            tour_positions.push(per_person);
        }

        Ok(HierEvaluator {
            idx,
            spec,
            layout,
            z,
            w,
            nbhd,
            mode,
            tour_positions,
            parallelism,
        })
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn check_theta(&self, theta: &ParamVector) -> Result<()> {
        if theta.len() != self.layout.len() {
            return Err(Error::Dimension {
                expected: self.layout.len(),
                actual: theta.len(),
                context: "parameter vector vs full layout".into(),
            });
        }
        Ok(())
    }

    /// Log P(q_hr = 1) over household classes for household `h`.
    pub fn household_class_log_probs(&self, h: usize, theta: &ParamVector) -> Result<Array1<f64>> {
        self.check_theta(theta)?;
        let alpha = self.layout.household_membership(theta);
        Ok(membership_log_probs(self.z.row(h), &alpha))
    }

    /// Log P(y_h | q_hr = 1): the chosen tract's log probability over the
    /// class consideration set, −∞ if the chosen tract is not considered.
    pub fn neighbourhood_loglik_given_class(
        &self,
        h: usize,
        theta: &ParamVector,
        r: usize,
    ) -> Result<f64> {
        self.check_theta(theta)?;
        let cache = &self.nbhd[r - 1];
        let beta = self.layout.beta_coefs(theta, r);
        let Some(pos) = cache.chosen_pos[h] else {
            return Ok(f64::NEG_INFINITY);
        };
        let utilities = cache.design.dot(&ArrayView1::from(beta));
        let denom = log_sum_exp(utilities.as_slice().unwrap())?;
        Ok(utilities[pos] - denom)
    }

    /// Log P(g_hns = 1 | q_hr = 1) over individual classes for person `n`,
    /// using the γ block of household class `r`.
    pub fn individual_class_log_probs(
        &self,
        n: usize,
        theta: &ParamVector,
        r: usize,
    ) -> Result<Array1<f64>> {
        self.check_theta(theta)?;
        let gamma = self.layout.individual_membership(theta, Some(r));
        Ok(membership_log_probs(self.w.row(n), &gamma))
    }

    /// Log f_m(m_hn | s): the sum over purposes and tours of the chosen
    /// mode's log probability under class `s`; −∞ as soon as a chosen mode
    /// falls outside the class consideration set.
    pub fn mode_loglik_given_class(&self, n: usize, theta: &ParamVector, s: usize) -> Result<f64> {
        self.check_theta(theta)?;
        let mut total = 0.0;
        for purpose in Purpose::ALL {
            let cache = &self.mode[purpose.index()][s - 1];
            let lambda = self.layout.lambda_coefs(theta, purpose, s);
            for &pos in &self.tour_positions[purpose.index()][n] {
                total += tour_log_prob(cache, pos, lambda);
            }
        }
        Ok(total)
    }

    /// Per-tour chosen-mode log probabilities for every tour of a purpose
    /// under class `s`, aligned with the purpose tour arrays.
    fn tour_log_probs(&self, theta: &ParamVector, purpose: Purpose, s: usize) -> Vec<f64> {
        let cache = &self.mode[purpose.index()][s - 1];
        let lambda = self.layout.lambda_coefs(theta, purpose, s);
        let n_tours = cache.chosen.len();
        match self.parallelism {
            Parallelism::Sequential => (0..n_tours).map(|i| tour_log_prob(cache, i, lambda)).collect(),
            Parallelism::Parallel => (0..n_tours)
                .into_par_iter()
                .map(|i| tour_log_prob(cache, i, lambda))
                .collect(),
        }
    }

    /// Persons × S matrix of log f_m.
    pub(crate) fn mode_logliks(&self, theta: &ParamVector) -> Array2<f64> {
        let n_persons = self.idx.data.n_persons();
        let s_count = self.spec.individual_classes;
        let mut fm = Array2::zeros((n_persons, s_count));
        for purpose in Purpose::ALL {
            for s in 1..=s_count {
                let lp = self.tour_log_probs(theta, purpose, s);
                for n in 0..n_persons {
                    let mut acc = 0.0;
                    for &pos in &self.tour_positions[purpose.index()][n] {
                        acc += lp[pos];
                    }
                    fm[(n, s - 1)] += acc;
                }
            }
        }
        fm
    }

    /// Households × R matrix of log f_y.
    pub(crate) fn neighbourhood_logliks(&self, theta: &ParamVector) -> Result<Array2<f64>> {
        let n_households = self.idx.data.n_households();
        let r_count = self.spec.household_classes;
        let mut fy = Array2::zeros((n_households, r_count));
        for r in 1..=r_count {
            let cache = &self.nbhd[r - 1];
            let beta = self.layout.beta_coefs(theta, r);
            let utilities = cache.design.dot(&ArrayView1::from(beta));
            let denom = log_sum_exp(utilities.as_slice().unwrap())?;
            for h in 0..n_households {
                fy[(h, r - 1)] = match cache.chosen_pos[h] {
                    Some(pos) => utilities[pos] - denom,
                    None => f64::NEG_INFINITY,
                };
            }
        }
        Ok(fy)
    }

    /// Households × R matrix of log P(q_hr).
    pub(crate) fn household_membership_logliks(&self, theta: &ParamVector) -> Array2<f64> {
        let alpha = self.layout.household_membership(theta);
        let n_households = self.idx.data.n_households();
        let mut a = Array2::zeros((n_households, self.spec.household_classes));
        for h in 0..n_households {
            a.row_mut(h).assign(&membership_log_probs(self.z.row(h), &alpha));
        }
        a
    }

    /// Per household class r: persons × S matrix of log P(g_hns | r).
    pub(crate) fn individual_membership_logliks(&self, theta: &ParamVector) -> Vec<Array2<f64>> {
        let n_persons = self.idx.data.n_persons();
        (1..=self.spec.household_classes)
            .map(|r| {
                let gamma = self.layout.individual_membership(theta, Some(r));
                let mut g = Array2::zeros((n_persons, self.spec.individual_classes));
                for n in 0..n_persons {
                    g.row_mut(n).assign(&membership_log_probs(self.w.row(n), &gamma));
                }
                g
            })
            .collect()
    }

    /// Per household: the vector over r of the full log contribution
    /// `log P(q_hr) + log f_y + Σ_n lse_s(log f_m + log P(g|r))`.
    fn household_class_terms(&self, theta: &ParamVector) -> Result<Array2<f64>> {
        self.check_theta(theta)?;
        let a = self.household_membership_logliks(theta);
        let fy = self.neighbourhood_logliks(theta)?;
        let fm = self.mode_logliks(theta);
        let g = self.individual_membership_logliks(theta);
        let r_count = self.spec.household_classes;
        let s_count = self.spec.individual_classes;
        let n_households = self.idx.data.n_households();

        let person_mix = |n: usize, r: usize| -> f64 {
            let mut buf = [0.0; 16];
            let mut tmp;
            let values: &mut [f64] = if s_count <= 16 {
                &mut buf[..s_count]
            } else {
                tmp = vec![0.0; s_count];
                &mut tmp
            };
            for s in 0..s_count {
                values[s] = fm[(n, s)] + g[r][(n, s)];
            }
            lse_slice(values)
        };

        let row = |h: usize| -> Vec<f64> {
            (0..r_count)
                .map(|r| {
                    let mut t = a[(h, r)] + fy[(h, r)];
                    if t == f64::NEG_INFINITY {
                        return f64::NEG_INFINITY;
                    }
                    for &n in self.idx.persons_of(h) {
                        t += person_mix(n, r);
                        if t == f64::NEG_INFINITY {
                            break;
                        }
                    }
                    t
                })
                .collect()
        };

        let rows: Vec<Vec<f64>> = match self.parallelism {
            Parallelism::Sequential => (0..n_households).map(row).collect(),
            Parallelism::Parallel => (0..n_households).into_par_iter().map(row).collect(),
        };
        let mut terms = Array2::zeros((n_households, r_count));
        for (h, r) in rows.into_iter().enumerate() {
            for (j, v) in r.into_iter().enumerate() {
                terms[(h, j)] = v;
            }
        }
        Ok(terms)
    }

    /// The full log-likelihood. Returns −∞ when some household is impossible
    /// under every class.
    pub fn full_loglik(&self, theta: &ParamVector) -> Result<f64> {
        let terms = self.household_class_terms(theta)?;
        let mut total = 0.0;
        for h in 0..terms.nrows() {
            total += lse_slice(terms.row(h).as_slice().unwrap());
        }
        Ok(total)
    }

    /// Exact posterior class weights at `theta`. A household with zero
    /// likelihood under every class is reported by id rather than clamped.
    pub fn posteriors(&self, theta: &ParamVector) -> Result<PosteriorMatrix> {
        let terms = self.household_class_terms(theta)?;
        let fm = self.mode_logliks(theta);
        let g = self.individual_membership_logliks(theta);
        let n_households = terms.nrows();
        let r_count = self.spec.household_classes;
        let s_count = self.spec.individual_classes;
        let n_persons = self.idx.data.n_persons();

        let mut household = Array2::zeros((n_households, r_count));
        for h in 0..n_households {
            let row = terms.row(h);
            let denom = lse_slice(row.as_slice().unwrap());
            if denom == f64::NEG_INFINITY {
                return Err(Error::ZeroLikelihoodHousehold(
                    self.idx.data.households[h].household_id.clone(),
                ));
            }
            for r in 0..r_count {
                household[(h, r)] = (row[r] - denom).exp();
            }
        }

        let mut person_given_household = Vec::with_capacity(r_count);
        for r in 0..r_count {
            let mut m = Array2::zeros((n_persons, s_count));
            for n in 0..n_persons {
                let mut values: Vec<f64> = (0..s_count).map(|s| fm[(n, s)] + g[r][(n, s)]).collect();
                let denom = lse_slice(&values);
                if denom == f64::NEG_INFINITY {
                    // Class r is impossible for this person's household; the
                    // joint weight is zero, keep the row normalized.
                    values.iter_mut().for_each(|v| *v = 1.0 / s_count as f64);
                } else {
                    values.iter_mut().for_each(|v| *v = (*v - denom).exp());
                }
                m.row_mut(n).assign(&Array1::from(values));
            }
            person_given_household.push(m);
        }

        let mut person_marginal = Array2::zeros((n_persons, s_count));
        for n in 0..n_persons {
            let h = self.idx.household_of(n);
            for r in 0..r_count {
                let w_hr = household[(h, r)];
                if w_hr == 0.0 {
                    continue;
                }
                for s in 0..s_count {
                    person_marginal[(n, s)] += w_hr * person_given_household[r][(n, s)];
                }
            }
        }

        Ok(PosteriorMatrix {
            household,
            person_given_household,
            person_marginal,
        })
    }
}

#[inline]
pub(crate) fn tour_log_prob(cache: &ModePurposeCache, pos: usize, lambda: &[f64]) -> f64 {
    if !cache.chosen_in_set[pos] {
        return f64::NEG_INFINITY;
    }
    let p = lambda.len();
    let d = cache.design.as_slice().expect("standard layout");
    let a = cache.availability.as_slice().expect("standard layout");
    let mut utilities = [f64::NEG_INFINITY; 5];
    crate::mnl::fill_utilities(
        &d[pos * 5 * p..(pos + 1) * 5 * p],
        &a[pos * 5..(pos + 1) * 5],
        lambda,
        &mut utilities,
    );
    let denom = lse_slice(&utilities);
    utilities[cache.chosen[pos]] - denom
}

#[inline]
pub(crate) fn lse_slice(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InitStrategy, ParamBlock, ParamName, seed_parameters};
    use crate::data::{
        Dataset, HouseholdRecord, ModeAlternative, NeighbourhoodAlternative, PersonRecord,
        TourRecord, index_dataset,
    };
    use approx::assert_abs_diff_eq;

    fn alt(available: bool, time: f64, cost: f64) -> ModeAlternative {
        ModeAlternative {
            available,
            time,
            cost,
        }
    }

    /// Two tracts, two households (one with two persons), tours on both
    /// purposes. Covariates: household `income`, person `age`.
    pub(crate) fn tiny_dataset() -> Dataset {
        let neighbourhoods = vec![
            NeighbourhoodAlternative {
                tract_id: "t1".into(),
                attributes: vec![0.2, 0.9],
            },
            NeighbourhoodAlternative {
                tract_id: "t2".into(),
                attributes: vec![0.8, 0.3],
            },
        ];
        let households = vec![
            HouseholdRecord {
                household_id: "h1".into(),
                chosen_tract: "t1".into(),
                covariates: vec![1.2],
                member_ids: vec!["p1".into(), "p2".into()],
            },
            HouseholdRecord {
                household_id: "h2".into(),
                chosen_tract: "t2".into(),
                covariates: vec![-0.4],
                member_ids: vec!["p3".into()],
            },
        ];
        let persons = vec![
            PersonRecord {
                person_id: "p1".into(),
                household_id: "h1".into(),
                covariates: vec![0.5],
            },
            PersonRecord {
                person_id: "p2".into(),
                household_id: "h1".into(),
                covariates: vec![-0.2],
            },
            PersonRecord {
                person_id: "p3".into(),
                household_id: "h2".into(),
                covariates: vec![0.9],
            },
        ];
        let tours = vec![
            TourRecord {
                tour_id: "r1".into(),
                person_id: "p1".into(),
                purpose: Purpose::Mandatory,
                alternatives: [
                    alt(true, 20.0, 3.0),
                    alt(false, 0.0, 0.0),
                    alt(true, 35.0, 1.5),
                    alt(true, 50.0, 0.0),
                    alt(true, 70.0, 0.0),
                ],
                chosen_mode: Mode::PublicTransit,
            },
            TourRecord {
                tour_id: "r2".into(),
                person_id: "p1".into(),
                purpose: Purpose::NonMandatory,
                alternatives: [
                    alt(true, 10.0, 2.0),
                    alt(true, 15.0, 6.0),
                    alt(true, 30.0, 1.0),
                    alt(false, 0.0, 0.0),
                    alt(true, 25.0, 0.0),
                ],
                chosen_mode: Mode::PrivateVehicle,
            },
            TourRecord {
                tour_id: "r3".into(),
                person_id: "p2".into(),
                purpose: Purpose::Mandatory,
                alternatives: [
                    alt(true, 18.0, 2.5),
                    alt(true, 22.0, 5.0),
                    alt(true, 40.0, 1.0),
                    alt(false, 0.0, 0.0),
                    alt(true, 45.0, 0.0),
                ],
                chosen_mode: Mode::Walk,
            },
            TourRecord {
                tour_id: "r4".into(),
                person_id: "p3".into(),
                purpose: Purpose::NonMandatory,
                alternatives: [
                    alt(true, 12.0, 1.0),
                    alt(false, 0.0, 0.0),
                    alt(false, 0.0, 0.0),
                    alt(true, 28.0, 0.0),
                    alt(true, 18.0, 0.0),
                ],
                chosen_mode: Mode::Bike,
            },
        ];
        Dataset {
            neighbourhood_columns: vec!["density".into(), "diversity".into()],
            household_columns: vec!["income".into()],
            person_columns: vec!["age".into()],
            neighbourhoods,
            households,
            persons,
            tours,
        }
    }

    fn spec_rs(r: usize, s: usize) -> ModelSpec {
        let mut spec = ModelSpec::with_defaults(r, s);
        spec.household_membership_variables = vec!["income".into()];
        spec.individual_membership_variables = vec!["age".into()];
        spec
    }

    #[test]
    fn zero_alpha_is_uniform() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(3, 2);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = ParamVector::zeros(ev.layout());
        let lp = ev.household_class_log_probs(0, &theta).unwrap();
        for p in lp {
            assert_abs_diff_eq!(p.exp(), 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_class_is_certain() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(1, 1);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = ParamVector::zeros(ev.layout());
        let lp = ev.household_class_log_probs(1, &theta).unwrap();
        assert_eq!(lp.len(), 1);
        assert_eq!(lp[0], 0.0);
    }

    #[test]
    fn membership_matches_naive_evaluation() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(3, 2);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = seed_parameters(ev.layout(), InitStrategy::Random { scale: 0.8 }, 42);
        let lp = ev.household_class_log_probs(0, &theta).unwrap();

        // Naive: direct exponentiation of z'α over the three classes.
        let z = [1.0, ds.households[0].covariates[0]];
        let mut utilities = vec![0.0; 3];
        for class in 2..=3 {
            for (j, var) in ["constant", "income"].iter().enumerate() {
                let v = theta
                    .get(
                        ev.layout(),
                        &ParamName {
                            block: ParamBlock::HouseholdMembership { class },
                            variable: var.to_string(),
                        },
                    )
                    .unwrap();
                utilities[class - 1] += v * z[j];
            }
        }
        let denom: f64 = utilities.iter().map(|u| u.exp()).sum();
        for (c, u) in utilities.iter().enumerate() {
            assert_abs_diff_eq!(lp[c].exp(), u.exp() / denom, epsilon = 1e-12);
        }
    }

    #[test]
    fn singleton_consideration_gives_certain_tract() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let mut spec = spec_rs(1, 1);
        spec.neighbourhood_classes[0].consideration = TractConsideration::Tracts(vec!["t1".into()]);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = seed_parameters(ev.layout(), InitStrategy::Random { scale: 1.0 }, 3);
        // h1 chose t1 (inside), h2 chose t2 (outside).
        assert_eq!(ev.neighbourhood_loglik_given_class(0, &theta, 1).unwrap(), 0.0);
        assert_eq!(
            ev.neighbourhood_loglik_given_class(1, &theta, 1).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn neighbourhood_loglik_matches_hand_softmax() {
        let mut ds = tiny_dataset();
        ds.neighbourhoods.push(NeighbourhoodAlternative {
            tract_id: "t3".into(),
            attributes: vec![0.5, 0.5],
        });
        let idx = index_dataset(&ds).unwrap();
        let mut spec = spec_rs(1, 1);
        spec.neighbourhood_classes[0].variables = Some(vec!["density".into()]);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let mut theta = ParamVector::zeros(ev.layout());
        theta
            .set(
                ev.layout(),
                &ParamName {
                    block: ParamBlock::Neighbourhood { class: 1 },
                    variable: "density".into(),
                },
                1.5,
            )
            .unwrap();
        let lp = ev.neighbourhood_loglik_given_class(0, &theta, 1).unwrap();
        let utilities: [f64; 3] = [1.5 * 0.2, 1.5 * 0.8, 1.5 * 0.5];
        let denom: f64 = utilities.iter().map(|u| u.exp()).sum();
        assert_abs_diff_eq!(lp.exp(), utilities[0].exp() / denom, epsilon = 1e-12);
    }

    #[test]
    fn individual_membership_depends_on_household_class() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(2, 2);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = ParamVector::zeros(ev.layout());
        let uniform = ev.individual_class_log_probs(0, &theta, 1).unwrap();
        for p in &uniform {
            assert_abs_diff_eq!(p.exp(), 0.5, epsilon = 1e-12);
        }

        // Same person, different γ blocks per household class.
        let mut theta = ParamVector::zeros(ev.layout());
        theta
            .set(
                ev.layout(),
                &ParamName {
                    block: ParamBlock::IndividualMembership {
                        household_class: Some(2),
                        class: 2,
                    },
                    variable: "constant".into(),
                },
                1.0,
            )
            .unwrap();
        let under_r1 = ev.individual_class_log_probs(0, &theta, 1).unwrap();
        let under_r2 = ev.individual_class_log_probs(0, &theta, 2).unwrap();
        assert_abs_diff_eq!(under_r1[1].exp(), 0.5, epsilon = 1e-12);
        assert!(under_r2[1].exp() > 0.7);
    }

    #[test]
    fn individual_membership_matches_naive() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(2, 3);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = seed_parameters(ev.layout(), InitStrategy::Random { scale: 0.7 }, 9);
        let lp = ev.individual_class_log_probs(2, &theta, 2).unwrap();
        let w = [1.0, ds.persons[2].covariates[0]];
        let mut utilities = vec![0.0; 3];
        for class in 2..=3 {
            for (j, var) in ["constant", "age"].iter().enumerate() {
                utilities[class - 1] += w[j]
                    * theta
                        .get(
                            ev.layout(),
                            &ParamName {
                                block: ParamBlock::IndividualMembership {
                                    household_class: Some(2),
                                    class,
                                },
                                variable: var.to_string(),
                            },
                        )
                        .unwrap();
            }
        }
        let denom: f64 = utilities.iter().map(|u| u.exp()).sum();
        for c in 0..3 {
            assert_abs_diff_eq!(lp[c].exp(), utilities[c].exp() / denom, epsilon = 1e-12);
        }
    }

    #[test]
    fn deterministic_class_mode_loglik() {
        let mut ds = tiny_dataset();
        // p3 drives on its single tour.
        ds.tours[3].chosen_mode = Mode::PrivateVehicle;
        let idx = index_dataset(&ds).unwrap();
        let mut spec = spec_rs(1, 1);
        spec.mode_classes[0].by_purpose[0].consideration =
            std::iter::once(Mode::PrivateVehicle).collect();
        spec.mode_classes[0].by_purpose[1].consideration =
            std::iter::once(Mode::PrivateVehicle).collect();
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = ParamVector::zeros(ev.layout());
        // Person 2 (p3) always drives: probability one.
        assert_eq!(ev.mode_loglik_given_class(2, &theta, 1).unwrap(), 0.0);
        // Person 0 (p1) chose public transit once: impossible for the class.
        assert_eq!(
            ev.mode_loglik_given_class(0, &theta, 1).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn mode_loglik_matches_naive_product() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(1, 1);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = seed_parameters(ev.layout(), InitStrategy::Random { scale: 0.05 }, 5);
        // Person p1 has tours r1 (mandatory) and r2 (non-mandatory).
        let total = ev.mode_loglik_given_class(0, &theta, 1).unwrap();

        let mut expected = 0.0;
        for (purpose, tour_row) in [(Purpose::Mandatory, 0usize), (Purpose::NonMandatory, 1usize)] {
            let tour = &ds.tours[tour_row];
            let entries = &ev.layout().mode_entries[purpose.index()][0];
            let lambda = ev.layout().lambda_coefs(&theta, purpose, 1);
            let mut num = 0.0;
            let mut denom = 0.0;
            for mode in Mode::ALL {
                let a = &tour.alternatives[mode.index()];
                if !a.available {
                    continue;
                }
                let mut u = 0.0;
                for (j, e) in entries.iter().enumerate() {
                    u += lambda[j]
                        * match e {
                            ModeEntry::Asc(m) => {
                                if *m == mode {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            ModeEntry::Time => a.time,
                            ModeEntry::Cost => a.cost,
                        };
                }
                denom += u.exp();
                if mode == tour.chosen_mode {
                    num = u.exp();
                }
            }
            expected += (num / denom).ln();
        }
        assert_abs_diff_eq!(total, expected, epsilon = 1e-10);
    }

    #[test]
    fn degenerate_mixture_equals_flat_mnl_sums() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(1, 1);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = seed_parameters(ev.layout(), InitStrategy::Random { scale: 0.05 }, 17);
        let full = ev.full_loglik(&theta).unwrap();

        let mut expected = 0.0;
        for h in 0..ds.n_households() {
            expected += ev.neighbourhood_loglik_given_class(h, &theta, 1).unwrap();
        }
        for n in 0..ds.n_persons() {
            expected += ev.mode_loglik_given_class(n, &theta, 1).unwrap();
        }
        assert_abs_diff_eq!(full, expected, epsilon = 1e-10);
    }

    #[test]
    fn shifting_one_tours_times_leaves_loglik_unchanged() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(2, 2);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = seed_parameters(ev.layout(), InitStrategy::Random { scale: 0.04 }, 23);
        let base = ev.full_loglik(&theta).unwrap();

        let mut shifted = ds.clone();
        for a in shifted.tours[2].alternatives.iter_mut() {
            if a.available {
                a.time += 37.5;
            }
        }
        let idx2 = index_dataset(&shifted).unwrap();
        let ev2 = HierEvaluator::new(&idx2, &spec, Parallelism::Sequential).unwrap();
        let moved = ev2.full_loglik(&theta).unwrap();
        assert_abs_diff_eq!(base, moved, epsilon = 1e-10);
    }

    #[test]
    fn unavailable_alternative_values_are_inert() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(2, 2);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = seed_parameters(ev.layout(), InitStrategy::Random { scale: 0.04 }, 31);
        let base = ev.full_loglik(&theta).unwrap();

        // Tour r1's private transit is unavailable; rewriting its
        // level-of-service must not move the likelihood at all.
        let mut modified = ds.clone();
        modified.tours[0].alternatives[Mode::PrivateTransit.index()].time = 9999.0;
        modified.tours[0].alternatives[Mode::PrivateTransit.index()].cost = -123.0;
        let idx2 = index_dataset(&modified).unwrap();
        let ev2 = HierEvaluator::new(&idx2, &spec, Parallelism::Sequential).unwrap();
        assert_abs_diff_eq!(base, ev2.full_loglik(&theta).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn duplicated_class_with_buried_constant_changes_nothing() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec2 = spec_rs(2, 2);
        let ev2 = HierEvaluator::new(&idx, &spec2, Parallelism::Sequential).unwrap();
        let theta2 = seed_parameters(ev2.layout(), InitStrategy::Random { scale: 0.3 }, 41);
        let base = ev2.full_loglik(&theta2).unwrap();

        // R → R + 1: class 3 duplicates class 2's β and γ with a −50
        // membership constant.
        let spec3 = spec_rs(3, 2);
        let ev3 = HierEvaluator::new(&idx, &spec3, Parallelism::Sequential).unwrap();
        let mut theta3 = ParamVector::zeros(ev3.layout());
        for name in ev2.layout().names() {
            let v = theta2.get(ev2.layout(), name).unwrap();
            theta3.set(ev3.layout(), name, v).unwrap();
        }
        for name in ev2.layout().names() {
            let clone_name = match &name.block {
                ParamBlock::HouseholdMembership { class: 2 } => ParamName {
                    block: ParamBlock::HouseholdMembership { class: 3 },
                    variable: name.variable.clone(),
                },
                ParamBlock::Neighbourhood { class: 2 } => ParamName {
                    block: ParamBlock::Neighbourhood { class: 3 },
                    variable: name.variable.clone(),
                },
                ParamBlock::IndividualMembership {
                    household_class: Some(2),
                    class,
                } => ParamName {
                    block: ParamBlock::IndividualMembership {
                        household_class: Some(3),
                        class: *class,
                    },
                    variable: name.variable.clone(),
                },
                _ => continue,
            };
            let v = theta2.get(ev2.layout(), name).unwrap();
            theta3.set(ev3.layout(), &clone_name, v).unwrap();
        }
        theta3
            .set(
                ev3.layout(),
                &ParamName {
                    block: ParamBlock::HouseholdMembership { class: 3 },
                    variable: "constant".into(),
                },
                -50.0,
            )
            .unwrap();
        let grown = ev3.full_loglik(&theta3).unwrap();
        assert!((grown - base).abs() < 1e-6, "{grown} vs {base}");
    }

    #[test]
    fn duplicated_parameters_give_uniform_posteriors() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(2, 2);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        // All-zero parameters duplicate every class.
        let theta = ParamVector::zeros(ev.layout());
        let post = ev.posteriors(&theta).unwrap();
        for h in 0..ds.n_households() {
            for r in 0..2 {
                assert_abs_diff_eq!(post.household[(h, r)], 0.5, epsilon = 1e-10);
            }
        }
        for n in 0..ds.n_persons() {
            for s in 0..2 {
                assert_abs_diff_eq!(post.person_marginal[(n, s)], 0.5, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn excluded_chosen_tract_zeroes_the_class_posterior() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let mut spec = spec_rs(2, 1);
        // Class 2 only considers t2; household h1 chose t1.
        spec.neighbourhood_classes[1].consideration = TractConsideration::Tracts(vec!["t2".into()]);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = ParamVector::zeros(ev.layout());
        let post = ev.posteriors(&theta).unwrap();
        assert_eq!(post.household[(0, 1)], 0.0);
        assert_abs_diff_eq!(post.household[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn posterior_rows_are_normalized() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(3, 3);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = seed_parameters(ev.layout(), InitStrategy::Random { scale: 0.2 }, 53);
        let post = ev.posteriors(&theta).unwrap();
        for h in 0..ds.n_households() {
            let sum: f64 = post.household.row(h).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-10);
        }
        for r in 0..3 {
            for n in 0..ds.n_persons() {
                let sum: f64 = post.person_given_household[r].row(n).sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-10);
            }
        }
        for n in 0..ds.n_persons() {
            let sum: f64 = post.person_marginal.row(n).sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-10);
            // Marginal equals the mixture of conditionals.
            let h = idx.household_of(n);
            for s in 0..3 {
                let mix: f64 = (0..3)
                    .map(|r| post.household[(h, r)] * post.person_given_household[r][(n, s)])
                    .sum();
                assert_abs_diff_eq!(post.person_marginal[(n, s)], mix, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn impossible_household_is_reported() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let mut spec = spec_rs(1, 1);
        spec.neighbourhood_classes[0].consideration = TractConsideration::Tracts(vec!["t2".into()]);
        let ev = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let theta = ParamVector::zeros(ev.layout());
        assert_eq!(ev.full_loglik(&theta).unwrap(), f64::NEG_INFINITY);
        let err = ev.posteriors(&theta).unwrap_err();
        assert!(matches!(err, Error::ZeroLikelihoodHousehold(id) if id == "h1"));
    }

    #[test]
    fn parallel_matches_sequential() {
        let ds = tiny_dataset();
        let idx = index_dataset(&ds).unwrap();
        let spec = spec_rs(2, 2);
        let seq = HierEvaluator::new(&idx, &spec, Parallelism::Sequential).unwrap();
        let par = HierEvaluator::new(&idx, &spec, Parallelism::Parallel).unwrap();
        let theta = seed_parameters(seq.layout(), InitStrategy::Random { scale: 0.1 }, 61);
        let a = seq.full_loglik(&theta).unwrap();
        let b = par.full_loglik(&theta).unwrap();
        assert!((a - b).abs() < 1e-10);
    }
}
