//! Forward sampler from known parameters: the independent oracle behind
//! likelihood tests, parameter-recovery runs, and desk-scale fixtures.
//!
//! Covariates and level-of-service attributes come from simple documented
//! generators (uniform, Bernoulli, categorical). Sampling reads the model
//! generatively: draw the household class from the membership model, the
//! tract from the class-specific neighbourhood model, each member's class
//! from the conditional membership model, and each tour's mode from the
//! class-specific mode choice model. One logical stream of randomness per
//! seed (`ChaCha8`), consumed in a fixed order, makes output reproducible.
//! True labels travel beside the dataset, never inside it.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::distributions::{Bernoulli, Distribution, Uniform, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{
    build_layout, ColumnUniverse, LayoutKind, ModelSpec, ParamBlock, ParamName, ParamVector,
    ParameterLayout, TractConsideration,
};
use crate::data::{
    Dataset, FormatOptions, HouseholdRecord, Mode, ModeAlternative, NeighbourhoodAlternative,
    PersonRecord, Purpose, TourRecord,
};
use crate::error::{Error, Result};
use crate::estimation::ThreeStepFit;
use crate::likelihood::{membership_log_probs, PosteriorMatrix};

/// A documented scalar generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Generator {
    Uniform { low: f64, high: f64 },
    Bernoulli { p: f64 },
    Categorical { values: Vec<f64>, weights: Vec<f64> },
}

impl Generator {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Generator::Uniform { low, high } => Uniform::new_inclusive(low, high).sample(rng),
            Generator::Bernoulli { p } => {
                if Bernoulli::new(*p).expect("validated").sample(rng) {
                    1.0
                } else {
                    0.0
                }
            }
            Generator::Categorical { values, weights } => {
                let idx = WeightedIndex::new(weights).expect("validated").sample(rng);
                values[idx]
            }
        }
    }

    fn validate(&self, context: &str) -> Result<()> {
        let ok = match self {
            Generator::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            Generator::Bernoulli { p } => (0.0..=1.0).contains(p),
            Generator::Categorical { values, weights } => {
                !values.is_empty()
                    && values.len() == weights.len()
                    && weights.iter().all(|w| *w >= 0.0)
                    && weights.iter().sum::<f64>() > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid generator for {context}")))
        }
    }
}

/// Inclusive integer range drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub fn fixed(n: usize) -> CountRange {
        CountRange { min: n, max: n }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        Uniform::new_inclusive(self.min, self.max).sample(rng)
    }
}

/// The generating model: spec, true parameters, population sizes, and
/// covariate/level-of-service generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub model: ModelSpec,
    pub households: usize,
    pub persons_per_household: CountRange,
    /// Tours per person, indexed by purpose.
    pub tours_per_purpose: [CountRange; 2],
    pub tract_count: usize,
    pub tract_attributes: Vec<(String, Generator)>,
    pub household_covariates: Vec<(String, Generator)>,
    pub person_covariates: Vec<(String, Generator)>,
    pub time: Generator,
    pub cost: Generator,
    /// Probability each non-base mode is available on a tour; the base mode
    /// is always available so every tour has a feasible alternative.
    pub availability: f64,
    pub seed: u64,
    /// True parameter values by name; unnamed parameters are zero.
    pub true_values: Vec<(ParamName, f64)>,
}

impl TruthSpec {
    fn tract_ids(&self) -> Vec<String> {
        (1..=self.tract_count).map(|i| format!("t{i:04}")).collect()
    }

    /// Column universe implied by the generators.
    pub fn universe(&self) -> ColumnUniverse {
        ColumnUniverse {
            neighbourhood_columns: self.tract_attributes.iter().map(|(n, _)| n.clone()).collect(),
            household_columns: self.household_covariates.iter().map(|(n, _)| n.clone()).collect(),
            person_columns: self.person_covariates.iter().map(|(n, _)| n.clone()).collect(),
            tract_ids: self.tract_ids(),
        }
    }

    /// The full-model layout of the generating spec.
    pub fn layout(&self) -> Result<ParameterLayout> {
        build_layout(&self.model, &self.universe(), LayoutKind::Full)
    }

    /// The true parameter vector against [`TruthSpec::layout`].
    pub fn truth_vector(&self) -> Result<ParamVector> {
        let layout = self.layout()?;
        let mut theta = ParamVector::zeros(&layout);
        for (name, value) in &self.true_values {
            theta.set(&layout, name, *value)?;
        }
        Ok(theta)
    }

    fn validate(&self) -> Result<()> {
        if self.households < 1 || self.tract_count < 1 {
            return Err(Error::Config("population sizes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.availability) {
            return Err(Error::Config("availability must lie in [0, 1]".into()));
        }
        for (name, g) in self
            .tract_attributes
            .iter()
            .chain(&self.household_covariates)
            .chain(&self.person_covariates)
        {
            g.validate(name)?;
        }
        self.time.validate("time")?;
        self.cost.validate("cost")?;
        Ok(())
    }
}

/// True class assignments, aligned with the dataset's household and person
/// row order. Classes are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrueLabels {
    pub household_class: Vec<usize>,
    pub person_class: Vec<usize>,
}

/// Draw an index from a log-probability vector.
pub(crate) fn sample_index(rng: &mut ChaCha8Rng, log_probs: &Array1<f64>) -> usize {
    let u: f64 = Uniform::new(0.0, 1.0).sample(rng);
    let mut cum = 0.0;
    let mut last_finite = 0;
    for (k, lp) in log_probs.iter().enumerate() {
        if *lp == f64::NEG_INFINITY {
            continue;
        }
        last_finite = k;
        cum += lp.exp();
        if u < cum {
            return k;
        }
    }
    last_finite
}

/// Simulate a full population from known parameters. Labels are returned
/// separately so estimation code cannot consume them.
pub fn simulate_population(truth: &TruthSpec) -> Result<(Dataset, TrueLabels)> {
    truth.validate()?;
    let universe = truth.universe();
    let model = truth.model.resolve(&universe)?;
    let layout = build_layout(&model, &universe, LayoutKind::Full)?;
    let theta = {
        let mut t = ParamVector::zeros(&layout);
        for (name, value) in &truth.true_values {
            t.set(&layout, name, *value)?;
        }
        t
    };
    let mut rng = ChaCha8Rng::seed_from_u64(truth.seed);

    // Tracts.
    let tract_ids = truth.tract_ids();
    let mut neighbourhoods = Vec::with_capacity(truth.tract_count);
    let mut attributes = Array2::zeros((truth.tract_count, truth.tract_attributes.len()));
    for (i, id) in tract_ids.iter().enumerate() {
        let values: Vec<f64> = truth
            .tract_attributes
            .iter()
            .map(|(_, g)| g.sample(&mut rng))
            .collect();
        for (j, &v) in values.iter().enumerate() {
            attributes[(i, j)] = v;
        }
        neighbourhoods.push(NeighbourhoodAlternative {
            tract_id: id.clone(),
            attributes: values,
        });
    }

    // Per-class tract utilities over the consideration set J_r.
    let nbhd_columns: Vec<String> =
        truth.tract_attributes.iter().map(|(n, _)| n.clone()).collect();
    let mut class_tract_log_probs: Vec<(Vec<usize>, Array1<f64>)> = Vec::new();
    for r in 1..=model.household_classes {
        let class = &model.neighbourhood_classes[r - 1];
        let rows: Vec<usize> = match &class.consideration {
            TractConsideration::All => (0..truth.tract_count).collect(),
            TractConsideration::Tracts(list) => list
                .iter()
                .map(|id| tract_ids.iter().position(|t| t == id).expect("resolved"))
                .collect(),
        };
        let vars = class.variables.as_ref().expect("resolved");
        let beta = layout.beta_coefs(&theta, r);
        let mut utilities = Array1::zeros(rows.len());
        for (k, &row) in rows.iter().enumerate() {
            let mut u = 0.0;
            for (j, var) in vars.iter().enumerate() {
                let col = nbhd_columns.iter().position(|c| c == var).expect("resolved");
                u += beta[j] * attributes[(row, col)];
            }
            utilities[k] = u;
        }
        let denom = crate::likelihood::lse_slice(utilities.as_slice().unwrap());
        utilities.mapv_inplace(|u| u - denom);
        class_tract_log_probs.push((rows, utilities));
    }

    let alpha = layout.household_membership(&theta);
    let gammas: Vec<Array2<f64>> = (1..=model.household_classes)
        .map(|r| layout.individual_membership(&theta, Some(r)))
        .collect();

    // Membership designs use the declared membership variables only.
    let z_indices: Vec<usize> = model
        .household_membership_variables
        .iter()
        .map(|v| {
            truth
                .household_covariates
                .iter()
                .position(|(n, _)| n == v)
                .expect("resolved against the universe")
        })
        .collect();
    let w_indices: Vec<usize> = model
        .individual_membership_variables
        .iter()
        .map(|v| {
            truth
                .person_covariates
                .iter()
                .position(|(n, _)| n == v)
                .expect("resolved against the universe")
        })
        .collect();

    let mut households = Vec::with_capacity(truth.households);
    let mut persons = Vec::new();
    let mut tours = Vec::new();
    let mut household_class = Vec::with_capacity(truth.households);
    let mut person_class = Vec::new();

    for h in 1..=truth.households {
        let household_id = format!("h{h:05}");
        let z: Vec<f64> = truth
            .household_covariates
            .iter()
            .map(|(_, g)| g.sample(&mut rng))
            .collect();
        let z_design =
            Array1::from_iter(std::iter::once(1.0).chain(z_indices.iter().map(|&j| z[j])));
        let r = sample_index(&mut rng, &membership_log_probs(z_design.view(), &alpha)) + 1;
        household_class.push(r);

        let (rows, lp) = &class_tract_log_probs[r - 1];
        let chosen_tract = tract_ids[rows[sample_index(&mut rng, lp)]].clone();

        let n_members = truth.persons_per_household.sample(&mut rng).max(1);
        let mut member_ids = Vec::with_capacity(n_members);
        for m in 1..=n_members {
            let person_id = format!("{household_id}p{m:02}");
            member_ids.push(person_id.clone());
            let w: Vec<f64> = truth
                .person_covariates
                .iter()
                .map(|(_, g)| g.sample(&mut rng))
                .collect();
            let w_design =
                Array1::from_iter(std::iter::once(1.0).chain(w_indices.iter().map(|&j| w[j])));
            let s =
                sample_index(&mut rng, &membership_log_probs(w_design.view(), &gammas[r - 1])) + 1;
            person_class.push(s);

            for purpose in Purpose::ALL {
                let n_tours = truth.tours_per_purpose[purpose.index()].sample(&mut rng);
                let class_spec = model.mode_classes[s - 1].purpose(purpose);
                let entries = &layout.mode_entries[purpose.index()][s - 1];
                let lambda = layout.lambda_coefs(&theta, purpose, s);
                for t in 1..=n_tours {
                    let tour_id = format!("{person_id}{}{t:02}", match purpose {
                        Purpose::Mandatory => "m",
                        Purpose::NonMandatory => "n",
                    });
                    let mut alternatives = [ModeAlternative {
                        available: false,
                        time: 0.0,
                        cost: 0.0,
                    }; 5];
                    for mode in Mode::ALL {
                        let available = mode == Mode::BASE
                            || Bernoulli::new(truth.availability)
                                .expect("validated")
                                .sample(&mut rng);
                        alternatives[mode.index()] = ModeAlternative {
                            available,
                            time: truth.time.sample(&mut rng),
                            cost: truth.cost.sample(&mut rng),
                        };
                    }
                    let mut utilities = Array1::from_elem(5, f64::NEG_INFINITY);
                    for mode in Mode::ALL {
                        let k = mode.index();
                        if !alternatives[k].available || !class_spec.consideration.contains(&mode) {
                            continue;
                        }
                        let mut u = 0.0;
                        for (j, entry) in entries.iter().enumerate() {
                            u += lambda[j]
                                * match entry {
                                    crate::config::ModeEntry::Asc(m) => {
                                        if *m == mode {
                                            1.0
                                        } else {
                                            0.0
                                        }
                                    }
                                    crate::config::ModeEntry::Time => alternatives[k].time,
                                    crate::config::ModeEntry::Cost => alternatives[k].cost,
                                };
                        }
                        utilities[k] = u;
                    }
                    let denom = crate::likelihood::lse_slice(utilities.as_slice().unwrap());
                    if denom == f64::NEG_INFINITY {
                        return Err(Error::EmptyChoiceSet {
                            class: s,
                            tour_id,
                        });
                    }
                    utilities.mapv_inplace(|u| u - denom);
                    let chosen_mode = Mode::ALL[sample_index(&mut rng, &utilities)];
                    tours.push(TourRecord {
                        tour_id,
                        person_id: person_id.clone(),
                        purpose,
                        alternatives,
                        chosen_mode,
                    });
                }
            }
            persons.push(PersonRecord {
                person_id,
                household_id: household_id.clone(),
                covariates: w,
            });
        }
        households.push(HouseholdRecord {
            household_id,
            chosen_tract,
            covariates: z,
            member_ids,
        });
    }

    let ds = Dataset {
        neighbourhood_columns: nbhd_columns,
        household_columns: truth.household_covariates.iter().map(|(n, _)| n.clone()).collect(),
        person_columns: truth.person_covariates.iter().map(|(n, _)| n.clone()).collect(),
        neighbourhoods,
        households,
        persons,
        tours,
    };
    Ok((
        ds,
        TrueLabels {
            household_class,
            person_class,
        },
    ))
}

/// Write labels to the fifth file: `unit,id,class`.
pub fn save_labels(labels: &TrueLabels, ds: &Dataset, path: &std::path::Path, fmt: &FormatOptions) -> Result<()> {
    let delim = fmt.delimiter as char;
    let mut text = format!("unit{delim}id{delim}class\n");
    for (h, class) in labels.household_class.iter().enumerate() {
        text.push_str(&format!(
            "household{delim}{}{delim}{class}\n",
            ds.households[h].household_id
        ));
    }
    for (n, class) in labels.person_class.iter().enumerate() {
        text.push_str(&format!(
            "person{delim}{}{delim}{class}\n",
            ds.persons[n].person_id
        ));
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Recovery metrics
// ---------------------------------------------------------------------------

/// Canonical form of the truth: classes ordered by descending empirical label
/// share at both levels, membership blocks re-anchored on the new base.
pub struct CanonicalTruth {
    pub spec: ModelSpec,
    pub layout: ParameterLayout,
    pub params: ParamVector,
    /// `household_order[new] = old` (0-based).
    pub household_order: Vec<usize>,
    pub individual_order: Vec<usize>,
}

/// Order classes by descending empirical share of the given 1-based labels.
fn share_order(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l - 1] += 1;
    }
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}

fn permute_membership(old: &Array2<f64>, order: &[usize]) -> Array2<f64> {
    let (classes, width) = old.dim();
    let mut new = Array2::zeros((classes, width));
    for (new_class, &old_class) in order.iter().enumerate() {
        for j in 0..width {
            new[(new_class, j)] = old[(old_class, j)] - old[(order[0], j)];
        }
    }
    new
}

/// Canonicalize the truth by the same ordering rule estimation uses
/// (descending class share), so fitted and true blocks align by name.
pub fn canonical_truth(truth: &TruthSpec, labels: &TrueLabels) -> Result<CanonicalTruth> {
    let universe = truth.universe();
    let model = truth.model.resolve(&universe)?;
    let layout = build_layout(&model, &universe, LayoutKind::Full)?;
    let theta = {
        let mut t = ParamVector::zeros(&layout);
        for (name, value) in &truth.true_values {
            t.set(&layout, name, *value)?;
        }
        t
    };
    let household_order = share_order(&labels.household_class, model.household_classes);
    let individual_order = share_order(&labels.person_class, model.individual_classes);

    let mut spec = model.clone();
    spec.neighbourhood_classes = household_order
        .iter()
        .map(|&r| model.neighbourhood_classes[r].clone())
        .collect();
    spec.mode_classes = individual_order
        .iter()
        .map(|&s| model.mode_classes[s].clone())
        .collect();
    let new_layout = build_layout(&spec, &universe, LayoutKind::Full)?;
    let mut values = Array1::zeros(new_layout.len());

    // α re-anchored on the new base household class.
    let alpha = permute_membership(&layout.household_membership(&theta), &household_order);
    let mut k = new_layout.alpha.start;
    for class in 1..spec.household_classes {
        for j in 0..layout.household_membership_width {
            values[k] = alpha[(class, j)];
            k += 1;
        }
    }
    // β moves wholesale.
    for (new_r, &old_r) in household_order.iter().enumerate() {
        let src = layout.beta[old_r].clone();
        let dst = new_layout.beta[new_r].clone();
        for (j, s) in src.enumerate() {
            values[dst.start + j] = theta.as_array()[s];
        }
    }
    // γ: permute household blocks, then individual classes inside each.
    for (new_r, &old_r) in household_order.iter().enumerate() {
        let gamma =
            permute_membership(&layout.individual_membership(&theta, Some(old_r + 1)), &individual_order);
        let dst = new_layout.gamma[new_r].clone();
        let mut k = dst.start;
        for class in 1..spec.individual_classes {
            for j in 0..layout.individual_membership_width {
                values[k] = gamma[(class, j)];
                k += 1;
            }
        }
    }
    // λ moves wholesale.
    for purpose in Purpose::ALL {
        for (new_s, &old_s) in individual_order.iter().enumerate() {
            let src = layout.lambda[purpose.index()][old_s].clone();
            let dst = new_layout.lambda[purpose.index()][new_s].clone();
            for (j, s) in src.enumerate() {
                values[dst.start + j] = theta.as_array()[s];
            }
        }
    }

    let params = ParamVector::new(values, &new_layout)?;
    Ok(CanonicalTruth {
        spec,
        layout: new_layout,
        params,
        household_order,
        individual_order,
    })
}

/// Parameter-recovery metrics for a canonicalized fit against the truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Max |θ̂ − θ| per block kind: `alpha`, `beta`, `gamma`, `lambda`.
    pub block_max_abs_error: BTreeMap<String, f64>,
    /// Max absolute difference between fitted and empirical class shares.
    pub household_share_error: f64,
    pub individual_share_error: f64,
    /// Fraction of units whose posterior-modal class equals the true label
    /// after canonical alignment.
    pub household_label_accuracy: f64,
    pub person_label_accuracy: f64,
}

/// Compare a canonicalized full-model fit against the generating truth.
pub fn recovery_report_parts(
    truth: &TruthSpec,
    labels: &TrueLabels,
    fit_layout: &ParameterLayout,
    fit_params: &ParamVector,
    posteriors: &PosteriorMatrix,
) -> Result<RecoveryReport> {
    let canon = canonical_truth(truth, labels)?;
    if canon.layout.len() != fit_layout.len() {
        return Err(Error::ClassCountMismatch {
            expected: canon.layout.len(),
            actual: fit_layout.len(),
        });
    }

    let mut block_max_abs_error: BTreeMap<String, f64> = BTreeMap::new();
    for (i, name) in canon.layout.names().iter().enumerate() {
        let fitted_index = fit_layout.flat_index(name).ok_or_else(|| {
            Error::Spec(format!("parameter `{name}` missing from the fitted layout"))
        })?;
        let err = (canon.params.as_array()[i] - fit_params.as_array()[fitted_index]).abs();
        let key = match name.block {
            ParamBlock::HouseholdMembership { .. } => "alpha",
            ParamBlock::Neighbourhood { .. } => "beta",
            ParamBlock::IndividualMembership { .. } => "gamma",
            ParamBlock::Mode { .. } => "lambda",
        };
        let slot = block_max_abs_error.entry(key.to_string()).or_insert(0.0);
        *slot = slot.max(err);
    }

    // Canonical position of each original 1-based label.
    let hh_position: Vec<usize> = {
        let mut pos = vec![0; canon.household_order.len()];
        for (new, &old) in canon.household_order.iter().enumerate() {
            pos[old] = new;
        }
        pos
    };
    let ind_position: Vec<usize> = {
        let mut pos = vec![0; canon.individual_order.len()];
        for (new, &old) in canon.individual_order.iter().enumerate() {
            pos[old] = new;
        }
        pos
    };

    let argmax = |row: ndarray::ArrayView1<f64>| -> usize {
        let mut best = 0;
        for (k, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = k;
            }
        }
        best
    };

    let n_households = labels.household_class.len();
    let mut hh_hits = 0usize;
    let mut fitted_hh_shares = vec![0.0; canon.household_order.len()];
    for h in 0..n_households {
        let modal = argmax(posteriors.household.row(h));
        if modal == hh_position[labels.household_class[h] - 1] {
            hh_hits += 1;
        }
        for (c, v) in posteriors.household.row(h).iter().enumerate() {
            fitted_hh_shares[c] += v / n_households as f64;
        }
    }
    let n_persons = labels.person_class.len();
    let mut person_hits = 0usize;
    let mut fitted_ind_shares = vec![0.0; canon.individual_order.len()];
    for n in 0..n_persons {
        let modal = argmax(posteriors.person_marginal.row(n));
        if modal == ind_position[labels.person_class[n] - 1] {
            person_hits += 1;
        }
        for (c, v) in posteriors.person_marginal.row(n).iter().enumerate() {
            fitted_ind_shares[c] += v / n_persons as f64;
        }
    }

    let empirical_share = |labels: &[usize], order: &[usize]| -> Vec<f64> {
        let mut counts = vec![0.0; order.len()];
        for &l in labels {
            counts[l - 1] += 1.0;
        }
        order.iter().map(|&old| counts[old] / labels.len() as f64).collect()
    };
    let hh_truth_shares = empirical_share(&labels.household_class, &canon.household_order);
    let ind_truth_shares = empirical_share(&labels.person_class, &canon.individual_order);
    let share_error = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
    };

    Ok(RecoveryReport {
        block_max_abs_error,
        household_share_error: share_error(&fitted_hh_shares, &hh_truth_shares),
        individual_share_error: share_error(&fitted_ind_shares, &ind_truth_shares),
        household_label_accuracy: hh_hits as f64 / n_households as f64,
        person_label_accuracy: person_hits as f64 / n_persons as f64,
    })
}

/// Compare a three-step fit against the generating truth.
pub fn recovery_report(
    truth: &TruthSpec,
    labels: &TrueLabels,
    fit: &ThreeStepFit,
) -> Result<RecoveryReport> {
    recovery_report_parts(truth, labels, &fit.full_layout, &fit.full_params, &fit.posteriors)
}

// ---------------------------------------------------------------------------
// TOML front end
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTruthConfig {
    population: RawPopulation,
    tracts: RawTracts,
    #[serde(default)]
    household_covariates: toml::value::Table,
    #[serde(default)]
    person_covariates: toml::value::Table,
    level_of_service: RawLevelOfService,
    model: toml::Value,
    #[serde(default)]
    truth: toml::value::Table,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPopulation {
    households: usize,
    seed: u64,
    persons_per_household: RawRange,
    mandatory_tours: RawRange,
    nonmandatory_tours: RawRange,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTracts {
    count: usize,
    attributes: toml::value::Table,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLevelOfService {
    time: RawGenerator,
    cost: RawGenerator,
    #[serde(default = "default_availability")]
    availability: f64,
}

fn default_availability() -> f64 {
    1.0
}

#[derive(Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct RawRange {
    min: usize,
    max: usize,
}

#[derive(Deserialize, Clone)]
#[serde(untagged)]
enum RawGenerator {
    Uniform { uniform: [f64; 2] },
    Bernoulli { bernoulli: f64 },
    Categorical { categorical: RawCategorical },
}

#[derive(Deserialize, Clone)]
struct RawCategorical {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl From<RawGenerator> for Generator {
    fn from(raw: RawGenerator) -> Generator {
        match raw {
            RawGenerator::Uniform { uniform } => Generator::Uniform {
                low: uniform[0],
                high: uniform[1],
            },
            RawGenerator::Bernoulli { bernoulli } => Generator::Bernoulli { p: bernoulli },
            RawGenerator::Categorical { categorical } => Generator::Categorical {
                values: categorical.values,
                weights: categorical.weights,
            },
        }
    }
}

impl From<RawRange> for CountRange {
    fn from(raw: RawRange) -> CountRange {
        CountRange {
            min: raw.min,
            max: raw.max,
        }
    }
}

fn generator_list(table: &toml::value::Table, context: &str) -> Result<Vec<(String, Generator)>> {
    table
        .iter()
        .map(|(name, value)| {
            let raw: RawGenerator = value.clone().try_into().map_err(|e| {
                Error::Config(format!("{context}.{name}: {e}"))
            })?;
            Ok((name.clone(), raw.into()))
        })
        .collect()
}

/// Parse parameter names like `truth.lambda.mandatory.2.time` from the
/// nested `[truth.*]` tables.
fn parse_truth_values(table: &toml::value::Table) -> Result<Vec<(ParamName, f64)>> {
    let mut out = Vec::new();
    let as_f64 = |v: &toml::Value, path: &str| -> Result<f64> {
        v.as_float()
            .or_else(|| v.as_integer().map(|i| i as f64))
            .ok_or_else(|| Error::Config(format!("truth.{path} must be a number")))
    };
    fn as_table<'v>(v: &'v toml::Value, path: &str) -> Result<&'v toml::value::Table> {
        v.as_table()
            .ok_or_else(|| Error::Config(format!("truth.{path} must be a table")))
    }
    let parse_class = |key: &str, path: &str| -> Result<usize> {
        key.parse::<usize>()
            .map_err(|_| Error::Config(format!("truth.{path}: `{key}` is not a class number")))
    };

    for (block, value) in table {
        match block.as_str() {
            "alpha" => {
                for (class, vars) in as_table(value, "alpha")? {
                    let class = parse_class(class, "alpha")?;
                    for (var, v) in as_table(vars, "alpha")? {
                        out.push((
                            ParamName {
                                block: ParamBlock::HouseholdMembership { class },
                                variable: var.clone(),
                            },
                            as_f64(v, "alpha")?,
                        ));
                    }
                }
            }
            "beta" => {
                for (class, vars) in as_table(value, "beta")? {
                    let class = parse_class(class, "beta")?;
                    for (var, v) in as_table(vars, "beta")? {
                        out.push((
                            ParamName {
                                block: ParamBlock::Neighbourhood { class },
                                variable: var.clone(),
                            },
                            as_f64(v, "beta")?,
                        ));
                    }
                }
            }
            "gamma" => {
                for (r, inner) in as_table(value, "gamma")? {
                    let r = parse_class(r, "gamma")?;
                    for (s, vars) in as_table(inner, "gamma")? {
                        let s = parse_class(s, "gamma")?;
                        for (var, v) in as_table(vars, "gamma")? {
                            out.push((
                                ParamName {
                                    block: ParamBlock::IndividualMembership {
                                        household_class: Some(r),
                                        class: s,
                                    },
                                    variable: var.clone(),
                                },
                                as_f64(v, "gamma")?,
                            ));
                        }
                    }
                }
            }
            "lambda" => {
                for (purpose, inner) in as_table(value, "lambda")? {
                    let purpose = Purpose::parse(purpose).ok_or_else(|| {
                        Error::Config(format!("truth.lambda: unknown purpose `{purpose}`"))
                    })?;
                    for (class, vars) in as_table(inner, "lambda")? {
                        let class = parse_class(class, "lambda")?;
                        for (var, v) in as_table(vars, "lambda")? {
                            out.push((
                                ParamName {
                                    block: ParamBlock::Mode { purpose, class },
                                    variable: var.clone(),
                                },
                                as_f64(v, "lambda")?,
                            ));
                        }
                    }
                }
            }
            other => {
                return Err(Error::Config(format!("unknown truth block `{other}`")));
            }
        }
    }
    Ok(out)
}

/// Parse a [`TruthSpec`] from TOML text (the `simulate` configuration file).
pub fn parse_truth_spec(text: &str) -> Result<TruthSpec> {
    let raw: RawTruthConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("truth spec: {e}")))?;
    let model_text = toml::to_string(&raw.model)
        .map_err(|e| Error::Config(format!("model section: {e}")))?;
    let model = crate::config::parse_model_spec(&model_text)?;
    let truth = TruthSpec {
        model,
        households: raw.population.households,
        persons_per_household: raw.population.persons_per_household.clone().into(),
        tours_per_purpose: [
            raw.population.mandatory_tours.clone().into(),
            raw.population.nonmandatory_tours.clone().into(),
        ],
        tract_count: raw.tracts.count,
        tract_attributes: generator_list(&raw.tracts.attributes, "tracts.attributes")?,
        household_covariates: generator_list(&raw.household_covariates, "household_covariates")?,
        person_covariates: generator_list(&raw.person_covariates, "person_covariates")?,
        time: {
            let g: Generator = raw.level_of_service.time.clone().into();
            g
        },
        cost: raw.level_of_service.cost.clone().into(),
        availability: raw.level_of_service.availability,
        seed: raw.population.seed,
        true_values: parse_truth_values(&raw.truth)?,
    };
    truth.validate()?;
    Ok(truth)
}
