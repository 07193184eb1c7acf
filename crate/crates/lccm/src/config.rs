//! Declarative model specification and its flattening into one indexed
//! parameter vector.
//!
//! A model is declared in a TOML file:
//!
//! ```toml
//! [classes]
//! household = 2            # R
//! individual = 2           # S
//!
//! [membership]
//! household_variables = ["income", "vehicles"]   # z (a constant is always added)
//! individual_variables = ["age", "male"]         # w (a constant is always added)
//!
//! [neighbourhood.default]                        # applies to classes without a section
//! variables = ["density", "diversity"]           # default: every tract column
//! consideration = "all"                          # or an explicit tract list
//!
//! [mode.class_1]
//! consideration = ["private_vehicle"]            # singleton: no mode parameters
//!
//! [mode.class_2]
//! consideration = ["private_vehicle", "public_transit", "walk"]
//! ascs = ["public_transit", "walk"]              # default: all considered non-base modes
//! time = true
//! cost = true
//!
//! [mode.class_2.mandatory]                       # per-purpose override
//! cost = false
//! ```
//!
//! Normalization conventions are fixed: household class 1, individual class 1,
//! and the private-vehicle alternative-specific constant are the bases and
//! never receive parameters.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use ndarray::{Array1, Array2};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Mode, Purpose};
use crate::error::{Error, Result};

/// Base household class (1-based). Its membership coefficients are fixed at zero.
pub const BASE_HOUSEHOLD_CLASS: usize = 1;
/// Base individual class (1-based). Its membership coefficients are fixed at zero.
pub const BASE_INDIVIDUAL_CLASS: usize = 1;
/// Name of the automatic intercept added to every membership model.
pub const CONSTANT: &str = "constant";

/// Which tracts a household class considers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TractConsideration {
    All,
    Tracts(Vec<String>),
}

/// Neighbourhood-choice configuration of one household class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighbourhoodClassSpec {
    /// Tract attribute names entering the class utility. `None` means every
    /// column of the neighbourhood table (resolved against the data).
    pub variables: Option<Vec<String>>,
    pub consideration: TractConsideration,
}

impl Default for NeighbourhoodClassSpec {
    fn default() -> Self {
        NeighbourhoodClassSpec {
            variables: None,
            consideration: TractConsideration::All,
        }
    }
}

/// Mode-choice configuration of one individual class for one purpose.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModePurposeSpec {
    /// Consideration set K (non-empty; must contain the base mode whenever it
    /// holds more than one mode).
    pub consideration: BTreeSet<Mode>,
    /// Modes receiving an alternative-specific constant. `None` means every
    /// considered non-base mode.
    pub ascs: Option<BTreeSet<Mode>>,
    pub time: bool,
    pub cost: bool,
}

impl Default for ModePurposeSpec {
    fn default() -> Self {
        ModePurposeSpec {
            consideration: Mode::ALL.into_iter().collect(),
            ascs: None,
            time: true,
            cost: true,
        }
    }
}

impl ModePurposeSpec {
    /// Modes with an estimable alternative-specific constant, in mode order.
    pub fn asc_modes(&self) -> Vec<Mode> {
        if self.consideration.len() <= 1 {
            return Vec::new();
        }
        Mode::ALL
            .into_iter()
            .filter(|m| *m != Mode::BASE && self.consideration.contains(m))
            .filter(|m| self.ascs.as_ref().is_none_or(|a| a.contains(m)))
            .collect()
    }

    /// Ordered parameter entries for this (purpose, class) block. A singleton
    /// consideration set has no estimable parameters.
    pub fn entries(&self) -> Vec<ModeEntry> {
        if self.consideration.len() <= 1 {
            return Vec::new();
        }
        let mut entries: Vec<ModeEntry> = self.asc_modes().into_iter().map(ModeEntry::Asc).collect();
        if self.time {
            entries.push(ModeEntry::Time);
        }
        if self.cost {
            entries.push(ModeEntry::Cost);
        }
        entries
    }
}

/// Mode-choice configuration of one individual class (both purposes).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModeClassSpec {
    pub by_purpose: [ModePurposeSpec; 2],
}

impl ModeClassSpec {
    pub fn purpose(&self, d: Purpose) -> &ModePurposeSpec {
        &self.by_purpose[d.index()]
    }
}

/// One entry of a mode-utility parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeEntry {
    Asc(Mode),
    Time,
    Cost,
}

impl ModeEntry {
    pub fn variable_name(self) -> String {
        match self {
            ModeEntry::Asc(m) => format!("asc_{}", m.name()),
            ModeEntry::Time => "time".to_string(),
            ModeEntry::Cost => "cost".to_string(),
        }
    }
}

/// The full model declaration: class counts, consideration sets, and variable
/// lists. Immutable after parsing; shareable across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Household class count R.
    pub household_classes: usize,
    /// Individual class count S.
    pub individual_classes: usize,
    /// Household covariates z in the membership model (constant excluded).
    pub household_membership_variables: Vec<String>,
    /// Individual covariates w in the membership model (constant excluded).
    pub individual_membership_variables: Vec<String>,
    /// Per household class, length R.
    pub neighbourhood_classes: Vec<NeighbourhoodClassSpec>,
    /// Per individual class, length S.
    pub mode_classes: Vec<ModeClassSpec>,
}

impl ModelSpec {
    /// A spec with `r` household and `s` individual classes, every default
    /// applied: all modes and tracts considered, variables resolved later
    /// against the data.
    pub fn with_defaults(r: usize, s: usize) -> ModelSpec {
        ModelSpec {
            household_classes: r,
            individual_classes: s,
            household_membership_variables: Vec::new(),
            individual_membership_variables: Vec::new(),
            neighbourhood_classes: vec![NeighbourhoodClassSpec::default(); r],
            mode_classes: vec![ModeClassSpec::default(); s],
        }
    }

    /// Replicate class 1's configuration across a new class count, keeping
    /// membership variable lists. Used by class-count sweeps.
    pub fn with_class_count(&self, level: ClassLevel, count: usize) -> ModelSpec {
        let mut spec = self.clone();
        match level {
            ClassLevel::Household => {
                let template = self.neighbourhood_classes[0].clone();
                spec.household_classes = count;
                spec.neighbourhood_classes = vec![template; count];
            }
            ClassLevel::Individual => {
                let template = self.mode_classes[0].clone();
                spec.individual_classes = count;
                spec.mode_classes = vec![template; count];
            }
        }
        spec
    }

    fn check_structure(&self) -> Result<()> {
        if self.household_classes < 1 || self.individual_classes < 1 {
            return Err(Error::Spec("class counts R and S must be at least 1".into()));
        }
        if self.neighbourhood_classes.len() != self.household_classes {
            return Err(Error::Spec(format!(
                "expected {} neighbourhood class sections, found {}",
                self.household_classes,
                self.neighbourhood_classes.len()
            )));
        }
        if self.mode_classes.len() != self.individual_classes {
            return Err(Error::Spec(format!(
                "expected {} mode class sections, found {}",
                self.individual_classes,
                self.mode_classes.len()
            )));
        }
        for (s, class) in self.mode_classes.iter().enumerate() {
            for d in Purpose::ALL {
                let p = class.purpose(d);
                if p.consideration.is_empty() {
                    return Err(Error::Spec(format!(
                        "mode class {} has an empty consideration set for {} tours",
                        s + 1,
                        d
                    )));
                }
                if p.consideration.len() > 1 && !p.consideration.contains(&Mode::BASE) {
                    return Err(Error::Spec(format!(
                        "mode class {} must consider the base mode `{}` for {} tours",
                        s + 1,
                        Mode::BASE,
                        d
                    )));
                }
                if let Some(ascs) = &p.ascs {
                    if ascs.contains(&Mode::BASE) {
                        return Err(Error::Spec(format!(
                            "the `{}` constant is the normalization anchor and cannot be estimated",
                            Mode::BASE
                        )));
                    }
                    if let Some(m) = ascs.iter().find(|m| !p.consideration.contains(m)) {
                        return Err(Error::Spec(format!(
                            "mode class {}: asc for `{m}` is outside its consideration set",
                            s + 1
                        )));
                    }
                }
            }
        }
        for (r, class) in self.neighbourhood_classes.iter().enumerate() {
            if let TractConsideration::Tracts(list) = &class.consideration {
                if list.is_empty() {
                    return Err(Error::Spec(format!(
                        "neighbourhood class {} has an empty consideration set",
                        r + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Validate variable and tract names against the data and fill every
    /// defaulted variable list. Returns the resolved spec.
    pub fn resolve(&self, u: &ColumnUniverse) -> Result<ModelSpec> {
        self.check_structure()?;
        let mut spec = self.clone();
        check_names(&spec.household_membership_variables, &u.household_columns)?;
        check_names(&spec.individual_membership_variables, &u.person_columns)?;
        for class in &mut spec.neighbourhood_classes {
            match &class.variables {
                Some(vars) => check_names(vars, &u.neighbourhood_columns)?,
                None => class.variables = Some(u.neighbourhood_columns.clone()),
            }
            if let TractConsideration::Tracts(list) = &class.consideration {
                check_names(list, &u.tract_ids)?;
            }
        }
        Ok(spec)
    }
}

fn check_names(names: &[String], valid: &[String]) -> Result<()> {
    for name in names {
        if !valid.contains(name) {
            return Err(Error::UnknownVariable {
                name: name.clone(),
                valid: valid.to_vec(),
            });
        }
    }
    Ok(())
}

/// Which latent level a sweep or sub-model refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassLevel {
    Household,
    Individual,
}

/// The column names and tract identifiers a spec resolves against.
#[derive(Debug, Clone, Default)]
pub struct ColumnUniverse {
    pub neighbourhood_columns: Vec<String>,
    pub household_columns: Vec<String>,
    pub person_columns: Vec<String>,
    pub tract_ids: Vec<String>,
}

impl ColumnUniverse {
    pub fn from_dataset(ds: &Dataset) -> ColumnUniverse {
        ColumnUniverse {
            neighbourhood_columns: ds.neighbourhood_columns.clone(),
            household_columns: ds.household_columns.clone(),
            person_columns: ds.person_columns.clone(),
            tract_ids: ds.neighbourhoods.iter().map(|n| n.tract_id.clone()).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// TOML parsing
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    classes: RawClasses,
    #[serde(default)]
    membership: RawMembership,
    #[serde(default)]
    neighbourhood: HashMap<String, RawNbhdSection>,
    #[serde(default)]
    mode: HashMap<String, RawModeSection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClasses {
    household: i64,
    individual: i64,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawMembership {
    #[serde(default)]
    household_variables: Vec<String>,
    #[serde(default)]
    individual_variables: Vec<String>,
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct RawNbhdSection {
    variables: Option<Vec<String>>,
    consideration: Option<RawConsideration>,
}

#[derive(Deserialize, Clone)]
#[serde(untagged)]
enum RawConsideration {
    Keyword(String),
    List(Vec<String>),
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct RawModeSection {
    consideration: Option<Vec<String>>,
    ascs: Option<Vec<String>>,
    time: Option<bool>,
    cost: Option<bool>,
    mandatory: Option<RawModeOverride>,
    nonmandatory: Option<RawModeOverride>,
}

#[derive(Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct RawModeOverride {
    consideration: Option<Vec<String>>,
    ascs: Option<Vec<String>>,
    time: Option<bool>,
    cost: Option<bool>,
}

fn parse_class_key(key: &str, max: usize, context: &str) -> Result<Option<usize>> {
    if key == "default" {
        return Ok(None);
    }
    let n = key
        .strip_prefix("class_")
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| {
            Error::Spec(format!(
                "unknown {context} section `{key}` (expected `default` or `class_N`)"
            ))
        })?;
    if n < 1 || n > max {
        return Err(Error::Spec(format!(
            "{context} section `{key}` is outside 1..={max}"
        )));
    }
    Ok(Some(n))
}

fn parse_modes(names: &[String]) -> Result<BTreeSet<Mode>> {
    names
        .iter()
        .map(|name| {
            Mode::parse(name).ok_or_else(|| {
                Error::Spec(format!(
                    "unknown mode `{name}`; valid modes are {:?}",
                    Mode::ALL.map(|m| m.name())
                ))
            })
        })
        .collect()
}

fn apply_mode_keys(
    target: &mut ModePurposeSpec,
    consideration: &Option<Vec<String>>,
    ascs: &Option<Vec<String>>,
    time: Option<bool>,
    cost: Option<bool>,
) -> Result<()> {
    if let Some(c) = consideration {
        target.consideration = parse_modes(c)?;
    }
    if let Some(a) = ascs {
        target.ascs = Some(parse_modes(a)?);
    }
    if let Some(t) = time {
        target.time = t;
    }
    if let Some(c) = cost {
        target.cost = c;
    }
    Ok(())
}

/// Parse a model declaration from TOML text. Variable names are validated
/// later, against the data, by [`ModelSpec::resolve`].
pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("model spec: {e}")))?;
    if raw.classes.household < 1 || raw.classes.individual < 1 {
        return Err(Error::Spec("class counts R and S must be at least 1".into()));
    }
    let r = raw.classes.household as usize;
    let s = raw.classes.individual as usize;
    let mut spec = ModelSpec::with_defaults(r, s);
    spec.household_membership_variables = raw.membership.household_variables;
    spec.individual_membership_variables = raw.membership.individual_variables;

    let nbhd_default = raw.neighbourhood.get("default").cloned().unwrap_or_default();
    let mut nbhd_sections: Vec<RawNbhdSection> = vec![nbhd_default; r];
    for (key, section) in &raw.neighbourhood {
        if let Some(class) = parse_class_key(key, r, "neighbourhood")? {
            nbhd_sections[class - 1] = section.clone();
        }
    }
    for (class, section) in nbhd_sections.into_iter().enumerate() {
        let target = &mut spec.neighbourhood_classes[class];
        target.variables = section.variables;
        if let Some(consideration) = section.consideration {
            target.consideration = match consideration {
                RawConsideration::Keyword(k) if k == "all" => TractConsideration::All,
                RawConsideration::Keyword(k) => {
                    return Err(Error::Spec(format!(
                        "neighbourhood consideration must be \"all\" or a tract list, got `{k}`"
                    )))
                }
                RawConsideration::List(list) => TractConsideration::Tracts(list),
            };
        }
    }

    let mode_default = raw.mode.get("default").cloned().unwrap_or_default();
    let mut mode_sections: Vec<RawModeSection> = vec![mode_default; s];
    for (key, section) in &raw.mode {
        if let Some(class) = parse_class_key(key, s, "mode")? {
            mode_sections[class - 1] = section.clone();
        }
    }
    for (class, section) in mode_sections.into_iter().enumerate() {
        for d in Purpose::ALL {
            let target = &mut spec.mode_classes[class].by_purpose[d.index()];
            apply_mode_keys(target, &section.consideration, &section.ascs, section.time, section.cost)?;
            let purpose_override = match d {
                Purpose::Mandatory => &section.mandatory,
                Purpose::NonMandatory => &section.nonmandatory,
            };
            if let Some(o) = purpose_override {
                apply_mode_keys(target, &o.consideration, &o.ascs, o.time, o.cost)?;
            }
        }
    }

    spec.check_structure()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

/// Which parameter blocks a layout contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutKind {
    /// α, β, γ (per household class), λ — the full hierarchical model.
    Full,
    /// Unconditional individual membership plus λ.
    ModeSubModel,
    /// α plus β.
    NeighbourhoodSubModel,
    /// γ only (per household class), all else held fixed.
    ConditionalMembership,
}

/// A parameter block identifier. Class numbers are 1-based throughout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamBlock {
    /// α_r for household class r ≥ 2.
    HouseholdMembership { class: usize },
    /// β_r for household class r.
    Neighbourhood { class: usize },
    /// γ_rs for individual class s ≥ 2; `household_class` is `None` in the
    /// unconditional mode sub-model.
    IndividualMembership {
        household_class: Option<usize>,
        class: usize,
    },
    /// λ_ds for purpose d and individual class s.
    Mode { purpose: Purpose, class: usize },
}

/// A fully qualified parameter name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamName {
    pub block: ParamBlock,
    pub variable: String,
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.block {
            ParamBlock::HouseholdMembership { class } => {
                write!(f, "alpha[{class}]:{}", self.variable)
            }
            ParamBlock::Neighbourhood { class } => write!(f, "beta[{class}]:{}", self.variable),
            ParamBlock::IndividualMembership {
                household_class,
                class,
            } => match household_class {
                Some(r) => write!(f, "gamma[{r}][{class}]:{}", self.variable),
                None => write!(f, "gamma[*][{class}]:{}", self.variable),
            },
            ParamBlock::Mode { purpose, class } => {
                write!(f, "lambda[{purpose}][{class}]:{}", self.variable)
            }
        }
    }
}

/// Deterministic flattening of every estimable parameter. Fixed-at-zero
/// entries (base classes, base-mode constants) never receive indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub kind: LayoutKind,
    entries: Vec<ParamName>,
    #[serde(skip)]
    index: HashMap<ParamName, usize>,
    /// α block (may be empty).
    pub alpha: Range<usize>,
    /// β block per household class (R entries; empty when absent).
    pub beta: Vec<Range<usize>>,
    /// γ block per household class r (a single entry for the unconditional
    /// mode sub-model).
    pub gamma: Vec<Range<usize>>,
    /// λ block per purpose, per individual class.
    pub lambda: Vec<Vec<Range<usize>>>,
    /// Ordered utility entries per purpose, per individual class.
    pub mode_entries: Vec<Vec<Vec<ModeEntry>>>,
    pub n_household_classes: usize,
    pub n_individual_classes: usize,
    /// Membership design width 1 + |z|.
    pub household_membership_width: usize,
    /// Membership design width 1 + |w|.
    pub individual_membership_width: usize,
}

impl ParameterLayout {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> &[ParamName] {
        &self.entries
    }

    pub fn name(&self, flat_index: usize) -> &ParamName {
        &self.entries[flat_index]
    }

    pub fn flat_index(&self, name: &ParamName) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Rebuild the name→index map (needed after deserialization).
    pub fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    /// Compare the layout size against an externally tabulated parameter
    /// count; a mismatch is reported with both numbers.
    pub fn compare_count(&self, expected: usize) -> std::result::Result<(), String> {
        if self.len() == expected {
            Ok(())
        } else {
            Err(format!(
                "layout has {} parameters but the tabulated count is {expected}",
                self.len()
            ))
        }
    }

    /// Household membership coefficients as an R × (1+|z|) matrix with the
    /// base class row fixed at zero.
    pub fn household_membership(&self, theta: &ParamVector) -> Array2<f64> {
        self.membership_matrix(
            theta,
            self.n_household_classes,
            self.household_membership_width,
            self.alpha.clone(),
        )
    }

    /// Individual membership coefficients for household class `r` (1-based;
    /// pass `None` for the unconditional block) as an S × (1+|w|) matrix.
    pub fn individual_membership(&self, theta: &ParamVector, r: Option<usize>) -> Array2<f64> {
        let range = match r {
            Some(r) => self.gamma[r - 1].clone(),
            None => self.gamma[0].clone(),
        };
        self.membership_matrix(
            theta,
            self.n_individual_classes,
            self.individual_membership_width,
            range,
        )
    }

    fn membership_matrix(
        &self,
        theta: &ParamVector,
        classes: usize,
        width: usize,
        range: Range<usize>,
    ) -> Array2<f64> {
        let mut m = Array2::zeros((classes, width));
        let values = &theta.values;
        let mut k = range.start;
        for class in 1..classes {
            for j in 0..width {
                m[(class, j)] = values[k];
                k += 1;
            }
        }
        debug_assert_eq!(k, range.end);
        m
    }

    /// β coefficients of household class `r` (1-based).
    pub fn beta_coefs<'a>(&self, theta: &'a ParamVector, r: usize) -> &'a [f64] {
        let range = self.beta[r - 1].clone();
        &theta.values.as_slice().unwrap()[range]
    }

    /// λ coefficients for purpose `d` and individual class `s` (1-based).
    pub fn lambda_coefs<'a>(&self, theta: &'a ParamVector, d: Purpose, s: usize) -> &'a [f64] {
        let range = self.lambda[d.index()][s - 1].clone();
        &theta.values.as_slice().unwrap()[range]
    }
}

/// Build the layout of a resolved spec against the data.
pub fn build_parameter_layout(spec: &ModelSpec, ds: &Dataset) -> Result<ParameterLayout> {
    build_layout(spec, &ColumnUniverse::from_dataset(ds), LayoutKind::Full)
}

/// Build a layout of the requested kind, resolving the spec first.
pub fn build_layout(
    spec: &ModelSpec,
    universe: &ColumnUniverse,
    kind: LayoutKind,
) -> Result<ParameterLayout> {
    let spec = spec.resolve(universe)?;
    let r_count = spec.household_classes;
    let s_count = spec.individual_classes;
    let mut entries: Vec<ParamName> = Vec::new();

    let z_width = 1 + spec.household_membership_variables.len();
    let w_width = 1 + spec.individual_membership_variables.len();

    let membership_vars = |vars: &[String]| -> Vec<String> {
        std::iter::once(CONSTANT.to_string())
            .chain(vars.iter().cloned())
            .collect()
    };

    let mut alpha = 0..0;
    if matches!(kind, LayoutKind::Full | LayoutKind::NeighbourhoodSubModel) {
        let start = entries.len();
        for class in 2..=r_count {
            for variable in membership_vars(&spec.household_membership_variables) {
                entries.push(ParamName {
                    block: ParamBlock::HouseholdMembership { class },
                    variable,
                });
            }
        }
        alpha = start..entries.len();
    }

    let mut beta = Vec::new();
    if matches!(kind, LayoutKind::Full | LayoutKind::NeighbourhoodSubModel) {
        for class in 1..=r_count {
            let start = entries.len();
            let vars = spec.neighbourhood_classes[class - 1]
                .variables
                .as_ref()
                .expect("resolved spec has explicit variables");
            for variable in vars {
                entries.push(ParamName {
                    block: ParamBlock::Neighbourhood { class },
                    variable: variable.clone(),
                });
            }
            beta.push(start..entries.len());
        }
    }

    let mut gamma = Vec::new();
    match kind {
        LayoutKind::Full | LayoutKind::ConditionalMembership => {
            for r in 1..=r_count {
                let start = entries.len();
                for class in 2..=s_count {
                    for variable in membership_vars(&spec.individual_membership_variables) {
                        entries.push(ParamName {
                            block: ParamBlock::IndividualMembership {
                                household_class: Some(r),
                                class,
                            },
                            variable,
                        });
                    }
                }
                gamma.push(start..entries.len());
            }
        }
        LayoutKind::ModeSubModel => {
            let start = entries.len();
            for class in 2..=s_count {
                for variable in membership_vars(&spec.individual_membership_variables) {
                    entries.push(ParamName {
                        block: ParamBlock::IndividualMembership {
                            household_class: None,
                            class,
                        },
                        variable,
                    });
                }
            }
            gamma.push(start..entries.len());
        }
        LayoutKind::NeighbourhoodSubModel => {}
    }

    let mut lambda = Vec::new();
    let mut mode_entries = Vec::new();
    if matches!(kind, LayoutKind::Full | LayoutKind::ModeSubModel) {
        for purpose in Purpose::ALL {
            let mut per_class = Vec::new();
            let mut per_class_entries = Vec::new();
            for class in 1..=s_count {
                let start = entries.len();
                let entry_list = spec.mode_classes[class - 1].purpose(purpose).entries();
                for entry in &entry_list {
                    entries.push(ParamName {
                        block: ParamBlock::Mode { purpose, class },
                        variable: entry.variable_name(),
                    });
                }
                per_class.push(start..entries.len());
                per_class_entries.push(entry_list);
            }
            lambda.push(per_class);
            mode_entries.push(per_class_entries);
        }
    }

    let index: HashMap<ParamName, usize> = entries
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    if index.len() != entries.len() {
        return Err(Error::Spec("duplicate parameter name in layout".into()));
    }

    Ok(ParameterLayout {
        kind,
        entries,
        index,
        alpha,
        beta,
        gamma,
        lambda,
        mode_entries,
        n_household_classes: r_count,
        n_individual_classes: s_count,
        household_membership_width: z_width,
        individual_membership_width: w_width,
    })
}

// ---------------------------------------------------------------------------
// Parameter vectors
// ---------------------------------------------------------------------------

/// A flat real vector conforming to a [`ParameterLayout`]: finite entries,
/// length equal to the layout size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub(crate) values: Array1<f64>,
}

impl ParamVector {
    pub fn new(values: Array1<f64>, layout: &ParameterLayout) -> Result<ParamVector> {
        if values.len() != layout.len() {
            return Err(Error::Dimension {
                expected: layout.len(),
                actual: values.len(),
                context: "parameter vector vs layout".into(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Spec("parameter vector has non-finite entries".into()));
        }
        Ok(ParamVector { values })
    }

    pub fn zeros(layout: &ParameterLayout) -> ParamVector {
        ParamVector {
            values: Array1::zeros(layout.len()),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().unwrap()
    }

    pub fn get(&self, layout: &ParameterLayout, name: &ParamName) -> Option<f64> {
        layout.flat_index(name).map(|i| self.values[i])
    }

    pub fn set(&mut self, layout: &ParameterLayout, name: &ParamName, value: f64) -> Result<()> {
        let i = layout.flat_index(name).ok_or_else(|| {
            Error::Spec(format!("parameter `{name}` is not in the layout"))
        })?;
        self.values[i] = value;
        Ok(())
    }

    /// Euclidean norm, used by tests and separation checks.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Initialization strategy for [`seed_parameters`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitStrategy {
    Zeros,
    /// I.i.d. uniform(−scale, +scale) entries.
    Random { scale: f64 },
}

/// Deterministically seed a parameter vector for a layout.
pub fn seed_parameters(layout: &ParameterLayout, strategy: InitStrategy, seed: u64) -> ParamVector {
    match strategy {
        InitStrategy::Zeros => ParamVector::zeros(layout),
        InitStrategy::Random { scale } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Uniform::new_inclusive(-scale, scale);
            ParamVector {
                values: Array1::from_iter((0..layout.len()).map(|_| dist.sample(&mut rng))),
            }
        }
    }
}
