//! Panel data model: neighbourhoods, households, persons, and tours.
//!
//! Four delimiter-separated tables with header rows:
//!
//! | table          | required columns                                   | free columns        |
//! |----------------|----------------------------------------------------|---------------------|
//! | neighbourhoods | `tract_id`                                         | numeric attributes  |
//! | households     | `household_id`, `chosen_tract`                     | numeric covariates  |
//! | persons        | `person_id`, `household_id`                        | numeric covariates  |
//! | tours          | `tour_id`, `person_id`, `purpose`, `chosen_mode`, and per mode `{mode}_available`, `{mode}_time`, `{mode}_cost` | — |
//!
//! `purpose` is `mandatory` or `nonmandatory`; mode names are
//! `private_vehicle`, `private_transit`, `public_transit`, `bike`, `walk`.
//! Identifiers are opaque strings. Delimiter and decimal separator are
//! configurable through [`FormatOptions`]. Time is in minutes, cost in
//! dollars; the loader performs no unit conversion.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five travel modes, in canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    PrivateVehicle,
    PrivateTransit,
    PublicTransit,
    Bike,
    Walk,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::PrivateVehicle,
        Mode::PrivateTransit,
        Mode::PublicTransit,
        Mode::Bike,
        Mode::Walk,
    ];

    /// Normalization anchor for alternative-specific constants.
    pub const BASE: Mode = Mode::PrivateVehicle;

    pub fn name(self) -> &'static str {
        match self {
            Mode::PrivateVehicle => "private_vehicle",
            Mode::PrivateTransit => "private_transit",
            Mode::PublicTransit => "public_transit",
            Mode::Bike => "bike",
            Mode::Walk => "walk",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn index(self) -> usize {
        Mode::ALL.iter().position(|m| *m == self).unwrap()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Tour purpose. Exactly two purposes exist (D = 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Mandatory,
    NonMandatory,
}

impl Purpose {
    pub const ALL: [Purpose; 2] = [Purpose::Mandatory, Purpose::NonMandatory];

    pub fn name(self) -> &'static str {
        match self {
            Purpose::Mandatory => "mandatory",
            Purpose::NonMandatory => "nonmandatory",
        }
    }

    pub fn parse(s: &str) -> Option<Purpose> {
        Purpose::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn index(self) -> usize {
        match self {
            Purpose::Mandatory => 0,
            Purpose::NonMandatory => 1,
        }
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Delimiter and decimal separator for the tabular files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormatOptions {
    pub delimiter: u8,
    pub decimal: char,
}

impl Default for FormatOptions {
    fn default() -> Self {
        FormatOptions {
            delimiter: b',',
            decimal: '.',
        }
    }
}

/// One census-tract alternative. `attributes` aligns with
/// [`Dataset::neighbourhood_columns`].
#[derive(Debug, Clone, PartialEq)]
pub struct NeighbourhoodAlternative {
    pub tract_id: String,
    pub attributes: Vec<f64>,
}

/// One household row. `covariates` aligns with [`Dataset::household_columns`];
/// `member_ids` is derived from the person table at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdRecord {
    pub household_id: String,
    pub chosen_tract: String,
    pub covariates: Vec<f64>,
    pub member_ids: Vec<String>,
}

/// One person row. `covariates` aligns with [`Dataset::person_columns`].
#[derive(Debug, Clone, PartialEq)]
pub struct PersonRecord {
    pub person_id: String,
    pub household_id: String,
    pub covariates: Vec<f64>,
}

/// Level-of-service of one mode on one tour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeAlternative {
    pub available: bool,
    pub time: f64,
    pub cost: f64,
}

/// One observed tour with its five mode alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TourRecord {
    pub tour_id: String,
    pub person_id: String,
    pub purpose: Purpose,
    pub alternatives: [ModeAlternative; 5],
    pub chosen_mode: Mode,
}

/// The four loaded tables, row order preserved.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub neighbourhood_columns: Vec<String>,
    pub household_columns: Vec<String>,
    pub person_columns: Vec<String>,
    pub neighbourhoods: Vec<NeighbourhoodAlternative>,
    pub households: Vec<HouseholdRecord>,
    pub persons: Vec<PersonRecord>,
    pub tours: Vec<TourRecord>,
}

impl Dataset {
    /// Number of households H.
    pub fn n_households(&self) -> usize {
        self.households.len()
    }

    pub fn n_persons(&self) -> usize {
        self.persons.len()
    }

    pub fn n_tours(&self) -> usize {
        self.tours.len()
    }

    pub fn n_tracts(&self) -> usize {
        self.neighbourhoods.len()
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct RawTable {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl RawTable {
    fn read(path: &Path, fmt: &FormatOptions) -> Result<RawTable> {
        let text = read_to_string(path)?;
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(fmt.delimiter)
            .flexible(false)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|source| Error::Csv {
                path: path.to_path_buf(),
                source,
            })?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|source| Error::Csv {
                path: path.to_path_buf(),
                source,
            })?;
            rows.push(record.iter().map(|s| s.trim().to_string()).collect());
        }
        Ok(RawTable {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: self.path.clone(),
                column: name.to_string(),
            })
    }

    /// Header positions not claimed by required columns, in file order.
    fn free_columns(&self, required: &[&str]) -> Vec<usize> {
        self.header
            .iter()
            .enumerate()
            .filter(|(_, h)| !required.contains(&h.as_str()))
            .map(|(i, _)| i)
            .collect()
    }

    fn number(&self, row: usize, col: usize, fmt: &FormatOptions) -> Result<f64> {
        let raw = &self.rows[row][col];
        let normalized = if fmt.decimal == '.' {
            raw.clone()
        } else {
            raw.replace(fmt.decimal, ".")
        };
        normalized.parse::<f64>().map_err(|_| Error::ParseCell {
            path: self.path.clone(),
            row: row + 2, // 1-based, counting the header line
            column: self.header[col].clone(),
            value: raw.clone(),
        })
    }

    fn flag(&self, row: usize, col: usize, fmt: &FormatOptions) -> Result<bool> {
        let v = self.number(row, col, fmt)?;
        if v == 0.0 || v == 1.0 {
            Ok(v == 1.0)
        } else {
            Err(Error::ParseEnum {
                path: self.path.clone(),
                row: row + 2,
                column: self.header[col].clone(),
                value: self.rows[row][col].clone(),
                expected: "0/1 flag".to_string(),
            })
        }
    }
}

/// Load and cross-link the four tables. Referential failures (a tour naming
/// an unknown person, a household naming an unknown tract) are load errors;
/// value-level invariants are left to [`validate_dataset`].
pub fn load_dataset(
    neighbourhood_path: &Path,
    household_path: &Path,
    person_path: &Path,
    tour_path: &Path,
    fmt: &FormatOptions,
) -> Result<Dataset> {
    let nbhd = RawTable::read(neighbourhood_path, fmt)?;
    let hh = RawTable::read(household_path, fmt)?;
    let pp = RawTable::read(person_path, fmt)?;
    let tt = RawTable::read(tour_path, fmt)?;

    // Neighbourhoods
    let tract_col = nbhd.column("tract_id")?;
    let attr_cols = nbhd.free_columns(&["tract_id"]);
    let neighbourhood_columns: Vec<String> =
        attr_cols.iter().map(|&i| nbhd.header[i].clone()).collect();
    let mut neighbourhoods = Vec::with_capacity(nbhd.rows.len());
    let mut tract_ids: HashMap<String, usize> = HashMap::new();
    for r in 0..nbhd.rows.len() {
        let tract_id = nbhd.rows[r][tract_col].clone();
        if tract_ids.insert(tract_id.clone(), r).is_some() {
            return Err(Error::DuplicateId {
                path: nbhd.path.clone(),
                row: r + 2,
                id: tract_id,
            });
        }
        let attributes = attr_cols
            .iter()
            .map(|&c| nbhd.number(r, c, fmt))
            .collect::<Result<Vec<f64>>>()?;
        neighbourhoods.push(NeighbourhoodAlternative {
            tract_id,
            attributes,
        });
    }

    // Households
    let hid_col = hh.column("household_id")?;
    let tract_ref_col = hh.column("chosen_tract")?;
    let hh_cov_cols = hh.free_columns(&["household_id", "chosen_tract"]);
    let household_columns: Vec<String> =
        hh_cov_cols.iter().map(|&i| hh.header[i].clone()).collect();
    let mut households = Vec::with_capacity(hh.rows.len());
    let mut household_ids: HashMap<String, usize> = HashMap::new();
    for r in 0..hh.rows.len() {
        let household_id = hh.rows[r][hid_col].clone();
        if household_ids.insert(household_id.clone(), r).is_some() {
            return Err(Error::DuplicateId {
                path: hh.path.clone(),
                row: r + 2,
                id: household_id,
            });
        }
        let chosen_tract = hh.rows[r][tract_ref_col].clone();
        if !tract_ids.contains_key(&chosen_tract) {
            return Err(Error::UnknownReference {
                path: hh.path.clone(),
                row: r + 2,
                id: household_id,
                target: "tract".to_string(),
                reference: chosen_tract,
            });
        }
        let covariates = hh_cov_cols
            .iter()
            .map(|&c| hh.number(r, c, fmt))
            .collect::<Result<Vec<f64>>>()?;
        households.push(HouseholdRecord {
            household_id,
            chosen_tract,
            covariates,
            member_ids: Vec::new(),
        });
    }

    // Persons
    let pid_col = pp.column("person_id")?;
    let p_hid_col = pp.column("household_id")?;
    let p_cov_cols = pp.free_columns(&["person_id", "household_id"]);
    let person_columns: Vec<String> =
        p_cov_cols.iter().map(|&i| pp.header[i].clone()).collect();
    let mut persons = Vec::with_capacity(pp.rows.len());
    let mut person_ids: HashMap<String, usize> = HashMap::new();
    for r in 0..pp.rows.len() {
        let person_id = pp.rows[r][pid_col].clone();
        if person_ids.insert(person_id.clone(), r).is_some() {
            return Err(Error::DuplicateId {
                path: pp.path.clone(),
                row: r + 2,
                id: person_id,
            });
        }
        let household_id = pp.rows[r][p_hid_col].clone();
        let Some(&h) = household_ids.get(&household_id) else {
            return Err(Error::UnknownReference {
                path: pp.path.clone(),
                row: r + 2,
                id: person_id,
                target: "household".to_string(),
                reference: household_id,
            });
        };
        households[h].member_ids.push(person_id.clone());
        let covariates = p_cov_cols
            .iter()
            .map(|&c| pp.number(r, c, fmt))
            .collect::<Result<Vec<f64>>>()?;
        persons.push(PersonRecord {
            person_id,
            household_id,
            covariates,
        });
    }

    // Tours
    let tid_col = tt.column("tour_id")?;
    let t_pid_col = tt.column("person_id")?;
    let purpose_col = tt.column("purpose")?;
    let chosen_col = tt.column("chosen_mode")?;
    let mut mode_cols = Vec::with_capacity(5);
    for mode in Mode::ALL {
        let avail = tt.column(&format!("{}_available", mode.name()))?;
        let time = tt.column(&format!("{}_time", mode.name()))?;
        let cost = tt.column(&format!("{}_cost", mode.name()))?;
        mode_cols.push((avail, time, cost));
    }
    let mut tours = Vec::with_capacity(tt.rows.len());
    let mut tour_ids: HashMap<String, usize> = HashMap::new();
    for r in 0..tt.rows.len() {
        let tour_id = tt.rows[r][tid_col].clone();
        if tour_ids.insert(tour_id.clone(), r).is_some() {
            return Err(Error::DuplicateId {
                path: tt.path.clone(),
                row: r + 2,
                id: tour_id,
            });
        }
        let person_id = tt.rows[r][t_pid_col].clone();
        if !person_ids.contains_key(&person_id) {
            return Err(Error::UnknownReference {
                path: tt.path.clone(),
                row: r + 2,
                id: tour_id,
                target: "person".to_string(),
                reference: person_id,
            });
        }
        let purpose =
            Purpose::parse(&tt.rows[r][purpose_col]).ok_or_else(|| Error::ParseEnum {
                path: tt.path.clone(),
                row: r + 2,
                column: "purpose".to_string(),
                value: tt.rows[r][purpose_col].clone(),
                expected: "tour purpose (mandatory|nonmandatory)".to_string(),
            })?;
        let chosen_mode =
            Mode::parse(&tt.rows[r][chosen_col]).ok_or_else(|| Error::ParseEnum {
                path: tt.path.clone(),
                row: r + 2,
                column: "chosen_mode".to_string(),
                value: tt.rows[r][chosen_col].clone(),
                expected: "travel mode".to_string(),
            })?;
        let mut alternatives = [ModeAlternative {
            available: false,
            time: 0.0,
            cost: 0.0,
        }; 5];
        for (m, &(a, t, c)) in mode_cols.iter().enumerate() {
            alternatives[m] = ModeAlternative {
                available: tt.flag(r, a, fmt)?,
                time: tt.number(r, t, fmt)?,
                cost: tt.number(r, c, fmt)?,
            };
        }
        tours.push(TourRecord {
            tour_id,
            person_id,
            purpose,
            alternatives,
            chosen_mode,
        });
    }

    Ok(Dataset {
        neighbourhood_columns,
        household_columns,
        person_columns,
        neighbourhoods,
        households,
        persons,
        tours,
    })
}

fn number_to_field(v: f64, fmt: &FormatOptions) -> String {
    let s = format!("{v}");
    if fmt.decimal == '.' {
        s
    } else {
        s.replace('.', &fmt.decimal.to_string())
    }
}

fn write_table(path: &Path, fmt: &FormatOptions, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(fmt.delimiter)
        .from_writer(Vec::new());
    let map_csv = |source: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    writer.write_record(header).map_err(map_csv)?;
    for row in rows {
        writer.write_record(row).map_err(map_csv)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })?;
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write the four tables in the format [`load_dataset`] reads.
pub fn save_dataset(
    ds: &Dataset,
    neighbourhood_path: &Path,
    household_path: &Path,
    person_path: &Path,
    tour_path: &Path,
    fmt: &FormatOptions,
) -> Result<()> {
    let mut header = vec!["tract_id".to_string()];
    header.extend(ds.neighbourhood_columns.iter().cloned());
    let rows: Vec<Vec<String>> = ds
        .neighbourhoods
        .iter()
        .map(|n| {
            let mut row = vec![n.tract_id.clone()];
            row.extend(n.attributes.iter().map(|&v| number_to_field(v, fmt)));
            row
        })
        .collect();
    write_table(neighbourhood_path, fmt, &header, &rows)?;

    let mut header = vec!["household_id".to_string(), "chosen_tract".to_string()];
    header.extend(ds.household_columns.iter().cloned());
    let rows: Vec<Vec<String>> = ds
        .households
        .iter()
        .map(|h| {
            let mut row = vec![h.household_id.clone(), h.chosen_tract.clone()];
            row.extend(h.covariates.iter().map(|&v| number_to_field(v, fmt)));
            row
        })
        .collect();
    write_table(household_path, fmt, &header, &rows)?;

    let mut header = vec!["person_id".to_string(), "household_id".to_string()];
    header.extend(ds.person_columns.iter().cloned());
    let rows: Vec<Vec<String>> = ds
        .persons
        .iter()
        .map(|p| {
            let mut row = vec![p.person_id.clone(), p.household_id.clone()];
            row.extend(p.covariates.iter().map(|&v| number_to_field(v, fmt)));
            row
        })
        .collect();
    write_table(person_path, fmt, &header, &rows)?;

    let mut header = vec![
        "tour_id".to_string(),
        "person_id".to_string(),
        "purpose".to_string(),
        "chosen_mode".to_string(),
    ];
    for mode in Mode::ALL {
        header.push(format!("{}_available", mode.name()));
        header.push(format!("{}_time", mode.name()));
        header.push(format!("{}_cost", mode.name()));
    }
    let rows: Vec<Vec<String>> = ds
        .tours
        .iter()
        .map(|t| {
            let mut row = vec![
                t.tour_id.clone(),
                t.person_id.clone(),
                t.purpose.name().to_string(),
                t.chosen_mode.name().to_string(),
            ];
            for alt in &t.alternatives {
                row.push(if alt.available { "1" } else { "0" }.to_string());
                row.push(number_to_field(alt.time, fmt));
                row.push(number_to_field(alt.cost, fmt));
            }
            row
        })
        .collect();
    write_table(tour_path, fmt, &header, &rows)
}

/// One invariant violation found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// `"tract"`, `"household"`, `"person"`, or `"tour"`.
    pub entity: String,
    pub id: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} `{}`: {}", self.entity, self.id, self.message)
    }
}

/// Result of checking every dataset invariant. Empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn push(report: &mut ValidationReport, entity: &str, id: &str, message: String) {
    report.violations.push(Violation {
        entity: entity.to_string(),
        id: id.to_string(),
        message,
    });
}

/// Check every dataset invariant without mutating the input. Violations are
/// report entries, not failures.
pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut tract_ids: HashMap<&str, usize> = HashMap::new();
    for n in &ds.neighbourhoods {
        if tract_ids.insert(&n.tract_id, 0).is_some() {
            push(&mut report, "tract", &n.tract_id, "duplicate tract_id".into());
        }
        for (name, &v) in ds.neighbourhood_columns.iter().zip(&n.attributes) {
            if !v.is_finite() {
                push(
                    &mut report,
                    "tract",
                    &n.tract_id,
                    format!("attribute `{name}` is not finite"),
                );
            }
        }
        if n.attributes.len() != ds.neighbourhood_columns.len() {
            push(&mut report, "tract", &n.tract_id, "attribute count differs from header".into());
        }
    }

    let mut household_ids: HashMap<&str, usize> = HashMap::new();
    for h in &ds.households {
        if household_ids.insert(&h.household_id, 0).is_some() {
            push(&mut report, "household", &h.household_id, "duplicate household_id".into());
        }
        if !tract_ids.contains_key(h.chosen_tract.as_str()) {
            push(
                &mut report,
                "household",
                &h.household_id,
                format!("chosen_tract `{}` is not in the neighbourhood table", h.chosen_tract),
            );
        }
        if h.member_ids.is_empty() {
            push(&mut report, "household", &h.household_id, "no member persons".into());
        }
        let mut seen = std::collections::HashSet::new();
        for m in &h.member_ids {
            if !seen.insert(m) {
                push(
                    &mut report,
                    "household",
                    &h.household_id,
                    format!("duplicate member `{m}`"),
                );
            }
        }
        for (name, &v) in ds.household_columns.iter().zip(&h.covariates) {
            if !v.is_finite() {
                push(
                    &mut report,
                    "household",
                    &h.household_id,
                    format!("covariate `{name}` is not finite"),
                );
            }
        }
    }

    let age_col = ds.person_columns.iter().position(|c| c == "age");
    let mut person_ids: HashMap<&str, usize> = HashMap::new();
    for p in &ds.persons {
        if person_ids.insert(&p.person_id, 0).is_some() {
            push(&mut report, "person", &p.person_id, "duplicate person_id".into());
        }
        if !household_ids.contains_key(p.household_id.as_str()) {
            push(
                &mut report,
                "person",
                &p.person_id,
                format!("household_id `{}` does not resolve", p.household_id),
            );
        }
        for (name, &v) in ds.person_columns.iter().zip(&p.covariates) {
            if !v.is_finite() {
                push(
                    &mut report,
                    "person",
                    &p.person_id,
                    format!("covariate `{name}` is not finite"),
                );
            }
        }
        if let Some(c) = age_col {
            if p.covariates.get(c).is_some_and(|&v| v < 0.0) {
                push(&mut report, "person", &p.person_id, "age is negative".into());
            }
        }
    }

    let mut tour_ids: HashMap<&str, usize> = HashMap::new();
    for t in &ds.tours {
        if tour_ids.insert(&t.tour_id, 0).is_some() {
            push(&mut report, "tour", &t.tour_id, "duplicate tour_id".into());
        }
        if !person_ids.contains_key(t.person_id.as_str()) {
            push(
                &mut report,
                "tour",
                &t.tour_id,
                format!("person_id `{}` does not resolve", t.person_id),
            );
        }
        if !t.alternatives[t.chosen_mode.index()].available {
            push(
                &mut report,
                "tour",
                &t.tour_id,
                format!("chosen_mode `{}` is marked unavailable", t.chosen_mode),
            );
        }
        if !t.alternatives.iter().any(|a| a.available) {
            push(&mut report, "tour", &t.tour_id, "no available mode".into());
        }
        for (mode, alt) in Mode::ALL.iter().zip(&t.alternatives) {
            if alt.available && !(alt.time.is_finite() && alt.time >= 0.0) {
                push(
                    &mut report,
                    "tour",
                    &t.tour_id,
                    format!("{mode} time must be finite and non-negative"),
                );
            }
            if alt.available && !(alt.cost.is_finite() && alt.cost >= 0.0) {
                push(
                    &mut report,
                    "tour",
                    &t.tour_id,
                    format!("{mode} cost must be finite and non-negative"),
                );
            }
        }
    }

    report
}

/// Constant-time lookups over a valid [`Dataset`]; immutable after
/// construction and safe to share across workers.
#[derive(Debug, Clone)]
pub struct IndexedDataset {
    pub data: Dataset,
    tract_index: HashMap<String, usize>,
    household_index: HashMap<String, usize>,
    person_index: HashMap<String, usize>,
    persons_of_household: Vec<Vec<usize>>,
    tours_of_person: Vec<[Vec<usize>; 2]>,
    chosen_tract_row: Vec<usize>,
    household_of_person: Vec<usize>,
    /// Tracts × attributes, rows in table order, columns in
    /// `neighbourhood_columns` order.
    attribute_matrix: Array2<f64>,
}

/// Build lookup indices and the dense tract attribute matrix. Pure: the same
/// dataset always produces the same indices.
pub fn index_dataset(ds: &Dataset) -> Result<IndexedDataset> {
    let tract_index: HashMap<String, usize> = ds
        .neighbourhoods
        .iter()
        .enumerate()
        .map(|(i, n)| (n.tract_id.clone(), i))
        .collect();
    let household_index: HashMap<String, usize> = ds
        .households
        .iter()
        .enumerate()
        .map(|(i, h)| (h.household_id.clone(), i))
        .collect();
    let person_index: HashMap<String, usize> = ds
        .persons
        .iter()
        .enumerate()
        .map(|(i, p)| (p.person_id.clone(), i))
        .collect();

    let mut persons_of_household = vec![Vec::new(); ds.households.len()];
    let mut household_of_person = Vec::with_capacity(ds.persons.len());
    for (i, p) in ds.persons.iter().enumerate() {
        let &h = person_household(&household_index, p)?;
        persons_of_household[h].push(i);
        household_of_person.push(h);
    }

    let mut tours_of_person = vec![[Vec::new(), Vec::new()]; ds.persons.len()];
    for (i, t) in ds.tours.iter().enumerate() {
        let &n = person_index
            .get(&t.person_id)
            .ok_or_else(|| Error::UnknownReference {
                path: PathBuf::from("<memory>"),
                row: i + 1,
                id: t.tour_id.clone(),
                target: "person".to_string(),
                reference: t.person_id.clone(),
            })?;
        tours_of_person[n][t.purpose.index()].push(i);
    }

    let mut chosen_tract_row = Vec::with_capacity(ds.households.len());
    for (i, h) in ds.households.iter().enumerate() {
        let &row = tract_index
            .get(&h.chosen_tract)
            .ok_or_else(|| Error::UnknownReference {
                path: PathBuf::from("<memory>"),
                row: i + 1,
                id: h.household_id.clone(),
                target: "tract".to_string(),
                reference: h.chosen_tract.clone(),
            })?;
        chosen_tract_row.push(row);
    }

    let n_cols = ds.neighbourhood_columns.len();
    let mut attribute_matrix = Array2::zeros((ds.neighbourhoods.len(), n_cols));
    for (i, n) in ds.neighbourhoods.iter().enumerate() {
        if n.attributes.len() != n_cols {
            return Err(Error::Dimension {
                expected: n_cols,
                actual: n.attributes.len(),
                context: format!("attributes of tract `{}`", n.tract_id),
            });
        }
        for (j, &v) in n.attributes.iter().enumerate() {
            attribute_matrix[(i, j)] = v;
        }
    }

    Ok(IndexedDataset {
        data: ds.clone(),
        tract_index,
        household_index,
        person_index,
        persons_of_household,
        tours_of_person,
        chosen_tract_row,
        household_of_person,
        attribute_matrix,
    })
}

fn person_household<'a>(
    household_index: &'a HashMap<String, usize>,
    p: &PersonRecord,
) -> Result<&'a usize> {
    household_index
        .get(&p.household_id)
        .ok_or_else(|| Error::UnknownReference {
            path: PathBuf::from("<memory>"),
            row: 0,
            id: p.person_id.clone(),
            target: "household".to_string(),
            reference: p.household_id.clone(),
        })
}

impl IndexedDataset {
    pub fn tract_row(&self, tract_id: &str) -> Option<usize> {
        self.tract_index.get(tract_id).copied()
    }

    pub fn household_row(&self, household_id: &str) -> Option<usize> {
        self.household_index.get(household_id).copied()
    }

    pub fn person_row(&self, person_id: &str) -> Option<usize> {
        self.person_index.get(person_id).copied()
    }

    /// Person row indices belonging to household `h`.
    pub fn persons_of(&self, h: usize) -> &[usize] {
        &self.persons_of_household[h]
    }

    /// Tour row indices of person `n` for a purpose.
    pub fn tours_of(&self, n: usize, purpose: Purpose) -> &[usize] {
        &self.tours_of_person[n][purpose.index()]
    }

    /// Household row of person `n`.
    pub fn household_of(&self, n: usize) -> usize {
        self.household_of_person[n]
    }

    /// Tract row chosen by household `h`.
    pub fn chosen_tract_of(&self, h: usize) -> usize {
        self.chosen_tract_row[h]
    }

    /// Dense tract attribute matrix (tracts × attribute columns).
    pub fn attribute_matrix(&self) -> &Array2<f64> {
        &self.attribute_matrix
    }

    /// Number of tours of person `n` for purpose `d` (T_hnd).
    pub fn tour_count(&self, n: usize, purpose: Purpose) -> usize {
        self.tours_of_person[n][purpose.index()].len()
    }
}
