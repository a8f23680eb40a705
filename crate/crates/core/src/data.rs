//! Choice datasets in long format.
//!
//! One row per (observation, alternative) pair with the header
//! `obs_id,alt_id,chosen,available,<attribute columns...>`. Person-level
//! columns repeat their value on every row of an observation; alternative-level
//! columns may be left empty for unavailable alternatives.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 4] = ["obs_id", "alt_id", "chosen", "available"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alternative {
    pub id: usize,
    pub name: String,
    #[serde(default)]
    pub always_available: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnLevel {
    /// One value per alternative (travel time, cost).
    Alternative,
    /// One value per decision maker, repeated across the observation's rows.
    Person,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    Utility,
    Tree,
    Both,
}

impl ColumnRole {
    pub fn is_tree(self) -> bool {
        matches!(self, ColumnRole::Tree | ColumnRole::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub level: ColumnLevel,
    pub role: ColumnRole,
}

/// Declares the alternatives and attribute columns a dataset carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub alternatives: Vec<Alternative>,
    /// Name of the alternative whose consideration the rule list gates.
    #[serde(default)]
    pub gated: Option<String>,
    pub columns: Vec<Column>,
    /// Person-level 0/1 column selecting the rule-list estimation subsample.
    #[serde(default)]
    pub subsample: Option<String>,
}

/// Where an attribute lives inside a [`ChoiceObservation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRef {
    Alt(usize),
    Person(usize),
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        if self.alternatives.is_empty() {
            return Err(Error::Schema("no alternatives declared".into()));
        }
        for (i, alt) in self.alternatives.iter().enumerate() {
            if alt.id != i {
                return Err(Error::Schema(format!(
                    "alternative ids must be contiguous from 0; found id {} at position {i}",
                    alt.id
                )));
            }
        }
        let mut names = HashSet::new();
        for alt in &self.alternatives {
            if !names.insert(alt.name.as_str()) {
                return Err(Error::Schema(format!("duplicate alternative name {:?}", alt.name)));
            }
        }
        if let Some(g) = &self.gated {
            if self.alternative_id(g).is_none() {
                return Err(Error::Schema(format!("gated alternative {g:?} is not declared")));
            }
        }
        let mut cols = HashSet::new();
        for c in &self.columns {
            if FIXED_COLUMNS.contains(&c.name.as_str()) {
                return Err(Error::Schema(format!("column name {:?} is reserved", c.name)));
            }
            if !cols.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column {:?}", c.name)));
            }
            if c.role.is_tree() && c.level != ColumnLevel::Person {
                return Err(Error::Schema(format!(
                    "tree feature {:?} must be a person-level column",
                    c.name
                )));
            }
        }
        if let Some(s) = &self.subsample {
            match self.columns.iter().find(|c| &c.name == s) {
                Some(c) if c.level == ColumnLevel::Person => {}
                Some(_) => {
                    return Err(Error::Schema(format!(
                        "subsample column {s:?} must be person-level"
                    )))
                }
                None => return Err(Error::Schema(format!("subsample column {s:?} not declared"))),
            }
        }
        Ok(())
    }

    pub fn alternative_id(&self, name: &str) -> Option<usize> {
        self.alternatives.iter().position(|a| a.name == name)
    }

    pub fn gated_id(&self) -> Option<usize> {
        self.gated.as_deref().and_then(|g| self.alternative_id(g))
    }

    pub fn n_alternatives(&self) -> usize {
        self.alternatives.len()
    }

    pub fn alt_columns(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.level == ColumnLevel::Alternative)
    }

    pub fn person_columns(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(|c| c.level == ColumnLevel::Person)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn resolve(&self, name: &str) -> Option<ColumnRef> {
        if let Some(i) = self.alt_columns().position(|c| c.name == name) {
            return Some(ColumnRef::Alt(i));
        }
        self.person_columns().position(|c| c.name == name).map(ColumnRef::Person)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceObservation {
    pub obs_id: i64,
    pub chosen: usize,
    pub available: Vec<bool>,
    /// `[alternative][alternative-level column]`; NaN where the alternative is
    /// unavailable and the file left the field empty.
    pub alt_attributes: Vec<Vec<f64>>,
    pub person_attributes: Vec<f64>,
}

impl ChoiceObservation {
    pub fn value(&self, col: ColumnRef, alt: usize) -> f64 {
        match col {
            ColumnRef::Alt(j) => self.alt_attributes[alt][j],
            ColumnRef::Person(j) => self.person_attributes[j],
        }
    }

    pub fn n_available(&self) -> usize {
        self.available.iter().filter(|&&a| a).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDataset {
    pub schema: FeatureSchema,
    pub observations: Vec<ChoiceObservation>,
}

impl ChoiceDataset {
    pub fn new(schema: FeatureSchema, observations: Vec<ChoiceObservation>) -> Result<Self> {
        schema.validate()?;
        let ds = ChoiceDataset { schema, observations };
        for obs in &ds.observations {
            ds.validate_observation(obs)?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Rows used for rule-list estimation: those with a nonzero subsample
    /// column, or every row when no subsample column is configured.
    pub fn subsample_mask(&self) -> Vec<bool> {
        match self.schema.subsample.as_deref().and_then(|s| self.schema.resolve(s)) {
            Some(col) => self.observations.iter().map(|o| o.value(col, 0) != 0.0).collect(),
            None => vec![true; self.observations.len()],
        }
    }

    fn validate_observation(&self, obs: &ChoiceObservation) -> Result<()> {
        let n_alt = self.schema.n_alternatives();
        let n_alt_cols = self.schema.alt_columns().count();
        let n_person = self.schema.person_columns().count();
        let bad = |message: String| Error::Observation { obs_id: obs.obs_id, message };
        if obs.available.len() != n_alt || obs.alt_attributes.len() != n_alt {
            return Err(bad(format!("expected {n_alt} alternatives")));
        }
        if obs.person_attributes.len() != n_person {
            return Err(bad(format!("expected {n_person} person attributes")));
        }
        if obs.chosen >= n_alt {
            return Err(bad(format!("chosen alternative {} is unknown", obs.chosen)));
        }
        if !obs.available[obs.chosen] {
            return Err(bad(format!("chosen alternative {} is unavailable", obs.chosen)));
        }
        for (alt, spec) in self.schema.alternatives.iter().enumerate() {
            if spec.always_available && !obs.available[alt] {
                return Err(bad(format!("alternative {:?} is declared always available", spec.name)));
            }
            if obs.alt_attributes[alt].len() != n_alt_cols {
                return Err(bad(format!("alternative {alt}: expected {n_alt_cols} attributes")));
            }
            if obs.available[alt] {
                for (j, col) in self.schema.alt_columns().enumerate() {
                    if !obs.alt_attributes[alt][j].is_finite() {
                        return Err(bad(format!(
                            "missing attribute {:?} for available alternative {alt}",
                            col.name
                        )));
                    }
                }
            }
        }
        for (j, col) in self.schema.person_columns().enumerate() {
            if !obs.person_attributes[j].is_finite() {
                return Err(bad(format!("missing person attribute {:?}", col.name)));
            }
        }
        Ok(())
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<ChoiceDataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema)
}

/// Parses the long format. Lines starting with `#` are provenance comments
/// and are skipped.
pub fn read_dataset<R: Read>(reader: R, schema: &FeatureSchema) -> Result<ChoiceDataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let header_line = 1;
    let pos = |name: &str| header.iter().position(|h| h == name);
    let mut fixed = [0usize; 4];
    for (k, name) in FIXED_COLUMNS.iter().enumerate() {
        fixed[k] = pos(name).ok_or_else(|| Error::Parse {
            line: header_line,
            message: format!("missing required column {name:?}"),
        })?;
    }
    let alt_cols: Vec<usize> = schema
        .alt_columns()
        .map(|c| {
            pos(&c.name).ok_or_else(|| Error::Parse {
                line: header_line,
                message: format!("missing attribute column {:?}", c.name),
            })
        })
        .collect::<Result<_>>()?;
    let person_cols: Vec<usize> = schema
        .person_columns()
        .map(|c| {
            pos(&c.name).ok_or_else(|| Error::Parse {
                line: header_line,
                message: format!("missing attribute column {:?}", c.name),
            })
        })
        .collect::<Result<_>>()?;
    for h in header.iter() {
        if !FIXED_COLUMNS.contains(&h) && schema.column(h).is_none() {
            return Err(Error::Parse {
                line: header_line,
                message: format!("column {h:?} is not declared in the schema"),
            });
        }
    }

    let n_alt = schema.n_alternatives();
    let mut observations: Vec<ChoiceObservation> = Vec::new();
    let mut partial: Option<(ChoiceObservation, Vec<bool>, Option<usize>)> = None;
    let mut seen_ids = HashSet::new();

    let finish = |p: (ChoiceObservation, Vec<bool>, Option<usize>)| -> Result<ChoiceObservation> {
        let (mut obs, seen, chosen) = p;
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Observation {
                obs_id: obs.obs_id,
                message: format!("no row for alternative {missing}"),
            });
        }
        obs.chosen = chosen.ok_or_else(|| Error::Observation {
            obs_id: obs.obs_id,
            message: "no alternative marked chosen".into(),
        })?;
        Ok(obs)
    };

    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let field = |k: usize| record.get(k).unwrap_or("");
        let parse_int = |k: usize, what: &str| -> Result<i64> {
            field(k).parse::<i64>().map_err(|_| Error::Parse {
                line,
                message: format!("{what}: expected an integer, got {:?}", field(k)),
            })
        };
        let parse_flag = |k: usize, what: &str| -> Result<bool> {
            match field(k) {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Parse { line, message: format!("{what}: expected 0 or 1, got {other:?}") }),
            }
        };
        let obs_id = parse_int(fixed[0], "obs_id")?;
        let alt = parse_int(fixed[1], "alt_id")?;
        let chosen = parse_flag(fixed[2], "chosen")?;
        let available = parse_flag(fixed[3], "available")?;
        if alt < 0 || alt as usize >= n_alt {
            return Err(Error::Observation { obs_id, message: format!("unknown alternative id {alt}") });
        }
        let alt = alt as usize;
        if chosen && !available {
            return Err(Error::Observation {
                obs_id,
                message: format!("alternative {alt} is chosen but unavailable"),
            });
        }

        if partial.as_ref().is_some_and(|p| p.0.obs_id != obs_id) {
            observations.push(finish(partial.take().unwrap())?);
        }
        if partial.is_none() {
            if !seen_ids.insert(obs_id) {
                return Err(Error::Observation {
                    obs_id,
                    message: "rows for this observation are not contiguous or the id repeats".into(),
                });
            }
            let person = person_cols
                .iter()
                .zip(schema.person_columns())
                .map(|(&k, c)| parse_value(field(k), line, &c.name))
                .collect::<Result<Vec<_>>>()?;
            partial = Some((
                ChoiceObservation {
                    obs_id,
                    chosen: 0,
                    available: vec![false; n_alt],
                    alt_attributes: vec![vec![f64::NAN; alt_cols.len()]; n_alt],
                    person_attributes: person,
                },
                vec![false; n_alt],
                None,
            ));
        }
        let (obs, seen, chosen_alt) = partial.as_mut().unwrap();
        if seen[alt] {
            return Err(Error::Observation { obs_id, message: format!("alternative {alt} appears twice") });
        }
        seen[alt] = true;
        obs.available[alt] = available;
        if chosen {
            if chosen_alt.is_some() {
                return Err(Error::Observation { obs_id, message: "more than one chosen alternative".into() });
            }
            *chosen_alt = Some(alt);
        }
        for ((&k, c), slot) in alt_cols.iter().zip(schema.alt_columns()).zip(obs.alt_attributes[alt].iter_mut()) {
            let raw = field(k);
            if raw.is_empty() && !available {
                continue;
            }
            if raw.is_empty() {
                return Err(Error::Observation {
                    obs_id,
                    message: format!("missing attribute {:?} for available alternative {alt}", c.name),
                });
            }
            *slot = parse_value(raw, line, &c.name)?;
        }
        for ((&k, c), &expected) in person_cols.iter().zip(schema.person_columns()).zip(&obs.person_attributes) {
            let v = parse_value(field(k), line, &c.name)?;
            if v != expected {
                return Err(Error::Observation {
                    obs_id,
                    message: format!("person attribute {:?} differs across the observation's rows", c.name),
                });
            }
        }
    }
    if let Some(p) = partial.take() {
        observations.push(finish(p)?);
    }
    ChoiceDataset::new(schema.clone(), observations)
}

fn parse_value(raw: &str, line: usize, column: &str) -> Result<f64> {
    if raw.is_empty() {
        return Err(Error::Parse { line, message: format!("missing value for {column:?}") });
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse { line, message: format!("{column:?}: expected a finite number, got {raw:?}") }),
    }
}

pub fn write_dataset<W: Write>(ds: &ChoiceDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(ds.schema.alt_columns().map(|c| c.name.as_str()));
    header.extend(ds.schema.person_columns().map(|c| c.name.as_str()));
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for obs in &ds.observations {
        for alt in 0..ds.schema.n_alternatives() {
            row.clear();
            row.push(obs.obs_id.to_string());
            row.push(alt.to_string());
            row.push(u8::from(obs.chosen == alt).to_string());
            row.push(u8::from(obs.available[alt]).to_string());
            for &v in &obs.alt_attributes[alt] {
                row.push(if v.is_nan() { String::new() } else { format_value(v) });
            }
            for &v in &obs.person_attributes {
                row.push(format_value(v));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(ds: &ChoiceDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(file))
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Maps alternative names to ids, for callers building datasets by hand.
pub fn alternative_index(schema: &FeatureSchema) -> HashMap<&str, usize> {
    schema.alternatives.iter().map(|a| (a.name.as_str(), a.id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_schema() -> FeatureSchema {
        FeatureSchema {
            alternatives: ["car", "bus", "bike"]
                .iter()
                .enumerate()
                .map(|(i, n)| Alternative { id: i, name: n.to_string(), always_available: i == 0 })
                .collect(),
            gated: Some("bike".into()),
            columns: vec![
                Column { name: "time".into(), unit: "min".into(), level: ColumnLevel::Alternative, role: ColumnRole::Utility },
                Column { name: "kids".into(), unit: String::new(), level: ColumnLevel::Person, role: ColumnRole::Both },
            ],
            subsample: None,
        }
    }

    const TOY: &str = "obs_id,alt_id,chosen,available,time,kids\n\
        1,0,1,1,10,2\n1,1,0,1,20,2\n1,2,0,0,,2\n\
        2,0,0,1,12.5,0\n2,1,0,1,30,0\n2,2,1,1,15,0\n";

    #[test]
    fn loads_well_formed_file() {
        let ds = read_dataset(TOY.as_bytes(), &toy_schema()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.observations[0].chosen, 0);
        assert!(!ds.observations[0].available[2]);
        assert!(ds.observations[0].alt_attributes[2][0].is_nan());
        assert_eq!(ds.observations[1].alt_attributes[0][0], 12.5);
        assert_eq!(ds.observations[1].person_attributes, vec![0.0]);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ds = read_dataset(TOY.as_bytes(), &toy_schema()).unwrap();
        let mut out = Vec::new();
        write_dataset(&ds, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), TOY);
    }

    #[test]
    fn chosen_but_unavailable_names_observation() {
        let bad = TOY.replace("2,2,1,1,15,0", "2,2,1,0,15,0");
        match read_dataset(bad.as_bytes(), &toy_schema()) {
            Err(Error::Observation { obs_id, message }) => {
                assert_eq!(obs_id, 2);
                assert!(message.contains("unavailable"), "{message}");
            }
            other => panic!("expected observation error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_alternative_is_rejected() {
        let bad = TOY.replace("2,2,1,1,15,0", "2,7,1,1,15,0");
        assert!(matches!(
            read_dataset(bad.as_bytes(), &toy_schema()),
            Err(Error::Observation { obs_id: 2, .. })
        ));
    }

    #[test]
    fn missing_attribute_for_available_alternative() {
        let bad = TOY.replace("2,1,0,1,30,0", "2,1,0,1,,0");
        assert!(matches!(
            read_dataset(bad.as_bytes(), &toy_schema()),
            Err(Error::Observation { obs_id: 2, .. })
        ));
    }

    #[test]
    fn malformed_row_reports_line() {
        let bad = TOY.replace("1,1,0,1,20,2", "1,1,0,1,abc,2");
        assert!(matches!(read_dataset(bad.as_bytes(), &toy_schema()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn always_available_enforced() {
        let bad = TOY.replace("2,0,0,1,12.5,0", "2,0,0,0,12.5,0");
        assert!(matches!(read_dataset(bad.as_bytes(), &toy_schema()), Err(Error::Observation { obs_id: 2, .. })));
    }

    #[test]
    fn eight_mode_schema_is_accepted() {
        let names = ["DA", "SR2", "SR3", "WTW", "WTD", "DTW", "walk", "bike"];
        let schema = FeatureSchema {
            alternatives: names
                .iter()
                .enumerate()
                .map(|(i, n)| Alternative { id: i, name: n.to_string(), always_available: false })
                .collect(),
            gated: Some("bike".into()),
            columns: vec![Column { name: "time".into(), unit: "0.1 min".into(), level: ColumnLevel::Alternative, role: ColumnRole::Utility }],
            subsample: None,
        };
        schema.validate().unwrap();
        assert_eq!(schema.gated_id(), Some(7));
    }

    #[test]
    fn comments_are_skipped() {
        let with_comment = format!("# config_hash=abc\n{TOY}");
        assert_eq!(read_dataset(with_comment.as_bytes(), &toy_schema()).unwrap().len(), 2);
    }

    #[test]
    fn subsample_column_selects_rows() {
        let mut schema = toy_schema();
        schema.columns.push(Column { name: "owns".into(), unit: String::new(), level: ColumnLevel::Person, role: ColumnRole::Utility });
        schema.subsample = Some("owns".into());
        let text = "obs_id,alt_id,chosen,available,time,kids,owns\n\
            1,0,1,1,10,2,0\n1,1,0,1,20,2,0\n1,2,0,0,,2,0\n\
            2,0,0,1,12.5,0,1\n2,1,0,1,30,0,1\n2,2,1,1,15,0,1\n";
        let ds = read_dataset(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.subsample_mask(), vec![false, true]);
    }
}
