//! Adult census loading, stratified holdout splits, and the labelled
//! `x,u,s` CSV format.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{LabelledDatum, ResearchDataset, SubgroupKey};
use crate::error::{Error, Result};

const ADULT_FIELDS: usize = 15;
const AGE: usize = 0;
const EDUCATION_NUM: usize = 4;
const SEX: usize = 9;
const CAPITAL_GAIN: usize = 10;
const CAPITAL_LOSS: usize = 11;

/// Highest `education_num` counted as high-school graduate or below (`HS-grad`).
pub const HIGH_SCHOOL_LEVEL: u8 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdultRecord {
    pub age: u32,
    pub education_num: u8,
    pub sex: Sex,
    pub capital_gain: f64,
    pub capital_loss: f64,
}

impl AdultRecord {
    /// `u = 1` above high-school level, `s = 1` for males.
    pub fn key(&self) -> SubgroupKey {
        SubgroupKey::new(u8::from(self.education_num > HIGH_SCHOOL_LEVEL), u8::from(self.sex == Sex::Male))
    }

    pub fn feature(&self, f: AdultFeature) -> f64 {
        match f {
            AdultFeature::Age => self.age as f64,
            AdultFeature::CapitalGain => self.capital_gain,
            AdultFeature::CapitalLoss => self.capital_loss,
        }
    }

    pub fn labelled(&self, f: AdultFeature) -> LabelledDatum {
        let k = self.key();
        LabelledDatum::new(self.feature(f), k.u, k.s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdultFeature {
    Age,
    CapitalGain,
    CapitalLoss,
}

impl AdultFeature {
    pub const ALL: [AdultFeature; 3] = [AdultFeature::Age, AdultFeature::CapitalGain, AdultFeature::CapitalLoss];

    pub fn name(self) -> &'static str {
        match self {
            AdultFeature::Age => "age",
            AdultFeature::CapitalGain => "capital_gain",
            AdultFeature::CapitalLoss => "capital_loss",
        }
    }
}

impl fmt::Display for AdultFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdultFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "age" => Ok(AdultFeature::Age),
            "capital_gain" => Ok(AdultFeature::CapitalGain),
            "capital_loss" => Ok(AdultFeature::CapitalLoss),
            _ => Err(Error::Config(format!("unknown Adult feature '{s}' (age, capital_gain, capital_loss)"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdultLoad {
    pub records: Vec<AdultRecord>,
    /// Rows with `?` in a used column.
    pub dropped_missing: usize,
    /// Rows with an unrecognised sex or education level.
    pub rejected: usize,
}

impl AdultLoad {
    pub fn labelled(&self, f: AdultFeature) -> Vec<LabelledDatum> {
        self.records.iter().map(|r| r.labelled(f)).collect()
    }
}

enum Row {
    Record(AdultRecord),
    Missing,
    Rejected(String),
}

fn parse_number<T: FromStr>(field: &str, name: &str, line: u64) -> Result<Option<T>> {
    if field == "?" {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::Parse { line, message: format!("{name} '{field}' is not a number") })
}

fn parse_row(rec: &csv::StringRecord, line: u64) -> Result<Row> {
    if rec.len() != ADULT_FIELDS {
        return Err(Error::Parse { line, message: format!("expected {ADULT_FIELDS} fields, found {}", rec.len()) });
    }
    let used = [AGE, EDUCATION_NUM, SEX, CAPITAL_GAIN, CAPITAL_LOSS];
    if used.iter().any(|&i| &rec[i] == "?") {
        return Ok(Row::Missing);
    }
    let age: u32 = parse_number(&rec[AGE], "age", line)?.unwrap();
    let capital_gain: f64 = parse_number(&rec[CAPITAL_GAIN], "capital-gain", line)?.unwrap();
    let capital_loss: f64 = parse_number(&rec[CAPITAL_LOSS], "capital-loss", line)?.unwrap();
    if !(capital_gain >= 0.0 && capital_loss >= 0.0) {
        return Err(Error::Parse { line, message: "capital fields must be nonnegative".into() });
    }
    let sex = match &rec[SEX] {
        "Male" => Sex::Male,
        "Female" => Sex::Female,
        other => return Ok(Row::Rejected(format!("sex '{other}'"))),
    };
    let education_num = match rec[EDUCATION_NUM].parse::<u8>() {
        Ok(e @ 1..=16) => e,
        _ => return Ok(Row::Rejected(format!("education level '{}'", &rec[EDUCATION_NUM]))),
    };
    Ok(Row::Record(AdultRecord { age, education_num, sex, capital_gain, capital_loss }))
}

/// Parses Adult rows. Lines starting with `|` and a leading header row are
/// skipped; the trailing `.` on test-set labels is irrelevant here.
pub fn read_adult<R: Read>(reader: R) -> Result<AdultLoad> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'|'))
        .from_reader(reader);
    let mut out = AdultLoad::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if i == 0 && rec.get(AGE) == Some("age") {
            continue;
        }
        match parse_row(&rec, line)? {
            Row::Record(r) => out.records.push(r),
            Row::Missing => out.dropped_missing += 1,
            Row::Rejected(why) => {
                warn!("line {line}: rejected record with unknown {why}");
                out.rejected += 1;
            }
        }
    }
    Ok(out)
}

/// Loads one Adult file, or `adult.data` followed by `adult.test` from a
/// directory.
pub fn load_adult_records(path: &Path) -> Result<AdultLoad> {
    let files = if path.is_dir() {
        let files: Vec<_> =
            ["adult.data", "adult.test"].iter().map(|f| path.join(f)).filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no adult.data or adult.test in {}", path.display()),
            )));
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut all = AdultLoad::default();
    for f in files {
        let part = read_adult(File::open(&f)?)?;
        info!(
            "{}: {} records, {} dropped for missing values, {} rejected",
            f.display(),
            part.records.len(),
            part.dropped_missing,
            part.rejected
        );
        all.records.extend(part.records);
        all.dropped_missing += part.dropped_missing;
        all.rejected += part.rejected;
    }
    Ok(all)
}

pub fn load_adult(path: &Path, feature: AdultFeature) -> Result<Vec<LabelledDatum>> {
    Ok(load_adult_records(path)?.labelled(feature))
}

/// Random split holding out `round(fraction · n_{u,s})` of every subgroup.
/// Both parts keep the original order.
pub fn split_holdout<R: Rng + ?Sized>(
    data: &ResearchDataset,
    fraction: f64,
    rng: &mut R,
) -> Result<(ResearchDataset, ResearchDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("holdout fraction must lie in (0, 1), got {fraction}")));
    }
    let mut train: [Vec<f64>; 4] = Default::default();
    let mut hold: [Vec<f64>; 4] = Default::default();
    for k in SubgroupKey::ALL {
        let xs = data.features(k);
        let n_hold = (fraction * xs.len() as f64).round() as usize;
        if n_hold == 0 || n_hold == xs.len() {
            return Err(Error::Split(format!(
                "holdout fraction {fraction} leaves subgroup {k} of size {} empty on one side",
                xs.len()
            )));
        }
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.shuffle(rng);
        let mut held = vec![false; xs.len()];
        idx[..n_hold].iter().for_each(|&i| held[i] = true);
        for (i, &x) in xs.iter().enumerate() {
            if held[i] { &mut hold[k.index()] } else { &mut train[k.index()] }.push(x);
        }
    }
    Ok((ResearchDataset::from_groups(train)?, ResearchDataset::from_groups(hold)?))
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Parse { line: 1, message: format!("missing column '{name}'") })
}

fn parse_label(field: &str, name: &str, line: u64) -> Result<u8> {
    match field {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(Error::Parse { line, message: format!("{name} must be 0 or 1, found '{field}'") }),
    }
}

/// Reads labelled data from CSV with columns `x`, `u`, `s` (any order,
/// other columns ignored). Lines starting with `#` are comments.
pub fn read_labelled<R: Read>(reader: R) -> Result<Vec<LabelledDatum>> {
    read_labelled_column(reader, "x")
}

/// Like [`read_labelled`] but takes the feature from column `x_column`.
pub fn read_labelled_column<R: Read>(reader: R, x_column: &str) -> Result<Vec<LabelledDatum>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let (ix, iu, is) = (column(&headers, x_column)?, column(&headers, "u")?, column(&headers, "s")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Parse { line, message: "short row".into() });
        let x: f64 = field(ix)?
            .parse()
            .map_err(|_| Error::Parse { line, message: format!("{x_column} '{}' is not a number", &rec[ix]) })?;
        if !x.is_finite() {
            return Err(Error::Parse { line, message: format!("{x_column} '{x}' is not finite") });
        }
        out.push(LabelledDatum::new(x, parse_label(field(iu)?, "u", line)?, parse_label(field(is)?, "s", line)?));
    }
    Ok(out)
}

pub fn read_labelled_file(path: &Path) -> Result<Vec<LabelledDatum>> {
    read_labelled(File::open(path)?)
}

/// Writes `x,u,s` rows; `x` uses the shortest round-trip representation.
pub fn write_labelled<W: Write>(writer: W, data: &[LabelledDatum]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "u", "s"])?;
    for d in data {
        w.write_record([d.x.to_string(), d.u.to_string(), d.s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labelled_file(path: &Path, data: &[LabelledDatum]) -> Result<()> {
    write_labelled(File::create(path)?, data)
}
