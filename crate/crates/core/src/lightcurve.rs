//! Light-curve and flare-catalog files.
//!
//! Light curves are CSV with header `time,flux`, times in days. A flux cell
//! that is empty or reads `nan` (any case) is missing. Curve files are named
//! `<star_id>_<quarter>.csv`; the last underscore separates the two.
//!
//! Catalogs are CSV with header `star_id,quarter,flare_time,flare_flux`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const KEPLER_LONG_CADENCE_MINUTES: f64 = 29.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightCurve {
    pub star_id: String,
    pub quarter: String,
    pub timestamps: Vec<f64>,
    /// `None` marks a missing cadence.
    pub flux: Vec<Option<f64>>,
    pub cadence_minutes: f64,
}

impl LightCurve {
    pub fn new(
        star_id: impl Into<String>,
        quarter: impl Into<String>,
        timestamps: Vec<f64>,
        flux: Vec<Option<f64>>,
    ) -> Result<Self> {
        let curve = Self {
            star_id: star_id.into(),
            quarter: quarter.into(),
            timestamps,
            flux,
            cadence_minutes: KEPLER_LONG_CADENCE_MINUTES,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timestamps.len() != self.flux.len() {
            return Err(Error::Validation(format!(
                "{} timestamps but {} flux values",
                self.timestamps.len(),
                self.flux.len()
            )));
        }
        if self.timestamps.len() < 2 {
            return Err(Error::Validation(
                "a light curve needs at least two cadences".into(),
            ));
        }
        if let Some(i) = self.timestamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Validation(format!(
                "timestamps not strictly increasing at index {}",
                i + 1
            )));
        }
        if !(self.cadence_minutes > 0.0) {
            return Err(Error::Validation("cadence must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.flux.iter().filter(|f| f.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.flux.iter().all(Option::is_some)
    }

    /// Flux values of a fully interpolated curve.
    pub fn complete_flux(&self) -> Result<Vec<f64>> {
        self.flux
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.ok_or_else(|| {
                    Error::Validation(format!(
                        "{}/{}: flux missing at index {i}; interpolate first",
                        self.star_id, self.quarter
                    ))
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,flux\n");
        for (t, f) in self.timestamps.iter().zip(&self.flux) {
            match f {
                Some(v) => writeln!(out, "{t},{v}").unwrap(),
                None => writeln!(out, "{t},").unwrap(),
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// File name used by [`parse_lightcurve`] to recover identifiers.
    pub fn file_name(&self) -> String {
        format!("{}_{}.csv", self.star_id, self.quarter)
    }
}

fn parse_err(path: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn check_header(rdr: &mut csv::Reader<&[u8]>, expected: &[&str], origin: &str) -> Result<()> {
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(origin, 1, e.to_string()))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(parse_err(
            origin,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_number(cell: &str, what: &str, origin: &str, line: u64) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(origin, line, format!("{what} `{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(origin, line, format!("{what} `{cell}` is not finite")));
    }
    Ok(v)
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("nan")
}

/// Parses light-curve CSV text. `origin` labels error messages.
pub fn parse_lightcurve_str(
    text: &str,
    star_id: &str,
    quarter: &str,
    origin: &str,
) -> Result<LightCurve> {
    let mut rdr = csv_reader(text);
    check_header(&mut rdr, &["time", "flux"], origin)?;
    let mut timestamps = Vec::new();
    let mut flux = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(origin, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(parse_err(
                origin,
                line,
                format!("expected 2 fields, found {}", rec.len()),
            ));
        }
        timestamps.push(parse_number(&rec[0], "time", origin, line)?);
        flux.push(if is_missing(&rec[1]) {
            None
        } else {
            Some(parse_number(&rec[1], "flux", origin, line)?)
        });
    }
    LightCurve::new(star_id, quarter, timestamps, flux)
}

/// Splits a curve file stem `<star_id>_<quarter>` into its identifiers.
pub fn curve_ids_from_path(path: &Path) -> Result<(String, String)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Validation(format!("{}: unusable file name", path.display())))?;
    match stem.rsplit_once('_') {
        Some((star, quarter)) if !star.is_empty() && !quarter.is_empty() => {
            Ok((star.to_string(), quarter.to_string()))
        }
        _ => Err(Error::Validation(format!(
            "{}: file name must be <star_id>_<quarter>.csv",
            path.display()
        ))),
    }
}

pub fn parse_lightcurve(path: &Path) -> Result<LightCurve> {
    let (star, quarter) = curve_ids_from_path(path)?;
    let text = std::fs::read_to_string(path)?;
    parse_lightcurve_str(&text, &star, &quarter, &path.display().to_string())
}

/// Fills missing flux by linear interpolation in timestamp space.
///
/// Interior gaps take the straight line between the nearest valid neighbours;
/// leading and trailing gaps repeat the nearest valid value.
pub fn interpolate_missing(curve: &LightCurve) -> Result<LightCurve> {
    let valid: Vec<usize> = curve
        .flux
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.map(|_| i))
        .collect();
    let (&first, &last) = match (valid.first(), valid.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => {
            return Err(Error::Validation(format!(
                "{}/{}: every flux value is missing",
                curve.star_id, curve.quarter
            )))
        }
    };

    let mut flux = curve.flux.clone();
    let fill_first = curve.flux[first];
    let fill_last = curve.flux[last];
    for f in &mut flux[..first] {
        *f = fill_first;
    }
    for f in &mut flux[last + 1..] {
        *f = fill_last;
    }
    for pair in valid.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if hi == lo + 1 {
            continue;
        }
        let (t0, t1) = (curve.timestamps[lo], curve.timestamps[hi]);
        let (f0, f1) = (curve.flux[lo].unwrap(), curve.flux[hi].unwrap());
        for (i, slot) in flux.iter_mut().enumerate().take(hi).skip(lo + 1) {
            let frac = (curve.timestamps[i] - t0) / (t1 - t0);
            *slot = Some(f0 + (f1 - f0) * frac);
        }
    }

    Ok(LightCurve {
        flux,
        ..curve.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlareCatalogEntry {
    pub star_id: String,
    pub quarter: String,
    /// Days since the start of the observation period.
    pub flare_time: f64,
    /// Relative flux at the flare peak.
    pub flare_flux: f64,
}

/// Catalog entries keyed by `(star_id, quarter)`, each group sorted by time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlareCatalog {
    groups: BTreeMap<(String, String), Vec<FlareCatalogEntry>>,
}

impl FlareCatalog {
    pub fn from_entries(entries: impl IntoIterator<Item = FlareCatalogEntry>) -> Result<Self> {
        let mut groups: BTreeMap<(String, String), Vec<FlareCatalogEntry>> = BTreeMap::new();
        for e in entries {
            if !(e.flare_time >= 0.0) {
                return Err(Error::Validation(format!(
                    "{}/{}: flare_time {} is negative",
                    e.star_id, e.quarter, e.flare_time
                )));
            }
            groups
                .entry((e.star_id.clone(), e.quarter.clone()))
                .or_default()
                .push(e);
        }
        for g in groups.values_mut() {
            g.sort_by(|a, b| a.flare_time.total_cmp(&b.flare_time));
        }
        Ok(Self { groups })
    }

    pub fn for_curve(&self, star_id: &str, quarter: &str) -> &[FlareCatalogEntry] {
        self.groups
            .get(&(star_id.to_string(), quarter.to_string()))
            .map_or(&[], Vec::as_slice)
    }

    /// All entries ordered by star, quarter, then time.
    pub fn iter(&self) -> impl Iterator<Item = &FlareCatalogEntry> {
        self.groups.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("star_id,quarter,flare_time,flare_flux\n");
        for e in self.iter() {
            writeln!(
                out,
                "{},{},{},{}",
                e.star_id, e.quarter, e.flare_time, e.flare_flux
            )
            .unwrap();
        }
        out
    }
}

pub fn parse_catalog_str(text: &str, origin: &str) -> Result<FlareCatalog> {
    let mut rdr = csv_reader(text);
    check_header(
        &mut rdr,
        &["star_id", "quarter", "flare_time", "flare_flux"],
        origin,
    )?;
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(origin, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(parse_err(
                origin,
                line,
                format!("expected 4 fields, found {}", rec.len()),
            ));
        }
        let flare_time = parse_number(&rec[2], "flare_time", origin, line)?;
        if flare_time < 0.0 {
            return Err(Error::Validation(format!(
                "{origin}: line {line}: flare_time {flare_time} is negative"
            )));
        }
        entries.push(FlareCatalogEntry {
            star_id: rec[0].to_string(),
            quarter: rec[1].to_string(),
            flare_time,
            flare_flux: parse_number(&rec[3], "flare_flux", origin, line)?,
        });
    }
    FlareCatalog::from_entries(entries)
}

pub fn parse_catalog(path: &Path) -> Result<FlareCatalog> {
    let text = std::fs::read_to_string(path)?;
    parse_catalog_str(&text, &path.display().to_string())
}
