//! GOES flare classes and the event catalog.
//!
//! Catalog CSV columns:
//! `start_time,peak_time,end_time,class,peak_flux_wm2,longitude_deg,latitude_deg,noaa_ar`
//! with ISO-8601 UTC times. Either `class` or `peak_flux_wm2` may be empty,
//! but not both.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};

use crate::error::{Error, Result};

/// Peak flux (W m^-2) at which a sample is labeled FL.
pub const FLARE_THRESHOLD_WM2: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLetter {
    A,
    B,
    C,
    M,
    X,
}

impl ClassLetter {
    /// Lower flux bound of the decade, in W m^-2.
    pub fn threshold(self) -> f64 {
        match self {
            ClassLetter::A => 1e-8,
            ClassLetter::B => 1e-7,
            ClassLetter::C => 1e-6,
            ClassLetter::M => 1e-5,
            ClassLetter::X => 1e-4,
        }
    }

    fn from_char(c: char) -> Option<Self> {
        Some(match c.to_ascii_uppercase() {
            'A' => ClassLetter::A,
            'B' => ClassLetter::B,
            'C' => ClassLetter::C,
            'M' => ClassLetter::M,
            'X' => ClassLetter::X,
            _ => return None,
        })
    }

    fn as_char(self) -> char {
        match self {
            ClassLetter::A => 'A',
            ClassLetter::B => 'B',
            ClassLetter::C => 'C',
            ClassLetter::M => 'M',
            ClassLetter::X => 'X',
        }
    }
}

/// A GOES class such as `M1.4`. The magnitude is kept in tenths so that
/// classes compare and print exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlareClass {
    pub letter: ClassLetter,
    tenths: u32,
}

impl FlareClass {
    pub fn new(letter: ClassLetter, magnitude: f64) -> Self {
        FlareClass {
            letter,
            tenths: (magnitude * 10.0).round().max(0.0) as u32,
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.tenths as f64 / 10.0
    }

    /// Representative peak flux for the class.
    pub fn flux(&self) -> f64 {
        self.letter.threshold() * self.tenths as f64 / 10.0
    }
}

impl fmt::Display for FlareClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}.{}",
            self.letter.as_char(),
            self.tenths / 10,
            self.tenths % 10
        )
    }
}

impl FromStr for FlareClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut chars = s.chars();
        let letter = chars
            .next()
            .and_then(ClassLetter::from_char)
            .ok_or_else(|| Error::Data(format!("bad flare class {s:?}")))?;
        let magnitude: f64 = chars
            .as_str()
            .parse()
            .map_err(|_| Error::Data(format!("bad flare class magnitude in {s:?}")))?;
        if !(magnitude >= 0.0 && magnitude.is_finite()) {
            return Err(Error::Data(format!("bad flare class magnitude in {s:?}")));
        }
        Ok(FlareClass::new(letter, magnitude))
    }
}

/// Maps a peak X-ray flux to its GOES class. The letter is chosen by decade
/// threshold and the magnitude is `flux / threshold` rounded to one decimal;
/// below X the magnitude is capped at 9.9 so the letter never disagrees with
/// the decade (an exactly representable 9.96e-6 is C9.9, not C10.0).
pub fn flux_to_class(peak_flux: f64) -> Result<FlareClass> {
    if !peak_flux.is_finite() || peak_flux <= 0.0 {
        return Err(Error::Data(format!(
            "peak flux must be positive and finite, got {peak_flux}"
        )));
    }
    let letter = [
        ClassLetter::X,
        ClassLetter::M,
        ClassLetter::C,
        ClassLetter::B,
    ]
    .into_iter()
    .find(|l| peak_flux >= l.threshold())
    .unwrap_or(ClassLetter::A);
    let mut magnitude = (peak_flux / letter.threshold() * 10.0).round() / 10.0;
    if letter != ClassLetter::X {
        magnitude = magnitude.min(9.9);
    }
    Ok(FlareClass::new(letter, magnitude))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlareEvent {
    pub start_time: DateTime<Utc>,
    pub peak_time: DateTime<Utc>,
    pub end_time: DateTime<Utc>,
    pub peak_flux: f64,
    pub class: FlareClass,
    /// Heliographic longitude in degrees, east negative.
    pub longitude: f64,
    pub latitude: f64,
    pub noaa_ar: Option<u32>,
}

impl FlareEvent {
    pub fn is_flare(&self) -> bool {
        self.peak_flux >= FLARE_THRESHOLD_WM2
    }
}

pub const CATALOG_HEADER: [&str; 8] = [
    "start_time",
    "peak_time",
    "end_time",
    "class",
    "peak_flux_wm2",
    "longitude_deg",
    "latitude_deg",
    "noaa_ar",
];

/// Parses `2011-09-22T10:29:00Z`, `2011-09-22T10:29:00` or
/// `2011-09-22 10:29:00` as UTC.
pub fn parse_utc(s: &str) -> Result<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    let trimmed = s.strip_suffix('Z').unwrap_or(s);
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(trimmed, fmt) {
            return Ok(t.and_utc());
        }
    }
    Err(Error::Data(format!("unparseable UTC timestamp {s:?}")))
}

pub fn format_utc(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Events parsed from a catalog plus the number of rows that were skipped.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub events: Vec<FlareEvent>,
    pub skipped_rows: usize,
}

fn parse_row(record: &csv::StringRecord) -> Result<FlareEvent> {
    let field = |i: usize| record.get(i).unwrap_or("").trim();
    let class = match field(3) {
        "" => None,
        c => Some(c.parse::<FlareClass>()?),
    };
    let flux = match field(4) {
        "" => None,
        f => Some(
            f.parse::<f64>()
                .map_err(|_| Error::Data(format!("bad flux {f:?}")))?,
        ),
    };
    let (peak_flux, class) = match (flux, class) {
        (Some(f), Some(c)) => (f, c),
        (Some(f), None) => (f, flux_to_class(f)?),
        (None, Some(c)) => (c.flux(), c),
        (None, None) => return Err(Error::Data("row has neither class nor flux".into())),
    };
    if peak_flux.is_nan() || peak_flux <= 0.0 {
        return Err(Error::Data(format!("nonpositive flux {peak_flux}")));
    }
    let angle = |i: usize| -> Result<f64> {
        let v: f64 = field(i)
            .parse()
            .map_err(|_| Error::Data(format!("bad angle {:?}", field(i))))?;
        if v.abs() > 90.0 {
            return Err(Error::Data(format!("angle {v} outside [-90, 90]")));
        }
        Ok(v)
    };
    let noaa_ar = match field(7) {
        "" => None,
        s => Some(
            s.parse()
                .map_err(|_| Error::Data(format!("bad active region number {s:?}")))?,
        ),
    };
    Ok(FlareEvent {
        start_time: parse_utc(field(0))?,
        peak_time: parse_utc(field(1))?,
        end_time: parse_utc(field(2))?,
        peak_flux,
        class,
        longitude: angle(5)?,
        latitude: angle(6)?,
        noaa_ar,
    })
}

impl Catalog {
    pub fn from_reader<R: std::io::Read>(reader: R, origin: &Path) -> Result<Catalog> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Format {
            format: "catalog CSV",
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>() != CATALOG_HEADER {
            return Err(Error::Format {
                format: "catalog CSV",
                path: origin.to_path_buf(),
                reason: format!("expected header {}", CATALOG_HEADER.join(",")),
            });
        }
        let mut catalog = Catalog::default();
        for record in rdr.records() {
            match record
                .map_err(|e| Error::Data(e.to_string()))
                .and_then(|r| parse_row(&r))
            {
                Ok(event) => catalog.events.push(event),
                Err(e) => {
                    log::warn!("{}: skipping catalog row: {e}", origin.display());
                    catalog.skipped_rows += 1;
                }
            }
        }
        Ok(catalog)
    }

    pub fn load(path: &Path) -> Result<Catalog> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, path)
    }

    pub fn write<W: std::io::Write>(events: &[FlareEvent], writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Data(format!("writing catalog: {e}"));
        w.write_record(CATALOG_HEADER).map_err(csv_err)?;
        for e in events {
            w.write_record([
                format_utc(&e.start_time),
                format_utc(&e.peak_time),
                format_utc(&e.end_time),
                e.class.to_string(),
                format!("{:e}", e.peak_flux),
                format!("{:.2}", e.longitude),
                format!("{:.2}", e.latitude),
                e.noaa_ar.map(|n| n.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::Data(format!("writing catalog: {e}")))
    }

    pub fn save(events: &[FlareEvent], path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Self::write(events, file)
    }
}
