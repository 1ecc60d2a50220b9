//! Observation labels from a flare catalog, tri-monthly partitions, and the
//! dataset manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, Timelike, Utc};

use super::catalog::{format_utc, parse_utc, FlareEvent, FLARE_THRESHOLD_WM2};
use crate::error::{Error, Result};
use crate::model::{CLASS_FL, CLASS_NF};

/// Length of the prediction window following each observation.
pub const PREDICTION_WINDOW_HOURS: i64 = 24;

pub const MANIFEST_HEADER: [&str; 5] = [
    "timestamp",
    "image_path",
    "label",
    "max_future_flux",
    "partition",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    /// No flare of at least M1.0 peaks within the window.
    NF,
    FL,
}

impl Label {
    pub fn from_flux(max_future_flux: Option<f64>) -> Label {
        match max_future_flux {
            Some(f) if f >= FLARE_THRESHOLD_WM2 => Label::FL,
            _ => Label::NF,
        }
    }

    /// Class index used by the model outputs.
    pub fn index(self) -> usize {
        match self {
            Label::NF => CLASS_NF,
            Label::FL => CLASS_FL,
        }
    }

    pub fn from_index(index: usize) -> Result<Label> {
        match index {
            CLASS_NF => Ok(Label::NF),
            CLASS_FL => Ok(Label::FL),
            other => Err(Error::Data(format!(
                "class index {other} is not 0 (NF) or 1 (FL)"
            ))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::NF => "NF",
            Label::FL => "FL",
        })
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Label> {
        match s {
            "NF" => Ok(Label::NF),
            "FL" => Ok(Label::FL),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

/// Tri-monthly partition id, 1 to 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Partition(u8);

impl Partition {
    pub const ALL: [Partition; 4] = [Partition(1), Partition(2), Partition(3), Partition(4)];

    pub fn new(id: u8) -> Result<Partition> {
        if (1..=4).contains(&id) {
            Ok(Partition(id))
        } else {
            Err(Error::Data(format!("partition id {id} outside 1..=4")))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Jan-Mar is 1, Apr-Jun 2, Jul-Sep 3, Oct-Dec 4.
pub fn assign_partition(timestamp: &DateTime<Utc>) -> Partition {
    Partition(((timestamp.month0() / 3) + 1) as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub timestamp: DateTime<Utc>,
    pub image_path: PathBuf,
    pub label: Label,
    pub max_future_flux: Option<f64>,
    pub partition: Partition,
}

impl LabeledSample {
    /// Catalog event with the largest peak flux inside this sample's window,
    /// the one that defines `max_future_flux`. Ties go to the earliest event.
    pub fn defining_event<'a>(&self, events: &'a [FlareEvent]) -> Option<&'a FlareEvent> {
        let end = self.timestamp + Duration::hours(PREDICTION_WINDOW_HOURS);
        events
            .iter()
            .filter(|e| e.peak_time > self.timestamp && e.peak_time <= end)
            .fold(None, |best: Option<&FlareEvent>, e| match best {
                Some(b) if b.peak_flux >= e.peak_flux => Some(b),
                _ => Some(e),
            })
    }
}

/// Labels every timestamp by the largest catalog peak flux in `(t, t + 24h]`.
/// Timestamps must fall on the hour. `image_path` maps a timestamp to the
/// path recorded alongside it.
pub fn label_samples(
    timestamps: &[DateTime<Utc>],
    events: &[FlareEvent],
    image_path: impl Fn(&DateTime<Utc>) -> PathBuf,
) -> Result<Vec<LabeledSample>> {
    let mut by_peak: Vec<&FlareEvent> = events.iter().collect();
    by_peak.sort_by_key(|e| e.peak_time);
    let peaks: Vec<DateTime<Utc>> = by_peak.iter().map(|e| e.peak_time).collect();
    timestamps
        .iter()
        .map(|t| {
            if t.minute() != 0 || t.second() != 0 || t.nanosecond() != 0 {
                return Err(Error::Data(format!(
                    "timestamp {} is not on the hour",
                    format_utc(t)
                )));
            }
            let end = *t + Duration::hours(PREDICTION_WINDOW_HOURS);
            let lo = peaks.partition_point(|p| p <= t);
            let hi = peaks.partition_point(|p| *p <= end);
            let max_future_flux = by_peak[lo..hi]
                .iter()
                .map(|e| e.peak_flux)
                .fold(None, |m: Option<f64>, f| Some(m.map_or(f, |m| m.max(f))));
            Ok(LabeledSample {
                timestamp: *t,
                image_path: image_path(t),
                label: Label::from_flux(max_future_flux),
                max_future_flux,
                partition: assign_partition(t),
            })
        })
        .collect()
}

/// Parses `%Y%m%dT%H%M%SZ` or ISO-8601 timestamps embedded in image file
/// stems, e.g. `hmi_20140215T060000Z.png`.
pub fn timestamp_from_stem(path: &Path) -> Option<DateTime<Utc>> {
    let stem = path.file_stem()?.to_str()?;
    stem.split(['_', '-', '.'])
        .rev()
        .chain(std::iter::once(stem))
        .find_map(|tok| {
            chrono::NaiveDateTime::parse_from_str(tok, "%Y%m%dT%H%M%SZ")
                .ok()
                .map(|n| n.and_utc())
                .or_else(|| parse_utc(tok).ok())
        })
}

pub fn write_manifest<W: std::io::Write>(samples: &[LabeledSample], writer: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("writing manifest: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for s in samples {
        w.write_record([
            format_utc(&s.timestamp),
            s.image_path.display().to_string(),
            s.label.to_string(),
            s.max_future_flux
                .map(|f| format!("{f:e}"))
                .unwrap_or_default(),
            s.partition.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing manifest: {e}")))
}

pub fn save_manifest(samples: &[LabeledSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest(samples, std::io::BufWriter::new(file))
}

/// Reads a manifest. Relative image paths are resolved against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<LabeledSample>> {
    let bad = |reason: String| Error::Format {
        format: "manifest",
        path: path.to_path_buf(),
        reason,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(MANIFEST_HEADER) {
        return Err(bad(format!(
            "header {:?}, expected {:?}",
            header, MANIFEST_HEADER
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let at = |e: Error| bad(format!("row {}: {e}", row + 1));
        let timestamp = parse_utc(&rec[0]).map_err(at)?;
        let image = PathBuf::from(&rec[1]);
        let max_future_flux = match &rec[3] {
            "" => None,
            s => Some(
                s.parse::<f64>()
                    .map_err(|e| bad(format!("row {}: flux {s:?}: {e}", row + 1)))?,
            ),
        };
        let label: Label = rec[2].parse().map_err(at)?;
        if label != Label::from_flux(max_future_flux) {
            return Err(bad(format!(
                "row {}: label {label} contradicts max_future_flux",
                row + 1
            )));
        }
        let partition = rec[4]
            .parse::<u8>()
            .map_err(|e| bad(format!("row {}: partition: {e}", row + 1)))
            .and_then(|p| Partition::new(p).map_err(at))?;
        if partition != assign_partition(&timestamp) {
            return Err(bad(format!(
                "row {}: partition {partition} contradicts month",
                row + 1
            )));
        }
        out.push(LabeledSample {
            timestamp,
            image_path: if image.is_absolute() {
                image
            } else {
                base.join(image)
            },
            label,
            max_future_flux,
            partition,
        });
    }
    Ok(out)
}

/// Per-partition and per-label sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSummary {
    /// `counts[p - 1][label index]`
    pub counts: [[usize; 2]; 4],
    pub skipped_catalog_rows: usize,
}

impl DatasetSummary {
    pub fn of(samples: &[LabeledSample], skipped_catalog_rows: usize) -> DatasetSummary {
        let mut counts = [[0; 2]; 4];
        for s in samples {
            counts[s.partition.id() as usize - 1][s.label.index()] += 1;
        }
        DatasetSummary {
            counts,
            skipped_catalog_rows,
        }
    }

    pub fn label_totals(&self) -> [usize; 2] {
        self.counts
            .iter()
            .fold([0, 0], |acc, c| [acc[0] + c[0], acc[1] + c[1]])
    }
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "partition      NF      FL")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(f, "{:>9} {:>7} {:>7}", i + 1, c[CLASS_NF], c[CLASS_FL])?;
        }
        let t = self.label_totals();
        write!(f, "{:>9} {:>7} {:>7}", "total", t[CLASS_NF], t[CLASS_FL])?;
        if self.skipped_catalog_rows > 0 {
            write!(f, "\n{} catalog rows skipped", self.skipped_catalog_rows)?;
        }
        Ok(())
    }
}
