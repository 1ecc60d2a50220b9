//! Forecast verification: confusion matrices, TSS, HSS, recall, and their
//! breakdowns by flare class and disk location.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{predict, LayerGraph, Tensor};
use crate::data::{ClassLetter, FlareEvent, Label, LabeledSample};
use crate::error::{Error, Result};
use crate::model::CLASS_FL;

/// Largest |longitude| counted as central, in degrees (inclusive).
pub const CENTRAL_LONGITUDE_DEG: f64 = 70.0;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub const fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionMatrix { tp, fp, tn, fn_ }
    }

    /// Actual positives.
    pub fn p(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Actual negatives.
    pub fn n(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.p() + self.n()
    }

    pub fn record(&mut self, actual: Label, predicted: Label) {
        match (actual, predicted) {
            (Label::FL, Label::FL) => self.tp += 1,
            (Label::FL, Label::NF) => self.fn_ += 1,
            (Label::NF, Label::FL) => self.fp += 1,
            (Label::NF, Label::NF) => self.tn += 1,
        }
    }

    /// The matrix of the opposite forecast (every prediction flipped).
    pub fn swapped(&self) -> Self {
        ConfusionMatrix::new(self.fn_, self.tn, self.fp, self.tp)
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = ConfusionMatrix;
    fn add(self, o: Self) -> Self {
        ConfusionMatrix::new(
            self.tp + o.tp,
            self.fp + o.fp,
            self.tn + o.tn,
            self.fn_ + o.fn_,
        )
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionMatrix::default(), |a, b| a + b)
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "TP={} FP={} TN={} FN={}",
            self.tp, self.fp, self.tn, self.fn_
        )
    }
}

/// True skill statistic, TP/(TP+FN) - FP/(FP+TN).
pub fn tss(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.p() == 0 || cm.n() == 0 {
        return Err(Error::Undefined {
            metric: "TSS",
            reason: format!("needs positives and negatives, got {cm}"),
        });
    }
    Ok(cm.tp as f64 / cm.p() as f64 - cm.fp as f64 / cm.n() as f64)
}

/// Heidke skill score, 2(TP*TN - FN*FP) / (P(FN+TN) + (TP+FP)N).
pub fn hss(cm: &ConfusionMatrix) -> Result<f64> {
    let (tp, fp, tn, fnn) = (cm.tp as f64, cm.fp as f64, cm.tn as f64, cm.fn_ as f64);
    let denom = cm.p() as f64 * (fnn + tn) + (tp + fp) * cm.n() as f64;
    if denom == 0.0 {
        return Err(Error::Undefined {
            metric: "HSS",
            reason: format!("zero denominator for {cm}"),
        });
    }
    Ok(2.0 * (tp * tn - fnn * fp) / denom)
}

pub fn recall(cm: &ConfusionMatrix) -> Result<f64> {
    recall_counts(cm.tp, cm.fn_)
}

pub fn recall_counts(tp: u64, fn_: u64) -> Result<f64> {
    if tp + fn_ == 0 {
        return Err(Error::Undefined {
            metric: "recall",
            reason: "no actual positives".into(),
        });
    }
    Ok(tp as f64 / (tp + fn_) as f64)
}

/// Mean and sample (n - 1) standard deviation; the spread of a single value
/// is reported as zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<MeanStd> {
        if values.is_empty() {
            return Err(Error::Evaluation("mean of no values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        let var = if values.len() > 1 {
            ss / (n - 1.0)
        } else {
            0.0
        };
        Ok(MeanStd {
            mean,
            std: var.sqrt(),
        })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Location {
    Central,
    NearLimb,
}

impl Location {
    pub fn of(longitude: f64) -> Location {
        if longitude.abs() <= CENTRAL_LONGITUDE_DEG {
            Location::Central
        } else {
            Location::NearLimb
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Location::Central => "central",
            Location::NearLimb => "near-limb",
        })
    }
}

/// TP/FN counts of actual FL samples split by the class letter (X or M) and
/// location of the event defining each sample's label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GroupCounts {
    /// `[x, m][central, near-limb]` as `(tp, fn)`.
    pub counts: [[(u64, u64); 2]; 2],
}

impl GroupCounts {
    pub const fn new(counts: [[(u64, u64); 2]; 2]) -> Self {
        GroupCounts { counts }
    }

    fn slot(letter: ClassLetter, loc: Location) -> Option<(usize, usize)> {
        let row = match letter {
            ClassLetter::X => 0,
            ClassLetter::M => 1,
            _ => return None,
        };
        Some((row, loc as usize))
    }

    pub fn record(&mut self, letter: ClassLetter, loc: Location, hit: bool) {
        if let Some((r, c)) = Self::slot(letter, loc) {
            let cell = &mut self.counts[r][c];
            if hit {
                cell.0 += 1;
            } else {
                cell.1 += 1;
            }
        }
    }

    pub fn get(&self, letter: ClassLetter, loc: Location) -> (u64, u64) {
        Self::slot(letter, loc).map_or((0, 0), |(r, c)| self.counts[r][c])
    }

    /// X and M combined.
    pub fn total(&self, loc: Location) -> (u64, u64) {
        let (x, m) = (self.counts[0][loc as usize], self.counts[1][loc as usize]);
        (x.0 + m.0, x.1 + m.1)
    }
}

impl std::ops::Add for GroupCounts {
    type Output = GroupCounts;
    fn add(mut self, o: Self) -> Self {
        for r in 0..2 {
            for c in 0..2 {
                self.counts[r][c].0 += o.counts[r][c].0;
                self.counts[r][c].1 += o.counts[r][c].1;
            }
        }
        self
    }
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub actual: Label,
    pub fl_probability: f64,
    pub predicted: Label,
    /// Class letter and position of the event defining an FL label.
    pub event: Option<(ClassLetter, f64, f64)>,
}

/// Scores of one test fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldEvaluation {
    pub fold: String,
    pub matrix: ConfusionMatrix,
    pub groups: GroupCounts,
    pub predictions: Vec<Prediction>,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(Error::Evaluation(format!(
            "threshold {threshold} outside [0, 1]"
        )))
    }
}

/// Scores FL probabilities: a sample is forecast FL when its probability is
/// at least `threshold`. Each FL sample is grouped by the catalog event that
/// defines its max_future_flux.
pub fn score(
    fold: impl Into<String>,
    samples: &[LabeledSample],
    fl_probabilities: &[f64],
    threshold: f64,
    events: &[FlareEvent],
) -> Result<FoldEvaluation> {
    check_threshold(threshold)?;
    if samples.len() != fl_probabilities.len() {
        return Err(Error::Evaluation(format!(
            "{} samples but {} probabilities",
            samples.len(),
            fl_probabilities.len()
        )));
    }
    let mut matrix = ConfusionMatrix::default();
    let mut groups = GroupCounts::default();
    let mut predictions = Vec::with_capacity(samples.len());
    for (s, &p) in samples.iter().zip(fl_probabilities) {
        let predicted = if p >= threshold { Label::FL } else { Label::NF };
        matrix.record(s.label, predicted);
        let event = match s.label {
            Label::FL => s
                .defining_event(events)
                .map(|e| (e.class.letter, e.longitude, e.latitude)),
            Label::NF => None,
        };
        if let Some((letter, lon, _)) = event {
            groups.record(letter, Location::of(lon), predicted == Label::FL);
        }
        predictions.push(Prediction {
            actual: s.label,
            fl_probability: p,
            predicted,
            event,
        });
    }
    Ok(FoldEvaluation {
        fold: fold.into(),
        matrix,
        groups,
        predictions,
    })
}

/// FL probabilities of a batch of `1 x H x W` images, evaluated `batch` at a
/// time.
pub fn fl_probabilities(graph: &LayerGraph, images: &[&Tensor], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let x = Tensor::stack(chunk)?;
        let lp = predict(graph, &x)?;
        let classes = lp.shape()[1];
        out.extend(lp.data().chunks(classes).map(|row| row[CLASS_FL].exp()));
    }
    Ok(out)
}

/// Runs the model over a fold and scores it.
pub fn evaluate(
    fold: impl Into<String>,
    graph: &LayerGraph,
    samples: &[LabeledSample],
    images: &[&Tensor],
    threshold: f64,
    events: &[FlareEvent],
) -> Result<FoldEvaluation> {
    check_threshold(threshold)?;
    let probs = fl_probabilities(graph, images, 64)?;
    score(fold, samples, &probs, threshold, events)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldScore {
    pub fold: String,
    pub matrix: ConfusionMatrix,
    pub tss: f64,
    pub hss: f64,
}

/// Fold scores aggregated as mean ± sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillReport {
    pub folds: Vec<FoldScore>,
    pub tss: MeanStd,
    pub hss: MeanStd,
    /// Counts summed over folds.
    pub aggregate: ConfusionMatrix,
    pub groups: GroupCounts,
}

impl SkillReport {
    pub fn from_matrices<S: Into<String>>(
        folds: impl IntoIterator<Item = (S, ConfusionMatrix)>,
        groups: GroupCounts,
    ) -> Result<SkillReport> {
        let folds = folds
            .into_iter()
            .map(|(fold, matrix)| {
                Ok(FoldScore {
                    fold: fold.into(),
                    tss: tss(&matrix)?,
                    hss: hss(&matrix)?,
                    matrix,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let t: Vec<f64> = folds.iter().map(|f| f.tss).collect();
        let h: Vec<f64> = folds.iter().map(|f| f.hss).collect();
        Ok(SkillReport {
            tss: MeanStd::of(&t)?,
            hss: MeanStd::of(&h)?,
            aggregate: folds.iter().map(|f| f.matrix).sum(),
            folds,
            groups,
        })
    }

    pub fn from_folds(folds: &[FoldEvaluation]) -> Result<SkillReport> {
        let groups = folds
            .iter()
            .fold(GroupCounts::default(), |acc, f| acc + f.groups);
        Self::from_matrices(folds.iter().map(|f| (f.fold.clone(), f.matrix)), groups)
    }

    /// `fold,tp,fp,tn,fn,tss,hss`
    pub fn write_folds_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Evaluation(format!("writing fold csv: {e}"));
        w.write_record(["fold", "tp", "fp", "tn", "fn", "tss", "hss"])
            .map_err(err)?;
        for f in &self.folds {
            let m = f.matrix;
            w.write_record([
                f.fold.clone(),
                m.tp.to_string(),
                m.fp.to_string(),
                m.tn.to_string(),
                m.fn_.to_string(),
                format!("{:.6}", f.tss),
                format!("{:.6}", f.hss),
            ])
            .map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::Evaluation(format!("writing fold csv: {e}")))
    }

    /// `group,flare_class,location,tp,fn,recall`; the recall column is empty
    /// where no positives exist.
    pub fn write_groups_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Evaluation(format!("writing group csv: {e}"));
        w.write_record(["group", "flare_class", "location", "tp", "fn", "recall"])
            .map_err(err)?;
        for (name, counts) in group_rows(&self.groups) {
            for (loc, (tp, fnn)) in counts {
                w.write_record([
                    "aggregate".to_string(),
                    name.to_string(),
                    loc.to_string(),
                    tp.to_string(),
                    fnn.to_string(),
                    recall_counts(tp, fnn)
                        .map(|r| format!("{r:.6}"))
                        .unwrap_or_default(),
                ])
                .map_err(err)?;
            }
        }
        w.flush()
            .map_err(|e| Error::Evaluation(format!("writing group csv: {e}")))
    }
}

type GroupRow = (&'static str, [(Location, (u64, u64)); 2]);

fn group_rows(g: &GroupCounts) -> [GroupRow; 3] {
    let row = |f: &dyn Fn(Location) -> (u64, u64)| {
        [Location::Central, Location::NearLimb].map(|l| (l, f(l)))
    };
    [
        ("X", row(&|l| g.get(ClassLetter::X, l))),
        ("M", row(&|l| g.get(ClassLetter::M, l))),
        ("X&M", row(&|l| g.total(l))),
    ]
}

impl fmt::Display for SkillReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "fold", "TP", "FP", "TN", "FN", "TSS", "HSS"
        )?;
        for s in &self.folds {
            let m = s.matrix;
            writeln!(
                f,
                "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7.2} {:>7.2}",
                s.fold, m.tp, m.fp, m.tn, m.fn_, s.tss, s.hss
            )?;
        }
        let m = self.aggregate;
        writeln!(
            f,
            "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "aggregate",
            m.tp,
            m.fp,
            m.tn,
            m.fn_,
            self.tss.to_string(),
            self.hss.to_string()
        )?;
        writeln!(f)?;
        writeln!(
            f,
            "{:<6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "class", "TP<=70", "FN<=70", "recall", "TP>70", "FN>70", "recall"
        )?;
        for (name, cells) in group_rows(&self.groups) {
            write!(f, "{name:<6}")?;
            for (_, (tp, fnn)) in cells {
                let r = recall_counts(tp, fnn)
                    .map(|r| format!("{r:.2}"))
                    .unwrap_or_else(|_| "-".into());
                write!(f, " {tp:>8} {fnn:>8} {r:>8}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Per-location TP/FN of X-class flare instances.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationRow {
    pub longitude: f64,
    pub latitude: f64,
    pub tp: u64,
    pub fn_: u64,
}

impl LocationRow {
    pub fn never_detected(&self) -> bool {
        self.tp == 0
    }
}

/// Groups X-class instances by the position of their defining event, in
/// order of first appearance.
pub fn location_report(predictions: &[Prediction]) -> Vec<LocationRow> {
    let mut rows: Vec<LocationRow> = Vec::new();
    for p in predictions {
        let Some((ClassLetter::X, lon, lat)) = p.event else {
            continue;
        };
        let hit = p.predicted == Label::FL;
        let row = match rows
            .iter_mut()
            .find(|r| r.longitude == lon && r.latitude == lat)
        {
            Some(r) => r,
            None => {
                rows.push(LocationRow {
                    longitude: lon,
                    latitude: lat,
                    tp: 0,
                    fn_: 0,
                });
                rows.last_mut().unwrap()
            }
        };
        if hit {
            row.tp += 1;
        } else {
            row.fn_ += 1;
        }
    }
    rows
}

/// `longitude,latitude,tp,fn,zero_tp`
pub fn write_location_csv<W: Write>(rows: &[LocationRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Evaluation(format!("writing location csv: {e}"));
    w.write_record(["longitude", "latitude", "tp", "fn", "zero_tp"])
        .map_err(err)?;
    for r in rows {
        w.write_record([
            format!("{:.3}", r.longitude),
            format!("{:.3}", r.latitude),
            r.tp.to_string(),
            r.fn_.to_string(),
            r.never_detected().to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Evaluation(format!("writing location csv: {e}")))
}

pub fn save_csv(
    path: &Path,
    write: impl FnOnce(std::io::BufWriter<std::fs::File>) -> Result<()>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write(std::io::BufWriter::new(file))
}

/// Published confusion-matrix counts and the skill values printed next to
/// them, to two decimals.
pub mod published {
    use super::{ConfusionMatrix, GroupCounts};

    pub const FOLDS: [ConfusionMatrix; 4] = [
        ConfusionMatrix::new(1720, 1943, 10511, 614),
        ConfusionMatrix::new(1155, 3083, 10772, 457),
        ConfusionMatrix::new(1585, 2668, 11640, 779),
        ConfusionMatrix::new(1706, 2241, 11791, 984),
    ];
    pub const AGGREGATE: ConfusionMatrix = ConfusionMatrix::new(6166, 9935, 44714, 2834);
    pub const TSS: [f64; 4] = [0.58, 0.49, 0.48, 0.47];
    pub const HSS: [f64; 4] = [0.47, 0.29, 0.36, 0.40];
    pub const TSS_MEAN_STD: (f64, f64) = (0.51, 0.05);
    pub const HSS_MEAN_STD: (f64, f64) = (0.38, 0.08);

    /// X and M instances, `[x, m][central, near-limb]` as `(tp, fn)`.
    pub const LOCATIONS: GroupCounts =
        GroupCounts::new([[(637, 31), (157, 55)], [(4229, 1601), (1143, 1147)]]);
    /// Rows X, M, X&M; columns central then near-limb.
    pub const RECALLS: [[f64; 2]; 3] = [[0.95, 0.74], [0.73, 0.50], [0.75, 0.52]];
    pub const TOTAL_COUNTS: [(u64, u64); 2] = [(4866, 1632), (1300, 1202)];

    /// Tolerance on every recomputed two-decimal value.
    pub const TOLERANCE: f64 = 0.005;
}

/// One recomputed published value.
#[derive(Debug, Clone, PartialEq)]
pub struct TableCheck {
    pub name: String,
    pub published: f64,
    pub recomputed: f64,
}

impl TableCheck {
    pub fn passed(&self) -> bool {
        (self.published - self.recomputed).abs() <= published::TOLERANCE
    }
}

impl fmt::Display for TableCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} published {:.2} recomputed {:.4}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.published,
            self.recomputed
        )
    }
}

/// Recomputes every skill value of the published fold table and location
/// table from their counts.
pub fn verify_tables() -> Result<Vec<TableCheck>> {
    use published as p;
    let mut checks = Vec::new();
    let check = |name: String, published: f64, recomputed: f64| TableCheck {
        name,
        published,
        recomputed,
    };
    let report = SkillReport::from_matrices(
        p::FOLDS
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("Fold-{}", i + 1), *m)),
        p::LOCATIONS,
    )?;
    for (i, f) in report.folds.iter().enumerate() {
        checks.push(check(format!("{} TSS", f.fold), p::TSS[i], f.tss));
        checks.push(check(format!("{} HSS", f.fold), p::HSS[i], f.hss));
    }
    checks.push(check("mean TSS".into(), p::TSS_MEAN_STD.0, report.tss.mean));
    checks.push(check("std TSS".into(), p::TSS_MEAN_STD.1, report.tss.std));
    checks.push(check("mean HSS".into(), p::HSS_MEAN_STD.0, report.hss.mean));
    checks.push(check("std HSS".into(), p::HSS_MEAN_STD.1, report.hss.std));
    for (r, (name, cells)) in group_rows(&p::LOCATIONS).iter().enumerate() {
        for (c, (loc, (tp, fnn))) in cells.iter().enumerate() {
            checks.push(check(
                format!("{name} {loc} recall"),
                p::RECALLS[r][c],
                recall_counts(*tp, *fnn)?,
            ));
        }
    }
    Ok(checks)
}
