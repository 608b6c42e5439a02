//! Patient-level analysis: per-region Jacobian means, the ordering
//! classifier, contingency tables and the appendix fixture.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::defanalysis::{
    collect_samples, jacobian_map, partition_regions, pool, RegionLabel, RegionSamples,
};
use crate::error::{Error, Result};
use crate::io::{read_mask, read_volume};
use crate::registration::{register, RegistrationParams};
use crate::stats::{
    bootstrap_ci, box_stats, fisher_exact, normal_ci, pooled_t_test, summarize, BoxStats,
    Contingency2x2, FisherResult, Interval, TTest,
};
use crate::volume::{warp_mask, Mask, VectorField, Volume};

const APPENDIX_FIXTURE: &str = include_str!("../data/appendix_table6.csv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecistLabel {
    CR,
    PR,
    SD,
    PD,
    DP,
    NA,
}

impl RecistLabel {
    /// `Some(true)` for PR or CR, `None` for NA.
    pub fn is_responder(self) -> Option<bool> {
        match self {
            RecistLabel::NA => None,
            RecistLabel::PR | RecistLabel::CR => Some(true),
            _ => Some(false),
        }
    }
}

impl FromStr for RecistLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.trim() {
            "CR" => RecistLabel::CR,
            "PR" => RecistLabel::PR,
            "SD" => RecistLabel::SD,
            "PD" => RecistLabel::PD,
            "DP" => RecistLabel::DP,
            "NA" => RecistLabel::NA,
            other => return Err(format!("unknown response label {other:?}")),
        })
    }
}

impl fmt::Display for RecistLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// How many scans of a course enter the analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeekLimit {
    All,
    /// The first `n` scans, i.e. `n - 1` consecutive pairs.
    First(usize),
}

impl WeekLimit {
    pub const THREE_WEEKS: WeekLimit = WeekLimit::First(3);

    /// Number of consecutive pairs used out of a course of `scans` scans.
    pub fn pairs(self, scans: usize) -> usize {
        let used = match self {
            WeekLimit::All => scans,
            WeekLimit::First(n) => n.min(scans),
        };
        used.saturating_sub(1)
    }
}

impl FromStr for WeekLimit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "all" => Ok(WeekLimit::All),
            n => match n.parse::<usize>() {
                Ok(k) if k >= 2 => Ok(WeekLimit::First(k)),
                _ => Err(format!(
                    "week limit must be \"all\" or an integer >= 2, got {s:?}"
                )),
            },
        }
    }
}

impl fmt::Display for WeekLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeekLimit::All => f.write_str("all"),
            WeekLimit::First(n) => write!(f, "{n}"),
        }
    }
}

/// Jacobian means per region, pooled over voxels of all week pairs used.
/// A region that received no samples has no mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMeans {
    pub mu_r: Option<f64>,
    pub mu_g: Option<f64>,
    pub mu_u: Option<f64>,
    pub mu_n: Option<f64>,
    pub counts: BTreeMap<RegionLabel, usize>,
    pub week_limit: WeekLimit,
    pub pairs: usize,
}

impl RegionMeans {
    pub fn from_samples(s: &RegionSamples, week_limit: WeekLimit, pairs: usize) -> Self {
        Self {
            mu_r: s.mean(RegionLabel::R),
            mu_g: s.mean(RegionLabel::G),
            mu_u: s.mean(RegionLabel::U),
            mu_n: s.mean(RegionLabel::N),
            counts: RegionLabel::ALL.iter().map(|&l| (l, s.count(l))).collect(),
            week_limit,
            pairs,
        }
    }

    pub fn get(&self, label: RegionLabel) -> Option<f64> {
        match label {
            RegionLabel::R => self.mu_r,
            RegionLabel::G => self.mu_g,
            RegionLabel::U => self.mu_u,
            RegionLabel::N => self.mu_n,
        }
    }

    /// Regions among R, G, U without samples.
    pub fn missing(&self) -> Vec<RegionLabel> {
        [RegionLabel::R, RegionLabel::G, RegionLabel::U]
            .into_iter()
            .filter(|&l| self.get(l).is_none())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    PrClassified,
    NoDecision,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::PrClassified => "PR",
            Decision::NoDecision => "no-decision",
        }
    }
}

/// PR when `mu_R <= 1`, `mu_R <= mu_U` and `mu_R <= mu_G`; otherwise no
/// decision. `mu_N` is ignored. A missing R, G or U mean yields no decision.
pub fn classify(m: &RegionMeans) -> Result<Decision> {
    for v in [m.mu_r, m.mu_g, m.mu_u, m.mu_n].into_iter().flatten() {
        if !v.is_finite() {
            return Err(Error::NonFinite("region means"));
        }
    }
    let (Some(r), Some(g), Some(u)) = (m.mu_r, m.mu_g, m.mu_u) else {
        return Ok(Decision::NoDecision);
    };
    Ok(if r <= 1.0 && r <= u && r <= g {
        Decision::PrClassified
    } else {
        Decision::NoDecision
    })
}

/// Notes explaining a decision that rests on thin or degenerate data.
pub fn decision_notes(m: &RegionMeans) -> Vec<String> {
    let mut notes = Vec::new();
    let missing = m.missing();
    if !missing.is_empty() {
        let names: Vec<&str> = missing.iter().map(|l| l.as_str()).collect();
        notes.push(format!(
            "insufficient region: no samples in {}",
            names.join(", ")
        ));
    }
    let present: Vec<f64> = [m.mu_r, m.mu_g, m.mu_u].into_iter().flatten().collect();
    if !present.is_empty() && present.iter().all(|&v| v == 1.0) {
        notes.push("degenerate: all region means equal 1".into());
    }
    notes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scan {
    pub week: u32,
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub scans: Vec<Scan>,
    pub recist: RecistLabel,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if self.scans.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "patient {} has {} scan(s); at least 2 are needed",
                self.patient_id,
                self.scans.len()
            )));
        }
        if self.scans.windows(2).any(|w| w[0].week >= w[1].week) {
            return Err(Error::InvalidParameter(format!(
                "patient {} weeks are not strictly increasing",
                self.patient_id
            )));
        }
        Ok(())
    }

    pub fn load(&self) -> Result<(Vec<Volume>, Vec<Mask>)> {
        let mut vols = Vec::with_capacity(self.scans.len());
        let mut masks = Vec::with_capacity(self.scans.len());
        for s in &self.scans {
            vols.push(read_volume(&s.volume_path)?);
            masks.push(read_mask(&s.mask_path)?);
        }
        Ok((vols, masks))
    }
}

/// Reads a `patient_id,week,volume_path,mask_path,recist` manifest. Relative
/// paths resolve against the manifest's directory. Patients keep the order of
/// their first appearance; scans are sorted by week.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, path, base)
}

/// Manifest text for `records`, with paths made relative to `base` where
/// possible. Reading it back from a file in `base` gives the same records.
pub fn manifest_csv(records: &[PatientRecord], base: &Path) -> String {
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = String::from("patient_id,week,volume_path,mask_path,recist\n");
    for r in records {
        for s in &r.scans {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.patient_id,
                s.week,
                rel(&s.volume_path),
                rel(&s.mask_path),
                r.recist
            ));
        }
    }
    out
}

pub fn write_manifest(records: &[PatientRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    fs::write(path, manifest_csv(records, base)).map_err(|e| Error::io(path, e))
}

pub fn parse_manifest(text: &str, path: &Path, base: &Path) -> Result<Vec<PatientRecord>> {
    let bad = |m: String| Error::malformed(path, m);
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let expected = ["patient_id", "week", "volume_path", "mask_path", "recist"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(bad(format!("expected header {}", expected.join(","))));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, PatientRecord> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(bad(format!("line {line}: empty patient_id")));
        }
        let week: u32 = rec[1]
            .parse()
            .map_err(|_| bad(format!("line {line}: bad week {:?}", &rec[1])))?;
        let recist: RecistLabel = rec[4]
            .parse()
            .map_err(|m| bad(format!("line {line}: {m}")))?;
        let scan = Scan {
            week,
            volume_path: base.join(&rec[2]),
            mask_path: base.join(&rec[3]),
        };
        match by_id.get_mut(&id) {
            Some(p) => {
                if p.recist != recist {
                    return Err(bad(format!(
                        "line {line}: patient {id} has conflicting responses"
                    )));
                }
                p.scans.push(scan);
            }
            None => {
                order.push(id.clone());
                by_id.insert(
                    id.clone(),
                    PatientRecord {
                        patient_id: id,
                        scans: vec![scan],
                        recist,
                    },
                );
            }
        }
    }
    if order.is_empty() {
        return Err(bad("manifest lists no patients".into()));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut p = by_id.remove(&id).unwrap();
        p.scans.sort_by_key(|s| s.week);
        if p.scans.windows(2).any(|w| w[0].week == w[1].week) {
            return Err(bad(format!("patient {id} lists a week twice")));
        }
        out.push(p);
    }
    Ok(out)
}

/// Region samples of one week pair given the forward displacement that maps
/// the earlier scan onto the later one.
pub fn pair_samples(
    mask_prev: &Mask,
    mask_next: &Mask,
    forward: &VectorField,
    week_index: usize,
) -> Result<RegionSamples> {
    let warped = warp_mask(mask_prev, forward)?;
    let mut part = partition_regions(&warped, mask_next)?;
    part.week_index = week_index;
    collect_samples(&jacobian_map(forward)?, &part)
}

/// Per-pair samples over a whole course, registering each consecutive pair
/// (earlier scan as source, later scan as target).
pub fn course_pair_samples(
    volumes: &[Volume],
    masks: &[Mask],
    pairs: usize,
    params: &RegistrationParams,
) -> Result<Vec<RegionSamples>> {
    if volumes.len() != masks.len() {
        return Err(Error::LengthMismatch {
            expected: volumes.len(),
            actual: masks.len(),
        });
    }
    if volumes.len() < 2 {
        return Err(Error::InvalidParameter(
            "a course needs at least 2 scans".into(),
        ));
    }
    let pairs = pairs.min(volumes.len() - 1);
    (0..pairs)
        .map(|i| {
            let (t, _) = register(&volumes[i], &volumes[i + 1], params)?;
            pair_samples(&masks[i], &masks[i + 1], &t.forward, i)
        })
        .collect()
}

/// Pools the first `limit.pairs(...)` pair samples into region means.
pub fn means_from_pairs(pairs: &[RegionSamples], limit: WeekLimit) -> Result<RegionMeans> {
    let k = limit.pairs(pairs.len() + 1);
    let pooled = pool(&pairs[..k])?;
    Ok(RegionMeans::from_samples(&pooled, limit, k))
}

pub fn patient_region_means(
    record: &PatientRecord,
    week_limit: WeekLimit,
    params: &RegistrationParams,
) -> Result<RegionMeans> {
    record.validate()?;
    let (vols, masks) = record.load()?;
    let k = week_limit.pairs(vols.len());
    let pairs = course_pair_samples(&vols, &masks, k, params)?;
    means_from_pairs(&pairs, week_limit)
}

/// Hypothesis satisfied / not satisfied against responder / not; NA
/// patients are skipped.
pub fn build_contingency(rows: &[(Decision, RecistLabel)]) -> Result<Contingency2x2> {
    let (mut a, mut b, mut c, mut d) = (0, 0, 0, 0);
    for &(dec, label) in rows {
        let Some(resp) = label.is_responder() else {
            continue;
        };
        match (dec == Decision::PrClassified, resp) {
            (true, true) => a += 1,
            (true, false) => b += 1,
            (false, true) => c += 1,
            (false, false) => d += 1,
        }
    }
    Contingency2x2::new(a, b, c, d).map_err(|_| Error::Empty("cohort after removing NA patients"))
}

/// Percentages; `None` where the denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn metrics(t: &Contingency2x2) -> Result<Metrics> {
    if t.total() == 0 {
        return Err(Error::Empty("contingency table"));
    }
    let pct = |num: u64, den: u64| (den > 0).then(|| 100.0 * num as f64 / den as f64);
    Ok(Metrics {
        accuracy: 100.0 * (t.a + t.d) as f64 / t.total() as f64,
        precision: pct(t.a, t.a + t.b),
        recall: pct(t.a, t.a + t.c),
    })
}

/// Rounds a percentage to one decimal for reporting.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Pairwise t statistics between regions and the ordering by mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationOrdering {
    pub labels: [RegionLabel; 4],
    pub means: [f64; 4],
    pub counts: [usize; 4],
    /// `t[i][j]` compares `labels[i]` against `labels[j]`; skew-symmetric.
    pub t: [[f64; 4]; 4],
    pub p: [[f64; 4]; 4],
    /// Labels sorted by ascending mean.
    pub order: Vec<RegionLabel>,
}

impl PopulationOrdering {
    fn index(&self, l: RegionLabel) -> usize {
        self.labels.iter().position(|&x| x == l).unwrap()
    }

    pub fn t_between(&self, x: RegionLabel, y: RegionLabel) -> f64 {
        self.t[self.index(x)][self.index(y)]
    }

    /// Whether the means satisfy `mu_N <= mu_R <= mu_G <= mu_U`.
    pub fn matches_expected(&self) -> bool {
        let m = |l| self.means[self.index(l)];
        m(RegionLabel::N) <= m(RegionLabel::R)
            && m(RegionLabel::R) <= m(RegionLabel::G)
            && m(RegionLabel::G) <= m(RegionLabel::U)
    }
}

/// Table layout order for the t matrix.
pub const ORDERING_LABELS: [RegionLabel; 4] = [
    RegionLabel::R,
    RegionLabel::G,
    RegionLabel::U,
    RegionLabel::N,
];

pub fn population_ordering(pooled: &RegionSamples) -> Result<PopulationOrdering> {
    let labels = ORDERING_LABELS;
    let mut stats = Vec::with_capacity(4);
    for l in labels {
        if pooled.is_empty(l) {
            return Err(Error::Empty("region in pooled samples"));
        }
        stats.push(summarize(pooled.samples(l))?);
    }
    let mut t = [[0.0; 4]; 4];
    let mut p = [[1.0; 4]; 4];
    for i in 0..4 {
        for j in (i + 1)..4 {
            let TTest { t: tv, p: pv, .. } = pooled_t_test(&stats[i], &stats[j])?;
            t[i][j] = tv;
            t[j][i] = -tv;
            p[i][j] = pv;
            p[j][i] = pv;
        }
    }
    let means = [0, 1, 2, 3].map(|i| stats[i].mean);
    let mut order = labels.to_vec();
    order.sort_by(|a, b| {
        let ia = labels.iter().position(|x| x == a).unwrap();
        let ib = labels.iter().position(|x| x == b).unwrap();
        means[ia].total_cmp(&means[ib])
    });
    Ok(PopulationOrdering {
        labels,
        means,
        counts: [0, 1, 2, 3].map(|i| stats[i].n),
        t,
        p,
        order,
    })
}

/// Per-region summary with both confidence intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub label: RegionLabel,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// Absent with fewer than two samples.
    pub normal_ci: Option<Interval>,
    pub bootstrap_ci: Interval,
    pub boxplot: BoxStats,
}

/// Table-1-style report over pooled samples: one summary per non-empty
/// region, plus the t matrix when every region has samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStatistics {
    pub level: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub regions: Vec<RegionSummary>,
    pub ordering: Option<PopulationOrdering>,
    pub empty_regions: Vec<RegionLabel>,
}

impl RegionStatistics {
    pub fn summaries_csv(&self) -> String {
        let ci = |i: Option<&Interval>| match i {
            Some(i) => format!("{},{}", i.lo, i.hi),
            None => ",".into(),
        };
        let mut out =
            String::from("label,n,mean,sd,normal_lo,normal_hi,bootstrap_lo,bootstrap_hi,level\n");
        for r in &self.regions {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label,
                r.n,
                r.mean,
                r.sd,
                ci(r.normal_ci.as_ref()),
                ci(Some(&r.bootstrap_ci)),
                self.level
            ));
        }
        out
    }

    pub fn boxplot_csv(&self) -> String {
        let mut out = String::from("label,n,whisker_lo,q1,median,q3,whisker_hi\n");
        for r in &self.regions {
            let b = &r.boxplot;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label, b.n, b.whisker_lo, b.q1, b.median, b.q3, b.whisker_hi
            ));
        }
        out
    }
}

pub fn region_statistics(
    samples: &RegionSamples,
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<RegionStatistics> {
    let mut regions = Vec::new();
    for label in ORDERING_LABELS {
        let v = samples.samples(label);
        if v.is_empty() {
            continue;
        }
        let s = summarize(v)?;
        regions.push(RegionSummary {
            label,
            n: s.n,
            mean: s.mean,
            sd: s.sd,
            normal_ci: if s.n >= 2 {
                Some(normal_ci(&s, level)?)
            } else {
                None
            },
            bootstrap_ci: bootstrap_ci(v, resamples, level, seed)?,
            boxplot: box_stats(v)?,
        });
    }
    if regions.is_empty() {
        return Err(Error::Empty("samples in every region"));
    }
    Ok(RegionStatistics {
        level,
        bootstrap_resamples: resamples,
        bootstrap_seed: seed,
        regions,
        ordering: population_ordering(samples).ok(),
        empty_regions: samples.empty_labels(),
    })
}

/// One fixture row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureRow {
    pub patient_id: u32,
    pub full: Decision,
    pub three_week: Decision,
    pub response: RecistLabel,
}

/// The shipped per-patient classification table (45 patients).
pub fn appendix_fixture_text() -> &'static str {
    APPENDIX_FIXTURE
}

pub fn parse_fixture(text: &str, path: &Path) -> Result<Vec<FixtureRow>> {
    let bad = |m: String| Error::malformed(path, m);
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let expected = [
        "patient_id",
        "classification_full",
        "classification_3w",
        "rx_response",
    ];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(bad(format!("expected header {}", expected.join(","))));
    }
    let yn = |s: &str, line: usize| match s {
        "Y" => Ok(Decision::PrClassified),
        "N" => Ok(Decision::NoDecision),
        other => Err(bad(format!("line {line}: expected Y or N, got {other:?}"))),
    };
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(FixtureRow {
            patient_id: rec[0]
                .parse()
                .map_err(|_| bad(format!("line {line}: bad patient_id {:?}", &rec[0])))?,
            full: yn(&rec[1], line)?,
            three_week: yn(&rec[2], line)?,
            response: rec[3]
                .parse()
                .map_err(|m| bad(format!("line {line}: {m}")))?,
        });
    }
    if rows.is_empty() {
        return Err(bad("fixture has no rows".into()));
    }
    Ok(rows)
}

pub fn appendix_fixture() -> Vec<FixtureRow> {
    parse_fixture(APPENDIX_FIXTURE, Path::new("appendix_table6.csv"))
        .expect("shipped fixture parses")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub name: String,
    pub table: Contingency2x2,
    pub fisher: FisherResult,
    pub metrics: Metrics,
}

impl TableSummary {
    pub fn from_rows(name: &str, rows: &[(Decision, RecistLabel)]) -> Result<Self> {
        let table = build_contingency(rows)?;
        Ok(Self {
            name: name.to_string(),
            fisher: fisher_exact(&table)?,
            metrics: metrics(&table)?,
            table,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureReproduction {
    pub patients: usize,
    pub excluded_na: Vec<u32>,
    pub responders: usize,
    pub full: TableSummary,
    pub three_week: TableSummary,
    /// Published figures that differ from what the fixture implies.
    pub discrepancies: Vec<String>,
}

/// Recomputes the full-course and three-week tables, Fisher results and
/// metrics from fixture rows.
pub fn reproduce_paper(rows: &[FixtureRow]) -> Result<FixtureReproduction> {
    let full: Vec<_> = rows.iter().map(|r| (r.full, r.response)).collect();
    let three: Vec<_> = rows.iter().map(|r| (r.three_week, r.response)).collect();
    let full = TableSummary::from_rows("full", &full)?;
    let three_week = TableSummary::from_rows("three_week", &three)?;
    let mut discrepancies = Vec::new();
    if let Some(r) = full.metrics.recall {
        if (round1(r) - 60.0).abs() > 0.05 {
            discrepancies.push(format!(
                "full-course recall computes to {:.1}; the published table lists 60.0",
                r
            ));
        }
    }
    for (name, m) in [("full", &full.metrics), ("three_week", &three_week.metrics)] {
        if (round1(m.accuracy) - 65.7).abs() > 0.05 && (m.accuracy - 65.7).abs() < 0.1 {
            discrepancies.push(format!(
                "{name} accuracy computes to {:.2} (reported 65.8); the published table lists 65.7",
                m.accuracy
            ));
        }
    }
    Ok(FixtureReproduction {
        patients: rows.len(),
        excluded_na: rows
            .iter()
            .filter(|r| r.response == RecistLabel::NA)
            .map(|r| r.patient_id)
            .collect(),
        responders: rows
            .iter()
            .filter(|r| r.response.is_responder() == Some(true))
            .count(),
        full,
        three_week,
        discrepancies,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcome {
    pub means: Option<RegionMeans>,
    pub decision: Decision,
    pub notes: Vec<String>,
}

impl PatientOutcome {
    fn from_means(means: RegionMeans) -> Result<Self> {
        Ok(Self {
            decision: classify(&means)?,
            notes: decision_notes(&means),
            means: Some(means),
        })
    }

    fn failed(note: String) -> Self {
        Self {
            means: None,
            decision: Decision::NoDecision,
            notes: vec![note],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientReport {
    pub patient_id: String,
    pub recist: RecistLabel,
    pub full: PatientOutcome,
    pub three_week: PatientOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub patients: Vec<PatientReport>,
    pub full: Option<TableSummary>,
    pub three_week: Option<TableSummary>,
    /// Population ordering over samples pooled from all patients (full course).
    pub ordering: Option<PopulationOrdering>,
    pub warnings: Vec<String>,
}

impl CohortReport {
    pub fn pr_count(&self, full: bool) -> usize {
        self.patients
            .iter()
            .filter(|p| {
                let o = if full { &p.full } else { &p.three_week };
                o.decision == Decision::PrClassified
            })
            .count()
    }

    /// One row per patient, suitable for spreadsheets.
    pub fn patients_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out =
            String::from("patient_id,recist,decision_full,decision_3w,mu_r,mu_g,mu_u,mu_n,notes\n");
        for p in &self.patients {
            let m = p.full.means.as_ref();
            let mut notes = p.full.notes.clone();
            notes.extend(p.three_week.notes.iter().map(|n| format!("3w: {n}")));
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},\"{}\"\n",
                p.patient_id,
                p.recist,
                p.full.decision.as_str(),
                p.three_week.decision.as_str(),
                f(m.and_then(|m| m.mu_r)),
                f(m.and_then(|m| m.mu_g)),
                f(m.and_then(|m| m.mu_u)),
                f(m.and_then(|m| m.mu_n)),
                notes.join("; ").replace('"', "'")
            ));
        }
        out
    }
}

/// Tables as CSV: one row per table with counts, Fisher results and metrics.
pub fn tables_csv(tables: &[&TableSummary]) -> String {
    let f = |v: Option<f64>| {
        v.map(|x| format!("{:.1}", x))
            .unwrap_or_else(|| "undefined".into())
    };
    let mut out = String::from("table,a,b,c,d,odds_ratio,p,accuracy,precision,recall\n");
    for t in tables {
        out.push_str(&format!(
            "{},{},{},{},{},{:.2},{:.3},{:.1},{},{}\n",
            t.name,
            t.table.a,
            t.table.b,
            t.table.c,
            t.table.d,
            t.fisher.odds_ratio,
            t.fisher.p,
            t.metrics.accuracy,
            f(t.metrics.precision),
            f(t.metrics.recall)
        ));
    }
    out
}

/// Which patients feed the population ordering and which feed the response
/// tables. An empty list means every patient.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub population: Vec<String>,
    pub test: Vec<String>,
}

impl CohortSplit {
    pub fn in_population(&self, id: &str) -> bool {
        self.population.is_empty() || self.population.iter().any(|p| p == id)
    }

    pub fn in_test(&self, id: &str) -> bool {
        self.test.is_empty() || self.test.iter().any(|p| p == id)
    }

    /// Ids named by the split but absent from `known`.
    pub fn unknown_ids<'a>(&'a self, known: &[&str]) -> Vec<&'a str> {
        self.population
            .iter()
            .chain(&self.test)
            .map(String::as_str)
            .filter(|id| !known.contains(id))
            .collect()
    }
}

/// Per-patient pair samples already computed (by registration or from known
/// fields), turned into a cohort report.
pub fn report_from_pair_samples(
    patients: Vec<(String, RecistLabel, Result<Vec<RegionSamples>>)>,
    three_week: WeekLimit,
    split: &CohortSplit,
) -> Result<CohortReport> {
    let known: Vec<&str> = patients.iter().map(|p| p.0.as_str()).collect();
    let unknown = split.unknown_ids(&known);
    if !unknown.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "cohort split names unknown patients: {}",
            unknown.join(", ")
        )));
    }
    let mut reports = Vec::with_capacity(patients.len());
    let mut warnings = Vec::new();
    let mut all = Vec::new();
    for (id, recist, pairs) in patients {
        let (full, three) = match pairs {
            Ok(pairs) => {
                let full = PatientOutcome::from_means(means_from_pairs(&pairs, WeekLimit::All)?)?;
                let three = PatientOutcome::from_means(means_from_pairs(&pairs, three_week)?)?;
                if split.in_population(&id) {
                    all.extend(pairs);
                }
                (full, three)
            }
            Err(e) => {
                let note = format!("analysis failed: {e}");
                (
                    PatientOutcome::failed(note.clone()),
                    PatientOutcome::failed(note),
                )
            }
        };
        for n in full.notes.iter().chain(&three.notes) {
            warnings.push(format!("patient {id}: {n}"));
        }
        reports.push(PatientReport {
            patient_id: id,
            recist,
            full,
            three_week: three,
        });
    }
    let rows = |full: bool| -> Vec<(Decision, RecistLabel)> {
        reports
            .iter()
            .filter(|p| split.in_test(&p.patient_id))
            .map(|p| {
                (
                    if full {
                        p.full.decision
                    } else {
                        p.three_week.decision
                    },
                    p.recist,
                )
            })
            .collect()
    };
    let full = TableSummary::from_rows("full", &rows(true)).ok();
    let three = TableSummary::from_rows("three_week", &rows(false)).ok();
    if full.is_none() {
        warnings.push("no patients with a known response; tables omitted".into());
    }
    let ordering = if all.is_empty() {
        None
    } else {
        population_ordering(&pool(&all)?).ok()
    };
    if ordering.is_none() {
        warnings.push("population ordering unavailable: a region has no samples".into());
    }
    Ok(CohortReport {
        patients: reports,
        full,
        three_week: three,
        ordering,
        warnings,
    })
}

/// Registers and analyzes every patient in parallel on the current rayon
/// pool. Failures of single patients become notes, not errors.
pub fn analyze_cohort(
    records: &[PatientRecord],
    params: &RegistrationParams,
    three_week: WeekLimit,
    split: &CohortSplit,
) -> Result<CohortReport> {
    params.validate()?;
    let results: Vec<_> = records
        .par_iter()
        .map(|r| {
            let pairs = r.validate().and_then(|_| {
                let (vols, masks) = r.load()?;
                course_pair_samples(&vols, &masks, vols.len() - 1, params)
            });
            (r.patient_id.clone(), r.recist, pairs)
        })
        .collect();
    report_from_pair_samples(results, three_week, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridGeometry;

    fn means(r: f64, g: f64, u: f64) -> RegionMeans {
        RegionMeans {
            mu_r: Some(r),
            mu_g: Some(g),
            mu_u: Some(u),
            mu_n: Some(1.0),
            counts: BTreeMap::new(),
            week_limit: WeekLimit::All,
            pairs: 1,
        }
    }

    #[test]
    fn classifier_rules() {
        assert_eq!(
            classify(&means(0.9969, 1.0174, 1.0408)).unwrap(),
            Decision::PrClassified
        );
        assert_eq!(
            classify(&means(1.01, 2.0, 2.0)).unwrap(),
            Decision::NoDecision
        );
        assert_eq!(
            classify(&means(0.99, 0.98, 1.05)).unwrap(),
            Decision::NoDecision
        );
        assert_eq!(
            classify(&means(1.0, 1.0, 1.0)).unwrap(),
            Decision::PrClassified
        );
        let mut m = means(0.9, 1.0, 1.0);
        m.mu_g = None;
        assert_eq!(classify(&m).unwrap(), Decision::NoDecision);
        assert!(decision_notes(&m)[0].contains("insufficient region"));
        assert!(decision_notes(&means(1.0, 1.0, 1.0))[0].contains("degenerate"));
        assert!(classify(&means(f64::NAN, 1.0, 1.0)).is_err());
    }

    #[test]
    fn week_limits() {
        assert_eq!(WeekLimit::All.pairs(6), 5);
        assert_eq!(WeekLimit::THREE_WEEKS.pairs(6), 2);
        assert_eq!(WeekLimit::THREE_WEEKS.pairs(2), 1);
        assert_eq!("all".parse::<WeekLimit>().unwrap(), WeekLimit::All);
        assert_eq!("3".parse::<WeekLimit>().unwrap(), WeekLimit::First(3));
        assert!("1".parse::<WeekLimit>().is_err());
    }

    #[test]
    fn fixture_reproduces_tables() {
        let rows = appendix_fixture();
        let r = reproduce_paper(&rows).unwrap();
        assert_eq!(r.patients, 45);
        assert_eq!(r.excluded_na, vec![2, 5, 7, 12, 18, 25, 29]);
        assert_eq!(r.responders, 21);
        assert_eq!(
            r.full.table,
            Contingency2x2 {
                a: 12,
                b: 4,
                c: 9,
                d: 13
            }
        );
        assert_eq!(
            r.three_week.table,
            Contingency2x2 {
                a: 11,
                b: 3,
                c: 10,
                d: 14
            }
        );
        assert!(r.discrepancies.iter().any(|d| d.contains("60.0")));
    }

    #[test]
    fn contingency_drops_na_and_rejects_empty() {
        let rows = [
            (Decision::PrClassified, RecistLabel::CR),
            (Decision::NoDecision, RecistLabel::NA),
            (Decision::NoDecision, RecistLabel::SD),
        ];
        let t = build_contingency(&rows).unwrap();
        assert_eq!((t.a, t.b, t.c, t.d), (1, 0, 0, 1));
        assert!(build_contingency(&[(Decision::PrClassified, RecistLabel::NA)]).is_err());
    }

    #[test]
    fn metrics_of_tables() {
        let m = metrics(&Contingency2x2::new(11, 3, 10, 14).unwrap()).unwrap();
        assert!((m.accuracy - 2500.0 / 38.0).abs() < 1e-9);
        assert_eq!(round1(m.precision.unwrap()), 78.6);
        assert_eq!(round1(m.recall.unwrap()), 52.4);
        let p = metrics(&Contingency2x2::new(7, 0, 0, 4).unwrap()).unwrap();
        assert_eq!(
            (p.accuracy, p.precision, p.recall),
            (100.0, Some(100.0), Some(100.0))
        );
        let u = metrics(&Contingency2x2::new(0, 0, 3, 4).unwrap()).unwrap();
        assert_eq!(u.precision, None);
    }

    #[test]
    fn ordering_is_skew_symmetric_and_sorted() {
        let mut s = RegionSamples::new();
        let planted = [
            (RegionLabel::N, 0.95),
            (RegionLabel::R, 0.98),
            (RegionLabel::G, 1.01),
            (RegionLabel::U, 1.04),
        ];
        for (l, m) in planted {
            for k in 0..200 {
                s.push(l, m + 0.01 * ((k as f64) * 0.7).sin()).unwrap();
            }
        }
        let o = population_ordering(&s).unwrap();
        assert_eq!(
            o.order,
            vec![
                RegionLabel::N,
                RegionLabel::R,
                RegionLabel::G,
                RegionLabel::U
            ]
        );
        assert!(o.matches_expected());
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(o.t[i][j], -o.t[j][i]);
            }
        }
        assert!(o.t_between(RegionLabel::R, RegionLabel::G) < 0.0);
    }

    #[test]
    fn manifest_parsing() {
        let text = "patient_id,week,volume_path,mask_path,recist\n\
                    p1,1,a1.vol,m1.vol,PR\n\
                    p2,0,b0.vol,n0.vol,NA\n\
                    p1,0,a0.vol,m0.vol,PR\n";
        let recs = parse_manifest(text, Path::new("m.csv"), Path::new("/data")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].patient_id, "p1");
        assert_eq!(recs[0].scans[0].volume_path, PathBuf::from("/data/a0.vol"));
        assert!(recs[1].validate().is_err());
        let dup = "patient_id,week,volume_path,mask_path,recist\np,1,a,b,PR\np,1,c,d,PR\n";
        assert!(parse_manifest(dup, Path::new("m"), Path::new("")).is_err());
        let bad = "patient_id,week,volume_path,mask_path,recist\np,x,a,b,PR\n";
        assert_eq!(
            parse_manifest(bad, Path::new("m"), Path::new(""))
                .unwrap_err()
                .code(),
            "malformed_file"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let text = "patient_id,week,volume_path,mask_path,recist\n\
                    p1,0,p1/a0.vol,p1/m0.vol,PR\n\
                    p1,1,p1/a1.vol,p1/m1.vol,PR\n\
                    p2,0,p2/a0.vol,p2/m0.vol,SD\n\
                    p2,1,p2/a1.vol,p2/m1.vol,SD\n";
        let base = Path::new("/data");
        let recs = parse_manifest(text, Path::new("m.csv"), base).unwrap();
        let out = manifest_csv(&recs, base);
        let again = parse_manifest(&out, Path::new("m.csv"), base).unwrap();
        assert_eq!(manifest_csv(&again, base), out);
        assert_eq!(again.len(), 2);
    }

    #[test]
    fn identical_masks_and_zero_field_give_unit_means() {
        let g = GridGeometry::cube(10).unwrap();
        let m = Mask::from_fn(g, |[x, y, z]| {
            (3..7).contains(&x) && (3..7).contains(&y) && (3..7).contains(&z)
        });
        let s = pair_samples(&m, &m, &VectorField::zeros(g), 0).unwrap();
        let means = means_from_pairs(&[s], WeekLimit::All).unwrap();
        assert_eq!(means.mu_u, Some(1.0));
        assert_eq!(means.mu_r, None);
        assert_eq!(classify(&means).unwrap(), Decision::NoDecision);
        let notes = decision_notes(&means);
        assert!(notes[0].contains("insufficient region: no samples in R, G"));
        assert!(notes[1].contains("degenerate"));
    }
}
