//! Spot-price ingestion and the per-operator price grid.
//!
//! Every distinct `(zone, instance_type)` stream in a price history stands in
//! for one mobile network operator. Streams are resampled onto a fixed
//! timestep grid by carrying the last observation forward.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, SecondsFormat, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPOT_HEADER: &str = "Timestamp,AvailabilityZone,InstanceType,SpotPrice";
pub const DEFAULT_TIMESTEP_SECONDS: u32 = 30;
pub const DEFAULT_MNO_COUNT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotRecord {
    /// UTC seconds since the epoch.
    pub timestamp: i64,
    pub zone: String,
    pub instance_type: String,
    pub unit_price: f64,
}

impl SpotRecord {
    pub fn stream(&self) -> StreamKey {
        StreamKey {
            zone: self.zone.clone(),
            instance_type: self.instance_type.clone(),
        }
    }
}

/// Identifies one price stream, i.e. one operator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub zone: String,
    pub instance_type: String,
}

impl StreamKey {
    pub fn new(zone: impl Into<String>, instance_type: impl Into<String>) -> Self {
        Self {
            zone: zone.into(),
            instance_type: instance_type.into(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.zone, self.instance_type)
    }
}

/// Parse a comma-separated spot-price history.
///
/// Blank lines are skipped; line numbers in errors are 1-based and count the
/// header.
pub fn parse_spot_history(raw: &str) -> Result<Vec<SpotRecord>> {
    let mut lines = raw.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => break (i + 1, l.trim()),
            None => {
                return Err(Error::Parse {
                    line: 0,
                    message: "no records: missing header".into(),
                })
            }
        }
    };
    if header.1.trim_start_matches('\u{feff}') != SPOT_HEADER {
        return Err(Error::Parse {
            line: header.0,
            message: format!("expected header `{SPOT_HEADER}`, found `{}`", header.1),
        });
    }

    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_row(line).map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?);
    }
    Ok(out)
}

fn parse_row(line: &str) -> std::result::Result<SpotRecord, String> {
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    if cols.len() != 4 {
        return Err(format!("expected 4 columns, found {}", cols.len()));
    }
    let timestamp = DateTime::parse_from_rfc3339(cols[0])
        .map_err(|e| format!("malformed timestamp `{}`: {e}", cols[0]))?
        .with_timezone(&Utc)
        .timestamp();
    if cols[1].is_empty() {
        return Err("missing AvailabilityZone".into());
    }
    if cols[2].is_empty() {
        return Err("missing InstanceType".into());
    }
    let unit_price: f64 = cols[3]
        .parse()
        .map_err(|e| format!("malformed SpotPrice `{}`: {e}", cols[3]))?;
    if !(unit_price.is_finite() && unit_price > 0.0) {
        return Err(format!("SpotPrice must be positive, found {unit_price}"));
    }
    Ok(SpotRecord {
        timestamp,
        zone: cols[1].to_string(),
        instance_type: cols[2].to_string(),
        unit_price,
    })
}

pub fn serialize_spot_history(records: &[SpotRecord]) -> String {
    let mut out = String::from(SPOT_HEADER);
    out.push('\n');
    for r in records {
        let ts = DateTime::<Utc>::from_timestamp(r.timestamp, 0)
            .map(|t| t.to_rfc3339_opts(SecondsFormat::Secs, true))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{ts},{},{},{}",
            r.zone, r.instance_type, r.unit_price
        );
    }
    out
}

/// Keep records with `from <= timestamp < to`.
pub fn filter_by_time(records: &[SpotRecord], from: Option<i64>, to: Option<i64>) -> Vec<SpotRecord> {
    records
        .iter()
        .filter(|r| from.is_none_or(|f| r.timestamp >= f) && to.is_none_or(|t| r.timestamp < t))
        .cloned()
        .collect()
}

/// Per-operator price grid. Row `j` holds operator `j`'s price at every
/// timestep; segments are consecutive blocks of columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriceBookRepr", into = "PriceBookRepr")]
pub struct PriceBook {
    mno_count: usize,
    timestep_seconds: u32,
    segment_steps: Vec<usize>,
    segment_offsets: Vec<usize>,
    total_steps: usize,
    streams: Vec<String>,
    prices: Vec<f64>,
    p_min: f64,
    p_max: f64,
}

#[derive(Serialize, Deserialize)]
struct PriceBookRepr {
    mno_count: usize,
    timestep_seconds: u32,
    segment_steps: Vec<usize>,
    streams: Vec<String>,
    p_min: f64,
    p_max: f64,
    prices: Vec<Vec<f64>>,
}

impl From<PriceBook> for PriceBookRepr {
    fn from(b: PriceBook) -> Self {
        let prices = (0..b.mno_count).map(|j| b.row(j).to_vec()).collect();
        PriceBookRepr {
            mno_count: b.mno_count,
            timestep_seconds: b.timestep_seconds,
            segment_steps: b.segment_steps,
            streams: b.streams,
            p_min: b.p_min,
            p_max: b.p_max,
            prices,
        }
    }
}

impl TryFrom<PriceBookRepr> for PriceBook {
    type Error = Error;

    fn try_from(r: PriceBookRepr) -> Result<Self> {
        if r.prices.len() != r.mno_count {
            return Err(Error::Config(format!(
                "price rows {} != mno_count {}",
                r.prices.len(),
                r.mno_count
            )));
        }
        let mut book = PriceBook::with_bounds(r.prices, r.segment_steps, r.p_min, r.p_max)?;
        book.timestep_seconds = r.timestep_seconds;
        book.streams = r.streams;
        Ok(book)
    }
}

impl PriceBook {
    /// Build from per-operator rows; bounds are the grid's own extremes.
    pub fn from_rows(rows: Vec<Vec<f64>>, segment_steps: Vec<usize>) -> Result<Self> {
        let (lo, hi) = rows
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
        Self::with_bounds(rows, segment_steps, lo, hi)
    }

    /// Build from per-operator rows with explicit bounds that must contain
    /// every price.
    pub fn with_bounds(
        rows: Vec<Vec<f64>>,
        segment_steps: Vec<usize>,
        p_min: f64,
        p_max: f64,
    ) -> Result<Self> {
        let mno_count = rows.len();
        if mno_count < 2 {
            return Err(Error::Config(format!("need at least 2 operators, got {mno_count}")));
        }
        if segment_steps.is_empty() || segment_steps.contains(&0) {
            return Err(Error::Config("segment step counts must be nonempty and positive".into()));
        }
        let total_steps: usize = segment_steps.iter().sum();
        if rows.iter().any(|r| r.len() != total_steps) {
            return Err(Error::Config(format!(
                "every operator row must have {total_steps} prices"
            )));
        }
        if !(p_min.is_finite() && p_max.is_finite() && p_min > 0.0 && p_min <= p_max) {
            return Err(Error::Config(format!("invalid price bounds [{p_min}, {p_max}]")));
        }
        if let Some(bad) = rows.iter().flatten().find(|&&p| !(p >= p_min && p <= p_max)) {
            return Err(Error::Config(format!(
                "price {bad} outside bounds [{p_min}, {p_max}]"
            )));
        }
        let segment_offsets = segment_steps
            .iter()
            .scan(0, |acc, &s| {
                let off = *acc;
                *acc += s;
                Some(off)
            })
            .collect();
        Ok(PriceBook {
            mno_count,
            timestep_seconds: DEFAULT_TIMESTEP_SECONDS,
            segment_steps,
            segment_offsets,
            total_steps,
            streams: (0..mno_count).map(|j| format!("mno{j}")).collect(),
            prices: rows.into_iter().flatten().collect(),
            p_min,
            p_max,
        })
    }

    pub fn constant(mno_count: usize, segment_steps: Vec<usize>, price: f64) -> Result<Self> {
        let total: usize = segment_steps.iter().sum();
        Self::from_rows(vec![vec![price; total]; mno_count], segment_steps)
    }

    pub fn mno_count(&self) -> usize {
        self.mno_count
    }

    pub fn segment_count(&self) -> usize {
        self.segment_steps.len()
    }

    pub fn segment_steps(&self) -> &[usize] {
        &self.segment_steps
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn timestep_seconds(&self) -> u32 {
        self.timestep_seconds
    }

    pub fn streams(&self) -> &[String] {
        &self.streams
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn row(&self, mno: usize) -> &[f64] {
        &self.prices[mno * self.total_steps..(mno + 1) * self.total_steps]
    }

    /// Price quoted by `mno` at step `t` of `segment`.
    pub fn price_at(&self, mno: usize, segment: usize, t: usize) -> Result<f64> {
        if mno >= self.mno_count {
            return Err(Error::Bounds { what: "mno", index: mno, limit: self.mno_count });
        }
        let seg_len = *self.segment_steps.get(segment).ok_or(Error::Bounds {
            what: "segment",
            index: segment,
            limit: self.segment_steps.len(),
        })?;
        if t >= seg_len {
            return Err(Error::Bounds { what: "timestep", index: t, limit: seg_len });
        }
        Ok(self.row(mno)[self.segment_offsets[segment] + t])
    }

    /// Price quoted by `mno` at absolute grid step `step`.
    #[inline]
    pub fn price_at_step(&self, mno: usize, step: usize) -> f64 {
        self.prices[mno * self.total_steps + step]
    }

    /// All operators' prices at absolute grid step `step`, in operator order.
    pub fn prices_at_step(&self, step: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.mno_count).map(move |j| self.price_at_step(j, step))
    }

    /// Cheapest operator at `step`; ties go to the lowest index.
    pub fn cheapest_at_step(&self, step: usize) -> (usize, f64) {
        self.prices_at_step(step)
            .enumerate()
            .fold((0, f64::INFINITY), |best, (j, p)| if p < best.1 { (j, p) } else { best })
    }

    pub fn set_streams(&mut self, streams: Vec<String>) {
        self.streams = streams;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookConfig {
    pub timestep_seconds: u32,
    /// One stream per operator, in operator order.
    pub streams: Vec<StreamKey>,
    /// Grid start in UTC seconds; defaults to the latest first observation
    /// among the selected streams.
    pub start: Option<i64>,
    /// Grid end (inclusive) used when `segment_steps` is empty; defaults to
    /// the earliest last observation among the selected streams.
    pub end: Option<i64>,
    /// Segment lengths in steps. Empty means one segment spanning start..=end.
    pub segment_steps: Vec<usize>,
    pub p_bounds: Option<(f64, f64)>,
}

impl Default for BookConfig {
    fn default() -> Self {
        Self {
            timestep_seconds: DEFAULT_TIMESTEP_SECONDS,
            streams: Vec::new(),
            start: None,
            end: None,
            segment_steps: Vec::new(),
            p_bounds: None,
        }
    }
}

/// Resample the selected streams onto the grid, carrying the last
/// observation forward.
pub fn build_price_book(records: &[SpotRecord], config: &BookConfig) -> Result<PriceBook> {
    let m = config.streams.len();
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 operator streams, got {m}")));
    }
    if config.timestep_seconds == 0 {
        return Err(Error::Config("timestep_seconds must be positive".into()));
    }
    let mut seen = config.streams.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != m {
        return Err(Error::Config("operator streams must be distinct".into()));
    }

    let mut by_stream: BTreeMap<&StreamKey, Vec<(i64, f64)>> =
        config.streams.iter().map(|k| (k, Vec::new())).collect();
    for r in records {
        let key = r.stream();
        if let Some(series) = by_stream.get_mut(&key) {
            series.push((r.timestamp, r.unit_price));
        }
    }
    for series in by_stream.values_mut() {
        series.sort_by_key(|&(t, _)| t);
    }

    let series: Vec<&Vec<(i64, f64)>> = config.streams.iter().map(|k| &by_stream[k]).collect();
    for (key, s) in config.streams.iter().zip(&series) {
        if s.is_empty() {
            return Err(Error::Coverage(format!("stream {} has no records", key.label())));
        }
    }
    let start = match config.start {
        Some(s) => s,
        None => series.iter().map(|s| s[0].0).max().unwrap_or(0),
    };
    for (key, s) in config.streams.iter().zip(&series) {
        if s[0].0 > start {
            return Err(Error::Coverage(format!(
                "stream {} has no record at or before grid start {start}",
                key.label()
            )));
        }
    }

    let dt = i64::from(config.timestep_seconds);
    let segment_steps = if config.segment_steps.is_empty() {
        let end = config
            .end
            .unwrap_or_else(|| series.iter().map(|s| s[s.len() - 1].0).min().unwrap_or(start));
        if end < start {
            return Err(Error::Coverage(format!("grid end {end} precedes start {start}")));
        }
        vec![((end - start) / dt) as usize + 1]
    } else {
        config.segment_steps.clone()
    };
    let total: usize = segment_steps.iter().sum();

    let rows: Vec<Vec<f64>> = series.iter().map(|s| resample_locf(s, start, dt, total)).collect();
    let mut book = match config.p_bounds {
        Some((lo, hi)) => PriceBook::with_bounds(rows, segment_steps, lo, hi)?,
        None => PriceBook::from_rows(rows, segment_steps)?,
    };
    book.timestep_seconds = config.timestep_seconds;
    book.streams = config.streams.iter().map(StreamKey::label).collect();
    Ok(book)
}

/// Last-observation-carried-forward onto `start + k*dt` for `k < steps`.
/// `series` must be sorted and start at or before `start`.
fn resample_locf(series: &[(i64, f64)], start: i64, dt: i64, steps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps);
    let mut cursor = 0;
    for k in 0..steps {
        let t = start + k as i64 * dt;
        while cursor + 1 < series.len() && series[cursor + 1].0 <= t {
            cursor += 1;
        }
        out.push(series[cursor].1);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub mno_count: usize,
    pub segment_steps: Vec<usize>,
    pub p_min: f64,
    pub p_max: f64,
    /// Standard deviation of the per-step Gaussian increment, in money/min.
    pub volatility: f64,
    /// Starting price per operator; drawn uniformly within bounds when absent.
    pub initial_prices: Option<Vec<f64>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            mno_count: DEFAULT_MNO_COUNT,
            segment_steps: vec![4000],
            p_min: 0.5,
            p_max: 5.0,
            volatility: 0.5,
            initial_prices: None,
        }
    }
}

/// Independent bounded random walks, one per operator, reflecting at the
/// bounds.
pub fn synth_price_book(seed: u64, config: &SynthConfig) -> Result<PriceBook> {
    let SynthConfig { mno_count, p_min, p_max, volatility, .. } = *config;
    if !(p_min > 0.0 && p_min <= p_max && p_max.is_finite()) {
        return Err(Error::Config(format!("invalid price bounds [{p_min}, {p_max}]")));
    }
    if !(volatility >= 0.0 && volatility.is_finite()) {
        return Err(Error::Config(format!("volatility must be >= 0, got {volatility}")));
    }
    if p_min == p_max && volatility > 0.0 {
        return Err(Error::Config("degenerate bounds require zero volatility".into()));
    }
    let total: usize = config.segment_steps.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial: Vec<f64> = match &config.initial_prices {
        Some(v) if v.len() != mno_count => {
            return Err(Error::Config(format!(
                "{} initial prices for {mno_count} operators",
                v.len()
            )))
        }
        Some(v) => v.clone(),
        None if p_min == p_max => vec![p_min; mno_count],
        None => (0..mno_count).map(|_| rng.random_range(p_min..=p_max)).collect(),
    };
    let noise = Normal::new(0.0, volatility).map_err(|e| Error::Config(e.to_string()))?;

    let mut rows = Vec::with_capacity(mno_count);
    for &p0 in &initial {
        if !(p0 >= p_min && p0 <= p_max) {
            return Err(Error::Config(format!("initial price {p0} outside bounds")));
        }
        let mut row = Vec::with_capacity(total);
        let mut p = p0;
        for k in 0..total {
            if k > 0 && volatility > 0.0 {
                p = reflect(p + noise.sample(&mut rng), p_min, p_max);
            }
            row.push(p);
        }
        rows.push(row);
    }
    PriceBook::with_bounds(rows, config.segment_steps.clone(), p_min, p_max)
}

/// Fold `x` back into `[lo, hi]` by mirroring at the bounds.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    if width <= 0.0 {
        return lo;
    }
    let period = 2.0 * width;
    let y = (x - lo).rem_euclid(period);
    let folded = if y > width { period - y } else { y };
    (lo + folded).clamp(lo, hi)
}
