//! Sample ingestion, windowed in-memory series and KPI computation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    compute_scores, resolve_goals, CrossComponentRule, Direction, GoalSelection, NodeId,
    QualityModel, ScoreReport, SelectionError, Statistic,
};

pub const DEFAULT_RETENTION_SECONDS: u64 = 3600;
pub const DEFAULT_SERIES_CAPACITY: usize = 100_000;
pub const CLOCK_SKEW_MS: i64 = 5_000;

/// One observation, in wire form:
/// `{"metric":"<id>","component":"<id>","ts":<epoch_ms>,"value":<number>}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub metric: String,
    pub component: String,
    pub ts: i64,
    pub value: f64,
}

impl Sample {
    pub fn new(metric: impl Into<String>, component: impl Into<String>, ts: i64, value: f64) -> Self {
        Self {
            metric: metric.into(),
            component: component.into(),
            ts,
            value,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("sample serialises")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Stale,
    Future,
    UnknownMetric,
    UnknownComponent,
    NonFinite,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("window_seconds must be >= 1")]
    InvalidWindow,
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
}

type SeriesKey = (String, String);

#[derive(Debug, Clone)]
pub struct SeriesStore {
    retention_ms: i64,
    capacity: usize,
    metrics: BTreeSet<String>,
    components: BTreeSet<String>,
    series: BTreeMap<SeriesKey, VecDeque<(i64, f64)>>,
    rejections: BTreeMap<RejectReason, u64>,
}

impl SeriesStore {
    pub fn new(
        retention_seconds: u64,
        metrics: impl IntoIterator<Item = String>,
        components: impl IntoIterator<Item = String>,
    ) -> Self {
        Self {
            retention_ms: (retention_seconds.max(1) * 1000) as i64,
            capacity: DEFAULT_SERIES_CAPACITY,
            metrics: metrics.into_iter().collect(),
            components: components.into_iter().collect(),
            series: BTreeMap::new(),
            rejections: BTreeMap::new(),
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = capacity.max(1);
        self
    }

    pub fn retention_ms(&self) -> i64 {
        self.retention_ms
    }

    pub fn rejections(&self) -> &BTreeMap<RejectReason, u64> {
        &self.rejections
    }

    pub fn count_rejection(&mut self, reason: RejectReason) {
        *self.rejections.entry(reason).or_default() += 1;
    }

    fn check(&self, s: &Sample, now: i64) -> Result<(), RejectReason> {
        if !s.value.is_finite() {
            return Err(RejectReason::NonFinite);
        }
        if !self.metrics.contains(&s.metric) {
            return Err(RejectReason::UnknownMetric);
        }
        if !self.components.contains(&s.component) {
            return Err(RejectReason::UnknownComponent);
        }
        if s.ts < now - self.retention_ms {
            return Err(RejectReason::Stale);
        }
        if s.ts > now + CLOCK_SKEW_MS {
            return Err(RejectReason::Future);
        }
        Ok(())
    }

    /// Insert a sample in timestamp order. Rejections are counted by reason.
    pub fn ingest_sample(&mut self, sample: &Sample, now: i64) -> Result<(), RejectReason> {
        if let Err(reason) = self.check(sample, now) {
            self.count_rejection(reason);
            return Err(reason);
        }
        let horizon = now - self.retention_ms;
        let capacity = self.capacity;
        let buf = self
            .series
            .entry((sample.metric.clone(), sample.component.clone()))
            .or_default();
        // Ties on timestamp are ordered by value so arrival order never matters.
        let at = buf.partition_point(|&(ts, v)| {
            ts < sample.ts || (ts == sample.ts && v.total_cmp(&sample.value).is_le())
        });
        buf.insert(at, (sample.ts, sample.value));
        while buf.front().is_some_and(|&(ts, _)| ts < horizon) {
            buf.pop_front();
        }
        while buf.len() > capacity {
            buf.pop_front();
        }
        Ok(())
    }

    /// Drop every sample older than the retention horizon at `now`.
    pub fn evict(&mut self, now: i64) {
        let horizon = now - self.retention_ms;
        for buf in self.series.values_mut() {
            while buf.front().is_some_and(|&(ts, _)| ts < horizon) {
                buf.pop_front();
            }
        }
    }

    fn window<'a>(
        &'a self,
        metric: &str,
        component: &str,
        from_exclusive: i64,
        to_inclusive: i64,
    ) -> impl Iterator<Item = (i64, f64)> + 'a {
        let horizon = to_inclusive - self.retention_ms;
        self.series
            .get(&(metric.to_string(), component.to_string()))
            .into_iter()
            .flat_map(move |b| {
                // buffers are sorted by timestamp
                let start = b.partition_point(|&(ts, _)| ts <= from_exclusive || ts < horizon);
                b.range(start..).copied()
            })
            .take_while(move |&(ts, _)| ts <= to_inclusive)
    }

    /// Components that currently hold a series for `metric`.
    pub fn components_for(&self, metric: &str) -> Vec<&str> {
        self.series
            .keys()
            .filter(|(m, _)| m == metric)
            .map(|(_, c)| c.as_str())
            .collect()
    }

    pub fn query(&self, metric: &str, component: &str, from: i64, to: i64) -> Vec<Sample> {
        self.series
            .get(&(metric.to_string(), component.to_string()))
            .into_iter()
            .flat_map(|b| b.iter())
            .filter(|&&(ts, _)| ts >= from && ts <= to)
            .map(|&(ts, value)| Sample::new(metric, component, ts, value))
            .collect()
    }

    pub fn knows_metric(&self, metric: &str) -> bool {
        self.metrics.contains(metric)
    }

    pub fn knows_component(&self, component: &str) -> bool {
        self.components.contains(component)
    }

    pub fn len(&self) -> usize {
        self.series.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Statistic over samples with timestamp in `(now - window, now]`.
    pub fn window_aggregate(
        &self,
        metric: &str,
        component: &str,
        window_seconds: u64,
        statistic: Statistic,
        now: i64,
    ) -> Result<Option<f64>, PipelineError> {
        if window_seconds < 1 {
            return Err(PipelineError::InvalidWindow);
        }
        let window_ms = (window_seconds * 1000) as i64;
        let samples: Vec<(i64, f64)> = self.window(metric, component, now - window_ms, now).collect();
        if samples.is_empty() {
            return Ok(None);
        }
        let n = samples.len() as f64;
        let values = samples.iter().map(|&(_, v)| v);
        let out = match statistic {
            Statistic::Mean => values.sum::<f64>() / n,
            Statistic::Min => values.fold(f64::INFINITY, f64::min),
            Statistic::Max => values.fold(f64::NEG_INFINITY, f64::max),
            Statistic::P95 => {
                let mut sorted: Vec<f64> = values.collect();
                sorted.sort_by(f64::total_cmp);
                let rank = (0.95 * n).ceil() as usize;
                sorted[rank.clamp(1, sorted.len()) - 1]
            }
            Statistic::Rate => n / window_seconds as f64,
            Statistic::Last => samples[samples.len() - 1].1,
        };
        Ok(Some(out))
    }

    /// Per-component aggregates of `metric` using its declared window and
    /// statistic. Components without data in the window are omitted.
    pub fn metric_breakdown(
        &self,
        model: &QualityModel,
        metric: &str,
        now: i64,
    ) -> Result<BTreeMap<String, f64>, PipelineError> {
        let def = model
            .metrics
            .get(metric)
            .ok_or_else(|| PipelineError::UnknownMetric(metric.to_string()))?;
        let mut out = BTreeMap::new();
        for component in self.components_for(metric) {
            if let Some(v) =
                self.window_aggregate(metric, component, def.window_seconds, def.statistic, now)?
            {
                out.insert(component.to_string(), v);
            }
        }
        Ok(out)
    }

    /// One value for `metric` across every component serving it.
    pub fn metric_value(
        &self,
        model: &QualityModel,
        metric: &str,
        now: i64,
    ) -> Result<Option<f64>, PipelineError> {
        let per_component = self.metric_breakdown(model, metric, now)?;
        let def = &model.metrics[metric];
        Ok(combine_components(def.cross_component, def.direction, per_component.values().copied()))
    }
}

pub fn combine_components(
    rule: CrossComponentRule,
    direction: Direction,
    values: impl Iterator<Item = f64>,
) -> Option<f64> {
    let values: Vec<f64> = values.collect();
    if values.is_empty() {
        return None;
    }
    Some(match (rule, direction) {
        (CrossComponentRule::Mean, _) => values.iter().sum::<f64>() / values.len() as f64,
        (CrossComponentRule::WorstCase, Direction::HigherBetter) => {
            values.iter().copied().fold(f64::INFINITY, f64::min)
        }
        (CrossComponentRule::WorstCase, Direction::LowerBetter) => {
            values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }
    })
}

/// Score report for `selection` from the store's current windows.
pub fn compute_kpis(
    store: &SeriesStore,
    model: &QualityModel,
    selection: &GoalSelection,
    now: i64,
) -> Result<ScoreReport, SelectionError> {
    let metrics = resolve_goals(model, selection)?;
    let values: BTreeMap<NodeId, Option<f64>> = metrics
        .metric_ids()
        .map(|m| {
            let v = store.metric_value(model, m, now).ok().flatten();
            (m.to_string(), v)
        })
        .collect();
    compute_scores(model, selection, &values, now)
}

/// Parse a newline-delimited JSON body. Blank lines are skipped.
pub fn parse_ndjson(body: &str) -> Vec<Result<Sample, String>> {
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<Sample>(l).map_err(|e| e.to_string()))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: usize,
}

/// Append-only sample log, one wire-format line per accepted sample.
pub struct SampleLog {
    out: BufWriter<File>,
}

impl SampleLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, sample: &Sample) -> io::Result<()> {
        writeln!(self.out, "{}", sample.to_line())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn replay(path: &Path) -> io::Result<Vec<Sample>> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s = serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            out.push(s);
        }
        Ok(out)
    }
}
