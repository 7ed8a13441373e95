//! Return series: CSV ingestion, price transforms and synthetic generators.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Ordered finite returns with an identifier and optional date labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    name: String,
    values: Vec<f64>,
    labels: Option<Vec<String>>,
}

impl ReturnSeries {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::arg("return series must have at least one value"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!(
                "return series value {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self {
            name: name.into(),
            values,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.values.len() {
            return Err(Error::arg(format!(
                "{} labels for {} values",
                labels.len(),
                self.values.len()
            )));
        }
        // ISO-8601 dates order lexicographically
        if let Some(w) = labels.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::arg(format!(
                "labels must strictly increase: {:?} then {:?}",
                w[0], w[1]
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    /// Population variance (divisor `T`).
    pub fn variance(&self) -> f64 {
        variance(&self.values)
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Read one numeric column (and optionally a label column) from a CSV file
/// with a header row. Row numbers in errors count the header as row 1.
pub fn load_csv(
    path: impl AsRef<Path>,
    value_column: &str,
    label_column: Option<&str>,
) -> Result<ReturnSeries> {
    let path = path.as_ref();
    let csv_err = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(csv_err("empty file: no header row".into()));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| csv_err(format!("missing column {name:?}")))
    };
    let value_idx = find(value_column)?;
    let label_idx = label_column.map(find).transpose()?;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            message,
        };
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let cell = record.get(value_idx).unwrap_or("").trim();
        if cell.is_empty() {
            return Err(parse_err(format!("blank value in column {value_column:?}")));
        }
        let v: f64 = cell
            .parse()
            .map_err(|_| parse_err(format!("non-numeric value {cell:?}")))?;
        if !v.is_finite() {
            return Err(parse_err(format!("non-finite value {cell:?}")));
        }
        values.push(v);
        if let Some(li) = label_idx {
            labels.push(record.get(li).unwrap_or("").trim().to_string());
        }
    }
    if values.is_empty() {
        return Err(csv_err("no data rows".into()));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let series = ReturnSeries::new(name, values)?;
    match label_idx {
        Some(_) => series
            .with_labels(labels)
            .map_err(|e| csv_err(e.to_string())),
        None => Ok(series),
    }
}

/// Write a series as CSV with a `date` column (when labelled) and a
/// `return` column. Values use the shortest exact decimal form.
pub fn write_csv(series: &ReturnSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let wrap = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    match series.labels() {
        Some(labels) => {
            writer.write_record(["date", "return"]).map_err(wrap)?;
            for (l, v) in labels.iter().zip(series.values()) {
                writer.write_record([l.as_str(), &v.to_string()]).map_err(wrap)?;
            }
        }
        None => {
            writer.write_record(["return"]).map_err(wrap)?;
            for v in series.values() {
                writer.write_record([v.to_string()]).map_err(wrap)?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// `r_t = ln(P_t / P_{t-1})`.
pub fn prices_to_log_returns(name: impl Into<String>, prices: &[f64]) -> Result<ReturnSeries> {
    if prices.len() < 2 {
        return Err(Error::arg("need at least two prices"));
    }
    if let Some(p) = prices.iter().find(|&&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::domain(format!("price {p} is not positive")));
    }
    let returns = prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    ReturnSeries::new(name, returns)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regime {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Switching {
    /// Each observation independently comes from regime 1 with this probability.
    Iid { first_prob: f64 },
    /// Two-state Markov chain that leaves its current regime with this
    /// probability at every step; the first regime is a fair coin flip.
    Markov { switch_prob: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureProcessSpec {
    pub regimes: [Regime; 2],
    pub switching: Switching,
}

impl MixtureProcessSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.regimes.iter().enumerate() {
            if !r.mean.is_finite() || !(r.variance > 0.0 && r.variance.is_finite()) {
                return Err(Error::arg(format!(
                    "regime {} needs a finite mean and positive variance",
                    i + 1
                )));
            }
        }
        match self.switching {
            Switching::Iid { first_prob } if !(0.0..=1.0).contains(&first_prob) => Err(
                Error::arg(format!("regime probability {first_prob} outside [0, 1]")),
            ),
            Switching::Markov { switch_prob } if !(switch_prob > 0.0 && switch_prob < 1.0) => Err(
                Error::arg(format!("switching probability {switch_prob} outside (0, 1)")),
            ),
            _ => Ok(()),
        }
    }
}

pub fn simulate_mixture_process(
    spec: &MixtureProcessSpec,
    len: usize,
    seed: u64,
) -> Result<ReturnSeries> {
    spec.validate()?;
    if len == 0 {
        return Err(Error::arg("series length must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut regime = match spec.switching {
        Switching::Iid { .. } => 0,
        Switching::Markov { .. } => usize::from(rng.random::<f64>() >= 0.5),
    };
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        match spec.switching {
            Switching::Iid { first_prob } => {
                regime = usize::from(rng.random::<f64>() >= first_prob);
            }
            Switching::Markov { switch_prob } => {
                if rng.random::<f64>() < switch_prob {
                    regime = 1 - regime;
                }
            }
        }
        let r = spec.regimes[regime];
        let z: f64 = StandardNormal.sample(&mut rng);
        values.push(r.mean + r.variance.sqrt() * z);
    }
    ReturnSeries::new(format!("mixture-{seed}"), values)
}

/// `n` distinct integers drawn uniformly from `[lo, hi]`.
pub fn sample_seeds(n: usize, lo: u64, hi: u64, meta_seed: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::arg("need at least one seed"));
    }
    if lo >= hi {
        return Err(Error::arg(format!("empty seed range [{lo}, {hi}]")));
    }
    let span = hi - lo + 1;
    if n as u64 > span {
        return Err(Error::arg(format!(
            "cannot draw {n} distinct seeds from a range of {span}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(meta_seed);
    Ok(index::sample(&mut rng, span as usize, n)
        .into_iter()
        .map(|i| lo + i as u64)
        .collect())
}
