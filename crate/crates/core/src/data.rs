//! CSV ingestion, chronological splits with train-only z-scoring, sliding
//! windows, and seeded synthetic sinusoid mixtures.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Per-channel z-score statistics from the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose training std fell below 1e-8 and were given std 1.
    pub degenerate: Vec<usize>,
}

impl Normalizer {
    pub fn normalize(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % c]) / self.std[i % c];
        }
    }

    pub fn denormalize(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
    }

    /// Store as `data.mean` / `data.std` tensors.
    pub fn store(&self, ck: &mut Checkpoint) {
        ck.tensors.retain(|(n, _)| n != "data.mean" && n != "data.std");
        ck.tensors.push(("data.mean".into(), Tensor::vector(self.mean.clone())));
        ck.tensors.push(("data.std".into(), Tensor::vector(self.std.clone())));
    }

    /// Statistics saved by [`Normalizer::store`], if present.
    pub fn from_checkpoint(ck: &Checkpoint) -> Option<Self> {
        let mean = ck.tensor("data.mean")?.data().to_vec();
        let std = ck.tensor("data.std")?.data().to_vec();
        Some(Normalizer {
            mean,
            std,
            degenerate: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[T_total, C]`, normalised once [`split_normalize`] has run.
    pub values: Tensor,
    pub columns: Vec<String>,
    pub timestamps: Option<Vec<String>>,
    /// `(train_end, val_end)` row indices.
    pub bounds: Option<(usize, usize)>,
    pub stats: Option<Normalizer>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.channels();
        &self.values.data()[t * c..(t + 1) * c]
    }

    /// Rows `[start, start + len)` as a `[len, C]` tensor.
    pub fn rows(&self, start: usize, len: usize) -> Tensor {
        let c = self.channels();
        Tensor::new(&[len, c], self.values.data()[start * c..(start + len) * c].to_vec())
            .expect("row range inside dataset")
    }

    /// Row range a split's windows draw from. Validation and test segments
    /// begin `lookback` rows early so their first target row is the first
    /// row of the split; targets never cross a boundary.
    pub fn segment(&self, split: Split, lookback: usize) -> Result<(usize, usize)> {
        let (train_end, val_end) = self
            .bounds
            .ok_or_else(|| Error::Contract("dataset has not been split".into()))?;
        Ok(match split {
            Split::Train => (0, train_end),
            Split::Val => (train_end.saturating_sub(lookback), val_end),
            Split::Test => (val_end.saturating_sub(lookback), self.len()),
        })
    }
}

fn parse_cell(cell: &str, row: usize, col: usize) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| Error::Parse {
        row,
        col,
        msg: format!("`{cell}` is not a number"),
    })
}

/// Parse CSV text. `row` in errors is the 1-based data row (header excluded),
/// `col` the 1-based file column.
pub fn read_csv(reader: impl Read, has_header: bool, timestamp_col: Option<usize>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut columns: Option<Vec<String>> = None;
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut width = 0;
    let mut data_row = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Format(format!(
                "ragged row at line {}: {len} fields, expected {expected_len}",
                line + 1
            )),
            _ => Error::Format(e.to_string()),
        })?;
        if let Some(ts) = timestamp_col {
            if ts >= rec.len() {
                return Err(Error::Format(format!(
                    "timestamp column {} beyond {} fields",
                    ts + 1,
                    rec.len()
                )));
            }
        }
        if line == 0 && has_header {
            columns = Some(
                rec.iter()
                    .enumerate()
                    .filter(|(i, _)| Some(*i) != timestamp_col)
                    .map(|(_, s)| s.to_string())
                    .collect(),
            );
            continue;
        }
        data_row += 1;
        for (i, cell) in rec.iter().enumerate() {
            if Some(i) == timestamp_col {
                timestamps.push(cell.to_string());
            } else {
                values.push(parse_cell(cell, data_row, i + 1)?);
            }
        }
        width = rec.len() - usize::from(timestamp_col.is_some());
    }
    if data_row == 0 || width == 0 {
        return Err(Error::Format("no numeric data rows".into()));
    }
    let columns = columns.unwrap_or_else(|| (0..width).map(|i| format!("ch{i}")).collect());
    Ok(Dataset {
        values: Tensor::new(&[data_row, width], values)?,
        columns,
        timestamps: timestamp_col.map(|_| timestamps),
        bounds: None,
        stats: None,
    })
}

pub fn load_csv(path: impl AsRef<Path>, has_header: bool, timestamp_col: Option<usize>) -> Result<Dataset> {
    read_csv(File::open(path)?, has_header, timestamp_col)
}

/// Guess header presence and a leading timestamp column from the first two lines.
pub fn sniff_layout(text: &str) -> (bool, Option<usize>) {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first: Vec<&str> = lines.next().map(|l| l.split(',').collect()).unwrap_or_default();
    let numeric = |s: &&str| s.trim().parse::<f64>().is_ok();
    // a leading non-numeric cell may be a timestamp, so only later cells decide
    let has_header = match first.len() {
        0 => false,
        1 => !numeric(&first[0]),
        _ => !first[1..].iter().all(numeric),
    };
    let data: Vec<&str> = if has_header {
        lines.next().map(|l| l.split(',').collect()).unwrap_or_default()
    } else {
        first
    };
    let ts = data.first().filter(|c| !numeric(c)).map(|_| 0);
    (has_header, ts)
}

/// Load a CSV, detecting header and timestamp column.
pub fn load_csv_auto(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let (header, ts) = sniff_layout(&text);
    read_csv(text.as_bytes(), header, ts)
}

/// Write values with 17 significant digits, which round-trips every `f64`.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header: Vec<String> = Vec::new();
    if ds.timestamps.is_some() {
        header.push("date".into());
    }
    header.extend(ds.columns.iter().cloned());
    writeln!(w, "{}", header.join(","))?;
    for t in 0..ds.len() {
        let mut cells: Vec<String> = Vec::with_capacity(ds.channels() + 1);
        if let Some(ts) = &ds.timestamps {
            cells.push(ts[t].clone());
        }
        cells.extend(ds.row(t).iter().map(|v| format!("{v:.16e}")));
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn split_point(total: usize, frac: f64) -> usize {
    ((total as f64 * frac) + 1e-9).floor() as usize
}

/// Chronological split and train-statistics z-scoring.
///
/// Every split's window segment (see [`Dataset::segment`]) must hold at
/// least `lookback + horizon` rows.
pub fn split_normalize(ds: Dataset, ratios: (f64, f64, f64), lookback: usize, horizon: usize) -> Result<Dataset> {
    let mut ds = split_only(ds, ratios, lookback, horizon)?;
    let stats = train_stats(&ds);
    stats.normalize(ds.values.data_mut());
    ds.stats = Some(stats);
    Ok(ds)
}

/// Split like [`split_normalize`] but normalise with previously fitted statistics.
pub fn split_with_stats(
    ds: Dataset,
    ratios: (f64, f64, f64),
    lookback: usize,
    horizon: usize,
    stats: &Normalizer,
) -> Result<Dataset> {
    if stats.mean.len() != ds.channels() {
        return Err(Error::Config(format!(
            "statistics cover {} channels, data has {}",
            stats.mean.len(),
            ds.channels()
        )));
    }
    let mut ds = split_only(ds, ratios, lookback, horizon)?;
    stats.normalize(ds.values.data_mut());
    ds.stats = Some(stats.clone());
    Ok(ds)
}

/// Set split boundaries without touching values.
pub fn split_only(mut ds: Dataset, ratios: (f64, f64, f64), lookback: usize, horizon: usize) -> Result<Dataset> {
    let (tr, va, te) = ratios;
    if tr <= 0.0 || va <= 0.0 || te <= 0.0 || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let total = ds.len();
    let train_end = split_point(total, tr);
    let val_end = split_point(total, tr + va);
    let needed = lookback + horizon;
    if train_end == 0 || val_end <= train_end || val_end >= total {
        return Err(Error::InsufficientData {
            split: "train".into(),
            len: train_end,
            needed,
        });
    }
    ds.bounds = Some((train_end, val_end));
    for split in [Split::Train, Split::Val, Split::Test] {
        let (s, e) = ds.segment(split, lookback)?;
        if e - s < needed {
            return Err(Error::InsufficientData {
                split: split.to_string(),
                len: e - s,
                needed,
            });
        }
    }
    Ok(ds)
}

fn train_stats(ds: &Dataset) -> Normalizer {
    let (train_end, _) = ds.bounds.expect("split before fitting statistics");
    let c = ds.channels();
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for t in 0..train_end {
        for (m, v) in mean.iter_mut().zip(ds.row(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_end as f64);
    for t in 0..train_end {
        for ((s, v), m) in std.iter_mut().zip(ds.row(t)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let mut degenerate = Vec::new();
    for (i, s) in std.iter_mut().enumerate() {
        *s = (*s / train_end as f64).sqrt();
        if *s < 1e-8 {
            log::warn!(
                "channel {i} ({}) is constant on the training split; using std 1",
                ds.columns[i]
            );
            *s = 1.0;
            degenerate.push(i);
        }
    }
    Normalizer { mean, std, degenerate }
}

/// Start rows of the sliding windows of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub starts: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// `(x, y)` of window `i`: `x` is `[L, C]`, `y` is `[horizon, C]`.
    pub fn pair(&self, ds: &Dataset, i: usize) -> (Tensor, Tensor) {
        let s = self.starts[i];
        (ds.rows(s, self.lookback), ds.rows(s + self.lookback, self.horizon))
    }

    /// Stack the selected windows into `[B, L, C]` and `[B, horizon, C]`.
    pub fn batch(&self, ds: &Dataset, indices: &[usize]) -> (Tensor, Tensor) {
        let (xs, ys): (Vec<Tensor>, Vec<Tensor>) = indices.iter().map(|&i| self.pair(ds, i)).unzip();
        (
            Tensor::stack(&xs).expect("equal window shapes"),
            Tensor::stack(&ys).expect("equal window shapes"),
        )
    }
}

/// Windows of a contiguous row range `[start, end)`:
/// `x = rows[t, t+L)`, `y = rows[t+L, t+L+horizon)`.
pub fn windows_in(start: usize, end: usize, lookback: usize, horizon: usize, stride: usize) -> Result<WindowSet> {
    if stride == 0 {
        return Err(Error::Config("window stride must be >= 1".into()));
    }
    let len = end.saturating_sub(start);
    if len < lookback + horizon {
        return Err(Error::InsufficientData {
            split: format!("rows {start}..{end}"),
            len,
            needed: lookback + horizon,
        });
    }
    let count = len - lookback - horizon + 1;
    Ok(WindowSet {
        starts: (0..count).step_by(stride).map(|i| start + i).collect(),
        lookback,
        horizon,
    })
}

pub fn window_dataset(ds: &Dataset, split: Split, lookback: usize, horizon: usize, stride: usize) -> Result<WindowSet> {
    let (s, e) = ds.segment(split, lookback)?;
    windows_in(s, e, lookback, horizon, stride).map_err(|err| match err {
        Error::InsufficientData { len, needed, .. } => Error::InsufficientData {
            split: split.to_string(),
            len,
            needed,
        },
        other => other,
    })
}

/// Sum-of-sinusoids generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub periods: Vec<f64>,
    /// One per period; missing entries default to 1.
    pub amplitudes: Vec<f64>,
    pub noise_std: f64,
    pub len: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            periods: vec![24.0, 12.0],
            amplitudes: Vec::new(),
            noise_std: 0.0,
            len: 400,
            channels: 2,
            seed: 42,
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: `{s}` is not a number")))
        })
        .collect()
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    /// `key=value` pairs separated by `;` or newlines. Keys: `periods`,
    /// `amplitudes`, `noise`, `T`, `C`, `seed`; lists are comma-separated.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for item in s
            .split([';', '\n'])
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{item}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let int = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("{k}: `{v}` is not an integer")))
            };
            match k {
                "periods" => spec.periods = parse_list(k, v)?,
                "amplitudes" | "amps" => spec.amplitudes = parse_list(k, v)?,
                "noise" | "noise_std" => {
                    spec.noise_std = v.parse().map_err(|_| Error::Config(format!("noise: `{v}`")))?
                }
                "T" | "len" | "T_total" => spec.len = int(v)?,
                "C" | "channels" => spec.channels = int(v)?,
                "seed" => spec.seed = int(v)? as u64,
                other => return Err(Error::Config(format!("unknown synthetic key `{other}`"))),
            }
        }
        Ok(spec)
    }
}

/// `x_c(t) = Σ_j a_j · sin(2π t / p_j + φ_{c,j}) + ε`, with phases and
/// noise drawn from the seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.periods.is_empty() || spec.periods.iter().any(|&p| p.is_nan() || p <= 0.0) {
        return Err(Error::Config("synthetic periods must be positive".into()));
    }
    if spec.len == 0 || spec.channels == 0 {
        return Err(Error::Config("synthetic length and channels must be positive".into()));
    }
    if spec.noise_std.is_nan() || spec.noise_std < 0.0 {
        return Err(Error::Config("noise std must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phases: Vec<Vec<f64>> = (0..spec.channels)
        .map(|_| spec.periods.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut values = Vec::with_capacity(spec.len * spec.channels);
    for t in 0..spec.len {
        for phase in &phases {
            let mut v = 0.0;
            for (j, &p) in spec.periods.iter().enumerate() {
                let a = spec.amplitudes.get(j).copied().unwrap_or(1.0);
                v += a * (2.0 * PI * t as f64 / p + phase[j]).sin();
            }
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            values.push(v);
        }
    }
    Ok(Dataset {
        values: Tensor::new(&[spec.len, spec.channels], values)?,
        columns: (0..spec.channels).map(|i| format!("ch{i}")).collect(),
        timestamps: None,
        bounds: None,
        stats: None,
    })
}
