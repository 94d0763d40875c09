//! End-to-end plumbing shared by the command line and the C interface:
//! data sources, a trained model bundled with its normalisation, and
//! raw-scale forecasting.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_synthetic, load_csv_auto, split_normalize, split_with_stats, window_dataset, Dataset, Normalizer, Split,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::tensor::Tensor;
use crate::train::{evaluate, train_from, EpochLog, EvalReport, TrainOptions, TrainOutcome};

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// A CSV path, or `synthetic:<key=value;...>` / `synthetic:@<file>`.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic(SyntheticSpec),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("synthetic:") {
            Some(rest) => {
                let text = match rest.strip_prefix('@') {
                    Some(path) => std::fs::read_to_string(path)?,
                    None => rest.to_string(),
                };
                Ok(DataSource::Synthetic(text.parse()?))
            }
            None => Ok(DataSource::Csv(PathBuf::from(s))),
        }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Csv(p) => load_csv_auto(p),
            DataSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}

/// A model together with the statistics and split it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecaster {
    pub model: ModelState,
    pub stats: Normalizer,
    pub ratios: (f64, f64, f64),
}

fn ratios_to_string(r: (f64, f64, f64)) -> String {
    format!("{:e},{:e},{:e}", r.0, r.1, r.2)
}

fn ratios_from_str(s: &str) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad split ratios `{s}`")))
        })
        .collect::<Result<_>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Format(format!("bad split ratios `{s}`"))),
    }
}

impl Forecaster {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.meta.insert("data.split".into(), ratios_to_string(self.ratios));
        self.stats.store(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ModelState::from_checkpoint(ck)?;
        let stats =
            Normalizer::from_checkpoint(ck).ok_or_else(|| Error::Format("checkpoint lacks data statistics".into()))?;
        if stats.mean.len() != model.config.channels {
            return Err(Error::Format("data statistics do not match the channel count".into()));
        }
        let ratios = ratios_from_str(ck.meta_value("data.split")?)?;
        Ok(Forecaster { model, stats, ratios })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Split `raw` with the stored ratios and normalise with the stored statistics.
    pub fn prepare(&self, raw: Dataset) -> Result<Dataset> {
        let cfg = self.config();
        split_with_stats(raw, self.ratios, cfg.lookback, cfg.horizon, &self.stats)
    }

    /// Metrics on one split of raw data, in normalised units.
    pub fn evaluate_split(&self, raw: Dataset, split: Split) -> Result<EvalReport> {
        let ds = self.prepare(raw)?;
        let cfg = self.config();
        let w = window_dataset(&ds, split, cfg.lookback, cfg.horizon, 1)?;
        evaluate(&self.model, &ds, &w, 64)
    }

    /// Forecast `[horizon, C]` in original units from a raw `[L, C]` window.
    pub fn forecast_raw(&self, window: &Tensor) -> Result<Tensor> {
        let cfg = self.config();
        if window.shape() != [cfg.lookback, cfg.channels] {
            return Err(Error::dim(
                "forecast",
                format!(
                    "window {:?}, expected [{}, {}]",
                    window.shape(),
                    cfg.lookback,
                    cfg.channels
                ),
            ));
        }
        let mut x = window.clone();
        self.stats.normalize(x.data_mut());
        let x = x.reshape(&[1, cfg.lookback, cfg.channels])?;
        let mut y = self.model.predict(&x)?.reshape(&[cfg.horizon, cfg.channels])?;
        self.stats.denormalize(y.data_mut());
        Ok(y)
    }

    /// Forecast the `horizon` rows following row `at - 1` of raw data.
    pub fn forecast_at(&self, raw: &Dataset, at: usize) -> Result<Tensor> {
        let l = self.config().lookback;
        if at < l || at > raw.len() {
            return Err(Error::Config(format!(
                "forecast origin {at} needs {l} history rows inside 0..={}",
                raw.len()
            )));
        }
        self.forecast_raw(&raw.rows(at - l, l))
    }
}

/// Split, normalise, and train a fresh model on raw data.
pub fn fit(
    raw: Dataset,
    config: &ModelConfig,
    ratios: (f64, f64, f64),
    opts: &TrainOptions,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Forecaster, TrainOutcome)> {
    let ds = split_normalize(raw, ratios, config.lookback, config.horizon)?;
    let stats = ds.stats.clone().expect("normalised");
    let outcome = train_from(ModelState::new(config.clone())?, &ds, opts, on_epoch)?;
    let forecaster = Forecaster {
        model: outcome.best.clone(),
        stats,
        ratios,
    };
    Ok((forecaster, outcome))
}
