//! Run configuration: `key = value` files with `#` comments, overridden by
//! command-line values.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::{Location, ModalitySet, SplitKind, SyntheticSceneParams};
use crate::geometry::{Sampling, DEFAULT_MAX_CONTROLS};
use crate::model::ModelConfig;
use crate::training::{Optimizer, TrainConfig, Variant};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub variant: Variant,
    pub split: SplitKind,
    /// Modalities fed to the network at evaluation; the rest are zeroed.
    pub modalities: ModalitySet,

    pub frames: usize,
    pub start_index: u64,
    pub day_frames: usize,
    pub night_frames: usize,
    pub scene: SyntheticSceneParams,

    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub stages: usize,
    pub channels: Vec<usize>,
    pub val_ratio: f64,

    pub checkpoint: Option<PathBuf>,
    pub eps: f64,
    pub samples: usize,
    pub max_controls: usize,
    pub frame: Option<String>,
    pub sampling: Sampling,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let model = ModelConfig::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: None,
            variant: train.variant(),
            split: SplitKind::DayNight,
            modalities: ModalitySet::ALL,
            frames: 10,
            start_index: 0,
            day_frames: 220,
            night_frames: 50,
            scene: SyntheticSceneParams::default(),
            lr: train.lr,
            epochs: train.epochs,
            batch_size: train.batch_size,
            optimizer: train.optimizer,
            stages: model.stages,
            channels: model.channels,
            val_ratio: 0.1,
            checkpoint: None,
            eps: 1e-5,
            samples: 100,
            max_controls: DEFAULT_MAX_CONTROLS,
            frame: None,
            sampling: Sampling::Bilinear,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "data",
    "variant",
    "split",
    "modalities",
    "frames",
    "start_index",
    "day_frames",
    "night_frames",
    "width",
    "height",
    "night",
    "alpha",
    "sigma",
    "thermal_noise",
    "obstacles_min",
    "obstacles_max",
    "horizon_min",
    "horizon_max",
    "location",
    "difficult_prob",
    "lidar_normalizer",
    "lr",
    "epochs",
    "batch_size",
    "optimizer",
    "stages",
    "channels",
    "val_ratio",
    "checkpoint",
    "eps",
    "samples",
    "max_controls",
    "frame",
    "sampling",
];

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("'{v}': {e}"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("'{v}' is not a boolean")),
    }
}

fn parsed<T: std::str::FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|e| e.to_string())
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => {
                self.seed = num(v)?;
                self.scene.seed = self.seed;
            }
            "out" => self.out = PathBuf::from(v),
            "data" => self.data = opt_path(v),
            "variant" => self.variant = parsed(v)?,
            "split" => self.split = parsed(v)?,
            "modalities" => self.modalities = parsed(v)?,
            "frames" => self.frames = num(v)?,
            "start_index" => self.start_index = num(v)?,
            "day_frames" => self.day_frames = num(v)?,
            "night_frames" => self.night_frames = num(v)?,
            "width" => self.scene.width = num(v)?,
            "height" => self.scene.height = num(v)?,
            "night" => self.scene.night = boolean(v)?,
            "alpha" => self.scene.alpha = num(v)?,
            "sigma" => self.scene.sigma = num(v)?,
            "thermal_noise" => self.scene.thermal_noise = num(v)?,
            "obstacles_min" => self.scene.obstacles_min = num(v)?,
            "obstacles_max" => self.scene.obstacles_max = num(v)?,
            "horizon_min" => self.scene.horizon_min = num(v)?,
            "horizon_max" => self.scene.horizon_max = num(v)?,
            "location" => self.scene.location = parsed::<Location>(v)?,
            "difficult_prob" => self.scene.difficult_prob = num(v)?,
            "lidar_normalizer" => self.scene.lidar_normalizer = num(v)?,
            "lr" => self.lr = num(v)?,
            "epochs" => self.epochs = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "optimizer" => self.optimizer = parsed(v)?,
            "stages" => self.stages = num(v)?,
            "channels" => {
                self.channels = v
                    .split(',')
                    .map(|c| num::<usize>(c.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "val_ratio" => self.val_ratio = num(v)?,
            "checkpoint" => self.checkpoint = opt_path(v),
            "eps" => self.eps = num(v)?,
            "samples" => self.samples = num(v)?,
            "max_controls" => self.max_controls = num(v)?,
            "frame" => self.frame = (!v.is_empty()).then(|| v.to_string()),
            "sampling" => {
                self.sampling = match v {
                    "bilinear" => Sampling::Bilinear,
                    "nearest" => Sampling::Nearest,
                    _ => return Err(format!("sampling '{v}' is not bilinear or nearest")),
                }
            }
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Parse a config file body. Duplicate keys keep the last value and
    /// are reported in the returned warnings.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut seen: Vec<&str> = Vec::new();
        let mut warnings = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                msg: format!("expected 'key = value', found '{line}'"),
            })?;
            let k = k.trim();
            if seen.contains(&k) {
                warnings.push(format!("line {line_no}: duplicate key '{k}', last value wins"));
            } else {
                seen.push(k);
            }
            self.set(k, v).map_err(|msg| Error::Config { line: line_no, msg })?;
        }
        Ok(warnings)
    }

    pub fn scene_params(&self, night: bool) -> SyntheticSceneParams {
        SyntheticSceneParams {
            night,
            seed: self.seed,
            ..self.scene.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: self.optimizer,
            ..TrainConfig::default()
        };
        t.set_variant(self.variant);
        t
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            stages: self.stages,
            channels: self.channels.clone(),
            height: self.scene.height,
            width: self.scene.width,
            multihead: self.variant.multihead(),
            ..ModelConfig::default()
        }
    }

    /// Check value ranges and cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train_config().validate()?;
        self.model_config().validate()?;
        if !(0.0..=1.0).contains(&self.val_ratio) {
            return Err(Error::Invalid(format!("val_ratio {} outside [0, 1]", self.val_ratio)));
        }
        if !(self.eps > 0.0) || self.samples == 0 || self.max_controls == 0 {
            return Err(Error::Invalid("eps, samples and max_controls must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, in a form [`load_config`] reads
    /// back to an identical configuration.
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let sampling = match self.sampling {
            Sampling::Bilinear => "bilinear",
            Sampling::Nearest => "nearest",
        };
        let mut out = String::new();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("data", path(&self.data)),
            ("variant", self.variant.to_string()),
            ("split", self.split.to_string()),
            ("modalities", self.modalities.to_string()),
            ("frames", self.frames.to_string()),
            ("start_index", self.start_index.to_string()),
            ("day_frames", self.day_frames.to_string()),
            ("night_frames", self.night_frames.to_string()),
            ("width", s.width.to_string()),
            ("height", s.height.to_string()),
            ("night", s.night.to_string()),
            ("alpha", s.alpha.to_string()),
            ("sigma", s.sigma.to_string()),
            ("thermal_noise", s.thermal_noise.to_string()),
            ("obstacles_min", s.obstacles_min.to_string()),
            ("obstacles_max", s.obstacles_max.to_string()),
            ("horizon_min", s.horizon_min.to_string()),
            ("horizon_max", s.horizon_max.to_string()),
            ("location", s.location.to_string()),
            ("difficult_prob", s.difficult_prob.to_string()),
            ("lidar_normalizer", s.lidar_normalizer.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("stages", self.stages.to_string()),
            ("channels", channels.join(",")),
            ("val_ratio", self.val_ratio.to_string()),
            ("checkpoint", path(&self.checkpoint)),
            ("eps", self.eps.to_string()),
            ("samples", self.samples.to_string()),
            ("max_controls", self.max_controls.to_string()),
            ("frame", self.frame.clone().unwrap_or_default()),
            ("sampling", sampling.to_string()),
        ];
        for (k, v) in pairs {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

/// Defaults, then the file (if any), then `overrides` in order. Override
/// errors report line 0.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<(RunConfig, Vec<String>)> {
    let mut cfg = RunConfig::default();
    let mut warnings = Vec::new();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        warnings = cfg.apply_text(&text).map_err(|e| match e {
            Error::Config { line, msg } => Error::Config {
                line,
                msg: format!("{}: {msg}", p.display()),
            },
            other => other,
        })?;
    }
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|msg| Error::Config {
            line: 0,
            msg: format!("--{k}: {msg}"),
        })?;
    }
    Ok((cfg, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("\n# only a comment\n").unwrap().is_empty());
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn flag_wins_and_duplicates_warn() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.cfg");
        fs::write(&p, "seed = 3\nepochs = 5 # trailing\nepochs = 7\n").unwrap();
        let (c, w) = load_config(Some(&p), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!((c.seed, c.epochs), (9, 7));
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("epochs"));
    }

    #[test]
    fn unknown_key_reports_line() {
        let mut c = RunConfig::default();
        let err = c.apply_text("seed = 1\n\nbogus = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        let err = c.apply_text("lr = fast\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("channels", "4, 6").unwrap();
        c.set("stages", "2").unwrap();
        c.set("modalities", "thermal,lidar").unwrap();
        c.set("alpha", "0.1").unwrap();
        c.set("checkpoint", "x/best.ckpt").unwrap();
        c.set("sampling", "nearest").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        for k in KEYS {
            assert!(c.to_text().contains(&format!("{k} = ")), "{k}");
        }
    }
}
