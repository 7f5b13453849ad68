//! Run configuration and the flat `key = value` file format.
//!
//! ```text
//! # comment
//! input = images/
//! atoms = 64
//! lambda = 0.1
//! ```
//!
//! Keys are case-sensitive. Blank lines and lines starting with `#` are
//! skipped. Command-line flags are applied on top of the file with
//! [`RunConfig::set`], using the same keys.

use std::path::{Path, PathBuf};

use crate::dictionary::TrainConfig;
use crate::error::{Error, Result};
use crate::pipeline::{HrTarget, SrConfig, TrainingSetConfig};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub training_set: TrainingSetConfig,
    pub sr: SrConfig,
    /// Training images: PNG files or directories of PNG files.
    pub inputs: Vec<PathBuf>,
    pub output: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    /// Objective log written during training.
    pub log: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// Every key accepted by [`RunConfig::set`].
pub const KEYS: &[&str] = &[
    "input",
    "output",
    "dictionary",
    "log",
    "threads",
    "seed",
    "scale",
    "patch_side",
    "overlap",
    "samples",
    "variance_threshold",
    "training_noise_sigma",
    "hr_target",
    "normalize",
    "atoms",
    "lambda",
    "tau",
    "gamma",
    "rho",
    "outer_iterations",
    "admm_tolerance",
    "admm_max_iterations",
    "tau_max",
    "tau_steepness",
    "tau_midpoint",
    "beta_normalizer",
    "noise_sigma",
    "noise_tau_factor",
    "force_tau",
    "solver_max_iterations",
    "solver_tolerance",
    "lipschitz_safety",
];

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn optional(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        number(key, value).map(Some)
    }
}

impl RunConfig {
    /// Parses the text of a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key. `input` accumulates; every other key overwrites.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "input" => self.inputs.push(value.into()),
            "output" => self.output = Some(value.into()),
            "dictionary" => self.dictionary = Some(value.into()),
            "log" => self.log = Some(value.into()),
            "threads" => self.threads = Some(number(key, value)?),
            "seed" => {
                let seed = number(key, value)?;
                self.train.seed = seed;
                self.training_set.seed = seed;
            }
            "scale" => {
                let scale = number(key, value)?;
                self.sr.scale = scale;
                self.training_set.scale = scale;
            }
            "patch_side" => {
                let side = number(key, value)?;
                self.sr.patch_side = side;
                self.training_set.patch_side = side;
            }
            "overlap" => self.sr.overlap = number(key, value)?,
            "samples" => self.training_set.samples = number(key, value)?,
            "variance_threshold" => self.training_set.variance_threshold = number(key, value)?,
            "training_noise_sigma" => self.training_set.noise_sigma = optional(key, value)?,
            "hr_target" => {
                let target = match value {
                    "residual" => HrTarget::Residual,
                    "mean" => HrTarget::MeanSubtracted,
                    _ => return Err(Error::Config(format!("hr_target: expected residual or mean, got {value:?}"))),
                };
                self.sr.model.target = target;
                self.training_set.model.target = target;
            }
            "normalize" => {
                let on = flag(key, value)?;
                self.sr.model.normalize = on;
                self.training_set.model.normalize = on;
            }
            "atoms" => self.train.atoms = number(key, value)?,
            "lambda" => {
                let lambda = number(key, value)?;
                self.train.lambda = lambda;
                self.sr.lambda = lambda;
            }
            "tau" => self.train.tau = number(key, value)?,
            "gamma" => self.train.gamma = number(key, value)?,
            "rho" => self.train.rho = number(key, value)?,
            "outer_iterations" => self.train.outer_iterations = number(key, value)?,
            "admm_tolerance" => self.train.admm_tolerance = number(key, value)?,
            "admm_max_iterations" => self.train.admm_max_iterations = number(key, value)?,
            "tau_max" => self.sr.tau_map.tau_max = number(key, value)?,
            "tau_steepness" => self.sr.tau_map.steepness = number(key, value)?,
            "tau_midpoint" => self.sr.tau_map.midpoint = number(key, value)?,
            "beta_normalizer" => self.sr.beta_normalizer = number(key, value)?,
            "noise_sigma" => self.sr.noise_sigma = optional(key, value)?,
            "noise_tau_factor" => self.sr.noise_tau_factor = number(key, value)?,
            "force_tau" => self.sr.tau_override = optional(key, value)?,
            "solver_max_iterations" => {
                let n = number(key, value)?;
                self.train.solver.max_iterations = n;
                self.sr.solver.max_iterations = n;
            }
            "solver_tolerance" => {
                let t = number(key, value)?;
                self.train.solver.tolerance = t;
                self.sr.solver.tolerance = t;
            }
            "lipschitz_safety" => {
                let f = number(key, value)?;
                self.train.solver.lipschitz_safety = f;
                self.sr.solver.lipschitz_safety = f;
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Checks parameters for training and that every training input exists.
    pub fn validate_for_training(&self) -> Result<()> {
        self.train.validate()?;
        if self.training_set.samples < self.train.atoms {
            return Err(Error::param(format!(
                "samples ({}) must be at least the atom count ({})",
                self.training_set.samples, self.train.atoms
            )));
        }
        if self.inputs.is_empty() {
            return Err(Error::Config("no training input given".into()));
        }
        if self.output.is_none() {
            return Err(Error::Config("no output dictionary path given".into()));
        }
        for p in &self.inputs {
            require_exists(p)?;
        }
        for p in [&self.output, &self.log].into_iter().flatten() {
            require_parent(p)?;
        }
        Ok(())
    }

    /// Checks parameters for upscaling and that the dictionary exists.
    pub fn validate_for_upscale(&self) -> Result<()> {
        self.sr.validate()?;
        match &self.dictionary {
            Some(d) => require_exists(d)?,
            None => return Err(Error::Config("no dictionary path given".into())),
        }
        if let Some(o) = &self.output {
            require_parent(o)?;
        }
        Ok(())
    }

    /// Training PNGs: listed files as given, directories expanded to their
    /// `.png` entries in name order.
    pub fn training_files(&self) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        for p in &self.inputs {
            if p.is_dir() {
                let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?
                    .map(|e| e.map(|e| e.path()))
                    .collect::<std::io::Result<_>>()?;
                entries.retain(|e| e.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")));
                entries.sort();
                files.extend(entries);
            } else {
                files.push(p.clone());
            }
        }
        if files.is_empty() {
            return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "no PNG training images found")));
        }
        Ok(files)
    }
}

pub(crate) fn require_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", p.display()))))
    }
}

pub(crate) fn require_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => require_exists(dir),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blank_lines() {
        let cfg = RunConfig::parse(
            "# training\n\ninput = a.png\ninput=b\n atoms = 16 \nlambda = 0.2\nseed = 9\nhr_target = mean\nnormalize = false\nforce_tau = 0\n",
        )
        .unwrap();
        assert_eq!(cfg.inputs, vec![PathBuf::from("a.png"), PathBuf::from("b")]);
        assert_eq!(cfg.train.atoms, 16);
        assert_eq!((cfg.train.lambda, cfg.sr.lambda), (0.2, 0.2));
        assert_eq!((cfg.train.seed, cfg.training_set.seed), (9, 9));
        assert_eq!(cfg.sr.model.target, HrTarget::MeanSubtracted);
        assert_eq!(cfg.training_set.model, cfg.sr.model);
        assert!(!cfg.sr.model.normalize);
        assert_eq!(cfg.sr.tau_override, Some(0.0));
    }

    #[test]
    fn later_values_override_earlier_ones() {
        let mut cfg = RunConfig::parse("lambda = 0.2\nnoise_sigma = 4").unwrap();
        cfg.set("lambda", "0.3").unwrap();
        cfg.set("noise_sigma", "none").unwrap();
        assert_eq!(cfg.sr.lambda, 0.3);
        assert_eq!(cfg.sr.noise_sigma, None);
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let mut cfg = RunConfig::default();
        for key in KEYS {
            let value = match *key {
                "hr_target" => "residual",
                "normalize" => "true",
                _ => "3",
            };
            cfg.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn rejects_malformed_input() {
        for text in ["atoms 16", "atoms = sixteen", "colour = red", "normalize = maybe", "hr_target = x"] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(err.is_usage(), "{text}: {err}");
        }
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("atoms = 4\n\nbogus = 1").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn training_validation_checks_paths_first() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.training_set.samples = 1000;
        cfg.train.atoms = 16;
        cfg.inputs.push(dir.path().join("missing"));
        cfg.output = Some(dir.path().join("d.bin"));
        assert!(matches!(cfg.validate_for_training(), Err(Error::Io(_))));

        cfg.inputs = vec![dir.path().to_path_buf()];
        cfg.validate_for_training().unwrap();
        assert!(matches!(cfg.training_files(), Err(Error::Io(_))));

        cfg.output = Some(dir.path().join("no/such/dir/d.bin"));
        assert!(matches!(cfg.validate_for_training(), Err(Error::Io(_))));

        cfg.output = Some(dir.path().join("d.bin"));
        cfg.training_set.samples = 8;
        assert!(cfg.validate_for_training().unwrap_err().is_usage());
    }

    #[test]
    fn directories_expand_to_sorted_pngs() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.PNG", "notes.txt"] {
            std::fs::write(dir.path().join(name), b"").unwrap();
        }
        let cfg = RunConfig { inputs: vec![dir.path().into()], ..Default::default() };
        let files = cfg.training_files().unwrap();
        let names: Vec<_> = files.iter().map(|f| f.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, ["a.PNG", "b.png"]);
    }
}
