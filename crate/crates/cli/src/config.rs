//! Flat `key = value` configuration with dotted sections.
//!
//! ```text
//! # comment
//! seed = 7
//! schedule.kind = linear
//! model.hidden = 64,64
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Every key a config file may set, with its default when unset.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("seed", ""),
    ("out", "out"),
    ("svg", "false"),
    ("schedule.kind", "linear"),
    ("schedule.lambda_min", "-6"),
    ("schedule.lambda_max", "6"),
    ("schedule.width", "64"),
    ("schedule.lr", "1e-4"),
    ("schedule.learn_endpoints", "false"),
    ("model.kind", "eps"),
    ("model.hidden", "64,64"),
    ("model.n_freq", "4"),
    ("model.residual", "false"),
    ("loss.objective", "continuous"),
    ("loss.weighting", "uniform"),
    ("loss.weighting_bias", "0"),
    ("loss.steps", "1000"),
    ("loss.eval_samples", "20000"),
    ("data.kind", "five-clusters"),
    ("data.n", "5000"),
    ("data.seed", "1"),
    ("data.mean", "0"),
    ("data.var", "1"),
    ("train.steps", "1000"),
    ("train.batch", "128"),
    ("train.lr", "1e-3"),
    ("train.momentum", "0.9"),
    ("train.cosine_decay", "false"),
    ("train.stratified", "true"),
    ("train.epochs", "10"),
    ("sample.n", "2000"),
    ("sample.steps", "200"),
    ("sample.variance", "posterior"),
    ("sample.denoiser", "checkpoint"),
    ("sample.checkpoint", ""),
    ("sample.trace_chain", "0"),
    ("vae.latent", "2"),
    ("vae.hidden", "64,64"),
    ("vae.obs_var", "0.1"),
    ("vae.steps", "3000"),
    ("vae.batch", "256"),
    ("vae.lr", "0.01"),
    ("vae.momentum", "0.9"),
    ("hole.mixture_points", "2000"),
    ("hole.percentile", "0.001"),
    ("hole.prior_samples", "100000"),
    ("hole.ks_points", "10000"),
    ("hole.grid", "61"),
    ("hole.extent", "4"),
    ("verify.pairs", "100"),
    ("verify.draws", "1000"),
    ("verify.mc_samples", "100000"),
    ("dump.rows", "100"),
    ("dump.lambda", "0.5753641449035618"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Command {
    Train,
    Sample,
    Verify,
    HoleDemo,
    ScheduleDump,
    ParamTable,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Train,
        Command::Sample,
        Command::Verify,
        Command::HoleDemo,
        Command::ScheduleDump,
        Command::ParamTable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Verify => "verify",
            Command::HoleDemo => "hole-demo",
            Command::ScheduleDump => "schedule-dump",
            Command::ParamTable => "param-table",
        }
    }
}

impl FromStr for Command {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| anyhow!("unknown command {s:?}"))
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parsed key/value pairs. Only keys in [`KNOWN_KEYS`] are accepted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn default_of(key: &str) -> Option<&'static str> {
    KNOWN_KEYS.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if default_of(k).is_none() {
                bail!("line {}: unknown key {k:?}", i + 1);
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                bail!("line {}: duplicate key {k:?}", i + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Overrides one key, e.g. from a command-line flag.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if default_of(key).is_none() {
            bail!("unknown key {key:?}");
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// The configured value, or the documented default.
    pub fn str(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => default_of(key).unwrap_or_else(|| panic!("key {key} is not registered")),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let v = self.str(key);
        v.parse().map_err(|e| anyhow!("{key} = {v:?}: {e}"))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: fmt::Display,
    {
        let v = self.str(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|p| p.trim().parse().map_err(|e| anyhow!("{key} = {v:?}: {e}")))
            .collect()
    }

    /// Every key with its effective value, defaults included, sorted.
    pub fn effective(&self) -> Vec<(&'static str, String)> {
        let mut out: Vec<_> = KNOWN_KEYS.iter().map(|(k, _)| (*k, self.str(k).to_string())).collect();
        out.sort();
        out
    }
}

/// A config bound to a command, with the seed resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub out: PathBuf,
    pub values: Config,
}

impl RunConfig {
    /// Resolves the seed and output directory. Flags win over the file; a
    /// missing seed is an error.
    pub fn new(command: Command, mut values: Config, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            values.set("seed", s.to_string())?;
        }
        if !values.is_set("seed") {
            bail!("no seed given: set `seed` in the config or pass --seed");
        }
        let seed = values.get("seed")?;
        let out = match out {
            Some(o) => o,
            None => PathBuf::from(values.str("out")),
        };
        values.set("out", out.display().to_string())?;
        Ok(Self {
            command,
            seed,
            out,
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_lists() {
        let c = Config::parse("# top\nseed = 3\nmodel.hidden = 8, 4 # trailing\n\nschedule.kind=cosine\n").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), 3);
        assert_eq!(c.list::<usize>("model.hidden").unwrap(), vec![8, 4]);
        assert_eq!(c.str("schedule.kind"), "cosine");
        assert_eq!(c.get::<f64>("schedule.lambda_max").unwrap(), 6.0);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(Config::parse("model.widht = 3").is_err());
        assert!(Config::parse("seed = 1\nseed = 2").is_err());
        assert!(Config::parse("seed 1").is_err());
        let c = Config::parse("train.steps = many").unwrap();
        assert!(c.get::<usize>("train.steps").is_err());
    }

    #[test]
    fn seed_is_mandatory_and_flags_win() {
        let c = Config::parse("out = a").unwrap();
        assert!(RunConfig::new(Command::Verify, c.clone(), None, None).is_err());
        let r = RunConfig::new(Command::Verify, c, Some(9), Some("b".into())).unwrap();
        assert_eq!((r.seed, r.out.to_str().unwrap()), (9, "b"));
        let r = RunConfig::new(Command::Train, Config::parse("seed = 4").unwrap(), None, None).unwrap();
        assert_eq!(r.seed, 4);
    }

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("fit".parse::<Command>().is_err());
    }
}
