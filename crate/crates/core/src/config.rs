//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid by
//! command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::Stoplist;
use crate::model::ModelConfig;
use crate::pipeline::{InjectionOptions, PositionMode};
use crate::train::TrainConfig;

pub const DEFAULT_K: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Entities injected per eligible token.
    pub k: usize,
    pub mask_off: bool,
    pub absolute_pos: bool,
    /// Replaces the built-in function-word stoplist.
    pub stoplist: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            k: DEFAULT_K,
            mask_off: false,
            absolute_pos: false,
            stoplist: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn injection(&self) -> InjectionOptions {
        InjectionOptions {
            k: self.k,
            positions: if self.absolute_pos { PositionMode::Absolute } else { PositionMode::Relative },
            mask_off: self.mask_off,
        }
    }

    pub fn read_stoplist(&self) -> Result<Stoplist> {
        match &self.stoplist {
            None => Ok(Stoplist::default()),
            Some(p) => {
                let f = std::fs::File::open(p).map_err(|e| Error::file(p, e))?;
                Stoplist::read(std::io::BufReader::new(f))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!(c.k, 2);
        assert_eq!((c.train.lr, c.train.momentum, c.train.weight_decay), (5e-3, 0.9, 1e-4));
        assert_eq!((c.model.d, c.model.heads, c.model.layers, c.model.d_ff, c.model.max_seq), (64, 4, 2, 128, 128));
        assert_eq!((c.train.batch_size, c.train.epochs), (8, 20));
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c: Config = serde_json::from_str(r#"{"k": 1, "model": {"d": 32}}"#).unwrap();
        assert_eq!(c.k, 1);
        assert_eq!(c.model.d, 32);
        assert_eq!(c.model.heads, 4);
        assert_eq!(c.train.lr, 5e-3);
        assert!(serde_json::from_str::<Config>(r#"{"kk": 1}"#).is_err());
    }
}
