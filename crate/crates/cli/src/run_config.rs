//! Flat `key = value` run configuration: `net.*`, `neuron.*`, `train.*`,
//! `data.*` and `run.*` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use mlf_snn::config::KeyValues;
use mlf_snn::network::NetworkSpec;
use mlf_snn::training::TrainConfig;
use mlf_snn::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetworkSpec,
    pub train: TrainConfig,
    /// Dataset root; relative paths resolve against the config file.
    pub data_root: PathBuf,
    pub train_split: String,
    pub test_split: Option<String>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let net = NetworkSpec::from_key_values(&mut kv)?;
        let train = TrainConfig::from_key_values(&mut kv)?;
        let root: String = kv.require("data.root")?;
        let train_split = kv.take_or("data.train_split", "train".to_string())?;
        let test_split = kv.take_str("data.test_split");
        let out_dir = kv.take_str("run.out").map(|p| base.join(p));
        kv.finish()?;
        Ok(Self {
            net,
            train,
            data_root: base.join(root),
            train_split,
            test_split,
            out_dir,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn render(&self) -> String {
        let mut out = self.net.to_key_values().render();
        out += &self.train.to_key_values().render();
        out += &format!("data.root = {}\n", self.data_root.display());
        out += &format!("data.train_split = {}\n", self.train_split);
        if let Some(t) = &self.test_split {
            out += &format!("data.test_split = {t}\n");
        }
        if let Some(o) = &self.out_dir {
            out += &format!("run.out = {}\n", o.display());
        }
        out
    }
}
