use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{write_atomic, write_json};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-epoch loss and accuracy for every split that was evaluated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub records: Vec<EpochRecord>,
}

impl Curves {
    pub fn push(&mut self, epoch: usize, split: &str, loss: f64, accuracy: f64) {
        self.records.push(EpochRecord {
            epoch,
            split: split.to_string(),
            loss,
            accuracy,
        });
    }

    pub fn split(&self, split: &str) -> impl Iterator<Item = &EpochRecord> {
        let split = split.to_string();
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        Ok(Self { records })
    }
}

/// Hyperparameters, seeds and input hashes of one command invocation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config,
            ..Default::default()
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut c = Curves::default();
        c.push(0, "train", 2.3, 0.1);
        c.push(0, "val", 2.1, 0.125);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curves.csv");
        c.write_csv(&p).unwrap();
        assert!(c.to_csv().unwrap().starts_with("epoch,split,loss,accuracy\n"));
        assert_eq!(Curves::read_csv(&p).unwrap(), c);
        assert_eq!(c.split("val").count(), 1);
    }
}
