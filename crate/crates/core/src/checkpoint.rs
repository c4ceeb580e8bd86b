//! Checkpoint directories shared by both models: `manifest.json` plus one
//! tensor file per parameter (and per optimizer moment) in the numcore
//! serialization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numcore::serialize::{self, ShapeManifest};
use crate::numcore::{ParamKind, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    /// `"adam"` or `"rmsprop"`.
    pub kind: String,
    pub step: u64,
    /// Moment tensors keyed `<moment>/<param name>`.
    pub tensors: ShapeManifest,
}

/// Early-stopping bookkeeping carried across resumes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingProgress {
    pub epochs_done: usize,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
    pub stopped_early: bool,
    /// Extra model-specific counters (e.g. the baseline's warm-up phase).
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_type: String,
    pub version: String,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub num_times: usize,
    pub epoch: usize,
    pub hyperparams: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    pub progress: TrainingProgress,
    pub params: BTreeMap<String, ParamEntry>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Everything a checkpoint holds in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
    pub optimizer_tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pdir = dir.join("params");
        for (name, p) in self.params.iter() {
            serialize::write_tensor(&serialize::tensor_path(&pdir, name), &p.tensor)?;
        }
        let odir = dir.join("optimizer");
        serialize::save_tensors(&odir, &self.optimizer_tensors)?;
        let mut s = serde_json::to_string_pretty(&self.manifest)?;
        s.push('\n');
        let p = dir.join("manifest.json");
        fs::write(&p, s).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        let pdir = dir.join("params");
        let mut params = ParamStore::new();
        for (name, entry) in &manifest.params {
            let t = serialize::read_tensor(&serialize::tensor_path(&pdir, name), &entry.shape)?;
            params.insert(name.clone(), t, entry.kind);
        }
        let optimizer_tensors = match &manifest.optimizer {
            Some(o) => serialize::load_tensors(&dir.join("optimizer"), &o.tensors)?,
            None => BTreeMap::new(),
        };
        Ok(Checkpoint {
            manifest,
            params,
            optimizer_tensors,
        })
    }
}

pub fn param_entries(params: &ParamStore) -> BTreeMap<String, ParamEntry> {
    params
        .iter()
        .map(|(n, p)| {
            (
                n.clone(),
                ParamEntry {
                    shape: p.tensor.shape().to_vec(),
                    kind: p.kind,
                },
            )
        })
        .collect()
}

/// Flattens optimizer moments into `<moment>/<param>` keyed tensors.
pub fn flatten_moments<'a>(
    moments: impl IntoIterator<Item = (&'a str, &'a BTreeMap<String, Tensor>)>,
) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (moment, map) in moments {
        for (name, t) in map {
            out.insert(format!("{moment}/{name}"), t.clone());
        }
    }
    out
}

/// Inverse of [`flatten_moments`] for one moment.
pub fn moment(tensors: &BTreeMap<String, Tensor>, which: &str) -> BTreeMap<String, Tensor> {
    let prefix = format!("{which}/");
    tensors
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|n| (n.to_string(), t.clone())))
        .collect()
}
