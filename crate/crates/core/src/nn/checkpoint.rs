//! Versioned JSON checkpoint container.
//!
//! ```text
//! {
//!   "format": "qstitch-checkpoint",
//!   "version": 1,
//!   "kind": "cvae" | "policy" | ...,
//!   "config": { ... model/training config that produced the parameters ... },
//!   "params": { "names": [..], "tensors": [{ "shape": [..], "data": [..] }, ..] },
//!   "optimizer": null | { "kind", "lr", "weight_decay", "beta1", "beta2", "eps",
//!                         "step", "first_moment", "second_moment" },
//!   "extra": { ... e.g. loss traces ... }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::tensor::{numel, ParamStore};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "qstitch-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(
        kind: impl Into<String>,
        config: serde_json::Value,
        params: ParamStore,
        optimizer: Option<OptimizerState>,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            config,
            params,
            optimizer,
            extra: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::Format {
            path: origin.to_string(),
            detail: e.to_string(),
        })?;
        ck.validate(origin)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    fn validate(&self, origin: &str) -> Result<()> {
        let bad = |detail: String| Error::Format {
            path: origin.to_string(),
            detail,
        };
        if self.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unknown format tag {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        for (name, t) in self.params.iter() {
            if numel(t.shape()) != t.len() {
                return Err(bad(format!("tensor {name} has inconsistent shape")));
            }
        }
        if let Some(opt) = &self.optimizer {
            let ok = opt.first_moment.len() == self.params.len() && opt.second_moment.len() == self.params.len();
            if !ok {
                return Err(bad("optimizer state does not match parameters".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mlp, Optimizer};
    use crate::rng::SeedStream;

    #[test]
    fn round_trip_is_lossless() {
        let mut store = ParamStore::new();
        let mut rng = SeedStream::new(9).rng();
        let _ = Mlp::new(&mut store, "m", &[3, 7, 2], &mut rng);
        let opt = Optimizer::adamw(1e-3, 1e-4, &store).unwrap();
        let ck = Checkpoint::new(
            "test",
            serde_json::json!({"hidden": 7}),
            store.clone(),
            Some(opt.into_state()),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.params.bitwise_eq(&store));
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_foreign_or_broken_files() {
        assert!(Checkpoint::from_bytes(b"{}", "x").is_err());
        let mut ck = Checkpoint::new("t", serde_json::Value::Null, ParamStore::new(), None);
        ck.version = 99;
        let bytes = serde_json::to_vec(&ck).unwrap();
        assert!(Checkpoint::from_bytes(&bytes, "x").is_err());
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/ck.json")),
            Err(Error::MissingFile(_))
        ));
    }
}
