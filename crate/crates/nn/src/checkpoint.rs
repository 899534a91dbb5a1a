use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor2;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor2,
    pub m: Tensor2,
    pub v: Tensor2,
}

/// JSON checkpoint: named tensors with Adam state and the hash of the config that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
    /// Model-specific metadata (architecture, scalers).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn capture(store: &ParamStore, config_hash: &str, meta: serde_json::Value) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            step: store.step(),
            tensors: store
                .params()
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    m: p.m.clone(),
                    v: p.v.clone(),
                })
                .collect(),
            meta,
        }
    }

    pub fn restore(&self) -> Result<ParamStore> {
        if self.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let mut store = ParamStore::new();
        for t in &self.tensors {
            if t.m.shape() != t.value.shape() || t.v.shape() != t.value.shape() {
                return Err(NnError::Checkpoint(format!("moment shape mismatch for {}", t.name)));
            }
            let id = store.add(t.name.clone(), t.value.clone());
            let p = &mut store.params_mut()[id.0];
            p.m = t.m.clone();
            p.v = t.v.clone();
        }
        store.set_step(self.step);
        Ok(store)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_state() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor2::from_vec(1, 2, vec![0.25, -1.0 / 3.0]).unwrap());
        store.grad_mut(id).set(0, 0, 1.0);
        store.adam_step(&Default::default()).unwrap();
        let ck = Checkpoint::capture(&store, "abc", serde_json::json!({"kind": "test"}));
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore().unwrap();
        assert_eq!(restored.step(), 1);
        assert_eq!(restored.value(id), store.value(id));
        assert_eq!(restored.params()[0].m, store.params()[0].m);
    }
}
