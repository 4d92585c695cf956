//! Optimizer state on disk: `optimizer.json` plus one OLTENS1 file per
//! stored tensor, named `{path}.{field}.oltens`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Optimizer, OptimizerConfig, ParamState};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::scalar::Scalar;

pub const STATE_MANIFEST: &str = "optimizer.json";

#[derive(Serialize, Deserialize)]
struct Entry {
    path: String,
    step: u64,
    fields: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: OptimizerConfig,
    step: u64,
    params: Vec<Entry>,
}

pub fn save_state<T: Scalar>(dir: &Path, opt: &Optimizer<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (path, st) in &opt.states {
        let mut fields = Vec::new();
        for (name, t) in st.fields() {
            if let Some(t) = t {
                write_tensor(&dir.join(format!("{path}.{name}.oltens")), t)?;
                fields.push(name.to_string());
            }
        }
        params.push(Entry {
            path: path.clone(),
            step: st.step,
            fields,
        });
    }
    let m = Manifest {
        config: opt.config.clone(),
        step: opt.step,
        params,
    };
    let p = dir.join(STATE_MANIFEST);
    std::fs::write(&p, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(p, e))
}

pub fn load_state<T: Scalar>(dir: &Path) -> Result<Optimizer<T>> {
    let p = dir.join(STATE_MANIFEST);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let mut states = BTreeMap::new();
    for e in m.params {
        let mut st = ParamState::<T> {
            step: e.step,
            ..Default::default()
        };
        for f in &e.fields {
            let slot = st
                .field_mut(f)
                .ok_or_else(|| Error::Parse(format!("unknown optimizer state field `{f}`")))?;
            *slot = Some(read_tensor(&dir.join(format!("{}.{f}.oltens", e.path)))?);
        }
        states.insert(e.path, st);
    }
    Ok(Optimizer {
        config: m.config,
        step: m.step,
        states,
    })
}
