//! Portable text checkpoints.
//!
//! ```text
//! locattn-checkpoint 1
//! config {"mechanism":"Dca",...}        model config as one JSON line
//! param encoder.embedding 2 11 32       name, rank, dims
//! 0.0123 -0.44 ...                      values, row-major, one line
//! param ...
//! ```
//!
//! Values are written with shortest round-trip formatting, so a save/load
//! cycle is bit-exact in both precisions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{stream, ModelConfig, Seq2Seq};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &str = "locattn-checkpoint 1";

pub fn write_checkpoint<T: Real>(model: &Seq2Seq<T>) -> Result<String> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    out.push_str("config ");
    out.push_str(&serde_json::to_string(&model.config)?);
    out.push('\n');
    for (name, t) in model.store.iter() {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "param {name} {} {}", t.shape().len(), dims.join(" "));
        let vals: Vec<String> = t.data().iter().map(|v| format!("{}", v.to_f64_lossy())).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn read_checkpoint<T: Real>(text: &str) -> Result<Seq2Seq<T>> {
    let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {line}: {msg}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
        _ => return Err(bad(1, "missing checkpoint header")),
    }
    let (n, cfg) = lines.next().ok_or_else(|| bad(2, "missing config line"))?;
    let json = cfg.strip_prefix("config ").ok_or_else(|| bad(n, "expected `config`"))?;
    let config: ModelConfig = serde_json::from_str(json).map_err(|e| bad(n, &e.to_string()))?;
    let mut model = Seq2Seq::<T>::new(config, &mut stream(0, 0))?;
    let mut seen = vec![false; model.store.len()];
    while let Some((n, header)) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let mut parts = header.split_whitespace();
        if parts.next() != Some("param") {
            return Err(bad(n, "expected `param`"));
        }
        let name = parts.next().ok_or_else(|| bad(n, "missing parameter name"))?;
        let rank: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(n, "missing rank"))?;
        let dims: Vec<usize> = parts
            .map(|s| s.parse().map_err(|_| bad(n, "bad dimension")))
            .collect::<Result<_>>()?;
        if dims.len() != rank {
            return Err(bad(n, "rank does not match dimension count"));
        }
        let id = model
            .store
            .find(name)
            .ok_or_else(|| bad(n, &format!("unknown parameter `{name}`")))?;
        let (vn, values) = lines.next().ok_or_else(|| bad(n + 1, "missing values"))?;
        let data: Vec<T> = values
            .split_whitespace()
            .map(|s| s.parse::<f64>().map(T::lit).map_err(|_| bad(vn, "bad value")))
            .collect::<Result<_>>()?;
        let t = Tensor::new(dims, data).map_err(|e| bad(vn, &e.to_string()))?;
        model.store.set(id, t).map_err(|e| bad(n, &e.to_string()))?;
        seen[id.index()] = true;
    }
    if let Some(missing) = model.store.ids().find(|id| !seen[id.index()]) {
        return Err(Error::Checkpoint(format!(
            "parameter `{}` not present",
            model.store.name(missing)
        )));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &Seq2Seq<T>, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Seq2Seq<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mechanism;

    #[test]
    fn roundtrip_is_exact() {
        for mech in [Mechanism::Lsa, Mechanism::Gmm(crate::gmm::GmmVariant::V2B)] {
            let m = Seq2Seq::<f32>::new(ModelConfig::tiny(mech, 4), &mut stream(3, 0)).unwrap();
            let text = write_checkpoint(&m).unwrap();
            let back: Seq2Seq<f32> = read_checkpoint(&text).unwrap();
            assert_eq!(back.config, m.config);
            assert_eq!(back.store.tensors(), m.store.tensors());
        }
    }

    #[test]
    fn rejects_damaged_files() {
        let m = Seq2Seq::<f64>::new(ModelConfig::tiny(Mechanism::Cba, 4), &mut stream(3, 0)).unwrap();
        let text = write_checkpoint(&m).unwrap();
        assert!(read_checkpoint::<f64>("nonsense").is_err());
        let truncated: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(matches!(read_checkpoint::<f64>(&truncated), Err(Error::Checkpoint(_))));
        let renamed = text.replacen("param encoder.embedding", "param encoder.nope", 1);
        assert!(read_checkpoint::<f64>(&renamed).is_err());
    }
}
