use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Reads one JSON record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("cannot read {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}: invalid record", path.display(), i + 1))?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write to {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn jsonl_bytes<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    Ok(buf)
}

/// Ensures no output path coincides with an input path.
pub fn check_distinct(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    for o in outputs {
        if inputs.iter().any(|i| i == o) {
            bail!("output {} would overwrite an input", o.display());
        }
    }
    Ok(())
}

/// Keyed lookup with duplicate detection.
pub fn index_by_id<T, F>(records: Vec<T>, what: &str, id: F) -> Result<HashMap<String, T>>
where
    F: Fn(&T) -> &str,
{
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        let key = id(&r).to_string();
        if map.contains_key(&key) {
            bail!("duplicate id {key:?} in {what}");
        }
        map.insert(key, r);
    }
    Ok(map)
}

/// Logs how many records of each side were dropped by an inner join.
pub fn report_join(left: &str, left_ids: &[&str], right: &str, right_ids: &HashSet<&str>) {
    let kept = left_ids.iter().filter(|id| right_ids.contains(*id)).count();
    let dropped_left = left_ids.len() - kept;
    let dropped_right = right_ids.len().saturating_sub(kept);
    if dropped_left > 0 || dropped_right > 0 {
        log::warn!(
            "join {left} x {right}: kept {kept}, dropped {dropped_left} from {left} and {dropped_right} from {right}"
        );
    } else {
        log::info!("join {left} x {right}: kept {kept}");
    }
}

/// Splits ids into (train, valid) by ranking their SHA-256 digests; the
/// last `valid_frac` share of the ranking becomes validation.
pub fn hash_split(ids: &[&str], valid_frac: f64) -> (Vec<usize>, Vec<usize>) {
    let mut ranked: Vec<(Vec<u8>, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (Sha256::digest(id.as_bytes()).to_vec(), i))
        .collect();
    ranked.sort();
    let n_valid = ((ids.len() as f64) * valid_frac).round() as usize;
    let cut = ids.len() - n_valid.min(ids.len());
    let mut train: Vec<usize> = ranked[..cut].iter().map(|r| r.1).collect();
    let mut valid: Vec<usize> = ranked[cut..].iter().map(|r| r.1).collect();
    train.sort_unstable();
    valid.sort_unstable();
    (train, valid)
}
