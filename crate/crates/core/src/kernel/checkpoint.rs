//! Plain-text parameter checkpoints.
//!
//! Layout (UTF-8, `\n` line endings):
//!
//! ```text
//! ideal-checkpoint v1
//! count <number of parameters>
//! param <name> <rank> <dim_1> ... <dim_rank>
//! <values, space separated, shortest round-trip exponent form>
//! ... one `param` header and one value line per parameter
//! ```
//!
//! Parameters appear in registration order. Values are written with Rust's
//! shortest round-trip formatting, so a save/load cycle reproduces every
//! bit, and identical stores always serialize to identical bytes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "ideal-checkpoint v1";

pub fn write_checkpoint(store: &ParamStore, mut out: impl Write) -> Result<()> {
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    writeln!(out, "count {}", store.len())?;
    for (name, value) in store.entries() {
        if name.chars().any(char::is_whitespace) || name.is_empty() {
            return Err(Error::Checkpoint(format!("invalid parameter name `{name}`")));
        }
        write!(out, "param {name} {}", value.shape().len())?;
        for d in value.shape() {
            write!(out, " {d}")?;
        }
        writeln!(out)?;
        let mut first = true;
        for v in value.data() {
            if !first {
                out.write_all(b" ")?;
            }
            first = false;
            write!(out, "{v:e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_checkpoint(input: impl BufRead) -> Result<ParamStore> {
    let mut lines = input.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file, expected {what}")))
    };
    let header = next("header")?;
    if header != CHECKPOINT_HEADER {
        return Err(Error::Checkpoint(format!("unsupported header `{header}`")));
    }
    let count_line = next("count")?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad count line `{count_line}`")))?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let head = next("param header")?;
        let fields: Vec<&str> = head.split(' ').collect();
        if fields.len() < 3 || fields[0] != "param" {
            return Err(Error::Checkpoint(format!("bad param header `{head}`")));
        }
        let rank: usize = fields[2]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rank in `{head}`")))?;
        if fields.len() != 3 + rank {
            return Err(Error::Checkpoint(format!("rank/dims mismatch in `{head}`")));
        }
        let shape = fields[3..]
            .iter()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad dims in `{head}`")))?;
        let body = next("values")?;
        let values = if body.is_empty() {
            Vec::new()
        } else {
            body.split(' ')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Checkpoint(format!("bad value for `{}`", fields[1])))?
        };
        let tensor = Tensor::new(shape, values)
            .map_err(|e| Error::Checkpoint(format!("`{}`: {e}", fields[1])))?;
        store.add(fields[1], tensor)?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let file = fs::File::open(path)?;
    read_checkpoint(BufReader::new(file))
}

/// Copies values from `loaded` into `target`, which must have the same
/// parameter names and shapes in the same order.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, checkpoint has {}",
            target.len(),
            loaded.len()
        )));
    }
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        if target.name(id) != loaded.name(id) {
            return Err(Error::Checkpoint(format!(
                "parameter {} is `{}` in the model but `{}` in the checkpoint",
                id.index(),
                target.name(id),
                loaded.name(id)
            )));
        }
        target
            .set(id, loaded.value(id).clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        store.add("w", rng.normal_tensor(&[3, 4], 0.7)).unwrap();
        store.add("b", Tensor::row(vec![1e-300, -0.1, 1.0 / 3.0])).unwrap();
        store.add("s", Tensor::new(vec![2], vec![0.0, -0.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        let loaded = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(store.checksum(), loaded.checksum());
        let mut again = Vec::new();
        write_checkpoint(&loaded, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_wrong_header() {
        let err = read_checkpoint("something else\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("header"));
    }

    #[test]
    fn restore_checks_layout() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2])).unwrap();
        let mut b = ParamStore::new();
        b.add("v", Tensor::zeros(&[2])).unwrap();
        assert!(restore_into(&mut a, &b).is_err());
    }
}
