use std::ffi::OsString;
use std::path::Path;

use serde_json::Value;

use crate::failure::{io, Failure, Result};

/// Expands `--config FILE` into flags. The file is a JSON object keyed by
/// flag name (`-` or `_`); a flag already on the command line wins, so the
/// file only fills in what was not given. Arrays become comma lists.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = Some(it.next().ok_or_else(|| Failure::new("config", "--config needs a file"))?);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(OsString::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    let bad = |m: String| Failure::new("config", format!("{}: {m}", path.display()));
    let Value::Object(file) = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))? else {
        return Err(bad("expected a JSON object".into()));
    };
    let given = |flag: &str| {
        rest.iter().any(|a| {
            let a = a.to_string_lossy();
            a == flag || a.starts_with(&format!("{flag}="))
        })
    };
    let mut extra = Vec::new();
    for (key, value) in file {
        let flag = format!("--{}", key.replace('_', "-"));
        if given(&flag) {
            continue;
        }
        let text = match value {
            Value::Null => continue,
            Value::String(s) => s,
            Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            Value::Object(_) => return Err(bad(format!("{key}: nested objects are not flags"))),
            other => other.to_string(),
        };
        extra.push(OsString::from(flag));
        extra.push(OsString::from(text));
    }
    rest.extend(extra);
    Ok(rest)
}
