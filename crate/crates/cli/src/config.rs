//! `key = value` run files spliced into the argument list.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use eit_core::EitError;

/// Keys accepted at the top level rather than by a subcommand.
const GLOBAL_KEYS: [&str; 2] = ["seed", "out-dir"];
/// Global options that take a value on the command line.
const GLOBAL_VALUED: [&str; 3] = ["--seed", "--config", "--out-dir"];

/// Parse a config file into `(flag, value)` pairs. Blank lines and lines
/// starting with `#` are ignored; underscores in keys read as dashes.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, EitError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(EitError::InvalidArgument(format!("config line {}: expected key=value", n + 1)));
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(EitError::InvalidArgument(format!("config line {}: bad key `{}`", n + 1, k.trim())));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<(String, String)>, EitError> {
    parse(&fs::read_to_string(path)?)
}

/// Index of the subcommand token in `args` (which includes the binary name).
fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if GLOBAL_VALUED.contains(&a.as_ref()) {
            i += 2;
        } else if a.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

/// Insert config entries ahead of the user's own arguments so that the
/// command line wins.
pub fn splice(args: &[OsString], entries: &[(String, String)]) -> Vec<OsString> {
    let (global, local): (Vec<_>, Vec<_>) = entries.iter().partition(|(k, _)| GLOBAL_KEYS.contains(&k.as_str()));
    let flags = |v: Vec<&(String, String)>| -> Vec<OsString> {
        v.into_iter()
            .flat_map(|(k, val)| [OsString::from(format!("--{k}")), OsString::from(val)])
            .collect()
    };
    let mut out = vec![args[0].clone()];
    out.extend(flags(global));
    match subcommand_index(args) {
        Some(i) => {
            out.extend_from_slice(&args[1..=i]);
            out.extend(flags(local));
            out.extend_from_slice(&args[i + 1..]);
        }
        None => out.extend_from_slice(&args[1..]),
    }
    out
}
