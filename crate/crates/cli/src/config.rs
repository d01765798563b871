//! `key = value` config files, spliced into the argument list as flags.
//!
//! Blank lines and lines starting with `#` are ignored. A line `key = value`
//! becomes `--key=value`; `key = true` becomes `--key` and `key = false` is
//! dropped. The flags are inserted right after the subcommand name, so any
//! flag given on the command line comes later and wins.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context};

pub const SUBCOMMANDS: [&str; 6] = ["synth", "train", "eval", "map", "ablation", "gradcheck"];

pub fn parse_config(text: &str, path: &Path) -> anyhow::Result<Vec<String>> {
    let mut flags = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected 'key = value', got '{line}'", path.display(), i + 1);
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.starts_with('-') || key.contains(char::is_whitespace) {
            bail!("{}:{}: bad key '{key}'", path.display(), i + 1);
        }
        if key == "config" {
            bail!("{}:{}: config files cannot include other config files", path.display(), i + 1);
        }
        match value {
            "true" => flags.push(format!("--{key}")),
            "false" => {}
            v => flags.push(format!("--{key}={v}")),
        }
    }
    Ok(flags)
}

/// Removes `--config FILE` (or `--config=FILE`) and splices the file's flags
/// in after the subcommand.
pub fn expand_config(args: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let text = arg.to_string_lossy();
        if text == "--config" {
            let path = iter.next().context("--config needs a file path")?;
            config = Some(path);
        } else if let Some(path) = text.strip_prefix("--config=") {
            config = Some(OsString::from(path));
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let flags = parse_config(&text, path)?;
    let at = rest
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
        .map_or(rest.len(), |i| i + 1);
    rest.splice(at..at, flags.into_iter().map(OsString::from));
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn lines_become_flags() {
        let text = "# comment\n\nepochs = 5\nlr=0.01\nall = true\nquiet = false\n";
        let flags = parse_config(text, Path::new("c")).unwrap();
        assert_eq!(flags, vec!["--epochs=5", "--lr=0.01", "--all"]);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(parse_config("epochs 5", Path::new("c")).is_err());
        assert!(parse_config("--epochs = 5", Path::new("c")).is_err());
        assert!(parse_config("config = other", Path::new("c")).is_err());
    }

    #[test]
    fn file_flags_precede_command_line_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "epochs = 5\n").unwrap();
        let args = os(&["ssatt", "--config", path.to_str().unwrap(), "train", "--epochs", "7"]);
        let out = expand_config(args).unwrap();
        assert_eq!(out, os(&["ssatt", "train", "--epochs=5", "--epochs", "7"]));
    }
}
