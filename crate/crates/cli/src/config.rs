//! Flat `key=value` run configs.
//!
//! Entries of `--config FILE` are spliced in as `--key value` right after the
//! subcommand name, so anything given on the command line wins.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, Command};

pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value", i + 1);
        };
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Result<Option<PathBuf>> {
    let mut it = args.iter().skip(2);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            let p = it.next().context("--config needs a file")?;
            return Ok(Some(PathBuf::from(p)));
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Ok(Some(PathBuf::from(p)));
        }
    }
    Ok(None)
}

/// Returns `args` with the config file's entries spliced in.
pub fn expand_args(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args)? else {
        return Ok(args);
    };
    let sub_name = args[1].to_string_lossy().into_owned();
    let sub = cmd
        .find_subcommand(&sub_name)
        .with_context(|| format!("unknown subcommand {sub_name:?}"))?;
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in parse_config_text(&text)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .with_context(|| format!("unknown config key {key:?} for {sub_name}"))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}").into());
            injected.push(value.into());
        } else if value == "true" {
            injected.push(format!("--{key}").into());
        } else if value != "false" {
            bail!("config key {key:?} expects true or false");
        }
    }
    let mut out = args;
    out.splice(2..2, injected);
    Ok(out)
}

/// Every option of the subcommand with its resolved value, as `key=value` lines.
pub fn resolved_config(sub: &Command, matches: &ArgMatches) -> String {
    let mut out = String::new();
    for arg in sub.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        if matches!(long, "config" | "help") {
            continue;
        }
        let Ok(Some(raw)) = matches.try_get_raw(arg.get_id().as_str()) else {
            continue;
        };
        let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
        out.push_str(&format!("{long}={}\n", values.join(",")));
    }
    out
}

/// `<path>.<suffix>`, keeping the original extension in the name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_entries() {
        let e = parse_config_text("# run\nwin_size = 5\n\nseed=3\n").unwrap();
        assert_eq!(e, vec![("win-size".into(), "5".into()), ("seed".into(), "3".into())]);
        assert!(parse_config_text("novalue").is_err());
    }

    #[test]
    fn sibling_appends() {
        assert_eq!(sibling(Path::new("out/a.wem"), "report.txt"), PathBuf::from("out/a.wem.report.txt"));
    }
}
