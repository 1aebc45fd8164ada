//! `--config` files and the `resolved_config` dump.
//!
//! A config file holds `key = value` lines (`#` starts a comment). Keys are long flag
//! names with `-` or `_`; booleans take `true`/`false`; lists are comma separated.
//! Values are spliced into the argument list ahead of the command line, so explicit
//! flags win, then the file, then `SPCL_SEED`, then built-in defaults.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::Path;

use clap::CommandFactory;
use serde::Serialize;

use crate::args::Cli;
use crate::CliError;

struct FlagInfo {
    long: String,
    takes_value: bool,
}

struct Positional {
    id: String,
}

fn subcommand_shape(name: &str) -> Option<(Vec<FlagInfo>, Vec<Positional>)> {
    let cmd = Cli::command();
    let sub = cmd.find_subcommand(name)?;
    let mut flags = Vec::new();
    let mut positionals = Vec::new();
    for arg in sub.get_arguments() {
        if let Some(long) = arg.get_long() {
            flags.push(FlagInfo {
                long: long.to_string(),
                takes_value: arg.get_action().takes_values(),
            });
        } else if arg.is_positional() {
            positionals.push(Positional {
                id: arg.get_id().to_string(),
            });
        }
    }
    Some((flags, positionals))
}

/// Parses a config file into `(key, value)` pairs with keys normalized to kebab case.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got `{raw}`", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(CliError::Usage(format!("config line {}: duplicate key `{key}`", i + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Rewrites `argv` so that values from `--config FILE` appear as flags.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let strs: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let Some(sub_pos) = strs.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(argv);
    };
    let Some((flags, positionals)) = subcommand_shape(&strs[sub_pos]) else {
        return Ok(argv);
    };
    let tail = &strs[sub_pos + 1..];

    // flags and positional count already given on the command line
    let mut given = Vec::new();
    let mut n_positional = 0;
    let mut config_path = None;
    let mut i = 0;
    while i < tail.len() {
        let tok = &tail[i];
        if let Some(body) = tok.strip_prefix("--") {
            let (name, inline) = match body.split_once('=') {
                Some((n, v)) => (n, Some(v.to_string())),
                None => (body, None),
            };
            let takes_value = flags.iter().any(|f| f.long == name && f.takes_value);
            let value = if takes_value && inline.is_none() {
                i += 1;
                tail.get(i).cloned()
            } else {
                inline
            };
            if name == "config" {
                config_path = value;
            }
            given.push(name.to_string());
        } else if !tok.starts_with('-') || tok == "-" {
            n_positional += 1;
        }
        i += 1;
    }
    let Some(path) = config_path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("cannot read config `{path}`: {e}")))?;

    let mut injected: Vec<String> = Vec::new();
    let mut injected_positional: Vec<String> = Vec::new();
    for (key, value) in parse_config(&text)? {
        if key == "config" || key == "help" || key == "version" {
            return Err(CliError::Usage(format!("config key `{key}` is not allowed")));
        }
        if let Some(flag) = flags.iter().find(|f| f.long == key) {
            if given.contains(&key) {
                continue;
            }
            if flag.takes_value {
                injected.push(format!("--{key}={value}"));
            } else {
                match value.as_str() {
                    "true" => injected.push(format!("--{key}")),
                    "false" => {}
                    _ => return Err(CliError::Usage(format!("config key `{key}` expects true or false, got `{value}`"))),
                }
            }
        } else if positionals.iter().any(|p| p.id.replace('_', "-") == key) {
            if n_positional == 0 {
                injected_positional.push(value);
            }
        } else {
            return Err(CliError::Usage(format!("unknown config key `{key}` for `{}`", strs[sub_pos])));
        }
    }

    let mut out: Vec<OsString> = argv[..=sub_pos].to_vec();
    out.extend(injected_positional.into_iter().map(OsString::from));
    out.extend(injected.into_iter().map(OsString::from));
    out.extend(argv[sub_pos + 1..].iter().cloned());
    Ok(out)
}

/// Renders the effective arguments as a config file that reproduces the run.
pub fn render_resolved<A: Serialize>(command: &str, args: &A) -> Result<String, CliError> {
    let value = serde_json::to_value(args).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut flat = Vec::new();
    flatten(&value, &mut flat);
    flat.sort();
    let mut out = format!("# spcl {command}\n");
    for (k, v) in flat {
        let _ = writeln!(out, "{k} = {v}");
    }
    Ok(out)
}

fn flatten(value: &serde_json::Value, out: &mut Vec<(String, String)>) {
    use serde_json::Value;
    if let Value::Object(map) = value {
        for (k, v) in map {
            let key = k.replace('_', "-");
            match v {
                Value::Null => {}
                Value::Object(_) => flatten(v, out),
                Value::Array(items) => {
                    let parts: Vec<String> = items.iter().map(scalar).collect();
                    out.push((key, parts.join(",")));
                }
                _ => out.push((key, scalar(v))),
            }
        }
    }
}

fn scalar(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn write_resolved<A: Serialize>(dir: &Path, command: &str, args: &A) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved_config"), render_resolved(command, args)?)?;
    Ok(())
}

