//! TOML config files expanded into command-line tokens.
//!
//! Top-level keys become global flags; a table named after the subcommand
//! supplies that subcommand's flags. Nested tables join their keys with `-`,
//! so `[pretrain.mask] p_start = 0.2` becomes `--mask-p-start 0.2`. The
//! expanded tokens are placed before the user's own arguments, which
//! therefore win.

use std::path::Path;

use anyhow::{bail, Context, Result};
use toml::{Table, Value};

const GLOBAL_VALUED: [&str; 3] = ["--config", "--seed", "--threads"];

/// Value of `--config` and the position of the subcommand token, if any.
pub fn scan(args: &[String]) -> (Option<String>, Option<usize>) {
    let mut config = None;
    let mut i = 1;
    while i < args.len() {
        let t = &args[i];
        if let Some(v) = t.strip_prefix("--config=") {
            config = Some(v.to_string());
            i += 1;
        } else if GLOBAL_VALUED.contains(&t.as_str()) {
            if t == "--config" {
                config = args.get(i + 1).cloned();
            }
            i += 2;
        } else if t.starts_with('-') {
            i += 1;
        } else {
            return (config, Some(i));
        }
    }
    (config, None)
}

fn flag(path: &[&str]) -> String {
    format!("--{}", path.join("-").replace('_', "-"))
}

fn scalar(v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        other => bail!("unsupported config value {other}"),
    })
}

fn push_table(prefix: &mut Vec<String>, t: &Table, out: &mut Vec<String>, skip_tables: bool) -> Result<()> {
    for (k, v) in t {
        prefix.push(k.clone());
        let keys: Vec<&str> = prefix.iter().map(String::as_str).collect();
        match v {
            Value::Table(sub) => {
                if !skip_tables {
                    push_table(prefix, sub, out, false)?;
                }
            }
            Value::Boolean(true) => out.push(flag(&keys)),
            Value::Boolean(false) => {}
            Value::Array(items) => {
                out.push(flag(&keys));
                for it in items {
                    out.push(scalar(it)?);
                }
            }
            v => {
                out.push(flag(&keys));
                out.push(scalar(v)?);
            }
        }
        prefix.pop();
    }
    Ok(())
}

/// Tokens for the global section and for `subcommand`'s table.
pub fn expand(table: &Table, subcommand: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    push_table(&mut Vec::new(), table, &mut out, true)?;
    out.retain(|t| t != "--config");
    if let Some(v) = table.get(subcommand) {
        let sub = v.as_table().with_context(|| format!("config key '{subcommand}' must be a table"))?;
        push_table(&mut Vec::new(), sub, &mut out, false)?;
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    text.parse::<Table>().with_context(|| format!("parsing config {}", path.display()))
}

/// Splice config-derived tokens directly after the subcommand token.
pub fn merge_args(args: Vec<String>) -> Result<Vec<String>> {
    let (config, sub) = scan(&args);
    let (Some(path), Some(sub)) = (config, sub) else { return Ok(args) };
    let table = load(Path::new(&path))?;
    let extra = expand(&table, &args[sub])?;
    let mut out = args[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}
