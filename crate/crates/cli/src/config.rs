//! `key = value` config files, expanded into flags ahead of the user's own so
//! that command-line flags override them.

use clap::{ArgAction, Command};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str, label: &str) -> Result<Vec<Entry>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{label}:{}: expected `key = value`", i + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::Usage(format!("{label}:{}: empty key", i + 1)));
        }
        out.push(Entry { line: i + 1, key, value: value.trim().to_string() });
    }
    Ok(out)
}

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Returns `argv` with config-derived flags inserted right after the subcommand name.
pub fn expand(argv: Vec<String>, cmd: &Command) -> Result<Vec<String>, CliError> {
    let Some(path) = config_path(&argv) else { return Ok(argv) };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
    let entries = parse(&text, &path)?;
    let Some(pos) = argv.iter().skip(1).position(|a| cmd.find_subcommand(a).is_some()).map(|p| p + 1) else {
        return Ok(argv);
    };
    let sub = cmd.find_subcommand(&argv[pos]).expect("found above");
    let mut injected = Vec::new();
    for e in entries {
        if e.key == "config" {
            return Err(CliError::Usage(format!("{path}:{}: config files cannot nest", e.line)));
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(e.key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("{path}:{}: unknown key `{}` for `{}`", e.line, e.key, argv[pos])))?;
        let flag = format!("--{}", e.key);
        match arg.get_action() {
            ArgAction::SetTrue => match e.value.as_str() {
                "true" => injected.push(flag),
                "false" => {}
                v => return Err(CliError::Usage(format!("{path}:{}: `{}` expects true or false, got `{v}`", e.line, e.key))),
            },
            _ => {
                injected.push(flag);
                injected.push(e.value);
            }
        }
    }
    let mut out = argv;
    out.splice(pos + 1..pos + 1, injected);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn argv(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_comments_and_blanks() {
        let e = parse("# header\nkind = cosine  # trailing\n\nbeta_start=1e-4\n", "cfg").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0], Entry { line: 2, key: "kind".into(), value: "cosine".into() });
        assert_eq!(e[1].key, "beta-start");
        assert!(parse("kind cosine\n", "cfg").is_err());
    }

    #[test]
    fn injects_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "kind = cosine\nT = 50\nno_beta_clip = true\n").unwrap();
        let p = path.to_str().unwrap();
        let cmd = crate::args::Cli::command();
        let out = expand(argv(&["pifs-sched", "--config", p, "schedule", "--T", "10"]), &cmd).unwrap();
        assert_eq!(
            out,
            argv(&["pifs-sched", "--config", p, "schedule", "--kind", "cosine", "--T", "50", "--no-beta-clip", "--T", "10"])
        );
        std::fs::write(&path, "bogus = 1\n").unwrap();
        assert!(matches!(expand(argv(&["x", "--config", p, "schedule"]), &cmd), Err(CliError::Usage(_))));
    }
}
