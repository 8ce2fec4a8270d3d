//! Flat `key=value` config files and their merge with flags.

use std::path::Path;

use graphflow::trainer::{Preset, TrainConfig};

use crate::CliError;

/// One line per `key=value`; `#` starts a comment; blank lines are skipped.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::usage(format!(
                "config line {}: expected key=value, got `{line}`",
                i + 1
            ))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_file(&text)
}

/// Defaults, then the preset, then the file, then `flags`.
///
/// A preset named on the command line wins over one in the file.
pub fn resolve(
    file: &[(String, String)],
    preset_flag: Option<Preset>,
    flags: &[(&'static str, String)],
) -> Result<TrainConfig, CliError> {
    let file_preset = file
        .iter()
        .find(|(k, _)| k == "preset")
        .map(|(_, v)| v.parse::<Preset>())
        .transpose()?;
    let mut config = match preset_flag.or(file_preset) {
        Some(p) => TrainConfig::preset(p),
        None => TrainConfig::default(),
    };
    for (k, v) in file.iter().filter(|(k, _)| k != "preset") {
        config.set(k, v)?;
    }
    for (k, v) in flags {
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file =
            parse_config_file("# comment\nepochs = 5\nlr=0.01\n\nwindow=30 # inline\n").unwrap();
        let flags = vec![("epochs", "7".to_string())];
        let c = resolve(&file, None, &flags).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.window, 30);
        assert_eq!(c.stride, 10);
    }

    #[test]
    fn preset_from_file_and_flag() {
        let file = parse_config_file("preset=swat\nbatch_size=100").unwrap();
        let c = resolve(&file, None, &[]).unwrap();
        assert_eq!((c.n_blocks, c.batch_size), (1, 100));
        let c = resolve(&file, Some(Preset::Wadi), &[]).unwrap();
        assert_eq!(c.n_blocks, 2);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(parse_config_file("epochs 5").is_err());
        let file = parse_config_file("colour=blue").unwrap();
        assert!(resolve(&file, None, &[]).is_err());
    }
}
