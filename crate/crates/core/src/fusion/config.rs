//! Plain-text key-value neck configuration:
//!
//! ```text
//! # comments and blank lines are ignored
//! n = 2
//! k = 1
//! in_channels  = 8, 16, 32
//! in_scales    = 1, 2, 4
//! out_channels = 8, 16, 32
//! out_scales   = 1, 2, 4
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

use super::{CfConfig, StageSpec};

pub fn parse_cf_config_file(path: &Path) -> Result<CfConfig> {
    parse_cf_config(&std::fs::read_to_string(path)?)
}

pub fn parse_cf_config(text: &str) -> Result<CfConfig> {
    let mut keys: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::ParseLine {
            file: "<config>".into(),
            line: lineno + 1,
            message: format!("expected `key = value`, got {:?}", line),
        })?;
        keys.insert(
            key.trim().to_lowercase(),
            (lineno + 1, value.trim().to_string()),
        );
    }
    let scalar = |key: &str| -> Result<usize> {
        let (line, value) = keys
            .get(key)
            .ok_or_else(|| Error::Validation(format!("missing config key {:?}", key)))?;
        value.parse().map_err(|_| Error::ParseLine {
            file: "<config>".into(),
            line: *line,
            message: format!("bad integer {:?} for {}", value, key),
        })
    };
    let list = |key: &str| -> Result<Vec<usize>> {
        let (line, value) = keys
            .get(key)
            .ok_or_else(|| Error::Validation(format!("missing config key {:?}", key)))?;
        value
            .split(',')
            .map(|v| {
                v.trim().parse().map_err(|_| Error::ParseLine {
                    file: "<config>".into(),
                    line: *line,
                    message: format!("bad integer {:?} in {}", v.trim(), key),
                })
            })
            .collect()
    };
    let stages = |channels: Vec<usize>, scales: Vec<usize>, label: &str| -> Result<Vec<StageSpec>> {
        if channels.len() != scales.len() {
            return Err(Error::Validation(format!(
                "{}_channels and {}_scales have different lengths",
                label, label
            )));
        }
        Ok(channels
            .into_iter()
            .zip(scales)
            .map(|(channels, scale)| StageSpec { channels, scale })
            .collect())
    };
    let config = CfConfig {
        in_stages: stages(list("in_channels")?, list("in_scales")?, "in")?,
        out_stages: stages(list("out_channels")?, list("out_scales")?, "out")?,
        n: scalar("n")?,
        k: scalar("k")?,
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "\
# three symmetric stages
n = 2
k = 1
in_channels  = 8, 16, 32
in_scales    = 1, 2, 4
out_channels = 8, 16, 32
out_scales   = 1, 2, 4
";

    #[test]
    fn parses_the_documented_example() {
        let config = parse_cf_config(EXAMPLE).unwrap();
        assert_eq!(config.n, 2);
        assert_eq!(config.k, 1);
        assert_eq!(config.in_stages.len(), 3);
        assert_eq!(config.in_stages[1], StageSpec { channels: 16, scale: 2 });
        assert_eq!(config.in_stages, config.out_stages);
    }

    #[test]
    fn trailing_comments_and_case_are_tolerated() {
        let text = EXAMPLE.replace("n = 2", "N = 2  # stacked layers");
        assert_eq!(parse_cf_config(&text).unwrap().n, 2);
    }

    #[test]
    fn missing_key_is_reported_by_name() {
        let text = EXAMPLE.replace("k = 1\n", "");
        let err = parse_cf_config(&text).unwrap_err();
        assert!(err.to_string().contains("\"k\""), "{}", err);
    }

    #[test]
    fn bad_integer_is_reported_with_its_line() {
        let err = parse_cf_config(&EXAMPLE.replace("k = 1", "k = one")).unwrap_err();
        match err {
            Error::ParseLine { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("one"));
            }
            other => panic!("expected line error, got {}", other),
        }
    }

    #[test]
    fn non_key_value_line_is_rejected() {
        let err = parse_cf_config("n 2\n").unwrap_err();
        assert!(matches!(err, Error::ParseLine { line: 1, .. }), "{}", err);
    }

    #[test]
    fn channel_scale_length_mismatch_is_rejected() {
        let text = EXAMPLE.replace("in_scales    = 1, 2, 4", "in_scales    = 1, 2");
        let err = parse_cf_config(&text).unwrap_err();
        assert!(err.to_string().contains("length"), "{}", err);
    }

    #[test]
    fn semantic_validation_still_applies() {
        let text = EXAMPLE.replace("k = 1", "k = 2");
        assert!(parse_cf_config(&text).is_err());
    }
}
