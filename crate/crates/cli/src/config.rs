use std::path::{Path, PathBuf};

use clap::Args;
use dcsau_core::{Error, ModelConfig, Result};
use serde_json::{Map, Value};

/// Model description shared by every subcommand. Flags override the
/// config file, which is optional.
#[derive(Args)]
pub struct ModelArgs {
    /// Model config JSON.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// unet, unet+pfc, unet+csa or dcsau.
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated stage widths, shallowest first.
    #[arg(long, value_delimiter = ',', value_name = "W1,W2,...")]
    pub widths: Option<Vec<usize>>,
    /// PFC depthwise kernel size (odd).
    #[arg(long, value_name = "K")]
    pub pfc_kernel: Option<usize>,
    /// Output channels; 1 means binary with a sigmoid.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Override one config field, e.g. `--set pfc_kernel=9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn read_object(path: &Path) -> Result<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(Error::Config(format!("{}: {e}", path.display()))),
    }
}

impl ModelArgs {
    /// Builds the config. Without `--config`, `fallback` is read when it exists.
    pub fn resolve(&self, fallback: Option<&Path>) -> Result<ModelConfig> {
        let file = self.config.as_deref().or(fallback.filter(|p| p.exists()));
        let mut fields = match file {
            Some(p) => read_object(p)?,
            None => Map::new(),
        };
        if let Some(v) = &self.variant {
            fields.insert("variant".into(), v.as_str().into());
        }
        fields.entry("variant").or_insert_with(|| "dcsau".into());
        if let Some(w) = &self.widths {
            fields.insert("stage_widths".into(), w.clone().into());
        }
        if let Some(k) = self.pfc_kernel {
            fields.insert("pfc_kernel".into(), k.into());
        }
        if let Some(c) = self.classes {
            fields.insert("num_classes".into(), c.into());
            fields.remove("final_activation");
        }
        for o in &self.overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            fields.insert(key.trim().into(), value);
        }
        ModelConfig::from_json(&Value::Object(fields).to_string())
    }
}

/// Parses `CxHxW`.
pub fn parse_input(text: &str) -> Result<(usize, usize, usize)> {
    let dims: Vec<usize> = text
        .split(['x', 'X'])
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("input `{text}` is not CxHxW")))?;
    match dims[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Config(format!("input `{text}` is not CxHxW"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcsau_core::Variant;

    fn args() -> ModelArgs {
        ModelArgs {
            config: None,
            variant: None,
            widths: None,
            pfc_kernel: None,
            classes: None,
            overrides: Vec::new(),
        }
    }

    #[test]
    fn defaults_to_calibrated_dcsau() {
        assert_eq!(args().resolve(None).unwrap(), ModelConfig::new(Variant::Dcsau));
    }

    #[test]
    fn flags_and_overrides_apply() {
        let a = ModelArgs {
            variant: Some("unet".into()),
            widths: Some(vec![8, 16]),
            overrides: vec!["pfc_kernel=9".into()],
            classes: Some(3),
            ..args()
        };
        let c = a.resolve(None).unwrap();
        assert_eq!(c.variant, Variant::Unet);
        assert_eq!(c.stage_widths, vec![8, 16]);
        assert_eq!(c.pfc_kernel, 9);
        assert_eq!(c.num_classes, 3);
    }

    #[test]
    fn unknown_field_is_named() {
        let a = ModelArgs {
            overrides: vec!["depth=3".into()],
            ..args()
        };
        let e = a.resolve(None).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("depth"), "{e}");
    }

    #[test]
    fn input_parsing() {
        assert_eq!(parse_input("3x64x32").unwrap(), (3, 64, 32));
        assert!(parse_input("3x64").is_err());
        assert!(parse_input("axbxc").is_err());
    }
}
