//! Optional TOML config file. Each subcommand reads its own table
//! (`[train]`, `[eval]`, ...); flags given on the command line win.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::CliError;

/// Fills every unset field of `self` from `file`.
pub trait Merge {
    fn merge(&mut self, file: Self);
}

#[macro_export]
macro_rules! impl_merge {
    ($ty:ty; options: $($opt:ident),* ; flags: $($flag:ident),*) => {
        impl $crate::config::Merge for $ty {
            fn merge(&mut self, file: Self) {
                $( if self.$opt.is_none() { self.$opt = file.$opt; } )*
                $( self.$flag |= file.$flag; )*
            }
        }
    };
}

/// Reads table `section` of the TOML file at `path`; a missing table
/// yields the default.
pub fn load_section<T: DeserializeOwned + Default>(path: &Path, section: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("{}: {e}", path.display())))?;
    match doc.remove(section) {
        Some(value) => value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("{} [{section}]: {e}", path.display()))),
        None => Ok(T::default()),
    }
}

/// Applies the config file named by `config`, if any.
pub fn resolve<T: Merge + DeserializeOwned + Default>(
    mut flags: T,
    config: Option<&Path>,
    section: &str,
) -> Result<T, CliError> {
    if let Some(path) = config {
        flags.merge(load_section(path, section)?);
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Default, Deserialize, Debug, PartialEq)]
    #[serde(default)]
    struct Demo {
        a: Option<u32>,
        b: Option<String>,
        f: bool,
    }
    impl_merge!(Demo; options: a, b; flags: f);

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[demo]\na = 3\nb = \"file\"\nf = true\n").unwrap();
        let flags = Demo {
            a: Some(7),
            ..Demo::default()
        };
        let got = resolve(flags, Some(&path), "demo").unwrap();
        assert_eq!(
            got,
            Demo {
                a: Some(7),
                b: Some("file".into()),
                f: true
            }
        );
        let none: Demo = load_section(&path, "other").unwrap();
        assert_eq!(none, Demo::default());
    }
}
