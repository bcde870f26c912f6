//! Config loading and artifact plumbing: TOML file + dotted-path overrides
//! resolved into a command-specific parameter document, plus the manifest /
//! CSV / summary writers every command shares.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    /// Bad config file, unknown keys, malformed --set, command mismatch.
    Config(String),
    /// A module operation failed at runtime.
    Runtime(String),
    /// A verification command ran fine but missed its tolerance.
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Runtime(m) => write!(f, "runtime: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<slas_core::Error> for CliError {
    fn from(e: slas_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Fully resolved run configuration: file values, then --set overrides, then
/// the dedicated flags, last wins.
pub struct ResolvedConfig {
    pub command: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub params: toml::Table,
}

impl ResolvedConfig {
    pub fn load(
        command: &str,
        config_path: Option<&Path>,
        seed_flag: Option<u64>,
        out_flag: Option<&Path>,
        sets: &[String],
    ) -> Result<Self, CliError> {
        let mut doc = match config_path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for set in sets {
            apply_set(&mut doc, set)?;
        }

        let mut command_in_file = None;
        let mut seed = 0u64;
        let mut output_dir = None;
        let mut params = toml::Table::new();
        for (key, value) in doc {
            match key.as_str() {
                "command" => {
                    command_in_file = Some(value.as_str().map(str::to_owned).ok_or_else(
                        || CliError::Config("`command` must be a string".into()),
                    )?)
                }
                "seed" => {
                    seed = value
                        .as_integer()
                        .and_then(|s| u64::try_from(s).ok())
                        .ok_or_else(|| {
                            CliError::Config("`seed` must be a non-negative integer".into())
                        })?
                }
                "output_dir" => {
                    output_dir = Some(PathBuf::from(value.as_str().ok_or_else(|| {
                        CliError::Config("`output_dir` must be a string".into())
                    })?))
                }
                "params" => {
                    params = value.as_table().cloned().ok_or_else(|| {
                        CliError::Config("`params` must be a table".into())
                    })?
                }
                // the manifest echoes the build identifier; accept it back
                "build" => {}
                other => {
                    return Err(CliError::Config(format!("unknown top-level key `{other}`")))
                }
            }
        }
        if let Some(file_cmd) = &command_in_file {
            if file_cmd != command {
                return Err(CliError::Config(format!(
                    "config is for command `{file_cmd}`, but `{command}` was invoked"
                )));
            }
        }
        if let Some(s) = seed_flag {
            seed = s;
        }
        let output_dir = out_flag
            .map(Path::to_path_buf)
            .or(output_dir)
            .unwrap_or_else(|| PathBuf::from("out").join(command));
        Ok(Self { command: command.to_string(), seed, output_dir, params })
    }

    /// Deserializes the params table into the command's typed parameter
    /// struct; unknown keys are rejected there.
    pub fn typed_params<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        self.params
            .clone()
            .try_into()
            .map_err(|e| CliError::Config(format!("params: {e}")))
    }

    /// Writes the manifest echoing the resolved configuration; feeding it
    /// back through --config reproduces the run.
    pub fn write_manifest<T: Serialize>(&self, typed_params: &T) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.output_dir)?;
        let params_table = toml::Table::try_from(typed_params)
            .map_err(|e| CliError::Runtime(format!("manifest params: {e}")))?;
        let mut doc = toml::Table::new();
        doc.insert("command".into(), toml::Value::String(self.command.clone()));
        doc.insert("seed".into(), toml::Value::Integer(self.seed as i64));
        doc.insert(
            "output_dir".into(),
            toml::Value::String(self.output_dir.display().to_string()),
        );
        doc.insert("params".into(), toml::Value::Table(params_table));
        let mut build = toml::Table::new();
        build.insert("package".into(), toml::Value::String(env!("CARGO_PKG_NAME").into()));
        build.insert("version".into(), toml::Value::String(env!("CARGO_PKG_VERSION").into()));
        doc.insert("build".into(), toml::Value::Table(build));
        std::fs::write(self.output_dir.join("manifest.toml"), doc.to_string())?;
        Ok(())
    }

    /// One header row, `.` decimals, LF line endings.
    pub fn write_csv(&self, name: &str, header: &str, rows: &[String]) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.output_dir)?;
        let mut out = String::with_capacity(rows.len() * 32 + header.len() + 1);
        out.push_str(header);
        out.push('\n');
        for row in rows {
            out.push_str(row);
            out.push('\n');
        }
        std::fs::write(self.output_dir.join(name), out)?;
        Ok(())
    }

    /// Key/value summary, also echoed to stdout.
    pub fn write_summary(&self, lines: &[(String, String)]) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.output_dir)?;
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        std::fs::write(self.output_dir.join("summary.txt"), &out)?;
        print!("{out}");
        Ok(())
    }
}

/// Applies one `--set key=value` override; dotted keys descend into tables.
fn apply_set(doc: &mut toml::Table, set: &str) -> Result<(), CliError> {
    let (path, raw_value) = set
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{set}`")))?;
    // parse the literal through a one-key document; bare words fall back to strings
    let value = format!("v = {raw_value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw_value.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!("--set key `{path}` has an empty segment")));
    }
    let mut table = doc;
    for segment in &segments[..segments.len() - 1] {
        let entry = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("--set key `{path}`: `{segment}` is not a table"))
        })?;
    }
    table.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}
