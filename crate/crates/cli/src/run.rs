use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use repfield3d::kvconfig::KvConfig;
use repfield3d::{rt3d, Error, Result, Tensor};

pub const DEFAULT_OUT: &str = "repfield3d-out";

/// Resolved settings and artifact bookkeeping for one subcommand run.
///
/// Settings start from the command's defaults, then the config file, then
/// explicit flags. An empty value means "unset".
pub struct Run {
    pub command: &'static str,
    pub out: PathBuf,
    pub cfg: KvConfig,
    outputs: Vec<String>,
}

impl Run {
    pub fn new(
        command: &'static str,
        out: Option<PathBuf>,
        file: Option<&Path>,
        defaults: &[(&str, String)],
        flags: &[(&str, Option<String>)],
    ) -> Result<Self> {
        let mut cfg = KvConfig::new();
        for (k, v) in defaults {
            cfg.set(k, v);
        }
        if let Some(path) = file {
            let from_file = KvConfig::load(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let allowed: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
            from_file.reject_unknown(&allowed)?;
            cfg.merge(&from_file);
        }
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v);
            }
        }
        let out = out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        std::fs::create_dir_all(&out)?;
        Ok(Self {
            command,
            out,
            cfg,
            outputs: Vec::new(),
        })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        self.opt(key)?
            .ok_or_else(|| Error::Config(format!("key `{key}` must be set")))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.cfg.get(key) {
            None | Some("") => Ok(None),
            Some(_) => self.cfg.get_parsed(key),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, text)?;
        self.outputs.push(name.to_string());
        Ok(p)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, bytes)?;
        self.outputs.push(name.to_string());
        Ok(p)
    }

    pub fn write_tensor(&mut self, name: &str, t: &Tensor) -> Result<PathBuf> {
        self.write_bytes(name, &rt3d::encode(t))
    }

    /// Registers a file or directory written by other code.
    pub fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    /// Writes `manifest.txt`: command, resolved settings, results, outputs and
    /// the wall-clock time, which appears nowhere else.
    pub fn finish(self, passed: bool, results: &KvConfig) -> Result<()> {
        let mut m = KvConfig::new();
        m.set("command", self.command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        for (k, v) in self.cfg.iter() {
            m.set(&format!("config.{k}"), v);
        }
        for (k, v) in results.iter() {
            m.set(&format!("result.{k}"), v);
        }
        m.set("status", if passed { "pass" } else { "fail" });
        for (i, o) in self.outputs.iter().enumerate() {
            m.set(&format!("output.{i}"), o);
        }
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        m.set("timestamp_unix", secs);
        std::fs::write(self.out.join("manifest.txt"), m.render())?;
        Ok(())
    }
}
