//! Configuration resolution and run directories.

use std::fs;
use std::path::{Path, PathBuf};

use pdae_core::config::RunConfig;
use pdae_core::{Error, Result};

use crate::{commands, Cli};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FAILED_FILE: &str = "FAILED";

/// Defaults, then the config file, then `PDAE_*` variables, then `--set`,
/// then `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_process_env()?;
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

/// Output directory of a run plus the manifest collected along the way.
pub struct Run {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub verbose: bool,
    manifest: Vec<(String, String)>,
}

impl Run {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.manifest.push((key.to_string(), value.to_string()));
    }

    fn write_manifest(&self) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.manifest {
            text.push_str(&format!("{k} = {v}\n"));
        }
        write_atomic(&self.path(MANIFEST_FILE), text.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs the subcommand. The failure marker exists from the moment the
/// directory is created until the run succeeds; on error it holds the
/// message.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve_config(cli)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cli.cmd.name()));
    fs::create_dir_all(&dir)?;
    let marker = dir.join(FAILED_FILE);
    fs::write(&marker, "incomplete\n")?;
    let _ = fs::remove_file(dir.join(MANIFEST_FILE));
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let mut run = Run { dir: dir.clone(), cfg, verbose: !cli.quiet, manifest: Vec::new() };
    run.note("command", cli.cmd.name());
    run.note("seed", run.cfg.seed()?);
    match commands::dispatch(&cli.cmd, &mut run).and_then(|()| run.write_manifest()) {
        Ok(()) => {
            fs::remove_file(&marker)?;
            Ok(dir)
        }
        Err(e) => {
            let _ = fs::write(&marker, format!("{e}\n"));
            Err(e)
        }
    }
}
