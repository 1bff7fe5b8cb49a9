//! Engine configuration: an optional TOML file with command-line overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use duet_core::pipeline::ChainParams;
use duet_core::scheduler::{DEFAULT_QUEUE_CAPACITY, DEFAULT_TICK_US};
use duet_core::{CueSheet, SimConfig, SinkSpec};

pub const DEFAULT_LISTEN: &str = "0.0.0.0:9000";
pub const DEFAULT_CONTROL: &str = "127.0.0.1:9001";

/// The config file. Every key is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub listen: Option<String>,
    pub control: Option<String>,
    pub sink: Option<String>,
    pub virtual_clock: Option<bool>,
    pub seed: Option<u64>,
    pub cues: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub tick_us: Option<u64>,
    pub queue_capacity: Option<usize>,
    /// Simulator channel model.
    pub sim: Option<SimConfig>,
    /// Chain parameters used when no cue sheet is given.
    pub params: Option<ChainParams>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flags shared by every subcommand that runs the engine. Flags win over
/// the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// UDP address for the OSC transcription stream
    #[arg(long)]
    pub listen: Option<String>,
    /// WebSocket control-channel address, or "off"
    #[arg(long)]
    pub control: Option<String>,
    /// Output sink: midi:NAME, file:PATH or null
    #[arg(long)]
    pub sink: Option<String>,
    /// Drive the engine from a virtual clock (simulate and replay only)
    #[arg(long)]
    pub virtual_clock: bool,
    /// Simulator seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cue sheet (JSON)
    #[arg(long)]
    pub cues: Option<PathBuf>,
    /// Write a session log here
    #[arg(long)]
    pub record: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub listen: SocketAddr,
    pub control: Option<SocketAddr>,
    pub sink: SinkSpec,
    pub virtual_clock: bool,
    pub cues: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub tick_us: u64,
    pub queue_capacity: usize,
    pub sim: SimConfig,
    pub params: ChainParams,
}

fn addr(s: &str, what: &str) -> Result<SocketAddr> {
    s.parse().with_context(|| format!("{what} must be HOST:PORT, got {s:?}"))
}

impl EngineConfig {
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let file = match &o.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let listen = addr(o.listen.as_deref().or(file.listen.as_deref()).unwrap_or(DEFAULT_LISTEN), "--listen")?;
        let control = match o.control.as_deref().or(file.control.as_deref()).unwrap_or(DEFAULT_CONTROL) {
            "off" => None,
            s => Some(addr(s, "--control")?),
        };
        let sink: SinkSpec =
            o.sink.as_deref().or(file.sink.as_deref()).unwrap_or("null").parse().map_err(anyhow::Error::msg)?;
        let mut sim = file.sim.unwrap_or_default();
        if let Some(seed) = o.seed.or(file.seed) {
            sim.seed = seed;
        }
        sim.validate()?;
        let params = file.params.unwrap_or_default();
        params.validate().context("invalid [params] in config")?;
        let tick_us = file.tick_us.unwrap_or(DEFAULT_TICK_US);
        if tick_us == 0 {
            bail!("tick_us must be positive");
        }
        let queue_capacity = file.queue_capacity.unwrap_or(DEFAULT_QUEUE_CAPACITY);
        if queue_capacity == 0 {
            bail!("queue_capacity must be positive");
        }
        Ok(EngineConfig {
            listen,
            control,
            sink,
            virtual_clock: o.virtual_clock || file.virtual_clock.unwrap_or(false),
            cues: o.cues.clone().or(file.cues),
            record: o.record.clone().or(file.record),
            tick_us,
            queue_capacity,
            sim,
            params,
        })
    }

    /// The cue sheet and, when read from a file, its bytes.
    pub fn load_cues(&self) -> Result<(CueSheet, Option<Vec<u8>>)> {
        match &self.cues {
            Some(p) => {
                let bytes = std::fs::read(p).with_context(|| format!("reading cue sheet {}", p.display()))?;
                let text = String::from_utf8(bytes.clone()).context("cue sheet is not UTF-8")?;
                let sheet = CueSheet::parse(&text).with_context(|| format!("cue sheet {}", p.display()))?;
                Ok((sheet, Some(bytes)))
            }
            None => Ok((CueSheet::single(self.params)?, None)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn flags_override_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "listen = \"127.0.0.1:7000\"\nsink = \"file:a.log\"\nseed = 3\ntick_us = 500\n[sim]\ndrop_prob = 0.1\n[params]\ndelay_ms = 250"
        )
        .unwrap();
        let o = Overrides {
            config: Some(f.path().into()),
            sink: Some("null".into()),
            seed: Some(9),
            control: Some("off".into()),
            ..Default::default()
        };
        let c = EngineConfig::resolve(&o).unwrap();
        assert_eq!(c.listen, "127.0.0.1:7000".parse().unwrap());
        assert_eq!(c.sink, SinkSpec::Null);
        assert_eq!(c.control, None);
        assert_eq!(c.sim.seed, 9);
        assert_eq!(c.sim.drop_prob, 0.1);
        assert_eq!(c.sim.latency_mean_ms, 350.0);
        assert_eq!(c.tick_us, 500);
        assert_eq!(c.params.delay_ms, 250.0);
    }

    #[test]
    fn rejects_bad_values() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "lisen = \"x\"").unwrap();
        let o = Overrides { config: Some(f.path().into()), ..Default::default() };
        assert!(EngineConfig::resolve(&o).is_err());
        let o = Overrides { listen: Some("nowhere".into()), ..Default::default() };
        assert!(EngineConfig::resolve(&o).is_err());
        let o = Overrides { sink: Some("tcp:1".into()), ..Default::default() };
        assert!(EngineConfig::resolve(&o).is_err());
    }

    #[test]
    fn defaults() {
        let c = EngineConfig::resolve(&Overrides::default()).unwrap();
        assert_eq!(c.listen, DEFAULT_LISTEN.parse().unwrap());
        assert_eq!(c.control, Some(DEFAULT_CONTROL.parse().unwrap()));
        assert_eq!(c.sim, SimConfig::default());
        let (sheet, bytes) = c.load_cues().unwrap();
        assert_eq!(sheet.len(), 1);
        assert!(bytes.is_none());
    }
}
