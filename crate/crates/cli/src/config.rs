use evanskit_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<String>,
    amplitude: Option<f64>,
    domain: Option<DomainSection>,
    tol: Option<TolSection>,
    scan: Option<ScanSection>,
    sim: Option<SimSection>,
    seed: Option<u64>,
    workers: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainSection {
    #[serde(rename = "L")]
    l: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TolSection {
    profile: Option<f64>,
    ode: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanSection {
    rho_max: Option<f64>,
    rho_punch: Option<f64>,
    zhat_samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    grid: Option<[usize; 2]>,
    #[serde(rename = "T_end")]
    t_end: Option<f64>,
}

/// Fully resolved settings; hashed into the run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Config {
    pub model: Option<String>,
    pub amplitude: f64,
    pub domain_l: Option<f64>,
    pub tol_profile: f64,
    pub tol_ode: f64,
    pub rho_max: f64,
    pub rho_punch: f64,
    pub zhat_samples: usize,
    pub sim_grid: [usize; 2],
    pub t_end: f64,
    pub seed: u64,
    pub workers: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: None,
            amplitude: 0.1,
            domain_l: None,
            tol_profile: 1e-10,
            tol_ode: 1e-10,
            rho_max: 5.0,
            rho_punch: 1e-2,
            zhat_samples: 8,
            sim_grid: [1024, 256],
            t_end: 200.0,
            seed: 42,
            workers: None,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        let mut c = Config::default();
        let Some(path) = path else { return Ok(c) };
        let src = std::fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        let f: FileConfig = toml::from_str(&src).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        c.model = f.model;
        if let Some(a) = f.amplitude {
            c.amplitude = a;
        }
        c.domain_l = f.domain.and_then(|d| d.l);
        if let Some(t) = f.tol {
            c.tol_profile = t.profile.unwrap_or(c.tol_profile);
            c.tol_ode = t.ode.unwrap_or(c.tol_ode);
        }
        if let Some(s) = f.scan {
            c.rho_max = s.rho_max.unwrap_or(c.rho_max);
            c.rho_punch = s.rho_punch.unwrap_or(c.rho_punch);
            c.zhat_samples = s.zhat_samples.unwrap_or(c.zhat_samples);
        }
        if let Some(s) = f.sim {
            c.sim_grid = s.grid.unwrap_or(c.sim_grid);
            c.t_end = s.t_end.unwrap_or(c.t_end);
        }
        c.seed = f.seed.unwrap_or(c.seed);
        c.workers = f.workers;
        Ok(c)
    }

    /// EVANSKIT_WORKERS beats the config file.
    pub fn worker_count(&self) -> Result<Option<usize>> {
        match std::env::var("EVANSKIT_WORKERS") {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .map(Some)
                .ok_or_else(|| Error::InvalidInput(format!("EVANSKIT_WORKERS={v} is not a positive integer"))),
            Err(_) => Ok(self.workers),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn reads_every_key() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(
            f,
            r#"model = "hamer2d"
amplitude = 0.05
seed = 7
workers = 2
[domain]
L = 150.0
[tol]
profile = 1e-9
ode = 1e-8
[scan]
rho_max = 4.0
rho_punch = 0.02
zhat_samples = 3
[sim]
grid = [256, 64]
T_end = 50.0
"#
        )
        .unwrap();
        let c = Config::load(Some(f.path())).unwrap();
        assert_eq!(c.model.as_deref(), Some("hamer2d"));
        assert_eq!((c.amplitude, c.seed, c.workers), (0.05, 7, Some(2)));
        assert_eq!(c.domain_l, Some(150.0));
        assert_eq!((c.tol_profile, c.tol_ode), (1e-9, 1e-8));
        assert_eq!((c.rho_max, c.rho_punch, c.zhat_samples), (4.0, 0.02, 3));
        assert_eq!((c.sim_grid, c.t_end), ([256, 64], 50.0));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "amplitud = 0.1\n").unwrap();
        assert!(matches!(Config::load(Some(f.path())), Err(Error::Parse(_))));
    }
}
