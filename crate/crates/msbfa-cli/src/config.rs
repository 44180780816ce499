//! Run configuration: optional TOML file merged under command-line flags.
//!
//! Precedence is flags > file > built-in defaults; every key below has a
//! flag of the same name where it makes sense. Unknown keys in the file
//! are configuration errors, not silent no-ops.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use msbfa::fa::mgps_models::MgpsOptions;
use msbfa::fa::momss::NlpSpikeSlabConfig;
use msbfa::fa::pfa::PfaConfig;
use msbfa::fa::sufa::HmcConfig;
use msbfa::priors::mgps::MgpsHyper;
use msbfa::{Error, Result};

/// Raw file schema; every field optional so the file can state only what
/// it changes.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub nrun: Option<usize>,
    pub burn: Option<usize>,
    pub thin: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub center: Option<bool>,
    pub scale: Option<bool>,
    pub log_offset: Option<f64>,
    pub evd_threshold: Option<f64>,
    pub edge_threshold: Option<f64>,
    pub workers: Option<usize>,
    #[serde(default)]
    pub mgps: MgpsSection,
    #[serde(default)]
    pub stackfa: StackSection,
    #[serde(default)]
    pub indfa: IndSection,
    #[serde(default)]
    pub bmsfa: BmsfaSection,
    #[serde(default)]
    pub pfa: PfaSection,
    #[serde(default)]
    pub momss: MomssSection,
    #[serde(default)]
    pub sufa: SufaSection,
    #[serde(default)]
    pub tetris: TetrisSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MgpsSection {
    pub kappa: Option<f64>,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    pub psi_shape: Option<f64>,
    pub psi_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSection {
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndSection {
    /// One count per study, or a single count broadcast to all.
    pub j: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BmsfaSection {
    pub k: Option<usize>,
    pub j: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfaSection {
    pub k: Option<usize>,
    /// Column-death threshold on the mean absolute loading.
    pub cutoff: Option<f64>,
    pub allow_large_p: Option<bool>,
    pub fixed_alpha_q: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomssSection {
    pub k: Option<usize>,
    pub tau0: Option<f64>,
    pub tau1: Option<f64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    /// A loading column counts as active when any |entry| exceeds this.
    pub cutoff: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SufaSection {
    pub k: Option<usize>,
    pub j: Option<Vec<usize>>,
    pub steps: Option<usize>,
    pub stepsize: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TetrisSection {
    /// Sharing-matrix prior mass; 0 or absent means the 1.25 x S default.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub cap_multiplier: Option<usize>,
    pub mode_radius: Option<usize>,
    /// Start from an all-shared pattern with this many columns instead of
    /// a prior draw.
    pub init_columns: Option<usize>,
    pub time_budget_secs: Option<f64>,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub scenarios: Option<Vec<u8>>,
    pub methods: Option<Vec<String>>,
    pub reps: Option<usize>,
    pub overspecified: Option<bool>,
    /// Published dimensions instead of the reduced desk-scale variants.
    pub full: Option<bool>,
    /// Train fraction; set to score held-out prediction error per cell.
    pub split: Option<f64>,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("parse {}: {e}", path.display())))
}

/// Fully resolved settings: file values with defaults filled in. Flag
/// overrides are applied by the command layer before resolution.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub nrun: usize,
    pub burn: usize,
    pub thin: usize,
    pub out_dir: PathBuf,
    pub center: bool,
    pub scale: bool,
    pub log_offset: Option<f64>,
    pub evd_threshold: f64,
    pub edge_threshold: f64,
    pub workers: Option<usize>,
    pub mgps_kappa: f64,
    pub mgps_a1: f64,
    pub mgps_a2: f64,
    pub psi_shape: f64,
    pub psi_rate: f64,
    pub stack_k: Option<usize>,
    pub ind_j: Option<Vec<usize>>,
    pub bmsfa_k: Option<usize>,
    pub bmsfa_j: Option<Vec<usize>>,
    pub pfa_k: Option<usize>,
    pub pfa_cutoff: f64,
    pub pfa_allow_large_p: bool,
    pub pfa_fixed_alpha_q: Option<f64>,
    pub momss_k: Option<usize>,
    pub momss_tau0: f64,
    pub momss_tau1: f64,
    pub momss_max_iter: usize,
    pub momss_tol: f64,
    pub momss_cutoff: f64,
    pub sufa_k: Option<usize>,
    pub sufa_j: Option<Vec<usize>>,
    pub sufa_steps: usize,
    pub sufa_stepsize: f64,
    pub tetris_alpha: Option<f64>,
    pub tetris_beta: f64,
    pub tetris_cap_multiplier: usize,
    pub tetris_mode_radius: Option<usize>,
    pub tetris_init_columns: Option<usize>,
    pub tetris_time_budget_secs: Option<f64>,
    pub tetris_checkpoint_every: usize,
}

impl Settings {
    pub fn resolve(file: &FileConfig) -> Result<Settings> {
        let settings = Settings {
            seed: file.seed.unwrap_or(1),
            nrun: file.nrun.unwrap_or(10_000),
            burn: file.burn.unwrap_or(8_000),
            thin: file.thin.unwrap_or(1),
            out_dir: file.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs")),
            center: file.center.unwrap_or(true),
            scale: file.scale.unwrap_or(false),
            log_offset: file.log_offset,
            evd_threshold: file.evd_threshold.unwrap_or(0.05),
            edge_threshold: file.edge_threshold.unwrap_or(0.5),
            workers: file.workers,
            mgps_kappa: file.mgps.kappa.unwrap_or(3.0),
            mgps_a1: file.mgps.a1.unwrap_or(2.1),
            mgps_a2: file.mgps.a2.unwrap_or(3.1),
            psi_shape: file.mgps.psi_shape.unwrap_or(1.0),
            psi_rate: file.mgps.psi_rate.unwrap_or(0.3),
            stack_k: file.stackfa.k,
            ind_j: file.indfa.j.clone(),
            bmsfa_k: file.bmsfa.k,
            bmsfa_j: file.bmsfa.j.clone(),
            pfa_k: file.pfa.k,
            pfa_cutoff: file.pfa.cutoff.unwrap_or(1e-3),
            pfa_allow_large_p: file.pfa.allow_large_p.unwrap_or(false),
            pfa_fixed_alpha_q: file.pfa.fixed_alpha_q,
            momss_k: file.momss.k,
            momss_tau0: file.momss.tau0.unwrap_or(0.026),
            momss_tau1: file.momss.tau1.unwrap_or(0.28),
            momss_max_iter: file.momss.max_iter.unwrap_or(500),
            momss_tol: file.momss.tol.unwrap_or(1e-6),
            momss_cutoff: file.momss.cutoff.unwrap_or(1e-3),
            sufa_k: file.sufa.k,
            sufa_j: file.sufa.j.clone(),
            sufa_steps: file.sufa.steps.unwrap_or(20),
            sufa_stepsize: file.sufa.stepsize.unwrap_or(0.01),
            tetris_alpha: file.tetris.alpha.filter(|&a| a > 0.0),
            tetris_beta: file.tetris.beta.unwrap_or(1.0),
            tetris_cap_multiplier: file.tetris.cap_multiplier.unwrap_or(5),
            tetris_mode_radius: file.tetris.mode_radius,
            tetris_init_columns: file.tetris.init_columns,
            tetris_time_budget_secs: file.tetris.time_budget_secs,
            tetris_checkpoint_every: file.tetris.checkpoint_every.unwrap_or(0),
        };
        settings.validate()?;
        Ok(settings)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.evd_threshold) {
            return Err(Error::Config(format!(
                "evd_threshold {} outside [0, 1)",
                self.evd_threshold
            )));
        }
        if self.edge_threshold < 0.0 {
            return Err(Error::Config(format!(
                "edge_threshold {} is negative",
                self.edge_threshold
            )));
        }
        if let Some(b) = self.tetris_time_budget_secs {
            if b <= 0.0 {
                return Err(Error::Config(format!("tetris time budget {b} not positive")));
            }
        }
        Ok(())
    }

    pub fn mgps_hyper(&self) -> MgpsHyper {
        MgpsHyper {
            kappa: self.mgps_kappa,
            a1: self.mgps_a1,
            a2: self.mgps_a2,
        }
    }

    pub fn mgps_options(&self) -> MgpsOptions {
        MgpsOptions {
            hyper: self.mgps_hyper(),
            psi_shape: self.psi_shape,
            psi_rate: self.psi_rate,
        }
    }

    pub fn pfa_config(&self) -> PfaConfig {
        PfaConfig {
            cutoff: self.pfa_cutoff,
            fixed_alpha_q: self.pfa_fixed_alpha_q,
            allow_large_p: self.pfa_allow_large_p,
            hyper: self.mgps_hyper(),
            psi_shape: self.psi_shape,
            psi_rate: self.psi_rate,
            ..PfaConfig::default()
        }
    }

    pub fn momss_config(&self, cv_seed: u64) -> NlpSpikeSlabConfig {
        NlpSpikeSlabConfig {
            tau0: self.momss_tau0,
            tau1: self.momss_tau1,
            cv_seed,
            ..NlpSpikeSlabConfig::default()
        }
    }

    pub fn hmc_config(&self) -> HmcConfig {
        HmcConfig {
            steps: self.sufa_steps,
            stepsize: self.sufa_stepsize,
            ..HmcConfig::default()
        }
    }

    pub fn tetris_time_budget(&self) -> Option<Duration> {
        self.tetris_time_budget_secs.map(Duration::from_secs_f64)
    }
}

/// Expand a per-study count list: a single value broadcasts to all
/// studies; otherwise the length must match.
pub fn broadcast_counts(j: &[usize], n_studies: usize, what: &str) -> Result<Vec<usize>> {
    match j.len() {
        1 => Ok(vec![j[0]; n_studies]),
        n if n == n_studies => Ok(j.to_vec()),
        n => Err(Error::Config(format!(
            "{what}: got {n} counts for {n_studies} studies (give one per study or a single value)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_values() {
        let st = Settings::resolve(&FileConfig::default()).unwrap();
        assert_eq!(st.nrun, 10_000);
        assert_eq!(st.burn, 8_000);
        assert_eq!(st.thin, 1);
        assert!(st.center && !st.scale);
        assert_eq!(st.mgps_kappa, 3.0);
        assert_eq!(st.mgps_a1, 2.1);
        assert_eq!(st.mgps_a2, 3.1);
        assert_eq!(st.psi_shape, 1.0);
        assert_eq!(st.psi_rate, 0.3);
        assert_eq!(st.momss_tau0, 0.026);
        assert_eq!(st.momss_tau1, 0.28);
        assert_eq!(st.pfa_cutoff, 1e-3);
        assert_eq!(st.evd_threshold, 0.05);
        assert!(st.tetris_alpha.is_none(), "alpha defaults to 1.25 x S at fit time");
    }

    #[test]
    fn file_sections_override_defaults() {
        let file: FileConfig = toml::from_str(
            r#"
            nrun = 400
            burn = 200
            [mgps]
            kappa = 2.0
            [bmsfa]
            k = 6
            j = [2]
            [pfa]
            allow_large_p = true
            "#,
        )
        .unwrap();
        let st = Settings::resolve(&file).unwrap();
        assert_eq!(st.nrun, 400);
        assert_eq!(st.mgps_kappa, 2.0);
        assert_eq!(st.bmsfa_k, Some(6));
        assert_eq!(st.bmsfa_j, Some(vec![2]));
        assert!(st.pfa_allow_large_p);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<FileConfig>("nruns = 5").unwrap_err();
        assert!(err.to_string().contains("nruns"));
        assert!(toml::from_str::<FileConfig>("[bmsfa]\nkk = 2").is_err());
    }

    #[test]
    fn broadcasting_expands_single_counts() {
        assert_eq!(broadcast_counts(&[2], 4, "j").unwrap(), vec![2, 2, 2, 2]);
        assert_eq!(broadcast_counts(&[1, 2, 3], 3, "j").unwrap(), vec![1, 2, 3]);
        assert!(broadcast_counts(&[1, 2], 4, "j").is_err());
    }

    #[test]
    fn invalid_thresholds_are_config_errors() {
        let file: FileConfig = toml::from_str("evd_threshold = 1.5").unwrap();
        assert!(Settings::resolve(&file).is_err());
    }
}
