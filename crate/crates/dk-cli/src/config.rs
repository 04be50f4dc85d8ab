//! Experiment configuration: a strict JSON schema, explicit defaults, full
//! validation before any computation, and a stable content hash.

use dk_core::girsanov::{validate_model_pair, Observable};
use dk_core::integrate::{Ensemble, Scheme};
use dk_core::measure::ProbeSet;
use dk_core::models::{ModelKind, ModelSpec, TestFunction};
use dk_core::suites::GridSpec;
use serde::{Deserialize, Serialize};

/// Number of evenly spaced checkpoints (endpoints included) recorded by the
/// trajectory suites when the config leaves `integrator.checkpoints` unset.
pub const DEFAULT_CHECKPOINTS: usize = 11;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub initial: InitialSection,
    pub integrator: IntegratorSection,
    pub suites: Vec<SuiteKind>,
    pub budgets: Budgets,
    pub seed: u64,
    /// Output directory; overridden by `--out`, defaults to `dk-out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub martingale: Option<MartingaleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duality: Option<DualitySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mgf: Option<MgfSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub girsanov: Option<GirsanovSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exhaustion: Option<ExhaustionSection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub alpha: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSection {
    /// Explicit atom coordinates, one row per atom.
    Atoms { atoms: Vec<Vec<f64>> },
    /// n i.i.d. draws from an isotropic Gaussian (deterministic in the
    /// run seed).
    Gaussian {
        n: usize,
        center: Vec<f64>,
        std_dev: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    /// Evenly spaced statistic checkpoints, endpoints included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    Simulate,
    Martingale,
    Duality,
    Mgf,
    Girsanov,
    Moments,
    Exhaustion,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    /// Outer replica count for every ensemble statistic.
    pub replicas: usize,
    /// Inner Monte Carlo budget for semigroup estimates.
    pub inner_samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MartingaleSection {
    pub test_functions: Vec<TestFunction>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualitySection {
    pub phi: TestFunction,
    /// Comparison time; defaults to t_end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MgfSection {
    pub set: ProbeSet,
    pub lambdas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GirsanovSection {
    /// Force-free counterpart: identical drift, noise, and alpha, no
    /// interaction.
    pub free_model: ModelKind,
    pub phi: TestFunction,
    #[serde(default = "default_observable")]
    pub observable: Observable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

fn default_observable() -> Observable {
    Observable::ExpPairing
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExhaustionSection {
    /// Radius of the centered ball whose indicator is propagated.
    pub radius: f64,
    /// Starting points probed for the semigroup value.
    pub probes: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
}

/// Everything constructed and checked during validation; suites run from
/// these objects without re-parsing.
#[derive(Debug)]
pub struct ValidatedRun {
    pub model: ModelSpec,
    pub mu0: Ensemble,
    pub grid: GridSpec,
    pub girsanov_free: Option<ModelSpec>,
}

impl ExperimentConfig {
    /// Fills every optional knob with its default so the serialized config
    /// is fully explicit and re-running it reproduces the run.
    pub fn make_effective(&mut self) {
        if self.integrator.checkpoints.is_none() {
            self.integrator.checkpoints = Some(DEFAULT_CHECKPOINTS);
        }
        let t_end = self.integrator.t_end;
        if let Some(s) = self.duality.as_mut() {
            s.t.get_or_insert(t_end);
        }
        if let Some(s) = self.mgf.as_mut() {
            s.t.get_or_insert(t_end);
        }
        if let Some(s) = self.girsanov.as_mut() {
            s.t.get_or_insert(t_end);
        }
        if let Some(s) = self.exhaustion.as_mut() {
            s.t.get_or_insert(t_end);
        }
    }

    /// Validates every field and constructs the run objects.  Call after
    /// `make_effective`.
    pub fn validate(&self) -> Result<ValidatedRun, String> {
        let model = ModelSpec::new(self.model.kind.clone(), self.model.alpha)
            .map_err(|e| format!("model: {e}"))?;
        let k = model.state_dim();

        let mu0 = match &self.initial {
            InitialSection::Atoms { atoms } => {
                if atoms.is_empty() {
                    return Err("initial: need at least one atom".into());
                }
                let mut data = Vec::with_capacity(atoms.len() * k);
                for (i, atom) in atoms.iter().enumerate() {
                    if atom.len() != k {
                        return Err(format!(
                            "initial: atom {i} has dimension {}, the model state has {k}",
                            atom.len()
                        ));
                    }
                    data.extend_from_slice(atom);
                }
                Ensemble::new(data, k, self.model.alpha).map_err(|e| format!("initial: {e}"))?
            }
            InitialSection::Gaussian { n, center, std_dev } => {
                if *n == 0 {
                    return Err("initial: need at least one atom".into());
                }
                if center.len() != k {
                    return Err(format!(
                        "initial: center has dimension {}, the model state has {k}",
                        center.len()
                    ));
                }
                Ensemble::sample_gaussian(*n, center, *std_dev, self.model.alpha, self.seed, 0)
                    .map_err(|e| format!("initial: {e}"))?
            }
        };

        let grid = GridSpec {
            scheme: self.integrator.scheme,
            dt: self.integrator.dt,
            t_end: self.integrator.t_end,
            checkpoints: self.integrator.checkpoints.unwrap_or(DEFAULT_CHECKPOINTS),
        };
        grid.checkpoint_indices()
            .map_err(|e| format!("integrator: {e}"))?;

        for (i, s) in self.suites.iter().enumerate() {
            if self.suites[..i].contains(s) {
                return Err(format!("suites: duplicate entry {}", s.name()));
            }
        }
        if self.budgets.replicas < 2 {
            return Err("budgets: need at least 2 replicas".into());
        }
        if self.budgets.inner_samples < 2 {
            return Err("budgets: need at least 2 inner samples".into());
        }

        let horizon = |t: Option<f64>, suite: &str| -> Result<f64, String> {
            let t = t.expect("make_effective fills suite times");
            if !(t.is_finite() && t > 0.0) {
                return Err(format!("{suite}: time must be positive, got {t}"));
            }
            Ok(t)
        };

        let mut girsanov_free = None;
        for suite in &self.suites {
            match suite {
                SuiteKind::Simulate => {}
                SuiteKind::Martingale => {
                    let s = self
                        .martingale
                        .as_ref()
                        .ok_or("martingale suite selected but the martingale section is missing")?;
                    if s.test_functions.is_empty() {
                        return Err("martingale: need at least one test function".into());
                    }
                    for (i, phi) in s.test_functions.iter().enumerate() {
                        phi.validate(k)
                            .map_err(|e| format!("martingale: test function {i}: {e}"))?;
                    }
                    if self.budgets.replicas < 100 {
                        return Err(
                            "martingale: the increment test needs at least 100 replicas".into()
                        );
                    }
                }
                SuiteKind::Duality => {
                    let s = self
                        .duality
                        .as_ref()
                        .ok_or("duality suite selected but the duality section is missing")?;
                    if model.is_interacting() {
                        return Err("duality: requires a force-free model".into());
                    }
                    s.phi.validate(k).map_err(|e| format!("duality: {e}"))?;
                    horizon(s.t, "duality")?;
                }
                SuiteKind::Mgf => {
                    let s = self
                        .mgf
                        .as_ref()
                        .ok_or("mgf suite selected but the mgf section is missing")?;
                    if model.is_interacting() {
                        return Err("mgf: requires a force-free model".into());
                    }
                    if s.lambdas.is_empty() {
                        return Err("mgf: need at least one lambda".into());
                    }
                    if s.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
                        return Err("mgf: lambdas must be finite and nonnegative".into());
                    }
                    match &s.set {
                        ProbeSet::Ball { center, radius } => {
                            if center.len() != k {
                                return Err(format!(
                                    "mgf: set center has dimension {}, the model state has {k}",
                                    center.len()
                                ));
                            }
                            if !(radius.is_finite() && *radius > 0.0) {
                                return Err("mgf: set radius must be positive".into());
                            }
                        }
                        ProbeSet::Box { lower, upper } => {
                            if lower.len() != k || upper.len() != k {
                                return Err(format!(
                                    "mgf: box bounds must have dimension {k}"
                                ));
                            }
                            if lower.iter().zip(upper).any(|(l, u)| l > u) {
                                return Err("mgf: box lower bound exceeds upper bound".into());
                            }
                        }
                    }
                    horizon(s.t, "mgf")?;
                }
                SuiteKind::Girsanov => {
                    let s = self
                        .girsanov
                        .as_ref()
                        .ok_or("girsanov suite selected but the girsanov section is missing")?;
                    let free = ModelSpec::new(s.free_model.clone(), self.model.alpha)
                        .map_err(|e| format!("girsanov: free model: {e}"))?;
                    validate_model_pair(&model, &free).map_err(|e| format!("girsanov: {e}"))?;
                    s.phi.validate(k).map_err(|e| format!("girsanov: {e}"))?;
                    horizon(s.t, "girsanov")?;
                    girsanov_free = Some(free);
                }
                SuiteKind::Moments => {
                    model
                        .growth_constant()
                        .map_err(|e| format!("moments: {e}"))?;
                }
                SuiteKind::Exhaustion => {
                    let s = self
                        .exhaustion
                        .as_ref()
                        .ok_or("exhaustion suite selected but the exhaustion section is missing")?;
                    if !(s.radius.is_finite() && s.radius > 0.0) {
                        return Err("exhaustion: radius must be positive".into());
                    }
                    if s.probes.is_empty() {
                        return Err("exhaustion: need at least one probe point".into());
                    }
                    for (i, p) in s.probes.iter().enumerate() {
                        if p.len() != k {
                            return Err(format!(
                                "exhaustion: probe {i} has dimension {}, the model state has {k}",
                                p.len()
                            ));
                        }
                        if p.iter().any(|x| !x.is_finite()) {
                            return Err(format!("exhaustion: probe {i} has non-finite entries"));
                        }
                    }
                    horizon(s.t, "exhaustion")?;
                }
            }
        }

        Ok(ValidatedRun {
            model,
            mu0,
            grid,
            girsanov_free,
        })
    }
}

impl SuiteKind {
    pub fn name(&self) -> &'static str {
        match self {
            SuiteKind::Simulate => "simulate",
            SuiteKind::Martingale => "martingale",
            SuiteKind::Duality => "duality",
            SuiteKind::Mgf => "mgf",
            SuiteKind::Girsanov => "girsanov",
            SuiteKind::Moments => "moments",
            SuiteKind::Exhaustion => "exhaustion",
        }
    }
}

/// FNV-1a 64-bit content hash, reported in the summary for provenance.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "model": {"kind": {"family": "linear_ou", "gamma": 1.0}, "alpha": 1.0},
            "initial": {"source": "atoms", "atoms": [[0.4, 0.0], [-0.3, 0.2]]},
            "integrator": {"scheme": "euler_maruyama", "dt": 0.005, "t_end": 0.2},
            "suites": ["simulate"],
            "budgets": {"replicas": 50, "inner_samples": 50},
            "seed": 7
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_and_validates() {
        let mut cfg: ExperimentConfig = serde_json::from_str(&minimal_json()).unwrap();
        cfg.make_effective();
        assert_eq!(cfg.integrator.checkpoints, Some(DEFAULT_CHECKPOINTS));
        let run = cfg.validate().unwrap();
        assert_eq!(run.model.state_dim(), 2);
        assert_eq!(run.mu0.n_particles(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = minimal_json().replace("\"seed\": 7", "\"seed\": 7, \"extra\": 1");
        assert!(serde_json::from_str::<ExperimentConfig>(&bad).is_err());
    }

    #[test]
    fn suite_without_section_is_a_config_error() {
        let json = minimal_json().replace("[\"simulate\"]", "[\"martingale\"]");
        let mut cfg: ExperimentConfig = serde_json::from_str(&json).unwrap();
        cfg.make_effective();
        let err = cfg.validate().unwrap_err();
        assert!(err.contains("martingale"), "{err}");
    }

    #[test]
    fn dimension_mismatches_are_caught() {
        let json = minimal_json().replace("[[0.4, 0.0], [-0.3, 0.2]]", "[[0.4, 0.0, 1.0]]");
        let mut cfg: ExperimentConfig = serde_json::from_str(&json).unwrap();
        cfg.make_effective();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn duplicate_suites_are_rejected() {
        let json = minimal_json().replace("[\"simulate\"]", "[\"simulate\", \"simulate\"]");
        let mut cfg: ExperimentConfig = serde_json::from_str(&json).unwrap();
        cfg.make_effective();
        assert!(cfg.validate().unwrap_err().contains("duplicate"));
    }

    #[test]
    fn effective_config_roundtrips_with_identical_hash() {
        let mut cfg: ExperimentConfig = serde_json::from_str(&minimal_json()).unwrap();
        cfg.make_effective();
        let canonical = serde_json::to_string(&cfg).unwrap();
        let reparsed: ExperimentConfig = serde_json::from_str(&canonical).unwrap();
        let again = serde_json::to_string(&reparsed).unwrap();
        assert_eq!(canonical, again);
        assert_eq!(fnv1a64(canonical.as_bytes()), fnv1a64(again.as_bytes()));
    }

    #[test]
    fn fnv_hash_matches_reference_vectors() {
        // Standard FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
