//! TOML run manifests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaptive::AdaptivityConfig;
use crate::error::{Error, Result};
use crate::flow::{CostWeights, ProblemConfig};
use crate::optim::{AdamConfig, LbfgsConfig};
use crate::train::{Optimizers, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fixed,
    Adaptive,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fixed => "fixed",
            Mode::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Mode::Fixed),
            "adaptive" => Ok(Mode::Adaptive),
            other => Err(Error::config(
                "mode",
                format!("expected `fixed` or `adaptive`, got `{other}`"),
            )),
        }
    }
}

/// Where and how the trained model is compared against the closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// `[start, end]` of the front comparison window.
    pub front_window: [f64; 2],
    pub front_samples: usize,
    pub pressure_times: Vec<f64>,
    pub pressure_points: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            front_window: [0.05, 0.45],
            front_samples: 81,
            pressure_times: vec![0.1, 0.2, 0.3, 0.4],
            pressure_points: 101,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self, cfg: &ProblemConfig) -> Result<()> {
        let [a, b] = self.front_window;
        if !(0.0 <= a && a <= b && b <= cfg.t_end) {
            return Err(Error::config(
                "front_window",
                format!("need 0 <= start <= end <= T, got [{a}, {b}]"),
            ));
        }
        if self.front_samples < 2 {
            return Err(Error::config("front_samples", "must be at least 2"));
        }
        if self.pressure_points < 2 {
            return Err(Error::config("pressure_points", "must be at least 2"));
        }
        if let Some(t) = self
            .pressure_times
            .iter()
            .find(|&&t| !(0.0..=cfg.t_end).contains(&t))
        {
            return Err(Error::config(
                "pressure_times",
                format!("{t} lies outside [0, T]"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunSection {
    mode: Option<Mode>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ManifestFile {
    run: RunSection,
    problem: ProblemConfig,
    weights: CostWeights,
    adam: AdamConfig,
    quasi_newton: LbfgsConfig,
    adaptivity: AdaptivityConfig,
    schedule: Schedule,
    evaluation: EvaluationConfig,
}

/// Values given on the command line; they take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    pub problem: ProblemConfig,
    pub weights: CostWeights,
    pub adam: AdamConfig,
    pub quasi_newton: LbfgsConfig,
    pub adaptivity: AdaptivityConfig,
    pub schedule: Schedule,
    pub evaluation: EvaluationConfig,
}

impl RunManifest {
    /// Default settings for every block.
    pub fn with_defaults(mode: Mode, seed: u64, out: impl Into<PathBuf>) -> Self {
        let f = ManifestFile::default();
        RunManifest {
            mode,
            seed,
            out: out.into(),
            problem: f.problem,
            weights: f.weights,
            adam: f.adam,
            quasi_newton: f.quasi_newton,
            adaptivity: f.adaptivity,
            schedule: f.schedule,
            evaluation: f.evaluation,
        }
    }

    pub fn optimizers(&self) -> Optimizers {
        Optimizers {
            adam: self.adam,
            quasi_newton: self.quasi_newton,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.weights.validate()?;
        self.adam.validate()?;
        self.quasi_newton.validate()?;
        self.schedule.validate()?;
        self.evaluation.validate(&self.problem)?;
        if self.mode == Mode::Adaptive {
            self.adaptivity.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        let file = ManifestFile {
            run: RunSection {
                mode: Some(self.mode),
                seed: Some(self.seed),
                out: Some(self.out.clone()),
            },
            problem: self.problem,
            weights: self.weights,
            adam: self.adam,
            quasi_newton: self.quasi_newton,
            adaptivity: self.adaptivity,
            schedule: self.schedule.clone(),
            evaluation: self.evaluation.clone(),
        };
        toml::to_string(&file).expect("manifest serializes")
    }
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    load_manifest_with(path, &Overrides::default())
}

pub fn load_manifest_with(path: &Path, overrides: &Overrides) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, overrides)
}

pub fn parse_manifest(text: &str, overrides: &Overrides) -> Result<RunManifest> {
    let file: ManifestFile = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
    let mode = overrides
        .mode
        .or(file.run.mode)
        .ok_or_else(|| Error::config("mode", "missing; set `[run] mode` or pass --mode"))?;
    let seed = overrides
        .seed
        .or(file.run.seed)
        .ok_or_else(|| Error::config("seed", "missing; set `[run] seed` or pass --seed"))?;
    let out = overrides
        .out
        .clone()
        .or(file.run.out)
        .ok_or_else(|| Error::config("out", "missing; set `[run] out` or pass --out"))?;
    let manifest = RunManifest {
        mode,
        seed,
        out,
        problem: file.problem,
        weights: file.weights,
        adam: file.adam,
        quasi_newton: file.quasi_newton,
        adaptivity: file.adaptivity,
        schedule: file.schedule,
        evaluation: file.evaluation,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Loads only the problem block, for commands that need nothing else.
pub fn load_problem(path: &Path) -> Result<ProblemConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = toml::from_str(&text).map_err(|e| toml_error(&text, &e))?;
    file.problem.validate()?;
    Ok(file.problem)
}

/// Turns a parse error into a config error naming the offending key. Unknown
/// fields are named in the message; type errors are located through the span.
fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let message = e.message().trim().to_string();
    if let Some(rest) = message.strip_prefix("unknown field `") {
        if let Some(key) = rest.split('`').next() {
            return Error::config(key, message.clone());
        }
    }
    let key = e
        .span()
        .and_then(|span| {
            let line_start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let line = &text[line_start..];
            let line = line.lines().next()?;
            let (lhs, _) = line.split_once('=')?;
            let key = lhs.trim().trim_matches('"');
            (!key.is_empty()).then(|| key.to_string())
        })
        .unwrap_or_else(|| "manifest".to_string());
    Error::config(key, message)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunManifest> {
        parse_manifest(text, &Overrides::default())
    }

    fn key_of(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    const MINIMAL: &str = "[run]\nmode = \"fixed\"\nseed = 0\nout = \"o\"\n";

    #[test]
    fn defaults_ship_reference_problem() {
        let m = parse(MINIMAL).unwrap();
        assert_eq!(m.problem, ProblemConfig::default());
        let p = m.problem;
        assert_eq!(
            (p.l, p.t_end, p.k, p.mu2, p.mu1, p.p_in, p.p_out),
            (1.0, 0.5, 1.0, 1.0, 1e-5, 1.0, 0.0)
        );
        assert_eq!(m.adam.beta1, 0.9);
        assert_eq!(m.adam.iterations, 5000);
        assert_eq!(m.adaptivity.iterations_per_step, 50);
    }

    #[test]
    fn negative_viscosity_names_key() {
        let err = parse(&format!("{MINIMAL}[problem]\nmu1 = -1.0\n")).unwrap_err();
        assert_eq!(key_of(err), "mu1");
    }

    #[test]
    fn non_numeric_value_names_key() {
        let err = parse(&format!("{MINIMAL}[adam]\nlearning_rate = \"fast\"\n")).unwrap_err();
        assert_eq!(key_of(err), "learning_rate");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse(&format!("{MINIMAL}[adam]\nbeta3 = 0.5\n")).unwrap_err();
        assert_eq!(key_of(err), "beta3");
    }

    #[test]
    fn missing_mode_is_an_error_unless_overridden() {
        let text = "[run]\nseed = 1\nout = \"o\"\n";
        assert_eq!(key_of(parse(text).unwrap_err()), "mode");
        let m = parse_manifest(
            text,
            &Overrides {
                mode: Some(Mode::Adaptive),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m.mode, Mode::Adaptive);
    }

    #[test]
    fn overrides_take_precedence() {
        let m = parse_manifest(
            MINIMAL,
            &Overrides {
                mode: Some(Mode::Adaptive),
                seed: Some(9),
                out: Some("elsewhere".into()),
            },
        )
        .unwrap();
        assert_eq!(
            (m.mode, m.seed, m.out),
            (Mode::Adaptive, 9, PathBuf::from("elsewhere"))
        );
    }

    #[test]
    fn end_time_accepts_both_spellings() {
        let a = parse(&format!("{MINIMAL}[problem]\nT = 0.45\n")).unwrap();
        let b = parse(&format!("{MINIMAL}[problem]\nt_end = 0.45\n")).unwrap();
        assert_eq!(a.problem.t_end, 0.45);
        assert_eq!(a.problem, b.problem);
    }

    #[test]
    fn adaptive_mode_validates_adaptivity_block() {
        let text = "[run]\nmode = \"adaptive\"\nseed = 0\nout = \"o\"\n[adaptivity]\niterations_per_step = 0\n";
        assert_eq!(key_of(parse(text).unwrap_err()), "iterations_per_step");
        let fixed = text.replace("adaptive", "fixed");
        assert!(parse(&fixed).is_ok());
    }

    #[test]
    fn serialized_manifest_round_trips() {
        let mut m = RunManifest::with_defaults(Mode::Adaptive, 3, "x/y");
        m.problem.mu1 = 2e-5;
        m.adaptivity.points_per_step = 17;
        let back = parse(&m.to_toml()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn evaluation_window_is_checked() {
        let err = parse(&format!(
            "{MINIMAL}[evaluation]\nfront_window = [0.1, 0.9]\n"
        ))
        .unwrap_err();
        assert_eq!(key_of(err), "front_window");
    }
}
