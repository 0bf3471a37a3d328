//! Line-oriented `key = value` experiment configuration.
//!
//! ```text
//! scenario = tracking
//! n_runs = 100
//! seed = 7
//!
//! [scenario]
//! duration = 300
//!
//! [filter vs25]
//! kind = bruf
//! schedule = variable
//! n = 25
//! ```
//!
//! `#` starts a comment. Top-level keys come before the first section. Every
//! `[filter NAME]` section defines one filter; filters run in file order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::ensemble::EnsembleErrorNorm;
use crate::recursive::{ErrorController, IekfSettings, StepSchedule};

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    /// 1-based; 0 when the problem is not tied to one line.
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        line,
        message: message.into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    TheoremCheck,
    RangeDemo,
    Tracking,
    Lorenz96,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::TheoremCheck => "theorem-check",
            Scenario::RangeDemo => "range-demo",
            Scenario::Tracking => "tracking",
            Scenario::Lorenz96 => "lorenz96",
        }
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "theorem-check" => Ok(Scenario::TheoremCheck),
            "range-demo" => Ok(Scenario::RangeDemo),
            "tracking" => Ok(Scenario::Tracking),
            "lorenz96" => Ok(Scenario::Lorenz96),
            other => Err(format!("unknown scenario '{other}'")),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A configured filter.
#[derive(Clone, Debug, PartialEq)]
pub enum FilterKind {
    Ekf,
    Iekf(IekfSettings),
    /// Fixed-schedule recursive update (uniform or variable).
    Bruf(StepSchedule),
    EcBruf(ErrorController),
    Enkf {
        inflation: f64,
    },
    Bruenkf {
        schedule: StepSchedule,
        inflation: f64,
    },
    EcBruenkf {
        ctrl: ErrorController,
        inflation: f64,
        norm: EnsembleErrorNorm,
    },
    Gromov {
        n_steps: usize,
        /// Diagonal of the companion process noise.
        q: f64,
        resample: bool,
    },
}

impl FilterKind {
    pub fn is_ensemble(&self) -> bool {
        matches!(
            self,
            FilterKind::Enkf { .. }
                | FilterKind::Bruenkf { .. }
                | FilterKind::EcBruenkf { .. }
                | FilterKind::Gromov { .. }
        )
    }

    /// Step count for the metric rows, when it is fixed.
    pub fn steps(&self) -> Option<usize> {
        match self {
            FilterKind::Ekf | FilterKind::Enkf { .. } => Some(1),
            FilterKind::Iekf(s) => Some(s.max_iters),
            FilterKind::Bruf(s) | FilterKind::Bruenkf { schedule: s, .. } => Some(s.len()),
            FilterKind::Gromov { n_steps, .. } => Some(*n_steps),
            FilterKind::EcBruf(_) | FilterKind::EcBruenkf { .. } => None,
        }
    }

    pub fn companion_noise(&self, n: usize) -> Option<DMatrix<f64>> {
        match self {
            FilterKind::Gromov { q, .. } => Some(DMatrix::identity(n, n) * *q),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterSpec {
    pub name: String,
    pub kind: FilterKind,
}

/// Values from the `[scenario]` section. Anything left `None` takes the
/// scenario default.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScenarioOverrides {
    pub duration: Option<usize>,
    pub dt: Option<f64>,
    pub q_tilde: Option<f64>,
    pub sigma_r: Option<f64>,
    pub sigma_u: Option<f64>,
    pub sigma_v: Option<f64>,
    pub gamma: Option<f64>,
    pub steps: Option<usize>,
    pub m: Option<usize>,
    pub m_list: Option<Vec<usize>>,
    pub gamma_list: Option<Vec<f64>>,
    /// Convergence-table step counts for the range demo.
    pub n_list: Option<Vec<usize>>,
    pub grid_resolution: Option<usize>,
    pub ensemble_size: Option<usize>,
    /// Lorenz '96 convergence threshold on time-averaged RMSE.
    pub converge_below: Option<f64>,
    /// Theorem check: number of random problems and random schedules.
    pub problems: Option<usize>,
    pub schedules: Option<usize>,
    pub tolerance: Option<f64>,
    /// Theorem check negative control: scale every schedule so its
    /// coefficients sum to this value instead of one.
    pub schedule_sum: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub filters: Vec<FilterSpec>,
    pub n_runs: usize,
    pub seed: u64,
    /// Scenario default when absent.
    pub burn_in: Option<usize>,
    pub output_dir: PathBuf,
    pub overrides: ScenarioOverrides,
}

impl ExperimentConfig {
    pub fn filter(&self, name: &str) -> Option<&FilterSpec> {
        self.filters.iter().find(|f| f.name == name)
    }

    /// Stable text form covering every parameter; hashed into the manifest.
    pub fn canonical(&self) -> String {
        format!("{self:?}")
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: 0,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        text.parse()
    }
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

#[derive(Default)]
struct Section {
    header_line: usize,
    entries: BTreeMap<String, Entry>,
}

impl Section {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get_mut(key) {
            None => Ok(None),
            Some(e) => {
                e.used = true;
                e.value
                    .parse()
                    .map(Some)
                    .map_err(|x: T::Err| ConfigError {
                        line: e.line,
                        message: format!("bad value for '{key}': {x}"),
                    })
            }
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some(e) = self.entries.get_mut(key) else {
            return Ok(None);
        };
        e.used = true;
        let line = e.line;
        let items = e
            .value
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|x: T::Err| ConfigError {
                    line,
                    message: format!("bad list item for '{key}': {x}"),
                })
            })
            .collect::<Result<Vec<T>, _>>()?;
        if items.is_empty() {
            return err(line, format!("'{key}' is empty"));
        }
        Ok(Some(items))
    }

    fn finish(self, what: &str) -> Result<(), ConfigError> {
        match self.entries.iter().find(|(_, e)| !e.used) {
            Some((k, e)) => err(e.line, format!("unknown key '{k}' in {what}")),
            None => Ok(()),
        }
    }
}

fn parse_sections(text: &str) -> Result<(Section, Option<Section>, Vec<(String, Section)>), ConfigError> {
    let mut top = Section::default();
    let mut scenario: Option<Section> = None;
    let mut filters: Vec<(String, Section)> = Vec::new();
    // 0 = top, 1 = scenario, 2 = last filter
    let mut current = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(header) = content.strip_prefix('[') {
            let Some(header) = header.strip_suffix(']') else {
                return err(line, "unterminated section header");
            };
            let mut words = header.split_whitespace();
            match (words.next(), words.next(), words.next()) {
                (Some("scenario"), None, _) => {
                    if scenario.is_some() {
                        return err(line, "duplicate [scenario] section");
                    }
                    scenario = Some(Section {
                        header_line: line,
                        ..Default::default()
                    });
                    current = 1;
                }
                (Some("filter"), Some(name), None) => {
                    if filters.iter().any(|(n, _)| n == name) {
                        return err(line, format!("duplicate filter '{name}'"));
                    }
                    filters.push((
                        name.to_string(),
                        Section {
                            header_line: line,
                            ..Default::default()
                        },
                    ));
                    current = 2;
                }
                _ => return err(line, format!("unknown section [{header}]")),
            }
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return err(line, "expected 'key = value'");
        };
        let key = key.trim().to_string();
        if key.is_empty() {
            return err(line, "empty key");
        }
        let section = match current {
            0 => &mut top,
            1 => scenario.as_mut().expect("scenario section open"),
            _ => &mut filters.last_mut().expect("filter section open").1,
        };
        let entry = Entry {
            value: value.trim().to_string(),
            line,
            used: false,
        };
        if section.entries.insert(key.clone(), entry).is_some() {
            return err(line, format!("duplicate key '{key}'"));
        }
    }
    Ok((top, scenario, filters))
}

fn parse_schedule(s: &mut Section, default_n: usize) -> Result<StepSchedule, ConfigError> {
    let n: usize = s.take("n")?.unwrap_or(default_n);
    if n == 0 {
        return err(s.header_line, "n must be >= 1");
    }
    let kind: String = s.take("schedule")?.unwrap_or_else(|| "uniform".into());
    match kind.as_str() {
        "uniform" => Ok(StepSchedule::Uniform(n)),
        "variable" => Ok(StepSchedule::Variable(n)),
        other => err(s.header_line, format!("unknown schedule '{other}'")),
    }
}

fn parse_controller(s: &mut Section) -> Result<ErrorController, ConfigError> {
    let mut c = ErrorController::default();
    if let Some(tol) = s.take::<f64>("tol")? {
        c.atol = tol;
        c.rtol = tol;
    }
    c.atol = s.take("atol")?.unwrap_or(c.atol);
    c.rtol = s.take("rtol")?.unwrap_or(c.rtol);
    c.safety = s.take("f")?.unwrap_or(c.safety);
    c.f_min = s.take("f_min")?.unwrap_or(c.f_min);
    c.f_max = s.take("f_max")?.unwrap_or(c.f_max);
    c.initial_steps = s.take("n0")?.unwrap_or(c.initial_steps);
    c.max_rejections = s.take("max_rejections")?.unwrap_or(c.max_rejections);
    c.validate().map_err(|e| ConfigError {
        line: s.header_line,
        message: e.to_string(),
    })?;
    Ok(c)
}

fn parse_filter(name: String, mut s: Section) -> Result<FilterSpec, ConfigError> {
    let header = s.header_line;
    let Some(kind) = s.take::<String>("kind")? else {
        return err(header, format!("filter '{name}' has no kind"));
    };
    let inflation = |s: &mut Section| -> Result<f64, ConfigError> {
        let a: f64 = s.take("alpha")?.unwrap_or(1.0);
        if !(a >= 1.0) || !a.is_finite() {
            return err(header, format!("alpha must be >= 1, got {a}"));
        }
        Ok(a)
    };
    let kind = match kind.as_str() {
        "ekf" => FilterKind::Ekf,
        "iekf" => {
            let d = IekfSettings::default();
            FilterKind::Iekf(IekfSettings {
                max_iters: s.take("max_iters")?.unwrap_or(d.max_iters),
                tol: s.take("tol")?.unwrap_or(d.tol),
                line_search: s.take("line_search")?.unwrap_or(d.line_search),
            })
        }
        "bruf" => FilterKind::Bruf(parse_schedule(&mut s, 10)?),
        "ec-bruf" => FilterKind::EcBruf(parse_controller(&mut s)?),
        "enkf" => FilterKind::Enkf {
            inflation: inflation(&mut s)?,
        },
        "bruenkf" => FilterKind::Bruenkf {
            schedule: parse_schedule(&mut s, 25)?,
            inflation: inflation(&mut s)?,
        },
        "ec-bruenkf" => {
            let norm = match s.take::<String>("norm")?.as_deref() {
                None | Some("max-member") => EnsembleErrorNorm::MaxMember,
                Some("mean") => EnsembleErrorNorm::Mean,
                Some(other) => return err(header, format!("unknown norm '{other}'")),
            };
            FilterKind::EcBruenkf {
                ctrl: parse_controller(&mut s)?,
                inflation: inflation(&mut s)?,
                norm,
            }
        }
        "gromov" => {
            let n_steps: usize = s.take("n")?.unwrap_or(25);
            if n_steps == 0 {
                return err(header, "n must be >= 1");
            }
            FilterKind::Gromov {
                n_steps,
                q: s.take("q")?.unwrap_or(0.1),
                resample: s.take("resample")?.unwrap_or(true),
            }
        }
        other => return err(header, format!("unknown filter kind '{other}'")),
    };
    s.finish(&format!("filter '{name}'"))?;
    Ok(FilterSpec { name, kind })
}

fn parse_overrides(s: Option<Section>) -> Result<ScenarioOverrides, ConfigError> {
    let Some(mut s) = s else {
        return Ok(ScenarioOverrides::default());
    };
    let o = ScenarioOverrides {
        duration: s.take("duration")?,
        dt: s.take("dt")?,
        q_tilde: s.take("q_tilde")?,
        sigma_r: s.take("sigma_r")?,
        sigma_u: s.take("sigma_u")?,
        sigma_v: s.take("sigma_v")?,
        gamma: s.take("gamma")?,
        steps: s.take("steps")?,
        m: s.take("m")?,
        m_list: s.take_list("m_list")?,
        gamma_list: s.take_list("gamma_list")?,
        n_list: s.take_list("n_list")?,
        grid_resolution: s.take("grid_resolution")?,
        ensemble_size: s.take("ensemble_size")?,
        converge_below: s.take("converge_below")?,
        problems: s.take("problems")?,
        schedules: s.take("schedules")?,
        tolerance: s.take("tolerance")?,
        schedule_sum: s.take("schedule_sum")?,
    };
    s.finish("[scenario]")?;
    Ok(o)
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let (mut top, scenario, filters) = parse_sections(text)?;
        let Some(kind) = top.take::<Scenario>("scenario")? else {
            return err(0, "missing 'scenario'");
        };
        let cfg = ExperimentConfig {
            scenario: kind,
            n_runs: top.take("n_runs")?.unwrap_or(1),
            seed: top.take("seed")?.unwrap_or(0),
            burn_in: top.take("burn_in")?,
            output_dir: top
                .take::<String>("output_dir")?
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("out")),
            overrides: parse_overrides(scenario)?,
            filters: filters
                .into_iter()
                .map(|(n, s)| parse_filter(n, s))
                .collect::<Result<_, _>>()?,
        };
        top.finish("top level")?;
        if cfg.n_runs == 0 {
            return err(0, "n_runs must be >= 1");
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
scenario = tracking   # comment
n_runs = 3
seed = 42

[scenario]
duration = 50
m_list = 10, 15,20

[filter vs25]
kind = bruf
schedule = variable
n = 25

[filter ec]
kind = ec-bruf
tol = 1e-7
";

    #[test]
    fn parses_sample() {
        let cfg: ExperimentConfig = SAMPLE.parse().unwrap();
        assert_eq!(cfg.scenario, Scenario::Tracking);
        assert_eq!(cfg.n_runs, 3);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.overrides.duration, Some(50));
        assert_eq!(cfg.overrides.m_list, Some(vec![10, 15, 20]));
        assert_eq!(cfg.filters[0].kind, FilterKind::Bruf(StepSchedule::Variable(25)));
        match &cfg.filter("ec").unwrap().kind {
            FilterKind::EcBruf(c) => assert_eq!((c.atol, c.rtol), (1e-7, 1e-7)),
            k => panic!("{k:?}"),
        }
    }

    #[test]
    fn rejects_unknown_key_with_line() {
        let e = "scenario = tracking\n[filter a]\nkind = ekf\nbogus = 1\n"
            .parse::<ExperimentConfig>()
            .unwrap_err();
        assert_eq!(e.line, 4);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "scenario = nope",
            "n_runs = 2",
            "scenario = tracking\nn_runs = 0",
            "scenario = tracking\n[filter a]\nkind = enkf\nalpha = 0.5",
            "scenario = tracking\n[filter a]\nkind = bruf\nschedule = odd",
            "scenario = tracking\n[filter a]\nkind = ekf\n[filter a]\nkind = ekf",
            "scenario = tracking\nseed = -1",
            "scenario = tracking\n[oops]",
        ] {
            assert!(text.parse::<ExperimentConfig>().is_err(), "{text}");
        }
    }

    #[test]
    fn canonical_tracks_parameters() {
        let a: ExperimentConfig = SAMPLE.parse().unwrap();
        let b: ExperimentConfig = SAMPLE.replace("n = 25", "n = 24").parse().unwrap();
        assert_ne!(a.canonical(), b.canonical());
        assert_eq!(a.canonical(), SAMPLE.parse::<ExperimentConfig>().unwrap().canonical());
    }
}
