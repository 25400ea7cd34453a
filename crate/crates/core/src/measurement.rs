//! Tribometer trial reduction.
//!
//! The incline tribometer reports a critical angle at first slip (static
//! regime) or a held angle plus a gate-to-gate transit time (kinetic
//! regime). Both are corrected for the V-groove counterface by a factor
//! `cos(beta)`, where `beta` is the sunken half-angle of the groove.
//!
//! Angles are accepted in degrees and converted once on entry.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{FrictionDataset, MaterialClass, MaterialLibrary};
use crate::error::{Error, Result};

/// Default separation between the two laser gates, in meters.
pub const DEFAULT_GATE_DISTANCE_M: f64 = 0.3;
pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Static,
    Kinetic,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Static => "static",
            Regime::Kinetic => "kinetic",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "static" | "s" => Ok(Regime::Static),
            "kinetic" | "k" => Ok(Regime::Kinetic),
            other => Err(Error::schema(format!("unknown regime `{other}`"))),
        }
    }
}

/// Block fabric direction × surface fabric direction (warp/weft).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Ww,
    Wf,
    Fw,
    Ff,
    None,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Ww => "ww",
            Orientation::Wf => "wf",
            Orientation::Fw => "fw",
            Orientation::Ff => "ff",
            Orientation::None => "none",
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ww" => Ok(Orientation::Ww),
            "wf" => Ok(Orientation::Wf),
            "fw" => Ok(Orientation::Fw),
            "ff" => Ok(Orientation::Ff),
            "" | "none" => Ok(Orientation::None),
            other => Err(Error::schema(format!("unknown orientation `{other}`"))),
        }
    }
}

/// One raw tribometer trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub block: String,
    pub surface: String,
    pub regime: Regime,
    pub orientation: Orientation,
    pub theta_deg: f64,
    pub transit_time_s: Option<f64>,
    pub gate_distance_m: Option<f64>,
    pub beta_deg: f64,
    pub gravity: f64,
}

/// A kinetic coefficient together with the consistency flag. Negative
/// values are kept as-is and flagged instead of being clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KineticMu {
    pub value: f64,
    pub inconsistent: bool,
}

fn check_angle(name: &str, deg: f64) -> Result<()> {
    if !(0.0..90.0).contains(&deg) {
        return Err(Error::domain(format!(
            "{name} must lie in [0, 90) degrees, got {deg}"
        )));
    }
    Ok(())
}

/// Groove-corrected static coefficient `tan(theta_s) * cos(beta)`.
pub fn static_mu(theta_s_deg: f64, beta_deg: f64) -> Result<f64> {
    check_angle("theta_s", theta_s_deg)?;
    check_angle("beta", beta_deg)?;
    Ok(theta_s_deg.to_radians().tan() * beta_deg.to_radians().cos())
}

/// Groove-corrected kinetic coefficient from a uniformly accelerated
/// transit over `d` meters in `t` seconds:
/// `[tan(theta_k) - 2d / (g t^2 cos(theta_k))] * cos(beta)`.
pub fn kinetic_mu(theta_k_deg: f64, t: f64, d: f64, g: f64, beta_deg: f64) -> Result<KineticMu> {
    if !(theta_k_deg > 0.0 && theta_k_deg < 90.0) {
        return Err(Error::domain(format!(
            "theta_k must lie in (0, 90) degrees, got {theta_k_deg}"
        )));
    }
    check_angle("beta", beta_deg)?;
    for (name, v) in [("transit time", t), ("gate distance", d), ("gravity", g)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::domain(format!("{name} must be positive, got {v}")));
        }
    }
    let theta = theta_k_deg.to_radians();
    let planar = theta.tan() - 2.0 * d / (g * t * t * theta.cos());
    let value = planar * beta_deg.to_radians().cos();
    Ok(KineticMu {
        value,
        inconsistent: value < 0.0,
    })
}

impl TrialRecord {
    pub fn validate(&self) -> Result<()> {
        check_angle("theta_deg", self.theta_deg)?;
        check_angle("beta_deg", self.beta_deg)?;
        if self.regime == Regime::Kinetic {
            match (self.transit_time_s, self.gate_distance_m) {
                (Some(t), Some(d)) if t > 0.0 && d > 0.0 => {}
                _ => {
                    return Err(Error::schema(format!(
                        "kinetic trial {}/{} needs positive transit time and gate distance",
                        self.block, self.surface
                    )))
                }
            }
        }
        Ok(())
    }

    /// Coefficient for this trial plus a flag for negative kinetic results.
    pub fn coefficient(&self) -> Result<KineticMu> {
        self.validate()?;
        match self.regime {
            Regime::Static => Ok(KineticMu {
                value: static_mu(self.theta_deg, self.beta_deg)?,
                inconsistent: false,
            }),
            Regime::Kinetic => kinetic_mu(
                self.theta_deg,
                self.transit_time_s.unwrap_or_default(),
                self.gate_distance_m.unwrap_or(DEFAULT_GATE_DISTANCE_M),
                self.gravity,
                self.beta_deg,
            ),
        }
    }

    pub fn group_key(&self) -> GroupKey {
        GroupKey {
            block: self.block.clone(),
            surface: self.surface.clone(),
            regime: self.regime,
            orientation: self.orientation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub block: String,
    pub surface: String,
    pub regime: Regime,
    pub orientation: Orientation,
}

/// Repeat statistics for one (block, surface, regime, orientation) group.
/// `std` is the population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub inconsistent: usize,
}

/// Mean and population standard deviation of a set of coefficients.
pub fn summarize(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::schema("cannot aggregate an empty trial list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Aggregate repeated trials of a single group.
pub fn aggregate_trials(trials: &[TrialRecord]) -> Result<TrialSummary> {
    let first = trials
        .first()
        .ok_or_else(|| Error::schema("cannot aggregate an empty trial list"))?;
    let key = first.group_key();
    let mut values = Vec::with_capacity(trials.len());
    let mut inconsistent = 0;
    for trial in trials {
        if trial.group_key() != key {
            return Err(Error::schema(format!(
                "mixed groups in aggregation: {:?} vs {:?}",
                key,
                trial.group_key()
            )));
        }
        let mu = trial.coefficient()?;
        inconsistent += usize::from(mu.inconsistent);
        values.push(mu.value);
    }
    let (mean, std) = summarize(&values)?;
    Ok(TrialSummary {
        mean,
        std,
        count: values.len(),
        inconsistent,
    })
}

/// Group a mixed trial list and aggregate each group. Output is ordered by key.
pub fn aggregate_groups(trials: &[TrialRecord]) -> Result<BTreeMap<GroupKey, TrialSummary>> {
    let mut groups: BTreeMap<GroupKey, Vec<TrialRecord>> = BTreeMap::new();
    for t in trials {
        groups.entry(t.group_key()).or_default().push(t.clone());
    }
    groups
        .into_iter()
        .map(|(k, ts)| aggregate_trials(&ts).map(|s| (k, s)))
        .collect()
}

pub const TRIAL_CSV_HEADER: [&str; 9] = [
    "block",
    "surface",
    "regime",
    "orientation",
    "theta_deg",
    "transit_time_s",
    "gate_distance_m",
    "beta_deg",
    "gravity",
];

fn parse_opt(field: &str, col: &str, line: usize) -> Result<Option<f64>> {
    let s = field.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::schema(format!("line {line}: bad number `{s}` in column {col}")))
}

/// Parse a trial CSV with the canonical header. Empty cells mark
/// inapplicable fields; a missing gravity defaults to 9.81 m/s².
pub fn read_trials<R: Read>(reader: R) -> Result<Vec<TrialRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != TRIAL_CSV_HEADER {
        return Err(Error::schema(format!(
            "trial CSV header must be `{}`, got `{}`",
            TRIAL_CSV_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let get = |j: usize| rec.get(j).unwrap_or("");
        let need = |j: usize| -> Result<f64> {
            parse_opt(get(j), TRIAL_CSV_HEADER[j], line)?.ok_or_else(|| {
                Error::schema(format!(
                    "line {line}: column {} is required",
                    TRIAL_CSV_HEADER[j]
                ))
            })
        };
        let trial = TrialRecord {
            block: get(0).to_string(),
            surface: get(1).to_string(),
            regime: get(2).parse()?,
            orientation: get(3).parse()?,
            theta_deg: need(4)?,
            transit_time_s: parse_opt(get(5), "transit_time_s", line)?,
            gate_distance_m: parse_opt(get(6), "gate_distance_m", line)?,
            beta_deg: parse_opt(get(7), "beta_deg", line)?.unwrap_or(0.0),
            gravity: parse_opt(get(8), "gravity", line)?.unwrap_or(STANDARD_GRAVITY),
        };
        if trial.block.is_empty() || trial.surface.is_empty() {
            return Err(Error::schema(format!("line {line}: empty material name")));
        }
        trial.validate()?;
        out.push(trial);
    }
    Ok(out)
}

/// Channel label of a trial group: the regime, suffixed by the
/// orientation when there is one (`static_wf`).
pub fn channel_label(regime: Regime, orientation: Orientation) -> String {
    match orientation {
        Orientation::None => regime.as_str().to_string(),
        o => format!("{regime}_{o}"),
    }
}

/// Result of assembling trials into a dataset.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: FrictionDataset,
    pub groups: BTreeMap<GroupKey, TrialSummary>,
    /// Group means moved into `[0, mu_max]`.
    pub clamped: usize,
}

/// Aggregate trials into a symmetrized dataset. Materials are sorted by
/// name; channels by regime then orientation. Group means land at
/// `(block, surface)`; the reversed measurement, when present, is averaged
/// in by symmetrization. Materials missing from `classes` are `Other`.
pub fn dataset_from_trials(
    trials: &[TrialRecord],
    classes: &BTreeMap<String, MaterialClass>,
    mu_max: f64,
) -> Result<Ingested> {
    let groups = aggregate_groups(trials)?;
    if groups.is_empty() {
        return Err(Error::schema("no trials to ingest"));
    }
    let names: BTreeSet<&str> = groups
        .keys()
        .flat_map(|k| [k.block.as_str(), k.surface.as_str()])
        .collect();
    let names: Vec<String> = names.into_iter().map(str::to_string).collect();
    let cls = names
        .iter()
        .map(|n| classes.get(n).copied().unwrap_or(MaterialClass::Other))
        .collect();
    let library = MaterialLibrary::new(names, cls)?;
    let mut labels: BTreeSet<(Regime, Orientation)> =
        groups.keys().map(|k| (k.regime, k.orientation)).collect();
    // an orientation channel needs its transpose partner
    for (r, o) in labels.clone() {
        match o {
            Orientation::Wf => labels.insert((r, Orientation::Fw)),
            Orientation::Fw => labels.insert((r, Orientation::Wf)),
            _ => false,
        };
    }
    let channels: Vec<String> = labels.iter().map(|&(r, o)| channel_label(r, o)).collect();
    let mut ds = FrictionDataset::new(library, channels, mu_max)?;
    let mut clamped = 0;
    for (key, summary) in &groups {
        let i = ds.library().index_of(&key.block)?;
        let j = ds.library().index_of(&key.surface)?;
        let c = ds.channel_index(&channel_label(key.regime, key.orientation))?;
        clamped += usize::from(!(0.0..=mu_max).contains(&summary.mean));
        ds.set_clamped(i, j, c, summary.mean);
    }
    Ok(Ingested {
        dataset: ds.symmetrize(),
        groups,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(theta: f64) -> TrialRecord {
        TrialRecord {
            block: "a".into(),
            surface: "b".into(),
            regime: Regime::Static,
            orientation: Orientation::None,
            theta_deg: theta,
            transit_time_s: None,
            gate_distance_m: None,
            beta_deg: 0.0,
            gravity: STANDARD_GRAVITY,
        }
    }

    #[test]
    fn static_cases() {
        assert!((static_mu(45.0, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(static_mu(0.0, 15.0).unwrap(), 0.0);
        assert!(static_mu(90.0, 0.0).is_err());
        assert!(static_mu(-1.0, 0.0).is_err());
    }

    #[test]
    fn kinetic_domain_errors() {
        assert!(kinetic_mu(30.0, 0.0, 0.3, 9.81, 0.0).is_err());
        assert!(kinetic_mu(30.0, 1.0, -0.3, 9.81, 0.0).is_err());
        assert!(kinetic_mu(30.0, 1.0, 0.3, 0.0, 0.0).is_err());
        assert!(kinetic_mu(0.0, 1.0, 0.3, 9.81, 0.0).is_err());
    }

    #[test]
    fn kinetic_negative_is_flagged_not_clamped() {
        // Transit faster than frictionless free slide.
        let mu = kinetic_mu(30.0, 0.2, 0.3, 9.81, 0.0).unwrap();
        assert!(mu.value < 0.0);
        assert!(mu.inconsistent);
    }

    #[test]
    fn aggregate_simple() {
        let s = aggregate_trials(&[trial(45.0)]).unwrap();
        assert_eq!((s.count, s.std), (1, 0.0));
        assert!((s.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_mixed_groups() {
        let mut other = trial(30.0);
        other.surface = "c".into();
        assert!(matches!(
            aggregate_trials(&[trial(45.0), other]),
            Err(Error::Schema(_))
        ));
        assert!(aggregate_trials(&[]).is_err());
    }

    #[test]
    fn summarize_symmetric_pair() {
        let (m, s) = summarize(&[0.4, 0.6]).unwrap();
        assert!((m - 0.5).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-15);
    }

    #[test]
    fn csv_parsing() {
        let text = "block,surface,regime,orientation,theta_deg,transit_time_s,gate_distance_m,beta_deg,gravity\n\
                    a,b,static,,30,,,15,\n\
                    a,b,kinetic,ww,32,0.8,0.3,15,9.81\n";
        let trials = read_trials(text.as_bytes()).unwrap();
        assert_eq!(trials.len(), 2);
        assert_eq!(trials[0].orientation, Orientation::None);
        assert_eq!(trials[0].gravity, STANDARD_GRAVITY);
        assert_eq!(trials[1].transit_time_s, Some(0.8));

        let bad = "block,surface\na,b\n";
        assert!(matches!(read_trials(bad.as_bytes()), Err(Error::Schema(_))));
        let missing_time = "block,surface,regime,orientation,theta_deg,transit_time_s,gate_distance_m,beta_deg,gravity\n\
                            a,b,kinetic,,30,,0.3,15,\n";
        assert!(read_trials(missing_time.as_bytes()).is_err());
    }
    #[test]
    fn trials_assemble_into_symmetric_dataset() {
        let csv = "block,surface,regime,orientation,theta_deg,transit_time_s,gate_distance_m,beta_deg,gravity
a,b,static,,30,,,0,
a,b,static,,40,,,0,
b,a,static,,35,,,0,
a,a,kinetic,,35,1.0,0.3,0,
b,c,static,wf,20,,,0,
";
        let trials = read_trials(csv.as_bytes()).unwrap();
        let classes = BTreeMap::from([("c".to_string(), MaterialClass::Woven)]);
        let ing = dataset_from_trials(&trials, &classes, 2.0).unwrap();
        let ds = &ing.dataset;
        assert_eq!(ds.library().names(), ["a", "b", "c"]);
        assert_eq!(
            ds.channels(),
            ["static_wf", "static_fw", "static", "kinetic"].map(String::from)
        );
        let ab = 0.5 * (30f64.to_radians().tan() + 40f64.to_radians().tan());
        let expected = 0.5 * (ab + 35f64.to_radians().tan());
        let s = ds.channel_index("static").unwrap();
        assert!((ds.get(0, 1, s).unwrap() - expected).abs() < 1e-12);
        assert_eq!(ds.get(0, 1, s), ds.get(1, 0, s));
        let wf = ds.channel_index("static_wf").unwrap();
        let fw = ds.channel_index("static_fw").unwrap();
        assert_eq!(ds.get(1, 2, wf), ds.get(2, 1, fw));
        assert!(!ds.observed(1, 2, fw));
        assert_eq!(ds.library().class(2), MaterialClass::Woven);
        assert_eq!(ing.clamped, 0);
        ds.check_invariants(true).unwrap();
    }
}
