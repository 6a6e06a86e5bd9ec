//! Experiment configuration: dotted-key TOML over built-in defaults, with
//! `key=value` overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pfda_core::data::{PhantomSpec, SOURCE_SITE, TARGET_SITE};
use pfda_core::model::ModelConfig;
use pfda_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

/// DiceCE/Focal weighting of the segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub dice_ce: f64,
    pub focal: f64,
}

impl Ratio {
    /// The three weightings of the ablation grid, in table order.
    pub const GRID: [Ratio; 3] = [
        Ratio { dice_ce: 0.5, focal: 0.5 },
        Ratio { dice_ce: 0.6, focal: 0.4 },
        Ratio { dice_ce: 0.7, focal: 0.3 },
    ];

    pub fn label(&self) -> String {
        format!("{}/{}", self.dice_ce, self.focal)
    }

    /// Directory-safe form of the label.
    pub fn slug(&self) -> String {
        format!("{}-{}", self.dice_ce, self.focal)
    }
}

impl Default for Ratio {
    fn default() -> Self {
        Ratio::GRID[1]
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let allowed = || Ratio::GRID.iter().map(Ratio::label).collect::<Vec<_>>().join(", ");
        let parts: Vec<&str> = s.split('/').map(str::trim).collect();
        let nums: Option<Vec<f64>> = parts.iter().map(|p| p.parse::<f64>().ok()).collect();
        let (a, b) = match nums.as_deref() {
            Some(&[a, b]) if a.is_finite() && b.is_finite() => (a, b),
            _ => {
                return Err(Error::Config(format!(
                    "ratio {s:?} is not of the form <dice_ce>/<focal>; expected one of {}",
                    allowed()
                )))
            }
        };
        if (a + b - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ratio {s:?}: components sum to {}, expected 1; expected one of {}",
                a + b,
                allowed()
            )));
        }
        Ratio::GRID
            .into_iter()
            .find(|r| (r.dice_ce - a).abs() < 1e-9 && (r.focal - b).abs() < 1e-9)
            .ok_or_else(|| Error::Config(format!("ratio {s:?} is not on the grid; expected one of {}", allowed())))
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.label()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory with a `manifest.csv`; phantoms are generated
    /// from `phantom.*` when unset.
    pub root: Option<PathBuf>,
    /// Labelled site.
    pub source_site: String,
    /// Site whose labels are held out from training.
    pub target_site: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            source_site: SOURCE_SITE.into(),
            target_site: TARGET_SITE.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub phantom: PhantomSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ratio: Ratio,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            phantom: PhantomSpec::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            ratio: Ratio::default(),
        }
    }
}

const ALPHA_MIX: [&str; 3] = ["train", "weights", "alpha_mix"];

impl ExperimentConfig {
    /// Reads `path` (if any), applies `sets` in order, and validates.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut user = match path {
            Some(p) => {
                let text = fs::read_to_string(p)?;
                toml::from_str::<Table>(&text).map_err(|source| Error::Toml {
                    path: p.to_path_buf(),
                    source,
                })?
            }
            None => Table::new(),
        };
        for s in sets {
            apply_set(&mut user, s)?;
        }
        Self::from_table(user)
    }

    /// Merges a user table over the defaults and validates the result.
    pub fn from_table(user: Table) -> Result<Self> {
        if lookup(&user, &ALPHA_MIX).is_some() {
            return Err(Error::Field {
                path: ALPHA_MIX.join("."),
                message: "the DiceCE/Focal mix is set through `ratio`".into(),
            });
        }
        let mut merged = match Value::try_from(ExperimentConfig::default()) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("defaults serialize to a table"),
        };
        merge(&mut merged, user);
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(Value::Table(merged)).map_err(|e| Error::Field {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.train.weights.alpha_mix = cfg.ratio.focal;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training settings with the segmentation mix taken from `ratio`.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.weights.alpha_mix = self.ratio.focal;
        t
    }

    pub fn validate(&self) -> Result<()> {
        let field = |path: &str, e: pfda_core::Error| Error::Field {
            path: path.into(),
            message: e.to_string(),
        };
        self.model.validate().map_err(|e| field("model", e))?;
        self.train_config().validate().map_err(|e| field("train", e))?;
        if self.data.source_site == self.data.target_site {
            return Err(Error::Field {
                path: "data.target_site".into(),
                message: "must differ from data.source_site".into(),
            });
        }
        if self.data.root.is_none() {
            let p = &self.phantom;
            p.source_site.validate().map_err(|e| field("phantom.source_site", e))?;
            p.target_site.validate().map_err(|e| field("phantom.target_site", e))?;
            if p.side != self.model.input_side {
                return Err(Error::Field {
                    path: "phantom.side".into(),
                    message: format!("{} differs from model.input_side = {}", p.side, self.model.input_side),
                });
            }
            if p.train_per_site < self.train.batch_per_domain {
                return Err(Error::Field {
                    path: "phantom.train_per_site".into(),
                    message: format!(
                        "{} is smaller than train.batch_per_domain = {}",
                        p.train_per_site, self.train.batch_per_domain
                    ),
                });
            }
            if p.val_per_site == 0 {
                return Err(Error::Field {
                    path: "phantom.val_per_site".into(),
                    message: "must be >= 1".into(),
                });
            }
        }
        Ok(())
    }

    /// Every leaf as a `dotted.key = value` pair, sorted by key.
    pub fn dotted(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut resolved = self.clone();
        resolved.train = self.train_config();
        if let Ok(Value::Table(t)) = Value::try_from(resolved) {
            flatten("", &t, &mut out);
        }
        out
    }

    /// The manifest body: every setting except the derived `alpha_mix`.
    pub fn to_manifest(&self, header: &[String]) -> String {
        let mut s = String::new();
        for h in header {
            s.push_str(&format!("# {h}\n"));
        }
        for (k, v) in self.dotted() {
            if k == ALPHA_MIX.join(".") {
                s.push_str(&format!("# {k} = {v} (from ratio)\n"));
            } else {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }
}

/// Parses `key=value`; the value is read as TOML and falls back to a bare
/// string.
fn apply_set(t: &mut Table, set: &str) -> Result<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {set:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {set:?} has an empty key segment")));
    }
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = t;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match next {
            Value::Table(inner) => inner,
            _ => return Err(Error::Config(format!("override {set:?}: `{p}` is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn lookup<'a>(t: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (first, rest) = path.split_first()?;
    let v = t.get(*first)?;
    if rest.is_empty() {
        return Some(v);
    }
    match v {
        Value::Table(inner) => lookup(inner, rest),
        _ => None,
    }
}

/// Deep merge; a user table carrying a `kind` tag replaces the default
/// wholesale since its variant fields differ.
fn merge(base: &mut Table, user: Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(u)) if !u.contains_key("kind") => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn flatten(prefix: &str, t: &Table, out: &mut Vec<(String, String)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(inner) => flatten(&key, inner, out),
            other => out.push((key, other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pfda_core::adaptation::{LambdaSchedule, StudyMode};

    fn sets(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn ratio_parsing() {
        let r: Ratio = "0.6/0.4".parse().unwrap();
        assert_eq!(r, Ratio::GRID[1]);
        assert_eq!(r.label(), "0.6/0.4");
        assert_eq!(" 0.7 / 0.3 ".parse::<Ratio>().unwrap(), Ratio::GRID[2]);
        let e = "0.9/0.2".parse::<Ratio>().unwrap_err().to_string();
        assert!(e.contains("sum"), "{e}");
        let e = "0.8/0.2".parse::<Ratio>().unwrap_err().to_string();
        assert!(e.contains("not on the grid"), "{e}");
        assert!("0.6".parse::<Ratio>().is_err());
        assert!("a/b".parse::<Ratio>().is_err());
    }

    #[test]
    fn defaults_and_overrides() {
        let c = ExperimentConfig::load(None, &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.weights.alpha_mix, 0.4);
        assert_eq!(c.train_config().weights.alpha_mix, 0.4);
        let c = ExperimentConfig::load(
            None,
            &sets(&["train.study=none", "ratio=0.7/0.3", "train.adam.lr=0.001", "phantom.seed=9"]),
        )
        .unwrap();
        assert_eq!(c.train.study, StudyMode::None);
        assert_eq!(c.train_config().weights.alpha_mix, 0.3);
        assert_eq!(c.train.adam.lr, 1e-3);
        assert_eq!(c.phantom.seed, 9);
        assert_eq!(c.model, ModelConfig::desk());
    }

    #[test]
    fn tagged_lambda_replaces_default() {
        let c = ExperimentConfig::load(None, &sets(&["train.lambda.kind=ramp", "train.lambda.max=0.5"])).unwrap();
        assert_eq!(c.train.lambda, LambdaSchedule::Ramp { max: 0.5 });
    }

    #[test]
    fn field_level_errors() {
        let err = |s: &[&str]| ExperimentConfig::load(None, &sets(s)).unwrap_err().to_string();
        let e = err(&["train.weigths.gamma=1"]);
        assert!(e.contains("train"), "{e}");
        assert!(e.contains("weigths"), "{e}");
        let e = err(&["model.embed_dim=\"wide\""]);
        assert!(e.contains("model.embed_dim"), "{e}");
        let e = err(&["ratio=0.9/0.2"]);
        assert!(e.contains("ratio") && e.contains("sum"), "{e}");
        let e = err(&["train.weights.alpha_mix=0.4"]);
        assert!(e.contains("train.weights.alpha_mix"), "{e}");
        let e = err(&["phantom.side=32"]);
        assert!(e.contains("phantom.side"), "{e}");
        let e = err(&["train.study=everything"]);
        assert!(e.contains("train.study"), "{e}");
        assert!(err(&["novalue"]).contains("key=value"));
    }

    #[test]
    fn file_with_dotted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        fs::write(&p, "model.input_side = 32\nphantom.side = 32\ntrain.epochs = 3\nratio = \"0.5/0.5\"\n").unwrap();
        let c = ExperimentConfig::load(Some(&p), &sets(&["train.epochs=4"])).unwrap();
        assert_eq!((c.model.input_side, c.train.epochs), (32, 4));
        assert_eq!(c.ratio, Ratio::GRID[0]);
        fs::write(&p, "model.input_side = \n").unwrap();
        let e = ExperimentConfig::load(Some(&p), &[]).unwrap_err().to_string();
        assert!(e.contains("exp.toml"), "{e}");
    }

    #[test]
    fn manifest_round_trip() {
        let c = ExperimentConfig::load(
            None,
            &sets(&["train.study=mmd", "ratio=0.5/0.5", "train.lambda.kind=ramp", "train.lambda.max=0.25"]),
        )
        .unwrap();
        let text = c.to_manifest(&["header line".to_string()]);
        assert!(text.starts_with("# header line\n"));
        assert!(text.contains("# train.weights.alpha_mix = 0.5 (from ratio)"));
        assert!(text.contains("model.input_side = 48\n"));
        let back = ExperimentConfig::from_table(toml::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
