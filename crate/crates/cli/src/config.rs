//! Flat `key=value` run configuration. Every key has a default; a config
//! file is applied first and command-line flags after it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use advshield::attacks::{AttackConfig, AttackKind};

use crate::Usage;

/// Attack step size: a fixed value or a fraction of the budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alpha {
    Ratio(f64),
    Fixed(f64),
}

impl Alpha {
    pub fn resolve(self, epsilon: f64) -> f64 {
        match self {
            Alpha::Ratio(r) => r * epsilon,
            Alpha::Fixed(a) => a,
        }
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Ratio(r) => write!(f, "{r}eps"),
            Alpha::Fixed(a) => write!(f, "{a}"),
        }
    }
}

impl FromStr for Alpha {
    type Err = String;

    /// `0.015` is a fixed step, `0.1eps` a tenth of epsilon.
    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad alpha {s:?}"));
        match s.strip_suffix("eps") {
            Some(r) => Ok(Alpha::Ratio(num(r)?)),
            None => Ok(Alpha::Fixed(num(s)?)),
        }
    }
}

/// Attack used to build defense training inputs; `none` trains on clean
/// images only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recipe(pub Option<AttackKind>);

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(k) => write!(f, "{k}"),
            None => f.write_str("none"),
        }
    }
}

impl FromStr for Recipe {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("none") {
            Ok(Recipe(None))
        } else {
            s.parse::<AttackKind>().map(|k| Recipe(Some(k))).map_err(|e| e.to_string())
        }
    }
}

macro_rules! run_config {
    ($($field:ident : $ty:ty = $default:expr,)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), Usage> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($field) => {
                        self.$field = value
                            .parse()
                            .map_err(|e| Usage(format!("bad value {value:?} for {key}: {e}")))?;
                    })*
                    other => return Err(Usage(format!("unknown config key {other:?}"))),
                }
                Ok(())
            }

            pub fn pairs(&self) -> Vec<(String, String)> {
                vec![$((stringify!($field).to_string(), self.$field.to_string()),)*]
            }
        }
    };
}

run_config! {
    data: String = "synthetic".into(),
    data_seed: u64 = 0,
    train_per_class: usize = 500,
    test_per_class: usize = 100,
    train_limit: usize = 0,
    test_limit: usize = 0,
    out: String = "out".into(),
    model: String = String::new(),
    defense: String = String::new(),
    seed: u64 = 0,
    threads: usize = 0,
    epochs: usize = 5,
    lr: f64 = 0.05,
    momentum: f64 = 0.9,
    batch_size: usize = 128,
    kind: AttackKind = AttackKind::Fgsm,
    eps: f64 = 0.6,
    alpha: Alpha = Alpha::Ratio(0.1),
    steps: usize = AttackConfig::DEFAULT_STEPS,
    restarts: usize = 1,
    attack_batch: usize = 100,
    recipe: Recipe = Recipe(Some(AttackKind::Fgsm)),
    recipe_eps: f64 = 0.6,
    recipe_alpha: Alpha = Alpha::Ratio(0.1),
    recipe_steps: usize = AttackConfig::DEFAULT_STEPS,
    sigma: f64 = 0.1,
    clean_mix: f64 = 0.25,
    bottleneck: usize = advshield::defense::DEFAULT_BOTTLENECK,
    defense_epochs: usize = 10,
    defense_lr: f64 = 1.0,
    eps_grid: String = String::new(),
    latency_batch: usize = 100,
    warmup: usize = 2,
    trials: usize = 10,
    grid_cols: usize = 8,
}

impl RunConfig {
    /// Applies `key=value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), Usage> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Usage(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), Usage> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn model_path(&self) -> PathBuf {
        if self.model.is_empty() {
            self.out_dir().join("classifier.ckpt")
        } else {
            PathBuf::from(&self.model)
        }
    }

    pub fn defense_path(&self) -> PathBuf {
        if self.defense.is_empty() {
            self.out_dir().join("defense.ckpt")
        } else {
            PathBuf::from(&self.defense)
        }
    }

    pub fn attack(&self) -> AttackConfig {
        AttackConfig {
            alpha: self.alpha.resolve(self.eps),
            steps: self.steps,
            restarts: self.restarts,
            seed: self.seed,
            ..AttackConfig::new(self.kind, self.eps)
        }
    }

    pub fn recipe_attack(&self) -> Option<AttackConfig> {
        self.recipe.0.map(|kind| AttackConfig {
            alpha: self.recipe_alpha.resolve(self.recipe_eps),
            steps: self.recipe_steps,
            ..AttackConfig::new(kind, self.recipe_eps)
        })
    }

    pub fn eps_list(&self, kind: AttackKind) -> Result<Vec<f64>, Usage> {
        if self.eps_grid.trim().is_empty() {
            return Ok(match kind {
                AttackKind::Fgsm => advshield::eval::FGSM_GRID.to_vec(),
                _ => advshield::eval::PGD_GRID.to_vec(),
            });
        }
        self.eps_grid
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Usage(format!("bad epsilon {s:?} in eps_grid"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nkind=pgd\neps = 0.15\nalpha=0.015\nrecipe=none\n\n").unwrap();
        assert_eq!(c.kind, AttackKind::Pgd);
        assert_eq!(c.alpha, Alpha::Fixed(0.015));
        assert_eq!(c.recipe, Recipe(None));
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("eps", "abc").is_err());
        assert!(c.apply_text("eps").is_err());
    }

    #[test]
    fn alpha_forms() {
        assert_eq!("0.1eps".parse::<Alpha>().unwrap().resolve(0.3), 0.1 * 0.3);
        assert_eq!("0.02".parse::<Alpha>().unwrap().resolve(0.3), 0.02);
        assert_eq!(Alpha::Ratio(0.1).to_string().parse::<Alpha>().unwrap(), Alpha::Ratio(0.1));
    }
}
