//! Shadow/target scenario codes such as `FRFR` or `CRFV`: the first pair of
//! letters names the shadow model's (data family, architecture), the second
//! pair the target's. A two-letter code uses the same pair for both.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::captioner::ArchId;
use crate::defenses::DpConfig;
use crate::error::{Error, Result};
use crate::synthdata::Family;

/// What the attacker knows about the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioClass {
    /// Same data family and architecture as the target.
    Unrestricted,
    /// Same data family, different architecture.
    DataOnly,
    /// Different data family.
    Constrained,
}

impl ScenarioClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioClass::Unrestricted => "unrestricted",
            ScenarioClass::DataOnly => "data-only",
            ScenarioClass::Constrained => "constrained",
        }
    }
}

impl fmt::Display for ScenarioClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Mb,
    Fb,
    #[default]
    Both,
}

impl AttackKind {
    pub fn runs_mb(self) -> bool {
        matches!(self, AttackKind::Mb | AttackKind::Both)
    }

    pub fn runs_fb(self) -> bool {
        matches!(self, AttackKind::Fb | AttackKind::Both)
    }
}

/// Training-time defenses applied to the target model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSpec {
    /// l2 coefficient; 0 disables.
    pub l2: f64,
    pub augment: bool,
    pub dp: Option<DpConfig>,
}

impl DefenseSpec {
    pub fn is_none(&self) -> bool {
        self.l2 == 0.0 && !self.augment && self.dp.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub arch: ArchId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub shadow: ModelSpec,
    pub target: ModelSpec,
    pub attack: AttackKind,
    pub defense: Option<DefenseSpec>,
}

impl ScenarioSpec {
    pub fn class(&self) -> ScenarioClass {
        if self.shadow.family != self.target.family {
            ScenarioClass::Constrained
        } else if self.shadow.arch != self.target.arch {
            ScenarioClass::DataOnly
        } else {
            ScenarioClass::Unrestricted
        }
    }

    /// Four-letter code.
    pub fn code(&self) -> String {
        format!(
            "{}{}{}{}",
            self.shadow.family.letter(),
            self.shadow.arch.letter(),
            self.target.family.letter(),
            self.target.arch.letter()
        )
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for ScenarioSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_scenario(s)
    }
}

/// Parses a 2- or 4-letter code; positions in errors are 1-based.
pub fn parse_scenario(code: &str) -> Result<ScenarioSpec> {
    let err = |position: usize, reason: String| Error::Parse {
        code: code.to_owned(),
        position,
        reason,
    };
    let chars: Vec<char> = code.chars().collect();
    if chars.len() != 2 && chars.len() != 4 {
        return Err(err(chars.len().min(4) + 1, format!("expected 2 or 4 letters, got {}", chars.len())));
    }
    let mut pairs = Vec::with_capacity(2);
    for (k, pair) in chars.chunks(2).enumerate() {
        let family = Family::from_letter(pair[0]).ok_or_else(|| err(2 * k + 1, format!("`{}` is not a data family (C, F or I)", pair[0])))?;
        let arch = ArchId::from_letter(pair[1]).ok_or_else(|| err(2 * k + 2, format!("`{}` is not an architecture (R or V)", pair[1])))?;
        pairs.push(ModelSpec { family, arch });
    }
    let shadow = pairs[0];
    let target = *pairs.last().unwrap();
    Ok(ScenarioSpec {
        shadow,
        target,
        attack: AttackKind::default(),
        defense: None,
    })
}
