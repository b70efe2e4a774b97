use std::fmt;
use std::str::FromStr;

use super::BodyError;

/// Body part labels carried per template vertex; the contact set is chosen
/// from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum PartLabel {
    Head = 0,
    TorsoFront = 1,
    TorsoBack = 2,
    Gluteus = 3,
    ThighL = 4,
    ThighR = 5,
    CalfL = 6,
    CalfR = 7,
    FootL = 8,
    FootR = 9,
    UpperArmL = 10,
    UpperArmR = 11,
    ForearmL = 12,
    ForearmR = 13,
    HandL = 14,
    HandR = 15,
}

impl PartLabel {
    pub const ALL: [PartLabel; 16] = [
        PartLabel::Head,
        PartLabel::TorsoFront,
        PartLabel::TorsoBack,
        PartLabel::Gluteus,
        PartLabel::ThighL,
        PartLabel::ThighR,
        PartLabel::CalfL,
        PartLabel::CalfR,
        PartLabel::FootL,
        PartLabel::FootR,
        PartLabel::UpperArmL,
        PartLabel::UpperArmR,
        PartLabel::ForearmL,
        PartLabel::ForearmR,
        PartLabel::HandL,
        PartLabel::HandR,
    ];

    pub const VOCABULARY: [&'static str; 16] = [
        "head",
        "torso-front",
        "torso-back",
        "gluteus",
        "thigh-l",
        "thigh-r",
        "calf-l",
        "calf-r",
        "foot-l",
        "foot-r",
        "upper-arm-l",
        "upper-arm-r",
        "forearm-l",
        "forearm-r",
        "hand-l",
        "hand-r",
    ];

    pub fn name(self) -> &'static str {
        Self::VOCABULARY[self as usize]
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }
}

impl fmt::Display for PartLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PartLabel {
    type Err = BodyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_lowercase();
        Self::VOCABULARY
            .iter()
            .position(|&n| n == norm)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| BodyError::UnknownPart(s.to_string()))
    }
}
