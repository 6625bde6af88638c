use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub const NUM_CLASSES: usize = 4;

/// The four target conditions. The discriminant is the class index used by
/// every model and artifact, so the order here is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Fillings = 0,
    Cavity = 1,
    Implant = 2,
    Impacted = 3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Fillings,
        ClassLabel::Cavity,
        ClassLabel::Implant,
        ClassLabel::Impacted,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        Self::ALL.get(idx).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Fillings => "fillings",
            ClassLabel::Cavity => "cavity",
            ClassLabel::Implant => "implant",
            ClassLabel::Impacted => "impacted",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fillings" | "filling" => Ok(ClassLabel::Fillings),
            "cavity" | "cavities" => Ok(ClassLabel::Cavity),
            "implant" | "implants" => Ok(ClassLabel::Implant),
            "impacted" | "impacted_tooth" | "impacted teeth" | "impacted_teeth" => {
                Ok(ClassLabel::Impacted)
            }
            other => Err(Error::Validation(format!(
                "unknown label {other:?} (expected one of fillings, cavity, implant, impacted)"
            ))),
        }
    }
}
