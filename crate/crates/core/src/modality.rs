use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// High-resolution optical RGB.
    Hr,
    /// Multi-spectral time series (10 bands).
    Ms,
    /// Synthetic-aperture radar time series (2 polarizations).
    Sar,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Hr, Modality::Ms, Modality::Sar];

    pub fn channels(self) -> usize {
        match self {
            Modality::Hr => 3,
            Modality::Ms => 10,
            Modality::Sar => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Hr => "hr",
            Modality::Ms => "ms",
            Modality::Sar => "sar",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Hr => 0,
            Modality::Ms => 1,
            Modality::Sar => 2,
        }
    }

    pub fn is_series(self) -> bool {
        !matches!(self, Modality::Hr)
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hr" => Ok(Modality::Hr),
            "ms" => Ok(Modality::Ms),
            "sar" => Ok(Modality::Sar),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}
