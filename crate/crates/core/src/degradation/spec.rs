use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One synthesized degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistortionSpec {
    /// Additive white Gaussian noise; `sigma` on the 0-255 scale.
    Awgn { sigma: f64 },
    /// Isotropic Gaussian blur with standard deviation in pixels.
    GaussianBlur { sigma: f64 },
    /// Block-DCT quantization with the libjpeg quality scaling.
    JpegQuant { quality: u32 },
    /// Stages applied left to right.
    Hybrid { stages: Vec<DistortionSpec> },
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        match self {
            DistortionSpec::Awgn { sigma } if !(sigma.is_finite() && *sigma >= 0.0) => {
                bad(format!("awgn sigma must be >= 0, got {sigma}"))
            }
            DistortionSpec::GaussianBlur { sigma } if !(sigma.is_finite() && *sigma > 0.0) => {
                bad(format!("blur sigma must be > 0, got {sigma}"))
            }
            DistortionSpec::JpegQuant { quality } if !(1..=100).contains(quality) => {
                bad(format!("quality must be in [1, 100], got {quality}"))
            }
            DistortionSpec::Hybrid { stages } => {
                if stages.is_empty() {
                    return bad("hybrid needs at least one stage".into());
                }
                for s in stages {
                    if matches!(s, DistortionSpec::Hybrid { .. }) {
                        return bad("hybrid stages cannot be hybrid".into());
                    }
                    s.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DistortionSpec::Awgn { .. } => "awgn",
            DistortionSpec::GaussianBlur { .. } => "gaussian_blur",
            DistortionSpec::JpegQuant { .. } => "jpeg_quant",
            DistortionSpec::Hybrid { .. } => "hybrid",
        }
    }

    /// Parameters as `key=value` pairs joined by `;`, hybrid stages by `+`.
    pub fn params_string(&self) -> String {
        match self {
            DistortionSpec::Awgn { sigma } | DistortionSpec::GaussianBlur { sigma } => format!("sigma={sigma}"),
            DistortionSpec::JpegQuant { quality } => format!("quality={quality}"),
            DistortionSpec::Hybrid { stages } => stages
                .iter()
                .map(|s| format!("{}({})", s.kind(), s.params_string()))
                .collect::<Vec<_>>()
                .join("+"),
        }
    }

    /// Inverse of `kind()` plus `params_string()`.
    pub fn from_parts(kind: &str, params: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("cannot parse {kind}({params})"));
        let value = |key: &str| params.strip_prefix(key).and_then(|v| v.strip_prefix('=')).ok_or_else(bad);
        let spec = match kind {
            "awgn" => DistortionSpec::Awgn {
                sigma: value("sigma")?.parse().map_err(|_| bad())?,
            },
            "gaussian_blur" => DistortionSpec::GaussianBlur {
                sigma: value("sigma")?.parse().map_err(|_| bad())?,
            },
            "jpeg_quant" => DistortionSpec::JpegQuant {
                quality: value("quality")?.parse().map_err(|_| bad())?,
            },
            "hybrid" => DistortionSpec::Hybrid {
                stages: params.split('+').map(str::parse).collect::<Result<_>>()?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Filesystem-safe short name, e.g. `awgn-s15`, `blur-s4.2`, `jpeg-q50`.
    pub fn slug(&self) -> String {
        match self {
            DistortionSpec::Awgn { sigma } => format!("awgn-s{sigma}"),
            DistortionSpec::GaussianBlur { sigma } => format!("blur-s{sigma}"),
            DistortionSpec::JpegQuant { quality } => format!("jpeg-q{quality}"),
            DistortionSpec::Hybrid { stages } => {
                let parts: Vec<String> = stages.iter().map(|s| s.slug()).collect();
                format!("hybrid_{}", parts.join("_"))
            }
        }
    }

    /// Scalar severity knob for plotting; `None` for hybrids.
    pub fn level(&self) -> Option<f64> {
        match self {
            DistortionSpec::Awgn { sigma } | DistortionSpec::GaussianBlur { sigma } => Some(*sigma),
            DistortionSpec::JpegQuant { quality } => Some(*quality as f64),
            DistortionSpec::Hybrid { .. } => None,
        }
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.kind(), self.params_string())
    }
}

impl std::str::FromStr for DistortionSpec {
    type Err = Error;

    /// Parses the `Display` form, e.g. `awgn(sigma=15)`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once('(')
            .ok_or_else(|| Error::InvalidSpec(format!("cannot parse {s:?}")))?;
        let params = rest
            .strip_suffix(')')
            .ok_or_else(|| Error::InvalidSpec(format!("cannot parse {s:?}")))?;
        DistortionSpec::from_parts(kind, params)
    }
}

/// Named hybrid severities: blur, then noise, then compression.
/// The tuples are desk-scale stand-ins ordered by severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridLevel {
    Mild,
    Moderate,
    Severe,
}

impl HybridLevel {
    pub fn spec(self) -> DistortionSpec {
        let (blur, noise, quality) = match self {
            HybridLevel::Mild => (1.0, 5.0, 80),
            HybridLevel::Moderate => (2.0, 15.0, 50),
            HybridLevel::Severe => (3.0, 25.0, 30),
        };
        DistortionSpec::Hybrid {
            stages: vec![
                DistortionSpec::GaussianBlur { sigma: blur },
                DistortionSpec::Awgn { sigma: noise },
                DistortionSpec::JpegQuant { quality },
            ],
        }
    }
}

/// The confounder set: `n` distortions, each drawn with probability `1/n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfounderSet {
    specs: Vec<DistortionSpec>,
}

impl ConfounderSet {
    pub fn new(specs: Vec<DistortionSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidSpec("confounder set must not be empty".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        Ok(ConfounderSet { specs })
    }

    pub fn awgn(sigmas: &[f64]) -> Result<Self> {
        Self::new(sigmas.iter().map(|&sigma| DistortionSpec::Awgn { sigma }).collect())
    }

    pub fn blur(sigmas: &[f64]) -> Result<Self> {
        Self::new(sigmas.iter().map(|&sigma| DistortionSpec::GaussianBlur { sigma }).collect())
    }

    pub fn specs(&self) -> &[DistortionSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&DistortionSpec> {
        self.specs.get(i)
    }

    pub fn probability(&self) -> f64 {
        1.0 / self.specs.len() as f64
    }
}
