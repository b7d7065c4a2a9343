//! 8-bit quantizers: continuous µ-law (µ = 255) and linear.
//!
//! Both quantizers round half away from zero, so codes are reproducible
//! across platforms.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

const MU: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Encoding {
    MuLaw,
    Linear,
}

impl Encoding {
    pub fn tag(self) -> u8 {
        match self {
            Encoding::MuLaw => 0,
            Encoding::Linear => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Encoding::MuLaw),
            1 => Ok(Encoding::Linear),
            t => Err(Error::Dataset(format!("unknown encoding tag {t}"))),
        }
    }

    pub fn encode(self, x: f64) -> u8 {
        match self {
            Encoding::MuLaw => mulaw_encode(x),
            Encoding::Linear => linear_encode(x),
        }
    }

    pub fn decode(self, code: u8) -> f64 {
        match self {
            Encoding::MuLaw => mulaw_decode(code),
            Encoding::Linear => linear_decode(code),
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoding::MuLaw => "mulaw",
            Encoding::Linear => "linear",
        })
    }
}

impl FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mulaw" | "mu-law" => Ok(Encoding::MuLaw),
            "linear" => Ok(Encoding::Linear),
            other => Err(Error::Config(format!(
                "unknown encoding `{other}` (mulaw | linear)"
            ))),
        }
    }
}

/// Map `y ∈ [-1, 1]` to a code in 0..=255.
fn quantize_unit(y: f64) -> u8 {
    // f64::round rounds half away from zero.
    ((y + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

fn unit_of(code: u8) -> f64 {
    2.0 * f64::from(code) / 255.0 - 1.0
}

pub fn mulaw_encode(x: f64) -> u8 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
    let y = x.signum() * (MU * x.abs()).ln_1p() / (MU + 1.0).ln();
    quantize_unit(if x == 0.0 { 0.0 } else { y })
}

pub fn mulaw_decode(code: u8) -> f64 {
    let y = unit_of(code);
    y.signum() * ((MU + 1.0).powf(y.abs()) - 1.0) / MU
}

pub fn linear_encode(x: f64) -> u8 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
    quantize_unit(x)
}

pub fn linear_decode(code: u8) -> f64 {
    unit_of(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mulaw_reference_points() {
        assert_eq!(mulaw_encode(0.0), 128);
        assert_eq!(mulaw_encode(1.0), 255);
        assert_eq!(mulaw_encode(-1.0), 0);
        assert_eq!(mulaw_encode(7.0), 255);
        assert_eq!(mulaw_decode(255), 1.0);
        assert_eq!(mulaw_decode(0), -1.0);
    }

    #[test]
    fn mulaw_half_amplitude() {
        // y = ln(128.5)/ln(256), code = round((y + 1)/2 · 255)
        let y = 128.5f64.ln() / 256f64.ln();
        assert!((y - 0.8757).abs() < 1e-4);
        assert_eq!(((y + 1.0) / 2.0 * 255.0).round(), 239.0);
        assert_eq!(mulaw_encode(0.5), 239);
    }

    #[test]
    fn mulaw_midpoint_is_not_zero() {
        let y = 2.0 * 128.0 / 255.0 - 1.0;
        let expect = (256f64.powf(y) - 1.0) / 255.0;
        assert_eq!(mulaw_decode(128), expect);
        assert!(mulaw_decode(128) > 0.0);
        assert!((mulaw_decode(128) - 8.6212e-5).abs() < 1e-8);
    }

    #[test]
    fn linear_reference_points() {
        assert_eq!(linear_encode(0.0), 128);
        assert!((linear_decode(128) - 0.00392).abs() < 1e-5);
        assert_eq!(linear_encode(-1.0), 0);
        assert_eq!(linear_encode(1.0), 255);
    }

    #[test]
    fn codes_roundtrip_exhaustively() {
        for enc in [Encoding::MuLaw, Encoding::Linear] {
            for c in 0..=255u8 {
                assert_eq!(enc.encode(enc.decode(c)), c, "{enc} code {c}");
            }
        }
    }

    #[test]
    fn mulaw_error_grows_with_amplitude() {
        let err = |x: f64| (x - mulaw_decode(mulaw_encode(x))).abs();
        assert!(err(0.9) > err(0.01));
    }

    #[test]
    fn tags_roundtrip() {
        for enc in [Encoding::MuLaw, Encoding::Linear] {
            assert_eq!(Encoding::from_tag(enc.tag()).unwrap(), enc);
            assert_eq!(enc.to_string().parse::<Encoding>().unwrap(), enc);
        }
        assert!(Encoding::from_tag(9).is_err());
    }
}
