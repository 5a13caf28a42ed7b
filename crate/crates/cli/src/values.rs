//! Flag value types that round-trip through `FromStr` and `Display`, so a
//! resolved setting prints in the same syntax it is given in.

use std::fmt;
use std::str::FromStr;

use dida_core::attention::SignalMode;
use dida_core::scene::BackgroundMode;

/// Inclusive `MIN..MAX`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T: FromStr + PartialOrd> FromStr for Range<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once("..").ok_or_else(|| format!("expected MIN..MAX, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<T>().map_err(|_| format!("bad bound {v:?} in {s:?}"));
        let (min, max) = (parse(a)?, parse(b)?);
        if min > max {
            return Err(format!("empty range {s:?}"));
        }
        Ok(Range { min, max })
    }
}

impl<T: fmt::Display> fmt::Display for Range<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.min, self.max)
    }
}

/// Comma-separated conv widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Widths(pub Vec<usize>);

impl FromStr for Widths {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let widths = s
            .split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|_| format!("bad width {w:?}")))
            .collect::<Result<Vec<_>, _>>()?;
        if widths.contains(&0) {
            return Err("widths must be positive".into());
        }
        Ok(Widths(widths))
    }
}

impl fmt::Display for Widths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Threshold,
    Dot,
}

impl Mode {
    pub fn signal(self) -> SignalMode {
        match self {
            Mode::Threshold => SignalMode::threshold(),
            Mode::Dot => SignalMode::Dot,
        }
    }

    pub fn of(signal: SignalMode) -> Self {
        match signal {
            SignalMode::Threshold { .. } => Mode::Threshold,
            SignalMode::Dot => Mode::Dot,
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "threshold" => Ok(Mode::Threshold),
            "dot" => Ok(Mode::Dot),
            _ => Err(format!("unknown mode {s:?} (expected threshold or dot)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Threshold => "threshold",
            Mode::Dot => "dot",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Background(pub BackgroundMode);

impl FromStr for Background {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "noise" => Ok(Background(BackgroundMode::UniformNoise)),
            "gradient" => Ok(Background(BackgroundMode::SmoothGradient)),
            _ => Err(format!("unknown background {s:?} (expected noise or gradient)")),
        }
    }
}

impl fmt::Display for Background {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.0 {
            BackgroundMode::UniformNoise => "noise",
            BackgroundMode::SmoothGradient => "gradient",
        })
    }
}
