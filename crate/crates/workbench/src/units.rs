//! Unit-suffixed quantities such as `13.6 mW`, `100 us` or `0.034 MHz/mW^2`.

use vbphys::kinetics::UnitKind;

/// Physical dimension of a config quantity and its canonical unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    /// ns
    Time,
    /// mW
    Power,
    /// MHz
    Rate,
    /// MHz/mW
    RatePerPower,
    /// MHz/mW²
    RatePerPower2,
    /// µs
    LongTime,
    Dimensionless,
}

impl Dimension {
    pub fn for_parameter(kind: UnitKind) -> Self {
        match kind {
            UnitKind::Rate => Dimension::Rate,
            UnitKind::RatePerPower => Dimension::RatePerPower,
            UnitKind::RatePerPower2 => Dimension::RatePerPower2,
            UnitKind::Microseconds => Dimension::LongTime,
            UnitKind::Dimensionless => Dimension::Dimensionless,
        }
    }

    pub fn canonical(self) -> &'static str {
        match self {
            Dimension::Time => "ns",
            Dimension::Power => "mW",
            Dimension::Rate => "MHz",
            Dimension::RatePerPower => "MHz/mW",
            Dimension::RatePerPower2 => "MHz/mW^2",
            Dimension::LongTime => "us",
            Dimension::Dimensionless => "",
        }
    }
}

fn time_ns(unit: &str) -> Option<f64> {
    Some(match unit {
        "ps" => 1e-3,
        "ns" => 1.0,
        "us" | "µs" | "μs" => 1e3,
        "ms" => 1e6,
        "s" => 1e9,
        "min" => 60e9,
        "h" => 3600e9,
        _ => return None,
    })
}

fn rate_mhz(unit: &str) -> Option<f64> {
    Some(match unit {
        "Hz" => 1e-6,
        "kHz" => 1e-3,
        "MHz" => 1.0,
        "GHz" => 1e3,
        _ => return None,
    })
}

fn power_mw(unit: &str) -> Option<f64> {
    Some(match unit {
        "uW" | "µW" | "μW" => 1e-3,
        "mW" => 1.0,
        "W" => 1e3,
        _ => return None,
    })
}

fn scale(unit: &str, dim: Dimension) -> Option<f64> {
    match dim {
        Dimension::Time => time_ns(unit),
        Dimension::LongTime => time_ns(unit).map(|ns| ns * 1e-3),
        Dimension::Power => power_mw(unit),
        Dimension::Rate => rate_mhz(unit),
        Dimension::RatePerPower => {
            let (r, p) = unit.split_once('/')?;
            Some(rate_mhz(r)? / power_mw(p)?)
        }
        Dimension::RatePerPower2 => {
            let (r, p) = unit.split_once('/')?;
            let p = p.strip_suffix("^2").or_else(|| p.strip_suffix('²'))?;
            Some(rate_mhz(r)? / power_mw(p)?.powi(2))
        }
        Dimension::Dimensionless => unit.is_empty().then_some(1.0),
    }
}

/// Parse `"<number> <unit>"` into the canonical unit of `dim`. Dimensionless
/// quantities are bare numbers; every other dimension needs a suffix.
pub fn parse_quantity(text: &str, dim: Dimension) -> Result<f64, String> {
    let text = text.trim();
    // Longest numeric prefix, so `1e3MHz` and `1e3 MHz` both work.
    let split = (1..=text.len())
        .rev()
        .filter(|&i| text.is_char_boundary(i))
        .find(|&i| text[..i].parse::<f64>().is_ok())
        .ok_or_else(|| format!("'{text}' does not start with a number"))?;
    let (number, unit) = text.split_at(split);
    let value: f64 = number.parse().expect("prefix parsed above");
    let unit = unit.trim();
    if unit.is_empty() && dim != Dimension::Dimensionless {
        return Err(format!("'{text}' needs a unit (e.g. {})", dim.canonical()));
    }
    let factor = scale(unit, dim).ok_or_else(|| format!("'{unit}' is not a unit of {}", dim.canonical()))?;
    let v = value * factor;
    if !v.is_finite() {
        return Err(format!("'{text}' is not finite"));
    }
    Ok(v)
}

/// Canonical rendering used in reports, e.g. `2.98 MHz/mW`.
pub fn with_unit(value: &str, dim: Dimension) -> String {
    match dim.canonical() {
        "" => value.to_string(),
        u => format!("{value} {u}"),
    }
}
