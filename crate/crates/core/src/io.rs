//! Shared helpers for the CSV/JSON artifacts.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Formats a double with 17 significant digits, enough to round-trip exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_roundtrip() {
        for x in [0.1, 1.0 / 3.0, 3.420058958884237, 1e-300, 0.0, -2.5e7] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.replace('.', "").len(), 17);
        }
    }
}
