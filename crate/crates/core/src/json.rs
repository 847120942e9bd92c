//! JSON helpers. Reports serialize every float with 17 significant digits so
//! files are byte-stable and round-trip exactly.

use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

/// An `f64` that serializes as a JSON number with 17 significant digits
/// (`{:.16e}`). Non-finite values become `null`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sig17(pub f64);

impl Sig17 {
    pub fn text(self) -> String {
        format!("{:.16e}", self.0)
    }
}

impl Serialize for Sig17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return s.serialize_none();
        }
        let raw = RawValue::from_string(self.text()).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

/// `serialize_with` adapter for plain `f64` fields.
pub fn sig17<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    Sig17(*x).serialize(s)
}

/// `serialize_with` adapter for `Vec<f64>` fields.
pub fn sig17_vec<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(xs.iter().map(|&x| Sig17(x)))
}
