//! JSON number handling for artifacts: plain decimals with at least 15
//! significant digits, and `null` for the flagged non-finite diagnostics.

use std::io;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

pub const MIN_SIGNIFICANT_DIGITS: usize = 15;

/// Shortest round-trip decimal of `v`, zero-padded to at least
/// [`MIN_SIGNIFICANT_DIGITS`] significant digits. Never uses exponent notation.
pub fn decimal(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') {
        s.push_str(".0");
    }
    let digits: Vec<char> = s.chars().filter(|c| c.is_ascii_digit()).collect();
    let leading_zeros = digits.iter().take_while(|&&c| c == '0').count();
    let significant = if leading_zeros == digits.len() {
        1
    } else {
        digits.len() - leading_zeros
    };
    for _ in significant..MIN_SIGNIFICANT_DIGITS {
        s.push('0');
    }
    s
}

/// Pretty JSON formatter that writes floats through [`decimal`].
pub struct DecimalFormatter<'a> {
    inner: PrettyFormatter<'a>,
}

impl Default for DecimalFormatter<'_> {
    fn default() -> Self {
        Self {
            inner: PrettyFormatter::new(),
        }
    }
}

impl Formatter for DecimalFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(decimal(value).as_bytes())
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Serializes `value` as pretty JSON with decimal floats.
pub fn to_json_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, DecimalFormatter::default());
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

/// Non-finite floats as `null`; `null` reads back as NaN.
pub mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Non-finite floats as `null`; `null` reads back as `+inf` (the flagged R-hat).
pub mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        super::nan_as_null::serialize(v, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
