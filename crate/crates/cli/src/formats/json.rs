//! Minimal JSON emitter with fixed float formatting.
//!
//! Every float is written with 17 significant digits (`{:.16e}`), which is
//! enough to reproduce the exact `f64` on parse. Artifact files are written
//! through this; reading uses serde.

#[derive(Debug, Default)]
pub struct JsonWriter {
    out: String,
    needs_comma: Vec<bool>,
    pending_key: bool,
}

impl JsonWriter {
    pub fn new() -> Self {
        JsonWriter::default()
    }

    pub fn finish(self) -> String {
        debug_assert!(self.needs_comma.is_empty(), "unbalanced json writer");
        self.out
    }

    fn value_sep(&mut self) {
        if self.pending_key {
            self.pending_key = false;
        } else if let Some(top) = self.needs_comma.last_mut() {
            if *top {
                self.out.push(',');
            }
            *top = true;
        }
    }

    pub fn key(&mut self, k: &str) -> &mut Self {
        if let Some(top) = self.needs_comma.last_mut() {
            if *top {
                self.out.push(',');
            }
            *top = true;
        }
        self.push_escaped(k);
        self.out.push(':');
        self.pending_key = true;
        self
    }

    pub fn begin_obj(&mut self) -> &mut Self {
        self.value_sep();
        self.out.push('{');
        self.needs_comma.push(false);
        self
    }

    pub fn end_obj(&mut self) -> &mut Self {
        self.needs_comma.pop();
        self.out.push('}');
        self
    }

    pub fn begin_arr(&mut self) -> &mut Self {
        self.value_sep();
        self.out.push('[');
        self.needs_comma.push(false);
        self
    }

    pub fn end_arr(&mut self) -> &mut Self {
        self.needs_comma.pop();
        self.out.push(']');
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.value_sep();
        self.push_escaped(s);
        self
    }

    /// 17 significant digits; exact round-trip through any JSON parser.
    pub fn f64(&mut self, x: f64) -> &mut Self {
        assert!(x.is_finite(), "refusing to serialize a non-finite number");
        self.value_sep();
        self.out.push_str(&format!("{x:.16e}"));
        self
    }

    pub fn u64(&mut self, x: u64) -> &mut Self {
        self.value_sep();
        self.out.push_str(&x.to_string());
        self
    }

    pub fn usize(&mut self, x: usize) -> &mut Self {
        self.u64(x as u64)
    }

    pub fn bool(&mut self, b: bool) -> &mut Self {
        self.value_sep();
        self.out.push_str(if b { "true" } else { "false" });
        self
    }

    pub fn null(&mut self) -> &mut Self {
        self.value_sep();
        self.out.push_str("null");
        self
    }

    pub fn f64_slice(&mut self, xs: &[f64]) -> &mut Self {
        self.begin_arr();
        for &x in xs {
            self.f64(x);
        }
        self.end_arr()
    }

    pub fn u8_slice(&mut self, xs: &[u8]) -> &mut Self {
        self.begin_arr();
        for &x in xs {
            self.u64(x as u64);
        }
        self.end_arr()
    }

    fn push_escaped(&mut self, s: &str) {
        self.out.push('"');
        for c in s.chars() {
            match c {
                '"' => self.out.push_str("\\\""),
                '\\' => self.out.push_str("\\\\"),
                '\n' => self.out.push_str("\\n"),
                '\r' => self.out.push_str("\\r"),
                '\t' => self.out.push_str("\\t"),
                c if (c as u32) < 0x20 => {
                    self.out.push_str(&format!("\\u{:04x}", c as u32));
                }
                c => self.out.push(c),
            }
        }
        self.out.push('"');
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        let samples = [
            0.0,
            -0.0,
            1.0,
            core::f64::consts::PI,
            1e-300,
            -2.2250738585072014e-308,
            41.57,
            264.99,
            f64::MAX,
        ];
        for &x in &samples {
            let mut w = JsonWriter::new();
            w.begin_arr().f64(x).end_arr();
            let s = w.finish();
            let v: Vec<f64> = serde_json::from_str(&s).unwrap();
            assert_eq!(v[0].to_bits(), x.to_bits(), "{x} via {s}");
        }
    }

    #[test]
    fn nested_structure_is_valid_json() {
        let mut w = JsonWriter::new();
        w.begin_obj();
        w.key("name").str("a \"b\"\n");
        w.key("xs").f64_slice(&[1.5, -2.5]);
        w.key("flag").bool(true);
        w.key("none").null();
        w.key("inner").begin_obj();
        w.key("n").u64(7);
        w.end_obj();
        w.end_obj();
        let s = w.finish();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["name"], "a \"b\"\n");
        assert_eq!(v["inner"]["n"], 7);
        assert!(v["none"].is_null());
    }
}
