use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::Path;

pub const CSV_HEADER: &str = "scenario_id,T,B,policy,horizon_blocks,reps,mean_bits,stderr_bits,\
theta_bar,lower_bound,theta_vi,wall_time_s";

/// One CSV row. Optional columns are written empty.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub scenario_id: String,
    pub t: u32,
    pub b: f64,
    pub policy: String,
    pub horizon_blocks: u64,
    pub reps: usize,
    pub mean_bits: f64,
    pub stderr_bits: f64,
    pub theta_bar: f64,
    pub lower_bound: f64,
    pub theta_vi: Option<f64>,
    pub wall_time_s: Option<f64>,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(sig12).unwrap_or_default();
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&self.scenario_id),
            self.t,
            sig12(self.b),
            self.policy,
            self.horizon_blocks,
            self.reps,
            sig12(self.mean_bits),
            sig12(self.stderr_bits),
            sig12(self.theta_bar),
            sig12(self.lower_bound),
            opt(self.theta_vi),
            opt(self.wall_time_s),
        )
        .unwrap();
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `%.12g`: twelve significant digits, trailing zeros dropped, exponent form
/// outside `[1e-5, 1e12)`.
pub fn sig12(x: f64) -> String {
    const P: i32 = 12;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..P).contains(&exp) {
        let decimals = (P - 1 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Writes rows to stdout, or appends them to `out` (with a header only when
/// the file is new or empty).
pub fn emit(records: &[RunRecord], out: Option<&Path>) -> io::Result<()> {
    let mut text = String::new();
    let need_header = match out {
        Some(p) => std::fs::metadata(p).map(|m| m.len() == 0).unwrap_or(true),
        None => true,
    };
    if need_header {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    for r in records {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    match out {
        Some(p) => OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)?
            .write_all(text.as_bytes()),
        None => io::stdout().lock().write_all(text.as_bytes()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(sig12(0.0), "0");
        assert_eq!(sig12(10.0), "10");
        assert_eq!(sig12(0.964515878788), "0.964515878788");
        assert_eq!(sig12(1.0 / 3.0), "0.333333333333");
        assert_eq!(sig12(-0.2213475204444817), "-0.221347520444");
        assert_eq!(sig12(123456789012345.0), "1.23456789012e+14");
        assert_eq!(sig12(1.5e-7), "1.5e-07");
        assert_eq!(sig12(0.0001), "0.0001");
        assert_eq!(sig12(999999999999.5), "1e+12");
    }

    #[test]
    fn row_layout() {
        let r = RunRecord {
            scenario_id: "bern".into(),
            t: 4,
            b: 10.0,
            policy: "block_ffp".into(),
            horizon_blocks: 1000,
            reps: 2,
            mean_bits: 0.5,
            stderr_bits: 0.01,
            theta_bar: 0.75,
            lower_bound: 0.25,
            theta_vi: None,
            wall_time_s: None,
        };
        assert_eq!(r.to_csv(), "bern,4,10,block_ffp,1000,2,0.5,0.01,0.75,0.25,,");
        assert_eq!(CSV_HEADER.split(',').count(), r.to_csv().split(',').count());
    }
}
