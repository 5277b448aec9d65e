//! Line-delimited JSON experience files.
//!
//! The first line is a header naming the format and its version:
//!
//! ```text
//! {"format":"spare-experiences","version":1}
//! ```
//!
//! Every further line holds one experience with a fixed field order:
//!
//! ```text
//! {"instance":7,"objects":[0,1],"props":["width",...],"state":[[...],[...]],
//!  "action":{"template":"push","alpha":[...],"targets":[0]},"next_state":[[...],[...]]}
//! ```
//!
//! `state[j]` is the property row of `objects[j]`. Reals are written with 17
//! significant digits so that files round-trip bit-exactly.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::Deserialize;

use crate::error::{Result, SpareError};
use crate::relational::{ActionInstance, Domain, Experience, State};

/// Format like C's `%.17g`.
pub fn fmt_g17(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.16e}", v);
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let s = format!("{:.*}", (16 - exp).max(0) as usize, v);
        trim_zeros(&s).to_string()
    } else {
        let m = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn push_reals(out: &mut String, vals: &[f64]) {
    out.push('[');
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_g17(*v));
    }
    out.push(']');
}

fn push_table(out: &mut String, s: &State) {
    out.push('[');
    for (i, row) in s.rows().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_reals(out, row);
    }
    out.push(']');
}

/// Serialize one experience as a single JSON line (no trailing newline).
pub fn experience_line(domain: &Domain, e: &Experience) -> Result<String> {
    let template = &domain.template(e.action.template)?.name;
    let mut out = String::with_capacity(512);
    write!(out, "{{\"instance\":{},\"objects\":[", e.instance).unwrap();
    for (i, o) in e.objects.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{o}").unwrap();
    }
    out.push_str("],\"props\":");
    out.push_str(&serde_json::to_string(domain.properties())?);
    out.push_str(",\"state\":");
    push_table(&mut out, &e.state);
    out.push_str(",\"action\":{\"template\":");
    out.push_str(&serde_json::to_string(template)?);
    out.push_str(",\"alpha\":");
    push_reals(&mut out, &e.action.alpha);
    out.push_str(",\"targets\":[");
    for (i, &t) in e.action.targets.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{}", e.objects[t]).unwrap();
    }
    out.push_str("]},\"next_state\":");
    push_table(&mut out, &e.next_state);
    out.push('}');
    Ok(out)
}

pub const DATASET_FORMAT: &str = "spare-experiences";
pub const DATASET_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

fn check_header(line: &str) -> Result<()> {
    let h: Header = serde_json::from_str(line)
        .map_err(|e| SpareError::Dataset(format!("missing or malformed header: {e}")))?;
    if h.format != DATASET_FORMAT {
        return Err(SpareError::Dataset(format!("not an experience file (format `{}`)", h.format)));
    }
    if h.version != DATASET_VERSION {
        return Err(SpareError::Dataset(format!(
            "unsupported dataset version {} (this build reads {DATASET_VERSION})",
            h.version
        )));
    }
    Ok(())
}

pub fn write_dataset<W: Write>(mut w: W, domain: &Domain, exps: &[Experience]) -> Result<()> {
    writeln!(w, "{{\"format\":\"{DATASET_FORMAT}\",\"version\":{DATASET_VERSION}}}")?;
    for e in exps {
        writeln!(w, "{}", experience_line(domain, e)?)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionLine {
    template: String,
    alpha: Vec<f64>,
    targets: Vec<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    instance: u64,
    objects: Vec<u32>,
    props: Vec<String>,
    state: Vec<Vec<f64>>,
    action: ActionLine,
    next_state: Vec<Vec<f64>>,
}

pub fn parse_experience(domain: &Domain, line: &str) -> Result<Experience> {
    let l: Line = serde_json::from_str(line)?;
    if l.props != domain.properties() {
        return Err(SpareError::Dataset(format!(
            "property list {:?} does not match the domain {:?}",
            l.props,
            domain.properties()
        )));
    }
    let template = domain
        .template_id(&l.action.template)
        .ok_or_else(|| SpareError::Dataset(format!("unknown template `{}`", l.action.template)))?;
    let targets = l
        .action
        .targets
        .iter()
        .map(|t| {
            l.objects
                .iter()
                .position(|o| o == t)
                .ok_or_else(|| SpareError::Dataset(format!("target {t} is not an instance object")))
        })
        .collect::<Result<Vec<_>>>()?;
    let np = domain.n_props();
    let e = Experience {
        instance: l.instance,
        state: State::from_rows(np, &l.state)?,
        next_state: State::from_rows(np, &l.next_state)?,
        objects: l.objects,
        action: ActionInstance {
            template,
            alpha: l.action.alpha,
            targets,
        },
    };
    e.validate(domain)?;
    Ok(e)
}

pub fn read_dataset<R: BufRead>(r: R, domain: &Domain) -> Result<Vec<Experience>> {
    let mut out = Vec::new();
    let mut header = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if !header {
            check_header(&line).map_err(|e| SpareError::Dataset(format!("line {}: {e}", i + 1)))?;
            header = true;
            continue;
        }
        out.push(
            parse_experience(domain, &line)
                .map_err(|e| SpareError::Dataset(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn load(path: &std::path::Path, domain: &Domain) -> Result<Vec<Experience>> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f), domain)
}

pub fn save(path: &std::path::Path, domain: &Domain, exps: &[Experience]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset(std::io::BufWriter::new(f), domain, exps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{blocks_domain, generate_dataset, SceneConfig, StackMix};
    use proptest::prelude::*;

    #[test]
    fn g17_matches_c_formatting() {
        assert_eq!(fmt_g17(0.1), "0.10000000000000001");
        assert_eq!(fmt_g17(1.0), "1");
        assert_eq!(fmt_g17(-2.5), "-2.5");
        assert_eq!(fmt_g17(1e-7), "9.9999999999999995e-08");
        assert_eq!(fmt_g17(1e20), "1e+20");
        assert_eq!(fmt_g17(0.0), "0");
    }

    proptest! {
        #[test]
        fn g17_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let s = fmt_g17(v);
            prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
            let j: f64 = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(j.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn file_round_trip_is_exact() {
        let d = blocks_domain();
        let cfg = SceneConfig {
            extras: 2,
            ..Default::default()
        };
        let exps = generate_dataset(&d, &cfg, &StackMix::single(3), 5, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d, &exps).unwrap();
        let back = read_dataset(&buf[..], &d).unwrap();
        assert_eq!(back, exps);
        let mut lines = std::str::from_utf8(&buf).unwrap().lines();
        assert_eq!(lines.next().unwrap(), r#"{"format":"spare-experiences","version":1}"#);
        let first = lines.next().unwrap();
        assert!(first.starts_with("{\"instance\":0,\"objects\":["));
        let keys = ["\"props\"", "\"state\"", "\"action\"", "\"next_state\""];
        let pos: Vec<usize> = keys.iter().map(|k| first.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejects_foreign_targets_and_props() {
        let d = blocks_domain();
        let bad_target = r#"{"instance":0,"objects":[3],"props":["width","length","height","x","y","z"],"state":[[1,1,1,0,0,0]],"action":{"template":"push","alpha":[0,0,0,0],"targets":[9]},"next_state":[[1,1,1,0,0,0]]}"#;
        assert!(parse_experience(&d, bad_target).is_err());
        let bad_props = bad_target.replace("\"width\"", "\"w\"").replace("[9]", "[3]");
        assert!(parse_experience(&d, &bad_props).is_err());
        let ok = bad_target.replace("[9]", "[3]");
        assert!(parse_experience(&d, &ok).is_ok());
    }

    #[test]
    fn header_is_required_and_checked() {
        let d = blocks_domain();
        let exps = generate_dataset(&d, &SceneConfig::default(), &StackMix::single(2), 1, 0).unwrap();
        let line = experience_line(&d, &exps[0]).unwrap();
        assert!(read_dataset(line.as_bytes(), &d).is_err());
        let future = format!("{{\"format\":\"spare-experiences\",\"version\":2}}\n{line}\n");
        assert!(read_dataset(future.as_bytes(), &d).is_err());
        let ok = format!("{{\"format\":\"spare-experiences\",\"version\":1}}\n{line}\n");
        assert_eq!(read_dataset(ok.as_bytes(), &d).unwrap(), exps);
        assert!(read_dataset(&b""[..], &d).unwrap().is_empty());
    }
}
