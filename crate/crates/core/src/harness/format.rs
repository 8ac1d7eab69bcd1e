//! On-disk text formats.
//!
//! All files are plain whitespace-separated text with `#` comments, chosen
//! for diffability. Floats are written with Rust's shortest round-trip
//! formatting, so write-then-read reproduces every value bit for bit.
//!
//! # Feeder file
//!
//! ```text
//! [feeder]
//! v0 1.0
//!
//! [nodes]            # one row per non-slack node: id p0 q0
//! 1 -0.022 -0.0088
//!
//! [lines]            # parent child r x     (tree rooted at node 0)
//! 0 1 0.02 0.04
//!
//! [devices]          # optional: node cp cq p_target q_target
//! 1 0.05 0.05 0 0 0 0.0165 -0.0165 0.0165  #   ... p_min p_max q_min q_max
//!
//! [bounds]           # optional: "default v_lo v_hi" and per-node rows
//! default 0.95 1.05
//! 3 0.96 1.04
//! ```
//!
//! Nodes without a `[devices]` row are undispatchable: their injection is
//! pinned to zero on top of the background load already carried by `p0`,
//! `q0`.
//!
//! # Partition file
//!
//! One `root <id>` line per subtree under a `[partition]` header; members
//! are implied (a subtree is its root plus all descendants).
//!
//! # Trace file
//!
//! CSV with header `t,residual,objective,v_min,v_max,p0,coupling_flops,
//! messages`, one row per iteration, then a `# key value` summary block
//! (converged flag, iteration count, certificate constants when present).

use ndarray::Array1;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::central::RunTrace;
use crate::feeder::{FeederModel, Line};
use crate::hierarchy::{Partition, RoundMessageLog};
use crate::opf::{BoxSet, DeviceSpec};
use crate::{Error, Result};

/// Parsed contents of a feeder file.
#[derive(Debug, Clone)]
pub struct FeederFile {
    pub model: FeederModel,
    pub devices: Vec<(usize, DeviceSpec)>,
    pub bounds: Option<BoundsSpec>,
}

/// Voltage bounds: an optional uniform default plus per-node overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundsSpec {
    pub default: Option<(f64, f64)>,
    pub overrides: Vec<(usize, f64, f64)>,
}

impl BoundsSpec {
    pub fn uniform(v_lo: f64, v_hi: f64) -> Self {
        Self {
            default: Some((v_lo, v_hi)),
            overrides: Vec::new(),
        }
    }

    /// Expands into per-node vectors; every node must be covered.
    pub fn vectors(&self, n: usize) -> Result<(Array1<f64>, Array1<f64>)> {
        let (dl, dh) = self.default.unwrap_or((f64::NAN, f64::NAN));
        let mut lo = Array1::from_elem(n, dl);
        let mut hi = Array1::from_elem(n, dh);
        for &(node, l, h) in &self.overrides {
            if node == 0 || node > n {
                return Err(Error::UnknownNode(node));
            }
            lo[node - 1] = l;
            hi[node - 1] = h;
        }
        if lo.iter().any(|v| v.is_nan()) {
            return Err(Error::Infeasible(
                "bounds cover only part of the feeder and no default is given".into(),
            ));
        }
        Ok((lo, hi))
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| parse_err(line, format!("invalid {what}: {tok:?}")))
}

/// Parses feeder-file text; errors name the offending 1-based line.
pub fn parse_feeder_str(text: &str) -> Result<FeederFile> {
    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        None,
        Feeder,
        Nodes,
        Lines,
        Devices,
        Bounds,
    }
    let mut section = Section::None;
    let mut v0 = 1.0;
    let mut nodes: Vec<(usize, f64, f64)> = Vec::new();
    let mut lines: Vec<Line> = Vec::new();
    let mut devices: Vec<(usize, DeviceSpec)> = Vec::new();
    let mut bounds = BoundsSpec::default();
    let mut have_bounds = false;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = match name {
                "feeder" => Section::Feeder,
                "nodes" => Section::Nodes,
                "lines" => Section::Lines,
                "devices" => Section::Devices,
                "bounds" => {
                    have_bounds = true;
                    Section::Bounds
                }
                other => return Err(parse_err(lineno, format!("unknown section [{other}]"))),
            };
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        match section {
            Section::None => {
                return Err(parse_err(lineno, "content before any section header"));
            }
            Section::Feeder => match toks[0] {
                "v0" if toks.len() == 2 => v0 = parse_num(toks[1], lineno, "v0")?,
                other => return Err(parse_err(lineno, format!("unknown feeder key {other:?}"))),
            },
            Section::Nodes => {
                if toks.len() != 3 {
                    return Err(parse_err(lineno, "expected: id p0 q0"));
                }
                nodes.push((
                    parse_num(toks[0], lineno, "node id")?,
                    parse_num(toks[1], lineno, "p0")?,
                    parse_num(toks[2], lineno, "q0")?,
                ));
            }
            Section::Lines => {
                if toks.len() != 4 {
                    return Err(parse_err(lineno, "expected: parent child r x"));
                }
                lines.push(Line {
                    parent: parse_num(toks[0], lineno, "parent id")?,
                    child: parse_num(toks[1], lineno, "child id")?,
                    r: parse_num(toks[2], lineno, "r")?,
                    x: parse_num(toks[3], lineno, "x")?,
                });
            }
            Section::Devices => {
                if toks.len() != 9 {
                    return Err(parse_err(
                        lineno,
                        "expected: node cp cq p_target q_target p_min p_max q_min q_max",
                    ));
                }
                let node = parse_num(toks[0], lineno, "node id")?;
                let bounds = BoxSet::new(
                    parse_num(toks[5], lineno, "p_min")?,
                    parse_num(toks[6], lineno, "p_max")?,
                    parse_num(toks[7], lineno, "q_min")?,
                    parse_num(toks[8], lineno, "q_max")?,
                )
                .map_err(|e| parse_err(lineno, e.to_string()))?;
                let dev = DeviceSpec::new(
                    parse_num(toks[1], lineno, "cp")?,
                    parse_num(toks[2], lineno, "cq")?,
                    parse_num(toks[3], lineno, "p_target")?,
                    parse_num(toks[4], lineno, "q_target")?,
                    bounds,
                )
                .map_err(|e| parse_err(lineno, e.to_string()))?;
                devices.push((node, dev));
            }
            Section::Bounds => {
                if toks.len() != 3 {
                    return Err(parse_err(lineno, "expected: (default|node) v_lo v_hi"));
                }
                let lo = parse_num(toks[1], lineno, "v_lo")?;
                let hi = parse_num(toks[2], lineno, "v_hi")?;
                if toks[0] == "default" {
                    bounds.default = Some((lo, hi));
                } else {
                    bounds
                        .overrides
                        .push((parse_num(toks[0], lineno, "node id")?, lo, hi));
                }
            }
        }
    }

    let n = nodes.len();
    let mut p0 = vec![0.0; n];
    let mut q0 = vec![0.0; n];
    for &(id, p, q) in &nodes {
        if id == 0 || id > n {
            return Err(Error::Validation(format!(
                "node ids must be dense 1..={n}, got {id}"
            )));
        }
        p0[id - 1] = p;
        q0[id - 1] = q;
    }
    let model = FeederModel::new(n, lines, v0, p0, q0)?;
    for &(node, _) in &devices {
        if node == 0 || node > n {
            return Err(Error::UnknownNode(node));
        }
    }
    Ok(FeederFile {
        model,
        devices,
        bounds: have_bounds.then_some(bounds),
    })
}

pub fn read_feeder_file(path: impl AsRef<Path>) -> Result<FeederFile> {
    parse_feeder_str(&fs::read_to_string(path)?)
}

/// Serializes a feeder (optionally with devices and bounds) to text.
pub fn feeder_to_string(
    model: &FeederModel,
    devices: &[(usize, DeviceSpec)],
    bounds: Option<&BoundsSpec>,
) -> String {
    let mut out = String::new();
    out.push_str("[feeder]\n");
    let _ = writeln!(out, "v0 {}", model.v0());
    out.push_str("\n[nodes]\n# id p0 q0\n");
    for i in 1..=model.node_count() {
        let _ = writeln!(out, "{} {} {}", i, model.p0()[i - 1], model.q0()[i - 1]);
    }
    out.push_str("\n[lines]\n# parent child r x\n");
    for line in model.lines() {
        let _ = writeln!(out, "{} {} {} {}", line.parent, line.child, line.r, line.x);
    }
    if !devices.is_empty() {
        out.push_str("\n[devices]\n# node cp cq p_target q_target p_min p_max q_min q_max\n");
        for (node, d) in devices {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {} {}",
                node,
                d.cp,
                d.cq,
                d.p_target,
                d.q_target,
                d.bounds.p_min,
                d.bounds.p_max,
                d.bounds.q_min,
                d.bounds.q_max
            );
        }
    }
    if let Some(b) = bounds {
        out.push_str("\n[bounds]\n");
        if let Some((lo, hi)) = b.default {
            let _ = writeln!(out, "default {lo} {hi}");
        }
        for (node, lo, hi) in &b.overrides {
            let _ = writeln!(out, "{node} {lo} {hi}");
        }
    }
    out
}

pub fn write_feeder_file(
    path: impl AsRef<Path>,
    model: &FeederModel,
    devices: &[(usize, DeviceSpec)],
    bounds: Option<&BoundsSpec>,
) -> Result<()> {
    fs::write(path, feeder_to_string(model, devices, bounds))?;
    Ok(())
}

pub fn write_partition_file(path: impl AsRef<Path>, partition: &Partition) -> Result<()> {
    let mut out = String::from("[partition]\n");
    for ag in partition.ags() {
        let _ = writeln!(out, "root {}", ag.root);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads subtree roots and expands them against the model.
pub fn read_partition_file(path: impl AsRef<Path>, model: &FeederModel) -> Result<Partition> {
    let text = fs::read_to_string(path)?;
    let mut roots = Vec::new();
    let mut in_section = false;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content == "[partition]" {
            in_section = true;
            continue;
        }
        if !in_section {
            return Err(parse_err(lineno, "content before [partition] header"));
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        if toks.len() != 2 || toks[0] != "root" {
            return Err(parse_err(lineno, "expected: root <node id>"));
        }
        roots.push(parse_num(toks[1], lineno, "root id")?);
    }
    Partition::from_roots(model, &roots)
}

pub const TRACE_HEADER: &str = "t,residual,objective,v_min,v_max,p0,coupling_flops,messages";

/// One reimported trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub residual: f64,
    pub objective: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub p0: f64,
    pub coupling_flops: u64,
    pub messages: u64,
}

/// Reimported trace: rows plus the `# key value` summary block.
#[derive(Debug, Clone, Default)]
pub struct TraceData {
    pub rows: Vec<TraceRecord>,
    pub summary: Vec<(String, String)>,
}

impl TraceData {
    pub fn summary_value(&self, key: &str) -> Option<&str> {
        self.summary
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn trace_to_string(trace: &RunTrace) -> String {
    let mut out = String::with_capacity(64 * trace.rows.len());
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in &trace.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.t, r.residual, r.objective, r.v_min, r.v_max, r.p0, r.coupling_flops, r.messages
        );
    }
    let _ = writeln!(out, "# converged {}", trace.converged);
    let _ = writeln!(out, "# iterations {}", trace.iterations);
    if let Some(cert) = &trace.certificate {
        let _ = writeln!(out, "# certificate_m {}", cert.m);
        let _ = writeln!(out, "# certificate_l {}", cert.l);
        let _ = writeln!(out, "# step_bound {}", cert.step_bound());
    }
    out
}

pub fn write_trace_file(path: impl AsRef<Path>, trace: &RunTrace) -> Result<()> {
    fs::write(path, trace_to_string(trace))?;
    Ok(())
}

pub fn parse_trace_str(text: &str) -> Result<TraceData> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(parse_err(1, "empty trace file"));
    };
    if header.trim() != TRACE_HEADER {
        return Err(parse_err(1, format!("unexpected header {header:?}")));
    }
    let mut data = TraceData::default();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut it = rest.trim().splitn(2, ' ');
            let key = it.next().unwrap_or_default().to_string();
            let value = it.next().unwrap_or_default().trim().to_string();
            data.summary.push((key, value));
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != 8 {
            return Err(parse_err(
                lineno,
                format!("expected 8 columns, got {}", toks.len()),
            ));
        }
        data.rows.push(TraceRecord {
            t: parse_num(toks[0], lineno, "t")?,
            residual: parse_num(toks[1], lineno, "residual")?,
            objective: parse_num(toks[2], lineno, "objective")?,
            v_min: parse_num(toks[3], lineno, "v_min")?,
            v_max: parse_num(toks[4], lineno, "v_max")?,
            p0: parse_num(toks[5], lineno, "p0")?,
            coupling_flops: parse_num(toks[6], lineno, "coupling_flops")?,
            messages: parse_num(toks[7], lineno, "messages")?,
        });
    }
    Ok(data)
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<TraceData> {
    parse_trace_str(&fs::read_to_string(path)?)
}

/// Per-node initial/final voltages against their bounds.
pub fn write_voltage_profile(
    path: impl AsRef<Path>,
    v_initial: &Array1<f64>,
    v_final: &Array1<f64>,
    v_lo: &Array1<f64>,
    v_hi: &Array1<f64>,
) -> Result<()> {
    let mut out = String::from("node,v_initial,v_final,v_lo,v_hi\n");
    for i in 0..v_initial.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            i + 1,
            v_initial[i],
            v_final[i],
            v_lo[i],
            v_hi[i]
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-round message totals as CSV.
pub fn write_message_log(path: impl AsRef<Path>, log: &RoundMessageLog) -> Result<()> {
    let mut out = String::from(
        "round,node_to_rc,uncl_to_cc,rc_to_cc,cc_to_rc,rc_to_node,cc_to_uncl,broadcast,total\n",
    );
    for r in &log.per_round {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            r.node_to_rc,
            r.uncl_to_cc,
            r.rc_to_cc,
            r.cc_to_rc,
            r.rc_to_node,
            r.cc_to_uncl,
            r.broadcast,
            r.total_scalars()
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Key-value report block.
pub fn write_report(path: impl AsRef<Path>, entries: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k} {v}");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a report back as key-value pairs.
pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.splitn(2, ' ');
            (
                it.next().unwrap_or_default().to_string(),
                it.next().unwrap_or_default().trim().to_string(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn sample_model(n: usize, seed: u64) -> FeederModel {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut lines = Vec::new();
        for child in 1..=n {
            lines.push(Line {
                parent: rng.gen_range(0..child),
                child,
                r: rng.gen_range(0.001..0.05),
                x: rng.gen_range(0.002..0.08),
            });
        }
        let p0 = (0..n).map(|_| rng.gen_range(-0.05..0.0)).collect();
        let q0 = (0..n).map(|_| rng.gen_range(-0.02..0.0)).collect();
        FeederModel::new(n, lines, 1.0, p0, q0).unwrap()
    }

    #[test]
    fn feeder_round_trip_is_identical() {
        let model = sample_model(15, 3);
        let devices = vec![
            (
                2,
                DeviceSpec::new(
                    0.05,
                    0.07,
                    0.0,
                    0.001,
                    BoxSet::new(0.0, 0.02, -0.01, 0.01).unwrap(),
                )
                .unwrap(),
            ),
            (9, DeviceSpec::fixed(0.003, -0.001)),
        ];
        let bounds = BoundsSpec {
            default: Some((0.95, 1.05)),
            overrides: vec![(4, 0.96, 1.04)],
        };
        let text = feeder_to_string(&model, &devices, Some(&bounds));
        let parsed = parse_feeder_str(&text).unwrap();
        assert_eq!(parsed.model, model);
        assert_eq!(parsed.devices, devices);
        assert_eq!(parsed.bounds, Some(bounds));
    }

    #[test]
    fn malformed_feeder_names_line() {
        let text = "[feeder]\nv0 1.0\n\n[nodes]\n1 -0.01 bogus\n";
        match parse_feeder_str(text) {
            Err(Error::Parse { line: 5, message }) => assert!(message.contains("bogus")),
            other => panic!("expected parse error on line 5, got {other:?}"),
        }
    }

    #[test]
    fn bounds_require_full_coverage() {
        let spec = BoundsSpec {
            default: None,
            overrides: vec![(1, 0.95, 1.05)],
        };
        assert!(spec.vectors(2).is_err());
        let (lo, hi) = BoundsSpec::uniform(0.95, 1.05).vectors(3).unwrap();
        assert!(lo.iter().all(|&v| v == 0.95) && hi.iter().all(|&v| v == 1.05));
    }

    #[test]
    fn partition_round_trip() {
        let model = sample_model(20, 5);
        // find a couple of disjoint subtrees to write out
        let mut roots = Vec::new();
        for cand in (1..=20usize).rev() {
            let sub = model.subtree_of(cand).unwrap();
            if sub.len() >= 2
                && roots.iter().all(|&r: &usize| {
                    !model.subtree_of(r).unwrap().contains(&cand) && !sub.contains(&r)
                })
            {
                roots.push(cand);
            }
            if roots.len() == 2 {
                break;
            }
        }
        let partition = Partition::from_roots(&model, &roots).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partition.txt");
        write_partition_file(&path, &partition).unwrap();
        let back = read_partition_file(&path, &model).unwrap();
        assert_eq!(back, partition);
    }

    #[test]
    fn trace_round_trip_and_summary() {
        use crate::central::{RunTrace, TraceRow};
        let trace = RunTrace {
            rows: vec![
                TraceRow {
                    t: 0,
                    residual: f64::INFINITY,
                    objective: 0.125,
                    v_min: 0.93,
                    v_max: 1.001,
                    p0: -0.5,
                    coupling_flops: 0,
                    messages: 1,
                    wall_secs: 0.0,
                },
                TraceRow {
                    t: 1,
                    residual: 0.0625,
                    objective: 0.1,
                    v_min: 0.94,
                    v_max: 1.0,
                    p0: -0.45,
                    coupling_flops: 100,
                    messages: 16,
                    wall_secs: 0.1,
                },
            ],
            converged: true,
            iterations: 1,
            certificate: Some(crate::opf::ConvergenceCertificate { m: 0.02, l: 1.5 }),
            iterates: None,
        };
        let text = trace_to_string(&trace);
        let data = parse_trace_str(&text).unwrap();
        assert_eq!(data.rows.len(), 2);
        assert_eq!(data.rows[1].residual, 0.0625);
        assert!(data.rows[0].residual.is_infinite());
        assert_eq!(data.summary_value("converged"), Some("true"));
        assert_eq!(data.summary_value("iterations"), Some("1"));
        assert_eq!(data.summary_value("certificate_m"), Some("0.02"));
    }

    proptest! {
        // floats of any shape survive the feeder round trip bit for bit
        #[test]
        fn float_round_trip(vals in proptest::collection::vec(-1.0f64..1.0, 8)) {
            let lines = vec![Line { parent: 0, child: 1, r: vals[0].abs() + 1e-6, x: vals[1].abs() + 1e-6 }];
            let model = FeederModel::new(1, lines, 1.0 + vals[2] * 0.1, vec![vals[3]], vec![vals[4]]).unwrap();
            let text = feeder_to_string(&model, &[], None);
            let parsed = parse_feeder_str(&text).unwrap();
            prop_assert_eq!(parsed.model, model);
        }
    }
}
