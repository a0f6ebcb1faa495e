//! CSV and JSON-lines writers for steady-state records and plain tables.
//!
//! Floats are written as `{:.16e}`, which round-trips every f64. Files open with
//! `#` comment lines, the first being the SHA-256 of the normalized config.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::OutputFormat;
use crate::error::{Error, Result};
use crate::record::{InitialCondition, RunStatus, SolverKind, SteadyStateRecord};

pub const RECORD_COLUMNS: [&str; 10] = [
    "j_coupling",
    "gamma",
    "n0",
    "initial_condition",
    "filling_ratio",
    "current",
    "delta_phi",
    "tau",
    "solver",
    "status",
];

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::domain(format!("csv: {e}"))
}

/// Comment lines written above every table.
pub fn header_lines(config_hash: &str, extra: &[String]) -> Vec<String> {
    let mut h = vec![format!("config_sha256 = {config_hash}")];
    h.extend(extra.iter().cloned());
    h
}

fn ic_str(ic: InitialCondition) -> &'static str {
    match ic {
        InitialCondition::Full => "Full",
        InitialCondition::Empty => "Empty",
    }
}

fn solver_str(s: SolverKind) -> &'static str {
    match s {
        SolverKind::Meanfield => "Meanfield",
        SolverKind::TwoMode => "TwoMode",
    }
}

fn status_str(s: &RunStatus) -> String {
    match s {
        RunStatus::Converged => "Converged".into(),
        RunStatus::NotConverged => "NotConverged".into(),
        RunStatus::Failed(m) => format!("Failed: {m}"),
    }
}

pub fn record_row(r: &SteadyStateRecord) -> Vec<String> {
    vec![
        fmt_f64(r.j_coupling),
        fmt_f64(r.gamma),
        fmt_f64(r.n0),
        ic_str(r.initial_condition).into(),
        fmt_f64(r.filling_ratio),
        fmt_f64(r.current),
        fmt_f64(r.delta_phi),
        r.tau.map(fmt_f64).unwrap_or_default(),
        solver_str(r.solver).into(),
        status_str(&r.status),
    ]
}

/// Writes a table with `#` header lines to any sink.
pub fn write_table_to<W: Write>(out: W, headers: &[String], columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = BufWriter::new(out);
    let io = |source| Error::Io {
        path: "<stream>".into(),
        source,
    };
    for h in headers {
        writeln!(out, "# {h}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns).map_err(csv_err)?;
    for row in rows {
        if row.len() != columns.len() {
            return Err(Error::Shape {
                expected: columns.len(),
                got: row.len(),
            });
        }
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

pub fn write_table(path: &Path, headers: &[String], columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    write_table_to(f, headers, columns, rows).map_err(|e| match e {
        Error::Io { source, .. } => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn write_records_csv_to<W: Write>(out: W, headers: &[String], records: &[SteadyStateRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records.iter().map(record_row).collect();
    write_table_to(out, headers, &RECORD_COLUMNS, &rows)
}

pub fn write_records_jsonl_to<W: Write>(out: W, headers: &[String], records: &[SteadyStateRecord]) -> Result<()> {
    let mut out = BufWriter::new(out);
    let io = |source| Error::Io {
        path: "<stream>".into(),
        source,
    };
    for h in headers {
        writeln!(out, "# {h}").map_err(io)?;
    }
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::domain(format!("json: {e}")))?;
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn write_records(path: &Path, format: OutputFormat, headers: &[String], records: &[SteadyStateRecord]) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    match format {
        OutputFormat::Csv => write_records_csv_to(f, headers, records),
        OutputFormat::Jsonl => write_records_jsonl_to(f, headers, records),
    }
}

/// `#` header lines, column names, rows.
pub type Table = (Vec<String>, Vec<String>, Vec<Vec<String>>);

pub fn read_table_from<R: Read>(input: R) -> Result<Table> {
    let mut text = String::new();
    BufReader::new(input)
        .read_to_string(&mut text)
        .map_err(io_err(Path::new("<stream>")))?;
    let headers = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .map(|l| l.trim_start_matches('#').trim().to_string())
        .collect();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let columns = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(csv_err)?.iter().map(String::from).collect());
    }
    Ok((headers, columns, rows))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::domain(format!("not a number: {s:?}")))
}

fn parse_record(row: &[String]) -> Result<SteadyStateRecord> {
    if row.len() != RECORD_COLUMNS.len() {
        return Err(Error::Shape {
            expected: RECORD_COLUMNS.len(),
            got: row.len(),
        });
    }
    let ic = match row[3].as_str() {
        "Full" => InitialCondition::Full,
        "Empty" => InitialCondition::Empty,
        s => return Err(Error::domain(format!("unknown initial condition {s:?}"))),
    };
    let solver = match row[8].as_str() {
        "Meanfield" => SolverKind::Meanfield,
        "TwoMode" => SolverKind::TwoMode,
        s => return Err(Error::domain(format!("unknown solver {s:?}"))),
    };
    let status = match row[9].as_str() {
        "Converged" => RunStatus::Converged,
        "NotConverged" => RunStatus::NotConverged,
        s => match s.strip_prefix("Failed: ") {
            Some(m) => RunStatus::Failed(m.to_string()),
            None => return Err(Error::domain(format!("unknown status {s:?}"))),
        },
    };
    Ok(SteadyStateRecord {
        j_coupling: parse_f64(&row[0])?,
        gamma: parse_f64(&row[1])?,
        n0: parse_f64(&row[2])?,
        initial_condition: ic,
        filling_ratio: parse_f64(&row[4])?,
        current: parse_f64(&row[5])?,
        delta_phi: parse_f64(&row[6])?,
        tau: if row[7].is_empty() { None } else { Some(parse_f64(&row[7])?) },
        solver,
        status,
    })
}

pub fn read_records_csv_from<R: Read>(input: R) -> Result<(Vec<String>, Vec<SteadyStateRecord>)> {
    let (headers, columns, rows) = read_table_from(input)?;
    if columns != RECORD_COLUMNS {
        return Err(Error::domain(format!("unexpected columns {columns:?}")));
    }
    let records = rows.iter().map(|r| parse_record(r)).collect::<Result<_>>()?;
    Ok((headers, records))
}

pub fn read_records_jsonl_from<R: Read>(input: R) -> Result<(Vec<String>, Vec<SteadyStateRecord>)> {
    let (mut headers, mut records) = (Vec::new(), Vec::new());
    for line in BufReader::new(input).lines() {
        let line = line.map_err(io_err(Path::new("<stream>")))?;
        if let Some(h) = line.strip_prefix('#') {
            headers.push(h.trim().to_string());
        } else if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line).map_err(|e| Error::domain(format!("json: {e}")))?);
        }
    }
    Ok((headers, records))
}

pub fn read_records(path: &Path) -> Result<(Vec<String>, Vec<SteadyStateRecord>)> {
    let f = File::open(path).map_err(io_err(path))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => read_records_jsonl_from(f),
        _ => read_records_csv_from(f),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn same(a: &SteadyStateRecord, b: &SteadyStateRecord) -> bool {
        let bits = |r: &SteadyStateRecord| {
            [r.j_coupling, r.gamma, r.n0, r.filling_ratio, r.current, r.delta_phi]
                .map(|v| if v.is_nan() { f64::NAN.to_bits() } else { v.to_bits() })
        };
        bits(a) == bits(b)
            && a.tau.map(f64::to_bits) == b.tau.map(f64::to_bits)
            && a.initial_condition == b.initial_condition
            && a.solver == b.solver
            && a.status == b.status
    }

    fn sample(k: usize) -> SteadyStateRecord {
        let j = 100.0 + k as f64 * 0.37;
        if k % 17 == 3 {
            return SteadyStateRecord::failed(j, 0.1 * k as f64, 700.0, InitialCondition::Empty, SolverKind::Meanfield, "boom, \"quoted\"".into());
        }
        SteadyStateRecord::new(
            j,
            (k as f64).sqrt() * 13.1,
            700.0,
            if k % 2 == 0 { InitialCondition::Full } else { InitialCondition::Empty },
            1.0 / (1.0 + k as f64 / 7.0),
            (k as f64 * 0.1).sin(),
            (k % 5 != 0).then(|| 1e-3 / (k as f64 + 1.0)),
            SolverKind::TwoMode,
            if k % 11 == 0 { RunStatus::NotConverged } else { RunStatus::Converged },
        )
    }

    #[test]
    fn single_record_gives_one_header_and_one_row() {
        let mut buf = Vec::new();
        write_records_csv_to(&mut buf, &header_lines("abc", &[]), &[sample(1)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "# config_sha256 = abc");
        assert_eq!(lines[1], RECORD_COLUMNS.join(","));
        assert_eq!(lines[2].split(',').count(), 10);
    }

    #[test]
    fn ten_thousand_records_round_trip_bit_for_bit() {
        let recs: Vec<_> = (0..10_000).map(sample).collect();
        let mut csv_buf = Vec::new();
        write_records_csv_to(&mut csv_buf, &header_lines("h", &[]), &recs).unwrap();
        let (h, back) = read_records_csv_from(csv_buf.as_slice()).unwrap();
        assert_eq!(h, vec!["config_sha256 = h".to_string()]);
        assert_eq!(back.len(), recs.len());
        assert!(recs.iter().zip(&back).all(|(a, b)| same(a, b)));

        let mut json_buf = Vec::new();
        write_records_jsonl_to(&mut json_buf, &header_lines("h", &[]), &recs).unwrap();
        let (_, back_json) = read_records_jsonl_from(json_buf.as_slice()).unwrap();
        assert!(back.iter().zip(&back_json).all(|(a, b)| same(a, b)));
    }

    #[test]
    fn failed_records_write_null_in_json() {
        let r = sample(3);
        let mut buf = Vec::new();
        write_records_jsonl_to(&mut buf, &[], &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"filling_ratio\":null"), "{text}");
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let r = write_table_to(Vec::new(), &[], &["a", "b"], &[vec!["1".into()]]);
        assert!(matches!(r, Err(Error::Shape { expected: 2, got: 1 })));
    }

    proptest! {
        #[test]
        fn any_float_survives_text(v in any::<f64>()) {
            let back: f64 = fmt_f64(v).parse().unwrap();
            prop_assert!(back.to_bits() == v.to_bits() || (v.is_nan() && back.is_nan()));
        }
    }
}
