//! CSV reading and writing for the long-format table.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{validate, DataError, ObservationRecord, TrialDataset};

pub const CSV_HEADER: [&str; 6] = ["cluster_id", "individual_id", "period", "treatment", "mediator", "outcome"];

fn parse_err(line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse { line, message: message.into() }
}

fn parse_flag(s: &str, line: usize, what: &str) -> Result<bool, DataError> {
    match s.trim() {
        "0" | "false" | "FALSE" => Ok(false),
        "1" | "true" | "TRUE" => Ok(true),
        other => Err(parse_err(line, format!("{what} must be 0 or 1, got {other:?}"))),
    }
}

/// Read records from any reader. Empty `mediator` / `outcome` cells are missing.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<ObservationRecord>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column {name:?}")))
    };
    let idx = [
        col("cluster_id")?,
        col("individual_id")?,
        col("period")?,
        col("treatment")?,
        col("mediator")?,
        col("outcome")?,
    ];
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("");
        let period: usize = field(2)
            .parse()
            .map_err(|_| parse_err(line, format!("period must be a positive integer, got {:?}", field(2))))?;
        if period == 0 {
            return Err(parse_err(line, "periods are numbered from 1"));
        }
        let mediator = match field(4) {
            "" | "NA" => None,
            s => {
                let v: f64 = s.parse().map_err(|_| parse_err(line, format!("mediator is not a number: {s:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, "mediator must be finite"));
                }
                Some(v)
            }
        };
        let outcome = match field(5) {
            "" | "NA" => None,
            s => Some(parse_flag(s, line, "outcome")?),
        };
        out.push(ObservationRecord {
            cluster_id: field(0).to_string(),
            individual_id: field(1).to_string(),
            period,
            treatment: parse_flag(field(3), line, "treatment")?,
            mediator,
            outcome,
        });
    }
    Ok(out)
}

/// Read, index and validate a dataset from a CSV file.
pub fn load_csv(path: &Path) -> Result<TrialDataset, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let ds = TrialDataset::from_records(read_csv(file)?)?;
    let report = validate(&ds);
    if !report.is_valid() {
        return Err(DataError::Invalid(report));
    }
    Ok(ds)
}

/// Write records in the canonical column order.
pub fn write_csv<W: Write>(writer: W, records: &[ObservationRecord]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.cluster_id.clone(),
            r.individual_id.clone(),
            r.period.to_string(),
            u8::from(r.treatment).to_string(),
            r.mediator.map(|m| m.to_string()).unwrap_or_default(),
            r.outcome.map(|y| u8::from(y).to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|source| DataError::Io { path: "<writer>".into(), source })?;
    Ok(())
}

/// SHA-256 of the canonical CSV rendering, hex encoded.
pub fn content_sha256(records: &[ObservationRecord]) -> Result<String, DataError> {
    use sha2::{Digest, Sha256};
    let mut buf = Vec::new();
    write_csv(&mut buf, records)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::complete;
    use super::*;

    #[test]
    fn round_trip_preserves_records() {
        let mut recs = complete(2, 3, 2);
        recs[5].mediator = None;
        recs[5].outcome = None;
        recs[0].mediator = Some(-1.234_567_890_123_456_7e-5);
        let mut buf = Vec::new();
        write_csv(&mut buf, &recs).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn header_and_missing_cells() {
        let text = "cluster_id,individual_id,period,treatment,mediator,outcome\nA,1,1,0,0.5,1\nA,1,2,1,,\n";
        let recs = read_csv(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[0].is_observed());
        assert_eq!(recs[1].mediator, None);
        assert_eq!(recs[1].outcome, None);
    }

    #[test]
    fn bad_fields_name_the_line() {
        let text = "cluster_id,individual_id,period,treatment,mediator,outcome\nA,1,1,0,0.5,1\nA,1,2,2,0.1,0\n";
        match read_csv(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let no_col = "cluster_id,period\nA,1\n";
        assert!(read_csv(no_col.as_bytes()).is_err());
    }
}
