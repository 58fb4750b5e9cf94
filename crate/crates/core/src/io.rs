//! Long-format panel CSV: `unit,time,y,x1..xd[,f1..fq]`, one row per
//! observation.
//!
//! Units and times are labels, not numbers; the parser sorts both
//! lexicographically and indexes the panel in that order. Values round-trip
//! bit-exactly because the writer emits 17 significant digits. When no
//! f-columns are present the deterministic part is a lone intercept; when
//! they are, an intercept column is prepended only if no nonzero constant
//! column is already there. A constant column must sit first and hold the
//! value 1, so there is never a second, disguised intercept.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::panel::PanelData;

const MAX_BALANCE_OFFENDERS: usize = 10;

struct Header {
    d: usize,
    q1: usize,
}

fn parse_header(fields: &[String]) -> Result<Header> {
    let fixed = ["unit", "time", "y"];
    if fields.len() < 4 {
        return Err(Error::input(format!(
            "header needs unit,time,y and at least one x column, got {} fields",
            fields.len()
        )));
    }
    for (k, want) in fixed.iter().enumerate() {
        if fields[k] != *want {
            return Err(Error::input(format!(
                "header field {} must be '{}', got '{}'",
                k + 1,
                want,
                fields[k]
            )));
        }
    }
    let mut d = 0usize;
    let mut pos = 3;
    while pos < fields.len() && fields[pos] == format!("x{}", d + 1) {
        d += 1;
        pos += 1;
    }
    if d == 0 {
        return Err(Error::input(format!(
            "header field 4 must be 'x1', got '{}'",
            fields[3]
        )));
    }
    let mut q1 = 0usize;
    while pos < fields.len() && fields[pos] == format!("f{}", q1 + 1) {
        q1 += 1;
        pos += 1;
    }
    if pos < fields.len() {
        return Err(Error::input(format!(
            "unexpected header field '{}'; expected x1..xd then f1..fq",
            fields[pos]
        )));
    }
    Ok(Header { d, q1 })
}

fn parse_value(raw: &str, column: &str, line: usize) -> Result<f64> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::input(format!(
            "line {line}: column '{column}' is not a finite number: '{raw}'"
        ))),
    }
}

/// Read a long-format panel CSV, validating balance on the way in.
pub fn parse_panel_csv(path: impl AsRef<Path>) -> Result<PanelData> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    let header_fields: Vec<String> =
        reader.headers().map_err(|e| Error::input(format!("bad header: {e}")))?
            .iter()
            .map(|s| s.to_string())
            .collect();
    let header = parse_header(&header_fields)?;
    let width = 3 + header.d + header.q1;

    struct Row {
        unit: String,
        time: String,
        values: Vec<f64>,
        line: usize,
    }
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::input(format!("line {line}: {e}")))?;
        if record.len() != width {
            return Err(Error::input(format!(
                "line {line}: expected {width} fields, got {}",
                record.len()
            )));
        }
        let mut values = Vec::with_capacity(width - 2);
        for (k, raw) in record.iter().enumerate().skip(2) {
            values.push(parse_value(raw, &header_fields[k], line)?);
        }
        rows.push(Row {
            unit: record[0].to_string(),
            time: record[1].to_string(),
            values,
            line,
        });
    }
    if rows.is_empty() {
        return Err(Error::input("no data rows"));
    }

    let mut unit_index: BTreeMap<String, usize> =
        rows.iter().map(|r| (r.unit.clone(), 0)).collect();
    let mut time_index: BTreeMap<String, usize> =
        rows.iter().map(|r| (r.time.clone(), 0)).collect();
    for (k, v) in unit_index.values_mut().enumerate() {
        *v = k;
    }
    for (k, v) in time_index.values_mut().enumerate() {
        *v = k;
    }
    let units: Vec<String> = unit_index.keys().cloned().collect();
    let times: Vec<String> = time_index.keys().cloned().collect();
    let (n, t) = (units.len(), times.len());

    let mut y = Array2::<f64>::zeros((n, t));
    let mut x = Array3::<f64>::zeros((n, t, header.d));
    let mut f1_rows: Vec<Option<(Vec<f64>, usize)>> = vec![None; t];
    let mut seen = Array2::<usize>::zeros((n, t));
    for row in &rows {
        let i = unit_index[&row.unit];
        let tt = time_index[&row.time];
        if seen[[i, tt]] != 0 {
            return Err(Error::input(format!(
                "duplicate cell unit={} time={} (lines {} and {})",
                row.unit, row.time, seen[[i, tt]], row.line
            )));
        }
        seen[[i, tt]] = row.line;
        y[[i, tt]] = row.values[0];
        for s in 0..header.d {
            x[[i, tt, s]] = row.values[1 + s];
        }
        let f_part = &row.values[1 + header.d..];
        match &f1_rows[tt] {
            None => f1_rows[tt] = Some((f_part.to_vec(), row.line)),
            Some((prev, prev_line)) => {
                if prev.as_slice() != f_part {
                    return Err(Error::input(format!(
                        "factor columns differ across rows at time={} (lines {} and {})",
                        row.time, prev_line, row.line
                    )));
                }
            }
        }
    }

    let mut missing = Vec::new();
    for (i, u) in units.iter().enumerate() {
        for (tt, tl) in times.iter().enumerate() {
            if seen[[i, tt]] == 0 {
                missing.push(format!("unit={u} time={tl}"));
            }
        }
    }
    if !missing.is_empty() {
        let shown = missing.iter().take(MAX_BALANCE_OFFENDERS).cloned().collect::<Vec<_>>();
        let suffix = if missing.len() > MAX_BALANCE_OFFENDERS {
            format!(" and {} more", missing.len() - MAX_BALANCE_OFFENDERS)
        } else {
            String::new()
        };
        return Err(Error::input(format!(
            "unbalanced panel, missing {} cell(s): {}{}",
            missing.len(),
            shown.join(", "),
            suffix
        )));
    }

    let f1 = if header.q1 == 0 {
        Array2::<f64>::ones((t, 1))
    } else {
        let mut raw = Array2::<f64>::zeros((t, header.q1));
        for (tt, slot) in f1_rows.iter().enumerate() {
            let (vals, _) = slot.as_ref().expect("balanced");
            for (k, v) in vals.iter().enumerate() {
                raw[[tt, k]] = *v;
            }
        }
        let constant_col = (0..header.q1).find(|&k| {
            let col = raw.column(k);
            let first = col[0];
            first != 0.0 && col.iter().all(|v| *v == first)
        });
        match constant_col {
            Some(k) if raw[[0, k]] != 1.0 => {
                return Err(Error::input(format!(
                    "factor column f{} is constant at {}; scale it to 1 so it can serve as \
                     the intercept",
                    k + 1,
                    raw[[0, k]]
                )));
            }
            Some(k) if k != 0 => {
                return Err(Error::input(format!(
                    "the constant column must come first: move f{} before f1",
                    k + 1
                )));
            }
            Some(_) => raw,
            None => {
                let mut with_intercept = Array2::<f64>::ones((t, header.q1 + 1));
                with_intercept.slice_mut(ndarray::s![.., 1..]).assign(&raw);
                with_intercept
            }
        }
    };

    PanelData::with_labels(y, x, f1, units, times)
}

/// Write a panel in the long format [`parse_panel_csv`] reads, with all
/// f-columns spelled out. Reading the file back reproduces the panel
/// bit-exactly as long as the labels sort lexicographically in panel order,
/// which the default labels do.
pub fn write_panel_csv(panel: &PanelData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::input(format!("cannot write {}: {e}", path.display())))?;
    let (n, t, d, q1) = (panel.n(), panel.t_len(), panel.d(), panel.q1());
    let mut header = vec!["unit".to_string(), "time".to_string(), "y".to_string()];
    for s in 0..d {
        header.push(format!("x{}", s + 1));
    }
    for k in 0..q1 {
        header.push(format!("f{}", k + 1));
    }
    writer.write_record(&header).map_err(|e| Error::input(e.to_string()))?;
    for i in 0..n {
        for tt in 0..t {
            let mut record = vec![
                panel.unit_labels[i].clone(),
                panel.time_labels[tt].clone(),
                format!("{:.16e}", panel.y[[i, tt]]),
            ];
            for s in 0..d {
                record.push(format!("{:.16e}", panel.x[[i, tt, s]]));
            }
            for k in 0..q1 {
                record.push(format!("{:.16e}", panel.f1[[tt, k]]));
            }
            writer.write_record(&record).map_err(|e| Error::input(e.to_string()))?;
        }
    }
    writer.flush().map_err(|e| Error::input(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::dgp::{generate_seeded, DgpSpec};
    use crate::simlab::Design;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_file_round_trips_shape() {
        let f = write_tmp(
            "unit,time,y,x1\na,1,1.0,0.5\na,2,2.0,0.6\na,3,3.0,0.7\nb,1,4.0,0.8\nb,2,5.0,0.9\nb,3,6.0,1.0\n",
        );
        let p = parse_panel_csv(f.path()).unwrap();
        assert_eq!((p.n(), p.t_len(), p.d(), p.q1()), (2, 3, 1, 1));
        assert!(p.f1.iter().all(|v| *v == 1.0));
        assert_eq!(p.y[[1, 2]], 6.0);
        assert_eq!(p.x[[0, 1, 0]], 0.6);
    }

    #[test]
    fn rows_land_by_label_not_file_order() {
        let f = write_tmp(
            "unit,time,y,x1\nb,2,5.0,0.1\na,1,1.0,0.2\nb,3,6.0,0.3\na,2,2.0,0.4\nb,1,4.0,0.5\na,3,3.0,0.6\n",
        );
        let p = parse_panel_csv(f.path()).unwrap();
        assert_eq!(p.y[[0, 0]], 1.0);
        assert_eq!(p.y[[0, 2]], 3.0);
        assert_eq!(p.y[[1, 0]], 4.0);
        assert_eq!(p.y[[1, 1]], 5.0);
        assert_eq!(p.unit_labels, vec!["a", "b"]);
        assert_eq!(p.time_labels, vec!["1", "2", "3"]);
    }

    #[test]
    fn missing_cell_is_named() {
        let f = write_tmp("unit,time,y,x1\na,1,1.0,0.5\na,2,2.0,0.6\nb,1,3.0,0.7\n");
        let err = parse_panel_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("unit=b time=2"), "{err}");
    }

    #[test]
    fn many_missing_cells_are_truncated() {
        let mut content = String::from("unit,time,y,x1\n");
        for u in 0..4 {
            content.push_str(&format!("u{u},1,1.0,0.5\n"));
        }
        for t in 1..=5 {
            content.push_str(&format!("v,{t},1.0,0.5\n"));
        }
        let err = parse_panel_csv(write_tmp(&content).path()).unwrap_err().to_string();
        assert!(err.contains("missing 16 cell(s)"), "{err}");
        assert!(err.contains("and 6 more"), "{err}");
    }

    #[test]
    fn duplicate_cell_is_rejected() {
        let f = write_tmp("unit,time,y,x1\na,1,1.0,0.5\na,1,2.0,0.6\n");
        let err = parse_panel_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("duplicate cell unit=a time=1"), "{err}");
        assert!(err.contains("lines 2 and 3"), "{err}");
    }

    #[test]
    fn non_numeric_field_reports_line_and_column() {
        let f = write_tmp("unit,time,y,x1\na,1,1.0,0.5\na,2,oops,0.6\n");
        let err = parse_panel_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("column 'y'"), "{err}");
    }

    #[test]
    fn header_must_match_expected_shape() {
        for bad in [
            "unit,time,y\na,1,1.0\n",
            "unit,time,y,x2\na,1,1.0,0.5\n",
            "unit,time,y,x1,z9\na,1,1.0,0.5,1.0\n",
            "id,time,y,x1\na,1,1.0,0.5\n",
        ] {
            assert!(parse_panel_csv(write_tmp(bad).path()).is_err(), "{bad}");
        }
    }

    #[test]
    fn factor_columns_must_agree_within_a_time() {
        let f = write_tmp(
            "unit,time,y,x1,f1\na,1,1.0,0.5,2.0\nb,1,2.0,0.6,3.0\na,2,1.0,0.5,2.0\nb,2,2.0,0.6,2.0\n",
        );
        let err = parse_panel_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("time=1"), "{err}");
    }

    #[test]
    fn intercept_prepended_only_without_constant_column() {
        let varying = write_tmp(
            "unit,time,y,x1,f1\na,1,1.0,0.5,2.0\na,2,2.0,0.6,3.0\na,3,3.0,0.7,4.0\na,4,4.0,0.8,5.0\n",
        );
        let p = parse_panel_csv(varying.path()).unwrap();
        assert_eq!(p.q1(), 2);
        assert!(p.f1.column(0).iter().all(|v| *v == 1.0));
        assert_eq!(p.f1[[1, 1]], 3.0);

        let constant = write_tmp(
            "unit,time,y,x1,f1,f2\na,1,1.0,0.5,1.0,2.0\na,2,2.0,0.6,1.0,3.0\na,3,3.0,0.7,1.0,4.0\na,4,4.0,0.8,1.0,5.0\n",
        );
        let p = parse_panel_csv(constant.path()).unwrap();
        assert_eq!(p.q1(), 2);
        assert_eq!(p.f1[[0, 0]], 1.0);
        assert_eq!(p.f1[[2, 1]], 4.0);
    }

    #[test]
    fn misplaced_or_scaled_constant_column_is_rejected() {
        let scaled = write_tmp(
            "unit,time,y,x1,f1\na,1,1.0,0.5,7.0\na,2,2.0,0.6,7.0\na,3,3.0,0.7,7.0\na,4,4.0,0.8,7.0\n",
        );
        let err = parse_panel_csv(scaled.path()).unwrap_err().to_string();
        assert!(err.contains("constant at 7"), "{err}");

        let misplaced = write_tmp(
            "unit,time,y,x1,f1,f2\na,1,1.0,0.5,2.0,1.0\na,2,2.0,0.6,3.0,1.0\na,3,3.0,0.7,4.0,1.0\na,4,4.0,0.8,5.0,1.0\n",
        );
        let err = parse_panel_csv(misplaced.path()).unwrap_err().to_string();
        assert!(err.contains("move f2 before f1"), "{err}");
    }

    #[test]
    fn zero_column_does_not_count_as_intercept() {
        let f = write_tmp(
            "unit,time,y,x1,f1\na,1,1.0,0.5,0.0\na,2,2.0,0.6,0.0\na,3,3.0,0.7,0.0\na,4,4.0,0.8,0.0\n",
        );
        let p = parse_panel_csv(f.path()).unwrap();
        assert_eq!(p.q1(), 2);
        assert!(p.f1.column(0).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn generated_panel_round_trips_bit_exactly() {
        let spec = DgpSpec::new(Design::hetero_logistic(), 11, 13, 99);
        let gened = generate_seeded(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_panel_csv(&gened.panel, &path).unwrap();
        let back = parse_panel_csv(&path).unwrap();
        assert_eq!(back.y, gened.panel.y);
        assert_eq!(back.x, gened.panel.x);
        assert_eq!(back.f1, gened.panel.f1);
    }

    #[test]
    fn round_trip_survives_awkward_values() {
        let y = ndarray::array![
            [1.0 / 3.0, -2.5e-17, 1e16, 0.1 + 0.2],
            [7.00000000000000001, -0.0, 3.14159265358979, 2f64.sqrt()]
        ];
        let x = Array3::from_shape_fn((2, 4, 1), |(i, t, _)| (i as f64 - 0.3) * (t as f64 + 0.7));
        let f1 = ndarray::array![
            [1.0, -0.987654321012345e-3],
            [1.0, 3.3],
            [1.0, 1.0 / 7.0],
            [1.0, -4.4e8]
        ];
        let panel = PanelData::new(y, x, f1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_panel_csv(&panel, &path).unwrap();
        let back = parse_panel_csv(&path).unwrap();
        assert_eq!(back.y, panel.y);
        assert_eq!(back.x, panel.x);
        assert_eq!(back.f1, panel.f1);
    }
}
