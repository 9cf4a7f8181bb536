//! Minimal CSV output. Floats carry 17 significant digits so they parse
//! back exactly; rationals are written as `num/den`.

use std::path::Path;

use num_rational::BigRational;

use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_rational(r: &BigRational) -> String {
    crate::wu::format_rational(r)
}

pub fn to_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut out = header.join(",");
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::invalid(format!("row {i} has {} fields, header has {}", row.len(), header.len())));
        }
        if let Some(f) = row.iter().find(|f| f.contains([',', '\n', '"'])) {
            return Err(Error::invalid(format!("field {f:?} needs quoting, which is unsupported")));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let text = to_string(header, rows)?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_records_give_header_only() {
        assert_eq!(to_string(&["a", "b"], &[]).unwrap(), "a,b\n");
    }

    #[test]
    fn rejects_ragged_rows_and_bad_paths() {
        assert!(to_string(&["a"], &[vec!["1".into(), "2".into()]]).is_err());
        assert!(to_string(&["a"], &[vec!["1,2".into()]]).is_err());
        assert!(emit_csv(Path::new("/nonexistent/dir/x.csv"), &["a"], &[]).is_err());
    }

    #[test]
    fn ledger_rows_match_schema() {
        let mut l = crate::wu::WorkUnitLedger::new();
        l.charge(2, 3).unwrap();
        let rows: Vec<Vec<String>> = l.csv_rows().into_iter().map(Vec::from).collect();
        let text = to_string(&["level", "images", "wu_numerator", "wu_denominator"], &rows).unwrap();
        assert_eq!(text, "level,images,wu_numerator,wu_denominator\n2,3,3,4\ntotal,3,3,4\n");
    }

    proptest! {
        #[test]
        fn floats_round_trip(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
