use std::path::Path;

use crate::error::{Error, Result};

fn write_rows<W: std::io::Write>(w: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().quote_style(csv::QuoteStyle::Never).from_writer(w);
    out.write_record(header)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::format("CSV row", format!("{} fields, header has {}", row.len(), header.len())));
        }
        out.write_record(row)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Header plus comma-separated rows, no quoting.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut buf = Vec::new();
    write_rows(&mut buf, header, rows)?;
    Ok(String::from_utf8(buf).expect("CSV fields are UTF-8"))
}

pub fn write_csv(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(file, header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_rows() {
        let s = csv_string(&["a", "b"], &[vec!["1".into(), "2.5".into()]]).unwrap();
        assert_eq!(s, "a,b\n1,2.5\n");
        assert!(csv_string(&["a"], &[vec![]]).is_err());
    }
}
