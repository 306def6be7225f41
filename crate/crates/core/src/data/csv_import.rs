use std::path::Path;

use super::{DataError, EcgRecord, Lead};

/// Read a one-record CSV: header row of lead names, one column per lead, one
/// row per sample.
pub fn import_csv(path: &Path, record_id: &str, sample_rate_hz: u32, report: &str) -> Result<EcgRecord, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Csv(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let leads = headers.iter().map(Lead::from_name).collect::<Result<Vec<_>, _>>()?;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); leads.len()];
    for (row, result) in reader.records().enumerate() {
        let rec = result.map_err(|e| DataError::Csv(e.to_string()))?;
        if rec.len() != leads.len() {
            return Err(DataError::Csv(format!("row {}: expected {} columns", row + 1, leads.len())));
        }
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| DataError::Csv(format!("row {}: bad number {field:?}", row + 1)))?;
            columns[col].push(v);
        }
    }
    EcgRecord::new(record_id, leads, columns.concat(), sample_rate_hz, report)
}
