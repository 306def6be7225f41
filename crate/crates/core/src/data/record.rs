use std::fmt;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Canonical lead order, indices 1..=12.
pub const LEAD_NAMES: [&str; 12] = ["I", "II", "III", "aVF", "aVR", "aVL", "V1", "V2", "V3", "V4", "V5", "V6"];

pub const NUM_LEADS: usize = 12;

/// A standard ECG lead, identified by its 1-based canonical index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Lead(u8);

impl Lead {
    pub fn new(index: u8) -> Result<Self, DataError> {
        if (1..=12).contains(&index) {
            Ok(Self(index))
        } else {
            Err(DataError::InvalidLead(index.to_string()))
        }
    }

    /// All twelve leads in canonical order.
    pub fn all() -> impl Iterator<Item = Lead> {
        (1..=12).map(Lead)
    }

    /// The first `k` leads of the canonical order.
    pub fn first(k: usize) -> Vec<Lead> {
        Lead::all().take(k).collect()
    }

    pub fn from_name(name: &str) -> Result<Self, DataError> {
        LEAD_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name.trim()))
            .map(|i| Lead(i as u8 + 1))
            .ok_or_else(|| DataError::InvalidLead(name.to_string()))
    }

    /// 1-based canonical index.
    pub fn index(self) -> u8 {
        self.0
    }

    /// Row into a 12-row lead-embedding table.
    pub fn slot(self) -> usize {
        self.0 as usize - 1
    }

    pub fn name(self) -> &'static str {
        LEAD_NAMES[self.slot()]
    }
}

impl TryFrom<u8> for Lead {
    type Error = DataError;
    fn try_from(v: u8) -> Result<Self, DataError> {
        Lead::new(v)
    }
}

impl From<Lead> for u8 {
    fn from(l: Lead) -> u8 {
        l.0
    }
}

impl fmt::Display for Lead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A multi-lead recording paired with its free-text report.
///
/// `signal` is row-major `[leads.len() x len]` in millivolts.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    record_id: String,
    leads: Vec<Lead>,
    len: usize,
    signal: Vec<f64>,
    sample_rate_hz: u32,
    report: String,
}

impl EcgRecord {
    pub fn new(
        record_id: impl Into<String>,
        leads: Vec<Lead>,
        signal: Vec<f64>,
        sample_rate_hz: u32,
        report: impl Into<String>,
    ) -> Result<Self, DataError> {
        let record_id = record_id.into();
        if leads.is_empty() {
            return Err(DataError::Invalid(format!("{record_id}: no leads")));
        }
        let mut seen = [false; NUM_LEADS];
        for l in &leads {
            if std::mem::replace(&mut seen[l.slot()], true) {
                return Err(DataError::Invalid(format!("{record_id}: lead {l} appears twice")));
            }
        }
        if sample_rate_hz == 0 {
            return Err(DataError::Invalid(format!("{record_id}: sample rate must be positive")));
        }
        if signal.len() % leads.len() != 0 {
            return Err(DataError::Invalid(format!(
                "{record_id}: {} samples do not split evenly across {} leads",
                signal.len(),
                leads.len()
            )));
        }
        let len = signal.len() / leads.len();
        if len == 0 {
            return Err(DataError::Invalid(format!("{record_id}: empty signal")));
        }
        if signal.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("{record_id}: non-finite sample")));
        }
        Ok(Self {
            record_id,
            leads,
            len,
            signal,
            sample_rate_hz,
            report: report.into(),
        })
    }

    pub fn id(&self) -> &str {
        &self.record_id
    }

    pub fn leads(&self) -> &[Lead] {
        &self.leads
    }

    /// Samples per lead (S).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn report(&self) -> &str {
        &self.report
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    /// Samples of the `row`-th present lead.
    pub fn lead_row(&self, row: usize) -> &[f64] {
        &self.signal[row * self.len..(row + 1) * self.len]
    }

    pub fn lead_signal(&self, lead: Lead) -> Option<&[f64]> {
        self.leads.iter().position(|&l| l == lead).map(|r| self.lead_row(r))
    }

    pub fn has_all_leads(&self) -> bool {
        self.leads.len() == NUM_LEADS
    }

    /// Keep only `keep` (in the given order); leads absent from the record are
    /// an error.
    pub fn restrict_to(&self, keep: &[Lead]) -> Result<Self, DataError> {
        let mut signal = Vec::with_capacity(keep.len() * self.len);
        for &l in keep {
            let row = self
                .lead_signal(l)
                .ok_or_else(|| DataError::Invalid(format!("{}: lead {l} not present", self.record_id)))?;
            signal.extend_from_slice(row);
        }
        Self::new(self.record_id.clone(), keep.to_vec(), signal, self.sample_rate_hz, self.report.clone())
    }

    /// Twelve-lead record where every lead outside `keep` is replaced by zeros.
    pub fn zero_padded(&self, keep: &[Lead]) -> Result<Self, DataError> {
        let mut signal = vec![0.0; NUM_LEADS * self.len];
        for &l in keep {
            let row = self
                .lead_signal(l)
                .ok_or_else(|| DataError::Invalid(format!("{}: lead {l} not present", self.record_id)))?;
            signal[l.slot() * self.len..(l.slot() + 1) * self.len].copy_from_slice(row);
        }
        Self::new(
            self.record_id.clone(),
            Lead::all().collect(),
            signal,
            self.sample_rate_hz,
            self.report.clone(),
        )
    }

    pub fn with_report(mut self, report: impl Into<String>) -> Self {
        self.report = report.into();
        self
    }

    pub(crate) fn signal_mut(&mut self) -> &mut [f64] {
        &mut self.signal
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lead_order_is_bijective() {
        for (i, name) in LEAD_NAMES.iter().enumerate() {
            let l = Lead::from_name(name).unwrap();
            assert_eq!(l.slot(), i);
            assert_eq!(l.name(), *name);
            assert_eq!(Lead::new(l.index()).unwrap(), l);
        }
        assert!(Lead::new(0).is_err());
        assert!(Lead::new(13).is_err());
        assert!(Lead::from_name("V7").is_err());
    }

    #[test]
    fn rejects_duplicate_leads_and_nan() {
        let l = Lead::new(1).unwrap();
        assert!(EcgRecord::new("a", vec![l, l], vec![0.0; 4], 500, "").is_err());
        assert!(EcgRecord::new("a", vec![l], vec![f64::NAN, 0.0], 500, "").is_err());
        assert!(EcgRecord::new("a", vec![l], vec![], 500, "").is_err());
    }

    #[test]
    fn restrict_and_pad() {
        let leads = Lead::first(3);
        let rec = EcgRecord::new("r", leads.clone(), vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0], 500, "x").unwrap();
        let sub = rec.restrict_to(&[leads[2], leads[0]]).unwrap();
        assert_eq!(sub.signal(), &[3.0, 3.0, 1.0, 1.0]);
        let padded = rec.zero_padded(&[leads[1]]).unwrap();
        assert!(padded.has_all_leads());
        assert_eq!(padded.lead_signal(leads[1]).unwrap(), &[2.0, 2.0]);
        assert_eq!(padded.lead_signal(leads[0]).unwrap(), &[0.0, 0.0]);
    }
}
