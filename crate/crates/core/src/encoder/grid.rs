use rand::seq::index::sample;
use rand::Rng;

use super::EncoderConfig;
use crate::data::{EcgRecord, Lead, NUM_LEADS};
use crate::error::{Error, Result};

/// Raw segment tokens of one record plus their keep mask.
///
/// Rows are the present leads in canonical order regardless of the order in
/// the source record, so a permuted record yields the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    leads: Vec<Lead>,
    segments: usize,
    token_length: usize,
    /// `[leads x segments x token_length]`.
    patches: Vec<f64>,
    /// `[leads x segments]`.
    keep: Vec<bool>,
}

impl TokenGrid {
    /// Split every lead into `M = S / p` non-overlapping segments.
    pub fn from_record(rec: &EcgRecord, cfg: &EncoderConfig) -> Result<Self> {
        let p = cfg.token_length;
        if p == 0 || rec.len() % p != 0 {
            return Err(Error::Config(format!(
                "token length {p} does not divide signal length {} of {}",
                rec.len(),
                rec.id()
            )));
        }
        let segments = rec.len() / p;
        if segments != cfg.segments() {
            return Err(Error::Config(format!(
                "{} has {segments} segments, the encoder was built for {}",
                rec.id(),
                cfg.segments()
            )));
        }
        let mut order: Vec<(Lead, usize)> = rec.leads().iter().copied().zip(0..).collect();
        order.sort();
        let mut patches = Vec::with_capacity(rec.signal().len());
        for &(_, row) in &order {
            patches.extend_from_slice(rec.lead_row(row));
        }
        Ok(Self {
            leads: order.into_iter().map(|(l, _)| l).collect(),
            segments,
            token_length: p,
            patches,
            keep: vec![true; rec.leads().len() * segments],
        })
    }

    pub fn leads(&self) -> &[Lead] {
        &self.leads
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn token_length(&self) -> usize {
        self.token_length
    }

    pub fn keep_mask(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, row: usize, seg: usize) -> bool {
        self.keep[row * self.segments + seg]
    }

    pub fn patch(&self, row: usize, seg: usize) -> &[f64] {
        let start = (row * self.segments + seg) * self.token_length;
        &self.patches[start..start + self.token_length]
    }

    pub fn num_kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn masked_in_row(&self, row: usize) -> usize {
        self.keep[row * self.segments..(row + 1) * self.segments]
            .iter()
            .filter(|&&k| !k)
            .count()
    }

    /// Kept `(row, segment)` pairs, lead-major then segment-minor.
    pub fn kept_positions(&self) -> Vec<(usize, usize)> {
        (0..self.leads.len())
            .flat_map(|r| (0..self.segments).map(move |s| (r, s)))
            .filter(|&(r, s)| self.is_kept(r, s))
            .collect()
    }

    /// Drop every row whose lead is not in `keep`.
    fn retain_leads(&mut self, keep: impl Fn(Lead) -> bool) {
        let row_len = self.segments * self.token_length;
        let mut leads = Vec::new();
        let mut patches = Vec::new();
        let mut mask = Vec::new();
        for (r, &l) in self.leads.iter().enumerate() {
            if keep(l) {
                leads.push(l);
                patches.extend_from_slice(&self.patches[r * row_len..(r + 1) * row_len]);
                mask.extend_from_slice(&self.keep[r * self.segments..(r + 1) * self.segments]);
            }
        }
        self.leads = leads;
        self.patches = patches;
        self.keep = mask;
    }
}

/// Remove a uniformly drawn number (in `min_masked..=max_masked`) of
/// uniformly chosen leads. Only valid on twelve-lead grids.
pub fn dynamic_lead_mask<R: Rng>(grid: &TokenGrid, min_masked: usize, max_masked: usize, rng: &mut R) -> Result<TokenGrid> {
    if grid.leads.len() != NUM_LEADS {
        return Err(Error::Invalid(format!(
            "lead masking needs all {NUM_LEADS} leads, grid has {}",
            grid.leads.len()
        )));
    }
    if min_masked > max_masked || max_masked >= NUM_LEADS {
        return Err(Error::Config(format!(
            "masked lead range {min_masked}..={max_masked} must satisfy min <= max <= {}",
            NUM_LEADS - 1
        )));
    }
    let count = rng.random_range(min_masked..=max_masked);
    let masked: Vec<Lead> = sample(rng, NUM_LEADS, count)
        .into_iter()
        .map(|slot| Lead::new(slot as u8 + 1))
        .collect::<std::result::Result<_, _>>()?;
    mask_leads(grid, &masked)
}

/// Remove the rows of `masked` from a twelve-lead grid, as lead masking does
/// once it has drawn its leads. At least one lead must survive.
pub fn mask_leads(grid: &TokenGrid, masked: &[Lead]) -> Result<TokenGrid> {
    if grid.leads.len() != NUM_LEADS {
        return Err(Error::Invalid(format!(
            "lead masking needs all {NUM_LEADS} leads, grid has {}",
            grid.leads.len()
        )));
    }
    let mut out = grid.clone();
    out.retain_leads(|l| !masked.contains(&l));
    if out.leads.is_empty() {
        return Err(Error::Invalid("lead masking must leave at least one lead".into()));
    }
    Ok(out)
}

/// Masked segments per lead: `floor(ratio * M)`.
pub fn masked_per_lead(ratio: f64, segments: usize) -> usize {
    // the epsilon guards products such as 0.29 * 100 = 28.999999999999996
    ((ratio * segments as f64) + 1e-9).floor() as usize
}

/// For every lead independently, mask `floor(ratio * M)` distinct segments.
pub fn segment_mask<R: Rng>(grid: &TokenGrid, ratio: f64, rng: &mut R) -> Result<TokenGrid> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} must lie in [0, 1)")));
    }
    let n = masked_per_lead(ratio, grid.segments);
    let mut out = grid.clone();
    if n == 0 {
        return Ok(out);
    }
    for row in 0..out.leads.len() {
        for seg in sample(rng, out.segments, n) {
            out.keep[row * out.segments + seg] = false;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            token_length: 100,
            signal_length: 5000,
            ..EncoderConfig::default()
        }
    }

    fn record(leads: Vec<Lead>) -> EcgRecord {
        let n = leads.len() * 5000;
        let signal = (0..n).map(|i| (i % 97) as f64).collect();
        EcgRecord::new("r", leads, signal, 500, "").unwrap()
    }

    #[test]
    fn twelve_leads_give_six_hundred_tokens() {
        let g = TokenGrid::from_record(&record(Lead::all().collect()), &cfg()).unwrap();
        assert_eq!(g.segments(), 50);
        assert_eq!(g.num_kept(), 600);
        let single = TokenGrid::from_record(&record(vec![Lead::new(2).unwrap()]), &cfg()).unwrap();
        assert_eq!(single.leads(), &[Lead::new(2).unwrap()]);
        assert_eq!(single.num_kept(), 50);
    }

    #[test]
    fn token_length_must_divide_signal() {
        let c = EncoderConfig { token_length: 300, ..cfg() };
        assert!(TokenGrid::from_record(&record(Lead::first(1)), &c).is_err());
    }

    #[test]
    fn forced_extreme_leaves_one_lead() {
        let g = TokenGrid::from_record(&record(Lead::all().collect()), &cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(dynamic_lead_mask(&g, 11, 11, &mut rng).unwrap().leads().len(), 1);
            let n = dynamic_lead_mask(&g, 9, 11, &mut rng).unwrap().leads().len();
            assert!((1..=3).contains(&n));
        }
    }

    #[test]
    fn lead_masking_rejects_partial_input() {
        let g = TokenGrid::from_record(&record(Lead::first(3)), &cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dynamic_lead_mask(&g, 9, 11, &mut rng).is_err());
    }

    #[test]
    fn segment_mask_counts() {
        let g = TokenGrid::from_record(&record(Lead::first(12)), &cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = segment_mask(&g, 0.25, &mut rng).unwrap();
        for r in 0..12 {
            assert_eq!(m.masked_in_row(r), 12);
        }
        assert_eq!(segment_mask(&g, 0.0, &mut rng).unwrap(), g);
        assert!(segment_mask(&g, 1.0, &mut rng).is_err());
    }

    #[test]
    fn leads_are_masked_independently() {
        let g = TokenGrid::from_record(&record(Lead::first(12)), &cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = segment_mask(&g, 0.25, &mut rng).unwrap();
        let rows: Vec<&[bool]> = (0..12).map(|r| &m.keep_mask()[r * 50..(r + 1) * 50]).collect();
        assert!(rows.iter().any(|r| *r != rows[0]));
    }

    #[test]
    fn rows_follow_canonical_order() {
        let leads = vec![Lead::new(9).unwrap(), Lead::new(2).unwrap()];
        let g = TokenGrid::from_record(&record(leads), &cfg()).unwrap();
        assert_eq!(g.leads(), &[Lead::new(2).unwrap(), Lead::new(9).unwrap()]);
        // lead 9 was row 0 in the record: samples start at 0
        assert_eq!(g.patch(1, 0)[0], 0.0);
        assert_eq!(g.patch(0, 0)[0], (5000 % 97) as f64);
    }

    proptest! {
        #[test]
        fn masked_count_is_floor(ratio in 0.0f64..0.99, m in 1usize..80) {
            let n = masked_per_lead(ratio, m);
            prop_assert!(n as f64 <= ratio * m as f64 + 1e-6);
            prop_assert!((n + 1) as f64 > ratio * m as f64);
        }
    }
}
