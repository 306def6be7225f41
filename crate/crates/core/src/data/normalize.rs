use super::EcgRecord;

/// Variance below which a lead is treated as flat.
pub const FLAT_VARIANCE: f64 = 1e-12;

/// Standardize every present lead to zero mean and unit (population)
/// variance. Flat leads become all zeros.
pub fn normalize_record(mut rec: EcgRecord) -> EcgRecord {
    let len = rec.len();
    for lead in rec.signal_mut().chunks_mut(len) {
        let n = lead.len() as f64;
        let mean = lead.iter().sum::<f64>() / n;
        let var = lead.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var < FLAT_VARIANCE {
            lead.iter_mut().for_each(|v| *v = 0.0);
        } else {
            let inv = 1.0 / var.sqrt();
            lead.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
    }
    rec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Lead;
    use proptest::prelude::*;

    fn one_lead(v: Vec<f64>) -> EcgRecord {
        EcgRecord::new("r", vec![Lead::new(2).unwrap()], v, 500, "").unwrap()
    }

    #[test]
    fn constant_lead_becomes_zero() {
        assert_eq!(normalize_record(one_lead(vec![5.0; 8])).signal(), &[0.0; 8]);
    }

    #[test]
    fn unit_square_wave_is_fixed_point() {
        let v = vec![1.0, -1.0, 1.0, -1.0];
        assert_eq!(normalize_record(one_lead(v.clone())).signal(), v.as_slice());
    }

    #[test]
    fn two_point_lead() {
        // mean 1, population std 1
        assert_eq!(normalize_record(one_lead(vec![0.0, 2.0])).signal(), &[-1.0, 1.0]);
    }

    #[test]
    fn leads_are_independent() {
        let rec = EcgRecord::new("r", Lead::first(2), vec![0.0, 2.0, 10.0, 30.0], 500, "").unwrap();
        assert_eq!(normalize_record(rec).signal(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn idempotent(values in proptest::collection::vec(-50.0f64..50.0, 2..64)) {
            let once = normalize_record(one_lead(values));
            let twice = normalize_record(once.clone());
            for (a, b) in once.signal().iter().zip(twice.signal()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
