//! Class-conditional synthetic 12-lead ECGs with templated reports.
//!
//! Each class fixes a heart-rate band and a morphology tweak on a sum-of-
//! Gaussians beat model. Every record also draws its own T-wave amplitude.
//! Reports name the class entity (or a synonym), a companion finding, the
//! integer heart rate, the T-wave amplitude and sometimes the superclass.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_manifest, DataError, DatasetManifest, EcgRecord, Lead, PayloadWriter, Split, NUM_LEADS};
use crate::knowledge::{EntityVocabulary, RuleTables};

pub const MAX_CLASSES: usize = 8;

struct ClassSpec {
    name: &'static str,
    synonyms: &'static [&'static str],
    superclass: Option<&'static str>,
    companion: &'static str,
    rate_bpm: (u32, u32),
    morph: Morphology,
}

#[derive(Clone, Copy)]
enum Morphology {
    Normal,
    WideQrs,
    AnteriorSt,
    Notched,
    InferiorSt,
    Fibrillation,
    HighVoltage,
}

const CLASSES: [ClassSpec; MAX_CLASSES] = [
    ClassSpec {
        name: "sinus bradycardia",
        synonyms: &["sinus brady"],
        superclass: Some("abnormal sinus rate"),
        companion: "long rr interval",
        rate_bpm: (40, 58),
        morph: Morphology::Normal,
    },
    ClassSpec {
        name: "sinus tachycardia",
        synonyms: &["sinus tach"],
        superclass: Some("abnormal sinus rate"),
        companion: "short rr interval",
        rate_bpm: (105, 150),
        morph: Morphology::Normal,
    },
    ClassSpec {
        name: "left bundle branch block",
        synonyms: &["lbbb"],
        superclass: Some("bundle branch block"),
        companion: "wide qrs",
        rate_bpm: (60, 99),
        morph: Morphology::WideQrs,
    },
    ClassSpec {
        name: "anterior myocardial infarction",
        synonyms: &["anterior mi"],
        superclass: Some("myocardial infarction"),
        companion: "st elevation",
        rate_bpm: (60, 99),
        morph: Morphology::AnteriorSt,
    },
    ClassSpec {
        name: "right bundle branch block",
        synonyms: &["rbbb"],
        superclass: Some("bundle branch block"),
        companion: "rsr pattern",
        rate_bpm: (60, 99),
        morph: Morphology::Notched,
    },
    ClassSpec {
        name: "inferior myocardial infarction",
        synonyms: &["inferior mi"],
        superclass: Some("myocardial infarction"),
        companion: "pathologic q waves",
        rate_bpm: (60, 99),
        morph: Morphology::InferiorSt,
    },
    ClassSpec {
        name: "atrial fibrillation",
        synonyms: &["afib", "a fib"],
        superclass: None,
        companion: "irregularly irregular rhythm",
        rate_bpm: (70, 130),
        morph: Morphology::Fibrillation,
    },
    ClassSpec {
        name: "left ventricular hypertrophy",
        synonyms: &["lvh"],
        superclass: None,
        companion: "high qrs voltage",
        rate_bpm: (60, 99),
        morph: Morphology::HighVoltage,
    },
];

const LEAD_GAIN: [f64; NUM_LEADS] = [1.0, 1.2, 0.6, 0.9, 0.9, 0.5, 0.7, 0.9, 1.1, 1.3, 1.2, 1.0];
const LEAD_DELAY_S: f64 = 0.003;
/// T-wave amplitude range in microvolts (the R wave is 1000).
const T_WAVE_UV: (u32, u32) = (100, 900);

#[derive(Debug, Clone, Copy)]
struct BeatParams {
    rate: u32,
    t_wave_uv: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_records: usize,
    pub num_valid: usize,
    pub num_test: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub length: usize,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_records: 64,
            num_valid: 16,
            num_test: 32,
            num_classes: 4,
            seed: 7,
            sample_rate_hz: 500,
            length: 5000,
            noise_std: 0.02,
        }
    }
}

/// Generated records with their ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<EcgRecord>,
    pub classes: Vec<usize>,
    pub splits: Vec<Split>,
    pub class_names: Vec<String>,
    /// Vocabulary the mining pipeline should recover from these reports.
    pub vocabulary: EntityVocabulary,
    /// Tables for the rule-based mining client.
    pub rules: RuleTables,
}

impl SyntheticCorpus {
    /// Labels carried on the manifest: the class name of each record.
    pub fn label_names(&self, i: usize) -> Vec<String> {
        vec![self.class_names[self.classes[i]].clone()]
    }

    /// Write `signals.f32`, `manifest.json`, `rules.json` and
    /// `vocab_truth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest, DataError> {
        fs::create_dir_all(dir)?;
        let mut w = PayloadWriter::create(dir, "signals.f32")?;
        for (i, rec) in self.records.iter().enumerate() {
            w.append(rec, Some(self.label_names(i)), self.splits[i])?;
        }
        let manifest = w.finish(dir)?;
        save_manifest(&dir.join("manifest.json"), &manifest)?;
        let io = |e: crate::knowledge::KnowledgeError| DataError::Synthetic(e.to_string());
        self.rules.save(&dir.join("rules.json")).map_err(io)?;
        self.vocabulary.save(&dir.join("vocab_truth.json")).map_err(io)?;
        Ok(manifest)
    }
}

/// Class names available to the generator, in class-index order.
pub fn class_names(num_classes: usize) -> Vec<String> {
    CLASSES.iter().take(num_classes).map(|c| c.name.to_string()).collect()
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus, DataError> {
    let k = cfg.num_classes;
    if k == 0 || k > MAX_CLASSES {
        return Err(DataError::Synthetic(format!("num_classes must be in 1..={MAX_CLASSES}, got {k}")));
    }
    if cfg.num_records < k {
        return Err(DataError::Synthetic(format!("need at least {k} records, got {}", cfg.num_records)));
    }
    if cfg.length == 0 || cfg.sample_rate_hz == 0 {
        return Err(DataError::Synthetic("length and sample rate must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rates: Vec<Bag> = CLASSES[..k].iter().map(|c| Bag::new(c.rate_bpm, 1)).collect();
    let mut t_waves: Vec<Bag> = (0..k).map(|_| Bag::new(T_WAVE_UV, 50)).collect();
    let blocks = [
        (Split::Train, cfg.num_records),
        (Split::Valid, cfg.num_valid),
        (Split::Test, cfg.num_test),
    ];
    let mut records = Vec::new();
    let mut classes = Vec::new();
    let mut splits = Vec::new();
    for (split, n) in blocks {
        for j in 0..n {
            let class = j % k;
            let id = format!("syn-{:05}", records.len());
            let beat = BeatParams {
                rate: rates[class].draw(&mut rng),
                t_wave_uv: t_waves[class].draw(&mut rng),
            };
            records.push(synth_record(&id, class, beat, cfg, &mut rng)?);
            classes.push(class);
            splits.push(split);
        }
    }
    let (vocabulary, rules) = ground_truth(k)?;
    Ok(SyntheticCorpus {
        records,
        classes,
        splits,
        class_names: class_names(k),
        vocabulary,
        rules,
    })
}

/// Integers `lo, lo + step, ..., <= hi` drawn without replacement,
/// reshuffled when exhausted.
struct Bag {
    values: Vec<u32>,
    pool: Vec<u32>,
}

impl Bag {
    fn new((lo, hi): (u32, u32), step: u32) -> Self {
        Self {
            values: (lo..=hi).step_by(step as usize).collect(),
            pool: Vec::new(),
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> u32 {
        if self.pool.is_empty() {
            self.pool = self.values.clone();
            self.pool.shuffle(rng);
        }
        self.pool.pop().expect("refilled")
    }
}

fn ground_truth(k: usize) -> Result<(EntityVocabulary, RuleTables), DataError> {
    let mut dictionary = Vec::new();
    let mut synonyms = BTreeMap::new();
    let mut hierarchy: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut merge = BTreeMap::new();
    let mut canonical = Vec::new();
    for c in &CLASSES[..k] {
        dictionary.push(c.name.to_string());
        dictionary.push(c.companion.to_string());
        canonical.push(c.name.to_string());
        canonical.push(c.companion.to_string());
        merge.insert(c.name.to_string(), c.name.to_string());
        merge.insert(c.companion.to_string(), c.companion.to_string());
        for s in c.synonyms {
            dictionary.push(s.to_string());
            synonyms.insert(s.to_string(), c.name.to_string());
            merge.insert(s.to_string(), c.name.to_string());
        }
        if let Some(sup) = c.superclass {
            hierarchy.entry(sup.to_string()).or_default().push(c.name.to_string());
            merge.insert(sup.to_string(), sup.to_string());
        }
    }
    dictionary.extend(hierarchy.keys().cloned());
    let rules = RuleTables {
        dictionary,
        synonyms,
        hierarchy: hierarchy.clone(),
    };
    let vocab = EntityVocabulary::build(canonical, merge, hierarchy)
        .map_err(|e| DataError::Synthetic(e.to_string()))?;
    Ok((vocab, rules))
}

fn report_text(spec: &ClassSpec, beat: BeatParams, rng: &mut ChaCha8Rng) -> String {
    let primary = if rng.random_bool(0.5) || spec.synonyms.is_empty() {
        spec.name
    } else {
        spec.synonyms[rng.random_range(0..spec.synonyms.len())]
    };
    let companion = spec.companion;
    let mut text = match rng.random_range(0..3) {
        0 => format!("{primary}. {companion}. heart rate {rate} bpm. t wave {t} uv.", rate = beat.rate, t = beat.t_wave_uv),
        1 => format!("{companion} noted. t wave {t} uv. {primary}. rate {rate}.", rate = beat.rate, t = beat.t_wave_uv),
        _ => format!("heart rate {rate} bpm, t wave {t} uv. {primary} with {companion}.", rate = beat.rate, t = beat.t_wave_uv),
    };
    if let Some(sup) = spec.superclass {
        if rng.random_bool(0.5) {
            text.push_str(&format!(" findings consistent with {sup}."));
        }
    }
    text
}

fn gaussian(t: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    (-0.5 * z * z).exp()
}

/// One beat's deflection at offset `t` seconds from the R peak.
fn beat(t: f64, slot: usize, morph: Morphology, t_wave: f64) -> f64 {
    let gain = LEAD_GAIN[slot];
    let (r_amp, qrs_w) = match morph {
        Morphology::WideQrs => (1.0, 0.03),
        Morphology::HighVoltage => (2.2, 0.012),
        _ => (1.0, 0.012),
    };
    let mut v = 0.0;
    if !matches!(morph, Morphology::Fibrillation) {
        v += 0.15 * gaussian(t, -0.16, 0.025);
    }
    v += -0.1 * gaussian(t, -0.03, 0.01);
    v += r_amp * gaussian(t, 0.0, qrs_w);
    v += -0.25 * gaussian(t, 0.03 + (qrs_w - 0.012), 0.012);
    if matches!(morph, Morphology::Notched) {
        v += 0.5 * gaussian(t, 0.06, 0.012);
    }
    let mut t_amp = t_wave;
    let mut st = 0.0;
    match morph {
        Morphology::AnteriorSt => {
            let anterior = (6..=9).contains(&slot);
            st = if anterior { 0.5 } else { 0.2 };
            if anterior {
                t_amp = -t_wave;
            }
        }
        Morphology::InferiorSt => {
            if (1..=3).contains(&slot) {
                st = 0.4;
            }
        }
        _ => {}
    }
    if st != 0.0 {
        // smooth plateau between the S wave and the T wave
        let rise = 1.0 / (1.0 + (-(t - 0.06) / 0.01).exp());
        let fall = 1.0 / (1.0 + ((t - 0.26) / 0.02).exp());
        v += st * rise * fall / gain.abs().max(0.5);
    }
    v += t_amp * gaussian(t, 0.3, 0.05);
    gain * v
}

fn synth_record(
    id: &str,
    class: usize,
    params: BeatParams,
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EcgRecord, DataError> {
    let spec = &CLASSES[class];
    let fs = cfg.sample_rate_hz as f64;
    let dur = cfg.length as f64 / fs;
    let rr = 60.0 / params.rate as f64;
    let t_wave = params.t_wave_uv as f64 / 1000.0;

    let mut peaks = Vec::new();
    let mut t = rng.random_range(0.0..rr);
    while t < dur + 0.5 {
        peaks.push(t);
        let jitter = match spec.morph {
            Morphology::Fibrillation => rng.random_range(0.6..1.4),
            _ => 1.0 + rng.random_range(-0.02..0.02),
        };
        t += rr * jitter;
    }

    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| DataError::Synthetic(e.to_string()))?;
    let wander_phase = rng.random_range(0.0..2.0 * PI);
    let fib_phase = rng.random_range(0.0..2.0 * PI);
    let mut signal = vec![0.0f64; NUM_LEADS * cfg.length];
    for slot in 0..NUM_LEADS {
        let row = &mut signal[slot * cfg.length..(slot + 1) * cfg.length];
        let delay = LEAD_DELAY_S * slot as f64;
        for &p in &peaks {
            let c = p + delay;
            let lo = ((c - 0.35) * fs).floor().max(0.0) as usize;
            let hi = (((c + 0.55) * fs).ceil().max(0.0) as usize).min(cfg.length);
            for (i, v) in row.iter_mut().enumerate().take(hi).skip(lo) {
                *v += beat(i as f64 / fs - c, slot, spec.morph, t_wave);
            }
        }
        for (i, v) in row.iter_mut().enumerate() {
            let ts = i as f64 / fs;
            *v += 0.05 * (2.0 * PI * 0.3 * ts + wander_phase).sin();
            if matches!(spec.morph, Morphology::Fibrillation) {
                *v += 0.05 * (2.0 * PI * 6.0 * ts + fib_phase).sin();
            }
        }
    }
    for v in signal.iter_mut() {
        // quantize to f32 so payload round-trips are exact
        *v = ((*v + noise.sample(rng)) as f32) as f64;
    }
    let report = report_text(spec, params, rng);
    EcgRecord::new(id, Lead::all().collect(), signal, cfg.sample_rate_hz, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    fn small(num_records: usize, num_classes: usize, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            num_records,
            num_valid: 0,
            num_test: 0,
            num_classes,
            seed,
            ..SyntheticConfig::default()
        }
    }

    /// Fundamental beat frequency on lead II, from R-peak counting.
    fn dominant_frequency(rec: &EcgRecord) -> f64 {
        let x = rec.lead_signal(Lead::new(2).unwrap()).unwrap();
        let fs = rec.sample_rate_hz() as f64;
        let max = x.iter().cloned().fold(f64::MIN, f64::max);
        let refractory = (0.25 * fs) as usize;
        let mut peaks = Vec::new();
        let mut i = 1;
        while i + 1 < x.len() {
            if x[i] > 0.6 * max && x[i] >= x[i - 1] && x[i] >= x[i + 1] {
                peaks.push(i);
                i += refractory;
            } else {
                i += 1;
            }
        }
        let span = (peaks[peaks.len() - 1] - peaks[0]) as f64 / fs;
        (peaks.len() - 1) as f64 / span
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic(&small(64, 4, 7)).unwrap();
        let b = generate_synthetic(&small(64, 4, 7)).unwrap();
        assert_eq!(a.records, b.records);
        let c = generate_synthetic(&small(64, 4, 8)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn tachycardia_beats_faster_than_bradycardia() {
        let corpus = generate_synthetic(&small(8, 2, 3)).unwrap();
        let mut brady = Vec::new();
        let mut tachy = Vec::new();
        for (rec, &c) in corpus.records.iter().zip(&corpus.classes) {
            let f = dominant_frequency(rec);
            if c == 0 { brady.push(f) } else { tachy.push(f) }
        }
        let max_brady = brady.iter().cloned().fold(f64::MIN, f64::max);
        let min_tachy = tachy.iter().cloned().fold(f64::MAX, f64::min);
        assert!(min_tachy > max_brady, "brady {brady:?} tachy {tachy:?}");
    }

    #[test]
    fn every_report_mentions_a_vocabulary_entity() {
        let corpus = generate_synthetic(&small(40, 8, 1)).unwrap();
        for rec in &corpus.records {
            let r = rec.report();
            assert!(
                corpus.rules.dictionary.iter().any(|t| r.contains(t.as_str())),
                "{r}"
            );
            assert!(corpus.vocabulary.entities.iter().any(|e| r.contains(e.as_str())), "{r}");
        }
    }

    #[test]
    fn written_manifest_round_trips_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic(&small(64, 4, 7)).unwrap();
        let written = corpus.write(dir.path()).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, written);
        let back = loaded.read_all().unwrap();
        assert_eq!(back, corpus.records);
    }

    #[test]
    fn rejects_bad_class_counts() {
        assert!(generate_synthetic(&small(64, 0, 1)).is_err());
        assert!(generate_synthetic(&small(64, 9, 1)).is_err());
        assert!(generate_synthetic(&small(3, 4, 1)).is_err());
    }
}
