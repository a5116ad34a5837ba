//! Synthetic corpus generation.
//!
//! Each sample is a lexicon word rendered under an independently seeded
//! (style, degradation) record. Records are deduplicated globally on their
//! leakage key, so the train/val/test splits of one corpus can never share
//! a (word, style, degradation) triple.

pub mod container;
pub mod font;
pub mod lexicon;
pub mod render;

use container::{ContainerError, DataSample, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use render::{layout, render, RenderError, RenderRecord, Style};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("bad corpus spec: {0}")]
    BadSpec(String),
    #[error("split leakage: {key}")]
    Leakage { key: String },
}

/// Generation parameters. Degradation knobs are maxima; each sample draws
/// its own strength per knob, or skips the knob entirely.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub count: usize,
    pub seed: u64,
    pub split: [f64; 3],
    pub max_blur_sigma: f64,
    pub occlusion_prob: f64,
    pub max_rotation_deg: f64,
    pub max_noise_std: f64,
}

impl CorpusSpec {
    pub fn clean(count: usize, seed: u64) -> Self {
        CorpusSpec {
            count,
            seed,
            split: [0.8, 0.1, 0.1],
            max_blur_sigma: 0.0,
            occlusion_prob: 0.0,
            max_rotation_deg: 0.0,
            max_noise_std: 0.0,
        }
    }

    pub fn degraded(count: usize, seed: u64) -> Self {
        CorpusSpec {
            max_blur_sigma: 1.0,
            occlusion_prob: 0.3,
            max_rotation_deg: 10.0,
            max_noise_std: 0.05,
            ..CorpusSpec::clean(count, seed)
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::BadSpec(m));
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split.iter().any(|&s| s < 0.0) {
            return bad(format!("split {:?} must be nonnegative and sum to 1", self.split));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad(format!("occlusion_prob {} outside [0, 1]", self.occlusion_prob));
        }
        for (name, v, cap) in [
            ("max_blur_sigma", self.max_blur_sigma, 4.0),
            ("max_rotation_deg", self.max_rotation_deg, 45.0),
            ("max_noise_std", self.max_noise_std, 0.5),
        ] {
            if !(0.0..=cap).contains(&v) {
                return bad(format!("{name} {v} outside [0, {cap}]"));
            }
        }
        Ok(())
    }

    /// Train/val/test sizes: the first two round, the third absorbs the
    /// remainder.
    pub fn split_counts(&self) -> Result<[usize; 3], DataError> {
        let n0 = (self.count as f64 * self.split[0]).round() as usize;
        let n1 = (self.count as f64 * self.split[1]).round() as usize;
        if n0 + n1 > self.count {
            return Err(DataError::BadSpec(format!(
                "split {:?} rounds past count {}",
                self.split, self.count
            )));
        }
        Ok([n0, n1, self.count - n0 - n1])
    }
}

pub fn split_paths(dir: &Path) -> [PathBuf; 3] {
    [dir.join("train.bin"), dir.join("val.bin"), dir.join("test.bin")]
}

#[derive(Debug, Clone)]
pub struct GenReport {
    pub counts: [usize; 3],
    pub digests: [u64; 3],
    pub paths: [PathBuf; 3],
}

const SAMPLE_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

fn draw_record(
    word: &str,
    spec: &CorpusSpec,
    rng: &mut ChaCha8Rng,
) -> Result<RenderRecord, DataError> {
    let style = Style::sample(rng);
    let blur_sigma = if spec.max_blur_sigma > 0.0 && rng.gen_bool(0.5) {
        rng.gen_range(0.0..=spec.max_blur_sigma)
    } else {
        0.0
    };
    let rotation_deg = if spec.max_rotation_deg > 0.0 && rng.gen_bool(0.5) {
        rng.gen_range(-spec.max_rotation_deg..=spec.max_rotation_deg)
    } else {
        0.0
    };
    let noise_std = if spec.max_noise_std > 0.0 && rng.gen_bool(0.5) {
        rng.gen_range(0.0..=spec.max_noise_std)
    } else {
        0.0
    };
    let occlusion = if spec.occlusion_prob > 0.0
        && !word.is_empty()
        && rng.gen_bool(spec.occlusion_prob)
    {
        let lay = layout(word)?;
        let i = rng.gen_range(0..word.chars().count());
        Some(lay.glyph_box(i))
    } else {
        None
    };
    Ok(RenderRecord {
        style,
        blur_sigma,
        rotation_deg,
        noise_std,
        occlusion,
        noise_seed: rng.gen(),
    })
}

/// Draw `count` (word, record) pairs with globally unique leakage keys.
fn draw_population(spec: &CorpusSpec) -> Result<Vec<(String, RenderRecord)>, DataError> {
    let words = lexicon::WORDS;
    let mut seen = HashSet::with_capacity(spec.count);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed.wrapping_add((i as u64 + 1).wrapping_mul(SAMPLE_SEED_STRIDE)),
        );
        let word = words[rng.gen_range(0..words.len())].to_string();
        let mut rec = draw_record(&word, spec, &mut rng)?;
        let mut tries = 0;
        while !seen.insert(rec.leakage_key(&word)) {
            tries += 1;
            if tries > 100 {
                return Err(DataError::BadSpec(format!(
                    "could not draw a unique sample after {tries} tries at index {i}"
                )));
            }
            rec = draw_record(&word, spec, &mut rng)?;
        }
        out.push((word, rec));
    }
    Ok(out)
}

/// Generate a corpus and write its three splits under `dir`.
pub fn generate(spec: &CorpusSpec, dir: &Path) -> Result<GenReport, DataError> {
    spec.validate()?;
    let counts = spec.split_counts()?;
    let population = draw_population(spec)?;
    let samples: Vec<DataSample> = population
        .into_par_iter()
        .enumerate()
        .map(|(i, (word, rec))| {
            let img = render(&word, &rec)?;
            Ok(DataSample::from_image(i as u64, &word, rec, &img))
        })
        .collect::<Result<_, DataError>>()?;
    let (train, rest) = samples.split_at(counts[0]);
    let (val, test) = rest.split_at(counts[1]);
    let sets = [
        Dataset { samples: train.to_vec() },
        Dataset { samples: val.to_vec() },
        Dataset { samples: test.to_vec() },
    ];
    leakage_check(&sets[0], &sets[2])?;
    leakage_check(&sets[0], &sets[1])?;
    leakage_check(&sets[1], &sets[2])?;
    std::fs::create_dir_all(dir)?;
    let paths = split_paths(dir);
    let mut digests = [0u64; 3];
    for (i, set) in sets.iter().enumerate() {
        set.write(&paths[i])?;
        digests[i] = set.digest()?;
    }
    Ok(GenReport { counts, digests, paths })
}

/// No (word, style, degradation) triple may appear in both datasets.
pub fn leakage_check(a: &Dataset, b: &Dataset) -> Result<(), DataError> {
    let keys: HashSet<String> =
        a.samples.iter().map(|s| s.record.leakage_key(&s.label)).collect();
    for s in &b.samples {
        let key = s.record.leakage_key(&s.label);
        if keys.contains(&key) {
            return Err(DataError::Leakage { key });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_makes_three_empty_splits() {
        let dir = tempfile::tempdir().unwrap();
        let report = generate(&CorpusSpec::clean(0, 1), dir.path()).unwrap();
        assert_eq!(report.counts, [0, 0, 0]);
        for p in &report.paths {
            assert!(Dataset::read(p).unwrap().is_empty());
        }
    }

    #[test]
    fn same_spec_generates_identical_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = CorpusSpec::degraded(40, 7);
        let r1 = generate(&spec, d1.path()).unwrap();
        let r2 = generate(&spec, d2.path()).unwrap();
        assert_eq!(r1.digests, r2.digests);
        for (a, b) in r1.paths.iter().zip(&r2.paths) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
        let other = generate(&CorpusSpec::degraded(40, 8), d1.path()).unwrap();
        assert_ne!(r1.digests, other.digests);
    }

    #[test]
    fn thousand_samples_split_800_100_100_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let report = generate(&CorpusSpec::clean(1000, 3), dir.path()).unwrap();
        assert_eq!(report.counts, [800, 100, 100]);
        let sets: Vec<Dataset> =
            report.paths.iter().map(|p| Dataset::read(p).unwrap()).collect();
        assert_eq!(sets[0].len(), 800);
        assert_eq!(sets[1].len(), 100);
        assert_eq!(sets[2].len(), 100);
        leakage_check(&sets[0], &sets[2]).unwrap();
        let ids: HashSet<u64> =
            sets.iter().flat_map(|s| s.samples.iter().map(|x| x.id)).collect();
        assert_eq!(ids.len(), 1000);
    }

    #[test]
    fn leakage_check_catches_a_shared_triple() {
        let rec = RenderRecord::clean(Style::plain());
        let img = render("echo", &rec).unwrap();
        let s = DataSample::from_image(0, "echo", rec.clone(), &img);
        let mut clone = s.clone();
        clone.record.noise_seed = 99;
        let a = Dataset { samples: vec![s] };
        let b = Dataset { samples: vec![clone] };
        assert!(matches!(leakage_check(&a, &b), Err(DataError::Leakage { .. })));
        let mut different = b.clone();
        different.samples[0].record.blur_sigma = 0.4;
        leakage_check(&a, &different).unwrap();
    }

    #[test]
    fn labels_stay_within_model_limits() {
        let dir = tempfile::tempdir().unwrap();
        let report = generate(&CorpusSpec::degraded(60, 11), dir.path()).unwrap();
        let train = Dataset::read(&report.paths[0]).unwrap();
        let charset = crate::charset::Charset::train94();
        for s in &train.samples {
            assert!(s.label.len() <= render::MAX_WORD_LEN);
            assert!(s.label.chars().all(|c| charset.contains(c)));
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut spec = CorpusSpec::clean(10, 0);
        spec.split = [0.5, 0.4, 0.2];
        assert!(matches!(spec.validate(), Err(DataError::BadSpec(_))));
        let mut spec = CorpusSpec::clean(10, 0);
        spec.occlusion_prob = 1.5;
        assert!(spec.validate().is_err());
        let mut spec = CorpusSpec::clean(10, 0);
        spec.max_noise_std = 0.9;
        assert!(spec.validate().is_err());
    }
}
