//! Synthetic data with known defined/undefined feature structure, and the
//! GCD, multi-domain GCD and long-tailed CIL split builders.
//!
//! Feature layout of every sample:
//!
//! ```text
//! [ class 0 block | class 1 block | ... | domain dims | noise dims ]
//! ```
//!
//! Class `c` puts 1.0 on its own semantic block. Domain `d` adds a fixed
//! offset on the domain dims. Every coordinate gets i.i.d. Gaussian noise.

mod splits;

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use splits::{
    cil_session_data, make_cil_schedule, make_gcd_split, make_mdg_gcd_split, make_mdg_gcd_splits,
    CilSchedule, CilSession, CilStyle, TaskSplit,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_known: usize,
    pub semantic_dims_per_class: usize,
    pub noise_dims: usize,
    pub domain_dims: usize,
    pub noise_sigma: f64,
    pub domain_shift: f64,
    pub num_domains: usize,
    /// Count of the head class; the tail follows `n_max · ρ^(c/(K−1))`.
    pub samples_per_class: usize,
    pub imbalance_ratio: f64,
    pub test_samples_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            num_known: 5,
            semantic_dims_per_class: 2,
            noise_dims: 8,
            domain_dims: 4,
            noise_sigma: 0.3,
            domain_shift: 1.0,
            num_domains: 1,
            samples_per_class: 60,
            imbalance_ratio: 1.0,
            test_samples_per_class: 40,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn input_dim(&self) -> usize {
        self.semantic_width() + self.domain_dims + self.noise_dims
    }

    fn semantic_width(&self) -> usize {
        self.num_classes * self.semantic_dims_per_class
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return err(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_known >= self.num_classes {
            return err(format!(
                "num_known ({}) must be < num_classes ({})",
                self.num_known, self.num_classes
            ));
        }
        if self.semantic_dims_per_class == 0 {
            return err("semantic_dims_per_class must be >= 1".into());
        }
        if !(self.imbalance_ratio > 0.0 && self.imbalance_ratio <= 1.0) {
            return err(format!("imbalance_ratio must be in (0, 1], got {}", self.imbalance_ratio));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return err(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !self.domain_shift.is_finite() {
            return err("domain_shift must be finite".into());
        }
        if self.num_domains == 0 {
            return err("num_domains must be >= 1".into());
        }
        if self.samples_per_class == 0 {
            return err("samples_per_class must be >= 1".into());
        }
        Ok(())
    }

    /// Long-tail profile, `max(1, round(n_max · ρ^(c/(K−1))))` for class `c`.
    pub fn class_counts(&self) -> Vec<usize> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let e = c as f64 / (k - 1) as f64;
                let n = (self.samples_per_class as f64 * self.imbalance_ratio.powf(e)).round();
                (n as usize).max(1)
            })
            .collect()
    }

    /// Offset added on the domain dims for each domain; norm `domain_shift`.
    pub fn domain_offsets(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xD0_3A11);
        (0..self.num_domains)
            .map(|_| {
                let v: Vec<f64> = (0..self.domain_dims)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    v
                } else {
                    v.iter().map(|x| x / norm * self.domain_shift).collect()
                }
            })
            .collect()
    }

    /// Noise-free feature vector of class `class` in domain `domain`.
    pub fn prototype(&self, class: usize, domain: usize, offsets: &[Vec<f64>]) -> Vec<f64> {
        let mut x = vec![0.0; self.input_dim()];
        let s = self.semantic_dims_per_class;
        for v in &mut x[class * s..(class + 1) * s] {
            *v = 1.0;
        }
        let base = self.semantic_width();
        for (i, o) in offsets[domain].iter().enumerate() {
            x[base + i] += o;
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class_id: usize,
    pub domain_id: usize,
    pub labeled: bool,
}

/// Draws the long-tailed training pool over every domain.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let counts = spec.class_counts();
    let classes: Vec<usize> = (0..spec.num_classes).collect();
    let domains: Vec<usize> = (0..spec.num_domains).collect();
    Ok(generate_with_counts(spec, &classes, &counts, &domains, spec.seed))
}

/// Balanced draw of `per_class` samples for each listed class and domain.
pub fn generate_balanced(
    spec: &SyntheticSpec,
    classes: &[usize],
    domains: &[usize],
    per_class: usize,
    seed: u64,
) -> Vec<Sample> {
    let counts = vec![per_class; classes.len()];
    generate_with_counts(spec, classes, &counts, domains, seed)
}

/// Fresh balanced test set over all classes and domains.
pub fn generate_test(spec: &SyntheticSpec) -> Vec<Sample> {
    let classes: Vec<usize> = (0..spec.num_classes).collect();
    let domains: Vec<usize> = (0..spec.num_domains).collect();
    generate_balanced(
        spec,
        &classes,
        &domains,
        spec.test_samples_per_class,
        spec.seed.wrapping_add(0x7E57),
    )
}

/// `counts[i]` samples of `classes[i]` in each domain of `domains`.
pub fn generate_with_counts(
    spec: &SyntheticSpec,
    classes: &[usize],
    counts: &[usize],
    domains: &[usize],
    seed: u64,
) -> Vec<Sample> {
    let offsets = spec.domain_offsets();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut out = Vec::new();
    for &d in domains {
        for (&c, &n) in classes.iter().zip(counts) {
            let proto = spec.prototype(c, d, &offsets);
            for _ in 0..n {
                let features = proto
                    .iter()
                    .map(|p| {
                        if spec.noise_sigma > 0.0 {
                            p + noise.sample(&mut rng)
                        } else {
                            *p
                        }
                    })
                    .collect();
                out.push(Sample {
                    features,
                    class_id: c,
                    domain_id: d,
                    labeled: false,
                });
            }
        }
    }
    out
}

/// Dimensions that carry defined meaning for the given classes: the union of
/// their semantic blocks. Domain and noise dims are never included.
pub fn ground_truth_defined_dims(spec: &SyntheticSpec, classes: &[usize]) -> BTreeSet<usize> {
    let s = spec.semantic_dims_per_class;
    classes
        .iter()
        .flat_map(|&c| c * s..(c + 1) * s)
        .collect()
}

/// Stacks sample features into a `n×input_dim` tensor.
pub fn features_tensor(samples: &[&Sample]) -> Tensor {
    let cols = samples.first().map_or(0, |s| s.features.len());
    let mut data = Vec::with_capacity(samples.len() * cols);
    for s in samples {
        data.extend_from_slice(&s.features);
    }
    Tensor::new(samples.len(), cols, data).expect("uniform feature width")
}

pub(crate) fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Writes `class_id,domain_id,labeled,f0..f{n−1}` rows.
pub fn write_samples_csv<W: Write>(samples: &[Sample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let width = samples.first().map_or(0, |s| s.features.len());
    let mut header = vec!["class_id".to_string(), "domain_id".into(), "labeled".into()];
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for s in samples {
        let mut rec = vec![
            s.class_id.to_string(),
            s.domain_id.to_string(),
            u8::from(s.labeled).to_string(),
        ];
        rec.extend(s.features.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(input: R) -> Result<Vec<Sample>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Contract(format!("samples csv row {}: bad {what}", line + 1));
        let class_id = rec[0].parse().map_err(|_| bad("class_id"))?;
        let domain_id = rec[1].parse().map_err(|_| bad("domain_id"))?;
        let labeled = match &rec[2] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("labeled")),
        };
        let features = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<_>>()?;
        out.push(Sample {
            features,
            class_id,
            domain_id,
            labeled,
        });
    }
    Ok(out)
}
