use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_balanced, generate_with_counts, shuffled_indices, Sample, SyntheticSpec};
use crate::error::{Error, Result};

/// Labeled / unlabeled / test partition for one GCD-style run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
    pub known_classes: BTreeSet<usize>,
    /// The total class count is given to the learner.
    pub total_classes: usize,
}

impl TaskSplit {
    pub fn with_test(mut self, test: Vec<Sample>) -> Self {
        self.test = test;
        self
    }

    pub fn is_known(&self, class: usize) -> bool {
        self.known_classes.contains(&class)
    }
}

/// Classes `[0, num_known)` are known. For each known class a uniformly random
/// half of its samples (rounded down) is labeled and the rest unlabeled; all
/// samples of other classes are unlabeled. A class with a single sample
/// therefore lands entirely in the unlabeled pool.
pub fn make_gcd_split(
    samples: &[Sample],
    num_known: usize,
    total_classes: usize,
    seed: u64,
) -> Result<TaskSplit> {
    if num_known >= total_classes {
        return Err(Error::Config(format!(
            "num_known ({num_known}) must be < total classes ({total_classes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if s.class_id >= total_classes {
            return Err(Error::Contract(format!(
                "sample {i} has class {} >= {total_classes}",
                s.class_id
            )));
        }
        by_class.entry(s.class_id).or_default().push(i);
    }
    let mut labeled_idx = BTreeSet::new();
    for (&class, idx) in &by_class {
        if class >= num_known {
            continue;
        }
        let order = shuffled_indices(idx.len(), &mut rng);
        for &o in order.iter().take(idx.len() / 2) {
            labeled_idx.insert(idx[o]);
        }
    }
    let mut split = TaskSplit {
        known_classes: (0..num_known).collect(),
        total_classes,
        ..Default::default()
    };
    for (i, s) in samples.iter().enumerate() {
        let mut s = s.clone();
        s.labeled = labeled_idx.contains(&i);
        if s.labeled {
            split.labeled.push(s);
        } else {
            split.unlabeled.push(s);
        }
    }
    Ok(split)
}

/// Leave-one-domain-out: every sample of `held_out_domain` becomes test data,
/// the remaining domains are split as in [`make_gcd_split`].
pub fn make_mdg_gcd_split(
    samples: &[Sample],
    num_known: usize,
    total_classes: usize,
    num_domains: usize,
    held_out_domain: usize,
    seed: u64,
) -> Result<TaskSplit> {
    if num_domains < 2 {
        return Err(Error::Config(format!(
            "multi-domain GCD needs >= 2 domains, got {num_domains}"
        )));
    }
    if held_out_domain >= num_domains {
        return Err(Error::Contract(format!(
            "unknown domain id {held_out_domain} (have {num_domains})"
        )));
    }
    let (test, seen): (Vec<Sample>, Vec<Sample>) = samples
        .iter()
        .cloned()
        .partition(|s| s.domain_id == held_out_domain);
    let split = make_gcd_split(&seen, num_known, total_classes, seed)?;
    Ok(split.with_test(test))
}

/// One split per held-out domain, in domain order.
pub fn make_mdg_gcd_splits(
    samples: &[Sample],
    num_known: usize,
    total_classes: usize,
    num_domains: usize,
    seed: u64,
) -> Result<Vec<TaskSplit>> {
    (0..num_domains)
        .map(|d| make_mdg_gcd_split(samples, num_known, total_classes, num_domains, d, seed))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CilStyle {
    /// Classes sorted by training count, largest first, then chunked.
    #[default]
    Ordered,
    /// Seeded permutation of the classes, then chunked.
    Shuffled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CilSession {
    pub classes: Vec<usize>,
    /// Training samples per class, aligned with `classes`.
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CilSchedule {
    pub sessions: Vec<CilSession>,
    pub style: CilStyle,
}

impl CilSchedule {
    /// Classes seen through `session` inclusive, in head-column order.
    pub fn seen_classes(&self, session: usize) -> Vec<usize> {
        self.sessions[..=session]
            .iter()
            .flat_map(|s| s.classes.iter().copied())
            .collect()
    }

    /// Plain-text manifest: one `session <i>` block per session.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let style = match self.style {
            CilStyle::Ordered => "ordered",
            CilStyle::Shuffled => "shuffled",
        };
        writeln!(out, "style = {style}").unwrap();
        writeln!(out, "sessions = {}", self.sessions.len()).unwrap();
        for (i, s) in self.sessions.iter().enumerate() {
            writeln!(out, "session {i}").unwrap();
            for (c, n) in s.classes.iter().zip(&s.counts) {
                writeln!(out, "  class {c} count {n}").unwrap();
            }
        }
        out
    }
}

/// Session 0 holds `⌈K/2⌉` classes and the rest are split evenly over
/// `incremental_sessions` further sessions. With zero incremental sessions
/// every class goes into session 0.
pub fn make_cil_schedule(
    spec: &SyntheticSpec,
    incremental_sessions: usize,
    style: CilStyle,
    seed: u64,
) -> Result<CilSchedule> {
    spec.validate()?;
    let k = spec.num_classes;
    let base = k.div_ceil(2);
    let rest = k - base;
    let per_session = if incremental_sessions == 0 {
        0
    } else {
        if rest % incremental_sessions != 0 {
            let valid: Vec<String> = (1..=rest)
                .filter(|d| rest % d == 0)
                .map(|d| d.to_string())
                .collect();
            return Err(Error::Config(format!(
                "{rest} incremental classes cannot be split into {incremental_sessions} sessions; \
                 valid session counts: {}",
                valid.join(", ")
            )));
        }
        rest / incremental_sessions
    };

    let counts = spec.class_counts();
    let mut order: Vec<usize> = (0..k).collect();
    match style {
        // stable sort keeps class index as the tie-break
        CilStyle::Ordered => order.sort_by(|&a, &b| counts[b].cmp(&counts[a])),
        CilStyle::Shuffled => order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }

    let mut sessions = Vec::new();
    let first = if incremental_sessions == 0 { k } else { base };
    let mut chunks = vec![&order[..first]];
    for i in 0..incremental_sessions {
        let start = first + i * per_session;
        chunks.push(&order[start..start + per_session]);
    }
    for chunk in chunks {
        sessions.push(CilSession {
            classes: chunk.to_vec(),
            counts: chunk.iter().map(|&c| counts[c]).collect(),
        });
    }
    Ok(CilSchedule { sessions, style })
}

/// Training pool of `session` (long-tailed, only its own classes) and the
/// balanced test set over every class seen so far.
pub fn cil_session_data(
    spec: &SyntheticSpec,
    schedule: &CilSchedule,
    session: usize,
) -> (Vec<Sample>, Vec<Sample>) {
    let s = &schedule.sessions[session];
    let train = generate_with_counts(
        spec,
        &s.classes,
        &s.counts,
        &[0],
        spec.seed.wrapping_add(1000 + session as u64),
    );
    // one fresh balanced draw per class, shared by every session's evaluation
    let test = schedule
        .seen_classes(session)
        .into_iter()
        .flat_map(|c| {
            generate_balanced(
                spec,
                &[c],
                &[0],
                spec.test_samples_per_class,
                spec.seed.wrapping_add(0x7E57_0000 + c as u64),
            )
        })
        .collect();
    (train, test)
}
