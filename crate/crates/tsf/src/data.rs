//! Dataset on disk, deterministic splits, and task sampling.
//!
//! Layout: `root/subject_<id>/seq_<k>.tsr` plus `root/manifest.json`
//! listing subjects, sequence names, and the generation spec.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsf_core::codec::{make_task_code, TaskCode};
use tsf_core::rng::Rng;
use tsf_core::tensor::Tensor;

use crate::error::{io_err, Result, TsfError};
use crate::phantom::{subject_images, PhantomSpec};
use crate::tsr;

/// Aligned single-channel images of one subject plus the availability mask.
#[derive(Debug, Clone)]
pub struct MultiSequenceSample {
    pub images: Vec<Tensor<f32>>,
    pub subject_id: String,
    pub availability: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<String>,
    pub sequence_names: Vec<String>,
    pub spec: PhantomSpec,
}

/// Generate the phantom dataset into `out`. Byte-identical for identical
/// specs.
pub fn generate_phantom(spec: &PhantomSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for idx in 0..spec.n_subjects {
        let id = format!("{idx:04}");
        let dir = out.join(format!("subject_{id}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let images = subject_images(spec, idx);
        for (k, img) in images.iter().enumerate() {
            tsr::write_tensor(&dir.join(format!("seq_{k}.tsr")), img)?;
        }
        subjects.push(id);
    }
    let manifest = DatasetManifest {
        subjects,
        sequence_names: spec.sequence_names(),
        spec: spec.clone(),
    };
    let path = out.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(())
}

/// Read-only view of a generated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn n_sequences(&self) -> usize {
        self.manifest.spec.n_sequences
    }

    pub fn subjects(&self) -> &[String] {
        &self.manifest.subjects
    }

    pub fn load_sample(&self, id: &str) -> Result<MultiSequenceSample> {
        if !self.manifest.subjects.iter().any(|s| s == id) {
            return Err(TsfError::Other(format!("unknown subject {id}")));
        }
        let dir = self.root.join(format!("subject_{id}"));
        let n = self.n_sequences();
        let mut images = Vec::with_capacity(n);
        for k in 0..n {
            images.push(tsr::read_tensor(&dir.join(format!("seq_{k}.tsr")))?);
        }
        Ok(MultiSequenceSample {
            images,
            subject_id: id.to_string(),
            availability: vec![true; n],
        })
    }
}

/// FNV-1a over the subject id; drives every deterministic assignment.
pub fn subject_hash(id: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Disjoint deterministic split by subject-id hash. Seat counts come from
/// largest-remainder apportionment of the fractions (ties feed the earlier
/// split), so e.g. 280 subjects at (0.66, 0.08, 0.26) give 185/22/73.
pub fn split_dataset(
    subjects: &[String],
    fractions: (f64, f64, f64),
) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let total = fractions.0 + fractions.1 + fractions.2;
    if (total - 1.0).abs() > 1e-9 {
        return Err(TsfError::InvalidSpec(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let n = subjects.len();
    let raw = [
        fractions.0 * n as f64,
        fractions.1 * n as f64,
        fractions.2 * n as f64,
    ];
    let mut counts = [raw[0] as usize, raw[1] as usize, raw[2] as usize];
    let mut rem: Vec<(f64, usize)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (r - counts[i] as f64, i))
        .collect();
    // largest remainder first; earlier split wins ties
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut leftover = n - counts.iter().sum::<usize>();
    for (_, i) in rem {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }

    let mut ordered: Vec<&String> = subjects.iter().collect();
    ordered.sort_by_key(|s| (subject_hash(s), (*s).clone()));
    let train = ordered[..counts[0]].iter().map(|s| (*s).clone()).collect();
    let val = ordered[counts[0]..counts[0] + counts[1]]
        .iter()
        .map(|s| (*s).clone())
        .collect();
    let test = ordered[counts[0] + counts[1]..]
        .iter()
        .map(|s| (*s).clone())
        .collect();
    Ok((train, val, test))
}

/// Draw a training task: uniform over nonempty proper subsets of the
/// sequences as inputs, target uniform over the complement.
pub fn sample_training_task(sample: &MultiSequenceSample, rng: &mut Rng) -> Result<TaskCode> {
    let n = sample.images.len();
    if !sample.availability.iter().all(|&a| a) {
        return Err(TsfError::Other(format!(
            "training subject {} is missing sequences",
            sample.subject_id
        )));
    }
    // masks 1..=2^n-2 are exactly the nonempty proper subsets
    let mask = 1 + rng.below((1usize << n) - 2);
    let available: Vec<usize> = (0..n).filter(|i| (mask >> i) & 1 == 1).collect();
    let complement: Vec<usize> = (0..n).filter(|i| (mask >> i) & 1 == 0).collect();
    let target = complement[rng.below(complement.len())];
    Ok(make_task_code(&available, target, n)?)
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc = 1usize;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Unrank a `k`-combination of `pool` in lexicographic order.
fn unrank_combination(pool: &[usize], k: usize, mut rank: usize) -> Vec<usize> {
    let mut picked = Vec::with_capacity(k);
    let mut need = k;
    let mut start = 0usize;
    while need > 0 {
        for (offset, &candidate) in pool[start..].iter().enumerate() {
            let rest = pool.len() - (start + offset) - 1;
            let with_candidate = binomial(rest, need - 1);
            if rank < with_candidate {
                picked.push(candidate);
                start += offset + 1;
                need -= 1;
                break;
            }
            rank -= with_candidate;
        }
    }
    picked
}

/// Fixed validation/test task per subject, derived from the subject-id
/// hash: input-set sizes 1..N-1 and targets are covered approximately
/// evenly.
pub fn fixed_eval_tasks(subjects: &[String], n: usize) -> Vec<(String, TaskCode)> {
    subjects
        .iter()
        .map(|id| {
            let h = subject_hash(id);
            let size = 1 + (h % (n as u64 - 1)) as usize;
            let target = ((h >> 8) % n as u64) as usize;
            let pool: Vec<usize> = (0..n).filter(|&i| i != target).collect();
            let rank = ((h >> 16) % binomial(pool.len(), size) as u64) as usize;
            let available = unrank_combination(&pool, size, rank);
            let code = make_task_code(&available, target, n).expect("derived task is valid");
            (id.clone(), code)
        })
        .collect()
}

/// Sanity helper: all subjects exactly once across the three splits.
pub fn splits_are_partition(
    subjects: &[String],
    splits: (&[String], &[String], &[String]),
) -> bool {
    let all: BTreeSet<&String> = subjects.iter().collect();
    let mut seen = BTreeSet::new();
    for part in [splits.0, splits.1, splits.2] {
        for s in part {
            if !seen.insert(s) {
                return false;
            }
        }
    }
    all == seen
}
