//! Multi-domain image datasets, the leave-one-domain-out split and
//! deterministic batching.

mod io;
mod synth;

pub use io::{import_folder_tree, load_dataset, save_dataset, DATASET_HEADER};
pub use synth::{
    apply_domain, gaussian_blur, generate_synthetic, phase_jitter, render_class, Domain, SyntheticConfig,
};

use indexmap::IndexMap;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One labeled image, `[channels, H, W]` with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub image: Tensor,
    pub label: usize,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainDataset {
    domains: IndexMap<String, Vec<DomainSample>>,
    num_classes: usize,
    channels: usize,
    image_size: usize,
}

impl MultiDomainDataset {
    /// Validates geometry, labels, pixel range and class coverage.
    pub fn new(
        domains: IndexMap<String, Vec<DomainSample>>,
        num_classes: usize,
        channels: usize,
        image_size: usize,
    ) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Parameter("dataset has no domains".into()));
        }
        let geometry = [channels, image_size, image_size];
        for (name, samples) in &domains {
            let mut seen = vec![false; num_classes];
            for s in samples {
                if s.domain != *name {
                    return Err(Error::Parameter(format!(
                        "sample tagged `{}` filed under domain `{name}`",
                        s.domain
                    )));
                }
                if s.image.shape() != geometry {
                    return Err(Error::shape("dataset", &geometry, s.image.shape()));
                }
                if s.label >= num_classes {
                    return Err(Error::Index {
                        op: "dataset label",
                        index: s.label,
                        size: num_classes,
                    });
                }
                if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Domain {
                        op: "dataset",
                        msg: format!("pixel outside [0, 1] in domain `{name}`"),
                    });
                }
                seen[s.label] = true;
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::Parameter(format!("domain `{name}` has no sample of class {missing}")));
            }
        }
        Ok(MultiDomainDataset {
            domains,
            num_classes,
            channels,
            image_size,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn domain_names(&self) -> Vec<&str> {
        self.domains.keys().map(String::as_str).collect()
    }

    pub fn domain(&self, name: &str) -> Option<&[DomainSample]> {
        self.domains.get(name).map(Vec::as_slice)
    }

    pub fn domains(&self) -> impl Iterator<Item = (&str, &[DomainSample])> {
        self.domains.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.domains.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample counts indexed `[domain][class]`.
    pub fn class_counts(&self) -> Vec<Vec<usize>> {
        self.domains
            .values()
            .map(|samples| {
                let mut counts = vec![0; self.num_classes];
                samples.iter().for_each(|s| counts[s.label] += 1);
                counts
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub held_out_domain: String,
    /// Fraction of each source (domain, class) cell that goes to training.
    pub train_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<DomainSample>,
    pub val: Vec<DomainSample>,
    pub test: Vec<DomainSample>,
}

/// Test set: the whole held-out domain. Every other (domain, class) cell is
/// shuffled and its first `round(n·train_fraction)` samples go to training.
pub fn leave_one_domain_out(ds: &MultiDomainDataset, spec: &SplitSpec) -> Result<Split> {
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Parameter(format!(
            "train_fraction {} outside [0, 1]",
            spec.train_fraction
        )));
    }
    let Some(held) = ds.domains.get_index_of(&spec.held_out_domain) else {
        return Err(Error::Parameter(format!(
            "unknown domain `{}` (have {})",
            spec.held_out_domain,
            ds.domain_names().join(", ")
        )));
    };
    let mut split = Split::default();
    for (d, samples) in ds.domains.values().enumerate() {
        if d == held {
            split.test.extend(samples.iter().cloned());
            continue;
        }
        for class in 0..ds.num_classes {
            let mut cell: Vec<&DomainSample> = samples.iter().filter(|s| s.label == class).collect();
            cell.shuffle(&mut rng::stream(spec.seed, &[0x5b17, d as u64, class as u64]));
            let n_train = (cell.len() as f64 * spec.train_fraction).round() as usize;
            split.train.extend(cell[..n_train].iter().map(|s| (*s).clone()));
            split.val.extend(cell[n_train..].iter().map(|s| (*s).clone()));
        }
    }
    Ok(split)
}

/// Sample order for one epoch, a fresh permutation per `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0xba7c, epoch as u64]));
    order
}

/// Shuffled index batches covering `0..n` once; the last batch may be short.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: usize) -> impl Iterator<Item = Vec<usize>> {
    let order = epoch_order(n, seed, epoch);
    let bs = batch_size.max(1);
    (0..n.div_ceil(bs)).map(move |b| order[b * bs..((b + 1) * bs).min(n)].to_vec())
}
