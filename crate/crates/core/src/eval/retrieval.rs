use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::GramSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// The `k` candidates closest to `query` by summed per-layer Frobenius
/// distance, ties broken by candidate index.
pub fn nearest_neighbors(query: &GramSet, candidates: &[GramSet], k: usize) -> Result<Vec<Neighbor>> {
    if candidates.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut all: Vec<Neighbor> = candidates
        .iter()
        .enumerate()
        .map(|(index, c)| Ok(Neighbor { index, distance: query.distance(c)? }))
        .collect::<Result<_>>()?;
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    all.truncate(k);
    Ok(all)
}

/// How many generated samples land nearest to each reference family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub counts: BTreeMap<String, usize>,
    pub families_covered: usize,
    pub families_total: usize,
}

impl Coverage {
    pub fn covers_all(&self) -> bool {
        self.families_covered == self.families_total
    }
}

pub fn family_coverage(generated: &[GramSet], reference: &[GramSet], labels: &[String]) -> Result<Coverage> {
    if reference.len() != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} reference samples but {} labels",
            reference.len(),
            labels.len()
        )));
    }
    let mut counts: BTreeMap<String, usize> = labels.iter().map(|l| (l.clone(), 0)).collect();
    for g in generated {
        let nn = nearest_neighbors(g, reference, 1)?;
        *counts.get_mut(&labels[nn[0].index]).expect("label present") += 1;
    }
    Ok(Coverage {
        families_covered: counts.values().filter(|&&c| c > 0).count(),
        families_total: counts.len(),
        counts,
    })
}
