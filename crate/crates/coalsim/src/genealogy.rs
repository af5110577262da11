//! Labelled partitions and reverse-time genealogy extraction.
//!
//! The genealogical state of an `n`-sample is a partition of `{0, .., n-1}`
//! whose blocks carry the index of their current ancestral particle. Blocks
//! merge when their labels map to a common parent under that generation's
//! ancestor vector.
//!
//! ```
//! use coalsim::genealogy::{initial_partition, apply_ancestors};
//!
//! let p = initial_partition(3, &[2, 5, 7], 8).unwrap();
//! assert_eq!(p.block_count(), 3);
//! // Particles 2 and 5 share parent 4; particle 7 stays apart.
//! let parents = vec![0, 1, 4, 3, 4, 4, 6, 1];
//! let q = apply_ancestors(&p, &parents);
//! assert_eq!(q.block_count(), 2);
//! assert_eq!(q.blocks()[0].members, vec![0, 1]);
//! assert_eq!(q.blocks()[0].label, 4);
//! ```

use crate::model::ForwardRun;
use crate::{Error, Result};

/// One block: sorted member set (sample indices) plus the index of the
/// particle that currently carries the block's ancestral line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub members: Vec<usize>,
    pub label: usize,
}

/// A partition of `{0, .., n-1}` with pairwise-distinct particle labels.
/// Blocks are kept in lexicographic order by smallest member; nothing
/// downstream relies on the order, it just makes equality and output
/// reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelledPartition {
    n: usize,
    blocks: Vec<Block>,
}

impl LabelledPartition {
    pub fn sample_size(&self) -> usize {
        self.n
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn labels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.label).collect()
    }

    /// Drops the labels.
    pub fn unlabel(&self) -> Partition {
        Partition {
            n: self.n,
            blocks: self.blocks.iter().map(|b| b.members.clone()).collect(),
        }
    }

    fn canonicalise(&mut self) {
        for b in &mut self.blocks {
            b.members.sort_unstable();
        }
        self.blocks.sort_by_key(|b| b.members[0]);
    }

    fn validate(&self) -> bool {
        let mut seen = vec![false; self.n];
        for b in &self.blocks {
            if b.members.is_empty() {
                return false;
            }
            for &m in &b.members {
                if m >= self.n || seen[m] {
                    return false;
                }
                seen[m] = true;
            }
        }
        let mut labels = self.labels();
        labels.sort_unstable();
        labels.windows(2).all(|w| w[0] != w[1]) && seen.iter().all(|&s| s)
    }
}

/// An unlabelled partition of `{0, .., n-1}` in canonical block order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    n: usize,
    pub blocks: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(n: usize, mut blocks: Vec<Vec<usize>>) -> Self {
        for b in &mut blocks {
            b.sort_unstable();
        }
        blocks.sort_by_key(|b| b[0]);
        Partition { n, blocks }
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            n,
            blocks: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

/// True iff `eta` is obtained from `xi` by merging exactly two blocks.
pub fn covers_merge(xi: &Partition, eta: &Partition) -> bool {
    if eta.block_count() + 1 != xi.block_count() {
        return false;
    }
    // Every block of eta must be either a block of xi or the union of
    // exactly two of them.
    let mut merged_seen = false;
    for b in &eta.blocks {
        if xi.blocks.contains(b) {
            continue;
        }
        let parts: Vec<&Vec<usize>> = xi
            .blocks
            .iter()
            .filter(|x| x.iter().all(|m| b.contains(m)))
            .collect();
        let covered: usize = parts.iter().map(|p| p.len()).sum();
        if parts.len() != 2 || covered != b.len() || merged_seen {
            return false;
        }
        merged_seen = true;
    }
    merged_seen
}

/// `n` singleton blocks labelled by the chosen terminal particles.
pub fn initial_partition(
    n: usize,
    terminal_labels: &[usize],
    population: usize,
) -> Result<LabelledPartition> {
    if terminal_labels.len() != n || n == 0 {
        return Err(Error::InvalidModel(format!(
            "need {n} terminal labels, got {}",
            terminal_labels.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for &l in terminal_labels {
        if l >= population {
            return Err(Error::LabelOutOfRange {
                label: l,
                population,
            });
        }
        if !seen.insert(l) {
            return Err(Error::DuplicateLabel(l));
        }
    }
    let blocks = terminal_labels
        .iter()
        .enumerate()
        .map(|(i, &l)| Block {
            members: vec![i],
            label: l,
        })
        .collect();
    let p = LabelledPartition { n, blocks };
    debug_assert!(p.validate());
    Ok(p)
}

/// Applies one ancestor vector: blocks whose labels share a parent are
/// unioned and relabelled by that parent.
pub fn apply_ancestors(p: &LabelledPartition, parents: &[u32]) -> LabelledPartition {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::with_capacity(p.block_count());
    for (idx, block) in p.blocks.iter().enumerate() {
        let parent = parents[block.label] as usize;
        match groups.iter_mut().find(|(g, _)| *g == parent) {
            Some((_, ids)) => ids.push(idx),
            None => groups.push((parent, vec![idx])),
        }
    }
    let blocks = groups
        .into_iter()
        .map(|(parent, ids)| {
            let mut members = Vec::new();
            for id in ids {
                members.extend_from_slice(&p.blocks[id].members);
            }
            Block {
                members,
                label: parent,
            }
        })
        .collect();
    let mut out = LabelledPartition { n: p.n, blocks };
    out.canonicalise();
    debug_assert!(out.validate());
    out
}

/// The genealogical process of an `n`-sample: one labelled partition per
/// reverse-time generation, starting from the singleton state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenealogyTrajectory {
    pub sample_size: usize,
    pub population: usize,
    pub states: Vec<LabelledPartition>,
}

impl GenealogyTrajectory {
    /// First reverse generation whose block count drops below the initial
    /// one, if any.
    pub fn first_merger(&self) -> Option<usize> {
        let initial = self.states[0].block_count();
        self.states.iter().position(|s| s.block_count() < initial)
    }
}

/// Traces the genealogy of the given terminal particles through a run,
/// applying the recorded ancestor vectors in reverse-time order.
pub fn trace(run: &ForwardRun, terminal_labels: &[usize]) -> Result<GenealogyTrajectory> {
    let n = terminal_labels.len();
    let mut states = Vec::with_capacity(run.generations() + 1);
    states.push(initial_partition(n, terminal_labels, run.population)?);
    for r in 1..=run.generations() {
        let next = apply_ancestors(&states[r - 1], run.ancestors_rev(r));
        debug_assert!(next.block_count() <= states[r - 1].block_count());
        states.push(next);
    }
    Ok(GenealogyTrajectory {
        sample_size: n,
        population: run.population,
        states,
    })
}

/// Independent per-particle oracle: walks each sample's lineage back one
/// particle at a time and groups samples by common ancestor. `trace` must
/// agree with this exactly; the two are implemented separately on purpose.
pub fn walk_back_oracle(run: &ForwardRun, terminal_labels: &[usize]) -> Vec<LabelledPartition> {
    let n = terminal_labels.len();
    let mut lineages: Vec<usize> = terminal_labels.to_vec();
    let mut out = Vec::with_capacity(run.generations() + 1);
    let group = |lineages: &[usize], n: usize| -> LabelledPartition {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for i in 0..n {
            let anc = lineages[i];
            match groups.iter_mut().find(|(a, _)| *a == anc) {
                Some((_, ids)) => ids.push(i),
                None => groups.push((anc, vec![i])),
            }
        }
        let mut p = LabelledPartition {
            n,
            blocks: groups
                .into_iter()
                .map(|(anc, members)| Block {
                    members,
                    label: anc,
                })
                .collect(),
        };
        p.canonicalise();
        p
    };
    out.push(group(&lineages, n));
    for r in 1..=run.generations() {
        let parents = run.ancestors_rev(r);
        for l in &mut lineages {
            *l = parents[*l] as usize;
        }
        out.push(group(&lineages, n));
    }
    out
}
