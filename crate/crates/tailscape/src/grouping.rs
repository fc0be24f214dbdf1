//! Memory bank of best per-class encoder snapshots and spectral grouping.
//!
//! The bank keeps, per class, the encoder parameters that achieved the best
//! feature quality so far. Classes are partitioned into groups by Normalized
//! Cuts on a Gaussian affinity over snapshot distances (Ng-Jordan-Weiss:
//! symmetric-normalized Laplacian, row-normalized eigenvector embedding,
//! seeded k-means with restarts). Each group's optimum is the unweighted
//! mean of its member snapshots.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

const KMEANS_RESTARTS: usize = 25;
const KMEANS_MAX_ITERS: usize = 100;

/// Best snapshot seen so far for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub best_q: f64,
    pub snapshot: Vec<f64>,
    pub epoch_found: usize,
}

/// Per-class store of the encoder parameters with the best quality so far.
///
/// `best_q` is non-decreasing over training for every class; a snapshot is
/// replaced only when the new quality strictly exceeds the stored one.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    entries: Vec<Option<BankEntry>>,
}

impl MemoryBank {
    pub fn new(classes: usize) -> Self {
        Self { entries: vec![None; classes] }
    }

    pub fn classes(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, class: usize) -> Option<&BankEntry> {
        self.entries.get(class).and_then(Option::as_ref)
    }

    pub fn is_fully_populated(&self) -> bool {
        self.entries.iter().all(Option::is_some)
    }

    /// Apply one epoch's quality scores: unpopulated classes adopt the
    /// current snapshot, populated ones replace it only on strict
    /// improvement (ties keep the old snapshot).
    pub fn update(
        &mut self,
        encoder: &[f64],
        quality: &BTreeMap<usize, f64>,
        epoch: usize,
    ) -> Result<()> {
        for (&class, &q) in quality {
            if class >= self.entries.len() {
                return Err(Error::InvalidArgument(format!(
                    "quality score for class {class} but bank has {} classes",
                    self.entries.len()
                )));
            }
            if !q.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite quality for class {class}"
                )));
            }
            let slot = &mut self.entries[class];
            let replace = match slot {
                None => true,
                Some(e) => q > e.best_q,
            };
            if replace {
                *slot = Some(BankEntry {
                    best_q: q,
                    snapshot: encoder.to_vec(),
                    epoch_found: epoch,
                });
            }
        }
        Ok(())
    }

    /// All snapshots in class order; errors on the first unpopulated class.
    pub fn snapshots(&self) -> Result<Vec<&[f64]>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(c, e)| {
                e.as_ref().map(|e| e.snapshot.as_slice()).ok_or(Error::UnpopulatedBank(c))
            })
            .collect()
    }
}

// ── Affinity ────────────────────────────────────────────────────────────────

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Gaussian affinity on snapshot distances with the median-sigma heuristic:
/// `w_ij = exp(-||s_i - s_j||^2 / (2 sigma^2))`, zero diagonal.
pub fn build_affinity(bank: &MemoryBank) -> Result<Vec<Vec<f64>>> {
    build_affinity_projected(bank, None, 0)
}

/// Same as [`build_affinity`] but optionally projecting snapshots to
/// `projection_dims` with a fixed seeded Gaussian random projection first
/// (for models whose encoder segment is large).
pub fn build_affinity_projected(
    bank: &MemoryBank,
    projection_dims: Option<usize>,
    projection_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let snapshots = bank.snapshots()?;
    let projected: Option<Vec<Vec<f64>>> = match projection_dims {
        Some(k) if !snapshots.is_empty() && k < snapshots[0].len() => {
            Some(project_snapshots(&snapshots, k, projection_seed))
        }
        _ => None,
    };
    let views: Vec<&[f64]> = match &projected {
        Some(p) => p.iter().map(Vec::as_slice).collect(),
        None => snapshots,
    };
    affinity_from_points(&views)
}

fn project_snapshots(snapshots: &[&[f64]], dims: usize, seed: u64) -> Vec<Vec<f64>> {
    let input_len = snapshots[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dims as f64).sqrt();
    // Row-major projection matrix, drawn once for all snapshots.
    let matrix: Vec<f64> =
        (0..dims * input_len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    snapshots
        .iter()
        .map(|s| {
            (0..dims)
                .map(|r| {
                    matrix[r * input_len..(r + 1) * input_len]
                        .iter()
                        .zip(*s)
                        .map(|(&m, &x)| m * x)
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn affinity_from_points(points: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let c = points.len();
    if c < 2 {
        return Err(Error::InvalidGrouping("affinity needs at least 2 classes".into()));
    }
    let mut dists = Vec::with_capacity(c * (c - 1) / 2);
    for i in 0..c {
        for j in (i + 1)..c {
            dists.push(distance(points[i], points[j]));
        }
    }
    let mut sorted = dists.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mut sigma = median(&sorted);
    if sigma <= 0.0 {
        // Degenerate median: use the smallest positive distance, or treat all
        // snapshots as coincident.
        sigma = sorted.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
    }
    let mut w = vec![vec![0.0; c]; c];
    let mut k = 0;
    for i in 0..c {
        for j in (i + 1)..c {
            let d = dists[k];
            k += 1;
            let v = if sigma > 0.0 { (-d * d / (2.0 * sigma * sigma)).exp() } else { 1.0 };
            w[i][j] = v;
            w[j][i] = v;
        }
    }
    Ok(w)
}

// ── Normalized Cuts ─────────────────────────────────────────────────────────

fn validate_affinity(w: &[Vec<f64>]) -> Result<usize> {
    let c = w.len();
    if c < 2 {
        return Err(Error::InvalidGrouping("affinity must be at least 2x2".into()));
    }
    for (i, row) in w.iter().enumerate() {
        if row.len() != c {
            return Err(Error::InvalidGrouping("affinity must be square".into()));
        }
        if w[i][i] != 0.0 {
            return Err(Error::InvalidGrouping(format!("nonzero diagonal at {i}")));
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidGrouping(format!("bad weight at ({i},{j})")));
            }
            if w[j][i] != v {
                return Err(Error::InvalidGrouping(format!("asymmetry at ({i},{j})")));
            }
        }
    }
    Ok(c)
}

fn connected_components(w: &[Vec<f64>]) -> Vec<usize> {
    let c = w.len();
    let mut component = vec![usize::MAX; c];
    let mut next = 0;
    for start in 0..c {
        if component[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        component[start] = next;
        while let Some(i) = stack.pop() {
            for j in 0..c {
                if w[i][j] > 0.0 && component[j] == usize::MAX {
                    component[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    component
}

/// Sorted-ascending eigenvalues of `L_sym` and the row-normalized embedding
/// made of the `groups` smallest eigenvectors.
fn spectral_embedding(w: &[Vec<f64>], groups: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let c = w.len();
    let inv_sqrt_deg: Vec<f64> = (0..c)
        .map(|i| {
            let deg: f64 = w[i].iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let l_sym = DMatrix::from_fn(c, c, |i, j| {
        let norm = -inv_sqrt_deg[i] * w[i][j] * inv_sqrt_deg[j];
        if i == j {
            1.0 + norm
        } else {
            norm
        }
    });
    let eig = SymmetricEigen::new(l_sym);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).expect("finite eigenvalues")
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut rows = vec![vec![0.0; groups]; c];
    for (col, &src) in order.iter().take(groups).enumerate() {
        for (i, row) in rows.iter_mut().enumerate() {
            row[col] = eig.eigenvectors[(i, src)];
        }
    }
    for row in &mut rows {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
    }
    (eigenvalues, rows)
}

fn kmeans(rows: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = rows.len();
    let dim = rows[0].len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64 + 1);
        // Forgy init: k distinct row indices.
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + rng.gen_range(0..n - i);
            pool.swap(i, j);
        }
        let mut centroids: Vec<Vec<f64>> = pool[..k].iter().map(|&i| rows[i].clone()).collect();
        let mut assignment = vec![0usize; n];
        for _ in 0..KMEANS_MAX_ITERS {
            let mut changed = false;
            for (i, row) in rows.iter().enumerate() {
                let mut best_c = 0;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in centroids.iter().enumerate() {
                    let d: f64 =
                        row.iter().zip(centroid).map(|(&x, &y)| (x - y) * (x - y)).sum();
                    if d < best_d {
                        best_d = d;
                        best_c = c;
                    }
                }
                if assignment[i] != best_c {
                    assignment[i] = best_c;
                    changed = true;
                }
            }
            repair_empty_clusters(rows, &centroids, &mut assignment, k);
            for (c, centroid) in centroids.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = rows
                    .iter()
                    .zip(&assignment)
                    .filter(|(_, &a)| a == c)
                    .map(|(r, _)| r)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                for (d, slot) in centroid.iter_mut().enumerate() {
                    *slot = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                }
            }
            if !changed {
                break;
            }
        }
        let _ = dim;
        let inertia: f64 = rows
            .iter()
            .zip(&assignment)
            .map(|(row, &a)| {
                row.iter().zip(&centroids[a]).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>()
            })
            .sum();
        // Strictly better inertia wins; ties keep the earliest restart.
        if best.as_ref().map_or(true, |(b, _)| inertia < *b) {
            best = Some((inertia, assignment));
        }
    }
    best.expect("at least one restart").1
}

/// Give every empty cluster the member farthest from its current centroid,
/// taken from clusters that can spare one.
fn repair_empty_clusters(
    rows: &[Vec<f64>],
    centroids: &[Vec<f64>],
    assignment: &mut [usize],
    k: usize,
) {
    for empty in 0..k {
        if assignment.iter().any(|&a| a == empty) {
            continue;
        }
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let mut worst: Option<(f64, usize)> = None;
        for (i, row) in rows.iter().enumerate() {
            if counts[assignment[i]] <= 1 {
                continue;
            }
            let d: f64 = row
                .iter()
                .zip(&centroids[assignment[i]])
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            if worst.map_or(true, |(w, _)| d > w) {
                worst = Some((d, i));
            }
        }
        if let Some((_, i)) = worst {
            assignment[i] = empty;
        }
    }
}

/// Relabel group ids by first appearance over class index order.
fn canonicalize(assignment: &mut [usize]) {
    let mut mapping: BTreeMap<usize, usize> = BTreeMap::new();
    let mut next = 0;
    for a in assignment.iter_mut() {
        let id = *mapping.entry(*a).or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
        *a = id;
    }
}

/// Partition classes into `groups` clusters by the spectral NCut relaxation.
///
/// `G == C` returns singletons. A graph with at least `groups` connected
/// components falls back to component labels capped at `groups - 1`.
/// Otherwise the Ng-Jordan-Weiss pipeline runs with a seeded 25-restart
/// k-means; the result never has an empty group.
pub fn ncut_partition(w: &[Vec<f64>], groups: usize, seed: u64) -> Result<Vec<usize>> {
    let c = validate_affinity(w)?;
    if groups < 2 {
        return Err(Error::InvalidGrouping("need at least 2 groups".into()));
    }
    if groups > c {
        return Err(Error::InvalidGrouping(format!("{groups} groups for {c} classes")));
    }
    if groups == c {
        return Ok((0..c).collect());
    }
    let components = connected_components(w);
    let component_count = components.iter().max().copied().unwrap_or(0) + 1;
    if component_count >= groups {
        let mut assignment: Vec<usize> =
            components.iter().map(|&comp| comp.min(groups - 1)).collect();
        canonicalize(&mut assignment);
        return Ok(assignment);
    }
    let (_, rows) = spectral_embedding(w, groups);
    let mut assignment = kmeans(&rows, groups, seed);
    canonicalize(&mut assignment);
    Ok(assignment)
}

/// NCut objective `sum_g cut(g, rest) / assoc(g, V)`; groups with zero
/// association contribute zero.
pub fn ncut_objective(w: &[Vec<f64>], assignment: &[usize]) -> f64 {
    let c = w.len();
    let groups = assignment.iter().max().copied().unwrap_or(0) + 1;
    let mut cut = vec![0.0; groups];
    let mut assoc = vec![0.0; groups];
    for i in 0..c {
        for j in 0..c {
            assoc[assignment[i]] += w[i][j];
            if assignment[i] != assignment[j] {
                cut[assignment[i]] += w[i][j];
            }
        }
    }
    (0..groups).map(|g| if assoc[g] > 0.0 { cut[g] / assoc[g] } else { 0.0 }).sum()
}

// ── Group optima ────────────────────────────────────────────────────────────

/// Class-to-group partition with per-group mean snapshots and sizes.
///
/// `optima[g]` is the arithmetic mean over member classes of their banked
/// encoder snapshots. `sample_count[g]` is the summed training sample count
/// of member classes (the group size used by the radius and the penalty
/// normalization); `class_count[g]` is the member count used for the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    pub assignment: Vec<usize>,
    pub groups: usize,
    pub members: Vec<Vec<usize>>,
    pub optima: Vec<Vec<f64>>,
    pub sample_count: Vec<usize>,
    pub class_count: Vec<usize>,
    pub fisher: Vec<Option<Vec<f64>>>,
}

impl GroupPartition {
    pub fn group_of(&self, class: usize) -> usize {
        self.assignment[class]
    }
}

/// Build the partition record from a bank, an assignment, and per-class
/// training sample counts.
pub fn group_optima(
    bank: &MemoryBank,
    assignment: &[usize],
    class_sample_counts: &[usize],
) -> Result<GroupPartition> {
    let c = bank.classes();
    if assignment.len() != c || class_sample_counts.len() != c {
        return Err(Error::InvalidGrouping(format!(
            "assignment/counts length must equal class count {c}"
        )));
    }
    let snapshots = bank.snapshots()?;
    let groups = assignment.iter().max().copied().unwrap_or(0) + 1;
    let mut members = vec![Vec::new(); groups];
    for (class, &g) in assignment.iter().enumerate() {
        members[g].push(class);
    }
    if let Some(g) = members.iter().position(Vec::is_empty) {
        return Err(Error::InvalidGrouping(format!("group {g} has no classes")));
    }
    let enc_len = snapshots[0].len();
    let mut optima = Vec::with_capacity(groups);
    let mut sample_count = Vec::with_capacity(groups);
    let mut class_count = Vec::with_capacity(groups);
    for member_classes in &members {
        let mut mean = vec![0.0; enc_len];
        for &class in member_classes {
            for (m, &x) in mean.iter_mut().zip(snapshots[class]) {
                *m += x;
            }
        }
        let n = member_classes.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        optima.push(mean);
        sample_count.push(member_classes.iter().map(|&c| class_sample_counts[c]).sum());
        class_count.push(member_classes.len());
    }
    Ok(GroupPartition {
        assignment: assignment.to_vec(),
        groups,
        members,
        optima,
        sample_count,
        class_count,
        fisher: vec![None; groups],
    })
}

// ── Diagnostics and persistence ─────────────────────────────────────────────

/// JSON-serializable dump of the grouping pipeline state.
#[derive(Debug, Clone, Serialize)]
pub struct GroupingDump {
    pub affinity: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub assignment: Vec<usize>,
    pub ncut_objective: f64,
}

/// Run affinity + spectral partition on a bank and capture the intermediate
/// quantities for inspection.
pub fn grouping_report(bank: &MemoryBank, groups: usize, seed: u64) -> Result<GroupingDump> {
    let affinity = build_affinity(bank)?;
    let (eigenvalues, _) = spectral_embedding(&affinity, groups.min(affinity.len()));
    let assignment = ncut_partition(&affinity, groups, seed)?;
    let objective = ncut_objective(&affinity, &assignment);
    Ok(GroupingDump { affinity, eigenvalues, assignment, ncut_objective: objective })
}

const BANK_MAGIC: &[u8; 4] = b"TSBK";
const BANK_VERSION: u32 = 1;

/// Persist a memory bank (binary, little-endian).
pub fn save_bank(path: &Path, bank: &MemoryBank) -> Result<()> {
    let enc_len = bank
        .entries
        .iter()
        .flatten()
        .map(|e| e.snapshot.len())
        .next()
        .unwrap_or(0);
    let mut buf = Vec::new();
    buf.extend_from_slice(BANK_MAGIC);
    buf.extend_from_slice(&BANK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(bank.classes() as u32).to_le_bytes());
    buf.extend_from_slice(&(enc_len as u64).to_le_bytes());
    for entry in &bank.entries {
        match entry {
            Some(e) => {
                buf.push(1);
                buf.extend_from_slice(&e.best_q.to_le_bytes());
                buf.extend_from_slice(&(e.epoch_found as u64).to_le_bytes());
                for &v in &e.snapshot {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => buf.push(0),
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Load a bank written by [`save_bank`].
pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                reason: "truncated".into(),
            });
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != BANK_MAGIC {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            reason: "bad magic".into(),
        });
    }
    if u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) != BANK_VERSION {
        return Err(Error::MalformedFile {
            path: path.display().to_string(),
            reason: "unsupported version".into(),
        });
    }
    let classes = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let enc_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut bank = MemoryBank::new(classes);
    for class in 0..classes {
        let populated = take(1)?[0];
        if populated == 0 {
            continue;
        }
        let best_q = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let epoch = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut snapshot = Vec::with_capacity(enc_len);
        for _ in 0..enc_len {
            snapshot.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
        }
        bank.entries[class] = Some(BankEntry { best_q, snapshot, epoch_found: epoch });
    }
    Ok(bank)
}
