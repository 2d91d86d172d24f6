//! Two-way clustering of activations with silhouette analysis. The
//! heuristic flags a poisoned class when the two clusters' mean
//! silhouettes differ by more than 0.1.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::DefenseError;

const RESTARTS: usize = 10;
const MAX_LLOYD_ITERS: usize = 100;
const SILHOUETTE_GAP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringOutcome {
    /// Cluster index 0 or 1 per row.
    pub assignment: Vec<usize>,
    /// Mean silhouette per cluster.
    pub silhouettes: [f64; 2],
    /// |silhouette difference| between the clusters.
    pub gap: f64,
    /// Raised iff the gap exceeds the 0.1 heuristic.
    pub flagged: bool,
    /// Sum of squared distances to the winning centroids, one entry per
    /// completed Lloyd iteration of the winning restart.
    pub objective_trace: Vec<f64>,
}

impl ClusteringOutcome {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least one iteration")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Restart {
    assignment: Vec<usize>,
    trace: Vec<f64>,
}

/// One seeded Lloyd run. Returns None when a cluster empties or ends
/// with fewer than two members, which leaves the silhouette undefined.
fn lloyd(rows: &[&[f64]], d: usize, rng: &mut ChaCha8Rng) -> Option<Restart> {
    let n = rows.len();
    let first = rng.gen_range(0..n);
    let mut second = rng.gen_range(0..n);
    while second == first {
        second = rng.gen_range(0..n);
    }
    let mut centroids = [rows[first].to_vec(), rows[second].to_vec()];
    let mut assignment = vec![0usize; n];
    let mut trace: Vec<f64> = Vec::new();

    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut objective = 0.0;
        for (i, row) in rows.iter().enumerate() {
            let d0 = sq_dist(row, &centroids[0]);
            let d1 = sq_dist(row, &centroids[1]);
            // ties stay with the lower cluster index
            let c = usize::from(d1 < d0);
            objective += d0.min(d1);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        if let Some(&prev) = trace.last() {
            debug_assert!(objective <= prev + 1e-9, "objective rose {prev} -> {objective}");
        }
        trace.push(objective);

        let counts = [
            assignment.iter().filter(|&&c| c == 0).count(),
            assignment.iter().filter(|&&c| c == 1).count(),
        ];
        if counts[0] == 0 || counts[1] == 0 {
            return None;
        }
        if !changed && trace.len() > 1 {
            break;
        }
        for c in 0..2 {
            let mut mean = vec![0.0; d];
            for (row, &a) in rows.iter().zip(&assignment) {
                if a == c {
                    for (m, &v) in mean.iter_mut().zip(*row) {
                        *m += v / counts[c] as f64;
                    }
                }
            }
            centroids[c] = mean;
        }
    }

    let small = assignment.iter().filter(|&&c| c == 0).count().min(
        assignment.iter().filter(|&&c| c == 1).count(),
    );
    if small < 2 {
        return None;
    }
    Some(Restart { assignment, trace })
}

fn mean_silhouettes(rows: &[&[f64]], assignment: &[usize]) -> [f64; 2] {
    let n = rows.len();
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for i in 0..n {
        let own = assignment[i];
        let mut dist_sum = [0.0; 2];
        let mut members = [0usize; 2];
        for j in 0..n {
            if i == j {
                continue;
            }
            dist_sum[assignment[j]] += sq_dist(rows[i], rows[j]).sqrt();
            members[assignment[j]] += 1;
        }
        // own cluster has >= 2 members by construction, so both means exist
        let a = dist_sum[own] / members[own] as f64;
        let b = dist_sum[1 - own] / members[1 - own] as f64;
        let s = if a.max(b) == 0.0 { 0.0 } else { (b - a) / a.max(b) };
        sums[own] += s;
        counts[own] += 1;
    }
    [sums[0] / counts[0] as f64, sums[1] / counts[1] as f64]
}

/// Seeded k-means (k=2) over activation rows followed by per-cluster
/// silhouette means. Re-seeds on degenerate splits and reports failure
/// once every restart degenerates, which is the all-identical-rows case.
pub fn activation_clustering(
    activations: &Tensor,
    seed: u64,
) -> Result<ClusteringOutcome, DefenseError> {
    let shape = activations.shape();
    assert_eq!(shape.len(), 2, "activations must be a matrix");
    let (n, d) = (shape[0], shape[1]);
    if n < 4 {
        return Err(DefenseError::TooFewSamples { got: n });
    }

    let rows: Vec<&[f64]> = activations.data().chunks_exact(d).collect();
    let mut best: Option<Restart> = None;
    for r in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b6d65616e73 ^ ((r as u64) << 56));
        if let Some(run) = lloyd(&rows, d, &mut rng) {
            let better = match &best {
                None => true,
                Some(b) => run.trace.last() < b.trace.last(),
            };
            if better {
                best = Some(run);
            }
        }
    }
    let best = best.ok_or(DefenseError::Degenerate { attempts: RESTARTS })?;

    let silhouettes = mean_silhouettes(&rows, &best.assignment);
    let gap = (silhouettes[0] - silhouettes[1]).abs();
    Ok(ClusteringOutcome {
        assignment: best.assignment,
        silhouettes,
        gap,
        flagged: gap > SILHOUETTE_GAP,
        objective_trace: best.trace,
    })
}
