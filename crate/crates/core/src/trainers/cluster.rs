//! Clustering-based selection: pick one elite per behavior cluster.
//!
//! Candidates are embedded by their deterministic actions on a shared probe
//! batch and grouped with seeded k-means.

use rand::Rng;

use crate::archive::AgentSnapshot;
use crate::Result;

const RESTARTS: usize = 10;
const MAX_RESEEDS: usize = 5;
const LLOYD_ITERS: usize = 100;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations. `None` when a cluster
/// ends up empty or the points cannot support `k` distinct centroids.
fn kmeans_once<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Option<(Vec<usize>, f64)> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        centroids.push(points[pick].clone());
    }
    let mut labels = vec![0usize; n];
    for it in 0..LLOYD_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist2(p, &centroids[a]).total_cmp(&dist2(p, &centroids[b])))
                .expect("k >= 1");
            if best != labels[i] {
                changed = true;
                labels[i] = best;
            }
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
        if !changed && it > 0 {
            break;
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| dist2(p, &centroids[l])).sum();
    Some((labels, inertia))
}

/// Best-inertia labels over the restarts, or `None` if clustering stayed
/// degenerate through every reseed.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Option<Vec<usize>> {
    if k == 0 || points.len() < k {
        return None;
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut failures = 0;
    let mut done = 0;
    while done < RESTARTS {
        match kmeans_once(points, k, rng) {
            Some((labels, inertia)) => {
                done += 1;
                if best.as_ref().is_none_or(|b| inertia < b.1) {
                    best = Some((labels, inertia));
                }
            }
            None => {
                failures += 1;
                if failures >= MAX_RESEEDS {
                    break;
                }
            }
        }
    }
    best.map(|b| b.0)
}

/// Fittest `m` candidates, best first, older first on ties.
fn top_m_of(candidates: &[AgentSnapshot], m: usize) -> Vec<AgentSnapshot> {
    let mut sorted: Vec<&AgentSnapshot> = candidates.iter().collect();
    sorted.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then(a.seq.cmp(&b.seq)));
    sorted.into_iter().take(m).cloned().collect()
}

/// Selects `m` candidates, one per cluster of `embeddings`, each the fittest
/// of its cluster, best first. Falls back to the plain top `m` by fitness
/// when clustering degenerates.
pub fn clustering_selection<R: Rng + ?Sized>(
    candidates: &[AgentSnapshot],
    embeddings: &[Vec<f64>],
    m: usize,
    rng: &mut R,
) -> Result<(Vec<AgentSnapshot>, bool)> {
    if candidates.len() < m || candidates.is_empty() {
        return Err(crate::Error::InvalidArgument(format!(
            "clustering needs at least {m} candidates, got {}",
            candidates.len()
        )));
    }
    let Some(labels) = kmeans(embeddings, m, rng) else {
        return Ok((top_m_of(candidates, m), true));
    };
    let mut chosen: Vec<&AgentSnapshot> = (0..m)
        .map(|c| {
            candidates
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == c)
                .map(|(s, _)| s)
                .max_by(|a, b| a.fitness.total_cmp(&b.fitness).then(b.seq.cmp(&a.seq)))
                .expect("non-empty cluster")
        })
        .collect();
    chosen.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then(a.seq.cmp(&b.seq)));
    Ok((chosen.into_iter().cloned().collect(), false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::tests::snap;
    use crate::env::SimRng;
    use rand::SeedableRng;

    #[test]
    fn separated_groups_get_one_representative_each() {
        let cands: Vec<AgentSnapshot> = (0..6).map(|i| snap(i, i as f64, None)).collect();
        let emb: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let base = if i % 2 == 0 { 0.0 } else { 10.0 };
                vec![base + 0.01 * i as f64, base]
            })
            .collect();
        let (picked, fallback) = clustering_selection(&cands, &emb, 2, &mut SimRng::seed_from_u64(1)).unwrap();
        assert!(!fallback);
        let f: Vec<f64> = picked.iter().map(|s| s.fitness).collect();
        assert_eq!(f, vec![5.0, 4.0]);
    }

    #[test]
    fn identical_embeddings_fall_back_to_top_m() {
        let cands: Vec<AgentSnapshot> = (0..3).map(|i| snap(i, [2.0, 7.0, 1.0][i as usize], None)).collect();
        let emb = vec![vec![1.0, 1.0]; 3];
        let (picked, fallback) = clustering_selection(&cands, &emb, 2, &mut SimRng::seed_from_u64(0)).unwrap();
        assert!(fallback);
        assert_eq!(picked.iter().map(|s| s.fitness).collect::<Vec<_>>(), vec![7.0, 2.0]);
    }

    #[test]
    fn seeded_selection_is_reproducible() {
        let cands: Vec<AgentSnapshot> = (0..8).map(|i| snap(i, (i * 7 % 5) as f64, None)).collect();
        let emb: Vec<Vec<f64>> = (0..8).map(|i| vec![(i * 3 % 8) as f64, (i % 3) as f64]).collect();
        let run = || {
            clustering_selection(&cands, &emb, 3, &mut SimRng::seed_from_u64(4))
                .unwrap()
                .0
                .iter()
                .map(|s| s.fitness)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
