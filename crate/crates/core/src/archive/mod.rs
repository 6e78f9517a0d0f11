//! Gated agent storage: a MAP-Elites grid or a bounded fitness queue.
//!
//! An offered snapshot only ever displaces a strictly worse one, so the best
//! fitness held by an archive never decreases.

use std::sync::{Arc, Mutex, MutexGuard};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rl::AgentState;
use crate::{Error, Result};

pub mod store;

pub use store::{heatmap_csv, load_archive, save_archive};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    RewardPhase,
    AuxiliaryPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub agent: AgentState,
    pub fitness: f64,
    pub bd: Option<Vec<f64>>,
    pub origin: Origin,
    pub iteration: usize,
    pub learner_id: usize,
    /// Insertion order stamp, assigned by the archive. Lower is older.
    pub seq: u64,
}

impl AgentSnapshot {
    pub fn new(agent: AgentState, fitness: f64, bd: Option<Vec<f64>>, origin: Origin, iteration: usize, learner_id: usize) -> Self {
        Self {
            agent,
            fitness,
            bd,
            origin,
            iteration,
            learner_id,
            seq: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AddOutcome {
    Inserted,
    Replaced,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapElitesGrid {
    pub shape: [usize; 2],
    pub bd_bounds: [[f64; 2]; 2],
    cells: Vec<Option<AgentSnapshot>>,
}

impl MapElitesGrid {
    pub fn new(shape: [usize; 2], bd_bounds: [[f64; 2]; 2]) -> Self {
        Self {
            shape,
            bd_bounds,
            cells: vec![None; shape[0] * shape[1]],
        }
    }

    /// Cell coordinates of a descriptor; total on the real line, with the
    /// upper bound mapped into the last cell.
    pub fn cell_index(&self, bd: &[f64]) -> Result<[usize; 2]> {
        if bd.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: bd.len(),
            });
        }
        let mut out = [0usize; 2];
        for k in 0..2 {
            let [lo, hi] = self.bd_bounds[k];
            let n = self.shape[k];
            let x = ((bd[k] - lo) / (hi - lo) * n as f64).floor();
            out[k] = if x.is_nan() || x < 0.0 {
                0
            } else {
                (x as usize).min(n - 1)
            };
        }
        Ok(out)
    }

    fn flat(&self, c: [usize; 2]) -> usize {
        c[0] * self.shape[1] + c[1]
    }

    pub fn cell(&self, c: [usize; 2]) -> Option<&AgentSnapshot> {
        self.cells[self.flat(c)].as_ref()
    }

    /// Occupied cells in row-major order.
    pub fn occupied(&self) -> impl Iterator<Item = ([usize; 2], &AgentSnapshot)> {
        let cols = self.shape[1];
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| c.as_ref().map(|s| ([i / cols, i % cols], s)))
    }

    fn add(&mut self, snap: AgentSnapshot) -> Result<AddOutcome> {
        let bd = snap.bd.as_deref().ok_or(Error::MissingDescriptor)?;
        let idx = self.flat(self.cell_index(bd)?);
        match &self.cells[idx] {
            None => {
                self.cells[idx] = Some(snap);
                Ok(AddOutcome::Inserted)
            }
            Some(old) if snap.fitness > old.fitness => {
                self.cells[idx] = Some(snap);
                Ok(AddOutcome::Replaced)
            }
            Some(_) => Ok(AddOutcome::Rejected),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessQueue {
    pub capacity: usize,
    /// Kept in insertion order.
    entries: Vec<AgentSnapshot>,
}

impl FitnessQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[AgentSnapshot] {
        &self.entries
    }

    /// Position of the entry evicted next: lowest fitness, oldest on ties.
    fn weakest(&self) -> Option<usize> {
        (0..self.entries.len()).min_by(|&a, &b| {
            let (x, y) = (&self.entries[a], &self.entries[b]);
            x.fitness.total_cmp(&y.fitness).then(x.seq.cmp(&y.seq))
        })
    }

    fn add(&mut self, snap: AgentSnapshot) -> Result<AddOutcome> {
        if self
            .entries
            .iter()
            .any(|e| e.agent.policy.params() == snap.agent.policy.params())
        {
            return Ok(AddOutcome::Rejected);
        }
        if self.entries.len() < self.capacity {
            self.entries.push(snap);
            return Ok(AddOutcome::Inserted);
        }
        match self.weakest() {
            Some(w) if snap.fitness > self.entries[w].fitness => {
                self.entries.remove(w);
                self.entries.push(snap);
                Ok(AddOutcome::Replaced)
            }
            _ => Ok(AddOutcome::Rejected),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchiveKind {
    Grid { shape: [usize; 2], bd_bounds: [[f64; 2]; 2] },
    Queue { capacity: usize },
}

impl ArchiveKind {
    pub fn grid() -> Self {
        ArchiveKind::Grid {
            shape: [10, 10],
            bd_bounds: [[0.0, 1.0], [0.0, 1.0]],
        }
    }

    pub fn queue() -> Self {
        ArchiveKind::Queue { capacity: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ArchiveStore {
    Grid(MapElitesGrid),
    Queue(FitnessQueue),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QdMetrics {
    pub max_fitness: f64,
    pub qd_score: f64,
    pub coverage: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopM {
    pub snapshots: Vec<AgentSnapshot>,
    /// True when the archive held fewer than `M` entries and the best one
    /// was repeated to fill the list.
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub store: ArchiveStore,
    next_seq: u64,
}

impl Archive {
    pub fn new(kind: &ArchiveKind) -> Self {
        let store = match kind {
            ArchiveKind::Grid { shape, bd_bounds } => ArchiveStore::Grid(MapElitesGrid::new(*shape, *bd_bounds)),
            ArchiveKind::Queue { capacity } => ArchiveStore::Queue(FitnessQueue::new(*capacity)),
        };
        Self { store, next_seq: 0 }
    }

    pub fn kind(&self) -> ArchiveKind {
        match &self.store {
            ArchiveStore::Grid(g) => ArchiveKind::Grid {
                shape: g.shape,
                bd_bounds: g.bd_bounds,
            },
            ArchiveStore::Queue(q) => ArchiveKind::Queue { capacity: q.capacity },
        }
    }

    /// Offers a snapshot. Its `seq` is overwritten with the archive's stamp.
    pub fn add(&mut self, mut snap: AgentSnapshot) -> Result<AddOutcome> {
        if !snap.fitness.is_finite() {
            return Err(Error::InvalidArgument(format!("fitness must be finite, got {}", snap.fitness)));
        }
        if matches!(self.store, ArchiveStore::Grid(_)) && snap.bd.is_none() {
            return Err(Error::MissingDescriptor);
        }
        snap.seq = self.next_seq;
        let out = match &mut self.store {
            ArchiveStore::Grid(g) => g.add(snap)?,
            ArchiveStore::Queue(q) => q.add(snap)?,
        };
        if out != AddOutcome::Rejected {
            self.next_seq += 1;
        }
        Ok(out)
    }

    /// Entries in a fixed order (row-major cells, or queue insertion order).
    pub fn entries(&self) -> Vec<&AgentSnapshot> {
        match &self.store {
            ArchiveStore::Grid(g) => g.occupied().map(|(_, s)| s).collect(),
            ArchiveStore::Queue(q) => q.entries.iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        match &self.store {
            ArchiveStore::Grid(g) => g.cells.iter().filter(|c| c.is_some()).count(),
            ArchiveStore::Queue(q) => q.entries.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<AgentSnapshot> {
        let entries = self.entries();
        if entries.is_empty() {
            return Err(Error::EmptyArchive);
        }
        Ok(entries[rng.random_range(0..entries.len())].clone())
    }

    /// The `m` best snapshots, best first; ties go to the older snapshot.
    pub fn top_m(&self, m: usize) -> Result<TopM> {
        let mut entries = self.entries();
        if entries.is_empty() {
            return Err(Error::EmptyArchive);
        }
        entries.sort_by(|a, b| b.fitness.total_cmp(&a.fitness).then(a.seq.cmp(&b.seq)));
        let padded = entries.len() < m;
        let mut snapshots: Vec<AgentSnapshot> = entries.iter().take(m).map(|s| (*s).clone()).collect();
        while snapshots.len() < m {
            snapshots.push(entries[0].clone());
        }
        Ok(TopM { snapshots, padded })
    }

    pub fn qd_metrics(&self, offset: f64) -> QdMetrics {
        let entries = self.entries();
        if entries.is_empty() {
            return QdMetrics {
                max_fitness: f64::NAN,
                qd_score: 0.0,
                coverage: 0,
            };
        }
        QdMetrics {
            max_fitness: entries.iter().map(|s| s.fitness).fold(f64::NEG_INFINITY, f64::max),
            qd_score: entries.iter().map(|s| s.fitness - offset).sum(),
            coverage: entries.len(),
        }
    }
}

/// An archive behind a lock. Every operation is atomic and readers get
/// copies, never references into the store.
#[derive(Debug, Clone)]
pub struct SharedArchive(Arc<Mutex<Archive>>);

impl SharedArchive {
    pub fn new(archive: Archive) -> Self {
        Self(Arc::new(Mutex::new(archive)))
    }

    fn lock(&self) -> MutexGuard<'_, Archive> {
        // A panic while holding the lock cannot leave the archive half
        // updated (every mutation is a single assignment), so poisoning is
        // safe to ignore.
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn add(&self, snap: AgentSnapshot) -> Result<AddOutcome> {
        self.lock().add(snap)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<AgentSnapshot> {
        self.lock().sample_uniform(rng)
    }

    pub fn top_m(&self, m: usize) -> Result<TopM> {
        self.lock().top_m(m)
    }

    pub fn qd_metrics(&self, offset: f64) -> QdMetrics {
        self.lock().qd_metrics(offset)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Archive {
        self.lock().clone()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::env::{SimRng, ToyConfig, ToyEnv};
    use crate::policy::PolicyConfig;
    use crate::rl::PpoConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;

    pub(crate) fn agent(seed: u64) -> AgentState {
        let env = ToyEnv::new(ToyConfig::default());
        let cfg = PolicyConfig {
            hidden: vec![4],
            ..Default::default()
        };
        AgentState::new(3, &env, &cfg, &PpoConfig::default(), &mut SimRng::seed_from_u64(seed))
    }

    pub(crate) fn snap(seed: u64, fitness: f64, bd: Option<Vec<f64>>) -> AgentSnapshot {
        AgentSnapshot::new(agent(seed), fitness, bd, Origin::RewardPhase, 0, 0)
    }

    #[test]
    fn grid_examples() {
        let mut a = Archive::new(&ArchiveKind::grid());
        let ArchiveStore::Grid(g) = &a.store else { unreachable!() };
        assert_eq!(g.cell_index(&[0.35, 0.72]).unwrap(), [3, 7]);
        assert_eq!(g.cell_index(&[1.0, 0.0]).unwrap(), [9, 0]);
        assert_eq!(g.cell_index(&[-0.5, 7.0]).unwrap(), [0, 9]);
        assert_eq!(a.add(snap(1, 5.0, Some(vec![0.35, 0.72]))).unwrap(), AddOutcome::Inserted);
        assert_eq!(a.add(snap(2, 5.0, Some(vec![0.31, 0.79]))).unwrap(), AddOutcome::Rejected);
        assert_eq!(a.add(snap(3, 6.0, Some(vec![0.31, 0.79]))).unwrap(), AddOutcome::Replaced);
        assert!(matches!(a.add(snap(4, 1.0, None)), Err(Error::MissingDescriptor)));
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn identical_offer_is_rejected() {
        for kind in [ArchiveKind::grid(), ArchiveKind::queue()] {
            let mut a = Archive::new(&kind);
            let s = snap(1, 2.0, Some(vec![0.5, 0.5]));
            assert_eq!(a.add(s.clone()).unwrap(), AddOutcome::Inserted);
            assert_eq!(a.add(s).unwrap(), AddOutcome::Rejected);
        }
    }

    #[test]
    fn metrics_examples() {
        let mut a = Archive::new(&ArchiveKind::queue());
        let m = a.qd_metrics(0.0);
        assert!(m.max_fitness.is_nan() && m.qd_score == 0.0 && m.coverage == 0);
        a.add(snap(1, 10.0, None)).unwrap();
        a.add(snap(2, 20.0, None)).unwrap();
        assert_eq!(
            a.qd_metrics(0.0),
            QdMetrics {
                max_fitness: 20.0,
                qd_score: 30.0,
                coverage: 2
            }
        );
    }

    #[test]
    fn top_m_examples() {
        let mut a = Archive::new(&ArchiveKind::queue());
        assert!(matches!(a.top_m(1), Err(Error::EmptyArchive)));
        for (i, f) in [3.0, 1.0, 2.0].into_iter().enumerate() {
            a.add(snap(i as u64, f, None)).unwrap();
        }
        let t = a.top_m(2).unwrap();
        assert_eq!(t.snapshots.iter().map(|s| s.fitness).collect::<Vec<_>>(), vec![3.0, 2.0]);
        assert!(!t.padded);
        let t = a.top_m(5).unwrap();
        assert!(t.padded);
        assert_eq!(t.snapshots.len(), 5);
        assert_eq!(t.snapshots[4].fitness, 3.0);

        let mut tie = Archive::new(&ArchiveKind::queue());
        tie.add(snap(10, 1.0, None)).unwrap();
        tie.add(snap(11, 1.0, None)).unwrap();
        assert_eq!(tie.top_m(1).unwrap().snapshots[0].seq, 0);
    }

    #[test]
    fn sampling() {
        let mut a = Archive::new(&ArchiveKind::queue());
        assert!(matches!(a.sample_uniform(&mut SimRng::seed_from_u64(0)), Err(Error::EmptyArchive)));
        a.add(snap(1, 1.0, None)).unwrap();
        assert_eq!(a.sample_uniform(&mut SimRng::seed_from_u64(0)).unwrap().fitness, 1.0);
        a.add(snap(2, 2.0, None)).unwrap();
        let mut rng = SimRng::seed_from_u64(5);
        let n = 100_000;
        let hits = (0..n).filter(|_| a.sample_uniform(&mut rng).unwrap().fitness == 1.0).count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
        let draw = |seed| {
            let mut r = SimRng::seed_from_u64(seed);
            (0..20).map(|_| a.sample_uniform(&mut r).unwrap().seq).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn queue_evicts_oldest_on_ties() {
        let mut a = Archive::new(&ArchiveKind::Queue { capacity: 2 });
        a.add(snap(1, 1.0, None)).unwrap();
        a.add(snap(2, 1.0, None)).unwrap();
        assert_eq!(a.add(snap(3, 2.0, None)).unwrap(), AddOutcome::Replaced);
        let seqs: Vec<u64> = a.entries().iter().map(|s| s.seq).collect();
        assert_eq!(seqs, vec![1, 2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn max_fitness_never_decreases(
            offers in prop::collection::vec((-50.0f64..50.0, 0.0f64..1.0, 0.0f64..1.0), 1..30),
            grid in any::<bool>(),
        ) {
            let kind = if grid { ArchiveKind::grid() } else { ArchiveKind::Queue { capacity: 3 } };
            let mut a = Archive::new(&kind);
            let mut best = f64::NEG_INFINITY;
            for (i, (f, x, y)) in offers.iter().enumerate() {
                a.add(snap(i as u64, *f, Some(vec![*x, *y]))).unwrap();
                let m = a.qd_metrics(0.0).max_fitness;
                prop_assert!(m >= best);
                best = m;
            }
        }

        #[test]
        fn queue_holds_top_fitnesses(
            fits in prop::collection::vec(-100.0f64..100.0, 1..25),
            cap in 1usize..12,
        ) {
            let mut a = Archive::new(&ArchiveKind::Queue { capacity: cap });
            for (i, f) in fits.iter().enumerate() {
                a.add(snap(i as u64, *f, None)).unwrap();
            }
            let mut held: Vec<f64> = a.entries().iter().map(|s| s.fitness).collect();
            held.sort_by(|x, y| y.total_cmp(x));
            let mut oracle = fits.clone();
            oracle.sort_by(|x, y| y.total_cmp(x));
            oracle.truncate(cap);
            prop_assert_eq!(held, oracle);
        }

        #[test]
        fn cell_index_is_total(x in -2.0f64..3.0, y in -2.0f64..3.0) {
            let g = MapElitesGrid::new([10, 10], [[0.0, 1.0], [0.0, 1.0]]);
            let c = g.cell_index(&[x, y]).unwrap();
            prop_assert!(c[0] < 10 && c[1] < 10);
        }
    }

    #[test]
    fn shared_archive_hands_out_copies() {
        let shared = SharedArchive::new(Archive::new(&ArchiveKind::queue()));
        let s = shared.clone();
        std::thread::scope(|scope| {
            for i in 0..4u64 {
                let s = s.clone();
                scope.spawn(move || s.add(snap(i, i as f64, None)).unwrap());
            }
        });
        assert_eq!(shared.len(), 4);
        let mut top = shared.top_m(1).unwrap().snapshots.remove(0);
        top.fitness = -1.0;
        assert_eq!(shared.qd_metrics(0.0).max_fitness, 3.0);
    }
}
