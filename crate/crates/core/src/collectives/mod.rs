//! Simulated data-parallel runtime.
//!
//! A [`WorkerGroup`] runs `J` worker contexts that synchronize exclusively
//! through named collectives (all-reduce, reduce-scatter, all-gather,
//! barrier). Reduction is always applied in ascending rank order, regardless
//! of arrival order, so floating-point results are reproducible and the
//! replicated-vs-sharded comparison is a bit-level test.

mod sharding;

pub use sharding::{make_even_shards, ParamShard, ShardLayout};

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};

use crate::vector::ParamVector;

/// A worker's minibatch gradient plus its sample count.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub gradient: ParamVector,
    pub sample_count: usize,
    pub worker_rank: usize,
}

/// Reduction applied by [`GroupHandle::all_reduce`] and
/// [`GroupHandle::reduce_scatter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// How the group's worker bodies are driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// One OS thread per rank.
    #[default]
    Threaded,
    /// Same thread pool, but only one rank executes at a time; ranks hand
    /// off in round-robin order at collective entry points.
    Serialized,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GroupError {
    #[error("worker {rank} aborted in {collective}: {message}")]
    Abort {
        rank: usize,
        collective: &'static str,
        message: String,
    },
    #[error("collective sequence mismatch at rank {rank}: expected {expected}, got {got}")]
    SequenceMismatch {
        rank: usize,
        expected: &'static str,
        got: &'static str,
    },
    #[error("worker {rank} panicked")]
    WorkerPanic { rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Barrier,
    AllReduce,
    ReduceScatter,
    AllGather,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Barrier => "barrier",
            Kind::AllReduce => "all_reduce",
            Kind::ReduceScatter => "reduce_scatter",
            Kind::AllGather => "all_gather",
        }
    }
}

/// One rendezvous point: all ranks deposit, the last arrival reduces in
/// ascending rank order, everyone reads its output slot.
struct Point {
    kind: Kind,
    contributions: Vec<Option<Vec<f64>>>,
    params: Option<PointParams>,
    arrived: usize,
    outputs: Option<Vec<Option<Vec<f64>>>>,
    taken: usize,
}

#[derive(Clone, PartialEq)]
struct PointParams {
    op: Option<ReduceOp>,
    layout: Option<ShardLayout>,
}

struct EngineState {
    points: HashMap<u64, Point>,
    abort: Option<GroupError>,
    turn: usize,
}

struct Shared {
    size: usize,
    mode: ExecMode,
    state: Mutex<EngineState>,
    cv: Condvar,
}

/// Per-rank handle passed to the worker body; all collectives go through it.
pub struct GroupHandle {
    rank: usize,
    op_index: std::cell::Cell<u64>,
    shared: Arc<Shared>,
}

/// Factory for running groups of workers.
pub struct WorkerGroup;

impl WorkerGroup {
    /// Runs `size` worker contexts to completion and returns their results
    /// indexed by rank. Any worker failure aborts the whole group.
    pub fn spawn<T, F>(size: usize, mode: ExecMode, body: F) -> Result<Vec<T>, GroupError>
    where
        T: Send,
        F: Fn(usize, &GroupHandle) -> Result<T, GroupError> + Sync,
    {
        assert!(size >= 1, "worker group needs at least one rank");
        let shared = Arc::new(Shared {
            size,
            mode,
            state: Mutex::new(EngineState {
                points: HashMap::new(),
                abort: None,
                turn: 0,
            }),
            cv: Condvar::new(),
        });

        if size == 1 {
            let handle = GroupHandle {
                rank: 0,
                op_index: std::cell::Cell::new(0),
                shared,
            };
            return body(0, &handle).map(|t| vec![t]);
        }

        let results: Vec<Result<Result<T, GroupError>, Box<dyn std::any::Any + Send>>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..size)
                    .map(|rank| {
                        let shared = Arc::clone(&shared);
                        let body = &body;
                        scope.spawn(move || {
                            let handle = GroupHandle {
                                rank,
                                op_index: std::cell::Cell::new(0),
                                shared,
                            };
                            let out = body(rank, &handle);
                            if out.is_err() {
                                handle.poison(out.as_ref().err().unwrap().clone());
                            }
                            out
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join()).collect()
            });

        let mut out = Vec::with_capacity(size);
        for (rank, r) in results.into_iter().enumerate() {
            match r {
                Ok(Ok(t)) => out.push(t),
                Ok(Err(e)) => return Err(e),
                Err(_) => return Err(GroupError::WorkerPanic { rank }),
            }
        }
        Ok(out)
    }
}

impl GroupHandle {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.shared.size
    }

    /// Marks the group aborted and wakes every waiter.
    fn poison(&self, err: GroupError) {
        let mut state = self.shared.state.lock().unwrap();
        if state.abort.is_none() {
            state.abort = Some(err);
        }
        self.shared.cv.notify_all();
    }

    fn abort(&self, collective: &'static str, message: String) -> GroupError {
        let err = GroupError::Abort {
            rank: self.rank,
            collective,
            message,
        };
        self.poison(err.clone());
        err
    }

    /// Core rendezvous: deposit a payload, wait for all ranks, read back this
    /// rank's output. The last arrival reduces in ascending rank order.
    fn rendezvous(
        &self,
        kind: Kind,
        payload: Vec<f64>,
        params: PointParams,
    ) -> Result<Vec<f64>, GroupError> {
        let idx = self.op_index.get();
        self.op_index.set(idx + 1);
        let size = self.shared.size;

        let mut state = self.shared.state.lock().unwrap();

        if self.shared.mode == ExecMode::Serialized {
            while state.abort.is_none() && state.turn != self.rank {
                state = self.shared.cv.wait(state).unwrap();
            }
            state.turn = (state.turn + 1) % size;
            // Hand execution to the next rank waiting at its gate.
            self.shared.cv.notify_all();
        }

        if let Some(err) = &state.abort {
            return Err(err.clone());
        }

        let point = state.points.entry(idx).or_insert_with(|| Point {
            kind,
            contributions: vec![None; size],
            params: Some(params.clone()),
            arrived: 0,
            outputs: None,
            taken: 0,
        });

        if point.kind != kind || point.params.as_ref() != Some(&params) {
            let err = GroupError::SequenceMismatch {
                rank: self.rank,
                expected: point.kind.name(),
                got: kind.name(),
            };
            state.abort = Some(err.clone());
            self.shared.cv.notify_all();
            return Err(err);
        }

        point.contributions[self.rank] = Some(payload);
        point.arrived += 1;

        if point.arrived == size {
            let contributions: Vec<Vec<f64>> = point
                .contributions
                .iter_mut()
                .map(|c| c.take().unwrap())
                .collect();
            match reduce_point(kind, &contributions, &params, size) {
                Ok(outputs) => {
                    point.outputs = Some(outputs.into_iter().map(Some).collect());
                }
                Err(msg) => {
                    let err = GroupError::Abort {
                        rank: self.rank,
                        collective: kind.name(),
                        message: msg,
                    };
                    state.abort = Some(err.clone());
                    self.shared.cv.notify_all();
                    return Err(err);
                }
            }
            self.shared.cv.notify_all();
        } else {
            loop {
                if let Some(err) = &state.abort {
                    return Err(err.clone());
                }
                if state
                    .points
                    .get(&idx)
                    .map(|p| p.outputs.is_some())
                    .unwrap_or(false)
                {
                    break;
                }
                state = self.shared.cv.wait(state).unwrap();
            }
        }

        let point = state.points.get_mut(&idx).unwrap();
        let out = point.outputs.as_mut().unwrap()[self.rank].take().unwrap();
        point.taken += 1;
        if point.taken == size {
            state.points.remove(&idx);
        }
        Ok(out)
    }

    /// Blocks until every rank has reached this point.
    pub fn barrier(&self) -> Result<(), GroupError> {
        self.rendezvous(
            Kind::Barrier,
            Vec::new(),
            PointParams { op: None, layout: None },
        )
        .map(|_| ())
    }

    /// Reduces equal-dimension vectors across all ranks; every rank receives
    /// the identical result.
    pub fn all_reduce(&self, local: &ParamVector, op: ReduceOp) -> Result<ParamVector, GroupError> {
        self.rendezvous(
            Kind::AllReduce,
            local.as_slice().to_vec(),
            PointParams { op: Some(op), layout: None },
        )
        .map(ParamVector::new)
    }

    /// Rank `j` receives the reduction of the coordinates in its shard.
    pub fn reduce_scatter(
        &self,
        local: &ParamVector,
        layout: &ShardLayout,
        op: ReduceOp,
    ) -> Result<ParamVector, GroupError> {
        if layout.shard_count() != self.shared.size {
            return Err(self.abort(
                "reduce_scatter",
                format!(
                    "layout has {} shards for {} ranks",
                    layout.shard_count(),
                    self.shared.size
                ),
            ));
        }
        self.rendezvous(
            Kind::ReduceScatter,
            local.as_slice().to_vec(),
            PointParams { op: Some(op), layout: Some(layout.clone()) },
        )
        .map(ParamVector::new)
    }

    /// Concatenates per-rank shard contents; every rank receives the full
    /// vector ordered by coordinate range.
    pub fn all_gather(
        &self,
        local_shard: &ParamVector,
        layout: &ShardLayout,
    ) -> Result<ParamVector, GroupError> {
        if layout.shard_count() != self.shared.size {
            return Err(self.abort(
                "all_gather",
                format!(
                    "layout has {} shards for {} ranks",
                    layout.shard_count(),
                    self.shared.size
                ),
            ));
        }
        self.rendezvous(
            Kind::AllGather,
            local_shard.as_slice().to_vec(),
            PointParams { op: None, layout: Some(layout.clone()) },
        )
        .map(ParamVector::new)
    }
}

/// Applies the reduction for a completed point. Reduction order is always
/// ascending rank: acc = c[0]; acc += c[1]; ...
fn reduce_point(
    kind: Kind,
    contributions: &[Vec<f64>],
    params: &PointParams,
    size: usize,
) -> Result<Vec<Vec<f64>>, String> {
    match kind {
        Kind::Barrier => Ok(vec![Vec::new(); size]),
        Kind::AllReduce => {
            let reduced = reduce_in_rank_order(contributions, params.op.unwrap())?;
            Ok(vec![reduced; size])
        }
        Kind::ReduceScatter => {
            let layout = params.layout.as_ref().unwrap();
            let reduced = reduce_in_rank_order(contributions, params.op.unwrap())?;
            if reduced.len() != layout.dim() {
                return Err(format!(
                    "vector dimension {} does not match layout dimension {}",
                    reduced.len(),
                    layout.dim()
                ));
            }
            Ok(layout
                .ranges()
                .iter()
                .map(|r| reduced[r.clone()].to_vec())
                .collect())
        }
        Kind::AllGather => {
            let layout = params.layout.as_ref().unwrap();
            let mut full = vec![0.0; layout.dim()];
            for (rank, (shard, range)) in
                contributions.iter().zip(layout.ranges()).enumerate()
            {
                if shard.len() != range.len() {
                    return Err(format!(
                        "rank {rank} holds {} coordinates but its shard spans {}",
                        shard.len(),
                        range.len()
                    ));
                }
                full[range.clone()].copy_from_slice(shard);
            }
            Ok(vec![full; size])
        }
    }
}

fn reduce_in_rank_order(contributions: &[Vec<f64>], op: ReduceOp) -> Result<Vec<f64>, String> {
    let dim = contributions[0].len();
    for (rank, c) in contributions.iter().enumerate() {
        if c.len() != dim {
            return Err(format!(
                "dimension mismatch across ranks: rank 0 has {dim}, rank {rank} has {}",
                c.len()
            ));
        }
    }
    let mut acc = contributions[0].clone();
    for c in &contributions[1..] {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    if op == ReduceOp::Mean {
        let inv = 1.0 / contributions.len() as f64;
        for a in &mut acc {
            *a *= inv;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(xs: &[f64]) -> ParamVector {
        ParamVector::new(xs.to_vec())
    }

    #[test]
    fn spawn_returns_results_by_rank() {
        let out = WorkerGroup::spawn(1, ExecMode::Threaded, |rank, _| Ok(rank)).unwrap();
        assert_eq!(out, vec![0]);
        let out = WorkerGroup::spawn(4, ExecMode::Threaded, |rank, _| Ok(rank)).unwrap();
        assert_eq!(out, vec![0, 1, 2, 3]);
    }

    #[test]
    fn barrier_is_live() {
        let out = WorkerGroup::spawn(2, ExecMode::Threaded, |_, g| {
            g.barrier()?;
            Ok(1)
        })
        .unwrap();
        assert_eq!(out, vec![1, 1]);
    }

    #[test]
    fn all_reduce_examples() {
        let out = WorkerGroup::spawn(2, ExecMode::Threaded, |_, g| {
            g.all_reduce(&pv(&[1.0, 1.0]), ReduceOp::Mean)
        })
        .unwrap();
        assert_eq!(out[0], pv(&[1.0, 1.0]));
        assert_eq!(out[1], pv(&[1.0, 1.0]));

        let out = WorkerGroup::spawn(2, ExecMode::Threaded, |rank, g| {
            let local = if rank == 0 { pv(&[1.0, 2.0]) } else { pv(&[3.0, 4.0]) };
            g.all_reduce(&local, ReduceOp::Mean)
        })
        .unwrap();
        assert_eq!(out[0], pv(&[2.0, 3.0]));
        assert_eq!(out[1], pv(&[2.0, 3.0]));

        let out = WorkerGroup::spawn(3, ExecMode::Threaded, |rank, g| {
            g.all_reduce(&pv(&[(rank + 1) as f64]), ReduceOp::Sum)
        })
        .unwrap();
        assert!(out.iter().all(|v| *v == pv(&[6.0])));
    }

    #[test]
    fn all_reduce_dimension_mismatch_aborts_group() {
        let err = WorkerGroup::spawn(2, ExecMode::Threaded, |rank, g| {
            let local = if rank == 0 { pv(&[1.0]) } else { pv(&[1.0, 2.0]) };
            g.all_reduce(&local, ReduceOp::Sum)
        })
        .unwrap_err();
        assert!(matches!(err, GroupError::Abort { collective: "all_reduce", .. }));
    }

    #[test]
    fn reduce_scatter_examples() {
        let layout = make_even_shards(2, 2).unwrap();
        let out = WorkerGroup::spawn(2, ExecMode::Threaded, |rank, g| {
            let local = if rank == 0 { pv(&[1.0, 2.0]) } else { pv(&[3.0, 4.0]) };
            g.reduce_scatter(&local, &layout, ReduceOp::Mean)
        })
        .unwrap();
        assert_eq!(out[0], pv(&[2.0]));
        assert_eq!(out[1], pv(&[3.0]));

        let layout1 = make_even_shards(3, 1).unwrap();
        let out = WorkerGroup::spawn(1, ExecMode::Threaded, |_, g| {
            g.reduce_scatter(&pv(&[1.0, 2.0, 3.0]), &layout1, ReduceOp::Mean)
        })
        .unwrap();
        assert_eq!(out[0], pv(&[1.0, 2.0, 3.0]));

        let out = WorkerGroup::spawn(2, ExecMode::Threaded, |_, g| {
            g.reduce_scatter(&pv(&[0.0, 0.0]), &layout, ReduceOp::Sum)
        })
        .unwrap();
        assert_eq!(out[0], pv(&[0.0]));
        assert_eq!(out[1], pv(&[0.0]));
    }

    #[test]
    fn all_gather_concatenates() {
        let layout = make_even_shards(2, 2).unwrap();
        let out = WorkerGroup::spawn(2, ExecMode::Threaded, |rank, g| {
            let shard = if rank == 0 { pv(&[2.0]) } else { pv(&[3.0]) };
            g.all_gather(&shard, &layout)
        })
        .unwrap();
        assert_eq!(out[0], pv(&[2.0, 3.0]));
        assert_eq!(out[1], pv(&[2.0, 3.0]));
    }

    #[test]
    fn scatter_then_gather_of_identical_vectors_round_trips() {
        let v = pv(&[1.5, -2.0, 0.25, 8.0]);
        let layout = make_even_shards(4, 2).unwrap();
        let out = WorkerGroup::spawn(2, ExecMode::Threaded, |_, g| {
            let shard = g.reduce_scatter(&v, &layout, ReduceOp::Mean)?;
            g.all_gather(&shard, &layout)
        })
        .unwrap();
        assert_eq!(out[0], v);
        assert_eq!(out[1], v);
    }

    #[test]
    fn gather_scatter_equals_all_reduce_bitwise() {
        for j in [1usize, 2, 4, 8] {
            let d = 16;
            let layout = make_even_shards(d, j).unwrap();
            let inputs: Vec<ParamVector> = (0..j)
                .map(|r| {
                    ParamVector::new(
                        (0..d).map(|i| ((r * d + i) as f64).sin() * 3.7 - 1.1).collect(),
                    )
                })
                .collect();
            let fused = WorkerGroup::spawn(j, ExecMode::Threaded, |rank, g| {
                g.all_reduce(&inputs[rank], ReduceOp::Mean)
            })
            .unwrap();
            let staged = WorkerGroup::spawn(j, ExecMode::Threaded, |rank, g| {
                let shard = g.reduce_scatter(&inputs[rank], &layout, ReduceOp::Mean)?;
                g.all_gather(&shard, &layout)
            })
            .unwrap();
            for (a, b) in fused.iter().zip(&staged) {
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn all_reduce_mean_matches_sequential_rank_order_bitwise() {
        for j in [1usize, 2, 4, 8] {
            let inputs: Vec<ParamVector> = (0..j)
                .map(|r| pv(&[(r as f64 + 0.3).exp(), 1.0 / (r as f64 + 2.0)]))
                .collect();
            let out = WorkerGroup::spawn(j, ExecMode::Threaded, |rank, g| {
                g.all_reduce(&inputs[rank], ReduceOp::Mean)
            })
            .unwrap();
            let mut acc = inputs[0].clone();
            for v in &inputs[1..] {
                acc.axpy(1.0, v).unwrap();
            }
            let acc = acc.scale(1.0 / j as f64);
            for (x, y) in out[0].as_slice().iter().zip(acc.as_slice()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn injected_delays_never_change_results() {
        use std::time::Duration;
        let inputs: Vec<ParamVector> =
            (0..4).map(|r| pv(&[0.1 * r as f64 + 0.7, -1.3 * r as f64])).collect();
        let baseline = WorkerGroup::spawn(4, ExecMode::Threaded, |rank, g| {
            g.all_reduce(&inputs[rank], ReduceOp::Mean)
        })
        .unwrap();
        for trial in 0..4u64 {
            let delayed = WorkerGroup::spawn(4, ExecMode::Threaded, |rank, g| {
                let ms = (rank as u64 * 7 + trial * 3) % 11;
                std::thread::sleep(Duration::from_millis(ms));
                g.all_reduce(&inputs[rank], ReduceOp::Mean)
            })
            .unwrap();
            for (a, b) in baseline.iter().zip(&delayed) {
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn serialized_mode_matches_threaded_mode() {
        let inputs: Vec<ParamVector> =
            (0..3).map(|r| pv(&[r as f64 * 1.7 - 0.4, (r as f64).cos()])).collect();
        let run = |mode| {
            WorkerGroup::spawn(3, mode, |rank, g| {
                let s = g.all_reduce(&inputs[rank], ReduceOp::Sum)?;
                g.barrier()?;
                g.all_reduce(&s, ReduceOp::Mean)
            })
            .unwrap()
        };
        let a = run(ExecMode::Threaded);
        let b = run(ExecMode::Serialized);
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.as_slice().iter().zip(y.as_slice()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn worker_error_names_the_failing_rank() {
        let err = WorkerGroup::spawn(3, ExecMode::Threaded, |rank, g| {
            if rank == 1 {
                return Err(g.abort("all_reduce", "simulated failure".into()));
            }
            g.all_reduce(&pv(&[1.0]), ReduceOp::Sum)
        })
        .unwrap_err();
        match err {
            GroupError::Abort { rank, .. } => assert_eq!(rank, 1),
            other => panic!("unexpected error: {other}"),
        }
    }
}
