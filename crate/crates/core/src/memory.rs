//! Static memory planning for intermediate tensors.
//!
//! Every intermediate tensor gets a byte offset inside one shared arena. Two
//! tensors may share bytes only when their lifetimes `[first_use, last_use]`
//! (inclusive execution steps) do not intersect. Offsets are assigned with the
//! greedy-by-size heuristic: largest tensors first, each at the lowest aligned
//! offset that does not collide with an already placed, time-overlapping one.

use std::cmp::Reverse;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphIR, TensorRole};

pub const DEFAULT_ALIGNMENT: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("execution order is not topological: node `{node}` consumes `{tensor}` before it is produced")]
    InvalidOrder { node: String, tensor: String },
    #[error("execution order lists {got} nodes, graph has {expected}")]
    IncompleteOrder { expected: usize, got: usize },
    #[error("alignment {0} is not a power of two")]
    BadAlignment(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UsageRecord {
    pub id: String,
    pub size: usize,
    pub first_use: usize,
    pub last_use: usize,
}

impl UsageRecord {
    pub fn new(id: impl Into<String>, size: usize, first_use: usize, last_use: usize) -> Self {
        assert!(size > 0, "usage record size must be positive");
        assert!(first_use <= last_use, "first_use must not exceed last_use");
        UsageRecord {
            id: id.into(),
            size,
            first_use,
            last_use,
        }
    }

    pub fn overlaps_in_time(&self, other: &UsageRecord) -> bool {
        self.first_use <= other.last_use && other.first_use <= self.last_use
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryPlan {
    pub alignment: usize,
    pub offsets: BTreeMap<String, usize>,
    pub arena_size: usize,
}

impl MemoryPlan {
    pub fn offset(&self, id: &str) -> Option<usize> {
        self.offsets.get(id).copied()
    }
}

pub fn align_up(size: usize, alignment: usize) -> usize {
    size.div_ceil(alignment) * alignment
}

fn check_alignment(alignment: usize) -> Result<(), PlanError> {
    if alignment == 0 || !alignment.is_power_of_two() {
        return Err(PlanError::BadAlignment(alignment));
    }
    Ok(())
}

pub fn plan_greedy_by_size(records: &[UsageRecord], alignment: usize) -> Result<MemoryPlan, PlanError> {
    check_alignment(alignment)?;
    let mut order: Vec<&UsageRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        (Reverse(a.size), a.first_use, &a.id).cmp(&(Reverse(b.size), b.first_use, &b.id))
    });

    let mut placed: Vec<(&UsageRecord, usize)> = Vec::with_capacity(records.len());
    let mut offsets = BTreeMap::new();
    let mut arena_size = 0;
    for rec in order {
        let size = align_up(rec.size, alignment);
        let mut busy: Vec<(usize, usize)> = placed
            .iter()
            .filter(|(other, _)| other.overlaps_in_time(rec))
            .map(|(other, off)| (*off, off + align_up(other.size, alignment)))
            .collect();
        busy.sort_unstable();
        let mut offset = 0;
        for (start, end) in busy {
            if offset + size <= start {
                break;
            }
            offset = offset.max(align_up(end, alignment));
        }
        arena_size = arena_size.max(offset + size);
        offsets.insert(rec.id.clone(), offset);
        placed.push((rec, offset));
    }
    Ok(MemoryPlan {
        alignment,
        offsets,
        arena_size,
    })
}

/// Footprint when every tensor gets its own allocation.
pub fn naive_footprint(records: &[UsageRecord], alignment: usize) -> usize {
    records.iter().map(|r| align_up(r.size, alignment)).sum()
}

/// Peak of simultaneously live bytes; no plan can use less.
pub fn lower_bound(records: &[UsageRecord], alignment: usize) -> usize {
    let mut events: Vec<usize> = records.iter().map(|r| r.first_use).collect();
    events.sort_unstable();
    events.dedup();
    events
        .into_iter()
        .map(|step| {
            records
                .iter()
                .filter(|r| r.first_use <= step && step <= r.last_use)
                .map(|r| align_up(r.size, alignment))
                .sum()
        })
        .max()
        .unwrap_or(0)
}

pub fn savings_ratio(arena: usize, naive: usize) -> f64 {
    if naive == 0 {
        0.0
    } else {
        1.0 - arena as f64 / naive as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Overlap { a: String, b: String },
    Misaligned { id: String, offset: usize },
    Missing { id: String },
    ExceedsArena { id: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Overlap { a, b } => write!(f, "`{a}` and `{b}` overlap in time and bytes"),
            Violation::Misaligned { id, offset } => write!(f, "`{id}` offset {offset} is misaligned"),
            Violation::Missing { id } => write!(f, "`{id}` has no offset"),
            Violation::ExceedsArena { id } => write!(f, "`{id}` extends past the arena end"),
        }
    }
}

pub fn validate_plan(plan: &MemoryPlan, records: &[UsageRecord]) -> Vec<Violation> {
    let mut out = Vec::new();
    let align = plan.alignment.max(1);
    let mut ranges = Vec::with_capacity(records.len());
    for r in records {
        match plan.offset(&r.id) {
            None => out.push(Violation::Missing { id: r.id.clone() }),
            Some(off) => {
                if off % align != 0 {
                    out.push(Violation::Misaligned {
                        id: r.id.clone(),
                        offset: off,
                    });
                }
                if off + r.size > plan.arena_size {
                    out.push(Violation::ExceedsArena { id: r.id.clone() });
                }
                ranges.push((r, off));
            }
        }
    }
    for (i, (a, ao)) in ranges.iter().enumerate() {
        for (b, bo) in &ranges[i + 1..] {
            if a.overlaps_in_time(b) && *ao < bo + b.size && *bo < ao + a.size {
                out.push(Violation::Overlap {
                    a: a.id.clone(),
                    b: b.id.clone(),
                });
            }
        }
    }
    out
}

/// Serialized plan: arena size, per-tensor placement and lifetimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub alignment: usize,
    pub arena: usize,
    pub naive: usize,
    pub savings: f64,
    pub tensors: Vec<PlannedTensor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedTensor {
    pub id: String,
    pub offset: usize,
    pub size: usize,
    pub first_use: usize,
    pub last_use: usize,
}

impl PlanFile {
    pub fn new(plan: &MemoryPlan, records: &[UsageRecord]) -> Self {
        let naive = naive_footprint(records, plan.alignment);
        let mut tensors: Vec<PlannedTensor> = records
            .iter()
            .map(|r| PlannedTensor {
                id: r.id.clone(),
                offset: plan.offset(&r.id).unwrap_or(0),
                size: r.size,
                first_use: r.first_use,
                last_use: r.last_use,
            })
            .collect();
        tensors.sort_by(|a, b| (a.offset, &a.id).cmp(&(b.offset, &b.id)));
        PlanFile {
            alignment: plan.alignment,
            arena: plan.arena_size,
            naive,
            savings: savings_ratio(plan.arena_size, naive),
            tensors,
        }
    }

    /// Splits back into a plan and its usage records for re-validation.
    pub fn to_parts(&self) -> (MemoryPlan, Vec<UsageRecord>) {
        let plan = MemoryPlan {
            alignment: self.alignment,
            offsets: self.tensors.iter().map(|t| (t.id.clone(), t.offset)).collect(),
            arena_size: self.arena,
        };
        let records = self
            .tensors
            .iter()
            .map(|t| UsageRecord {
                id: t.id.clone(),
                size: t.size,
                first_use: t.first_use,
                last_use: t.last_use,
            })
            .collect();
        (plan, records)
    }

    /// One-line summary, e.g. `arena=88 naive=120 savings=26.7%`.
    pub fn summary(&self) -> String {
        format!("arena={} naive={} savings={:.1}%", self.arena, self.naive, self.savings * 100.0)
    }
}

/// Lifetimes of intermediate tensors for a given execution order.
///
/// Graph inputs, outputs and weights are excluded. A tensor nobody consumes
/// lives only during its producing step.
pub fn collect_usage(graph: &GraphIR, order: &[usize]) -> Result<Vec<UsageRecord>, PlanError> {
    if order.len() != graph.nodes.len() {
        return Err(PlanError::IncompleteOrder {
            expected: graph.nodes.len(),
            got: order.len(),
        });
    }
    let mut produced_at: HashMap<&str, usize> = HashMap::new();
    let mut last_use: HashMap<&str, usize> = HashMap::new();
    for (step, &ni) in order.iter().enumerate() {
        let node = &graph.nodes[ni];
        for input in node.all_inputs() {
            let info = graph.tensor(input);
            let external = info.is_none_or(|t| t.role != TensorRole::Intermediate && t.role != TensorRole::Output);
            if external {
                continue;
            }
            if !produced_at.contains_key(input) {
                return Err(PlanError::InvalidOrder {
                    node: node.id.clone(),
                    tensor: input.to_string(),
                });
            }
            last_use.insert(input, step);
        }
        for out in &node.outputs {
            produced_at.insert(out, step);
        }
    }
    let mut records = Vec::new();
    for t in &graph.tensors {
        if t.role != TensorRole::Intermediate {
            continue;
        }
        if let Some(&first) = produced_at.get(t.id.as_str()) {
            let last = last_use.get(t.id.as_str()).copied().unwrap_or(first).max(first);
            records.push(UsageRecord::new(
                t.id.clone(),
                t.dtype.storage_bytes(t.shape.element_count()).max(1),
                first,
                last,
            ));
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<UsageRecord> {
        vec![
            UsageRecord::new("A", 32, 0, 1),
            UsageRecord::new("B", 16, 1, 2),
            UsageRecord::new("C", 64, 2, 3),
            UsageRecord::new("D", 8, 0, 3),
        ]
    }

    #[test]
    fn four_record_trace() {
        let r = fixture();
        let plan = plan_greedy_by_size(&r, 1).unwrap();
        assert_eq!(plan.offset("C"), Some(0));
        assert_eq!(plan.offset("A"), Some(0));
        assert_eq!(plan.offset("B"), Some(64));
        assert_eq!(plan.offset("D"), Some(80));
        assert_eq!(plan.arena_size, 88);
        assert_eq!(naive_footprint(&r, 1), 120);
        assert!(validate_plan(&plan, &r).is_empty());
    }

    #[test]
    fn disjoint_lifetimes_share_offset_zero() {
        let r = vec![UsageRecord::new("x", 100, 0, 0), UsageRecord::new("y", 40, 1, 1)];
        let plan = plan_greedy_by_size(&r, 64).unwrap();
        assert_eq!(plan.offset("x"), Some(0));
        assert_eq!(plan.offset("y"), Some(0));
        assert_eq!(plan.arena_size, 128);
    }

    #[test]
    fn all_alive_is_aligned_sum() {
        let r: Vec<_> = (0..5).map(|i| UsageRecord::new(format!("t{i}"), 10 + i * 7, 0, 4)).collect();
        let plan = plan_greedy_by_size(&r, 16).unwrap();
        assert_eq!(plan.arena_size, naive_footprint(&r, 16));
    }

    #[test]
    fn naive_examples() {
        assert_eq!(naive_footprint(&[], 1), 0);
        assert_eq!(naive_footprint(&[UsageRecord::new("a", 7, 0, 0)], 4), 8);
    }

    #[test]
    fn corrupted_offset_reports_the_pair() {
        let r = fixture();
        let mut plan = plan_greedy_by_size(&r, 1).unwrap();
        plan.offsets.insert("B".into(), 70);
        let v = validate_plan(&plan, &r);
        assert_eq!(
            v,
            vec![Violation::Overlap {
                a: "B".into(),
                b: "D".into()
            }]
        );
    }

    #[test]
    fn misaligned_offset_is_reported() {
        let r = vec![UsageRecord::new("a", 8, 0, 0)];
        let plan = MemoryPlan {
            alignment: 4,
            offsets: [("a".to_string(), 2)].into(),
            arena_size: 16,
        };
        assert_eq!(
            validate_plan(&plan, &r),
            vec![Violation::Misaligned {
                id: "a".into(),
                offset: 2
            }]
        );
    }

    #[test]
    fn bad_alignment() {
        assert_eq!(plan_greedy_by_size(&fixture(), 3), Err(PlanError::BadAlignment(3)));
    }

    #[test]
    fn deterministic() {
        let r = fixture();
        assert_eq!(plan_greedy_by_size(&r, 8).unwrap(), plan_greedy_by_size(&r, 8).unwrap());
    }

    #[test]
    fn lower_bound_of_fixture() {
        // Step 2 holds B, C and D alive.
        assert_eq!(lower_bound(&fixture(), 1), 88);
    }
}
