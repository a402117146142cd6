//! Pairs a corrupted pointer with gadgets whose residue lands where the
//! pointer lives: same call depth on the stack, or same chunk class and
//! word offset on the heap.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{Gadget, GadgetDb, Placement};
use crate::machine::{DerefKind, Note, Region};
use crate::scenario::{EntryKind, InterpError, Scenario, Trace, VulnKind, MAX_ARRAY_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeapLayout {
    pub size: u64,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedPointerMeta {
    pub region: Region,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stack_depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heap_layout: Option<HeapLayout>,
    pub deref: DerefKind,
    pub vuln_kind: VulnKind,
    /// Address of the corrupted word in the run it was extracted from.
    pub address: u64,
}

impl CorruptedPointerMeta {
    pub fn stack(depth: usize, deref: DerefKind, vuln_kind: VulnKind) -> Self {
        CorruptedPointerMeta {
            region: Region::Stack,
            stack_depth: Some(depth),
            heap_layout: None,
            deref,
            vuln_kind,
            address: 0,
        }
    }

    pub fn heap(size: u64, offset: u64, deref: DerefKind, vuln_kind: VulnKind) -> Self {
        CorruptedPointerMeta {
            region: Region::Heap,
            stack_depth: None,
            heap_layout: Some(HeapLayout { size, offset }),
            deref,
            vuln_kind,
            address: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatchError {
    #[error("trace contains no corrupt event")]
    NoCorruption,
    #[error("scenario declares no vulnerability")]
    NoVuln,
    #[error("corrupted address {0:#x} is neither in the host stack nor in a heap chunk")]
    UnknownRegion(u64),
    #[error(transparent)]
    Interp(#[from] InterpError),
}

/// Reads the corrupted pointer's location from the first corruption
/// report of a PoC run. Reports from a declared vulnerability site take
/// precedence over allocator-detected ones.
pub fn extract_pointer_meta(trace: &Trace, s: &Scenario) -> Result<CorruptedPointerMeta, MatchError> {
    let vuln = s.vulns.first().ok_or(MatchError::NoVuln)?;
    let event = trace
        .corrupt_events()
        .find(|e| e.note == Note::VulnSite)
        .or_else(|| trace.corrupt_events().next())
        .ok_or(MatchError::NoCorruption)?;
    let l = &trace.layout;
    let mut meta = if l.in_stack(event.address) {
        CorruptedPointerMeta::stack(event.depth as usize, vuln.deref, vuln.kind)
    } else if event.size > 0 && (l.in_heap(event.address) || l.in_guest(event.address)) {
        CorruptedPointerMeta::heap(event.size, event.detail, vuln.deref, vuln.kind)
    } else {
        return Err(MatchError::UnknownRegion(event.address));
    };
    meta.address = event.address;
    Ok(meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ElasticParams {
    pub n: u64,
    pub k: u64,
}

/// Solves `elem_size * n = size` and `field_offset + elem_size * k = offset`
/// with `k < n`.
pub fn solve_elastic(elem_size: u64, field_offset: u64, layout: HeapLayout) -> Option<ElasticParams> {
    if elem_size == 0 || !layout.size.is_multiple_of(elem_size) {
        return None;
    }
    let n = layout.size / elem_size;
    let rel = layout.offset.checked_sub(field_offset)?;
    if n == 0 || n > MAX_ARRAY_COUNT || rel % elem_size != 0 {
        return None;
    }
    let k = rel / elem_size;
    (k < n).then_some(ElasticParams { n, k })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GadgetMatch {
    pub gadget_id: String,
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub params: Option<ElasticParams>,
}

pub fn match_stack<'a>(db: &'a GadgetDb, meta: &CorruptedPointerMeta) -> Vec<&'a Gadget> {
    let Some(depth) = meta.stack_depth.filter(|_| meta.region == Region::Stack) else {
        return Vec::new();
    };
    db.gadgets
        .iter()
        .filter(|g| g.depth == depth && matches!(g.placement, Placement::Stack { .. }))
        .collect()
}

pub fn heap_params(g: &Gadget, layout: HeapLayout) -> Option<Option<ElasticParams>> {
    match g.placement {
        Placement::Heap { size, offset, .. } => (size == layout.size && offset == layout.offset).then_some(None),
        Placement::Elastic {
            elem_size,
            field_offset,
            ..
        } => solve_elastic(elem_size, field_offset, layout).map(Some),
        Placement::Stack { .. } => None,
    }
}

pub fn match_heap<'a>(db: &'a GadgetDb, meta: &CorruptedPointerMeta) -> Vec<(&'a Gadget, Option<ElasticParams>)> {
    let Some(layout) = meta.heap_layout.filter(|_| meta.region == Region::Heap) else {
        return Vec::new();
    };
    db.gadgets
        .iter()
        .filter_map(|g| heap_params(g, layout).map(|p| (g, p)))
        .collect()
}

fn rank_key(g: &Gadget) -> (usize, u8, String, &str) {
    let trigger = match g.trigger {
        EntryKind::Mmio => 0,
        EntryKind::TimerBh => 1,
    };
    (g.path.len(), trigger, g.site.to_string(), g.id.as_str())
}

/// Matches ranked by path length, then MMIO before timer, then site id.
pub fn match_gadgets(db: &GadgetDb, meta: &CorruptedPointerMeta) -> Vec<GadgetMatch> {
    let mut found: Vec<(&Gadget, Option<ElasticParams>)> = match meta.region {
        Region::Stack => match_stack(db, meta).into_iter().map(|g| (g, None)).collect(),
        Region::Heap => match_heap(db, meta),
    };
    found.sort_by(|a, b| rank_key(a.0).cmp(&rank_key(b.0)));
    found
        .into_iter()
        .enumerate()
        .map(|(rank, (g, params))| GadgetMatch {
            gadget_id: g.id.clone(),
            rank,
            params,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::{Origin, Site};

    fn gadget(id: &str, depth: usize, placement: Placement, trigger: EntryKind) -> Gadget {
        Gadget {
            id: id.into(),
            entry: "e".into(),
            site: Site {
                function: id.into(),
                stmt: 0,
            },
            src: Origin::Register { name: "r".into() },
            path: (0..depth).map(|i| format!("f{i}")).collect(),
            depth,
            placement,
            trigger,
            family: "dma".into(),
        }
    }

    fn stack(slot: usize) -> Placement {
        Placement::Stack { slot, offset: 0 }
    }

    fn heap(size: u64, offset: u64) -> Placement {
        Placement::Heap {
            strukt: "S".into(),
            size,
            offset,
        }
    }

    fn elastic() -> Placement {
        Placement::Elastic {
            strukt: "Iov".into(),
            elem_size: 16,
            field_offset: 8,
        }
    }

    #[test]
    fn stack_depth_equality() {
        let db = GadgetDb::new(vec![
            gadget("a", 3, stack(1), EntryKind::Mmio),
            gadget("b", 5, stack(1), EntryKind::Mmio),
            gadget("c", 5, heap(64, 8), EntryKind::Mmio),
        ]);
        let ids = |d| -> Vec<String> {
            match_stack(
                &db,
                &CorruptedPointerMeta::stack(d, DerefKind::Call, VulnKind::StackOverflow),
            )
            .iter()
            .map(|g| g.id.clone())
            .collect()
        };
        assert_eq!(ids(5), ["b"]);
        assert!(ids(4).is_empty());
        assert!(match_stack(
            &GadgetDb::default(),
            &CorruptedPointerMeta::stack(5, DerefKind::Call, VulnKind::StackOverflow)
        )
        .is_empty());
    }

    #[test]
    fn heap_equality_and_elastic_solve() {
        let fixed = gadget("fixed", 2, heap(64, 8), EntryKind::Mmio);
        let el = gadget("el", 2, elastic(), EntryKind::Mmio);
        let layout = |size, offset| HeapLayout { size, offset };
        assert_eq!(heap_params(&fixed, layout(64, 8)), Some(None));
        assert_eq!(heap_params(&fixed, layout(64, 16)), None);
        assert_eq!(
            heap_params(&el, layout(96, 40)),
            Some(Some(ElasticParams { n: 6, k: 2 }))
        );
        assert_eq!(heap_params(&el, layout(96, 104)), None);
        assert_eq!(heap_params(&el, layout(96, 16)), None);
        assert_eq!(heap_params(&el, layout(72, 8)), None);
    }

    #[test]
    fn ranking_prefers_short_paths_then_mmio() {
        let db = GadgetDb::new(vec![
            gadget("long", 5, heap(64, 8), EntryKind::Mmio),
            gadget("timer", 3, heap(64, 8), EntryKind::TimerBh),
            gadget("mmio", 3, heap(64, 8), EntryKind::Mmio),
        ]);
        let m = match_gadgets(&db, &CorruptedPointerMeta::heap(64, 8, DerefKind::Free, VulnKind::Uaf));
        let ids: Vec<&str> = m.iter().map(|x| x.gadget_id.as_str()).collect();
        assert_eq!(ids, ["mmio", "timer", "long"]);
        assert_eq!(m[2].rank, 2);
    }
}
