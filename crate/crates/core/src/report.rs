//! Measurement artifacts: the gadget census and residue coverage bands.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::exploit::{aim_input, ExploitError};
use crate::extract::{build_gadget_db, Placement};
use crate::fuzz::{synthesize, FuzzConfig};
use crate::machine::{Region, ResidueLocation, STACK_BYTES};
use crate::matcher::ElasticParams;
use crate::scenario::{run_sequence, EntryKind, InputSequence, Scenario};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CensusRow {
    pub family: String,
    pub upper_function: String,
    pub mmio: usize,
    pub timer: usize,
    pub total: usize,
}

/// Gadget counts per (family, function containing the site), split by
/// trigger kind.
pub fn census(corpus: &[(String, Scenario)]) -> Vec<CensusRow> {
    let mut counts: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for (_, s) in corpus {
        for g in build_gadget_db(s).gadgets {
            let c = counts.entry((g.family, g.site.function)).or_default();
            match g.trigger {
                EntryKind::Mmio => c.0 += 1,
                EntryKind::TimerBh => c.1 += 1,
            }
        }
    }
    counts
        .into_iter()
        .map(|((family, upper_function), (mmio, timer))| CensusRow {
            family,
            upper_function,
            mmio,
            timer,
            total: mmio + timer,
        })
        .collect()
}

pub fn census_csv(rows: &[CensusRow]) -> String {
    let mut out = String::from("family,upper_function,mmio,timer,total\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.family, r.upper_function, r.mmio, r.timer, r.total
        );
    }
    out
}

/// Stack band width in bytes.
pub const STACK_BAND: u64 = 0x200;
/// Heap size classes reported, inclusive.
pub const HEAP_CLASS_MIN: u64 = 0x10;
pub const HEAP_CLASS_MAX: u64 = 0x400;
/// Heap positions are 16-byte granules within a chunk.
pub const HEAP_GRANULE: u64 = 16;
/// Elastic workloads cycle through element counts `1..=ELASTIC_MAX_N`.
pub const ELASTIC_MAX_N: u64 = 64;
/// Guest address every coverage workload aims at.
pub const COVERAGE_AIM: u64 = 0x4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub region: Region,
    /// Inclusive start; for heap rows this is the size class.
    pub band_start: u64,
    /// Exclusive end; for heap rows equal to `band_start`.
    pub band_end: u64,
    /// Residue observations summed over workloads.
    pub residue_count: u64,
    pub covered: u64,
    pub positions: u64,
    pub covered_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub workloads: usize,
    pub entry_kind: Option<EntryKind>,
    pub fuzz: FuzzConfig,
}

impl CoverageConfig {
    pub fn new(workloads: usize, seed: u64) -> Self {
        CoverageConfig {
            workloads,
            entry_kind: None,
            fuzz: FuzzConfig::with_seed(seed),
        }
    }
}

#[derive(Default)]
struct Band {
    count: u64,
    hit: BTreeSet<u64>,
}

/// Runs `workloads` aimed gadget inputs, each on a fresh machine, and
/// aggregates the guest pointers left behind. Workload `w` drives gadget
/// `w % len`; elastic gadgets use `n = 1 + (w / len) % 64`.
pub fn coverage(s: &Scenario, cfg: &CoverageConfig) -> Result<Vec<CoverageRow>, ExploitError> {
    let db = build_gadget_db(s);
    let gadgets: Vec<_> = db
        .gadgets
        .iter()
        .filter(|g| cfg.entry_kind.is_none_or(|k| g.trigger == k))
        .collect();
    let mut inputs: Vec<Option<InputSequence>> = Vec::with_capacity(gadgets.len());
    if cfg.workloads > 0 {
        for g in &gadgets {
            inputs.push(synthesize(s, g, &cfg.fuzz)?);
        }
    }
    let stack_bands = STACK_BYTES / STACK_BAND;
    let mut stack: Vec<Band> = (0..stack_bands).map(|_| Band::default()).collect();
    let mut heap: BTreeMap<u64, Band> = (HEAP_CLASS_MIN..=HEAP_CLASS_MAX)
        .step_by(HEAP_GRANULE as usize)
        .map(|c| (c, Band::default()))
        .collect();
    for w in 0..cfg.workloads {
        if gadgets.is_empty() {
            break;
        }
        let idx = w % gadgets.len();
        let Some(input) = &inputs[idx] else {
            continue;
        };
        let g = gadgets[idx];
        let params = matches!(g.placement, Placement::Elastic { .. }).then(|| ElasticParams {
            n: 1 + (w / gadgets.len()) as u64 % ELASTIC_MAX_N,
            k: 0,
        });
        let aimed = aim_input(s, g, input, COVERAGE_AIM, params);
        let mut m = cfg.fuzz.machine_config().build()?;
        run_sequence(&mut m, s, &aimed.actions, None)?;
        for r in m.snapshot_residues(Region::Stack) {
            if let ResidueLocation::Stack { offset } = r.location {
                let b = &mut stack[(offset / STACK_BAND) as usize];
                b.count += 1;
                b.hit.insert(offset);
            }
        }
        for r in m.snapshot_residues(Region::Heap) {
            if let ResidueLocation::Heap { class, offset, .. } = r.location {
                if let Some(b) = heap.get_mut(&class) {
                    b.count += 1;
                    b.hit.insert(offset / HEAP_GRANULE);
                }
            }
        }
    }
    let row = |region, band_start, band_end, positions: u64, b: &Band| CoverageRow {
        region,
        band_start,
        band_end,
        residue_count: b.count,
        covered: b.hit.len() as u64,
        positions,
        covered_fraction: b.hit.len() as f64 / positions as f64,
    };
    let mut rows: Vec<CoverageRow> = stack
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let start = i as u64 * STACK_BAND;
            row(Region::Stack, start, start + STACK_BAND, STACK_BAND / 8, b)
        })
        .collect();
    rows.extend(
        heap.iter()
            .map(|(&class, b)| row(Region::Heap, class, class, class / HEAP_GRANULE, b)),
    );
    Ok(rows)
}

pub fn coverage_csv(rows: &[CoverageRow]) -> String {
    let mut out = String::from("region,band_start,band_end,residue_count,covered,positions,covered_fraction\n");
    for r in rows {
        let region = match r.region {
            Region::Stack => "stack",
            Region::Heap => "heap",
        };
        let _ = writeln!(
            out,
            "{region},{:#x},{:#x},{},{},{},{:.4}",
            r.band_start, r.band_end, r.residue_count, r.covered, r.positions, r.covered_fraction
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::bundled_scenario;

    #[test]
    fn zero_workloads_is_all_zero() {
        let s = bundled_scenario("nvme_demo").unwrap().scenario();
        let rows = coverage(&s, &CoverageConfig::new(0, 1)).unwrap();
        assert_eq!(rows.len(), 8 + 64);
        assert!(rows.iter().all(|r| r.residue_count == 0 && r.covered_fraction == 0.0));
    }

    #[test]
    fn census_totals_add_up() {
        let rows = census(&crate::corpus::bundled_corpus());
        for r in &rows {
            assert_eq!(r.total, r.mmio + r.timer);
        }
        assert!(census(&[]).is_empty());
    }
}
