#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use cda_core::exploit::Variant;
use cda_core::extract::{Gadget, GadgetDb, Origin, Placement, Site};
use cda_core::machine::{DerefKind, Region};
use cda_core::matcher::{CorruptedPointerMeta, ElasticParams};
use cda_core::scenario::{Dest, EntryKind, Operand, Place, Scenario, Stmt, VulnKind, MAX_ARRAY_COUNT};

pub fn corpus_file(name: &str) -> String {
    let path = format!("{}/corpus/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

#[derive(Debug, Deserialize)]
pub struct GoldenOutcome {
    pub vuln_kind: VulnKind,
    pub region: Region,
    pub layout: Vec<u64>,
    pub matches: Vec<String>,
    pub gadget_id: String,
    pub params: Option<ElasticParams>,
    pub insertion: cda_core::exploit::Insertion,
    pub grooming: usize,
    pub trigger: (usize, usize),
    pub expected: BTreeSet<Variant>,
    pub achieved: BTreeSet<Variant>,
}

pub fn golden_outcome(name: &str) -> GoldenOutcome {
    serde_json::from_str(&corpus_file(&format!("{name}.outcome.json"))).expect("golden outcome")
}

// ---------------------------------------------------------------------------
// Random scenarios

const FAMILIES: [&str; 4] = ["dma", "usb", "pci", "block"];

/// A random valid scenario with at most `max_fns` functions. Straight-line
/// bodies with optional balanced `if` blocks, arbitrary call edges
/// (recursion included) and every translation form.
pub fn gen_scenario(seed: u64, max_fns: usize) -> String {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let nf = r.gen_range(1..=max_fns);
    let regs = ["r0", "r1", "r2", "r3"];
    let mut t = String::new();
    t.push_str("struct D size 0x40\n  field p 0x0\n  field q 0x8\nend\n");
    t.push_str("struct S size 0x30\n  field a 0x0\n  field b 0x8\n  field c 0x20\nend\n");
    t.push_str("struct V size 0x10\n  field len 0x0\n  field base 0x8\nend\n");
    t.push_str("device D\n");
    let operand = |r: &mut ChaCha8Rng| -> String {
        match r.gen_range(0..5) {
            0 => format!("${}", regs[r.gen_range(0..regs.len())]),
            1 => format!("{:#x}", r.gen_range(0..4u64) * 0x100),
            2 | 3 => format!("%{}", r.gen_range(0..4)),
            _ => ["dev.p", "dev.q"][r.gen_range(0..2)].to_string(),
        }
    };
    let field = |r: &mut ChaCha8Rng| -> String {
        match r.gen_range(0..4) {
            0 => format!("%{}->S.a", r.gen_range(0..4)),
            1 => format!("%{}->S.b", r.gen_range(0..4)),
            2 => format!("%{}->S.c", r.gen_range(0..4)),
            _ => ["dev.p", "dev.q"][r.gen_range(0..2)].to_string(),
        }
    };
    for i in 0..nf {
        let _ = writeln!(t, "fn f{i} slots 4");
        let n = r.gen_range(1..=7);
        let mut open = 0;
        for _ in 0..n {
            let k = r.gen_range(0..4);
            let line = match r.gen_range(0..12) {
                0 => format!("let %{k} = {}", operand(&mut r)),
                1 => format!("add %{k} = {} + {}", operand(&mut r), operand(&mut r)),
                2 => format!("gload %{k} = {} + {:#x}", operand(&mut r), r.gen_range(0..4u64) * 8),
                3 => format!("load %{k} = {}", field(&mut r)),
                4 => format!("store {} = {}", field(&mut r), operand(&mut r)),
                5 | 6 => {
                    let fam = FAMILIES[r.gen_range(0..FAMILIES.len())];
                    match r.gen_range(0..3) {
                        0 => format!("translate %{k} = {} family {fam}", operand(&mut r)),
                        _ => format!("translate {} = {} family {fam}", field(&mut r), operand(&mut r)),
                    }
                }
                7 => format!(
                    "translate_array %{k} V.base count {} table {} family elastic",
                    operand(&mut r),
                    operand(&mut r)
                ),
                8 => format!("alloc %{k} S"),
                9 | 10 => format!("call f{}", r.gen_range(0..nf)),
                _ => {
                    if open > 0 && r.gen_bool(0.5) {
                        open -= 1;
                        "endif".to_string()
                    } else {
                        open += 1;
                        format!("if {} < {}", operand(&mut r), operand(&mut r))
                    }
                }
            };
            let _ = writeln!(t, "  {line}");
        }
        for _ in 0..open {
            t.push_str("  endif\n");
        }
        t.push_str("end\n");
    }
    let ne = r.gen_range(1..=3);
    for e in 0..ne {
        let kind = if r.gen_bool(0.7) { "mmio" } else { "timer" };
        let f = r.gen_range(0..nf);
        let _ = write!(t, "entry e{e} {kind} fn f{f}");
        if e == 0 {
            t.push_str(" regs r0@0x0 r1@0x8 r2@0x10 r3@0x18");
        }
        t.push('\n');
    }
    t
}

// ---------------------------------------------------------------------------
// Extractor oracle: exhaustive enumeration of entry-to-site simple paths and
// set-valued taint with a global field fixpoint.

fn is_guest(o: &Origin) -> bool {
    matches!(o, Origin::Register { .. } | Origin::GuestField { .. })
}

struct TaintOracle<'a> {
    s: &'a Scenario,
    fields: BTreeMap<(String, String), BTreeSet<Origin>>,
}

impl<'a> TaintOracle<'a> {
    fn new(s: &'a Scenario) -> Self {
        let mut o = TaintOracle {
            s,
            fields: BTreeMap::new(),
        };
        loop {
            let mut next: BTreeMap<(String, String), BTreeSet<Origin>> = BTreeMap::new();
            for f in s.functions.values() {
                let slots = o.forward(&f.body);
                for (j, st) in f.body.iter().enumerate() {
                    if let Stmt::Store { dst, value, .. } = st {
                        let key = match dst {
                            Place::Field { strukt, field, .. } => (strukt.clone(), field.clone()),
                            Place::Dev { field } => (s.device.clone().unwrap(), field.clone()),
                            _ => continue,
                        };
                        let vals = o.operand(&slots[j], value);
                        next.entry(key).or_default().extend(vals.into_iter().filter(is_guest));
                    }
                }
            }
            if next == o.fields {
                return o;
            }
            o.fields = next;
        }
    }

    fn field(&self, strukt: &str, field: &str) -> BTreeSet<Origin> {
        let guest = self
            .fields
            .get(&(strukt.to_string(), field.to_string()))
            .cloned()
            .unwrap_or_default();
        if guest.is_empty() {
            BTreeSet::from([Origin::Host])
        } else {
            guest
        }
    }

    fn operand(&self, slots: &BTreeMap<usize, BTreeSet<Origin>>, op: &Operand) -> BTreeSet<Origin> {
        match op {
            Operand::Reg { name } => BTreeSet::from([Origin::Register { name: name.clone() }]),
            Operand::Const { value } => BTreeSet::from([Origin::Constant { value: *value }]),
            Operand::FnAddr { .. } => BTreeSet::from([Origin::Host]),
            Operand::Dev { field } => self.field(self.s.device.as_deref().unwrap(), field),
            Operand::Slot { slot } => slots
                .get(slot)
                .cloned()
                .unwrap_or_else(|| BTreeSet::from([Origin::Host])),
        }
    }

    /// Slot origin sets before each statement, following text order.
    fn forward(&self, body: &[Stmt]) -> Vec<BTreeMap<usize, BTreeSet<Origin>>> {
        let mut cur: BTreeMap<usize, BTreeSet<Origin>> = BTreeMap::new();
        let mut out = Vec::with_capacity(body.len());
        for st in body {
            out.push(cur.clone());
            let host = || BTreeSet::from([Origin::Host]);
            match st {
                Stmt::Let { dst, value } => {
                    let v = self.operand(&cur, value);
                    cur.insert(*dst, v);
                }
                Stmt::Add { dst, lhs, rhs } => {
                    let a = self.operand(&cur, lhs);
                    let b = self.operand(&cur, rhs);
                    let mut v: BTreeSet<Origin> = a.iter().chain(b.iter()).filter(|o| is_guest(o)).cloned().collect();
                    if v.is_empty() {
                        for x in &a {
                            for y in &b {
                                v.insert(match (x, y) {
                                    (Origin::Constant { value: p }, Origin::Constant { value: q }) => {
                                        Origin::Constant {
                                            value: p.wrapping_add(*q),
                                        }
                                    }
                                    _ => Origin::Host,
                                });
                            }
                        }
                    }
                    cur.insert(*dst, v);
                }
                Stmt::GuestLoad { dst, base, offset } => {
                    let v = self
                        .operand(&cur, base)
                        .into_iter()
                        .map(|b| Origin::GuestField {
                            base: Box::new(b),
                            offset: *offset,
                            stride: 0,
                        })
                        .collect();
                    cur.insert(*dst, v);
                }
                Stmt::Load { dst, src, .. } => {
                    let v = match src {
                        Place::Field { strukt, field, .. } => self.field(strukt, field),
                        Place::Dev { field } => self.field(self.s.device.as_deref().unwrap(), field),
                        _ => host(),
                    };
                    cur.insert(*dst, v);
                }
                Stmt::Translate {
                    dst: Dest::Slot { slot },
                    ..
                } => {
                    cur.insert(*slot, host());
                }
                Stmt::Alloc { dst, .. } => {
                    cur.insert(*dst, host());
                }
                _ => {}
            }
        }
        out
    }
}

/// What the oracle predicts for one gadget; `src` lists every admissible
/// guest-influenced origin.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct OracleGadget {
    pub id: String,
    pub entry: String,
    pub site: Site,
    pub src: BTreeSet<Origin>,
    pub path: Vec<String>,
    pub depth: usize,
    pub placement: Placement,
    pub trigger: EntryKind,
    pub family: String,
}

fn simple_paths(s: &Scenario, from: &str, to: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut queue = vec![vec![from.to_string()]];
    while let Some(p) = queue.pop() {
        let last = p.last().unwrap().clone();
        if last == to {
            out.push(p);
            continue;
        }
        let Some(f) = s.functions.get(&last) else { continue };
        let mut seen = BTreeSet::new();
        for st in &f.body {
            if let Stmt::Call { target } = st {
                if seen.insert(target.clone()) && !p.contains(target) {
                    let mut q = p.clone();
                    q.push(target.clone());
                    queue.push(q);
                }
            }
        }
    }
    out.sort();
    out
}

pub fn extract_oracle(s: &Scenario) -> Vec<OracleGadget> {
    let taint = TaintOracle::new(s);
    let mut out = Vec::new();
    for f in s.functions.values() {
        let slots = taint.forward(&f.body);
        for (i, st) in f.body.iter().enumerate() {
            let (src, family): (BTreeSet<Origin>, &String) = match st {
                Stmt::Translate { gpa, family, .. } => (
                    taint.operand(&slots[i], gpa).into_iter().filter(is_guest).collect(),
                    family,
                ),
                Stmt::TranslateArray { table, family, .. } => (
                    taint
                        .operand(&slots[i], table)
                        .into_iter()
                        .map(|b| Origin::GuestField {
                            base: Box::new(b),
                            offset: 0,
                            stride: 16,
                        })
                        .collect(),
                    family,
                ),
                _ => continue,
            };
            if src.is_empty() {
                continue;
            }
            let site = Site {
                function: f.name.clone(),
                stmt: i,
            };
            for e in &s.entries {
                for (k, path) in simple_paths(s, &e.function, &f.name).into_iter().enumerate() {
                    let depth = path.len();
                    let placement = match st {
                        Stmt::Translate { dst, .. } => match dst {
                            Dest::Slot { slot } => Placement::Stack {
                                slot: *slot,
                                offset: ((depth as u64 - 1) * 16 + *slot as u64) * 8,
                            },
                            Dest::Place { place } => {
                                let (strukt, field) = match place {
                                    Place::Field { strukt, field, .. } => (strukt.clone(), field.clone()),
                                    Place::Dev { field } => (s.device.clone().unwrap(), field.clone()),
                                    _ => unreachable!("validated destination"),
                                };
                                let def = &s.structs[&strukt];
                                Placement::Heap {
                                    size: def.size,
                                    offset: def.field(&field).unwrap().offset,
                                    strukt,
                                }
                            }
                        },
                        Stmt::TranslateArray { strukt, field, .. } => Placement::Elastic {
                            strukt: strukt.clone(),
                            elem_size: s.structs[strukt].size,
                            field_offset: s.structs[strukt].field(field).unwrap().offset,
                        },
                        _ => unreachable!(),
                    };
                    out.push(OracleGadget {
                        id: format!("{}/{}#{}/{}", e.id, f.name, i, k),
                        entry: e.id.clone(),
                        site: site.clone(),
                        src: src.clone(),
                        path,
                        depth,
                        placement,
                        trigger: e.kind,
                        family: family.clone(),
                    });
                }
            }
        }
    }
    out.sort();
    out
}

/// Compares a database against the oracle; returns a description of the
/// first discrepancy.
pub fn compare_with_oracle(db: &GadgetDb, oracle: &[OracleGadget]) -> Result<(), String> {
    let mut got: Vec<&Gadget> = db.gadgets.iter().collect();
    got.sort_by(|a, b| a.id.cmp(&b.id));
    let mut want: Vec<&OracleGadget> = oracle.iter().collect();
    want.sort_by(|a, b| a.id.cmp(&b.id));
    if got.len() != want.len() {
        return Err(format!(
            "gadget count {} != oracle {}: got {:?} want {:?}",
            got.len(),
            want.len(),
            got.iter().map(|g| &g.id).collect::<Vec<_>>(),
            want.iter().map(|g| &g.id).collect::<Vec<_>>()
        ));
    }
    for (g, o) in got.iter().zip(want) {
        let same = g.id == o.id
            && g.entry == o.entry
            && g.site == o.site
            && o.src.contains(&g.src)
            && g.path == o.path
            && g.depth == o.depth
            && g.placement == o.placement
            && g.trigger == o.trigger
            && g.family == o.family;
        if !same {
            return Err(format!("mismatch:\n got {g:?}\nwant {o:?}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Matcher oracle: literal predicate filter over every gadget.

pub fn match_oracle(db: &GadgetDb, meta: &CorruptedPointerMeta) -> BTreeSet<(String, Option<ElasticParams>)> {
    let mut out = BTreeSet::new();
    for g in &db.gadgets {
        match (meta.region, &g.placement) {
            (Region::Stack, Placement::Stack { .. }) => {
                if Some(g.depth) == meta.stack_depth {
                    out.insert((g.id.clone(), None));
                }
            }
            (Region::Heap, Placement::Heap { size, offset, .. }) => {
                let l = meta.heap_layout.unwrap();
                if *size == l.size && *offset == l.offset {
                    out.insert((g.id.clone(), None));
                }
            }
            (
                Region::Heap,
                Placement::Elastic {
                    elem_size,
                    field_offset,
                    ..
                },
            ) => {
                let l = meta.heap_layout.unwrap();
                for n in 1..=MAX_ARRAY_COUNT {
                    if elem_size * n != l.size {
                        continue;
                    }
                    for k in 0..n {
                        if field_offset + elem_size * k == l.offset {
                            out.insert((g.id.clone(), Some(ElasticParams { n, k })));
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}

pub fn gen_db(r: &mut ChaCha8Rng, max: usize) -> GadgetDb {
    let n = r.gen_range(0..=max);
    let gadgets = (0..n)
        .map(|i| {
            let depth = r.gen_range(1..=6);
            let placement = match r.gen_range(0..3) {
                0 => Placement::Stack {
                    slot: r.gen_range(0..16),
                    offset: 0,
                },
                1 => {
                    let size = r.gen_range(1..=8u64) * 16;
                    Placement::Heap {
                        strukt: "S".into(),
                        size,
                        offset: r.gen_range(0..size / 8) * 8,
                    }
                }
                _ => {
                    let elem = r.gen_range(1..=3u64) * 16;
                    Placement::Elastic {
                        strukt: "V".into(),
                        elem_size: elem,
                        field_offset: r.gen_range(0..elem / 8) * 8,
                    }
                }
            };
            Gadget {
                id: format!("g{i:03}"),
                entry: format!("e{}", r.gen_range(0..3)),
                site: Site {
                    function: format!("f{}", r.gen_range(0..5)),
                    stmt: r.gen_range(0..4),
                },
                src: Origin::Register { name: "r".into() },
                path: (0..depth).map(|d| format!("p{d}")).collect(),
                depth,
                placement,
                trigger: if r.gen_bool(0.5) {
                    EntryKind::Mmio
                } else {
                    EntryKind::TimerBh
                },
                family: "dma".into(),
            }
        })
        .collect();
    GadgetDb::new(gadgets)
}

pub fn gen_meta(r: &mut ChaCha8Rng) -> CorruptedPointerMeta {
    let deref = [DerefKind::Free, DerefKind::Call, DerefKind::Read, DerefKind::Write][r.gen_range(0..4)];
    if r.gen_bool(0.4) {
        CorruptedPointerMeta::stack(r.gen_range(1..=6), deref, VulnKind::StackOverflow)
    } else {
        let size = r.gen_range(1..=16u64) * 16;
        CorruptedPointerMeta::heap(size, r.gen_range(0..size / 8) * 8, deref, VulnKind::Uaf)
    }
}

// ---------------------------------------------------------------------------
// Decoy scenarios for caller verification.

pub struct DecoyCase {
    pub text: String,
    pub chain: Vec<String>,
    /// Register `c` value: the legitimate route reaches `f1..f_min(c, n)`.
    pub cut: usize,
    pub expected_prefix: usize,
    pub expected_terminated: bool,
}

/// Chain `f1 -> ... -> fn` with a guard cutting the legitimate route and
/// decoy routes reaching a later chain function from an unrelated caller,
/// possibly from a second entry.
pub fn gen_decoy(seed: u64) -> DecoyCase {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.gen_range(2..=6);
    let k = r.gen_range(2..=n);
    let pad = r.gen_range(0..=3);
    let cut = r.gen_range(0..=n + 1);
    let decoy_first = r.gen_bool(0.5);
    let second_entry = r.gen_bool(0.5);
    let mut t = String::new();
    for i in 1..=n {
        let _ = writeln!(t, "fn f{i} slots 2");
        if i == 1 && decoy_first {
            t.push_str("  if $d != 0\n    call d0\n  endif\n");
        }
        if i == n {
            t.push_str("  translate %0 = $g family dma\n");
        } else {
            let _ = writeln!(t, "  if $c > {i}\n    call f{}\n  endif", i + 1);
        }
        if i == 1 && !decoy_first {
            t.push_str("  if $d != 0\n    call d0\n  endif\n");
        }
        t.push_str("end\n");
    }
    for j in 0..=pad {
        let next = if j == pad {
            format!("f{k}")
        } else {
            format!("d{}", j + 1)
        };
        let _ = writeln!(t, "fn d{j} slots 1\n  call {next}\nend");
    }
    t.push_str("entry e mmio fn f1 regs c@0x0 d@0x8 g@0x10\n");
    if second_entry {
        t.push_str("entry x mmio fn d0 regs c@0x0 d@0x8 g@0x10\n");
    }
    let reach = if cut == 0 { 1 } else { cut.min(n) };
    DecoyCase {
        text: t,
        chain: (1..=n).map(|i| format!("f{i}")).collect(),
        cut,
        expected_prefix: reach,
        expected_terminated: reach == n,
    }
}

/// Checks `match_gadgets` against the literal filter and the ranking order.
pub fn check_matches(db: &GadgetDb, meta: &CorruptedPointerMeta) -> Result<(), String> {
    let got = cda_core::matcher::match_gadgets(db, meta);
    let set: BTreeSet<(String, Option<ElasticParams>)> = got.iter().map(|m| (m.gadget_id.clone(), m.params)).collect();
    if set.len() != got.len() {
        return Err("duplicate matches".into());
    }
    let want = match_oracle(db, meta);
    if set != want {
        return Err(format!("matches {set:?} != oracle {want:?}"));
    }
    let key = |id: &str| {
        let g = db.get(id).unwrap();
        (
            g.path.len(),
            g.trigger != EntryKind::Mmio,
            format!("{}#{}", g.site.function, g.site.stmt),
            g.id.clone(),
        )
    };
    for (i, m) in got.iter().enumerate() {
        if m.rank != i {
            return Err(format!("rank {} at position {i}", m.rank));
        }
        if i > 0 && key(&got[i - 1].gadget_id) > key(&m.gadget_id) {
            return Err(format!("{} ranked before {}", got[i - 1].gadget_id, m.gadget_id));
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
pub struct FuzzFixture {
    pub scenario: String,
    pub gadget: String,
    pub seeds: u64,
    pub successes: u64,
    pub guard_iterations_mean: f64,
    pub guard_iterations_sd: f64,
}

pub fn fuzz_fixture() -> FuzzFixture {
    let path = format!("{}/tests/fixtures/fuzz_nvme_demo.json", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Golden-comparable view of an exploit outcome.
pub fn outcome_view(o: &cda_core::exploit::ExploitOutcome) -> GoldenOutcome {
    let layout = match (o.meta.stack_depth, o.meta.heap_layout) {
        (Some(d), _) => vec![d as u64],
        (_, Some(l)) => vec![l.size, l.offset],
        _ => vec![],
    };
    GoldenOutcome {
        vuln_kind: o.meta.vuln_kind,
        region: o.meta.region,
        layout,
        matches: o.matches.iter().map(|m| m.gadget_id.clone()).collect(),
        gadget_id: o.gadget_id.clone(),
        params: o
            .matches
            .iter()
            .find(|m| m.gadget_id == o.gadget_id)
            .and_then(|m| m.params),
        insertion: o.chain.insertion,
        grooming: o.chain.grooming,
        trigger: o.poc.trigger,
        expected: o.chain.expected.clone(),
        achieved: o.report.achieved.clone(),
    }
}

pub fn diff_golden(name: &str, got: &GoldenOutcome) -> Result<(), String> {
    let want = golden_outcome(name);
    let g = format!("{got:?}");
    let w = format!("{want:?}");
    if g == w {
        Ok(())
    } else {
        Err(format!("{name}: got {g}\nwant {w}"))
    }
}
