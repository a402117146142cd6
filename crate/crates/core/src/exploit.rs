//! Exploit assembly: split a PoC into phases, splice an aimed gadget input
//! at the planned point, groom the allocator and check the resulting log
//! for evidence of each exploitation variant.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{build_gadget_db, trace_operand, Gadget, GadgetDb, Origin};
use crate::fuzz::{synthesize, FuzzConfig, FuzzError};
use crate::machine::{DerefKind, EventKind, MachineConfig, MachineError, Note, Region};
use crate::matcher::{
    extract_pointer_meta, match_gadgets, CorruptedPointerMeta, ElasticParams, GadgetMatch, MatchError,
};
use crate::scenario::{run_sequence, GuestAction, InputSequence, InterpError, MemWrite, Scenario, Stmt, VulnKind};

/// Guest page used to hold aimed descriptor tables.
pub const DESC_SCRATCH: u64 = 0x1000;
/// Upper bound on allocator grooming repetitions.
pub const MAX_GROOMING: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Control-flow hijack into guest memory.
    A,
    /// Host-private data written into guest memory.
    I,
    /// Guest-controlled data read into a critical host field.
    O,
    /// Allocator metadata operations on guest memory.
    C,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::I, Variant::O, Variant::C];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::A => "A",
            Variant::I => "I",
            Variant::O => "O",
            Variant::C => "C",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    PreTrigger,
    PostTrigger,
}

/// Free-class corruptions need the pointer to already be dangling when the
/// residue lands, so the gadget goes after the trigger.
pub fn plan_insertion(kind: VulnKind) -> Insertion {
    match kind {
        VulnKind::Uaf | VulnKind::DoubleFree | VulnKind::MistakenFree | VulnKind::UninitFree => Insertion::PostTrigger,
        _ => Insertion::PreTrigger,
    }
}

pub fn expected_variants(deref: DerefKind, kind: VulnKind) -> BTreeSet<Variant> {
    let v: &[Variant] = match (deref, kind) {
        (_, VulnKind::OobRead) => &[Variant::I],
        (DerefKind::Free, _) => &[Variant::O, Variant::C],
        (DerefKind::Call, _) => &[Variant::A],
        (DerefKind::Read, _) => &[Variant::O],
        (DerefKind::Write, _) => &[Variant::I],
    };
    v.iter().copied().collect()
}

/// A PoC split into preparation `[0, start)`, trigger `[start, end)` and
/// exploitation `[end, len)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PocScript {
    pub actions: InputSequence,
    pub trigger: (usize, usize),
}

impl PocScript {
    pub fn prep(&self) -> &[GuestAction] {
        &self.actions.actions[..self.trigger.0]
    }

    pub fn trig(&self) -> &[GuestAction] {
        &self.actions.actions[self.trigger.0..self.trigger.1]
    }

    pub fn post(&self) -> &[GuestAction] {
        &self.actions.actions[self.trigger.1..]
    }
}

/// On-disk PoC: the action list plus optional trigger marks. A bare
/// action array is accepted as well.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PocFile {
    pub actions: InputSequence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<(usize, usize)>,
}

impl PocFile {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        if text.trim_start().starts_with('[') {
            Ok(PocFile {
                actions: serde_json::from_str(text)?,
                trigger: None,
            })
        } else {
            serde_json::from_str(text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExploitError {
    #[error("PoC does not corrupt anything")]
    NoCorruption,
    #[error("no gadget matches the corrupted pointer")]
    NoPairedGadget,
    #[error("synthesis budget exhausted for every matching gadget")]
    SynthesisExhausted,
    #[error("gadget `{0}` is not in the database")]
    UnknownGadget(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Fuzz(#[from] FuzzError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Machine(#[from] MachineError),
}

fn corrupts(s: &Scenario, mc: &MachineConfig, actions: &[GuestAction]) -> Result<bool, ExploitError> {
    let mut m = mc.build()?;
    Ok(run_sequence(&mut m, s, actions, None)?.has_corruption())
}

/// Finds the smallest contiguous block containing the first corrupting
/// action whose removal makes the run corruption-free.
pub fn decompose_poc(s: &Scenario, poc: &InputSequence, mc: &MachineConfig) -> Result<PocScript, ExploitError> {
    let mut m = mc.build()?;
    let mut first = None;
    for (i, a) in poc.actions.iter().enumerate() {
        if run_sequence(&mut m, s, std::slice::from_ref(a), None)?.has_corruption() {
            first = Some(i);
            break;
        }
    }
    let c = first.ok_or(ExploitError::NoCorruption)?;
    let n = poc.len();
    for len in 1..=n {
        for start in (c + 1).saturating_sub(len)..=c {
            let end = start + len;
            if end > n {
                break;
            }
            let mut rest = poc.actions[..start].to_vec();
            rest.extend_from_slice(&poc.actions[end..]);
            if !corrupts(s, mc, &rest)? {
                return Ok(PocScript {
                    actions: poc.clone(),
                    trigger: (start, end),
                });
            }
        }
    }
    Ok(PocScript {
        actions: poc.clone(),
        trigger: (0, n),
    })
}

/// Points the gadget's GPA source at `aim` in every dispatch of the
/// gadget's entry. Elastic gadgets also get their element count.
pub fn aim_input(
    s: &Scenario,
    g: &Gadget,
    input: &InputSequence,
    aim: u64,
    params: Option<ElasticParams>,
) -> InputSequence {
    let entry = s.entries.iter().find(|e| e.id == g.entry);
    let reg = |name: &str| entry.and_then(|e| e.register_offset(name));
    let copies = params.map_or(1, |p| p.n);
    let count_reg = params.and_then(|_| {
        let f = s.functions.get(&g.site.function)?;
        match f.body.get(g.site.stmt)? {
            Stmt::TranslateArray { count, .. } => match trace_operand(s, &g.site.function, g.site.stmt, count) {
                Origin::Register { name } => reg(&name),
                _ => None,
            },
            _ => None,
        }
    });
    let mut out = input.clone();
    for a in out
        .actions
        .iter_mut()
        .filter(|a| a.entry.as_deref() == Some(g.entry.as_str()))
    {
        match &g.src {
            Origin::Register { name } => {
                if let Some(off) = reg(name) {
                    a.regs.insert(off, aim);
                }
            }
            Origin::GuestField { base, offset, stride } => {
                let table = match base.as_ref() {
                    Origin::Register { name } => reg(name).map(|off| {
                        a.regs.insert(off, DESC_SCRATCH);
                        DESC_SCRATCH
                    }),
                    Origin::Constant { value } => Some(*value),
                    _ => None,
                };
                if let Some(t) = table {
                    let rows = if *stride == 0 { 1 } else { copies };
                    for i in 0..rows {
                        a.mem.push(MemWrite {
                            gpa: t + offset + stride * i,
                            value: aim,
                        });
                    }
                }
            }
            Origin::Constant { .. } | Origin::Host => {}
        }
        if let (Some(off), Some(p)) = (count_reg, params) {
            a.regs.insert(off, p.n);
        }
    }
    out
}

/// Half-open range of action indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploitChain {
    pub gadget_id: String,
    pub insertion: Insertion,
    pub grooming: usize,
    pub expected: BTreeSet<Variant>,
    pub actions: InputSequence,
    /// Action ranges contributed by the gadget, grooming copies included.
    pub gadget_spans: Vec<Span>,
}

impl ExploitChain {
    /// The same chain with every gadget action removed.
    pub fn strip_gadget(&self) -> ExploitChain {
        let inside = |i: usize| self.gadget_spans.iter().any(|s| (s.start..s.end).contains(&i));
        let actions = self
            .actions
            .actions
            .iter()
            .enumerate()
            .filter(|(i, _)| !inside(*i))
            .map(|(_, a)| a.clone())
            .collect();
        ExploitChain {
            actions: InputSequence::new(actions),
            gadget_spans: Vec::new(),
            grooming: 0,
            ..self.clone()
        }
    }
}

/// `block^r + prep + [block] + trigger + [block] + post`.
pub fn build_chain(
    poc: &PocScript,
    gadget_id: &str,
    block: &InputSequence,
    insertion: Insertion,
    grooming: usize,
    expected: BTreeSet<Variant>,
) -> ExploitChain {
    let mut actions = Vec::new();
    let mut spans = Vec::new();
    let mut push_block = |actions: &mut Vec<GuestAction>| {
        let start = actions.len();
        actions.extend_from_slice(&block.actions);
        spans.push(Span {
            start,
            end: actions.len(),
        });
    };
    for _ in 0..grooming {
        push_block(&mut actions);
    }
    actions.extend_from_slice(poc.prep());
    if insertion == Insertion::PreTrigger {
        push_block(&mut actions);
    }
    actions.extend_from_slice(poc.trig());
    if insertion == Insertion::PostTrigger {
        push_block(&mut actions);
    }
    actions.extend_from_slice(poc.post());
    ExploitChain {
        gadget_id: gadget_id.to_string(),
        insertion,
        grooming,
        expected,
        actions: InputSequence::new(actions),
        gadget_spans: spans,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploitReport {
    pub achieved: BTreeSet<Variant>,
    /// Log indices supporting each achieved variant.
    pub evidence: BTreeMap<Variant, Vec<usize>>,
    pub crashes: usize,
    pub success: bool,
}

/// Replays the chain on a fresh machine and classifies the log.
pub fn verify(s: &Scenario, chain: &ExploitChain, mc: &MachineConfig) -> Result<ExploitReport, ExploitError> {
    let mut m = mc.build()?;
    let trace = run_sequence(&mut m, s, &chain.actions.actions, None)?;
    let layout = m.layout();
    let mut evidence: BTreeMap<Variant, Vec<usize>> = BTreeMap::new();
    for (i, e) in m.log().events().iter().enumerate() {
        let variant = match (e.kind, e.note) {
            (
                EventKind::Deref,
                Note::Deref {
                    kind: DerefKind::Call, ..
                },
            ) if layout.in_guest(e.address) => Some(Variant::A),
            (
                EventKind::Deref,
                Note::Deref {
                    kind: DerefKind::Write,
                    host_private: true,
                    ..
                },
            ) if layout.in_guest(e.address) => Some(Variant::I),
            (
                EventKind::Deref,
                Note::Deref {
                    kind: DerefKind::Read,
                    critical: true,
                    ..
                },
            ) => Some(Variant::O),
            (EventKind::Alloc | EventKind::Free, _) if layout.in_guest(e.address) => Some(Variant::C),
            _ => None,
        };
        if let Some(v) = variant {
            evidence.entry(v).or_default().push(i);
        }
    }
    let achieved: BTreeSet<Variant> = evidence.keys().copied().collect();
    Ok(ExploitReport {
        success: achieved.intersection(&chain.expected).next().is_some(),
        achieved,
        evidence,
        crashes: trace.crashes.len(),
    })
}

/// Builds the chain for `g`, searching the smallest grooming count that
/// makes a heap exploit succeed.
pub fn assemble(
    s: &Scenario,
    poc: &PocScript,
    g: &Gadget,
    gadget_input: &InputSequence,
    meta: &CorruptedPointerMeta,
    params: Option<ElasticParams>,
    mc: &MachineConfig,
) -> Result<(ExploitChain, ExploitReport), ExploitError> {
    let aim = s.vulns.first().and_then(|v| v.aim).unwrap_or(0);
    let block = aim_input(s, g, gadget_input, aim, params);
    let insertion = plan_insertion(meta.vuln_kind);
    let expected = expected_variants(meta.deref, meta.vuln_kind);
    let max_r = match meta.region {
        Region::Heap => MAX_GROOMING,
        Region::Stack => 0,
    };
    let mut first = None;
    for r in 0..=max_r {
        let chain = build_chain(poc, &g.id, &block, insertion, r, expected.clone());
        let report = verify(s, &chain, mc)?;
        if report.success {
            return Ok((chain, report));
        }
        if first.is_none() {
            first = Some((chain, report));
        }
    }
    Ok(first.expect("at least one grooming count tried"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploitOutcome {
    pub poc: PocScript,
    pub meta: CorruptedPointerMeta,
    pub matches: Vec<GadgetMatch>,
    pub gadget_id: String,
    pub gadget_input: InputSequence,
    pub chain: ExploitChain,
    pub report: ExploitReport,
    /// Verification of the chain with the gadget actions stripped.
    pub control: ExploitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploitOptions {
    pub machine: MachineConfig,
    pub fuzz: FuzzConfig,
}

impl ExploitOptions {
    pub fn with_seed(seed: u64) -> Self {
        let fuzz = FuzzConfig::with_seed(seed);
        ExploitOptions {
            machine: fuzz.machine_config(),
            fuzz,
        }
    }
}

/// Full pipeline: extract, match, synthesize, assemble and verify. Gadgets
/// are tried in rank order until one succeeds; the last attempt is
/// returned if none does.
pub fn run_exploit(s: &Scenario, poc: &InputSequence, opts: &ExploitOptions) -> Result<ExploitOutcome, ExploitError> {
    let db = build_gadget_db(s);
    run_exploit_with(s, &db, poc, opts)
}

pub fn run_exploit_with(
    s: &Scenario,
    db: &GadgetDb,
    poc: &InputSequence,
    opts: &ExploitOptions,
) -> Result<ExploitOutcome, ExploitError> {
    let mc = &opts.machine;
    let script = decompose_poc(s, poc, mc)?;
    let mut m = mc.build()?;
    let trace = run_sequence(&mut m, s, &poc.actions, None)?;
    let meta = extract_pointer_meta(&trace, s)?;
    let matches = match_gadgets(db, &meta);
    if matches.is_empty() {
        return Err(ExploitError::NoPairedGadget);
    }
    let mut last = None;
    for gm in &matches {
        let g = db
            .get(&gm.gadget_id)
            .ok_or_else(|| ExploitError::UnknownGadget(gm.gadget_id.clone()))?;
        let Some(input) = synthesize(s, g, &opts.fuzz)? else {
            continue;
        };
        let (chain, report) = assemble(s, &script, g, &input, &meta, gm.params, mc)?;
        let control = verify(s, &chain.strip_gadget(), mc)?;
        let outcome = ExploitOutcome {
            poc: script.clone(),
            meta: meta.clone(),
            matches: matches.clone(),
            gadget_id: g.id.clone(),
            gadget_input: input,
            chain,
            report,
            control,
        };
        if outcome.report.success {
            return Ok(outcome);
        }
        last = Some(outcome);
    }
    last.ok_or(ExploitError::SynthesisExhausted)
}
