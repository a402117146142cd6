use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ast::*;
use crate::machine::{
    DerefKind, Event, EventKind, EventRecord, MachineError, MachineState, MemoryLayout, Note, SLOT_BYTES,
};

/// Upper bound on descriptor-array iterations per statement.
pub const MAX_ARRAY_COUNT: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemWrite {
    pub gpa: u64,
    pub value: u64,
}

/// One guest-visible step: optional guest memory writes, then an optional
/// dispatch of `entry` with the given register values (offset to value).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestAction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub regs: BTreeMap<u64, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mem: Vec<MemWrite>,
}

impl GuestAction {
    pub fn dispatch(entry: &str) -> Self {
        GuestAction {
            entry: Some(entry.to_string()),
            ..Default::default()
        }
    }

    pub fn reg(mut self, offset: u64, value: u64) -> Self {
        self.regs.insert(offset, value);
        self
    }

    pub fn word(mut self, gpa: u64, value: u64) -> Self {
        self.mem.push(MemWrite { gpa, value });
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InputSequence {
    pub actions: Vec<GuestAction>,
}

impl InputSequence {
    pub fn new(actions: Vec<GuestAction>) -> Self {
        InputSequence { actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterpError {
    #[error("unknown entry `{0}`")]
    UnknownEntry(String),
    #[error("unknown terminator function `{0}`")]
    UnknownFunction(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crash {
    pub action: usize,
    pub function: String,
    pub stmt: usize,
    pub error: String,
}

/// Everything one execution appended to the machine log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub layout: MemoryLayout,
    /// Index of the first event in the machine log.
    pub start: usize,
    pub events: Vec<Event>,
    pub crashes: Vec<Crash>,
    /// Actions whose dispatch ended by transferring control into guest memory.
    pub hijacked: Vec<usize>,
}

impl Trace {
    pub fn crashed(&self) -> bool {
        !self.crashes.is_empty()
    }

    /// `(caller, callee)` pairs in execution order; the root of each
    /// dispatch has no caller.
    pub fn edges(&self) -> Vec<(Option<&str>, &str)> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Call)
            .map(|e| (e.caller.as_deref(), e.callee.as_deref().unwrap_or_default()))
            .collect()
    }

    pub fn corrupt_events(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind == EventKind::Corrupt)
    }

    pub fn has_corruption(&self) -> bool {
        self.corrupt_events().next().is_some()
    }
}

/// Statement at which a sentinel event is logged once it completes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terminator {
    pub function: String,
    pub stmt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Prov {
    Guest,
    Host,
    /// Loaded through a non-DMA host pointer that landed in guest memory.
    GuestRead(u64),
}

fn merge(a: Prov, b: Prov) -> Prov {
    match (a, b) {
        (Prov::GuestRead(x), _) | (_, Prov::GuestRead(x)) => Prov::GuestRead(x),
        (Prov::Guest, _) | (_, Prov::Guest) => Prov::Guest,
        _ => Prov::Host,
    }
}

enum Stop {
    Fault {
        function: String,
        stmt: usize,
        error: String,
    },
    Hijack,
}

struct Exec<'a> {
    s: &'a Scenario,
    m: &'a mut MachineState,
    entry: &'a EntryPoint,
    regs: &'a BTreeMap<u64, u64>,
    terminator: Option<&'a Terminator>,
    code: Vec<&'a str>,
}

struct Frame {
    prov: BTreeMap<usize, Prov>,
}

type Step<T> = std::result::Result<T, MachineError>;

impl<'a> Exec<'a> {
    fn code_address(&self, function: &str) -> u64 {
        let idx = self.code.iter().position(|f| *f == function).unwrap_or(0);
        self.m.code_base + 0x10 * idx as u64
    }

    fn code_target(&self, value: u64) -> Option<&'a str> {
        let off = value.checked_sub(self.m.code_base)?;
        if off % 0x10 != 0 {
            return None;
        }
        self.code.get((off / 0x10) as usize).copied()
    }

    fn dev_base(&self) -> u64 {
        self.m.device_base.unwrap_or(0)
    }

    fn dev_field(&self, field: &str) -> &'a FieldDef {
        let dev = self.s.device.as_deref().expect("validated device");
        self.s.structs[dev].field(field).expect("validated field")
    }

    fn mem_prov(&self, addr: u64, dma: bool) -> Prov {
        match (self.m.hva_in_guest(addr), dma) {
            (true, true) => Prov::Guest,
            (true, false) => Prov::GuestRead(addr),
            _ => Prov::Host,
        }
    }

    fn operand(&mut self, fr: &Frame, op: &Operand) -> Step<(u64, Prov)> {
        Ok(match op {
            Operand::Reg { name } => {
                let v = self
                    .entry
                    .register_offset(name)
                    .and_then(|off| self.regs.get(&off).copied())
                    .unwrap_or(0);
                (v, Prov::Guest)
            }
            Operand::Const { value } => (*value, Prov::Host),
            Operand::Slot { slot } => (
                self.m.read_slot(*slot)?,
                fr.prov.get(slot).copied().unwrap_or(Prov::Host),
            ),
            Operand::Dev { field } => {
                let addr = self.dev_base() + self.dev_field(field).offset;
                let v = self.m.host_read_u64(addr)?;
                (v, self.mem_prov(addr, false))
            }
            Operand::FnAddr { function } => (self.code_address(function), Prov::Host),
        })
    }

    fn value(&mut self, fr: &Frame, op: &Operand) -> Step<u64> {
        self.operand(fr, op).map(|(v, _)| v)
    }

    /// Resolves a memory place to an address, or to a frame slot index.
    fn place(&mut self, fr: &Frame, p: &Place) -> Step<Loc> {
        Ok(match p {
            Place::Field {
                base,
                strukt,
                field,
                index,
            } => {
                let def = self.s.structs[strukt].field(field).expect("validated field");
                let idx = match index {
                    Some(i) => self.value(fr, i)?,
                    None => 0,
                };
                let addr = self
                    .m
                    .read_slot(*base)?
                    .wrapping_add(def.offset)
                    .wrapping_add(idx.wrapping_mul(SLOT_BYTES));
                Loc::Mem {
                    addr,
                    critical: def.critical,
                }
            }
            Place::Raw { base, offset } => Loc::Mem {
                addr: self.m.read_slot(*base)?.wrapping_add(*offset),
                critical: false,
            },
            Place::Frame { base, index } => {
                let idx = self.value(fr, index)?;
                let slot = usize::try_from(idx)
                    .ok()
                    .and_then(|i| i.checked_add(*base))
                    .ok_or(MachineError::SlotOutOfRange(usize::MAX))?;
                Loc::Slot(slot)
            }
            Place::Dev { field } => {
                let def = self.dev_field(field);
                Loc::Mem {
                    addr: self.dev_base() + def.offset,
                    critical: def.critical,
                }
            }
        })
    }

    fn deref(&mut self, kind: DerefKind, addr: u64, host_private: bool, critical: bool, detail: u64) {
        self.m.log_event(
            EventRecord::new(EventKind::Deref, addr)
                .size(8)
                .detail(detail)
                .note(Note::Deref {
                    kind,
                    host_private,
                    critical,
                }),
        );
    }

    fn store(&mut self, fr: &mut Frame, loc: Loc, value: u64, prov: Prov, dma: bool) -> Step<()> {
        match loc {
            Loc::Slot(slot) => {
                self.m.write_slot(slot, value)?;
                fr.prov.insert(slot, prov);
            }
            Loc::Mem { addr, critical } => {
                self.m.host_write_u64(addr, value)?;
                if !dma && self.m.hva_in_guest(addr) {
                    self.deref(DerefKind::Write, addr, prov == Prov::Host, false, 0);
                }
                if let (true, Prov::GuestRead(src)) = (critical, prov) {
                    self.deref(DerefKind::Read, src, false, true, addr);
                }
            }
        }
        Ok(())
    }

    fn set_slot(&mut self, fr: &mut Frame, slot: usize, value: u64, prov: Prov) -> Step<()> {
        self.m.write_slot(slot, value)?;
        fr.prov.insert(slot, prov);
        Ok(())
    }

    fn guest_word(&mut self, gpa: u64) -> Step<u64> {
        let layout = self.m.layout();
        if gpa.checked_add(8).is_none_or(|end| end > layout.guest_size) {
            return Err(MachineError::UnmappedGpa(gpa));
        }
        self.m.host_read_u64(layout.guest_base + gpa)
    }

    fn cond(&mut self, fr: &Frame, c: &Cond) -> Step<bool> {
        let a = self.value(fr, &c.lhs)?;
        let b = self.value(fr, &c.rhs)?;
        Ok(c.op.eval(a, b))
    }

    fn vuln_target(&mut self, fr: &Frame, t: &Dest) -> Step<EventRecord> {
        let loc = match t {
            Dest::Slot { slot } => Loc::Slot(*slot),
            Dest::Place { place } => self.place(fr, place)?,
        };
        Ok(match loc {
            Loc::Slot(slot) => {
                let addr = self.m.slot_address(self.m.depth(), slot);
                EventRecord::new(EventKind::Corrupt, addr).detail(slot as u64)
            }
            Loc::Mem { addr, .. } => {
                let rec = EventRecord::new(EventKind::Corrupt, addr);
                match self.m.containing_chunk(addr) {
                    Some((base, hdr)) => rec.size(hdr.size).detail(addr - base),
                    None => rec,
                }
            }
        }
        .note(Note::VulnSite))
    }

    fn call(&mut self, name: &str) -> std::result::Result<(), Stop> {
        let f = &self.s.functions[name];
        let fault = |stmt: usize, e: MachineError| Stop::Fault {
            function: name.to_string(),
            stmt,
            error: e.to_string(),
        };
        self.m.call_enter(name, f.slots).map_err(|e| fault(0, e))?;
        let mut fr = Frame { prov: BTreeMap::new() };
        let vulns: Vec<&VulnDecl> = self.s.vulns.iter().filter(|v| v.function == name).collect();
        let mut pc = 0;
        while pc < f.body.len() {
            let stmt = &f.body[pc];
            let mut pending = None;
            for v in vulns.iter().filter(|v| v.stmt == pc) {
                let holds = match &v.when {
                    Some(c) => self.cond(&fr, c).map_err(|e| fault(pc, e))?,
                    None => true,
                };
                if let (true, Some(t)) = (holds, &v.target) {
                    pending = Some(self.vuln_target(&fr, t).map_err(|e| fault(pc, e))?);
                }
            }
            let at = pc;
            match self.step(&mut fr, f, pc, stmt) {
                Ok(Flow::Next) => pc += 1,
                Ok(Flow::Jump(to)) => pc = to,
                Ok(Flow::Return) => break,
                Err(StepStop::Machine(e)) => return Err(fault(pc, e)),
                Err(StepStop::Inner(stop)) => return Err(stop),
            }
            if let Some(rec) = pending {
                self.m.log_event(rec);
            }
            if self.terminator.is_some_and(|t| t.function == name && t.stmt == at) {
                self.m
                    .log_event(EventRecord::new(EventKind::Sentinel, 0).callee(name).detail(at as u64));
            }
        }
        self.m.call_exit().map_err(|e| fault(pc, e))?;
        Ok(())
    }

    fn step(&mut self, fr: &mut Frame, f: &Function, pc: usize, stmt: &Stmt) -> std::result::Result<Flow, StepStop> {
        match stmt {
            Stmt::Let { dst, value } => {
                let (v, p) = self.operand(fr, value)?;
                self.set_slot(fr, *dst, v, p)?;
            }
            Stmt::Add { dst, lhs, rhs } => {
                let (a, pa) = self.operand(fr, lhs)?;
                let (b, pb) = self.operand(fr, rhs)?;
                self.set_slot(fr, *dst, a.wrapping_add(b), merge(pa, pb))?;
            }
            Stmt::GuestLoad { dst, base, offset } => {
                let b = self.value(fr, base)?;
                let v = self.guest_word(b.wrapping_add(*offset))?;
                self.set_slot(fr, *dst, v, Prov::Guest)?;
            }
            Stmt::Load { dst, src, dma } => {
                let (v, p) = match self.place(fr, src)? {
                    Loc::Slot(slot) => (
                        self.m.read_slot(slot)?,
                        fr.prov.get(&slot).copied().unwrap_or(Prov::Host),
                    ),
                    Loc::Mem { addr, .. } => (self.m.host_read_u64(addr)?, self.mem_prov(addr, *dma)),
                };
                self.set_slot(fr, *dst, v, p)?;
            }
            Stmt::Store { dst, value, dma } => {
                let loc = self.place(fr, dst)?;
                let (v, p) = self.operand(fr, value)?;
                self.store(fr, loc, v, p, *dma)?;
            }
            Stmt::Translate { dst, gpa, .. } => {
                let g = self.value(fr, gpa)?;
                let hva = self.m.gpa_to_hva(g)?;
                let loc = match dst {
                    Dest::Slot { slot } => Loc::Slot(*slot),
                    Dest::Place { place } => self.place(fr, place)?,
                };
                self.store(fr, loc, hva, Prov::Host, true)?;
            }
            Stmt::TranslateArray {
                array,
                strukt,
                field,
                count,
                table,
                ..
            } => {
                let def = &self.s.structs[strukt];
                let off = def.field(field).expect("validated field").offset;
                let base = self.m.read_slot(*array)?;
                let n = self.value(fr, count)?;
                if n > MAX_ARRAY_COUNT {
                    return Err(MachineError::TooLarge(n).into());
                }
                let table = self.value(fr, table)?;
                for i in 0..n {
                    let gpa = self.guest_word(table.wrapping_add(16 * i))?;
                    let hva = self.m.gpa_to_hva(gpa)?;
                    let at = base.wrapping_add(def.size * i + off);
                    self.m.host_write_u64(at, hva)?;
                }
            }
            Stmt::Alloc { dst, strukt, count } => {
                let n = match count {
                    Some(c) => self.value(fr, c)?,
                    None => 1,
                };
                let size = self.s.structs[strukt]
                    .size
                    .checked_mul(n)
                    .ok_or(MachineError::TooLarge(n))?;
                let p = self.m.heap_alloc(size)?;
                self.set_slot(fr, *dst, p, Prov::Host)?;
            }
            Stmt::Free { ptr } => {
                let p = self.value(fr, ptr)?;
                self.m.heap_free(p)?;
            }
            Stmt::Call { target } => {
                self.call(target).map_err(StepStop::Inner)?;
            }
            Stmt::CallPtr { target } => {
                let v = self.value(fr, target)?;
                if let Some(callee) = self.code_target(v) {
                    self.call(callee).map_err(StepStop::Inner)?;
                } else {
                    self.deref(DerefKind::Call, v, false, false, 0);
                    if self.m.hva_in_guest(v) {
                        return Err(StepStop::Inner(Stop::Hijack));
                    }
                    self.m.log_event(EventRecord::new(EventKind::Fault, v));
                    return Err(MachineError::HostFault { addr: v, len: 0 }.into());
                }
            }
            Stmt::Guard { cond } => {
                if !self.cond(fr, cond)? {
                    return Ok(Flow::Return);
                }
            }
            Stmt::If { cond } => {
                if !self.cond(fr, cond)? {
                    let end = f.matching_endif(pc).expect("validated if");
                    return Ok(Flow::Jump(end + 1));
                }
            }
            Stmt::EndIf => {}
        }
        Ok(Flow::Next)
    }
}

#[derive(Debug, Clone, Copy)]
enum Loc {
    Slot(usize),
    Mem { addr: u64, critical: bool },
}

enum Flow {
    Next,
    Jump(usize),
    Return,
}

enum StepStop {
    Machine(MachineError),
    Inner(Stop),
}

impl From<MachineError> for StepStop {
    fn from(e: MachineError) -> Self {
        StepStop::Machine(e)
    }
}

/// Sorted function names; index `i` has code address `code_base + 16*i`.
fn code_table(s: &Scenario) -> Vec<&str> {
    s.functions.keys().map(String::as_str).collect()
}

fn execute(
    m: &mut MachineState,
    s: &Scenario,
    action: &GuestAction,
    index: usize,
    terminator: Option<&Terminator>,
    crashes: &mut Vec<Crash>,
    hijacked: &mut Vec<usize>,
) -> Result<(), InterpError> {
    let entry = match &action.entry {
        Some(id) => Some(
            s.entries
                .iter()
                .find(|e| &e.id == id)
                .ok_or_else(|| InterpError::UnknownEntry(id.clone()))?,
        ),
        None => None,
    };
    for w in &action.mem {
        // Writes outside guest memory are simply not performed: the guest
        // cannot express them.
        let _ = m.guest_write(w.gpa, &w.value.to_le_bytes());
    }
    let Some(entry) = entry else { return Ok(()) };
    if let (Some(dev), None) = (&s.device, m.device_base) {
        match m.heap_alloc(s.structs[dev].size) {
            Ok(base) => m.device_base = Some(base),
            Err(e) => {
                crashes.push(Crash {
                    action: index,
                    function: entry.function.clone(),
                    stmt: 0,
                    error: e.to_string(),
                });
                return Ok(());
            }
        }
    }
    m.log_event(
        EventRecord::new(EventKind::Dispatch, 0)
            .callee(entry.id.clone())
            .detail(index as u64),
    );
    let depth = m.depth();
    let mut exec = Exec {
        s,
        m,
        entry,
        regs: &action.regs,
        terminator,
        code: code_table(s),
    };
    let outcome = exec.call(&entry.function);
    while m.depth() > depth {
        let _ = m.call_exit();
    }
    match outcome {
        Ok(()) => {}
        Err(Stop::Hijack) => hijacked.push(index),
        Err(Stop::Fault { function, stmt, error }) => crashes.push(Crash {
            action: index,
            function,
            stmt,
            error,
        }),
    }
    Ok(())
}

fn check_terminator(s: &Scenario, terminator: Option<&Terminator>) -> Result<(), InterpError> {
    match terminator {
        Some(t) if !s.functions.contains_key(&t.function) => Err(InterpError::UnknownFunction(t.function.clone())),
        _ => Ok(()),
    }
}

/// Runs a single action.
pub fn run_entry(m: &mut MachineState, s: &Scenario, action: &GuestAction) -> Result<Trace, InterpError> {
    run_sequence(m, s, std::slice::from_ref(action), None)
}

/// Runs actions in order on one machine and returns the combined trace.
pub fn run_sequence(
    m: &mut MachineState,
    s: &Scenario,
    actions: &[GuestAction],
    terminator: Option<&Terminator>,
) -> Result<Trace, InterpError> {
    check_terminator(s, terminator)?;
    let start = m.log().len();
    let mut crashes = Vec::new();
    let mut hijacked = Vec::new();
    for (i, a) in actions.iter().enumerate() {
        execute(m, s, a, i, terminator, &mut crashes, &mut hijacked)?;
    }
    Ok(Trace {
        layout: m.layout(),
        start,
        events: m.log().events()[start..].to_vec(),
        crashes,
        hijacked,
    })
}
