//! Deterministic model of a type-2 hypervisor process.
//!
//! The process owns three mapped regions: a contiguous guest memory window,
//! a host heap arena and a host stack. The guest can only touch the guest
//! window; host-side accesses may land anywhere mapped, including guest
//! memory. Every host-visible effect is appended to an [`EventLog`].
//!
//! Heap chunks carry a 16-byte in-band header placed just below the address
//! returned by [`MachineState::heap_alloc`]: the class size at `base - 16`
//! and the next-free link (`fd`) at `base - 8`. The allocator trusts these
//! bytes, so corrupting them steers later allocations.
//!
//! Stack frames occupy fixed windows of [`FRAME_STRIDE_SLOTS`] slots indexed
//! by call depth. Popping a frame never clears its window, so the next frame
//! at the same depth observes whatever the previous occupant left behind.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE_SIZE: u64 = 0x1000;
pub const CHUNK_ALIGN: u64 = 16;
pub const CHUNK_HEADER: u64 = 16;
/// Largest class the allocator will accept from an in-band header.
pub const MAX_CHUNK_CLASS: u64 = 0x10000;
pub const SLOT_BYTES: u64 = 8;
pub const FRAME_STRIDE_SLOTS: usize = 16;
pub const MAX_DEPTH: usize = 32;
pub const STACK_BYTES: u64 = (MAX_DEPTH * FRAME_STRIDE_SLOTS) as u64 * SLOT_BYTES;
const MAX_REGION: u64 = 1 << 32;
const FREELIST_WALK_LIMIT: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("size {0:#x} is not a positive multiple of the page size")]
    Unaligned(u64),
    #[error("region size {0:#x} exceeds the 4 GiB model limit")]
    TooLarge(u64),
    #[error("unmapped guest physical address {0:#x}")]
    UnmappedGpa(u64),
    #[error("isolation violation: guest access [{gpa:#x}, +{len:#x}) leaves guest memory")]
    IsolationViolation { gpa: u64, len: u64 },
    #[error("host fault at {addr:#x} (+{len:#x})")]
    HostFault { addr: u64, len: u64 },
    #[error("invalid free of {0:#x}")]
    InvalidFree(u64),
    #[error("heap arena exhausted allocating {0:#x} bytes")]
    ArenaExhausted(u64),
    #[error("allocation size must be positive")]
    ZeroAlloc,
    #[error("call_exit on an empty stack")]
    EmptyStack,
    #[error("call depth exceeds {MAX_DEPTH}")]
    StackOverflow,
    #[error("frame of {0} slots exceeds the {FRAME_STRIDE_SLOTS}-slot window")]
    FrameTooLarge(usize),
    #[error("stack slot {0} outside stack storage")]
    SlotOutOfRange(usize),
}

pub type Result<T> = std::result::Result<T, MachineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerefKind {
    Free,
    Call,
    Read,
    Write,
}

impl fmt::Display for DerefKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DerefKind::Free => "free",
            DerefKind::Call => "call",
            DerefKind::Read => "read",
            DerefKind::Write => "write",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Stack,
    Heap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Dispatch,
    Alloc,
    Free,
    Read,
    Write,
    Call,
    Return,
    Translate,
    Corrupt,
    Deref,
    Sentinel,
    Fault,
}

/// Extra classification attached to an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Note {
    None,
    /// Access performed by the guest itself.
    Guest,
    /// Host access overlapping a chunk that is currently free.
    UafAccess,
    InteriorFree,
    DoubleFree,
    GuestFree,
    /// Corruption reported by a declared vulnerability site.
    VulnSite,
    /// Host-side dereference of a pointer the code believes is host memory.
    Deref {
        kind: DerefKind,
        host_private: bool,
        critical: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub kind: EventKind,
    pub address: u64,
    pub size: u64,
    pub depth: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub caller: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub callee: Option<String>,
    pub detail: u64,
    pub note: Note,
}

/// Append-only record of machine activity.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn next_tick(&self) -> u64 {
        self.events.last().map_or(0, |e| e.tick + 1)
    }
}

/// Builder-style record passed to [`MachineState::log_event`].
#[derive(Debug, Clone)]
pub struct EventRecord {
    pub kind: EventKind,
    pub address: u64,
    pub size: u64,
    pub caller: Option<String>,
    pub callee: Option<String>,
    pub detail: u64,
    pub note: Note,
}

impl EventRecord {
    pub fn new(kind: EventKind, address: u64) -> Self {
        EventRecord {
            kind,
            address,
            size: 0,
            caller: None,
            callee: None,
            detail: 0,
            note: Note::None,
        }
    }

    pub fn size(mut self, size: u64) -> Self {
        self.size = size;
        self
    }

    pub fn detail(mut self, detail: u64) -> Self {
        self.detail = detail;
        self
    }

    pub fn note(mut self, note: Note) -> Self {
        self.note = note;
        self
    }

    pub fn callee(mut self, callee: impl Into<String>) -> Self {
        self.callee = Some(callee.into());
        self
    }
}

/// Page-granular sparse byte store; untouched pages read as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct SparseBytes {
    pages: BTreeMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl SparseBytes {
    fn read(&self, offset: u64, out: &mut [u8]) {
        for (i, b) in out.iter_mut().enumerate() {
            let at = offset + i as u64;
            *b = self
                .pages
                .get(&(at / PAGE_SIZE))
                .map_or(0, |p| p[(at % PAGE_SIZE) as usize]);
        }
    }

    fn write(&mut self, offset: u64, data: &[u8]) {
        for (i, b) in data.iter().enumerate() {
            let at = offset + i as u64;
            let page = self
                .pages
                .entry(at / PAGE_SIZE)
                .or_insert_with(|| Box::new([0; PAGE_SIZE as usize]));
            page[(at % PAGE_SIZE) as usize] = *b;
        }
    }
}

/// Guest memory window mapped into the host address space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressSpace {
    pub guest_base: u64,
    pub guest_size: u64,
    backing: SparseBytes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkState {
    Live,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkHeader {
    pub size: u64,
    pub fd: u64,
    pub state: ChunkState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostHeap {
    pub arena_base: u64,
    pub arena_size: u64,
    top: u64,
    bins: BTreeMap<u64, u64>,
    chunks: BTreeMap<u64, ChunkHeader>,
    backing: SparseBytes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub function: String,
    pub size_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostStack {
    pub base: u64,
    frames: Vec<Frame>,
    storage: Vec<u8>,
}

/// Region boundaries of one machine, carried by traces so consumers can
/// classify addresses without the machine at hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub guest_base: u64,
    pub guest_size: u64,
    pub arena_base: u64,
    pub arena_size: u64,
    pub stack_base: u64,
    pub stack_size: u64,
    pub code_base: u64,
}

impl MemoryLayout {
    pub fn in_guest(&self, hva: u64) -> bool {
        hva >= self.guest_base && hva - self.guest_base < self.guest_size
    }

    pub fn in_heap(&self, hva: u64) -> bool {
        hva >= self.arena_base && hva - self.arena_base < self.arena_size
    }

    pub fn in_stack(&self, hva: u64) -> bool {
        hva >= self.stack_base && hva - self.stack_base < self.stack_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "region", rename_all = "snake_case")]
pub enum ResidueLocation {
    /// Byte offset from the origin of the entry frame.
    Stack {
        offset: u64,
    },
    Heap {
        class: u64,
        offset: u64,
        chunk: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Residue {
    pub location: ResidueLocation,
    pub value: u64,
    pub is_guest_hva: bool,
}

/// Parameters for building a fresh machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub guest_size: u64,
    pub heap_size: u64,
    pub seed: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            guest_size: 0x10000,
            heap_size: 0x20000,
            seed: 0,
        }
    }
}

impl MachineConfig {
    pub fn with_seed(seed: u64) -> Self {
        MachineConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn build(&self) -> Result<MachineState> {
        MachineState::new(self.guest_size, self.heap_size, self.seed)
    }
}

/// The simulated hypervisor process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub seed: u64,
    pub space: AddressSpace,
    pub heap: HostHeap,
    pub stack: HostStack,
    pub code_base: u64,
    /// Base of the device-state object once a scenario has attached one.
    pub device_base: Option<u64>,
    log: EventLog,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn size_class(size: u64) -> u64 {
    size.max(1).div_ceil(CHUNK_ALIGN) * CHUNK_ALIGN
}

fn valid_class(size: u64) -> bool {
    size >= CHUNK_ALIGN && size.is_multiple_of(CHUNK_ALIGN) && size <= MAX_CHUNK_CLASS
}

impl MachineState {
    /// Maps guest memory and the heap arena at seed-derived bases.
    pub fn new(guest_size: u64, heap_size: u64, seed: u64) -> Result<Self> {
        for size in [guest_size, heap_size] {
            if size == 0 || size % PAGE_SIZE != 0 {
                return Err(MachineError::Unaligned(size));
            }
            if size > MAX_REGION {
                return Err(MachineError::TooLarge(size));
            }
        }
        let mut state = seed;
        let guest_base = 0x7000_0000_0000 + ((splitmix64(&mut state) & 0xff) << 32);
        let arena_base = 0x5500_0000_0000 + ((splitmix64(&mut state) & 0xff) << 32);
        let stack_base = 0x7ffc_0000_0000 + ((splitmix64(&mut state) & 0xfff) << 16);
        let code_base = 0x5600_0000_0000 + ((splitmix64(&mut state) & 0xffff) << 20);
        Ok(MachineState {
            seed,
            space: AddressSpace {
                guest_base,
                guest_size,
                backing: SparseBytes::default(),
            },
            heap: HostHeap {
                arena_base,
                arena_size: heap_size,
                top: 0,
                bins: BTreeMap::new(),
                chunks: BTreeMap::new(),
                backing: SparseBytes::default(),
            },
            stack: HostStack {
                base: stack_base,
                frames: Vec::new(),
                storage: vec![0; STACK_BYTES as usize],
            },
            code_base,
            device_base: None,
            log: EventLog::default(),
        })
    }

    pub fn layout(&self) -> MemoryLayout {
        MemoryLayout {
            guest_base: self.space.guest_base,
            guest_size: self.space.guest_size,
            arena_base: self.heap.arena_base,
            arena_size: self.heap.arena_size,
            stack_base: self.stack.base,
            stack_size: STACK_BYTES,
            code_base: self.code_base,
        }
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn depth(&self) -> usize {
        self.stack.frames.len()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.stack.frames
    }

    /// Appends an event; a missing caller defaults to the current frame.
    pub fn log_event(&mut self, mut record: EventRecord) -> usize {
        let caller = record
            .caller
            .take()
            .or_else(|| self.stack.frames.last().map(|f| f.function.clone()));
        self.append(record, caller)
    }

    fn append(&mut self, record: EventRecord, caller: Option<String>) -> usize {
        let event = Event {
            tick: self.log.next_tick(),
            kind: record.kind,
            address: record.address,
            size: record.size,
            depth: self.stack.frames.len() as u32,
            caller,
            callee: record.callee,
            detail: record.detail,
            note: record.note,
        };
        self.log.events.push(event);
        self.log.events.len() - 1
    }

    pub fn gpa_to_hva(&mut self, gpa: u64) -> Result<u64> {
        if gpa >= self.space.guest_size {
            return Err(MachineError::UnmappedGpa(gpa));
        }
        let hva = self.space.guest_base + gpa;
        self.log_event(EventRecord::new(EventKind::Translate, hva).detail(gpa));
        Ok(hva)
    }

    pub fn hva_in_guest(&self, hva: u64) -> bool {
        self.layout().in_guest(hva)
    }

    fn guest_range_ok(&self, gpa: u64, len: u64) -> bool {
        gpa.checked_add(len).is_some_and(|end| end <= self.space.guest_size)
    }

    pub fn guest_write(&mut self, gpa: u64, bytes: &[u8]) -> Result<()> {
        let len = bytes.len() as u64;
        if !self.guest_range_ok(gpa, len) {
            return Err(MachineError::IsolationViolation { gpa, len });
        }
        self.space.backing.write(gpa, bytes);
        self.log_event(
            EventRecord::new(EventKind::Write, self.space.guest_base + gpa)
                .size(len)
                .detail(gpa)
                .note(Note::Guest),
        );
        Ok(())
    }

    pub fn guest_read(&mut self, gpa: u64, len: u64) -> Result<Vec<u8>> {
        if !self.guest_range_ok(gpa, len) {
            return Err(MachineError::IsolationViolation { gpa, len });
        }
        let mut out = vec![0; len as usize];
        self.space.backing.read(gpa, &mut out);
        self.log_event(
            EventRecord::new(EventKind::Read, self.space.guest_base + gpa)
                .size(len)
                .detail(gpa)
                .note(Note::Guest),
        );
        Ok(out)
    }

    /// Unlogged read of host-visible memory. Used by the allocator and by
    /// inspection code.
    pub fn peek(&self, hva: u64, out: &mut [u8]) -> Result<()> {
        let len = out.len() as u64;
        let fault = MachineError::HostFault { addr: hva, len };
        let l = self.layout();
        let within = |base: u64, size: u64| hva >= base && hva.checked_add(len).is_some_and(|end| end <= base + size);
        if within(l.guest_base, l.guest_size) {
            self.space.backing.read(hva - l.guest_base, out);
        } else if within(l.arena_base, l.arena_size) {
            self.heap.backing.read(hva - l.arena_base, out);
        } else if within(l.stack_base, l.stack_size) {
            let off = (hva - l.stack_base) as usize;
            out.copy_from_slice(&self.stack.storage[off..off + out.len()]);
        } else {
            return Err(fault);
        }
        Ok(())
    }

    fn poke(&mut self, hva: u64, data: &[u8]) -> Result<()> {
        let len = data.len() as u64;
        let l = self.layout();
        let within = |base: u64, size: u64| hva >= base && hva.checked_add(len).is_some_and(|end| end <= base + size);
        if within(l.guest_base, l.guest_size) {
            self.space.backing.write(hva - l.guest_base, data);
        } else if within(l.arena_base, l.arena_size) {
            self.heap.backing.write(hva - l.arena_base, data);
        } else if within(l.stack_base, l.stack_size) {
            let off = (hva - l.stack_base) as usize;
            self.stack.storage[off..off + data.len()].copy_from_slice(data);
        } else {
            return Err(MachineError::HostFault { addr: hva, len });
        }
        Ok(())
    }

    pub fn peek_u64(&self, hva: u64) -> Result<u64> {
        let mut buf = [0; 8];
        self.peek(hva, &mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn poke_u64(&mut self, hva: u64, value: u64) -> Result<()> {
        self.poke(hva, &value.to_le_bytes())
    }

    fn access_note(&self, hva: u64) -> Note {
        match self.containing_chunk(hva) {
            Some((_, hdr)) if hdr.state == ChunkState::Free => Note::UafAccess,
            _ => Note::None,
        }
    }

    pub fn host_read(&mut self, hva: u64, len: u64) -> Result<Vec<u8>> {
        let mut out = vec![0; len as usize];
        if let Err(e) = self.peek(hva, &mut out) {
            self.log_event(EventRecord::new(EventKind::Fault, hva).size(len));
            return Err(e);
        }
        let note = self.access_note(hva);
        self.log_event(EventRecord::new(EventKind::Read, hva).size(len).note(note));
        Ok(out)
    }

    pub fn host_write(&mut self, hva: u64, bytes: &[u8]) -> Result<()> {
        let len = bytes.len() as u64;
        if let Err(e) = self.poke(hva, bytes) {
            self.log_event(EventRecord::new(EventKind::Fault, hva).size(len));
            return Err(e);
        }
        let note = self.access_note(hva);
        self.log_event(EventRecord::new(EventKind::Write, hva).size(len).note(note));
        Ok(())
    }

    pub fn host_read_u64(&mut self, hva: u64) -> Result<u64> {
        let bytes = self.host_read(hva, 8)?;
        Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    pub fn host_write_u64(&mut self, hva: u64, value: u64) -> Result<()> {
        self.host_write(hva, &value.to_le_bytes())
    }

    /// Chunk whose header base is the greatest base not above `hva` and
    /// whose user area still covers it.
    pub fn containing_chunk(&self, hva: u64) -> Option<(u64, ChunkHeader)> {
        self.heap
            .chunks
            .range(..=hva)
            .next_back()
            .filter(|(base, hdr)| hva < **base + hdr.size)
            .map(|(b, h)| (*b, *h))
    }

    pub fn chunk(&self, base: u64) -> Option<ChunkHeader> {
        self.heap.chunks.get(&base).copied()
    }

    pub fn chunks(&self) -> impl Iterator<Item = (u64, ChunkHeader)> + '_ {
        self.heap.chunks.iter().map(|(b, h)| (*b, *h))
    }

    pub fn freelist_head(&self, class: u64) -> Option<u64> {
        self.heap.bins.get(&class).copied().filter(|h| *h != 0)
    }

    /// Walks the in-memory `fd` chain of a class, stopping at the list end,
    /// an unreadable link, or the first revisited node.
    pub fn freelist(&self, class: u64) -> Vec<u64> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        let mut cur = self.freelist_head(class).unwrap_or(0);
        while cur != 0 && out.len() < FREELIST_WALK_LIMIT {
            out.push(cur);
            if !seen.insert(cur) {
                break;
            }
            match self.peek_u64(cur.wrapping_sub(8)) {
                Ok(next) => cur = next,
                Err(_) => break,
            }
        }
        out
    }

    pub fn size_classes(&self) -> Vec<u64> {
        self.heap.bins.keys().copied().collect()
    }

    pub fn heap_alloc(&mut self, size: u64) -> Result<u64> {
        if size == 0 {
            return Err(MachineError::ZeroAlloc);
        }
        let class = size_class(size);
        if let Some(head) = self.freelist_head(class) {
            let fd = match self.peek_u64(head.wrapping_sub(8)) {
                Ok(fd) => fd,
                Err(e) => {
                    self.log_event(EventRecord::new(EventKind::Fault, head).size(class));
                    return Err(e);
                }
            };
            self.heap.bins.insert(class, fd);
            let hdr = self.heap.chunks.entry(head).or_insert(ChunkHeader {
                size: class,
                fd,
                state: ChunkState::Free,
            });
            hdr.state = ChunkState::Live;
            hdr.fd = fd;
            self.log_event(EventRecord::new(EventKind::Alloc, head).size(class));
            return Ok(head);
        }
        let need = class + CHUNK_HEADER;
        if self.heap.top + need > self.heap.arena_size {
            self.log_event(EventRecord::new(EventKind::Fault, 0).size(class));
            return Err(MachineError::ArenaExhausted(class));
        }
        let base = self.heap.arena_base + self.heap.top + CHUNK_HEADER;
        self.heap.top += need;
        self.poke_u64(base - 16, class)?;
        self.poke_u64(base - 8, 0)?;
        self.heap.chunks.insert(
            base,
            ChunkHeader {
                size: class,
                fd: 0,
                state: ChunkState::Live,
            },
        );
        self.log_event(EventRecord::new(EventKind::Alloc, base).size(class));
        Ok(base)
    }

    fn push_free(&mut self, base: u64, class: u64) -> Result<()> {
        let head = self.heap.bins.get(&class).copied().unwrap_or(0);
        self.poke_u64(base - 8, head)?;
        self.heap.bins.insert(class, base);
        let hdr = self.heap.chunks.entry(base).or_insert(ChunkHeader {
            size: class,
            fd: head,
            state: ChunkState::Free,
        });
        hdr.state = ChunkState::Free;
        hdr.fd = head;
        hdr.size = class;
        self.log_event(EventRecord::new(EventKind::Free, base).size(class));
        Ok(())
    }

    fn read_header_size(&self, hva: u64) -> Option<u64> {
        self.peek_u64(hva.checked_sub(16)?).ok().filter(|s| valid_class(*s))
    }

    /// Frees `hva` with none of the sanity checks a hardened allocator
    /// would apply. Misuse is recorded as `corrupt` events and otherwise
    /// proceeds.
    pub fn heap_free(&mut self, hva: u64) -> Result<()> {
        if hva == 0 {
            return Ok(());
        }
        if let Some(hdr) = self.chunk(hva) {
            if hdr.state == ChunkState::Free {
                self.log_event(
                    EventRecord::new(EventKind::Corrupt, hva - 8)
                        .size(hdr.size)
                        .detail((-8i64) as u64)
                        .note(Note::DoubleFree),
                );
            }
            return self.push_free(hva, hdr.size);
        }
        if self.hva_in_guest(hva) {
            let header_ok = hva - self.space.guest_base >= CHUNK_HEADER;
            if let Some(class) = self.read_header_size(hva).filter(|_| header_ok) {
                self.log_event(
                    EventRecord::new(EventKind::Corrupt, hva)
                        .size(class)
                        .note(Note::GuestFree),
                );
                return self.push_free(hva, class);
            }
            self.log_event(EventRecord::new(EventKind::Fault, hva));
            return Err(MachineError::InvalidFree(hva));
        }
        if let Some((base, outer)) = self.containing_chunk(hva) {
            if let Some(class) = self.read_header_size(hva) {
                self.log_event(
                    EventRecord::new(EventKind::Corrupt, hva - 8)
                        .size(outer.size)
                        .detail(hva - 8 - base)
                        .note(Note::InteriorFree),
                );
                return self.push_free(hva, class);
            }
        }
        self.log_event(EventRecord::new(EventKind::Fault, hva));
        Err(MachineError::InvalidFree(hva))
    }

    pub fn call_enter(&mut self, function: &str, frame_slots: usize) -> Result<()> {
        if frame_slots > FRAME_STRIDE_SLOTS {
            return Err(MachineError::FrameTooLarge(frame_slots));
        }
        if self.stack.frames.len() >= MAX_DEPTH {
            return Err(MachineError::StackOverflow);
        }
        let caller = self.stack.frames.last().map(|f| f.function.clone());
        self.stack.frames.push(Frame {
            function: function.to_string(),
            size_slots: frame_slots,
        });
        self.append(
            EventRecord::new(EventKind::Call, self.stack.base).callee(function),
            caller,
        );
        Ok(())
    }

    pub fn call_exit(&mut self) -> Result<()> {
        let depth = self.stack.frames.len();
        let frame = self.stack.frames.last().cloned().ok_or(MachineError::EmptyStack)?;
        let mut rec = EventRecord::new(EventKind::Return, self.stack.base).callee(frame.function);
        rec.detail = depth as u64;
        self.log_event(rec);
        self.stack.frames.pop();
        Ok(())
    }

    /// Absolute storage index of `slot` in the frame window at `depth`.
    pub fn slot_index(depth: usize, slot: usize) -> usize {
        (depth - 1) * FRAME_STRIDE_SLOTS + slot
    }

    pub fn slot_address(&self, depth: usize, slot: usize) -> u64 {
        self.stack.base + Self::slot_index(depth, slot) as u64 * SLOT_BYTES
    }

    fn top_slot_index(&self, slot: usize) -> Result<usize> {
        let depth = self.depth();
        if depth == 0 {
            return Err(MachineError::EmptyStack);
        }
        let idx = Self::slot_index(depth, slot);
        if idx >= MAX_DEPTH * FRAME_STRIDE_SLOTS {
            return Err(MachineError::SlotOutOfRange(slot));
        }
        Ok(idx)
    }

    /// Reads a slot of the current frame. Indices past the declared frame
    /// size are allowed as long as they stay inside stack storage.
    pub fn read_slot(&self, slot: usize) -> Result<u64> {
        let idx = self.top_slot_index(slot)?;
        let off = idx * SLOT_BYTES as usize;
        Ok(u64::from_le_bytes(
            self.stack.storage[off..off + 8].try_into().expect("8 bytes"),
        ))
    }

    /// Unlogged read of a slot in the frame window at `depth`.
    pub fn read_slot_at(&self, depth: usize, slot: usize) -> u64 {
        self.peek_u64(self.slot_address(depth, slot)).unwrap_or(0)
    }

    pub fn write_slot(&mut self, slot: usize, value: u64) -> Result<()> {
        let idx = self.top_slot_index(slot)?;
        let off = idx * SLOT_BYTES as usize;
        self.stack.storage[off..off + 8].copy_from_slice(&value.to_le_bytes());
        Ok(())
    }

    pub fn snapshot_residues(&self, region: Region) -> Vec<Residue> {
        let mut out = Vec::new();
        match region {
            Region::Stack => {
                for (i, word) in self.stack.storage.chunks_exact(8).enumerate() {
                    let value = u64::from_le_bytes(word.try_into().expect("8 bytes"));
                    if self.hva_in_guest(value) {
                        out.push(Residue {
                            location: ResidueLocation::Stack {
                                offset: i as u64 * SLOT_BYTES,
                            },
                            value,
                            is_guest_hva: true,
                        });
                    }
                }
            }
            Region::Heap => {
                for (base, hdr) in self.chunks() {
                    if hdr.state != ChunkState::Live {
                        continue;
                    }
                    for offset in (0..hdr.size).step_by(8) {
                        let Ok(value) = self.peek_u64(base + offset) else {
                            continue;
                        };
                        if self.hva_in_guest(value) {
                            out.push(Residue {
                                location: ResidueLocation::Heap {
                                    class: hdr.size,
                                    offset,
                                    chunk: base,
                                },
                                value,
                                is_guest_hva: true,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Stable textual dump: regions, freelists per class, chunks, the
    /// nonzero words of the deepest `top_slots` stack slots, and log size.
    pub fn dump(&self, top_slots: usize) -> String {
        let mut s = String::new();
        let l = self.layout();
        let _ = writeln!(s, "machine seed={:#x}", self.seed);
        let _ = writeln!(s, "region guest base={:#x} size={:#x}", l.guest_base, l.guest_size);
        let _ = writeln!(
            s,
            "region heap base={:#x} size={:#x} top={:#x}",
            l.arena_base, l.arena_size, self.heap.top
        );
        let _ = writeln!(s, "region stack base={:#x} size={:#x}", l.stack_base, l.stack_size);
        for class in self.size_classes() {
            let list: Vec<String> = self.freelist(class).iter().map(|a| format!("{a:#x}")).collect();
            let _ = writeln!(s, "bin {class:#x}: [{}]", list.join(", "));
        }
        for (base, hdr) in self.chunks() {
            let state = match hdr.state {
                ChunkState::Live => "live",
                ChunkState::Free => "free",
            };
            let _ = writeln!(s, "chunk {base:#x} size={:#x} {state}", hdr.size);
        }
        let _ = writeln!(s, "stack depth={}", self.depth());
        let mut shown = 0;
        for (i, word) in self.stack.storage.chunks_exact(8).enumerate() {
            if shown >= top_slots {
                break;
            }
            let value = u64::from_le_bytes(word.try_into().expect("8 bytes"));
            if value != 0 {
                let _ = writeln!(s, "slot +{:#x} = {value:#x}", i * 8);
                shown += 1;
            }
        }
        let _ = writeln!(s, "events {}", self.log.len());
        s
    }
}
