use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::machine::DerefKind;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub structs: BTreeMap<String, StructDef>,
    /// Struct type of the per-device state object, if the model has one.
    pub device: Option<String>,
    pub functions: BTreeMap<String, Function>,
    pub entries: Vec<EntryPoint>,
    pub vulns: Vec<VulnDecl>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructDef {
    pub name: String,
    pub size: u64,
    pub fields: Vec<FieldDef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub offset: u64,
    /// Number of 8-byte elements.
    pub len: u64,
    pub critical: bool,
}

impl StructDef {
    pub fn field(&self, name: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Mmio,
    #[serde(rename = "timer_bh")]
    TimerBh,
}

impl fmt::Display for EntryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntryKind::Mmio => "mmio",
            EntryKind::TimerBh => "timer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub name: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryPoint {
    pub id: String,
    pub kind: EntryKind,
    pub function: String,
    pub registers: Vec<Register>,
}

impl EntryPoint {
    pub fn register_offset(&self, name: &str) -> Option<u64> {
        self.registers.iter().find(|r| r.name == name).map(|r| r.offset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub slots: usize,
    pub body: Vec<Stmt>,
}

impl Function {
    /// Index of the `endif` closing the `if` at `at`.
    pub fn matching_endif(&self, at: usize) -> Option<usize> {
        let mut depth = 0usize;
        for (i, stmt) in self.body.iter().enumerate().skip(at) {
            match stmt {
                Stmt::If { .. } => depth += 1,
                Stmt::EndIf => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(i);
                    }
                }
                _ => {}
            }
        }
        None
    }

    pub fn callees(&self) -> impl Iterator<Item = &str> {
        self.body.iter().filter_map(|s| match s {
            Stmt::Call { target } => Some(target.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Operand {
    Reg { name: String },
    Const { value: u64 },
    Slot { slot: usize },
    Dev { field: String },
    FnAddr { function: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "place", rename_all = "snake_case")]
pub enum Place {
    /// `%k->S.f` or `%k->S.f[i]`
    Field {
        base: usize,
        strukt: String,
        field: String,
        index: Option<Operand>,
    },
    /// `%k+off`
    Raw { base: usize, offset: u64 },
    /// `%k[i]`: frame slot `k + i` of the current frame.
    Frame { base: usize, index: Operand },
    /// `dev.f`
    Dev { field: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "dest", rename_all = "snake_case")]
pub enum Dest {
    Slot { slot: usize },
    Place { place: Place },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "&")]
    And,
}

impl CmpOp {
    pub const ALL: [CmpOp; 7] = [
        CmpOp::Eq,
        CmpOp::Ne,
        CmpOp::Lt,
        CmpOp::Le,
        CmpOp::Gt,
        CmpOp::Ge,
        CmpOp::And,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::And => "&",
        }
    }

    pub fn eval(self, a: u64, b: u64) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
            CmpOp::And => a & b != 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cond {
    pub lhs: Operand,
    pub op: CmpOp,
    pub rhs: Operand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stmt", rename_all = "snake_case")]
pub enum Stmt {
    Let {
        dst: usize,
        value: Operand,
    },
    Add {
        dst: usize,
        lhs: Operand,
        rhs: Operand,
    },
    /// Host copy of an 8-byte guest descriptor word at GPA `base + offset`.
    GuestLoad {
        dst: usize,
        base: Operand,
        offset: u64,
    },
    Load {
        dst: usize,
        src: Place,
        dma: bool,
    },
    Store {
        dst: Place,
        value: Operand,
        dma: bool,
    },
    Translate {
        dst: Dest,
        gpa: Operand,
        family: String,
    },
    /// For each `i < count`: reads the GPA at descriptor `table + 16*i`,
    /// translates it and stores the HVA into element `i` of the array of
    /// `strukt` pointed to by slot `array`.
    TranslateArray {
        array: usize,
        strukt: String,
        field: String,
        count: Operand,
        table: Operand,
        family: String,
    },
    Alloc {
        dst: usize,
        strukt: String,
        count: Option<Operand>,
    },
    Free {
        ptr: Operand,
    },
    Call {
        target: String,
    },
    CallPtr {
        target: Operand,
    },
    /// Returns from the current function when the condition is false.
    Guard {
        cond: Cond,
    },
    If {
        cond: Cond,
    },
    EndIf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VulnKind {
    Uaf,
    HeapOverflow,
    StackOverflow,
    DoubleFree,
    MistakenFree,
    UninitFree,
    OobRead,
    OobWrite,
}

impl VulnKind {
    pub const ALL: [VulnKind; 8] = [
        VulnKind::Uaf,
        VulnKind::HeapOverflow,
        VulnKind::StackOverflow,
        VulnKind::DoubleFree,
        VulnKind::MistakenFree,
        VulnKind::UninitFree,
        VulnKind::OobRead,
        VulnKind::OobWrite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VulnKind::Uaf => "uaf",
            VulnKind::HeapOverflow => "heap_overflow",
            VulnKind::StackOverflow => "stack_overflow",
            VulnKind::DoubleFree => "double_free",
            VulnKind::MistakenFree => "mistaken_free",
            VulnKind::UninitFree => "uninit_free",
            VulnKind::OobRead => "oob_read",
            VulnKind::OobWrite => "oob_write",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for VulnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnDecl {
    pub kind: VulnKind,
    pub function: String,
    pub stmt: usize,
    pub deref: DerefKind,
    /// Controllability predicate; the corruption is reported only when it holds.
    pub when: Option<Cond>,
    /// Storage holding the pointer value the bug corrupts.
    pub target: Option<Dest>,
    /// Guest physical address the exploit wants the residue to point at.
    pub aim: Option<u64>,
}
