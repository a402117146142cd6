//! Line-oriented scenario grammar.
//!
//! ```text
//! # comment
//! struct Req size 0x40
//!   field sg 0x8 critical
//!   field buf 0x20 len 2
//! end
//! device Req
//! fn handler slots 4
//!   guard $cmd == 1
//!   translate %0 = $addr family dma
//!   call helper
//! end
//! entry mmio0 mmio fn handler regs cmd@0x0 addr@0x8
//! vuln uaf at handler:1 deref read when $cmd == 1 target dev.sg aim 0x8000
//! ```
//!
//! Operands: `$reg`, `%slot`, `dev.field`, `@function`, or an integer
//! (decimal or `0x` hex). Memory places: `%k->Struct.field`,
//! `%k->Struct.field[operand]`, `%k+offset`, `%k[operand]` (frame slot
//! `k + operand`), `dev.field`.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::ast::*;
use crate::machine::{DerefKind, FRAME_STRIDE_SLOTS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

type Result<T> = std::result::Result<T, ParseError>;

#[derive(Debug, Clone, Copy)]
struct Tok<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Tok<'_>> {
    let code = line.split('#').next().unwrap_or("");
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in code.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(Tok {
                    text: &code[s..i],
                    column: s + 1,
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Tok {
            text: &code[s..],
            column: s + 1,
        });
    }
    out
}

struct Cursor<'a> {
    line: usize,
    toks: Vec<Tok<'a>>,
    pos: usize,
    end_column: usize,
}

impl<'a> Cursor<'a> {
    fn new(line: usize, text: &'a str) -> Self {
        Cursor {
            line,
            toks: tokenize(text),
            pos: 0,
            end_column: text.len() + 1,
        }
    }

    fn err<T>(&self, column: usize, message: impl Into<String>) -> Result<T> {
        Err(ParseError {
            line: self.line,
            column,
            message: message.into(),
        })
    }

    fn column(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end_column, |t| t.column)
    }

    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).map(|t| t.text)
    }

    fn next(&mut self, what: &str) -> Result<Tok<'a>> {
        match self.toks.get(self.pos) {
            Some(t) => {
                self.pos += 1;
                Ok(*t)
            }
            None => self.err(self.end_column, format!("expected {what}")),
        }
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        let t = self.next(&format!("`{word}`"))?;
        if t.text != word {
            return self.err(t.column, format!("expected `{word}`, found `{}`", t.text));
        }
        Ok(())
    }

    fn eat(&mut self, word: &str) -> bool {
        if self.peek() == Some(word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn finish(&self) -> Result<()> {
        match self.toks.get(self.pos) {
            Some(t) => self.err(t.column, format!("unexpected `{}`", t.text)),
            None => Ok(()),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String> {
        let t = self.next(what)?;
        if is_ident(t.text) {
            Ok(t.text.to_string())
        } else {
            self.err(t.column, format!("expected {what}, found `{}`", t.text))
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        let t = self.next(what)?;
        match parse_number(t.text) {
            Some(v) => Ok(v),
            None => self.err(t.column, format!("expected {what}, found `{}`", t.text)),
        }
    }

    fn slot(&mut self) -> Result<usize> {
        let t = self.next("slot `%k`")?;
        match parse_slot(t.text) {
            Some(v) => Ok(v),
            None => self.err(t.column, format!("expected slot `%k`, found `{}`", t.text)),
        }
    }

    fn operand(&mut self) -> Result<Operand> {
        let t = self.next("operand")?;
        match parse_operand(t.text) {
            Some(op) => Ok(op),
            None => self.err(t.column, format!("bad operand `{}`", t.text)),
        }
    }

    fn place(&mut self) -> Result<Place> {
        let t = self.next("memory place")?;
        match parse_place(t.text) {
            Some(p) => Ok(p),
            None => self.err(t.column, format!("bad memory place `{}`", t.text)),
        }
    }

    fn dest(&mut self) -> Result<Dest> {
        let t = self.next("destination")?;
        if let Some(slot) = parse_slot(t.text) {
            return Ok(Dest::Slot { slot });
        }
        match parse_place(t.text) {
            Some(place) => Ok(Dest::Place { place }),
            None => self.err(t.column, format!("bad destination `{}`", t.text)),
        }
    }

    fn cmp(&mut self) -> Result<CmpOp> {
        let t = self.next("comparison operator")?;
        match CmpOp::ALL.into_iter().find(|op| op.symbol() == t.text) {
            Some(op) => Ok(op),
            None => self.err(t.column, format!("unknown operator `{}`", t.text)),
        }
    }

    fn cond(&mut self) -> Result<Cond> {
        Ok(Cond {
            lhs: self.operand()?,
            op: self.cmp()?,
            rhs: self.operand()?,
        })
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub(crate) fn parse_number(s: &str) -> Option<u64> {
    match s.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None if s.chars().all(|c| c.is_ascii_digit()) => s.parse().ok(),
        None => None,
    }
}

fn parse_slot(s: &str) -> Option<usize> {
    let digits = s.strip_prefix('%')?;
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn parse_operand(s: &str) -> Option<Operand> {
    if let Some(name) = s.strip_prefix('$') {
        return is_ident(name).then(|| Operand::Reg { name: name.into() });
    }
    if let Some(name) = s.strip_prefix('@') {
        return is_ident(name).then(|| Operand::FnAddr { function: name.into() });
    }
    if let Some(field) = s.strip_prefix("dev.") {
        return is_ident(field).then(|| Operand::Dev { field: field.into() });
    }
    if let Some(slot) = parse_slot(s) {
        return Some(Operand::Slot { slot });
    }
    parse_number(s).map(|value| Operand::Const { value })
}

fn parse_place(s: &str) -> Option<Place> {
    if let Some(field) = s.strip_prefix("dev.") {
        return is_ident(field).then(|| Place::Dev { field: field.into() });
    }
    let rest = s.strip_prefix('%')?;
    let digits_end = rest.find(|c: char| !c.is_ascii_digit())?;
    if digits_end == 0 {
        return None;
    }
    let base: usize = rest[..digits_end].parse().ok()?;
    let rest = &rest[digits_end..];
    if let Some(path) = rest.strip_prefix("->") {
        let (path, index) = match path.find('[') {
            Some(open) => {
                let inner = path[open + 1..].strip_suffix(']')?;
                (&path[..open], Some(parse_operand(inner)?))
            }
            None => (path, None),
        };
        let (strukt, field) = path.split_once('.')?;
        if !is_ident(strukt) || !is_ident(field) {
            return None;
        }
        return Some(Place::Field {
            base,
            strukt: strukt.into(),
            field: field.into(),
            index,
        });
    }
    if let Some(off) = rest.strip_prefix('+') {
        return Some(Place::Raw {
            base,
            offset: parse_number(off)?,
        });
    }
    let inner = rest.strip_prefix('[')?.strip_suffix(']')?;
    Some(Place::Frame {
        base,
        index: parse_operand(inner)?,
    })
}

fn parse_stmt(c: &mut Cursor<'_>) -> Result<Stmt> {
    let head = c.next("statement")?;
    let stmt = match head.text {
        "let" => {
            let dst = c.slot()?;
            c.expect("=")?;
            Stmt::Let {
                dst,
                value: c.operand()?,
            }
        }
        "add" => {
            let dst = c.slot()?;
            c.expect("=")?;
            let lhs = c.operand()?;
            c.expect("+")?;
            Stmt::Add {
                dst,
                lhs,
                rhs: c.operand()?,
            }
        }
        "gload" => {
            let dst = c.slot()?;
            c.expect("=")?;
            let base = c.operand()?;
            c.expect("+")?;
            Stmt::GuestLoad {
                dst,
                base,
                offset: c.number("offset")?,
            }
        }
        "load" => {
            let dma = c.eat("dma");
            let dst = c.slot()?;
            c.expect("=")?;
            Stmt::Load {
                dst,
                src: c.place()?,
                dma,
            }
        }
        "store" => {
            let dma = c.eat("dma");
            let dst = c.place()?;
            c.expect("=")?;
            Stmt::Store {
                dst,
                value: c.operand()?,
                dma,
            }
        }
        "translate" => {
            let dst = c.dest()?;
            c.expect("=")?;
            let gpa = c.operand()?;
            c.expect("family")?;
            Stmt::Translate {
                dst,
                gpa,
                family: c.ident("family label")?,
            }
        }
        "translate_array" => {
            let array = c.slot()?;
            let t = c.next("`Struct.field`")?;
            let Some((strukt, field)) = t.text.split_once('.').filter(|(a, b)| is_ident(a) && is_ident(b)) else {
                return c.err(t.column, format!("expected `Struct.field`, found `{}`", t.text));
            };
            c.expect("count")?;
            let count = c.operand()?;
            c.expect("table")?;
            let table = c.operand()?;
            c.expect("family")?;
            Stmt::TranslateArray {
                array,
                strukt: strukt.into(),
                field: field.into(),
                count,
                table,
                family: c.ident("family label")?,
            }
        }
        "alloc" => {
            let dst = c.slot()?;
            let strukt = c.ident("struct name")?;
            let count = if c.eat("*") { Some(c.operand()?) } else { None };
            Stmt::Alloc { dst, strukt, count }
        }
        "free" => Stmt::Free { ptr: c.operand()? },
        "call" => Stmt::Call {
            target: c.ident("function name")?,
        },
        "callptr" => Stmt::CallPtr { target: c.operand()? },
        "guard" => Stmt::Guard { cond: c.cond()? },
        "if" => Stmt::If { cond: c.cond()? },
        "endif" => Stmt::EndIf,
        other => return c.err(head.column, format!("unknown statement `{other}`")),
    };
    c.finish()?;
    Ok(stmt)
}

fn parse_deref(c: &mut Cursor<'_>) -> Result<DerefKind> {
    let t = c.next("deref kind")?;
    Ok(match t.text {
        "free" => DerefKind::Free,
        "call" => DerefKind::Call,
        "read" => DerefKind::Read,
        "write" => DerefKind::Write,
        other => return c.err(t.column, format!("unknown deref kind `{other}`")),
    })
}

/// Source positions kept for diagnostics raised after parsing.
#[derive(Default)]
struct Positions {
    structs: BTreeMap<String, usize>,
    functions: BTreeMap<String, usize>,
    stmts: BTreeMap<(String, usize), usize>,
    entries: Vec<usize>,
    vulns: Vec<usize>,
    device: usize,
}

enum Block {
    Struct(StructDef),
    Function(Function),
}

pub fn parse_scenario(text: &str) -> std::result::Result<Scenario, ParseError> {
    let mut s = Scenario::default();
    let mut pos = Positions::default();
    let mut block: Option<(Block, usize)> = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut c = Cursor::new(line, raw);
        let Some(head) = c.peek() else { continue };

        match &mut block {
            Some((Block::Struct(def), _)) => {
                if c.eat("end") {
                    c.finish()?;
                    let (Block::Struct(def), start) = block.take().expect("open block") else {
                        unreachable!()
                    };
                    if s.structs.contains_key(&def.name) {
                        return Err(ParseError {
                            line: start,
                            column: 1,
                            message: format!("duplicate struct `{}`", def.name),
                        });
                    }
                    pos.structs.insert(def.name.clone(), start);
                    s.structs.insert(def.name.clone(), def);
                    continue;
                }
                c.expect("field")?;
                let col = c.column();
                let name = c.ident("field name")?;
                if def.field(&name).is_some() {
                    return c.err(col, format!("duplicate field `{name}`"));
                }
                let offset = c.number("field offset")?;
                let mut len = 1;
                let mut critical = false;
                while let Some(word) = c.peek() {
                    match word {
                        "len" => {
                            c.pos += 1;
                            len = c.number("element count")?;
                        }
                        "critical" => {
                            c.pos += 1;
                            critical = true;
                        }
                        _ => break,
                    }
                }
                c.finish()?;
                let fits = len > 0
                    && offset % 8 == 0
                    && len
                        .checked_mul(8)
                        .and_then(|b| b.checked_add(offset))
                        .is_some_and(|e| e <= def.size);
                if !fits {
                    return c.err(col, format!("field `{name}` does not fit struct `{}`", def.name));
                }
                def.fields.push(FieldDef {
                    name,
                    offset,
                    len,
                    critical,
                });
            }
            Some((Block::Function(f), _)) => {
                if c.eat("end") {
                    c.finish()?;
                    let (Block::Function(f), start) = block.take().expect("open block") else {
                        unreachable!()
                    };
                    if s.functions.contains_key(&f.name) {
                        return Err(ParseError {
                            line: start,
                            column: 1,
                            message: format!("duplicate function `{}`", f.name),
                        });
                    }
                    pos.functions.insert(f.name.clone(), start);
                    s.functions.insert(f.name.clone(), f);
                    continue;
                }
                let stmt = parse_stmt(&mut c)?;
                pos.stmts.insert((f.name.clone(), f.body.len()), line);
                f.body.push(stmt);
            }
            None => match head {
                "struct" => {
                    c.pos += 1;
                    let name = c.ident("struct name")?;
                    c.expect("size")?;
                    let col = c.column();
                    let size = c.number("struct size")?;
                    c.finish()?;
                    if size == 0 || size % 16 != 0 {
                        return c.err(col, "struct size must be a positive multiple of 16");
                    }
                    block = Some((
                        Block::Struct(StructDef {
                            name,
                            size,
                            fields: Vec::new(),
                        }),
                        line,
                    ));
                }
                "fn" => {
                    c.pos += 1;
                    let name = c.ident("function name")?;
                    c.expect("slots")?;
                    let col = c.column();
                    let slots = c.number("slot count")? as usize;
                    c.finish()?;
                    if slots > FRAME_STRIDE_SLOTS {
                        return c.err(col, format!("at most {FRAME_STRIDE_SLOTS} slots per frame"));
                    }
                    block = Some((
                        Block::Function(Function {
                            name,
                            slots,
                            body: Vec::new(),
                        }),
                        line,
                    ));
                }
                "device" => {
                    c.pos += 1;
                    if s.device.is_some() {
                        return c.err(1, "device declared twice");
                    }
                    s.device = Some(c.ident("struct name")?);
                    c.finish()?;
                    pos.device = line;
                }
                "entry" => {
                    c.pos += 1;
                    let col = c.column();
                    let id = c.ident("entry id")?;
                    if s.entries.iter().any(|e| e.id == id) {
                        return c.err(col, format!("duplicate entry `{id}`"));
                    }
                    let kt = c.next("entry kind")?;
                    let kind = match kt.text {
                        "mmio" => EntryKind::Mmio,
                        "timer" => EntryKind::TimerBh,
                        other => return c.err(kt.column, format!("unknown entry kind `{other}`")),
                    };
                    c.expect("fn")?;
                    let function = c.ident("function name")?;
                    let mut registers: Vec<Register> = Vec::new();
                    if c.eat("regs") {
                        while let Some(t) = c.toks.get(c.pos).copied() {
                            c.pos += 1;
                            let reg = t.text.split_once('@').and_then(|(n, o)| {
                                Some(Register {
                                    name: n.to_string(),
                                    offset: parse_number(o)?,
                                })
                                .filter(|r| is_ident(&r.name))
                            });
                            let Some(reg) = reg else {
                                return c.err(t.column, format!("expected `name@offset`, found `{}`", t.text));
                            };
                            if registers.iter().any(|r| r.name == reg.name || r.offset == reg.offset) {
                                return c.err(t.column, format!("duplicate register `{}`", t.text));
                            }
                            registers.push(reg);
                        }
                    }
                    c.finish()?;
                    pos.entries.push(line);
                    s.entries.push(EntryPoint {
                        id,
                        kind,
                        function,
                        registers,
                    });
                }
                "vuln" => {
                    c.pos += 1;
                    let kt = c.next("vulnerability kind")?;
                    let Some(kind) = VulnKind::from_name(kt.text) else {
                        return c.err(kt.column, format!("unknown vulnerability kind `{}`", kt.text));
                    };
                    c.expect("at")?;
                    let st = c.next("`function:index`")?;
                    let site = st
                        .text
                        .split_once(':')
                        .and_then(|(f, i)| Some((f.to_string(), i.parse::<usize>().ok()?)))
                        .filter(|(f, _)| is_ident(f));
                    let Some((function, stmt)) = site else {
                        return c.err(st.column, format!("expected `function:index`, found `{}`", st.text));
                    };
                    c.expect("deref")?;
                    let deref = parse_deref(&mut c)?;
                    let mut decl = VulnDecl {
                        kind,
                        function,
                        stmt,
                        deref,
                        when: None,
                        target: None,
                        aim: None,
                    };
                    while let Some(word) = c.peek() {
                        c.pos += 1;
                        match word {
                            "when" if decl.when.is_none() => decl.when = Some(c.cond()?),
                            "target" if decl.target.is_none() => decl.target = Some(c.dest()?),
                            "aim" if decl.aim.is_none() => decl.aim = Some(c.number("guest address")?),
                            other => return c.err(c.toks[c.pos - 1].column, format!("unexpected `{other}`")),
                        }
                    }
                    pos.vulns.push(line);
                    s.vulns.push(decl);
                }
                "end" => return c.err(1, "`end` without open block"),
                other => return c.err(1, format!("unknown section `{other}`")),
            },
        }
    }
    if let Some((_, start)) = block {
        return Err(ParseError {
            line: start,
            column: 1,
            message: "block not closed with `end`".into(),
        });
    }
    validate(&s, &pos)?;
    Ok(s)
}

struct Checker<'a> {
    s: &'a Scenario,
    registers: BTreeSet<&'a str>,
    line: usize,
}

impl Checker<'_> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(ParseError {
            line: self.line,
            column: 1,
            message: message.into(),
        })
    }

    fn slot(&self, f: &Function, slot: usize) -> Result<()> {
        if slot >= f.slots {
            return self.fail(format!(
                "slot %{slot} out of range for `{}` ({} slots)",
                f.name, f.slots
            ));
        }
        Ok(())
    }

    fn strukt(&self, name: &str) -> Result<&StructDef> {
        match self.s.structs.get(name) {
            Some(d) => Ok(d),
            None => self.fail(format!("unknown struct `{name}`")),
        }
    }

    fn field(&self, strukt: &str, field: &str) -> Result<&FieldDef> {
        match self.strukt(strukt)?.field(field) {
            Some(d) => Ok(d),
            None => self.fail(format!("unknown field `{strukt}.{field}`")),
        }
    }

    fn dev_field(&self, field: &str) -> Result<&FieldDef> {
        match &self.s.device {
            Some(dev) => self.field(dev, field),
            None => self.fail("`dev.` used without a device declaration"),
        }
    }

    fn operand(&self, f: &Function, op: &Operand) -> Result<()> {
        match op {
            Operand::Reg { name } if !self.registers.contains(name.as_str()) => {
                self.fail(format!("register `{name}` not declared by any entry"))
            }
            Operand::Slot { slot } => self.slot(f, *slot),
            Operand::Dev { field } => self.dev_field(field).map(|_| ()),
            Operand::FnAddr { function } if !self.s.functions.contains_key(function) => {
                self.fail(format!("unknown function `{function}`"))
            }
            _ => Ok(()),
        }
    }

    fn place(&self, f: &Function, p: &Place) -> Result<()> {
        match p {
            Place::Field {
                base,
                strukt,
                field,
                index,
            } => {
                self.slot(f, *base)?;
                self.field(strukt, field)?;
                index.as_ref().map_or(Ok(()), |i| self.operand(f, i))
            }
            Place::Raw { base, .. } => self.slot(f, *base),
            Place::Frame { base, index } => {
                self.slot(f, *base)?;
                self.operand(f, index)
            }
            Place::Dev { field } => self.dev_field(field).map(|_| ()),
        }
    }

    fn dest(&self, f: &Function, d: &Dest) -> Result<()> {
        match d {
            Dest::Slot { slot } => self.slot(f, *slot),
            Dest::Place { place } => self.place(f, place),
        }
    }

    fn cond(&self, f: &Function, c: &Cond) -> Result<()> {
        self.operand(f, &c.lhs)?;
        self.operand(f, &c.rhs)
    }

    fn stmt(&self, f: &Function, stmt: &Stmt) -> Result<()> {
        match stmt {
            Stmt::Let { dst, value } => {
                self.slot(f, *dst)?;
                self.operand(f, value)
            }
            Stmt::Add { dst, lhs, rhs } => {
                self.slot(f, *dst)?;
                self.operand(f, lhs)?;
                self.operand(f, rhs)
            }
            Stmt::GuestLoad { dst, base, .. } => {
                self.slot(f, *dst)?;
                self.operand(f, base)
            }
            Stmt::Load { dst, src, .. } => {
                self.slot(f, *dst)?;
                self.place(f, src)
            }
            Stmt::Store { dst, value, .. } => {
                self.place(f, dst)?;
                self.operand(f, value)
            }
            Stmt::Translate { dst, gpa, .. } => {
                self.dest(f, dst)?;
                if let Dest::Place {
                    place: Place::Raw { .. } | Place::Frame { .. } | Place::Field { index: Some(_), .. },
                } = dst
                {
                    return self.fail("translate destination must be a slot or a declared field");
                }
                self.operand(f, gpa)
            }
            Stmt::TranslateArray {
                array,
                strukt,
                field,
                count,
                table,
                ..
            } => {
                self.slot(f, *array)?;
                self.field(strukt, field)?;
                self.operand(f, count)?;
                self.operand(f, table)
            }
            Stmt::Alloc { dst, strukt, count } => {
                self.slot(f, *dst)?;
                self.strukt(strukt)?;
                count.as_ref().map_or(Ok(()), |c| self.operand(f, c))
            }
            Stmt::Free { ptr } => self.operand(f, ptr),
            Stmt::Call { target } if !self.s.functions.contains_key(target) => {
                self.fail(format!("unknown function `{target}`"))
            }
            Stmt::Call { .. } | Stmt::EndIf => Ok(()),
            Stmt::CallPtr { target } => self.operand(f, target),
            Stmt::Guard { cond } | Stmt::If { cond } => self.cond(f, cond),
        }
    }
}

fn validate(s: &Scenario, pos: &Positions) -> Result<()> {
    let mut ck = Checker {
        s,
        registers: s
            .entries
            .iter()
            .flat_map(|e| e.registers.iter().map(|r| r.name.as_str()))
            .collect(),
        line: pos.device,
    };
    if let Some(dev) = &s.device {
        ck.strukt(dev)?;
    }
    for f in s.functions.values() {
        let mut depth = 0i64;
        for (i, stmt) in f.body.iter().enumerate() {
            ck.line = pos.stmts[&(f.name.clone(), i)];
            ck.stmt(f, stmt)?;
            match stmt {
                Stmt::If { .. } => depth += 1,
                Stmt::EndIf => {
                    depth -= 1;
                    if depth < 0 {
                        return ck.fail("`endif` without `if`");
                    }
                }
                _ => {}
            }
        }
        if depth != 0 {
            ck.line = pos.functions[&f.name];
            return ck.fail(format!("unterminated `if` in `{}`", f.name));
        }
    }
    for (e, line) in s.entries.iter().zip(&pos.entries) {
        ck.line = *line;
        if !s.functions.contains_key(&e.function) {
            return ck.fail(format!("unknown function `{}`", e.function));
        }
    }
    for (v, line) in s.vulns.iter().zip(&pos.vulns) {
        ck.line = *line;
        let Some(f) = s.functions.get(&v.function) else {
            return ck.fail(format!("unknown function `{}`", v.function));
        };
        if v.stmt >= f.body.len() {
            return ck.fail(format!("statement {} out of range in `{}`", v.stmt, f.name));
        }
        if let Some(c) = &v.when {
            ck.cond(f, c)?;
        }
        if let Some(t) = &v.target {
            ck.dest(f, t)?;
        }
    }
    Ok(())
}
