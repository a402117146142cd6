use std::fmt::{self, Write as _};

use super::ast::*;

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg { name } => write!(f, "${name}"),
            Operand::Const { value } => write!(f, "{value:#x}"),
            Operand::Slot { slot } => write!(f, "%{slot}"),
            Operand::Dev { field } => write!(f, "dev.{field}"),
            Operand::FnAddr { function } => write!(f, "@{function}"),
        }
    }
}

impl fmt::Display for Place {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Place::Field {
                base,
                strukt,
                field,
                index,
            } => {
                write!(f, "%{base}->{strukt}.{field}")?;
                match index {
                    Some(i) => write!(f, "[{i}]"),
                    None => Ok(()),
                }
            }
            Place::Raw { base, offset } => write!(f, "%{base}+{offset:#x}"),
            Place::Frame { base, index } => write!(f, "%{base}[{index}]"),
            Place::Dev { field } => write!(f, "dev.{field}"),
        }
    }
}

impl fmt::Display for Dest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dest::Slot { slot } => write!(f, "%{slot}"),
            Dest::Place { place } => place.fmt(f),
        }
    }
}

impl fmt::Display for Cond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.lhs, self.op.symbol(), self.rhs)
    }
}

impl fmt::Display for Stmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dma = |d: bool| if d { "dma " } else { "" };
        match self {
            Stmt::Let { dst, value } => write!(f, "let %{dst} = {value}"),
            Stmt::Add { dst, lhs, rhs } => write!(f, "add %{dst} = {lhs} + {rhs}"),
            Stmt::GuestLoad { dst, base, offset } => write!(f, "gload %{dst} = {base} + {offset:#x}"),
            Stmt::Load { dst, src, dma: d } => write!(f, "load {}%{dst} = {src}", dma(*d)),
            Stmt::Store { dst, value, dma: d } => write!(f, "store {}{dst} = {value}", dma(*d)),
            Stmt::Translate { dst, gpa, family } => write!(f, "translate {dst} = {gpa} family {family}"),
            Stmt::TranslateArray {
                array,
                strukt,
                field,
                count,
                table,
                family,
            } => write!(
                f,
                "translate_array %{array} {strukt}.{field} count {count} table {table} family {family}"
            ),
            Stmt::Alloc { dst, strukt, count } => {
                write!(f, "alloc %{dst} {strukt}")?;
                match count {
                    Some(c) => write!(f, " * {c}"),
                    None => Ok(()),
                }
            }
            Stmt::Free { ptr } => write!(f, "free {ptr}"),
            Stmt::Call { target } => write!(f, "call {target}"),
            Stmt::CallPtr { target } => write!(f, "callptr {target}"),
            Stmt::Guard { cond } => write!(f, "guard {cond}"),
            Stmt::If { cond } => write!(f, "if {cond}"),
            Stmt::EndIf => f.write_str("endif"),
        }
    }
}

/// Renders a scenario in the textual grammar accepted by
/// [`parse_scenario`](super::parse_scenario).
pub fn print_scenario(s: &Scenario) -> String {
    let mut out = String::new();
    for def in s.structs.values() {
        let _ = writeln!(out, "struct {} size {:#x}", def.name, def.size);
        for field in &def.fields {
            let _ = write!(out, "  field {} {:#x}", field.name, field.offset);
            if field.len != 1 {
                let _ = write!(out, " len {}", field.len);
            }
            if field.critical {
                out.push_str(" critical");
            }
            out.push('\n');
        }
        out.push_str("end\n");
    }
    if let Some(dev) = &s.device {
        let _ = writeln!(out, "device {dev}");
    }
    for func in s.functions.values() {
        let _ = writeln!(out, "fn {} slots {}", func.name, func.slots);
        let mut indent = 1;
        for stmt in &func.body {
            if matches!(stmt, Stmt::EndIf) {
                indent -= 1;
            }
            let _ = writeln!(out, "{}{stmt}", "  ".repeat(indent));
            if matches!(stmt, Stmt::If { .. }) {
                indent += 1;
            }
        }
        out.push_str("end\n");
    }
    for e in &s.entries {
        let _ = write!(out, "entry {} {} fn {}", e.id, e.kind, e.function);
        if !e.registers.is_empty() {
            out.push_str(" regs");
            for r in &e.registers {
                let _ = write!(out, " {}@{:#x}", r.name, r.offset);
            }
        }
        out.push('\n');
    }
    for v in &s.vulns {
        let _ = write!(out, "vuln {} at {}:{} deref {}", v.kind, v.function, v.stmt, v.deref);
        if let Some(c) = &v.when {
            let _ = write!(out, " when {c}");
        }
        if let Some(t) = &v.target {
            let _ = write!(out, " target {t}");
        }
        if let Some(a) = v.aim {
            let _ = write!(out, " aim {a:#x}");
        }
        out.push('\n');
    }
    out
}
