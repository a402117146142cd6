//! Device-model scenarios: AST, textual grammar, and interpreter.

mod ast;
mod interp;
mod parse;
mod print;

pub use ast::*;
pub use interp::{
    run_entry, run_sequence, Crash, GuestAction, InputSequence, InterpError, MemWrite, Terminator, Trace,
    MAX_ARRAY_COUNT,
};
pub use parse::{parse_scenario, ParseError};
pub use print::print_scenario;
