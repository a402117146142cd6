//! Trace-guided input synthesis: mutate guest action sequences until one
//! drives execution through a gadget's exact call chain to its site.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::Gadget;
use crate::machine::{EventKind, MachineConfig, MachineError, MachineState};
use crate::scenario::{run_sequence, GuestAction, InputSequence, MemWrite, Operand, Scenario, Stmt, Terminator, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationWeights {
    pub flip_bit: f64,
    pub dictionary: f64,
    pub append: f64,
    pub delete: f64,
    pub duplicate: f64,
    pub splice: f64,
    pub rewrite_descriptor: f64,
}

impl Default for MutationWeights {
    fn default() -> Self {
        MutationWeights {
            flip_bit: 0.15,
            dictionary: 0.30,
            append: 0.15,
            delete: 0.05,
            duplicate: 0.05,
            splice: 0.10,
            rewrite_descriptor: 0.20,
        }
    }
}

impl MutationWeights {
    fn as_array(&self) -> [f64; 7] {
        [
            self.flip_bit,
            self.dictionary,
            self.append,
            self.delete,
            self.duplicate,
            self.splice,
            self.rewrite_descriptor,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub budget: u64,
    pub seed: u64,
    pub max_actions: usize,
    pub weights: MutationWeights,
    pub guest_size: u64,
    pub heap_size: u64,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            budget: 100_000,
            seed: 0,
            max_actions: 4,
            weights: MutationWeights::default(),
            guest_size: MachineConfig::default().guest_size,
            heap_size: MachineConfig::default().heap_size,
        }
    }
}

impl FuzzConfig {
    pub fn with_seed(seed: u64) -> Self {
        FuzzConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), FuzzError> {
        if self.budget == 0 {
            return Err(FuzzError::ZeroBudget);
        }
        if self.max_actions == 0 {
            return Err(FuzzError::ZeroActions);
        }
        let w = self.weights.as_array();
        let sum: f64 = w.iter().sum();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(FuzzError::Weights(sum));
        }
        MachineState::new(self.guest_size, self.heap_size, self.seed)?;
        Ok(())
    }

    pub fn machine_config(&self) -> MachineConfig {
        MachineConfig {
            guest_size: self.guest_size,
            heap_size: self.heap_size,
            seed: self.seed,
        }
    }

    pub fn machine(&self) -> MachineState {
        self.machine_config().build().expect("validated sizes")
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FuzzError {
    #[error("budget must be positive")]
    ZeroBudget,
    #[error("max_actions must be positive")]
    ZeroActions,
    #[error("mutation weights must be non-negative and sum to 1 (got {0})")]
    Weights(f64),
    #[error("path function `{0}` does not exist")]
    UnknownFunction(String),
    #[error("unknown entry `{0}`")]
    UnknownEntry(String),
    #[error("path does not start at the entry function of `{0}`")]
    PathEntry(String),
    #[error(transparent)]
    Machine(#[from] MachineError),
}

/// Instrumentation for one gadget chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainPlan {
    pub entry: String,
    pub path: Vec<String>,
    /// Bitmap index of each path function.
    pub bitmap: Vec<(String, usize)>,
    pub terminator: Terminator,
}

pub fn instrument_chain(s: &Scenario, g: &Gadget) -> Result<ChainPlan, FuzzError> {
    if let Some(missing) = g.path.iter().find(|f| !s.functions.contains_key(*f)) {
        return Err(FuzzError::UnknownFunction(missing.clone()));
    }
    let entry = s
        .entries
        .iter()
        .find(|e| e.id == g.entry)
        .ok_or_else(|| FuzzError::UnknownEntry(g.entry.clone()))?;
    if g.path.first() != Some(&entry.function) {
        return Err(FuzzError::PathEntry(g.entry.clone()));
    }
    if !s.functions.contains_key(&g.site.function) {
        return Err(FuzzError::UnknownFunction(g.site.function.clone()));
    }
    Ok(ChainPlan {
        entry: g.entry.clone(),
        path: g.path.clone(),
        bitmap: g.path.iter().cloned().enumerate().map(|(i, f)| (f, i)).collect(),
        terminator: Terminator {
            function: g.site.function.clone(),
            stmt: g.site.stmt,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixEval {
    pub prefix: usize,
    /// The full chain was open when the terminator fired.
    pub terminated: bool,
}

/// Shadow-call-stack evaluation: a path function only counts when it is
/// entered directly by the previous path function, one frame deeper,
/// inside a dispatch of the plan's entry.
pub fn evaluate_prefix(trace: &Trace, plan: &ChainPlan) -> PrefixEval {
    let n = plan.path.len();
    let mut best = 0;
    let mut cur = 0usize;
    let mut active = false;
    let mut terminated = false;
    for e in &trace.events {
        match e.kind {
            EventKind::Dispatch => {
                active = e.callee.as_deref() == Some(plan.entry.as_str());
                cur = 0;
            }
            EventKind::Call if active => {
                let depth = e.depth as usize;
                if cur < n && depth == cur + 1 && e.callee.as_deref() == Some(plan.path[cur].as_str()) {
                    let caller_ok = match cur {
                        0 => e.caller.is_none(),
                        _ => e.caller.as_deref() == Some(plan.path[cur - 1].as_str()),
                    };
                    if caller_ok {
                        cur += 1;
                        best = best.max(cur);
                    }
                }
            }
            EventKind::Return if active => {
                let depth = e.depth as usize;
                if depth <= cur {
                    cur = depth - 1;
                }
            }
            EventKind::Sentinel
                if active && n > 0 && cur == n && e.callee.as_deref() == Some(plan.terminator.function.as_str()) =>
            {
                terminated = true;
            }
            _ => {}
        }
    }
    PrefixEval {
        prefix: best,
        terminated,
    }
}

pub fn longest_valid_prefix(trace: &Trace, plan: &ChainPlan) -> usize {
    evaluate_prefix(trace, plan).prefix
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub input: InputSequence,
    pub prefix: usize,
    /// Iteration that produced the input.
    pub iteration: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub best: usize,
}

impl Corpus {
    /// Accepts `input` only if it strictly improves the best prefix.
    pub fn offer(&mut self, input: &InputSequence, prefix: usize, iteration: u64) -> bool {
        if prefix <= self.best {
            return false;
        }
        self.best = prefix;
        self.entries.push(CorpusEntry {
            input: input.clone(),
            prefix,
            iteration,
        });
        true
    }
}

/// Constants that help pass guards: every constant in the scenario and its
/// neighbors, struct sizes, 0, 1 and the last guest byte.
pub fn dictionary(s: &Scenario, guest_size: u64) -> Vec<u64> {
    let mut out = BTreeSet::from([0, 1, guest_size - 1]);
    let mut add = |op: &Operand, around: bool| {
        if let Operand::Const { value } = op {
            out.insert(*value);
            if around {
                out.insert(value.wrapping_add(1));
                out.insert(value.wrapping_sub(1));
            }
        }
    };
    for f in s.functions.values() {
        for st in &f.body {
            match st {
                Stmt::Guard { cond } | Stmt::If { cond } => {
                    add(&cond.lhs, true);
                    add(&cond.rhs, true);
                }
                Stmt::Let { value, .. } => add(value, false),
                Stmt::Add { lhs, rhs, .. } => {
                    add(lhs, false);
                    add(rhs, false);
                }
                _ => {}
            }
        }
    }
    for def in s.structs.values() {
        out.insert(def.size);
    }
    out.into_iter().collect()
}

pub struct Mutator<'a> {
    s: &'a Scenario,
    dictionary: Vec<u64>,
    max_actions: usize,
    guest_size: u64,
    weights: [f64; 7],
}

impl<'a> Mutator<'a> {
    pub fn new(s: &'a Scenario, cfg: &FuzzConfig) -> Self {
        Mutator {
            s,
            dictionary: dictionary(s, cfg.guest_size),
            max_actions: cfg.max_actions,
            guest_size: cfg.guest_size,
            weights: cfg.weights.as_array(),
        }
    }

    fn pick_op(&self, rng: &mut ChaCha8Rng) -> usize {
        let mut x: f64 = rng.gen();
        for (i, w) in self.weights.iter().enumerate() {
            if x < *w {
                return i;
            }
            x -= w;
        }
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(2)
    }

    fn fresh_action(&self, rng: &mut ChaCha8Rng) -> GuestAction {
        match self.s.entries.choose(rng) {
            Some(e) => GuestAction::dispatch(&e.id),
            None => GuestAction::default(),
        }
    }

    /// Picks a dispatching action and one of its entry's registers.
    fn pick_register(&self, x: &InputSequence, rng: &mut ChaCha8Rng) -> Option<(usize, u64)> {
        let candidates: Vec<(usize, u64)> = x
            .actions
            .iter()
            .enumerate()
            .filter_map(|(i, a)| {
                let e = self.s.entries.iter().find(|e| Some(&e.id) == a.entry.as_ref())?;
                let r = e.registers.choose(rng)?;
                Some((i, r.offset))
            })
            .collect();
        candidates.choose(rng).copied()
    }

    /// Applies one weighted operator. Inapplicable operators fall back to
    /// appending a fresh action.
    pub fn mutate(&self, x: &InputSequence, corpus: &Corpus, rng: &mut ChaCha8Rng) -> InputSequence {
        let mut y = x.clone();
        let applied = match self.pick_op(rng) {
            0 => self.pick_register(&y, rng).map(|(i, off)| {
                let bit = rng.gen_range(0..64);
                *y.actions[i].regs.entry(off).or_insert(0) ^= 1 << bit;
            }),
            1 => self.pick_register(&y, rng).map(|(i, off)| {
                let v = *self.dictionary.choose(rng).expect("nonempty dictionary");
                y.actions[i].regs.insert(off, v);
            }),
            2 => None,
            3 => (!y.is_empty()).then(|| {
                let i = rng.gen_range(0..y.len());
                y.actions.remove(i);
            }),
            4 => (!y.is_empty() && y.len() < self.max_actions).then(|| {
                let i = rng.gen_range(0..y.len());
                let a = y.actions[i].clone();
                y.actions.insert(i + 1, a);
            }),
            5 => corpus.entries.choose(rng).map(|other| {
                let cut = rng.gen_range(0..=y.len());
                let from = rng.gen_range(0..=other.input.len());
                y.actions.truncate(cut);
                y.actions.extend(other.input.actions[from..].iter().cloned());
                y.actions.truncate(self.max_actions);
            }),
            _ => (!y.is_empty()).then(|| {
                let i = rng.gen_range(0..y.len());
                let bases: Vec<u64> = y.actions[i]
                    .regs
                    .values()
                    .copied()
                    .filter(|v| *v < self.guest_size)
                    .collect();
                let base = match bases.choose(rng) {
                    Some(b) if rng.gen_bool(0.75) => *b,
                    _ => *self.dictionary.choose(rng).expect("nonempty dictionary"),
                };
                let gpa = ((base.wrapping_add(8 * rng.gen_range(0..8))) % (self.guest_size - 7)) & !7;
                let value = *self.dictionary.choose(rng).expect("nonempty dictionary");
                let mem = &mut y.actions[i].mem;
                mem.retain(|w| w.gpa != gpa);
                mem.push(MemWrite { gpa, value });
            }),
        };
        if applied.is_none() {
            if y.len() >= self.max_actions {
                let i = rng.gen_range(0..y.len());
                y.actions[i] = self.fresh_action(rng);
            } else {
                let at = rng.gen_range(0..=y.len());
                y.actions.insert(at, self.fresh_action(rng));
            }
        }
        y
    }
}

/// Runs `input` on a fresh machine with the chain's terminator armed.
pub fn replay(s: &Scenario, plan: &ChainPlan, input: &InputSequence, cfg: &FuzzConfig) -> (MachineState, Trace) {
    let mut m = cfg.machine();
    let trace =
        run_sequence(&mut m, s, &input.actions, Some(&plan.terminator)).expect("fuzzer only emits declared entries");
    (m, trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub input: Option<InputSequence>,
    pub iterations: u64,
    pub corpus: Corpus,
}

/// Greedily drops actions, descriptor writes and register values that
/// are not needed to reach the terminator.
fn minimize(s: &Scenario, plan: &ChainPlan, input: InputSequence, cfg: &FuzzConfig) -> InputSequence {
    let reaches = |x: &InputSequence| evaluate_prefix(&replay(s, plan, x, cfg).1, plan).terminated;
    let mut x = input;
    for i in (0..x.len()).rev() {
        let mut y = x.clone();
        y.actions.remove(i);
        if reaches(&y) {
            x = y;
        }
    }
    for i in 0..x.len() {
        for j in (0..x.actions[i].mem.len()).rev() {
            let mut y = x.clone();
            y.actions[i].mem.remove(j);
            if reaches(&y) {
                x = y;
            }
        }
        let regs: Vec<u64> = x.actions[i].regs.keys().copied().collect();
        for off in regs {
            let mut y = x.clone();
            y.actions[i].regs.remove(&off);
            if reaches(&y) {
                x = y;
            }
        }
    }
    x
}

pub fn synthesize_report(s: &Scenario, g: &Gadget, cfg: &FuzzConfig) -> Result<SynthReport, FuzzError> {
    cfg.validate()?;
    let plan = instrument_chain(s, g)?;
    let mutator = Mutator::new(s, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut corpus = Corpus::default();
    let empty = InputSequence::default();
    for iteration in 1..=cfg.budget {
        let base = match corpus.entries.last() {
            Some(last) if rng.gen_bool(0.5) => &last.input,
            Some(_) => &corpus.entries.choose(&mut rng).expect("nonempty corpus").input,
            None => &empty,
        };
        let x = mutator.mutate(base, &corpus, &mut rng);
        let (_, trace) = replay(s, &plan, &x, cfg);
        let eval = evaluate_prefix(&trace, &plan);
        corpus.offer(&x, eval.prefix, iteration);
        if eval.terminated {
            return Ok(SynthReport {
                input: Some(minimize(s, &plan, x, cfg)),
                iterations: iteration,
                corpus,
            });
        }
    }
    Ok(SynthReport {
        input: None,
        iterations: cfg.budget,
        corpus,
    })
}

/// Returns the first input whose trace covers the whole chain and fires
/// the terminator, or `None` once the budget is spent.
pub fn synthesize(s: &Scenario, g: &Gadget, cfg: &FuzzConfig) -> Result<Option<InputSequence>, FuzzError> {
    synthesize_report(s, g, cfg).map(|r| r.input)
}
