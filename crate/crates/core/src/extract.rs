//! Static gadget extraction: translation sites, GPA-source taint, guest
//! reachable call paths and residue placement.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::{FRAME_STRIDE_SLOTS, SLOT_BYTES};
use crate::scenario::{Dest, EntryKind, Function, Operand, Place, Scenario, Stmt};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub function: String,
    pub stmt: usize,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.function, self.stmt)
    }
}

/// Where a GPA operand comes from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Register {
        name: String,
    },
    Constant {
        value: u64,
    },
    /// Value derived from host state only.
    Host,
    /// Word read from guest memory at `base + offset + stride * i`.
    GuestField {
        base: Box<Origin>,
        offset: u64,
        stride: u64,
    },
}

impl Origin {
    pub fn guest_influenced(&self) -> bool {
        matches!(self, Origin::Register { .. } | Origin::GuestField { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    /// `offset` is the byte offset of the slot from the stack origin.
    Stack {
        slot: usize,
        offset: u64,
    },
    Heap {
        strukt: String,
        size: u64,
        offset: u64,
    },
    /// Array of `n` elements of `elem_size` bytes with the residue at
    /// `field_offset` inside each element: chunk size `elem_size * n`,
    /// residue offsets `field_offset + elem_size * k` for `k < n`.
    Elastic {
        strukt: String,
        elem_size: u64,
        field_offset: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gadget {
    pub id: String,
    pub entry: String,
    pub site: Site,
    pub src: Origin,
    pub path: Vec<String>,
    pub depth: usize,
    pub placement: Placement,
    pub trigger: EntryKind,
    pub family: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GadgetDb {
    pub gadgets: Vec<Gadget>,
    #[serde(skip)]
    index_by_depth: BTreeMap<usize, Vec<String>>,
    #[serde(skip)]
    index_by_layout: BTreeMap<(u64, u64), Vec<String>>,
}

impl GadgetDb {
    pub fn new(gadgets: Vec<Gadget>) -> Self {
        let mut db = GadgetDb {
            gadgets,
            ..Default::default()
        };
        db.reindex();
        db
    }

    /// Rebuilds the depth and layout indices from the gadget list.
    pub fn reindex(&mut self) {
        self.index_by_depth.clear();
        self.index_by_layout.clear();
        for g in &self.gadgets {
            self.index_by_depth.entry(g.depth).or_default().push(g.id.clone());
            if let Placement::Heap { size, offset, .. } = g.placement {
                self.index_by_layout
                    .entry((size, offset))
                    .or_default()
                    .push(g.id.clone());
            }
        }
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        let mut db: GadgetDb = serde_json::from_str(text)?;
        db.reindex();
        Ok(db)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("gadget db serializes")
    }

    pub fn len(&self) -> usize {
        self.gadgets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gadgets.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Gadget> {
        self.gadgets.iter().find(|g| g.id == id)
    }

    pub fn index_by_depth(&self) -> &BTreeMap<usize, Vec<String>> {
        &self.index_by_depth
    }

    pub fn index_by_layout(&self) -> &BTreeMap<(u64, u64), Vec<String>> {
        &self.index_by_layout
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("site {0} is not a translation statement")]
    NotASite(Site),
    #[error("translate destination at {0} has no declared layout")]
    UndeclaredDestination(Site),
}

/// Every `translate`/`translate_array` statement, in function then
/// statement order.
pub fn find_translation_sites(s: &Scenario) -> Vec<Site> {
    s.functions
        .values()
        .flat_map(|f| {
            f.body
                .iter()
                .enumerate()
                .filter(|(_, st)| matches!(st, Stmt::Translate { .. } | Stmt::TranslateArray { .. }))
                .map(|(i, _)| Site {
                    function: f.name.clone(),
                    stmt: i,
                })
        })
        .collect()
}

struct Taint<'a> {
    s: &'a Scenario,
    visiting: BTreeSet<(String, String)>,
}

impl Taint<'_> {
    fn operand(&mut self, f: &Function, at: usize, op: &Operand) -> Origin {
        match op {
            Operand::Reg { name } => Origin::Register { name: name.clone() },
            Operand::Const { value } => Origin::Constant { value: *value },
            Operand::FnAddr { .. } => Origin::Host,
            Operand::Dev { field } => match &self.s.device {
                Some(dev) => self.field(&dev.clone(), field),
                None => Origin::Host,
            },
            Operand::Slot { slot } => self.slot(f, at, *slot),
        }
    }

    /// Origin of `slot` just before statement `at`, from its last textual
    /// definition.
    fn slot(&mut self, f: &Function, at: usize, slot: usize) -> Origin {
        for j in (0..at).rev() {
            let origin = match &f.body[j] {
                Stmt::Let { dst, value } if *dst == slot => self.operand(f, j, value),
                Stmt::Add { dst, lhs, rhs } if *dst == slot => {
                    let a = self.operand(f, j, lhs);
                    let b = self.operand(f, j, rhs);
                    match (a, b) {
                        (a, _) if a.guest_influenced() => a,
                        (_, b) if b.guest_influenced() => b,
                        (Origin::Constant { value: x }, Origin::Constant { value: y }) => Origin::Constant {
                            value: x.wrapping_add(y),
                        },
                        _ => Origin::Host,
                    }
                }
                Stmt::GuestLoad { dst, base, offset } if *dst == slot => Origin::GuestField {
                    base: Box::new(self.operand(f, j, base)),
                    offset: *offset,
                    stride: 0,
                },
                Stmt::Load { dst, src, .. } if *dst == slot => match src {
                    Place::Field { strukt, field, .. } => self.field(strukt, field),
                    Place::Dev { field } => match &self.s.device {
                        Some(dev) => self.field(&dev.clone(), field),
                        None => Origin::Host,
                    },
                    Place::Raw { .. } | Place::Frame { .. } => Origin::Host,
                },
                Stmt::Translate {
                    dst: Dest::Slot { slot: d },
                    ..
                } if *d == slot => Origin::Host,
                Stmt::Alloc { dst, .. } if *dst == slot => Origin::Host,
                _ => continue,
            };
            return origin;
        }
        Origin::Host
    }

    /// Flow-insensitive summary of values ever stored into `strukt.field`.
    fn field(&mut self, strukt: &str, field: &str) -> Origin {
        let key = (strukt.to_string(), field.to_string());
        if !self.visiting.insert(key.clone()) {
            return Origin::Host;
        }
        let s = self.s;
        let mut found = Origin::Host;
        'outer: for f in s.functions.values() {
            for (j, st) in f.body.iter().enumerate() {
                let Stmt::Store { dst, value, .. } = st else { continue };
                let hit = match dst {
                    Place::Field {
                        strukt: st_name,
                        field: fl,
                        ..
                    } => st_name == strukt && fl == field,
                    Place::Dev { field: fl } => s.device.as_deref() == Some(strukt) && fl == field,
                    _ => false,
                };
                if hit {
                    let o = self.operand(f, j, value);
                    if o.guest_influenced() {
                        found = o;
                        break 'outer;
                    }
                }
            }
        }
        self.visiting.remove(&key);
        found
    }
}

/// Backward taint of the GPA operand at `site`; `None` when it derives
/// only from constants or host state.
pub fn trace_gpa_source(s: &Scenario, site: &Site) -> Option<Origin> {
    let f = s.functions.get(&site.function)?;
    let mut taint = Taint {
        s,
        visiting: BTreeSet::new(),
    };
    let origin = match f.body.get(site.stmt)? {
        Stmt::Translate { gpa, .. } => taint.operand(f, site.stmt, gpa),
        Stmt::TranslateArray { table, .. } => Origin::GuestField {
            base: Box::new(taint.operand(f, site.stmt, table)),
            offset: 0,
            stride: 16,
        },
        _ => return None,
    };
    origin.guest_influenced().then_some(origin)
}

/// Origin of an arbitrary operand evaluated at `function`/`stmt`.
pub fn trace_operand(s: &Scenario, function: &str, stmt: usize, op: &Operand) -> Origin {
    let Some(f) = s.functions.get(function) else {
        return Origin::Host;
    };
    Taint {
        s,
        visiting: BTreeSet::new(),
    }
    .operand(f, stmt, op)
}

/// Static call graph: caller to sorted, deduplicated callees.
pub fn call_graph(s: &Scenario) -> BTreeMap<&str, BTreeSet<&str>> {
    s.functions
        .values()
        .map(|f| (f.name.as_str(), f.callees().collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallPath {
    pub entry: String,
    pub functions: Vec<String>,
}

/// All simple entry-to-site call chains, per entry in declaration order.
pub fn find_call_paths(s: &Scenario, site: &Site) -> Vec<CallPath> {
    fn dfs<'a>(
        graph: &BTreeMap<&'a str, BTreeSet<&'a str>>,
        target: &str,
        stack: &mut Vec<&'a str>,
        out: &mut Vec<Vec<String>>,
    ) {
        let cur = *stack.last().expect("nonempty path");
        if cur == target {
            out.push(stack.iter().map(|f| f.to_string()).collect());
            return;
        }
        for next in graph.get(cur).into_iter().flatten() {
            if !stack.contains(next) {
                stack.push(next);
                dfs(graph, target, stack, out);
                stack.pop();
            }
        }
    }

    let graph = call_graph(s);
    let mut paths = Vec::new();
    for e in &s.entries {
        let Some((root, _)) = graph.get_key_value(e.function.as_str()) else {
            continue;
        };
        let mut found = Vec::new();
        dfs(&graph, &site.function, &mut vec![*root], &mut found);
        found.sort();
        paths.extend(found.into_iter().map(|functions| CallPath {
            entry: e.id.clone(),
            functions,
        }));
    }
    paths
}

/// Computes depth and placement for a gadget whose site and path are set.
pub fn annotate_placement(s: &Scenario, mut g: Gadget) -> Result<Gadget, ExtractError> {
    g.depth = g.path.len();
    let stmt = s
        .functions
        .get(&g.site.function)
        .and_then(|f| f.body.get(g.site.stmt))
        .ok_or_else(|| ExtractError::NotASite(g.site.clone()))?;
    let undeclared = || ExtractError::UndeclaredDestination(g.site.clone());
    let heap = |strukt: &str, field: &str| -> Option<Placement> {
        let def = s.structs.get(strukt)?;
        Some(Placement::Heap {
            strukt: strukt.to_string(),
            size: def.size,
            offset: def.field(field)?.offset,
        })
    };
    g.placement = match stmt {
        Stmt::Translate { dst, family, .. } => {
            g.family = family.clone();
            match dst {
                Dest::Slot { slot } => Placement::Stack {
                    slot: *slot,
                    offset: ((g.depth.saturating_sub(1) * FRAME_STRIDE_SLOTS + slot) as u64) * SLOT_BYTES,
                },
                Dest::Place {
                    place:
                        Place::Field {
                            strukt,
                            field,
                            index: None,
                            ..
                        },
                } => heap(strukt, field).ok_or_else(undeclared)?,
                Dest::Place {
                    place: Place::Dev { field },
                } => heap(s.device.as_deref().ok_or_else(undeclared)?, field).ok_or_else(undeclared)?,
                Dest::Place { .. } => return Err(undeclared()),
            }
        }
        Stmt::TranslateArray {
            strukt, field, family, ..
        } => {
            g.family = family.clone();
            let def = s.structs.get(strukt).ok_or_else(undeclared)?;
            Placement::Elastic {
                strukt: strukt.clone(),
                elem_size: def.size,
                field_offset: def.field(field).ok_or_else(undeclared)?.offset,
            }
        }
        _ => return Err(ExtractError::NotASite(g.site.clone())),
    };
    Ok(g)
}

/// Gadget database: one gadget per guest-influenced site and simple path,
/// ordered by entry id, site, then path.
pub fn build_gadget_db(s: &Scenario) -> GadgetDb {
    let mut gadgets = Vec::new();
    for site in find_translation_sites(s) {
        let Some(src) = trace_gpa_source(s, &site) else {
            continue;
        };
        let mut per_entry: BTreeMap<String, usize> = BTreeMap::new();
        for path in find_call_paths(s, &site) {
            let entry = s
                .entries
                .iter()
                .find(|e| e.id == path.entry)
                .expect("path entry exists");
            let k = per_entry.entry(entry.id.clone()).or_default();
            let draft = Gadget {
                id: format!("{}/{}/{}", entry.id, site, k),
                entry: entry.id.clone(),
                site: site.clone(),
                src: src.clone(),
                path: path.functions,
                depth: 0,
                placement: Placement::Stack { slot: 0, offset: 0 },
                trigger: entry.kind,
                family: String::new(),
            };
            *k += 1;
            if let Ok(g) = annotate_placement(s, draft) {
                gadgets.push(g);
            }
        }
    }
    gadgets.sort_by(|a, b| (&a.entry, &a.site, &a.path).cmp(&(&b.entry, &b.site, &b.path)));
    GadgetDb::new(gadgets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::parse_scenario;

    const TEXT: &str = "\
struct Buf size 0x40
  field addr 0x8
end
struct Iov size 0x10
  field base 0x8
end
device Buf
fn a slots 4
  gload %0 = $desc + 0x8
  translate %1 = %0 family dma
  translate %2 = 0x100 family dma
  call b
  call a
end
fn b slots 4
  load %0 = dev.addr
  translate dev.addr = %0 family pci
  alloc %1 Iov * $n
  translate_array %1 Iov.base count $n table $desc family elastic
end
fn c slots 1
  call b
  store dev.addr = $raw
end
entry e1 mmio fn a regs desc@0x0 n@0x8
entry e2 timer fn c regs raw@0x0
";

    #[test]
    fn sites_include_untainted() {
        let s = parse_scenario(TEXT).unwrap();
        let sites: Vec<String> = find_translation_sites(&s).iter().map(|x| x.to_string()).collect();
        assert_eq!(sites, ["a#1", "a#2", "b#1", "b#3"]);
    }

    #[test]
    fn taint_origins() {
        let s = parse_scenario(TEXT).unwrap();
        let site = |f: &str, i| Site {
            function: f.into(),
            stmt: i,
        };
        assert_eq!(
            trace_gpa_source(&s, &site("a", 1)),
            Some(Origin::GuestField {
                base: Box::new(Origin::Register { name: "desc".into() }),
                offset: 8,
                stride: 0
            })
        );
        assert_eq!(trace_gpa_source(&s, &site("a", 2)), None);
        assert_eq!(
            trace_gpa_source(&s, &site("b", 1)),
            Some(Origin::Register { name: "raw".into() })
        );
    }

    #[test]
    fn recursion_is_cut_and_entries_split_paths() {
        let s = parse_scenario(TEXT).unwrap();
        let paths = find_call_paths(
            &s,
            &Site {
                function: "b".into(),
                stmt: 1,
            },
        );
        let got: Vec<(String, Vec<String>)> = paths.into_iter().map(|p| (p.entry, p.functions)).collect();
        assert_eq!(
            got,
            vec![
                ("e1".into(), vec!["a".into(), "b".into()]),
                ("e2".into(), vec!["c".into(), "b".into()]),
            ]
        );
    }

    #[test]
    fn db_placements() {
        let s = parse_scenario(TEXT).unwrap();
        let db = build_gadget_db(&s);
        let ids: Vec<&str> = db.gadgets.iter().map(|g| g.id.as_str()).collect();
        assert_eq!(ids, ["e1/a#1/0", "e1/b#1/0", "e1/b#3/0", "e2/b#1/0", "e2/b#3/0"]);
        assert_eq!(db.gadgets[0].placement, Placement::Stack { slot: 1, offset: 8 });
        assert_eq!(
            db.gadgets[1].placement,
            Placement::Heap {
                strukt: "Buf".into(),
                size: 0x40,
                offset: 8
            }
        );
        assert_eq!(
            db.gadgets[2].placement,
            Placement::Elastic {
                strukt: "Iov".into(),
                elem_size: 0x10,
                field_offset: 8
            }
        );
        assert_eq!(db.gadgets[3].trigger, EntryKind::TimerBh);
        assert_eq!(db.index_by_depth()[&2].len(), 4);
        assert_eq!(db.index_by_layout()[&(0x40, 8)], ["e1/b#1/0", "e2/b#1/0"]);
    }

    #[test]
    fn db_json_round_trip() {
        let s = parse_scenario(TEXT).unwrap();
        let db = build_gadget_db(&s);
        assert_eq!(GadgetDb::from_json(&db.to_json()).unwrap(), db);
    }

    #[test]
    fn no_translate_no_gadgets() {
        let s = parse_scenario("fn a slots 0\nend\nentry e mmio fn a\n").unwrap();
        assert!(find_translation_sites(&s).is_empty());
        assert!(build_gadget_db(&s).is_empty());
    }
}
