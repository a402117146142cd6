mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cda_core::corpus::{bundled, bundled_scenario};
use cda_core::exploit::{aim_input, expected_variants, run_exploit, verify, ExploitOptions, Variant};
use cda_core::extract::{build_gadget_db, Placement};
use cda_core::fuzz::{evaluate_prefix, instrument_chain, synthesize_report, FuzzConfig};
use cda_core::machine::{size_class, EventKind, MachineConfig, Note, Region, ResidueLocation};
use cda_core::matcher::ElasticParams;
use cda_core::report::{coverage, CoverageConfig, COVERAGE_AIM};
use cda_core::scenario::{parse_scenario, run_sequence, EntryKind, GuestAction};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn exploits_succeed() -> Outcome {
    let mut slowest = Duration::ZERO;
    for b in bundled() {
        let s = b.scenario();
        let poc = b.poc_file().actions;
        let opts = ExploitOptions::with_seed(0);
        let t = Instant::now();
        let first = run_exploit(&s, &poc, &opts).map_err(|e| format!("{}: {e}", b.name))?;
        let took = t.elapsed();
        slowest = slowest.max(took);
        if took >= Duration::from_secs(60) {
            return Err(format!("{} took {took:?}", b.name));
        }
        if !first.report.success {
            return Err(format!("{}: no expected variant achieved", b.name));
        }
        let second = run_exploit(&s, &poc, &opts).map_err(|e| e.to_string())?;
        if first != second {
            return Err(format!("{}: outcome differs between identical runs", b.name));
        }
        let again = verify(&s, &first.chain, &opts.machine).map_err(|e| e.to_string())?;
        if again != first.report {
            return Err(format!("{}: re-verification differs", b.name));
        }
    }
    Ok(format!("{} scenarios, slowest {slowest:.2?}", bundled().len()))
}

fn goldens_match() -> Outcome {
    let mut union = BTreeSet::new();
    for b in bundled() {
        let s = b.scenario();
        let o = run_exploit(&s, &b.poc_file().actions, &ExploitOptions::with_seed(0)).map_err(|e| e.to_string())?;
        diff_golden(b.name, &outcome_view(&o))?;
        let want = expected_variants(o.meta.deref, o.meta.vuln_kind);
        if o.chain.expected != want || !want.is_subset(&o.report.achieved) {
            return Err(format!(
                "{}: expected {want:?}, achieved {:?}",
                b.name, o.report.achieved
            ));
        }
        union.extend(o.report.achieved);
    }
    if union != Variant::ALL.into_iter().collect() {
        return Err(format!("variants achieved over the corpus: {union:?}"));
    }
    Ok("all goldens equal, every variant achieved".into())
}

fn matcher_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(0x6d61_7463);
    let mut nonempty = 0;
    for i in 0..1000 {
        let db = gen_db(&mut r, 200);
        let meta = gen_meta(&mut r);
        check_matches(&db, &meta).map_err(|e| format!("instance {i}: {e}"))?;
        nonempty += usize::from(!match_oracle(&db, &meta).is_empty());
    }
    for b in bundled() {
        let s = b.scenario();
        let mut m = MachineConfig::default().build().map_err(|e| e.to_string())?;
        let trace = run_sequence(&mut m, &s, &b.poc_file().actions.actions, None).map_err(|e| e.to_string())?;
        let meta = cda_core::matcher::extract_pointer_meta(&trace, &s).map_err(|e| e.to_string())?;
        check_matches(&build_gadget_db(&s), &meta).map_err(|e| format!("{}: {e}", b.name))?;
    }
    Ok(format!(
        "1000 random instances ({nonempty} with matches) and {} bundled",
        bundled().len()
    ))
}

fn extractor_oracle() -> Outcome {
    let mut total = 0;
    for b in bundled() {
        let s = b.scenario();
        let db = build_gadget_db(&s);
        compare_with_oracle(&db, &extract_oracle(&s)).map_err(|e| format!("{}: {e}", b.name))?;
        total += db.len();
    }
    for seed in 0..500 {
        let text = gen_scenario(seed, 12);
        let s = parse_scenario(&text).map_err(|e| format!("seed {seed}: {e}"))?;
        let db = build_gadget_db(&s);
        compare_with_oracle(&db, &extract_oracle(&s)).map_err(|e| format!("seed {seed}: {e}"))?;
        total += db.len();
    }
    Ok(format!(
        "{} bundled + 500 generated scenarios, {total} gadgets",
        bundled().len()
    ))
}

fn fuzzer() -> Outcome {
    let fx = fuzz_fixture();
    let s = bundled_scenario(&fx.scenario).unwrap().scenario();
    let db = build_gadget_db(&s);
    let g = db.get(&fx.gadget).ok_or("fixture gadget missing")?;
    let plan = instrument_chain(&s, g).map_err(|e| e.to_string())?;
    let mut ok = 0;
    let mut guard = Vec::new();
    for seed in 0..fx.seeds {
        let cfg = FuzzConfig::with_seed(seed);
        let rep = synthesize_report(&s, g, &cfg).map_err(|e| e.to_string())?;
        let prefixes: Vec<usize> = rep.corpus.entries.iter().map(|e| e.prefix).collect();
        if prefixes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("seed {seed}: corpus prefixes not increasing {prefixes:?}"));
        }
        if let Some(input) = rep.input {
            let mut m = cfg.machine();
            let trace = run_sequence(&mut m, &s, &input.actions, Some(&plan.terminator)).map_err(|e| e.to_string())?;
            let eval = evaluate_prefix(&trace, &plan);
            if !eval.terminated || eval.prefix != g.path.len() {
                return Err(format!("seed {seed}: synthesized input does not replay"));
            }
            ok += 1;
        }
        if let Some(e) = rep.corpus.entries.iter().find(|e| e.prefix >= 2) {
            guard.push(e.iteration as f64);
        }
    }
    if ok * 100 < 95 * fx.seeds {
        return Err(format!("{ok}/{} seeds synthesized", fx.seeds));
    }
    let mean = guard.iter().sum::<f64>() / guard.len() as f64;
    let bound = (fx.guard_iterations_mean + 3.0 * fx.guard_iterations_sd).min(1000.0);
    if mean > bound {
        return Err(format!(
            "guard passed after {mean:.1} iterations on average, bound {bound:.1}"
        ));
    }
    for seed in 0..10_000u64 {
        let case = gen_decoy(seed);
        let sc = parse_scenario(&case.text).map_err(|e| format!("decoy {seed}: {e}"))?;
        let db = build_gadget_db(&sc);
        let g = db
            .gadgets
            .iter()
            .find(|g| g.entry == "e" && g.path == case.chain)
            .ok_or_else(|| format!("decoy {seed}: chain gadget missing"))?;
        let plan = instrument_chain(&sc, g).map_err(|e| e.to_string())?;
        let mut actions = vec![GuestAction::dispatch("e")
            .reg(0, case.cut as u64)
            .reg(8, 1)
            .reg(0x10, 0x100)];
        if sc.entries.len() > 1 {
            actions.insert(
                seed as usize % 2,
                GuestAction::dispatch("x").reg(0, 99).reg(8, 1).reg(0x10, 0x100),
            );
        }
        let mut m = MachineConfig::with_seed(seed).build().map_err(|e| e.to_string())?;
        let trace = run_sequence(&mut m, &sc, &actions, Some(&plan.terminator)).map_err(|e| e.to_string())?;
        let eval = evaluate_prefix(&trace, &plan);
        if eval.prefix != case.expected_prefix || eval.terminated != case.expected_terminated {
            return Err(format!(
                "decoy {seed}: prefix {} terminated {}, want {} {}\n{}",
                eval.prefix, eval.terminated, case.expected_prefix, case.expected_terminated, case.text
            ));
        }
    }
    Ok(format!(
        "{ok}/{} seeds, guard mean {mean:.1} (bound {bound:.1}), 10000 decoy cases",
        fx.seeds
    ))
}

fn guest_chunk_reuse() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(0x4344_4143);
    for case in 0..1000 {
        let mc = MachineConfig::with_seed(r.gen());
        let mut m = mc.build().map_err(|e| e.to_string())?;
        let class = r.gen_range(1..=64u64) * 16;
        for _ in 0..r.gen_range(0..6) {
            let other = r.gen_range(1..=64u64) * 16;
            let p = m.heap_alloc(other).map_err(|e| e.to_string())?;
            if r.gen_bool(0.5) {
                m.heap_free(p).map_err(|e| e.to_string())?;
            }
        }
        let gpa = r.gen_range(1..(mc.guest_size - class) / 16) * 16;
        m.guest_write(gpa - 16, &class.to_le_bytes())
            .map_err(|e| e.to_string())?;
        let hva = m.space.guest_base + gpa;
        m.heap_free(hva).map_err(|e| e.to_string())?;
        let noted = m
            .log()
            .events()
            .iter()
            .any(|e| e.kind == EventKind::Corrupt && e.note == Note::GuestFree && e.address == hva);
        let size = class - r.gen_range(0..16);
        let got = m.heap_alloc(size).map_err(|e| e.to_string())?;
        if size_class(size) != class || got != hva || !m.hva_in_guest(got) || !noted {
            return Err(format!("case {case}: class {class:#x} gpa {gpa:#x} alloc {got:#x}"));
        }
    }
    Ok("1000 layouts, next allocation always in guest memory".into())
}

fn negative_controls() -> Outcome {
    for b in bundled() {
        let s = b.scenario();
        let opts = ExploitOptions::with_seed(0);
        let o = run_exploit(&s, &b.poc_file().actions, &opts).map_err(|e| e.to_string())?;
        let stripped = o.chain.strip_gadget();
        let report = verify(&s, &stripped, &opts.machine).map_err(|e| e.to_string())?;
        if report.success || report != o.control {
            return Err(format!("{}: control achieved {:?}", b.name, report.achieved));
        }
        if stripped.actions.len() >= o.chain.actions.len() {
            return Err(format!("{}: nothing stripped", b.name));
        }
    }
    Ok(format!("{} controls fail", bundled().len()))
}

fn elastic_coverage() -> Outcome {
    let s = bundled_scenario("virtio_elastic_demo").unwrap().scenario();
    let mut cfg = CoverageConfig::new(64, 0);
    cfg.entry_kind = Some(EntryKind::Mmio);
    let rows = coverage(&s, &cfg).map_err(|e| e.to_string())?;
    let heap: Vec<_> = rows.iter().filter(|r| r.region == Region::Heap).collect();
    if let Some(r) = heap.iter().find(|r| r.covered_fraction != 1.0) {
        return Err(format!(
            "class {:#x} covered {}/{}",
            r.band_start, r.covered, r.positions
        ));
    }
    let db = build_gadget_db(&s);
    let g = db
        .gadgets
        .iter()
        .find(|g| g.trigger == EntryKind::Mmio && matches!(g.placement, Placement::Elastic { .. }))
        .ok_or("no elastic gadget")?;
    let Placement::Elastic {
        elem_size,
        field_offset,
        ..
    } = g.placement
    else {
        unreachable!()
    };
    let input = cda_core::fuzz::synthesize(&s, g, &cfg.fuzz)
        .map_err(|e| e.to_string())?
        .ok_or("elastic gadget not synthesized")?;
    for n in 1..=64u64 {
        let aimed = aim_input(&s, g, &input, COVERAGE_AIM, Some(ElasticParams { n, k: 0 }));
        let mut m = cfg.fuzz.machine();
        run_sequence(&mut m, &s, &aimed.actions, None).map_err(|e| e.to_string())?;
        let got: BTreeSet<u64> = m
            .snapshot_residues(Region::Heap)
            .into_iter()
            .filter_map(|r| match r.location {
                ResidueLocation::Heap { class, offset, .. } if class == elem_size * n => Some(offset),
                _ => None,
            })
            .collect();
        let want: BTreeSet<u64> = (0..n).map(|k| field_offset + elem_size * k).collect();
        if got != want {
            return Err(format!("n = {n}: residue offsets {got:?}, want {want:?}"));
        }
    }
    Ok(format!(
        "{} heap classes at 1.0, offsets {field_offset}+{elem_size}k for n <= 64",
        heap.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("exploit succeeds on every corpus scenario", exploits_succeed),
        ("outcomes match goldens", goldens_match),
        ("matcher agrees with brute-force oracle", matcher_oracle),
        ("extractor agrees with exhaustive oracle", extractor_oracle),
        ("fuzzer reaches gadgets and verifies callers", fuzzer),
        ("freed guest fake chunk is reallocated", guest_chunk_reuse),
        ("negative controls fail", negative_controls),
        ("elastic coverage is complete", elastic_coverage),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match res {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail} [{:.2?}]", i + 1, t.elapsed()),
            Err(e) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {e}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
