mod common;

use cda_core::corpus::bundled;
use cda_core::extract::build_gadget_db;
use cda_core::machine::MachineConfig;
use cda_core::matcher::extract_pointer_meta;
use cda_core::scenario::run_sequence;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{check_matches, gen_db, gen_meta};

#[test]
fn bundled_pocs_match_oracle() {
    for b in bundled() {
        let s = b.scenario();
        let mut m = MachineConfig::default().build().unwrap();
        let trace = run_sequence(&mut m, &s, &b.poc_file().actions.actions, None).unwrap();
        let meta = extract_pointer_meta(&trace, &s).unwrap();
        if let Err(e) = check_matches(&build_gadget_db(&s), &meta) {
            panic!("{}: {e}", b.name);
        }
    }
}

#[test]
fn empty_db_matches_nothing() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let meta = gen_meta(&mut r);
    assert!(cda_core::matcher::match_gadgets(&Default::default(), &meta).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_dbs_match_oracle(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let db = gen_db(&mut r, 200);
        for _ in 0..4 {
            let meta = gen_meta(&mut r);
            check_matches(&db, &meta).map_err(TestCaseError::fail)?;
        }
    }
}
