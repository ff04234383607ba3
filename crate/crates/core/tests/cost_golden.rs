mod common;

use std::path::Path;

use common::golden;
use odimo::cost::{diana, ops_proportional, AcceleratorSet};

#[test]
fn table_matches_exact_models() {
    golden::check_table();
}

#[test]
fn cost_eval_matches_table() {
    golden::check_cost_eval(4);
}

#[test]
fn shipped_accelerator_files_match_builtins() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    assert_eq!(AcceleratorSet::load(&dir.join("diana.toml")).unwrap(), diana());
    assert_eq!(AcceleratorSet::load(&dir.join("ops_proportional_idle.toml")).unwrap(), ops_proportional(false));
    assert_eq!(AcceleratorSet::load(&dir.join("ops_proportional_shutdown.toml")).unwrap(), ops_proportional(true));
}
