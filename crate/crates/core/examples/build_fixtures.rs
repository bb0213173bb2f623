//! Regenerates `tests/fixtures/replay/` from `tests/fixtures/replay_script.json`.
//!
//! Run after changing any prompt template:
//! `cargo run -p memeshield-core --example build_fixtures`

#[path = "../tests/support/mod.rs"]
mod support;

fn main() {
    let script = support::load_script();
    let dir = support::replay_dir();
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    let store = support::write_store(&script, &dir);
    println!("wrote {} fixtures to {}", store.digests().unwrap().len(), dir.display());
}
