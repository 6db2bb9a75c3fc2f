//! Every bundled model parses, validates and builds both semantics.

use std::path::PathBuf;

use hypops_core::model::NormMode;
use hypops_core::{assemble_pdmp, build_tdsha, parse_model, pretty_print, CtmcModel};

fn models() -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models");
    let mut out: Vec<(String, String)> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "sccp"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn bundled_models_build() {
    let all = models();
    assert!(all.len() >= 10);
    for (name, text) in &all {
        let p = parse_model(text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let again = parse_model(&pretty_print(&p)).unwrap_or_else(|e| panic!("{name} reprint: {e}"));
        assert_eq!(pretty_print(&again), pretty_print(&p), "{name}");
        CtmcModel::new(&p, None).unwrap_or_else(|e| panic!("{name}: {e}"));
        if p.size.is_some() {
            let t = build_tdsha(&p, NormMode::Limit).unwrap_or_else(|e| panic!("{name}: {e}"));
            let m = assemble_pdmp(&t).unwrap_or_else(|e| panic!("{name}: {e}"));
            m.initial_values().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
