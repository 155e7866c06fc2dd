use std::path::Path;

use difpath::harness::{ExperimentConfig, ModelKind};

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    let mut kinds = [0usize; 2];
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(cfg.name.as_deref(), path.file_stem().and_then(|s| s.to_str()));
            kinds[(cfg.model.kind == ModelKind::Ldm) as usize] += 1;
            n += 1;
        }
    }
    assert!(n >= 10, "{n} configs");
    assert_eq!(kinds[0], kinds[1]);
}
