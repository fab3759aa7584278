use std::path::Path;

use formnet::harness::config::{RunConfig, PRESETS};

fn shipped(name: &str) -> RunConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"));
    RunConfig::load(Some(&p), &[]).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn shipped_configs_match_presets() {
    for name in PRESETS {
        let file = shipped(name);
        let preset = RunConfig::preset(name).unwrap();
        assert_eq!(
            RunConfig {
                out: preset.out.clone(),
                ..file
            },
            preset,
            "{name}"
        );
    }
}

#[test]
fn desk_builds_a_model_config() {
    let c = shipped("desk");
    let m = c.model_config(200, 13).unwrap();
    assert_eq!((m.backbone.hidden, m.backbone.num_layers, m.gcn.num_layers), (32, 2, 2));
}
