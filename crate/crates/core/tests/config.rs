use dpsct::config::{ScenarioConfig, PRESETS};
use dpsct::sampler::SamplerMode;

#[test]
fn presets_validate_and_round_trip() {
    for name in PRESETS {
        let cfg = ScenarioConfig::preset(name).unwrap();
        cfg.validate().unwrap();
        assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
    assert!(ScenarioConfig::preset("ultra").is_err());
}

#[test]
fn keys_override_the_named_preset() {
    let cfg = ScenarioConfig::from_toml("preset = \"sparse\"\n[sampler]\neta = 0.5\nmode = \"baseline\"\n").unwrap();
    assert_eq!(cfg.geometry.n_views, 24);
    assert_eq!(cfg.sampler.eta, 0.5);
    assert_eq!(cfg.sampler_config().unwrap().mode, SamplerMode::Baseline);
    assert_eq!(cfg.sampler.t_prime, ScenarioConfig::sparse().sampler.t_prime);
    let default = ScenarioConfig::from_toml("").unwrap();
    assert_eq!(default, ScenarioConfig::low_mas());
}

#[test]
fn unknown_keys_are_all_reported() {
    let err = ScenarioConfig::from_toml("[grid]\nwidht = 3\n[sampler]\nlr = 1.0\n").unwrap_err().to_string();
    assert!(err.contains("grid.widht") && err.contains("sampler.lr"), "{err}");
}

#[test]
fn invalid_values_are_rejected() {
    for text in [
        "preset = 3\n",
        "preset = \"nope\"\n",
        "[grid]\npixel_size = -1.0\n",
        "[geometry]\nn_views = 0\n",
        "[sampler]\nmode = \"fast\"\n",
        "[sampler]\nt_prime = 0\n",
        "[prior]\nmode = \"student\"\n",
        "[phantom]\nfamily = \"skull\"\n",
        "[output]\nwindow = [0.04, 0.0]\n",
        "[sweep]\neta = []\n",
        "[grid\n",
    ] {
        assert!(ScenarioConfig::from_toml(text).is_err(), "{text}");
    }
}

#[test]
fn relative_phantom_files_resolve_against_the_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("disk.toml"),
        "[[ellipse]]\ncenter = [0.0, 0.0]\naxes = [50.0, 50.0]\nvalue = 0.02\n",
    )
    .unwrap();
    let cfg_path = dir.path().join("c.toml");
    std::fs::write(&cfg_path, "[phantom]\nfile = \"disk.toml\"\n").unwrap();
    let cfg = ScenarioConfig::load(&cfg_path).unwrap();
    assert_eq!(cfg.phantom.file.as_deref(), Some(dir.path().join("disk.toml").as_path()));
    let truth = cfg.truth().unwrap();
    assert!((truth.max() - 0.02).abs() < 1e-15);
}
