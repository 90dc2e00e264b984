//! Compiles and runs a C program against the generated header and the
//! static library, so the exported ABI is exercised from C itself.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "dpsct.h"

#define CHECK(call) do { DpsctStatus s_ = (call); if (s_ != DPSCT_STATUS_OK) { \
    fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, dpsct_last_error()); return 1; } } while (0)

int main(void) {
    DpsctConfig *cfg = NULL;
    if (dpsct_config_preset("bogus", &cfg) != DPSCT_STATUS_INVALID_ARGUMENT || cfg != NULL) return 2;
    CHECK(dpsct_config_from_toml(
        "preset = \"sparse\"\n[grid]\nwidth = 16\nheight = 16\npixel_size = 12.0\n"
        "[geometry]\nn_det = 48\ndet_pixel = 16.0\nn_views = 24\n[prior]\nn_samples = 24\n", &cfg));
    CHECK(dpsct_config_set_sampler(cfg, "stable", 10, 1e-3, 1, 7, 2));
    DpsctMeasurement *m = NULL;
    DpsctImage *truth = NULL;
    CHECK(dpsct_simulate(cfg, &m, &truth));
    DpsctEnsemble *e = NULL;
    CHECK(dpsct_reconstruct(cfg, m, NULL, truth, &e));
    DpsctSummary s;
    CHECK(dpsct_ensemble_summary(e, &s));
    double px[256];
    DpsctImage *mean = NULL;
    CHECK(dpsct_ensemble_mean(e, &mean));
    CHECK(dpsct_image_data(mean, px, 256));
    if (dpsct_image_data(mean, px, 255) != DPSCT_STATUS_SHAPE_MISMATCH) return 3;
    printf("%zu %.6e %d\n", dpsct_ensemble_len(e), s.std, isfinite(s.psnr) ? 1 : 0);
    dpsct_image_free(mean);
    dpsct_image_free(truth);
    dpsct_ensemble_free(e);
    dpsct_measurement_free(m);
    dpsct_config_free(cfg);
    return 0;
}
"#;

fn static_lib() -> PathBuf {
    // target/<profile>/deps/c_consumer-… → target/<profile>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libdpsct_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    lib
}

#[test]
fn c_program_links_and_runs() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("consumer.c");
    let bin = dir.path().join("consumer");
    std::fs::write(&src, PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(static_lib())
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .expect("C compiler available");
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "consumer failed: {stdout} {}", String::from_utf8_lossy(&out.stderr));
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert_eq!(fields[0], "2");
    assert!(fields[1].parse::<f64>().unwrap() > 0.0);
    assert_eq!(fields[2], "1");
}

#[test]
fn header_compiles_as_cplusplus() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dpsct.h");
    let cxx = std::env::var("CXX").unwrap_or_else(|_| "c++".into());
    let status = Command::new(cxx)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c++"])
        .arg(&header)
        .status()
        .expect("C++ compiler available");
    assert!(status.success());
}
