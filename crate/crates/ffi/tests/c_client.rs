use std::path::{Path, PathBuf};
use std::process::Command;

const HEADER: &str = include_str!("../include/asppnet.h");

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_declares_the_api() {
    for name in [
        "asppnet_network_build",
        "asppnet_network_load",
        "asppnet_network_save",
        "asppnet_network_free",
        "asppnet_network_predict",
        "asppnet_metrics",
        "asppnet_cosine_lr",
        "asppnet_last_error",
        "typedef struct AsppnetNetwork AsppnetNetwork",
        "ASPPNET_STATUS_OK = 0",
    ] {
        assert!(HEADER.contains(name), "{name}");
    }
}

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "asppnet.h"

int main(void) {
    AsppnetNetwork *net = NULL;
    if (asppnet_network_build("att_unet_aspp", 2, 4, 16, 1, &net) != ASPPNET_STATUS_OK) return 10;
    size_t gates = 0;
    asppnet_network_gate_count(net, &gates);
    float x[256], p[256];
    for (int i = 0; i < 256; i++) x[i] = (float)(i % 5) / 5.0f;
    if (asppnet_network_predict(net, x, 1, 16, 16, p) != ASPPNET_STATUS_OK) return 11;
    for (int i = 0; i < 256; i++) if (p[i] < 0.0f || p[i] > 1.0f) return 12;
    asppnet_network_free(net);
    if (asppnet_network_build("bogus", 2, 4, 16, 1, &net) != ASPPNET_STATUS_CONFIG) return 13;
    char msg[128];
    asppnet_last_error(msg, sizeof msg);
    if (strstr(msg, "bogus") == NULL) return 14;
    printf("gates=%zu\n", gates);
    return 0;
}
"#;

#[test]
fn c_program_links_against_static_library() {
    let lib = target_dir().join("libasppnet_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("client");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "gates=2");
}
