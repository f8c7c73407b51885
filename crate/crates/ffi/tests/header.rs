use std::path::PathBuf;
use std::process::Command;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_every_export() {
    let src = std::fs::read_to_string(dir().join("src/lib.rs")).unwrap();
    let header = std::fs::read_to_string(dir().join("include/premod.h")).unwrap();
    let mut names = Vec::new();
    let mut lines = src.lines();
    while let Some(l) = lines.next() {
        if l.trim() == "#[no_mangle]" {
            let sig = lines.next().unwrap();
            let name = sig.split("fn ").nth(1).unwrap().split('(').next().unwrap();
            names.push(name.to_string());
        }
    }
    assert!(names.len() >= 15, "{names:?}");
    for n in &names {
        assert!(header.contains(&format!("{n}(")), "{n} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let probe = r#"
#include "premod.h"
int main(void) {
    PremodRecal *r = 0;
    PremodStatus s = premod_recal_new(0.1, 0.01, &r);
    premod_recal_free(r);
    return s == PREMOD_STATUS_OK ? 0 : (int)s;
}
"#;
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("probe.c");
    std::fs::write(&c, probe).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir().join("include"))
        .arg(&c)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "cc rejected the header"),
        Err(e) => eprintln!("skipping: no C compiler ({e})"),
    }
}
