use std::path::Path;
use std::process::Command;

const HEADER: &str = include_str!("../include/selfgnn.h");

#[test]
fn header_declares_every_export() {
    for symbol in [
        "sg_model_open",
        "sg_model_free",
        "sg_model_counts",
        "sg_model_score",
        "sg_model_top_k",
        "sg_model_evaluate",
        "sg_last_error",
        "sg_version",
        "typedef struct SgModel SgModel",
        "SG_STATUS_NOT_FOUND = 3",
    ] {
        assert!(HEADER.contains(symbol), "missing {symbol}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let src = "#include \"selfgnn.h\"\nint main(void) { SgModel *m = 0; sg_model_free(m); return SG_STATUS_OK; }\n";
    let dir = tempfile::tempdir().unwrap();
    for (compiler, file) in [("cc", "probe.c"), ("c++", "probe.cpp")] {
        let path = dir.path().join(file);
        std::fs::write(&path, src).unwrap();
        let Ok(out) = Command::new(compiler)
            .arg("-fsyntax-only")
            .arg("-Wall")
            .arg("-Werror")
            .arg("-I")
            .arg(&include)
            .arg(&path)
            .output()
        else {
            eprintln!("{compiler} not available; skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
