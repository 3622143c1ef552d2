use std::path::Path;
use std::process::Command;

const PROGRAM: &str = r#"
#include "splitleak.h"
int main(void) {
    SlModelConfig cfg = sl_model_config_default();
    SlModel *m = 0;
    if (sl_model_new(&cfg, &m) != SL_STATUS_OK) return 1;
    sl_model_free(m);
    return sl_last_error() == 0;
}
"#;

#[test]
fn header_is_current_and_compiles() {
    let inc = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(inc.join("splitleak.h")).unwrap();
    for f in ["sl_model_new", "sl_client_forward", "sl_defended_forward", "sl_actinv", "sl_paf", "sl_last_error"] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; syntax check skipped");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&inc)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
