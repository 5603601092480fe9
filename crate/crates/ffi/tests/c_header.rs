//! Compiles and runs a small C program against the generated header and the
//! static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "online_shield.h"

int main(void) {
    OsArena *arena = NULL;
    if (os_arena_new(".....\n.###.\n.....\n.###.\n.....\n", &arena) != OS_STATUS_OK) return 1;
    const char *state = "{\"positions\":[\"1,1\",\"5,5\"],\"queues\":[[\"1,1\",\"1,2\",\"1,3\"],[]]}";
    char *json = NULL;
    if (os_check(arena, state, NULL, 0, 10, 1.0, &json) != OS_STATUS_OK) return 2;
    if (strstr(json, "\"tasks\"") == NULL) return 3;
    os_string_free(json);
    if (os_check(arena, state, NULL, 0, 10, 7.0, &json) != OS_STATUS_INVALID_ARGUMENT) return 4;
    if (strlen(os_last_error()) == 0) return 5;
    os_arena_free(arena);
    puts("ok");
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipped");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libonline_shield_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile_dir();
    let src = dir.join("smoke.c");
    let bin = dir.join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}

fn tempfile_dir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("online-shield-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
