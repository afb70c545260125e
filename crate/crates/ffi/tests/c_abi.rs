use std::path::PathBuf;
use std::process::Command;

fn deps_dir() -> PathBuf {
    std::env::current_exe().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header_and_library() {
    let deps = deps_dir();
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let so = ["libleakrb_ffi.so", "libleakrb_ffi.dylib"].iter().map(|n| deps.join(n)).find(|p| p.exists());
    let Some(so) = so else {
        panic!("cdylib not found next to the test binary in {}", deps.display());
    };
    let exe = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("leakrb_smoke");
    let status = Command::new(std::env::var("CC").unwrap_or_else(|_| "cc".into()))
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-I"])
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&so)
        .arg(format!("-Wl,-rpath,{}", deps.display()))
        .args(["-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler");
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "smoke failed: {stdout} {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("ok"));
}

#[test]
fn header_compiles_as_cpp() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let src = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("hdr.cpp");
    std::fs::write(&src, "#include \"leakrb.h\"\nint main() { return lrb_version() == nullptr; }\n").unwrap();
    let status = Command::new("c++")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(crate_dir.join("include"))
        .arg(&src)
        .status()
        .expect("C++ compiler");
    assert!(status.success());
}
