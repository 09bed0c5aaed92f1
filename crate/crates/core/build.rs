use std::process::Command;

fn main() {
    let describe = Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|out| out.status.success())
        .and_then(|out| String::from_utf8(out.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let version = match describe {
        Some(rev) if rev.starts_with('v') => rev,
        Some(rev) => format!("v{}-g{}", env!("CARGO_PKG_VERSION"), rev),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    };
    println!("cargo:rustc-env=CDCIT_VERSION={version}");
    println!("cargo:rerun-if-changed=build.rs");
    println!("cargo:rerun-if-changed=../../.git/HEAD");
}
