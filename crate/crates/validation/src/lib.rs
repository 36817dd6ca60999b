//! Helpers for the acceptance suite in `tests/acceptance.rs`.

use std::path::{Path, PathBuf};
use std::process::Command;

/// Path of an up-to-date `ncsl` binary.
///
/// `$NCSL_BIN` wins when set. Otherwise the binary is (re)built with the
/// cargo that runs the tests, in the profile of the calling test executable.
pub fn ncsl_exe() -> Result<PathBuf, String> {
    if let Some(p) = std::env::var_os("NCSL_BIN") {
        return Ok(PathBuf::from(p));
    }
    let me = std::env::current_exe().map_err(|e| e.to_string())?;
    // target/<profile>/deps/<test>
    let profile_dir = me.parent().and_then(Path::parent).ok_or("unexpected test executable location")?;
    let cargo = std::env::var_os("CARGO").unwrap_or_else(|| "cargo".into());
    let mut cmd = Command::new(cargo);
    cmd.args(["build", "--quiet", "-p", "ncsl", "--bin", "ncsl"]);
    match profile_dir.file_name().and_then(|n| n.to_str()) {
        Some("debug") => {}
        Some("release") => {
            cmd.arg("--release");
        }
        Some(other) => {
            cmd.args(["--profile", other]);
        }
        None => return Err("unexpected test executable location".into()),
    }
    let st = cmd.current_dir(env!("CARGO_MANIFEST_DIR")).status().map_err(|e| format!("running cargo: {e}"))?;
    if !st.success() {
        return Err(format!("building the ncsl binary failed ({st})"));
    }
    let exe = profile_dir.join(format!("ncsl{}", std::env::consts::EXE_SUFFIX));
    if exe.is_file() {
        Ok(exe)
    } else {
        Err(format!("{} missing after build", exe.display()))
    }
}
