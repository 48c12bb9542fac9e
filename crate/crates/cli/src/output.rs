//! CSV emission. Floats use Rust's shortest round-trip formatting, which is
//! locale independent and always uses `.` as the decimal separator.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use flowmo_core::sampler::TraceRow;

use crate::error::CliError;

pub const TRACE_HEADER: &str = "step,t,sigma,loss_before,loss_after,argmax_w,argmax_h,refined";

pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn trace_line(r: &TraceRow) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{},{},{},{},{},{},{},{}",
        r.step, r.t, r.sigma, r.loss_before, r.loss_after, r.argmax_w, r.argmax_h, r.refined
    );
    s
}
