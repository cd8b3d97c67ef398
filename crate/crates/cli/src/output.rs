use std::fs;
use std::path::Path;

use anyhow::Context;
use po2quant::harness::MetricSeries;
use serde::Serialize;

/// `<dir>/<name>.csv` with columns `step,value`.
pub fn write_series(dir: &Path, series: &MetricSeries) -> anyhow::Result<()> {
    let path = dir.join(format!("{}.csv", series.name));
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["step", "value"])?;
    for (step, value) in series.iter() {
        w.write_record([step.to_string(), value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn prepare_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Pretty JSON on stdout. A closed pipe ends output quietly.
pub fn print_json(value: &impl Serialize) -> anyhow::Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}
