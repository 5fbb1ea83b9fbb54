//! Process logger: messages go to stderr and, while a run is active, to
//! `log.txt` in its output root with a timestamp. Timestamps appear only in
//! that file so every other output stays reproducible.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, Once};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{Level, LevelFilter, Log, Metadata, Record};

struct RunLogger {
    file: Mutex<Option<File>>,
    echo: Mutex<bool>,
}

static LOGGER: RunLogger = RunLogger {
    file: Mutex::new(None),
    echo: Mutex::new(true),
};
static INSTALL: Once = Once::new();

impl Log for RunLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= Level::Info
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        if *self.echo.lock().expect("logger lock") {
            eprintln!("[{}] {}", record.level(), record.args());
        }
        if let Some(f) = self.file.lock().expect("logger lock").as_mut() {
            let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
            let _ = writeln!(f, "{}.{:03} {} {}", t.as_secs(), t.subsec_millis(), record.level(), record.args());
        }
    }

    fn flush(&self) {
        if let Some(f) = self.file.lock().expect("logger lock").as_mut() {
            let _ = f.flush();
        }
    }
}

/// Installs the logger on first use and points its file sink at
/// `out/log.txt` (appending).
pub fn attach(out: &Path, echo: bool) -> std::io::Result<()> {
    INSTALL.call_once(|| {
        if log::set_logger(&LOGGER).is_ok() {
            log::set_max_level(LevelFilter::Info);
        }
    });
    std::fs::create_dir_all(out)?;
    let f = OpenOptions::new().create(true).append(true).open(out.join("log.txt"))?;
    *LOGGER.file.lock().expect("logger lock") = Some(f);
    *LOGGER.echo.lock().expect("logger lock") = echo;
    Ok(())
}

pub fn detach() {
    LOGGER.flush();
    *LOGGER.file.lock().expect("logger lock") = None;
}
