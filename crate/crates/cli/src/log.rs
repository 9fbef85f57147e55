//! Line-delimited JSON progress log on standard error.

use std::io::Write;
use std::time::Instant;

use serde_json::{Map, Value};

#[derive(Debug, Clone)]
pub struct Logger {
    start: Instant,
    quiet: bool,
}

impl Logger {
    pub fn new(quiet: bool) -> Self {
        Logger {
            start: Instant::now(),
            quiet,
        }
    }

    /// One line: `{"t": seconds since start, "event": ..., fields...}`.
    pub fn event(&self, event: &str, fields: Value) {
        if self.quiet {
            return;
        }
        let mut line = Map::new();
        line.insert("t".into(), Value::from((self.start.elapsed().as_secs_f64() * 1e3).round() / 1e3));
        line.insert("event".into(), Value::from(event));
        if let Value::Object(m) = fields {
            line.extend(m);
        }
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{}", Value::Object(line));
    }
}
