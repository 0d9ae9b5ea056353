use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Appends request/response transcripts as JSON Lines.
///
/// Entries carry no credentials; callers pass already-redacted bodies.
#[derive(Debug)]
pub struct Tracer {
    out: Mutex<BufWriter<File>>,
}

impl Tracer {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: Mutex::new(BufWriter::new(f)) })
    }

    pub fn record(&self, service: &str, request: Value, response: Value, latency_ms: u128) {
        let line = json!({
            "service": service,
            "latency_ms": latency_ms,
            "request": request,
            "response": response,
        });
        let mut out = self.out.lock().unwrap_or_else(|p| p.into_inner());
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            tracing::warn!("failed to write trace entry: {e}");
        }
    }
}
