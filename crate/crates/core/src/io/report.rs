//! Machine-readable run reports: one `key=value` per line.

use std::fmt::Display;
use std::path::Path;

use crate::accountant::PrivacyLedger;
use crate::error::{Error, Result};
use crate::io::{atomic_write, RunConfig};

/// Comma-separated orders with consecutive runs written as `a-b`.
pub fn compact_orders(orders: &[u32]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < orders.len() {
        let mut j = i;
        while j + 1 < orders.len() && orders[j + 1] == orders[j] + 1 {
            j += 1;
        }
        parts.push(if j > i {
            format!("{}-{}", orders[i], orders[j])
        } else {
            orders[i].to_string()
        });
        i = j + 1;
    }
    parts.join(",")
}

/// Ordered report lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.lines.push((key.into(), value.to_string()));
    }

    /// Appends `q`, `σ`, steps, the order grid and the spent `(ε, δ)`
    /// under `prefix`.
    pub fn push_ledger(&mut self, prefix: &str, l: &PrivacyLedger) {
        self.push(format!("{prefix}.q"), l.q);
        self.push(format!("{prefix}.sigma"), l.sigma);
        self.push(format!("{prefix}.steps"), l.steps);
        self.push(format!("{prefix}.orders"), compact_orders(&l.orders));
        self.push(format!("{prefix}.conversion"), l.conversion.name());
        self.push(format!("{prefix}.epsilon"), l.epsilon);
        self.push(format!("{prefix}.delta"), l.delta);
        self.push(
            format!("{prefix}.order"),
            l.order.map(|o| o.to_string()).unwrap_or_else(|| "none".into()),
        );
    }

    /// Echoes every config key under `config.`.
    pub fn push_config(&mut self, cfg: &RunConfig) {
        for (k, v) in cfg.entries() {
            self.push(format!("config.{k}"), v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn lines(&self) -> &[(String, String)] {
        &self.lines
    }

    pub fn to_text(&self) -> String {
        self.lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line {} lacks '='", i + 1)))?;
            r.push(k, v);
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }
}
