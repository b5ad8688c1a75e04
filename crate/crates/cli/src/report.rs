use std::fmt::{self, Display};

/// Line-oriented `key=value` report. Floats print in the shortest form that
/// round-trips, so equal bits give equal text.
#[derive(Debug, Default)]
pub struct Report {
    lines: Vec<String>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        let mut r = Report::default();
        r.put("command", command);
        r
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.lines.push(format!("{key}={value}"));
        self
    }

    pub fn float(&mut self, key: &str, value: f64) -> &mut Self {
        self.put(key, format!("{value:?}"))
    }

    pub fn floats<'a>(&mut self, key: &str, values: impl IntoIterator<Item = &'a f64>) -> &mut Self {
        self.list(key, values.into_iter().map(|v| format!("{v:?}")))
    }

    pub fn list<T: Display>(&mut self, key: &str, values: impl IntoIterator<Item = T>) -> &mut Self {
        let joined: Vec<String> = values.into_iter().map(|v| v.to_string()).collect();
        self.put(key, joined.join(","))
    }
}

impl Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}
