//! Command output: a human-readable text block for stdout and the same
//! facts as `key = value` lines for `--out`.

use std::fmt::Display;

#[derive(Debug, Default)]
pub struct Report {
    text: String,
    pairs: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn line(&mut self, line: impl Display) -> &mut Self {
        self.text.push_str(&line.to_string());
        self.text.push('\n');
        self
    }

    pub fn block(&mut self, text: &str) -> &mut Self {
        self.text.push_str(text);
        if !text.ends_with('\n') {
            self.text.push('\n');
        }
        self
    }

    pub fn kv(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        self.pairs.push((key.into(), value.to_string()));
        self
    }

    /// Adds `prefix.key = value` for every line of a `key = value` block.
    pub fn kv_block(&mut self, prefix: &str, block: &str) -> &mut Self {
        for line in block.lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                let key = if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
                self.pairs.push((key, v.to_string()));
            }
        }
        self
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn key_values(&self) -> String {
        self.pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefixes_blocks() {
        let mut r = Report::new();
        r.kv("a", 1).kv_block("before", "top1 = 0.5\nnoise\n").line("hello");
        assert_eq!(r.key_values(), "a = 1\nbefore.top1 = 0.5\n");
        assert_eq!(r.text(), "hello\n");
    }
}
