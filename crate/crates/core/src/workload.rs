//! Workload files: one query per line, blank lines and `--` comments ignored.
//! Writers record provenance as `-- key=value` header comments.

/// Queries of a workload file, in order.
pub fn read_workload(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("--"))
        .map(|l| l.trim_end_matches(';').trim_end().to_string())
        .collect()
}

/// Like [`read_workload`] but keeps 1-based source line numbers.
pub fn read_workload_numbered(text: &str) -> Vec<(usize, String)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with("--"))
        .map(|(i, l)| (i, l.trim_end_matches(';').trim_end().to_string()))
        .collect()
}

/// `-- key=value` header lines.
pub fn read_headers(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.trim().strip_prefix("--"))
        .filter_map(|l| l.trim().split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn header<'a>(headers: &'a [(String, String)], key: &str) -> Option<&'a str> {
    headers.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub fn write_workload<S: AsRef<str>>(queries: &[S], headers: &[(&str, &str)]) -> String {
    let mut out = String::new();
    for (k, v) in headers {
        out.push_str(&format!("-- {k}={v}\n"));
    }
    for q in queries {
        out.push_str(q.as_ref());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_headers() {
        let text = write_workload(&["SELECT * FROM t", "SELECT t.a FROM t"], &[("grammar", "ab12"), ("schema", "cd34")]);
        assert_eq!(read_workload(&text), vec!["SELECT * FROM t", "SELECT t.a FROM t"]);
        let h = read_headers(&text);
        assert_eq!(header(&h, "schema"), Some("cd34"));
        assert_eq!(header(&h, "seed"), None);
    }

    #[test]
    fn comments_and_blanks() {
        let text = "-- note\n\nSELECT * FROM t;\n  -- another\nSELECT * FROM u\n";
        assert_eq!(read_workload(text), vec!["SELECT * FROM t", "SELECT * FROM u"]);
        assert_eq!(read_workload_numbered(text)[1].0, 5);
    }
}
