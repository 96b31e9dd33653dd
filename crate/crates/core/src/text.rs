//! Word-level text normalization shared by serialization, annotation and
//! metrics.

/// Lowercases, splits punctuation off words and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            flush(&mut cur, &mut out);
        } else if matches!(ch, ',' | '.' | '?' | '!' | ';' | '"') {
            flush(&mut cur, &mut out);
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    flush(&mut cur, &mut out);
    out
}

fn flush(cur: &mut String, out: &mut Vec<String>) {
    if !cur.is_empty() {
        out.push(std::mem::take(cur));
    }
}

/// Lowercased, whitespace-collapsed form used for stored values.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Metric-time form: normalized with spaces joined by underscores.
pub fn metric_form(text: &str) -> String {
    tokenize(text).join("_")
}

/// Start offsets of every occurrence of `needle` as a contiguous token run.
pub fn find_all<S: AsRef<str>>(haystack: &[S], needle: &[String]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    (0..=haystack.len() - needle.len())
        .filter(|&i| {
            haystack[i..i + needle.len()]
                .iter()
                .zip(needle)
                .all(|(h, n)| h.as_ref() == n)
        })
        .collect()
}

pub fn contains_run<S: AsRef<str>>(haystack: &[S], needle: &[String]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack
        .windows(needle.len())
        .any(|w| w.iter().zip(needle).all(|(h, n)| h.as_ref() == n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation_and_case() {
        assert_eq!(
            tokenize("Pizza Hut  is in the South."),
            vec!["pizza", "hut", "is", "in", "the", "south", "."]
        );
        assert_eq!(normalize("  Pizza   HUT "), "pizza hut");
        assert_eq!(metric_form("Pizza Hut"), "pizza_hut");
    }

    #[test]
    fn runs_respect_token_boundaries() {
        let hay = tokenize("go north now");
        assert!(contains_run(&hay, &tokenize("north")));
        assert!(!contains_run(&hay, &tokenize("no")));
        assert_eq!(find_all(&tokenize("a b a b"), &tokenize("a b")), vec![0, 2]);
    }
}
