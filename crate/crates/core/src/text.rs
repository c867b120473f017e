//! Small text utilities shared by name normalization, keyword matching and
//! parameter matching.

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "from", "into", "onto", "that", "this", "are", "was", "did",
    "you", "your", "how", "what", "when", "where", "which", "has", "have", "not", "all",
];

/// Trimmed, lower-cased form used for every case-insensitive comparison.
pub fn casefold(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Case-folded alphanumeric word tokens of length >= 3, stopwords removed.
///
/// `"ANATECH USA RIE-19 (Reactive Ion Etcher)"` yields
/// `["anatech", "usa", "rie", "reactive", "ion", "etcher"]`.
pub fn word_tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 3)
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Keyword tokens: like [`word_tokens`] but hyphenated compounds such as
/// `su-8` are kept whole in addition to their parts.
pub fn keyword_tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in s.split(|c: char| !(c.is_alphanumeric() || c == '-')) {
        let chunk = chunk.trim_matches('-');
        if chunk.is_empty() {
            continue;
        }
        if chunk.contains('-') && chunk.chars().count() >= 3 {
            out.push(chunk.to_lowercase());
        }
        out.extend(word_tokens(chunk));
    }
    out.sort();
    out.dedup();
    out
}

/// Two keyword tokens match when equal, or when the shorter one (at least
/// four characters) is a prefix of the longer: `coat` ~ `coating`.
pub fn keywords_match(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    short.chars().count() >= 4 && long.starts_with(short)
}

/// Canonical key for parameter and reading names: lower-case with every run
/// of non-alphanumeric characters collapsed to `_`. `"RF Power"` and
/// `"rf_power"` share the key `rf_power`.
pub fn param_key(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut pending_sep = false;
    for c in name.trim().chars() {
        if c.is_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.extend(c.to_lowercase());
        } else {
            pending_sep = true;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_tokens_drop_short_and_stopwords() {
        assert_eq!(
            word_tokens("ANATECH USA RIE-19 (Reactive Ion Etcher)"),
            vec!["anatech", "usa", "rie", "reactive", "ion", "etcher"]
        );
        assert_eq!(word_tokens("the etcher machine"), vec!["etcher", "machine"]);
    }

    #[test]
    fn keyword_tokens_keep_compounds() {
        let toks = keyword_tokens("fabricate SU-8 flexible BCI");
        assert!(toks.contains(&"su-8".to_string()));
        assert!(toks.contains(&"bci".to_string()));
        assert!(toks.contains(&"flexible".to_string()));
        let toks = keyword_tokens("Spin-coating");
        assert_eq!(toks, vec!["coating", "spin", "spin-coating"]);
    }

    #[test]
    fn prefix_matching_needs_four_chars() {
        assert!(keywords_match("coat", "coating"));
        assert!(keywords_match("cleaning", "clean"));
        assert!(!keywords_match("spi", "spin"));
        assert!(!keywords_match("wafer", "spin"));
    }

    #[test]
    fn param_keys() {
        assert_eq!(param_key("RF Power"), "rf_power");
        assert_eq!(param_key("rf_power"), "rf_power");
        assert_eq!(param_key("  Expose time: "), "expose_time");
        assert_eq!(param_key("Gas-On"), "gas_on");
    }
}
