//! Minimal glob matching for host and path predicates.
//!
//! Supports `*` (any run of characters, including none) and `?` (exactly
//! one character). Matching is byte-wise on the given strings; callers
//! normalize case where the field is case-insensitive.

/// Returns true when `text` matches `pattern`.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();

    // Iterative wildcard matching with backtracking to the last `*`.
    let (mut pi, mut ti) = (0usize, 0usize);
    let (mut star, mut star_ti) = (None::<usize>, 0usize);
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some(pi);
            star_ti = ti;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            star_ti += 1;
            ti = star_ti;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

#[cfg(test)]
mod tests {
    use super::glob_match;

    #[test]
    fn literal_and_wildcards() {
        assert!(glob_match("example.org", "example.org"));
        assert!(!glob_match("example.org", "example.com"));
        assert!(glob_match("*.example.org", "cdn.example.org"));
        assert!(!glob_match("*.example.org", "example.org"));
        assert!(glob_match("*/user_flow.json", "/i/api/1.1/graphql/user_flow.json"));
        assert!(glob_match("/api/v?/timelines/*", "/api/v1/timelines/home"));
        assert!(!glob_match("/api/v?/timelines/*", "/api/v12/timelines/home"));
        assert!(glob_match("*", ""));
        assert!(glob_match("**", "anything"));
        assert!(!glob_match("", "x"));
        assert!(glob_match("", ""));
    }

    #[test]
    fn star_backtracking() {
        assert!(glob_match("*búðin*", "xxbúðinyy"));
        assert!(glob_match("a*b*c", "a-xx-b-yy-c"));
        assert!(!glob_match("a*b*c", "a-xx-c-yy-b"));
    }
}
