//! Lenient Cookie / Set-Cookie header parsing.
//!
//! Malformed fragments never abort ingestion: anything that does not parse
//! as `name=value` is retained as a single cookie carrying the raw
//! fragment's byte length, so cookie byte accounting stays complete.

use crate::flow::{Cookie, SameSite};

/// Parses every `Cookie` and `Set-Cookie` header in `headers` into
/// request-cookie and set-cookie lists. Header name matching is
/// case-insensitive. When `record_values` is false (the default capture
/// policy) only value byte lengths are kept.
pub fn extract_cookies(
    headers: &[(String, String)],
    record_values: bool,
) -> (Vec<Cookie>, Vec<Cookie>) {
    let mut request_cookies = Vec::new();
    let mut set_cookies = Vec::new();
    for (name, value) in headers {
        if name.eq_ignore_ascii_case("cookie") {
            request_cookies.extend(parse_cookie_header(value, record_values));
        } else if name.eq_ignore_ascii_case("set-cookie") {
            if let Some(cookie) = parse_set_cookie_header(value, record_values) {
                set_cookies.push(cookie);
            }
        }
    }
    (request_cookies, set_cookies)
}

/// Parses one `Cookie:` header value (`a=1; b=22`).
pub fn parse_cookie_header(value: &str, record_values: bool) -> Vec<Cookie> {
    value
        .split(';')
        .filter_map(|fragment| {
            let fragment = fragment.trim();
            if fragment.is_empty() {
                return None;
            }
            Some(parse_pair(fragment, record_values))
        })
        .collect()
}

/// Parses one `Set-Cookie:` header value into a cookie with attributes.
/// Returns `None` only for empty input.
pub fn parse_set_cookie_header(value: &str, record_values: bool) -> Option<Cookie> {
    let mut segments = value.split(';');
    let first = segments.next()?.trim();
    if first.is_empty() {
        return None;
    }
    let mut cookie = parse_pair(first, record_values);
    for segment in segments {
        let segment = segment.trim();
        if segment.is_empty() {
            continue;
        }
        let (attr, attr_value) = match segment.split_once('=') {
            Some((a, v)) => (a.trim(), Some(v.trim())),
            None => (segment, None),
        };
        if attr.eq_ignore_ascii_case("secure") {
            cookie.secure = true;
        } else if attr.eq_ignore_ascii_case("httponly") {
            cookie.http_only = true;
        } else if attr.eq_ignore_ascii_case("domain") {
            cookie.domain = attr_value.map(|v| v.trim_start_matches('.').to_ascii_lowercase());
        } else if attr.eq_ignore_ascii_case("samesite") {
            cookie.same_site = attr_value.and_then(parse_same_site);
        }
        // Path, Expires, Max-Age and unknown attributes are irrelevant to
        // byte accounting and tracking analysis; skipped.
    }
    Some(cookie)
}

fn parse_pair(fragment: &str, record_values: bool) -> Cookie {
    match fragment.split_once('=') {
        Some((name, value)) if !name.trim().is_empty() => {
            let mut cookie = Cookie::new(name.trim(), value.len() as u64);
            if record_values {
                cookie.value = Some(value.to_string());
            }
            cookie
        }
        // Unparseable fragment: keep it as a single cookie carrying the
        // raw fragment length so nothing silently drops out of totals.
        _ => Cookie::new(fragment, fragment.len() as u64),
    }
}

fn parse_same_site(value: &str) -> Option<SameSite> {
    if value.eq_ignore_ascii_case("strict") {
        Some(SameSite::Strict)
    } else if value.eq_ignore_ascii_case("lax") {
        Some(SameSite::Lax)
    } else if value.eq_ignore_ascii_case("none") {
        Some(SameSite::None)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hdr(name: &str, value: &str) -> (String, String) {
        (name.to_string(), value.to_string())
    }

    #[test]
    fn cookie_header_splits_pairs() {
        let cookies = parse_cookie_header("a=1; b=22", false);
        assert_eq!(cookies.len(), 2);
        assert_eq!(cookies[0].name, "a");
        assert_eq!(cookies[0].value_bytes, 1);
        assert_eq!(cookies[1].name, "b");
        assert_eq!(cookies[1].value_bytes, 2);
        assert!(cookies.iter().all(|c| c.value.is_none()));
    }

    #[test]
    fn no_cookie_headers_yield_empty_lists() {
        let (req, set) = extract_cookies(&[hdr("accept", "*/*")], false);
        assert!(req.is_empty());
        assert!(set.is_empty());
    }

    #[test]
    fn set_cookie_flags() {
        let cookie = parse_set_cookie_header("sid=xyz; Secure; HttpOnly", false).unwrap();
        assert_eq!(cookie.name, "sid");
        assert_eq!(cookie.value_bytes, 3);
        assert!(cookie.secure);
        assert!(cookie.http_only);
        assert_eq!(cookie.same_site, None);
    }

    #[test]
    fn set_cookie_domain_and_same_site() {
        let cookie =
            parse_set_cookie_header("t=abcd; Domain=.Example.org; SameSite=Lax; Path=/", false)
                .unwrap();
        assert_eq!(cookie.domain.as_deref(), Some("example.org"));
        assert_eq!(cookie.same_site, Some(SameSite::Lax));
    }

    #[test]
    fn malformed_fragment_kept_with_raw_length() {
        let cookies = parse_cookie_header("garbage-no-equals; ok=1", false);
        assert_eq!(cookies.len(), 2);
        assert_eq!(cookies[0].name, "garbage-no-equals");
        assert_eq!(cookies[0].value_bytes, "garbage-no-equals".len() as u64);
        assert_eq!(cookies[1].name, "ok");
    }

    #[test]
    fn values_recorded_only_when_permitted() {
        let cookies = parse_cookie_header("sid=secret", true);
        assert_eq!(cookies[0].value.as_deref(), Some("secret"));
    }

    #[test]
    fn empty_name_fragment_is_retained_whole() {
        let cookies = parse_cookie_header("=orphan", false);
        assert_eq!(cookies.len(), 1);
        assert_eq!(cookies[0].name, "=orphan");
        assert_eq!(cookies[0].value_bytes, 7);
    }
}
