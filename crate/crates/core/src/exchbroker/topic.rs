//! Dotted topic patterns: a literal matches itself, `*` exactly one segment,
//! `#` zero or more segments.

pub fn is_valid_pattern(pattern: &str) -> bool {
    crate::message::is_well_formed_dotted(pattern)
}

/// True iff `pattern` matches `routing_key`.
pub fn match_topic(pattern: &str, routing_key: &str) -> bool {
    let pat: Vec<&str> = pattern.split('.').collect();
    let key: Vec<&str> = routing_key.split('.').collect();
    match_segments(&pat, &key)
}

/// Bottom-up table over suffixes: `row[j]` holds whether `pat[i..]`
/// matches `key[j..]` for the current `i`.
pub fn match_segments(pat: &[&str], key: &[&str]) -> bool {
    let n = key.len();
    let mut next = vec![false; n + 1];
    next[n] = true;
    let mut row = vec![false; n + 1];
    for seg in pat.iter().rev() {
        match *seg {
            "#" => {
                // '#' absorbs key[j..k] for any k >= j.
                row[n] = next[n];
                for j in (0..n).rev() {
                    row[j] = next[j] || row[j + 1];
                }
            }
            "*" => {
                row[n] = false;
                for j in 0..n {
                    row[j] = next[j + 1];
                }
            }
            lit => {
                row[n] = false;
                for j in 0..n {
                    row[j] = key[j] == lit && next[j + 1];
                }
            }
        }
        std::mem::swap(&mut row, &mut next);
    }
    next[0]
}
