use serde::{Deserialize, Serialize};

/// How predicted answers are compared with the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grader {
    /// Exact match after [`normalize_answer`].
    #[default]
    Normalized,
    /// Ask the backend's judge role.
    RemoteJudge,
}

/// Trim, casefold, drop trailing punctuation and canonicalize plain
/// decimal numerals (`"7.0"`, `"07"` and `"+7"` all become `"7"`).
pub fn normalize_answer(s: &str) -> String {
    let folded = s.trim().to_lowercase();
    let stripped = folded
        .trim_end_matches(|c: char| (c.is_ascii_punctuation() && !matches!(c, ')' | ']' | '%')) || c.is_whitespace())
        .trim();
    match canonical_number(stripped) {
        Some(n) => n,
        None => stripped.split_whitespace().collect::<Vec<_>>().join(" "),
    }
}

/// Canonical form of a plain decimal numeral, or `None` if `s` is not one.
///
/// Leading zeros of the integer part and trailing zeros of the fraction are
/// removed; negative zero becomes `"0"`.
pub fn canonical_number(s: &str) -> Option<String> {
    let (negative, body) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int = int.trim_start_matches('0');
    let frac = frac.trim_end_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let is_zero = int == "0" && frac.is_empty();
    let mut out = String::new();
    if negative && !is_zero {
        out.push('-');
    }
    out.push_str(int);
    if !frac.is_empty() {
        out.push('.');
        out.push_str(frac);
    }
    Some(out)
}

/// Default grader: normalized exact match. An empty prediction never matches.
pub fn grade_normalized(predicted: &str, ground_truth: &str) -> bool {
    let p = normalize_answer(predicted);
    !p.is_empty() && p == normalize_answer(ground_truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert!(grade_normalized("7.0", "7"));
        assert!(grade_normalized("B", "b"));
        assert!(!grade_normalized("12", "21"));
        assert!(grade_normalized("  Paris. ", "paris"));
        assert!(grade_normalized("-0.00", "0"));
        assert!(grade_normalized("007.50", "7.5"));
        assert!(grade_normalized(".5", "0.5"));
        assert!(!grade_normalized("7.01", "7"));
        assert!(!grade_normalized("", "7"));
        assert!(grade_normalized("50%", "50%"));
        assert!(!grade_normalized("50%", "50"));
    }

    #[test]
    fn non_numbers_are_left_alone() {
        assert_eq!(canonical_number("1.2.3"), None);
        assert_eq!(canonical_number("."), None);
        assert_eq!(canonical_number("-"), None);
        assert_eq!(canonical_number("1e3"), None);
        assert_eq!(normalize_answer("New   York"), "new york");
    }

    /// Exact rational value of a decimal numeral as (numerator, scale).
    fn rational(mantissa: i64, scale: u32) -> (i128, u32) {
        (mantissa as i128, scale)
    }

    fn render(mantissa: i64, scale: u32, pad_int: usize, pad_frac: usize) -> String {
        let neg = mantissa < 0;
        let digits = mantissa.unsigned_abs().to_string();
        let scale = scale as usize;
        let padded = format!("{:0>width$}", digits, width = scale + 1);
        let (int, frac) = padded.split_at(padded.len() - scale);
        let mut s = String::new();
        if neg {
            s.push('-');
        }
        s.push_str(&"0".repeat(pad_int));
        s.push_str(int);
        if scale > 0 || pad_frac > 0 {
            s.push('.');
            s.push_str(frac);
            s.push_str(&"0".repeat(pad_frac));
        }
        s
    }

    fn same_value(a: (i128, u32), b: (i128, u32)) -> bool {
        let (am, asc) = a;
        let (bm, bsc) = b;
        am * 10i128.pow(bsc) == bm * 10i128.pow(asc)
    }

    proptest! {
        // Brute-force oracle: two numerals match iff their exact rational
        // values agree, whatever padding they carry.
        #[test]
        fn numeral_grading_matches_rational_equality(
            ma in -5000i64..5000, sa in 0u32..4, pa in 0usize..3, fa in 0usize..3,
            mb in -5000i64..5000, sb in 0u32..4, pb in 0usize..3, fb in 0usize..3,
        ) {
            let a = render(ma, sa, pa, fa);
            let b = render(mb, sb, pb, fb);
            prop_assert_eq!(grade_normalized(&a, &b), same_value(rational(ma, sa), rational(mb, sb)));
        }

        #[test]
        fn grade_is_reflexive(s in "[ -~]{1,20}") {
            prop_assume!(!normalize_answer(&s).is_empty());
            prop_assert!(grade_normalized(&s, &s));
        }
    }
}
