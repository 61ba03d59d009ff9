//! Text normalization shared by key lookup, numeric parsing and scoring.

/// Maps full-width ASCII variants (U+FF01..U+FF5E) and the ideographic space
/// to their half-width forms.
pub fn fold_width(c: char) -> char {
    match c {
        '\u{3000}' => ' ',
        '\u{FF01}'..='\u{FF5E}' => char::from_u32(c as u32 - 0xFEE0).unwrap_or(c),
        _ => c,
    }
}

/// Width-folds, trims and collapses internal whitespace runs to one space.
pub fn collapse(s: &str) -> String {
    let folded: String = s.chars().map(fold_width).collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// [`collapse`] followed by case folding.
pub fn normalize(s: &str) -> String {
    collapse(s).to_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_full_width_forms() {
        assert_eq!(collapse("ＷＢＣ　５．４"), "WBC 5.4");
        assert_eq!(normalize("  The  Result\tIS "), "the result is");
    }
}
