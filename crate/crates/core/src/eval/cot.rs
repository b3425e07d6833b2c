//! Chain-of-thought transcript/translation splitting for speech
//! translation outputs.

pub const COT_SEPARATOR: &str = "<sep>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CotSplit {
    pub transcript: Option<String>,
    pub translation: String,
    /// Set when the output carried no separator and the whole string was
    /// taken as the translation.
    pub missing_separator: bool,
}

/// Split on the first `<sep>`; the text after it, trimmed, is the
/// translation. Later separators stay inside the translation verbatim.
pub fn cot_split(output: &str) -> CotSplit {
    match output.split_once(COT_SEPARATOR) {
        Some((before, after)) => CotSplit {
            transcript: Some(before.trim().to_string()),
            translation: after.trim().to_string(),
            missing_separator: false,
        },
        None => CotSplit {
            transcript: None,
            translation: output.trim().to_string(),
            missing_separator: true,
        },
    }
}
