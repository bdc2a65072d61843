//! Text normalization shared by retrieval, similarity and the scripted scorer.

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Token sequence re-joined with single spaces, padded on both sides so that
/// phrase lookups can be done with `contains(" phrase ")`.
pub fn normalized_padded(text: &str) -> String {
    let tokens = tokenize(text);
    let mut out = String::with_capacity(text.len() + 2);
    out.push(' ');
    for t in tokens {
        out.push_str(&t);
        out.push(' ');
    }
    out
}

/// True when `phrase` occurs in `haystack` on token boundaries.
///
/// `haystack` must come from [`normalized_padded`].
pub fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    let mut needle = String::with_capacity(phrase.len() + 2);
    needle.push(' ');
    for t in phrase.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        needle.extend(t.chars().flat_map(char::to_lowercase));
        needle.push(' ');
    }
    needle.len() > 1 && haystack.contains(&needle)
}

/// FNV-1a over a sequence of byte strings, with a separator between parts.
///
/// Stable across platforms and releases; used to derive per-item RNG seeds.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in part.iter().chain(std::iter::once(&0xffu8)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
