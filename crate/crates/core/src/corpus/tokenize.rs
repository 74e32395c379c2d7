/// Lowercases, splits on whitespace, detaches leading and trailing
/// punctuation and splits words on hyphens (keeping `-` as a token).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.to_lowercase().chars().collect();
        let start = chars.iter().position(|c| c.is_alphanumeric());
        let Some(start) = start else {
            tokens.extend(chars.iter().map(|c| c.to_string()));
            continue;
        };
        let end = chars.iter().rposition(|c| c.is_alphanumeric()).unwrap() + 1;

        tokens.extend(chars[..start].iter().map(|c| c.to_string()));
        let core: String = chars[start..end].iter().collect();
        let mut first = true;
        for piece in core.split('-') {
            if !first {
                tokens.push("-".to_string());
            }
            first = false;
            if !piece.is_empty() {
                tokens.push(piece.to_string());
            }
        }
        tokens.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn empty() {
        assert!(toks("").is_empty());
        assert!(toks("   \t\n").is_empty());
    }

    #[test]
    fn sentence_with_period() {
        assert_eq!(
            toks("A man riding a horse."),
            ["a", "man", "riding", "a", "horse", "."]
        );
    }

    #[test]
    fn hyphens_and_exclamation() {
        assert_eq!(
            toks("Black-and-white TV!"),
            ["black", "-", "and", "-", "white", "tv", "!"]
        );
    }

    #[test]
    fn leading_punctuation_and_interior_apostrophe() {
        assert_eq!(
            toks("\"The dog's ball\","),
            ["\"", "the", "dog's", "ball", "\"", ","]
        );
        assert_eq!(toks("..."), [".", ".", "."]);
    }
}
