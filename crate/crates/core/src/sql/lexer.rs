use super::ast::Span;
use super::SyntaxError;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    /// Bare identifier or keyword, as written.
    Word(String),
    /// Double-quoted identifier, unescaped.
    QuotedIdent(String),
    Number(String),
    String(String),
    LParen,
    RParen,
    Comma,
    Dot,
    Semicolon,
    Star,
    Plus,
    Minus,
    Slash,
    Percent,
    Concat,
    Eq,
    NotEq,
    Lt,
    LtEq,
    Gt,
    GtEq,
    Eof,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub span: Span,
}

impl Token {
    pub fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.kind, TokenKind::Word(w) if w.eq_ignore_ascii_case(kw))
    }
}

pub fn tokenize(text: &str) -> Result<Vec<Token>, SyntaxError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'-' && bytes.get(i + 1) == Some(&b'-') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            let start = i;
            i += 2;
            loop {
                if i + 1 >= bytes.len() {
                    return Err(SyntaxError::new("unterminated block comment", start));
                }
                if bytes[i] == b'*' && bytes[i + 1] == b'/' {
                    i += 2;
                    break;
                }
                i += 1;
            }
            continue;
        }
        let start = i;
        let single = |kind: TokenKind, len: usize| Token {
            kind,
            span: Span::new(start, start + len),
        };
        let token = match c {
            b'(' => single(TokenKind::LParen, 1),
            b')' => single(TokenKind::RParen, 1),
            b',' => single(TokenKind::Comma, 1),
            b';' => single(TokenKind::Semicolon, 1),
            b'*' => single(TokenKind::Star, 1),
            b'+' => single(TokenKind::Plus, 1),
            b'-' => single(TokenKind::Minus, 1),
            b'/' => single(TokenKind::Slash, 1),
            b'%' => single(TokenKind::Percent, 1),
            b'=' => single(TokenKind::Eq, 1),
            b'|' if bytes.get(i + 1) == Some(&b'|') => single(TokenKind::Concat, 2),
            b'!' if bytes.get(i + 1) == Some(&b'=') => single(TokenKind::NotEq, 2),
            b'<' => match bytes.get(i + 1) {
                Some(b'=') => single(TokenKind::LtEq, 2),
                Some(b'>') => single(TokenKind::NotEq, 2),
                _ => single(TokenKind::Lt, 1),
            },
            b'>' => match bytes.get(i + 1) {
                Some(b'=') => single(TokenKind::GtEq, 2),
                _ => single(TokenKind::Gt, 1),
            },
            b'.' if !bytes.get(i + 1).is_some_and(u8::is_ascii_digit) => single(TokenKind::Dot, 1),
            b'\'' => {
                let (s, end) = scan_quoted(text, i, b'\'')?;
                Token {
                    kind: TokenKind::String(s),
                    span: Span::new(start, end),
                }
            }
            b'"' => {
                let (s, end) = scan_quoted(text, i, b'"')?;
                Token {
                    kind: TokenKind::QuotedIdent(s),
                    span: Span::new(start, end),
                }
            }
            b'0'..=b'9' | b'.' => {
                let end = scan_number(bytes, i);
                Token {
                    kind: TokenKind::Number(text[i..end].to_string()),
                    span: Span::new(start, end),
                }
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let mut end = i;
                while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                    end += 1;
                }
                Token {
                    kind: TokenKind::Word(text[i..end].to_string()),
                    span: Span::new(start, end),
                }
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(SyntaxError::new(format!("unexpected character '{ch}'"), i));
            }
        };
        i = token.span.end;
        tokens.push(token);
    }
    tokens.push(Token {
        kind: TokenKind::Eof,
        span: Span::new(text.len(), text.len()),
    });
    Ok(tokens)
}

fn scan_quoted(text: &str, start: usize, quote: u8) -> Result<(String, usize), SyntaxError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = start + 1;
    loop {
        match bytes.get(i) {
            None => return Err(SyntaxError::new("unterminated quoted literal", start)),
            Some(&b) if b == quote => {
                if bytes.get(i + 1) == Some(&quote) {
                    out.push(quote);
                    i += 2;
                } else {
                    let s = String::from_utf8(out)
                        .map_err(|_| SyntaxError::new("invalid UTF-8 in literal", start))?;
                    return Ok((s, i + 1));
                }
            }
            Some(&b) => {
                out.push(b);
                i += 1;
            }
        }
    }
}

fn scan_number(bytes: &[u8], start: usize) -> usize {
    let mut i = start;
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    if i < bytes.len() && bytes[i] == b'.' {
        i += 1;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
    }
    if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
        let mut j = i + 1;
        if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
            j += 1;
        }
        if j < bytes.len() && bytes[j].is_ascii_digit() {
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            i = j;
        }
    }
    i
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(s: &str) -> Vec<TokenKind> {
        tokenize(s).unwrap().into_iter().map(|t| t.kind).collect()
    }

    #[test]
    fn operators_and_literals() {
        assert_eq!(
            kinds("a<>'it''s' 1.5e3 .5 >= ||"),
            vec![
                TokenKind::Word("a".into()),
                TokenKind::NotEq,
                TokenKind::String("it's".into()),
                TokenKind::Number("1.5e3".into()),
                TokenKind::Number(".5".into()),
                TokenKind::GtEq,
                TokenKind::Concat,
                TokenKind::Eof,
            ]
        );
    }

    #[test]
    fn comments_are_skipped() {
        assert_eq!(
            kinds("-- hi\nx /* y */ z"),
            vec![TokenKind::Word("x".into()), TokenKind::Word("z".into()), TokenKind::Eof]
        );
    }

    #[test]
    fn unterminated_string_reports_offset() {
        let err = tokenize("SELECT 'abc").unwrap_err();
        assert_eq!(err.offset, 7);
    }
}
