use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Location, ParseError};

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Tok {
    /// Lowercase or quoted name. `quoted` names never act as operators.
    Name { text: String, quoted: bool },
    Var(String),
    Int(i64),
    Float(f64),
    /// Operator or punctuation spelled with symbol characters.
    Sym(&'static str),
    /// Clause terminator.
    End,
    Eof,
}

#[derive(Clone, Debug)]
pub(crate) struct Token {
    pub tok: Tok,
    pub loc: Location,
    /// Immediately followed by `(` with no whitespace (functional notation).
    pub call: bool,
}

const SYMBOLS: &[&str] = &[
    "...", "=:=", "=\\=", ":-", "::", "\\+", "=<", ">=", "\\=", "==", "//", "..", "(", ")", "[",
    "]", ",", "|", ";", "<", ">", "=", "+", "-", "*", "/",
];

pub(crate) fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Name { text, .. } => alloc::format!("'{text}'"),
        Tok::Var(v) => alloc::format!("variable {v}"),
        Tok::Int(i) => i.to_string(),
        Tok::Float(x) => alloc::format!("{x}"),
        Tok::Sym(s) => alloc::format!("'{s}'"),
        Tok::End => "'.'".into(),
        Tok::Eof => "end of input".into(),
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
    line: u32,
    col: u32,
}

impl<'a> Lexer<'a> {
    fn loc(&self) -> Location {
        Location {
            line: self.line,
            column: self.col,
        }
    }

    fn peek(&self, off: usize) -> Option<u8> {
        self.src.get(self.pos + off).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek(0)?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else if (c & 0xC0) != 0x80 {
            self.col += 1;
        }
        Some(c)
    }

    fn err(&self, expected: &str, found: &str) -> ParseError {
        ParseError::Syntax {
            location: self.loc(),
            expected: expected.into(),
            found: found.into(),
        }
    }

    fn skip_trivia(&mut self) -> Result<(), ParseError> {
        loop {
            match self.peek(0) {
                Some(c) if c.is_ascii_whitespace() => {
                    self.bump();
                }
                Some(b'%') => {
                    while let Some(c) = self.bump() {
                        if c == b'\n' {
                            break;
                        }
                    }
                }
                Some(b'/') if self.peek(1) == Some(b'*') => {
                    let start = self.loc();
                    self.bump();
                    self.bump();
                    loop {
                        match self.bump() {
                            Some(b'*') if self.peek(0) == Some(b'/') => {
                                self.bump();
                                break;
                            }
                            Some(_) => {}
                            None => {
                                return Err(ParseError::Syntax {
                                    location: start,
                                    expected: "end of block comment".into(),
                                    found: "end of input".into(),
                                })
                            }
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn ident(&mut self) -> &'a str {
        let start = self.pos;
        while matches!(self.peek(0), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.bump();
        }
        &self.text[start..self.pos]
    }

    fn number(&mut self) -> Result<Tok, ParseError> {
        let start = self.pos;
        while matches!(self.peek(0), Some(c) if c.is_ascii_digit()) {
            self.bump();
        }
        let mut is_float = false;
        if self.peek(0) == Some(b'.') && matches!(self.peek(1), Some(c) if c.is_ascii_digit()) {
            is_float = true;
            self.bump();
            while matches!(self.peek(0), Some(c) if c.is_ascii_digit()) {
                self.bump();
            }
        }
        if matches!(self.peek(0), Some(b'e' | b'E')) {
            let sign = usize::from(matches!(self.peek(1), Some(b'+' | b'-')));
            if matches!(self.peek(1 + sign), Some(c) if c.is_ascii_digit()) {
                is_float = true;
                for _ in 0..=sign {
                    self.bump();
                }
                while matches!(self.peek(0), Some(c) if c.is_ascii_digit()) {
                    self.bump();
                }
            }
        }
        let text = &self.text[start..self.pos];
        if is_float {
            text.parse::<f64>()
                .map(Tok::Float)
                .map_err(|_| self.err("number", text))
        } else {
            text.parse::<i64>()
                .map(Tok::Int)
                .map_err(|_| self.err("integer within 64 bits", text))
        }
    }

    fn quoted(&mut self) -> Result<String, ParseError> {
        let start = self.loc();
        self.bump();
        let mut out = String::new();
        loop {
            match self.bump() {
                None => {
                    return Err(ParseError::Syntax {
                        location: start,
                        expected: "closing quote".into(),
                        found: "end of input".into(),
                    })
                }
                Some(b'\'') => {
                    if self.peek(0) == Some(b'\'') {
                        self.bump();
                        out.push('\'');
                    } else {
                        return Ok(out);
                    }
                }
                Some(b'\\') => match self.bump() {
                    Some(b'n') => out.push('\n'),
                    Some(b't') => out.push('\t'),
                    Some(b'\\') => out.push('\\'),
                    Some(b'\'') => out.push('\''),
                    _ => return Err(self.err("escape sequence", "\\")),
                },
                Some(c) if c < 0x80 => out.push(c as char),
                Some(_) => {
                    // Multi-byte character: copy the whole UTF-8 sequence.
                    let begin = self.pos - 1;
                    while matches!(self.peek(0), Some(c) if (c & 0xC0) == 0x80) {
                        self.bump();
                    }
                    out.push_str(&self.text[begin..self.pos]);
                }
            }
        }
    }

    fn next(&mut self) -> Result<Token, ParseError> {
        self.skip_trivia()?;
        let loc = self.loc();
        let Some(c) = self.peek(0) else {
            return Ok(Token {
                tok: Tok::Eof,
                loc,
                call: false,
            });
        };
        let tok = if c.is_ascii_lowercase() {
            Tok::Name {
                text: self.ident().into(),
                quoted: false,
            }
        } else if c.is_ascii_uppercase() || c == b'_' {
            Tok::Var(self.ident().into())
        } else if c.is_ascii_digit() {
            self.number()?
        } else if c == b'\'' {
            Tok::Name {
                text: self.quoted()?,
                quoted: true,
            }
        } else if c == b'.'
            && self.peek(1) != Some(b'.')
            && self
                .peek(1)
                .is_none_or(|n| n.is_ascii_whitespace() || n == b'%')
        {
            self.bump();
            Tok::End
        } else {
            let rest = &self.src[self.pos..];
            let Some(sym) = SYMBOLS.iter().find(|s| rest.starts_with(s.as_bytes())) else {
                let ch = self.text[self.pos..].chars().next().unwrap_or('?');
                return Err(self.err("token", &ch.to_string()));
            };
            for _ in 0..sym.len() {
                self.bump();
            }
            Tok::Sym(sym)
        };
        let call = self.peek(0) == Some(b'(') && matches!(tok, Tok::Name { .. } | Tok::Sym(_));
        Ok(Token { tok, loc, call })
    }
}

pub(crate) fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut lx = Lexer {
        src: text.as_bytes(),
        text,
        pos: 0,
        line: 1,
        col: 1,
    };
    let mut out = Vec::new();
    loop {
        let t = lx.next()?;
        let eof = t.tok == Tok::Eof;
        out.push(t);
        if eof {
            return Ok(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Tok> {
        tokenize(s).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn range_and_float() {
        assert_eq!(
            toks("[0...9] [0 .. 9] 0.25"),
            alloc::vec![
                Tok::Sym("["),
                Tok::Int(0),
                Tok::Sym("..."),
                Tok::Int(9),
                Tok::Sym("]"),
                Tok::Sym("["),
                Tok::Int(0),
                Tok::Sym(".."),
                Tok::Int(9),
                Tok::Sym("]"),
                Tok::Float(0.25),
                Tok::Eof
            ]
        );
    }

    #[test]
    fn end_needs_layout() {
        assert_eq!(
            toks("a.\nb. % c\n"),
            alloc::vec![
                Tok::Name {
                    text: "a".into(),
                    quoted: false
                },
                Tok::End,
                Tok::Name {
                    text: "b".into(),
                    quoted: false
                },
                Tok::End,
                Tok::Eof
            ]
        );
    }

    #[test]
    fn negation_and_call_flag() {
        let t = tokenize("\\+noisy f(x) g (y)").unwrap();
        assert_eq!(t[0].tok, Tok::Sym("\\+"));
        assert!(t[2].call);
        assert!(!t[5].call);
    }

    #[test]
    fn location_tracks_lines() {
        let t = tokenize("a.\n  b").unwrap();
        assert_eq!(t[2].loc, Location { line: 2, column: 3 });
    }
}
