//! Tokenizer for the feature-program language. Newlines separate
//! statements except inside parentheses or brackets; `#` starts a
//! comment running to end of line.

use super::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Def,
    Return,
    Ident(String),
    Number(f64),
    Str(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Colon,
    Comma,
    Semicolon,
    Newline,
    Assign,
    Plus,
    Minus,
    Star,
    Slash,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Def => "'def'".into(),
            Tok::Return => "'return'".into(),
            Tok::Ident(name) => format!("identifier {name:?}"),
            Tok::Number(v) => format!("number {v:?}"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::LBracket => "'['".into(),
            Tok::RBracket => "']'".into(),
            Tok::Colon => "':'".into(),
            Tok::Comma => "','".into(),
            Tok::Semicolon => "';'".into(),
            Tok::Newline => "end of line".into(),
            Tok::Assign => "'='".into(),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Slash => "'/'".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub tok: Tok,
    pub line: u32,
    pub col: u32,
}

pub fn lex(source: &str) -> Result<Vec<Token>, ParseError> {
    let mut tokens = Vec::new();
    let mut line: u32 = 1;
    let mut col: u32 = 1;
    let mut nesting: u32 = 0;
    let mut chars = source.chars().peekable();

    macro_rules! push {
        ($tok:expr, $l:expr, $c:expr) => {
            tokens.push(Token {
                tok: $tok,
                line: $l,
                col: $c,
            })
        };
    }

    while let Some(&c) = chars.peek() {
        let (tok_line, tok_col) = (line, col);
        match c {
            ' ' | '\t' | '\r' => {
                chars.next();
                col += 1;
            }
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
                if nesting == 0 && !matches!(tokens.last().map(|t: &Token| &t.tok), Some(Tok::Newline) | None)
                {
                    push!(Tok::Newline, tok_line, tok_col);
                }
            }
            '#' => {
                for nc in chars.by_ref() {
                    if nc == '\n' {
                        break;
                    }
                }
                line += 1;
                col = 1;
                if nesting == 0 && !matches!(tokens.last().map(|t: &Token| &t.tok), Some(Tok::Newline) | None)
                {
                    push!(Tok::Newline, tok_line, tok_col);
                }
            }
            '(' => {
                chars.next();
                col += 1;
                nesting += 1;
                push!(Tok::LParen, tok_line, tok_col);
            }
            ')' => {
                chars.next();
                col += 1;
                nesting = nesting.saturating_sub(1);
                push!(Tok::RParen, tok_line, tok_col);
            }
            '[' => {
                chars.next();
                col += 1;
                nesting += 1;
                push!(Tok::LBracket, tok_line, tok_col);
            }
            ']' => {
                chars.next();
                col += 1;
                nesting = nesting.saturating_sub(1);
                push!(Tok::RBracket, tok_line, tok_col);
            }
            ':' => {
                chars.next();
                col += 1;
                push!(Tok::Colon, tok_line, tok_col);
            }
            ',' => {
                chars.next();
                col += 1;
                push!(Tok::Comma, tok_line, tok_col);
            }
            ';' => {
                chars.next();
                col += 1;
                push!(Tok::Semicolon, tok_line, tok_col);
            }
            '=' => {
                chars.next();
                col += 1;
                push!(Tok::Assign, tok_line, tok_col);
            }
            '+' => {
                chars.next();
                col += 1;
                push!(Tok::Plus, tok_line, tok_col);
            }
            '-' => {
                chars.next();
                col += 1;
                push!(Tok::Minus, tok_line, tok_col);
            }
            '*' => {
                chars.next();
                col += 1;
                push!(Tok::Star, tok_line, tok_col);
            }
            '/' => {
                chars.next();
                col += 1;
                push!(Tok::Slash, tok_line, tok_col);
            }
            '"' => {
                chars.next();
                col += 1;
                let mut s = String::new();
                let mut closed = false;
                while let Some(nc) = chars.next() {
                    col += 1;
                    match nc {
                        '"' => {
                            closed = true;
                            break;
                        }
                        '\\' => match chars.next() {
                            Some('"') => {
                                col += 1;
                                s.push('"');
                            }
                            Some('\\') => {
                                col += 1;
                                s.push('\\');
                            }
                            other => {
                                return Err(ParseError::syntax(
                                    tok_line,
                                    tok_col,
                                    format!("unsupported escape {other:?} in string"),
                                    &["'\\\"'", "'\\\\'"],
                                ))
                            }
                        },
                        '\n' => {
                            return Err(ParseError::syntax(
                                tok_line,
                                tok_col,
                                "unterminated string".to_string(),
                                &["'\"'"],
                            ))
                        }
                        other => s.push(other),
                    }
                }
                if !closed {
                    return Err(ParseError::syntax(
                        tok_line,
                        tok_col,
                        "unterminated string".to_string(),
                        &["'\"'"],
                    ));
                }
                push!(Tok::Str(s), tok_line, tok_col);
            }
            c if c.is_ascii_digit() || c == '.' => {
                let mut text = String::new();
                while let Some(&nc) = chars.peek() {
                    let exp_sign = (nc == '+' || nc == '-')
                        && matches!(text.chars().last(), Some('e') | Some('E'));
                    if nc.is_ascii_digit() || nc == '.' || nc == 'e' || nc == 'E' || exp_sign {
                        text.push(nc);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                let value: f64 = text.parse().map_err(|_| {
                    ParseError::syntax(
                        tok_line,
                        tok_col,
                        format!("malformed number {text:?}"),
                        &["number"],
                    )
                })?;
                if !value.is_finite() {
                    return Err(ParseError::syntax(
                        tok_line,
                        tok_col,
                        format!("number literal {text:?} overflows"),
                        &["finite number"],
                    ));
                }
                push!(Tok::Number(value), tok_line, tok_col);
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut name = String::new();
                while let Some(&nc) = chars.peek() {
                    if nc.is_ascii_alphanumeric() || nc == '_' {
                        name.push(nc);
                        chars.next();
                        col += 1;
                    } else {
                        break;
                    }
                }
                let tok = match name.as_str() {
                    "def" => Tok::Def,
                    "return" => Tok::Return,
                    _ => Tok::Ident(name),
                };
                push!(tok, tok_line, tok_col);
            }
            other => {
                return Err(ParseError::syntax(
                    line,
                    col,
                    format!("unexpected character {other:?}"),
                    &["token"],
                ))
            }
        }
    }
    // trailing newline token keeps the parser's separator handling uniform
    if !matches!(tokens.last().map(|t: &Token| &t.tok), Some(Tok::Newline) | None) {
        tokens.push(Token {
            tok: Tok::Newline,
            line,
            col,
        });
    }
    tokens.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(tokens)
}
