//! Tokenizer shared by the schema, predicate, transform and interpretation grammars.

use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Token {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    LParen,
    RParen,
    Comma,
    Colon,
    Semicolon,
    Assign,
    Plus,
    Minus,
    Star,
    Slash,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Token {
    pub(crate) fn describe(&self) -> String {
        match self {
            Token::Ident(s) => format!("identifier `{s}`"),
            Token::Int(i) => format!("integer {i}"),
            Token::Float(x) => format!("float {x:?}"),
            Token::Str(s) => format!("string {s:?}"),
            other => format!("`{}`", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Token::LParen => "(",
            Token::RParen => ")",
            Token::Comma => ",",
            Token::Colon => ":",
            Token::Semicolon => ";",
            Token::Assign => ":=",
            Token::Plus => "+",
            Token::Minus => "-",
            Token::Star => "*",
            Token::Slash => "/",
            Token::Eq => "=",
            Token::Ne => "!=",
            Token::Lt => "<",
            Token::Le => "<=",
            Token::Gt => ">",
            Token::Ge => ">=",
            _ => "?",
        }
    }
}

pub(crate) fn tokenize(text: &str) -> Result<Vec<Token>, ModelError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' || c == '$' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '$') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            let mut is_float = false;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                is_float = true;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    is_float = true;
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let lexeme: String = chars[start..i].iter().collect();
            if is_float {
                let v = lexeme
                    .parse::<f64>()
                    .map_err(|_| ModelError::Syntax(format!("bad float literal `{lexeme}`")))?;
                out.push(Token::Float(v));
            } else {
                let v = lexeme
                    .parse::<i64>()
                    .map_err(|_| ModelError::Syntax(format!("integer literal `{lexeme}` out of range")))?;
                out.push(Token::Int(v));
            }
            continue;
        }
        if c == '"' {
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => return Err(ModelError::Syntax("unterminated string literal".into())),
                    Some('"') => {
                        i += 1;
                        break;
                    }
                    Some('\\') => {
                        let esc = chars
                            .get(i + 1)
                            .ok_or_else(|| ModelError::Syntax("unterminated escape".into()))?;
                        s.push(match esc {
                            'n' => '\n',
                            't' => '\t',
                            'r' => '\r',
                            other => *other,
                        });
                        i += 2;
                    }
                    Some(ch) => {
                        s.push(*ch);
                        i += 1;
                    }
                }
            }
            out.push(Token::Str(s));
            continue;
        }
        let next = chars.get(i + 1).copied();
        let (tok, width) = match (c, next) {
            (':', Some('=')) => (Token::Assign, 2),
            ('<', Some('=')) => (Token::Le, 2),
            ('>', Some('=')) => (Token::Ge, 2),
            ('!', Some('=')) => (Token::Ne, 2),
            ('<', Some('>')) => (Token::Ne, 2),
            ('=', Some('=')) => (Token::Eq, 2),
            ('(', _) => (Token::LParen, 1),
            (')', _) => (Token::RParen, 1),
            (',', _) => (Token::Comma, 1),
            (':', _) => (Token::Colon, 1),
            (';', _) => (Token::Semicolon, 1),
            ('+', _) => (Token::Plus, 1),
            ('-', _) => (Token::Minus, 1),
            ('*', _) | ('×', _) => (Token::Star, 1),
            ('/', _) | ('÷', _) => (Token::Slash, 1),
            ('=', _) => (Token::Eq, 1),
            ('<', _) => (Token::Lt, 1),
            ('>', _) => (Token::Gt, 1),
            ('≠', _) => (Token::Ne, 1),
            ('≤', _) => (Token::Le, 1),
            ('≥', _) => (Token::Ge, 1),
            _ => return Err(ModelError::Syntax(format!("unexpected character `{c}`"))),
        };
        out.push(tok);
        i += width;
    }
    Ok(out)
}

/// Cursor over a token stream with the small set of helpers the parsers need.
pub(crate) struct Tokens {
    toks: Vec<Token>,
    pos: usize,
}

impl Tokens {
    pub(crate) fn new(text: &str) -> Result<Self, ModelError> {
        Ok(Tokens { toks: tokenize(text)?, pos: 0 })
    }

    pub(crate) fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    pub(crate) fn peek_at(&self, offset: usize) -> Option<&Token> {
        self.toks.get(self.pos + offset)
    }

    pub(crate) fn next(&mut self) -> Option<Token> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    pub(crate) fn eat(&mut self, tok: &Token) -> bool {
        if self.peek() == Some(tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    pub(crate) fn eat_keyword(&mut self, kw: &str) -> bool {
        match self.peek() {
            Some(Token::Ident(s)) if s.eq_ignore_ascii_case(kw) => {
                self.pos += 1;
                true
            }
            _ => false,
        }
    }

    pub(crate) fn expect(&mut self, tok: &Token) -> Result<(), ModelError> {
        match self.next() {
            Some(t) if &t == tok => Ok(()),
            Some(t) => Err(ModelError::Syntax(format!("expected {}, found {}", tok.describe(), t.describe()))),
            None => Err(ModelError::Syntax(format!("expected {}, found end of input", tok.describe()))),
        }
    }

    pub(crate) fn ident(&mut self) -> Result<String, ModelError> {
        match self.next() {
            Some(Token::Ident(s)) => Ok(s),
            Some(t) => Err(ModelError::Syntax(format!("expected identifier, found {}", t.describe()))),
            None => Err(ModelError::Syntax("expected identifier, found end of input".into())),
        }
    }

    pub(crate) fn expect_end(&self) -> Result<(), ModelError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => Err(ModelError::Syntax(format!("unexpected trailing {}", t.describe()))),
        }
    }
}
