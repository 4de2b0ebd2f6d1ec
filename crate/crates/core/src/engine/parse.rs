//! Lexer and recursive-descent parser for the query language.
//!
//! ```text
//! query := SELECT item (, item)* FROM ident
//!          [JOIN ident ON ident.ident = ident.ident]
//!          [WHERE expr] [GROUP BY colref (, colref)*]
//! item  := expr [AS ident]
//! expr  := or;  or := and (OR and)*;  and := not (AND not)*
//! not   := NOT not | cmp;  cmp := add [cmpop add]
//! add   := mul ((+|-) mul)*;  mul := unary ((*|/) unary)*
//! unary := - unary | primary
//! primary := literal | ( expr ) | agg ( * | colref ) | colref
//! ```

use super::ast::*;
use super::ParseError;
use crate::store::Value;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Kw(Kw),
    Int(i64),
    Float(f64),
    Str(String),
    Sym(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kw {
    Select,
    From,
    Join,
    On,
    Where,
    Group,
    By,
    As,
    And,
    Or,
    Not,
    True,
    False,
}

const KEYWORDS: &[(&str, Kw)] = &[
    ("select", Kw::Select),
    ("from", Kw::From),
    ("join", Kw::Join),
    ("on", Kw::On),
    ("where", Kw::Where),
    ("group", Kw::Group),
    ("by", Kw::By),
    ("as", Kw::As),
    ("and", Kw::And),
    ("or", Kw::Or),
    ("not", Kw::Not),
    ("true", Kw::True),
    ("false", Kw::False),
];

pub fn is_keyword(word: &str) -> bool {
    let lower = word.to_ascii_lowercase();
    KEYWORDS.iter().any(|(k, _)| *k == lower)
}

#[derive(Clone, Debug)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut line_start) = (0usize, 1usize, 0usize);
    while i < chars.len() {
        let c = chars[i];
        let column = i - line_start + 1;
        let tok_line = line;
        let err = |msg: String| ParseError::new(tok_line, column, msg);
        if c == '\n' {
            line += 1;
            i += 1;
            line_start = i;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let lower = word.to_ascii_lowercase();
            match KEYWORDS.iter().find(|(k, _)| *k == lower) {
                Some((_, kw)) => Tok::Kw(*kw),
                None => Tok::Ident(word),
            }
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let mut is_float = false;
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
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
            let text: String = chars[start..i].iter().collect();
            if is_float {
                Tok::Float(
                    text.parse()
                        .map_err(|_| err(format!("bad number {text}")))?,
                )
            } else {
                Tok::Int(
                    text.parse()
                        .map_err(|_| err(format!("integer literal {text} out of range")))?,
                )
            }
        } else if c == '\'' {
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => return Err(err("unterminated string literal".into())),
                    Some('\'') if chars.get(i + 1) == Some(&'\'') => {
                        s.push('\'');
                        i += 2;
                    }
                    Some('\'') => {
                        i += 1;
                        break;
                    }
                    Some(ch) => {
                        if *ch == '\n' {
                            line += 1;
                            line_start = i + 1;
                        }
                        s.push(*ch);
                        i += 1;
                    }
                }
            }
            Tok::Str(s)
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            let sym = match two.as_str() {
                "!=" => Some("!="),
                "<>" => Some("!="),
                "<=" => Some("<="),
                ">=" => Some(">="),
                _ => None,
            };
            if let Some(sym) = sym {
                i += 2;
                Tok::Sym(sym)
            } else {
                let sym = match c {
                    ',' => ",",
                    '.' => ".",
                    '(' => "(",
                    ')' => ")",
                    '*' => "*",
                    '+' => "+",
                    '-' => "-",
                    '/' => "/",
                    '=' => "=",
                    '<' => "<",
                    '>' => ">",
                    _ => return Err(err(format!("unexpected character {c:?}"))),
                };
                i += 1;
                Tok::Sym(sym)
            }
        };
        out.push(Spanned {
            tok,
            line: tok_line,
            column,
        });
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    end: (usize, usize),
}

pub fn parse_query(text: &str) -> Result<Query, ParseError> {
    let toks = lex(text)?;
    let end_line = text.lines().count().max(1);
    let end_col = text
        .lines()
        .last()
        .map(|l| l.chars().count() + 1)
        .unwrap_or(1);
    let mut p = Parser {
        toks,
        pos: 0,
        end: (end_line, end_col),
    };
    let q = p.query()?;
    if let Some(t) = p.toks.get(p.pos) {
        return Err(ParseError::new(
            t.line,
            t.column,
            format!("unexpected {} after end of query", describe(&t.tok)),
        ));
    }
    Ok(q)
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("identifier {s:?}"),
        Tok::Kw(k) => format!("keyword {k:?}").to_uppercase(),
        Tok::Int(i) => format!("number {i}"),
        Tok::Float(x) => format!("number {x}"),
        Tok::Str(s) => format!("string '{s}'"),
        Tok::Sym(s) => format!("{s:?}"),
    }
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn error_here(&self, msg: impl Into<String>) -> ParseError {
        let (line, column) = self
            .toks
            .get(self.pos)
            .map(|s| (s.line, s.column))
            .unwrap_or(self.end);
        ParseError::new(line, column, msg)
    }

    fn unexpected(&self, wanted: &str) -> ParseError {
        match self.peek() {
            Some(t) => self.error_here(format!("expected {wanted}, found {}", describe(t))),
            None => self.error_here(format!("expected {wanted}, found end of input")),
        }
    }

    fn eat_kw(&mut self, kw: Kw) -> bool {
        if self.peek() == Some(&Tok::Kw(kw)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: Kw) -> Result<(), ParseError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("{kw:?}").to_uppercase()))
        }
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(s)) if *s == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, sym: &str) -> Result<(), ParseError> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("{sym:?}")))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.unexpected("identifier")),
        }
    }

    fn query(&mut self) -> Result<Query, ParseError> {
        self.expect_kw(Kw::Select)?;
        let mut select = vec![self.item()?];
        while self.eat_sym(",") {
            select.push(self.item()?);
        }
        self.expect_kw(Kw::From)?;
        let from = self.ident()?;
        let join = if self.eat_kw(Kw::Join) {
            let table = self.ident()?;
            self.expect_kw(Kw::On)?;
            let left = self.qualified()?;
            self.expect_sym("=")?;
            let right = self.qualified()?;
            Some(Join { table, left, right })
        } else {
            None
        };
        let filter = if self.eat_kw(Kw::Where) {
            Some(self.expr()?)
        } else {
            None
        };
        let mut group_by = Vec::new();
        if self.eat_kw(Kw::Group) {
            self.expect_kw(Kw::By)?;
            group_by.push(self.column_ref()?);
            while self.eat_sym(",") {
                group_by.push(self.column_ref()?);
            }
        }
        Ok(Query {
            select,
            from,
            join,
            filter,
            group_by,
        })
    }

    fn item(&mut self) -> Result<SelectItem, ParseError> {
        let expr = self.expr()?;
        let alias = if self.eat_kw(Kw::As) {
            Some(self.ident()?)
        } else {
            None
        };
        Ok(SelectItem { expr, alias })
    }

    fn qualified(&mut self) -> Result<ColumnRef, ParseError> {
        let c = self.column_ref()?;
        if c.table.is_none() {
            return Err(self.error_here("join keys must be written as table.column"));
        }
        Ok(c)
    }

    fn column_ref(&mut self) -> Result<ColumnRef, ParseError> {
        let first = self.ident()?;
        if self.eat_sym(".") {
            let col = self.ident()?;
            Ok(ColumnRef::qualified(&first, &col))
        } else {
            Ok(ColumnRef::bare(&first))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.and()?;
        while self.eat_kw(Kw::Or) {
            left = Expr::binary(BinOp::Or, left, self.and()?);
        }
        Ok(left)
    }

    fn and(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.not()?;
        while self.eat_kw(Kw::And) {
            left = Expr::binary(BinOp::And, left, self.not()?);
        }
        Ok(left)
    }

    fn not(&mut self) -> Result<Expr, ParseError> {
        if self.eat_kw(Kw::Not) {
            return Ok(Expr::Not(Box::new(self.not()?)));
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, ParseError> {
        let left = self.additive()?;
        let op = match self.peek() {
            Some(Tok::Sym("=")) => BinOp::Eq,
            Some(Tok::Sym("!=")) => BinOp::Ne,
            Some(Tok::Sym("<")) => BinOp::Lt,
            Some(Tok::Sym("<=")) => BinOp::Le,
            Some(Tok::Sym(">")) => BinOp::Gt,
            Some(Tok::Sym(">=")) => BinOp::Ge,
            _ => return Ok(left),
        };
        self.pos += 1;
        Ok(Expr::binary(op, left, self.additive()?))
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Sym("+")) => BinOp::Add,
                Some(Tok::Sym("-")) => BinOp::Sub,
                _ => return Ok(left),
            };
            self.pos += 1;
            left = Expr::binary(op, left, self.multiplicative()?);
        }
    }

    fn multiplicative(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Sym("*")) => BinOp::Mul,
                Some(Tok::Sym("/")) => BinOp::Div,
                _ => return Ok(left),
            };
            self.pos += 1;
            left = Expr::binary(op, left, self.unary()?);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat_sym("-") {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.unexpected("expression"));
        };
        match tok {
            Tok::Int(i) => {
                self.pos += 1;
                Ok(Expr::Lit(Value::Int(i)))
            }
            Tok::Float(x) => {
                self.pos += 1;
                Ok(Expr::Lit(Value::Float(x)))
            }
            Tok::Str(s) => {
                self.pos += 1;
                Ok(Expr::Lit(Value::Str(s)))
            }
            Tok::Kw(Kw::True) => {
                self.pos += 1;
                Ok(Expr::Lit(Value::Bool(true)))
            }
            Tok::Kw(Kw::False) => {
                self.pos += 1;
                Ok(Expr::Lit(Value::Bool(false)))
            }
            Tok::Sym("(") => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let is_call = matches!(
                    self.toks.get(self.pos + 1).map(|s| &s.tok),
                    Some(Tok::Sym("("))
                );
                if !is_call {
                    return Ok(Expr::Column(self.column_ref()?));
                }
                let func = AggFunc::parse(&name)
                    .ok_or_else(|| self.error_here(format!("unknown function {name:?}")))?;
                self.pos += 2;
                let arg = if self.eat_sym("*") {
                    if func != AggFunc::Count {
                        return Err(self.error_here(format!("{}(*) is not allowed", func.name())));
                    }
                    AggArg::Star
                } else {
                    AggArg::Column(self.column_ref()?)
                };
                self.expect_sym(")")?;
                Ok(Expr::Agg { func, arg })
            }
            _ => Err(self.unexpected("expression")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_items() {
        let q = parse_query("SELECT a, b FROM t").unwrap();
        assert_eq!(q.select.len(), 2);
        assert_eq!(q.from, "t");
        assert!(q.join.is_none());
    }

    #[test]
    fn join_clause() {
        let q = parse_query("SELECT a FROM t JOIN u ON t.k = u.k").unwrap();
        let j = q.join.unwrap();
        assert_eq!(j.table, "u");
        assert_eq!(j.left, ColumnRef::qualified("t", "k"));
        assert_eq!(j.right, ColumnRef::qualified("u", "k"));
    }

    #[test]
    fn keywords_are_case_insensitive() {
        let a = parse_query("select x as y from t where x > 1 group by x").unwrap();
        let b = parse_query("SELECT x AS y FROM t WHERE x > 1 GROUP BY x").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn precedence() {
        let q = parse_query("SELECT a + b * c = d OR NOT e AND f FROM t").unwrap();
        assert_eq!(
            q.select[0].expr.to_string(),
            "(((a + (b * c)) = d) OR ((NOT e) AND f))"
        );
    }

    #[test]
    fn aggregates_and_literals() {
        let q =
            parse_query("SELECT count(*) > 0 AS ok, SUM(x), 'it''s', 1.5e3, -2 FROM t").unwrap();
        assert_eq!(
            q.to_string(),
            "SELECT (count(*) > 0) AS ok, sum(x), 'it''s', 1500.0, (-2) FROM t"
        );
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse_query("SELECT a\nFROM").unwrap_err();
        assert_eq!((e.line, e.column), (2, 5));
        let e = parse_query("SELECT a FROM t JOIN u ON k = u.k").unwrap_err();
        assert!(e.message.contains("table.column"));
        assert!(parse_query("").is_err());
        assert!(parse_query("SELECT sum(*) FROM t").is_err());
        assert!(parse_query("SELECT a FROM t extra").is_err());
        assert!(parse_query("SELECT 'open FROM t").is_err());
        assert!(parse_query("SELECT a ; FROM t").is_err());
    }
}
