//! A small S-expression reader that keeps line positions and same-line
//! trailing comments of top-level forms.

use std::fmt;

use super::SmtError;

/// Source position. Positions never take part in equality.
#[derive(Clone, Copy, Debug, Default)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl PartialEq for Pos {
    fn eq(&self, _: &Pos) -> bool {
        true
    }
}

impl Eq for Pos {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SExpr {
    Atom(String, Pos),
    List(Vec<SExpr>, Pos),
}

impl SExpr {
    pub fn pos(&self) -> Pos {
        match self {
            SExpr::Atom(_, p) | SExpr::List(_, p) => *p,
        }
    }

    pub fn as_atom(&self) -> Option<&str> {
        match self {
            SExpr::Atom(s, _) => Some(s),
            SExpr::List(..) => None,
        }
    }

    pub fn as_list(&self) -> Option<&[SExpr]> {
        match self {
            SExpr::List(xs, _) => Some(xs),
            SExpr::Atom(..) => None,
        }
    }

    /// Head symbol of a list.
    pub fn head(&self) -> Option<&str> {
        self.as_list().and_then(|xs| xs.first()).and_then(SExpr::as_atom)
    }

    pub fn atoms(&self, out: &mut Vec<String>) {
        match self {
            SExpr::Atom(s, _) => out.push(s.clone()),
            SExpr::List(xs, _) => xs.iter().for_each(|x| x.atoms(out)),
        }
    }
}

impl fmt::Display for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SExpr::Atom(s, _) => f.write_str(s),
            SExpr::List(xs, _) => {
                f.write_str("(")?;
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{x}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// A top-level item: a form with its trailing comment, or a standalone comment.
#[derive(Clone, Debug)]
pub enum TopItem {
    Form { expr: SExpr, trailing_comment: Option<String> },
    Comment { text: String, line: usize },
}

enum Tok {
    Open(Pos),
    Close(Pos),
    Sym(String, Pos),
    Comment(String, Pos),
}

fn lex(text: &str) -> Result<Vec<Tok>, SmtError> {
    let mut toks = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        match c {
            '\n' => {
                line += 1;
                col = 1;
                i += 1;
                continue;
            }
            c if c.is_whitespace() => {}
            '(' => toks.push(Tok::Open(pos)),
            ')' => toks.push(Tok::Close(pos)),
            ';' => {
                let start = i;
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                let raw: String = chars[start..i].iter().collect();
                let body = raw.trim_start_matches(';').trim().to_string();
                toks.push(Tok::Comment(body, pos));
                col += i - start;
                continue;
            }
            '"' => {
                let start = i;
                i += 1;
                while i < chars.len() && chars[i] != '"' {
                    if chars[i] == '\n' {
                        line += 1;
                        col = 0;
                    }
                    i += 1;
                }
                if i >= chars.len() {
                    return Err(SmtError::Syntax { line: pos.line, col: pos.col, msg: "unterminated string".into() });
                }
                i += 1;
                toks.push(Tok::Sym(chars[start..i].iter().collect(), pos));
                col += 1;
                continue;
            }
            '|' => {
                let start = i + 1;
                i += 1;
                while i < chars.len() && chars[i] != '|' {
                    i += 1;
                }
                if i >= chars.len() {
                    return Err(SmtError::Syntax { line: pos.line, col: pos.col, msg: "unterminated quoted symbol".into() });
                }
                toks.push(Tok::Sym(chars[start..i].iter().collect(), pos));
                col += i + 1 - start + 1;
                i += 1;
                continue;
            }
            _ => {
                let start = i;
                while i < chars.len() && !chars[i].is_whitespace() && !matches!(chars[i], '(' | ')' | ';' | '"' | '|') {
                    i += 1;
                }
                toks.push(Tok::Sym(chars[start..i].iter().collect(), pos));
                col += i - start;
                continue;
            }
        }
        i += 1;
        col += 1;
    }
    Ok(toks)
}

/// Read all top-level forms and standalone comments.
pub fn read_top_level(text: &str) -> Result<Vec<TopItem>, SmtError> {
    let toks = lex(text)?;
    let mut items = Vec::new();
    let mut stack: Vec<(Vec<SExpr>, Pos)> = Vec::new();
    let mut last_close_line: Option<usize> = None;
    for tok in toks {
        match tok {
            Tok::Open(p) => {
                stack.push((Vec::new(), p));
                last_close_line = None;
            }
            Tok::Close(p) => {
                let (xs, open) = stack.pop().ok_or(SmtError::Syntax { line: p.line, col: p.col, msg: "unbalanced `)`".into() })?;
                let e = SExpr::List(xs, open);
                match stack.last_mut() {
                    Some((parent, _)) => parent.push(e),
                    None => {
                        items.push(TopItem::Form { expr: e, trailing_comment: None });
                        last_close_line = Some(p.line);
                        continue;
                    }
                }
                last_close_line = None;
            }
            Tok::Sym(s, p) => {
                last_close_line = None;
                match stack.last_mut() {
                    Some((parent, _)) => parent.push(SExpr::Atom(s, p)),
                    None => return Err(SmtError::Syntax { line: p.line, col: p.col, msg: format!("stray token `{s}` at top level") }),
                }
            }
            Tok::Comment(text, p) => {
                if stack.is_empty() {
                    if last_close_line == Some(p.line) {
                        if let Some(TopItem::Form { trailing_comment, .. }) = items.last_mut() {
                            *trailing_comment = Some(text);
                        }
                    } else {
                        items.push(TopItem::Comment { text, line: p.line });
                    }
                }
                last_close_line = None;
            }
        }
    }
    if let Some((_, p)) = stack.last() {
        return Err(SmtError::Syntax { line: p.line, col: p.col, msg: "unclosed `(`".into() });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_comments_attach_to_forms() {
        let text = ";; header\n(declare-const a Bool) ;; \"x\" {\"k\":1}\n(assert\n  (! a :named T)) ;; tail\n";
        let items = read_top_level(text).unwrap();
        assert_eq!(items.len(), 3);
        assert!(matches!(&items[0], TopItem::Comment { text, .. } if text == "header"));
        match &items[1] {
            TopItem::Form { expr, trailing_comment } => {
                assert_eq!(expr.to_string(), "(declare-const a Bool)");
                assert_eq!(trailing_comment.as_deref(), Some("\"x\" {\"k\":1}"));
            }
            _ => panic!(),
        }
        assert!(matches!(&items[2], TopItem::Form { trailing_comment: Some(t), .. } if t == "tail"));
    }

    #[test]
    fn syntax_errors_carry_positions() {
        match read_top_level("(a\n (b c)") {
            Err(SmtError::Syntax { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match read_top_level("(a))") {
            Err(SmtError::Syntax { line, col, .. }) => assert_eq!((line, col), (1, 4)),
            other => panic!("{other:?}"),
        }
    }
}
