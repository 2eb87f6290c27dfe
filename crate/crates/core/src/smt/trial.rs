//! Trial constraint programs: tagged SMT-LIB assertions over declared
//! variables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use super::sexpr::{read_top_level, Pos, SExpr, TopItem};
use super::SmtError;
use crate::model::{AtomicConstraint, Comparison, ConstraintFormula, Number, Predicate, Target};
use crate::temporal::{format_ratio, parse_decimal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Inclusion,
    Exclusion,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Inclusion => "inclusion",
            Side::Exclusion => "exclusion",
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "inclusion" => Some(Side::Inclusion),
            "exclusion" => Some(Side::Exclusion),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sort {
    Bool,
    Int,
    Real,
}

impl Sort {
    pub fn as_str(self) -> &'static str {
        match self {
            Sort::Bool => "Bool",
            Sort::Int => "Int",
            Sort::Real => "Real",
        }
    }

    fn parse(s: &str) -> Option<Sort> {
        match s {
            "Bool" => Some(Sort::Bool),
            "Int" => Some(Sort::Int),
            "Real" => Some(Sort::Real),
            _ => None,
        }
    }
}

/// Requirement class carried by a component tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstraintClass {
    PrescreenMustSuffice,
    NotRequirementOrOneOffAction,
    OtherRequirements,
}

impl ConstraintClass {
    /// Label spellings accepted in tags, including a common misspelling.
    pub fn from_label(label: &str) -> Option<ConstraintClass> {
        Some(match label {
            "PRESCREEN_NOTES_MUST_COMPLETELY_SUFFICE" => ConstraintClass::PrescreenMustSuffice,
            "NOT_REQUIREMNET_OR_ALWAYS_SATISFIABLE_WITH_ACTION" | "NOT_REQUIREMENT_OR_ALWAYS_SATISFIABLE_WITH_ACTION" => {
                ConstraintClass::NotRequirementOrOneOffAction
            }
            "OTHER_REQUIREMENTS" | "CAN_ALWAYS_GO_FROM_SATISFIED_TO_NOTSATISFIED" => ConstraintClass::OtherRequirements,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TagKind {
    Component { req: u32, index: u32, label: String, class: ConstraintClass },
    Auxiliary { req: u32, index: u32 },
    /// Trial intent targets (`TARGET{n}`).
    Target { index: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProvenanceTag {
    pub raw: String,
    pub kind: TagKind,
}

impl ProvenanceTag {
    pub fn parse(raw: &str) -> Option<ProvenanceTag> {
        let kind = if let Some(rest) = raw.strip_prefix("TARGET") {
            TagKind::Target { index: parse_index(rest)? }
        } else {
            let rest = raw.strip_prefix("REQ")?;
            let (req, rest) = rest.split_once('_')?;
            let req = parse_index(req)?;
            if let Some(r) = rest.strip_prefix("AUXILIARY") {
                TagKind::Auxiliary { req, index: parse_index(r)? }
            } else {
                let r = rest.strip_prefix("COMPONENT")?;
                let (idx, label) = r.split_once('_')?;
                let class = ConstraintClass::from_label(label)?;
                TagKind::Component { req, index: parse_index(idx)?, label: label.to_string(), class }
            }
        };
        Some(ProvenanceTag { raw: raw.to_string(), kind })
    }

    pub fn class(&self) -> Option<ConstraintClass> {
        match &self.kind {
            TagKind::Component { class, .. } => Some(*class),
            _ => None,
        }
    }

    pub fn req(&self) -> Option<u32> {
        match &self.kind {
            TagKind::Component { req, .. } | TagKind::Auxiliary { req, .. } => Some(*req),
            TagKind::Target { .. } => None,
        }
    }
}

fn parse_index(s: &str) -> Option<u32> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnnotationStatus {
    Valid,
    Missing,
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Declaration {
    pub name: String,
    pub sort: Sort,
    pub predicate: Predicate,
    /// Raw same-line comment after the declaration.
    pub comment: Option<String>,
    pub annotation: Option<serde_json::Map<String, serde_json::Value>>,
    pub annotation_status: AnnotationStatus,
    pub pos: Pos,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assertion {
    pub formula: ConstraintFormula,
    pub tag: ProvenanceTag,
    pub comment: Option<String>,
    pub pos: Pos,
}

/// `define-fun` helper, kept verbatim.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Helper {
    pub name: String,
    pub sort: Sort,
    pub body: SExpr,
}

/// Parse notes that do not affect equality.
#[derive(Clone, Debug, Default)]
pub struct Diagnostics(pub Vec<String>);

impl PartialEq for Diagnostics {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Eq for Diagnostics {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialProgram {
    pub trial_id: String,
    pub subcohort_id: String,
    pub side: Side,
    pub declarations: Vec<Declaration>,
    pub helpers: Vec<Helper>,
    pub assertions: Vec<Assertion>,
    pub warnings: Diagnostics,
}

impl TrialProgram {
    pub fn declaration(&self, name: &str) -> Option<&Declaration> {
        self.declarations.iter().find(|d| d.name == name)
    }

    pub fn components(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.iter().filter(|a| matches!(a.tag.kind, TagKind::Component { .. }))
    }

    pub fn auxiliaries(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.iter().filter(|a| matches!(a.tag.kind, TagKind::Auxiliary { .. }))
    }

    pub fn targets(&self) -> impl Iterator<Item = &Assertion> {
        self.assertions.iter().filter(|a| matches!(a.tag.kind, TagKind::Target { .. }))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    /// Treat missing or malformed annotations as errors.
    pub strict_annotations: bool,
}

const BOOL_KEYS: &[&str] = &["when_to_set_to_true", "when_to_set_to_false", "when_to_set_to_null", "meaning"];
const NUM_KEYS: &[&str] = &["when_to_set_to_value", "when_to_set_to_null", "meaning"];

/// Split `"quoted text" {json}` and check the JSON key set for the sort.
fn annotation_of(comment: Option<&str>, sort: Sort) -> (Option<serde_json::Map<String, serde_json::Value>>, AnnotationStatus, String) {
    let Some(c) = comment else {
        return (None, AnnotationStatus::Missing, String::new());
    };
    let mut rest = c.trim();
    let mut text = String::new();
    if let Some(r) = rest.strip_prefix('"') {
        match r.find('"') {
            Some(end) => {
                text = r[..end].to_string();
                rest = r[end + 1..].trim();
            }
            None => return (None, AnnotationStatus::Invalid("unterminated quoted text".into()), r.to_string()),
        }
    } else if !rest.starts_with('{') {
        return (None, AnnotationStatus::Missing, rest.to_string());
    }
    if rest.is_empty() {
        return (None, AnnotationStatus::Missing, text);
    }
    let obj = match serde_json::from_str::<serde_json::Value>(rest) {
        Ok(serde_json::Value::Object(m)) => m,
        Ok(_) => return (None, AnnotationStatus::Invalid("annotation is not a JSON object".into()), text),
        Err(e) => return (None, AnnotationStatus::Invalid(format!("annotation JSON: {e}")), text),
    };
    let want = if sort == Sort::Bool { BOOL_KEYS } else { NUM_KEYS };
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    let mut expect: Vec<&str> = want.to_vec();
    expect.sort_unstable();
    let status = if keys == expect {
        AnnotationStatus::Valid
    } else {
        AnnotationStatus::Invalid(format!("keys {keys:?} do not match {expect:?}"))
    };
    (Some(obj), status, text)
}

struct Ctx<'a> {
    decls: &'a HashMap<String, (Sort, Predicate)>,
    helpers: &'a HashMap<String, (Sort, SExpr)>,
}

enum NumTerm {
    Var(Predicate),
    Lit(Number),
    Count(Vec<ConstraintFormula>),
    Other,
}

fn syntax(p: Pos, msg: impl Into<String>) -> SmtError {
    SmtError::Syntax { line: p.line, col: p.col, msg: msg.into() }
}

impl Ctx<'_> {
    fn is_bool_term(&self, e: &SExpr) -> bool {
        match e {
            SExpr::Atom(s, _) => match s.as_str() {
                "true" | "false" => true,
                s => {
                    matches!(self.decls.get(s), Some((Sort::Bool, _))) || matches!(self.helpers.get(s), Some((Sort::Bool, _)))
                }
            },
            SExpr::List(..) => matches!(
                e.head(),
                Some("and" | "or" | "not" | "=>" | "=" | "distinct" | "<" | "<=" | ">" | ">=" | "xor")
            ) || (e.head() == Some("ite") && e.as_list().is_some_and(|xs| xs.len() == 4 && self.is_bool_term(&xs[2]))),
        }
    }

    fn formula(&self, e: &SExpr) -> Result<ConstraintFormula, SmtError> {
        use ConstraintFormula as F;
        match e {
            SExpr::Atom(s, p) => match s.as_str() {
                "true" => Ok(F::Const(true)),
                "false" => Ok(F::Const(false)),
                name => match self.decls.get(name) {
                    Some((Sort::Bool, pred)) => Ok(F::Atom(AtomicConstraint::boolean(pred.clone()))),
                    Some(_) => Err(syntax(*p, format!("`{name}` is numeric, expected a Boolean"))),
                    None => match self.helpers.get(name) {
                        Some((Sort::Bool, body)) => self.formula(body),
                        _ => Err(SmtError::UndeclaredSymbol { name: name.to_string(), line: p.line }),
                    },
                },
            },
            SExpr::List(xs, p) => {
                let head = xs.first().and_then(SExpr::as_atom).ok_or_else(|| syntax(*p, "expected an operator"))?;
                let args = &xs[1..];
                let all = |f: &Self| args.iter().map(|a| f.formula(a)).collect::<Result<Vec<_>, _>>();
                match head {
                    "and" => Ok(F::And(all(self)?)),
                    "or" => Ok(F::Or(all(self)?)),
                    "not" => {
                        if args.len() != 1 {
                            return Err(syntax(*p, "`not` takes one argument"));
                        }
                        Ok(F::not(self.formula(&args[0])?))
                    }
                    "=>" => {
                        let mut fs = all(self)?;
                        if fs.len() < 2 {
                            return Err(syntax(*p, "`=>` takes at least two arguments"));
                        }
                        let mut acc = fs.pop().unwrap();
                        while let Some(a) = fs.pop() {
                            acc = F::implies(a, acc);
                        }
                        Ok(acc)
                    }
                    "xor" => {
                        if args.len() != 2 {
                            return Err(syntax(*p, "`xor` takes two arguments"));
                        }
                        Ok(F::not(F::iff(self.formula(&args[0])?, self.formula(&args[1])?)))
                    }
                    "ite" => {
                        if args.len() != 3 {
                            return Err(syntax(*p, "`ite` takes three arguments"));
                        }
                        let c = self.formula(&args[0])?;
                        let a = self.formula(&args[1])?;
                        let b = self.formula(&args[2])?;
                        Ok(F::And(vec![F::implies(c.clone(), a), F::implies(F::not(c), b)]))
                    }
                    "=" | "distinct" if args.len() >= 2 && args.iter().all(|a| self.is_bool_term(a)) => {
                        let fs = all(self)?;
                        let eqs: Vec<F> = fs.windows(2).map(|w| F::iff(w[0].clone(), w[1].clone())).collect();
                        let eq = if eqs.len() == 1 { eqs.into_iter().next().unwrap() } else { F::And(eqs) };
                        Ok(if head == "=" { eq } else { F::not(eq) })
                    }
                    "=" | "distinct" | "<" | "<=" | ">" | ">=" => self.comparison(head, args, e),
                    "!" => Err(syntax(*p, "nested `!` annotations are not supported")),
                    other => Err(syntax(*p, format!("unsupported operator `{other}`"))),
                }
            }
        }
    }

    fn num_term(&self, e: &SExpr) -> Result<NumTerm, SmtError> {
        match e {
            SExpr::Atom(s, p) => {
                if let Some(v) = parse_decimal(s) {
                    return Ok(NumTerm::Lit(v));
                }
                match self.decls.get(s.as_str()) {
                    Some((Sort::Bool, _)) => Err(syntax(*p, format!("`{s}` is Boolean, expected a number"))),
                    Some((_, pred)) => Ok(NumTerm::Var(pred.clone())),
                    None => match self.helpers.get(s.as_str()) {
                        Some((_, body)) => self.num_term(body),
                        None => Err(SmtError::UndeclaredSymbol { name: s.clone(), line: p.line }),
                    },
                }
            }
            SExpr::List(xs, _) => {
                let args = &xs[1..];
                match e.head() {
                    Some("-") if args.len() == 1 => Ok(match self.num_term(&args[0])? {
                        NumTerm::Lit(v) => NumTerm::Lit(-v),
                        _ => NumTerm::Other,
                    }),
                    Some("/") if args.len() == 2 => match (self.num_term(&args[0])?, self.num_term(&args[1])?) {
                        (NumTerm::Lit(a), NumTerm::Lit(b)) if !b.is_zero() => Ok(NumTerm::Lit(a / b)),
                        _ => Ok(NumTerm::Other),
                    },
                    Some("+") => {
                        let mut children = Vec::new();
                        for a in args {
                            if a.as_atom().and_then(parse_decimal) == Some(Number::zero()) {
                                continue;
                            }
                            match self.indicator(a)? {
                                Some(f) => children.push(f),
                                None => {
                                    self.check_symbols(a)?;
                                    return Ok(NumTerm::Other);
                                }
                            }
                        }
                        Ok(NumTerm::Count(children))
                    }
                    _ => {
                        self.check_symbols(e)?;
                        Ok(NumTerm::Other)
                    }
                }
            }
        }
    }

    /// `(ite c 1 0)` as the formula `c`.
    fn indicator(&self, e: &SExpr) -> Result<Option<ConstraintFormula>, SmtError> {
        let Some(xs) = e.as_list() else { return Ok(None) };
        if e.head() != Some("ite") || xs.len() != 4 {
            return Ok(None);
        }
        let one = xs[2].as_atom().and_then(parse_decimal);
        let zero = xs[3].as_atom().and_then(parse_decimal);
        if one != Some(Number::one()) || zero != Some(Number::zero()) {
            return Ok(None);
        }
        Ok(Some(self.formula(&xs[1])?))
    }

    fn check_symbols(&self, e: &SExpr) -> Result<(), SmtError> {
        let mut syms = Vec::new();
        e.atoms(&mut syms);
        for s in syms {
            if is_operator(&s) || parse_decimal(&s).is_some() || self.decls.contains_key(&s) || self.helpers.contains_key(&s) {
                continue;
            }
            return Err(SmtError::UndeclaredSymbol { name: s, line: e.pos().line });
        }
        Ok(())
    }

    fn comparison(&self, op: &str, args: &[SExpr], whole: &SExpr) -> Result<ConstraintFormula, SmtError> {
        use ConstraintFormula as F;
        let cmp = match op {
            "<" => Comparison::Lt,
            "<=" => Comparison::Le,
            ">" => Comparison::Gt,
            ">=" => Comparison::Ge,
            "=" => Comparison::Eq,
            _ => Comparison::Ne,
        };
        if args.len() != 2 {
            if args.len() > 2 && cmp != Comparison::Ne {
                let mut parts = Vec::new();
                for w in args.windows(2) {
                    parts.push(self.comparison(op, w, whole)?);
                }
                return Ok(F::And(parts));
            }
            return Err(syntax(whole.pos(), format!("`{op}` needs two arguments")));
        }
        let lhs = self.num_term(&args[0])?;
        let rhs = self.num_term(&args[1])?;
        let opaque = || {
            let mut symbols = Vec::new();
            whole.atoms(&mut symbols);
            symbols.retain(|s| self.decls.contains_key(s));
            symbols.dedup();
            F::Opaque { text: whole.to_string(), symbols }
        };
        Ok(match (lhs, rhs) {
            (NumTerm::Var(pred), NumTerm::Lit(v)) => {
                let unit = pred.canonical().and_then(|n| n.unit.clone()).unwrap_or_default();
                F::Atom(AtomicConstraint::numeric(pred, cmp, v, &unit))
            }
            (NumTerm::Lit(v), NumTerm::Var(pred)) => {
                let unit = pred.canonical().and_then(|n| n.unit.clone()).unwrap_or_default();
                F::Atom(AtomicConstraint::numeric(pred, cmp.flipped(), v, &unit))
            }
            (NumTerm::Count(cs), NumTerm::Lit(v)) => count_formula(cs, cmp, v).unwrap_or_else(opaque),
            (NumTerm::Lit(v), NumTerm::Count(cs)) => count_formula(cs, cmp.flipped(), v).unwrap_or_else(opaque),
            _ => opaque(),
        })
    }
}

fn is_operator(s: &str) -> bool {
    matches!(s, "+" | "-" | "*" | "/" | "ite" | "and" | "or" | "not" | "=" | "<" | "<=" | ">" | ">=" | "=>" | "distinct" | "true" | "false" | "abs" | "div" | "mod" | "to_real" | "to_int")
}

/// Lower `sum(indicators) cmp v` to counting formulas.
fn count_formula(cs: Vec<ConstraintFormula>, cmp: Comparison, v: Number) -> Option<ConstraintFormula> {
    use ConstraintFormula as F;
    let at_least = |k: i128| -> F { F::CountAtLeast(k.clamp(0, u32::MAX as i128) as u32, cs.clone()) };
    let floor = v.floor().to_integer();
    let ceil = v.ceil().to_integer();
    let integral = v.is_integer();
    let f = match cmp {
        Comparison::Ge => at_least(ceil),
        Comparison::Gt => at_least(floor + 1),
        Comparison::Le => F::not(at_least(floor + 1)),
        Comparison::Lt => F::not(at_least(ceil)),
        Comparison::Eq if integral => F::And(vec![at_least(floor), F::not(at_least(floor + 1))]),
        Comparison::Eq => F::Const(false),
        Comparison::Ne if integral => F::not(F::And(vec![at_least(floor), F::not(at_least(floor + 1))])),
        Comparison::Ne => F::Const(true),
    };
    Some(f)
}

/// Parse a program. Identity comes from the header comment when present.
pub fn parse_trial_program(text: &str) -> Result<TrialProgram, SmtError> {
    parse_trial_program_with(text, ParseOptions::default())
}

pub fn parse_trial_program_with(text: &str, opts: ParseOptions) -> Result<TrialProgram, SmtError> {
    let items = read_top_level(text)?;
    let mut prog = TrialProgram {
        trial_id: String::new(),
        subcohort_id: "main".to_string(),
        side: Side::Inclusion,
        declarations: Vec::new(),
        helpers: Vec::new(),
        assertions: Vec::new(),
        warnings: Diagnostics::default(),
    };
    let mut decls: HashMap<String, (Sort, Predicate)> = HashMap::new();
    let mut helpers: HashMap<String, (Sort, SExpr)> = HashMap::new();
    let mut pending: Vec<(SExpr, Option<String>)> = Vec::new();

    for item in items {
        let (expr, comment) = match item {
            TopItem::Comment { text, .. } => {
                if let Some(meta) = text.strip_prefix("satir-program") {
                    for kv in meta.split_whitespace() {
                        match kv.split_once('=') {
                            Some(("trial", v)) => prog.trial_id = v.to_string(),
                            Some(("subcohort", v)) => prog.subcohort_id = v.to_string(),
                            Some(("side", v)) => {
                                prog.side = Side::parse(v).ok_or_else(|| syntax(Pos::default(), format!("bad side `{v}`")))?
                            }
                            _ => {}
                        }
                    }
                }
                continue;
            }
            TopItem::Form { expr, trailing_comment } => (expr, trailing_comment),
        };
        let p = expr.pos();
        match expr.head() {
            Some("declare-const") | Some("declare-fun") => {
                let xs = expr.as_list().unwrap();
                let (name, sort) = match (expr.head(), xs.len()) {
                    (Some("declare-const"), 3) => (xs[1].as_atom(), xs[2].as_atom()),
                    (Some("declare-fun"), 4) if xs[2].as_list().is_some_and(|a| a.is_empty()) => (xs[1].as_atom(), xs[3].as_atom()),
                    _ => (None, None),
                };
                let (Some(name), Some(sort_text)) = (name, sort) else {
                    return Err(syntax(p, "malformed declaration"));
                };
                let sort = Sort::parse(sort_text).ok_or_else(|| syntax(p, format!("unsupported sort `{sort_text}`")))?;
                let (annotation, status, free_text) = annotation_of(comment.as_deref(), sort);
                match &status {
                    AnnotationStatus::Valid => {}
                    AnnotationStatus::Missing if opts.strict_annotations => {
                        return Err(SmtError::MissingAnnotation { name: name.to_string(), line: p.line })
                    }
                    AnnotationStatus::Invalid(why) if opts.strict_annotations => {
                        return Err(SmtError::BadAnnotation { name: name.to_string(), line: p.line, msg: why.clone() })
                    }
                    AnnotationStatus::Missing => prog.warnings.0.push(format!("line {}: `{name}` has no annotation", p.line)),
                    AnnotationStatus::Invalid(why) => prog.warnings.0.push(format!("line {}: `{name}` annotation: {why}", p.line)),
                }
                let predicate = Predicate::from_symbol(name, &free_text);
                if let Predicate::Canonical(c) = &predicate {
                    let numeric_sort = sort != Sort::Bool;
                    if numeric_sort != c.name.is_numeric() {
                        prog.warnings.0.push(format!("line {}: sort of `{name}` disagrees with its stem", p.line));
                    }
                }
                if decls.insert(name.to_string(), (sort, predicate.clone())).is_some() {
                    prog.warnings.0.push(format!("line {}: `{name}` declared twice", p.line));
                    prog.declarations.retain(|d| d.name != name);
                }
                prog.declarations.push(Declaration {
                    name: name.to_string(),
                    sort,
                    predicate,
                    comment,
                    annotation,
                    annotation_status: status,
                    pos: p,
                });
            }
            Some("define-fun") => {
                let xs = expr.as_list().unwrap();
                if xs.len() != 5 || !xs[2].as_list().is_some_and(|a| a.is_empty()) {
                    return Err(syntax(p, "only nullary define-fun is supported"));
                }
                let name = xs[1].as_atom().ok_or_else(|| syntax(p, "malformed define-fun"))?;
                let sort_text = xs[3].as_atom().unwrap_or("");
                let sort = Sort::parse(sort_text).ok_or_else(|| syntax(p, format!("unsupported sort `{sort_text}`")))?;
                helpers.insert(name.to_string(), (sort, xs[4].clone()));
                prog.helpers.push(Helper { name: name.to_string(), sort, body: xs[4].clone() });
            }
            Some("assert") => pending.push((expr, comment)),
            Some("set-logic" | "set-option" | "set-info" | "check-sat" | "get-model" | "exit" | "push" | "pop") => {}
            Some(other) => return Err(syntax(p, format!("unsupported command `{other}`"))),
            None => return Err(syntax(p, "expected a command")),
        }
    }

    let ctx = Ctx { decls: &decls, helpers: &helpers };
    for (expr, comment) in pending {
        let p = expr.pos();
        let xs = expr.as_list().unwrap();
        if xs.len() != 2 {
            return Err(syntax(p, "assert takes one term"));
        }
        let body = &xs[1];
        let named = body.as_list().filter(|_| body.head() == Some("!"));
        let Some(named) = named else {
            return Err(SmtError::BadNamedTag { tag: String::new(), line: p.line });
        };
        if named.len() != 4 || named[2].as_atom() != Some(":named") {
            return Err(SmtError::BadNamedTag { tag: String::new(), line: p.line });
        }
        let raw = named[3].as_atom().unwrap_or("");
        let tag = ProvenanceTag::parse(raw).ok_or_else(|| SmtError::BadNamedTag { tag: raw.to_string(), line: p.line })?;
        let formula = ctx.formula(&named[1])?;
        prog.assertions.push(Assertion { formula, tag, comment, pos: p });
    }
    Ok(prog)
}

/// Parse a file laid out as `{subcohort}/{trial}_{side}_program.smt2`.
pub fn parse_trial_file(path: &Path) -> Result<TrialProgram, SmtError> {
    let text = std::fs::read_to_string(path).map_err(|e| SmtError::Io(format!("{}: {e}", path.display())))?;
    let mut prog = parse_trial_program(&text)?;
    if prog.trial_id.is_empty() {
        if let Some((trial, side)) = identity_from_path(path) {
            prog.trial_id = trial;
            prog.side = side;
            if let Some(sub) = path.parent().and_then(Path::file_name).and_then(|s| s.to_str()) {
                prog.subcohort_id = sub.to_string();
            }
        }
    }
    Ok(prog)
}

/// `NCT00362869_inclusion_program.smt2` -> (`NCT00362869`, Inclusion).
pub fn identity_from_path(path: &Path) -> Option<(String, Side)> {
    let stem = path.file_name()?.to_str()?.strip_suffix(".smt2")?;
    let stem = stem.strip_suffix("_program")?;
    let (trial, side) = stem.rsplit_once('_')?;
    Some((trial.to_string(), Side::parse(side)?))
}

fn render_number(v: &Number, sort: Sort) -> String {
    let body = |x: &Number| -> String {
        let s = format_ratio(x);
        if s.contains('/') {
            let (n, d) = (x.numer(), x.denom());
            return format!("(/ {n}.0 {d}.0)");
        }
        if sort == Sort::Real && !s.contains('.') {
            format!("{s}.0")
        } else {
            s
        }
    };
    if v.is_negative() {
        format!("(- {})", body(&-*v))
    } else {
        body(v)
    }
}

fn render_formula(f: &ConstraintFormula, sorts: &HashMap<String, Sort>, out: &mut String) {
    use ConstraintFormula as F;
    match f {
        F::Const(b) => out.push_str(if *b { "true" } else { "false" }),
        F::Opaque { text, .. } => out.push_str(text),
        F::Atom(a) => {
            let sym = a.symbol();
            match &a.target {
                Target::Bool(b) => {
                    let positive = (*b) == (a.cmp == Comparison::Eq);
                    if positive {
                        out.push_str(&sym);
                    } else {
                        let _ = write!(out, "(not {sym})");
                    }
                }
                Target::Number { value, .. } => {
                    let sort = sorts.get(&sym).copied().unwrap_or(Sort::Real);
                    let _ = write!(out, "({} {sym} {})", a.cmp.smt_op(), render_number(value, sort));
                }
                Target::Interval { interval, .. } => {
                    let sort = sorts.get(&sym).copied().unwrap_or(Sort::Real);
                    let mut parts = Vec::new();
                    if let Some(l) = &interval.lower {
                        parts.push(format!("({} {sym} {})", if interval.lower_inclusive { ">=" } else { ">" }, render_number(l, sort)));
                    }
                    if let Some(u) = &interval.upper {
                        parts.push(format!("({} {sym} {})", if interval.upper_inclusive { "<=" } else { "<" }, render_number(u, sort)));
                    }
                    let inner = match parts.len() {
                        0 => "true".to_string(),
                        1 => parts.pop().unwrap(),
                        _ => format!("(and {})", parts.join(" ")),
                    };
                    if a.cmp == Comparison::Ne {
                        let _ = write!(out, "(not {inner})");
                    } else {
                        out.push_str(&inner);
                    }
                }
            }
        }
        F::Not(x) => {
            out.push_str("(not ");
            render_formula(x, sorts, out);
            out.push(')');
        }
        F::And(xs) | F::Or(xs) => {
            out.push_str(if matches!(f, F::And(_)) { "(and" } else { "(or" });
            for x in xs {
                out.push(' ');
                render_formula(x, sorts, out);
            }
            out.push(')');
        }
        F::CountAtLeast(k, xs) => {
            out.push_str("(>= (+");
            for x in xs {
                out.push_str(" (ite ");
                render_formula(x, sorts, out);
                out.push_str(" 1 0)");
            }
            if xs.len() < 2 {
                // keep the sum n-ary so it reads back as a count
                out.push_str(" 0");
            }
            let _ = write!(out, ") {k})");
        }
        F::Implies(a, b) | F::Iff(a, b) => {
            out.push_str(if matches!(f, F::Implies(..)) { "(=> " } else { "(= " });
            render_formula(a, sorts, out);
            out.push(' ');
            render_formula(b, sorts, out);
            out.push(')');
        }
    }
}

/// Render a formula as SMT-LIB text.
pub fn formula_to_smt(f: &ConstraintFormula, sorts: &HashMap<String, Sort>) -> String {
    let mut s = String::new();
    render_formula(f, sorts, &mut s);
    s
}

pub fn serialize_trial_program(p: &TrialProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, ";; satir-program trial={} subcohort={} side={}", p.trial_id, p.subcohort_id, p.side.as_str());
    let sorts: HashMap<String, Sort> = p.declarations.iter().map(|d| (d.name.clone(), d.sort)).collect();
    for d in &p.declarations {
        let _ = write!(out, "(declare-const {} {})", d.name, d.sort.as_str());
        if let Some(c) = &d.comment {
            let _ = write!(out, " ;; {c}");
        }
        out.push('\n');
    }
    for h in &p.helpers {
        let _ = writeln!(out, "(define-fun {} () {} {})", h.name, h.sort.as_str(), h.body);
    }
    for a in &p.assertions {
        let _ = write!(out, "(assert (! {} :named {}))", formula_to_smt(&a.formula, &sorts), a.tag.raw);
        if let Some(c) = &a.comment {
            let _ = write!(out, " ;; {c}");
        }
        out.push('\n');
    }
    out
}

/// Tag census for a program.
pub fn tag_counts(p: &TrialProgram) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for a in &p.assertions {
        let key = match &a.tag.kind {
            TagKind::Component { class, .. } => format!("{class:?}"),
            TagKind::Auxiliary { .. } => "Auxiliary".to_string(),
            TagKind::Target { .. } => "Target".to_string(),
        };
        *m.entry(key).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
(declare-const patient_age_value_recorded_now_in_years Real) ;; "age" {"when_to_set_to_value":"a","when_to_set_to_null":"b","meaning":"c"}
(declare-const patient_is_pregnant_now Bool) ;; "pregnant"
(declare-const a Bool)
(declare-const b Bool)
(declare-const c Bool)
(assert (! (>= patient_age_value_recorded_now_in_years 18.0) :named REQ0_COMPONENT0_PRESCREEN_NOTES_MUST_COMPLETELY_SUFFICE))
(assert (! (not patient_is_pregnant_now) :named REQ1_COMPONENT0_OTHER_REQUIREMENTS))
(assert (! (>= (+ (ite a 1 0) (ite b 1 0) (ite c 1 0)) 2) :named REQ2_COMPONENT0_OTHER_REQUIREMENTS))
(assert (! (= a (or b c)) :named REQ2_AUXILIARY0))
"#;

    #[test]
    fn parses_small_program() {
        let p = parse_trial_program(SMALL).unwrap();
        assert_eq!(p.declarations.len(), 5);
        assert_eq!(p.assertions.len(), 4);
        assert_eq!(p.declarations[0].annotation_status, AnnotationStatus::Valid);
        assert_eq!(p.declarations[1].annotation_status, AnnotationStatus::Missing);
        assert!(matches!(p.assertions[2].formula, ConstraintFormula::CountAtLeast(2, _)));
        assert!(matches!(p.assertions[3].formula, ConstraintFormula::Iff(..)));
        let again = parse_trial_program(&serialize_trial_program(&p)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn undeclared_symbol_reports_line() {
        let text = "(declare-const a Bool)\n(assert (! (and a b) :named REQ0_COMPONENT0_OTHER_REQUIREMENTS))\n";
        match parse_trial_program(text) {
            Err(SmtError::UndeclaredSymbol { name, line }) => assert_eq!((name.as_str(), line), ("b", 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_tags_rejected() {
        let text = "(declare-const a Bool)\n(assert (! a :named COMPONENT0_PRESCREEN_NOTES_MUST_COMPLETELY_SUFFICE))\n";
        assert!(matches!(parse_trial_program(text), Err(SmtError::BadNamedTag { .. })));
        let bare = "(declare-const a Bool)\n(assert a)\n";
        assert!(matches!(parse_trial_program(bare), Err(SmtError::BadNamedTag { .. })));
    }

    #[test]
    fn strict_mode_requires_annotations() {
        let text = "(declare-const a Bool) ;; \"just text\"\n";
        assert!(parse_trial_program(text).is_ok());
        let strict = ParseOptions { strict_annotations: true };
        assert!(matches!(parse_trial_program_with(text, strict), Err(SmtError::MissingAnnotation { .. })));
    }

    #[test]
    fn tag_grammar() {
        let t = ProvenanceTag::parse("REQ12_COMPONENT3_NOT_REQUIREMNET_OR_ALWAYS_SATISFIABLE_WITH_ACTION").unwrap();
        assert_eq!(t.class(), Some(ConstraintClass::NotRequirementOrOneOffAction));
        assert_eq!(t.req(), Some(12));
        assert!(matches!(ProvenanceTag::parse("REQ3_AUXILIARY0").unwrap().kind, TagKind::Auxiliary { req: 3, index: 0 }));
        assert!(ProvenanceTag::parse("REQ3_COMPONENT0_SOMETHING_ELSE").is_none());
        assert!(ProvenanceTag::parse("REQx_AUXILIARY0").is_none());
    }

    #[test]
    fn define_fun_counts_lower() {
        let text = "(declare-const a Bool)\n(declare-const b Bool)\n(define-fun n () Int (+ (ite a 1 0) (ite b 1 0)))\n(assert (! (>= n 1) :named REQ0_COMPONENT0_OTHER_REQUIREMENTS))\n";
        let p = parse_trial_program(text).unwrap();
        assert!(matches!(p.assertions[0].formula, ConstraintFormula::CountAtLeast(1, _)));
        let again = parse_trial_program(&serialize_trial_program(&p)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn identity_from_file_name() {
        let (t, s) = identity_from_path(Path::new("x/main/NCT00362869_exclusion_program.smt2")).unwrap();
        assert_eq!((t.as_str(), s), ("NCT00362869", Side::Exclusion));
    }
}
