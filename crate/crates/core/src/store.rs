//! Relational storage of gates in a single SQLite file.
//!
//! `ECNF` maps entities to CNFs, `CNFD` CNFs to clauses, `DA` clauses to
//! atoms, and `AB`/`AN` hold Boolean and numeric atoms in one id space.
//! Rationals are stored as exact text and compared through registered
//! functions.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rusqlite::functions::FunctionFlags;
use rusqlite::{params, Connection, OpenFlags, OptionalExtension};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{parse_variable_name, Comparison, NumInterval, Number, Target, VariableName};
use crate::ontology::{Ontology, RelationFamily};
use crate::projection::{ClauseRole, EntityKind, EntityRef, GateAtom, GateCNF, GateClause};
use crate::smt::Side;
use crate::temporal::{format_ratio, parse_ratio, TimeWindow};

pub const SCHEMA_VERSION: &str = "3";

pub const SCHEMA: &str = "
CREATE TABLE meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE ECNF (
    cnf_id INTEGER PRIMARY KEY,
    entity_id TEXT NOT NULL,
    entity_kind TEXT NOT NULL CHECK (entity_kind IN ('trial', 'patient')),
    side TEXT,
    subcohort TEXT NOT NULL,
    UNIQUE (entity_kind, entity_id, subcohort, side)
);
CREATE TABLE CNFD (
    clause_id INTEGER PRIMARY KEY,
    cnf_id INTEGER NOT NULL REFERENCES ECNF(cnf_id),
    clause_role TEXT NOT NULL CHECK (clause_role IN ('relevant', 'deferred', 'knockout')),
    origin TEXT NOT NULL,
    ord INTEGER NOT NULL
);
CREATE TABLE DA (
    clause_id INTEGER NOT NULL REFERENCES CNFD(clause_id),
    atom_id INTEGER NOT NULL,
    ord INTEGER NOT NULL,
    PRIMARY KEY (clause_id, atom_id)
);
CREATE TABLE AB (
    atom_id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    relation TEXT NOT NULL,
    family TEXT NOT NULL,
    concept TEXT NOT NULL,
    outcome TEXT,
    qual_digest TEXT NOT NULL,
    cmp TEXT NOT NULL,
    bool_target INTEGER NOT NULL,
    polarity INTEGER NOT NULL,
    win_lo TEXT NOT NULL, win_hi TEXT NOT NULL, win_lo_incl INTEGER NOT NULL, win_hi_incl INTEGER NOT NULL,
    cert_lo TEXT, cert_hi TEXT, cert_lo_incl INTEGER, cert_hi_incl INTEGER
);
CREATE TABLE AN (
    atom_id INTEGER PRIMARY KEY,
    name TEXT NOT NULL,
    relation TEXT NOT NULL,
    family TEXT NOT NULL,
    concept TEXT NOT NULL,
    qual_digest TEXT NOT NULL,
    unit TEXT NOT NULL,
    cmp TEXT NOT NULL,
    target_kind TEXT NOT NULL CHECK (target_kind IN ('number', 'interval')),
    value TEXT,
    lower TEXT, upper TEXT, lower_incl INTEGER, upper_incl INTEGER,
    polarity INTEGER NOT NULL,
    win_lo TEXT NOT NULL, win_hi TEXT NOT NULL, win_lo_incl INTEGER NOT NULL, win_hi_incl INTEGER NOT NULL,
    cert_lo TEXT, cert_hi TEXT, cert_lo_incl INTEGER, cert_hi_incl INTEGER
);
CREATE TABLE QUAL (digest TEXT NOT NULL, token TEXT NOT NULL, PRIMARY KEY (digest, token));
CREATE TABLE RELSUB (general TEXT NOT NULL, specific TEXT NOT NULL, PRIMARY KEY (general, specific));
CREATE INDEX ecnf_kind ON ECNF(entity_kind, entity_id);
CREATE INDEX cnfd_cnf ON CNFD(cnf_id, clause_role);
CREATE INDEX da_atom ON DA(atom_id);
CREATE INDEX ab_rc ON AB(concept, relation);
CREATE INDEX an_rc ON AN(concept, relation);
CREATE INDEX relsub_s ON RELSUB(specific);
";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("entity `{0}` appears twice")]
    DuplicateEntity(String),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error("store schema version {found}, expected {expected}")]
    SchemaMismatch { found: String, expected: String },
    #[error("store was built with ontology {found}, current ontology is {expected}")]
    OntologyMismatch { found: String, expected: String },
}

/// Order-insensitive digest of a qualifier set. Empty sets digest to "".
pub fn qualifier_digest(tokens: &[String]) -> String {
    let mut t: Vec<&String> = tokens.iter().collect();
    t.sort();
    t.dedup();
    if t.is_empty() {
        return String::new();
    }
    let mut h = Sha256::new();
    for x in t {
        h.update(x.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

fn family_name(f: Option<RelationFamily>) -> &'static str {
    match f {
        Some(RelationFamily::Medical) => "medical",
        Some(RelationFamily::PatientFact) => "patient_fact",
        Some(RelationFamily::TrialIntent) => "trial_intent",
        None => "other",
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct Counts {
    pub ecnf: usize,
    pub cnfd: usize,
    pub da: usize,
    pub ab: usize,
    pub an: usize,
    pub qual: usize,
}

pub struct Store {
    conn: Connection,
    path: Option<std::path::PathBuf>,
}

fn win_cols(w: &TimeWindow) -> (String, String, bool, bool) {
    (format_ratio(&w.lower), format_ratio(&w.upper), w.lower_inclusive, w.upper_inclusive)
}

fn side_str(s: Option<Side>) -> Option<&'static str> {
    s.map(Side::as_str)
}

impl Store {
    /// Build a fresh store file, replacing any existing one.
    pub fn build(path: &Path, gates: &[GateCNF], o: &Ontology) -> Result<Store, StoreError> {
        if path.exists() {
            std::fs::remove_file(path)?;
        }
        let conn = Connection::open(path)?;
        let mut s = Store { conn, path: Some(path.to_path_buf()) };
        s.populate(gates, o)?;
        Ok(s)
    }

    pub fn build_in_memory(gates: &[GateCNF], o: &Ontology) -> Result<Store, StoreError> {
        let mut s = Store { conn: Connection::open_in_memory()?, path: None };
        s.populate(gates, o)?;
        Ok(s)
    }

    pub fn open(path: &Path) -> Result<Store, StoreError> {
        if !path.exists() {
            return Err(StoreError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", path.display()))));
        }
        let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)?;
        let s = Store { conn, path: Some(path.to_path_buf()) };
        let v = s.meta("schema_version").map_err(|e| StoreError::CorruptStore(e.to_string()))?;
        match v {
            Some(v) if v == SCHEMA_VERSION => Ok(s),
            Some(v) => Err(StoreError::SchemaMismatch { found: v, expected: SCHEMA_VERSION.into() }),
            None => Err(StoreError::CorruptStore("no schema_version".into())),
        }
    }

    /// Backing file, `None` for in-memory stores.
    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    pub fn meta(&self, key: &str) -> Result<Option<String>, StoreError> {
        Ok(self.conn.query_row("SELECT value FROM meta WHERE key = ?1", [key], |r| r.get(0)).optional()?)
    }

    pub fn ontology_digest(&self) -> Result<String, StoreError> {
        self.meta("ontology_digest")?.ok_or_else(|| StoreError::CorruptStore("no ontology_digest".into()))
    }

    /// The ontology the store was built with.
    pub fn stored_ontology(&self) -> Result<Ontology, StoreError> {
        let text = self.meta("ontology_jsonl")?.ok_or_else(|| StoreError::CorruptStore("no ontology_jsonl".into()))?;
        let o = Ontology::from_jsonl(&text).map_err(|e| StoreError::CorruptStore(e.to_string()))?;
        self.check_ontology(&o)?;
        Ok(o)
    }

    pub fn check_ontology(&self, o: &Ontology) -> Result<(), StoreError> {
        let found = self.ontology_digest()?;
        let expected = o.digest();
        if found != expected {
            return Err(StoreError::OntologyMismatch { found, expected });
        }
        Ok(())
    }

    fn populate(&mut self, gates: &[GateCNF], o: &Ontology) -> Result<(), StoreError> {
        let mut sorted: Vec<GateCNF> = gates.to_vec();
        for g in &mut sorted {
            g.canonicalize();
        }
        sorted.sort_by(|a, b| a.owner.cmp(&b.owner));
        for w in sorted.windows(2) {
            if w[0].owner == w[1].owner {
                return Err(StoreError::DuplicateEntity(w[0].owner.to_string()));
            }
        }
        self.conn.execute_batch("PRAGMA journal_mode = OFF; PRAGMA synchronous = OFF; PRAGMA foreign_keys = ON;")?;
        self.conn.execute_batch(SCHEMA)?;
        let tx = self.conn.transaction()?;
        tx.execute("INSERT INTO meta VALUES ('schema_version', ?1)", [SCHEMA_VERSION])?;
        tx.execute("INSERT INTO meta VALUES ('ontology_digest', ?1)", [o.digest()])?;
        tx.execute("INSERT INTO meta VALUES ('ontology_jsonl', ?1)", [o.to_jsonl()])?;
        for (g, s) in o.relation_closure() {
            tx.execute("INSERT INTO RELSUB VALUES (?1, ?2)", params![g.as_str(), s.as_str()])?;
        }
        {
            let mut ins_e = tx.prepare("INSERT INTO ECNF (cnf_id, entity_id, entity_kind, side, subcohort) VALUES (?1, ?2, ?3, ?4, ?5)")?;
            let mut ins_c = tx.prepare("INSERT INTO CNFD (clause_id, cnf_id, clause_role, origin, ord) VALUES (?1, ?2, ?3, ?4, ?5)")?;
            let mut ins_d = tx.prepare("INSERT OR IGNORE INTO DA (clause_id, atom_id, ord) VALUES (?1, ?2, ?3)")?;
            let mut ins_b = tx.prepare(
                "INSERT INTO AB VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15, ?16, ?17, ?18)",
            )?;
            let mut ins_n = tx.prepare(
                "INSERT INTO AN VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15, ?16, ?17, ?18, ?19, ?20, ?21, ?22, ?23)",
            )?;
            let mut ins_q = tx.prepare("INSERT OR IGNORE INTO QUAL VALUES (?1, ?2)")?;
            let mut atom_ids: HashMap<String, i64> = HashMap::new();
            let (mut next_atom, mut next_clause) = (1i64, 1i64);
            for (ci, g) in sorted.iter().enumerate() {
                let cnf_id = ci as i64 + 1;
                ins_e.execute(params![cnf_id, g.owner.id, g.owner.kind.as_str(), side_str(g.owner.side), g.owner.subcohort])?;
                for (ord, c) in g.clauses.iter().enumerate() {
                    let clause_id = next_clause;
                    next_clause += 1;
                    ins_c.execute(params![clause_id, cnf_id, c.role.as_str(), c.origin, ord as i64])?;
                    for (lord, a) in c.literals.iter().enumerate() {
                        let key = a.sort_key();
                        let atom_id = match atom_ids.get(&key) {
                            Some(id) => *id,
                            None => {
                                let id = next_atom;
                                next_atom += 1;
                                atom_ids.insert(key, id);
                                let quals = a.name.qualifier_set();
                                let digest = qualifier_digest(&quals);
                                for q in &quals {
                                    ins_q.execute(params![digest, q])?;
                                }
                                let fam = family_name(o.relation_family(&a.name.relation));
                                let (wl, wh, wli, whi) = win_cols(&a.window);
                                let cert = a.certain.as_ref().map(win_cols);
                                let (cl, ch, cli, chi) = match &cert {
                                    Some((l, h, li, hi)) => (Some(l.clone()), Some(h.clone()), Some(*li), Some(*hi)),
                                    None => (None, None, None, None),
                                };
                                match &a.target {
                                    Target::Bool(b) => {
                                        ins_b.execute(params![
                                            id,
                                            a.name.render(),
                                            a.name.relation.as_str(),
                                            fam,
                                            a.name.concept,
                                            a.name.outcome.map(|s| s.as_str()),
                                            digest,
                                            a.cmp.as_str(),
                                            *b,
                                            a.positive,
                                            wl,
                                            wh,
                                            wli,
                                            whi,
                                            cl,
                                            ch,
                                            cli,
                                            chi
                                        ])?;
                                    }
                                    Target::Number { value, unit } => {
                                        ins_n.execute(params![
                                            id,
                                            a.name.render(),
                                            a.name.relation.as_str(),
                                            fam,
                                            a.name.concept,
                                            digest,
                                            unit,
                                            a.cmp.as_str(),
                                            "number",
                                            format_ratio(value),
                                            None::<String>,
                                            None::<String>,
                                            None::<bool>,
                                            None::<bool>,
                                            a.positive,
                                            wl,
                                            wh,
                                            wli,
                                            whi,
                                            cl,
                                            ch,
                                            cli,
                                            chi
                                        ])?;
                                    }
                                    Target::Interval { interval, unit } => {
                                        ins_n.execute(params![
                                            id,
                                            a.name.render(),
                                            a.name.relation.as_str(),
                                            fam,
                                            a.name.concept,
                                            digest,
                                            unit,
                                            a.cmp.as_str(),
                                            "interval",
                                            None::<String>,
                                            interval.lower.as_ref().map(format_ratio),
                                            interval.upper.as_ref().map(format_ratio),
                                            interval.lower_inclusive,
                                            interval.upper_inclusive,
                                            a.positive,
                                            wl,
                                            wh,
                                            wli,
                                            whi,
                                            cl,
                                            ch,
                                            cli,
                                            chi
                                        ])?;
                                    }
                                }
                                id
                            }
                        };
                        ins_d.execute(params![clause_id, atom_id, lord as i64])?;
                    }
                }
            }
        }
        tx.commit()?;
        self.conn.execute_batch("ANALYZE;")?;
        Ok(())
    }

    pub fn counts(&self) -> Result<Counts, StoreError> {
        let n = |t: &str| -> Result<usize, StoreError> { Ok(self.conn.query_row(&format!("SELECT COUNT(*) FROM {t}"), [], |r| r.get::<_, i64>(0))? as usize) };
        Ok(Counts { ecnf: n("ECNF")?, cnfd: n("CNFD")?, da: n("DA")?, ab: n("AB")?, an: n("AN")?, qual: n("QUAL")? })
    }

    pub fn entities(&self) -> Result<Vec<EntityRef>, StoreError> {
        let mut st = self.conn.prepare("SELECT entity_kind, entity_id, subcohort, side FROM ECNF ORDER BY cnf_id")?;
        let rows = st.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?, r.get::<_, Option<String>>(3)?)))?;
        let mut out = Vec::new();
        for row in rows {
            let (k, id, sub, side) = row?;
            out.push(entity_ref(&k, id, sub, side)?);
        }
        Ok(out)
    }

    pub fn patient_ids(&self) -> Result<Vec<String>, StoreError> {
        let mut st = self.conn.prepare("SELECT entity_id FROM ECNF WHERE entity_kind = 'patient' ORDER BY entity_id")?;
        let ids = st.query_map([], |r| r.get(0))?.collect::<Result<Vec<String>, _>>()?;
        Ok(ids)
    }

    /// Rebuild the gate of one entity.
    pub fn dump_entity(&self, e: &EntityRef) -> Result<GateCNF, StoreError> {
        let cnf_id: Option<i64> = self
            .conn
            .query_row(
                "SELECT cnf_id FROM ECNF WHERE entity_kind = ?1 AND entity_id = ?2 AND subcohort = ?3 AND side IS ?4",
                params![e.kind.as_str(), e.id, e.subcohort, side_str(e.side)],
                |r| r.get(0),
            )
            .optional()?;
        let cnf_id = cnf_id.ok_or_else(|| StoreError::UnknownEntity(e.to_string()))?;
        self.dump_cnf(cnf_id, e.clone())
    }

    fn dump_cnf(&self, cnf_id: i64, owner: EntityRef) -> Result<GateCNF, StoreError> {
        let mut g = GateCNF::new(owner);
        let mut st = self.conn.prepare("SELECT clause_id, clause_role, origin FROM CNFD WHERE cnf_id = ?1 ORDER BY ord")?;
        let clauses = st.query_map([cnf_id], |r| Ok((r.get::<_, i64>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?)))?.collect::<Result<Vec<_>, _>>()?;
        let mut lits = self.conn.prepare("SELECT atom_id FROM DA WHERE clause_id = ?1 ORDER BY ord")?;
        for (clause_id, role, origin) in clauses {
            let role = ClauseRole::parse(&role).ok_or_else(|| StoreError::CorruptStore(format!("clause role `{role}`")))?;
            let ids = lits.query_map([clause_id], |r| r.get::<_, i64>(0))?.collect::<Result<Vec<_>, _>>()?;
            let mut literals = Vec::with_capacity(ids.len());
            for id in ids {
                literals.push(self.atom(id)?);
            }
            g.clauses.push(GateClause { literals, role, origin });
        }
        Ok(g)
    }

    /// Load one atom by id.
    pub fn atom(&self, id: i64) -> Result<GateAtom, StoreError> {
        let corrupt = |m: String| StoreError::CorruptStore(m);
        let b = self
            .conn
            .query_row(
                "SELECT name, cmp, bool_target, polarity, win_lo, win_hi, win_lo_incl, win_hi_incl, cert_lo, cert_hi, cert_lo_incl, cert_hi_incl FROM AB WHERE atom_id = ?1",
                [id],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, String>(1)?,
                        r.get::<_, bool>(2)?,
                        r.get::<_, bool>(3)?,
                        read_window(r, 4)?,
                        read_opt_window(r, 8)?,
                    ))
                },
            )
            .optional()?;
        if let Some((name, cmp, target, positive, window, certain)) = b {
            return Ok(GateAtom {
                name: parse_name(&name)?,
                cmp: Comparison::parse(&cmp).ok_or_else(|| corrupt(format!("cmp `{cmp}`")))?,
                target: Target::Bool(target),
                positive,
                window: window.ok_or_else(|| corrupt("bad window".into()))?,
                certain: certain.map_err(corrupt)?,
            });
        }
        let n = self
            .conn
            .query_row(
                "SELECT name, cmp, unit, target_kind, value, lower, upper, lower_incl, upper_incl, polarity,
                        win_lo, win_hi, win_lo_incl, win_hi_incl, cert_lo, cert_hi, cert_lo_incl, cert_hi_incl FROM AN WHERE atom_id = ?1",
                [id],
                |r| {
                    Ok((
                        r.get::<_, String>(0)?,
                        r.get::<_, String>(1)?,
                        r.get::<_, String>(2)?,
                        r.get::<_, String>(3)?,
                        r.get::<_, Option<String>>(4)?,
                        r.get::<_, Option<String>>(5)?,
                        r.get::<_, Option<String>>(6)?,
                        r.get::<_, Option<bool>>(7)?,
                        r.get::<_, Option<bool>>(8)?,
                        r.get::<_, bool>(9)?,
                        read_window(r, 10)?,
                        read_opt_window(r, 14)?,
                    ))
                },
            )
            .optional()?;
        let Some((name, cmp, unit, kind, value, lower, upper, li, ui, positive, window, certain)) = n else {
            return Err(corrupt(format!("atom {id} is in neither AB nor AN")));
        };
        let num = |t: &Option<String>| -> Result<Option<Number>, StoreError> {
            t.as_deref().map(|x| parse_ratio(x).ok_or_else(|| corrupt(format!("number `{x}`")))).transpose()
        };
        let target = match kind.as_str() {
            "number" => Target::Number { value: num(&value)?.ok_or_else(|| corrupt("missing value".into()))?, unit },
            _ => Target::Interval {
                interval: NumInterval { lower: num(&lower)?, upper: num(&upper)?, lower_inclusive: li.unwrap_or(false), upper_inclusive: ui.unwrap_or(false) },
                unit,
            },
        };
        Ok(GateAtom {
            name: parse_name(&name)?,
            cmp: Comparison::parse(&cmp).ok_or_else(|| corrupt(format!("cmp `{cmp}`")))?,
            target,
            positive,
            window: window.ok_or_else(|| corrupt("bad window".into()))?,
            certain: certain.map_err(corrupt)?,
        })
    }

    /// Every gate in canonical order.
    pub fn dump_all(&self) -> Result<Vec<GateCNF>, StoreError> {
        let mut st = self.conn.prepare("SELECT cnf_id, entity_kind, entity_id, subcohort, side FROM ECNF ORDER BY cnf_id")?;
        let rows = st
            .query_map([], |r| Ok((r.get::<_, i64>(0)?, r.get::<_, String>(1)?, r.get::<_, String>(2)?, r.get::<_, String>(3)?, r.get::<_, Option<String>>(4)?)))?
            .collect::<Result<Vec<_>, _>>()?;
        rows.into_iter().map(|(id, k, e, s, side)| self.dump_cnf(id, entity_ref(&k, e, s, side)?)).collect()
    }

    /// Text rendering of every table, in key order.
    pub fn logical_dump(&self) -> Result<String, StoreError> {
        let mut out = String::new();
        for (t, key) in [("meta", "key"), ("ECNF", "cnf_id"), ("CNFD", "clause_id"), ("DA", "clause_id, atom_id"), ("AB", "atom_id"), ("AN", "atom_id"), ("QUAL", "digest, token"), ("RELSUB", "general, specific")] {
            let mut st = self.conn.prepare(&format!("SELECT * FROM {t} ORDER BY {key}"))?;
            let cols = st.column_count();
            let mut rows = st.query([])?;
            while let Some(r) = rows.next()? {
                out.push_str(t);
                for i in 0..cols {
                    let v: rusqlite::types::Value = r.get(i)?;
                    out.push_str(&format!("|{v:?}"));
                }
                out.push('\n');
            }
        }
        Ok(out)
    }

    /// Referential integrity across all link levels.
    pub fn integrity_check(&self) -> Result<(), StoreError> {
        let checks = [
            ("CNFD rows without ECNF", "SELECT COUNT(*) FROM CNFD c LEFT JOIN ECNF e ON e.cnf_id = c.cnf_id WHERE e.cnf_id IS NULL"),
            ("DA rows without CNFD", "SELECT COUNT(*) FROM DA d LEFT JOIN CNFD c ON c.clause_id = d.clause_id WHERE c.clause_id IS NULL"),
            (
                "DA rows without an atom",
                "SELECT COUNT(*) FROM DA d WHERE NOT EXISTS (SELECT 1 FROM AB WHERE atom_id = d.atom_id) AND NOT EXISTS (SELECT 1 FROM AN WHERE atom_id = d.atom_id)",
            ),
            ("atom ids shared by AB and AN", "SELECT COUNT(*) FROM AB b JOIN AN n ON n.atom_id = b.atom_id"),
            ("qualifier digests without tokens", "SELECT COUNT(*) FROM (SELECT qual_digest FROM AB UNION SELECT qual_digest FROM AN) q WHERE q.qual_digest <> '' AND NOT EXISTS (SELECT 1 FROM QUAL WHERE digest = q.qual_digest)"),
            ("unreferenced atoms", "SELECT COUNT(*) FROM (SELECT atom_id FROM AB UNION ALL SELECT atom_id FROM AN) a WHERE NOT EXISTS (SELECT 1 FROM DA WHERE atom_id = a.atom_id)"),
        ];
        for (what, sql) in checks {
            let n: i64 = self.conn.query_row(sql, [], |r| r.get(0))?;
            if n != 0 {
                return Err(StoreError::CorruptStore(format!("{n} {what}")));
            }
        }
        let fk: Option<String> = self.conn.query_row("PRAGMA foreign_key_check", [], |r| r.get(0)).optional()?;
        if let Some(t) = fk {
            return Err(StoreError::CorruptStore(format!("foreign key violation in {t}")));
        }
        Ok(())
    }

    /// Qualifier tokens per digest.
    pub fn qualifier_sets(&self) -> Result<BTreeMap<String, Vec<String>>, StoreError> {
        let mut st = self.conn.prepare("SELECT digest, token FROM QUAL ORDER BY digest, token")?;
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for row in st.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?)))? {
            let (d, t) = row?;
            out.entry(d).or_default().push(t);
        }
        Ok(out)
    }
}

fn entity_ref(kind: &str, id: String, subcohort: String, side: Option<String>) -> Result<EntityRef, StoreError> {
    let kind = EntityKind::parse(kind).ok_or_else(|| StoreError::CorruptStore(format!("entity kind `{kind}`")))?;
    let side = match side {
        Some(s) => Some(Side::parse(&s).ok_or_else(|| StoreError::CorruptStore(format!("side `{s}`")))?),
        None => None,
    };
    Ok(EntityRef { kind, id, subcohort, side })
}

fn parse_name(s: &str) -> Result<VariableName, StoreError> {
    parse_variable_name(s).map_err(|e| StoreError::CorruptStore(e.to_string()))
}

fn window_of(lo: &str, hi: &str, li: bool, hi_incl: bool) -> Option<TimeWindow> {
    Some(TimeWindow { lower: parse_ratio(lo)?, upper: parse_ratio(hi)?, lower_inclusive: li, upper_inclusive: hi_incl })
}

fn read_window(r: &rusqlite::Row<'_>, at: usize) -> rusqlite::Result<Option<TimeWindow>> {
    Ok(window_of(&r.get::<_, String>(at)?, &r.get::<_, String>(at + 1)?, r.get(at + 2)?, r.get(at + 3)?))
}

fn read_opt_window(r: &rusqlite::Row<'_>, at: usize) -> rusqlite::Result<Result<Option<TimeWindow>, String>> {
    let lo: Option<String> = r.get(at)?;
    let hi: Option<String> = r.get(at + 1)?;
    let li: Option<bool> = r.get(at + 2)?;
    let ui: Option<bool> = r.get(at + 3)?;
    Ok(match (lo, hi, li, ui) {
        (Some(lo), Some(hi), Some(li), Some(ui)) => window_of(&lo, &hi, li, ui).map(Some).ok_or_else(|| "bad certain window".to_string()),
        (None, None, None, None) => Ok(None),
        _ => Err("partial certain window".into()),
    })
}

/// Parsed window columns, cached per text tuple.
#[derive(Default)]
struct WindowCache(std::sync::Mutex<HashMap<(String, String, bool, bool), Option<TimeWindow>>>);

impl WindowCache {
    fn get(&self, lo: &str, hi: &str, li: bool, ui: bool) -> Option<TimeWindow> {
        let key = (lo.to_string(), hi.to_string(), li, ui);
        let mut m = self.0.lock().expect("window cache");
        if let Some(w) = m.get(&key) {
            return w.clone();
        }
        let w = window_of(lo, hi, li, ui);
        m.insert(key, w.clone());
        w
    }
}

fn window_arg(ctx: &rusqlite::functions::Context<'_>, at: usize, cache: &WindowCache) -> rusqlite::Result<Option<TimeWindow>> {
    let lo: Option<String> = ctx.get(at)?;
    let hi: Option<String> = ctx.get(at + 1)?;
    let li: Option<bool> = ctx.get(at + 2)?;
    let ui: Option<bool> = ctx.get(at + 3)?;
    Ok(match (lo, hi, li, ui) {
        (Some(lo), Some(hi), Some(li), Some(ui)) => cache.get(&lo, &hi, li, ui),
        _ => None,
    })
}

/// Register the comparison functions retrieval queries use:
/// `win_overlap(8 window cols)`, `win_contains(8 window cols, strict)`,
/// `num_ok(trial cmp, target kind, value, lower, upper, incl flags, patient
/// lower, upper, incl flags)` and
/// `quals_ok(trial_digest, patient_digest)`.
pub fn register_functions(conn: &Connection, o: Arc<Ontology>, quals: Arc<BTreeMap<String, Vec<String>>>) -> Result<(), StoreError> {
    let flags = FunctionFlags::SQLITE_UTF8 | FunctionFlags::SQLITE_DETERMINISTIC;
    let cache = Arc::new(WindowCache::default());
    let c1 = cache.clone();
    conn.create_scalar_function("win_overlap", 8, flags, move |ctx| {
        Ok(match (window_arg(ctx, 0, &c1)?, window_arg(ctx, 4, &c1)?) {
            (Some(a), Some(b)) => crate::temporal::inclusion_time_match(&a, &b),
            _ => false,
        })
    })?;
    let c2 = cache;
    conn.create_scalar_function("win_contains", 9, flags, move |ctx| {
        let strict: bool = ctx.get(8)?;
        Ok(match (window_arg(ctx, 0, &c2)?, window_arg(ctx, 4, &c2)?) {
            (Some(crit), Some(cert)) => crate::temporal::exclusion_time_match(&crit, &cert, strict),
            _ => false,
        })
    })?;
    conn.create_scalar_function("num_ok", 11, flags, move |ctx| {
        let num = |i: usize| -> rusqlite::Result<Option<Number>> { Ok(ctx.get::<Option<String>>(i)?.as_deref().and_then(parse_ratio)) };
        let flag = |i: usize| -> rusqlite::Result<bool> { Ok(ctx.get::<Option<bool>>(i)?.unwrap_or(false)) };
        let cmp: String = ctx.get(0)?;
        let kind: String = ctx.get(1)?;
        let Some(cmp) = Comparison::parse(&cmp) else { return Ok(false) };
        let target = if kind == "number" {
            match num(2)? {
                Some(value) => Target::Number { value, unit: String::new() },
                None => return Ok(false),
            }
        } else {
            Target::Interval { interval: NumInterval { lower: num(3)?, upper: num(4)?, lower_inclusive: flag(5)?, upper_inclusive: flag(6)? }, unit: String::new() }
        };
        let patient = NumInterval { lower: num(7)?, upper: num(8)?, lower_inclusive: flag(9)?, upper_inclusive: flag(10)? };
        Ok(crate::retrieval::numeric_compatible(cmp, &target, &patient))
    })?;
    conn.create_scalar_function("quals_ok", 2, flags, move |ctx| {
        let t: String = ctx.get(0)?;
        let p: String = ctx.get(1)?;
        if t.is_empty() || t == p {
            return Ok(true);
        }
        let empty = Vec::new();
        let tq = quals.get(&t).unwrap_or(&empty);
        let pq = quals.get(&p).unwrap_or(&empty);
        Ok(crate::retrieval::qualifiers_compatible(tq, pq, &o))
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_variable_name;

    fn atom(name: &str, positive: bool) -> GateAtom {
        GateAtom {
            name: parse_variable_name(name).unwrap(),
            cmp: Comparison::Eq,
            target: Target::Bool(true),
            positive,
            window: TimeWindow::closed(-24, 0).unwrap(),
            certain: None,
        }
    }

    fn trial_gate() -> GateCNF {
        let mut g = GateCNF::new(EntityRef::trial("T1", "main", Side::Inclusion));
        g.clauses.push(GateClause { literals: vec![atom("patient_has_finding_of_x_now", true)], role: ClauseRole::RetrievalRelevant, origin: "A".into() });
        g.clauses.push(GateClause {
            literals: vec![
                atom("patient_has_finding_of_x_now", true),
                GateAtom {
                    name: parse_variable_name("patient_age_value_recorded_now_in_years").unwrap(),
                    cmp: Comparison::Ge,
                    target: Target::Number { value: 18.into(), unit: "years".into() },
                    positive: true,
                    window: TimeWindow::point_now(),
                    certain: None,
                },
            ],
            role: ClauseRole::Deferred,
            origin: "B".into(),
        });
        g.canonicalize();
        g
    }

    #[test]
    fn counts_and_round_trip() {
        let o = Ontology::new();
        let g = trial_gate();
        let s = Store::build_in_memory(std::slice::from_ref(&g), &o).unwrap();
        let c = s.counts().unwrap();
        assert_eq!((c.ecnf, c.cnfd, c.da), (1, 2, 3));
        assert!(c.ab + c.an <= 3);
        assert_eq!(c.ab + c.an, 2);
        assert_eq!(s.dump_entity(&g.owner).unwrap(), g);
        s.integrity_check().unwrap();
        assert!(matches!(s.dump_entity(&EntityRef::patient("nobody")), Err(StoreError::UnknownEntity(_))));
    }

    #[test]
    fn duplicate_entities_rejected() {
        let g = trial_gate();
        assert!(matches!(Store::build_in_memory(&[g.clone(), g], &Ontology::new()), Err(StoreError::DuplicateEntity(_))));
    }

    #[test]
    fn order_independent_content() {
        let o = Ontology::new();
        let mut a = trial_gate();
        let mut b = trial_gate();
        b.owner = EntityRef::trial("T0", "main", Side::Exclusion);
        let s1 = Store::build_in_memory(&[a.clone(), b.clone()], &o).unwrap();
        a.clauses.reverse();
        let s2 = Store::build_in_memory(&[b, a], &o).unwrap();
        assert_eq!(s1.logical_dump().unwrap(), s2.logical_dump().unwrap());
    }

    #[test]
    fn file_store_reopens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.db");
        let g = trial_gate();
        Store::build(&path, std::slice::from_ref(&g), &Ontology::new()).unwrap();
        let s = Store::open(&path).unwrap();
        assert_eq!(s.dump_all().unwrap(), vec![g]);
        assert!(s.check_ontology(&Ontology::new()).is_ok());
        assert_eq!(s.stored_ontology().unwrap().digest(), Ontology::new().digest());
    }

    #[test]
    fn digest_is_order_insensitive() {
        let a = qualifier_digest(&["b".into(), "a".into()]);
        assert_eq!(a, qualifier_digest(&["a".into(), "b".into(), "a".into()]));
        assert_eq!(qualifier_digest(&[]), "");
    }
}
