//! Patient fact files: a JSON array of extracted facts with two time windows.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::SmtError;
use crate::model::{parse_variable_name, Number, VariableName};
use crate::temporal::{format_ratio, parse_decimal, ratio_from_f64, Direction, Endpoint, TimeUnit, TimeWindow};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FactValue {
    Bool(bool),
    #[serde(with = "num_text")]
    Number(Number),
}

mod num_text {
    use super::{format_ratio, Number};
    use crate::temporal::parse_ratio;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(n: &Number, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_ratio(n))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Number, D::Error> {
        let t = String::deserialize(d)?;
        parse_ratio(&t).ok_or_else(|| D::Error::custom(format!("bad number `{t}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatientFactRecord {
    pub name: VariableName,
    pub value: FactValue,
    pub certain: TimeWindow,
    pub possible: TimeWindow,
    pub source: String,
}

#[derive(Deserialize)]
struct RawEndpoint {
    temporal_direction: String,
    temporal_magnitude: Value,
    units: String,
    inclusive: bool,
}

#[derive(Deserialize)]
struct RawWindow {
    start_time: RawEndpoint,
    end_time: RawEndpoint,
}

#[derive(Deserialize)]
struct RawFact {
    entity_variable_name: String,
    #[serde(rename = "type")]
    sort: String,
    extracted_value: Value,
    timewindow_this_patient_fact_certainly_holds: RawWindow,
    largest_timewindow_this_patient_fact_may_hold: RawWindow,
    #[serde(default)]
    span: Option<String>,
}

fn endpoint(raw: &RawEndpoint) -> Result<Endpoint, String> {
    let direction: Direction = raw.temporal_direction.parse().map_err(|e| format!("{e}"))?;
    let units: TimeUnit = raw.units.parse().map_err(|e| format!("{e}"))?;
    let magnitude = match &raw.temporal_magnitude {
        Value::String(s) if s.eq_ignore_ascii_case("inf") => None,
        Value::String(s) => Some(parse_decimal(s).ok_or_else(|| format!("bad magnitude `{s}`"))?),
        Value::Number(n) => Some(number_of(n).ok_or_else(|| format!("bad magnitude `{n}`"))?),
        other => return Err(format!("bad magnitude `{other}`")),
    };
    Ok(Endpoint { direction, magnitude, units, inclusive: raw.inclusive })
}

fn number_of(n: &serde_json::Number) -> Option<Number> {
    if let Some(i) = n.as_i64() {
        return Some(Number::from_integer(i as i128));
    }
    parse_decimal(&n.to_string()).or_else(|| n.as_f64().and_then(ratio_from_f64))
}

fn window(raw: &RawWindow) -> Result<TimeWindow, String> {
    TimeWindow::from_endpoints(&endpoint(&raw.start_time)?, &endpoint(&raw.end_time)?).map_err(|e| e.to_string())
}

fn convert(raw: RawFact) -> Result<PatientFactRecord, String> {
    let name = parse_variable_name(&raw.entity_variable_name).map_err(|e| e.to_string())?;
    if name.render() != raw.entity_variable_name {
        return Err(format!("`{}` is not in canonical form", raw.entity_variable_name));
    }
    let value = match (raw.sort.as_str(), &raw.extracted_value) {
        ("Bool", Value::Bool(b)) => FactValue::Bool(*b),
        ("Bool", Value::String(s)) if s == "true" || s == "false" => FactValue::Bool(s == "true"),
        ("Int" | "Real", Value::Number(n)) => FactValue::Number(number_of(n).ok_or("bad number")?),
        ("Int" | "Real", Value::String(s)) => FactValue::Number(parse_decimal(s).ok_or_else(|| format!("bad number `{s}`"))?),
        (t, v) => return Err(format!("value {v} does not fit type {t}")),
    };
    if matches!(value, FactValue::Number(_)) != name.is_numeric() {
        return Err(format!("value type does not fit stem `{}`", raw.entity_variable_name));
    }
    let certain = window(&raw.timewindow_this_patient_fact_certainly_holds)?;
    let possible = window(&raw.largest_timewindow_this_patient_fact_may_hold)?;
    if !possible.contains(&certain) {
        return Err(format!("certain window {certain} is not inside possible window {possible}"));
    }
    Ok(PatientFactRecord { name, value, certain, possible, source: raw.span.unwrap_or_else(|| "input".to_string()) })
}

/// Facts that could not be used, with the reason.
#[derive(Clone, Debug, Default)]
pub struct SkippedFacts(pub Vec<(usize, String)>);

/// Parse a fact file. Individual records that cannot be used are skipped and
/// reported; malformed JSON is an error.
pub fn parse_patient_facts_detailed(text: &str) -> Result<(Vec<PatientFactRecord>, SkippedFacts), SmtError> {
    let values: Vec<Value> = match serde_json::from_str::<Value>(text) {
        Ok(Value::Array(xs)) => xs,
        Ok(_) => return Err(SmtError::PatientFacts("expected a JSON array of facts".into())),
        Err(e) => return Err(SmtError::PatientFacts(e.to_string())),
    };
    let mut out = Vec::new();
    let mut skipped = SkippedFacts::default();
    for (i, v) in values.into_iter().enumerate() {
        let raw: RawFact = match serde_json::from_value(v) {
            Ok(r) => r,
            Err(e) => {
                skipped.0.push((i, e.to_string()));
                continue;
            }
        };
        match convert(raw) {
            Ok(f) => out.push(f),
            Err(e) => skipped.0.push((i, e)),
        }
    }
    for (i, why) in &skipped.0 {
        log::warn!("fact #{i} skipped: {why}");
    }
    Ok((out, skipped))
}

pub fn parse_patient_facts(text: &str) -> Result<Vec<PatientFactRecord>, SmtError> {
    parse_patient_facts_detailed(text).map(|(f, _)| f)
}

fn raw_endpoint(h: &crate::temporal::Hours, inclusive: bool) -> Value {
    use num_traits::{Signed, Zero};
    let (dir, mag) = if h.is_zero() {
        ("now", Number::zero())
    } else if h.is_negative() {
        ("past", -*h)
    } else {
        ("future", *h)
    };
    let magnitude = if mag.is_integer() {
        Value::from(mag.to_integer() as i64)
    } else {
        Value::String(format_ratio(&mag))
    };
    serde_json::json!({"temporal_direction": dir, "temporal_magnitude": magnitude, "units": "hours", "inclusive": inclusive})
}

fn raw_window(w: &TimeWindow) -> Value {
    serde_json::json!({
        "start_time": raw_endpoint(&w.lower, w.lower_inclusive),
        "end_time": raw_endpoint(&w.upper, w.upper_inclusive),
    })
}

/// Write facts back in the input format (windows in hours).
pub fn facts_to_json(facts: &[PatientFactRecord]) -> Value {
    Value::Array(
        facts
            .iter()
            .map(|f| {
                let (ty, v) = match &f.value {
                    FactValue::Bool(b) => ("Bool", Value::Bool(*b)),
                    FactValue::Number(n) if n.is_integer() => ("Int", Value::from(n.to_integer() as i64)),
                    FactValue::Number(n) => ("Real", Value::String(format_ratio(n))),
                };
                serde_json::json!({
                    "entity_variable_name": f.name.render(),
                    "type": ty,
                    "extracted_value": v,
                    "timewindow_this_patient_fact_certainly_holds": raw_window(&f.certain),
                    "largest_timewindow_this_patient_fact_may_hold": raw_window(&f.possible),
                    "span": f.source,
                })
            })
            .collect(),
    )
}
