//! Time windows measured in hours relative to "now".
//!
//! Endpoints are exact rationals. Infinite magnitudes clip to a fixed
//! sentinel of `1e9` hours so that every window is bounded.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact number of hours.
pub type Hours = Ratio<i128>;

/// Magnitude used in place of an infinite endpoint.
pub const SENTINEL_HOURS: i128 = 1_000_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemporalError {
    #[error("invalid window: start {start} is after end {end}")]
    InvalidWindow { start: String, end: String },
    #[error("empty window: degenerate point {at} with an exclusive endpoint")]
    EmptyWindow { at: String },
    #[error("unknown time unit `{0}`")]
    UnknownUnit(String),
    #[error("unknown temporal direction `{0}`")]
    UnknownDirection(String),
    #[error("bad magnitude `{0}`")]
    BadMagnitude(String),
    #[error("bad timeframe token `{0}`")]
    BadTimeframe(String),
}

pub fn sentinel() -> Hours {
    Hours::from_integer(SENTINEL_HOURS)
}

/// Clamp into `[-1e9, 1e9]`. Idempotent.
pub fn clamp(h: Hours) -> Hours {
    let s = sentinel();
    if h > s {
        s
    } else if h < -s {
        -s
    } else {
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    Minutes,
    Hours,
    Days,
    Weeks,
    Months,
    Years,
}

impl TimeUnit {
    pub const ALL: [TimeUnit; 6] = [
        TimeUnit::Minutes,
        TimeUnit::Hours,
        TimeUnit::Days,
        TimeUnit::Weeks,
        TimeUnit::Months,
        TimeUnit::Years,
    ];

    /// Fixed conversion factor: a month is 730 h and a year is 8760 h.
    pub fn in_hours(self) -> Hours {
        match self {
            TimeUnit::Minutes => Hours::new(1, 60),
            TimeUnit::Hours => Hours::from_integer(1),
            TimeUnit::Days => Hours::from_integer(24),
            TimeUnit::Weeks => Hours::from_integer(168),
            TimeUnit::Months => Hours::from_integer(730),
            TimeUnit::Years => Hours::from_integer(8760),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TimeUnit::Minutes => "minutes",
            TimeUnit::Hours => "hours",
            TimeUnit::Days => "days",
            TimeUnit::Weeks => "weeks",
            TimeUnit::Months => "months",
            TimeUnit::Years => "years",
        }
    }
}

impl FromStr for TimeUnit {
    type Err = TemporalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "minutes" | "minute" => TimeUnit::Minutes,
            "hours" | "hour" => TimeUnit::Hours,
            "days" | "day" => TimeUnit::Days,
            "weeks" | "week" => TimeUnit::Weeks,
            "months" | "month" => TimeUnit::Months,
            "years" | "year" => TimeUnit::Years,
            other => return Err(TemporalError::UnknownUnit(other.to_string())),
        })
    }
}

/// Parse a decimal literal such as `-12.75` or `1e3` into an exact rational.
pub fn parse_decimal(text: &str) -> Option<Ratio<i128>> {
    let t = text.trim();
    if t.is_empty() {
        return None;
    }
    let (mantissa, exp) = match t.find(['e', 'E']) {
        Some(i) => (&t[..i], t[i + 1..].parse::<i32>().ok()?),
        None => (t, 0),
    };
    let (neg, digits) = match mantissa.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, mantissa.strip_prefix('+').unwrap_or(mantissa)),
    };
    let (int_part, frac_part) = match digits.split_once('.') {
        Some((a, b)) => (a, b),
        None => (digits, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let all: String = format!("{int_part}{frac_part}");
    let numer: i128 = if all.is_empty() { 0 } else { all.parse().ok()? };
    let scale = exp - frac_part.len() as i32;
    if scale.unsigned_abs() > 30 {
        return None;
    }
    let pow = 10i128.checked_pow(scale.unsigned_abs())?;
    let mut r = if scale >= 0 {
        Ratio::from_integer(numer.checked_mul(pow)?)
    } else {
        Ratio::new(numer, pow)
    };
    if neg {
        r = -r;
    }
    Some(r)
}

/// Exact rational from a finite f64, going through its shortest decimal form.
pub fn ratio_from_f64(x: f64) -> Option<Ratio<i128>> {
    if !x.is_finite() {
        return None;
    }
    parse_decimal(&format!("{x}"))
}

/// Decimal rendering when the rational has a finite expansion, `p/q` otherwise.
pub fn format_ratio(r: &Ratio<i128>) -> String {
    let mut d = *r.denom();
    let mut twos = 0u32;
    let mut fives = 0u32;
    while d % 2 == 0 {
        d /= 2;
        twos += 1;
    }
    while d % 5 == 0 {
        d /= 5;
        fives += 1;
    }
    if d != 1 {
        return format!("{}/{}", r.numer(), r.denom());
    }
    let places = twos.max(fives);
    if places == 0 {
        return format!("{}", r.numer());
    }
    let scaled = r * Ratio::from_integer(10i128.pow(places));
    let n = scaled.to_integer();
    let neg = n < 0;
    let digits = n.abs().to_string();
    let width = places as usize + 1;
    let padded = format!("{digits:0>width$}");
    let (a, b) = padded.split_at(padded.len() - places as usize);
    let b = b.trim_end_matches('0');
    format!("{}{}.{}", if neg { "-" } else { "" }, a, b)
}

/// Inverse of [`format_ratio`].
pub fn parse_ratio(text: &str) -> Option<Ratio<i128>> {
    match text.split_once('/') {
        Some((n, d)) => {
            let d: i128 = d.parse().ok()?;
            if d == 0 {
                return None;
            }
            Some(Ratio::new(n.parse().ok()?, d))
        }
        None => parse_decimal(text),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Past,
    Now,
    Future,
}

impl FromStr for Direction {
    type Err = TemporalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "past" => Ok(Direction::Past),
            "now" => Ok(Direction::Now),
            "future" => Ok(Direction::Future),
            other => Err(TemporalError::UnknownDirection(other.to_string())),
        }
    }
}

/// One endpoint as written in patient fact files.
#[derive(Clone, Debug, PartialEq)]
pub struct Endpoint {
    pub direction: Direction,
    /// `None` stands for `"Inf"`.
    pub magnitude: Option<Ratio<i128>>,
    pub units: TimeUnit,
    pub inclusive: bool,
}

impl Endpoint {
    pub fn to_hours(&self) -> Hours {
        let sign = match self.direction {
            Direction::Past => -1,
            Direction::Now => return Hours::zero(),
            Direction::Future => 1,
        };
        match &self.magnitude {
            None => clamp(sentinel() * Hours::from_integer(sign)),
            Some(m) => clamp(m.abs() * self.units.in_hours() * Hours::from_integer(sign)),
        }
    }
}

/// A closed, open or half-open window of hours relative to now.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeWindow {
    #[serde(with = "ratio_text")]
    pub lower: Hours,
    #[serde(with = "ratio_text")]
    pub upper: Hours,
    pub lower_inclusive: bool,
    pub upper_inclusive: bool,
}

mod ratio_text {
    use super::{format_ratio, parse_ratio, Hours};
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(h: &Hours, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_ratio(h))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Hours, D::Error> {
        let text = String::deserialize(d)?;
        parse_ratio(&text).ok_or_else(|| D::Error::custom(format!("bad rational `{text}`")))
    }
}

impl TimeWindow {
    /// Build a window, clamping both endpoints to the sentinel range.
    pub fn new(lower: Hours, upper: Hours, lower_inclusive: bool, upper_inclusive: bool) -> Result<Self, TemporalError> {
        let lower = clamp(lower);
        let upper = clamp(upper);
        match lower.cmp(&upper) {
            Ordering::Greater => Err(TemporalError::InvalidWindow {
                start: format_ratio(&lower),
                end: format_ratio(&upper),
            }),
            Ordering::Equal if !(lower_inclusive && upper_inclusive) => Err(TemporalError::EmptyWindow { at: format_ratio(&lower) }),
            _ => Ok(TimeWindow { lower, upper, lower_inclusive, upper_inclusive }),
        }
    }

    pub fn closed(lower: i128, upper: i128) -> Result<Self, TemporalError> {
        Self::new(Hours::from_integer(lower), Hours::from_integer(upper), true, true)
    }

    pub fn from_endpoints(start: &Endpoint, end: &Endpoint) -> Result<Self, TemporalError> {
        Self::new(start.to_hours(), end.to_hours(), start.inclusive, end.inclusive)
    }

    pub fn point_now() -> Self {
        TimeWindow { lower: Hours::zero(), upper: Hours::zero(), lower_inclusive: true, upper_inclusive: true }
    }

    /// `[-1e9, 1e9]`.
    pub fn unbounded() -> Self {
        TimeWindow { lower: -sentinel(), upper: sentinel(), lower_inclusive: true, upper_inclusive: true }
    }

    pub fn contains_point(&self, h: &Hours) -> bool {
        let lo_ok = if self.lower_inclusive { *h >= self.lower } else { *h > self.lower };
        let hi_ok = if self.upper_inclusive { *h <= self.upper } else { *h < self.upper };
        lo_ok && hi_ok
    }

    /// Nonempty intersection, honoring inclusivity.
    pub fn overlaps(&self, other: &TimeWindow) -> bool {
        let (lo, lo_inc) = match self.lower.cmp(&other.lower) {
            Ordering::Greater => (&self.lower, self.lower_inclusive),
            Ordering::Less => (&other.lower, other.lower_inclusive),
            Ordering::Equal => (&self.lower, self.lower_inclusive && other.lower_inclusive),
        };
        let (hi, hi_inc) = match self.upper.cmp(&other.upper) {
            Ordering::Less => (&self.upper, self.upper_inclusive),
            Ordering::Greater => (&other.upper, other.upper_inclusive),
            Ordering::Equal => (&self.upper, self.upper_inclusive && other.upper_inclusive),
        };
        match lo.cmp(hi) {
            Ordering::Less => true,
            Ordering::Equal => lo_inc && hi_inc,
            Ordering::Greater => false,
        }
    }

    /// `inner` is a subset of `self`.
    pub fn contains(&self, inner: &TimeWindow) -> bool {
        let lo_ok = match self.lower.cmp(&inner.lower) {
            Ordering::Less => true,
            Ordering::Equal => self.lower_inclusive || !inner.lower_inclusive,
            Ordering::Greater => false,
        };
        let hi_ok = match self.upper.cmp(&inner.upper) {
            Ordering::Greater => true,
            Ordering::Equal => self.upper_inclusive || !inner.upper_inclusive,
            Ordering::Less => false,
        };
        lo_ok && hi_ok
    }

    /// `inner` lies in the interior of `self`: no shared endpoint.
    pub fn strictly_contains(&self, inner: &TimeWindow) -> bool {
        self.lower < inner.lower && inner.upper < self.upper
    }

    pub fn lower_f64(&self) -> f64 {
        self.lower.to_f64().unwrap_or(f64::NAN)
    }

    pub fn upper_f64(&self) -> f64 {
        self.upper.to_f64().unwrap_or(f64::NAN)
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}h→{}h]", format_ratio(&self.lower), format_ratio(&self.upper))
    }
}

/// A trial's window matches the patient's possible window when they overlap.
pub fn inclusion_time_match(criterion: &TimeWindow, patient_possible: &TimeWindow) -> bool {
    criterion.overlaps(patient_possible)
}

/// An exclusion fires only when the patient's certain window sits inside the
/// criterion window. With `strict`, shared endpoints do not count.
pub fn exclusion_time_match(criterion: &TimeWindow, patient_certain: &TimeWindow, strict: bool) -> bool {
    if strict {
        criterion.strictly_contains(patient_certain)
    } else {
        criterion.contains(patient_certain)
    }
}

/// Trial-side timeframe suffix of a variable name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Timeframe {
    Now,
    InTheHistory,
    InTheFuture,
    InThePast(u32, TimeUnit),
    InTheFutureFor(u32, TimeUnit),
    ForADurationOf(u32, TimeUnit),
}

impl Timeframe {
    pub fn parse(token: &str) -> Option<Timeframe> {
        match token {
            "now" => return Some(Timeframe::Now),
            "inthehistory" => return Some(Timeframe::InTheHistory),
            "inthefuture" => return Some(Timeframe::InTheFuture),
            _ => {}
        }
        let (rest, ctor): (&str, fn(u32, TimeUnit) -> Timeframe) = if let Some(r) = token.strip_prefix("inthepast") {
            (r, Timeframe::InThePast)
        } else if let Some(r) = token.strip_prefix("inthefuture") {
            (r, Timeframe::InTheFutureFor)
        } else {
            let r = token.strip_prefix("foradurationof")?;
            (r, Timeframe::ForADurationOf)
        };
        let split = rest.find(|c: char| !c.is_ascii_digit())?;
        let (digits, unit) = rest.split_at(split);
        if digits.is_empty() || (digits.len() > 1 && digits.starts_with('0')) {
            return None;
        }
        let n: u32 = digits.parse().ok()?;
        let unit = TimeUnit::ALL.into_iter().find(|u| u.as_str() == unit)?;
        Some(ctor(n, unit))
    }

    /// The criterion window this token stands for. An unanchored duration
    /// may fall anywhere, so it maps to the whole range.
    pub fn window(&self) -> TimeWindow {
        let s = sentinel();
        let span = |n: u32, u: TimeUnit| clamp(Hours::from_integer(n as i128) * u.in_hours());
        let w = |lo: Hours, hi: Hours| TimeWindow { lower: lo, upper: hi, lower_inclusive: true, upper_inclusive: true };
        match *self {
            Timeframe::Now => TimeWindow::point_now(),
            Timeframe::InTheHistory => w(-s, Hours::zero()),
            Timeframe::InTheFuture => w(Hours::zero(), s),
            Timeframe::InThePast(n, u) => w(-span(n, u), Hours::zero()),
            Timeframe::InTheFutureFor(n, u) => w(Hours::zero(), span(n, u)),
            Timeframe::ForADurationOf(_, _) => TimeWindow::unbounded(),
        }
    }
}

impl fmt::Display for Timeframe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timeframe::Now => f.write_str("now"),
            Timeframe::InTheHistory => f.write_str("inthehistory"),
            Timeframe::InTheFuture => f.write_str("inthefuture"),
            Timeframe::InThePast(n, u) => write!(f, "inthepast{n}{}", u.as_str()),
            Timeframe::InTheFutureFor(n, u) => write!(f, "inthefuture{n}{}", u.as_str()),
            Timeframe::ForADurationOf(n, u) => write!(f, "foradurationof{n}{}", u.as_str()),
        }
    }
}

/// Window for a trial atom, or the whole range when it carries no timeframe.
pub fn criterion_window(tf: Option<&Timeframe>) -> TimeWindow {
    tf.map(Timeframe::window).unwrap_or_else(TimeWindow::unbounded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(n: i128) -> Hours {
        Hours::from_integer(n)
    }

    #[test]
    fn unit_factors() {
        assert_eq!(TimeUnit::Days.in_hours(), h(24));
        assert_eq!(TimeUnit::Weeks.in_hours(), h(168));
        assert_eq!(TimeUnit::Months.in_hours(), h(730));
        assert_eq!(TimeUnit::Years.in_hours(), h(8760));
        assert_eq!(TimeUnit::Minutes.in_hours() * h(60), h(1));
    }

    #[test]
    fn past_three_years_matches_certain_past_month() {
        let crit = Timeframe::InThePast(3, TimeUnit::Years).window();
        assert_eq!(crit, TimeWindow::closed(-26280, 0).unwrap());
        let cert = TimeWindow::closed(-730, 0).unwrap();
        assert!(exclusion_time_match(&crit, &cert, false));
        assert!(inclusion_time_match(&crit, &cert));
    }

    #[test]
    fn open_endpoint_blocks_point_overlap() {
        let a = TimeWindow::point_now();
        let b = TimeWindow::new(h(0), h(5), false, true).unwrap();
        assert!(!inclusion_time_match(&a, &b));
        let c = TimeWindow::new(h(0), h(5), true, true).unwrap();
        assert!(inclusion_time_match(&a, &c));
    }

    #[test]
    fn infinite_magnitude_clips_to_sentinel() {
        let e = Endpoint { direction: Direction::Past, magnitude: None, units: TimeUnit::Hours, inclusive: true };
        assert_eq!(e.to_hours(), h(-SENTINEL_HOURS));
        let huge = Endpoint { direction: Direction::Future, magnitude: Some(h(10_000_000)), units: TimeUnit::Years, inclusive: true };
        assert_eq!(huge.to_hours(), h(SENTINEL_HOURS));
        assert_eq!(clamp(clamp(h(5 * SENTINEL_HOURS))), h(SENTINEL_HOURS));
    }

    #[test]
    fn inverted_and_empty_windows_rejected() {
        assert!(matches!(TimeWindow::closed(5, 1), Err(TemporalError::InvalidWindow { .. })));
        assert!(matches!(TimeWindow::new(h(3), h(3), true, false), Err(TemporalError::EmptyWindow { .. })));
    }

    #[test]
    fn equal_closed_windows_contain_unless_strict() {
        let w = TimeWindow::closed(-10, 0).unwrap();
        assert!(exclusion_time_match(&w, &w, false));
        assert!(!exclusion_time_match(&w, &w, true));
    }

    #[test]
    fn display_uses_arrow_form() {
        let w = TimeWindow::new(Hours::new(-3, 2), h(0), true, true).unwrap();
        assert_eq!(w.to_string(), "[-1.5h→0h]");
    }

    #[test]
    fn timeframe_tokens_round_trip() {
        for t in ["now", "inthehistory", "inthefuture", "inthepast7days", "inthepast3years", "inthefuture12months", "foradurationof2weeks"] {
            let tf = Timeframe::parse(t).unwrap();
            assert_eq!(tf.to_string(), t);
        }
        assert!(Timeframe::parse("inthepast").is_none());
        assert!(Timeframe::parse("inthepast07days").is_none());
        assert!(Timeframe::parse("inthepast7fortnights").is_none());
    }

    #[test]
    fn decimals_are_exact() {
        assert_eq!(parse_decimal("18.0"), Some(h(18)));
        assert_eq!(parse_decimal("-0.25"), Some(Hours::new(-1, 4)));
        assert_eq!(parse_decimal("1e3"), Some(h(1000)));
        assert_eq!(ratio_from_f64(0.1), Some(Hours::new(1, 10)));
        assert_eq!(format_ratio(&Hours::new(-1, 4)), "-0.25");
        assert_eq!(format_ratio(&Hours::new(1, 3)), "1/3");
        assert_eq!(parse_ratio("1/3"), Some(Hours::new(1, 3)));
        assert!(parse_decimal("abc").is_none());
    }
}
