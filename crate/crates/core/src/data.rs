//! Interaction-log ingestion: parsing, k-core filtering, day coarsening,
//! time normalization and the chronological train/validation/test split.
//!
//! Canonical dataset file (plain text):
//!
//! ```text
//! cpmr-dataset 1
//! <n_users> <n_items> <day_unit> <train_end> <val_end>
//! <user_id> <item_id> <day> <t_norm>      (one line per interaction)
//! ```

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const DEFAULT_K_CORE: usize = 5;
const DATASET_MAGIC: &str = "cpmr-dataset 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    /// `user,item,rating,epoch_seconds`
    AmazonCsv,
    /// `user<TAB>item<TAB>rating<TAB>epoch_seconds`
    MovielensTab,
}

impl Format {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "amazon_csv" => Ok(Format::AmazonCsv),
            "movielens_tab" => Ok(Format::MovielensTab),
            other => Err(Error::Config(format!(
                "unknown input format `{other}` (expected amazon_csv or movielens_tab)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Format::AmazonCsv => "amazon_csv",
            Format::MovielensTab => "movielens_tab",
        }
    }

    fn separator(self) -> char {
        match self {
            Format::AmazonCsv => ',',
            Format::MovielensTab => '\t',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: i64,
    pub rating: Option<f64>,
}

/// One event per non-blank record, in input order.
///
/// Records need at least three fields: `user, item, timestamp` or
/// `user, item, rating, timestamp`; the timestamp is always the last field.
pub fn parse_interactions(source: impl BufRead, format: Format) -> Result<Vec<RawEvent>> {
    let sep = format.separator();
    let mut events = Vec::new();
    for (n, line) in source.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("unreadable record: {e}"),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        let (user, item, rating, ts) = match fields.as_slice() {
            [u, i, ts] => (*u, *i, None, *ts),
            [u, i, r, ts, ..] => (*u, *i, Some(*r), *ts),
            _ => {
                return Err(bad(format!(
                    "expected at least 3 {}-separated fields, found {}",
                    format.as_str(),
                    fields.len()
                )))
            }
        };
        if user.is_empty() || item.is_empty() {
            return Err(bad("empty user or item key".into()));
        }
        let timestamp: i64 = ts
            .parse::<i64>()
            .or_else(|_| ts.parse::<f64>().map(|f| f as i64).map_err(|_| ()))
            .map_err(|_| bad(format!("timestamp `{ts}` is not a number")))?;
        if timestamp < 0 {
            return Err(bad(format!("negative timestamp {timestamp}")));
        }
        let rating = match rating {
            None | Some("") => None,
            Some(r) => Some(
                r.parse::<f64>()
                    .map_err(|_| bad(format!("rating `{r}` is not a number")))?,
            ),
        };
        events.push(RawEvent {
            user_key: user.to_string(),
            item_key: item.to_string(),
            timestamp,
            rating,
        });
    }
    Ok(events)
}

/// Iteratively drops users and items with fewer than `k` events until every
/// survivor has at least `k`. Input order is preserved.
pub fn k_core_filter(events: Vec<RawEvent>, k: usize) -> Vec<RawEvent> {
    assert!(k >= 1, "k must be at least 1");
    let mut events = events;
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *users.entry(&e.user_key).or_default() += 1;
            *items.entry(&e.item_key).or_default() += 1;
        }
        let keep: Vec<bool> = events
            .iter()
            .map(|e| users[e.user_key.as_str()] >= k && items[e.item_key.as_str()] >= k)
            .collect();
        if keep.iter().all(|&b| b) {
            break;
        }
        let mut flags = keep.into_iter();
        events.retain(|_| flags.next().unwrap());
    }
    if events.is_empty() {
        log::warn!("{k}-core filter removed every interaction");
    }
    events
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    /// Days since the first interaction day of the dataset.
    pub day: u32,
    pub t_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Sorted by `(day, user, item)`.
    pub interactions: Vec<Interaction>,
    pub n_users: usize,
    pub n_items: usize,
    /// Length of one day in normalized time.
    pub day_unit: f64,
    /// `[train_end, val_end]`: interactions `..train_end` are training,
    /// `train_end..val_end` validation, the rest test.
    pub split_boundaries: [usize; 2],
}

/// Table-1 style counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Summary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub days: usize,
    pub span_days: u32,
    pub split_sizes: [usize; 3],
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "users={} items={} interactions={} days={} span_days={} train={} val={} test={}",
            self.users,
            self.items,
            self.interactions,
            self.days,
            self.span_days,
            self.split_sizes[0],
            self.split_sizes[1],
            self.split_sizes[2]
        )
    }
}

impl Dataset {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        let [a, b] = self.split_boundaries;
        match split {
            Split::Train => 0..a,
            Split::Validation => a..b,
            Split::Test => b..self.interactions.len(),
        }
    }

    pub fn split(&self, split: Split) -> &[Interaction] {
        &self.interactions[self.range(split)]
    }

    /// Distinct interaction days in ascending order.
    pub fn days(&self) -> Vec<u32> {
        let mut days: Vec<u32> = self.interactions.iter().map(|x| x.day).collect();
        days.dedup();
        days
    }

    pub fn span_days(&self) -> u32 {
        self.interactions.last().map_or(0, |x| x.day)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            users: self.n_users,
            items: self.n_items,
            interactions: self.interactions.len(),
            days: self.days().len(),
            span_days: self.span_days(),
            split_sizes: [
                self.range(Split::Train).len(),
                self.range(Split::Validation).len(),
                self.range(Split::Test).len(),
            ],
        }
    }

    /// Structural checks shared by the reader and hand-built datasets.
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.split_boundaries;
        if a > b || b > self.interactions.len() {
            return Err(Error::Config(format!(
                "split boundaries {a},{b} out of order for {} interactions",
                self.interactions.len()
            )));
        }
        for w in self.interactions.windows(2) {
            if (w[0].day, w[0].user, w[0].item) > (w[1].day, w[1].user, w[1].item) {
                return Err(Error::Config("interactions are not sorted by (day, user, item)".into()));
            }
        }
        for &cut in &self.split_boundaries {
            if cut > 0 && cut < self.interactions.len() && self.interactions[cut - 1].day == self.interactions[cut].day {
                return Err(Error::Config(format!("split boundary {cut} cuts through a day")));
            }
        }
        for x in &self.interactions {
            if x.user as usize >= self.n_users || x.item as usize >= self.n_items {
                return Err(Error::Config(format!(
                    "interaction ({}, {}) outside {}×{} id space",
                    x.user, x.item, self.n_users, self.n_items
                )));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{DATASET_MAGIC}")?;
        writeln!(
            w,
            "{} {} {} {} {}",
            self.n_users, self.n_items, self.day_unit, self.split_boundaries[0], self.split_boundaries[1]
        )?;
        for x in &self.interactions {
            writeln!(w, "{} {} {} {}", x.user, x.item, x.day, x.t_norm)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n + 1, l)),
                Some((n, Err(e))) => Err(Error::Parse {
                    line: n + 1,
                    msg: e.to_string(),
                }),
                None => Err(Error::Parse {
                    line: 0,
                    msg: format!("missing {what}"),
                }),
            }
        };
        let (n, magic) = next("header")?;
        if magic.trim() != DATASET_MAGIC {
            return Err(Error::Parse {
                line: n,
                msg: "not a canonical dataset file".into(),
            });
        }
        let (n, header) = next("header")?;
        let f: Vec<&str> = header.split_whitespace().collect();
        let bad_header = || Error::Parse {
            line: n,
            msg: format!("bad header `{header}`"),
        };
        if f.len() != 5 {
            return Err(bad_header());
        }
        let n_users: usize = f[0].parse().map_err(|_| bad_header())?;
        let n_items: usize = f[1].parse().map_err(|_| bad_header())?;
        let day_unit: f64 = f[2].parse().map_err(|_| bad_header())?;
        let a: usize = f[3].parse().map_err(|_| bad_header())?;
        let b: usize = f[4].parse().map_err(|_| bad_header())?;
        let mut interactions = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                line: i + 1,
                msg: format!("{msg}: `{line}`"),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad("expected `user item day t_norm`"));
            }
            interactions.push(Interaction {
                user: f[0].parse().map_err(|_| bad("bad user id"))?,
                item: f[1].parse().map_err(|_| bad("bad item id"))?,
                day: f[2].parse().map_err(|_| bad("bad day"))?,
                t_norm: f[3].parse().map_err(|_| bad("bad t_norm"))?,
            });
        }
        let ds = Dataset {
            interactions,
            n_users,
            n_items,
            day_unit,
            split_boundaries: [a, b],
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Maps keys to dense ids in chronological first-appearance order, coarsens
/// timestamps to days, normalizes time over the full span and places the
/// 80/10/10 split boundaries on day boundaries.
pub fn canonicalize(events: &[RawEvent]) -> Result<Dataset> {
    if events.is_empty() {
        return Err(Error::Empty("no interactions to canonicalize".into()));
    }
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by_key(|&i| events[i].timestamp); // stable: ties keep input order

    let day_of = |e: &RawEvent| e.timestamp.div_euclid(SECONDS_PER_DAY);
    let first_day = day_of(&events[order[0]]);
    let last_day = day_of(&events[*order.last().unwrap()]);
    let span = last_day - first_day;
    if span <= 0 {
        return Err(Error::DegenerateSpan(first_day));
    }
    let span_f = span as f64;

    let mut users: HashMap<&str, u32> = HashMap::new();
    let mut items: HashMap<&str, u32> = HashMap::new();
    let mut interactions = Vec::with_capacity(events.len());
    for &i in &order {
        let e = &events[i];
        let next_user = users.len() as u32;
        let user = *users.entry(&e.user_key).or_insert(next_user);
        let next_item = items.len() as u32;
        let item = *items.entry(&e.item_key).or_insert(next_item);
        let day = (day_of(e) - first_day) as u32;
        interactions.push(Interaction {
            user,
            item,
            day,
            t_norm: day as f64 / span_f,
        });
    }
    interactions.sort_by_key(|x| (x.day, x.user, x.item));
    let split_boundaries = [
        day_boundary(&interactions, 8, 10),
        day_boundary(&interactions, 9, 10),
    ];
    let ds = Dataset {
        interactions,
        n_users: users.len(),
        n_items: items.len(),
        day_unit: 1.0 / span_f,
        split_boundaries,
    };
    debug_assert!(ds.validate().is_ok());
    Ok(ds)
}

/// Smallest index that starts a day and has at least `num/den` of the
/// interactions strictly before it (`len` if none does).
pub fn day_boundary(interactions: &[Interaction], num: usize, den: usize) -> usize {
    let n = interactions.len();
    (0..=n)
        .find(|&b| {
            let starts_day = b == 0 || b == n || interactions[b - 1].day != interactions[b].day;
            starts_day && b * den >= num * n
        })
        .unwrap_or(n)
}

/// Parse, filter and canonicalize in one go.
pub fn preprocess(source: impl BufRead, format: Format, k: usize) -> Result<Dataset> {
    let events = parse_interactions(source, format)?;
    if events.is_empty() {
        return Err(Error::Empty("input contains no interactions".into()));
    }
    let core = k_core_filter(events, k);
    if core.is_empty() {
        return Err(Error::Empty(format!("no interactions survive the {k}-core filter")));
    }
    canonicalize(&core)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ev(u: &str, i: &str, ts: i64) -> RawEvent {
        RawEvent {
            user_key: u.into(),
            item_key: i.into(),
            timestamp: ts,
            rating: None,
        }
    }

    #[test]
    fn parses_both_formats() {
        let a = parse_interactions("A1,B00X,5.0,1404691200\n".as_bytes(), Format::AmazonCsv).unwrap();
        assert_eq!(
            a,
            vec![RawEvent {
                user_key: "A1".into(),
                item_key: "B00X".into(),
                timestamp: 1404691200,
                rating: Some(5.0)
            }]
        );
        let m = parse_interactions("196\t242\t3\t881250949\n".as_bytes(), Format::MovielensTab).unwrap();
        assert_eq!(m[0].user_key, "196");
        assert_eq!(m[0].item_key, "242");
        assert_eq!(m[0].rating, Some(3.0));
        assert_eq!(m[0].timestamp, 881250949);
        assert!(parse_interactions("".as_bytes(), Format::AmazonCsv).unwrap().is_empty());
    }

    #[test]
    fn malformed_records_report_their_line() {
        let err = parse_interactions("a,b,1,10\na,b\n".as_bytes(), Format::AmazonCsv).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_interactions("a,b,1,soon\n".as_bytes(), Format::AmazonCsv).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(matches!(Format::parse("parquet"), Err(Error::Config(_))));
    }

    #[test]
    fn complete_core_is_kept() {
        let mut events = Vec::new();
        for u in 0..3 {
            for i in 0..5 {
                events.push(ev(&format!("u{u}"), &format!("i{i}"), (u * 5 + i) as i64));
            }
        }
        // Items have only 3 events each, so use k = 3 for the item side too.
        assert_eq!(k_core_filter(events.clone(), 3).len(), 15);
        let mut five = events.clone();
        for u in 3..5 {
            for i in 0..5 {
                five.push(ev(&format!("u{u}"), &format!("i{i}"), 100));
            }
        }
        assert_eq!(k_core_filter(five, 5).len(), 25);
    }

    /// Removes one offending event owner at a time until nothing changes.
    fn k_core_oracle(events: &[RawEvent], k: usize) -> Vec<RawEvent> {
        let mut alive: Vec<bool> = vec![true; events.len()];
        loop {
            let mut changed = false;
            for idx in 0..events.len() {
                if !alive[idx] {
                    continue;
                }
                let e = &events[idx];
                let uc = (0..events.len()).filter(|&j| alive[j] && events[j].user_key == e.user_key).count();
                let ic = (0..events.len()).filter(|&j| alive[j] && events[j].item_key == e.item_key).count();
                if uc < k || ic < k {
                    alive[idx] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        events.iter().zip(alive).filter(|(_, a)| *a).map(|(e, _)| e.clone()).collect()
    }

    #[test]
    fn cascading_removal_matches_oracle() {
        // u0..u2 form a 2-core on i0,i1; u3 props up i2 only through one event.
        let log = [
            ("u0", "i0"),
            ("u0", "i1"),
            ("u1", "i0"),
            ("u1", "i1"),
            ("u2", "i0"),
            ("u2", "i1"),
            ("u3", "i2"),
            ("u3", "i0"),
            ("u4", "i2"),
            ("u4", "i3"),
            ("u5", "i3"),
            ("u5", "i4"),
            ("u6", "i4"),
            ("u6", "i1"),
            ("u2", "i4"),
            ("u0", "i3"),
            ("u7", "i5"),
            ("u7", "i0"),
            ("u1", "i5"),
            ("u8", "i5"),
        ];
        let events: Vec<RawEvent> = log.iter().enumerate().map(|(t, (u, i))| ev(u, i, t as i64)).collect();
        for k in 1..=4 {
            assert_eq!(k_core_filter(events.clone(), k), k_core_oracle(&events, k), "k = {k}");
        }
    }

    #[test]
    fn two_point_normalization() {
        let mut events = Vec::new();
        for (u, i) in [("a", "x"), ("b", "y")] {
            events.push(ev(u, i, 0));
            events.push(ev(u, i, 100 * SECONDS_PER_DAY + 5));
        }
        let ds = canonicalize(&events).unwrap();
        let t: HashSet<u64> = ds.interactions.iter().map(|x| x.t_norm.to_bits()).collect();
        assert_eq!(t, HashSet::from([0.0f64.to_bits(), 1.0f64.to_bits()]));
        assert_eq!(ds.day_unit, 0.01);
    }

    #[test]
    fn single_day_is_degenerate() {
        let events = vec![ev("a", "x", 10), ev("b", "x", 20_000)];
        assert!(matches!(canonicalize(&events), Err(Error::DegenerateSpan(_))));
    }

    #[test]
    fn ten_days_split_after_day_eight_and_nine() {
        // One interaction per day on days 1..=10.
        let events: Vec<RawEvent> = (1..=10).map(|d| ev("u", "i", d * SECONDS_PER_DAY)).collect();
        let ds = canonicalize(&events).unwrap();
        assert_eq!(ds.split_boundaries, [8, 9]);
        assert_eq!(ds.split(Split::Train).last().unwrap().day + 1, 8); // calendar day 8
        assert_eq!(ds.split(Split::Validation).len(), 1);
        assert_eq!(ds.split(Split::Test).len(), 1);
    }

    /// Every valid placement, enumerated: the smallest day-start index with
    /// at least the requested fraction strictly before it.
    fn boundary_oracle(days: &[u32], num: usize, den: usize) -> usize {
        let n = days.len();
        let candidates: Vec<usize> = (0..=n).filter(|&b| b == 0 || b == n || days[b - 1] != days[b]).collect();
        *candidates.iter().filter(|&&b| b as f64 / n as f64 >= num as f64 / den as f64 - 1e-12).min().unwrap()
    }

    #[test]
    fn dataset_file_round_trip() {
        let events: Vec<RawEvent> = (0..30).map(|k| ev(&format!("u{}", k % 4), &format!("i{}", k % 3), k * 7919)).collect();
        let ds = canonicalize(&events).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&buf[..]).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    fn arb_events() -> impl Strategy<Value = Vec<RawEvent>> {
        proptest::collection::vec((0u8..8, 0u8..6, 0i64..40 * SECONDS_PER_DAY), 1..120).prop_map(|v| {
            v.into_iter()
                .map(|(u, i, t)| ev(&format!("u{u}"), &format!("i{i}"), t))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn k_core_is_idempotent_and_sound(events in arb_events(), k in 1usize..5) {
            let once = k_core_filter(events.clone(), k);
            let twice = k_core_filter(once.clone(), k);
            prop_assert_eq!(&once, &twice);
            let mut uc: HashMap<&str, usize> = HashMap::new();
            let mut ic: HashMap<&str, usize> = HashMap::new();
            for e in &once {
                *uc.entry(&e.user_key).or_default() += 1;
                *ic.entry(&e.item_key).or_default() += 1;
            }
            prop_assert!(uc.values().chain(ic.values()).all(|&c| c >= k));
            // Subset, order preserved.
            let mut it = events.iter();
            for e in &once {
                prop_assert!(it.any(|x| x == e));
            }
            prop_assert_eq!(once, k_core_oracle(&events, k));
        }

        #[test]
        fn canonical_order_and_splits(events in arb_events()) {
            let Ok(ds) = canonicalize(&events) else { return Ok(()); };
            prop_assert!(ds.validate().is_ok());
            // Coarsening preserves order.
            let mut by_ts = events.clone();
            by_ts.sort_by_key(|e| e.timestamp);
            let days: Vec<i64> = by_ts.iter().map(|e| e.timestamp / SECONDS_PER_DAY).collect();
            prop_assert!(days.windows(2).all(|w| w[0] <= w[1]));
            // t_norm is non-decreasing and spans [0, 1].
            prop_assert!(ds.interactions.windows(2).all(|w| w[0].t_norm <= w[1].t_norm));
            prop_assert_eq!(ds.interactions[0].t_norm, 0.0);
            prop_assert_eq!(ds.interactions.last().unwrap().t_norm, 1.0);
            // Boundaries match the enumeration oracle and never leak.
            let d: Vec<u32> = ds.interactions.iter().map(|x| x.day).collect();
            prop_assert_eq!(ds.split_boundaries[0], boundary_oracle(&d, 8, 10));
            prop_assert_eq!(ds.split_boundaries[1], boundary_oracle(&d, 9, 10));
            let tr = ds.split(Split::Train);
            let va = ds.split(Split::Validation);
            let te = ds.split(Split::Test);
            if let (Some(a), Some(b)) = (tr.last(), va.first()) { prop_assert!(a.day < b.day); }
            if let (Some(a), Some(b)) = (va.last(), te.first()) { prop_assert!(a.day < b.day); }
            if let (Some(a), Some(b)) = (tr.last(), te.first()) { prop_assert!(a.day < b.day); }
        }
    }
}
