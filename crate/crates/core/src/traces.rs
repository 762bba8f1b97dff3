//! Trace data model and on-disk dataset ingestion.
//!
//! A trace is the timestamped, signed-length packet sequence of one page
//! visit. **Sign convention:** a positive length is a packet sent by the
//! server (incoming to the client), a negative length is a packet sent by the
//! client (outgoing). Much WF tooling uses the opposite convention; every
//! feature in this crate assumes this one.
//!
//! Trace files are UTF-8 text with one `time<TAB>length` pair per line.
//! Blank lines and `#`-prefixed comment lines are ignored. A dataset is a
//! directory laid out as `root/<website_id>/<visit_id>.trace`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

/// Default Tor cell size in bytes.
pub const DEFAULT_CELL_SIZE: u32 = 512;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: zero-length packet")]
    ZeroLength { line: usize },
    #[error("line {line}: timestamp {time} precedes previous timestamp {previous}")]
    DecreasingTime { line: usize, time: f64, previous: f64 },
    #[error("trace contains no packets")]
    Empty,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset root {0} contains no valid traces")]
    Empty(PathBuf),
}

/// Direction of a packet relative to the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// Client to server; negative length.
    Outgoing,
    /// Server to client; positive length.
    Incoming,
}

impl Direction {
    /// Sign used for this direction in cell-form traces.
    pub fn sign(self) -> i64 {
        match self {
            Direction::Outgoing => -1,
            Direction::Incoming => 1,
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Outgoing => Direction::Incoming,
            Direction::Incoming => Direction::Outgoing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Packet {
    /// Seconds since the first packet of the visit.
    pub time: f64,
    /// Signed length; positive is incoming, never zero.
    pub length: i64,
}

impl Packet {
    pub fn direction(&self) -> Direction {
        if self.length > 0 {
            Direction::Incoming
        } else {
            Direction::Outgoing
        }
    }

    pub fn size(&self) -> u64 {
        self.length.unsigned_abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    packets: Vec<Packet>,
    pub website_id: String,
    pub visit_id: String,
}

impl Trace {
    /// Builds a trace from packets, shifting times so the first packet is at
    /// zero. Rejects empty input, zero lengths and decreasing timestamps.
    pub fn new(
        packets: Vec<Packet>,
        website_id: impl Into<String>,
        visit_id: impl Into<String>,
    ) -> Result<Self, TraceError> {
        let origin = packets.first().ok_or(TraceError::Empty)?.time;
        let mut previous = origin;
        for (i, p) in packets.iter().enumerate() {
            if p.length == 0 {
                return Err(TraceError::ZeroLength { line: i + 1 });
            }
            if !p.time.is_finite() {
                return Err(TraceError::Malformed {
                    line: i + 1,
                    reason: format!("non-finite time {}", p.time),
                });
            }
            if p.time < previous {
                return Err(TraceError::DecreasingTime {
                    line: i + 1,
                    time: p.time,
                    previous,
                });
            }
            previous = p.time;
        }
        let packets = packets
            .into_iter()
            .map(|p| Packet {
                time: p.time - origin,
                length: p.length,
            })
            .collect();
        Ok(Trace {
            packets,
            website_id: website_id.into(),
            visit_id: visit_id.into(),
        })
    }

    /// Builds an unlabeled cell-form trace from `(time, sign)` pairs.
    pub fn from_cells(cells: &[(f64, i64)]) -> Result<Self, TraceError> {
        let packets = cells.iter().map(|&(time, length)| Packet { time, length }).collect();
        Trace::new(packets, "", "")
    }

    pub fn packets(&self) -> &[Packet] {
        &self.packets
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    /// Time of the last packet (the first is always at zero).
    pub fn duration(&self) -> f64 {
        self.packets.last().map_or(0.0, |p| p.time)
    }

    pub fn count(&self, dir: Direction) -> usize {
        self.packets.iter().filter(|p| p.direction() == dir).count()
    }

    /// True when every packet has length +-1.
    pub fn is_cell_form(&self) -> bool {
        self.packets.iter().all(|p| p.length.abs() == 1)
    }

    /// Same trace with every packet's direction reversed.
    pub fn flipped(&self) -> Trace {
        Trace {
            packets: self
                .packets
                .iter()
                .map(|p| Packet {
                    time: p.time,
                    length: -p.length,
                })
                .collect(),
            website_id: self.website_id.clone(),
            visit_id: self.visit_id.clone(),
        }
    }

    pub fn with_labels(mut self, website_id: impl Into<String>, visit_id: impl Into<String>) -> Self {
        self.website_id = website_id.into();
        self.visit_id = visit_id.into();
        self
    }
}

/// Parses the line-oriented trace text format.
pub fn parse_trace(text: &str, website_id: &str, visit_id: &str) -> Result<Trace, TraceError> {
    let mut packets = Vec::new();
    let mut previous: Option<f64> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let (time_field, length_field) = match (fields.next(), fields.next(), fields.next()) {
            (Some(t), Some(l), None) => (t, l),
            _ => {
                return Err(TraceError::Malformed {
                    line,
                    reason: format!("expected `time<TAB>length`, got {trimmed:?}"),
                })
            }
        };
        let time: f64 = time_field.parse().map_err(|_| TraceError::Malformed {
            line,
            reason: format!("bad time {time_field:?}"),
        })?;
        if !time.is_finite() {
            return Err(TraceError::Malformed {
                line,
                reason: format!("non-finite time {time_field:?}"),
            });
        }
        let length: i64 = length_field.parse().map_err(|_| TraceError::Malformed {
            line,
            reason: format!("bad length {length_field:?}"),
        })?;
        if length == 0 {
            return Err(TraceError::ZeroLength { line });
        }
        if let Some(prev) = previous {
            if time < prev {
                return Err(TraceError::DecreasingTime {
                    line,
                    time,
                    previous: prev,
                });
            }
        }
        previous = Some(time);
        packets.push(Packet { time, length });
    }
    Trace::new(packets, website_id, visit_id)
}

/// Writes a trace in the text format read by [`parse_trace`].
pub fn serialize_trace(trace: &Trace) -> String {
    let mut out = String::with_capacity(trace.len() * 12);
    for p in trace.packets() {
        let _ = writeln!(out, "{}\t{}", p.time, p.length);
    }
    out
}

/// Expands every packet of byte length `|l|` into `ceil(|l| / cell_size)`
/// unit packets at the same timestamp. Cell-form traces pass through.
pub fn to_cell_sequence(trace: &Trace, cell_size: u32) -> Trace {
    assert!(cell_size > 0, "cell size must be positive");
    if trace.is_cell_form() {
        return trace.clone();
    }
    let cell = u64::from(cell_size);
    let mut packets = Vec::with_capacity(trace.len());
    for p in trace.packets() {
        let n = p.size().div_ceil(cell);
        let sign = p.direction().sign();
        packets.extend((0..n).map(|_| Packet {
            time: p.time,
            length: sign,
        }));
    }
    Trace {
        packets,
        website_id: trace.website_id.clone(),
        visit_id: trace.visit_id.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    websites: Vec<String>,
    traces: BTreeMap<String, Vec<Trace>>,
}

impl Dataset {
    /// Groups traces by `website_id`; websites sorted lexicographically and
    /// traces within a site kept in input order.
    pub fn from_traces(traces: Vec<Trace>) -> Self {
        let mut grouped: BTreeMap<String, Vec<Trace>> = BTreeMap::new();
        for t in traces {
            grouped.entry(t.website_id.clone()).or_default().push(t);
        }
        Dataset {
            websites: grouped.keys().cloned().collect(),
            traces: grouped,
        }
    }

    pub fn websites(&self) -> &[String] {
        &self.websites
    }

    pub fn traces_of(&self, website: &str) -> &[Trace] {
        self.traces.get(website).map_or(&[], Vec::as_slice)
    }

    /// All traces, website-major in website order.
    pub fn iter(&self) -> impl Iterator<Item = &Trace> {
        self.websites.iter().flat_map(move |w| self.traces[w].iter())
    }

    pub fn len(&self) -> usize {
        self.traces.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Applies `f` to every trace, keeping labels and order.
    pub fn map_traces(&self, f: impl Fn(&Trace) -> Trace + Sync) -> Dataset {
        let traces: Vec<Trace> = self
            .iter()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|t| f(t).with_labels(t.website_id.clone(), t.visit_id.clone()))
            .collect();
        Dataset::from_traces(traces)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// Files that failed to read or parse, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    /// Website directories with no valid trace.
    pub excluded_websites: Vec<String>,
}

/// Loads `root/<website_id>/<visit_id>.trace`. Unparseable files are skipped
/// and listed in the report; websites left with no valid trace are excluded.
pub fn load_dataset(root: &Path) -> Result<(Dataset, LoadReport), DatasetError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    let mut site_dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        if entry.path().is_dir() {
            site_dirs.push(entry.path());
        }
    }
    site_dirs.sort();

    let mut files = Vec::new();
    for dir in &site_dirs {
        let website = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut visits = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.extension().is_some_and(|e| e == "trace") {
                visits.push(path);
            }
        }
        visits.sort();
        files.extend(visits.into_iter().map(|p| (website.clone(), p)));
    }

    let parsed: Vec<(String, PathBuf, Result<Trace, String>)> = files
        .into_par_iter()
        .map(|(website, path)| {
            let visit = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let result = fs::read_to_string(&path)
                .map_err(|e| e.to_string())
                .and_then(|text| parse_trace(&text, &website, &visit).map_err(|e| e.to_string()));
            (website, path, result)
        })
        .collect();

    let mut report = LoadReport::default();
    let mut traces = Vec::new();
    for (_, path, result) in parsed {
        match result {
            Ok(t) => traces.push(t),
            Err(reason) => {
                log::warn!("skipping {}: {reason}", path.display());
                report.skipped.push((path, reason));
            }
        }
    }
    let dataset = Dataset::from_traces(traces);
    for dir in &site_dirs {
        let website = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if dataset.traces_of(&website).is_empty() {
            log::warn!("website {website} has no valid traces; excluded");
            report.excluded_websites.push(website);
        }
    }
    if dataset.is_empty() {
        return Err(DatasetError::Empty(root.to_path_buf()));
    }
    Ok((dataset, report))
}

/// Writes a dataset in the layout read by [`load_dataset`].
pub fn write_dataset(dataset: &Dataset, root: &Path) -> std::io::Result<()> {
    for trace in dataset.iter() {
        let dir = root.join(&trace.website_id);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(format!("{}.trace", trace.visit_id)), serialize_trace(trace))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dirs(t: &Trace) -> Vec<Direction> {
        t.packets().iter().map(Packet::direction).collect()
    }

    #[test]
    fn parses_three_packets() {
        let t = parse_trace("0.0\t-512\n0.05\t512\n0.05\t512", "a", "1").unwrap();
        assert_eq!(t.len(), 3);
        use Direction::*;
        assert_eq!(dirs(&t), vec![Outgoing, Incoming, Incoming]);
        assert_eq!(t.packets()[2].time, 0.05);
    }

    #[test]
    fn shifts_time_origin() {
        let t = parse_trace("1.5\t512", "a", "1").unwrap();
        assert_eq!(t.packets()[0].time, 0.0);
    }

    #[test]
    fn rejects_zero_length() {
        assert_eq!(parse_trace("0.0\t0", "a", "1"), Err(TraceError::ZeroLength { line: 1 }));
    }

    #[test]
    fn reports_malformed_line_number() {
        let err = parse_trace("# header\n0.0\t1\nabc\t1\n", "a", "1").unwrap_err();
        assert!(matches!(err, TraceError::Malformed { line: 3, .. }));
        let err = parse_trace("0.0\t1\t5\n", "a", "1").unwrap_err();
        assert!(matches!(err, TraceError::Malformed { line: 1, .. }));
    }

    #[test]
    fn rejects_decreasing_time() {
        let err = parse_trace("1.0\t1\n0.5\t-1\n", "a", "1").unwrap_err();
        assert!(matches!(err, TraceError::DecreasingTime { line: 2, .. }));
    }

    #[test]
    fn rejects_empty() {
        assert_eq!(parse_trace("# nothing\n\n", "a", "1"), Err(TraceError::Empty));
    }

    #[test]
    fn cell_expansion() {
        let t = Trace::from_cells(&[(0.0, 1024)]).unwrap();
        let c = to_cell_sequence(&t, 512);
        assert_eq!(
            c.packets(),
            &[Packet { time: 0.0, length: 1 }, Packet { time: 0.0, length: 1 }]
        );

        let t = Trace::from_cells(&[(0.0, -1)]).unwrap();
        assert_eq!(to_cell_sequence(&t, 512), t);

        let t = Trace::from_cells(&[(0.0, 700)]).unwrap();
        assert_eq!(to_cell_sequence(&t, 512).len(), 2);
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut traces = Vec::new();
        for site in ["b", "a"] {
            for v in 0..3 {
                traces.push(
                    Trace::from_cells(&[(0.0, -1), (0.25, 1)])
                        .unwrap()
                        .with_labels(site, format!("v{v}")),
                );
            }
        }
        let ds = Dataset::from_traces(traces);
        write_dataset(&ds, dir.path()).unwrap();
        let (loaded, report) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded.websites(), &["a".to_string(), "b".to_string()]);
        assert!(report.skipped.is_empty());
        assert_eq!(loaded, ds);

        fs::write(dir.path().join("a/v0.trace"), "garbage\n").unwrap();
        let (loaded, report) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 5);
        assert_eq!(report.skipped.len(), 1);
    }

    #[test]
    fn website_without_valid_traces_is_excluded() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("good")).unwrap();
        fs::create_dir_all(dir.path().join("bad")).unwrap();
        fs::write(dir.path().join("good/1.trace"), "0\t1\n").unwrap();
        fs::write(dir.path().join("bad/1.trace"), "0\t0\n").unwrap();
        let (ds, report) = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.websites(), &["good".to_string()]);
        assert_eq!(report.excluded_websites, vec!["bad".to_string()]);
    }

    #[test]
    fn empty_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DatasetError::Empty(_))));
    }

    fn arb_trace() -> impl Strategy<Value = Trace> {
        prop::collection::vec((0.0f64..5.0, prop_oneof![-1500i64..=-1, 1i64..=1500]), 1..60).prop_map(|mut raw| {
            let mut t = 0.0;
            for (dt, _) in raw.iter_mut() {
                t += *dt;
                *dt = t;
            }
            Trace::from_cells(&raw).unwrap()
        })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(t in arb_trace()) {
            let back = parse_trace(&serialize_trace(&t), "", "").unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn cell_expansion_preserves_order_and_duration(t in arb_trace()) {
            let c = to_cell_sequence(&t, 512);
            prop_assert!(c.is_cell_form());
            prop_assert_eq!(c.duration(), t.duration());
            let mut expected = Vec::new();
            for p in t.packets() {
                let n = p.size().div_ceil(512);
                expected.extend(std::iter::repeat_n(p.direction(), n as usize));
            }
            prop_assert_eq!(dirs(&c), expected);
        }
    }
}
