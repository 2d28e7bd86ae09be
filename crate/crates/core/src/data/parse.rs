use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use super::{Event, EventType};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// One session per line: `{"session": 1, "events": [{"aid": 5, "ts": 100, "type": "clicks"}]}`.
    SessionJsonLines,
    /// Header `session_id,item_id,timestamp`; every row is a click.
    EventCsv,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "session-json-lines" => Ok(InputFormat::SessionJsonLines),
            "csv" | "event-csv" => Ok(InputFormat::EventCsv),
            other => Err(Error::Config(format!(
                "unknown input format `{other}` (expected jsonl or csv)"
            ))),
        }
    }
}

impl InputFormat {
    /// Guess from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" | "ndjson" => Some(InputFormat::SessionJsonLines),
            "csv" => Some(InputFormat::EventCsv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Abort on the first malformed record.
    #[default]
    Strict,
    /// Skip malformed records and count them.
    Lenient,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedEvents {
    pub events: Vec<Event>,
    pub skipped: usize,
    /// Line number and message of the first few skipped records.
    pub errors: Vec<(usize, String)>,
}

const MAX_REPORTED_ERRORS: usize = 20;

#[derive(Deserialize)]
struct JsonSession {
    session: u64,
    events: Vec<JsonEvent>,
}

#[derive(Deserialize)]
struct JsonEvent {
    aid: u64,
    ts: u64,
    #[serde(rename = "type")]
    kind: String,
}

pub fn parse_events(path: &Path, format: InputFormat, mode: ParseMode) -> Result<ParsedEvents> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(BufReader::new(file), format, mode).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_reader<R: BufRead>(
    reader: R,
    format: InputFormat,
    mode: ParseMode,
) -> Result<ParsedEvents> {
    let mut out = ParsedEvents::default();
    let reject = |out: &mut ParsedEvents, line: usize, message: String| -> Result<()> {
        match mode {
            ParseMode::Strict => Err(Error::Parse { line, message }),
            ParseMode::Lenient => {
                out.skipped += 1;
                if out.errors.len() < MAX_REPORTED_ERRORS {
                    out.errors.push((line, message));
                }
                Ok(())
            }
        }
    };
    match format {
        InputFormat::SessionJsonLines => {
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::io("<input>", e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match parse_json_session(&line) {
                    Ok(evs) => out.events.extend(evs),
                    Err(msg) => reject(&mut out, i + 1, msg)?,
                }
            }
        }
        InputFormat::EventCsv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .trim(csv::Trim::All)
                .from_reader(reader);
            let headers = rdr
                .headers()
                .map_err(|e| Error::Parse {
                    line: 1,
                    message: e.to_string(),
                })?
                .clone();
            let want = ["session_id", "item_id", "timestamp"];
            if !headers.is_empty() && !headers.iter().eq(want.iter().copied()) {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header {}, got {headers:?}", want.join(",")),
                });
            }
            for rec in rdr.records() {
                let (line, parsed) = match rec {
                    Ok(r) => {
                        let line = r.position().map_or(0, |p| p.line() as usize);
                        (line, parse_csv_record(&r))
                    }
                    Err(e) => {
                        let line = e.position().map_or(0, |p| p.line() as usize);
                        (line, Err(e.to_string()))
                    }
                };
                match parsed {
                    Ok(ev) => out.events.push(ev),
                    Err(msg) => reject(&mut out, line, msg)?,
                }
            }
        }
    }
    Ok(out)
}

fn parse_json_session(line: &str) -> std::result::Result<Vec<Event>, String> {
    let s: JsonSession = serde_json::from_str(line).map_err(|e| e.to_string())?;
    s.events
        .into_iter()
        .map(|e| {
            Ok(Event {
                session_id: s.session,
                item_id: e.aid,
                timestamp: e.ts,
                event_type: e.kind.parse().map_err(|err: Error| err.to_string())?,
            })
        })
        .collect()
}

fn parse_csv_record(r: &csv::StringRecord) -> std::result::Result<Event, String> {
    if r.len() != 3 {
        return Err(format!("expected 3 fields, got {}", r.len()));
    }
    let field = |i: usize, name: &str| {
        r[i].parse::<u64>()
            .map_err(|e| format!("bad {name} `{}`: {e}", &r[i]))
    };
    Ok(Event {
        session_id: field(0, "session_id")?,
        item_id: field(1, "item_id")?,
        timestamp: field(2, "timestamp")?,
        event_type: EventType::Click,
    })
}
