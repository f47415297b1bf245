//! JSON Lines trace: a header record, then per tick the events followed by
//! one record per airborne drone, ordered by drone id.

use std::io::{self, BufWriter, Write};

use serde::Serialize;

use crate::dispatch::OpeningId;
use crate::pattern_queue::DroneId;
use crate::sim::SimConfig;

pub const TRACE_FORMAT: &str = "flightq-trace";
pub const TRACE_VERSION: u32 = 1;

/// Times are written on a nanosecond grid so accumulated float noise never
/// leaks into the bytes.
pub fn round_time(t: f64) -> f64 {
    (t * 1e9).round() / 1e9
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Spawn { t: f64, drone_id: DroneId, x: f64, y: f64, z: f64, remaining_s: f64, class: String },
    Assign {
        t: f64,
        drone_id: DroneId,
        opening: OpeningId,
        estimated_wait: f64,
        travel_time: f64,
        feasible: bool,
        slot: Option<usize>,
    },
    Hold { t: f64, drone_id: DroneId, opening: OpeningId },
    Reserve { t: f64, drone_id: DroneId, opening: OpeningId, slot: usize },
    Admit { t: f64, drone_id: DroneId, opening: OpeningId, transit_s: f64 },
    Swap { t: f64, opening: OpeningId, slots: [usize; 2], drones: [DroneId; 2] },
    Fail { t: f64, drone_id: DroneId, opening: Option<OpeningId>, slot: Option<usize> },
    Violation { t: f64, drones: [DroneId; 2], distance: f64 },
    End { t: f64, admitted: u64, failed: u64, spawned: u64 },
}

impl Event {
    fn with_rounded_time(&self) -> Event {
        let mut e = self.clone();
        let t = match &mut e {
            Event::Spawn { t, .. }
            | Event::Assign { t, .. }
            | Event::Hold { t, .. }
            | Event::Reserve { t, .. }
            | Event::Admit { t, .. }
            | Event::Swap { t, .. }
            | Event::Fail { t, .. }
            | Event::Violation { t, .. }
            | Event::End { t, .. } => t,
        };
        *t = round_time(*t);
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroneRecord {
    pub t: f64,
    pub drone_id: DroneId,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub state: &'static str,
    pub slot: Option<usize>,
    pub opening: Option<OpeningId>,
    pub remaining_s: f64,
}

#[derive(Serialize)]
struct Header<'a> {
    format: &'a str,
    version: u32,
    scenario: &'a str,
    seed: u64,
    dt: f64,
    delta_min: f64,
    horizon: f64,
    openings: Vec<HeaderOpening>,
}

#[derive(Serialize)]
struct HeaderOpening {
    id: OpeningId,
    lambda: f64,
    slots: usize,
}

/// Buffered trace sink. Write errors are sticky and reported by [`TraceWriter::finish`].
pub struct TraceWriter {
    out: BufWriter<Box<dyn Write>>,
    error: Option<io::Error>,
}

impl TraceWriter {
    pub fn new(out: Box<dyn Write>) -> Self {
        Self { out: BufWriter::with_capacity(1 << 16, out), error: None }
    }

    pub fn header(
        &mut self,
        scenario: &str,
        seed: u64,
        config: &SimConfig,
        openings: &[(OpeningId, f64, usize)],
    ) -> io::Result<()> {
        let header = Header {
            format: TRACE_FORMAT,
            version: TRACE_VERSION,
            scenario,
            seed,
            dt: config.dt,
            delta_min: config.delta_min,
            horizon: config.horizon,
            openings: openings.iter().map(|&(id, lambda, slots)| HeaderOpening { id, lambda, slots }).collect(),
        };
        self.line(&header);
        self.take_error()
    }

    pub fn event(&mut self, event: &Event) {
        self.line(&event.with_rounded_time());
    }

    pub fn drone(&mut self, record: &DroneRecord) {
        let rounded = DroneRecord { t: round_time(record.t), ..record.clone() };
        self.line(&rounded);
    }

    pub fn finish(mut self) -> io::Result<()> {
        if let Err(e) = self.out.flush() {
            self.error.get_or_insert(e);
        }
        self.take_error()
    }

    fn take_error(&mut self) -> io::Result<()> {
        match self.error.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn line<T: Serialize>(&mut self, value: &T) {
        if self.error.is_some() {
            return;
        }
        let res = serde_json::to_writer(&mut self.out, value)
            .map_err(io::Error::from)
            .and_then(|_| self.out.write_all(b"\n"));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }
}
