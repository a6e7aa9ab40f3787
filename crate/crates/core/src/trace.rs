//! Allocation trace: line-delimited JSON records, replay, heatmap export and
//! invariant verification.
//!
//! A trace is a header line, zero or more event (or divergence) lines and a
//! closing `end` line. Replaying events from the header's initial ranks
//! reconstructs every adapter's rank trajectory.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapter::Action;
use crate::allocator::{AllocationEvent, AllocatorMode, BudgetSchedule};
use crate::error::{Error, Result};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceAdapter {
    pub id: String,
    /// Position in the network, input side first.
    pub depth: usize,
    pub r_init: usize,
    pub r_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub mode: AllocatorMode,
    pub init: String,
    pub metric: String,
    pub schedule: BudgetSchedule,
    pub adapters: Vec<TraceAdapter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    #[serde(flatten)]
    pub event: AllocationEvent,
    /// Sum of adapter ranks after this event.
    pub total_rank: usize,
    /// Trainable parameter count after this event.
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Header(TraceHeader),
    Event(EventRecord),
    Divergence {
        step: usize,
        loss: f64,
        reason: String,
    },
    End {
        steps_completed: usize,
        event_count: usize,
        final_ranks: BTreeMap<String, usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
        }
    }

    pub fn events(&self) -> impl Iterator<Item = &AllocationEvent> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Event(e) => Some(&e.event),
            _ => None,
        })
    }

    pub fn is_closed(&self) -> bool {
        matches!(self.records.last(), Some(TraceRecord::End { .. }))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = TraceRecord::Header(self.header.clone());
        out.push_str(&serde_json::to_string(&header).expect("header serializes"));
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Parses a trace; any malformed, misplaced or missing record is a replay
    /// error naming its 1-based line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut header = None;
        let mut records = Vec::new();
        let mut last_line = 0;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            last_line = lineno;
            if line.trim().is_empty() {
                return Err(Error::Replay {
                    line: lineno,
                    message: "blank line".into(),
                });
            }
            let rec: TraceRecord = serde_json::from_str(line).map_err(|e| Error::Replay {
                line: lineno,
                message: format!("malformed record: {e}"),
            })?;
            match (&header, rec) {
                (None, TraceRecord::Header(h)) => {
                    if h.format_version != TRACE_FORMAT_VERSION {
                        return Err(Error::Replay {
                            line: lineno,
                            message: format!("unsupported trace format {}", h.format_version),
                        });
                    }
                    header = Some(h);
                }
                (None, _) => {
                    return Err(Error::Replay {
                        line: lineno,
                        message: "first record must be the header".into(),
                    })
                }
                (Some(_), TraceRecord::Header(_)) => {
                    return Err(Error::Replay {
                        line: lineno,
                        message: "duplicate header".into(),
                    })
                }
                (Some(_), rec) => {
                    if matches!(records.last(), Some(TraceRecord::End { .. })) {
                        return Err(Error::Replay {
                            line: lineno,
                            message: "record after end of trace".into(),
                        });
                    }
                    records.push(rec);
                }
            }
        }
        let header = header.ok_or(Error::Replay {
            line: 1,
            message: "empty trace".into(),
        })?;
        let trace = Trace { header, records };
        if !trace.is_closed() {
            return Err(Error::Replay {
                line: last_line + 1,
                message: "truncated trace: missing end record".into(),
            });
        }
        Ok(trace)
    }

    /// Rank of each adapter after every step that has events.
    pub fn heatmap(&self) -> Result<Heatmap> {
        let mut ranks: BTreeMap<&str, usize> =
            self.header.adapters.iter().map(|a| (a.id.as_str(), a.r_init)).collect();
        let limits: BTreeMap<&str, usize> = self.header.adapters.iter().map(|a| (a.id.as_str(), a.r_max)).collect();
        let mut order: Vec<&TraceAdapter> = self.header.adapters.iter().collect();
        order.sort_by_key(|a| (a.depth, a.id.clone()));

        let snapshot = |ranks: &BTreeMap<&str, usize>| order.iter().map(|a| ranks[a.id.as_str()]).collect::<Vec<_>>();
        let mut columns = vec![(None, snapshot(&ranks))];
        let mut current_step: Option<usize> = None;
        for (i, rec) in self.records.iter().enumerate() {
            let lineno = i + 2;
            let TraceRecord::Event(EventRecord { event, .. }) = rec else {
                continue;
            };
            if let Some(s) = current_step {
                if event.step < s {
                    return Err(Error::Replay {
                        line: lineno,
                        message: format!("event step {} precedes step {s}", event.step),
                    });
                }
                if event.step != s {
                    columns.push((Some(s), snapshot(&ranks)));
                }
            }
            current_step = Some(event.step);
            let Some(rank) = ranks.get_mut(event.adapter_id.as_str()) else {
                return Err(Error::Replay {
                    line: lineno,
                    message: format!("unknown adapter {}", event.adapter_id),
                });
            };
            if *rank != event.rank_before {
                return Err(Error::Replay {
                    line: lineno,
                    message: format!(
                        "adapter {} is at rank {} but event starts from {}",
                        event.adapter_id, rank, event.rank_before
                    ),
                });
            }
            let expected = match event.action {
                Action::Prune => rank.checked_sub(1),
                Action::Expand => Some(*rank + 1),
            };
            if expected != Some(event.rank_after) {
                return Err(Error::Replay {
                    line: lineno,
                    message: format!(
                        "{:?} from {} cannot end at {}",
                        event.action, event.rank_before, event.rank_after
                    ),
                });
            }
            let limit = limits[event.adapter_id.as_str()];
            if event.rank_after < 1 || event.rank_after > limit {
                return Err(Error::Replay {
                    line: lineno,
                    message: format!("rank {} outside [1, {limit}]", event.rank_after),
                });
            }
            *rank = event.rank_after;
        }
        if let Some(s) = current_step {
            columns.push((Some(s), snapshot(&ranks)));
        }
        Ok(Heatmap {
            adapter_ids: order.iter().map(|a| a.id.clone()).collect(),
            steps: columns.iter().map(|c| c.0).collect(),
            cells: (0..order.len())
                .map(|row| columns.iter().map(|c| c.1[row]).collect())
                .collect(),
        })
    }

    /// Checks every trace invariant the allocator guarantees.
    pub fn verify(&self) -> Result<VerifyReport> {
        let heatmap = self.heatmap()?;
        let schedule = self.header.schedule;
        let mode = self.header.mode;
        let mut per_step: BTreeMap<usize, (Vec<&str>, Vec<&str>, usize)> = BTreeMap::new();
        let mut event_count = 0;
        for (i, rec) in self.records.iter().enumerate() {
            let lineno = i + 2;
            match rec {
                TraceRecord::Event(EventRecord { event, .. }) => {
                    event_count += 1;
                    if !schedule.is_allocation_step(event.step) {
                        return Err(Error::Replay {
                            line: lineno,
                            message: format!("step {} is not an allocation step", event.step),
                        });
                    }
                    let entry = per_step.entry(event.step).or_insert((Vec::new(), Vec::new(), lineno));
                    match event.action {
                        Action::Prune => entry.0.push(&event.adapter_id),
                        Action::Expand => entry.1.push(&event.adapter_id),
                    }
                    let allowed = !matches!(
                        (mode, event.action),
                        (AllocatorMode::PruneOnly, Action::Expand) | (AllocatorMode::ExpandOnly, Action::Prune)
                    );
                    if !allowed {
                        return Err(Error::Replay {
                            line: lineno,
                            message: format!("{:?} event in {:?} mode", event.action, mode),
                        });
                    }
                }
                TraceRecord::End {
                    event_count: declared,
                    final_ranks,
                    ..
                } => {
                    if *declared != event_count {
                        return Err(Error::Replay {
                            line: lineno,
                            message: format!("end record declares {declared} events, found {event_count}"),
                        });
                    }
                    let replayed = heatmap.final_ranks();
                    if *final_ranks != replayed {
                        return Err(Error::Replay {
                            line: lineno,
                            message: format!("end ranks {final_ranks:?} differ from replay {replayed:?}"),
                        });
                    }
                }
                _ => {}
            }
        }
        for (step, (prunes, expands, lineno)) in &per_step {
            let b = schedule.budget(*step);
            if prunes.len() > b || expands.len() > b {
                return Err(Error::Replay {
                    line: *lineno,
                    message: format!(
                        "step {step}: {} prunes / {} expands exceed budget {b}",
                        prunes.len(),
                        expands.len()
                    ),
                });
            }
            if mode == AllocatorMode::Bidirectional && prunes.len() != expands.len() {
                return Err(Error::Replay {
                    line: *lineno,
                    message: format!("step {step}: total rank not conserved"),
                });
            }
            let mut all: Vec<&str> = prunes.iter().chain(expands).copied().collect();
            all.sort();
            if all.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Replay {
                    line: *lineno,
                    message: format!("step {step}: an adapter was touched twice"),
                });
            }
        }
        Ok(VerifyReport {
            event_count,
            allocation_steps: per_step.len(),
            final_ranks: heatmap.final_ranks(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub event_count: usize,
    pub allocation_steps: usize,
    pub final_ranks: BTreeMap<String, usize>,
}

/// Rank per adapter (rows, by depth) after each event step (columns). The
/// first column, labelled `init`, holds the initial ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub adapter_ids: Vec<String>,
    pub steps: Vec<Option<usize>>,
    pub cells: Vec<Vec<usize>>,
}

impl Heatmap {
    pub fn final_ranks(&self) -> BTreeMap<String, usize> {
        self.adapter_ids
            .iter()
            .zip(&self.cells)
            .map(|(id, row)| (id.clone(), *row.last().expect("at least the init column")))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("adapter");
        for s in &self.steps {
            match s {
                None => out.push_str(",init"),
                Some(s) => write!(out, ",{s}").unwrap(),
            }
        }
        out.push('\n');
        for (id, row) in self.adapter_ids.iter().zip(&self.cells) {
            out.push_str(id);
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}
