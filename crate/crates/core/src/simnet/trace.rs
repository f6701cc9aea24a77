use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use super::{ProcessId, Step, Tag};

/// One trace line: `step,kind,src,dst,tag,detail`. Absent fields print as `-`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub step: Step,
    pub kind: &'static str,
    pub src: Option<ProcessId>,
    pub dst: Option<ProcessId>,
    pub tag: Option<Tag>,
    pub detail: String,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},", self.step, self.kind)?;
        match self.src {
            Some(p) => write!(f, "{p},")?,
            None => f.write_str("-,")?,
        }
        match self.dst {
            Some(p) => write!(f, "{p},")?,
            None => f.write_str("-,")?,
        }
        match self.tag {
            Some(t) => write!(f, "{t:#x},")?,
            None => f.write_str("-,")?,
        }
        f.write_str(&self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    events: Vec<Event>,
}

impl Trace {
    pub(crate) fn push(&mut self, event: Event) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    /// Processes that logged at least one event whose kind is in `kinds`.
    pub fn actors(&self, kinds: &[&str]) -> Vec<ProcessId> {
        let mut out: Vec<ProcessId> = self
            .events
            .iter()
            .filter(|e| kinds.contains(&e.kind))
            .filter_map(|e| e.src)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// The line-oriented export format, one event per line.
    pub fn to_lines(&self) -> String {
        use fmt::Write;
        let mut out = String::new();
        for e in &self.events {
            let _ = writeln!(out, "{e}");
        }
        out
    }
}
