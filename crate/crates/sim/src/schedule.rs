//! Fault schedule files: one `victim,at_step` per line, `#` starts a comment.

use std::path::Path;

use legio_core::simnet::{FaultSchedule, ProcessId, SimError, Step};

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Invalid(#[from] SimError),
    #[error("cannot read schedule: {0}")]
    Io(String),
}

pub fn parse_schedule(text: &str) -> Result<FaultSchedule, ScheduleError> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| ScheduleError::Malformed { line: idx + 1, msg: msg.to_string() };
        let (v, s) = line.split_once(',').ok_or_else(|| bad("expected `victim,at_step`"))?;
        let victim: u32 = v.trim().parse().map_err(|_| bad("victim is not a process index"))?;
        let step: Step = s.trim().parse().map_err(|_| bad("step is not a number"))?;
        entries.push((ProcessId(victim), step));
    }
    Ok(FaultSchedule::new(entries)?)
}

/// Reads and checks a schedule for a world of `procs` processes.
pub fn parse_fault_schedule(path: &Path, procs: usize) -> Result<FaultSchedule, ScheduleError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScheduleError::Io(format!("{}: {e}", path.display())))?;
    let schedule = parse_schedule(&text)?;
    schedule.validate(procs)?;
    Ok(schedule)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_comments() {
        let s = parse_schedule("# header\n2,5\n\n 7 , 10 # late\n").unwrap();
        assert_eq!(s.entries(), [(ProcessId(2), 5), (ProcessId(7), 10)]);
        assert!(parse_schedule("# nothing\n\n").unwrap().is_empty());
    }

    #[test]
    fn reports_line_numbers() {
        let e = parse_schedule("1,2\nx,3\n").unwrap_err();
        assert_eq!(e, ScheduleError::Malformed { line: 2, msg: "victim is not a process index".into() });
        assert!(matches!(parse_schedule("1\n"), Err(ScheduleError::Malformed { line: 1, .. })));
        assert!(matches!(parse_schedule("1,-3\n"), Err(ScheduleError::Malformed { line: 1, .. })));
    }

    #[test]
    fn rejects_duplicates() {
        assert_eq!(
            parse_schedule("2,5\n2,9\n").unwrap_err(),
            ScheduleError::Invalid(SimError::DuplicateVictim(ProcessId(2)))
        );
    }
}
