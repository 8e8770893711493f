//! Evaluation reports, run reports and transcripts.

use cspl_core::engine::TranscriptEvent;
use cspl_core::{ApResult, RunReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalLine {
    Class { class: String, ap: Option<f64> },
    Map { map: f64 },
}

/// One `{"class":..,"ap":..}` line per class, then `{"map":..}`. Classes
/// without ground truth have `"ap":null`.
pub fn eval_report_to_string(result: &ApResult) -> String {
    let mut lines: Vec<EvalLine> = result
        .per_class
        .iter()
        .map(|(class, ap)| EvalLine::Class {
            class: class.clone(),
            ap: *ap,
        })
        .collect();
    lines.push(EvalLine::Map { map: result.mean_ap });
    lines
        .iter()
        .map(|l| serde_json::to_string(l).expect("report line serialises") + "\n")
        .collect()
}

pub fn run_report_to_string(report: &RunReport) -> String {
    serde_json::to_string_pretty(report).expect("run report serialises") + "\n"
}

pub fn transcript_to_string(events: &[TranscriptEvent]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("event serialises") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undefined_classes_are_null() {
        let r = ApResult {
            per_class: vec![("car".into(), Some(1.0)), ("bus".into(), None)],
            mean_ap: 1.0,
        };
        assert_eq!(
            eval_report_to_string(&r),
            "{\"class\":\"car\",\"ap\":1.0}\n{\"class\":\"bus\",\"ap\":null}\n{\"map\":1.0}\n"
        );
    }
}
