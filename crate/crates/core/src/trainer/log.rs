use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Loss sum divided by the number of active terms (0 when none).
    pub loss: f64,
    pub loss_sum: f64,
    pub active: usize,
    /// Triplets (or pairs) handed to the loss.
    pub mined: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub tpr_at_far: f64,
    pub auc: f64,
    pub k: Vec<usize>,
    pub topk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// Records in step order, an eval record after the step it follows.
    pub fn records(&self) -> Vec<LogRecord> {
        let mut out = Vec::with_capacity(self.steps.len() + self.evals.len());
        let mut evals = self.evals.iter().peekable();
        while let Some(e) = evals.next_if(|e| e.step == 0) {
            out.push(LogRecord::Eval(e.clone()));
        }
        for s in &self.steps {
            out.push(LogRecord::Step(s.clone()));
            while let Some(e) = evals.next_if(|e| e.step <= s.step) {
                out.push(LogRecord::Eval(e.clone()));
            }
        }
        out.extend(evals.cloned().map(LogRecord::Eval));
        out
    }

    pub fn to_ndjson(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    pub fn from_ndjson(text: &str) -> Result<Self, serde_json::Error> {
        let mut log = TrainLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                LogRecord::Step(s) => log.steps.push(s),
                LogRecord::Eval(e) => log.evals.push(e),
            }
        }
        Ok(log)
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut c = self.clone();
        for s in &mut c.steps {
            s.wall_ms = 0;
        }
        c
    }

    /// Mean of `loss` over steps `[from, to)` (by position).
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let s = &self.steps[from.min(self.steps.len())..to.min(self.steps.len())];
        s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndjson_round_trip_and_order() {
        let step = |i| StepRecord {
            step: i,
            loss: 0.5,
            loss_sum: 1.0,
            active: 2,
            mined: 3,
            wall_ms: 7,
        };
        let eval = |i| EvalRecord {
            step: i,
            tpr_at_far: 0.1,
            auc: 0.9,
            k: vec![1],
            topk: vec![0.4],
        };
        let log = TrainLog {
            steps: vec![step(1), step(2), step(3)],
            evals: vec![eval(2), eval(3)],
        };
        let text = log.to_ndjson();
        let kinds: Vec<&str> = text
            .lines()
            .map(|l| if l.contains("\"kind\":\"step\"") { "s" } else { "e" })
            .collect();
        assert_eq!(kinds, vec!["s", "s", "e", "s", "e"]);
        assert_eq!(TrainLog::from_ndjson(&text).unwrap(), log);
        assert_eq!(log.without_timing().steps[0].wall_ms, 0);
    }
}
