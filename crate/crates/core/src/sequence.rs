//! Closed-form predicted saddle sequences.

use serde::{Deserialize, Serialize};

use crate::engine::AgfTrace;

/// One predicted saddle: k features learned, loss level ℓ^(k), jump time τ^(k)
/// (exact or a lower bound), and a model-specific feature label/value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedStep {
    pub k: usize,
    pub loss: f64,
    pub tau: Option<f64>,
    pub tau_lower_bound: Option<f64>,
    pub feature: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedSequence {
    pub model: String,
    pub steps: Vec<PredictedStep>,
    /// Caveats such as ambiguous ordering.
    pub flags: Vec<String>,
}

impl PredictedSequence {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// τ^(k) for k ≥ 1 (exact value, else lower bound).
    pub fn jump_times(&self) -> Vec<f64> {
        self.steps.iter().skip(1).map(|s| s.tau.or(s.tau_lower_bound).unwrap_or(f64::NAN)).collect()
    }
}

impl PredictedSequence {
    /// Plateaus and jump times of an AGF run as a prediction; the feature label
    /// lists the neurons activated at each step.
    pub fn from_trace(trace: &AgfTrace, model: &str) -> Self {
        let mut steps = vec![PredictedStep {
            k: 0,
            loss: trace.loss0,
            tau: Some(0.0),
            tau_lower_bound: None,
            feature: "none".into(),
            value: 0.0,
        }];
        for (i, ev) in trace.activations().enumerate() {
            let group: Vec<String> = ev.group.iter().map(|g| g.to_string()).collect();
            steps.push(PredictedStep {
                k: i + 1,
                loss: ev.loss_after,
                tau: Some(ev.tau),
                tau_lower_bound: None,
                feature: format!("neurons={}", group.join("+")),
                value: ev.neuron as f64,
            });
        }
        Self { model: model.into(), steps, flags: vec![] }
    }
}
