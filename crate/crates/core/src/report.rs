//! Pass/fail reports for assumption verification.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn push(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.items.push(CheckItem { name: name.to_string(), passed, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckItem> {
        self.items.iter().filter(|i| !i.passed)
    }
}

/// Sampling effort for the verification routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub lipschitz_samples: usize,
    /// Unit vectors θ used for the ergodic-bias certification.
    pub bias_directions: usize,
    pub max_window: usize,
    pub max_offset: usize,
    pub sphere_points: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            lipschitz_samples: 2000,
            bias_directions: 100,
            max_window: 50,
            max_offset: 20,
            sphere_points: 256,
            seed: 0x5eed,
        }
    }
}
