use std::fmt;

use serde::{Deserialize, Serialize};

use super::ChatResponse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Student,
    Teacher,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Student => "student",
            ModelRole::Teacher => "teacher",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenCount {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    fn plus(self, other: TokenCount) -> TokenCount {
        TokenCount {
            prompt_tokens: self.prompt_tokens + other.prompt_tokens,
            completion_tokens: self.completion_tokens + other.completion_tokens,
        }
    }
}

/// Token usage per role across a run. Only ever grows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub student: TokenCount,
    pub teacher: TokenCount,
}

impl TokenLedger {
    pub fn get(&self, role: ModelRole) -> TokenCount {
        match role {
            ModelRole::Student => self.student,
            ModelRole::Teacher => self.teacher,
        }
    }

    /// Returns this ledger plus the response's usage under `role`.
    pub fn accumulate(&self, response: &ChatResponse, role: ModelRole) -> TokenLedger {
        let add = TokenCount {
            prompt_tokens: response.usage.prompt_tokens,
            completion_tokens: response.usage.completion_tokens,
        };
        let mut next = *self;
        match role {
            ModelRole::Student => next.student = next.student.plus(add),
            ModelRole::Teacher => next.teacher = next.teacher.plus(add),
        }
        next
    }

    pub fn record(&mut self, response: &ChatResponse, role: ModelRole) {
        *self = self.accumulate(response, role);
    }

    pub fn merge(&self, other: &TokenLedger) -> TokenLedger {
        TokenLedger {
            student: self.student.plus(other.student),
            teacher: self.teacher.plus(other.teacher),
        }
    }

    pub fn total(&self) -> u64 {
        self.student.total() + self.teacher.total()
    }
}
