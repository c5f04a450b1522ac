//! Multi-symbol authentication sessions.
//!
//! A sequence of `length` symbols is accepted only when every symbol is. Each
//! response hands out a fresh single-use token for the next symbol; tokens
//! expire after the configured time to live.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceStatus {
    /// 1-based index of the symbol just decided.
    pub position: usize,
    pub length: usize,
    pub accepted_so_far: usize,
    /// Whether the sequence has reached a final decision.
    pub complete: bool,
    /// Final decision; `None` while symbols are outstanding.
    pub overall_accepted: Option<bool>,
    /// Token for the next symbol; absent once complete.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub next_token: Option<String>,
}

#[derive(Debug, Clone)]
struct Session {
    participant: String,
    length: usize,
    accepted: usize,
    issued: Instant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceError {
    /// Token unknown, already used, expired or bound to another participant.
    Expired,
    InvalidLength,
}

#[derive(Debug)]
pub struct Sequences {
    ttl: Duration,
    sessions: HashMap<String, Session>,
}

pub const MAX_SEQUENCE_LENGTH: usize = 16;

impl Sequences {
    pub fn new(ttl: Duration) -> Self {
        Sequences { ttl, sessions: HashMap::new() }
    }

    fn issue(&mut self, s: Session) -> String {
        let token = uuid::Uuid::new_v4().simple().to_string();
        self.sessions.insert(token.clone(), s);
        token
    }

    fn prune(&mut self, now: Instant) {
        let ttl = self.ttl;
        self.sessions.retain(|_, s| now.duration_since(s.issued) <= ttl);
    }

    /// Records the decision for the first symbol of a new sequence.
    pub fn start(&mut self, participant: &str, length: usize, accepted: bool, now: Instant) -> Result<SequenceStatus, SequenceError> {
        if length == 0 || length > MAX_SEQUENCE_LENGTH {
            return Err(SequenceError::InvalidLength);
        }
        self.prune(now);
        let session = Session { participant: participant.to_string(), length, accepted: 0, issued: now };
        Ok(self.record(session, accepted, now))
    }

    /// Consumes `token` and records the decision for the next symbol.
    pub fn advance(&mut self, participant: &str, token: &str, accepted: bool, now: Instant) -> Result<SequenceStatus, SequenceError> {
        self.prune(now);
        match self.sessions.remove(token) {
            Some(s) if s.participant == participant => Ok(self.record(s, accepted, now)),
            Some(s) => {
                // A token presented for the wrong participant stays valid for
                // its owner.
                self.sessions.insert(token.to_string(), s);
                Err(SequenceError::Expired)
            }
            None => Err(SequenceError::Expired),
        }
    }

    /// Checks that a token could be advanced without consuming it.
    pub fn peek(&mut self, participant: &str, token: &str, now: Instant) -> Result<(), SequenceError> {
        self.prune(now);
        match self.sessions.get(token) {
            Some(s) if s.participant == participant => Ok(()),
            _ => Err(SequenceError::Expired),
        }
    }

    fn record(&mut self, mut s: Session, accepted: bool, now: Instant) -> SequenceStatus {
        let position = s.accepted + 1;
        if !accepted {
            return SequenceStatus {
                position,
                length: s.length,
                accepted_so_far: s.accepted,
                complete: true,
                overall_accepted: Some(false),
                next_token: None,
            };
        }
        s.accepted += 1;
        if s.accepted == s.length {
            return SequenceStatus {
                position,
                length: s.length,
                accepted_so_far: s.accepted,
                complete: true,
                overall_accepted: Some(true),
                next_token: None,
            };
        }
        let (length, accepted_so_far) = (s.length, s.accepted);
        s.issued = now;
        let token = self.issue(s);
        SequenceStatus { position, length, accepted_so_far, complete: false, overall_accepted: None, next_token: Some(token) }
    }

    pub fn active(&self) -> usize {
        self.sessions.len()
    }
}
