//! Majority-vote bubble sort over adjacent image pairs.
//!
//! The arrangement is read left to right, best first. Each comparison
//! collects one vote per roster member; the majority-preferred image ends up
//! on the left of the pair. Passes shrink by one position after each pass,
//! since the worst remaining image has sunk to the end. The session completes
//! after a pass without swaps; when every shrinking pass swapped, one full
//! confirming pass is run, so a session never takes more than
//! `K(K-1)/2 + (K-1)` comparisons with consistent voters.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("a session needs at least 2 images, got {0}")]
    TooFewImages(usize),
    #[error("duplicate image id {0:?}")]
    DuplicateImage(String),
    #[error("the voter roster is empty")]
    NoVoters,
    #[error("duplicate voter id {0:?}")]
    DuplicateVoter(String),
    #[error("{0} voters can tie; designate a tiebreak voter from the roster")]
    MissingTiebreak(usize),
    #[error("tiebreak voter {0:?} is not in the roster")]
    TiebreakNotInRoster(String),
    #[error("voter {0:?} is not in the roster")]
    UnknownVoter(String),
    #[error("voter {0:?} already voted on the current pair")]
    DuplicateVote(String),
    #[error("stale vote for ({got_left}, {got_right}); the current pair is ({left}, {right})")]
    StalePair {
        left: String,
        right: String,
        got_left: String,
        got_right: String,
    },
    #[error("session is complete")]
    Complete,
    #[error("session is still active")]
    NotReady,
    #[error("no session {0:?}")]
    NotFound(String),
    #[error("replay diverged at decision {index}: {detail}")]
    Replay { index: usize, detail: String },
    #[error("event log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub voter_id: String,
    pub choice: Choice,
    /// The pair the voter saw. When present it must match the current pair.
    #[serde(default)]
    pub pair: Option<(String, String)>,
    #[serde(default)]
    pub timestamp_ms: u64,
}

impl Vote {
    pub fn new(voter_id: impl Into<String>, choice: Choice) -> Self {
        Self {
            voter_id: voter_id.into(),
            choice,
            pair: None,
            timestamp_ms: 0,
        }
    }

    pub fn on_pair(mut self, left: impl Into<String>, right: impl Into<String>) -> Self {
        self.pair = Some((left.into(), right.into()));
        self
    }
}

/// One resolved comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub pass_no: usize,
    pub cursor: usize,
    pub left: String,
    pub right: String,
    pub left_votes: usize,
    pub right_votes: usize,
    pub preferred: Choice,
    pub swapped: bool,
}

/// What a voter needs to see; other voters' choices are never exposed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairView {
    pub left: String,
    pub right: String,
    pub pass_no: usize,
    pub cursor: usize,
    pub voters_remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub images: Vec<String>,
    pub voters: Vec<String>,
    #[serde(default)]
    pub tiebreak: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ComparisonSession {
    id: String,
    spec: SessionSpec,
    arrangement: Vec<String>,
    cursor: usize,
    pass_no: usize,
    votes: BTreeMap<String, Choice>,
    swapped_this_pass: bool,
    status: SessionStatus,
    audit: Vec<Decision>,
}

impl ComparisonSession {
    pub fn create(id: impl Into<String>, spec: SessionSpec) -> Result<Self, SessionError> {
        let k = spec.images.len();
        if k < 2 {
            return Err(SessionError::TooFewImages(k));
        }
        let mut seen = BTreeSet::new();
        for img in &spec.images {
            if !seen.insert(img) {
                return Err(SessionError::DuplicateImage(img.clone()));
            }
        }
        if spec.voters.is_empty() {
            return Err(SessionError::NoVoters);
        }
        let mut roster = BTreeSet::new();
        for v in &spec.voters {
            if !roster.insert(v) {
                return Err(SessionError::DuplicateVoter(v.clone()));
            }
        }
        match &spec.tiebreak {
            Some(t) if !roster.contains(t) => {
                return Err(SessionError::TiebreakNotInRoster(t.clone()))
            }
            None if spec.voters.len() % 2 == 0 => {
                return Err(SessionError::MissingTiebreak(spec.voters.len()))
            }
            _ => {}
        }
        let mut arrangement = spec.images.clone();
        arrangement.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
        Ok(Self {
            id: id.into(),
            spec,
            arrangement,
            cursor: 0,
            pass_no: 0,
            votes: BTreeMap::new(),
            swapped_this_pass: false,
            status: SessionStatus::Active,
            audit: Vec::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn spec(&self) -> &SessionSpec {
        &self.spec
    }

    pub fn arrangement(&self) -> &[String] {
        &self.arrangement
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn is_complete(&self) -> bool {
        self.status == SessionStatus::Complete
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn pass_no(&self) -> usize {
        self.pass_no
    }

    pub fn audit(&self) -> &[Decision] {
        &self.audit
    }

    pub fn comparisons(&self) -> usize {
        self.audit.len()
    }

    pub fn has_voted(&self, voter: &str) -> bool {
        self.votes.contains_key(voter)
    }

    /// Last cursor position of the current pass. Passes past the shrinking
    /// ones cover the whole arrangement.
    fn pass_end(&self) -> usize {
        let last = self.arrangement.len() - 2;
        last.checked_sub(self.pass_no).unwrap_or(last)
    }

    pub fn current_pair(&self) -> Option<(&str, &str)> {
        if self.is_complete() {
            return None;
        }
        Some((&self.arrangement[self.cursor], &self.arrangement[self.cursor + 1]))
    }

    pub fn view(&self) -> Option<PairView> {
        let (l, r) = self.current_pair()?;
        Some(PairView {
            left: l.to_string(),
            right: r.to_string(),
            pass_no: self.pass_no,
            cursor: self.cursor,
            voters_remaining: self.spec.voters.len() - self.votes.len(),
        })
    }

    /// Records a vote and resolves the comparison once every voter has voted.
    /// On error the session is unchanged. Returns the decision if this vote
    /// resolved one.
    pub fn submit_vote(&mut self, vote: &Vote) -> Result<Option<Decision>, SessionError> {
        let (left, right) = self.current_pair().ok_or(SessionError::Complete)?;
        if let Some((l, r)) = &vote.pair {
            if l != left || r != right {
                return Err(SessionError::StalePair {
                    left: left.to_string(),
                    right: right.to_string(),
                    got_left: l.clone(),
                    got_right: r.clone(),
                });
            }
        }
        if !self.spec.voters.contains(&vote.voter_id) {
            return Err(SessionError::UnknownVoter(vote.voter_id.clone()));
        }
        if self.votes.contains_key(&vote.voter_id) {
            return Err(SessionError::DuplicateVote(vote.voter_id.clone()));
        }
        self.votes.insert(vote.voter_id.clone(), vote.choice);
        if self.votes.len() < self.spec.voters.len() {
            return Ok(None);
        }
        Ok(Some(self.resolve()))
    }

    fn majority(&self) -> (usize, usize, Choice) {
        let left = self.votes.values().filter(|&&c| c == Choice::Left).count();
        let right = self.votes.len() - left;
        let preferred = if left > right {
            Choice::Left
        } else if right > left {
            Choice::Right
        } else {
            // Roster validation guarantees a tiebreak voter whenever a tie is possible.
            let t = self.spec.tiebreak.as_ref().expect("tie without tiebreak voter");
            self.votes[t]
        };
        (left, right, preferred)
    }

    fn resolve(&mut self) -> Decision {
        let (left_votes, right_votes, preferred) = self.majority();
        self.votes.clear();
        self.apply(preferred, left_votes, right_votes)
    }

    fn apply(&mut self, preferred: Choice, left_votes: usize, right_votes: usize) -> Decision {
        let c = self.cursor;
        let decision = Decision {
            pass_no: self.pass_no,
            cursor: c,
            left: self.arrangement[c].clone(),
            right: self.arrangement[c + 1].clone(),
            left_votes,
            right_votes,
            preferred,
            swapped: preferred == Choice::Right,
        };
        if decision.swapped {
            self.arrangement.swap(c, c + 1);
            self.swapped_this_pass = true;
        }
        self.audit.push(decision.clone());
        if c == self.pass_end() {
            self.pass_no += 1;
            self.cursor = 0;
            if !self.swapped_this_pass {
                self.status = SessionStatus::Complete;
            }
            self.swapped_this_pass = false;
        } else {
            self.cursor += 1;
        }
        decision
    }

    /// Final arrangement, best first.
    pub fn result(&self) -> Result<Vec<String>, SessionError> {
        if !self.is_complete() {
            return Err(SessionError::NotReady);
        }
        Ok(self.arrangement.clone())
    }

    /// Rebuilds a session from its spec and audit log.
    pub fn replay(
        id: impl Into<String>,
        spec: SessionSpec,
        audit: &[Decision],
    ) -> Result<Self, SessionError> {
        let mut s = Self::create(id, spec)?;
        for (index, d) in audit.iter().enumerate() {
            let Some((l, r)) = s.current_pair() else {
                return Err(SessionError::Replay {
                    index,
                    detail: "session already complete".into(),
                });
            };
            if l != d.left || r != d.right || s.cursor != d.cursor || s.pass_no != d.pass_no {
                return Err(SessionError::Replay {
                    index,
                    detail: format!("expected ({}, {}), found ({l}, {r})", d.left, d.right),
                });
            }
            s.apply(d.preferred, d.left_votes, d.right_votes);
        }
        Ok(s)
    }
}
