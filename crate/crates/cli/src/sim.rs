//! Oracle voters that drive a running annotation server over HTTP.
//!
//! Every voter polls and votes from its own task, so votes on one pair arrive
//! concurrently and some are rejected as stale; a voter simply refetches.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use uranker::annotation::{Choice, SessionStatus};

use crate::error::{CliError, CliResult};
use crate::server::{CreateSession, Created, PairResponse, ResultResponse, VoteRequest};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSpec {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    #[serde(default)]
    pub server: Option<String>,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub images: Vec<String>,
    pub voters: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tiebreak: Option<String>,
    /// The oracle's total order, best first. Defaults to the session's image
    /// list, which for a dataset group is its ground-truth ranking.
    #[serde(default)]
    pub order: Vec<String>,
    /// Voters that always pick the worse image.
    #[serde(default)]
    pub contrarian: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub session_id: String,
    pub ranking: Vec<String>,
    pub comparisons: usize,
    pub votes: usize,
    pub rejected_votes: usize,
    pub matches_oracle: bool,
}

const POLL: Duration = Duration::from_millis(2);
const MAX_ROUNDS: usize = 100_000;

async fn check<T: for<'de> Deserialize<'de>>(resp: reqwest::Response) -> CliResult<T> {
    let status = resp.status();
    if !status.is_success() {
        return Err(CliError::Server {
            status: status.as_u16(),
            body: resp.text().await.unwrap_or_default(),
        });
    }
    Ok(resp.json().await?)
}

#[derive(Default)]
struct VoterStats {
    votes: usize,
    rejected: usize,
}

async fn run_voter(
    client: reqwest::Client,
    base: String,
    session: String,
    voter: String,
    rank: HashMap<String, usize>,
    contrarian: bool,
) -> CliResult<VoterStats> {
    let mut stats = VoterStats::default();
    for _ in 0..MAX_ROUNDS {
        let url = format!("{base}/sessions/{session}/pair");
        let pair: PairResponse = check(client.get(&url).query(&[("voter_id", &voter)]).send().await?).await?;
        if pair.status == SessionStatus::Complete {
            return Ok(stats);
        }
        if pair.my_vote_submitted {
            tokio::time::sleep(POLL).await;
            continue;
        }
        let (Some(left), Some(right)) = (pair.left, pair.right) else {
            continue;
        };
        let pos = |id: &str| rank.get(id).copied().ok_or_else(|| CliError::Oracle(format!("{id:?} is not in the oracle order")));
        let left_better = pos(&left)? < pos(&right)?;
        let choice = if left_better != contrarian { Choice::Left } else { Choice::Right };
        let body = VoteRequest {
            voter_id: voter.clone(),
            choice,
            left: Some(left),
            right: Some(right),
        };
        let resp = client.post(format!("{base}/sessions/{session}/votes")).json(&body).send().await?;
        match resp.status().as_u16() {
            200 => stats.votes += 1,
            // The pair moved on or the session finished between fetch and vote.
            409 => stats.rejected += 1,
            status => {
                return Err(CliError::Server {
                    status,
                    body: resp.text().await.unwrap_or_default(),
                })
            }
        }
    }
    Err(CliError::Oracle(format!("voter {voter} gave up after {MAX_ROUNDS} rounds")))
}

/// Creates a session from `spec`, runs every voter to completion and compares
/// the result with the oracle order.
pub async fn simulate(base: &str, spec: &SimSpec) -> CliResult<SimReport> {
    let base = base.trim_end_matches('/').to_string();
    let client = reqwest::Client::new();
    let create = CreateSession {
        group: spec.group.clone(),
        images: spec.images.clone(),
        voters: spec.voters.clone(),
        seed: spec.seed,
        tiebreak: spec.tiebreak.clone(),
        session_id: None,
    };
    let created: Created = check(client.post(format!("{base}/sessions")).json(&create).send().await?).await?;
    let order = if spec.order.is_empty() { created.images.clone() } else { spec.order.clone() };
    let rank: HashMap<String, usize> = order.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();

    let tasks: Vec<_> = spec
        .voters
        .iter()
        .map(|v| {
            tokio::spawn(run_voter(
                client.clone(),
                base.clone(),
                created.session_id.clone(),
                v.clone(),
                rank.clone(),
                spec.contrarian.contains(v),
            ))
        })
        .collect();
    let (mut votes, mut rejected) = (0, 0);
    for t in tasks {
        let s = t.await.map_err(|e| CliError::Oracle(format!("voter task failed: {e}")))??;
        votes += s.votes;
        rejected += s.rejected;
    }

    let url = format!("{base}/sessions/{}/result", created.session_id);
    let result: ResultResponse = check(client.get(url).send().await?).await?;
    Ok(SimReport {
        matches_oracle: result.ranking == order,
        session_id: result.session_id,
        ranking: result.ranking,
        comparisons: result.comparisons,
        votes,
        rejected_votes: rejected,
    })
}
