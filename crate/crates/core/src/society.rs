//! Agents, teams, and team formation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AuthorId, AuthorRecord, PaperId};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TeamId(pub u64);

impl fmt::Display for TeamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SocietyError {
    #[error("team-size rate must be positive, got {0}")]
    InvalidRate(f64),
    #[error("team size must be at least 1")]
    InvalidSize,
    #[error("agent {0} already leads the maximum number of teams")]
    LeaderAtCapacity(AuthorId),
    #[error("unknown agent {0}")]
    UnknownAgent(AuthorId),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Accepted,
    Rejected,
    /// Retry budget exhausted on a failing stage.
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    CollaboratorSelection,
    TopicDiscussion,
    IdeaGeneration,
    NoveltyAssessment,
    AbstractGeneration,
    PeerReview,
    Done(Outcome),
}

impl Stage {
    /// The six working stages in order.
    pub const PIPELINE: [Stage; 6] = [
        Stage::CollaboratorSelection,
        Stage::TopicDiscussion,
        Stage::IdeaGeneration,
        Stage::NoveltyAssessment,
        Stage::AbstractGeneration,
        Stage::PeerReview,
    ];

    /// Successor of a working stage. `PeerReview` and `Done` have none; the
    /// review outcome decides the terminal state.
    pub fn next(self) -> Option<Stage> {
        let i = Stage::PIPELINE.iter().position(|s| *s == self)?;
        Stage::PIPELINE.get(i + 1).copied()
    }

    pub fn is_done(self) -> bool {
        matches!(self, Stage::Done(_))
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::CollaboratorSelection => "CollaboratorSelection",
            Stage::TopicDiscussion => "TopicDiscussion",
            Stage::IdeaGeneration => "IdeaGeneration",
            Stage::NoveltyAssessment => "NoveltyAssessment",
            Stage::AbstractGeneration => "AbstractGeneration",
            Stage::PeerReview => "PeerReview",
            Stage::Done(_) => "Done",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Draft {
    pub topic: Option<String>,
    pub idea: Option<String>,
    pub novelty: Option<String>,
    pub title: Option<String>,
    #[serde(rename = "abstract")]
    pub abstract_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Team {
    pub team_id: TeamId,
    pub leader_id: AuthorId,
    /// Leader first.
    pub member_ids: Vec<AuthorId>,
    /// Size drawn at formation; the selection stage tries to fill it.
    pub target_size: u32,
    pub stage: Stage,
    pub formed_epoch: u32,
    pub draft: Draft,
    /// Accumulated idea-generation references.
    pub chosen_refs: Vec<PaperId>,
    /// Total delayed epochs so far.
    pub delays: u32,
    /// Consecutive failures of the current stage.
    pub stage_failures: u32,
    pub decided_epoch: Option<u32>,
}

impl Team {
    pub fn new(team_id: TeamId, leader_id: AuthorId, target_size: u32, formed_epoch: u32) -> Self {
        Team {
            team_id,
            leader_id,
            member_ids: vec![leader_id],
            target_size,
            stage: Stage::CollaboratorSelection,
            formed_epoch,
            draft: Draft::default(),
            chosen_refs: Vec::new(),
            delays: 0,
            stage_failures: 0,
            decided_epoch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub profile: AuthorRecord,
    pub memory: VecDeque<String>,
    pub led_team_ids: BTreeSet<TeamId>,
    pub member_team_ids: BTreeSet<TeamId>,
    /// Root of this agent's random streams.
    pub rng_seed: u64,
}

impl AgentState {
    pub fn new(profile: AuthorRecord, run_seed: u64) -> Self {
        let rng_seed = rng::derive(run_seed, &[rng::purpose::AGENT, u64::from(profile.author_id.0)]);
        AgentState { profile, memory: VecDeque::new(), led_team_ids: BTreeSet::new(), member_team_ids: BTreeSet::new(), rng_seed }
    }

    pub fn id(&self) -> AuthorId {
        self.profile.author_id
    }
}

/// Appends `entry`, evicting the oldest entries beyond `cap`.
pub fn push_memory(agent: &mut AgentState, entry: impl Into<String>, cap: usize) {
    agent.memory.push_back(entry.into());
    while agent.memory.len() > cap {
        agent.memory.pop_front();
    }
}

/// `1 + floor(X)` with `X ~ Exponential(rate)`; also returns the raw draw.
pub fn sample_team_size_with_draw(rng: &mut impl Rng, rate: f64) -> Result<(u32, f64), SocietyError> {
    if !rate.is_finite() || rate <= 0.0 {
        return Err(SocietyError::InvalidRate(rate));
    }
    let exp = Exp::new(rate).map_err(|_| SocietyError::InvalidRate(rate))?;
    let x: f64 = exp.sample(rng);
    Ok((size_from_draw(x), x))
}

pub fn sample_team_size(rng: &mut impl Rng, rate: f64) -> Result<u32, SocietyError> {
    sample_team_size_with_draw(rng, rate).map(|(s, _)| s)
}

pub fn size_from_draw(x: f64) -> u32 {
    1 + x.floor().min(f64::from(u32::MAX - 1)) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub coauthor_weight: f64,
    pub topic_weight: f64,
    /// Random candidates drawn in addition to the leader's co-authors.
    pub pool_size: usize,
    pub temperature: f64,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy { coauthor_weight: 0.6, topic_weight: 0.4, pool_size: 64, temperature: 1.0 }
    }
}

pub fn topic_jaccard(a: &[String], b: &[String]) -> f64 {
    let a: BTreeSet<String> = a.iter().map(|s| s.to_lowercase()).collect();
    let b: BTreeSet<String> = b.iter().map(|s| s.to_lowercase()).collect();
    let union = a.union(&b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Society {
    pub agents: Vec<AgentState>,
    pub teams: BTreeMap<TeamId, Team>,
    pub next_team_id: u64,
}

impl Society {
    /// Agents take the ids of their profiles, which must be `0..n`.
    pub fn new(profiles: Vec<AuthorRecord>, run_seed: u64) -> Result<Self, SocietyError> {
        for (i, p) in profiles.iter().enumerate() {
            if p.author_id.0 as usize != i {
                return Err(SocietyError::Invariant(format!("agent ids must be dense, found {} at {i}", p.author_id)));
            }
        }
        Ok(Society {
            agents: profiles.into_iter().map(|p| AgentState::new(p, run_seed)).collect(),
            teams: BTreeMap::new(),
            next_team_id: 0,
        })
    }

    pub fn agent(&self, id: AuthorId) -> Option<&AgentState> {
        self.agents.get(id.0 as usize)
    }

    pub fn agent_mut(&mut self, id: AuthorId) -> Option<&mut AgentState> {
        self.agents.get_mut(id.0 as usize)
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// Registers a new team led by `leader` in `CollaboratorSelection`.
    pub fn form_team(&mut self, leader: AuthorId, target_size: u32, epoch: u32, max_led: usize) -> Result<TeamId, SocietyError> {
        if target_size == 0 {
            return Err(SocietyError::InvalidSize);
        }
        let team_id = TeamId(self.next_team_id);
        let agent = self.agent_mut(leader).ok_or(SocietyError::UnknownAgent(leader))?;
        if agent.led_team_ids.len() >= max_led {
            return Err(SocietyError::LeaderAtCapacity(leader));
        }
        agent.led_team_ids.insert(team_id);
        agent.member_team_ids.insert(team_id);
        self.next_team_id += 1;
        self.teams.insert(team_id, Team::new(team_id, leader, target_size, epoch));
        Ok(team_id)
    }

    /// Adds members to a team and records the membership on each agent.
    pub fn add_members(&mut self, team_id: TeamId, members: &[AuthorId]) -> Result<(), SocietyError> {
        for &m in members {
            if self.agent(m).is_none() {
                return Err(SocietyError::UnknownAgent(m));
            }
        }
        let team = self.teams.get_mut(&team_id).ok_or_else(|| SocietyError::Invariant(format!("unknown team {team_id}")))?;
        for &m in members {
            if !team.member_ids.contains(&m) {
                team.member_ids.push(m);
            }
        }
        for &m in members {
            self.agents[m.0 as usize].member_team_ids.insert(team_id);
        }
        Ok(())
    }

    /// Frees the leader's slot once a team reaches a terminal stage.
    pub fn release_leadership(&mut self, team_id: TeamId) {
        if let Some(leader) = self.teams.get(&team_id).map(|t| t.leader_id) {
            if let Some(a) = self.agent_mut(leader) {
                a.led_team_ids.remove(&team_id);
            }
        }
    }

    /// Makes `a` and `b` co-authors of each other.
    pub fn link_coauthors(&mut self, a: AuthorId, b: AuthorId) {
        if a == b {
            return;
        }
        if let Some(x) = self.agent_mut(a) {
            x.profile.coauthor_ids.insert(b);
        }
        if let Some(y) = self.agent_mut(b) {
            y.profile.coauthor_ids.insert(a);
        }
    }

    pub fn check_invariants(&self, max_led: usize, memory_cap: usize) -> Result<(), SocietyError> {
        for a in &self.agents {
            if a.led_team_ids.len() > max_led {
                return Err(SocietyError::Invariant(format!("{} leads {} teams", a.id(), a.led_team_ids.len())));
            }
            if a.memory.len() > memory_cap {
                return Err(SocietyError::Invariant(format!("{} holds {} memories", a.id(), a.memory.len())));
            }
            if a.profile.coauthor_ids.contains(&a.id()) {
                return Err(SocietyError::Invariant(format!("{} is its own co-author", a.id())));
            }
            for t in a.member_team_ids.iter().chain(&a.led_team_ids) {
                let team =
                    self.teams.get(t).ok_or_else(|| SocietyError::Invariant(format!("{} refers to missing {t}", a.id())))?;
                if !team.member_ids.contains(&a.id()) {
                    return Err(SocietyError::Invariant(format!("{t} does not contain {}", a.id())));
                }
            }
        }
        for team in self.teams.values() {
            let unique: BTreeSet<_> = team.member_ids.iter().collect();
            if unique.len() != team.member_ids.len() || team.member_ids.first() != Some(&team.leader_id) {
                return Err(SocietyError::Invariant(format!("{} has a malformed member list", team.team_id)));
            }
        }
        Ok(())
    }
}

/// Picks `size - 1` collaborators for `leader`.
///
/// The candidate pool is the leader's co-authors plus up to
/// `policy.pool_size` random other agents. Each candidate scores
/// `coauthor_weight * [is co-author] + topic_weight * jaccard(topics)` and
/// members are drawn without replacement with probability proportional to
/// `exp(score / temperature)`. Returns the members (leader first) and the
/// shortfall when the pool is too small.
pub fn select_collaborators(
    leader: AuthorId,
    size: u32,
    society: &Society,
    policy: &SelectionPolicy,
    rng: &mut impl Rng,
) -> Result<(Vec<AuthorId>, u32), SocietyError> {
    if size == 0 {
        return Err(SocietyError::InvalidSize);
    }
    let lead = society.agent(leader).ok_or(SocietyError::UnknownAgent(leader))?;
    let mut members = vec![leader];
    let wanted = (size - 1) as usize;
    if wanted == 0 {
        return Ok((members, 0));
    }
    let n = society.len();
    let mut pool: BTreeSet<AuthorId> = lead.profile.coauthor_ids.iter().copied().filter(|c| (c.0 as usize) < n).collect();
    let others = n.saturating_sub(1);
    let draw_target = policy.pool_size.min(others);
    let mut drawn = 0;
    let mut seen = BTreeSet::new();
    if draw_target == others {
        for a in &society.agents {
            if a.id() != leader {
                pool.insert(a.id());
            }
        }
    } else {
        while drawn < draw_target {
            let c = AuthorId(rng.random_range(0..n as u32));
            if c != leader && seen.insert(c) {
                pool.insert(c);
                drawn += 1;
            }
        }
    }
    let mut candidates: Vec<(AuthorId, f64)> = pool
        .into_iter()
        .map(|c| {
            let other = &society.agents[c.0 as usize].profile;
            let co = if lead.profile.coauthor_ids.contains(&c) { 1.0 } else { 0.0 };
            let score = policy.coauthor_weight * co
                + policy.topic_weight * topic_jaccard(&lead.profile.research_topics, &other.research_topics);
            (c, score)
        })
        .collect();
    let t = policy.temperature.max(1e-12);
    while members.len() <= wanted && !candidates.is_empty() {
        let top = candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = candidates.iter().map(|c| ((c.1 - top) / t).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = candidates.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        members.push(candidates.swap_remove(pick).0);
    }
    let shortfall = (wanted + 1 - members.len()) as u32;
    if shortfall > 0 {
        log::info!("team of {leader}: {shortfall} collaborator(s) short");
    }
    Ok((members, shortfall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Discipline;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn profile(i: u32, topics: &[&str], coauthors: &[u32]) -> AuthorRecord {
        AuthorRecord {
            author_id: AuthorId(i),
            display_name: format!("Scientist {}", i + 1),
            ethnicity: "British".into(),
            affiliations: vec![],
            affiliation_rank: None,
            citation_count: 0,
            coauthor_ids: coauthors.iter().map(|&c| AuthorId(c)).collect(),
            discipline: Discipline::Biology,
            research_topics: topics.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn stage_order_is_fixed() {
        let mut s = Stage::CollaboratorSelection;
        let mut seen = vec![s];
        while let Some(n) = s.next() {
            seen.push(n);
            s = n;
        }
        assert_eq!(seen, Stage::PIPELINE.to_vec());
        assert_eq!(Stage::Done(Outcome::Accepted).next(), None);
    }

    #[test]
    fn memory_is_fifo_capped() {
        let mut a = AgentState::new(profile(0, &[], &[]), 1);
        push_memory(&mut a, "e1", 5);
        assert_eq!(a.memory.len(), 1);
        for i in 2..=7 {
            push_memory(&mut a, format!("e{i}"), 5);
            if i == 6 {
                assert_eq!(a.memory.len(), 5);
                assert_eq!(a.memory.front().map(String::as_str), Some("e2"));
            }
        }
        assert_eq!(a.memory.iter().cloned().collect::<Vec<_>>(), vec!["e3", "e4", "e5", "e6", "e7"]);
    }

    #[test]
    fn size_from_floor() {
        assert_eq!(size_from_draw(0.2), 1);
        assert_eq!(size_from_draw(3.7), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_team_size(&mut rng, 0.0), Err(SocietyError::InvalidRate(0.0)));
        assert_eq!(sample_team_size(&mut rng, -1.0), Err(SocietyError::InvalidRate(-1.0)));
        assert!(sample_team_size(&mut rng, 0.5).unwrap() >= 1);
    }

    #[test]
    fn raw_draw_mean_matches_rate() {
        // E[X] = 1/r and E[floor X] = 1/(e^r - 1) for X ~ Exp(r).
        let r = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000;
        let (mut sx, mut ss) = (0.0, 0.0);
        for _ in 0..n {
            let (s, x) = sample_team_size_with_draw(&mut rng, r).unwrap();
            sx += x;
            ss += f64::from(s - 1);
        }
        let mean_x = sx / n as f64;
        let mean_s = ss / n as f64;
        assert!((mean_x - 1.0 / r).abs() / (1.0 / r) < 0.01, "{mean_x}");
        let want = 1.0 / (r.exp() - 1.0);
        assert!((mean_s - want).abs() / want < 0.01, "{mean_s} vs {want}");
    }

    #[test]
    fn solo_team_is_the_leader() {
        let s = Society::new(vec![profile(0, &[], &[]), profile(1, &[], &[])], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, short) = select_collaborators(AuthorId(0), 1, &s, &SelectionPolicy::default(), &mut rng).unwrap();
        assert_eq!((m, short), (vec![AuthorId(0)], 0));
    }

    #[test]
    fn sole_coauthor_is_chosen_when_topics_do_not_count() {
        let mut profiles: Vec<_> = (0..20).map(|i| profile(i, &["x"], &[])).collect();
        profiles[0].coauthor_ids.insert(AuthorId(13));
        profiles[13].coauthor_ids.insert(AuthorId(0));
        let s = Society::new(profiles, 0).unwrap();
        let policy = SelectionPolicy { coauthor_weight: 1.0, topic_weight: 0.0, pool_size: 4, temperature: 0.01 };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, _) = select_collaborators(AuthorId(0), 2, &s, &policy, &mut rng).unwrap();
            assert_eq!(m, vec![AuthorId(0), AuthorId(13)]);
        }
    }

    #[test]
    fn shortfall_when_society_is_small() {
        let s = Society::new((0..3).map(|i| profile(i, &[], &[])).collect(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, short) = select_collaborators(AuthorId(1), 6, &s, &SelectionPolicy::default(), &mut rng).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(short, 3);
        let unique: BTreeSet<_> = m.iter().collect();
        assert_eq!(unique.len(), 3);
    }

    #[test]
    fn leadership_is_capped() {
        let mut s = Society::new(vec![profile(0, &[], &[])], 0).unwrap();
        for _ in 0..3 {
            s.form_team(AuthorId(0), 1, 0, 3).unwrap();
        }
        assert_eq!(s.form_team(AuthorId(0), 1, 0, 3), Err(SocietyError::LeaderAtCapacity(AuthorId(0))));
        s.release_leadership(TeamId(1));
        assert!(s.form_team(AuthorId(0), 1, 0, 3).is_ok());
        s.check_invariants(3, 5).unwrap();
    }

    #[test]
    fn coauthor_links_are_symmetric() {
        let mut s = Society::new((0..3).map(|i| profile(i, &[], &[])).collect(), 0).unwrap();
        s.link_coauthors(AuthorId(0), AuthorId(2));
        s.link_coauthors(AuthorId(1), AuthorId(1));
        assert!(s.agents[0].profile.coauthor_ids.contains(&AuthorId(2)));
        assert!(s.agents[2].profile.coauthor_ids.contains(&AuthorId(0)));
        assert!(s.agents[1].profile.coauthor_ids.is_empty());
    }

    #[test]
    fn jaccard() {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(topic_jaccard(&v(&["a", "b"]), &v(&["B", "c"])), 1.0 / 3.0);
        assert_eq!(topic_jaccard(&[], &[]), 0.0);
    }
}
