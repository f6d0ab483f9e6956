//! The six-stage collaboration state machine.
//!
//! [`advance_team`] runs exactly one stage of one team against a read-only
//! [`World`] and returns a [`TeamStep`]: the updated team plus every shared
//! effect (new members, memory entries, citations, a review, a paper to
//! publish). The caller applies steps at the epoch barrier in team order, so
//! teams can be advanced concurrently without changing the result.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, AUTHOR_LINE, QUERY_PREFIX};
use crate::channel::{Inference, Origin};
use crate::corpus::{AuthorId, AuthorRecord, PaperId, PaperRecord};
use crate::index::{EmbeddingVector, IndexError, PaperIndex};
use crate::par::Execution;
use crate::review::{review_submission, ReviewBundle, ReviewConfig, ReviewError, Submission};
use crate::rng;
use crate::society::{select_collaborators, AgentState, Outcome, SelectionPolicy, Society, Stage, Team, TeamId};

const SPEECH_TEMPLATE: &str = include_str!("../templates/speech.txt");
const SYNTHESIS_TEMPLATE: &str = include_str!("../templates/synthesis.txt");
const ABSTRACT_TEMPLATE: &str = include_str!("../templates/abstract.txt");

#[derive(Debug, Error)]
pub enum StageError {
    #[error("team {team}: {stage} needs {missing}")]
    Precondition { team: TeamId, stage: &'static str, missing: &'static str },
    #[error("team {team}: {source}")]
    Index { team: TeamId, source: IndexError },
    #[error("team {team}: {source}")]
    Review { team: TeamId, source: ReviewError },
    #[error("team {team}: {source}")]
    Society { team: TeamId, source: crate::society::SocietyError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionStatus {
    Completed,
    /// The backend failed; the stage repeats next epoch.
    Delayed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAction {
    pub team_id: TeamId,
    pub stage: Stage,
    pub epoch: u32,
    pub status: ActionStatus,
    pub prompt: String,
    pub response: String,
    pub refs_used: Vec<PaperId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub max_refs: usize,
    pub memory_cap: usize,
    /// Character budget of one memory entry.
    pub memory_chars: usize,
    /// Failed attempts a stage may absorb before the team aborts.
    pub retry_budget: u32,
    pub selection: SelectionPolicy,
    pub review: ReviewConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            max_refs: 9,
            memory_cap: 5,
            memory_chars: 280,
            retry_budget: 3,
            selection: SelectionPolicy::default(),
            review: ReviewConfig::default(),
        }
    }
}

/// Read-only view of shared state during an epoch.
#[derive(Clone, Copy)]
pub struct World<'a> {
    pub society: &'a Society,
    pub index: &'a PaperIndex,
    /// Reference database, ordered by id.
    pub papers: &'a [PaperRecord],
}

impl World<'_> {
    pub fn paper(&self, id: PaperId) -> Option<&PaperRecord> {
        self.papers.binary_search_by_key(&id, |p| p.paper_id).ok().map(|i| &self.papers[i])
    }

    fn agent(&self, id: AuthorId) -> &AgentState {
        &self.society.agents[id.0 as usize]
    }
}

/// Everything one stage execution produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamStep {
    pub team: Team,
    pub action: Option<StageAction>,
    pub new_members: Vec<AuthorId>,
    pub memory: Vec<(AuthorId, String)>,
    /// Idea-generation references to record in the citation ledger.
    pub citations: Vec<PaperId>,
    /// Emitted when the abstract is written.
    pub submission: Option<Submission>,
    pub review: Option<ReviewBundle>,
    /// Embedding of an accepted paper, ready for indexing.
    pub accepted_embedding: Option<EmbeddingVector>,
    pub backend_failure: Option<BackendError>,
}

impl TeamStep {
    fn unchanged(team: &Team) -> Self {
        TeamStep {
            team: team.clone(),
            action: None,
            new_members: Vec::new(),
            memory: Vec::new(),
            citations: Vec::new(),
            submission: None,
            review: None,
            accepted_embedding: None,
            backend_failure: None,
        }
    }
}

struct Ctx<'a> {
    world: World<'a>,
    inference: &'a dyn Inference,
    cfg: &'a PipelineConfig,
    epoch: u32,
    run_seed: u64,
}

/// Why a stage did not complete.
#[derive(Debug)]
pub enum StageFailure {
    Backend(BackendError),
    Fatal(StageError),
}

impl From<BackendError> for StageFailure {
    fn from(e: BackendError) -> Self {
        StageFailure::Backend(e)
    }
}

impl From<StageError> for StageFailure {
    fn from(e: StageError) -> Self {
        StageFailure::Fatal(e)
    }
}

/// Runs the team's current stage once.
///
/// A backend failure leaves the stage in place and counts a delay; the team
/// aborts once a stage has failed more than `retry_budget` times. Other
/// failures are returned as errors.
pub fn advance_team(
    team: &Team,
    world: World<'_>,
    inference: &dyn Inference,
    cfg: &PipelineConfig,
    epoch: u32,
    run_seed: u64,
) -> Result<TeamStep, StageError> {
    if team.stage.is_done() {
        return Ok(TeamStep::unchanged(team));
    }
    let ctx = Ctx { world, inference, cfg, epoch, run_seed };
    let mut step = TeamStep::unchanged(team);
    let result = match team.stage {
        Stage::CollaboratorSelection => run_selection(&ctx, &mut step),
        Stage::TopicDiscussion => run_topic(&ctx, &mut step),
        Stage::IdeaGeneration => run_idea(&ctx, &mut step),
        Stage::NoveltyAssessment => run_novelty(&ctx, &mut step),
        Stage::AbstractGeneration => run_abstract(&ctx, &mut step),
        Stage::PeerReview => run_review(&ctx, &mut step),
        Stage::Done(_) => unreachable!(),
    };
    match result {
        Ok(()) => {
            step.team.stage_failures = 0;
            if let Some(next) = team.stage.next() {
                step.team.stage = next;
            }
            if step.team.stage.is_done() {
                step.team.decided_epoch = Some(epoch);
            }
            Ok(step)
        }
        Err(StageFailure::Fatal(e)) => Err(e),
        Err(StageFailure::Backend(e)) => {
            let mut step = TeamStep::unchanged(team);
            step.team.stage_failures += 1;
            let status = if step.team.stage_failures > cfg.retry_budget {
                log::warn!("team {} aborted in {}: {e}", team.team_id, team.stage.name());
                step.team.stage = Stage::Done(Outcome::Aborted);
                step.team.decided_epoch = Some(epoch);
                ActionStatus::Aborted
            } else {
                log::info!("team {} delayed in {}: {e}", team.team_id, team.stage.name());
                step.team.delays += 1;
                ActionStatus::Delayed
            };
            step.action = Some(StageAction {
                team_id: team.team_id,
                stage: team.stage,
                epoch,
                status,
                prompt: String::new(),
                response: e.to_string(),
                refs_used: Vec::new(),
            });
            step.backend_failure = Some(e);
            Ok(step)
        }
    }
}

fn record(step: &mut TeamStep, stage: Stage, epoch: u32, prompt: String, response: String, refs: Vec<PaperId>) {
    step.action = Some(StageAction {
        team_id: step.team.team_id,
        stage,
        epoch,
        status: ActionStatus::Completed,
        prompt,
        response,
        refs_used: refs,
    });
}

fn run_selection(ctx: &Ctx<'_>, step: &mut TeamStep) -> Result<(), StageFailure> {
    let team = &mut step.team;
    let mut rng = rng::stream(ctx.run_seed, &[rng::purpose::SELECTION, team.team_id.0, u64::from(ctx.epoch)]);
    let (members, shortfall) =
        select_collaborators(team.leader_id, team.target_size, ctx.world.society, &ctx.cfg.selection, &mut rng)
            .map_err(|source| StageError::Society { team: team.team_id, source })?;
    step.new_members = members[1..].to_vec();
    team.member_ids = members;
    let listed: Vec<String> = team.member_ids.iter().map(ToString::to_string).collect();
    let prompt = format!("### CollaboratorSelection\nLeader: {}\nTarget size: {}", team.leader_id, team.target_size);
    let response = format!("Members: {}\nShortfall: {shortfall}", listed.join(" "));
    let entry = format!("Joined team {} led by {}", team.team_id, team.leader_id);
    step.memory = team.member_ids.iter().map(|&m| (m, entry.clone())).collect();
    let epoch = ctx.epoch;
    record(step, Stage::CollaboratorSelection, epoch, prompt, response, Vec::new());
    Ok(())
}

fn render(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in pairs {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

fn truncate_chars(s: &str, n: usize) -> String {
    match s.char_indices().nth(n) {
        Some((i, _)) => s[..i].to_string(),
        None => s.to_string(),
    }
}

fn affiliation(p: &AuthorRecord) -> &str {
    p.first_affiliation().unwrap_or("independent")
}

fn origin(team: &Team, agent_id: AuthorId) -> Origin {
    Origin { team_id: Some(team.team_id), agent_id, stage: Some(team.stage) }
}

/// One utterance per member in order, each seeing the transcript so far.
fn speeches(ctx: &Ctx<'_>, team: &Team, context: &str, instruction: &str) -> Result<Vec<String>, StageFailure> {
    let mut transcript: Vec<String> = Vec::with_capacity(team.member_ids.len());
    for &m in &team.member_ids {
        let agent = ctx.world.agent(m);
        let p = &agent.profile;
        let memory: Vec<&str> = agent.memory.iter().map(String::as_str).collect();
        let prompt = render(
            SPEECH_TEMPLATE,
            &[
                ("stage", team.stage.name()),
                ("name", &p.display_name),
                ("discipline", p.discipline.label()),
                ("affiliation", affiliation(p)),
                ("keywords", &p.research_topics.join(", ")),
                ("context", context),
                ("memory", &memory.join("\n")),
                ("transcript", &transcript.join("\n")),
                ("instruction", instruction),
            ],
        );
        let said = ctx.inference.chat(origin(team, m), &prompt)?;
        transcript.push(format!("{}: {}", p.display_name, said.trim()));
    }
    Ok(transcript)
}

/// The leader's closing statement; returns its prompt and answer.
fn synthesize(
    ctx: &Ctx<'_>,
    team: &Team,
    context: &str,
    transcript: &[String],
    instruction: &str,
) -> Result<(String, String), StageFailure> {
    let leader = &ctx.world.agent(team.leader_id).profile;
    let prompt = render(
        SYNTHESIS_TEMPLATE,
        &[
            ("stage", team.stage.name()),
            ("name", &leader.display_name),
            ("team_size", &team.member_ids.len().to_string()),
            ("keywords", &leader.research_topics.join(", ")),
            ("context", context),
            ("transcript", &transcript.join("\n")),
            ("instruction", instruction),
        ],
    );
    let answer = ctx.inference.chat(origin(team, team.leader_id), &prompt)?;
    Ok((prompt, answer.trim().to_string()))
}

fn remember(ctx: &Ctx<'_>, step: &mut TeamStep, text: &str) {
    let entry = truncate_chars(&format!("{}@{}: {}", step.team.stage.name(), ctx.epoch, text), ctx.cfg.memory_chars);
    step.memory = step.team.member_ids.iter().map(|&m| (m, entry.clone())).collect();
}

fn run_topic(ctx: &Ctx<'_>, step: &mut TeamStep) -> Result<(), StageFailure> {
    let transcript = speeches(ctx, &step.team, "", "Propose a research topic in one sentence.")?;
    let (prompt, answer) = synthesize(ctx, &step.team, "", &transcript, "Settle the team's topic in one sentence.")?;
    let topic = answer.split_whitespace().take(12).collect::<Vec<_>>().join(" ");
    remember(ctx, step, &topic);
    step.team.draft.topic = Some(topic.clone());
    record(step, Stage::TopicDiscussion, ctx.epoch, prompt, topic, Vec::new());
    Ok(())
}

/// Up to `max_refs` distinct papers nearest to `query`.
fn retrieve(ctx: &Ctx<'_>, team: &Team, query: &str) -> Result<Vec<PaperId>, StageFailure> {
    if ctx.world.index.is_empty() {
        log::warn!("team {}: empty index, {} proceeds without references", team.team_id, team.stage.name());
        return Ok(Vec::new());
    }
    let v = ctx.inference.embed(origin(team, team.leader_id), &format!("{QUERY_PREFIX} {query}"))?;
    let index_err = |source| StageError::Index { team: team.team_id, source };
    let v = EmbeddingVector::new(v).map_err(index_err)?;
    let hits = ctx.world.index.retrieve(&v, ctx.cfg.max_refs, Execution::Sequential).map_err(index_err)?;
    let mut refs: Vec<PaperId> = Vec::with_capacity(hits.len());
    for (id, _) in hits {
        if !refs.contains(&id) {
            refs.push(id);
        }
    }
    Ok(refs)
}

fn reference_lines(ctx: &Ctx<'_>, refs: &[PaperId]) -> String {
    refs.iter()
        .map(|id| match ctx.world.paper(*id) {
            Some(p) => format!("[{id}] {}", p.title),
            None => format!("[{id}]"),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn require<'t>(team: &Team, value: &'t Option<String>, missing: &'static str) -> Result<&'t str, StageError> {
    value.as_deref().filter(|v| !v.trim().is_empty()).ok_or(StageError::Precondition {
        team: team.team_id,
        stage: team.stage.name(),
        missing,
    })
}

fn run_idea(ctx: &Ctx<'_>, step: &mut TeamStep) -> Result<(), StageFailure> {
    let team = &step.team;
    let topic = require(team, &team.draft.topic, "a topic")?.to_string();
    let context = format!("Topic: {topic}");
    let transcript = speeches(ctx, team, &context, "Suggest a research idea on the topic.")?;
    let refs = retrieve(ctx, team, &format!("{topic}\n{}", transcript.join("\n")))?;
    let context = format!("Topic: {topic}\nReferences:\n{}", reference_lines(ctx, &refs));
    let (prompt, idea) =
        synthesize(ctx, team, &context, &transcript, "State the team's research idea, building on the references.")?;
    remember(ctx, step, &idea);
    step.team.draft.idea = Some(idea.clone());
    for id in &refs {
        if !step.team.chosen_refs.contains(id) {
            step.team.chosen_refs.push(*id);
        }
    }
    step.citations = refs.clone();
    record(step, Stage::IdeaGeneration, ctx.epoch, prompt, idea, refs);
    Ok(())
}

fn run_novelty(ctx: &Ctx<'_>, step: &mut TeamStep) -> Result<(), StageFailure> {
    let team = &step.team;
    let topic = team.draft.topic.clone().unwrap_or_default();
    let idea = require(team, &team.draft.idea, "an idea")?.to_string();
    let refs = retrieve(ctx, team, &idea)?;
    let context = format!("Topic: {topic}\nIdea: {idea}\nRelated work:\n{}", reference_lines(ctx, &refs));
    let transcript = speeches(ctx, team, &context, "Compare the idea with the related work.")?;
    let (prompt, note) = synthesize(ctx, team, &context, &transcript, "Write a short novelty assessment of the idea.")?;
    remember(ctx, step, &note);
    step.team.draft.novelty = Some(note.clone());
    record(step, Stage::NoveltyAssessment, ctx.epoch, prompt, note, refs);
    Ok(())
}

/// Profile line the abstract prompt carries for each author.
pub fn author_line(p: &AuthorRecord) -> String {
    let rank = p.affiliation_rank.map_or_else(|| "none".to_string(), |r| r.to_string());
    format!(
        "{AUTHOR_LINE} {} | ethnicity={} | affiliation={} | rank={rank}",
        p.display_name,
        p.ethnicity,
        p.first_affiliation().unwrap_or(crate::metrics::NO_AFFILIATION)
    )
}

/// Splits `Title: ...` / `Abstract: ...` output. Lines after the abstract
/// line stay part of the abstract.
pub fn parse_abstract(text: &str) -> (String, String) {
    let mut title = None;
    let mut body: Vec<&str> = Vec::new();
    let mut in_body = false;
    for line in text.lines() {
        if !in_body {
            if let Some(t) = line.strip_prefix("Title:") {
                title = Some(t.trim().to_string());
                continue;
            }
            if let Some(a) = line.strip_prefix("Abstract:") {
                in_body = true;
                body.push(a.trim());
                continue;
            }
        } else {
            body.push(line);
        }
    }
    if !in_body {
        let mut lines = text.lines();
        let first = lines.next().unwrap_or_default().trim().to_string();
        return (title.unwrap_or(first), text.trim().to_string());
    }
    let title = title
        .unwrap_or_else(|| body.first().map(|b| b.split_whitespace().take(8).collect::<Vec<_>>().join(" ")).unwrap_or_default());
    (title, body.join("\n").trim().to_string())
}

/// Writes title and abstract and emits the submission: authors are the
/// members with the leader first, citations the accumulated idea references,
/// and the discipline the leader's.
pub fn generate_abstract(team: &Team, world: World<'_>, inference: &dyn Inference) -> Result<Submission, StageFailure> {
    draft_abstract(team, world, inference).map(|(_, s)| s)
}

fn draft_abstract(team: &Team, world: World<'_>, inference: &dyn Inference) -> Result<(String, Submission), StageFailure> {
    let idea = require(team, &team.draft.idea, "an idea")?;
    let novelty = require(team, &team.draft.novelty, "a novelty note")?;
    let authors: Vec<String> = team.member_ids.iter().map(|&m| author_line(&world.agent(m).profile)).collect();
    let refs: Vec<String> = team
        .chosen_refs
        .iter()
        .map(|id| world.paper(*id).map_or_else(|| format!("[{id}]"), |p| format!("[{id}] {}", p.title)))
        .collect();
    let prompt = render(
        ABSTRACT_TEMPLATE,
        &[
            ("topic", team.draft.topic.as_deref().unwrap_or_default()),
            ("idea", idea),
            ("novelty", novelty),
            ("references", &refs.join("\n")),
            ("authors", &authors.join("\n")),
        ],
    );
    let answer = inference.chat(origin(team, team.leader_id), &prompt)?;
    let (title, abstract_text) = parse_abstract(&answer);
    let sub = Submission {
        submission_id: team.team_id.0,
        team_id: team.team_id,
        title,
        abstract_text,
        author_ids: team.member_ids.clone(),
        cited_paper_ids: team.chosen_refs.clone(),
        discipline: world.agent(team.leader_id).profile.discipline,
    };
    Ok((prompt, sub))
}

fn run_abstract(ctx: &Ctx<'_>, step: &mut TeamStep) -> Result<(), StageFailure> {
    let (prompt, sub) = draft_abstract(&step.team, ctx.world, ctx.inference)?;
    remember(ctx, step, &sub.title);
    step.team.draft.title = Some(sub.title.clone());
    step.team.draft.abstract_text = Some(sub.abstract_text.clone());
    let response = format!("Title: {}\nAbstract: {}", sub.title, sub.abstract_text);
    step.submission = Some(sub);
    record(step, Stage::AbstractGeneration, ctx.epoch, prompt, response, Vec::new());
    Ok(())
}

/// The submission a team in review stands for.
pub fn submission_of(team: &Team, world: World<'_>) -> Result<Submission, StageError> {
    let missing = |what| StageError::Precondition { team: team.team_id, stage: "PeerReview", missing: what };
    Ok(Submission {
        submission_id: team.team_id.0,
        team_id: team.team_id,
        title: team.draft.title.clone().ok_or(missing("a title"))?,
        abstract_text: team.draft.abstract_text.clone().ok_or(missing("an abstract"))?,
        author_ids: team.member_ids.clone(),
        cited_paper_ids: team.chosen_refs.clone(),
        discipline: world.agent(team.leader_id).profile.discipline,
    })
}

fn run_review(ctx: &Ctx<'_>, step: &mut TeamStep) -> Result<(), StageFailure> {
    let team = &step.team;
    let sub = submission_of(team, ctx.world)?;
    let mut rng = rng::stream(ctx.run_seed, &[rng::purpose::REVIEWERS, team.team_id.0, u64::from(ctx.epoch)]);
    let bundle = match review_submission(&sub, ctx.world.society, ctx.inference, &ctx.cfg.review, ctx.epoch, &mut rng) {
        Ok(b) => b,
        Err(ReviewError::Backend(e)) => return Err(StageFailure::Backend(e)),
        Err(e @ ReviewError::PoolTooSmall { .. }) => {
            log::warn!("team {} aborted: {e}", team.team_id);
            step.team.stage = Stage::Done(Outcome::Aborted);
            record(step, Stage::PeerReview, ctx.epoch, String::new(), e.to_string(), Vec::new());
            if let Some(a) = step.action.as_mut() {
                a.status = ActionStatus::Aborted;
            }
            return Ok(());
        }
        Err(source) => return Err(StageError::Review { team: team.team_id, source }.into()),
    };
    let accepted = bundle.decision == crate::review::Decision::Accept;
    if accepted {
        let v = ctx.inference.embed(origin(team, team.leader_id), &sub.embedding_text())?;
        let v = EmbeddingVector::new(v).map_err(|source| StageError::Index { team: team.team_id, source })?;
        step.accepted_embedding = Some(v);
    }
    let outcome = if accepted { Outcome::Accepted } else { Outcome::Rejected };
    let scores: Vec<String> = bundle.scores.iter().map(ToString::to_string).collect();
    let response = format!("Scores: {}\nDecision: {:?}", scores.join(" "), bundle.decision);
    remember(ctx, step, &response);
    let reviewers: Vec<String> = bundle.reviewer_ids.iter().map(ToString::to_string).collect();
    let prompt = format!("Reviewers: {}\nTitle: {}", reviewers.join(" "), sub.title);
    step.team.stage = Stage::Done(outcome);
    step.submission = Some(sub);
    step.review = Some(bundle);
    record(step, Stage::PeerReview, ctx.epoch, prompt, response, Vec::new());
    Ok(())
}

fn run_alone<T>(
    team: &Team,
    world: World<'_>,
    inference: &dyn Inference,
    cfg: &PipelineConfig,
    epoch: u32,
    stage: fn(&Ctx<'_>, &mut TeamStep) -> Result<(), StageFailure>,
    pick: impl FnOnce(TeamStep) -> T,
) -> Result<T, StageFailure> {
    let ctx = Ctx { world, inference, cfg, epoch, run_seed: 0 };
    let mut step = TeamStep::unchanged(team);
    stage(&ctx, &mut step)?;
    Ok(pick(step))
}

/// Idea generation on its own: the idea text and its deduplicated references.
pub fn generate_idea(
    team: &Team,
    world: World<'_>,
    inference: &dyn Inference,
    cfg: &PipelineConfig,
    epoch: u32,
) -> Result<(String, Vec<PaperId>), StageFailure> {
    run_alone(team, world, inference, cfg, epoch, run_idea, |s| (s.team.draft.idea.unwrap_or_default(), s.citations))
}

/// Novelty assessment on its own: the note and the papers it was checked
/// against. Nothing here is a citation.
pub fn assess_novelty(
    team: &Team,
    world: World<'_>,
    inference: &dyn Inference,
    cfg: &PipelineConfig,
    epoch: u32,
) -> Result<(String, Vec<PaperId>), StageFailure> {
    run_alone(team, world, inference, cfg, epoch, run_novelty, |s| {
        let refs = s.action.map(|a| a.refs_used).unwrap_or_default();
        (s.team.draft.novelty.unwrap_or_default(), refs)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, FaultyBackend, MockBackend};
    use crate::channel::Direct;
    use crate::corpus::Discipline;
    use crate::index::build_index;
    use std::collections::BTreeSet;

    fn profile(i: u32) -> AuthorRecord {
        AuthorRecord {
            author_id: AuthorId(i),
            display_name: format!("Scientist {}", i + 1),
            ethnicity: ["Nordic", "Japanese", "Italian"][i as usize % 3].into(),
            affiliations: vec![format!("University {}", i % 4)],
            affiliation_rank: if i % 4 == 3 { None } else { Some(10 * (i % 4 + 1)) },
            citation_count: 0,
            coauthor_ids: BTreeSet::new(),
            discipline: Discipline::Physics,
            research_topics: vec!["lattice".into(), format!("topic{i}")],
        }
    }

    fn paper(i: u64) -> PaperRecord {
        PaperRecord {
            paper_id: PaperId(i),
            title: format!("Seed paper {i}"),
            abstract_text: format!("About lattice number {i}."),
            year: crate::corpus::SEED_YEAR,
            citation_count: 3,
            author_ids: vec![AuthorId(0)],
            cited_paper_ids: None,
            discipline: Discipline::Physics,
        }
    }

    struct Fixture {
        society: Society,
        index: PaperIndex,
        papers: Vec<PaperRecord>,
    }

    impl Fixture {
        fn new(n_papers: u64) -> Self {
            let papers: Vec<_> = (0..n_papers).map(paper).collect();
            let index = if papers.is_empty() {
                PaperIndex::new(32)
            } else {
                build_index(&papers, &MockBackend::with_seed(1), Execution::Sequential).unwrap()
            };
            Fixture { society: Society::new((0..8).map(profile).collect(), 5).unwrap(), index, papers }
        }

        fn world(&self) -> World<'_> {
            World { society: &self.society, index: &self.index, papers: &self.papers }
        }
    }

    fn team(size: u32, formed: u32) -> Team {
        Team::new(TeamId(0), AuthorId(0), size, formed)
    }

    fn run_to_done(team: &mut Team, fx: &Fixture, backend: &dyn Inference, from_epoch: u32) -> Vec<StageAction> {
        let cfg = PipelineConfig::default();
        let mut log = Vec::new();
        let mut epoch = from_epoch;
        while !team.stage.is_done() {
            let step = advance_team(team, fx.world(), backend, &cfg, epoch, 9).unwrap();
            log.extend(step.action.clone());
            *team = step.team;
            epoch += 1;
            assert!(epoch < from_epoch + 40);
        }
        log
    }

    #[test]
    fn undelayed_team_decides_six_epochs_after_formation() {
        let fx = Fixture::new(12);
        let backend = Direct(MockBackend::with_seed(2));
        let mut t = team(3, 10);
        let log = run_to_done(&mut t, &fx, &backend, 11);
        assert_eq!(t.decided_epoch, Some(16));
        let stages: Vec<Stage> = log.iter().map(|a| a.stage).collect();
        assert_eq!(stages, Stage::PIPELINE.to_vec());
        for a in &log {
            let retrieval_stage = matches!(a.stage, Stage::IdeaGeneration | Stage::NoveltyAssessment);
            assert!(a.refs_used.len() <= 9);
            assert!(retrieval_stage || a.refs_used.is_empty());
        }
    }

    #[test]
    fn injected_failures_add_one_epoch_each() {
        for d in 0..=3u64 {
            let fx = Fixture::new(12);
            let failing: Vec<u64> = (5..5 + d).collect();
            let backend = Direct(FaultyBackend::new(MockBackend::with_seed(2), failing));
            let mut t = team(2, 0);
            let log = run_to_done(&mut t, &fx, &backend, 1);
            assert_eq!(t.delays as u64, d);
            assert_eq!(t.decided_epoch, Some(6 + d as u32));
            assert_eq!(log.iter().filter(|a| a.status == ActionStatus::Delayed).count() as u64, d);
            assert!(matches!(t.stage, Stage::Done(Outcome::Accepted | Outcome::Rejected)));
        }
    }

    #[test]
    fn exhausted_retry_budget_aborts() {
        let fx = Fixture::new(4);
        let backend = Direct(FaultyBackend::new(MockBackend::with_seed(2), 0..4));
        let mut t = team(1, 0);
        t.stage = Stage::TopicDiscussion;
        let log = run_to_done(&mut t, &fx, &backend, 1);
        assert_eq!(t.stage, Stage::Done(Outcome::Aborted));
        assert_eq!(log.last().unwrap().status, ActionStatus::Aborted);
        assert_eq!(t.delays, 3);
    }

    #[test]
    fn done_is_absorbing() {
        let fx = Fixture::new(4);
        let mut t = team(1, 0);
        t.stage = Stage::Done(Outcome::Rejected);
        let step = advance_team(&t, fx.world(), &Direct(MockBackend::with_seed(0)), &PipelineConfig::default(), 3, 0).unwrap();
        assert_eq!(step.team, t);
        assert!(step.action.is_none() && step.citations.is_empty());
    }

    #[test]
    fn idea_refs_clamp_to_index_size_and_echo_topic() {
        let fx = Fixture::new(4);
        let mut t = team(2, 0);
        t.member_ids.push(AuthorId(1));
        t.stage = Stage::IdeaGeneration;
        t.draft.topic = Some("lattice fermions".into());
        let (idea, refs) =
            generate_idea(&t, fx.world(), &Direct(MockBackend::with_seed(3)), &PipelineConfig::default(), 2).unwrap();
        assert!(refs.len() <= 4 && !refs.is_empty());
        assert!(idea.contains("lattice") && idea.contains("fermions"));
    }

    #[test]
    fn empty_index_gives_zero_refs() {
        let fx = Fixture::new(0);
        let mut t = team(1, 0);
        t.stage = Stage::IdeaGeneration;
        t.draft.topic = Some("anything".into());
        let (_, refs) = generate_idea(&t, fx.world(), &Direct(MockBackend::with_seed(3)), &PipelineConfig::default(), 2).unwrap();
        assert!(refs.is_empty());
    }

    #[test]
    fn novelty_needs_an_idea_and_cites_nothing() {
        let fx = Fixture::new(12);
        let backend = Direct(MockBackend::with_seed(3));
        let mut t = team(1, 0);
        t.stage = Stage::NoveltyAssessment;
        let err = assess_novelty(&t, fx.world(), &backend, &PipelineConfig::default(), 2).unwrap_err();
        assert!(matches!(err, StageFailure::Fatal(StageError::Precondition { .. })));
        t.draft.idea = Some("an idea about lattices".into());
        let step = advance_team(&t, fx.world(), &backend, &PipelineConfig::default(), 2, 0).unwrap();
        assert!(step.citations.is_empty());
        assert_eq!(step.action.unwrap().refs_used.len(), 9);
    }

    #[test]
    fn submission_bookkeeping() {
        let fx = Fixture::new(12);
        let backend = Direct(MockBackend::with_seed(4));
        let mut t = team(4, 0);
        let cfg = PipelineConfig::default();
        let mut idea_refs: Vec<PaperId> = Vec::new();
        let mut submission = None;
        for epoch in 1..=6 {
            let step = advance_team(&t, fx.world(), &backend, &cfg, epoch, 1).unwrap();
            for id in &step.citations {
                if !idea_refs.contains(id) {
                    idea_refs.push(*id);
                }
            }
            if step.action.as_ref().unwrap().stage == Stage::AbstractGeneration {
                submission = step.submission.clone();
            }
            t = step.team;
        }
        let sub = submission.unwrap();
        assert_eq!(sub.author_ids[0], t.leader_id);
        assert_eq!(sub.author_ids, t.member_ids);
        assert_eq!(sub.cited_paper_ids, idea_refs);
        assert_eq!(sub.discipline, Discipline::Physics);
        assert!(!sub.title.is_empty() && !sub.abstract_text.is_empty());
    }

    #[test]
    fn abstract_parsing() {
        assert_eq!(parse_abstract("Title: A\nAbstract: B\nMerit: 0.5"), ("A".into(), "B\nMerit: 0.5".into()));
        assert_eq!(parse_abstract("just text"), ("just text".into(), "just text".into()));
        let line = author_line(&profile(3));
        assert_eq!(line, "Author: Scientist 4 | ethnicity=Nordic | affiliation=University 3 | rank=none");
    }

    #[test]
    fn mock_backend_is_used_through_the_trait() {
        let b = MockBackend::with_seed(1);
        assert_eq!(Direct(b.clone()).mode(), b.mode());
    }
}
