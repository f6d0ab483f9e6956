//! Frozen-output checks. Run with `UPDATE_GOLDEN=1` to rewrite the files.

use std::fmt::Write as _;
use std::path::PathBuf;

use scisim_core::backend::MockBackend;
use scisim_core::channel::Direct;
use scisim_core::corpus::{AuthorId, EthnicityClassifier, StubEthnicityClassifier};
use scisim_core::index::build_index;
use scisim_core::pipeline::{assess_novelty, generate_abstract, generate_idea, PipelineConfig, World};
use scisim_core::rng;
use scisim_core::sim::{run_simulation, RunOptions, SimulationConfig, ACTIONS_FILE};
use scisim_core::society::{select_collaborators, SelectionPolicy, Society, Team, TeamId};
use scisim_core::synth::{corpus, SynthConfig};
use scisim_core::{Corpus, Execution};

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{name} differs from its golden file");
}

fn fixture() -> Corpus {
    corpus(&SynthConfig { seed: 7, n_authors: 20, n_reference: 40, n_validation: 10, n_institutions: 8, ..Default::default() })
        .unwrap()
}

#[test]
fn stub_ethnicity_labels() {
    let names = ["Ada Lovelace", "Kenji Sato", "Amara Okafor", "Lars Nilsson", "Priya Raman", "Giulia Rossi", "José García"];
    let c = StubEthnicityClassifier::default();
    let out: String = names.iter().map(|n| format!("{n},{}\n", c.classify(n))).collect();
    check("ethnicity.csv", &out);
}

#[test]
fn mock_index_vectors() {
    let papers = &fixture().split.reference_db[..10];
    let index = build_index(papers, &MockBackend::with_seed(1), Execution::Sequential).unwrap();
    let mut out = String::new();
    for id in index.ids() {
        let v: Vec<String> = index.vector(*id).unwrap().iter().map(|x| format!("{x:.12}")).collect();
        let _ = writeln!(out, "{},{}", id.0, v.join(","));
    }
    check("index_vectors.csv", &out);
}

#[test]
fn twenty_agent_selection() {
    let society = Society::new(fixture().authors, 11).unwrap();
    let mut out = String::new();
    for leader in 0..4u32 {
        let mut r = rng::stream(2024, &[rng::purpose::SELECTION, u64::from(leader)]);
        let (members, shortfall) =
            select_collaborators(AuthorId(leader), 5, &society, &SelectionPolicy::default(), &mut r).unwrap();
        let ids: Vec<String> = members.iter().map(|a| a.0.to_string()).collect();
        let _ = writeln!(out, "{leader}:{} shortfall={shortfall}", ids.join(" "));
    }
    check("selection.txt", &out);
}

fn staffed_team(society: &Society) -> Team {
    let mut team = Team::new(TeamId(0), AuthorId(2), 3, 0);
    team.member_ids = vec![AuthorId(2), AuthorId(5), AuthorId(9)];
    team.draft.topic = Some(society.agent(AuthorId(2)).unwrap().profile.research_topics.join(" "));
    team
}

#[test]
fn idea_novelty_and_abstract() {
    let c = fixture();
    let society = Society::new(c.authors.clone(), 3).unwrap();
    let backend = MockBackend::with_seed(5);
    let index = build_index(&c.split.reference_db, &backend, Execution::Sequential).unwrap();
    let world = World { society: &society, index: &index, papers: &c.split.reference_db };
    let cfg = PipelineConfig::default();
    let inference = Direct(backend);
    let mut team = staffed_team(&society);

    let (idea, refs) = generate_idea(&team, world, &inference, &cfg, 2).map_err(|e| format!("{e:?}")).unwrap();
    team.draft.idea = Some(idea.clone());
    team.chosen_refs = refs.clone();
    let (novelty, checked) = assess_novelty(&team, world, &inference, &cfg, 3).map_err(|e| format!("{e:?}")).unwrap();
    team.draft.novelty = Some(novelty.clone());
    let sub = generate_abstract(&team, world, &inference).map_err(|e| format!("{e:?}")).unwrap();

    let ids = |v: &[scisim_core::PaperId]| v.iter().map(|p| p.0.to_string()).collect::<Vec<_>>().join(" ");
    check("idea.txt", &format!("{idea}\nrefs: {}\n", ids(&refs)));
    check("novelty.txt", &format!("{novelty}\nchecked: {}\n", ids(&checked)));
    check("abstract.txt", &format!("{}\n{}\n", sub.title, sub.abstract_text));
}

/// Five agents, each leading one single-author-leaning team from epoch 0.
fn five_team_config() -> SimulationConfig {
    SimulationConfig {
        n_agents: Some(5),
        epochs: 7,
        seed: 99,
        max_led_teams: 1,
        formation_prob: 1.0,
        team_rate: Some(4.0),
        deterministic: true,
        ..Default::default()
    }
}

#[test]
fn five_team_run() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_simulation(&five_team_config(), fixture(), dir.path(), RunOptions::default()).unwrap();
    assert_eq!(summary.teams_formed, 5);
    assert_eq!(summary.accepted + summary.rejected + summary.aborted, 5);
    check("five_team_actions.jsonl", &std::fs::read_to_string(dir.path().join(ACTIONS_FILE)).unwrap());
    check("five_team_metrics.csv", &std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap());
}
