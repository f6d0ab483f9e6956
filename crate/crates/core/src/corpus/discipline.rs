use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// The 19 disciplines papers and authors are classified into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Discipline {
    Art,
    History,
    Philosophy,
    Psychology,
    Biology,
    #[serde(rename = "Environmental Science")]
    EnvironmentalScience,
    Geography,
    Geology,
    Business,
    Economics,
    #[serde(rename = "Computer Science")]
    ComputerScience,
    Engineering,
    Chemistry,
    #[serde(rename = "Materials Science")]
    MaterialsScience,
    Mathematics,
    Physics,
    Medicine,
    #[serde(rename = "Political Science")]
    PoliticalScience,
    Sociology,
}

/// The 8 fields that group the disciplines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Field {
    #[serde(rename = "Humanities, Literature & Arts")]
    Humanities,
    #[serde(rename = "Life Science & Earth Sciences")]
    LifeAndEarth,
    #[serde(rename = "Business, Economics & Management")]
    Business,
    #[serde(rename = "Engineering & Computer Science")]
    Engineering,
    #[serde(rename = "Chemical & Material Sciences")]
    ChemicalAndMaterial,
    #[serde(rename = "Physics & Mathematics")]
    PhysicsAndMathematics,
    #[serde(rename = "Health & Medical Sciences")]
    Health,
    #[serde(rename = "Social Sciences")]
    Social,
}

impl Discipline {
    pub const ALL: [Discipline; 19] = [
        Discipline::Art,
        Discipline::History,
        Discipline::Philosophy,
        Discipline::Psychology,
        Discipline::Biology,
        Discipline::EnvironmentalScience,
        Discipline::Geography,
        Discipline::Geology,
        Discipline::Business,
        Discipline::Economics,
        Discipline::ComputerScience,
        Discipline::Engineering,
        Discipline::Chemistry,
        Discipline::MaterialsScience,
        Discipline::Mathematics,
        Discipline::Physics,
        Discipline::Medicine,
        Discipline::PoliticalScience,
        Discipline::Sociology,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Discipline::Art => "Art",
            Discipline::History => "History",
            Discipline::Philosophy => "Philosophy",
            Discipline::Psychology => "Psychology",
            Discipline::Biology => "Biology",
            Discipline::EnvironmentalScience => "Environmental Science",
            Discipline::Geography => "Geography",
            Discipline::Geology => "Geology",
            Discipline::Business => "Business",
            Discipline::Economics => "Economics",
            Discipline::ComputerScience => "Computer Science",
            Discipline::Engineering => "Engineering",
            Discipline::Chemistry => "Chemistry",
            Discipline::MaterialsScience => "Materials Science",
            Discipline::Mathematics => "Mathematics",
            Discipline::Physics => "Physics",
            Discipline::Medicine => "Medicine",
            Discipline::PoliticalScience => "Political Science",
            Discipline::Sociology => "Sociology",
        }
    }

    pub fn field(self) -> Field {
        use Discipline::*;
        match self {
            Art | History | Philosophy | Psychology => Field::Humanities,
            Biology | EnvironmentalScience | Geography | Geology => Field::LifeAndEarth,
            Business | Economics => Field::Business,
            ComputerScience | Engineering => Field::Engineering,
            Chemistry | MaterialsScience => Field::ChemicalAndMaterial,
            Mathematics | Physics => Field::PhysicsAndMathematics,
            Medicine => Field::Health,
            PoliticalScience | Sociology => Field::Social,
        }
    }

    /// Exact label match, ignoring ASCII case and surrounding whitespace.
    pub fn from_label(label: &str) -> Option<Discipline> {
        let wanted = label.trim();
        Discipline::ALL.into_iter().find(|d| d.label().eq_ignore_ascii_case(wanted))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Field {
    pub fn label(self) -> &'static str {
        match self {
            Field::Humanities => "Humanities, Literature & Arts",
            Field::LifeAndEarth => "Life Science & Earth Sciences",
            Field::Business => "Business, Economics & Management",
            Field::Engineering => "Engineering & Computer Science",
            Field::ChemicalAndMaterial => "Chemical & Material Sciences",
            Field::PhysicsAndMathematics => "Physics & Mathematics",
            Field::Health => "Health & Medical Sciences",
            Field::Social => "Social Sciences",
        }
    }
}

impl fmt::Display for Discipline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Discipline {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Discipline::from_label(s).ok_or_else(|| CorpusError::UnknownDiscipline(s.to_string()))
    }
}

/// Maps a discipline label to the field that owns it.
pub fn map_discipline_to_field(label: &str) -> Result<Field, CorpusError> {
    label.parse::<Discipline>().map(Discipline::field)
}
