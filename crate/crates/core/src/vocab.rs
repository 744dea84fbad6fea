//! Closed label spaces for phases, instruments, verbs, targets and the valid
//! instrument-verb-target combinations.
//!
//! A [`LabelSpace`] is loaded from a JSON file with the keys `phases`,
//! `instruments`, `verbs`, `targets` and `valid_triplets`. It is immutable
//! once validated and can be shared freely across threads.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Shipped CholecT45 label space (7 phases, 6 instruments, 10 verbs, 15 targets, 100 triplets).
pub const CHOLECT45_LABEL_SPACE: &str = include_str!("../configs/cholect45_label_space.json");

/// Shipped desk-scale label space used by the synthetic harness.
pub const TOY_LABEL_SPACE: &str = include_str!("../configs/toy_label_space.json");

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("cannot read label space {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("label space schema violation: {0}")]
    Schema(String),
    #[error("duplicate {list} name {name:?}")]
    DuplicateName { list: &'static str, name: String },
    #[error("invalid {list} name {name:?}: {reason}")]
    InvalidName {
        list: &'static str,
        name: String,
        reason: &'static str,
    },
    #[error("{list} has {found} entries but {declared} were declared")]
    CountMismatch {
        list: &'static str,
        declared: usize,
        found: usize,
    },
    #[error("valid triplet #{index} {triplet:?} references {component} id {id} out of range (0..{len})")]
    ComponentOutOfRange {
        index: usize,
        triplet: [usize; 3],
        component: &'static str,
        id: usize,
        len: usize,
    },
    #[error("valid triplet {0:?} listed more than once")]
    DuplicateTriplet([usize; 3]),
    #[error("triplet id {id} out of range (0..{len})")]
    TripletIdOutOfRange { id: usize, len: usize },
    #[error("triplet {0:?} is not a valid combination")]
    UnknownTriplet(Ivt),
}

/// Component ids of one instrument-verb-target combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Ivt {
    pub instrument: usize,
    pub verb: usize,
    pub target: usize,
}

impl Ivt {
    pub fn new(instrument: usize, verb: usize, target: usize) -> Self {
        Self {
            instrument,
            verb,
            target,
        }
    }
}

/// A triplet class: its index into `valid_triplets` plus the component tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TripletClass {
    pub id: usize,
    pub components: Ivt,
}

/// Optional declared sizes; when present in the config each list must match.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeclaredCounts {
    pub phases: Option<usize>,
    pub instruments: Option<usize>,
    pub verbs: Option<usize>,
    pub targets: Option<usize>,
    pub valid_triplets: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelSpaceFile {
    phases: Vec<String>,
    instruments: Vec<String>,
    verbs: Vec<String>,
    targets: Vec<String>,
    valid_triplets: Vec<[usize; 3]>,
    #[serde(default)]
    counts: Option<DeclaredCounts>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LabelList {
    Phase,
    Instrument,
    Verb,
    Target,
}

impl LabelList {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelList::Phase => "phase",
            LabelList::Instrument => "instrument",
            LabelList::Verb => "verb",
            LabelList::Target => "target",
        }
    }
}

impl fmt::Display for LabelList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    phases: Vec<String>,
    instruments: Vec<String>,
    verbs: Vec<String>,
    targets: Vec<String>,
    valid_triplets: Vec<Ivt>,
    lookup: Lookup,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Lookup {
    phases: HashMap<String, usize>,
    instruments: HashMap<String, usize>,
    verbs: HashMap<String, usize>,
    targets: HashMap<String, usize>,
    triplets: HashMap<Ivt, usize>,
}

/// Loads and validates a label space from a JSON file.
pub fn load_label_space(path: impl AsRef<Path>) -> Result<LabelSpace, VocabError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
        path: path.display().to_string(),
        source,
    })?;
    LabelSpace::from_json(&text)
}

impl LabelSpace {
    pub fn from_json(text: &str) -> Result<Self, VocabError> {
        let file: LabelSpaceFile =
            serde_json::from_str(text).map_err(|e| VocabError::Schema(e.to_string()))?;
        if let Some(declared) = file.counts {
            let checks = [
                ("phases", declared.phases, file.phases.len()),
                ("instruments", declared.instruments, file.instruments.len()),
                ("verbs", declared.verbs, file.verbs.len()),
                ("targets", declared.targets, file.targets.len()),
                (
                    "valid_triplets",
                    declared.valid_triplets,
                    file.valid_triplets.len(),
                ),
            ];
            for (list, want, found) in checks {
                if let Some(want) = want {
                    if want != found {
                        return Err(VocabError::CountMismatch {
                            list,
                            declared: want,
                            found,
                        });
                    }
                }
            }
        }
        Self::new(
            file.phases,
            file.instruments,
            file.verbs,
            file.targets,
            file.valid_triplets
                .into_iter()
                .map(|[i, v, t]| Ivt::new(i, v, t))
                .collect(),
        )
    }

    pub fn new(
        phases: Vec<String>,
        instruments: Vec<String>,
        verbs: Vec<String>,
        targets: Vec<String>,
        valid_triplets: Vec<Ivt>,
    ) -> Result<Self, VocabError> {
        let lookup = Lookup {
            phases: index_names("phases", &phases)?,
            instruments: index_names("instruments", &instruments)?,
            verbs: index_names("verbs", &verbs)?,
            targets: index_names("targets", &targets)?,
            triplets: HashMap::new(),
        };
        let mut space = Self {
            phases,
            instruments,
            verbs,
            targets,
            valid_triplets,
            lookup,
        };
        for (index, ivt) in space.valid_triplets.iter().enumerate() {
            let triplet = [ivt.instrument, ivt.verb, ivt.target];
            for (component, id, len) in [
                ("instrument", ivt.instrument, space.instruments.len()),
                ("verb", ivt.verb, space.verbs.len()),
                ("target", ivt.target, space.targets.len()),
            ] {
                if id >= len {
                    return Err(VocabError::ComponentOutOfRange {
                        index,
                        triplet,
                        component,
                        id,
                        len,
                    });
                }
            }
            if space.lookup.triplets.insert(*ivt, index).is_some() {
                return Err(VocabError::DuplicateTriplet(triplet));
            }
        }
        Ok(space)
    }

    /// The shipped CholecT45 space.
    pub fn cholect45() -> Self {
        Self::from_json(CHOLECT45_LABEL_SPACE).expect("shipped CholecT45 label space is valid")
    }

    /// The shipped desk-scale space (3 phases, 3 instruments, 3 verbs, 4 targets, 6 triplets).
    pub fn toy() -> Self {
        Self::from_json(TOY_LABEL_SPACE).expect("shipped toy label space is valid")
    }

    pub fn phases(&self) -> &[String] {
        &self.phases
    }

    pub fn instruments(&self) -> &[String] {
        &self.instruments
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn valid_triplets(&self) -> &[Ivt] {
        &self.valid_triplets
    }

    pub fn num_triplets(&self) -> usize {
        self.valid_triplets.len()
    }

    pub fn names(&self, list: LabelList) -> &[String] {
        match list {
            LabelList::Phase => &self.phases,
            LabelList::Instrument => &self.instruments,
            LabelList::Verb => &self.verbs,
            LabelList::Target => &self.targets,
        }
    }

    /// Case-insensitive name lookup.
    pub fn find(&self, list: LabelList, name: &str) -> Option<usize> {
        let map = match list {
            LabelList::Phase => &self.lookup.phases,
            LabelList::Instrument => &self.lookup.instruments,
            LabelList::Verb => &self.lookup.verbs,
            LabelList::Target => &self.lookup.targets,
        };
        map.get(&name.to_lowercase()).copied()
    }

    pub fn triplet_components(&self, id: usize) -> Result<Ivt, VocabError> {
        self.valid_triplets
            .get(id)
            .copied()
            .ok_or(VocabError::TripletIdOutOfRange {
                id,
                len: self.valid_triplets.len(),
            })
    }

    pub fn triplet_id(&self, ivt: Ivt) -> Result<usize, VocabError> {
        self.lookup
            .triplets
            .get(&ivt)
            .copied()
            .ok_or(VocabError::UnknownTriplet(ivt))
    }

    pub fn triplet_class(&self, id: usize) -> Result<TripletClass, VocabError> {
        Ok(TripletClass {
            id,
            components: self.triplet_components(id)?,
        })
    }

    pub fn to_json(&self) -> String {
        let triplets: Vec<[usize; 3]> = self
            .valid_triplets
            .iter()
            .map(|t| [t.instrument, t.verb, t.target])
            .collect();
        let value = serde_json::json!({
            "phases": self.phases,
            "instruments": self.instruments,
            "verbs": self.verbs,
            "targets": self.targets,
            "valid_triplets": triplets,
        });
        serde_json::to_string_pretty(&value).expect("label space serializes")
    }
}

/// Names are single whitespace-free tokens so the answer grammar stays
/// unambiguous; uniqueness is checked case-insensitively to match parsing.
fn index_names(list: &'static str, names: &[String]) -> Result<HashMap<String, usize>, VocabError> {
    let mut map = HashMap::with_capacity(names.len());
    for (id, name) in names.iter().enumerate() {
        let invalid = |reason| VocabError::InvalidName {
            list,
            name: name.clone(),
            reason,
        };
        if name.is_empty() {
            return Err(invalid("empty"));
        }
        if name.chars().any(char::is_whitespace) {
            return Err(invalid("contains whitespace"));
        }
        if name.chars().any(|c| ",.:()[]<>".contains(c)) {
            return Err(invalid("contains a template delimiter"));
        }
        if map.insert(name.to_lowercase(), id).is_some() {
            return Err(VocabError::DuplicateName {
                list,
                name: name.clone(),
            });
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json(triplet: [usize; 3]) -> String {
        format!(
            r#"{{"phases": ["a", "b"], "instruments": ["grasper"], "verbs": ["grasp"],
                "targets": ["liver"], "valid_triplets": [[{}, {}, {}]]}}"#,
            triplet[0], triplet[1], triplet[2]
        )
    }

    #[test]
    fn shipped_cholect45_sizes() {
        let space = LabelSpace::cholect45();
        assert_eq!(space.phases().len(), 7);
        assert_eq!(space.instruments().len(), 6);
        assert_eq!(space.verbs().len(), 10);
        assert_eq!(space.targets().len(), 15);
        assert_eq!(space.num_triplets(), 100);
    }

    #[test]
    fn shipped_toy_sizes() {
        let space = LabelSpace::toy();
        assert_eq!(
            (
                space.phases().len(),
                space.instruments().len(),
                space.verbs().len(),
                space.targets().len(),
                space.num_triplets()
            ),
            (3, 3, 3, 4, 6)
        );
    }

    #[test]
    fn minimal_space_is_valid() {
        let space = LabelSpace::from_json(&minimal_json([0, 0, 0])).unwrap();
        assert_eq!(space.phases().len(), 2);
        assert_eq!(space.triplet_components(0).unwrap(), Ivt::new(0, 0, 0));
    }

    #[test]
    fn out_of_range_component_rejected() {
        let text = CHOLECT45_LABEL_SPACE.replacen("[0, 2, 1]", "[9, 0, 0]", 1);
        assert_ne!(text, CHOLECT45_LABEL_SPACE);
        let err = LabelSpace::from_json(&text).unwrap_err();
        assert!(matches!(
            err,
            VocabError::ComponentOutOfRange {
                component: "instrument",
                id: 9,
                len: 6,
                ..
            }
        ));
        assert!(matches!(
            LabelSpace::from_json(&minimal_json([0, 0, 1])).unwrap_err(),
            VocabError::ComponentOutOfRange { component: "target", .. }
        ));
    }

    #[test]
    fn duplicate_names_rejected_case_insensitively() {
        let text = r#"{"phases": ["a", "A"], "instruments": ["g"], "verbs": ["v"],
                       "targets": ["t"], "valid_triplets": [[0, 0, 0]]}"#;
        assert!(matches!(
            LabelSpace::from_json(text).unwrap_err(),
            VocabError::DuplicateName { list: "phases", .. }
        ));
    }

    #[test]
    fn schema_and_count_errors() {
        assert!(matches!(
            LabelSpace::from_json(r#"{"phases": []}"#).unwrap_err(),
            VocabError::Schema(_)
        ));
        let text = r#"{"phases": ["a"], "instruments": ["g"], "verbs": ["v"],
                       "targets": ["t"], "valid_triplets": [[0, 0, 0]],
                       "counts": {"phases": 7}}"#;
        assert!(matches!(
            LabelSpace::from_json(text).unwrap_err(),
            VocabError::CountMismatch {
                list: "phases",
                declared: 7,
                found: 1
            }
        ));
        assert!(matches!(
            load_label_space("/nonexistent/label_space.json").unwrap_err(),
            VocabError::Io { .. }
        ));
    }

    #[test]
    fn triplet_round_trip_and_exhaustive_membership() {
        let space = LabelSpace::cholect45();
        for k in 0..space.num_triplets() {
            assert_eq!(space.triplet_id(space.triplet_components(k).unwrap()).unwrap(), k);
        }
        assert_eq!(space.triplet_components(0).unwrap(), space.valid_triplets()[0]);
        assert!(space.triplet_components(100).is_err());

        // Brute force over the full product space: lookup succeeds exactly on listed tuples.
        let mut found = 0;
        for i in 0..6 {
            for v in 0..10 {
                for t in 0..15 {
                    let ivt = Ivt::new(i, v, t);
                    let listed = space.valid_triplets().iter().position(|x| *x == ivt);
                    match (space.triplet_id(ivt), listed) {
                        (Ok(id), Some(pos)) => {
                            assert_eq!(id, pos);
                            found += 1;
                        }
                        (Err(VocabError::UnknownTriplet(_)), None) => {}
                        other => panic!("mismatch for {ivt:?}: {other:?}"),
                    }
                }
            }
        }
        assert_eq!(found, 100);
    }

    #[test]
    fn loading_is_deterministic() {
        let a = LabelSpace::from_json(CHOLECT45_LABEL_SPACE).unwrap();
        let b = LabelSpace::from_json(CHOLECT45_LABEL_SPACE).unwrap();
        assert_eq!(a, b);
        let again = LabelSpace::from_json(&a.to_json()).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn case_insensitive_find() {
        let space = LabelSpace::cholect45();
        assert_eq!(space.find(LabelList::Instrument, "GRASPER"), Some(0));
        assert_eq!(space.find(LabelList::Target, "Liver"), Some(8));
        assert_eq!(space.find(LabelList::Verb, "graspe"), None);
    }
}
