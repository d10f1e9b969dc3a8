//! Event ontology: event types with their licensed argument-role schemas.
//!
//! The bundled default covers the 16 visually detectable event types used
//! throughout the corpus and both models. The on-disk format is one line
//! per type: `EventType<TAB>Role1,Role2,...`. Lines starting with `#` are
//! comments; a `# version:` comment sets the ontology version string.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_ONTOLOGY: &str = include_str!("../data/default_ontology.tsv");

/// One event type and its ordered argument-role schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventType {
    pub name: String,
    pub roles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    pub event_types: Vec<EventType>,
    pub version: String,
}

/// A single schema violation found while validating an annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownType { event_type: String },
    RoleNotInSchema { event_type: String, role: String },
}

impl Ontology {
    /// The bundled 16-type default ontology.
    pub fn bundled() -> Ontology {
        parse_ontology_text(DEFAULT_ONTOLOGY).expect("bundled ontology is valid")
    }

    pub fn event_type(&self, name: &str) -> Option<&EventType> {
        self.event_types.iter().find(|t| t.name == name)
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.event_types.iter().position(|t| t.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.event_type(name).is_some()
    }

    /// Ordered role list for an event type.
    pub fn roles_for(&self, event_type: &str) -> Result<&[String]> {
        self.event_type(event_type)
            .map(|t| t.roles.as_slice())
            .ok_or_else(|| Error::UnknownEventType(event_type.to_string()))
    }

    /// All distinct role names, in first-appearance order across the schema.
    pub fn distinct_roles(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for t in &self.event_types {
            for r in &t.roles {
                if seen.insert(r.clone()) {
                    out.push(r.clone());
                }
            }
        }
        out
    }

    pub fn save_text(&self) -> String {
        let mut out = format!("# version: {}\n", self.version);
        for t in &self.event_types {
            out.push_str(&format!("{}\t{}\n", t.name, t.roles.join(",")));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.event_types.is_empty() {
            return Err(Error::Validation("ontology has zero event types".into()));
        }
        let mut names = HashSet::new();
        for t in &self.event_types {
            if !names.insert(&t.name) {
                return Err(Error::Validation(format!(
                    "duplicate event type: {}",
                    t.name
                )));
            }
            if t.roles.is_empty() {
                return Err(Error::Validation(format!(
                    "event type {} has no roles",
                    t.name
                )));
            }
            let mut roles = HashSet::new();
            for r in &t.roles {
                if !roles.insert(r) {
                    return Err(Error::Validation(format!(
                        "duplicate role {} in event type {}",
                        r, t.name
                    )));
                }
            }
        }
        Ok(())
    }
}

fn parse_ontology_text(text: &str) -> Result<Ontology> {
    let mut version = String::from("unversioned");
    let mut event_types = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("version:") {
                version = v.trim().to_string();
            }
            continue;
        }
        let (name, roles_part) = line.split_once('\t').ok_or_else(|| Error::Format {
            line: lineno,
            msg: "expected `EventType<TAB>Role1,Role2,...`".into(),
        })?;
        let roles: Vec<String> = roles_part
            .split(',')
            .map(|r| r.trim().to_string())
            .filter(|r| !r.is_empty())
            .collect();
        if name.trim().is_empty() {
            return Err(Error::Format {
                line: lineno,
                msg: "empty event type name".into(),
            });
        }
        event_types.push(EventType {
            name: name.trim().to_string(),
            roles,
        });
    }
    let ontology = Ontology {
        event_types,
        version,
    };
    ontology.validate()?;
    Ok(ontology)
}

/// Load an ontology from either the line format (`.tsv`/`.txt`) or the
/// structured JSON mirror (`.json`).
pub fn load_ontology(path: &Path) -> Result<Ontology> {
    let text = std::fs::read_to_string(path)?;
    let ontology = if path.extension().map(|e| e == "json").unwrap_or(false) {
        let o: Ontology = serde_json::from_str(&text)?;
        o.validate()?;
        o
    } else {
        parse_ontology_text(&text)?
    };
    Ok(ontology)
}

pub fn save_ontology(ontology: &Ontology, path: &Path) -> Result<()> {
    if path.extension().map(|e| e == "json").unwrap_or(false) {
        std::fs::write(path, serde_json::to_string_pretty(ontology)?)?;
    } else {
        std::fs::write(path, ontology.save_text())?;
    }
    Ok(())
}

/// A minimal view of an event annotation for schema validation.
pub struct AnnotationView<'a> {
    pub event_type: &'a str,
    pub roles: Vec<&'a str>,
}

/// Report every schema violation in an annotation. Violations are data,
/// not errors: an empty list means the annotation conforms.
pub fn validate_annotation(ann: &AnnotationView, ontology: &Ontology) -> Vec<Violation> {
    let mut out = Vec::new();
    match ontology.event_type(ann.event_type) {
        None => out.push(Violation::UnknownType {
            event_type: ann.event_type.to_string(),
        }),
        Some(t) => {
            for role in &ann.roles {
                if !t.roles.iter().any(|r| r == role) {
                    out.push(Violation::RoleNotInSchema {
                        event_type: ann.event_type.to_string(),
                        role: role.to_string(),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_has_16_types() {
        let o = Ontology::bundled();
        assert_eq!(o.event_types.len(), 16);
    }

    #[test]
    fn arrest_jail_roles() {
        let o = Ontology::bundled();
        assert_eq!(
            o.roles_for("Justice.ArrestJail").unwrap(),
            &["Jailer", "Detainee", "Crime", "Place"]
        );
    }

    #[test]
    fn attack_and_transport_roles() {
        let o = Ontology::bundled();
        assert_eq!(
            o.roles_for("Conflict.Attack").unwrap(),
            &["Attacker", "Target", "Instrument", "Place"]
        );
        assert_eq!(
            o.roles_for("Movement.Transport").unwrap(),
            &[
                "Transporter",
                "PassengerArtifact",
                "Vehicle",
                "Origin",
                "Destination"
            ]
        );
    }

    #[test]
    fn unknown_type_is_lookup_error() {
        let o = Ontology::bundled();
        assert!(matches!(
            o.roles_for("NoSuchType"),
            Err(Error::UnknownEventType(_))
        ));
    }

    #[test]
    fn empty_ontology_rejected() {
        assert!(matches!(
            parse_ontology_text("# version: x\n"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn duplicate_role_rejected() {
        let err = parse_ontology_text("A.B\tRole,Role\n").unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("Role")),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn duplicate_type_rejected() {
        let err = parse_ontology_text("A.B\tX\nA.B\tY\n").unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("A.B")),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn format_error_carries_line_number() {
        let err = parse_ontology_text("A.B\tX\nbad line without tab\n").unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn validate_annotation_cases() {
        let o = Ontology::bundled();
        let ok = AnnotationView {
            event_type: "Conflict.Attack",
            roles: vec!["Attacker"],
        };
        assert!(validate_annotation(&ok, &o).is_empty());

        let bad_role = AnnotationView {
            event_type: "Conflict.Attack",
            roles: vec!["Detainee"],
        };
        let v = validate_annotation(&bad_role, &o);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::RoleNotInSchema { .. }));

        let bad_type = AnnotationView {
            event_type: "Foo.Bar",
            roles: vec![],
        };
        let v = validate_annotation(&bad_type, &o);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::UnknownType { .. }));
    }

    #[test]
    fn text_round_trip() {
        let o = Ontology::bundled();
        let text = o.save_text();
        let back = parse_ontology_text(&text).unwrap();
        assert_eq!(o, back);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ont.json");
        let o = Ontology::bundled();
        save_ontology(&o, &path).unwrap();
        let back = load_ontology(&path).unwrap();
        assert_eq!(o, back);
    }
}
