//! Opaque identifiers.
//!
//! Every id is `<prefix>_<26 lowercase base32 chars>`, the suffix being 128
//! random bits. The prefix names the entity kind so ids are readable in logs.

use std::fmt;

use serde::{Deserialize, Serialize};

const SUFFIX_LEN: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Study,
    Subject,
    Cohort,
    Test,
    TestSet,
    Task,
    Occurrence,
    Datapoint,
    Dataset,
    Result,
    Job,
    Rule,
}

impl EntityKind {
    pub const ALL: [EntityKind; 12] = [
        EntityKind::Study,
        EntityKind::Subject,
        EntityKind::Cohort,
        EntityKind::Test,
        EntityKind::TestSet,
        EntityKind::Task,
        EntityKind::Occurrence,
        EntityKind::Datapoint,
        EntityKind::Dataset,
        EntityKind::Result,
        EntityKind::Job,
        EntityKind::Rule,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            EntityKind::Study => "stu",
            EntityKind::Subject => "sub",
            EntityKind::Cohort => "coh",
            EntityKind::Test => "tst",
            EntityKind::TestSet => "tse",
            EntityKind::Task => "tsk",
            EntityKind::Occurrence => "occ",
            EntityKind::Datapoint => "dp",
            EntityKind::Dataset => "ds",
            EntityKind::Result => "res",
            EntityKind::Job => "job",
            EntityKind::Rule => "rul",
        }
    }
}

/// Lowercase unpadded base32 of `bytes`.
pub fn base32_lower(bytes: &[u8]) -> String {
    data_encoding::BASE32_NOPAD
        .encode(bytes)
        .to_ascii_lowercase()
}

/// Fresh random id for `kind`.
pub fn new_id(kind: EntityKind) -> String {
    let bytes: [u8; 16] = rand::random();
    format!("{}_{}", kind.prefix(), base32_lower(&bytes))
}

/// True when `s` has the shape of an id of `kind`.
pub fn is_well_formed(kind: EntityKind, s: &str) -> bool {
    let Some(rest) = s
        .strip_prefix(kind.prefix())
        .and_then(|r| r.strip_prefix('_'))
    else {
        return false;
    };
    rest.len() == SUFFIX_LEN
        && rest
            .bytes()
            .all(|b| b.is_ascii_lowercase() || (b'2'..=b'7').contains(&b))
}

macro_rules! define_id {
    ($(#[$meta:meta])* $name:ident, $kind:expr) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub const KIND: EntityKind = $kind;

            pub fn generate() -> Self {
                Self(new_id($kind))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }
    };
}

define_id!(StudyId, EntityKind::Study);
define_id!(
    /// Pseudonymous subject id; never derived from enrollment attributes.
    SubjectId,
    EntityKind::Subject
);
define_id!(CohortId, EntityKind::Cohort);
define_id!(TestId, EntityKind::Test);
define_id!(TestSetId, EntityKind::TestSet);
define_id!(TaskId, EntityKind::Task);
define_id!(OccurrenceId, EntityKind::Occurrence);
define_id!(DatapointId, EntityKind::Datapoint);
define_id!(DatasetId, EntityKind::Dataset);
define_id!(ResultId, EntityKind::Result);
define_id!(JobId, EntityKind::Job);
define_id!(RuleId, EntityKind::Rule);

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn two_ids_differ() {
        assert_ne!(new_id(EntityKind::Study), new_id(EntityKind::Study));
    }

    #[test]
    fn subject_prefix() {
        let id = new_id(EntityKind::Subject);
        assert!(id.starts_with("sub_"), "{id}");
        assert!(is_well_formed(EntityKind::Subject, &id));
        assert!(!is_well_formed(EntityKind::Study, &id));
    }

    #[test]
    fn every_kind_is_well_formed() {
        for kind in EntityKind::ALL {
            let id = new_id(kind);
            assert!(is_well_formed(kind, &id), "{id}");
            assert_eq!(id.len(), kind.prefix().len() + 1 + SUFFIX_LEN);
        }
    }

    #[test]
    fn hundred_thousand_ids_are_distinct() {
        let ids: HashSet<String> = (0..100_000).map(|_| new_id(EntityKind::Job)).collect();
        assert_eq!(ids.len(), 100_000);
    }

    #[test]
    fn typed_ids_carry_prefix() {
        assert!(DatapointId::generate().as_str().starts_with("dp_"));
        assert!(RuleId::generate().as_str().starts_with("rul_"));
    }
}
