//! Known task definitions.
//!
//! Labels are ordered negative class first, so for binary tasks index 1 is
//! the positive class.

use crate::multitask::{Granularity, TaskSpec};

pub const NEWSBIAS: &str = "newsbias";
pub const FAKENEWS: &str = "fakenews";
pub const RUMOR: &str = "rumor";
pub const CLICKBAIT: &str = "clickbait";
pub const BIAS_TYPE: &str = "bias_type";
pub const POLARITY: &str = "polarity";

pub const PROPAGANDA: &str = "propaganda";
pub const POLITIFACT: &str = "politifact";
pub const BUZZFEED: &str = "buzzfeed";
pub const COVID_CHECKWORTHY: &str = "covid_checkworthy";
pub const COVID_FALSE_CLAIM: &str = "covid_false_claim";

/// The four jointly trained tasks.
pub const MAIN_TASKS: [&str; 4] = [NEWSBIAS, FAKENEWS, RUMOR, CLICKBAIT];

/// Sizes of the source corpora: (task, total examples, positive-class examples).
pub const REFERENCE_SIZES: [(&str, usize, usize); 4] =
    [(NEWSBIAS, 7984, 1727), (FAKENEWS, 1627, 363), (RUMOR, 1705, 1067), (CLICKBAIT, 19538, 4761)];

pub fn spec(name: &str) -> Option<TaskSpec> {
    use Granularity::*;
    let s = match name {
        NEWSBIAS => TaskSpec::new(name, &["no-bias", "contains-bias"], Sentence, Some("contains-bias")),
        FAKENEWS => TaskSpec::new(name, &["true", "fake"], Article, Some("fake")),
        RUMOR => TaskSpec::new(name, &["true", "false"], Tweet, Some("false")),
        CLICKBAIT => TaskSpec::new(name, &["not-clickbait", "is-clickbait"], Headline, Some("is-clickbait")),
        BIAS_TYPE => TaskSpec::new(name, &["lexical", "informational"], Sentence, None),
        POLARITY => TaskSpec::new(name, &["positive", "negative", "neutral"], Sentence, None),
        PROPAGANDA => TaskSpec::new(name, &["non-propaganda", "propaganda"], Sentence, Some("propaganda")),
        POLITIFACT => TaskSpec::new(name, &["true", "fake"], Article, Some("fake")),
        BUZZFEED => TaskSpec::new(name, &["true", "fake"], Headline, Some("fake")),
        COVID_CHECKWORTHY => TaskSpec::new(name, &["no", "yes"], Tweet, Some("yes")),
        COVID_FALSE_CLAIM => TaskSpec::new(name, &["no", "yes"], Tweet, Some("yes")),
        _ => return None,
    };
    Some(s)
}

pub fn known_tasks() -> [&'static str; 11] {
    [
        NEWSBIAS,
        FAKENEWS,
        RUMOR,
        CLICKBAIT,
        BIAS_TYPE,
        POLARITY,
        PROPAGANDA,
        POLITIFACT,
        BUZZFEED,
        COVID_CHECKWORTHY,
        COVID_FALSE_CLAIM,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_specs_validate() {
        for name in known_tasks() {
            let s = spec(name).unwrap();
            s.validate().unwrap();
            assert_eq!(s.name, name);
        }
        assert!(spec("nope").is_none());
    }
}
