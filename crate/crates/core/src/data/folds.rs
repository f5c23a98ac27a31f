use std::collections::BTreeSet;

use super::Dataset;
use crate::error::{Error, Result};

/// One leave-one-event-out fold.
#[derive(Debug, Clone, PartialEq)]
pub struct EventFold {
    pub event: String,
    pub train: Dataset,
    pub test: Dataset,
}

/// One fold per distinct event, ordered by event name: the event's examples
/// form the test set and everything else the training set.
pub fn leave_one_event_folds(dataset: &Dataset) -> Result<Vec<EventFold>> {
    let mut events = BTreeSet::new();
    for ex in dataset.examples() {
        match &ex.event {
            Some(e) => {
                events.insert(e.clone());
            }
            None => return Err(Error::Data(format!("example `{}` has no event tag", ex.id))),
        }
    }
    if events.len() < 2 {
        return Err(Error::Data(format!("need ≥2 events, found {}", events.len())));
    }
    Ok(events
        .into_iter()
        .map(|event| {
            let train = dataset.filter(|e| e.event.as_deref() != Some(event.as_str()));
            let test = dataset.filter(|e| e.event.as_deref() == Some(event.as_str()));
            EventFold { event, train, test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{catalog, Example};
    use std::collections::HashSet;

    fn rumor(events: usize, per_event: usize) -> Dataset {
        let mut ex = Vec::new();
        for e in 0..events {
            for i in 0..per_event {
                let label = if i % 2 == 0 { "true" } else { "false" };
                ex.push(Example::new(format!("{e}-{i}"), "t", "rumor", label).with_event(format!("event{e}")));
            }
        }
        Dataset::new(catalog::spec(catalog::RUMOR).unwrap(), ex).unwrap()
    }

    #[test]
    fn nine_events_nine_folds() {
        let d = rumor(9, 5);
        let folds = leave_one_event_folds(&d).unwrap();
        assert_eq!(folds.len(), 9);
        for f in &folds {
            let tr: HashSet<_> = f.train.examples().iter().map(|e| &e.id).collect();
            let te: HashSet<_> = f.test.examples().iter().map(|e| &e.id).collect();
            assert!(tr.is_disjoint(&te));
            assert_eq!(tr.len() + te.len(), d.len());
            assert!(f.train.examples().iter().all(|e| e.event.as_deref() != Some(&f.event)));
        }
        let names: Vec<_> = folds.iter().map(|f| f.event.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
    }

    #[test]
    fn single_event_rejected() {
        let err = leave_one_event_folds(&rumor(1, 4)).unwrap_err();
        assert!(err.to_string().contains("need ≥2 events"));
    }

    #[test]
    fn missing_tag_rejected() {
        let spec = catalog::spec(catalog::RUMOR).unwrap();
        let d = Dataset::new(spec, vec![Example::new("1", "t", "rumor", "true")]).unwrap();
        assert!(leave_one_event_folds(&d).is_err());
    }
}
