//! Stage 1: ask the model for True/False properties that split the solution
//! space of a user request roughly in half, then parse the final list.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ChatMessage, CompletionRequest};
use crate::error::{Error, Result};
use crate::strata::{PartitionProperty, PropertyOrigin};

pub const SYSTEM_PROMPT: &str = "You're a helpful brainstorming assistant that is careful to \
consider all factors to a problem.";

/// Header line that precedes the machine-readable property list. The
/// in-context example contains it too, so parsing takes the last occurrence.
pub const FINAL_LIST_HEADER: &str = "Final List of True/False Properties";

const REQUEST_SLOT: &str = "{request}";

const USER_TEMPLATE: &str = r#"I am tasked with the following request:

{request}

Help me brainstorm how to respond to the user request by providing a list of True/False properties the solution may or may not have. Use the following step-by-step to come up with good properties:

1. If you were playing 20 questions, what's a good first question to ask that would split the possibilities in half?
List at least 5 questions and their corresponding properties.
Question: <Description>
2. Rewrite each question as a True/False property that's true for one half and false for the other.
Question: <Description>
True/False Property: <Property Description>
3. For each property, come up with an example that would satisfy the property.
Property: <Description>
Example: <Description>
Is it a valid answer to the user's request? <Yes/No>
4. For each property, come up with an example that would not satisfy the property.
Property: <Description>
Example: <Description>
Is it a valid answer to the user's request? <Yes/No>
5. Does the property mention a candidate answer in it?
Property: <Description>
Does the property mention a candidate answer in it? <Yes/No>
6. For each property, list whether we should include it or not in the final list of properties. Do not include ones where an example from above is not valid or if it mentions a candidate answer in it.
Property: <Description>
Include in final list? <Yes/No>

Final List of True/False Properties:
1. <Property Description 1>
2. <Property Description 2>

Ensure all properties listed are sentences that are either True or False"#;

/// Request used by the in-context example turn.
const EXAMPLE_REQUEST: &str = "Name a month of the year.";

/// Frozen in-context example: one simulated assistant turn that walks the
/// template for [`EXAMPLE_REQUEST`] and ends with a final list.
const EXAMPLE_RESPONSE: &str = r#"1. If you were playing 20 questions, what's a good first question to ask that would split the possibilities in half?
Question: Does the month fall within the first half of the calendar year?
Question: Does the month have 31 days?
Question: Does the month contain a solstice or an equinox?
Question: Does the month's name end with the letter R?
Question: Does the month fall within a school semester?

2. Rewrite each question as a True/False property that's true for one half and false for the other.
Question: Does the month fall within the first half of the calendar year?
True/False Property: The month falls within the first half of the calendar year.
Question: Does the month have 31 days?
True/False Property: The month has 31 days.
Question: Does the month contain a solstice or an equinox?
True/False Property: The month contains a solstice or an equinox.
Question: Does the month's name end with the letter R?
True/False Property: The month's name ends with the letter R.
Question: Does the month fall within a school semester?
True/False Property: The month falls within a school semester.

3. For each property, come up with an example that would satisfy the property.
Property: The month falls within the first half of the calendar year.
Example: March
Is it a valid answer to the user's request? Yes
Property: The month has 31 days.
Example: July
Is it a valid answer to the user's request? Yes
Property: The month contains a solstice or an equinox.
Example: June
Is it a valid answer to the user's request? Yes
Property: The month's name ends with the letter R.
Example: October
Is it a valid answer to the user's request? Yes
Property: The month falls within a school semester.
Example: November
Is it a valid answer to the user's request? Yes

4. For each property, come up with an example that would not satisfy the property.
Property: The month falls within the first half of the calendar year.
Example: September
Is it a valid answer to the user's request? Yes
Property: The month has 31 days.
Example: April
Is it a valid answer to the user's request? Yes
Property: The month contains a solstice or an equinox.
Example: May
Is it a valid answer to the user's request? Yes
Property: The month's name ends with the letter R.
Example: August
Is it a valid answer to the user's request? Yes
Property: The month falls within a school semester.
Example: July
Is it a valid answer to the user's request? Yes

5. Does the property mention a candidate answer in it?
Property: The month falls within the first half of the calendar year.
Does the property mention a candidate answer in it? No
Property: The month has 31 days.
Does the property mention a candidate answer in it? No
Property: The month contains a solstice or an equinox.
Does the property mention a candidate answer in it? No
Property: The month's name ends with the letter R.
Does the property mention a candidate answer in it? No
Property: The month falls within a school semester.
Does the property mention a candidate answer in it? No

6. For each property, list whether we should include it or not in the final list of properties. Do not include ones where an example from above is not valid or if it mentions a candidate answer in it.
Property: The month falls within the first half of the calendar year.
Include in final list? Yes
Property: The month has 31 days.
Include in final list? Yes
Property: The month contains a solstice or an equinox.
Include in final list? No
Property: The month's name ends with the letter R.
Include in final list? No
Property: The month falls within a school semester.
Include in final list? No

Final List of True/False Properties:
1. The month falls within the first half of the calendar year.
2. The month has 31 days."#;

/// Record of one stratification run: the request, the raw model output, and
/// the properties parsed out of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoStratTranscript {
    pub request: String,
    pub raw_response: String,
    pub properties: Vec<PartitionProperty>,
}

/// Builds the stratification conversation: system prompt, one in-context
/// example turn, then the live request. Pure in `user_request`.
pub fn build_autostrat_prompt(user_request: &str) -> Result<Vec<ChatMessage>> {
    if user_request.trim().is_empty() {
        return Err(Error::InvalidInput("empty user request".into()));
    }
    Ok(vec![
        ChatMessage::system(SYSTEM_PROMPT),
        ChatMessage::user(USER_TEMPLATE.replace(REQUEST_SLOT, EXAMPLE_REQUEST)),
        ChatMessage::assistant(EXAMPLE_RESPONSE),
        ChatMessage::user(USER_TEMPLATE.replace(REQUEST_SLOT, user_request)),
    ])
}

static NUMBERED_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*\d+[.)]\s*(.+?)\s*$").unwrap());

/// Extracts the numbered items after the last [`FINAL_LIST_HEADER`] line.
/// Returns an empty list when the header is absent; a header followed by no
/// items is an error.
pub fn parse_property_list(raw_response: &str) -> Result<Vec<PartitionProperty>> {
    let lines: Vec<&str> = raw_response.lines().collect();
    let header_at = lines
        .iter()
        .rposition(|line| line.trim_start().starts_with(FINAL_LIST_HEADER));
    let Some(header_at) = header_at else {
        return Ok(Vec::new());
    };

    let mut statements = Vec::new();
    for line in &lines[header_at + 1..] {
        if line.trim().is_empty() {
            if statements.is_empty() {
                continue;
            }
            break;
        }
        match NUMBERED_ITEM.captures(line) {
            Some(captures) => statements.push(captures[1].to_string()),
            None => break,
        }
    }
    if statements.is_empty() {
        return Err(Error::EmptyPropertyList);
    }
    statements
        .into_iter()
        .enumerate()
        .map(|(i, statement)| {
            PartitionProperty::new(format!("p{}", i + 1), statement, PropertyOrigin::AutoStratified)
                .map_err(Error::Core)
        })
        .collect()
}

/// Runs stage 1: prompt, complete, parse. A parse that yields no properties
/// is retried once before surfacing an error.
pub fn run_auto_stratification(
    backend: &dyn Backend,
    user_request: &str,
    temperature: f64,
) -> Result<AutoStratTranscript> {
    let messages = build_autostrat_prompt(user_request)?;
    let request = CompletionRequest::new(backend.model(), messages)?
        .with_temperature(temperature)?
        .with_seed(0);

    let mut last_failure = None;
    for _ in 0..2 {
        let response = backend.complete(&request)?;
        match parse_property_list(&response.text) {
            Ok(properties) if !properties.is_empty() => {
                return Ok(AutoStratTranscript {
                    request: user_request.to_string(),
                    raw_response: response.text,
                    properties,
                });
            }
            Ok(_) => last_failure = Some(Error::EmptyPropertyList),
            Err(err) => last_failure = Some(err),
        }
    }
    Err(last_failure.unwrap_or(Error::EmptyPropertyList))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;

    #[test]
    fn prompt_embeds_request_in_final_user_turn() {
        let messages = build_autostrat_prompt("Name a US State").unwrap();
        assert_eq!(messages.len(), 4);
        assert_eq!(messages[0].content, SYSTEM_PROMPT);
        let live = &messages[3].content;
        assert!(live.contains("Name a US State"));
        assert!(live.contains("20 questions"));
        assert!(live.contains("Rewrite each question as a True/False property"));
        assert!(live.contains("Include in final list?"));
        assert!(live.contains(FINAL_LIST_HEADER));
    }

    #[test]
    fn prompt_rejects_empty_request() {
        assert!(build_autostrat_prompt("   ").is_err());
    }

    #[test]
    fn prompt_preserves_newlines_in_request() {
        let messages = build_autostrat_prompt("Name a US State\nwith a coastline").unwrap();
        assert!(messages[3]
            .content
            .contains("Name a US State\nwith a coastline"));
    }

    #[test]
    fn prompt_is_a_pure_function_of_the_request() {
        assert_eq!(
            build_autostrat_prompt("Name a US State").unwrap(),
            build_autostrat_prompt("Name a US State").unwrap()
        );
    }

    #[test]
    fn parses_single_property_after_header() {
        let raw = format!(
            "Some reasoning here.\n\n{FINAL_LIST_HEADER}:\n1. The state is east of the Mississippi River\n"
        );
        let properties = parse_property_list(&raw).unwrap();
        assert_eq!(properties.len(), 1);
        assert_eq!(
            properties[0].statement,
            "The state is east of the Mississippi River"
        );
        assert_eq!(properties[0].origin, PropertyOrigin::AutoStratified);
    }

    #[test]
    fn missing_header_yields_empty_list() {
        assert!(parse_property_list("no list here").unwrap().is_empty());
    }

    #[test]
    fn last_header_wins() {
        let raw = format!(
            "{FINAL_LIST_HEADER}:\n1. From the example turn\n\nmore text\n\n{FINAL_LIST_HEADER}:\n1. Live one\n2. Live two\n"
        );
        let properties = parse_property_list(&raw).unwrap();
        let statements: Vec<_> = properties.iter().map(|p| p.statement.as_str()).collect();
        assert_eq!(statements, vec!["Live one", "Live two"]);
    }

    #[test]
    fn header_without_items_is_an_error() {
        let raw = format!("{FINAL_LIST_HEADER}:\n\njust prose, no numbering");
        assert!(matches!(
            parse_property_list(&raw),
            Err(Error::EmptyPropertyList)
        ));
    }

    #[test]
    fn parse_is_idempotent_on_transcripts() {
        let raw = format!("{FINAL_LIST_HEADER}:\n1. The answer is a weekday.\n2. The answer starts with a vowel.\n");
        let first = parse_property_list(&raw).unwrap();
        let second = parse_property_list(&raw).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn run_parses_two_property_fixture() {
        let fixture = format!(
            "thinking...\n{FINAL_LIST_HEADER}:\n1. The state is east of the Mississippi River\n2. The state borders an ocean\n"
        );
        let backend = ScriptedBackend::new(vec![fixture]);
        let transcript = run_auto_stratification(&backend, "Name a US State", 0.0).unwrap();
        assert_eq!(transcript.properties.len(), 2);
        assert_eq!(backend.calls(), 1);
        for p in &transcript.properties {
            assert!(transcript.raw_response.contains(&p.statement));
        }
    }

    #[test]
    fn run_retries_once_then_errors_on_headerless_prose() {
        let backend = ScriptedBackend::new(vec![
            "no header at all".into(),
            "still no header".into(),
        ]);
        let err = run_auto_stratification(&backend, "Name a US State", 0.0).unwrap_err();
        assert!(matches!(err, Error::EmptyPropertyList));
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn run_recovers_when_retry_succeeds() {
        let fixture = format!("{FINAL_LIST_HEADER}:\n1. The answer is odd.\n");
        let backend = ScriptedBackend::new(vec!["garbled".into(), fixture]);
        let transcript = run_auto_stratification(&backend, "Pick a digit", 0.0).unwrap();
        assert_eq!(transcript.properties.len(), 1);
        assert_eq!(backend.calls(), 2);
    }
}
