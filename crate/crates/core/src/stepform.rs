// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parsers for the step sentence templates the generators, corruptions and
//! paraphrases produce.

use std::sync::LazyLock;

use regex::Regex;

static DYCK_CANON: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^Seen '(.)', stack depth is (-?\d+)\.$").unwrap());
static DYCK_PARA: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^After '(.)', the depth is now (-?\d+)\.$").unwrap());
static HOP: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^Since (\w+) is an? (\w+) and (all|every|no) (\w+) (?:are|is an?) (\w+), (\w+) is an? (\w+)\.$")
        .unwrap()
});
static CONCLUSION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:Conclusion:|In conclusion,) (\w+) is an? (\w+)(?:, not an? (\w+))?\.$").unwrap());
static RULE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(All|Every|Each|No) (\w+) (?:are|is an?) (\w+)\.$").unwrap());
static FACT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(\w+) is an? (\w+)\.").unwrap());
static RULE_IN_TEXT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"All (\w+) are (\w+)\.").unwrap());

/// A Dyck step: the token read and the depth the step states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DyckStep {
    pub token: char,
    pub stated_depth: i64,
}

pub fn parse_dyck_step(text: &str) -> Option<DyckStep> {
    let caps = DYCK_CANON.captures(text).or_else(|| DYCK_PARA.captures(text))?;
    Some(DyckStep {
        token: caps[1].chars().next()?,
        stated_depth: caps[2].parse().ok()?,
    })
}

/// A ProntoQA reasoning sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogicStep {
    /// `Since X is a A and all B are C, X is a D.`
    Hop {
        entity: String,
        premise: String,
        negated: bool,
        rule_from: String,
        rule_to: String,
        conclusion: String,
    },
    /// `Conclusion: X is a T[, not a Q].`
    Conclusion {
        entity: String,
        category: String,
        excluded: Option<String>,
    },
    /// `Every A is a B.` / `No A is a B.`
    Rule { negated: bool, from: String, to: String },
}

pub fn parse_logic_step(text: &str) -> Option<LogicStep> {
    if let Some(c) = HOP.captures(text) {
        return Some(LogicStep::Hop {
            entity: c[1].to_string(),
            premise: c[2].to_string(),
            negated: &c[3] == "no",
            rule_from: c[4].to_string(),
            rule_to: c[5].to_string(),
            conclusion: c[7].to_string(),
        });
    }
    if let Some(c) = CONCLUSION.captures(text) {
        return Some(LogicStep::Conclusion {
            entity: c[1].to_string(),
            category: c[2].to_string(),
            excluded: c.get(3).map(|m| m.as_str().to_string()),
        });
    }
    RULE.captures(text).map(|c| LogicStep::Rule {
        negated: &c[1] == "No",
        from: c[2].to_string(),
        to: c[3].to_string(),
    })
}

/// Facts and rules of a ProntoQA input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicInput {
    pub entity: String,
    pub category: String,
    pub rules: Vec<(String, String)>,
}

pub fn parse_logic_input(input: &str) -> Option<LogicInput> {
    let facts = input.strip_prefix("Facts: ")?;
    let (fact, rules) = facts.split_once(" Rules: ")?;
    let f = FACT.captures(fact)?;
    Some(LogicInput {
        entity: f[1].to_string(),
        category: f[2].to_string(),
        rules: RULE_IN_TEXT
            .captures_iter(rules)
            .map(|c| (c[1].to_string(), c[2].to_string()))
            .collect(),
    })
}

/// `Is X a Q?` → `Q`
pub fn parse_membership_question(question: &str) -> Option<String> {
    let body = question.strip_prefix("Is ")?.strip_suffix('?')?;
    body.rsplit(' ').next().map(str::to_string)
}

/// Tokens of a Dyck input line (`Input: ( [ {`).
pub fn parse_dyck_input(input: &str) -> Option<Vec<char>> {
    input
        .strip_prefix("Input: ")?
        .split_whitespace()
        .map(|t| {
            let mut cs = t.chars();
            let c = cs.next()?;
            cs.next().is_none().then_some(c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_template() {
        assert_eq!(
            parse_dyck_step("After '{', the depth is now 2."),
            Some(DyckStep {
                token: '{',
                stated_depth: 2
            })
        );
        assert!(matches!(
            parse_logic_step("Since Sam is a zumpus and every zumpus is an impus, Sam is an impus."),
            Some(LogicStep::Hop { negated: false, .. })
        ));
        assert_eq!(
            parse_logic_step("No wumpus is a zumpus."),
            Some(LogicStep::Rule {
                negated: true,
                from: "wumpus".into(),
                to: "zumpus".into()
            })
        );
        assert_eq!(
            parse_logic_step("Conclusion: Sam is a gorpus, not a wumpus."),
            Some(LogicStep::Conclusion {
                entity: "Sam".into(),
                category: "gorpus".into(),
                excluded: Some("wumpus".into())
            })
        );
        let inp =
            parse_logic_input("Facts: Sam is a zumpus. Rules: All zumpus are impus. All impus are rompus.").unwrap();
        assert_eq!(inp.rules.len(), 2);
        assert_eq!(parse_membership_question("Is Sam a wumpus?").as_deref(), Some("wumpus"));
        assert_eq!(parse_dyck_input("Input: ( [ <"), Some(vec!['(', '[', '<']));
    }
}
