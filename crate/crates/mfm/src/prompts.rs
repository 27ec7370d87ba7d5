//! Prompt template registry and renderer.
//!
//! A template's input pattern mixes literal words with `{placeholder}` slots.
//! Every item mention — the history entries, the candidate list, a single
//! `{item}` — expands to a multimodal field: the item's sub-word pieces
//! followed by exactly `k` visual positions bound to the item's image
//! feature. Visual positions carry the pad token id, category 1, and the
//! item's whole-word id, so the model distinguishes them purely through the
//! category embedding and the mapped feature injected at embedding time.

use std::fmt;
use std::path::Path;

use crate::corpus::{Corpus, ItemRecord};
use crate::error::{Error, Result};
use crate::tokenizer::{
    encode, encode_from, TokenizedField, Vocabulary, CATEGORY_VISUAL, EOS_ID, PAD_ID,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskGroup {
    Sequential,
    Direct,
    Explanation,
}

impl TaskGroup {
    pub const ALL: [TaskGroup; 3] = [
        TaskGroup::Sequential,
        TaskGroup::Direct,
        TaskGroup::Explanation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskGroup::Sequential => "sequential",
            TaskGroup::Direct => "direct",
            TaskGroup::Explanation => "explanation",
        }
    }

    pub fn parse(s: &str) -> Option<TaskGroup> {
        match s {
            "sequential" => Some(TaskGroup::Sequential),
            "direct" => Some(TaskGroup::Direct),
            "explanation" => Some(TaskGroup::Explanation),
            _ => None,
        }
    }
}

impl fmt::Display for TaskGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether a template may be sampled during training or is reserved for
/// zero-shot evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateRole {
    TrainAndSeenEval,
    UnseenEval,
}

impl TemplateRole {
    fn as_str(&self) -> &'static str {
        match self {
            TemplateRole::TrainAndSeenEval => "train",
            TemplateRole::UnseenEval => "unseen",
        }
    }

    fn parse(s: &str) -> Option<TemplateRole> {
        match s {
            "train" => Some(TemplateRole::TrainAndSeenEval),
            "unseen" => Some(TemplateRole::UnseenEval),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Placeholder {
    User,
    History,
    Candidates,
    Item,
    Hint,
    Explanation,
}

impl Placeholder {
    fn name(&self) -> &'static str {
        match self {
            Placeholder::User => "user",
            Placeholder::History => "history",
            Placeholder::Candidates => "candidates",
            Placeholder::Item => "item",
            Placeholder::Hint => "hint",
            Placeholder::Explanation => "explanation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Placeholder),
}

fn parse_pattern(pattern: &str) -> Result<Vec<Segment>> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut chars = pattern.chars();
    while let Some(c) = chars.next() {
        if c != '{' {
            if c == '}' {
                return Err(Error::Config(format!(
                    "unbalanced '}}' in pattern '{pattern}'"
                )));
            }
            text.push(c);
            continue;
        }
        let mut name = String::new();
        loop {
            match chars.next() {
                Some('}') => break,
                Some(c) => name.push(c),
                None => {
                    return Err(Error::Config(format!(
                        "unterminated placeholder in pattern '{pattern}'"
                    )))
                }
            }
        }
        let slot = match name.as_str() {
            "user" => Placeholder::User,
            "history" => Placeholder::History,
            "candidates" => Placeholder::Candidates,
            "item" => Placeholder::Item,
            "hint" => Placeholder::Hint,
            "explanation" => Placeholder::Explanation,
            other => {
                return Err(Error::Config(format!(
                    "unknown placeholder '{{{other}}}' in pattern '{pattern}'"
                )))
            }
        };
        if !text.is_empty() {
            segments.push(Segment::Text(std::mem::take(&mut text)));
        }
        segments.push(Segment::Slot(slot));
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    Ok(segments)
}

/// One prompt template. Patterns use `{user}`, `{history}`, `{candidates}`,
/// `{item}`, `{hint}` on the input side and `{item}` or `{explanation}` on
/// the target side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub task_group: TaskGroup,
    pub role: TemplateRole,
    pub input_pattern: String,
    pub target_pattern: String,
}

impl PromptTemplate {
    fn new(
        id: &str,
        task_group: TaskGroup,
        role: TemplateRole,
        input_pattern: &str,
        target_pattern: &str,
    ) -> Self {
        PromptTemplate {
            id: id.to_string(),
            task_group,
            role,
            input_pattern: input_pattern.to_string(),
            target_pattern: target_pattern.to_string(),
        }
    }

    fn number(&self) -> Result<u32> {
        self.id
            .rsplit('-')
            .next()
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| {
                Error::Config(format!(
                    "template id '{}' has no numeric suffix after '-'",
                    self.id
                ))
            })
    }

    fn allowed_input(&self) -> &'static [Placeholder] {
        match self.task_group {
            TaskGroup::Sequential => &[Placeholder::User, Placeholder::History],
            TaskGroup::Direct => &[
                Placeholder::User,
                Placeholder::History,
                Placeholder::Candidates,
            ],
            TaskGroup::Explanation => &[Placeholder::User, Placeholder::Item, Placeholder::Hint],
        }
    }

    fn required_target(&self) -> Placeholder {
        match self.task_group {
            TaskGroup::Sequential | TaskGroup::Direct => Placeholder::Item,
            TaskGroup::Explanation => Placeholder::Explanation,
        }
    }

    fn validate(&self) -> Result<()> {
        let input = parse_pattern(&self.input_pattern)?;
        for seg in &input {
            if let Segment::Slot(p) = seg {
                if !self.allowed_input().contains(p) {
                    return Err(Error::Config(format!(
                        "template {}: placeholder {{{}}} not allowed in a {} input",
                        self.id,
                        p.name(),
                        self.task_group
                    )));
                }
            }
        }
        let target = parse_pattern(&self.target_pattern)?;
        let required = self.required_target();
        let mut found = false;
        for seg in &target {
            if let Segment::Slot(p) = seg {
                if *p != required {
                    return Err(Error::Config(format!(
                        "template {}: target may only use {{{}}}",
                        self.id,
                        required.name()
                    )));
                }
                found = true;
            }
        }
        if !found {
            return Err(Error::Config(format!(
                "template {}: target must contain {{{}}}",
                self.id,
                required.name()
            )));
        }
        self.number()?;
        Ok(())
    }

    pub fn uses_hint(&self) -> bool {
        parse_pattern(&self.input_pattern)
            .map(|segs| segs.contains(&Segment::Slot(Placeholder::Hint)))
            .unwrap_or(false)
    }

    pub fn uses_history(&self) -> bool {
        parse_pattern(&self.input_pattern)
            .map(|segs| segs.contains(&Segment::Slot(Placeholder::History)))
            .unwrap_or(false)
    }
}

/// The built-in prompt collection: 9 sequential, 8 direct, 12 explanation
/// templates; the highest-numbered template of each group is reserved for
/// unseen-template evaluation.
pub fn default_templates() -> Vec<PromptTemplate> {
    use TaskGroup::*;
    use TemplateRole::*;
    vec![
        PromptTemplate::new(
            "A-1", Sequential, TrainAndSeenEval,
            "user {user} has bought {history} ; what item will the user buy next ?",
            "{item}",
        ),
        PromptTemplate::new(
            "A-2", Sequential, TrainAndSeenEval,
            "given the purchase history {history} of user {user} , predict the next item .",
            "{item}",
        ),
        PromptTemplate::new(
            "A-3", Sequential, TrainAndSeenEval,
            "here is the chronological list {history} from user {user} ; choose the item that follows .",
            "{item}",
        ),
        PromptTemplate::new(
            "A-4", Sequential, TrainAndSeenEval,
            "user {user} recently interacted with {history} ; recommend the item they will want next .",
            "{item}",
        ),
        PromptTemplate::new(
            "A-5", Sequential, TrainAndSeenEval,
            "based on {history} , which item should we suggest to user {user} ?",
            "{item}",
        ),
        PromptTemplate::new(
            "A-6", Sequential, TrainAndSeenEval,
            "the sequence {history} belongs to user {user} ; continue it with one item .",
            "{item}",
        ),
        PromptTemplate::new(
            "A-7", Sequential, TrainAndSeenEval,
            "after going through {history} , what does user {user} pick next ?",
            "{item}",
        ),
        PromptTemplate::new(
            "A-8", Sequential, TrainAndSeenEval,
            "complete the shopping trail {history} of user {user} with the following item .",
            "{item}",
        ),
        PromptTemplate::new(
            "A-9", Sequential, UnseenEval,
            "considering the ordered records {history} from user {user} , name the item that comes next .",
            "{item}",
        ),
        PromptTemplate::new(
            "B-1", Direct, TrainAndSeenEval,
            "from the candidates {candidates} , choose the best item for user {user} .",
            "{item}",
        ),
        PromptTemplate::new(
            "B-2", Direct, TrainAndSeenEval,
            "user {user} is shown {candidates} ; which one fits this user best ?",
            "{item}",
        ),
        PromptTemplate::new(
            "B-3", Direct, TrainAndSeenEval,
            "pick the single item user {user} is most likely to enjoy out of {candidates} .",
            "{item}",
        ),
        PromptTemplate::new(
            "B-4", Direct, TrainAndSeenEval,
            "which of {candidates} should we recommend to user {user} ?",
            "{item}",
        ),
        PromptTemplate::new(
            "B-5", Direct, TrainAndSeenEval,
            "user {user} previously chose {history} ; select the matching item from {candidates} .",
            "{item}",
        ),
        PromptTemplate::new(
            "B-6", Direct, TrainAndSeenEval,
            "exactly one of {candidates} suits user {user} ; answer with that item .",
            "{item}",
        ),
        PromptTemplate::new(
            "B-7", Direct, TrainAndSeenEval,
            "no ranking needed ; just return the best option among {candidates} for user {user} .",
            "{item}",
        ),
        PromptTemplate::new(
            "B-8", Direct, UnseenEval,
            "given the history {history} of user {user} , choose the next item from the candidates {candidates} .",
            "{item}",
        ),
        PromptTemplate::new(
            "C-1", Explanation, TrainAndSeenEval,
            "help user {user} explain why the item {item} deserves its rating .",
            "{explanation}",
        ),
        PromptTemplate::new(
            "C-2", Explanation, TrainAndSeenEval,
            "write a short review sentence for user {user} about {item} .",
            "{explanation}",
        ),
        PromptTemplate::new(
            "C-3", Explanation, TrainAndSeenEval,
            "user {user} bought {item} ; generate an explanation for this choice .",
            "{explanation}",
        ),
        PromptTemplate::new(
            "C-4", Explanation, TrainAndSeenEval,
            "explain in one sentence what user {user} likes about {item} .",
            "{explanation}",
        ),
        PromptTemplate::new(
            "C-5", Explanation, TrainAndSeenEval,
            "compose the reason user {user} gives for picking {item} .",
            "{explanation}",
        ),
        PromptTemplate::new(
            "C-6", Explanation, TrainAndSeenEval,
            "what would user {user} say about {item} ? answer with one sentence .",
            "{explanation}",
        ),
        PromptTemplate::new(
            "C-7", Explanation, TrainAndSeenEval,
            "produce a justification from user {user} for the item {item} .",
            "{explanation}",
        ),
        PromptTemplate::new(
            "C-8", Explanation, TrainAndSeenEval,
            "summarize the opinion of user {user} on {item} .",
            "{explanation}",
        ),
        PromptTemplate::new(
            "C-9", Explanation, TrainAndSeenEval,
            "speaking as user {user} , tell us why {item} is worth it .",
            "{explanation}",
        ),
        PromptTemplate::new(
            "C-10", Explanation, TrainAndSeenEval,
            "using the feature word {hint} , explain why user {user} enjoys {item} .",
            "{explanation}",
        ),
        PromptTemplate::new(
            "C-11", Explanation, TrainAndSeenEval,
            "user {user} cares about {hint} ; write this user's comment on {item} .",
            "{explanation}",
        ),
        PromptTemplate::new(
            "C-12", Explanation, UnseenEval,
            "based on the hint {hint} , generate an explanation from user {user} for the item {item} .",
            "{explanation}",
        ),
    ]
}

/// Validated template collection with group/role lookups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> TemplateSet {
        let set = TemplateSet {
            templates: default_templates(),
        };
        set.validate().expect("built-in templates are valid");
        set
    }

    pub fn from_templates(templates: Vec<PromptTemplate>) -> Result<TemplateSet> {
        let set = TemplateSet { templates };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("template set is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.templates {
            t.validate()?;
            if !seen.insert(t.id.clone()) {
                return Err(Error::Config(format!("duplicate template id '{}'", t.id)));
            }
        }
        for group in TaskGroup::ALL {
            let members: Vec<&PromptTemplate> = self.group(group).collect();
            if members.is_empty() {
                continue;
            }
            let max_number = members
                .iter()
                .map(|t| t.number().expect("validated above"))
                .max()
                .unwrap();
            for t in &members {
                let is_last = t.number()? == max_number;
                let is_unseen = t.role == TemplateRole::UnseenEval;
                if is_last != is_unseen {
                    return Err(Error::Config(format!(
                        "template {}: the highest-numbered template of each group (and only \
                         it) must have the unseen role",
                        t.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn all(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn get(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn group(&self, group: TaskGroup) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter().filter(move |t| t.task_group == group)
    }

    /// Templates eligible for training-time sampling in a group.
    pub fn training_pool(&self, group: TaskGroup) -> Vec<&PromptTemplate> {
        self.group(group)
            .filter(|t| t.role == TemplateRole::TrainAndSeenEval)
            .collect()
    }

    pub fn unseen(&self, group: TaskGroup) -> Option<&PromptTemplate> {
        self.group(group).find(|t| t.role == TemplateRole::UnseenEval)
    }

    /// The six template ids the evaluation protocol reports: one seen and
    /// one unseen (held out of training) per task group.
    pub fn reporting_templates() -> [(TaskGroup, &'static str); 6] {
        [
            (TaskGroup::Sequential, "A-3"),
            (TaskGroup::Sequential, "A-9"),
            (TaskGroup::Direct, "B-5"),
            (TaskGroup::Direct, "B-8"),
            (TaskGroup::Explanation, "C-3"),
            (TaskGroup::Explanation, "C-12"),
        ]
    }

    /// Literal pattern words (placeholders stripped), for tokenizer training.
    pub fn literal_texts(&self) -> Vec<String> {
        self.templates
            .iter()
            .flat_map(|t| [&t.input_pattern, &t.target_pattern])
            .filter_map(|p| {
                let segs = parse_pattern(p).ok()?;
                let text: Vec<String> = segs
                    .into_iter()
                    .filter_map(|s| match s {
                        Segment::Text(t) => Some(t.trim().to_string()),
                        Segment::Slot(_) => None,
                    })
                    .filter(|t| !t.is_empty())
                    .collect();
                Some(text.join(" "))
            })
            .filter(|t| !t.is_empty())
            .collect()
    }

    /// Serialize as line-oriented records
    /// `id | task_group | role | input_pattern | target_pattern`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.templates {
            out.push_str(&format!(
                "{} | {} | {} | {} | {}\n",
                t.id,
                t.task_group.as_str(),
                t.role.as_str(),
                t.input_pattern,
                t.target_pattern
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TemplateSet> {
        let text = std::fs::read_to_string(path)?;
        let pathstr = path.display().to_string();
        let mut templates = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('|').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    path: pathstr.clone(),
                    line: i + 1,
                    msg: format!("expected 5 '|'-separated fields, got {}", fields.len()),
                });
            }
            let task_group = TaskGroup::parse(fields[1]).ok_or_else(|| Error::Parse {
                path: pathstr.clone(),
                line: i + 1,
                msg: format!("unknown task group '{}'", fields[1]),
            })?;
            let role = TemplateRole::parse(fields[2]).ok_or_else(|| Error::Parse {
                path: pathstr.clone(),
                line: i + 1,
                msg: format!("unknown role '{}' (expected train|unseen)", fields[2]),
            })?;
            templates.push(PromptTemplate::new(
                fields[0], task_group, role, fields[3], fields[4],
            ));
        }
        TemplateSet::from_templates(templates)
    }
}

/// An item field expanded to sub-word pieces plus `k` visual positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalField {
    pub tokens: TokenizedField,
    pub image_feature: Vec<f64>,
    pub has_image: bool,
    pub k: usize,
}

/// Expand one item into its multimodal field: the tokenized id followed by
/// `k` visual positions that share the id's whole-word id.
pub fn expand_item_field(item: &ItemRecord, k: usize, vocab: &Vocabulary) -> MultimodalField {
    let mut tokens = encode(vocab, &item.item_id);
    let word = tokens.whole_word_ids.last().copied().unwrap_or(0);
    for _ in 0..k {
        tokens.push(PAD_ID, word, CATEGORY_VISUAL);
    }
    MultimodalField {
        tokens,
        image_feature: item.image_feature.clone(),
        has_image: item.has_image,
        k,
    }
}

/// Task-specific data a template is rendered against.
#[derive(Debug, Clone)]
pub enum RenderTask<'a> {
    Sequential {
        history: &'a [String],
        target: &'a str,
    },
    Direct {
        history: &'a [String],
        candidates: &'a [String],
        target: &'a str,
    },
    Explanation {
        item: &'a str,
        explanation: &'a str,
        hint: Option<&'a str>,
    },
}

/// A fully tokenized prompt. `image_features` holds one vector per item
/// occurrence, in reading order; when `k > 0` the input carries exactly
/// `k × image_features.len()` visual positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub input: TokenizedField,
    pub image_features: Vec<Vec<f64>>,
    pub target: TokenizedField,
    pub template_id: String,
    pub user_id: String,
    /// Oldest history entries dropped to respect the length budget.
    pub dropped_history: usize,
}

struct Assembler<'v> {
    vocab: &'v Vocabulary,
    field: TokenizedField,
    features: Vec<Vec<f64>>,
    next_word: u32,
}

impl<'v> Assembler<'v> {
    fn new(vocab: &'v Vocabulary) -> Self {
        Assembler {
            vocab,
            field: TokenizedField::default(),
            features: Vec::new(),
            next_word: 0,
        }
    }

    fn push_text(&mut self, text: &str) {
        let f = encode_from(self.vocab, text, self.next_word);
        if let Some(&last) = f.whole_word_ids.last() {
            self.next_word = last + 1;
        }
        self.field.extend(&f);
    }

    fn push_item(&mut self, rec: &ItemRecord, k: usize) {
        let mf = expand_item_field(rec, k, self.vocab);
        let offset = self.next_word;
        for i in 0..mf.tokens.len() {
            self.field.push(
                mf.tokens.token_ids[i],
                mf.tokens.whole_word_ids[i] + offset,
                mf.tokens.category_ids[i],
            );
        }
        if let Some(&last) = self.field.whole_word_ids.last() {
            self.next_word = last + 1;
        }
        if k > 0 {
            self.features.push(mf.image_feature);
        }
    }
}

fn item_record<'c>(corpus: &'c Corpus, item_id: &str) -> Result<&'c ItemRecord> {
    corpus
        .items
        .get(item_id)
        .ok_or_else(|| Error::Config(format!("prompt references unknown item '{item_id}'")))
}

fn render_once(
    template: &PromptTemplate,
    corpus: &Corpus,
    user: &str,
    k: usize,
    task: &RenderTask<'_>,
    history_skip: usize,
    vocab: &Vocabulary,
) -> Result<RenderedPrompt> {
    let mut asm = Assembler::new(vocab);
    let segments = parse_pattern(&template.input_pattern)?;
    for seg in &segments {
        match seg {
            Segment::Text(t) => asm.push_text(t),
            Segment::Slot(Placeholder::User) => asm.push_text(user),
            Segment::Slot(Placeholder::History) => {
                let history = match task {
                    RenderTask::Sequential { history, .. } => *history,
                    RenderTask::Direct { history, .. } => *history,
                    RenderTask::Explanation { .. } => {
                        return Err(Error::Config(format!(
                            "template {} uses {{history}} outside a recommendation task",
                            template.id
                        )))
                    }
                };
                if history.is_empty() {
                    return Err(Error::EmptyTask(format!(
                        "user '{user}' has no history to render for template {}",
                        template.id
                    )));
                }
                let visible = &history[history_skip.min(history.len() - 1)..];
                for (i, item_id) in visible.iter().enumerate() {
                    if i > 0 {
                        asm.push_text(",");
                    }
                    asm.push_item(item_record(corpus, item_id)?, k);
                }
            }
            Segment::Slot(Placeholder::Candidates) => {
                let candidates = match task {
                    RenderTask::Direct { candidates, .. } => *candidates,
                    _ => {
                        return Err(Error::Config(format!(
                            "template {} uses {{candidates}} outside a direct task",
                            template.id
                        )))
                    }
                };
                if candidates.is_empty() {
                    return Err(Error::EmptyTask(format!(
                        "empty candidate list for template {}",
                        template.id
                    )));
                }
                for (i, item_id) in candidates.iter().enumerate() {
                    if i > 0 {
                        asm.push_text(",");
                    }
                    asm.push_item(item_record(corpus, item_id)?, k);
                }
            }
            Segment::Slot(Placeholder::Item) => {
                let item_id = match task {
                    RenderTask::Explanation { item, .. } => *item,
                    _ => {
                        return Err(Error::Config(format!(
                            "template {} uses {{item}} in its input outside an explanation task",
                            template.id
                        )))
                    }
                };
                asm.push_item(item_record(corpus, item_id)?, k);
            }
            Segment::Slot(Placeholder::Hint) => {
                let hint = match task {
                    RenderTask::Explanation { hint, .. } => hint.ok_or_else(|| {
                        Error::Config(format!(
                            "template {} needs a hint word but the record has none",
                            template.id
                        ))
                    })?,
                    _ => {
                        return Err(Error::Config(format!(
                            "template {} uses {{hint}} outside an explanation task",
                            template.id
                        )))
                    }
                };
                asm.push_text(hint);
            }
            Segment::Slot(Placeholder::Explanation) => {
                return Err(Error::Config(format!(
                    "template {} uses {{explanation}} in its input",
                    template.id
                )))
            }
        }
    }

    // Target side: plain text plus a closing end-of-sequence token.
    let mut target_asm = Assembler::new(vocab);
    for seg in parse_pattern(&template.target_pattern)? {
        match seg {
            Segment::Text(t) => target_asm.push_text(&t),
            Segment::Slot(Placeholder::Item) => {
                let item_id = match task {
                    RenderTask::Sequential { target, .. } => *target,
                    RenderTask::Direct { target, .. } => *target,
                    RenderTask::Explanation { item, .. } => *item,
                };
                target_asm.push_text(item_id);
            }
            Segment::Slot(Placeholder::Explanation) => {
                let explanation = match task {
                    RenderTask::Explanation { explanation, .. } => *explanation,
                    _ => {
                        return Err(Error::Config(format!(
                            "template {} targets {{explanation}} outside an explanation task",
                            template.id
                        )))
                    }
                };
                target_asm.push_text(explanation);
            }
            Segment::Slot(other) => {
                return Err(Error::Config(format!(
                    "template {} target may not use {{{}}}",
                    template.id,
                    other.name()
                )))
            }
        }
    }
    let eos_word = target_asm.next_word;
    target_asm.field.push(EOS_ID, eos_word, 0);

    Ok(RenderedPrompt {
        input: asm.field,
        image_features: asm.features,
        target: target_asm.field,
        template_id: template.id.clone(),
        user_id: user.to_string(),
        dropped_history: history_skip,
    })
}

/// Render a template against one task instance. When the input exceeds
/// `max_len`, the oldest history entries are dropped first; candidates and
/// the target are never truncated.
pub fn render(
    template: &PromptTemplate,
    corpus: &Corpus,
    user: &str,
    k: usize,
    max_len: usize,
    task: &RenderTask<'_>,
    vocab: &Vocabulary,
) -> Result<RenderedPrompt> {
    let history_len = match task {
        RenderTask::Sequential { history, .. } => history.len(),
        RenderTask::Direct { history, .. } => history.len(),
        RenderTask::Explanation { .. } => 0,
    };
    let mut skip = 0;
    loop {
        let prompt = render_once(template, corpus, user, k, task, skip, vocab)?;
        if prompt.input.len() <= max_len {
            return Ok(prompt);
        }
        if template.uses_history() && skip + 1 < history_len {
            skip += 1;
            continue;
        }
        return Err(Error::Range(format!(
            "prompt from template {} for user '{user}' is {} tokens even after dropping \
             history; maximum input length is {max_len}",
            template.id,
            prompt.input.len()
        )));
    }
}
