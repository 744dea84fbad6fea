//! Rendering and parsing of the structured per-frame output
//!
//! ```text
//! <think>...</think><answer> During <phase> phase, <N> surgical triplet(s) is/are identified:
//! (1) instrument is <I> [SEG], target is <O> [SEG], action is <V>. (2) ... </answer>
//! ```
//!
//! Token positions are indices into the whitespace-delimited token stream of
//! the full text. Only the `<answer>` segment is grammar-checked; the
//! `<think>` segment is kept verbatim.

use serde::{Deserialize, Serialize};

use crate::vocab::{Ivt, LabelList, LabelSpace};

pub const SEG_TOKEN: &str = "[SEG],";
const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Instrument,
    Target,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Instrument => "instrument",
            EntityKind::Target => "target",
        }
    }
}

/// Semantics of one frame: phase and triplet list (N = `triplets.len()`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSemantics {
    pub frame_index: usize,
    pub phase: usize,
    pub triplets: Vec<Ivt>,
}

impl FrameSemantics {
    pub fn num_triplets(&self) -> usize {
        self.triplets.len()
    }

    pub fn validate(&self, space: &LabelSpace) -> Result<(), RenderError> {
        if self.phase >= space.phases().len() {
            return Err(RenderError::InvalidPhase(self.phase));
        }
        for ivt in &self.triplets {
            space
                .triplet_id(*ivt)
                .map_err(|_| RenderError::InvalidTriplet(*ivt))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegMarker {
    pub entity_kind: EntityKind,
    pub triplet_index: usize,
    pub frame_index: usize,
    pub label_id: usize,
    pub token_position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub think_text: String,
    pub semantics: FrameSemantics,
    pub seg_markers: Vec<SegMarker>,
}

/// Byte range into the parsed text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("phase id {0} out of range")]
    InvalidPhase(usize),
    #[error("triplet {0:?} is not a valid combination")]
    InvalidTriplet(Ivt),
    #[error("think text must not contain {0}")]
    ReservedTag(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("missing {0} tag")]
    MissingTags(&'static str),
    #[error("unknown {list} name {name:?} at bytes {}..{}", span.start, span.end)]
    UnknownLabel {
        list: LabelList,
        name: String,
        span: Span,
    },
    #[error("answer declares {declared} triplet(s) but enumerates {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("[SEG] at bytes {}..{} is not preceded by an entity name", span.start, span.end)]
    DanglingSeg { span: Span },
    #[error("expected {expected} at bytes {}..{}, found {found:?}", span.start, span.end)]
    Malformed {
        expected: String,
        found: String,
        span: Span,
    },
    #[error("triplet {ivt:?} at bytes {}..{} is not a valid combination", span.start, span.end)]
    InvalidTriplet { ivt: Ivt, span: Span },
}

/// Role of one token in the answer segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Keyword,
    Phase,
    Count,
    Agreement,
    /// `(n)` opening item `n` (0-based).
    Enumerator(usize),
    Instrument(usize),
    Target(usize),
    Verb(usize),
    Seg(EntityKind, usize),
    Close,
}

impl Slot {
    /// Phase, instrument, target and verb names.
    pub fn is_entity(self) -> bool {
        matches!(
            self,
            Slot::Phase | Slot::Instrument(_) | Slot::Target(_) | Slot::Verb(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerToken {
    pub text: String,
    pub slot: Slot,
}

fn keyword(text: &str) -> AnswerToken {
    AnswerToken {
        text: text.to_string(),
        slot: Slot::Keyword,
    }
}

pub fn enumerator_token(n: usize) -> String {
    format!("({})", n + 1)
}

pub fn verb_token(name: &str) -> String {
    format!("{name}.")
}

pub fn agreement(n: usize) -> &'static str {
    if n == 1 {
        "is"
    } else {
        "are"
    }
}

/// The `<answer>` segment as a token sequence, from `<answer>` to `</answer>`.
pub fn answer_tokens(
    semantics: &FrameSemantics,
    space: &LabelSpace,
) -> Result<Vec<AnswerToken>, RenderError> {
    semantics.validate(space)?;
    let n = semantics.num_triplets();
    let mut out = vec![
        keyword(ANSWER_OPEN),
        keyword("During"),
        AnswerToken {
            text: space.phases()[semantics.phase].clone(),
            slot: Slot::Phase,
        },
        keyword("phase,"),
        AnswerToken {
            text: n.to_string(),
            slot: Slot::Count,
        },
        keyword("surgical"),
        keyword("triplet(s)"),
        AnswerToken {
            text: agreement(n).to_string(),
            slot: Slot::Agreement,
        },
        keyword("identified:"),
    ];
    for (k, ivt) in semantics.triplets.iter().enumerate() {
        let tok = |text: String, slot| AnswerToken { text, slot };
        out.push(tok(enumerator_token(k), Slot::Enumerator(k)));
        out.push(keyword("instrument"));
        out.push(keyword("is"));
        out.push(tok(space.instruments()[ivt.instrument].clone(), Slot::Instrument(k)));
        out.push(tok(SEG_TOKEN.into(), Slot::Seg(EntityKind::Instrument, k)));
        out.push(keyword("target"));
        out.push(keyword("is"));
        out.push(tok(space.targets()[ivt.target].clone(), Slot::Target(k)));
        out.push(tok(SEG_TOKEN.into(), Slot::Seg(EntityKind::Target, k)));
        out.push(keyword("action"));
        out.push(keyword("is"));
        out.push(tok(verb_token(&space.verbs()[ivt.verb]), Slot::Verb(k)));
    }
    out.push(AnswerToken {
        text: ANSWER_CLOSE.into(),
        slot: Slot::Close,
    });
    Ok(out)
}

/// Renders one frame's structured output text.
pub fn render(
    semantics: &FrameSemantics,
    think_text: &str,
    space: &LabelSpace,
) -> Result<String, RenderError> {
    for tag in [THINK_CLOSE, ANSWER_OPEN] {
        if think_text.contains(tag) {
            return Err(RenderError::ReservedTag(tag));
        }
    }
    let answer: Vec<String> = answer_tokens(semantics, space)?
        .into_iter()
        .map(|t| t.text)
        .collect();
    Ok(format!(
        "{THINK_OPEN}{think_text}{THINK_CLOSE}{}",
        answer.join(" ")
    ))
}

/// Parses a frame's output; the frame index is not part of the text.
pub fn parse(text: &str, space: &LabelSpace) -> Result<StructuredOutput, ParseError> {
    parse_frame(text, 0, space)
}

pub fn parse_frame(
    text: &str,
    frame_index: usize,
    space: &LabelSpace,
) -> Result<StructuredOutput, ParseError> {
    let think_open = text.find(THINK_OPEN).ok_or(ParseError::MissingTags(THINK_OPEN))?;
    if !text[..think_open].trim().is_empty() {
        return Err(ParseError::Malformed {
            expected: THINK_OPEN.into(),
            found: text[..think_open].trim().into(),
            span: Span {
                start: 0,
                end: think_open,
            },
        });
    }
    let think_start = think_open + THINK_OPEN.len();
    let think_end = text[think_start..]
        .find(THINK_CLOSE)
        .map(|i| think_start + i)
        .ok_or(ParseError::MissingTags(THINK_CLOSE))?;
    let after_think = think_end + THINK_CLOSE.len();
    let rest = &text[after_think..];
    let lead = rest.len() - rest.trim_start().len();
    if !rest[lead..].starts_with(ANSWER_OPEN) {
        return Err(ParseError::MissingTags(ANSWER_OPEN));
    }
    let body_start = after_think + lead + ANSWER_OPEN.len();
    let body_end = text[body_start..]
        .find(ANSWER_CLOSE)
        .map(|i| body_start + i)
        .ok_or(ParseError::MissingTags(ANSWER_CLOSE))?;
    let tail_start = body_end + ANSWER_CLOSE.len();
    if !text[tail_start..].trim().is_empty() {
        return Err(ParseError::Malformed {
            expected: "end of text".into(),
            found: text[tail_start..].trim().into(),
            span: Span {
                start: tail_start,
                end: text.len(),
            },
        });
    }

    let stream = token_starts(text);
    let tokens = tokenize(text, body_start, body_end);
    let mut cursor = Cursor {
        text,
        tokens: &tokens,
        pos: 0,
        end_offset: body_end,
    };

    cursor.keyword("During")?;
    let phase = cursor.label(space, LabelList::Phase, None)?;
    cursor.keyword("phase,")?;
    let (count_tok, count_span) = cursor.next("triplet count")?;
    let declared: usize = count_tok.parse().map_err(|_| ParseError::Malformed {
        expected: "triplet count".into(),
        found: count_tok.into(),
        span: count_span,
    })?;
    cursor.keyword("surgical")?;
    cursor.keyword("triplet(s)")?;
    let (agree_tok, agree_span) = cursor.next("is/are")?;
    if agree_tok != "is" && agree_tok != "are" {
        return Err(cursor.malformed("is/are", agree_tok, agree_span));
    }
    cursor.keyword("identified:")?;

    let mut triplets = Vec::new();
    let mut seg_markers = Vec::new();
    while !cursor.done() {
        let k = triplets.len();
        let (tok, span) = cursor.next("enumerator")?;
        if tok != enumerator_token(k) {
            if tok.starts_with("[SEG]") {
                return Err(ParseError::DanglingSeg { span });
            }
            return Err(cursor.malformed(&enumerator_token(k), tok, span));
        }
        let item_start = span.start;
        cursor.keyword("instrument")?;
        cursor.keyword("is")?;
        let instrument = cursor.label(space, LabelList::Instrument, None)?;
        let inst_seg = cursor.seg()?;
        cursor.keyword("target")?;
        cursor.keyword("is")?;
        let target = cursor.label(space, LabelList::Target, None)?;
        let target_seg = cursor.seg()?;
        cursor.keyword("action")?;
        cursor.keyword("is")?;
        let verb = cursor.label(space, LabelList::Verb, Some('.'))?;
        let ivt = Ivt::new(instrument, verb, target);
        if space.triplet_id(ivt).is_err() {
            return Err(ParseError::InvalidTriplet {
                ivt,
                span: Span {
                    start: item_start,
                    end: cursor.last_end(),
                },
            });
        }
        for (entity_kind, label_id, seg_span) in [
            (EntityKind::Instrument, instrument, inst_seg),
            (EntityKind::Target, target, target_seg),
        ] {
            seg_markers.push(SegMarker {
                entity_kind,
                triplet_index: k,
                frame_index,
                label_id,
                token_position: token_index(&stream, seg_span.start),
            });
        }
        triplets.push(ivt);
    }

    if declared != triplets.len() {
        return Err(ParseError::CountMismatch {
            declared,
            found: triplets.len(),
        });
    }
    if agree_tok != agreement(declared) {
        return Err(cursor.malformed(agreement(declared), agree_tok, agree_span));
    }

    Ok(StructuredOutput {
        think_text: text[think_start..think_end].to_string(),
        semantics: FrameSemantics {
            frame_index,
            phase,
            triplets,
        },
        seg_markers,
    })
}

/// Concatenates markers of per-frame outputs in (frame, template) order.
pub fn extract_seg_markers(outputs: &[StructuredOutput]) -> Vec<SegMarker> {
    outputs
        .iter()
        .flat_map(|o| o.seg_markers.iter().copied())
        .collect()
}

fn tokenize(text: &str, start: usize, end: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut tok_start = None;
    for (i, c) in text[start..end].char_indices() {
        let i = start + i;
        match (c.is_whitespace(), tok_start) {
            (true, Some(s)) => {
                out.push((s, i));
                tok_start = None;
            }
            (false, None) => tok_start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = tok_start {
        out.push((s, end));
    }
    out
}

fn token_starts(text: &str) -> Vec<usize> {
    tokenize(text, 0, text.len()).into_iter().map(|(s, _)| s).collect()
}

/// Index of the whitespace token containing `offset`.
fn token_index(starts: &[usize], offset: usize) -> usize {
    starts.partition_point(|&s| s <= offset) - 1
}

struct Cursor<'a> {
    text: &'a str,
    tokens: &'a [(usize, usize)],
    pos: usize,
    end_offset: usize,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.pos >= self.tokens.len()
    }

    fn last_end(&self) -> usize {
        self.tokens[self.pos - 1].1
    }

    fn next(&mut self, expected: &str) -> Result<(&'a str, Span), ParseError> {
        match self.tokens.get(self.pos) {
            Some(&(start, end)) => {
                self.pos += 1;
                Ok((&self.text[start..end], Span { start, end }))
            }
            None => Err(ParseError::Malformed {
                expected: expected.into(),
                found: ANSWER_CLOSE.into(),
                span: Span {
                    start: self.end_offset,
                    end: self.end_offset + ANSWER_CLOSE.len(),
                },
            }),
        }
    }

    fn malformed(&self, expected: &str, found: &str, span: Span) -> ParseError {
        ParseError::Malformed {
            expected: expected.into(),
            found: found.into(),
            span,
        }
    }

    fn keyword(&mut self, word: &str) -> Result<(), ParseError> {
        let (tok, span) = self.next(word)?;
        if tok == word {
            Ok(())
        } else if tok.starts_with("[SEG]") {
            Err(ParseError::DanglingSeg { span })
        } else {
            Err(self.malformed(word, tok, span))
        }
    }

    fn label(
        &mut self,
        space: &LabelSpace,
        list: LabelList,
        suffix: Option<char>,
    ) -> Result<usize, ParseError> {
        let (tok, span) = self.next(list.as_str())?;
        if tok.starts_with("[SEG]") {
            return Err(ParseError::DanglingSeg { span });
        }
        let (name, span) = match suffix {
            Some(c) => match tok.strip_suffix(c) {
                Some(name) => (
                    name,
                    Span {
                        start: span.start,
                        end: span.end - c.len_utf8(),
                    },
                ),
                None => return Err(self.malformed(&format!("{list} name ending in '{c}'"), tok, span)),
            },
            None => (tok, span),
        };
        space.find(list, name).ok_or_else(|| ParseError::UnknownLabel {
            list,
            name: name.to_string(),
            span,
        })
    }

    fn seg(&mut self) -> Result<Span, ParseError> {
        let (tok, span) = self.next(SEG_TOKEN)?;
        if tok == SEG_TOKEN {
            Ok(span)
        } else {
            Err(self.malformed(SEG_TOKEN, tok, span))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space() -> LabelSpace {
        LabelSpace::cholect45()
    }

    fn random_semantics(rng: &mut ChaCha8Rng, space: &LabelSpace) -> FrameSemantics {
        let n = rng.random_range(0..5);
        FrameSemantics {
            frame_index: rng.random_range(0..1000),
            phase: rng.random_range(0..space.phases().len()),
            triplets: (0..n)
                .map(|_| space.valid_triplets()[rng.random_range(0..space.num_triplets())])
                .collect(),
        }
    }

    fn random_think(rng: &mut ChaCha8Rng) -> String {
        const WORDS: &[&str] = &[
            "the", "grasper", "[SEG]", "phase", "<think>", "retracts", "tissue", "(1)", "\n",
            "identified:", "\t", "liver.", "is", "",
        ];
        let n = rng.random_range(0..12);
        let mut s = String::new();
        for _ in 0..n {
            s.push_str(WORDS[rng.random_range(0..WORDS.len())]);
            if rng.random_bool(0.7) {
                s.push(' ');
            }
        }
        s
    }

    #[test]
    fn single_triplet_template() {
        let space = space();
        let sem = FrameSemantics {
            frame_index: 0,
            phase: 1,
            triplets: vec![Ivt::new(0, 1, 8)],
        };
        let text = render(&sem, "looking at the liver", &space).unwrap();
        assert_eq!(
            text,
            "<think>looking at the liver</think><answer> During calot_triangle_dissection phase, \
             1 surgical triplet(s) is identified: (1) instrument is grasper [SEG], target is liver \
             [SEG], action is retract. </answer>"
        );
        assert!(text.contains("During calot_triangle_dissection phase, 1 surgical triplet(s)"));
        assert_eq!(text.matches("[SEG]").count(), 2);
        let out = parse(&text, &space).unwrap();
        let kinds: Vec<_> = out.seg_markers.iter().map(|m| m.entity_kind).collect();
        assert_eq!(kinds, vec![EntityKind::Instrument, EntityKind::Target]);
        let tokens: Vec<&str> = text.split_whitespace().collect();
        for m in &out.seg_markers {
            assert_eq!(tokens[m.token_position], "[SEG],");
        }
        assert_eq!(out.seg_markers[0].label_id, 0);
        assert_eq!(out.seg_markers[1].label_id, 8);
    }

    #[test]
    fn empty_answer() {
        let space = space();
        let sem = FrameSemantics {
            frame_index: 3,
            phase: 0,
            triplets: vec![],
        };
        let text = render(&sem, "", &space).unwrap();
        assert!(text.contains("0 surgical triplet(s) are identified: </answer>"));
        assert!(!text.contains("[SEG]"));
        assert!(!text.contains("(1)"));
        let out = parse_frame(&text, 3, &space).unwrap();
        assert_eq!(out.semantics, sem);
        assert!(out.seg_markers.is_empty());
    }

    #[test]
    fn plural_agreement() {
        let space = space();
        let sem = FrameSemantics {
            frame_index: 0,
            phase: 2,
            triplets: vec![Ivt::new(4, 4, 2), Ivt::new(0, 1, 0)],
        };
        let text = render(&sem, "", &space).unwrap();
        assert!(text.contains("2 surgical triplet(s) are identified: (1) instrument is clipper"));
        assert!(text.contains("(2) instrument is grasper [SEG], target is gallbladder [SEG]"));
    }

    #[test]
    fn render_rejects_invalid_ids() {
        let space = space();
        let bad_phase = FrameSemantics {
            frame_index: 0,
            phase: 7,
            triplets: vec![],
        };
        assert_eq!(render(&bad_phase, "", &space), Err(RenderError::InvalidPhase(7)));
        let bad_triplet = FrameSemantics {
            frame_index: 0,
            phase: 0,
            triplets: vec![Ivt::new(4, 0, 0)],
        };
        assert!(matches!(
            render(&bad_triplet, "", &space),
            Err(RenderError::InvalidTriplet(_))
        ));
        let ok = FrameSemantics {
            frame_index: 0,
            phase: 0,
            triplets: vec![],
        };
        assert!(matches!(
            render(&ok, "a</think>b", &space),
            Err(RenderError::ReservedTag(_))
        ));
    }

    #[test]
    fn round_trip_fuzz() {
        let space = space();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let sem = random_semantics(&mut rng, &space);
            let think = random_think(&mut rng);
            let text = render(&sem, &think, &space).unwrap();
            let out = parse_frame(&text, sem.frame_index, &space).unwrap();
            assert_eq!(out.semantics, sem);
            assert_eq!(out.think_text, think);
            assert_eq!(out.seg_markers.len(), 2 * sem.num_triplets());
            assert!(out
                .seg_markers
                .windows(2)
                .all(|w| w[0].token_position < w[1].token_position));
        }
    }

    #[test]
    fn count_mismatch() {
        let space = space();
        let sem = FrameSemantics {
            frame_index: 0,
            phase: 0,
            triplets: vec![Ivt::new(0, 1, 8)],
        };
        let text = render(&sem, "", &space)
            .unwrap()
            .replace("1 surgical triplet(s) is", "2 surgical triplet(s) are");
        assert_eq!(
            parse(&text, &space),
            Err(ParseError::CountMismatch {
                declared: 2,
                found: 1
            })
        );
    }

    #[test]
    fn unknown_label_carries_span() {
        let space = space();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut sem = random_semantics(&mut rng, &space);
            if sem.triplets.is_empty() {
                sem.triplets.push(Ivt::new(0, 1, 8));
            }
            let text = render(&sem, "x", &space).unwrap();
            let k = rng.random_range(0..sem.triplets.len());
            let name = &space.instruments()[sem.triplets[k].instrument];
            let needle = format!("({}) instrument is {name} ", k + 1);
            let at = text.find(&needle).unwrap() + needle.len() - 1 - name.len();
            let mutated = format!("{}{}{}", &text[..at], &name[..name.len() - 1], &text[at + name.len()..]);
            match parse(&mutated, &space) {
                Err(ParseError::UnknownLabel { list, name: bad, span }) => {
                    assert_eq!(list, LabelList::Instrument);
                    assert_eq!(span.slice(&mutated), bad);
                    assert_eq!(bad, name[..name.len() - 1]);
                }
                other => panic!("expected UnknownLabel, got {other:?}"),
            }
        }
        let text = render(
            &FrameSemantics {
                frame_index: 0,
                phase: 0,
                triplets: vec![Ivt::new(0, 1, 8)],
            },
            "",
            &space,
        )
        .unwrap()
        .replace("grasper", "graspe");
        assert!(matches!(
            parse(&text, &space),
            Err(ParseError::UnknownLabel { ref name, .. }) if name == "graspe"
        ));
    }

    #[test]
    fn dangling_seg_and_missing_tags() {
        let space = space();
        let text = "<think></think><answer> During preparation phase, 1 surgical triplet(s) is \
                    identified: (1) instrument is [SEG], target is liver [SEG], action is retract. </answer>";
        assert!(matches!(parse(text, &space), Err(ParseError::DanglingSeg { .. })));
        assert_eq!(
            parse("During preparation phase", &space),
            Err(ParseError::MissingTags("<think>"))
        );
        assert_eq!(
            parse("<think>abc", &space),
            Err(ParseError::MissingTags("</think>"))
        );
        assert_eq!(
            parse("<think>abc</think> nothing", &space),
            Err(ParseError::MissingTags("<answer>"))
        );
        assert_eq!(
            parse("<think></think><answer> During", &space),
            Err(ParseError::MissingTags("</answer>"))
        );
    }

    #[test]
    fn case_insensitive_names() {
        let space = space();
        let text = "<think></think><answer> During PREPARATION phase, 1 surgical triplet(s) is \
                    identified: (1) instrument is Grasper [SEG], target is LIVER [SEG], action is Retract. </answer>";
        let out = parse(text, &space).unwrap();
        assert_eq!(out.semantics.phase, 0);
        assert_eq!(out.semantics.triplets, vec![Ivt::new(0, 1, 8)]);
    }

    #[test]
    fn mutation_fuzz_is_total() {
        let space = space();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let sem = random_semantics(&mut rng, &space);
            let mut chars: Vec<char> = render(&sem, &random_think(&mut rng), &space)
                .unwrap()
                .chars()
                .collect();
            for _ in 0..rng.random_range(1..4) {
                if chars.is_empty() {
                    break;
                }
                let i = rng.random_range(0..chars.len());
                match rng.random_range(0..4) {
                    0 => {
                        chars.remove(i);
                    }
                    1 => chars.insert(i, ['[', ']', ' ', 'é', '<', '.'][rng.random_range(0..6)]),
                    2 => {
                        let j = rng.random_range(0..chars.len());
                        chars.swap(i, j);
                    }
                    _ => chars.truncate(i),
                }
            }
            let text: String = chars.into_iter().collect();
            let _ = parse(&text, &space);
        }
    }

    #[test]
    fn extract_concatenates_in_frame_order() {
        let space = space();
        let frames: Vec<StructuredOutput> = [1usize, 0, 2]
            .iter()
            .enumerate()
            .map(|(t, &n)| {
                let sem = FrameSemantics {
                    frame_index: t,
                    phase: 0,
                    triplets: space.valid_triplets()[..n].to_vec(),
                };
                parse_frame(&render(&sem, "", &space).unwrap(), t, &space).unwrap()
            })
            .collect();
        let markers = extract_seg_markers(&frames);
        assert_eq!(markers.len(), 6);
        let frame_ids: Vec<_> = markers.iter().map(|m| m.frame_index).collect();
        assert_eq!(frame_ids, vec![0, 0, 2, 2, 2, 2]);

        let permuted = vec![frames[2].clone(), frames[0].clone(), frames[1].clone()];
        let frame_ids: Vec<_> = extract_seg_markers(&permuted)
            .iter()
            .map(|m| m.frame_index)
            .collect();
        assert_eq!(frame_ids, vec![2, 2, 2, 2, 0, 0]);
    }
}
