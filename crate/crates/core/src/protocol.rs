//! Special-token transcript markup.
//!
//! A transcript is plain UTF-8 text in which six literal delimiters carve out
//! structure: execute blocks, feedback blocks, and the think/answer region
//! markers. Parsing is lossless: rendering the parsed segments reproduces the
//! input byte-for-byte. Everything after the answer marker is opaque text.
//!
//! Two entry points share the same grammar: [`parse`] works on a complete
//! string, while [`StreamParser`] accepts arbitrarily split chunks and reports
//! the moment an execute block opens so a generator can be paused at
//! [`EXECUTE_END`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXECUTE: &str = "<|execute|>";
pub const EXECUTE_END: &str = "<|execute_end|>";
pub const FEEDBACK: &str = "<|feedback|>";
pub const FEEDBACK_END: &str = "<|feedback_end|>";
pub const THINK: &str = "<|im_start|>think";
pub const ANSWER: &str = "<|im_start|>answer";

const DELIMITERS: [&str; 6] = [EXECUTE, EXECUTE_END, FEEDBACK, FEEDBACK_END, THINK, ANSWER];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("malformed transcript at byte {offset}: {reason}")]
    MalformedTranscript { offset: usize, reason: &'static str },
    #[error("invalid segment list at index {index}: {reason}")]
    InvalidSegmentList { index: usize, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Text,
    ExecuteBlock,
    FeedbackBlock,
    ThinkStart,
    AnswerStart,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub body: String,
}

impl Segment {
    pub fn text(body: impl Into<String>) -> Self {
        Self { kind: SegmentKind::Text, body: body.into() }
    }

    pub fn execute(body: impl Into<String>) -> Self {
        Self { kind: SegmentKind::ExecuteBlock, body: body.into() }
    }

    pub fn feedback(body: impl Into<String>) -> Self {
        Self { kind: SegmentKind::FeedbackBlock, body: body.into() }
    }

    pub fn think_start() -> Self {
        Self { kind: SegmentKind::ThinkStart, body: String::new() }
    }

    pub fn answer_start() -> Self {
        Self { kind: SegmentKind::AnswerStart, body: String::new() }
    }

    /// Appends the raw textual form of this segment to `out`.
    pub fn render_into(&self, out: &mut String) {
        match self.kind {
            SegmentKind::Text => out.push_str(&self.body),
            SegmentKind::ExecuteBlock => {
                out.push_str(EXECUTE);
                out.push_str(&self.body);
                out.push_str(EXECUTE_END);
            }
            SegmentKind::FeedbackBlock => {
                out.push_str(FEEDBACK);
                out.push_str(&self.body);
                out.push_str(FEEDBACK_END);
            }
            SegmentKind::ThinkStart => out.push_str(THINK),
            SegmentKind::AnswerStart => out.push_str(ANSWER),
        }
    }
}

/// Earliest occurrence of any delimiter in `hay`, ties broken by list order
/// (no two delimiters share a start position and a prefix relation, so ties
/// cannot actually occur).
fn find_delimiter(hay: &str) -> Option<(usize, &'static str)> {
    DELIMITERS
        .iter()
        .filter_map(|d| hay.find(d).map(|i| (i, *d)))
        .min_by_key(|(i, _)| *i)
}

pub fn parse(input: &str) -> Result<Vec<Segment>, ProtocolError> {
    let mut segments = Vec::new();
    let mut pos = 0;
    while pos < input.len() {
        let rest = &input[pos..];
        let Some((at, delim)) = find_delimiter(rest) else {
            segments.push(Segment::text(rest));
            break;
        };
        if at > 0 {
            segments.push(Segment::text(&rest[..at]));
        }
        let start = pos + at;
        let after = start + delim.len();
        match delim {
            EXECUTE => {
                let body_region = &input[after..];
                let close = body_region.find(EXECUTE_END).ok_or(ProtocolError::MalformedTranscript {
                    offset: start,
                    reason: "unclosed execute block",
                })?;
                if let Some(nested) = body_region[..close].find(EXECUTE) {
                    return Err(ProtocolError::MalformedTranscript {
                        offset: after + nested,
                        reason: "nested execute block",
                    });
                }
                segments.push(Segment::execute(&body_region[..close]));
                pos = after + close + EXECUTE_END.len();
            }
            FEEDBACK => {
                let body_region = &input[after..];
                let close = body_region.find(FEEDBACK_END).ok_or(ProtocolError::MalformedTranscript {
                    offset: start,
                    reason: "unclosed feedback block",
                })?;
                segments.push(Segment::feedback(&body_region[..close]));
                pos = after + close + FEEDBACK_END.len();
            }
            EXECUTE_END => {
                return Err(ProtocolError::MalformedTranscript {
                    offset: start,
                    reason: "execute close without open",
                })
            }
            FEEDBACK_END => {
                return Err(ProtocolError::MalformedTranscript {
                    offset: start,
                    reason: "feedback close without open",
                })
            }
            THINK => {
                segments.push(Segment::think_start());
                pos = after;
            }
            ANSWER => {
                segments.push(Segment::answer_start());
                if after < input.len() {
                    segments.push(Segment::text(&input[after..]));
                }
                break;
            }
            _ => unreachable!(),
        }
    }
    Ok(segments)
}

/// Checks the well-formedness precondition of [`render`]: the rendered text
/// must parse back into exactly the same list.
pub fn validate(segments: &[Segment]) -> Result<(), ProtocolError> {
    let invalid = |index, reason| Err(ProtocolError::InvalidSegmentList { index, reason });
    let mut prev_text = false;
    let mut answered = false;
    for (index, seg) in segments.iter().enumerate() {
        if answered {
            // Only one trailing text segment may follow the answer marker.
            if seg.kind != SegmentKind::Text || index + 1 != segments.len() {
                return invalid(index, "only a single text segment may follow the answer marker");
            }
            if seg.body.is_empty() {
                return invalid(index, "empty text segment");
            }
            continue;
        }
        match seg.kind {
            SegmentKind::Text => {
                if seg.body.is_empty() {
                    return invalid(index, "empty text segment");
                }
                if prev_text {
                    return invalid(index, "adjacent text segments");
                }
                if find_delimiter(&seg.body).is_some() {
                    return invalid(index, "text contains a delimiter");
                }
            }
            SegmentKind::ExecuteBlock => {
                if seg.body.contains(EXECUTE_END) || seg.body.contains(EXECUTE) {
                    return invalid(index, "execute body contains an execute delimiter");
                }
            }
            SegmentKind::FeedbackBlock => {
                if seg.body.contains(FEEDBACK_END) {
                    return invalid(index, "feedback body contains its closing delimiter");
                }
            }
            SegmentKind::ThinkStart | SegmentKind::AnswerStart => {
                if !seg.body.is_empty() {
                    return invalid(index, "marker segment with a body");
                }
                answered = seg.kind == SegmentKind::AnswerStart;
            }
        }
        prev_text = seg.kind == SegmentKind::Text;
    }
    Ok(())
}

pub fn render(segments: &[Segment]) -> Result<String, ProtocolError> {
    validate(segments)?;
    let mut out = String::new();
    for seg in segments {
        seg.render_into(&mut out);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Execute,
    Feedback,
}

/// Output of the streaming parser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    /// An opening block delimiter has just been seen in full.
    BlockOpen(BlockKind),
    Segment(Segment),
}

/// The event sequence a [`StreamParser`] produces for an already-parsed list.
pub fn events_for(segments: &[Segment]) -> Vec<Event> {
    let mut events = Vec::with_capacity(segments.len());
    for seg in segments {
        match seg.kind {
            SegmentKind::ExecuteBlock => events.push(Event::BlockOpen(BlockKind::Execute)),
            SegmentKind::FeedbackBlock => events.push(Event::BlockOpen(BlockKind::Feedback)),
            _ => {}
        }
        events.push(Event::Segment(seg.clone()));
    }
    events
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StreamMode {
    #[default]
    InText,
    InExecute,
    InFeedback,
    /// Past the answer marker; delimiters are no longer recognized.
    InAnswer,
}

/// Incremental parser state. A value type: clone it to fork a stream.
#[derive(Debug, Clone, Default)]
pub struct StreamParser {
    mode: StreamMode,
    /// Unresolved suffix; always a strict prefix of some delimiter.
    pending: String,
    body: String,
    consumed: usize,
    failed: bool,
}

fn is_strict_delimiter_prefix(s: &str) -> bool {
    DELIMITERS.iter().any(|d| d.len() > s.len() && d.starts_with(s))
}

/// Longest suffix of `s` that is a strict prefix of some delimiter.
fn held_suffix_len(s: &str) -> usize {
    let longest = DELIMITERS.iter().map(|d| d.len()).max().unwrap_or(0);
    let mut best = 0;
    for (i, _) in s.char_indices().rev() {
        let len = s.len() - i;
        if len >= longest {
            break;
        }
        if is_strict_delimiter_prefix(&s[i..]) {
            best = len;
        }
    }
    best
}

impl StreamParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mode(&self) -> StreamMode {
        self.mode
    }

    pub fn pending(&self) -> &str {
        &self.pending
    }

    fn malformed(&mut self, offset: usize, reason: &'static str) -> ProtocolError {
        self.failed = true;
        ProtocolError::MalformedTranscript { offset, reason }
    }

    pub fn feed(&mut self, chunk: &str) -> Result<Vec<Event>, ProtocolError> {
        if self.failed {
            return Err(ProtocolError::MalformedTranscript {
                offset: self.consumed,
                reason: "stream already failed",
            });
        }
        let mut events = Vec::new();
        if self.mode == StreamMode::InAnswer {
            self.body.push_str(chunk);
            self.consumed += chunk.len();
            return Ok(events);
        }
        let mut buf = std::mem::take(&mut self.pending);
        // Byte offset in the overall stream where `buf` starts.
        let base = self.consumed - buf.len();
        buf.push_str(chunk);
        self.consumed += chunk.len();

        let mut pos = 0;
        loop {
            if self.mode == StreamMode::InAnswer {
                self.body.push_str(&buf[pos..]);
                return Ok(events);
            }
            let rest = &buf[pos..];
            let Some((at, delim)) = find_delimiter(rest) else {
                let hold = held_suffix_len(rest);
                let split = rest.len() - hold;
                self.body.push_str(&rest[..split]);
                self.pending.push_str(&rest[split..]);
                return Ok(events);
            };
            let offset = base + pos + at;
            let before = &rest[..at];
            match (self.mode, delim) {
                (StreamMode::InText, EXECUTE) | (StreamMode::InText, FEEDBACK) => {
                    self.body.push_str(before);
                    self.flush_text(&mut events);
                    let kind = if delim == EXECUTE { BlockKind::Execute } else { BlockKind::Feedback };
                    self.mode = if delim == EXECUTE { StreamMode::InExecute } else { StreamMode::InFeedback };
                    events.push(Event::BlockOpen(kind));
                }
                (StreamMode::InText, THINK) | (StreamMode::InText, ANSWER) => {
                    self.body.push_str(before);
                    self.flush_text(&mut events);
                    if delim == THINK {
                        events.push(Event::Segment(Segment::think_start()));
                    } else {
                        events.push(Event::Segment(Segment::answer_start()));
                        self.mode = StreamMode::InAnswer;
                    }
                }
                (StreamMode::InText, EXECUTE_END) => {
                    return Err(self.malformed(offset, "execute close without open"));
                }
                (StreamMode::InText, FEEDBACK_END) => {
                    return Err(self.malformed(offset, "feedback close without open"));
                }
                (StreamMode::InExecute, EXECUTE_END) => {
                    self.body.push_str(before);
                    let body = std::mem::take(&mut self.body);
                    events.push(Event::Segment(Segment::execute(body)));
                    self.mode = StreamMode::InText;
                }
                (StreamMode::InExecute, EXECUTE) => {
                    return Err(self.malformed(offset, "nested execute block"));
                }
                (StreamMode::InFeedback, FEEDBACK_END) => {
                    self.body.push_str(before);
                    let body = std::mem::take(&mut self.body);
                    events.push(Event::Segment(Segment::feedback(body)));
                    self.mode = StreamMode::InText;
                }
                // Any other delimiter inside a block body is plain body text.
                _ => {
                    self.body.push_str(before);
                    self.body.push_str(delim);
                }
            }
            pos += at + delim.len();
        }
    }

    fn flush_text(&mut self, events: &mut Vec<Event>) {
        if !self.body.is_empty() {
            events.push(Event::Segment(Segment::text(std::mem::take(&mut self.body))));
        }
    }

    /// Signals end of input, flushing trailing text or reporting an unclosed block.
    pub fn finish(mut self) -> Result<Vec<Event>, ProtocolError> {
        if self.failed {
            return Err(ProtocolError::MalformedTranscript {
                offset: self.consumed,
                reason: "stream already failed",
            });
        }
        let pending = std::mem::take(&mut self.pending);
        self.body.push_str(&pending);
        match self.mode {
            StreamMode::InExecute => Err(ProtocolError::MalformedTranscript {
                offset: self.consumed,
                reason: "unclosed execute block",
            }),
            StreamMode::InFeedback => Err(ProtocolError::MalformedTranscript {
                offset: self.consumed,
                reason: "unclosed feedback block",
            }),
            StreamMode::InText | StreamMode::InAnswer => {
                let mut events = Vec::new();
                self.flush_text(&mut events);
                Ok(events)
            }
        }
    }
}
